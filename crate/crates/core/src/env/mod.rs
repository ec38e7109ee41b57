//! Environments: linear MDPs, parallel sets of them, and linear multi-agent
//! MDPs, together with exact dynamic-programming solvers.

pub mod linear;
pub mod mmdp;
pub mod parallel;
pub mod tabular;
pub mod validate;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use linear::{evaluate_policy, exact_q_star, generate_linear_mdp, LinearMdpSpec};
pub use mmdp::{
    decode_joint, encode_joint, enumerate_policies, exact_scalarized_q_star, generate_mmdp, pareto_dominates,
    start_value_vector, JointModel, MmdpShape, MmdpSpec, JOINT_BUDGET,
};
pub use parallel::{
    build_contextual_set, numerical_rank, perturb_small_deviation, total_variation, ContextualShape, Flavor,
    ParallelEnvSet,
};
pub use tabular::{argmax_first, DpSolution, Policy, TabularMdp, ValueTable};
pub use validate::{ValidationReport, Violation, ViolationKind};

use crate::error::{Error, Result};

/// Version of the on-disk spec document.
pub const SCHEMA_VERSION: u32 = 1;

/// Any environment spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "snake_case")]
pub enum AnySpec {
    Linear(LinearMdpSpec),
    Parallel(ParallelEnvSet),
    Mmdp(MmdpSpec),
}

impl AnySpec {
    pub fn validate(&self) -> ValidationReport {
        match self {
            AnySpec::Linear(s) => s.validate(),
            AnySpec::Parallel(s) => s.validate(),
            AnySpec::Mmdp(s) => s.validate(),
        }
    }
}

/// `{"schema_version": 1, "kind": ..., "spec": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecDocument {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: AnySpec,
}

impl SpecDocument {
    pub fn new(body: AnySpec) -> Self {
        Self { schema_version: SCHEMA_VERSION, body }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported spec schema version {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_round_trip() {
        let linear = generate_linear_mdp(3, 2, 2, 2, 1).unwrap();
        let set = perturb_small_deviation(&linear, 0.1, 2, 2).unwrap();
        let mmdp = generate_mmdp(&MmdpShape::new(vec![2, 2], vec![2, 1], 2, 2, 2), 3).unwrap();
        for body in [AnySpec::Linear(linear), AnySpec::Parallel(set), AnySpec::Mmdp(mmdp)] {
            let doc = SpecDocument::new(body);
            let text = doc.to_json().unwrap();
            assert!(text.contains("\"schema_version\": 1"));
            assert_eq!(SpecDocument::from_json(&text).unwrap(), doc);
            assert!(doc.body.validate().is_valid());
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let doc = SpecDocument::new(AnySpec::Linear(generate_linear_mdp(2, 1, 1, 1, 0).unwrap()));
        let text = doc.to_json().unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(SpecDocument::from_json(&text).is_err());
    }
}
