//! Validation reports for environment specs.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Shape,
    FeatureNorm,
    MeasureNorm,
    RewardWeightNorm,
    TransitionMass,
    TransitionNegative,
    RewardRange,
    /// Agents in a set disagree on sizes or on a shared component.
    Consistency,
    /// A flavor-specific guarantee (pairwise deviation, context rank) fails.
    Flavor,
}

/// One violated invariant, with whatever coordinates locate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
    pub magnitude: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next_state: Option<usize>,
}

impl Violation {
    pub fn new(kind: ViolationKind, message: impl Into<String>, magnitude: f64) -> Self {
        Self {
            kind,
            message: message.into(),
            magnitude,
            agent: None,
            h: None,
            state: None,
            action: None,
            next_state: None,
        }
    }

    pub fn at_step(mut self, h: usize) -> Self {
        self.h = Some(h);
        self
    }

    pub fn at_pair(mut self, x: usize, a: usize) -> Self {
        self.state = Some(x);
        self.action = Some(a);
        self
    }

    pub fn at_next_state(mut self, next: usize) -> Self {
        self.next_state = Some(next);
        self
    }

    pub fn for_agent(mut self, agent: usize) -> Self {
        self.agent = Some(agent);
        self
    }
}

/// Empty means valid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, v: Violation) {
        self.violations.push(v);
    }

    /// Appends another report, tagging its entries with `agent`.
    pub fn absorb(&mut self, other: ValidationReport, agent: Option<usize>) {
        for mut v in other.violations {
            if v.agent.is_none() {
                v.agent = agent;
            }
            self.violations.push(v);
        }
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}
