//! Explicit finite-horizon MDP tables and exact dynamic programming.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

/// Per-step value table indexed `[h][x]`, with a trailing all-zero row for `h = H`.
pub type ValueTable = Vec<Vec<f64>>;

/// A deterministic non-stationary policy, `actions[h][x]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Policy {
    pub actions: Vec<Vec<usize>>,
}

impl Policy {
    pub fn constant(horizon: usize, num_states: usize, action: usize) -> Self {
        Self {
            actions: vec![vec![action; num_states]; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn action(&self, h: usize, x: usize) -> usize {
        self.actions[h][x]
    }

    pub fn check(&self, num_states: usize, num_actions: usize, horizon: usize) -> Result<()> {
        if self.actions.len() != horizon {
            return Err(invalid(format!(
                "policy covers {} steps, expected {horizon}",
                self.actions.len()
            )));
        }
        for (h, row) in self.actions.iter().enumerate() {
            if row.len() != num_states {
                return Err(invalid(format!("policy row {h} has {} states", row.len())));
            }
            if let Some(a) = row.iter().find(|a| **a >= num_actions) {
                return Err(invalid(format!("policy action {a} out of range at step {h}")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the action table.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for row in &self.actions {
            for a in row {
                hasher.update((*a as u64).to_le_bytes());
            }
            hasher.update(u64::MAX.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Optimal action values, state values and the greedy optimal policy.
#[derive(Clone, Debug, PartialEq)]
pub struct DpSolution {
    /// `q_star[h][x * A + a]`.
    pub q_star: Vec<Vec<f64>>,
    /// `v_star[h][x]` for `h in 0..=H`; the last row is zero.
    pub v_star: ValueTable,
    pub greedy: Policy,
}

impl DpSolution {
    pub fn q(&self, h: usize, x: usize, a: usize) -> f64 {
        let num_actions = self.q_star[h].len() / self.v_star[h].len();
        self.q_star[h][x * num_actions + a]
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a (possibly slightly unnormalized) categorical row.
pub fn sample_categorical(row: &[f64], u: f64) -> usize {
    let total: f64 = row.iter().map(|p| p.max(0.0)).sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in row.iter().enumerate() {
        let p = p.max(0.0);
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if target < acc {
            return i;
        }
    }
    last_positive
}

/// Reward and transition tables of a finite-horizon MDP.
///
/// Transition tables are shared behind an `Arc` so that many reward
/// scalarizations of one multi-agent model can reuse them.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rewards: Vec<Vec<f64>>,
    transitions: Arc<Vec<Vec<Vec<f64>>>>,
}

impl TabularMdp {
    /// `rewards[h][z]` and `transitions[h][z][x']` with `z = x * A + a`.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        rewards: Vec<Vec<f64>>,
        transitions: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let table = Self {
            num_states,
            num_actions,
            horizon,
            rewards,
            transitions: Arc::new(transitions),
        };
        table.check_shapes()?;
        Ok(table)
    }

    fn check_shapes(&self) -> Result<()> {
        let z = self.num_states * self.num_actions;
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 {
            return Err(invalid("tabular MDP sizes must be positive"));
        }
        if self.rewards.len() != self.horizon || self.rewards.iter().any(|r| r.len() != z) {
            return Err(invalid("reward table shape mismatch"));
        }
        if self.transitions.len() != self.horizon
            || self
                .transitions
                .iter()
                .any(|t| t.len() != z || t.iter().any(|row| row.len() != self.num_states))
        {
            return Err(invalid("transition table shape mismatch"));
        }
        Ok(())
    }

    /// Same dynamics, different rewards.
    pub fn with_rewards(&self, rewards: Vec<Vec<f64>>) -> Result<Self> {
        let table = Self {
            rewards,
            transitions: Arc::clone(&self.transitions),
            ..*self
        };
        table.check_shapes()?;
        Ok(table)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn reward(&self, h: usize, x: usize, a: usize) -> f64 {
        self.rewards[h][x * self.num_actions + a]
    }

    pub fn transition(&self, h: usize, x: usize, a: usize) -> &[f64] {
        &self.transitions[h][x * self.num_actions + a]
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    fn check_index(&self, h: usize, x: usize, a: usize) -> Result<()> {
        if h >= self.horizon || x >= self.num_states || a >= self.num_actions {
            return Err(invalid(format!(
                "(h={h}, x={x}, a={a}) outside H={}, S={}, A={}",
                self.horizon, self.num_states, self.num_actions
            )));
        }
        Ok(())
    }

    /// Executes one transition: exact reward, next state by inverse CDF.
    pub fn step<R: Rng + ?Sized>(
        &self,
        h: usize,
        x: usize,
        a: usize,
        rng: &mut R,
    ) -> Result<(f64, usize)> {
        self.check_index(h, x, a)?;
        let u: f64 = rng.random();
        Ok((self.reward(h, x, a), sample_categorical(self.transition(h, x, a), u)))
    }

    fn expectation(&self, h: usize, z: usize, next: &[f64]) -> f64 {
        self.transitions[h][z]
            .iter()
            .zip(next)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Backward induction for `Q*`, `V*` and the optimal greedy policy.
    pub fn solve(&self) -> DpSolution {
        let (s, a_n, horizon) = (self.num_states, self.num_actions, self.horizon);
        let mut q_star = vec![vec![0.0; s * a_n]; horizon];
        let mut v_star = vec![vec![0.0; s]; horizon + 1];
        let mut greedy = Policy::constant(horizon, s, 0);
        for h in (0..horizon).rev() {
            for z in 0..s * a_n {
                q_star[h][z] = self.rewards[h][z] + self.expectation(h, z, &v_star[h + 1]);
            }
            for x in 0..s {
                let row = &q_star[h][x * a_n..(x + 1) * a_n];
                let best = argmax_first(row);
                greedy.actions[h][x] = best;
                v_star[h][x] = row[best];
            }
        }
        DpSolution {
            q_star,
            v_star,
            greedy,
        }
    }

    /// Exact backward evaluation of a deterministic policy.
    pub fn evaluate(&self, policy: &Policy) -> Result<ValueTable> {
        policy.check(self.num_states, self.num_actions, self.horizon)?;
        Ok(self.evaluate_unchecked(policy))
    }

    pub(crate) fn evaluate_unchecked(&self, policy: &Policy) -> ValueTable {
        let mut values = vec![vec![0.0; self.num_states]; self.horizon + 1];
        for h in (0..self.horizon).rev() {
            for x in 0..self.num_states {
                let z = x * self.num_actions + policy.actions[h][x];
                values[h][x] = self.rewards[h][z] + self.expectation(h, z, &values[h + 1]);
            }
        }
        values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two states, two actions: action 0 stays, action 1 switches.
    /// Reward 1 only in state 1.
    fn chain(horizon: usize) -> TabularMdp {
        let stay_switch = vec![
            vec![1.0, 0.0], // x=0, stay
            vec![0.0, 1.0], // x=0, switch
            vec![0.0, 1.0], // x=1, stay
            vec![1.0, 0.0], // x=1, switch
        ];
        TabularMdp::new(
            2,
            2,
            horizon,
            vec![vec![0.0, 0.0, 1.0, 1.0]; horizon],
            vec![stay_switch; horizon],
        )
        .unwrap()
    }

    #[test]
    fn chain_optimum() {
        let sol = chain(4).solve();
        assert_eq!(sol.v_star[0][1], 4.0);
        assert_eq!(sol.greedy.action(0, 1), 0);
        // From state 0: switch (reward 0) then collect 3.
        assert_eq!(sol.v_star[0][0], 3.0);
        assert!(sol.v_star[4].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_q_is_reward() {
        let sol = chain(1).solve();
        assert_eq!(sol.q_star[0], vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn greedy_policy_evaluates_to_optimum() {
        let mdp = chain(3);
        let sol = mdp.solve();
        assert_eq!(mdp.evaluate(&sol.greedy).unwrap(), sol.v_star);
    }

    #[test]
    fn hand_computed_suboptimal_policy() {
        // Always switch, H=2: from 1: 1 + 0 = 1; from 0: 0 + 1 = 1.
        let mdp = chain(2);
        let v = mdp.evaluate(&Policy::constant(2, 2, 1)).unwrap();
        assert_eq!(v[0], vec![1.0, 1.0]);
        let sol = mdp.solve();
        assert_eq!(sol.v_star[0][0] - v[0][0], 0.0);
        assert_eq!(sol.v_star[0][1] - v[0][1], 1.0);
    }

    #[test]
    fn evaluate_rejects_malformed_policies() {
        let mdp = chain(2);
        assert!(mdp.evaluate(&Policy::constant(1, 2, 0)).is_err());
        assert!(mdp.evaluate(&Policy::constant(2, 2, 5)).is_err());
    }

    #[test]
    fn tie_break_lowest_index() {
        assert_eq!(argmax_first(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax_first(&[0.1, 0.9, 0.5]), 1);
    }

    #[test]
    fn categorical_inverse_cdf() {
        let row = [0.2, 0.0, 0.8];
        assert_eq!(sample_categorical(&row, 0.0), 0);
        assert_eq!(sample_categorical(&row, 0.19), 0);
        assert_eq!(sample_categorical(&row, 0.2), 2);
        assert_eq!(sample_categorical(&row, 0.999_999), 2);
        assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], 0.999_999_999), 1);
    }

    #[test]
    fn step_checks_indices() {
        let mdp = chain(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mdp.step(2, 0, 0, &mut rng).is_err());
        assert!(mdp.step(0, 2, 0, &mut rng).is_err());
        assert_eq!(mdp.step(0, 0, 1, &mut rng).unwrap(), (0.0, 1));
    }

    #[test]
    fn digest_distinguishes_policies() {
        let a = Policy::constant(2, 3, 0);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.actions[1][2] = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
