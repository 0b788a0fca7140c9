//! Per-client Age of Update (AoU) with pluggable growth.
//!
//! An unselected client ages by `x²` per round, a selected client resets to
//! zero. With `x ≡ 1` this is the classic linear age-of-update recurrence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial staleness of every client before the first round.
pub const INITIAL_AGE: f64 = 1.0;

/// How the per-round increment base `x` is computed for a client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Growth {
    /// `x = c` for every client and round.
    Constant(f64),
    /// `x` = rounds since the client was last reset, counting this one (starts at 1).
    Staleness,
    /// `x` = zero-based round index + 1.
    Round,
}

impl Default for Growth {
    fn default() -> Self {
        Growth::Staleness
    }
}

impl Growth {
    /// Increment base for a client last reset at `last_selected` when stepping `round`.
    pub fn x(&self, last_selected: Option<usize>, round: usize) -> f64 {
        match *self {
            Growth::Constant(c) => c,
            Growth::Staleness => match last_selected {
                Some(r) => round.saturating_sub(r) as f64,
                None => (round + 1) as f64,
            },
            Growth::Round => (round + 1) as f64,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            Growth::Constant(c) if !c.is_finite() || c < 0.0 => {
                Err(format!("growth constant must be finite and >= 0, got {c}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Growth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Growth::Constant(c) => write!(f, "constant:{c}"),
            Growth::Staleness => f.write_str("staleness"),
            Growth::Round => f.write_str("round"),
        }
    }
}

impl FromStr for Growth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "staleness" => Ok(Growth::Staleness),
            "round" => Ok(Growth::Round),
            "constant" => Ok(Growth::Constant(1.0)),
            _ => match s.strip_prefix("constant:") {
                Some(c) => c
                    .parse::<f64>()
                    .map(Growth::Constant)
                    .map_err(|_| format!("bad growth constant `{c}`")),
                None => Err(format!(
                    "unknown growth `{s}` (expected staleness, round or constant:<c>)"
                )),
            },
        }
    }
}

impl TryFrom<String> for Growth {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Growth> for String {
    fn from(g: Growth) -> String {
        g.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AouState {
    ages: Vec<f64>,
    last_selected: Vec<Option<usize>>,
    growth: Growth,
}

impl AouState {
    pub fn new(clients: usize, growth: Growth) -> Self {
        Self {
            ages: vec![INITIAL_AGE; clients],
            last_selected: vec![None; clients],
            growth,
        }
    }

    pub fn clients(&self) -> usize {
        self.ages.len()
    }

    pub fn growth(&self) -> Growth {
        self.growth
    }

    pub fn age(&self, k: usize) -> f64 {
        self.ages[k]
    }

    pub fn last_selected(&self, k: usize) -> Option<usize> {
        self.last_selected[k]
    }

    /// Copy of the current ages.
    pub fn snapshot(&self) -> Vec<f64> {
        self.ages.clone()
    }

    /// Advances one round: clients in `selected` reset to 0, everyone else
    /// grows by `x²`. Leaves `self` untouched.
    pub fn step(&self, selected: &[usize], round: usize) -> Result<AouState> {
        let mut next = self.clone();
        self.step_into(selected, round, &mut next)?;
        Ok(next)
    }

    /// Same as [`AouState::step`], writing the result into `out` and reusing
    /// its buffers.
    pub fn step_into(&self, selected: &[usize], round: usize, out: &mut AouState) -> Result<()> {
        let k_total = self.clients();
        if let Some(&k) = selected.iter().find(|&&k| k >= k_total) {
            return Err(Error::invalid(format!(
                "client id {k} out of range for {k_total} clients"
            )));
        }

        out.growth = self.growth;
        out.ages.resize(k_total, 0.0);
        out.last_selected.resize(k_total, None);
        out.last_selected.copy_from_slice(&self.last_selected);
        for ((next, &age), &last) in out.ages.iter_mut().zip(&self.ages).zip(&self.last_selected) {
            let x = self.growth.x(last, round);
            *next = age + x * x;
        }
        for &k in selected {
            out.ages[k] = 0.0;
            out.last_selected[k] = Some(round);
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        if self.ages.is_empty() {
            return 0.0;
        }
        self.ages.iter().sum::<f64>() / self.ages.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.ages.iter().copied().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_age(ages: Vec<f64>, growth: Growth) -> AouState {
        let n = ages.len();
        AouState {
            ages,
            last_selected: vec![None; n],
            growth,
        }
    }

    #[test]
    fn unselected_client_grows_by_x_squared() {
        let s = with_age(vec![5.0], Growth::Constant(2.0));
        assert_eq!(s.step(&[], 0).unwrap().age(0), 9.0);
    }

    #[test]
    fn selected_client_resets_to_zero() {
        let s = with_age(vec![17.0], Growth::Constant(3.0));
        let next = s.step(&[0], 4).unwrap();
        assert_eq!(next.age(0), 0.0);
        assert_eq!(next.last_selected(0), Some(4));
    }

    #[test]
    fn constant_one_is_linear_recurrence() {
        let mut s = AouState::new(1, Growth::Constant(1.0));
        for r in 0..3 {
            s = s.step(&[], r).unwrap();
        }
        assert_eq!(s.age(0), 4.0);
    }

    #[test]
    fn staleness_growth_sums_squares() {
        // 1 + 1² + 2² + 3²
        let mut s = AouState::new(1, Growth::Staleness);
        for r in 0..3 {
            s = s.step(&[], r).unwrap();
        }
        assert_eq!(s.age(0), 15.0);
    }

    #[test]
    fn staleness_restarts_after_reset() {
        let mut s = AouState::new(1, Growth::Staleness);
        s = s.step(&[0], 0).unwrap();
        s = s.step(&[], 1).unwrap();
        s = s.step(&[], 2).unwrap();
        assert_eq!(s.age(0), 1.0 + 4.0);
    }

    #[test]
    fn round_growth_uses_global_round() {
        let mut s = AouState::new(2, Growth::Round);
        s = s.step(&[0], 0).unwrap();
        s = s.step(&[], 1).unwrap();
        assert_eq!(s.age(0), 4.0);
        assert_eq!(s.age(1), 1.0 + 1.0 + 4.0);
    }

    #[test]
    fn snapshot_is_a_copy() {
        let s = AouState::new(3, Growth::default());
        let mut snap = s.snapshot();
        assert_eq!(snap, vec![1.0, 1.0, 1.0]);
        snap[0] = 99.0;
        assert_eq!(s.snapshot(), vec![1.0, 1.0, 1.0]);
        assert_eq!(s.snapshot(), s.snapshot());
    }

    #[test]
    fn snapshot_after_selection() {
        let s = AouState::new(3, Growth::default()).step(&[1], 0).unwrap();
        assert_eq!(s.snapshot()[1], 0.0);
    }

    #[test]
    fn out_of_range_client_rejected() {
        let s = AouState::new(3, Growth::default());
        assert!(matches!(s.step(&[3], 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn growth_round_trips_through_strings() {
        for g in [Growth::Staleness, Growth::Round, Growth::Constant(2.5)] {
            assert_eq!(g.to_string().parse::<Growth>().unwrap(), g);
        }
        assert!("quadratic".parse::<Growth>().is_err());
    }

    fn growth_strategy() -> impl Strategy<Value = Growth> {
        prop_oneof![
            (0.1f64..3.0).prop_map(Growth::Constant),
            Just(Growth::Staleness),
            Just(Growth::Round),
        ]
    }

    proptest! {
        #[test]
        fn strictly_increasing_while_unselected(g in growth_strategy(), rounds in 1usize..12) {
            let mut s = AouState::new(1, g);
            for r in 0..rounds {
                let next = s.step(&[], r).unwrap();
                prop_assert!(next.age(0) > s.age(0));
                s = next;
            }
        }

        #[test]
        fn repeated_selection_stays_zero(g in growth_strategy(), start in 0usize..5) {
            let s = AouState::new(2, g);
            let a = s.step(&[1], start).unwrap();
            let b = a.step(&[1], start + 1).unwrap();
            prop_assert_eq!(a.age(1), 0.0);
            prop_assert_eq!(b.age(1), 0.0);
        }

        #[test]
        fn permutation_equivariant(
            g in growth_strategy(),
            trace in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 4), 1..6),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let mut plain = AouState::new(4, g);
            let mut relabeled = AouState::new(4, g);
            for (r, mask) in trace.iter().enumerate() {
                let sel: Vec<usize> = (0..4).filter(|&k| mask[k]).collect();
                let sel_p: Vec<usize> = sel.iter().map(|&k| perm[k]).collect();
                plain = plain.step(&sel, r).unwrap();
                relabeled = relabeled.step(&sel_p, r).unwrap();
            }
            for k in 0..4 {
                prop_assert_eq!(plain.age(k), relabeled.age(perm[k]));
            }
        }

        #[test]
        fn ages_never_negative(
            g in growth_strategy(),
            trace in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 3), 1..8),
        ) {
            let mut s = AouState::new(3, g);
            for (r, mask) in trace.iter().enumerate() {
                let sel: Vec<usize> = (0..3).filter(|&k| mask[k]).collect();
                s = s.step(&sel, r).unwrap();
                prop_assert!(s.snapshot().iter().all(|&a| a >= 0.0));
                prop_assert_eq!(s.clients(), 3);
            }
        }
    }
}
