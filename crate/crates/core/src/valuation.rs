//! Shapley-style per-client value ledger.
//!
//! Each client starts from a random value in `[0, 1)`. After every round the
//! raw value of each participant is bumped by one when the round's accuracy
//! delta `v` exceeds the threshold `gamma`; everyone else carries their raw
//! value forward. The score used for scheduling is the running mean of the
//! raw values over all completed rounds. Increments always apply to the raw
//! value, never to the mean.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ValueLedger {
    initial: Vec<f64>,
    /// `history[k][r - 1]` is the raw value of client `k` after round `r`.
    history: Vec<Vec<f64>>,
    sums: Vec<f64>,
    scores: Vec<f64>,
    gamma: f64,
}

impl ValueLedger {
    /// Draws `clients` initial values uniformly from `[0, 1)`.
    pub fn new(clients: usize, seed: u64) -> Result<Self> {
        if clients == 0 {
            return Err(Error::invalid("value ledger needs at least one client"));
        }
        let mut rng = seed::rng(seed, Stream::Valuation, 0, 0);
        let initial = (0..clients).map(|_| rng.random::<f64>()).collect();
        Self::from_initial(initial)
    }

    pub fn from_initial(initial: Vec<f64>) -> Result<Self> {
        if initial.is_empty() {
            return Err(Error::invalid("value ledger needs at least one client"));
        }
        if let Some(bad) = initial.iter().find(|v| !(0.0..1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "initial value {bad} outside [0, 1)"
            )));
        }
        let k = initial.len();
        Ok(Self {
            scores: initial.clone(),
            initial,
            history: vec![Vec::new(); k],
            sums: vec![0.0; k],
            gamma: 0.0,
        })
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn clients(&self) -> usize {
        self.initial.len()
    }

    pub fn rounds(&self) -> usize {
        self.history[0].len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn history(&self, k: usize) -> &[f64] {
        &self.history[k]
    }

    /// Latest raw value of client `k` (its initial value before any round).
    pub fn raw(&self, k: usize) -> f64 {
        self.history[k].last().copied().unwrap_or(self.initial[k])
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, k: usize) -> Result<f64> {
        self.scores.get(k).copied().ok_or_else(|| {
            Error::invalid(format!(
                "client id {k} out of range for {} clients",
                self.clients()
            ))
        })
    }

    /// Closes one round with accuracy delta `v`.
    pub fn record_round(&self, participants: &[usize], v: f64) -> Result<ValueLedger> {
        let k_total = self.clients();
        let mut took_part = vec![false; k_total];
        for &k in participants {
            if k >= k_total {
                return Err(Error::invalid(format!(
                    "participant id {k} out of range for {k_total} clients"
                )));
            }
            took_part[k] = true;
        }

        let improved = v > self.gamma;
        let mut next = self.clone();
        let r = (self.rounds() + 1) as f64;
        for k in 0..k_total {
            let prev = self.raw(k);
            let raw = if took_part[k] && improved { prev + 1.0 } else { prev };
            next.history[k].push(raw);
            next.sums[k] += raw;
            next.scores[k] = next.sums[k] / r;
        }
        Ok(next)
    }

    /// Number of rounds in which client `k` received an increment.
    pub fn increments(&self, k: usize) -> usize {
        self.increment_pattern(k).iter().filter(|&&b| b).count()
    }

    fn increment_pattern(&self, k: usize) -> Vec<bool> {
        let mut prev = self.initial[k];
        self.history[k]
            .iter()
            .map(|&v| {
                let inc = v > prev;
                prev = v;
                inc
            })
            .collect()
    }

    /// Checks the heuristic against the analogues of the symmetry and
    /// null-player axioms it can honor. Purely diagnostic.
    pub fn axioms_report(&self) -> AxiomsReport {
        let k_total = self.clients();
        let patterns: Vec<Vec<bool>> = (0..k_total).map(|k| self.increment_pattern(k)).collect();

        let mut symmetry_violations = Vec::new();
        for i in 0..k_total {
            for j in i + 1..k_total {
                if patterns[i] == patterns[j] && self.scores[i] != self.scores[j] {
                    symmetry_violations.push((i, j));
                }
            }
        }

        let null_player_violations: Vec<usize> = (0..k_total)
            .filter(|&k| {
                let init = self.initial[k];
                !patterns[k].iter().any(|&b| b) && (self.scores[k] - init).abs() > 1e-12 * init.max(1.0)
            })
            .collect();

        AxiomsReport {
            rounds: self.rounds(),
            symmetry_holds: symmetry_violations.is_empty(),
            symmetry_violations,
            null_player_at_initial: null_player_violations.is_empty(),
            null_player_violations,
        }
    }
}

/// Result of [`ValueLedger::axioms_report`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomsReport {
    pub rounds: usize,
    /// Clients with identical increment histories have equal scores.
    pub symmetry_holds: bool,
    pub symmetry_violations: Vec<(usize, usize)>,
    /// Clients that were never incremented still score exactly their initial
    /// value. This is the ledger's stand-in for "zero value": it is not zero.
    pub null_player_at_initial: bool,
    pub null_player_violations: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(v0: f64) -> ValueLedger {
        ValueLedger::from_initial(vec![v0]).unwrap()
    }

    #[test]
    fn seeded_init_is_deterministic() {
        assert_eq!(ValueLedger::new(3, 42).unwrap(), ValueLedger::new(3, 42).unwrap());
        assert_ne!(ValueLedger::new(3, 42).unwrap(), ValueLedger::new(3, 43).unwrap());
    }

    #[test]
    fn fresh_ledger_scores_are_initial() {
        let l = ValueLedger::new(1, 7).unwrap();
        assert_eq!(l.rounds(), 0);
        assert_eq!(l.scores(), l.initial());
        assert_eq!(l.score(0).unwrap(), l.initial()[0]);
    }

    #[test]
    fn zero_clients_rejected() {
        assert!(ValueLedger::new(0, 1).is_err());
    }

    #[test]
    fn participant_with_improvement_gets_increment() {
        let l = single(0.5).record_round(&[0], 0.02).unwrap();
        assert_eq!(l.history(0), &[1.5]);
        assert_eq!(l.score(0).unwrap(), 1.5);
    }

    #[test]
    fn absent_client_keeps_value() {
        let l = ValueLedger::from_initial(vec![0.5, 0.1])
            .unwrap()
            .record_round(&[1], 0.9)
            .unwrap();
        assert_eq!(l.history(0), &[0.5]);
    }

    #[test]
    fn four_round_trace() {
        let mut l = single(0.5);
        l = l.record_round(&[0], 0.1).unwrap();
        l = l.record_round(&[], 0.1).unwrap();
        l = l.record_round(&[0], 0.0).unwrap();
        l = l.record_round(&[0], 0.3).unwrap();
        assert_eq!(l.history(0), &[1.5, 1.5, 1.5, 2.5]);
        assert_eq!(l.score(0).unwrap(), 1.75);
    }

    #[test]
    fn threshold_is_strict() {
        let l = single(0.5).with_gamma(0.1).record_round(&[0], 0.1).unwrap();
        assert_eq!(l.raw(0), 0.5);
    }

    #[test]
    fn constant_non_participation_scores_initial() {
        let mut l = single(0.3);
        for _ in 0..6 {
            l = l.record_round(&[], 1.0).unwrap();
        }
        assert!((l.score(0).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let l = single(0.5);
        assert!(l.record_round(&[1], 0.1).is_err());
        assert!(l.score(1).is_err());
    }

    #[test]
    fn record_round_is_pure() {
        let l = single(0.5);
        let before = l.clone();
        let _ = l.record_round(&[0], 1.0).unwrap();
        assert_eq!(l, before);
    }

    #[test]
    fn axioms_symmetric_pair() {
        let l = ValueLedger::from_initial(vec![0.4, 0.4, 0.9])
            .unwrap()
            .record_round(&[0, 1], 0.5)
            .unwrap();
        let rep = l.axioms_report();
        assert!(rep.symmetry_holds);
        assert!(rep.null_player_at_initial);
        assert_eq!(l.score(2).unwrap(), 0.9);
    }

    #[test]
    fn axioms_distinct_init_breaks_symmetry() {
        let l = ValueLedger::from_initial(vec![0.2, 0.7]).unwrap();
        let rep = l.axioms_report();
        assert!(!rep.symmetry_holds);
        assert_eq!(rep.symmetry_violations, vec![(0, 1)]);
    }

    proptest! {
        #[test]
        fn invariants_hold_on_random_traces(
            init in proptest::collection::vec(0.0f64..1.0, 1..6),
            trace in proptest::collection::vec(
                (proptest::collection::vec(any::<bool>(), 6), -0.5f64..0.5), 1..10),
            gamma in -0.2f64..0.2,
        ) {
            let k = init.len();
            let mut l = ValueLedger::from_initial(init).unwrap().with_gamma(gamma);
            for (mask, v) in &trace {
                let parts: Vec<usize> = (0..k).filter(|&i| mask[i]).collect();
                let next = l.record_round(&parts, *v).unwrap();
                for i in 0..k {
                    let (prev, now) = (l.raw(i), next.raw(i));
                    prop_assert!(now == prev || now == prev + 1.0);
                    prop_assert!((next.scores()[i] - l.scores()[i]).abs() <= 1.0 + 1e-12);
                    prop_assert_eq!(next.history(i).len(), next.rounds());
                }
                l = next;
            }
        }

        #[test]
        fn more_increments_never_lower_score(
            init in 0.0f64..1.0,
            trace in proptest::collection::vec(any::<bool>(), 1..10),
            flip in 0usize..10,
        ) {
            // Same trace, but one extra participating-with-improvement round.
            let mut a = single(init);
            let mut b = single(init);
            for (r, &p) in trace.iter().enumerate() {
                let pb = p || r == flip % trace.len();
                a = a.record_round(if p { &[0] } else { &[] }, 1.0).unwrap();
                b = b.record_round(if pb { &[0] } else { &[] }, 1.0).unwrap();
            }
            prop_assert!(b.score(0).unwrap() >= a.score(0).unwrap());
        }

        #[test]
        fn shared_shift_preserves_ordering(
            init in proptest::collection::vec(0.0f64..0.5, 2..5),
            trace in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 5), 1..8),
            shift in 0.0f64..0.49,
        ) {
            let k = init.len();
            let shifted: Vec<f64> = init.iter().map(|v| v + shift).collect();
            let mut a = ValueLedger::from_initial(init).unwrap();
            let mut b = ValueLedger::from_initial(shifted).unwrap();
            for mask in &trace {
                let parts: Vec<usize> = (0..k).filter(|&i| mask[i]).collect();
                a = a.record_round(&parts, 1.0).unwrap();
                b = b.record_round(&parts, 1.0).unwrap();
            }
            for i in 0..k {
                for j in 0..k {
                    prop_assert_eq!(
                        a.scores()[i] < a.scores()[j] - 1e-9,
                        b.scores()[i] < b.scores()[j] - 1e-9
                    );
                }
            }
        }
    }
}
