//! Client selection among the reliable set of a round.
//!
//! If at most `N` clients are reliable they are all scheduled. Otherwise the
//! reliable clients are ranked by the policy and the first `N` are taken.
//! The base order everywhere is AoU descending, then score descending, then
//! client id ascending.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "aou")]
    AouOnly,
    /// Front of the list: stale OR more valuable than the front so far.
    #[serde(rename = "aou_or_ds")]
    AouOrShapley,
    /// Front of the list: stale AND more valuable than the front so far.
    #[serde(rename = "aou_and_ds")]
    AouAndShapley,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Random,
        PolicyKind::AouOnly,
        PolicyKind::AouOrShapley,
        PolicyKind::AouAndShapley,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::AouOnly => "aou",
            PolicyKind::AouOrShapley => "aou_or_ds",
            PolicyKind::AouAndShapley => "aou_and_ds",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected random, aou, aou_or_ds, aou_and_ds)"))
    }
}

/// Staleness threshold used by the combined criteria.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AouThreshold {
    Fixed(f64),
    MeanOfReliable,
    MedianOfReliable,
}

impl Default for AouThreshold {
    fn default() -> Self {
        AouThreshold::MeanOfReliable
    }
}

impl AouThreshold {
    fn resolve(&self, aou: &[f64], reliable: &[usize]) -> f64 {
        match *self {
            AouThreshold::Fixed(t) => t,
            AouThreshold::MeanOfReliable => {
                reliable.iter().map(|&k| aou[k]).sum::<f64>() / reliable.len() as f64
            }
            AouThreshold::MedianOfReliable => {
                let mut v: Vec<f64> = reliable.iter().map(|&k| aou[k]).collect();
                v.sort_by(f64::total_cmp);
                let m = v.len() / 2;
                if v.len() % 2 == 1 {
                    v[m]
                } else {
                    0.5 * (v[m - 1] + v[m])
                }
            }
        }
    }
}

impl fmt::Display for AouThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AouThreshold::Fixed(t) => write!(f, "fixed:{t}"),
            AouThreshold::MeanOfReliable => f.write_str("mean"),
            AouThreshold::MedianOfReliable => f.write_str("median"),
        }
    }
}

impl FromStr for AouThreshold {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(AouThreshold::MeanOfReliable),
            "median" => Ok(AouThreshold::MedianOfReliable),
            _ => {
                let t = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| format!("unknown aou_threshold `{s}` (expected mean, median or fixed:<tau>)"))?;
                let t: f64 = t.parse().map_err(|_| format!("bad fixed threshold `{t}`"))?;
                if t >= 0.0 {
                    Ok(AouThreshold::Fixed(t))
                } else {
                    Err(format!("fixed threshold must be >= 0, got {t}"))
                }
            }
        }
    }
}

impl TryFrom<String> for AouThreshold {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AouThreshold> for String {
    fn from(t: AouThreshold) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    pub threshold: AouThreshold,
}

impl Policy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            threshold: AouThreshold::default(),
        }
    }

    pub fn with_threshold(mut self, threshold: AouThreshold) -> Self {
        self.threshold = threshold;
        self
    }
}

/// Scheduled clients of one round, in rank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionVector {
    pub round: usize,
    pub selected: Vec<usize>,
    pub indicator: Vec<bool>,
}

impl SelectionVector {
    fn new(round: usize, clients: usize, selected: Vec<usize>) -> Self {
        let mut indicator = vec![false; clients];
        for &k in &selected {
            indicator[k] = true;
        }
        Self {
            round,
            selected,
            indicator,
        }
    }
}

fn rank_order<'a>(aou: &'a [f64], scores: &'a [f64]) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| {
        aou[b]
            .total_cmp(&aou[a])
            .then(scores[b].total_cmp(&scores[a]))
            .then(a.cmp(&b))
    }
}

/// Picks at most `n_channels` clients out of `reliable` for round `round`.
///
/// `seed` only feeds the [`PolicyKind::Random`] draw.
pub fn select(
    policy: &Policy,
    reliable: &[usize],
    n_channels: usize,
    aou: &[f64],
    scores: &[f64],
    round: usize,
    seed: u64,
) -> Result<SelectionVector> {
    let k_total = aou.len();
    if n_channels == 0 {
        return Err(Error::invalid("need at least one subchannel"));
    }
    if scores.len() != k_total {
        return Err(Error::invalid(format!(
            "{} AoU values but {} scores",
            k_total,
            scores.len()
        )));
    }
    if let Some(&k) = reliable.iter().find(|&&k| k >= k_total) {
        return Err(Error::invalid(format!(
            "reliable client {k} out of range for {k_total} clients"
        )));
    }

    let by_rank = rank_order(aou, scores);
    let mut ranked = reliable.to_vec();
    ranked.sort_by(&by_rank);
    ranked.dedup();

    if ranked.len() <= n_channels {
        return Ok(SelectionVector::new(round, k_total, ranked));
    }

    let selected = match policy.kind {
        PolicyKind::Random => {
            let mut rng = seed::rng(seed, Stream::Scheduling, round as u64, 0);
            index::sample(&mut rng, ranked.len(), n_channels)
                .into_iter()
                .map(|i| ranked[i])
                .collect()
        }
        PolicyKind::AouOnly => {
            ranked.truncate(n_channels);
            ranked
        }
        PolicyKind::AouOrShapley | PolicyKind::AouAndShapley => {
            let threshold = policy.threshold.resolve(aou, &ranked);
            let both = policy.kind == PolicyKind::AouAndShapley;
            let mut front = Vec::new();
            let mut back = Vec::new();
            let mut front_max = f64::NEG_INFINITY;
            for &k in &ranked {
                let stale = aou[k] > threshold;
                let valuable = scores[k] > front_max;
                let lead = if both { stale && valuable } else { stale || valuable };
                if lead {
                    front_max = front_max.max(scores[k]);
                    front.push(k);
                } else {
                    back.push(k);
                }
            }
            front.extend(back);
            front.truncate(n_channels);
            front
        }
    };
    Ok(SelectionVector::new(round, k_total, selected))
}

/// Whether `sel` respects the cardinality bound, the reliable set, and has a
/// consistent indicator vector.
pub fn verify_selection(sel: &SelectionVector, reliable: &[usize], n_channels: usize) -> bool {
    if sel.selected.len() > n_channels {
        return false;
    }
    let mut seen = vec![false; sel.indicator.len()];
    for &k in &sel.selected {
        if k >= seen.len() || seen[k] || !reliable.contains(&k) {
            return false;
        }
        seen[k] = true;
    }
    seen == sel.indicator
}

/// Sum of next-round ages of the clients left out, `Σ (T_k + x²)(1 − S_k)`.
pub fn unselected_age_cost(aou: &[f64], x: f64, indicator: &[bool]) -> f64 {
    aou.iter()
        .zip(indicator)
        .filter(|(_, &s)| !s)
        .map(|(t, _)| t + x * x)
        .sum()
}
