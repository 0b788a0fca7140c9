//! Quasi-static uplink channel: per-round Bernoulli reliability flags and
//! Rayleigh-faded subchannel power gains.
//!
//! A gain is `G = |h|²` with `h = σ (z₁ + i z₂)`, `z` standard normal, so `G`
//! is exponential with mean `2σ²`. Noise power is normalized to one and
//! absorbed into `G`. Every client's row is drawn from its own stream keyed
//! by `(seed, round, client)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Probability that a client has a usable link in a given round.
    pub p: f64,
    pub n_subchannels: usize,
    pub tx_power: f64,
    #[serde(default = "default_scale")]
    pub rayleigh_scale: f64,
    /// Minimum `ln(1 + G·P)` for a subchannel to be usable.
    #[serde(default)]
    pub snr_threshold: f64,
}

fn default_scale() -> f64 {
    std::f64::consts::FRAC_1_SQRT_2
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            p: 0.8,
            n_subchannels: 30,
            tx_power: 1.0,
            rayleigh_scale: default_scale(),
            snr_threshold: 0.0,
        }
    }
}

impl ChannelConfig {
    /// All violated invariants, with dotted config keys.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..=1.0).contains(&self.p) {
            v.push(format!("channel.p must lie in [0, 1], got {}", self.p));
        }
        if self.n_subchannels == 0 {
            v.push("channel.n_subchannels must be >= 1".to_string());
        }
        if !(self.tx_power > 0.0 && self.tx_power.is_finite()) {
            v.push(format!("channel.tx_power must be > 0, got {}", self.tx_power));
        }
        if !(self.rayleigh_scale > 0.0 && self.rayleigh_scale.is_finite()) {
            v.push(format!(
                "channel.rayleigh_scale must be > 0, got {}",
                self.rayleigh_scale
            ));
        }
        if !(self.snr_threshold >= 0.0) {
            v.push(format!(
                "channel.snr_threshold must be >= 0, got {}",
                self.snr_threshold
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(msg) => Err(Error::Config(msg)),
            None => Ok(()),
        }
    }

    pub fn mean_gain(&self) -> f64 {
        2.0 * self.rayleigh_scale * self.rayleigh_scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    round: usize,
    reliable: Vec<bool>,
    /// Row-major `K × N`.
    gains: Vec<f64>,
    subchannels: usize,
    tx_power: f64,
    power_budget: f64,
    snr_threshold: f64,
}

impl ChannelRealization {
    pub fn draw(cfg: &ChannelConfig, clients: usize, round: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if clients == 0 {
            return Err(Error::invalid("channel needs at least one client"));
        }
        let n = cfg.n_subchannels;
        let mut reliable = Vec::with_capacity(clients);
        let mut gains = Vec::with_capacity(clients * n);
        for k in 0..clients {
            let mut rng = seed::rng(seed, Stream::Channel, round as u64, k as u64);
            reliable.push(rng.random::<f64>() < cfg.p);
            for _ in 0..n {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                let s = cfg.rayleigh_scale;
                gains.push(s * s * (re * re + im * im));
            }
        }
        Ok(Self {
            round,
            reliable,
            gains,
            subchannels: n,
            tx_power: cfg.tx_power,
            power_budget: cfg.tx_power,
            snr_threshold: cfg.snr_threshold,
        })
    }

    /// Builds a realization from explicit flags and gains (row-major `K × N`).
    pub fn from_parts(
        round: usize,
        reliable: Vec<bool>,
        gains: Vec<f64>,
        subchannels: usize,
        tx_power: f64,
    ) -> Result<Self> {
        if subchannels == 0 || gains.len() != reliable.len() * subchannels {
            return Err(Error::invalid(format!(
                "gain matrix has {} entries, expected {} x {}",
                gains.len(),
                reliable.len(),
                subchannels
            )));
        }
        if gains.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::invalid("channel gains must be nonnegative"));
        }
        Ok(Self {
            round,
            reliable,
            gains,
            subchannels,
            tx_power,
            power_budget: tx_power,
            snr_threshold: 0.0,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn clients(&self) -> usize {
        self.reliable.len()
    }

    pub fn subchannels(&self) -> usize {
        self.subchannels
    }

    pub fn reliable_flags(&self) -> &[bool] {
        &self.reliable
    }

    pub fn tx_power(&self) -> f64 {
        self.tx_power
    }

    pub fn gain(&self, k: usize, n: usize) -> f64 {
        self.gains[k * self.subchannels + n]
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// Whether client `k` can upload on subchannel `n` at the fixed transmit power.
    pub fn feasible(&self, k: usize, n: usize) -> Result<bool> {
        if k >= self.clients() || n >= self.subchannels {
            return Err(Error::invalid(format!(
                "(client {k}, subchannel {n}) out of range for {} x {}",
                self.clients(),
                self.subchannels
            )));
        }
        Ok(self.feasible_unchecked(k, n))
    }

    fn feasible_unchecked(&self, k: usize, n: usize) -> bool {
        let snr = (1.0 + self.gain(k, n) * self.tx_power).ln();
        self.reliable[k] && snr >= self.snr_threshold && self.tx_power <= self.power_budget
    }

    /// Clients feasible on at least one subchannel, ascending.
    pub fn reliable_set(&self) -> Vec<usize> {
        (0..self.clients())
            .filter(|&k| (0..self.subchannels).any(|n| self.feasible_unchecked(k, n)))
            .collect()
    }

    /// Greedy subchannel assignment: clients are served in `ranked` order and
    /// each takes its highest-gain feasible subchannel still free. Clients
    /// left without one get `None`.
    pub fn assign_subchannels(&self, ranked: &[usize]) -> Vec<Option<usize>> {
        let mut taken = vec![false; self.subchannels];
        ranked
            .iter()
            .map(|&k| {
                let best = (0..self.subchannels)
                    .filter(|&n| !taken[n] && self.feasible_unchecked(k, n))
                    .fold(None, |best: Option<usize>, n| match best {
                        Some(b) if self.gain(k, b) >= self.gain(k, n) => Some(b),
                        _ => Some(n),
                    });
                if let Some(n) = best {
                    taken[n] = true;
                }
                best
            })
            .collect()
    }
}
