//! Round loop: channel draw, scheduling, local training, aggregation,
//! evaluation, then ledger and AoU bookkeeping.
//!
//! Every random draw comes from a stream derived from `master_seed` (see
//! [`crate::seed`]), so a run is a pure function of its config and is
//! independent of how many worker threads execute the local updates.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelRealization};
use crate::datasets::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::freshness::{AouState, Growth};
use crate::learner::{self, Arch, LocalTrainConfig, ModelParams, TrainOrigin};
use crate::scheduler::{self, AouThreshold, Policy, PolicyKind};
use crate::seed::{self, Stream};
use crate::valuation::ValueLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub model: ModelKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

fn default_hidden() -> usize {
    64
}

impl Default for LearnerConfig {
    fn default() -> Self {
        let t = LocalTrainConfig::default();
        Self {
            model: ModelKind::Mlp,
            hidden: default_hidden(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
        }
    }
}

impl LearnerConfig {
    pub fn arch(&self, inputs: usize, classes: usize) -> Arch {
        match self.model {
            ModelKind::Softmax => Arch::Softmax { inputs, classes },
            ModelKind::Mlp => Arch::Mlp {
                inputs,
                hidden: self.hidden,
                classes,
            },
        }
    }

    fn train_config(&self, seed: u64) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

fn default_test_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        dim: usize,
        n: usize,
        separation: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// IDX files. Without test files, `test_fraction` of the training file
    /// is held out.
    Idx {
        images: String,
        labels: String,
        #[serde(default)]
        test_images: Option<String>,
        #[serde(default)]
        test_labels: Option<String>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    Shards { shards: usize, per_client: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "all_policies")]
    pub policies: Vec<PolicyKind>,
    /// Empty means `[master_seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn all_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            policies: all_policies(),
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub clients: usize,
    pub rounds: usize,
    pub channel: ChannelConfig,
    pub policy: PolicyKind,
    #[serde(default)]
    pub aou_threshold: AouThreshold,
    #[serde(default)]
    pub growth: Growth,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub learner: LearnerConfig,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub master_seed: u64,
    #[serde(default)]
    pub per_client_dump: bool,
    #[serde(default)]
    pub sweep: SweepSpec,
}

impl RunConfig {
    /// Every violated invariant, each naming its dotted config key.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.clients == 0 {
            v.push("clients must be >= 1".to_string());
        }
        if self.rounds == 0 {
            v.push("rounds must be >= 1".to_string());
        }
        v.extend(self.channel.violations());
        if let Err(e) = self.growth.validate() {
            v.push(format!("growth: {e}"));
        }
        if !self.gamma.is_finite() {
            v.push(format!("gamma must be finite, got {}", self.gamma));
        }
        if self.learner.model == ModelKind::Mlp && self.learner.hidden == 0 {
            v.push("learner.hidden must be >= 1".to_string());
        }
        v.extend(self.learner.train_config(0).violations());
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                n,
                separation,
                test_fraction,
            } => {
                if *classes < 2 {
                    v.push("dataset.classes must be >= 2".to_string());
                }
                if classes > dim {
                    v.push(format!(
                        "dataset.dim ({dim}) must be >= dataset.classes ({classes})"
                    ));
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    v.push(format!("dataset.separation must be >= 0, got {separation}"));
                }
                if !(0.0..1.0).contains(test_fraction) {
                    v.push(format!(
                        "dataset.test_fraction must lie in [0, 1), got {test_fraction}"
                    ));
                }
                let n_train = n.saturating_sub((*n as f64 * test_fraction).round() as usize);
                if n_train < self.clients {
                    v.push(format!(
                        "dataset.n leaves {n_train} training samples for {} clients",
                        self.clients
                    ));
                }
            }
            DatasetSpec::Idx {
                test_images,
                test_labels,
                test_fraction,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    v.push("dataset.test_images and dataset.test_labels must be given together".to_string());
                }
                if !(0.0..1.0).contains(test_fraction) {
                    v.push(format!(
                        "dataset.test_fraction must lie in [0, 1), got {test_fraction}"
                    ));
                }
            }
        }
        if let PartitionSpec::Shards { shards, per_client } = self.partition {
            if per_client == 0 || shards != self.clients * per_client {
                v.push(format!(
                    "partition.shards ({shards}) must equal clients ({}) x partition.per_client ({per_client})",
                    self.clients
                ));
            }
        }
        if self.sweep.policies.is_empty() {
            v.push("sweep.policies must not be empty".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn policy(&self) -> Policy {
        Policy::new(self.policy).with_threshold(self.aou_threshold)
    }

    /// Seeds a sweep runs over.
    pub fn sweep_seeds(&self) -> Vec<u64> {
        if self.sweep.seeds.is_empty() {
            vec![self.master_seed]
        } else {
            self.sweep.seeds.clone()
        }
    }
}

/// Data side of a run: per-client training sets and the global test set.
#[derive(Debug, Clone)]
pub struct Environment {
    pub partitions: Vec<LabeledDataset>,
    pub test: LabeledDataset,
    pub arch: Arch,
}

impl Environment {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.master_seed;
        let (train, test) = match &cfg.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                n,
                separation,
                test_fraction,
            } => datasets::synth_gaussian(*classes, *dim, *n, *separation, seed)?
                .split(*test_fraction, seed)?,
            DatasetSpec::Idx {
                images,
                labels,
                test_images,
                test_labels,
                test_fraction,
            } => {
                let train = datasets::load_idx(images, labels)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => (train, datasets::load_idx(ti, tl)?),
                    _ => train.split(*test_fraction, seed)?,
                }
            }
        };
        if test.is_empty() {
            return Err(Error::Config("dataset leaves an empty test set".to_string()));
        }
        let parts = match cfg.partition {
            PartitionSpec::Iid => datasets::partition_iid(&train, cfg.clients, seed)?,
            PartitionSpec::Shards { shards, per_client } => {
                datasets::partition_shards(&train, cfg.clients, shards, per_client, seed)?
            }
        };
        let classes = train.classes().max(test.classes());
        Ok(Self {
            partitions: parts.materialize(&train),
            arch: cfg.learner.arch(train.dim(), classes),
            test,
        })
    }
}

/// Per-client state at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundState {
    pub client: usize,
    pub aou: f64,
    pub shapley_score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub reliable: Vec<usize>,
    /// Clients that uploaded this round, ascending.
    pub selected: Vec<usize>,
    pub n_reliable: usize,
    pub accuracy: f64,
    pub loss: f64,
    /// Accuracy change against the previous round (round 0 = initial model).
    pub v: f64,
    /// AoU statistics after this round's update.
    pub mean_aou: f64,
    pub max_aou: f64,
    pub wall_ms: f64,
    pub clients: Option<Vec<ClientRoundState>>,
}

/// Runs one configuration end to end.
pub fn run(cfg: &RunConfig) -> Result<Vec<RoundRecord>> {
    let env = Environment::prepare(cfg)?;
    simulate(cfg, &env)
}

/// Runs the round loop against an already prepared environment.
pub fn simulate(cfg: &RunConfig, env: &Environment) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    if env.partitions.len() != cfg.clients {
        return Err(Error::invalid(format!(
            "environment has {} partitions for {} clients",
            env.partitions.len(),
            cfg.clients
        )));
    }
    let seed = cfg.master_seed;
    let k_total = cfg.clients;
    let n_channels = cfg.channel.n_subchannels;
    let policy = cfg.policy();

    let mut model = ModelParams::init(env.arch, seed);
    let mut prev_acc = learner::evaluate(&model, &env.test)?.accuracy;
    let mut aou = AouState::new(k_total, cfg.growth);
    let mut ledger = ValueLedger::new(k_total, seed)?.with_gamma(cfg.gamma);
    let mut records = Vec::with_capacity(cfg.rounds);

    for t in 1..=cfg.rounds {
        let started = Instant::now();
        let mut step = || -> Result<RoundRecord> {
            let real = ChannelRealization::draw(&cfg.channel, k_total, t, seed)?;
            let reliable = real.reliable_set();
            let sel = scheduler::select(
                &policy,
                &reliable,
                n_channels,
                &aou.snapshot(),
                ledger.scores(),
                t,
                seed,
            )?;
            debug_assert!(scheduler::verify_selection(&sel, &reliable, n_channels));

            let assignment = real.assign_subchannels(&sel.selected);
            let mut participants: Vec<usize> = sel
                .selected
                .iter()
                .zip(&assignment)
                .filter_map(|(&k, ch)| ch.map(|_| k))
                .collect();
            participants.sort_unstable();

            let updates = participants
                .par_iter()
                .map(|&k| {
                    let tc = cfg
                        .learner
                        .train_config(seed::derive(seed, Stream::Shuffle, t as u64, k as u64));
                    let origin = TrainOrigin { round: t, client: k };
                    learner::local_train(&model, &env.partitions[k], &tc, origin)
                        .map(|m| (m, env.partitions[k].len()))
                })
                .collect::<Result<Vec<_>>>()?;
            let next_model = learner::fedavg(&updates, &model)?;
            let eval = learner::evaluate(&next_model, &env.test)?;
            let v = eval.accuracy - prev_acc;

            ledger = ledger.record_round(&participants, v)?;
            aou = aou.step(&participants, t - 1)?;
            model = next_model;
            prev_acc = eval.accuracy;

            let clients = cfg.per_client_dump.then(|| {
                let mut chosen = vec![false; k_total];
                participants.iter().for_each(|&k| chosen[k] = true);
                (0..k_total)
                    .map(|k| ClientRoundState {
                        client: k,
                        aou: aou.age(k),
                        shapley_score: ledger.scores()[k],
                        selected: chosen[k],
                    })
                    .collect()
            });

            Ok(RoundRecord {
                round: t,
                n_reliable: reliable.len(),
                reliable,
                selected: participants,
                accuracy: eval.accuracy,
                loss: eval.loss,
                v,
                mean_aou: aou.mean(),
                max_aou: aou.max(),
                wall_ms: 0.0,
                clients,
            })
        };
        let mut rec = step().map_err(|e| e.in_round(t))?;
        rec.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        records.push(rec);
    }
    Ok(records)
}

/// One run of a sweep.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run_id: usize,
    pub policy: PolicyKind,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
}

/// Runs every `(seed, policy)` pair. Runs sharing a seed share the dataset,
/// partitioning and channel draws, so they differ only in the policy.
/// Output is ordered seed-major, then by the order of `policies`.
pub fn sweep(base: &RunConfig, policies: &[PolicyKind], seeds: &[u64]) -> Result<Vec<RunOutput>> {
    if policies.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one policy and one seed"));
    }
    let envs = seeds
        .par_iter()
        .map(|&s| {
            let cfg = RunConfig {
                master_seed: s,
                ..base.clone()
            };
            Environment::prepare(&cfg).map(Arc::new)
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|si| (0..policies.len()).map(move |pi| (si, pi)))
        .collect();
    let outputs = jobs
        .par_iter()
        .enumerate()
        .map(|(run_id, &(si, pi))| {
            let cfg = RunConfig {
                master_seed: seeds[si],
                policy: policies[pi],
                ..base.clone()
            };
            simulate(&cfg, &envs[si]).map(|records| RunOutput {
                run_id,
                policy: policies[pi],
                seed: seeds[si],
                records,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    for pair in outputs.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.seed == b.seed
            && a.records.iter().zip(&b.records).any(|(x, y)| x.reliable != y.reliable)
        {
            return Err(Error::invalid(format!(
                "seed {} produced different reliable sets for {} and {}",
                a.seed, a.policy, b.policy
            )));
        }
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> RunConfig {
        RunConfig {
            clients: 10,
            rounds: 5,
            channel: ChannelConfig {
                p: 0.8,
                n_subchannels: 3,
                ..ChannelConfig::default()
            },
            policy: PolicyKind::AouOrShapley,
            aou_threshold: AouThreshold::default(),
            growth: Growth::Staleness,
            gamma: 0.0,
            learner: LearnerConfig {
                model: ModelKind::Softmax,
                ..LearnerConfig::default()
            },
            dataset: DatasetSpec::Synthetic {
                classes: 3,
                dim: 4,
                n: 400,
                separation: 3.0,
                test_fraction: 0.1,
            },
            partition: PartitionSpec::Iid,
            master_seed: 11,
            per_client_dump: false,
            sweep: SweepSpec::default(),
        }
    }

    #[test]
    fn no_reliable_clients_freezes_model() {
        let cfg = RunConfig {
            channel: ChannelConfig {
                p: 0.0,
                ..small_config().channel
            },
            ..small_config()
        };
        let recs = run(&cfg).unwrap();
        let first = recs[0].accuracy;
        assert!(recs.iter().all(|r| r.accuracy == first && r.selected.is_empty()));
        assert!(recs.iter().all(|r| r.v == 0.0));
        // everyone still ages
        assert!(recs.windows(2).all(|w| w[1].mean_aou > w[0].mean_aou));
    }

    #[test]
    fn full_participation_resets_everyone() {
        let cfg = RunConfig {
            clients: 3,
            channel: ChannelConfig {
                p: 1.0,
                n_subchannels: 3,
                ..ChannelConfig::default()
            },
            ..small_config()
        };
        for r in run(&cfg).unwrap() {
            assert_eq!(r.selected, vec![0, 1, 2]);
            assert_eq!(r.max_aou, 0.0);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let a = run(&small_config()).unwrap();
        let b = run(&small_config()).unwrap();
        let strip = |rs: Vec<RoundRecord>| -> Vec<RoundRecord> {
            rs.into_iter().map(|r| RoundRecord { wall_ms: 0.0, ..r }).collect()
        };
        assert_eq!(strip(a), strip(b));
    }

    #[test]
    fn bookkeeping_after_each_round() {
        let cfg = RunConfig {
            per_client_dump: true,
            ..small_config()
        };
        let recs = run(&cfg).unwrap();
        assert_eq!(recs.len(), cfg.rounds);
        for r in &recs {
            let clients = r.clients.as_ref().unwrap();
            for c in clients {
                assert_eq!(c.aou == 0.0, r.selected.contains(&c.client));
                assert_eq!(c.selected, r.selected.contains(&c.client));
            }
            assert!(r.selected.len() <= cfg.channel.n_subchannels);
            assert!(r.selected.iter().all(|k| r.reliable.contains(k)));
        }
        let total_v: f64 = recs.iter().map(|r| r.v).sum();
        let first_acc = recs[0].accuracy - recs[0].v;
        assert!((total_v - (recs.last().unwrap().accuracy - first_acc)).abs() < 1e-12);
    }

    #[test]
    fn sweep_pairs_channels_across_policies() {
        let cfg = small_config();
        let out = sweep(&cfg, &[PolicyKind::AouOnly, PolicyKind::Random], &[1, 2]).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].records[0].reliable, out[1].records[0].reliable);
        assert_eq!(out[2].records[0].reliable, out[3].records[0].reliable);
        assert!(out.iter().all(|o| o.records.len() == cfg.rounds));
    }

    #[test]
    fn single_sweep_equals_run() {
        let cfg = small_config();
        let out = sweep(&cfg, &[cfg.policy], &[cfg.master_seed]).unwrap();
        let direct = run(&cfg).unwrap();
        let acc: Vec<f64> = direct.iter().map(|r| r.accuracy).collect();
        let swept: Vec<f64> = out[0].records.iter().map(|r| r.accuracy).collect();
        assert_eq!(acc, swept);
    }

    #[test]
    fn violations_name_keys() {
        let mut cfg = small_config();
        cfg.rounds = 0;
        cfg.partition = PartitionSpec::Shards {
            shards: 7,
            per_client: 2,
        };
        let v = cfg.violations();
        assert!(v.iter().any(|m| m.starts_with("rounds")));
        assert!(v.iter().any(|m| m.starts_with("partition.shards")));
        assert!(run(&cfg).is_err());
    }
}
