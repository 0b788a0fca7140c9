//! Command-line front end: config resolution, run/sweep execution, metrics
//! export and SVG convergence plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scheduler::PolicyKind;
use crate::simulator::{self, RoundRecord, RunConfig, RunOutput};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CLIENTS_FILE: &str = "clients.csv";
pub const RESOLVED_FILE: &str = "config.resolved.json";

/// Environment variable capping worker threads (0 = auto).
pub const THREADS_ENV: &str = "FLSCHED_THREADS";

#[derive(Debug, Parser)]
#[command(name = "flsched", version, about = "Freshness- and value-aware client scheduling for federated learning over unreliable uplinks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a single configuration.
    Run(RunArgs),
    /// Run every (policy, seed) pair of the sweep section with paired channels.
    Sweep(SweepArgs),
    /// Plot accuracy against round from a metrics file.
    Plot(PlotArgs),
    /// Check a config and print every violated invariant.
    ValidateConfig(ConfigArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run config.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Dotted-key override, e.g. `channel.p=0.1`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// IDX training images; switches the dataset to IDX.
    #[arg(long, requires = "mnist_labels")]
    pub mnist_images: Option<PathBuf>,
    #[arg(long, requires = "mnist_images")]
    pub mnist_labels: Option<PathBuf>,
    #[arg(long, requires_all = ["mnist_images", "mnist_test_labels"])]
    pub mnist_test_images: Option<PathBuf>,
    #[arg(long, requires_all = ["mnist_images", "mnist_test_images"])]
    pub mnist_test_labels: Option<PathBuf>,
    /// Synthetic Gaussian data as `CLASSES,DIM,N,SEPARATION`.
    #[arg(long, conflicts_with = "mnist_images", value_name = "C,D,N,SEP")]
    pub synthetic: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory (created if missing).
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Comma-separated policies; overrides `sweep.policies`.
    #[arg(long, value_delimiter = ',')]
    pub policies: Vec<PolicyKind>,
    /// Comma-separated seeds; overrides `sweep.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct PlotArgs {
    /// metrics.csv produced by `run` or `sweep`.
    #[arg(short, long)]
    pub metrics: PathBuf,
    /// Output SVG path.
    #[arg(short, long)]
    pub out: PathBuf,
}

/// Reads, overrides and validates a config.
pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!("{}: invalid JSON: {e}", args.config.display()))
    })?;
    let mut tree = normalize(raw)?;

    if let Some(images) = &args.mnist_images {
        let labels = args.mnist_labels.as_ref().expect("clap enforces pairing");
        let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        tree["dataset"] = serde_json::json!({
            "kind": "idx",
            "images": images.display().to_string(),
            "labels": labels.display().to_string(),
            "test_images": path_str(&args.mnist_test_images),
            "test_labels": path_str(&args.mnist_test_labels),
        });
        tree = normalize(tree)?;
    }
    if let Some(desc) = &args.synthetic {
        tree["dataset"] = synthetic_dataset(desc)?;
        tree = normalize(tree)?;
    }
    for ov in &args.overrides {
        tree = apply_override(tree, ov)?;
    }
    let cfg: RunConfig = from_tree(tree)?;
    cfg.validate()?;
    Ok(cfg)
}

fn from_tree(tree: Value) -> Result<RunConfig> {
    serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
}

/// Round-trips through `RunConfig` so every defaulted key is present.
fn normalize(tree: Value) -> Result<Value> {
    let cfg = from_tree(tree)?;
    Ok(serde_json::to_value(cfg).expect("config serializes"))
}

fn synthetic_dataset(desc: &str) -> Result<Value> {
    let parts: Vec<&str> = desc.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("--synthetic expects CLASSES,DIM,N,SEPARATION, got `{desc}`"));
    if parts.len() != 4 {
        return Err(bad());
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
    Ok(serde_json::json!({
        "kind": "synthetic",
        "classes": int(parts[0])?,
        "dim": int(parts[1])?,
        "n": int(parts[2])?,
        "separation": parts[3].parse::<f64>().map_err(|_| bad())?,
    }))
}

/// Applies one `dotted.key=value` override. The key must already exist in
/// the normalized tree; the value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(mut tree: Value, ov: &str) -> Result<Value> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not KEY=VALUE")))?;
    let key = key.trim();
    let value = serde_json::from_str::<Value>(raw.trim())
        .unwrap_or_else(|_| Value::String(raw.trim().to_string()));

    let mut slot = &mut tree;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *slot = value;

    let cfg = from_tree(tree)
        .map_err(|e| Error::Config(format!("invalid value for `{key}`: {e}")))?;
    let violations = cfg.violations();
    let top = key.split('.').next().unwrap_or(key);
    if let Some(v) = violations.iter().find(|v| v.contains(key) || v.starts_with(top)) {
        return Err(Error::Config(format!("invalid value for `{key}`: {v}")));
    }
    Ok(serde_json::to_value(cfg).expect("config serializes"))
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: usize,
    pub policy: PolicyKind,
    pub seed: u64,
    pub round: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub v: f64,
    pub n_reliable: usize,
    pub n_selected: usize,
    pub mean_aou: f64,
    pub max_aou: f64,
}

impl MetricsRow {
    pub fn from_record(run_id: usize, policy: PolicyKind, seed: u64, r: &RoundRecord) -> Self {
        Self {
            run_id,
            policy,
            seed,
            round: r.round,
            accuracy: r.accuracy,
            loss: r.loss,
            v: r.v,
            n_reliable: r.n_reliable,
            n_selected: r.selected.len(),
            mean_aou: r.mean_aou,
            max_aou: r.max_aou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub run_id: usize,
    pub policy: PolicyKind,
    pub seed: u64,
    pub round: usize,
    pub client: usize,
    pub aou: f64,
    pub shapley_score: f64,
    pub selected: bool,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path.display().to_string(), format!("{other:?}")),
    }
}

pub fn write_metrics(path: &Path, runs: &[RunOutput]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for run in runs {
        for r in &run.records {
            w.serialize(MetricsRow::from_record(run.run_id, run.policy, run.seed, r))
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_clients(path: &Path, runs: &[RunOutput]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for run in runs {
        for r in &run.records {
            for c in r.clients.iter().flatten() {
                let row = ClientRow {
                    run_id: run.run_id,
                    policy: run.policy,
                    seed: run.seed,
                    round: r.round,
                    client: c.client,
                    aou: c.aou,
                    shapley_score: c.shapley_score,
                    selected: c.selected,
                };
                w.serialize(row).map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses `metrics.csv`; errors carry the 1-based line number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text).map_err(|e| match e {
        Error::Format { field, detail } => Error::format(format!("{}:{field}", path.display()), detail),
        e => e,
    })
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<MetricsRow>().enumerate() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(i as u64 + 2, |p| p.line());
            Error::format(format!("row {line}"), e.to_string())
        })?;
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(Error::format(
                format!("row {}", i + 2),
                format!("accuracy {} outside [0, 1]", row.accuracy),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn write_outputs(out: &Path, cfg: &RunConfig, runs: &[RunOutput]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join(RESOLVED_FILE);
    let json = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    fs::write(&resolved, json).map_err(|e| Error::io(&resolved, e))?;
    write_metrics(&out.join(METRICS_FILE), runs)?;
    if cfg.per_client_dump {
        write_clients(&out.join(CLIENTS_FILE), runs)?;
    }
    Ok(())
}

/// Executes a parsed invocation. Local training runs on `threads` workers
/// (0 = one per core); outputs do not depend on this value.
pub fn execute(cli: &Cli, threads: usize) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| execute_in_pool(cli))
}

fn execute_in_pool(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => {
            let cfg = resolve_config(&args.config)?;
            let records = simulator::run(&cfg)?;
            let runs = [RunOutput {
                run_id: 0,
                policy: cfg.policy,
                seed: cfg.master_seed,
                records,
            }];
            write_outputs(&args.out, &cfg, &runs)?;
            let last = runs[0].records.last().expect("rounds >= 1");
            println!(
                "{} rounds, final accuracy {:.4}, wrote {}",
                cfg.rounds,
                last.accuracy,
                args.out.join(METRICS_FILE).display()
            );
        }
        Command::Sweep(args) => {
            let mut cfg = resolve_config(&args.config)?;
            if !args.policies.is_empty() {
                cfg.sweep.policies = args.policies.clone();
            }
            if !args.seeds.is_empty() {
                cfg.sweep.seeds = args.seeds.clone();
            }
            cfg.validate()?;
            let runs = simulator::sweep(&cfg, &cfg.sweep.policies, &cfg.sweep_seeds())?;
            write_outputs(&args.out, &cfg, &runs)?;
            println!(
                "{} runs x {} rounds, wrote {}",
                runs.len(),
                cfg.rounds,
                args.out.join(METRICS_FILE).display()
            );
        }
        Command::Plot(args) => {
            let rows = read_metrics(&args.metrics)?;
            let svg = render_svg(&rows);
            fs::write(&args.out, svg).map_err(|e| Error::io(&args.out, e))?;
            println!("wrote {}", args.out.display());
        }
        Command::ValidateConfig(args) => {
            let cfg = match resolve_config(args) {
                Ok(cfg) => cfg,
                Err(Error::Config(msg)) => {
                    for line in msg.split("; ") {
                        eprintln!("violation: {line}");
                    }
                    return Err(Error::Config(msg));
                }
                Err(e) => return Err(e),
            };
            println!(
                "ok: {} clients, {} rounds, policy {}",
                cfg.clients, cfg.rounds, cfg.policy
            );
        }
    }
    Ok(())
}

/// Per-policy accuracy band: mean, min and max over runs at each round.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub policy: String,
    pub rounds: Vec<usize>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn bands(rows: &[MetricsRow]) -> Vec<Band> {
    let mut grouped: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        grouped
            .entry(r.policy.to_string())
            .or_default()
            .entry(r.round)
            .or_default()
            .push(r.accuracy);
    }
    grouped
        .into_iter()
        .map(|(policy, by_round)| {
            let mut band = Band {
                policy,
                rounds: Vec::new(),
                mean: Vec::new(),
                min: Vec::new(),
                max: Vec::new(),
            };
            for (round, accs) in by_round {
                band.rounds.push(round);
                band.mean.push(accs.iter().sum::<f64>() / accs.len() as f64);
                band.min.push(accs.iter().copied().fold(f64::INFINITY, f64::min));
                band.max.push(accs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            band
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Self-contained SVG: one mean polyline per policy over a min-max band.
pub fn render_svg(rows: &[MetricsRow]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 440.0;
    const L: f64 = 60.0;
    const R: f64 = 150.0;
    const T: f64 = 20.0;
    const B: f64 = 50.0;

    let bands = bands(rows);
    let max_round = rows.iter().map(|r| r.round).max().unwrap_or(1).max(1) as f64;
    let sx = |round: usize| L + (round as f64 / max_round) * (W - L - R);
    let sy = |acc: f64| T + (1.0 - acc) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let y = sy(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.1}</text>"##,
            W - R,
            L - 6.0,
            y + 4.0
        );
    }
    let step = ((max_round / 6.0).ceil() as usize).max(1);
    for round in (0..=max_round as usize).step_by(step) {
        let x = sx(round);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{round}</text>"#,
            H - B + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{L}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/><line x1="{L}" y1="{T}" x2="{L}" y2="{:.2}" stroke="black"/>"#,
        H - B,
        W - R,
        H - B,
        H - B
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">communication round</text><text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">test accuracy</text>"#,
        (L + W - R) / 2.0,
        H - 10.0,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0
    );

    for (i, band) in bands.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = band.rounds.iter().zip(&band.max).map(|(&r, &a)| format!("{:.2},{:.2}", sx(r), sy(a)));
        let lower = band
            .rounds
            .iter()
            .zip(&band.min)
            .rev()
            .map(|(&r, &a)| format!("{:.2},{:.2}", sx(r), sy(a)));
        let poly: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            poly.join(" ")
        );
        let line: Vec<String> = band
            .rounds
            .iter()
            .zip(&band.mean)
            .map(|(&r, &a)| format!("{:.2},{:.2}", sx(r), sy(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = T + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            W - R + 12.0,
            W - R + 36.0,
            W - R + 42.0,
            ly + 4.0,
            band.policy
        );
    }
    s.push_str("</svg>\n");
    s
}
