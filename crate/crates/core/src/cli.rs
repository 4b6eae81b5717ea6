//! The `exitnet` command-line tool.
//!
//! Subcommands: `gen`, `train`, `sweep`, `optimize`, `partition`, `simulate`
//! and `verify`. Settings come from an optional TOML [`RunConfig`] file
//! (`--config`) and are overridden by flags. All randomness derives from the
//! top-level seed (`--seed`), which is copied into the training and GA seeds.
//!
//! JSON artifacts embed a `provenance` object with the tool name, version and
//! resolved configuration; CSV and binary artifacts get a `<file>.meta.json`
//! sidecar with the same object. Exit status is 0 on success, 1 on a domain
//! or configuration error and 2 on a usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::beatset::{generate_synthetic, split, BeatRecord, BeatSet, SplitRatios};
use crate::cascade::{write_trace_csv, Cascade, GateConfig};
use crate::deploy_sim::{
    beat_latency, calibrate, model_report, reference_currents, savings_report, FractionMapping, LinkModel, PowerProfile, TxMode, REFERENCE_OURS_BROADCAST,
    REFERENCE_THRESHOLDS,
};
use crate::error::{invalid, Error, Result};
use crate::evaluator::{parse_threshold_grid, sweep, sweep_point, SweepReport, RAW_BEAT_BYTES};
use crate::exit_graph::{
    attach_exits, check_memory_budget, load_partition, partition, write_partition, ExitModel, ExitPlacement,
    NodeRole, DEFAULT_BOTTLENECK, DEFAULT_EDGE_BUDGET_BYTES,
};
use crate::ga::{exhaustive, optimize, GaConfig, MetricsTable, ObjectiveWeights};
use crate::nn::{self, backbone, forward, ParamStore, Tensor};
use crate::trainer::{evaluate_heads, train, TrainConfig};

pub const TOOL: &str = "exitnet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub per_class: usize,
    pub noise_sigma: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            per_class: 200,
            noise_sigma: 0.05,
            split: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub placement: Vec<usize>,
    pub bottleneck: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: nn::DEFAULT_CHANNELS.to_vec(),
            kernel: nn::DEFAULT_KERNEL,
            hidden: nn::DEFAULT_HIDDEN,
            placement: vec![2],
            bottleneck: DEFAULT_BOTTLENECK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// `start:end:step`.
    pub thresholds: String,
    /// Threshold used for decision traces and `verify`.
    pub trace_threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            thresholds: "0:1:0.01".into(),
            trace_threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub thresholds: Vec<f64>,
    /// Fit the fraction mapping to the reference broadcast currents.
    pub calibrate: bool,
    pub mapping: FractionMapping,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            thresholds: REFERENCE_THRESHOLDS.to_vec(),
            calibrate: true,
            mapping: FractionMapping::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub roles: Vec<NodeRole>,
    pub edge_budget_bytes: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            roles: vec![NodeRole::Edge, NodeRole::Cloud],
            edge_budget_bytes: DEFAULT_EDGE_BUDGET_BYTES,
        }
    }
}

/// Every tunable of a run, one section per module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub objective: ObjectiveWeights,
    pub ga: GaConfig,
    pub power: PowerProfile,
    pub energy: EnergyConfig,
    pub link: LinkModel,
    pub partition: PartitionConfig,
}

impl RunConfig {
    /// Parse TOML; errors carry the offending line.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            match line {
                Some(l) => Error::Config(format!("line {l}: {}", e.message())),
                None => Error::Config(e.message().to_string()),
            }
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    fn finish(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.ga.seed = self.seed;
        self.power.validate()?;
        self.objective.validate()?;
        self.ga.validate()?;
        SplitRatios::new(self.data.split[0], self.data.split[1], self.data.split[2])?;
        Ok(self)
    }

    fn ratios(&self) -> Result<SplitRatios> {
        SplitRatios::new(self.data.split[0], self.data.split[1], self.data.split[2])
    }
}

#[derive(Debug, Parser)]
#[command(name = "exitnet", version, about = "Early-exit ECG beat classifier cascade toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic beats into a `.beats` file.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also export the beats as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train an exit-augmented model; writes `.dcn`, `.json` manifest and history CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beats: PathBuf,
        /// Exit boundaries, e.g. `2` or `2,4`.
        #[arg(long)]
        placement: Option<String>,
        #[arg(long)]
        bottleneck: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        /// Output model file (`.dcn`); the manifest goes next to it as `.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep a uniform threshold; writes a CSV report and optional JSON and trace.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Model manifest written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        beats: PathBuf,
        /// Which split to evaluate: train, validation, test or all.
        #[arg(long, default_value = "test")]
        subset: String,
        /// Grid `start:end:step`.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Per-beat decision trace at `--trace-threshold`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        trace_threshold: Option<f64>,
    },
    /// Search placements and thresholds with the GA; writes a JSON report.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Sweep JSON reports, one per placement.
        #[arg(long, value_delimiter = ',', required = true)]
        sweeps: Vec<PathBuf>,
        /// `w_acc,w_sen,w_com`.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        pc: Option<f64>,
        #[arg(long)]
        pm: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut a model into per-stage `.dcn` files plus a `.plan.json` manifest.
    Partition {
        #[command(flatten)]
        common: Common,
        /// Model manifest; without it a freshly initialized default model is used.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        placement: Option<String>,
        /// Comma-separated roles, e.g. `edge,cloud`.
        #[arg(long)]
        roles: Option<String>,
        #[arg(long)]
        bottleneck: Option<usize>,
        /// Edge memory budget in bytes.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "partition")]
        name: String,
    },
    /// Model edge-node current from a sweep report; writes an energy CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Sweep JSON written by `sweep --json`.
        #[arg(long)]
        sweep: PathBuf,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Skip calibration and use the configured fraction mapping.
        #[arg(long)]
        no_calibrate: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Plan and trace for the per-beat latency report.
        #[arg(long, requires_all = ["trace", "latency"])]
        plan: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        latency: Option<PathBuf>,
    },
    /// Check a partition: round-trips, pass-through equivalence, conservation and recounts.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        plan: PathBuf,
        /// Beats to use; synthetic beats are generated when absent.
        #[arg(long)]
        beats: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

/// Companion of a trained `.dcn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub provenance: Value,
    pub model_file: String,
    pub placement: Vec<usize>,
    pub bottleneck: usize,
    pub best_epoch: usize,
    pub split_seed: u64,
    pub split: [f64; 3],
    pub test_head_accuracy: Vec<f64>,
}

impl ModelManifest {
    pub fn load(path: &Path) -> Result<(Self, ExitModel<f32>)> {
        let m: ModelManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let bytes = std::fs::read(dir.join(&m.model_file))?;
        let model = ExitModel::decode_bundle(&bytes, &m.placement, m.bottleneck)?;
        Ok((m, model))
    }
}

/// JSON sweep artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub provenance: Value,
    pub report: SweepReport,
}

/// Entry point used by the binary. Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn provenance(command: &str, cfg: &RunConfig) -> Value {
    json!({
        "tool": TOOL,
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
    })
}

fn with_ext(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Write an artifact plus its `.meta.json` provenance sidecar.
fn write_artifact(path: &Path, bytes: &[u8], prov: &Value) -> Result<()> {
    std::fs::write(path, bytes)?;
    write_json(&with_ext(path, ".meta.json"), prov)
}

fn load_beats(path: &Path) -> Result<Vec<BeatRecord>> {
    Ok(BeatSet::read_file(path)?.ingested().beats)
}

fn placement_of(spec: Option<&str>, cfg: &RunConfig) -> Result<ExitPlacement> {
    let l = cfg.model.channels.len();
    match spec {
        Some(s) => ExitPlacement::parse(s, l),
        None => ExitPlacement::new(cfg.model.placement.clone(), l),
    }
}

fn fresh_model(cfg: &RunConfig, placement: &ExitPlacement) -> Result<ExitModel<f32>> {
    let m = &cfg.model;
    let bb = backbone(&m.channels, m.kernel, m.hidden, nn::DEFAULT_INPUT_LEN, nn::DEFAULT_CLASSES)?;
    let params = ParamStore::init(&bb, cfg.seed);
    attach_exits(&bb, &params, placement, m.bottleneck, cfg.seed)
}

fn parse_weights(s: &str) -> Result<ObjectiveWeights> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad weight {t:?}"))))
        .collect::<Result<_>>()?;
    match v[..] {
        [a, b, c] => ObjectiveWeights::new(a, b, c),
        _ => invalid("weights must be w_acc,w_sen,w_com"),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen {
            common,
            per_class,
            noise,
            out,
            csv,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(n) = per_class {
                cfg.data.per_class = n;
            }
            if let Some(s) = noise {
                cfg.data.noise_sigma = s;
            }
            let cfg = cfg.finish(common.seed)?;
            let set = BeatSet::new(generate_synthetic(cfg.data.per_class, cfg.seed, cfg.data.noise_sigma)?);
            let prov = provenance("gen", &cfg);
            write_artifact(&out, &set.encode(), &prov)?;
            if let Some(path) = csv {
                let mut buf = Vec::new();
                set.write_csv(&mut buf)?;
                write_artifact(&path, &buf, &prov)?;
            }
            println!("wrote {} beats to {}", set.len(), out.display());
            Ok(())
        }
        Command::Train {
            common,
            beats,
            placement,
            bottleneck,
            epochs,
            batch_size,
            lr,
            momentum,
            out,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(b) = bottleneck {
                cfg.model.bottleneck = b;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.train.learning_rate = l;
            }
            if let Some(m) = momentum {
                cfg.train.momentum = m;
            }
            let placement = placement_of(placement.as_deref(), &cfg)?;
            cfg.model.placement = placement.boundaries().to_vec();
            let cfg = cfg.finish(common.seed)?;
            cmd_train(&cfg, &beats, &placement, &out)
        }
        Command::Sweep {
            common,
            model,
            beats,
            subset,
            thresholds,
            out,
            json,
            trace,
            trace_threshold,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(t) = thresholds {
                cfg.sweep.thresholds = t;
            }
            if let Some(t) = trace_threshold {
                cfg.sweep.trace_threshold = t;
            }
            let cfg = cfg.finish(common.seed)?;
            cmd_sweep(&cfg, &model, &beats, &subset, &out, json.as_deref(), trace.as_deref())
        }
        Command::Optimize {
            common,
            sweeps,
            weights,
            population,
            generations,
            pc,
            pm,
            out,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(w) = weights {
                cfg.objective = parse_weights(&w)?;
            }
            if let Some(n) = population {
                cfg.ga.population_size = n;
            }
            if let Some(g) = generations {
                cfg.ga.generations = g;
            }
            if let Some(p) = pc {
                cfg.ga.crossover_prob = p;
            }
            if let Some(p) = pm {
                cfg.ga.mutation_prob = p;
            }
            let cfg = cfg.finish(common.seed)?;
            cmd_optimize(&cfg, &sweeps, &out)
        }
        Command::Partition {
            common,
            model,
            placement,
            roles,
            bottleneck,
            budget,
            out_dir,
            name,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(r) = roles {
                cfg.partition.roles = NodeRole::parse_list(&r)?;
            }
            if let Some(b) = bottleneck {
                cfg.model.bottleneck = b;
            }
            if let Some(b) = budget {
                cfg.partition.edge_budget_bytes = b;
            }
            let requested = placement.as_deref().map(|p| placement_of(Some(p), &cfg)).transpose()?;
            if let Some(p) = &requested {
                cfg.model.placement = p.boundaries().to_vec();
            }
            let cfg = cfg.finish(common.seed)?;
            cmd_partition(&cfg, model.as_deref(), requested, &out_dir, &name)
        }
        Command::Simulate {
            common,
            sweep,
            thresholds,
            no_calibrate,
            out,
            json,
            plan,
            trace,
            latency,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(t) = thresholds {
                cfg.energy.thresholds = t;
            }
            if no_calibrate {
                cfg.energy.calibrate = false;
            }
            let cfg = cfg.finish(common.seed)?;
            cmd_simulate(&cfg, &sweep, &out, json.as_deref())?;
            if let (Some(p), Some(t), Some(l)) = (plan, trace, latency) {
                cmd_latency(&cfg, &p, &t, &l)?;
            }
            Ok(())
        }
        Command::Verify {
            common,
            plan,
            beats,
            count,
            threshold,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(t) = threshold {
                cfg.sweep.trace_threshold = t;
            }
            let cfg = cfg.finish(common.seed)?;
            cmd_verify(&cfg, &plan, beats.as_deref(), count)
        }
    }
}

fn cmd_train(cfg: &RunConfig, beats_path: &Path, placement: &ExitPlacement, out: &Path) -> Result<()> {
    let beats = load_beats(beats_path)?;
    let parts = split(&beats, cfg.ratios()?, cfg.seed)?;
    let model = fresh_model(cfg, placement)?;
    let outcome = train(&model, &parts.train, &parts.validation, &cfg.train)?;
    let test_acc = if parts.test.is_empty() {
        Vec::new()
    } else {
        evaluate_heads(&outcome.model, &parts.test)?.accuracy
    };
    let prov = provenance("train", cfg);
    write_artifact(out, &outcome.model.encode_bundle(), &prov)?;

    let heads = outcome.model.num_heads();
    let mut hist = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string()];
    for h in 0..heads {
        header.push(format!("train_acc_{}", head_name(h, heads)));
        header.push(format!("val_acc_{}", head_name(h, heads)));
    }
    header.push("joint_loss".into());
    hist.write_record(&header)?;
    for r in &outcome.history {
        let mut row = vec![r.epoch.to_string()];
        for h in 0..heads {
            row.push(crate::io_util::fmt_sig9(r.train_accuracy[h]));
            row.push(r.validation_accuracy[h].map(crate::io_util::fmt_sig9).unwrap_or_default());
        }
        row.push(crate::io_util::fmt_sig9(r.loss));
        hist.write_record(&row)?;
    }
    let hist_bytes = hist.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_artifact(&out.with_extension("history.csv"), &hist_bytes, &prov)?;

    let manifest = ModelManifest {
        provenance: prov,
        model_file: out
            .file_name()
            .ok_or_else(|| Error::InvalidInput("output path has no file name".into()))?
            .to_string_lossy()
            .into_owned(),
        placement: placement.boundaries().to_vec(),
        bottleneck: cfg.model.bottleneck,
        best_epoch: outcome.best_epoch,
        split_seed: cfg.seed,
        split: cfg.data.split,
        test_head_accuracy: test_acc.iter().map(|&a| crate::io_util::round_sig9(a)).collect(),
    };
    write_json(&out.with_extension("json"), &manifest)?;
    println!(
        "trained placement {} (best epoch {}), test accuracy per head {:?}",
        placement.label(),
        outcome.best_epoch,
        manifest.test_head_accuracy
    );
    Ok(())
}

fn head_name(h: usize, heads: usize) -> String {
    if h + 1 == heads {
        "final".into()
    } else {
        format!("exit{}", h + 1)
    }
}

fn select_subset(cfg: &RunConfig, manifest: &ModelManifest, beats: Vec<BeatRecord>, subset: &str) -> Result<Vec<BeatRecord>> {
    if subset == "all" {
        return Ok(beats);
    }
    let [a, b, c] = manifest.split;
    let parts = split(&beats, SplitRatios::new(a, b, c)?, manifest.split_seed)?;
    let _ = cfg;
    match subset {
        "train" => Ok(parts.train),
        "validation" => Ok(parts.validation),
        "test" => Ok(parts.test),
        other => invalid(format!("unknown subset {other:?}; use train, validation, test or all")),
    }
}

fn cmd_sweep(
    cfg: &RunConfig,
    model_path: &Path,
    beats_path: &Path,
    subset: &str,
    out: &Path,
    json_out: Option<&Path>,
    trace_out: Option<&Path>,
) -> Result<()> {
    let (manifest, model) = ModelManifest::load(model_path)?;
    let beats = select_subset(cfg, &manifest, load_beats(beats_path)?, subset)?;
    let thresholds = parse_threshold_grid(&cfg.sweep.thresholds)?;
    let cascade = Cascade::from_model(&model)?;
    let report = sweep(&cascade, &beats, &thresholds, model.placement().boundaries())?.rounded();
    let prov = provenance("sweep", cfg);
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_artifact(out, &buf, &prov)?;
    if let Some(path) = json_out {
        write_json(path, &SweepFile { provenance: prov.clone(), report: report.clone() })?;
    }
    if let Some(path) = trace_out {
        let gate = GateConfig::uniform(cfg.sweep.trace_threshold, model.placement().num_exits());
        let batch = cascade.classify_batch(&beats, &gate)?;
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &batch.decisions)?;
        write_artifact(path, &buf, &prov)?;
    }
    println!("swept {} thresholds over {} beats", report.points.len(), report.num_beats);
    Ok(())
}

fn cmd_optimize(cfg: &RunConfig, sweeps: &[PathBuf], out: &Path) -> Result<()> {
    let reports = sweeps
        .iter()
        .map(|p| Ok(serde_json::from_slice::<SweepFile>(&std::fs::read(p)?)?.report))
        .collect::<Result<Vec<_>>>()?;
    let table = MetricsTable::from_sweeps(&reports)?;
    let universe = table.universe();
    let ga = optimize(&universe, &table, cfg.objective, &cfg.ga)?;
    let oracle = exhaustive(&universe, &table, cfg.objective)?;
    let describe = |c: crate::ga::Chromosome, s: &crate::ga::FitnessScore| {
        json!({
            "placement": table.placements[c.placement],
            "threshold": table.thresholds[c.threshold],
            "of_value": s.of_value,
            "metrics": s.raw,
            "normalized": s.normalized,
        })
    };
    let report = json!({
        "provenance": provenance("optimize", cfg),
        "weights": cfg.objective,
        "config": cfg.ga,
        "universe_size": universe.len(),
        "generations": ga.log,
        "winner": describe(ga.best.chromosome, &ga.best.score),
        "exhaustive": describe(oracle.chromosome, &oracle.score),
    });
    write_json(out, &report)?;
    println!(
        "GA winner placement {:?} threshold {} (OF {:.6}); exhaustive OF {:.6}",
        table.placements[ga.best.chromosome.placement],
        table.thresholds[ga.best.chromosome.threshold],
        ga.best.score.of_value,
        oracle.score.of_value
    );
    Ok(())
}

fn cmd_partition(
    cfg: &RunConfig,
    model_path: Option<&Path>,
    requested: Option<ExitPlacement>,
    out_dir: &Path,
    name: &str,
) -> Result<()> {
    let model = match model_path {
        Some(p) => {
            let (_, m) = ModelManifest::load(p)?;
            if let Some(r) = &requested {
                if r != m.placement() {
                    return invalid(format!(
                        "model has exits at {}, not {}",
                        m.placement().label(),
                        r.label()
                    ));
                }
            }
            m
        }
        None => fresh_model(cfg, &placement_of(None, cfg)?)?,
    };
    let plan = partition(&model, &cfg.partition.roles)?;
    let path = write_partition(out_dir, name, &model, &plan, provenance("partition", cfg))?;
    let memory = check_memory_budget(&plan, cfg.partition.edge_budget_bytes);
    write_json(&out_dir.join(format!("{name}.memory.json")), &memory)?;
    for (i, s) in plan.stages.iter().enumerate() {
        println!(
            "stage {i} ({}) blocks {:?}: {} bytes, {} FLOPs{}",
            s.role.name(),
            s.conv_blocks,
            s.bytes,
            s.flops,
            if memory.stages[i].exceeds && s.role == NodeRole::Edge { " OVER BUDGET" } else { "" }
        );
    }
    println!("wrote {}", path.display());
    if !memory.pass {
        return invalid("an edge stage exceeds the memory budget");
    }
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, sweep_path: &Path, out: &Path, json_out: Option<&Path>) -> Result<()> {
    let file: SweepFile = serde_json::from_slice(&std::fs::read(sweep_path)?)?;
    let rates = cfg
        .energy
        .thresholds
        .iter()
        .map(|&t| {
            file.report
                .point_at(t)
                .map(|p| p.exit_rate[0])
                .ok_or_else(|| Error::InvalidInput(format!("sweep has no point at threshold {t}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mapping, calibration) = if cfg.energy.calibrate {
        if cfg.energy.thresholds != REFERENCE_THRESHOLDS {
            return invalid("calibration needs the reference thresholds 0.5,0.6,0.7,0.8,0.9");
        }
        let c = calibrate(&cfg.power, TxMode::Broadcast, &rates, &REFERENCE_OURS_BROADCAST)?;
        (c.mapping, Some(c))
    } else {
        (cfg.energy.mapping, None)
    };
    let report = model_report(&cfg.power, &mapping, &cfg.energy.thresholds, &rates)?;
    let prov = provenance("simulate", cfg);
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_artifact(out, &buf, &prov)?;
    if let Some(path) = json_out {
        write_json(
            path,
            &json!({
                "provenance": prov,
                "mapping": mapping,
                "calibration": calibration,
                "report": report,
                "measured": savings_report(&REFERENCE_THRESHOLDS, &reference_currents(&cfg.power), &cfg.power)?,
            }),
        )?;
    }
    for m in &report.modes {
        println!("{}: mean {:.4} mA, savings {:.2}%", m.mode.name(), m.mean_ours, 100.0 * m.savings);
    }
    println!("pooled savings {:.2}%", 100.0 * report.pooled_savings);
    Ok(())
}

fn cmd_latency(cfg: &RunConfig, plan_path: &Path, trace_path: &Path, out: &Path) -> Result<()> {
    let manifest: crate::exit_graph::PlanManifest = serde_json::from_slice(&std::fs::read(plan_path)?)?;
    let payloads: Vec<usize> = manifest.stages.iter().filter_map(|s| s.transmit_bytes).collect();
    let links = vec![cfg.link; payloads.len()];
    let mut rd = csv::Reader::from_path(trace_path)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["beat_id", "exit_stage", "latency_s"])?;
    for row in rd.records() {
        let row = row?;
        let stage: usize = row
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidInput("trace row without exit_stage".into()))?;
        let lat = beat_latency(&links, &payloads, stage)?;
        w.write_record([row.get(0).unwrap_or(""), &stage.to_string(), &crate::io_util::fmt_sig9(lat)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_artifact(out, &bytes, &provenance("simulate", cfg))
}

fn cmd_verify(cfg: &RunConfig, plan_path: &Path, beats_path: Option<&Path>, count: usize) -> Result<()> {
    let (manifest, stages) = load_partition(plan_path)?;
    let dir = plan_path.parent().unwrap_or(Path::new("."));
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    // Serialization round-trips.
    let mut round_trip = true;
    for (s, exec) in manifest.stages.iter().zip(&stages) {
        round_trip &= std::fs::read(dir.join(&s.model_file))? == exec.encode();
    }
    let ref_bytes = std::fs::read(dir.join(&manifest.reference_model))?;
    let (reference, ref_params) = nn::deserialize(&ref_bytes)?;
    round_trip &= nn::serialize(&reference, &ref_params) == ref_bytes;
    let beats = match beats_path {
        Some(p) => load_beats(p)?,
        None => {
            let per_class = count.div_ceil(5).max(1);
            let mut b = BeatSet::new(generate_synthetic(per_class, cfg.seed, cfg.data.noise_sigma)?).ingested().beats;
            b.truncate(count.max(1));
            b
        }
    };
    let set = BeatSet::new(beats.clone());
    round_trip &= BeatSet::decode(&set.encode())?.beats == beats;
    check("serialization round-trip", round_trip);

    // Pass-through equivalence against the monolithic backbone.
    let cascade = Cascade::new(stages)?;
    let mut equal = true;
    for b in &beats {
        let x = Tensor::from_samples(b.samples());
        let mono = forward(&reference, &ref_params, &x, None)?;
        let staged = cascade.pass_through_output(&x)?;
        equal &= mono.data().iter().map(|v| v.to_bits()).eq(staged.data().iter().map(|v| v.to_bits()));
    }
    check("pass-through equivalence", equal);

    // Gated run: conservation and recount from the written trace.
    let gate = GateConfig::uniform(cfg.sweep.trace_threshold, cascade.num_exits());
    let batch = cascade.classify_batch(&beats, &gate)?;
    check("exit conservation", batch.exit_counts.iter().sum::<usize>() == beats.len());
    let point = sweep_point(
        cfg.sweep.trace_threshold,
        &batch.decisions,
        cascade.stages().len(),
        cascade.baseline_flops(),
        RAW_BEAT_BYTES,
    )?;
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &batch.decisions)?;
    let mut rd = csv::Reader::from_reader(buf.as_slice());
    let mut counts = vec![0usize; cascade.stages().len()];
    let (mut flops, mut bytes, mut correct, mut n) = (0.0, 0.0, 0usize, 0usize);
    for row in rd.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let stage: usize = field(1).parse().map_err(|_| Error::InvalidInput("bad trace stage".into()))?;
        counts[stage] += 1;
        flops += field(5).parse::<f64>().map_err(|_| Error::InvalidInput("bad trace flops".into()))?;
        bytes += field(6).parse::<f64>().map_err(|_| Error::InvalidInput("bad trace bytes".into()))?;
        correct += usize::from(field(3) == field(4));
        n += 1;
    }
    let nf = n as f64;
    let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    check(
        "recount oracle",
        counts == batch.exit_counts
            && rel(flops / nf, point.total_flops)
            && rel(bytes / nf, point.bytes_per_beat)
            && rel(correct as f64 / nf, point.system_accuracy),
    );
    if failures.is_empty() {
        Ok(())
    } else {
        invalid(format!("verification failed: {}", failures.join(", ")))
    }
}
