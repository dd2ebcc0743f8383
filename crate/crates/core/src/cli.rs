//! Command-line front end. Every command reads one JSON run config; flags
//! override config values. Paths in a config are relative to the config
//! file's directory, flag paths to the working directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_grid, ce_curve, ce_difference, protection_scores, write_csv, AblationGrid, CurveConfig, LayerNeurons,
    Selector,
};
use crate::io::{read_json, write_json};
use crate::mechanism::{neucept_learn, ClusterMethod, LearnConfig, MechanismAssignment, RepresentativeGroup};
use crate::oracle::{discrete_cni, empirical_mi, CniSolution, DiscreteTable};
use crate::rng::derive_seed;
use crate::selection::{neucept_discover, DiscoverConfig, DiscoveryReport, Statistic};
use crate::synthetic::{generate_spec, prior_knowledge_pair, sample_dataset, synth_trace, SyntheticSpec};
use crate::trace::{load_trace, save_trace};

pub const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Parser)]
#[command(name = "neucept", version, about = "Critical-neuron discovery and mechanism learning")]
pub struct Cli {
    /// JSON run config.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic critical-path networks and record their traces.
    Synth(SynthFlags),
    /// Discover critical neurons per layer.
    Discover(DiscoverFlags),
    /// Learn mechanisms from discovered neurons.
    Learn(LearnFlags),
    /// Clusters' entropy curves, CE differences, or noise ablation.
    Evaluate {
        #[command(subcommand)]
        mode: EvaluateMode,
    },
    /// Exhaustive subset search on a small discrete table.
    Oracle(OracleFlags),
}

#[derive(Debug, Args)]
pub struct SynthFlags {
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated widths, input first and output last
    #[arg(long, value_delimiter = ',')]
    pub layer_widths: Option<Vec<usize>>,
    /// Critical neurons per non-output layer
    #[arg(long, value_delimiter = ',')]
    pub critical_widths: Option<Vec<usize>>,
    /// Number of planted mechanisms
    #[arg(long)]
    pub k_true: Option<usize>,
    /// Recorded samples per trace
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiscoverFlags {
    /// Trace directory
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Comma-separated layer ids
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<String>>,
    /// Target FDR, one value or one per layer
    #[arg(long, value_delimiter = ',')]
    pub q: Option<Vec<f64>>,
    /// Knockoff draws per layer
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Discovery report path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LearnFlags {
    /// Trace directory
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Discovery report to read neurons from
    #[arg(long)]
    pub selection: Option<PathBuf>,
    /// Number of mechanisms
    #[arg(long)]
    pub k: Option<usize>,
    /// kmeans, gmm or agglomerative
    #[arg(long)]
    pub method: Option<ClusterMethod>,
    /// Mechanism report path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvaluateMode {
    /// CE at each K for the selected neurons
    CeCurve {
        /// Trace directory
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Discovery report
        #[arg(long)]
        selection: Option<PathBuf>,
        /// CSV output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-K CE difference between two traces
    CeDiff {
        /// Trace whose CE is the minuend
        #[arg(long)]
        trace_a: Option<PathBuf>,
        /// Trace whose CE is subtracted
        #[arg(long)]
        trace_b: Option<PathBuf>,
        /// CSV output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy under noise that spares selected neurons
    Ablate {
        /// Synthetic spec JSON
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Discovery report naming protected neurons
        #[arg(long)]
        selection: Option<PathBuf>,
        /// CSV output
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct OracleFlags {
    /// CSV with feature columns and a y column
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Subset size
    #[arg(long)]
    pub k: Option<usize>,
    /// Oracle report path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub discover: Option<DiscoverSection>,
    #[serde(default)]
    pub learn: Option<LearnSection>,
    #[serde(default)]
    pub evaluate: Option<EvaluateSection>,
    #[serde(default)]
    pub oracle: Option<OracleSection>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub layer_widths: Option<Vec<usize>>,
    pub critical_widths: Option<Vec<usize>>,
    pub k_true: Option<usize>,
    pub samples: Option<usize>,
    /// Write a routed/shared pair (`pkt/`, `normal/`) instead of one trace.
    #[serde(default = "default_true")]
    pub pair: bool,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoverSection {
    pub trace: Option<PathBuf>,
    pub layers: Option<Vec<String>>,
    pub q: Option<Vec<f64>>,
    pub statistic: Option<Statistic>,
    pub repetitions: Option<usize>,
    pub keep_fraction: Option<f64>,
    pub shrinkage: Option<f64>,
    pub offset: Option<u32>,
    #[serde(default)]
    pub all_samples: bool,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnSection {
    pub trace: Option<PathBuf>,
    pub selection: Option<PathBuf>,
    pub k: Option<usize>,
    pub method: Option<ClusterMethod>,
    pub limits: Option<Vec<usize>>,
    #[serde(default)]
    pub all_samples: bool,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub ce_curve: Option<CeCurveSection>,
    pub ce_diff: Option<CeDiffSection>,
    pub ablate: Option<AblateSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeCurveSection {
    pub trace: Option<PathBuf>,
    pub selection: Option<PathBuf>,
    pub k_values: Option<Vec<usize>>,
    pub method: Option<ClusterMethod>,
    #[serde(default)]
    pub all_samples: bool,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeDiffSection {
    pub trace_a: Option<PathBuf>,
    pub trace_b: Option<PathBuf>,
    pub selector: Option<Selector>,
    pub k_values: Option<Vec<usize>>,
    pub method: Option<ClusterMethod>,
    #[serde(default)]
    pub all_samples: bool,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub spec: Option<PathBuf>,
    /// Discovery report; its entry for `layer` is the protected set.
    pub selection: Option<PathBuf>,
    pub layer: Option<String>,
    pub samples: Option<usize>,
    pub levels: Option<Vec<f64>>,
    pub gammas: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// CSV with a header; column `y` is the target, every other column a
    /// discrete variable.
    pub table: Option<PathBuf>,
    pub k: Option<usize>,
    /// Optional subset whose MI is reported next to the optimum.
    pub subset: Option<Vec<usize>>,
    pub output: Option<PathBuf>,
}

/// Resolves config-relative paths and reports missing required fields.
struct Ctx {
    base: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn path(&self, flag: Option<PathBuf>, config: Option<&PathBuf>, field: &str) -> Result<PathBuf> {
        match (flag, config) {
            (Some(p), _) => Ok(p),
            (None, Some(p)) if p.is_absolute() => Ok(p.clone()),
            (None, Some(p)) => Ok(self.base.join(p)),
            (None, None) => Err(missing(field)),
        }
    }

    fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| missing("seed"))
    }
}

fn missing(field: &str) -> Error {
    Error::Config(format!("{field} is required"))
}

fn pick<T>(flag: Option<T>, config: Option<T>, field: &str) -> Result<T> {
    flag.or(config).ok_or_else(|| missing(field))
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), PathBuf::from(".")));
    };
    let cfg: RunConfig = read_json(path).map_err(|e| match e {
        Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
        other => other,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

/// Parse arguments and run. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let (cfg, base) = load_config(cli.config.as_deref())?;
    let ctx = Ctx {
        base,
        seed: cli.seed.or(cfg.seed),
    };
    match cli.command {
        Command::Synth(f) => cmd_synth(&ctx, f, cfg.synth.unwrap_or_default()),
        Command::Discover(f) => cmd_discover(&ctx, f, cfg.discover.unwrap_or_default()),
        Command::Learn(f) => cmd_learn(&ctx, f, cfg.learn.unwrap_or_default()),
        Command::Evaluate { mode } => cmd_evaluate(&ctx, mode, cfg.evaluate.unwrap_or_default()),
        Command::Oracle(f) => cmd_oracle(&ctx, f, cfg.oracle.unwrap_or_default()),
    }
}

fn cmd_synth(ctx: &Ctx, f: SynthFlags, c: SynthSection) -> Result<()> {
    let widths = pick(f.layer_widths, c.layer_widths, "synth.layer_widths")?;
    let critical = pick(f.critical_widths, c.critical_widths, "synth.critical_widths")?;
    let k_true = pick(f.k_true, c.k_true, "synth.k_true")?;
    let samples = pick(f.samples, c.samples, "synth.samples")?;
    let out = ctx.path(f.out, c.output.as_ref(), "synth.output")?;
    let seed = ctx.seed()?;
    if samples < k_true {
        return Err(Error::Config(format!("synth.samples = {samples} is below k_true = {k_true}")));
    }
    let specs: Vec<(&str, SyntheticSpec)> = if c.pair {
        let (pkt, normal) = prior_knowledge_pair(&widths, &critical, k_true, seed)?;
        vec![("pkt", pkt), ("normal", normal)]
    } else {
        vec![("trace", generate_spec(&widths, &critical, k_true, seed)?)]
    };
    for (name, spec) in &specs {
        let (_, trace) = synth_trace(spec, samples, derive_seed(seed, &[1]))?;
        let dir = out.join(name);
        save_trace(&trace, &dir)?;
        write_json(&dir.join(SPEC_FILE), spec)?;
        log::info!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_discover(ctx: &Ctx, f: DiscoverFlags, c: DiscoverSection) -> Result<()> {
    let trace_dir = ctx.path(f.trace, c.trace.as_ref(), "discover.trace")?;
    let out = ctx.path(f.out, c.output.as_ref(), "discover.output")?;
    let trace = load_trace(&trace_dir)?;
    let layers = pick(f.layers, c.layers, "discover.layers")?;
    let q = pick(f.q, c.q, "discover.q")?;
    let mut cfg = DiscoverConfig::new(0.1, ctx.seed()?);
    cfg.q = q;
    if let Some(s) = c.statistic {
        cfg.statistic = s;
    }
    if let Some(r) = f.repetitions.or(c.repetitions) {
        cfg.repetitions = r;
    }
    if let Some(k) = c.keep_fraction {
        cfg.keep_fraction = k;
    }
    if let Some(s) = c.shrinkage {
        cfg.shrinkage = s;
    }
    if let Some(o) = c.offset {
        cfg.offset = o;
    }
    cfg.all_samples = c.all_samples;
    let report = neucept_discover(&trace, &layers, &cfg)?;
    write_json(&out, &report)?;
    if report.results.is_empty() {
        let f = &report.failures[0];
        return Err(Error::Numerical(format!("every layer failed; first: '{}': {}", f.layer_id, f.error)));
    }
    Ok(())
}

/// Mechanism learning output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnReport {
    pub groups: Vec<RepresentativeGroup>,
    pub limits: Option<Vec<usize>>,
    pub assignment: MechanismAssignment,
}

fn cmd_learn(ctx: &Ctx, f: LearnFlags, c: LearnSection) -> Result<()> {
    let trace = load_trace(&ctx.path(f.trace, c.trace.as_ref(), "learn.trace")?)?;
    let report: DiscoveryReport = read_json(&ctx.path(f.selection, c.selection.as_ref(), "learn.selection")?)?;
    let out = ctx.path(f.out, c.output.as_ref(), "learn.output")?;
    let cfg = LearnConfig {
        k: pick(f.k, c.k, "learn.k")?,
        method: pick(f.method, c.method, "learn.method")?,
        seed: ctx.seed()?,
        limits: c.limits,
        all_samples: c.all_samples,
    };
    let learned = neucept_learn(&trace, &report.results, &cfg)?;
    write_json(
        &out,
        &LearnReport {
            groups: learned.representatives.groups,
            limits: learned.representatives.limits,
            assignment: learned.assignment,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
struct CeDiffRow {
    selector: String,
    method: ClusterMethod,
    k: usize,
    ce_diff_bits: f64,
}

fn cmd_evaluate(ctx: &Ctx, mode: EvaluateMode, c: EvaluateSection) -> Result<()> {
    match mode {
        EvaluateMode::CeCurve { trace, selection, out } => {
            let c = c.ce_curve.unwrap_or_default();
            let t = load_trace(&ctx.path(trace, c.trace.as_ref(), "evaluate.ce_curve.trace")?)?;
            let report: DiscoveryReport =
                read_json(&ctx.path(selection, c.selection.as_ref(), "evaluate.ce_curve.selection")?)?;
            let out = ctx.path(out, c.output.as_ref(), "evaluate.ce_curve.output")?;
            let neurons: Vec<LayerNeurons> = report.results.iter().map(LayerNeurons::from).collect();
            let cfg = CurveConfig {
                k_values: pick(None, c.k_values, "evaluate.ce_curve.k_values")?,
                method: c.method.unwrap_or(ClusterMethod::KMeans),
                seed: ctx.seed()?,
                all_samples: c.all_samples,
            };
            let curve = ce_curve(&t, &neurons, &cfg, "neucept")?;
            write_csv(&out, &curve.rows())
        }
        EvaluateMode::CeDiff { trace_a, trace_b, out } => {
            let c = c.ce_diff.unwrap_or_default();
            let a = load_trace(&ctx.path(trace_a, c.trace_a.as_ref(), "evaluate.ce_diff.trace_a")?)?;
            let b = load_trace(&ctx.path(trace_b, c.trace_b.as_ref(), "evaluate.ce_diff.trace_b")?)?;
            let out = ctx.path(out, c.output.as_ref(), "evaluate.ce_diff.output")?;
            let selector = pick(None, c.selector, "evaluate.ce_diff.selector")?;
            let cfg = CurveConfig {
                k_values: pick(None, c.k_values, "evaluate.ce_diff.k_values")?,
                method: c.method.unwrap_or(ClusterMethod::KMeans),
                seed: ctx.seed()?,
                all_samples: c.all_samples,
            };
            let diffs = ce_difference(&a, &b, &selector, &cfg)?;
            let rows: Vec<CeDiffRow> = cfg
                .k_values
                .iter()
                .zip(diffs)
                .map(|(&k, d)| CeDiffRow {
                    selector: selector.name().to_string(),
                    method: cfg.method,
                    k,
                    ce_diff_bits: d,
                })
                .collect();
            write_csv(&out, &rows)
        }
        EvaluateMode::Ablate { spec, selection, out } => {
            let c = c.ablate.unwrap_or_default();
            let spec: SyntheticSpec = read_json(&ctx.path(spec, c.spec.as_ref(), "evaluate.ablate.spec")?)?;
            spec.validate()?;
            let report: DiscoveryReport =
                read_json(&ctx.path(selection, c.selection.as_ref(), "evaluate.ablate.selection")?)?;
            let out = ctx.path(out, c.output.as_ref(), "evaluate.ablate.output")?;
            let layer = pick(None, c.layer, "evaluate.ablate.layer")?;
            let width = spec.layer_widths[spec.layer_index(&layer)?];
            let protected = report
                .results
                .iter()
                .find(|r| r.layer_id == layer)
                .ok_or_else(|| Error::Config(format!("selection has no entry for layer '{layer}'")))?
                .selected
                .clone();
            let seed = ctx.seed()?;
            let mut shuffled: Vec<usize> = (0..width).collect();
            shuffled.shuffle(&mut crate::rng::stream(seed, &[2]));
            let random = shuffled[..protected.len()].to_vec();
            let data = sample_dataset(&spec, pick(None, c.samples, "evaluate.ablate.samples")?, None, derive_seed(seed, &[3]))?;
            let grid = AblationGrid {
                layer_id: layer,
                levels: pick(None, c.levels, "evaluate.ablate.levels")?,
                gammas: c.gammas.unwrap_or_else(|| vec![20.0]),
                seeds: c.seeds.unwrap_or_else(|| vec![seed]),
            };
            let scores = [
                ("neucept".to_string(), protection_scores(width, &protected)),
                ("random".to_string(), protection_scores(width, &random)),
                ("none".to_string(), vec![0.0; width]),
            ];
            let rows = ablation_grid(&spec, &data.inputs, &data.posterior_labels, &grid, &scores)?;
            write_csv(&out, &rows)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub variables: usize,
    pub samples: usize,
    pub k: usize,
    pub best: CniSolution,
    pub subset: Option<Vec<usize>>,
    pub subset_mi: Option<f64>,
}

/// Read an integer CSV table; column `y` is the target.
pub fn read_table(path: &Path) -> Result<DiscreteTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = rdr.headers()?.clone();
    let y_col = header
        .iter()
        .position(|h| h.trim() == "y")
        .ok_or_else(|| Error::Data(format!("{}: no 'y' column", path.display())))?;
    let mut z = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(rec.len().saturating_sub(1));
        for (j, field) in rec.iter().enumerate() {
            let v: i64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("{}: non-integer '{field}' on row {}", path.display(), line + 1)))?;
            if j == y_col {
                y.push(v);
            } else {
                row.push(v);
            }
        }
        z.push(row);
    }
    DiscreteTable::new(z, y)
}

fn cmd_oracle(ctx: &Ctx, f: OracleFlags, c: OracleSection) -> Result<()> {
    let table = read_table(&ctx.path(f.table, c.table.as_ref(), "oracle.table")?)?;
    let out = ctx.path(f.out, c.output.as_ref(), "oracle.output")?;
    let k = pick(f.k, c.k, "oracle.k")?;
    let best = discrete_cni(&table, k)?;
    let subset_mi = c.subset.as_ref().map(|s| empirical_mi(&table, s)).transpose()?;
    write_json(
        &out,
        &OracleReport {
            variables: table.variables(),
            samples: table.samples(),
            k,
            best,
            subset: c.subset,
            subset_mi,
        },
    )
}
