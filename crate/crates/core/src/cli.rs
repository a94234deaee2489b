//! Run configurations and the driver behind the `gapped` binary.
//!
//! Every run resolves its command line into a [`RunConfig`] that embeds the
//! measure specs and schedules it was given, so `manifest.json` alone is
//! enough to repeat it (`gapped rerun --manifest ...`). Artifacts are written
//! atomically (temporary file, then rename).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::decoupling::{
    markov_decoupling_bound, minimal_decoupling_constants, theorem_data_from_markov,
};
use crate::error::{Error, Result};
use crate::estimators::{
    closed_form_cross_entropy_rate, closed_form_kl_rate, cross_entropy_estimate_shifted,
    mean_convergence_series, relative_entropy_estimate_shifted, DecouplingEvidence, EntropyEstimate,
};
use crate::ext;
use crate::fekete::{
    check_gapped_subadditivity, fekete_limit_estimate, gap_lift, BuiltinSequence, DEFAULT_TOL,
};
use crate::measures::{Measure, MeasureSpec, DEFAULT_ENUMERATION_CAP, FAMILIES, ROW_TOL};
use crate::sampling::{sample_trajectory, shifted_kingman_series, Grid};
use crate::schedules::{ConvergenceSeries, ErrorSchedule, GapSchedule};
use crate::steele::{
    birkhoff_bad_average, good_coverage_fraction, steele_decompose, verify_cover_bounds,
    verify_smallest_k, verify_ub_rep, ProofContext, TrajectoryOracle,
};

pub const DEFAULT_OUT: &str = "gapped-out";
pub const MANIFEST: &str = "manifest.json";

// ---------------------------------------------------------------------------
// command line

#[derive(Debug, Parser)]
#[command(name = "gapped", version, about = "Gapped subadditive ergodic numerics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deterministic gapped Fekete engine.
    #[command(subcommand)]
    Fekete(FeketeCommand),
    /// Draw a trajectory and write it as symbol text.
    Sample(SampleArgs),
    /// Write `(1/n) log Q_n(x_1^n)` along a sampled path as CSV.
    Series(SeriesArgs),
    /// Upper-decoupling audits.
    #[command(subcommand)]
    Decouple(DecoupleCommand),
    /// Entropy estimators.
    #[command(subcommand)]
    Estimate(EstimateCommand),
    /// Steele-type interval decompositions.
    #[command(subcommand)]
    Steele(SteeleCommand),
    /// Check a measure spec and print the violations as JSON.
    Validate(ValidateArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Subcommand)]
pub enum FeketeCommand {
    /// Brute-force check of the gapped condition up to `--n`.
    Check(FeketeArgs),
    /// Infimum formula and `F_n / n` series up to `--n`.
    Limit(FeketeArgs),
    /// Turn a subadditive sequence into gapped data and estimate its limit.
    Lift(LiftArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FeketeArgs {
    /// Sequence as JSON (inline or a file path).
    #[arg(long)]
    pub sequence: String,
    /// Gap schedule: `zero`, `constant:K`, `ceil_log2`, `ceil_power:A`, or JSON.
    #[arg(long, default_value = "zero")]
    pub gap: String,
    /// Error schedule: `zero`, `constant:C`, `power:C:A`, or JSON.
    #[arg(long, default_value = "zero")]
    pub error: String,
    #[arg(long)]
    pub n: u64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Spacing of the reported series.
    #[arg(long, default_value_t = 1000)]
    pub stride: u64,
}

#[derive(Debug, Clone, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub sequence: String,
    #[arg(long)]
    pub gap: String,
    /// Horizon of the gapless subadditivity probe.
    #[arg(long, default_value_t = 200)]
    pub probe: u64,
    #[arg(long)]
    pub n: u64,
    #[arg(long, default_value_t = 1000)]
    pub stride: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    /// Measure spec as JSON (inline or a file path).
    #[arg(long)]
    pub measure: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SeriesArgs {
    /// Law of the sampled path.
    #[arg(long)]
    pub p: String,
    /// Measure whose log-marginals are evaluated; defaults to `--p`.
    #[arg(long)]
    pub q: Option<String>,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "geometric:1.2")]
    pub grid: Grid,
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
}

#[derive(Debug, Subcommand)]
pub enum DecoupleCommand {
    /// Exhaustive minimal constants.
    Audit(AuditArgs),
    /// Closed-form Markov bound `c(tau)` for `tau = 0..=tau_max`.
    Bound(BoundArgs),
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub measure: String,
    #[arg(long)]
    pub n_max: usize,
    #[arg(long)]
    pub m_max: usize,
    #[arg(long, default_value = "zero")]
    pub gap: String,
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    pub cap: u64,
}

#[derive(Debug, Clone, Args)]
pub struct BoundArgs {
    #[arg(long)]
    pub measure: String,
    #[arg(long, default_value_t = 10)]
    pub tau_max: u64,
}

#[derive(Debug, Subcommand)]
pub enum EstimateCommand {
    /// Cross entropy along one path.
    Cross(EstimateArgs),
    /// Specific relative entropy along one path.
    Relent(EstimateArgs),
    /// Monte-Carlo mean of `(1/n) log Q_n` over independent paths.
    Mean(MeanArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub p: String,
    #[arg(long)]
    pub q: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "geometric:1.2")]
    pub grid: Grid,
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    /// Skip the decoupling check on `Q`.
    #[arg(long)]
    pub assume_decoupled: bool,
    /// Word length for the audit of non-Markov `Q`.
    #[arg(long, default_value_t = 4)]
    pub audit_n: usize,
}

#[derive(Debug, Clone, Args)]
pub struct MeanArgs {
    #[arg(long)]
    pub p: String,
    #[arg(long)]
    pub q: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub trials: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "geometric:1.2")]
    pub grid: Grid,
}

#[derive(Debug, Subcommand)]
pub enum SteeleCommand {
    /// Decompose `[0, n]` along a sampled path and verify the bounds.
    Run(SteeleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SteeleArgs {
    #[arg(long)]
    pub p: String,
    /// Defaults to `--p`.
    #[arg(long)]
    pub q: Option<String>,
    #[arg(long)]
    pub r: u64,
    #[arg(long = "K")]
    pub k_max: u64,
    #[arg(long)]
    pub eps: f64,
    #[arg(long)]
    pub n: u64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "zero")]
    pub gap: String,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    /// Path to a measure spec.
    #[arg(long)]
    pub spec: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

// ---------------------------------------------------------------------------
// run configuration

/// A fully resolved run: everything needed to reproduce the artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub out: PathBuf,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Task {
    FeketeCheck {
        sequence: BuiltinSequence,
        gap: GapSchedule,
        error: ErrorSchedule,
        n: u64,
        tol: f64,
    },
    FeketeLimit {
        sequence: BuiltinSequence,
        gap: GapSchedule,
        error: ErrorSchedule,
        n: u64,
        stride: u64,
    },
    FeketeLift {
        sequence: BuiltinSequence,
        gap: GapSchedule,
        probe: u64,
        n: u64,
        stride: u64,
    },
    Sample {
        measure: MeasureSpec,
        n: usize,
        seed: u64,
    },
    Series {
        p: MeasureSpec,
        q: MeasureSpec,
        n: usize,
        seed: u64,
        grid: Grid,
        offset: usize,
    },
    DecoupleAudit {
        measure: MeasureSpec,
        n_max: usize,
        m_max: usize,
        gap: GapSchedule,
        cap: u64,
    },
    DecoupleBound {
        measure: MeasureSpec,
        tau_max: u64,
    },
    EstimateCross(EstimateTask),
    EstimateRelent(EstimateTask),
    EstimateMean {
        p: MeasureSpec,
        q: MeasureSpec,
        n: usize,
        trials: usize,
        seed: u64,
        grid: Grid,
    },
    SteeleRun {
        p: MeasureSpec,
        q: MeasureSpec,
        r: u64,
        k_max: u64,
        eps: f64,
        n: u64,
        seed: u64,
        gap: GapSchedule,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateTask {
    pub p: MeasureSpec,
    pub q: MeasureSpec,
    pub n: usize,
    pub seed: u64,
    pub grid: Grid,
    pub offset: usize,
    pub assume_decoupled: bool,
    pub audit_n: usize,
}

/// What a subcommand resolved to.
#[derive(Debug)]
pub enum Invocation {
    Run(RunConfig),
    Validate(PathBuf),
}

impl Cli {
    pub fn resolve(self) -> Result<Invocation> {
        let out = self.out.clone();
        let workers = self.workers;
        let with = |task: Task| {
            Ok(Invocation::Run(RunConfig {
                task,
                out: out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
                workers,
            }))
        };
        match self.command {
            Command::Fekete(FeketeCommand::Check(a)) => with(Task::FeketeCheck {
                sequence: load_json(&a.sequence)?,
                gap: parse_gap(&a.gap)?,
                error: parse_error(&a.error)?,
                n: a.n,
                tol: a.tol,
            }),
            Command::Fekete(FeketeCommand::Limit(a)) => with(Task::FeketeLimit {
                sequence: load_json(&a.sequence)?,
                gap: parse_gap(&a.gap)?,
                error: parse_error(&a.error)?,
                n: a.n,
                stride: a.stride,
            }),
            Command::Fekete(FeketeCommand::Lift(a)) => with(Task::FeketeLift {
                sequence: load_json(&a.sequence)?,
                gap: parse_gap(&a.gap)?,
                probe: a.probe,
                n: a.n,
                stride: a.stride,
            }),
            Command::Sample(a) => with(Task::Sample {
                measure: load_measure(&a.measure)?,
                n: a.n,
                seed: a.seed,
            }),
            Command::Series(a) => {
                let p = load_measure(&a.p)?;
                let q = a.q.as_deref().map(load_measure).transpose()?.unwrap_or_else(|| p.clone());
                with(Task::Series {
                    p,
                    q,
                    n: a.n,
                    seed: a.seed,
                    grid: a.grid,
                    offset: a.offset,
                })
            }
            Command::Decouple(DecoupleCommand::Audit(a)) => with(Task::DecoupleAudit {
                measure: load_measure(&a.measure)?,
                n_max: a.n_max,
                m_max: a.m_max,
                gap: parse_gap(&a.gap)?,
                cap: a.cap,
            }),
            Command::Decouple(DecoupleCommand::Bound(a)) => with(Task::DecoupleBound {
                measure: load_measure(&a.measure)?,
                tau_max: a.tau_max,
            }),
            Command::Estimate(EstimateCommand::Cross(a)) => with(Task::EstimateCross(estimate_task(a)?)),
            Command::Estimate(EstimateCommand::Relent(a)) => with(Task::EstimateRelent(estimate_task(a)?)),
            Command::Estimate(EstimateCommand::Mean(a)) => with(Task::EstimateMean {
                p: load_measure(&a.p)?,
                q: load_measure(&a.q)?,
                n: a.n,
                trials: a.trials,
                seed: a.seed,
                grid: a.grid,
            }),
            Command::Steele(SteeleCommand::Run(a)) => {
                let p = load_measure(&a.p)?;
                let q = a.q.as_deref().map(load_measure).transpose()?.unwrap_or_else(|| p.clone());
                with(Task::SteeleRun {
                    p,
                    q,
                    r: a.r,
                    k_max: a.k_max,
                    eps: a.eps,
                    n: a.n,
                    seed: a.seed,
                    gap: parse_gap(&a.gap)?,
                })
            }
            Command::Validate(a) => Ok(Invocation::Validate(a.spec)),
            Command::Rerun(a) => {
                let mut config = read_manifest_config(&a.manifest)?;
                if let Some(out) = out {
                    config.out = out;
                }
                if workers.is_some() {
                    config.workers = workers;
                }
                Ok(Invocation::Run(config))
            }
        }
    }
}

fn estimate_task(a: EstimateArgs) -> Result<EstimateTask> {
    Ok(EstimateTask {
        p: load_measure(&a.p)?,
        q: load_measure(&a.q)?,
        n: a.n,
        seed: a.seed,
        grid: a.grid,
        offset: a.offset,
        assume_decoupled: a.assume_decoupled,
        audit_n: a.audit_n,
    })
}

fn read_source(arg: &str) -> Result<String> {
    let trimmed = arg.trim_start();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        Ok(arg.to_string())
    } else {
        Ok(fs::read_to_string(arg)?)
    }
}

/// Parses inline JSON or the JSON file at `arg`.
pub fn load_json<T: DeserializeOwned>(arg: &str) -> Result<T> {
    Ok(serde_json::from_str(&read_source(arg)?)?)
}

/// Loads a measure spec, reporting structural problems as a schema error.
pub fn load_measure(arg: &str) -> Result<MeasureSpec> {
    let value: Value = serde_json::from_str(&read_source(arg)?)?;
    let violations = validate_measure_value(&value);
    if !violations.is_empty() {
        return Err(Error::Schema(serde_json::to_string(&violations)?));
    }
    Ok(serde_json::from_value(value)?)
}

fn parse_gap(arg: &str) -> Result<GapSchedule> {
    let bad = || Error::Schema(format!("cannot parse gap schedule {arg:?}"));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    match arg.split(':').collect::<Vec<_>>().as_slice() {
        ["zero"] => Ok(GapSchedule::zero()),
        ["ceil_log2"] => Ok(GapSchedule::ceil_log2()),
        ["constant", k] => Ok(GapSchedule::constant(k.parse().map_err(|_| bad())?)),
        ["ceil_power", a] => GapSchedule::ceil_power(num(a)?),
        _ => load_json(arg),
    }
}

fn parse_error(arg: &str) -> Result<ErrorSchedule> {
    let bad = || Error::Schema(format!("cannot parse error schedule {arg:?}"));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    match arg.split(':').collect::<Vec<_>>().as_slice() {
        ["zero"] => Ok(ErrorSchedule::zero()),
        ["constant", c] => ErrorSchedule::constant(num(c)?),
        ["power", c, a] => ErrorSchedule::new(crate::schedules::ErrorRule::Power {
            coeff: num(c)?,
            alpha: num(a)?,
        }),
        _ => load_json(arg),
    }
}

// ---------------------------------------------------------------------------
// schema validation

/// One problem in a JSON document, located by a JSON pointer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemaViolation {
    pub pointer: String,
    pub message: String,
}

fn violation(out: &mut Vec<SchemaViolation>, pointer: impl Into<String>, message: impl Into<String>) {
    out.push(SchemaViolation {
        pointer: pointer.into(),
        message: message.into(),
    });
}

/// Structural checks on a measure spec (shapes, ranges, row sums).
pub fn validate_measure_value(value: &Value) -> Vec<SchemaViolation> {
    let mut out = Vec::new();
    check_measure(value, "", &mut out);
    out
}

fn check_measure(value: &Value, at: &str, out: &mut Vec<SchemaViolation>) {
    let Some(obj) = value.as_object() else {
        violation(out, at, "expected an object");
        return;
    };
    let family = match obj.get("family") {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => {
            violation(out, format!("{at}/family"), "family must be a string");
            return;
        }
        None => {
            violation(out, format!("{at}/family"), format!("missing family; allowed: {}", FAMILIES.join(", ")));
            return;
        }
    };
    let allowed_keys: &[&str] = match family {
        "iid" => &["family", "p"],
        "markov" => &["family", "P"],
        "hmm" => &["family", "P", "E"],
        "mixture" => &["family", "weights", "components"],
        other => {
            violation(
                out,
                format!("{at}/family"),
                format!("unknown family {other:?}; allowed: {}", FAMILIES.join(", ")),
            );
            return;
        }
    };
    for key in obj.keys() {
        if !allowed_keys.contains(&key.as_str()) {
            violation(out, format!("{at}/{key}"), format!("unexpected field for family {family:?}"));
        }
    }
    let field = |key: &str, out: &mut Vec<SchemaViolation>| {
        let v = obj.get(key);
        if v.is_none() {
            violation(out, format!("{at}/{key}"), "missing field");
        }
        v
    };
    match family {
        "iid" => {
            if let Some(p) = field("p", out) {
                check_vector(p, &format!("{at}/p"), out);
            }
        }
        "markov" => {
            if let Some(p) = field("P", out) {
                check_matrix(p, &format!("{at}/P"), None, out);
            }
        }
        "hmm" => {
            let rows = field("P", out).and_then(|p| check_matrix(p, &format!("{at}/P"), None, out));
            if let Some(e) = field("E", out) {
                if let (Some(h), Some(arr)) = (rows, e.as_array()) {
                    if arr.len() != h {
                        violation(out, format!("{at}/E"), format!("has {} rows, expected one per hidden state ({h})", arr.len()));
                    }
                }
                check_matrix(e, &format!("{at}/E"), Some(0), out);
            }
        }
        "mixture" => {
            let w = field("weights", out);
            if let Some(w) = w {
                check_vector(w, &format!("{at}/weights"), out);
            }
            if let Some(c) = field("components", out) {
                match c.as_array() {
                    Some(items) if !items.is_empty() => {
                        for (i, item) in items.iter().enumerate() {
                            check_measure(item, &format!("{at}/components/{i}"), out);
                        }
                        if let Some(wn) = w.and_then(Value::as_array).map(Vec::len) {
                            if wn != items.len() {
                                violation(out, format!("{at}/weights"), format!("{wn} weights for {} components", items.len()));
                            }
                        }
                    }
                    _ => violation(out, format!("{at}/components"), "expected a non-empty array of measure specs"),
                }
            }
        }
        _ => unreachable!("family checked above"),
    }
}

/// Checks a probability vector; returns its length when it is an array.
fn check_vector(value: &Value, at: &str, out: &mut Vec<SchemaViolation>) -> Option<usize> {
    let Some(items) = value.as_array() else {
        violation(out, at, "expected an array of probabilities");
        return None;
    };
    if items.is_empty() {
        violation(out, at, "empty probability vector");
        return Some(0);
    }
    let mut sum = 0.0;
    let mut numeric = true;
    for (i, v) in items.iter().enumerate() {
        match v.as_f64() {
            Some(x) if x >= 0.0 && x.is_finite() => sum += x,
            _ => {
                numeric = false;
                violation(out, format!("{at}/{i}"), format!("expected a probability, got {v}"));
            }
        }
    }
    if numeric && (sum - 1.0).abs() > ROW_TOL {
        violation(out, at, format!("sums to {sum}, expected 1"));
    }
    Some(items.len())
}

/// Checks a row-stochastic matrix, square unless `width` is given
/// (`Some(0)` means "rows of equal, free width"). Returns the row count.
fn check_matrix(value: &Value, at: &str, width: Option<usize>, out: &mut Vec<SchemaViolation>) -> Option<usize> {
    let Some(rows) = value.as_array() else {
        violation(out, at, "expected an array of rows");
        return None;
    };
    if rows.is_empty() {
        violation(out, at, "empty matrix");
        return Some(0);
    }
    let expected = match width {
        None => Some(rows.len()),
        Some(0) => rows.first().and_then(Value::as_array).map(Vec::len),
        Some(w) => Some(w),
    };
    for (i, row) in rows.iter().enumerate() {
        let at_row = format!("{at}/{i}");
        let Some(len) = check_vector(row, &at_row, out) else {
            continue;
        };
        if let Some(w) = expected {
            if len != w {
                violation(out, at_row, format!("row has {len} entries, expected {w}"));
            }
        }
    }
    Some(rows.len())
}

/// Reads the spec at `path` and lists every violation; a structurally valid
/// spec is also built, so reducible chains and similar problems surface too.
pub fn schema_validate(path: &Path) -> Result<Vec<SchemaViolation>> {
    let text = fs::read_to_string(path)?;
    let value: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            return Ok(vec![SchemaViolation {
                pointer: String::new(),
                message: format!("not valid JSON: {e}"),
            }])
        }
    };
    let mut violations = validate_measure_value(&value);
    if violations.is_empty() {
        let built = serde_json::from_value::<MeasureSpec>(value)
            .map_err(Error::from)
            .and_then(|spec| spec.build());
        if let Err(e) = built {
            violation(&mut violations, "", e.to_string());
        }
    }
    Ok(violations)
}

// ---------------------------------------------------------------------------
// execution

/// Artifacts and manifest results of a run, before anything is written.
#[derive(Debug)]
pub struct RunOutput {
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub results: Value,
    /// A failure that still produced artifacts (e.g. a failed audit).
    pub failure: Option<Error>,
}

impl RunOutput {
    fn new(results: Value) -> Self {
        Self {
            artifacts: Vec::new(),
            results,
            failure: None,
        }
    }

    fn with(mut self, name: &str, bytes: impl Into<Vec<u8>>) -> Self {
        self.artifacts.push((name.to_string(), bytes.into()));
        self
    }

    pub fn artifact(&self, name: &str) -> Option<&[u8]> {
        self.artifacts.iter().find(|a| a.0 == name).map(|a| a.1.as_slice())
    }
}

fn build(spec: &MeasureSpec) -> Result<Measure> {
    spec.build()
}

fn series_csv(series: &ConvergenceSeries) -> Vec<u8> {
    series.to_csv().into_bytes()
}

fn pairs_csv(header: &str, rows: &[(u64, f64)]) -> Vec<u8> {
    let mut out = format!("n,{header}\n");
    for (n, v) in rows {
        out.push_str(&format!("{n},{v}\n"));
    }
    out.into_bytes()
}

fn ext_json(v: f64) -> Value {
    serde_json::to_value(Extended(v)).expect("f64 serializes")
}

#[derive(Serialize)]
struct Extended(#[serde(with = "crate::ext::extended")] f64);

fn pretty(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Upper-decoupling evidence for `Q`: the kernel bound for Markov-like
/// measures, an exhaustive audit otherwise.
fn evidence_for(q: &Measure, assume: bool, audit_n: usize) -> Result<DecouplingEvidence> {
    if assume {
        return Ok(DecouplingEvidence::Asserted);
    }
    if let Some(m) = q.as_markov() {
        return Ok(DecouplingEvidence::Bound {
            c: markov_decoupling_bound(&m, 0)?,
            tau: 0,
        });
    }
    let report = minimal_decoupling_constants(q.as_dyn(), audit_n, audit_n, &GapSchedule::zero(), DEFAULT_ENUMERATION_CAP)?;
    report.ensure_decoupled()?;
    Ok(DecouplingEvidence::Audited(report))
}

/// Closed-form cross entropy for Markov-like `P` and `Q`, or the
/// weight-averaged component values for a mixture `P`.
fn cross_entropy_oracle(p: &MeasureSpec, q: &Measure) -> Option<f64> {
    let qm = q.as_markov()?;
    match p {
        MeasureSpec::Mixture { weights, components } => weights
            .iter()
            .zip(components)
            .map(|(w, c)| cross_entropy_oracle(c, q).map(|h| w * h))
            .sum(),
        other => closed_form_cross_entropy_rate(&other.build().ok()?.as_markov()?, &qm).ok(),
    }
}

fn estimate_results(est: &EntropyEstimate, oracle: Option<f64>) -> Result<Value> {
    let mut v = serde_json::to_value(est)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("series");
        obj.insert("oracle".into(), oracle.map_or(Value::Null, ext_json));
        obj.insert(
            "oracle_gap".into(),
            oracle.map_or(Value::Null, |o| ext_json(ext::gap(est.estimate, o))),
        );
        obj.insert("series_convention".into(), json!("raw signed limit; estimate = -raw_limit"));
    }
    Ok(v)
}

/// Computes a run without touching the filesystem.
pub fn compute(task: &Task) -> Result<RunOutput> {
    match task {
        Task::FeketeCheck { sequence, gap, error, n, tol } => {
            let seq = sequence.build();
            let violations = check_gapped_subadditivity(&seq, gap, error, *n, *tol)?;
            let shown: Vec<_> = violations.iter().take(20).collect();
            Ok(RunOutput::new(json!({
                "horizon": n,
                "tolerance": tol,
                "violations": violations.len(),
                "first_violations": shown,
            })))
        }
        Task::FeketeLimit { sequence, gap, error, n, stride } => {
            let seq = sequence.build();
            let (series, report) = fekete_limit_estimate(&seq, gap, error, *n, *stride)?;
            Ok(RunOutput::new(json!({ "report": report })).with("series.csv", series_csv(&series)))
        }
        Task::FeketeLift { sequence, gap, probe, n, stride } => {
            let seq = sequence.build();
            let lift = gap_lift(&seq, gap, *probe)?;
            let (series, report) = fekete_limit_estimate(&lift.sequence, &lift.gap, &lift.error, *n, *stride)?;
            let errors: Vec<Value> = (1..=10u64)
                .map(|k| lift.error.value(k).map(ext_json))
                .collect::<Result<_>>()?;
            Ok(RunOutput::new(json!({ "report": report, "error_head": errors })).with("series.csv", series_csv(&series)))
        }
        Task::Sample { measure, n, seed } => {
            let m = build(measure)?;
            let x = sample_trajectory(m.as_dyn(), *n, *seed);
            let k = m.as_dyn().alphabet().size();
            Ok(RunOutput::new(json!({ "length": n, "alphabet": k, "measure": x.measure }))
                .with("trajectory.txt", x.to_text(k)))
        }
        Task::Series { p, q, n, seed, grid, offset } => {
            let (pm, qm) = (build(p)?, build(q)?);
            let x = sample_trajectory(pm.as_dyn(), n + offset, *seed);
            let series = shifted_kingman_series(&x, qm.as_dyn(), *offset, grid)?;
            let last = series.last().map(|e| ext_json(e.1));
            Ok(RunOutput::new(json!({ "terminal": last, "points": series.len() })).with("series.csv", series_csv(&series)))
        }
        Task::DecoupleAudit { measure, n_max, m_max, gap, cap } => {
            let m = build(measure)?;
            let report = minimal_decoupling_constants(m.as_dyn(), *n_max, *m_max, gap, *cap)?;
            let c_hat: Vec<Value> = report.levels.iter().map(|l| ext_json(l.c_hat)).collect();
            let mut out = RunOutput::new(json!({
                "decoupled": report.is_decoupled(),
                "c_hat": c_hat,
                "failure": report.failure,
            }))
            .with("report.json", pretty(&report)?);
            out.failure = report.ensure_decoupled().err();
            Ok(out)
        }
        Task::DecoupleBound { measure, tau_max } => {
            let m = build(measure)?;
            let chain = m
                .as_markov()
                .ok_or_else(|| Error::InvalidArgument("the kernel bound needs a Markov or full-support iid measure".into()))?;
            let values: Vec<Value> = (0..=*tau_max)
                .map(|t| markov_decoupling_bound(&chain, t).map(|c| json!({ "tau": t, "c": c })))
                .collect::<Result<_>>()?;
            let results = json!({ "c": markov_decoupling_bound(&chain, 0)?, "by_tau": values });
            Ok(RunOutput::new(results.clone()).with("bound.json", pretty(&results)?))
        }
        Task::EstimateCross(t) => {
            let (pm, qm) = (build(&t.p)?, build(&t.q)?);
            let evidence = evidence_for(&qm, t.assume_decoupled, t.audit_n)?;
            let est = cross_entropy_estimate_shifted(pm.as_dyn(), qm.as_dyn(), t.n, &t.grid, t.seed, t.offset, &evidence)?;
            let oracle = match pm {
                Measure::Mixture(_) => None,
                _ => cross_entropy_oracle(&t.p, &qm),
            };
            Ok(RunOutput::new(estimate_results(&est, oracle)?).with("series.csv", series_csv(&est.series)))
        }
        Task::EstimateRelent(t) => {
            let (pm, qm) = (build(&t.p)?, build(&t.q)?);
            let evidence = evidence_for(&qm, t.assume_decoupled, t.audit_n)?;
            let est = relative_entropy_estimate_shifted(pm.as_dyn(), qm.as_dyn(), t.n, &t.grid, t.seed, t.offset, &evidence)?;
            let oracle = match (pm.as_markov(), qm.as_markov()) {
                (Some(a), Some(b)) if !matches!(pm, Measure::Mixture(_)) => closed_form_kl_rate(&a, &b).ok(),
                _ => None,
            };
            Ok(RunOutput::new(estimate_results(&est, oracle)?).with("series.csv", series_csv(&est.series)))
        }
        Task::EstimateMean { p, q, n, trials, seed, grid } => {
            let (pm, qm) = (build(p)?, build(q)?);
            let mc = mean_convergence_series(qm.as_dyn(), pm.as_dyn(), grid, *n, *trials, *seed)?;
            let oracle = cross_entropy_oracle(p, &qm).map(|h| -h);
            let mean = mc.terminal_mean().unwrap_or(f64::NAN);
            let results = json!({
                "label": mc.label,
                "trials": trials,
                "terminal_mean": ext_json(mean),
                "terminal_standard_error": mc.terminal_standard_error().map(ext_json),
                "terminals": mc.terminals.iter().map(|&v| ext_json(v)).collect::<Vec<_>>(),
                "oracle": oracle.map(ext_json),
                "oracle_gap": oracle.map(|o| ext_json(ext::gap(mean, o))),
                "series_convention": "raw signed mean of (1/n) log Q_n",
            });
            Ok(RunOutput::new(results)
                .with("series.csv", series_csv(&mc.series))
                .with("standard_errors.csv", pairs_csv("standard_error", &mc.standard_errors)))
        }
        Task::SteeleRun { p, q, r, k_max, eps, n, seed, gap } => {
            let (pm, qm) = (build(p)?, build(q)?);
            let (pc, qc) = match (&pm, pm.as_markov(), qm.as_markov()) {
                (Measure::Mixture(_), _, _) | (_, None, _) | (_, _, None) => {
                    return Err(Error::InvalidArgument(
                        "steele run needs Markov or full-support iid P and Q (closed-form limit and decoupling bound)".into(),
                    ))
                }
                (_, Some(a), Some(b)) => (a, b),
            };
            let limit = -closed_form_cross_entropy_rate(&pc, &qc)?;
            let data = theorem_data_from_markov(&qc, gap)?;
            let overhang = k_max * r + gap.max_over_multiples(*r, *k_max)?;
            let x = sample_trajectory(pm.as_dyn(), (n + overhang + 1) as usize, *seed);
            let shared: Arc<dyn crate::measures::ShiftMeasure> = qm.clone().into_shared();
            let oracle = TrajectoryOracle::new(x.symbols, shared, data.rho, limit)?;
            let ctx = ProofContext::new(Arc::new(oracle), data.sigma, *r, *k_max, *eps)?.assuming_f_shift_monotone();
            let d = steele_decompose(&ctx, *n)?;
            let cover = verify_cover_bounds(&d, &ctx)?;
            let ub = verify_ub_rep(&d, &ctx, *n)?;
            let smallest = verify_smallest_k(&d, &ctx)?;
            let results = json!({
                "limit": ext_json(limit),
                "intervals": d.intervals.len() - 1,
                "good": d.good.len(),
                "bad": d.bad.len(),
                "tail_start": d.tail_start,
                "good_coverage": good_coverage_fraction(&d),
                "birkhoff_bad_average": birkhoff_bad_average(&ctx, *n as usize)?,
                "cover": cover,
                "ub_rep": ub,
                "smallest_k": smallest,
            });
            let mut out = RunOutput::new(results).with("decomposition.json", pretty(&d)?);
            if !cover.passed {
                out.failure = cover.ensure().err();
            } else if !ub.passed || !smallest.passed() {
                out.failure = Some(Error::Verification("upper representation or smallest-k check failed".into()));
            }
            Ok(out)
        }
    }
}

/// Writes `bytes` to `dir/name` through a temporary file in `dir`.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn manifest(config: &RunConfig, output: &RunOutput) -> Value {
    json!({
        "tool": "gapped",
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "artifacts": output.artifacts.iter().map(|a| a.0.clone()).collect::<Vec<_>>(),
        "results": output.results,
        "error": output.failure.as_ref().map(error_json),
    })
}

/// Runs `config`, writes its artifacts and manifest, and returns the output
/// directory. A failure detected after the artifacts were computed is
/// returned as an error once everything is on disk.
pub fn execute(config: &RunConfig) -> Result<PathBuf> {
    let output = match config.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| compute(&config.task))?,
        None => compute(&config.task)?,
    };
    fs::create_dir_all(&config.out)?;
    for (name, bytes) in &output.artifacts {
        write_atomic(&config.out, name, bytes)?;
    }
    write_atomic(&config.out, MANIFEST, &pretty(&manifest(config, &output))?)?;
    match output.failure {
        Some(e) => Err(e),
        None => Ok(config.out.clone()),
    }
}

pub fn read_manifest_config(path: &Path) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let config = value
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Schema(format!("{} has no config", path.display())))?;
    Ok(serde_json::from_value(config)?)
}

// ---------------------------------------------------------------------------
// exit codes

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_MEASURE: i32 = 3;
pub const EXIT_CAP: i32 = 4;
pub const EXIT_DECOUPLING: i32 = 5;
pub const EXIT_IO: i32 = 6;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Schema(_) | Error::Json(_) => EXIT_SCHEMA,
        Error::InvalidMeasure(_) | Error::Stationary(_) => EXIT_MEASURE,
        Error::EnumerationCap { .. } => EXIT_CAP,
        Error::NotDecoupled { .. } => EXIT_DECOUPLING,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Schema(_) | Error::Json(_) => "schema",
        Error::InvalidMeasure(_) | Error::Stationary(_) => "measure",
        Error::EnumerationCap { .. } => "enumeration_cap",
        Error::NotDecoupled { .. } => "not_decoupled",
        Error::Io(_) => "io",
        Error::Verification(_) => "verification",
        Error::Decomposition(_) => "decomposition",
        _ => "invalid_argument",
    }
}

pub fn error_json(e: &Error) -> Value {
    let mut v = json!({
        "error": error_kind(e),
        "code": exit_code(e),
        "message": e.to_string(),
    });
    match e {
        Error::NotDecoupled { n, m, a, b } => {
            v["at"] = json!({ "n": n, "m": m, "a": a, "b": b });
        }
        Error::Schema(detail) => {
            if let Ok(list) = serde_json::from_str::<Value>(detail) {
                v["violations"] = list;
            }
        }
        _ => {}
    }
    v
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let report = |e: &Error| {
        eprintln!("{}", error_json(e));
        exit_code(e)
    };
    let invocation = match cli.resolve() {
        Ok(i) => i,
        Err(e) => return report(&e),
    };
    match invocation {
        Invocation::Validate(path) => match schema_validate(&path) {
            Ok(v) => {
                println!("{}", serde_json::to_string_pretty(&json!({ "violations": v })).expect("serializable"));
                if v.is_empty() {
                    EXIT_OK
                } else {
                    EXIT_SCHEMA
                }
            }
            Err(e) => report(&e),
        },
        Invocation::Run(config) => match execute(&config) {
            Ok(dir) => {
                println!("{}", dir.join(MANIFEST).display());
                EXIT_OK
            }
            Err(e) => report(&e),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_reports_row_sum_with_pointer() {
        let v: Value = serde_json::from_str(r#"{"family":"markov","P":[[0.5,0.4],[0.5,0.5]]}"#).unwrap();
        let report = validate_measure_value(&v);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].pointer, "/P/0");
        assert!(report[0].message.contains("0.9"), "{}", report[0].message);
    }

    #[test]
    fn schema_names_allowed_families() {
        let v: Value = serde_json::from_str(r#"{"family":"gaussian"}"#).unwrap();
        let report = validate_measure_value(&v);
        assert_eq!(report[0].pointer, "/family");
        for f in FAMILIES {
            assert!(report[0].message.contains(f));
        }
    }

    #[test]
    fn schema_accepts_valid_specs() {
        for spec in [
            r#"{"family":"markov","P":[[0.9,0.1],[0.2,0.8]]}"#,
            r#"{"family":"iid","p":[0.25,0.75]}"#,
            r#"{"family":"hmm","P":[[0.9,0.1],[0.2,0.8]],"E":[[0.5,0.5],[0.1,0.9]]}"#,
            r#"{"family":"mixture","weights":[0.5,0.5],"components":[{"family":"iid","p":[0.9,0.1]},{"family":"iid","p":[0.1,0.9]}]}"#,
        ] {
            let v: Value = serde_json::from_str(spec).unwrap();
            assert!(validate_measure_value(&v).is_empty(), "{spec}");
        }
    }

    #[test]
    fn schema_descends_into_components() {
        let v: Value = serde_json::from_str(
            r#"{"family":"mixture","weights":[1.0],"components":[{"family":"iid","p":[0.3,"x"]}]}"#,
        )
        .unwrap();
        let report = validate_measure_value(&v);
        assert_eq!(report[0].pointer, "/components/0/p/1");
    }

    #[test]
    fn gap_shorthands() {
        assert_eq!(parse_gap("constant:3").unwrap(), GapSchedule::constant(3));
        assert_eq!(parse_gap("ceil_log2").unwrap(), GapSchedule::ceil_log2());
        assert_eq!(parse_gap(r#"{"table":[0,1,2]}"#).unwrap(), GapSchedule::table(vec![0, 1, 2]));
        assert!(parse_error("power:1:0.5").is_ok());
    }

    #[test]
    fn exit_codes_are_distinct() {
        let errs = [
            Error::Schema(String::new()),
            Error::InvalidMeasure(String::new()),
            Error::EnumerationCap { required: 1, cap: 0 },
            Error::NotDecoupled { n: 1, m: 1, a: vec![], b: vec![] },
            Error::Io(std::io::Error::other("x")),
            Error::InvalidArgument(String::new()),
        ];
        let mut codes: Vec<i32> = errs.iter().map(exit_code).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), errs.len());
    }

    #[test]
    fn config_round_trips() {
        let config = RunConfig {
            task: Task::Series {
                p: MeasureSpec::Markov {
                    p: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
                },
                q: MeasureSpec::Iid { p: vec![0.5, 0.5] },
                n: 100,
                seed: 1,
                grid: Grid::default(),
                offset: 0,
            },
            out: PathBuf::from("x"),
            workers: Some(2),
        };
        let text = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
