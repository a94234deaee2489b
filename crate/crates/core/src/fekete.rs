//! Deterministic gapped Fekete engine.
//!
//! For a sequence `F_n` in `[-inf, inf)` with gaps `sigma_n` and errors `R_n`
//! satisfying `F_{n + sigma_n + m} <= F_n + R_n + F_m`, the limit of `F_n / n`
//! equals `inf_n (F_n + R_n) / (n + sigma_n)`. This module checks the
//! condition by brute force, evaluates the infimum at a finite horizon and
//! tabulates `F_n / n`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ext;
use crate::schedules::{ConvergenceSeries, ErrorSchedule, GapSchedule};

/// Default absolute tolerance for violation detection.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Default horizon cap for the O(N^2) checker.
pub const DEFAULT_CHECK_CAP: u64 = 5000;

/// A pure map `n -> F_n` in `[-inf, inf)`.
#[derive(Clone)]
pub struct RealSequence {
    name: String,
    eval: Arc<dyn Fn(u64) -> f64 + Send + Sync>,
}

impl fmt::Debug for RealSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RealSequence").field("name", &self.name).finish()
    }
}

impl RealSequence {
    pub fn new(name: impl Into<String>, eval: impl Fn(u64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(eval),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, n: u64) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidArgument("sequences are indexed from n = 1".into()));
        }
        ext::check((self.eval)(n), || format!("sequence {:?} at n = {n}", self.name))
    }

    /// `[F_1, ..., F_horizon]`, evaluated in parallel.
    pub fn memoize(&self, horizon: u64) -> Result<Vec<f64>> {
        (1..=horizon).into_par_iter().map(|n| self.value(n)).collect()
    }
}

/// Named sequence families, used by the JSON front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum BuiltinSequence {
    /// `slope * n`
    Linear { slope: f64 },
    /// `slope * n + coeff * sqrt(n)`
    LinearSqrt { slope: f64, coeff: f64 },
    /// `coeff * n^exponent`
    Power { coeff: f64, exponent: f64 },
    /// `coeff * n * ln n`
    NLogN { coeff: f64 },
    /// `values[n - 1]`; entries may be `"-inf"`.
    Table {
        #[serde(with = "crate::ext::extended_vec")]
        values: Vec<f64>,
    },
}

impl BuiltinSequence {
    pub fn build(&self) -> RealSequence {
        match self.clone() {
            Self::Linear { slope } => RealSequence::new("linear", move |n| slope * n as f64),
            Self::LinearSqrt { slope, coeff } => RealSequence::new("linear_sqrt", move |n| {
                let x = n as f64;
                slope * x + coeff * x.sqrt()
            }),
            Self::Power { coeff, exponent } => {
                RealSequence::new("power", move |n| coeff * (n as f64).powf(exponent))
            }
            Self::NLogN { coeff } => RealSequence::new("n_log_n", move |n| {
                let x = n as f64;
                coeff * x * x.ln()
            }),
            Self::Table { values } => RealSequence::new("table", move |n| {
                values.get((n - 1) as usize).copied().unwrap_or(f64::NAN)
            }),
        }
    }
}

/// One failure of `F_{n + sigma_n + m} <= F_n + R_n + F_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub n: u64,
    pub m: u64,
    /// Left side minus right side; `inf` when the right side is `-inf` and the
    /// left side is finite.
    #[serde(with = "crate::ext::extended")]
    pub excess: f64,
}

fn excess(lhs: f64, rhs: f64) -> Option<f64> {
    if lhs == f64::NEG_INFINITY {
        None
    } else if rhs == f64::NEG_INFINITY {
        Some(f64::INFINITY)
    } else {
        Some(lhs - rhs)
    }
}

/// Enumerates every pair `(n, m)` with `n + sigma_n + m <= horizon` and
/// returns the violations sorted by `(n, m)`.
pub fn check_gapped_subadditivity(
    seq: &RealSequence,
    gap: &GapSchedule,
    err: &ErrorSchedule,
    horizon: u64,
    tol: f64,
) -> Result<Vec<Violation>> {
    check_gapped_subadditivity_capped(seq, gap, err, horizon, tol, DEFAULT_CHECK_CAP)
}

pub fn check_gapped_subadditivity_capped(
    seq: &RealSequence,
    gap: &GapSchedule,
    err: &ErrorSchedule,
    horizon: u64,
    tol: f64,
    cap: u64,
) -> Result<Vec<Violation>> {
    if horizon < 2 {
        return Err(Error::InvalidArgument(format!("checker horizon must be >= 2, got {horizon}")));
    }
    if horizon > cap {
        return Err(Error::InvalidArgument(format!(
            "checker horizon {horizon} exceeds the cap {cap} (cost grows as N^2)"
        )));
    }
    let values = seq.memoize(horizon)?;
    let f = |i: u64| values[(i - 1) as usize];
    let per_n: Vec<Vec<Violation>> = (1..horizon)
        .into_par_iter()
        .map(|n| -> Result<Vec<Violation>> {
            let sigma = gap.value(n)?;
            let mut out = Vec::new();
            if n + sigma + 1 > horizon {
                return Ok(out);
            }
            let head = f(n) + err.value(n)?;
            for m in 1..=(horizon - n - sigma) {
                if let Some(e) = excess(f(n + sigma + m), head + f(m)) {
                    if e > tol {
                        out.push(Violation { n, m, excess: e });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_n.into_iter().flatten().collect())
}

/// Finite-horizon Fekete data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeketeReport {
    pub horizon: u64,
    /// `min_{n <= N} (F_n + R_n) / (n + sigma_n)`.
    #[serde(with = "crate::ext::extended")]
    pub infimum: f64,
    /// Smallest index attaining the infimum.
    pub argmin: u64,
    /// `F_N / N`.
    #[serde(with = "crate::ext::extended")]
    pub limit_proxy: f64,
    /// `|F_N / N - infimum|`, zero when both are `-inf`.
    #[serde(with = "crate::ext::extended")]
    pub gap: f64,
}

pub fn fekete_infimum(seq: &RealSequence, gap: &GapSchedule, err: &ErrorSchedule, horizon: u64) -> Result<FeketeReport> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("Fekete horizon must be >= 1".into()));
    }
    let ratios: Vec<(u64, f64)> = (1..=horizon)
        .into_par_iter()
        .map(|n| -> Result<(u64, f64)> {
            let fn_ = seq.value(n)?;
            let num = fn_ + err.value(n)?;
            Ok((n, num / (n + gap.value(n)?) as f64))
        })
        .collect::<Result<_>>()?;
    let (argmin, infimum) = ratios
        .iter()
        .copied()
        .fold((1, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    let limit_proxy = seq.value(horizon)? / horizon as f64;
    Ok(FeketeReport {
        horizon,
        infimum,
        argmin,
        limit_proxy,
        gap: ext::gap(limit_proxy, infimum),
    })
}

/// `F_n / n` on `{stride, 2 stride, ..., N}` (plus `N` itself) and the report
/// at `N`.
pub fn fekete_limit_estimate(
    seq: &RealSequence,
    gap: &GapSchedule,
    err: &ErrorSchedule,
    horizon: u64,
    stride: u64,
) -> Result<(ConvergenceSeries, FeketeReport)> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let report = fekete_infimum(seq, gap, err, horizon)?;
    let mut series = ConvergenceSeries::new(format!("F_n/n ({})", seq.name()));
    let mut n = stride;
    while n <= horizon {
        series.push(n, seq.value(n)? / n as f64)?;
        n += stride;
    }
    if horizon % stride != 0 {
        series.push(horizon, seq.value(horizon)? / horizon as f64)?;
    }
    Ok((series, report))
}

/// A gapped triple built from a gapless subadditive sequence.
#[derive(Debug, Clone)]
pub struct GapLift {
    pub sequence: RealSequence,
    pub gap: GapSchedule,
    pub error: ErrorSchedule,
}

/// Turns a gapless subadditive `F` into a gapped triple with
/// `R_n = max(F_{sigma_n}, 0)` (and `R_n = 0` when `sigma_n = 0`), using
/// `F_{n + s + m} <= F_{n + s} + F_m <= F_n + F_s + F_m`.
pub fn gap_lift(seq: &RealSequence, gap: &GapSchedule, probe_horizon: u64) -> Result<GapLift> {
    let violations = check_gapped_subadditivity(seq, &GapSchedule::zero(), &ErrorSchedule::zero(), probe_horizon, 0.0)?;
    if let Some(v) = violations.first() {
        return Err(Error::InvalidArgument(format!(
            "{:?} is not subadditive at (n, m) = ({}, {}), excess {}; gap_lift needs a gapless subadditive input",
            seq.name(),
            v.n,
            v.m,
            v.excess
        )));
    }
    if gap.is_zero() {
        return Ok(GapLift {
            sequence: seq.clone(),
            gap: gap.clone(),
            error: ErrorSchedule::zero(),
        });
    }
    let inner = seq.clone();
    let g = gap.clone();
    let error = ErrorSchedule::derived(format!("gap_lift({})", seq.name()), move |n| {
        match g.value(n) {
            Ok(0) => 0.0,
            Ok(s) => inner.value(s).map(|v| v.max(0.0)).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        }
    });
    Ok(GapLift {
        sequence: seq.clone(),
        gap: gap.clone(),
        error,
    })
}
