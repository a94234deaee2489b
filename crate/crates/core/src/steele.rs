//! Bad sets, Birkhoff averages and gapped Steele-type interval
//! decompositions along a fixed trajectory.
//!
//! Everything is phrased through a [`FunctionalOracle`] giving
//! `f_n(T^j x)`, `rho_n(T^j x)` and the limit `f(T^j x)`. The block test at
//! offset `j` for `k = 1..=K` is
//! `(f_{kr} + rho_{kr})(T^j x) / (kr + sigma_{kr}) <= max(f(T^j x), -1/eps) + eps`;
//! `j` lies in the bad set when no `k` passes.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{ShiftMeasure, Symbol};
use crate::sampling::{prefix_log_marginals, Grid};
use crate::schedules::{ConvergenceSeries, ErrorSchedule, GapSchedule};

/// Values of `f_n`, `rho_n` and `f` along the orbit of one point.
pub trait FunctionalOracle: Send + Sync {
    /// `f_1(T^offset x), ..., f_len(T^offset x)`.
    fn prefix_values(&self, offset: usize, len: usize) -> Result<Vec<f64>>;

    /// `rho_n(T^offset x)`.
    fn rho(&self, offset: usize, n: u64) -> Result<f64>;

    /// `f(T^offset x)`, possibly `-inf`.
    fn limit(&self, offset: usize) -> f64;

    /// `f_len(T^offset x)` is defined iff `offset + len <= horizon`.
    fn horizon(&self) -> usize;

    fn value(&self, offset: usize, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidArgument("f_n needs n >= 1".into()));
        }
        Ok(*self.prefix_values(offset, n)?.last().expect("n >= 1"))
    }
}

/// `f_n = log Q_n` along a stored path.
pub struct TrajectoryOracle {
    symbols: Arc<[Symbol]>,
    measure: Arc<dyn ShiftMeasure>,
    rho: ErrorSchedule,
    limit: f64,
}

impl TrajectoryOracle {
    pub fn new(symbols: impl Into<Arc<[Symbol]>>, measure: Arc<dyn ShiftMeasure>, rho: ErrorSchedule, limit: f64) -> Result<Self> {
        let symbols = symbols.into();
        measure.alphabet().validate(&symbols)?;
        crate::ext::check(limit, || "limit oracle".to_string())?;
        Ok(Self {
            symbols,
            measure,
            rho,
            limit,
        })
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }
}

impl fmt::Debug for TrajectoryOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrajectoryOracle")
            .field("len", &self.symbols.len())
            .field("measure", &self.measure.id())
            .field("limit", &self.limit)
            .finish()
    }
}

impl FunctionalOracle for TrajectoryOracle {
    fn prefix_values(&self, offset: usize, len: usize) -> Result<Vec<f64>> {
        prefix_log_marginals(&self.symbols, self.measure.as_ref(), offset, len)
    }

    fn rho(&self, offset: usize, n: u64) -> Result<f64> {
        self.rho.value_at(&self.symbols, offset, n)
    }

    fn limit(&self, _offset: usize) -> f64 {
        self.limit
    }

    fn horizon(&self) -> usize {
        self.symbols.len()
    }
}

type OffsetLenFn = dyn Fn(usize, u64) -> f64 + Send + Sync;

/// Oracle built from closures `(offset, n) -> f_n`, `(offset, n) -> rho_n`
/// and `offset -> f`.
pub struct SyntheticOracle {
    horizon: usize,
    f: Arc<OffsetLenFn>,
    rho: Arc<OffsetLenFn>,
    limit: Arc<dyn Fn(usize) -> f64 + Send + Sync>,
}

impl SyntheticOracle {
    pub fn new(
        horizon: usize,
        f: impl Fn(usize, u64) -> f64 + Send + Sync + 'static,
        rho: impl Fn(usize, u64) -> f64 + Send + Sync + 'static,
        limit: impl Fn(usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            horizon,
            f: Arc::new(f),
            rho: Arc::new(rho),
            limit: Arc::new(limit),
        }
    }
}

impl fmt::Debug for SyntheticOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyntheticOracle").field("horizon", &self.horizon).finish()
    }
}

impl FunctionalOracle for SyntheticOracle {
    fn prefix_values(&self, offset: usize, len: usize) -> Result<Vec<f64>> {
        if offset + len > self.horizon {
            return Err(Error::InvalidArgument(format!(
                "window [{offset}, {offset} + {len}) exceeds oracle horizon {}",
                self.horizon
            )));
        }
        (1..=len as u64)
            .map(|n| {
                let v = (self.f)(offset, n);
                crate::ext::check(v, || format!("f_{n} at offset {offset}")).map(|_| v)
            })
            .collect()
    }

    fn rho(&self, offset: usize, n: u64) -> Result<f64> {
        let v = (self.rho)(offset, n);
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho_{n} at offset {offset} is {v}; expected finite and >= 0")));
        }
        Ok(v)
    }

    fn limit(&self, offset: usize) -> f64 {
        (self.limit)(offset)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Which almost-subadditivity condition the oracle claims.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionVariant {
    /// `f_{n+sigma_n+m} <= f_n + rho_n + f_m o T^{n+sigma_n}`.
    Standard,
    /// `f_{n+sigma_m+m} <= f_n + (f_m + rho_m) o T^{n+sigma_m}`; the interval
    /// construction does not apply to it.
    SwappedGap,
}

#[derive(Clone)]
pub struct ProofContext {
    pub oracle: Arc<dyn FunctionalOracle>,
    pub gap: GapSchedule,
    pub r: u64,
    pub k_max: u64,
    pub eps: f64,
    pub variant: ConditionVariant,
    pub assume_f_shift_monotone: bool,
}

impl fmt::Debug for ProofContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProofContext")
            .field("gap", &self.gap)
            .field("r", &self.r)
            .field("k_max", &self.k_max)
            .field("eps", &self.eps)
            .field("variant", &self.variant)
            .finish()
    }
}

impl ProofContext {
    pub fn new(oracle: Arc<dyn FunctionalOracle>, gap: GapSchedule, r: u64, k_max: u64, eps: f64) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("r must be >= 1".into()));
        }
        if k_max == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be positive and finite, got {eps}")));
        }
        Ok(Self {
            oracle,
            gap,
            r,
            k_max,
            eps,
            variant: ConditionVariant::Standard,
            assume_f_shift_monotone: false,
        })
    }

    pub fn with_variant(mut self, variant: ConditionVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Declares `f_{n+1} <= f_n o T`, which lifts the `sigma_1 = 0`
    /// requirement (log-marginals of an invariant measure satisfy it).
    pub fn assuming_f_shift_monotone(mut self) -> Self {
        self.assume_f_shift_monotone = true;
        self
    }

    /// `max(f(T^j x), -1/eps) + eps`.
    pub fn threshold(&self, offset: usize) -> f64 {
        let f = self.oracle.limit(offset);
        if f.is_nan() {
            return f;
        }
        f.max(-1.0 / self.eps) + self.eps
    }

    /// `K r + max_{k <= K} sigma_{kr}`.
    pub fn overhang(&self) -> Result<u64> {
        Ok(self.k_max * self.r + self.gap.max_over_multiples(self.r, self.k_max)?)
    }

    /// Oracle horizon needed to decompose `[0, n]`.
    pub fn required_horizon(&self, n: u64) -> Result<u64> {
        Ok(n + self.overhang()?)
    }

    fn block_len(&self, k: u64) -> Result<u64> {
        Ok(k * self.r + self.gap.value(k * self.r)?)
    }

    fn block_ratio(&self, prefix: &[f64], offset: usize, k: u64) -> Result<f64> {
        let kr = k * self.r;
        let f = prefix[kr as usize - 1];
        let rho = self.oracle.rho(offset, kr)?;
        Ok((f + rho) / self.block_len(k)? as f64)
    }

    /// Smallest `k <= K` passing the block test at `offset`, or `None` when
    /// `offset` is in the bad set.
    pub fn smallest_good_k(&self, offset: usize) -> Result<Option<u64>> {
        let prefix = self.oracle.prefix_values(offset, (self.k_max * self.r) as usize)?;
        let thr = self.threshold(offset);
        for k in 1..=self.k_max {
            if self.block_ratio(&prefix, offset, k)? <= thr {
                return Ok(Some(k));
            }
        }
        Ok(None)
    }

    fn check_ready(&self) -> Result<()> {
        if self.variant == ConditionVariant::SwappedGap {
            return Err(Error::Decomposition(
                "the swapped-gap condition is not supported by the interval construction".into(),
            ));
        }
        self.gap.require_theorem_ready(self.assume_f_shift_monotone)
    }
}

/// Membership of `T^offset x` in the bad set: every `k <= K` fails the block
/// test.
pub fn bad_set_member(ctx: &ProofContext, offset: usize) -> Result<bool> {
    let prefix = ctx.oracle.prefix_values(offset, (ctx.k_max * ctx.r) as usize)?;
    let thr = ctx.threshold(offset);
    for k in 1..=ctx.k_max {
        if !(ctx.block_ratio(&prefix, offset, k)? > thr) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Bad-set indicators for offsets `0..len`.
pub fn bad_indicators(ctx: &ProofContext, len: usize) -> Result<Vec<bool>> {
    (0..len).into_par_iter().map(|j| bad_set_member(ctx, j)).collect()
}

fn bad_weights(ctx: &ProofContext, n: usize) -> Result<Vec<f64>> {
    let r = ctx.r as usize;
    (0..n)
        .into_par_iter()
        .map(|j| -> Result<f64> {
            if !bad_set_member(ctx, j)? {
                return Ok(0.0);
            }
            let fr = ctx.oracle.value(j, r)?.max(0.0);
            Ok(1.0 + fr + ctx.oracle.rho(j, ctx.r)?)
        })
        .collect()
}

/// `(1/n) sum_{j<n} 1_D (1 + f_{r,+} + rho_r)(T^j x)`.
pub fn birkhoff_bad_average(ctx: &ProofContext, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let w = bad_weights(ctx, n)?;
    Ok(w.iter().sum::<f64>() / n as f64)
}

/// [`birkhoff_bad_average`] at every grid point up to `n`.
pub fn birkhoff_bad_series(ctx: &ProofContext, n: usize, grid: &Grid) -> Result<ConvergenceSeries> {
    let w = bad_weights(ctx, n)?;
    let mut series = ConvergenceSeries::new(format!("bad-set Birkhoff average (r = {}, K = {}, eps = {})", ctx.r, ctx.k_max, ctx.eps));
    let mut acc = 0.0;
    let mut done = 0usize;
    for p in grid.points(n as u64)? {
        while done < p as usize {
            acc += w[done];
            done += 1;
        }
        series.push(p, acc / p as f64)?;
    }
    Ok(series)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum IntervalCase {
    /// `I_0 = {0}`.
    Base,
    /// Block test passed with smallest index `k`.
    Good { k: u64 },
    /// Offset in the bad set; fallback block of length `r + sigma_r`.
    Bad,
}

/// Integer interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Interval {
    pub index: usize,
    pub start: u64,
    pub end: u64,
    #[serde(flatten)]
    pub case: IntervalCase,
}

impl Interval {
    pub fn len(&self) -> u64 {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteeleDecomposition {
    pub n: u64,
    pub r: u64,
    pub k_max: u64,
    pub eps: f64,
    /// `I_0, I_1, ..., I_L`, every `I_l` with `l >= 1` inside `[1, n - 1]`.
    pub intervals: Vec<Interval>,
    /// Indices of Case-1 intervals.
    pub good: Vec<usize>,
    /// Indices of Case-2 intervals.
    pub bad: Vec<usize>,
    /// `M_n`, the last endpoint.
    pub tail_start: u64,
    /// The next interval, which no longer fits in `[1, n - 1]`.
    pub overhang: Option<Interval>,
}

impl SteeleDecomposition {
    /// `m_l = max I_l`.
    pub fn endpoint(&self, l: usize) -> u64 {
        self.intervals[l].end
    }

    pub fn good_total(&self) -> u64 {
        self.good.iter().map(|&l| self.intervals[l].len()).sum()
    }

    pub fn tail(&self) -> u64 {
        self.n - self.tail_start
    }
}

/// Builds the interval collection for `[0, n]`.
pub fn steele_decompose(ctx: &ProofContext, n: u64) -> Result<SteeleDecomposition> {
    ctx.check_ready()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let need = ctx.required_horizon(n)?;
    if (ctx.oracle.horizon() as u64) < need {
        return Err(Error::InvalidArgument(format!(
            "oracle horizon {} is below the required n + K r + max sigma = {need}",
            ctx.oracle.horizon()
        )));
    }
    let mut intervals = vec![Interval {
        index: 0,
        start: 0,
        end: 0,
        case: IntervalCase::Base,
    }];
    let (mut good, mut bad) = (Vec::new(), Vec::new());
    let overhang = loop {
        let m = intervals.last().expect("I_0").end;
        let index = intervals.len();
        let member = bad_set_member(ctx, m as usize)?;
        let (len, case) = if member {
            (ctx.block_len(1)?, IntervalCase::Bad)
        } else {
            let k = ctx.smallest_good_k(m as usize)?.ok_or_else(|| {
                Error::Decomposition(format!(
                    "offset {m} is outside the bad set but no k <= {} passes the block test",
                    ctx.k_max
                ))
            })?;
            (ctx.block_len(k)?, IntervalCase::Good { k })
        };
        let next = Interval {
            index,
            start: m + 1,
            end: m + len,
            case,
        };
        if next.end > n - 1 {
            break next;
        }
        match case {
            IntervalCase::Good { .. } => good.push(index),
            _ => bad.push(index),
        }
        intervals.push(next);
    };
    let tail_start = intervals.last().expect("I_0").end;
    Ok(SteeleDecomposition {
        n,
        r: ctx.r,
        k_max: ctx.k_max,
        eps: ctx.eps,
        intervals,
        good,
        bad,
        tail_start,
        overhang: Some(overhang),
    })
}

/// Integer checks on a decomposition:
/// `n - (r + sigma_r) sum_{j=0}^{n} 1_D(T^j x) - K r - max sigma <= sum_G |I_l| <= n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverCheck {
    pub n: u64,
    pub good_total: u64,
    /// `sum_{j=0}^{n} 1_D(T^j x)`.
    pub bad_count: u64,
    pub lower_bound: i128,
    /// `sum_G |I_l| - lower_bound`.
    pub lower_slack: i128,
    /// `(n - 1) - sum_G |I_l|`: uncovered indices of `[1, n - 1]`.
    pub upper_slack: i128,
    /// `n - M_n`.
    pub tail: u64,
    /// Intervals are consecutive from `I_0`, lengths match their case, and
    /// `1 + sum |I_l| + (n - 1 - M_n) = n`.
    pub structure_ok: bool,
    pub passed: bool,
    pub problems: Vec<String>,
}

impl CoverCheck {
    pub fn ensure(&self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::Verification(serde_json::to_string(self)?))
        }
    }
}

pub fn verify_cover_bounds(d: &SteeleDecomposition, ctx: &ProofContext) -> Result<CoverCheck> {
    let mut problems = Vec::new();
    let first = d.intervals.first();
    if first.map(|i| (i.start, i.end, i.case)) != Some((0, 0, IntervalCase::Base)) {
        problems.push("I_0 is not {0}".to_string());
    }
    for w in d.intervals.windows(2) {
        if w[0].end + 1 != w[1].start {
            problems.push(format!("I_{} and I_{} are not consecutive", w[0].index, w[1].index));
        }
    }
    let mut good_set = Vec::new();
    let mut bad_set = Vec::new();
    for iv in &d.intervals[1..] {
        if iv.end > d.n - 1 {
            problems.push(format!("I_{} leaves [1, n - 1]", iv.index));
        }
        let expected = match iv.case {
            IntervalCase::Good { k } if (1..=ctx.k_max).contains(&k) => {
                good_set.push(iv.index);
                ctx.block_len(k)?
            }
            IntervalCase::Bad => {
                bad_set.push(iv.index);
                ctx.block_len(1)?
            }
            other => {
                problems.push(format!("I_{} has invalid case {other:?}", iv.index));
                continue;
            }
        };
        if iv.len() != expected {
            problems.push(format!("I_{} has length {} instead of {expected}", iv.index, iv.len()));
        }
    }
    if good_set != d.good || bad_set != d.bad {
        problems.push("good/bad index sets do not match the interval labels".to_string());
    }
    let covered: u64 = d.intervals[1..].iter().map(Interval::len).sum();
    let m_n = d.intervals.last().map_or(0, |i| i.end);
    if m_n != d.tail_start || 1 + covered + (d.n - 1 - m_n.min(d.n - 1)) != d.n {
        problems.push("interval bookkeeping does not add up to n".to_string());
    }
    let structure_ok = problems.is_empty();

    let bad_count = bad_indicators(ctx, d.n as usize + 1)?.into_iter().filter(|&b| b).count() as u64;
    let good_total = d.good_total();
    let lower_bound = d.n as i128 - ctx.block_len(1)? as i128 * bad_count as i128 - ctx.overhang()? as i128;
    let lower_slack = good_total as i128 - lower_bound;
    let upper_slack = (d.n as i128 - 1) - good_total as i128;
    if lower_slack < 0 {
        problems.push(format!("lower cover bound violated by {}", -lower_slack));
    }
    if good_total > d.n {
        problems.push(format!("good intervals cover {good_total} > n = {}", d.n));
    }
    Ok(CoverCheck {
        n: d.n,
        good_total,
        bad_count,
        lower_bound,
        lower_slack,
        upper_slack,
        tail: d.tail(),
        structure_ok,
        passed: problems.is_empty(),
        problems,
    })
}

/// `f_n(x)` against the block upper bound
/// `sum_G (f_{k r} + rho_{k r}) + sum_B (f_r + rho_r) + f_{n - M_n, +}(T^{M_n} x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UbRepCheck {
    pub n: u64,
    #[serde(with = "crate::ext::extended")]
    pub lhs: f64,
    #[serde(with = "crate::ext::extended")]
    pub good_terms: f64,
    #[serde(with = "crate::ext::extended")]
    pub bad_terms: f64,
    pub tail_term: f64,
    #[serde(with = "crate::ext::extended")]
    pub rhs: f64,
    /// `rhs - lhs`; `+inf` when `lhs = -inf`.
    #[serde(with = "crate::ext::extended")]
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const UB_REP_RELATIVE_TOLERANCE: f64 = 1e-8;

pub fn verify_ub_rep(d: &SteeleDecomposition, ctx: &ProofContext, n: u64) -> Result<UbRepCheck> {
    if n != d.n {
        return Err(Error::InvalidArgument(format!("decomposition is for n = {}, not {n}", d.n)));
    }
    let oracle = &ctx.oracle;
    let lhs = oracle.value(0, n as usize)?;
    let mut good_terms = 0.0;
    let mut bad_terms = 0.0;
    for iv in &d.intervals[1..] {
        let start = (iv.start - 1) as usize;
        let block = match iv.case {
            IntervalCase::Good { k } => k * ctx.r,
            IntervalCase::Bad => ctx.r,
            IntervalCase::Base => continue,
        };
        let term = oracle.value(start, block as usize)? + oracle.rho(start, block)?;
        match iv.case {
            IntervalCase::Good { .. } => good_terms += term,
            _ => bad_terms += term,
        }
    }
    let tail_len = (n - d.tail_start) as usize;
    let tail_term = oracle.value(d.tail_start as usize, tail_len)?.max(0.0);
    let rhs = good_terms + bad_terms + tail_term;
    let residual = if lhs == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        rhs - lhs
    };
    let tolerance = UB_REP_RELATIVE_TOLERANCE * n as f64;
    Ok(UbRepCheck {
        n,
        lhs,
        good_terms,
        bad_terms,
        tail_term,
        rhs,
        residual,
        tolerance,
        passed: residual >= -tolerance,
    })
}

/// Post-hoc check of the case labels: each Case-1 interval's `k` passes and
/// no smaller `k` does; each Case-2 start fails every `k`. Recomputed with
/// one oracle query per block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallestKCheck {
    pub good_checked: usize,
    pub bad_checked: usize,
    /// Indices of intervals whose label does not re-verify.
    pub failures: Vec<usize>,
}

impl SmallestKCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn verify_smallest_k(d: &SteeleDecomposition, ctx: &ProofContext) -> Result<SmallestKCheck> {
    let passes = |offset: usize, k: u64| -> Result<bool> {
        let kr = k * ctx.r;
        let f = ctx.oracle.value(offset, kr as usize)?;
        let rho = ctx.oracle.rho(offset, kr)?;
        let denom = (kr + ctx.gap.value(kr)?) as f64;
        Ok((f + rho) / denom <= ctx.threshold(offset))
    };
    let outcomes: Vec<(bool, bool)> = d.intervals[1..]
        .par_iter()
        .map(|iv| -> Result<(bool, bool)> {
            let offset = (iv.start - 1) as usize;
            match iv.case {
                IntervalCase::Good { k } => {
                    let mut ok = passes(offset, k)?;
                    for smaller in 1..k {
                        ok &= !passes(offset, smaller)?;
                    }
                    Ok((true, ok))
                }
                IntervalCase::Bad => {
                    let mut ok = true;
                    for k in 1..=ctx.k_max {
                        ok &= !passes(offset, k)?;
                    }
                    Ok((false, ok))
                }
                IntervalCase::Base => Ok((false, false)),
            }
        })
        .collect::<Result<_>>()?;
    let mut check = SmallestKCheck {
        good_checked: 0,
        bad_checked: 0,
        failures: Vec::new(),
    };
    for (iv, (is_good, ok)) in d.intervals[1..].iter().zip(outcomes) {
        if is_good {
            check.good_checked += 1;
        } else {
            check.bad_checked += 1;
        }
        if !ok {
            check.failures.push(iv.index);
        }
    }
    Ok(check)
}

/// `sum_G |I_l| / n`.
pub fn good_coverage_fraction(d: &SteeleDecomposition) -> f64 {
    d.good_total() as f64 / d.n as f64
}

/// Largest excess of `f_{n+sigma_n+m} - f_n - rho_n - f_m o T^{n+sigma_n}`
/// along the orbit starting at `offset`, over `n + sigma_n + m <= len`.
/// Pairs with `lhs = -inf` are skipped.
pub fn oracle_inequality_excess(ctx: &ProofContext, offset: usize, len: usize) -> Result<f64> {
    let whole = ctx.oracle.prefix_values(offset, len)?;
    let per_n: Vec<f64> = (1..len)
        .into_par_iter()
        .map(|n| -> Result<f64> {
            let shift = n + ctx.gap.value(n as u64)? as usize;
            if shift >= len {
                return Ok(f64::NEG_INFINITY);
            }
            let head = whole[n - 1] + ctx.oracle.rho(offset, n as u64)?;
            let tail = ctx.oracle.prefix_values(offset + shift, len - shift)?;
            let mut worst = f64::NEG_INFINITY;
            for (mi, fm) in tail.iter().enumerate() {
                let lhs = whole[shift + mi];
                if lhs == f64::NEG_INFINITY {
                    continue;
                }
                let rhs = head + fm;
                worst = worst.max(if rhs == f64::NEG_INFINITY { f64::INFINITY } else { lhs - rhs });
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    Ok(per_n.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::IidMeasure;
    use crate::sampling::sample_trajectory;

    fn uniform_ctx(len: usize, r: u64, k: u64, gap: GapSchedule) -> ProofContext {
        let q: Arc<dyn ShiftMeasure> = Arc::new(IidMeasure::uniform(2).unwrap());
        let x = sample_trajectory(q.as_ref(), len, 5);
        let oracle = TrajectoryOracle::new(x.symbols, q, ErrorSchedule::zero(), -(2f64.ln())).unwrap();
        ProofContext::new(Arc::new(oracle), gap, r, k, 0.1).unwrap()
    }

    fn all_bad_ctx(len: usize) -> ProofContext {
        let oracle = SyntheticOracle::new(len, |_, _| 0.0, |_, _| 0.0, |_| -1.0);
        // threshold max(-1, -10) + 0.1 = -0.9 < 0 = every block ratio
        ProofContext::new(Arc::new(oracle), GapSchedule::constant(2), 10, 3, 0.1)
            .unwrap()
            .assuming_f_shift_monotone()
    }

    #[test]
    fn uniform_offsets_are_never_bad() {
        let ctx = uniform_ctx(2000, 10, 5, GapSchedule::zero());
        assert!(bad_indicators(&ctx, 1000).unwrap().iter().all(|&b| !b));
        assert_eq!(birkhoff_bad_average(&ctx, 1000).unwrap(), 0.0);
    }

    #[test]
    fn minus_infinity_limit_uses_cutoff() {
        let oracle = SyntheticOracle::new(100, |_, n| -5.0 * n as f64, |_, _| 0.0, |_| f64::NEG_INFINITY);
        let ctx = ProofContext::new(Arc::new(oracle), GapSchedule::zero(), 2, 3, 0.1).unwrap();
        assert_eq!(ctx.threshold(0), -10.0 + 0.1);
        assert!(bad_set_member(&ctx, 0).unwrap());
    }

    #[test]
    fn single_block_membership() {
        let oracle = SyntheticOracle::new(100, |_, n| if n <= 3 { 0.0 } else { -(n as f64) }, |_, _| 0.0, |_| -0.5);
        let k1 = ProofContext::new(Arc::new(oracle), GapSchedule::zero(), 3, 1, 0.1).unwrap();
        assert!(bad_set_member(&k1, 0).unwrap());
        let k2 = ProofContext { k_max: 2, ..k1 };
        assert!(!bad_set_member(&k2, 0).unwrap());
        assert_eq!(k2.smallest_good_k(0).unwrap(), Some(2));
        assert!(ProofContext::new(k2.oracle.clone(), GapSchedule::zero(), 3, 0, 0.1).is_err());
    }

    #[test]
    fn all_bad_average_is_one() {
        let ctx = all_bad_ctx(200);
        assert_eq!(birkhoff_bad_average(&ctx, 50).unwrap(), 1.0);
        let s = birkhoff_bad_series(&ctx, 50, &Grid::Stride { step: 10 }).unwrap();
        assert!(s.values().all(|v| v == 1.0));
    }

    #[test]
    fn uniform_decomposition() {
        let ctx = uniform_ctx(1100, 10, 5, GapSchedule::zero());
        let d = steele_decompose(&ctx, 1000).unwrap();
        assert_eq!(d.intervals.len(), 100);
        assert_eq!(d.good.len(), 99);
        assert!(d.bad.is_empty());
        assert!(d.intervals[1..].iter().all(|i| i.case == IntervalCase::Good { k: 1 } && i.len() == 10));
        assert_eq!(d.tail_start, 990);
        let cover = verify_cover_bounds(&d, &ctx).unwrap();
        assert!(cover.passed, "{:?}", cover.problems);
        assert_eq!(cover.upper_slack, 9);
        assert_eq!(cover.tail, 10);
        assert_eq!(cover.bad_count, 0);
        let ub = verify_ub_rep(&d, &ctx, 1000).unwrap();
        assert!(ub.passed);
        // additive f: the block sums reproduce f_990 and the tail term is 0
        let f990 = ctx.oracle.value(0, 990).unwrap();
        assert!((ub.good_terms - f990).abs() < 1e-9);
        assert_eq!(ub.tail_term, 0.0);
        assert!(verify_smallest_k(&d, &ctx).unwrap().passed());
        assert_eq!(good_coverage_fraction(&d), 0.99);
    }

    #[test]
    fn all_bad_decomposition() {
        let ctx = all_bad_ctx(200);
        let d = steele_decompose(&ctx, 100).unwrap();
        assert!(d.good.is_empty());
        assert_eq!(d.bad.len(), 8);
        assert!(d.intervals[1..].iter().all(|i| i.case == IntervalCase::Bad && i.len() == 12));
        let cover = verify_cover_bounds(&d, &ctx).unwrap();
        assert!(cover.passed, "{:?}", cover.problems);
        assert_eq!(cover.bad_count, 101);
        assert!(verify_smallest_k(&d, &ctx).unwrap().passed());
    }

    #[test]
    fn degenerate_horizon() {
        let ctx = uniform_ctx(100, 10, 5, GapSchedule::zero());
        let d = steele_decompose(&ctx, 5).unwrap();
        assert_eq!(d.intervals.len(), 1);
        assert!(d.good.is_empty() && d.bad.is_empty());
        assert_eq!(d.tail_start, 0);
        assert!(verify_cover_bounds(&d, &ctx).unwrap().passed);
        assert!(verify_ub_rep(&d, &ctx, 5).unwrap().passed);
    }

    #[test]
    fn gapped_lengths() {
        let gap = GapSchedule::ceil_log2();
        let ctx = uniform_ctx(3000, 10, 5, gap.clone()).assuming_f_shift_monotone();
        let d = steele_decompose(&ctx, 2000).unwrap();
        for iv in &d.intervals[1..] {
            let IntervalCase::Good { k } = iv.case else { panic!("bad interval") };
            assert_eq!(iv.len(), k * 10 + gap.value(k * 10).unwrap());
        }
        assert!(verify_cover_bounds(&d, &ctx).unwrap().passed);
    }

    #[test]
    fn refuses_unsupported_contexts() {
        let ctx = uniform_ctx(300, 10, 5, GapSchedule::ceil_log2());
        assert!(steele_decompose(&ctx, 100).is_err());
        let swapped = ctx.assuming_f_shift_monotone().with_variant(ConditionVariant::SwappedGap);
        assert!(matches!(steele_decompose(&swapped, 100), Err(Error::Decomposition(_))));
        let short = uniform_ctx(120, 10, 5, GapSchedule::zero());
        assert!(steele_decompose(&short, 100).is_err());
    }

    #[test]
    fn nan_oracle_is_inconsistent() {
        let oracle = SyntheticOracle::new(100, |_, _| 0.0, |_, _| 0.0, |_| f64::NAN);
        let ctx = ProofContext::new(Arc::new(oracle), GapSchedule::zero(), 2, 2, 0.1).unwrap();
        let err = steele_decompose(&ctx, 20).unwrap_err();
        assert!(err.to_string().contains("offset 0"), "{err}");
    }

    #[test]
    fn decomposition_is_deterministic() {
        let ctx = uniform_ctx(1000, 7, 4, GapSchedule::zero());
        assert_eq!(steele_decompose(&ctx, 800).unwrap(), steele_decompose(&ctx, 800).unwrap());
    }
}
