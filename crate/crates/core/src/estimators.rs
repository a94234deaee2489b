//! Cross entropy, specific relative entropy and their Monte-Carlo means.
//!
//! Series are stored in the raw signed convention of the underlying
//! subadditive sequence: `v_n = (1/n) log Q_n(x_1^n)` for cross entropy and
//! `(1/n) [log Q_n - log P_n](x_1^n)` for relative entropy, both in
//! `[-inf, inf)`. Point estimates are the negated limits, so they are
//! nonnegative in typical cases and may be `+inf`.

use rayon::prelude::*;
use serde::Serialize;

use crate::decoupling::DecouplingReport;
use crate::error::{Error, Result};
use crate::ext;
use crate::measures::{stationary_distribution, MarkovMeasure, ShiftMeasure, Symbol};
use crate::sampling::{kingman_series, sample_trajectory_stream, shifted_kingman_series, Grid, Trajectory};
use crate::schedules::ConvergenceSeries;

pub const SINGLE_TRAJECTORY_LABEL: &str = "a.s. limit along this seed";
pub const MONTE_CARLO_LABEL: &str = "Monte-Carlo mean over independent trials";

/// What the caller offers as upper-decoupling evidence for `Q`.
#[derive(Debug, Clone)]
pub enum DecouplingEvidence {
    Audited(DecouplingReport),
    /// Closed-form constant, e.g. from the Markov kernel bound.
    Bound { c: f64, tau: u64 },
    /// The caller vouches for the hypothesis without evidence.
    Asserted,
}

impl DecouplingEvidence {
    pub fn check(&self) -> Result<()> {
        match self {
            Self::Audited(report) => report.ensure_decoupled(),
            Self::Bound { c, .. } if !c.is_finite() => Err(Error::InvalidArgument(format!(
                "decoupling bound {c} is not finite"
            ))),
            _ => Ok(()),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Self::Audited(_) => "audited",
            Self::Bound { .. } => "bound",
            Self::Asserted => "asserted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    CrossEntropy,
    RelativeEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    SingleTrajectory,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyEstimate {
    pub quantity: Quantity,
    pub mode: EstimateMode,
    pub label: &'static str,
    /// Terminal value of the raw series.
    #[serde(with = "crate::ext::extended")]
    pub raw_limit: f64,
    /// `-raw_limit`; `+inf` when the raw series reached `-inf`.
    #[serde(with = "crate::ext::extended")]
    pub estimate: f64,
    pub infinite: bool,
    pub series: ConvergenceSeries,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub offset: usize,
    pub p: String,
    pub q: String,
    pub evidence: &'static str,
}

impl EntropyEstimate {
    fn from_series(
        quantity: Quantity,
        series: ConvergenceSeries,
        seed: u64,
        offset: usize,
        p: &dyn ShiftMeasure,
        q: &dyn ShiftMeasure,
        evidence: &DecouplingEvidence,
    ) -> Result<Self> {
        let (_, raw) = series
            .last()
            .ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
        Ok(Self {
            quantity,
            mode: EstimateMode::SingleTrajectory,
            label: SINGLE_TRAJECTORY_LABEL,
            raw_limit: raw,
            estimate: -raw,
            infinite: raw == f64::NEG_INFINITY,
            series,
            trials: 1,
            seeds: vec![seed],
            offset,
            p: p.id(),
            q: q.id(),
            evidence: evidence.label(),
        })
    }
}

fn check_pair(p: &dyn ShiftMeasure, q: &dyn ShiftMeasure) -> Result<()> {
    if p.alphabet() != q.alphabet() {
        return Err(Error::InvalidArgument(format!(
            "alphabet mismatch: P has {} symbols, Q has {}",
            p.alphabet().size(),
            q.alphabet().size()
        )));
    }
    Ok(())
}

fn draw(p: &dyn ShiftMeasure, n: usize, offset: usize, seed: u64) -> Result<Trajectory> {
    let len = n
        .checked_add(offset)
        .ok_or_else(|| Error::InvalidArgument("horizon overflow".into()))?;
    if n == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    Ok(sample_trajectory_stream(p, len, seed, 0))
}

/// Cross entropy `-lim (1/n) log Q_n(x_1^n)` along `x ~ P`.
pub fn cross_entropy_estimate(
    p: &dyn ShiftMeasure,
    q: &dyn ShiftMeasure,
    n: usize,
    grid: &Grid,
    seed: u64,
    evidence: &DecouplingEvidence,
) -> Result<EntropyEstimate> {
    cross_entropy_estimate_shifted(p, q, n, grid, seed, 0, evidence)
}

/// [`cross_entropy_estimate`] along `T^offset x` (the path has `offset + n`
/// symbols).
pub fn cross_entropy_estimate_shifted(
    p: &dyn ShiftMeasure,
    q: &dyn ShiftMeasure,
    n: usize,
    grid: &Grid,
    seed: u64,
    offset: usize,
    evidence: &DecouplingEvidence,
) -> Result<EntropyEstimate> {
    evidence.check()?;
    check_pair(p, q)?;
    let x = draw(p, n, offset, seed)?;
    let series = shifted_kingman_series(&x, q, offset, grid)?;
    EntropyEstimate::from_series(Quantity::CrossEntropy, series, seed, offset, p, q, evidence)
}

/// Specific relative entropy of `P` with respect to `Q` along `x ~ P`.
pub fn relative_entropy_estimate(
    p: &dyn ShiftMeasure,
    q: &dyn ShiftMeasure,
    n: usize,
    grid: &Grid,
    seed: u64,
    evidence: &DecouplingEvidence,
) -> Result<EntropyEstimate> {
    relative_entropy_estimate_shifted(p, q, n, grid, seed, 0, evidence)
}

pub fn relative_entropy_estimate_shifted(
    p: &dyn ShiftMeasure,
    q: &dyn ShiftMeasure,
    n: usize,
    grid: &Grid,
    seed: u64,
    offset: usize,
    evidence: &DecouplingEvidence,
) -> Result<EntropyEstimate> {
    evidence.check()?;
    check_pair(p, q)?;
    let x = draw(p, n, offset, seed)?;
    let series = relative_entropy_series(&x, p, q, offset, grid)?;
    EntropyEstimate::from_series(Quantity::RelativeEntropy, series, seed, offset, p, q, evidence)
}

/// `(1/n) [log Q_n - log P_n](T^offset x)` on the grid. `-inf` is sticky;
/// a path with `P_n = 0` is rejected since it cannot have been drawn from `P`.
pub fn relative_entropy_series(
    x: &Trajectory,
    p: &dyn ShiftMeasure,
    q: &dyn ShiftMeasure,
    offset: usize,
    grid: &Grid,
) -> Result<ConvergenceSeries> {
    check_pair(p, q)?;
    if offset > x.len() {
        return Err(Error::InvalidArgument(format!("offset {offset} exceeds trajectory length {}", x.len())));
    }
    let window: &[Symbol] = x.shifted(offset);
    p.alphabet().validate(window)?;
    let points = grid.points(window.len() as u64)?;
    let mut series = ConvergenceSeries::new(format!("(1/n) [log Q_n - log P_n](x_{{{offset}+1..}})"))
        .with_seed(x.seed)
        .with_measures([p.id(), q.id()]);
    let mut ep = p.evaluator();
    let mut eq = q.evaluator();
    let mut consumed = 0usize;
    let mut dead = false;
    for &n in &points {
        while consumed < n as usize {
            ep.push(window[consumed]);
            eq.push(window[consumed]);
            consumed += 1;
        }
        let vp = ep.normalized();
        if vp == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!(
                "path has zero P-probability at n = {n}; it was not drawn from P"
            )));
        }
        let vq = if dead { f64::NEG_INFINITY } else { eq.normalized() };
        dead |= vq == f64::NEG_INFINITY;
        series.push(n, if dead { f64::NEG_INFINITY } else { vq - vp })?;
    }
    Ok(series)
}

fn stationary_of(q: &MarkovMeasure) -> Result<Vec<f64>> {
    if q.is_stationary() {
        Ok(q.initial().to_vec())
    } else {
        stationary_distribution(&q.rows())
    }
}

/// `sum_i pi_i sum_j P_ij (-log P_ij)` with `0 log 0 = 0`.
pub fn closed_form_entropy_rate(q: &MarkovMeasure) -> Result<f64> {
    let pi = stationary_of(q)?;
    let k = q.states();
    Ok((0..k)
        .map(|i| {
            let row: f64 = (0..k).map(|j| -ext::xlogxy(q.transition(i, j), 1.0)).sum();
            pi[i] * row
        })
        .sum())
}

/// `sum_i pi_P(i) sum_j P_ij log(P_ij / Q_ij)`; `+inf` when `P_ij > 0 = Q_ij`
/// on a state charged by `pi_P`.
pub fn closed_form_kl_rate(p: &MarkovMeasure, q: &MarkovMeasure) -> Result<f64> {
    if p.states() != q.states() {
        return Err(Error::InvalidArgument("chains have different state counts".into()));
    }
    let pi = stationary_of(p)?;
    let k = p.states();
    let mut total = 0.0;
    for i in 0..k {
        if pi[i] == 0.0 {
            continue;
        }
        let row: f64 = (0..k).map(|j| ext::xlogxy(p.transition(i, j), q.transition(i, j))).sum();
        total += pi[i] * row;
    }
    Ok(total)
}

/// `-sum_i pi_P(i) sum_j P_ij log Q_ij`, the a.s. cross entropy of a
/// stationary chain `P` against a Markov `Q`.
pub fn closed_form_cross_entropy_rate(p: &MarkovMeasure, q: &MarkovMeasure) -> Result<f64> {
    if p.states() != q.states() {
        return Err(Error::InvalidArgument("chains have different state counts".into()));
    }
    let pi = stationary_of(p)?;
    let k = p.states();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = pi[i] * p.transition(i, j);
            if w > 0.0 {
                total -= w * q.log_transition(i, j);
            }
        }
    }
    Ok(total)
}

/// `(1/n) D(P_n || Q_n)` by enumerating `A^n`.
pub fn brute_force_kl_level(p: &dyn ShiftMeasure, q: &dyn ShiftMeasure, n: usize, cap: u64) -> Result<f64> {
    check_pair(p, q)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let alphabet = p.alphabet();
    let count = alphabet.require_within_cap(n, cap)?;
    let terms: Vec<f64> = (0..count)
        .into_par_iter()
        .map_init(
            || vec![0 as Symbol; n],
            |buf, idx| -> Result<f64> {
                alphabet.word_at(idx, buf);
                let lp = p.log_marginal(buf)?;
                if lp == f64::NEG_INFINITY {
                    return Ok(0.0);
                }
                let lq = q.log_marginal(buf)?;
                Ok(if lq == f64::NEG_INFINITY {
                    f64::INFINITY
                } else {
                    lp.exp() * (lp - lq)
                })
            },
        )
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / n as f64)
}

/// Brute-force levels against a rate, with `level_n - rate ~ C / n` fitted by
/// least squares through the origin in `1/n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelFit {
    pub rate: f64,
    pub levels: Vec<(usize, f64)>,
    /// `n (level_n - rate)`.
    pub scaled_gaps: Vec<(usize, f64)>,
    pub constant: f64,
    pub max_abs_scaled_gap: f64,
}

pub fn kl_level_fit(
    p: &dyn ShiftMeasure,
    q: &dyn ShiftMeasure,
    ns: impl IntoIterator<Item = usize>,
    rate: f64,
    cap: u64,
) -> Result<LevelFit> {
    let levels: Vec<(usize, f64)> = ns
        .into_iter()
        .map(|n| brute_force_kl_level(p, q, n, cap).map(|v| (n, v)))
        .collect::<Result<_>>()?;
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no levels requested".into()));
    }
    let scaled_gaps: Vec<(usize, f64)> = levels.iter().map(|&(n, v)| (n, n as f64 * (v - rate))).collect();
    let (num, den) = levels.iter().fold((0.0, 0.0), |(a, b), &(n, v)| {
        let x = 1.0 / n as f64;
        (a + x * (v - rate), b + x * x)
    });
    let max_abs_scaled_gap = scaled_gaps.iter().map(|g| g.1.abs()).fold(0.0, f64::max);
    Ok(LevelFit {
        rate,
        levels,
        scaled_gaps,
        constant: num / den,
        max_abs_scaled_gap,
    })
}

/// Monte-Carlo means of `(1/n) log Q_n(x^(t)_1^n)` over trials `x^(t) ~ P`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanConvergence {
    pub label: &'static str,
    pub seed: u64,
    pub trials: usize,
    /// Trial means on the grid.
    pub series: ConvergenceSeries,
    /// Naive standard error of each mean; `nan` when a trial is `-inf`.
    pub standard_errors: Vec<(u64, f64)>,
    /// Each trial's terminal value, in stream order.
    #[serde(with = "crate::ext::extended_vec")]
    pub terminals: Vec<f64>,
}

/// Trial `t` uses stream `t` of `seed`.
pub fn mean_convergence_series(
    q: &dyn ShiftMeasure,
    p: &dyn ShiftMeasure,
    grid: &Grid,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<MeanConvergence> {
    check_pair(p, q)?;
    if trials < 2 {
        return Err(Error::InvalidArgument("trials must be >= 2".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let runs: Vec<ConvergenceSeries> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let x = sample_trajectory_stream(p, n, seed, t);
            kingman_series(&x, q, grid)
        })
        .collect::<Result<_>>()?;

    let points: Vec<u64> = runs[0].entries().iter().map(|e| e.0).collect();
    let mut series = ConvergenceSeries::new("mean (1/n) log Q_n")
        .with_seed(seed)
        .with_measures([p.id(), q.id()]);
    let mut standard_errors = Vec::with_capacity(points.len());
    let t = trials as f64;
    for (i, &pt) in points.iter().enumerate() {
        let vals: Vec<f64> = runs.iter().map(|r| r.entries()[i].1).collect();
        if vals.iter().any(|&v| v == f64::NEG_INFINITY) {
            series.push(pt, f64::NEG_INFINITY)?;
            standard_errors.push((pt, f64::NAN));
            continue;
        }
        let mean = vals.iter().sum::<f64>() / t;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (t - 1.0);
        series.push(pt, mean)?;
        standard_errors.push((pt, (var / t).sqrt()));
    }
    let terminals = runs.iter().map(|r| r.last().map_or(f64::NAN, |e| e.1)).collect();
    Ok(MeanConvergence {
        label: MONTE_CARLO_LABEL,
        seed,
        trials,
        series,
        standard_errors,
        terminals,
    })
}

impl MeanConvergence {
    pub fn terminal_mean(&self) -> Option<f64> {
        self.series.last().map(|e| e.1)
    }

    pub fn terminal_standard_error(&self) -> Option<f64> {
        self.standard_errors.last().map(|e| e.1)
    }
}

/// Equal-width histogram of the finite values over `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    /// Values equal to `-inf`.
    pub neg_infinite: usize,
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be >= 1".into()));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let neg_infinite = values.iter().filter(|&&v| v == f64::NEG_INFINITY).count();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    if !finite.is_empty() {
        let width = hi - lo;
        for v in finite {
            let b = if width == 0.0 {
                0
            } else {
                (((v - lo) / width) * bins as f64).floor() as usize
            };
            counts[b.min(bins - 1)] += 1;
        }
    }
    Ok(Histogram {
        lo,
        hi,
        counts,
        neg_infinite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoupling::minimal_decoupling_constants;
    use crate::measures::{IidMeasure, DEFAULT_ENUMERATION_CAP};
    use crate::schedules::GapSchedule;

    fn worked() -> MarkovMeasure {
        MarkovMeasure::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    fn h2(p: f64) -> f64 {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }

    #[test]
    fn entropy_rate_oracles() {
        let u = IidMeasure::uniform(2).unwrap().as_markov().unwrap();
        assert!((closed_form_entropy_rate(&u).unwrap() - 2f64.ln()).abs() < 1e-15);
        let expected = 2.0 / 3.0 * h2(0.9) + 1.0 / 3.0 * h2(0.2);
        assert!((closed_form_entropy_rate(&worked()).unwrap() - expected).abs() < 1e-14);
        let perm = MarkovMeasure::new(vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(closed_form_entropy_rate(&perm).unwrap(), 0.0);
    }

    #[test]
    fn kl_rate_oracles() {
        let w = worked();
        assert_eq!(closed_form_kl_rate(&w, &w).unwrap(), 0.0);
        let u = IidMeasure::uniform(2).unwrap().as_markov().unwrap();
        let d = closed_form_kl_rate(&w, &u).unwrap();
        assert!((d - (2f64.ln() - closed_form_entropy_rate(&w).unwrap())).abs() < 1e-14);
        let z = MarkovMeasure::new(vec![vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert_eq!(closed_form_kl_rate(&w, &z).unwrap(), f64::INFINITY);
    }

    #[test]
    fn iid_kl_level_is_single_letter() {
        let p = IidMeasure::new(vec![0.5, 0.5]).unwrap();
        let q = IidMeasure::new(vec![0.25, 0.75]).unwrap();
        let single = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        for n in [1, 5, 12] {
            let v = brute_force_kl_level(&p, &q, n, DEFAULT_ENUMERATION_CAP).unwrap();
            assert!((v - single).abs() < 1e-12, "n = {n}: {v}");
        }
        assert_eq!(brute_force_kl_level(&p, &p, 4, DEFAULT_ENUMERATION_CAP).unwrap(), 0.0);
    }

    #[test]
    fn uniform_cross_entropy_is_exact() {
        let p = worked();
        let q = IidMeasure::uniform(2).unwrap();
        let est = cross_entropy_estimate(&p, &q, 5000, &Grid::default(), 7, &DecouplingEvidence::Asserted).unwrap();
        assert!(est.series.values().all(|v| v == -(2f64.ln())));
        assert_eq!(est.estimate, 2f64.ln());
        assert_eq!(est.label, SINGLE_TRAJECTORY_LABEL);
    }

    #[test]
    fn forbidden_bigram_gives_infinite_estimate() {
        let p = IidMeasure::uniform(3).unwrap();
        let q = MarkovMeasure::new(vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.5, 0.5], vec![0.5, 0.0, 0.5]]).unwrap();
        let est = cross_entropy_estimate(&p, &q, 1000, &Grid::default(), 1, &DecouplingEvidence::Asserted).unwrap();
        assert!(est.infinite);
        assert_eq!(est.estimate, f64::INFINITY);
        let rel = relative_entropy_estimate(&p, &q, 1000, &Grid::default(), 1, &DecouplingEvidence::Asserted).unwrap();
        assert!(rel.infinite);
    }

    #[test]
    fn relative_entropy_of_identical_measures_is_zero() {
        let w = worked();
        let est = relative_entropy_estimate(&w, &w, 2000, &Grid::Stride { step: 100 }, 3, &DecouplingEvidence::Asserted).unwrap();
        assert!(est.series.values().all(|v| v == 0.0));
    }

    #[test]
    fn relative_entropy_is_cross_minus_entropy() {
        let p = worked();
        let q = MarkovMeasure::new(vec![vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let grid = Grid::Stride { step: 250 };
        let rel = relative_entropy_estimate(&p, &q, 5000, &grid, 9, &DecouplingEvidence::Asserted).unwrap();
        let cross = cross_entropy_estimate(&p, &q, 5000, &grid, 9, &DecouplingEvidence::Asserted).unwrap();
        let own = cross_entropy_estimate(&p, &p, 5000, &grid, 9, &DecouplingEvidence::Asserted).unwrap();
        for ((r, c), o) in rel.series.values().zip(cross.series.values()).zip(own.series.values()) {
            assert!((r - (c - o)).abs() < 1e-12);
        }
    }

    #[test]
    fn failed_audit_is_refused() {
        let q = MarkovMeasure::non_invariant(vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![1.0, 0.0]).unwrap();
        let rep = minimal_decoupling_constants(&q, 2, 2, &GapSchedule::zero(), DEFAULT_ENUMERATION_CAP).unwrap();
        let p = IidMeasure::uniform(2).unwrap();
        let err = cross_entropy_estimate(&p, &q, 100, &Grid::default(), 0, &DecouplingEvidence::Audited(rep)).unwrap_err();
        assert!(matches!(err, Error::NotDecoupled { .. }));
    }

    #[test]
    fn uniform_mean_has_zero_error() {
        let q = IidMeasure::uniform(2).unwrap();
        let p = worked();
        let mc = mean_convergence_series(&q, &p, &Grid::Stride { step: 100 }, 500, 8, 4).unwrap();
        assert!(mc.series.values().all(|v| v == -(2f64.ln())));
        assert!(mc.standard_errors.iter().all(|e| e.1 == 0.0));
        assert_eq!(mc.terminals.len(), 8);
        assert!(mean_convergence_series(&q, &p, &Grid::default(), 10, 1, 4).is_err());
    }

    #[test]
    fn mean_series_is_deterministic() {
        let w = worked();
        let a = mean_convergence_series(&w, &w, &Grid::default(), 1000, 6, 11).unwrap();
        let b = mean_convergence_series(&w, &w, &Grid::default(), 1000, 6, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 0.1, 0.9, 1.0, f64::NEG_INFINITY], 2).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.neg_infinite, 1);
    }
}
