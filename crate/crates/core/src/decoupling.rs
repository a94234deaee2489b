//! Upper-decoupling audits.
//!
//! A measure `Q` is upper-decoupled when
//! `Q(a ⋆ b) <= exp(c_n) Q(a) Q(b)` for the gapped cylinder
//! `a ⋆ b = {x : x_1^n = a, x_{n+tau_n+1}^{n+tau_n+m} = b}`. Taking logs turns
//! this into gapped almost-subadditivity of `f_n = log Q_n(x_1^n)` with
//! `rho_n = max(c_n, 0)` and `sigma_n = tau_n`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ext;
use crate::measures::{MarkovMeasure, ShiftMeasure, StreamingEvaluator, Symbol};
use crate::sampling::prefix_log_marginals;
use crate::schedules::{ErrorSchedule, GapSchedule};

/// Largest gap for which the gap-sum enumeration is attempted.
pub const MAX_ENUMERATED_GAP: u64 = 6;

/// Word pair attaining `c_hat_n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstPair {
    pub m: usize,
    pub a: Vec<Symbol>,
    pub b: Vec<Symbol>,
    #[serde(with = "crate::ext::extended")]
    pub log_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecouplingLevel {
    pub n: usize,
    pub gap: u64,
    /// `max_{m, a, b} [log Q(a ⋆ b) - log Q(a) - log Q(b)]`; may be negative
    /// or `-inf`.
    #[serde(with = "crate::ext::extended")]
    pub c_hat: f64,
    /// `max(c_hat, 0)`, the constant handed to the ergodic theorem.
    pub rho: f64,
    pub worst: Option<WorstPair>,
}

/// A pair with positive joint mass but `Q(a) Q(b) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecouplingFailure {
    pub n: usize,
    pub m: usize,
    pub a: Vec<Symbol>,
    pub b: Vec<Symbol>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecouplingReport {
    pub measure: String,
    pub gap: GapSchedule,
    pub n_max: usize,
    pub m_max: usize,
    pub levels: Vec<DecouplingLevel>,
    /// First failure found, in `(n, m, a, b)` order.
    pub failure: Option<DecouplingFailure>,
}

impl DecouplingReport {
    pub fn is_decoupled(&self) -> bool {
        self.failure.is_none()
    }

    pub fn ensure_decoupled(&self) -> Result<()> {
        match &self.failure {
            None => Ok(()),
            Some(f) => Err(Error::NotDecoupled {
                n: f.n,
                m: f.m,
                a: f.a.clone(),
                b: f.b.clone(),
            }),
        }
    }

    pub fn c_hat(&self, n: usize) -> Option<f64> {
        self.levels.get(n.checked_sub(1)?).map(|l| l.c_hat)
    }
}

/// `log Q(a ⋆ b)` with gap `gap`, summing `Q(a g b)` over all fillings `g`.
pub fn gapped_joint_log(q: &dyn ShiftMeasure, a: &[Symbol], b: &[Symbol], gap: usize) -> Result<f64> {
    let alphabet = q.alphabet();
    alphabet.validate(a)?;
    alphabet.validate(b)?;
    let mut terms = Vec::with_capacity(alphabet.word_count(gap) as usize);
    let mut word = Vec::with_capacity(a.len() + gap + b.len());
    let mut g = vec![0 as Symbol; gap];
    for idx in 0..alphabet.word_count(gap) as u64 {
        alphabet.word_at(idx, &mut g);
        word.clear();
        word.extend_from_slice(a);
        word.extend_from_slice(&g);
        word.extend_from_slice(b);
        terms.push(q.log_marginal(&word)?);
    }
    Ok(ext::log_sum_exp(&terms))
}

/// `log Q(a ⋆ b) - log Q(a) - log Q(b)`: `-inf` when the joint mass is zero
/// and the product is not, `+inf` when the product is zero and the joint mass
/// is not, `None` when both vanish.
pub fn gapped_log_ratio(q: &dyn ShiftMeasure, a: &[Symbol], b: &[Symbol], gap: usize) -> Result<Option<f64>> {
    let joint = gapped_joint_log(q, a, b, gap)?;
    let la = q.log_marginal(a)?;
    let lb = q.log_marginal(b)?;
    Ok(log_ratio(joint, la, lb))
}

fn log_ratio(joint: f64, la: f64, lb: f64) -> Option<f64> {
    let product_zero = la == f64::NEG_INFINITY || lb == f64::NEG_INFINITY;
    match (joint == f64::NEG_INFINITY, product_zero) {
        (true, true) => None,
        (false, true) => Some(f64::INFINITY),
        (true, false) => Some(f64::NEG_INFINITY),
        (false, false) => Some(joint - la - lb),
    }
}

/// Per-`a` best pair and first failure.
#[derive(Default)]
struct PrefixOutcome {
    best: Option<(f64, usize, u64)>, // (ratio, m, b index)
    failure: Option<(usize, u64)>,   // (m, b index)
}

/// Exhaustive `c_hat_n` for `n <= n_max`, `m <= m_max`.
///
/// The joint mass is obtained by summing over every gap filling, so the cost
/// is about `k^(n + tau_n + m_max)` evaluator steps per `n`; each level must
/// stay within `cap` words.
pub fn minimal_decoupling_constants(
    q: &dyn ShiftMeasure,
    n_max: usize,
    m_max: usize,
    gap: &GapSchedule,
    cap: u64,
) -> Result<DecouplingReport> {
    if n_max == 0 || m_max == 0 {
        return Err(Error::InvalidArgument("n_max and m_max must be >= 1".into()));
    }
    let alphabet = q.alphabet();
    let k = alphabet.size();
    for n in 1..=n_max {
        let tau = gap.value(n as u64)?;
        if tau > MAX_ENUMERATED_GAP {
            return Err(Error::InvalidArgument(format!(
                "gap {tau} at n = {n} exceeds the enumeration limit {MAX_ENUMERATED_GAP}"
            )));
        }
        alphabet.require_within_cap(n + tau as usize + m_max, cap)?;
    }

    // log Q(b) for every b of length 1..=m_max
    let b_tables: Vec<Vec<f64>> = (1..=m_max)
        .map(|m| {
            let count = alphabet.word_count(m) as u64;
            (0..count)
                .into_par_iter()
                .map_init(
                    || vec![0 as Symbol; m],
                    |buf, idx| {
                        alphabet.word_at(idx, buf);
                        q.log_marginal(buf)
                    },
                )
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut levels = Vec::with_capacity(n_max);
    let mut failure = None;
    for n in 1..=n_max {
        let tau = gap.value(n as u64)? as usize;
        let a_count = alphabet.word_count(n) as u64;
        let outcomes: Vec<PrefixOutcome> = (0..a_count)
            .into_par_iter()
            .map(|a_idx| {
                let mut a = vec![0 as Symbol; n];
                alphabet.word_at(a_idx, &mut a);
                audit_prefix(q, &a, tau, m_max, k, &b_tables)
            })
            .collect();

        let mut best: Option<(f64, usize, u64, u64)> = None;
        for (a_idx, out) in outcomes.iter().enumerate() {
            if let Some((r, m, b_idx)) = out.best {
                let cand = (r, m, a_idx as u64, b_idx);
                best = match best {
                    None => Some(cand),
                    Some(cur) if r > cur.0 || (r == cur.0 && (m, a_idx as u64, b_idx) < (cur.1, cur.2, cur.3)) => Some(cand),
                    keep => keep,
                };
            }
            if failure.is_none() {
                if let Some((m, b_idx)) = out.failure {
                    let mut a = vec![0; n];
                    let mut b = vec![0; m];
                    alphabet.word_at(a_idx as u64, &mut a);
                    alphabet.word_at(b_idx, &mut b);
                    failure = Some(DecouplingFailure { n, m, a, b });
                }
            }
        }
        let (c_hat, worst) = match best {
            None => (f64::NEG_INFINITY, None),
            Some((r, m, a_idx, b_idx)) => {
                let mut a = vec![0; n];
                let mut b = vec![0; m];
                alphabet.word_at(a_idx, &mut a);
                alphabet.word_at(b_idx, &mut b);
                (r, Some(WorstPair { m, a, b, log_ratio: r }))
            }
        };
        levels.push(DecouplingLevel {
            n,
            gap: tau as u64,
            c_hat,
            rho: c_hat.max(0.0),
            worst,
        });
    }

    Ok(DecouplingReport {
        measure: q.id(),
        gap: gap.clone(),
        n_max,
        m_max,
        levels,
        failure,
    })
}

fn audit_prefix(
    q: &dyn ShiftMeasure,
    a: &[Symbol],
    tau: usize,
    m_max: usize,
    k: usize,
    b_tables: &[Vec<f64>],
) -> PrefixOutcome {
    let mut ev = q.evaluator();
    for &s in a {
        ev.push(s);
    }
    let la = ev.value();
    // joint[m - 1][b] accumulates log Q(a ⋆ b) over the gap fillings
    let mut joint: Vec<Vec<f64>> = b_tables.iter().map(|t| vec![f64::NEG_INFINITY; t.len()]).collect();
    descend(ev.as_ref(), 0, 0, tau, m_max, k, &mut joint);

    let mut out = PrefixOutcome::default();
    for (mi, (row, lbs)) in joint.iter().zip(b_tables).enumerate() {
        for (b_idx, (&j, &lb)) in row.iter().zip(lbs).enumerate() {
            match log_ratio(j, la, lb) {
                Some(r) if r == f64::INFINITY => {
                    if out.failure.is_none() {
                        out.failure = Some((mi + 1, b_idx as u64));
                    }
                }
                Some(r) => {
                    if out.best.is_none_or(|(cur, _, _)| r > cur) {
                        out.best = Some((r, mi + 1, b_idx as u64));
                    }
                }
                None => {}
            }
        }
    }
    out
}

fn descend<'a>(
    ev: &(dyn StreamingEvaluator<'a> + 'a),
    depth: usize,
    b_idx: usize,
    tau: usize,
    m_max: usize,
    k: usize,
    joint: &mut [Vec<f64>],
) {
    if depth == tau + m_max {
        return;
    }
    for s in 0..k {
        let mut child = ev.fork();
        child.push(s as Symbol);
        let next_b = if depth < tau { 0 } else { b_idx * k + s };
        if depth >= tau {
            let m = depth + 1 - tau;
            let slot = &mut joint[m - 1][next_b];
            *slot = ext::log_add_exp(*slot, child.value());
        }
        descend(child.as_ref(), depth + 1, next_b, tau, m_max, k, joint);
    }
}

/// `c(tau) = log max_{i,j} P^{tau+1}(i, j) / pi(j)`; for a stationary chain
/// `Q(a ⋆ b) = Q(a) [P^{tau+1}(a_n, b_1) / pi(b_1)] Q(b)`, so `c_hat_n <= c(tau)`.
pub fn markov_decoupling_bound(q: &MarkovMeasure, tau: u64) -> Result<f64> {
    if !q.is_stationary() {
        return Err(Error::InvalidArgument(
            "the kernel bound needs a chain started from its stationary law".into(),
        ));
    }
    let pi = q.initial();
    if let Some(j) = pi.iter().position(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument(format!("stationary law vanishes at state {j}")));
    }
    let k = q.states();
    let power = q.matrix_power(tau as usize + 1);
    let best = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| power[i * k + j] / pi[j])
        .fold(0.0f64, f64::max);
    Ok(best.ln())
}

/// Gapped almost-subadditivity data `(rho, sigma)` for `f_n = log Q_n`.
#[derive(Debug, Clone)]
pub struct TheoremData {
    pub rho: ErrorSchedule,
    pub sigma: GapSchedule,
}

/// `rho_n = max(c_hat_n, 0)` for `n <= n_max` (table-backed), `sigma = tau`.
pub fn theorem_data_from_report(report: &DecouplingReport) -> Result<TheoremData> {
    report.ensure_decoupled()?;
    if report.levels.iter().any(|l| !ext::is_extended_real(l.c_hat)) {
        return Err(Error::InvalidArgument("report contains a non-finite upper constant".into()));
    }
    Ok(TheoremData {
        rho: ErrorSchedule::table(report.levels.iter().map(|l| l.rho).collect())?,
        sigma: report.gap.clone(),
    })
}

/// `rho_n = max(c(tau_n), 0)` from the closed-form Markov bound, `sigma = tau`.
pub fn theorem_data_from_markov(q: &MarkovMeasure, tau: &GapSchedule) -> Result<TheoremData> {
    if let crate::schedules::GapRule::Constant(t) = tau.rule() {
        let c = markov_decoupling_bound(q, *t)?;
        return Ok(TheoremData {
            rho: ErrorSchedule::constant(c.max(0.0))?,
            sigma: tau.clone(),
        });
    }
    // Precompute c(t) for the gaps that occur at small n; larger gaps are
    // computed on demand.
    const CACHED: u64 = 64;
    let cache: BTreeMap<u64, f64> = (0..=CACHED)
        .map(|t| markov_decoupling_bound(q, t).map(|c| (t, c.max(0.0))))
        .collect::<Result<_>>()?;
    let chain = q.clone();
    let sigma = tau.clone();
    let rho = ErrorSchedule::derived("markov_decoupling_bound(tau_n)", move |n| {
        let t = match sigma.value(n) {
            Ok(t) => t,
            Err(_) => return f64::NAN,
        };
        match cache.get(&t) {
            Some(&c) => c,
            None => markov_decoupling_bound(&chain, t).map_or(f64::NAN, |c| c.max(0.0)),
        }
    });
    Ok(TheoremData {
        rho,
        sigma: tau.clone(),
    })
}

/// One failure of `f_{n + sigma_n + m}(x) <= f_n(x) + rho_n + f_m(T^{n + sigma_n} x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointwiseViolation {
    pub n: usize,
    pub m: usize,
    #[serde(with = "crate::ext::extended")]
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointwiseReport {
    pub horizon: usize,
    pub pairs_checked: u64,
    /// Largest `lhs - rhs` over all pairs where both sides are finite.
    pub max_excess: f64,
    pub violations: Vec<PointwiseViolation>,
}

/// Checks the gapped inequality along one trajectory for every `(n, m)` with
/// `n + sigma_n + m <= horizon`. A pair violates when `lhs - rhs > tol`
/// (`tol = 0` demands the inequality in floating point as computed).
pub fn check_pointwise_gapped_subadditivity(
    symbols: &[Symbol],
    q: &dyn ShiftMeasure,
    data: &TheoremData,
    horizon: usize,
    tol: f64,
) -> Result<PointwiseReport> {
    let whole = prefix_log_marginals(symbols, q, 0, horizon)?;
    let f = |len: usize| whole[len - 1];
    let per_n: Vec<(u64, f64, Vec<PointwiseViolation>)> = (1..horizon)
        .into_par_iter()
        .map(|n| -> Result<(u64, f64, Vec<PointwiseViolation>)> {
            let sigma = data.sigma.value(n as u64)? as usize;
            let shift = n + sigma;
            if shift + 1 > horizon {
                return Ok((0, f64::NEG_INFINITY, Vec::new()));
            }
            let rho = data.rho.value_at(symbols, 0, n as u64)?;
            let head = f(n) + rho;
            let tail = prefix_log_marginals(symbols, q, shift, horizon - shift)?;
            let mut max_excess = f64::NEG_INFINITY;
            let mut bad = Vec::new();
            for (mi, &fm) in tail.iter().enumerate() {
                let m = mi + 1;
                let lhs = f(shift + m);
                let rhs = head + fm;
                let e = if lhs == f64::NEG_INFINITY {
                    continue;
                } else if rhs == f64::NEG_INFINITY {
                    f64::INFINITY
                } else {
                    lhs - rhs
                };
                if e.is_finite() {
                    max_excess = max_excess.max(e);
                }
                if e > tol {
                    bad.push(PointwiseViolation { n, m, excess: e });
                }
            }
            Ok((tail.len() as u64, max_excess, bad))
        })
        .collect::<Result<_>>()?;
    let pairs_checked = per_n.iter().map(|p| p.0).sum();
    let max_excess = per_n.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let violations = per_n.into_iter().flat_map(|p| p.2).collect();
    Ok(PointwiseReport {
        horizon,
        pairs_checked,
        max_excess,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{IidMeasure, MixtureMeasure, DEFAULT_ENUMERATION_CAP};
    use crate::sampling::sample_trajectory;
    use std::sync::Arc;

    fn worked() -> MarkovMeasure {
        MarkovMeasure::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    #[test]
    fn iid_is_exactly_decoupled() {
        for p in [vec![0.5, 0.5], vec![0.2, 0.3, 0.5]] {
            let q = IidMeasure::new(p).unwrap();
            let rep = minimal_decoupling_constants(&q, 6, 6, &GapSchedule::zero(), DEFAULT_ENUMERATION_CAP).unwrap();
            assert!(rep.is_decoupled());
            for l in &rep.levels {
                assert!(l.c_hat.abs() < 1e-12, "n = {}: {}", l.n, l.c_hat);
            }
        }
    }

    #[test]
    fn worked_chain_bound() {
        let c0 = markov_decoupling_bound(&worked(), 0).unwrap();
        assert!((c0 - 2.4f64.ln()).abs() < 1e-12);
        let rep = minimal_decoupling_constants(&worked(), 8, 8, &GapSchedule::zero(), DEFAULT_ENUMERATION_CAP).unwrap();
        for l in &rep.levels {
            assert!(l.c_hat <= c0 + 1e-12);
        }
        // the 1 -> 1 bigram attains the bound
        assert!((rep.levels[0].c_hat - c0).abs() < 1e-12);
    }

    #[test]
    fn iid_as_markov_bound_is_zero() {
        let q = IidMeasure::new(vec![0.3, 0.7]).unwrap().as_markov().unwrap();
        assert!(markov_decoupling_bound(&q, 0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn bound_decreases_with_gap() {
        let q = worked();
        let cs: Vec<f64> = (0..=10).map(|t| markov_decoupling_bound(&q, t).unwrap()).collect();
        assert!(cs.windows(2).all(|w| w[1] <= w[0]));
        assert!(cs[10] < cs[0]);
        assert!(cs[10] < 0.05);
    }

    #[test]
    fn gap_sum_agrees_with_kernel_formula() {
        let q = worked();
        for tau in 0..4usize {
            let a = [0u8, 1, 1];
            let b = [1u8, 0];
            let joint = gapped_joint_log(&q, &a, &b, tau).unwrap();
            let p = q.matrix_power(tau + 1);
            let kernel = q.log_marginal(&a).unwrap() + (p[1 * 2 + 1] / q.initial()[1]).ln() + q.log_marginal(&b).unwrap();
            assert!((joint - kernel).abs() < 1e-12);
        }
    }

    #[test]
    fn gapped_audit_respects_bound() {
        let q = worked();
        let rep = minimal_decoupling_constants(&q, 5, 5, &GapSchedule::constant(2), DEFAULT_ENUMERATION_CAP).unwrap();
        let c2 = markov_decoupling_bound(&q, 2).unwrap();
        assert!(rep.levels.iter().all(|l| l.c_hat <= c2 + 1e-12));
        assert!(rep.levels.iter().all(|l| l.gap == 2));
    }

    #[test]
    fn mixture_of_iid_is_upper_decoupled_by_log_two() {
        let a: Arc<dyn ShiftMeasure> = Arc::new(IidMeasure::new(vec![0.9, 0.1]).unwrap());
        let b: Arc<dyn ShiftMeasure> = Arc::new(IidMeasure::new(vec![0.1, 0.9]).unwrap());
        let mix = MixtureMeasure::new(vec![a, b], vec![0.5, 0.5]).unwrap();
        let rep = minimal_decoupling_constants(&mix, 6, 6, &GapSchedule::zero(), DEFAULT_ENUMERATION_CAP).unwrap();
        assert!(rep.is_decoupled());
        for l in &rep.levels {
            assert!(l.c_hat <= 2f64.ln() + 1e-12);
        }
    }

    #[test]
    fn zero_product_with_positive_joint_is_a_failure() {
        // Q puts zero mass on b = [1] alone? impossible for a stationary
        // measure, so use a non-invariant chain where Q(b) underestimates the
        // shifted mass.
        let q = MarkovMeasure::non_invariant(vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![1.0, 0.0]).unwrap();
        let rep = minimal_decoupling_constants(&q, 2, 2, &GapSchedule::zero(), DEFAULT_ENUMERATION_CAP).unwrap();
        let f = rep.failure.clone().expect("failure");
        assert_eq!((f.n, f.m), (1, 1));
        assert_eq!(f.a, vec![0]);
        assert_eq!(f.b, vec![1]);
        assert!(matches!(theorem_data_from_report(&rep), Err(Error::NotDecoupled { .. })));
    }

    #[test]
    fn audit_refuses_beyond_cap() {
        let err = minimal_decoupling_constants(&worked(), 8, 8, &GapSchedule::zero(), 1000).unwrap_err();
        assert!(matches!(err, Error::EnumerationCap { .. }));
    }

    #[test]
    fn theorem_data_conversions() {
        let iid = IidMeasure::new(vec![0.4, 0.6]).unwrap();
        let rep = minimal_decoupling_constants(&iid, 4, 4, &GapSchedule::zero(), DEFAULT_ENUMERATION_CAP).unwrap();
        let data = theorem_data_from_report(&rep).unwrap();
        for n in 1..=4 {
            assert!(data.rho.value(n).unwrap() < 1e-12);
        }
        assert!(data.sigma.is_zero());

        let data = theorem_data_from_markov(&worked(), &GapSchedule::zero()).unwrap();
        assert!((data.rho.value(17).unwrap() - 2.4f64.ln()).abs() < 1e-12);

        let data = theorem_data_from_markov(&worked(), &GapSchedule::constant(2)).unwrap();
        let c2 = markov_decoupling_bound(&worked(), 2).unwrap();
        assert_eq!(data.rho.value(5).unwrap(), c2);
        assert_eq!(data.sigma.value(5).unwrap(), 2);

        let data = theorem_data_from_markov(&worked(), &GapSchedule::ceil_log2()).unwrap();
        let c4 = markov_decoupling_bound(&worked(), 4).unwrap();
        assert_eq!(data.rho.value(15).unwrap(), c4);
    }

    #[test]
    fn pointwise_inequality_on_gapped_markov_data() {
        let q = worked();
        let data = theorem_data_from_markov(&q, &GapSchedule::ceil_log2()).unwrap();
        let x = sample_trajectory(&q, 400, 3);
        let rep = check_pointwise_gapped_subadditivity(&x.symbols, &q, &data, 400, 1e-9).unwrap();
        assert!(rep.violations.is_empty(), "{:?}", &rep.violations[..rep.violations.len().min(3)]);
        assert!(rep.pairs_checked > 10_000);
    }

    #[test]
    fn pointwise_detects_missing_error_term() {
        let q = worked();
        let data = TheoremData {
            rho: ErrorSchedule::zero(),
            sigma: GapSchedule::zero(),
        };
        let x = sample_trajectory(&q, 300, 3);
        let rep = check_pointwise_gapped_subadditivity(&x.symbols, &q, &data, 300, 1e-9).unwrap();
        assert!(!rep.violations.is_empty());
    }
}
