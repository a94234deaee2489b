//! Finite-alphabet shift-invariant measures with exact log-marginals.
//!
//! Every family implements [`ShiftMeasure`]: it evaluates `log Q_n(w)` for a
//! word `w`, streams the same quantity symbol by symbol, and samples
//! trajectories. All probability products are accumulated in log space
//! (iid, Markov, mixtures) or with a per-step normalized forward vector (HMM),
//! so words of length `10^6` never underflow.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ext;

pub type Symbol = u8;

/// Default cap on the number of enumerated words.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Tolerance on probability vectors summing to one.
pub const ROW_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-10;

/// The symbols `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Alphabet {
    size: usize,
}

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size > Symbol::MAX as usize + 1 {
            return Err(Error::InvalidMeasure(format!(
                "alphabet size must be in 1..=256, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn validate(&self, word: &[Symbol]) -> Result<()> {
        match word.iter().position(|&s| s as usize >= self.size) {
            Some(i) => Err(Error::InvalidArgument(format!(
                "symbol {} at position {i} is outside an alphabet of size {}",
                word[i], self.size
            ))),
            None => Ok(()),
        }
    }

    /// `size^len`, saturating.
    pub fn word_count(&self, len: usize) -> u128 {
        (self.size as u128).checked_pow(len as u32).unwrap_or(u128::MAX)
    }

    /// Writes the word with index `idx` (base `size`, first symbol most
    /// significant) into `buf`.
    pub fn word_at(&self, mut idx: u64, buf: &mut [Symbol]) {
        let k = self.size as u64;
        for slot in buf.iter_mut().rev() {
            *slot = (idx % k) as Symbol;
            idx /= k;
        }
    }

    pub fn require_within_cap(&self, len: usize, cap: u64) -> Result<u64> {
        let required = self.word_count(len);
        if required > cap as u128 {
            Err(Error::EnumerationCap { required, cap })
        } else {
            Ok(required as u64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Iid,
    Markov,
    Hmm,
    Mixture,
}

/// Incremental evaluation of `f_n = log Q_n(w_1..w_n)`.
pub trait StreamingEvaluator<'a>: Send {
    fn push(&mut self, symbol: Symbol);
    /// Number of consumed symbols.
    fn len(&self) -> usize;
    /// `log Q_n` of the consumed word; `0` for the empty word.
    fn value(&self) -> f64;
    /// `(1/n) log Q_n`.
    fn normalized(&self) -> f64 {
        self.value() / self.len() as f64
    }
    fn fork(&self) -> Box<dyn StreamingEvaluator<'a> + 'a>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A shift-invariant probability measure on one-sided sequences over a
/// finite alphabet.
pub trait ShiftMeasure: Send + Sync + fmt::Debug {
    fn alphabet(&self) -> Alphabet;
    fn family(&self) -> Family;
    /// Short identifier used in series metadata.
    fn id(&self) -> String;
    fn evaluator(&self) -> Box<dyn StreamingEvaluator<'_> + '_>;
    /// Appends `len` symbols drawn from the measure to `out`.
    fn sample_into(&self, rng: &mut dyn RngCore, len: usize, out: &mut Vec<Symbol>);

    /// `log Q_n(w)`, `-inf` iff the cylinder has zero mass. The empty word
    /// has log-mass 0.
    fn log_marginal(&self, word: &[Symbol]) -> Result<f64> {
        self.alphabet().validate(word)?;
        let mut ev = self.evaluator();
        for &s in word {
            ev.push(s);
        }
        Ok(ev.value())
    }
}

/// Inverse-CDF sampler that never returns a zero-probability symbol.
#[derive(Debug, Clone)]
struct Categorical {
    cumulative: Vec<f64>,
    probs: Vec<f64>,
}

impl Categorical {
    fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self {
            cumulative,
            probs: probs.to_vec(),
        }
    }

    fn draw(&self, rng: &mut dyn RngCore) -> Symbol {
        let u: f64 = rng.gen::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let mut fallback = 0;
        for (i, (&c, &p)) in self.cumulative.iter().zip(&self.probs).enumerate() {
            if p > 0.0 {
                if u < c {
                    return i as Symbol;
                }
                fallback = i;
            }
        }
        fallback as Symbol
    }
}

fn validate_probability_vector(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidMeasure(format!("{what} is empty")));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidMeasure(format!("{what} has an invalid entry {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidMeasure(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn validate_stochastic(rows: &[Vec<f64>], cols: Option<usize>, what: &str) -> Result<()> {
    let width = cols.unwrap_or(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::InvalidMeasure(format!(
                "{what} row {i} has {} entries, expected {width}",
                row.len()
            )));
        }
        validate_probability_vector(row, &format!("{what} row {i}"))?;
    }
    Ok(())
}

fn strongly_connected(k: usize, positive: impl Fn(usize, usize) -> bool) -> bool {
    let reach = |forward: bool| {
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..k {
                let edge = if forward { positive(i, j) } else { positive(j, i) };
                if edge && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Solves `pi P = pi`, `sum pi = 1` for an irreducible row-stochastic `P`.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = p.len();
    if k == 0 {
        return Err(Error::InvalidMeasure("transition matrix is empty".into()));
    }
    validate_stochastic(p, None, "transition matrix")?;
    if !strongly_connected(k, |i, j| p[i][j] > 0.0) {
        return Err(Error::Stationary(
            "chain is reducible: the fixed point pi P = pi is not unique".into(),
        ));
    }
    // (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1.
    let mut a = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] = p[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(k);
    rhs[k - 1] = 1.0;
    let solved = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Stationary("singular stationary system".into()))?;
    let mut pi: Vec<f64> = solved.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);

    let residual = stationary_residual(p, &pi);
    if residual > STATIONARY_TOL {
        return Err(Error::Stationary(format!(
            "residual |pi P - pi|_inf = {residual:e} exceeds {STATIONARY_TOL:e}"
        )));
    }
    Ok(pi)
}

/// `|pi P - pi|_inf`.
pub fn stationary_residual(p: &[Vec<f64>], pi: &[f64]) -> f64 {
    let k = pi.len();
    (0..k)
        .map(|j| {
            let v: f64 = (0..k).map(|i| pi[i] * p[i][j]).sum();
            (v - pi[j]).abs()
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// iid

#[derive(Debug, Clone)]
pub struct IidMeasure {
    alphabet: Alphabet,
    probs: Vec<f64>,
    /// Distinct log-probability levels; `level_of[s]` indexes into it.
    levels: Vec<f64>,
    level_of: Vec<usize>,
    sampler: Categorical,
}

impl IidMeasure {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_probability_vector(&probs, "iid law")?;
        let alphabet = Alphabet::new(probs.len())?;
        let mut levels: Vec<f64> = Vec::new();
        let level_of = probs
            .iter()
            .map(|&p| {
                let lp = ext::ln0(p);
                match levels.iter().position(|&l| l == lp) {
                    Some(i) => i,
                    None => {
                        levels.push(lp);
                        levels.len() - 1
                    }
                }
            })
            .collect();
        Ok(Self {
            alphabet,
            sampler: Categorical::new(&probs),
            probs,
            levels,
            level_of,
        })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// The same law as a one-step Markov chain whose rows all equal `p`.
    /// Requires full support so that the chain is irreducible.
    pub fn as_markov(&self) -> Result<MarkovMeasure> {
        MarkovMeasure::new(vec![self.probs.clone(); self.probs.len()])
    }
}

/// Counts per distinct log-probability level: `f_n = sum_l c_l * level_l`.
/// For a uniform law this makes `f_n / n` bitwise equal to `-ln k`.
#[derive(Clone)]
struct IidEvaluator<'a> {
    measure: &'a IidMeasure,
    counts: Vec<u64>,
    len: usize,
}

impl IidEvaluator<'_> {
    fn combine(&self, scale: f64) -> f64 {
        self.counts
            .iter()
            .zip(&self.measure.levels)
            .filter(|(c, _)| **c > 0)
            .map(|(&c, &l)| (c as f64 / scale) * l)
            .sum()
    }
}

impl<'a> StreamingEvaluator<'a> for IidEvaluator<'a> {
    fn push(&mut self, symbol: Symbol) {
        self.counts[self.measure.level_of[symbol as usize]] += 1;
        self.len += 1;
    }

    fn len(&self) -> usize {
        self.len
    }

    fn value(&self) -> f64 {
        self.combine(1.0)
    }

    fn normalized(&self) -> f64 {
        self.combine(self.len as f64)
    }

    fn fork(&self) -> Box<dyn StreamingEvaluator<'a> + 'a> {
        Box::new(self.clone())
    }
}

impl ShiftMeasure for IidMeasure {
    fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    fn family(&self) -> Family {
        Family::Iid
    }

    fn id(&self) -> String {
        format!("iid(k={})", self.alphabet.size())
    }

    fn evaluator(&self) -> Box<dyn StreamingEvaluator<'_> + '_> {
        Box::new(IidEvaluator {
            measure: self,
            counts: vec![0; self.levels.len()],
            len: 0,
        })
    }

    fn sample_into(&self, rng: &mut dyn RngCore, len: usize, out: &mut Vec<Symbol>) {
        out.extend((0..len).map(|_| self.sampler.draw(rng)));
    }
}

// ---------------------------------------------------------------------------
// Markov

/// A stationary (unless built with [`MarkovMeasure::non_invariant`]) Markov
/// chain started from its initial law.
#[derive(Debug, Clone)]
pub struct MarkovMeasure {
    alphabet: Alphabet,
    /// Row-major transition matrix.
    p: Vec<f64>,
    log_p: Vec<f64>,
    initial: Vec<f64>,
    log_initial: Vec<f64>,
    stationary: bool,
    row_samplers: Vec<Categorical>,
    initial_sampler: Categorical,
}

impl MarkovMeasure {
    /// Chain started from its stationary distribution.
    pub fn new(p: Vec<Vec<f64>>) -> Result<Self> {
        let pi = stationary_distribution(&p)?;
        Self::build(p, pi, true)
    }

    /// Chain started from an arbitrary law; generally *not* shift-invariant.
    /// Intended for negative tests.
    pub fn non_invariant(p: Vec<Vec<f64>>, initial: Vec<f64>) -> Result<Self> {
        validate_stochastic(&p, None, "transition matrix")?;
        validate_probability_vector(&initial, "initial law")?;
        if initial.len() != p.len() {
            return Err(Error::InvalidMeasure("initial law and matrix disagree in size".into()));
        }
        Self::build(p, initial, false)
    }

    fn build(p: Vec<Vec<f64>>, initial: Vec<f64>, stationary: bool) -> Result<Self> {
        let k = p.len();
        let alphabet = Alphabet::new(k)?;
        let flat: Vec<f64> = p.iter().flatten().copied().collect();
        Ok(Self {
            alphabet,
            log_p: flat.iter().map(|&v| ext::ln0(v)).collect(),
            row_samplers: p.iter().map(|row| Categorical::new(row)).collect(),
            initial_sampler: Categorical::new(&initial),
            log_initial: initial.iter().map(|&v| ext::ln0(v)).collect(),
            p: flat,
            initial,
            stationary,
        })
    }

    pub fn states(&self) -> usize {
        self.alphabet.size()
    }

    pub fn transition(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.states() + j]
    }

    pub fn log_transition(&self, i: usize, j: usize) -> f64 {
        self.log_p[i * self.states() + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.p.chunks(self.states()).map(<[f64]>::to_vec).collect()
    }

    /// Initial law; the stationary distribution unless built non-invariant.
    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    /// `P^t`, row-major; `P^0 = I`.
    pub fn matrix_power(&self, t: usize) -> Vec<f64> {
        let k = self.states();
        let mul = |a: &[f64], b: &[f64]| {
            let mut c = vec![0.0; k * k];
            for i in 0..k {
                for l in 0..k {
                    let ail = a[i * k + l];
                    if ail != 0.0 {
                        for j in 0..k {
                            c[i * k + j] += ail * b[l * k + j];
                        }
                    }
                }
            }
            c
        };
        let mut result: Vec<f64> = (0..k * k).map(|x| if x / k == x % k { 1.0 } else { 0.0 }).collect();
        let mut base = self.p.clone();
        let mut e = t;
        while e > 0 {
            if e & 1 == 1 {
                result = mul(&result, &base);
            }
            base = mul(&base, &base);
            e >>= 1;
        }
        result
    }
}

#[derive(Clone)]
struct MarkovEvaluator<'a> {
    measure: &'a MarkovMeasure,
    last: Symbol,
    len: usize,
    value: f64,
}

impl<'a> StreamingEvaluator<'a> for MarkovEvaluator<'a> {
    fn push(&mut self, symbol: Symbol) {
        let inc = if self.len == 0 {
            self.measure.log_initial[symbol as usize]
        } else {
            self.measure.log_transition(self.last as usize, symbol as usize)
        };
        self.value += inc;
        self.last = symbol;
        self.len += 1;
    }

    fn len(&self) -> usize {
        self.len
    }

    fn value(&self) -> f64 {
        self.value
    }

    fn fork(&self) -> Box<dyn StreamingEvaluator<'a> + 'a> {
        Box::new(self.clone())
    }
}

impl ShiftMeasure for MarkovMeasure {
    fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    fn family(&self) -> Family {
        Family::Markov
    }

    fn id(&self) -> String {
        if self.stationary {
            format!("markov(k={})", self.states())
        } else {
            format!("markov-non-invariant(k={})", self.states())
        }
    }

    fn evaluator(&self) -> Box<dyn StreamingEvaluator<'_> + '_> {
        Box::new(MarkovEvaluator {
            measure: self,
            last: 0,
            len: 0,
            value: 0.0,
        })
    }

    fn sample_into(&self, rng: &mut dyn RngCore, len: usize, out: &mut Vec<Symbol>) {
        if len == 0 {
            return;
        }
        let mut state = self.initial_sampler.draw(rng);
        out.push(state);
        for _ in 1..len {
            state = self.row_samplers[state as usize].draw(rng);
            out.push(state);
        }
    }
}

// ---------------------------------------------------------------------------
// hidden Markov

#[derive(Debug, Clone)]
pub struct HiddenMarkovMeasure {
    hidden: MarkovMeasure,
    alphabet: Alphabet,
    /// Row-major `states x symbols` emission matrix.
    emission: Vec<f64>,
    emitters: Vec<Categorical>,
}

impl HiddenMarkovMeasure {
    pub fn new(transition: Vec<Vec<f64>>, emission: Vec<Vec<f64>>) -> Result<Self> {
        let hidden = MarkovMeasure::new(transition)?;
        if emission.len() != hidden.states() {
            return Err(Error::InvalidMeasure(format!(
                "emission matrix has {} rows for {} hidden states",
                emission.len(),
                hidden.states()
            )));
        }
        let symbols = emission.first().map_or(0, Vec::len);
        validate_stochastic(&emission, Some(symbols), "emission matrix")?;
        Ok(Self {
            alphabet: Alphabet::new(symbols)?,
            emitters: emission.iter().map(|row| Categorical::new(row)).collect(),
            emission: emission.into_iter().flatten().collect(),
            hidden,
        })
    }

    pub fn hidden(&self) -> &MarkovMeasure {
        &self.hidden
    }

    pub fn emission(&self, state: usize, symbol: usize) -> f64 {
        self.emission[state * self.alphabet.size() + symbol]
    }
}

/// Scaled forward recursion: `alpha` is renormalized every step and the
/// log of each normalizer is accumulated.
#[derive(Clone)]
struct HmmEvaluator<'a> {
    measure: &'a HiddenMarkovMeasure,
    alpha: Vec<f64>,
    scratch: Vec<f64>,
    len: usize,
    value: f64,
}

impl<'a> StreamingEvaluator<'a> for HmmEvaluator<'a> {
    fn push(&mut self, symbol: Symbol) {
        self.len += 1;
        if self.value == f64::NEG_INFINITY {
            return;
        }
        let m = self.measure;
        let states = m.hidden.states();
        let s = symbol as usize;
        for j in 0..states {
            let prior = if self.len == 1 {
                m.hidden.initial()[j]
            } else {
                (0..states).map(|i| self.alpha[i] * m.hidden.transition(i, j)).sum()
            };
            self.scratch[j] = prior * m.emission(j, s);
        }
        let c: f64 = self.scratch.iter().sum();
        if c == 0.0 {
            self.value = f64::NEG_INFINITY;
            return;
        }
        for j in 0..states {
            self.alpha[j] = self.scratch[j] / c;
        }
        self.value += c.ln();
    }

    fn len(&self) -> usize {
        self.len
    }

    fn value(&self) -> f64 {
        self.value
    }

    fn fork(&self) -> Box<dyn StreamingEvaluator<'a> + 'a> {
        Box::new(self.clone())
    }
}

impl ShiftMeasure for HiddenMarkovMeasure {
    fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    fn family(&self) -> Family {
        Family::Hmm
    }

    fn id(&self) -> String {
        format!("hmm(states={},k={})", self.hidden.states(), self.alphabet.size())
    }

    fn evaluator(&self) -> Box<dyn StreamingEvaluator<'_> + '_> {
        let states = self.hidden.states();
        Box::new(HmmEvaluator {
            measure: self,
            alpha: vec![0.0; states],
            scratch: vec![0.0; states],
            len: 0,
            value: 0.0,
        })
    }

    fn sample_into(&self, rng: &mut dyn RngCore, len: usize, out: &mut Vec<Symbol>) {
        let mut states = Vec::with_capacity(len);
        self.hidden.sample_into(rng, len, &mut states);
        out.extend(states.into_iter().map(|h| self.emitters[h as usize].draw(rng)));
    }
}

// ---------------------------------------------------------------------------
// mixtures

/// Finite convex combination of measures on a common alphabet. Stationary,
/// ergodic only when it has a single component.
#[derive(Debug, Clone)]
pub struct MixtureMeasure {
    alphabet: Alphabet,
    components: Vec<Arc<dyn ShiftMeasure>>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    chooser: Categorical,
}

impl MixtureMeasure {
    pub fn new(components: Vec<Arc<dyn ShiftMeasure>>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "mixture needs one positive weight per component ({} weights, {} components)",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::InvalidMeasure("mixture weights must be positive".into()));
        }
        validate_probability_vector(&weights, "mixture weights")?;
        let alphabet = components[0].alphabet();
        if components.iter().any(|c| c.alphabet() != alphabet) {
            return Err(Error::InvalidMeasure("mixture components use different alphabets".into()));
        }
        Ok(Self {
            alphabet,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            chooser: Categorical::new(&weights),
            components,
            weights,
        })
    }

    pub fn components(&self) -> &[Arc<dyn ShiftMeasure>] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Draws the component index used for one trajectory.
    pub fn choose_component(&self, rng: &mut dyn RngCore) -> usize {
        self.chooser.draw(rng) as usize
    }
}

struct MixtureEvaluator<'a> {
    measure: &'a MixtureMeasure,
    parts: Vec<Box<dyn StreamingEvaluator<'a> + 'a>>,
}

impl<'a> StreamingEvaluator<'a> for MixtureEvaluator<'a> {
    fn push(&mut self, symbol: Symbol) {
        for p in &mut self.parts {
            p.push(symbol);
        }
    }

    fn len(&self) -> usize {
        self.parts[0].len()
    }

    fn value(&self) -> f64 {
        let terms: Vec<f64> = self
            .parts
            .iter()
            .zip(&self.measure.log_weights)
            .map(|(p, lw)| lw + p.value())
            .collect();
        ext::log_sum_exp(&terms)
    }

    fn fork(&self) -> Box<dyn StreamingEvaluator<'a> + 'a> {
        Box::new(MixtureEvaluator {
            measure: self.measure,
            parts: self.parts.iter().map(|p| p.fork()).collect(),
        })
    }
}

impl ShiftMeasure for MixtureMeasure {
    fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    fn family(&self) -> Family {
        Family::Mixture
    }

    fn id(&self) -> String {
        let parts: Vec<String> = self.components.iter().map(|c| c.id()).collect();
        format!("mixture[{}]", parts.join(","))
    }

    fn evaluator(&self) -> Box<dyn StreamingEvaluator<'_> + '_> {
        Box::new(MixtureEvaluator {
            measure: self,
            parts: self.components.iter().map(|c| c.evaluator()).collect(),
        })
    }

    fn sample_into(&self, rng: &mut dyn RngCore, len: usize, out: &mut Vec<Symbol>) {
        let c = self.choose_component(rng);
        self.components[c].sample_into(rng, len, out);
    }
}

// ---------------------------------------------------------------------------
// JSON specs

/// JSON description of a measure, tagged by `"family"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MeasureSpec {
    Iid {
        p: Vec<f64>,
    },
    Markov {
        #[serde(rename = "P")]
        p: Vec<Vec<f64>>,
    },
    Hmm {
        #[serde(rename = "P")]
        p: Vec<Vec<f64>>,
        #[serde(rename = "E")]
        e: Vec<Vec<f64>>,
    },
    Mixture {
        weights: Vec<f64>,
        components: Vec<MeasureSpec>,
    },
}

pub const FAMILIES: &[&str] = &["iid", "markov", "hmm", "mixture"];

/// A built measure that keeps its concrete family accessible.
#[derive(Debug, Clone)]
pub enum Measure {
    Iid(IidMeasure),
    Markov(MarkovMeasure),
    Hmm(HiddenMarkovMeasure),
    Mixture(MixtureMeasure),
}

impl MeasureSpec {
    pub fn build(&self) -> Result<Measure> {
        Ok(match self {
            Self::Iid { p } => Measure::Iid(IidMeasure::new(p.clone())?),
            Self::Markov { p } => Measure::Markov(MarkovMeasure::new(p.clone())?),
            Self::Hmm { p, e } => Measure::Hmm(HiddenMarkovMeasure::new(p.clone(), e.clone())?),
            Self::Mixture { weights, components } => {
                let built = components
                    .iter()
                    .map(|c| c.build().map(Measure::into_shared))
                    .collect::<Result<Vec<_>>>()?;
                Measure::Mixture(MixtureMeasure::new(built, weights.clone())?)
            }
        })
    }
}

impl Measure {
    pub fn as_dyn(&self) -> &dyn ShiftMeasure {
        match self {
            Self::Iid(m) => m,
            Self::Markov(m) => m,
            Self::Hmm(m) => m,
            Self::Mixture(m) => m,
        }
    }

    pub fn into_shared(self) -> Arc<dyn ShiftMeasure> {
        match self {
            Self::Iid(m) => Arc::new(m),
            Self::Markov(m) => Arc::new(m),
            Self::Hmm(m) => Arc::new(m),
            Self::Mixture(m) => Arc::new(m),
        }
    }

    /// The Markov view: Markov chains as-is, full-support iid laws as
    /// constant-row chains.
    pub fn as_markov(&self) -> Option<MarkovMeasure> {
        match self {
            Self::Markov(m) => Some(m.clone()),
            Self::Iid(m) => m.as_markov().ok(),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// enumeration-based validation

/// Residuals of the measure invariants at one word length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelResiduals {
    pub n: usize,
    /// `|sum_w Q(w) - 1|` over words of length `n`.
    pub normalization: f64,
    /// `max_w |sum_a Q(a w) - Q(w)|` over words of length `n - 1`.
    pub left_consistency: Option<f64>,
    /// `max_w |sum_b Q(w b) - Q(w)|` over words of length `n - 1`.
    pub right_consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub measure: String,
    pub levels: Vec<LevelResiduals>,
    pub tolerance: f64,
    pub normalization_ok: bool,
    pub left_consistency_ok: bool,
    pub right_consistency_ok: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.normalization_ok && self.left_consistency_ok && self.right_consistency_ok
    }
}

/// Probabilities (linear scale) of all words of length `n`, in index order.
pub fn enumerate_probabilities(q: &dyn ShiftMeasure, n: usize, cap: u64) -> Result<Vec<f64>> {
    let alphabet = q.alphabet();
    let count = alphabet.require_within_cap(n, cap)?;
    (0..count)
        .into_par_iter()
        .map_init(
            || vec![0 as Symbol; n],
            |buf, idx| {
                alphabet.word_at(idx, buf);
                q.log_marginal(buf).map(f64::exp)
            },
        )
        .collect()
}

/// Checks normalization and two-sided consistency for every `n <= n_max` by
/// exhaustive enumeration.
pub fn validate_measure(q: &dyn ShiftMeasure, n_max: usize, cap: u64) -> Result<ValidationReport> {
    const TOL: f64 = 1e-9;
    let alphabet = q.alphabet();
    alphabet.require_within_cap(n_max, cap)?;
    let k = alphabet.size();
    let mut levels = Vec::with_capacity(n_max);
    let mut prev: Vec<f64> = vec![1.0];
    for n in 1..=n_max {
        let cur = enumerate_probabilities(q, n, cap)?;
        let normalization = (cur.iter().sum::<f64>() - 1.0).abs();
        let (left, right) = if n >= 2 {
            let stride = prev.len();
            let mut left = 0.0f64;
            let mut right = 0.0f64;
            for (w, &qw) in prev.iter().enumerate() {
                let r: f64 = (0..k).map(|b| cur[w * k + b]).sum();
                let l: f64 = (0..k).map(|a| cur[a * stride + w]).sum();
                right = right.max((r - qw).abs());
                left = left.max((l - qw).abs());
            }
            (Some(left), Some(right))
        } else {
            (None, None)
        };
        levels.push(LevelResiduals {
            n,
            normalization,
            left_consistency: left,
            right_consistency: right,
        });
        prev = cur;
    }
    let ok = |sel: fn(&LevelResiduals) -> Option<f64>| levels.iter().all(|l| sel(l).is_none_or(|v| v <= TOL));
    Ok(ValidationReport {
        measure: q.id(),
        normalization_ok: ok(|l| Some(l.normalization)),
        left_consistency_ok: ok(|l| l.left_consistency),
        right_consistency_ok: ok(|l| l.right_consistency),
        levels,
        tolerance: TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> MarkovMeasure {
        MarkovMeasure::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    #[test]
    fn stationary_examples() {
        let pi = stationary_distribution(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-15 && (pi[1] - 0.5).abs() < 1e-15);

        let pi = stationary_distribution(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-14);

        let err = stationary_distribution(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap_err();
        assert!(matches!(err, Error::Stationary(_)));
    }

    #[test]
    fn stationary_periodic_chain() {
        let p = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        let pi = stationary_distribution(&p).unwrap();
        assert!(pi.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-14));
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        let err = stationary_distribution(&[vec![0.5, 0.6], vec![0.5, 0.5]]).unwrap_err();
        assert!(matches!(err, Error::InvalidMeasure(_)));
        assert!(MarkovMeasure::new(vec![vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn log_marginal_examples() {
        let u = IidMeasure::uniform(2).unwrap();
        let v = u.log_marginal(&[0, 1, 1, 0]).unwrap();
        assert!((v + 4.0 * 2f64.ln()).abs() < 1e-15);

        let v = worked().log_marginal(&[0, 0]).unwrap();
        assert!((v - 0.6f64.ln()).abs() < 1e-15);

        // A two-state chain with P01 = 0 is reducible, so use three states.
        let q = MarkovMeasure::new(vec![vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5]]).unwrap();
        assert_eq!(q.log_marginal(&[0, 1]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(q.log_marginal(&[0, 1, 1, 1]).unwrap(), f64::NEG_INFINITY);

        assert_eq!(worked().log_marginal(&[]).unwrap(), 0.0);
        assert!(worked().log_marginal(&[0, 2]).is_err());
    }

    #[test]
    fn validation_examples() {
        let rep = validate_measure(&IidMeasure::uniform(3).unwrap(), 5, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!(rep.passed());
        assert!(rep.levels.iter().all(|l| l.normalization < 1e-14));

        let rep = validate_measure(&worked(), 6, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!(rep.passed());
        assert!(rep.levels[5].left_consistency.unwrap() <= 1e-9);

        let skew = MarkovMeasure::non_invariant(vec![vec![0.9, 0.1], vec![0.2, 0.8]], vec![0.5, 0.5]).unwrap();
        let rep = validate_measure(&skew, 3, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!(rep.normalization_ok && rep.right_consistency_ok);
        assert!(!rep.left_consistency_ok);
        assert!(rep.levels[1].left_consistency.unwrap() > 1e-3);
    }

    #[test]
    fn validation_respects_cap() {
        let err = validate_measure(&IidMeasure::uniform(10).unwrap(), 8, 1000).unwrap_err();
        assert!(matches!(err, Error::EnumerationCap { required: 100_000_000, cap: 1000 }));
    }

    fn brute_force_hmm(h: &HiddenMarkovMeasure, word: &[Symbol]) -> f64 {
        let s = h.hidden().states();
        let n = word.len();
        let mut total = 0.0;
        let mut path = vec![0usize; n];
        let count = s.pow(n as u32);
        for idx in 0..count {
            let mut x = idx;
            for slot in path.iter_mut().rev() {
                *slot = x % s;
                x /= s;
            }
            let mut p = h.hidden().initial()[path[0]] * h.emission(path[0], word[0] as usize);
            for t in 1..n {
                p *= h.hidden().transition(path[t - 1], path[t]) * h.emission(path[t], word[t] as usize);
            }
            total += p;
        }
        total.ln()
    }

    #[test]
    fn hmm_forward_matches_path_sum() {
        let h = HiddenMarkovMeasure::new(
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![vec![0.9, 0.1], vec![0.25, 0.75]],
        )
        .unwrap();
        let a = h.alphabet();
        for n in 1..=6 {
            let mut buf = vec![0; n];
            for idx in 0..a.word_count(n) as u64 {
                a.word_at(idx, &mut buf);
                let fwd = h.log_marginal(&buf).unwrap();
                let bf = brute_force_hmm(&h, &buf);
                assert!((fwd - bf).abs() <= 1e-10, "{buf:?}: {fwd} vs {bf}");
            }
        }
        assert!(validate_measure(&h, 6, DEFAULT_ENUMERATION_CAP).unwrap().passed());
    }

    #[test]
    fn hmm_zero_emission_is_sticky() {
        let h = HiddenMarkovMeasure::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(h.log_marginal(&[0, 2, 0]).unwrap(), f64::NEG_INFINITY);
        assert!((h.log_marginal(&[0, 1]).unwrap() - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mixture_order_invariance() {
        let a: Arc<dyn ShiftMeasure> = Arc::new(IidMeasure::new(vec![0.9, 0.1]).unwrap());
        let b: Arc<dyn ShiftMeasure> = Arc::new(worked());
        let c: Arc<dyn ShiftMeasure> = Arc::new(IidMeasure::new(vec![0.3, 0.7]).unwrap());
        let m1 = MixtureMeasure::new(vec![a.clone(), b.clone(), c.clone()], vec![0.2, 0.5, 0.3]).unwrap();
        let m2 = MixtureMeasure::new(vec![c, a, b], vec![0.3, 0.2, 0.5]).unwrap();
        let alphabet = m1.alphabet();
        let mut buf = vec![0; 7];
        for idx in 0..alphabet.word_count(7) as u64 {
            alphabet.word_at(idx, &mut buf);
            let x = m1.log_marginal(&buf).unwrap();
            let y = m2.log_marginal(&buf).unwrap();
            assert!((x - y).abs() <= 1e-14, "{buf:?}");
        }
        assert!(validate_measure(&m1, 7, DEFAULT_ENUMERATION_CAP).unwrap().passed());
    }

    #[test]
    fn iid_uniform_normalized_is_bitwise_constant() {
        for k in [2usize, 3, 5, 7] {
            let u = IidMeasure::uniform(k).unwrap();
            let target = (1.0 / k as f64).ln();
            let mut ev = u.evaluator();
            for i in 0..100_000usize {
                ev.push((i * 7919 % k) as Symbol);
                assert_eq!(ev.normalized(), target);
            }
        }
    }

    #[test]
    fn matrix_power_converges_to_stationary_rows() {
        let q = worked();
        let p50 = q.matrix_power(50);
        assert!((p50[0] - 2.0 / 3.0).abs() < 1e-7 && (p50[2] - 2.0 / 3.0).abs() < 1e-7);
        assert_eq!(q.matrix_power(0), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(q.matrix_power(1), vec![0.9, 0.1, 0.2, 0.8]);
    }

    #[test]
    fn spec_json() {
        let m: MeasureSpec = serde_json::from_str(r#"{"family":"markov","P":[[0.9,0.1],[0.2,0.8]]}"#).unwrap();
        assert!(matches!(m.build().unwrap(), Measure::Markov(_)));
        let mix: MeasureSpec = serde_json::from_str(
            r#"{"family":"mixture","weights":[0.5,0.5],"components":[{"family":"iid","p":[0.9,0.1]},{"family":"iid","p":[0.1,0.9]}]}"#,
        )
        .unwrap();
        assert_eq!(mix.build().unwrap().as_dyn().family(), Family::Mixture);
        assert!(serde_json::from_str::<MeasureSpec>(r#"{"family":"gibbs"}"#).is_err());
    }
}
