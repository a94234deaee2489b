//! Deterministic gap and error schedules, and the series container shared by
//! every estimator.
//!
//! A [`GapSchedule`] holds a nonnegative integer sequence `sigma_n` (also used
//! for the decoupling gap `tau_n`); an [`ErrorSchedule`] holds a nonnegative
//! real sequence `R_n`, optionally backed by a trajectory-dependent hook for
//! the random error terms `rho_n`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::de::{self, Deserializer};
use serde::ser::{self, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::ext;

/// Closed-form or tabulated rule behind a [`GapSchedule`].
#[derive(Debug, Clone, PartialEq)]
pub enum GapRule {
    /// `sigma_n = k`.
    Constant(u64),
    /// `sigma_n = ceil(n^alpha)` with `0 < alpha < 1`.
    CeilPower(f64),
    /// `sigma_n = ceil(log2(1 + n))`.
    CeilLog2,
    /// `sigma_n = table[n - 1]`.
    Table(Vec<u64>),
}

/// A nonnegative integer sequence indexed by `n >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GapSchedule {
    rule: GapRule,
}

impl GapSchedule {
    pub fn new(rule: GapRule) -> Result<Self> {
        if let GapRule::CeilPower(alpha) = rule {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "ceil_power exponent must lie in (0, 1), got {alpha}"
                )));
            }
        }
        Ok(Self { rule })
    }

    pub fn zero() -> Self {
        Self::constant(0)
    }

    pub fn constant(k: u64) -> Self {
        Self {
            rule: GapRule::Constant(k),
        }
    }

    pub fn ceil_log2() -> Self {
        Self {
            rule: GapRule::CeilLog2,
        }
    }

    pub fn ceil_power(alpha: f64) -> Result<Self> {
        Self::new(GapRule::CeilPower(alpha))
    }

    /// Table-backed schedule. Negative entries are unrepresentable here; the
    /// JSON loader rejects them before reaching this constructor.
    pub fn table(values: Vec<u64>) -> Self {
        Self {
            rule: GapRule::Table(values),
        }
    }

    pub fn rule(&self) -> &GapRule {
        &self.rule
    }

    pub fn is_zero(&self) -> bool {
        match &self.rule {
            GapRule::Constant(k) => *k == 0,
            GapRule::Table(t) => t.iter().all(|&v| v == 0),
            _ => false,
        }
    }

    /// `sigma_n`.
    pub fn value(&self, n: u64) -> Result<u64> {
        if n == 0 {
            return Err(Error::InvalidArgument("schedules are indexed from n = 1".into()));
        }
        Ok(match &self.rule {
            GapRule::Constant(k) => *k,
            GapRule::CeilPower(alpha) => ceil_power(n, *alpha),
            GapRule::CeilLog2 => ceil_log2_one_plus(n),
            GapRule::Table(t) => *t
                .get((n - 1) as usize)
                .ok_or(Error::OutOfRange { n, len: t.len() })?,
        })
    }

    /// `max { sigma_{k r} : k = 1..=k_max }`, the gap overhang of the longest
    /// block family.
    pub fn max_over_multiples(&self, r: u64, k_max: u64) -> Result<u64> {
        let mut best = 0;
        for k in 1..=k_max {
            best = best.max(self.value(k * r)?);
        }
        Ok(best)
    }

    /// Theorem-facing check: `sigma_1 = 0` unless the caller asserts that
    /// `f_{n+1} <= f_n o T` holds (true for log-marginals of a shift-invariant
    /// measure).
    pub fn require_theorem_ready(&self, assume_f_shift_monotone: bool) -> Result<()> {
        if assume_f_shift_monotone {
            return Ok(());
        }
        let s1 = self.value(1)?;
        if s1 != 0 {
            return Err(Error::InvalidArgument(format!(
                "gap schedule has sigma_1 = {s1}; sigma_1 = 0 is required unless \
                 assume_f_shift_monotone is set"
            )));
        }
        Ok(())
    }
}

fn ceil_log2_one_plus(n: u64) -> u64 {
    // ceil(log2(m)) for m = n + 1 >= 2
    let m = n.saturating_add(1);
    u64::from(64 - (m - 1).leading_zeros())
}

fn ceil_power(n: u64, alpha: f64) -> u64 {
    let x = n as f64;
    let inv = 1.0 / alpha;
    let mut c = x.powf(alpha).ceil();
    // powf is not correctly rounded; nudge c to the smallest integer with c^(1/alpha) >= n.
    while c > 0.0 && (c - 1.0).powf(inv) >= x {
        c -= 1.0;
    }
    while c.powf(inv) < x {
        c += 1.0;
    }
    c as u64
}

/// Trajectory-dependent error term `rho_n(T^position x)`.
pub trait ErrorHook: Send + Sync {
    fn rho(&self, symbols: &[u8], position: usize, n: u64) -> f64;
}

/// Rule behind an [`ErrorSchedule`].
#[derive(Clone)]
pub enum ErrorRule {
    /// `R_n = c`.
    Constant(f64),
    /// `R_n = coeff * n^alpha`.
    Power { coeff: f64, alpha: f64 },
    /// `R_n = table[n - 1]`.
    Table(Vec<f64>),
    /// Computed by a closure, e.g. the output of a gap lift. Not serializable.
    Derived {
        name: String,
        eval: Arc<dyn Fn(u64) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for ErrorRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Self::Power { coeff, alpha } => f
                .debug_struct("Power")
                .field("coeff", coeff)
                .field("alpha", alpha)
                .finish(),
            Self::Table(t) => f.debug_tuple("Table").field(&t.len()).finish(),
            Self::Derived { name, .. } => f.debug_struct("Derived").field("name", name).finish(),
        }
    }
}

/// A nonnegative real sequence `R_n`, with an optional hook for random `rho_n`.
#[derive(Clone)]
pub struct ErrorSchedule {
    rule: ErrorRule,
    hook: Option<Arc<dyn ErrorHook>>,
}

impl fmt::Debug for ErrorSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ErrorSchedule")
            .field("rule", &self.rule)
            .field("hook", &self.hook.is_some())
            .finish()
    }
}

impl ErrorSchedule {
    pub fn new(rule: ErrorRule) -> Result<Self> {
        match &rule {
            ErrorRule::Constant(c) => check_nonnegative(*c, 0)?,
            ErrorRule::Power { coeff, alpha } => {
                check_nonnegative(*coeff, 0)?;
                if !alpha.is_finite() {
                    return Err(Error::InvalidArgument("power exponent must be finite".into()));
                }
            }
            ErrorRule::Table(t) => {
                for (i, v) in t.iter().enumerate() {
                    check_nonnegative(*v, i as u64 + 1)?;
                }
            }
            ErrorRule::Derived { .. } => {}
        }
        Ok(Self { rule, hook: None })
    }

    pub fn zero() -> Self {
        Self {
            rule: ErrorRule::Constant(0.0),
            hook: None,
        }
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(ErrorRule::Constant(c))
    }

    pub fn table(values: Vec<f64>) -> Result<Self> {
        Self::new(ErrorRule::Table(values))
    }

    pub fn derived(name: impl Into<String>, eval: impl Fn(u64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            rule: ErrorRule::Derived {
                name: name.into(),
                eval: Arc::new(eval),
            },
            hook: None,
        }
    }

    pub fn with_hook(mut self, hook: Arc<dyn ErrorHook>) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn rule(&self) -> &ErrorRule {
        &self.rule
    }

    pub fn is_zero(&self) -> bool {
        self.hook.is_none()
            && match &self.rule {
                ErrorRule::Constant(c) => *c == 0.0,
                ErrorRule::Power { coeff, .. } => *coeff == 0.0,
                ErrorRule::Table(t) => t.iter().all(|&v| v == 0.0),
                ErrorRule::Derived { .. } => false,
            }
    }

    /// Deterministic `R_n`.
    pub fn value(&self, n: u64) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidArgument("schedules are indexed from n = 1".into()));
        }
        let v = match &self.rule {
            ErrorRule::Constant(c) => *c,
            ErrorRule::Power { coeff, alpha } => coeff * (n as f64).powf(*alpha),
            ErrorRule::Table(t) => *t
                .get((n - 1) as usize)
                .ok_or(Error::OutOfRange { n, len: t.len() })?,
            ErrorRule::Derived { eval, .. } => {
                let v = eval(n);
                check_nonnegative(v, n)?;
                v
            }
        };
        Ok(v)
    }

    /// `rho_n(T^position x)`: the hook when present, `R_n` otherwise.
    pub fn value_at(&self, symbols: &[u8], position: usize, n: u64) -> Result<f64> {
        match &self.hook {
            Some(hook) => {
                let v = hook.rho(symbols, position, n);
                check_nonnegative(v, n)?;
                Ok(v)
            }
            None => self.value(n),
        }
    }

    /// Materializes `R_1..=R_len` as a table.
    pub fn to_table(&self, len: u64) -> Result<Self> {
        let values = (1..=len).map(|n| self.value(n)).collect::<Result<Vec<_>>>()?;
        Self::table(values)
    }
}

fn check_nonnegative(v: f64, n: u64) -> Result<()> {
    if v.is_nan() || v < 0.0 || v == f64::INFINITY {
        Err(Error::InvalidArgument(format!(
            "error schedule entry at n = {n} must be a finite nonnegative real, got {v}"
        )))
    } else {
        Ok(())
    }
}

/// Common read access for the sublinearity diagnostic.
pub trait Schedule {
    fn value_f64(&self, n: u64) -> Result<f64>;
}

impl Schedule for GapSchedule {
    fn value_f64(&self, n: u64) -> Result<f64> {
        self.value(n).map(|v| v as f64)
    }
}

impl Schedule for ErrorSchedule {
    fn value_f64(&self, n: u64) -> Result<f64> {
        self.value(n)
    }
}

/// Finite-horizon proxy for `s_n = o(n)`. The flag is advisory only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SublinearityReport {
    pub horizon: u64,
    pub threshold: f64,
    /// `max s_n / n` over `n in [ceil(N/2), N]`.
    pub max_ratio: f64,
    pub argmax: u64,
    pub below_threshold: bool,
}

pub fn sublinearity_report(s: &dyn Schedule, horizon: u64, threshold: f64) -> Result<SublinearityReport> {
    if horizon < 4 {
        return Err(Error::InvalidArgument(format!(
            "sublinearity horizon must be >= 4, got {horizon}"
        )));
    }
    let start = horizon.div_ceil(2);
    let mut max_ratio = f64::NEG_INFINITY;
    let mut argmax = start;
    for n in start..=horizon {
        let ratio = s.value_f64(n)? / n as f64;
        if ratio > max_ratio {
            max_ratio = ratio;
            argmax = n;
        }
    }
    Ok(SublinearityReport {
        horizon,
        threshold,
        max_ratio,
        argmax,
        below_threshold: max_ratio < threshold,
    })
}

// ---------------------------------------------------------------------------
// JSON form: {"rule": name, "params": {...}} or {"table": [...]}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Table { table: Vec<Value> },
    Rule {
        rule: String,
        #[serde(default)]
        params: Map<String, Value>,
    },
}

fn param_f64(params: &Map<String, Value>, key: &str, rule: &str) -> std::result::Result<f64, String> {
    params
        .get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("rule {rule:?} needs numeric param {key:?}"))
}

pub const GAP_RULES: &[&str] = &["constant", "ceil_power", "ceil_log2"];
pub const ERROR_RULES: &[&str] = &["constant", "power"];

impl GapSchedule {
    fn from_repr(repr: Repr) -> std::result::Result<Self, String> {
        match repr {
            Repr::Table { table } => {
                let mut out = Vec::with_capacity(table.len());
                for (i, v) in table.iter().enumerate() {
                    let x = v
                        .as_i64()
                        .ok_or_else(|| format!("table entry {i} is not an integer"))?;
                    if x < 0 {
                        return Err(format!("table entry {i} is negative ({x})"));
                    }
                    out.push(x as u64);
                }
                Ok(Self::table(out))
            }
            Repr::Rule { rule, params } => match rule.as_str() {
                "constant" => {
                    let v = params
                        .get("value")
                        .and_then(Value::as_i64)
                        .ok_or("rule \"constant\" needs integer param \"value\"")?;
                    if v < 0 {
                        return Err(format!("constant gap must be nonnegative, got {v}"));
                    }
                    Ok(Self::constant(v as u64))
                }
                "ceil_power" => {
                    let alpha = param_f64(&params, "alpha", &rule)?;
                    Self::ceil_power(alpha).map_err(|e| e.to_string())
                }
                "ceil_log2" => Ok(Self::ceil_log2()),
                other => Err(format!("unknown gap rule {other:?}; allowed: {GAP_RULES:?}")),
            },
        }
    }

    fn to_repr(&self) -> Repr {
        let mut params = Map::new();
        match &self.rule {
            GapRule::Table(t) => Repr::Table {
                table: t.iter().map(|&v| Value::from(v)).collect(),
            },
            GapRule::Constant(k) => {
                params.insert("value".into(), Value::from(*k));
                Repr::Rule {
                    rule: "constant".into(),
                    params,
                }
            }
            GapRule::CeilPower(alpha) => {
                params.insert("alpha".into(), Value::from(*alpha));
                Repr::Rule {
                    rule: "ceil_power".into(),
                    params,
                }
            }
            GapRule::CeilLog2 => Repr::Rule {
                rule: "ceil_log2".into(),
                params,
            },
        }
    }
}

impl Serialize for GapSchedule {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_repr().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GapSchedule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = Repr::deserialize(deserializer)?;
        Self::from_repr(repr).map_err(de::Error::custom)
    }
}

impl ErrorSchedule {
    fn from_repr(repr: Repr) -> std::result::Result<Self, String> {
        let built = match repr {
            Repr::Table { table } => {
                let values = table
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v.as_f64().ok_or_else(|| format!("table entry {i} is not a number")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Self::table(values)
            }
            Repr::Rule { rule, params } => match rule.as_str() {
                "constant" => Self::constant(param_f64(&params, "value", &rule)?),
                "power" => Self::new(ErrorRule::Power {
                    coeff: param_f64(&params, "coeff", &rule)?,
                    alpha: param_f64(&params, "alpha", &rule)?,
                }),
                other => return Err(format!("unknown error rule {other:?}; allowed: {ERROR_RULES:?}")),
            },
        };
        built.map_err(|e| e.to_string())
    }

    fn to_repr(&self) -> std::result::Result<Repr, String> {
        if self.hook.is_some() {
            return Err("error schedules with a trajectory hook are not serializable".into());
        }
        let mut params = Map::new();
        Ok(match &self.rule {
            ErrorRule::Constant(c) => {
                params.insert("value".into(), Value::from(*c));
                Repr::Rule {
                    rule: "constant".into(),
                    params,
                }
            }
            ErrorRule::Power { coeff, alpha } => {
                params.insert("coeff".into(), Value::from(*coeff));
                params.insert("alpha".into(), Value::from(*alpha));
                Repr::Rule {
                    rule: "power".into(),
                    params,
                }
            }
            ErrorRule::Table(t) => Repr::Table {
                table: t.iter().map(|&v| Value::from(v)).collect(),
            },
            ErrorRule::Derived { name, .. } => {
                return Err(format!(
                    "derived error schedule {name:?} is not serializable; materialize it with to_table"
                ))
            }
        })
    }
}

impl Serialize for ErrorSchedule {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_repr().map_err(ser::Error::custom)?.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ErrorSchedule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = Repr::deserialize(deserializer)?;
        Self::from_repr(repr).map_err(de::Error::custom)
    }
}

// ---------------------------------------------------------------------------

/// Indexed values `(n, v_n)` with `v_n` in `[-inf, inf)`, indices strictly
/// increasing.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConvergenceSeries {
    pub label: String,
    pub seed: Option<u64>,
    pub measures: Vec<String>,
    #[serde(serialize_with = "serialize_entries")]
    entries: Vec<(u64, f64)>,
}

fn serialize_entries<S: Serializer>(entries: &[(u64, f64)], serializer: S) -> std::result::Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    struct Entry(u64, #[serde(with = "crate::ext::extended")] f64);
    serializer.collect_seq(entries.iter().map(|&(n, v)| Entry(n, v)))
}

impl ConvergenceSeries {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_measures<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.measures = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn push(&mut self, n: u64, value: f64) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidArgument("series indices start at 1".into()));
        }
        if let Some(&(last, _)) = self.entries.last() {
            if n <= last {
                return Err(Error::InvalidArgument(format!(
                    "series indices must increase strictly: {n} after {last}"
                )));
            }
        }
        ext::check(value, || format!("series {:?} at n = {n}", self.label))?;
        self.entries.push((n, value));
        Ok(())
    }

    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<(u64, f64)> {
        self.entries.last().copied()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.1)
    }

    /// Running minimum of the values.
    pub fn running_min(&self) -> Vec<f64> {
        self.values()
            .scan(f64::INFINITY, |acc, v| {
                *acc = acc.min(v);
                Some(*acc)
            })
            .collect()
    }

    /// Running maximum of the values.
    pub fn running_max(&self) -> Vec<f64> {
        self.values()
            .scan(f64::NEG_INFINITY, |acc, v| {
                *acc = acc.max(v);
                Some(*acc)
            })
            .collect()
    }

    /// `max - min` over entries with `n >= horizon / 2`; `None` with fewer
    /// than two tail entries. Tails that are entirely `-inf` have zero
    /// oscillation; a tail mixing `-inf` with finite values has infinite
    /// oscillation.
    pub fn tail_oscillation(&self, horizon: u64) -> Option<f64> {
        let tail: Vec<f64> = self
            .entries
            .iter()
            .filter(|(n, _)| 2 * n >= horizon)
            .map(|e| e.1)
            .collect();
        if tail.len() < 2 {
            return None;
        }
        let max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
        Some(ext::gap(max, min))
    }

    /// Tail oscillation at the last reported index.
    pub fn terminal_oscillation(&self) -> Option<f64> {
        self.last().and_then(|(n, _)| self.tail_oscillation(n))
    }

    /// CSV with header `n,value`; `-inf` is written as `-inf`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "n,value")?;
        for &(n, v) in &self.entries {
            writeln!(out, "{n},{v}")?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(GapSchedule::zero().value(7).unwrap(), 0);
        assert_eq!(GapSchedule::ceil_power(0.5).unwrap().value(10).unwrap(), 4);
        assert_eq!(GapSchedule::ceil_log2().value(15).unwrap(), 4);
        assert_eq!(GapSchedule::ceil_log2().value(1).unwrap(), 1);
        assert_eq!(GapSchedule::ceil_log2().value(16).unwrap(), 5);
    }

    #[test]
    fn ceil_power_exact_on_perfect_powers() {
        let s = GapSchedule::ceil_power(0.5).unwrap();
        for c in 1u64..2000 {
            assert_eq!(s.value(c * c).unwrap(), c);
            assert_eq!(s.value(c * c + 1).unwrap(), c + 1);
        }
    }

    #[test]
    fn table_out_of_range_is_an_error() {
        let s = GapSchedule::table(vec![0, 1, 2]);
        assert_eq!(s.value(3).unwrap(), 2);
        assert!(matches!(s.value(4), Err(Error::OutOfRange { n: 4, len: 3 })));
        let r = ErrorSchedule::table(vec![0.5]).unwrap();
        assert!(matches!(r.value(2), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn negative_entries_rejected() {
        assert!(ErrorSchedule::table(vec![0.0, -1.0]).is_err());
        assert!(ErrorSchedule::constant(-0.1).is_err());
        let bad: std::result::Result<GapSchedule, _> = serde_json::from_str(r#"{"table":[0,-2]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn theorem_facing_gap_check() {
        assert!(GapSchedule::zero().require_theorem_ready(false).is_ok());
        assert!(GapSchedule::ceil_log2().require_theorem_ready(false).is_err());
        assert!(GapSchedule::ceil_log2().require_theorem_ready(true).is_ok());
        assert!(GapSchedule::table(vec![0, 3]).require_theorem_ready(false).is_ok());
    }

    #[test]
    fn sublinearity_examples() {
        let r = sublinearity_report(&GapSchedule::constant(3), 1000, 0.01).unwrap();
        assert_eq!(r.max_ratio, 3.0 / 500.0);
        assert!(r.below_threshold);

        let linear = GapSchedule::table((1..=100).collect());
        let r = sublinearity_report(&linear, 100, 0.5).unwrap();
        assert_eq!(r.max_ratio, 1.0);
        assert!(!r.below_threshold);

        assert!(sublinearity_report(&GapSchedule::zero(), 3, 0.1).is_err());
    }

    #[test]
    fn sublinearity_sqrt_matches_direct_scan() {
        // independent scan with integer ceil-sqrt
        let mut best = 0.0f64;
        for n in 5000u64..=10000 {
            let mut c = (n as f64).sqrt() as u64;
            while c * c < n {
                c += 1;
            }
            best = best.max(c as f64 / n as f64);
        }
        let r = sublinearity_report(&GapSchedule::ceil_power(0.5).unwrap(), 10000, 0.02).unwrap();
        assert_eq!(r.max_ratio, best);
        assert_eq!(r.max_ratio, 72.0 / 5042.0);
        assert_eq!(r.argmax, 5042);
        assert!(r.below_threshold);
    }

    #[test]
    fn builtin_rules_have_nonincreasing_horizon_ratio() {
        let rules = [
            GapSchedule::constant(5),
            GapSchedule::ceil_power(0.5).unwrap(),
            GapSchedule::ceil_power(0.3).unwrap(),
            GapSchedule::ceil_log2(),
        ];
        for s in &rules {
            let mut n = 8;
            while n <= 1 << 16 {
                let a = sublinearity_report(s, n, 1.0).unwrap().max_ratio;
                let b = sublinearity_report(s, 2 * n, 1.0).unwrap().max_ratio;
                assert!(b <= a, "{s:?} at N = {n}: {b} > {a}");
                n *= 2;
            }
        }
    }

    #[test]
    fn json_forms() {
        let s: GapSchedule = serde_json::from_str(r#"{"rule":"ceil_log2"}"#).unwrap();
        assert_eq!(s, GapSchedule::ceil_log2());
        let s: GapSchedule = serde_json::from_str(r#"{"rule":"ceil_power","params":{"alpha":0.5}}"#).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"{"rule":"ceil_power","params":{"alpha":0.5}}"#);
        let r: ErrorSchedule = serde_json::from_str(r#"{"table":[0.0,1.5]}"#).unwrap();
        assert_eq!(r.value(2).unwrap(), 1.5);
        let err = serde_json::from_str::<GapSchedule>(r#"{"rule":"wobbly"}"#).unwrap_err();
        assert!(err.to_string().contains("ceil_log2"));
        let derived = ErrorSchedule::derived("x", |n| n as f64);
        assert!(serde_json::to_string(&derived).is_err());
    }

    #[test]
    fn series_invariants() {
        let mut s = ConvergenceSeries::new("t");
        s.push(1, -1.0).unwrap();
        s.push(4, -2.0).unwrap();
        assert!(s.push(4, 0.0).is_err());
        assert!(s.push(5, f64::INFINITY).is_err());
        s.push(8, f64::NEG_INFINITY).unwrap();
        assert_eq!(s.tail_oscillation(8), Some(f64::INFINITY));
        assert_eq!(s.running_min(), vec![-1.0, -2.0, f64::NEG_INFINITY]);
        assert_eq!(s.to_csv(), "n,value\n1,-1\n4,-2\n8,-inf\n");
        let mut one = ConvergenceSeries::new("x");
        one.push(10, 0.0).unwrap();
        assert_eq!(one.tail_oscillation(10), None);
    }
}
