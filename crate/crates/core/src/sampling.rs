//! Seeded trajectories and streaming evaluation of `f_n(x) = log Q_n(x_1^n)`.
//!
//! Randomness comes from ChaCha8 keyed by `(seed, stream)`, so trial `t` of
//! a batch always sees the same symbols no matter which worker runs it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{ShiftMeasure, Symbol};
use crate::schedules::ConvergenceSeries;

/// RNG for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A finite sample path `x_1..x_N`. The shift `T^j` is the offset `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub symbols: Vec<Symbol>,
    pub seed: u64,
    pub stream: u64,
    pub measure: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// `T^offset x` as a slice.
    pub fn shifted(&self, offset: usize) -> &[Symbol] {
        &self.symbols[offset.min(self.symbols.len())..]
    }

    /// Raw symbol text: one digit per symbol for alphabets of size <= 10,
    /// space-separated integers otherwise. Ends with a newline.
    pub fn to_text(&self, alphabet_size: usize) -> String {
        let mut out = if alphabet_size <= 10 {
            self.symbols.iter().map(|&s| char::from(b'0' + s)).collect::<String>()
        } else {
            self.symbols.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
        };
        out.push('\n');
        out
    }

    pub fn parse_symbols(text: &str, alphabet_size: usize) -> Result<Vec<Symbol>> {
        let text = text.trim();
        let parsed: std::result::Result<Vec<Symbol>, _> = if alphabet_size <= 10 {
            text.chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| c.to_digit(10).map(|d| d as Symbol).ok_or(c))
                .collect::<std::result::Result<_, char>>()
                .map_err(|c| format!("unexpected character {c:?}"))
        } else {
            text.split_whitespace()
                .map(|t| t.parse::<Symbol>().map_err(|e| format!("{t:?}: {e}")))
                .collect()
        };
        let symbols = parsed.map_err(Error::InvalidArgument)?;
        if let Some(s) = symbols.iter().find(|&&s| s as usize >= alphabet_size) {
            return Err(Error::InvalidArgument(format!("symbol {s} outside alphabet of size {alphabet_size}")));
        }
        Ok(symbols)
    }
}

/// Draws `x_1..x_N` from `measure` with stream 0 of `seed`.
pub fn sample_trajectory(measure: &dyn ShiftMeasure, len: usize, seed: u64) -> Trajectory {
    sample_trajectory_stream(measure, len, seed, 0)
}

pub fn sample_trajectory_stream(measure: &dyn ShiftMeasure, len: usize, seed: u64, stream: u64) -> Trajectory {
    let mut rng = rng_for(seed, stream);
    let mut symbols = Vec::with_capacity(len);
    measure.sample_into(&mut rng, len, &mut symbols);
    Trajectory {
        symbols,
        seed,
        stream,
        measure: measure.id(),
    }
}

/// Index set for a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Grid {
    /// `{ceil(ratio^j)}` plus the horizon.
    Geometric { ratio: f64 },
    /// `{step, 2 step, ...}` plus the horizon.
    Stride { step: u64 },
    Explicit { points: Vec<u64> },
}

impl Default for Grid {
    fn default() -> Self {
        Self::Geometric { ratio: 1.2 }
    }
}

impl Grid {
    /// Sorted, deduplicated points in `[1, horizon]`.
    pub fn points(&self, horizon: u64) -> Result<Vec<u64>> {
        if horizon == 0 {
            return Ok(Vec::new());
        }
        let mut pts = match self {
            Self::Geometric { ratio } => {
                if !(*ratio > 1.0) {
                    return Err(Error::InvalidArgument(format!("geometric grid ratio must exceed 1, got {ratio}")));
                }
                let mut pts = Vec::new();
                let mut x = 1.0f64;
                while x.ceil() <= horizon as f64 {
                    pts.push(x.ceil() as u64);
                    x *= ratio;
                }
                pts.push(horizon);
                pts
            }
            Self::Stride { step } => {
                if *step == 0 {
                    return Err(Error::InvalidArgument("grid stride must be >= 1".into()));
                }
                let mut pts: Vec<u64> = (1..=horizon / step).map(|i| i * step).collect();
                pts.push(horizon);
                pts
            }
            Self::Explicit { points } => {
                if let Some(p) = points.iter().find(|&&p| p == 0 || p > horizon) {
                    return Err(Error::InvalidArgument(format!("grid point {p} outside [1, {horizon}]")));
                }
                points.clone()
            }
        };
        pts.sort_unstable();
        pts.dedup();
        Ok(pts)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Geometric { ratio } => write!(f, "geometric:{ratio}"),
            Self::Stride { step } => write!(f, "stride:{step}"),
            Self::Explicit { points } => {
                let parts: Vec<String> = points.iter().map(u64::to_string).collect();
                write!(f, "list:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for Grid {
    type Err = String;

    /// `geometric:1.2`, `stride:100` or `list:1,10,100`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, arg) = s.split_once(':').ok_or_else(|| format!("grid {s:?} must look like kind:arg"))?;
        match kind {
            "geometric" => arg
                .parse()
                .map(|ratio| Self::Geometric { ratio })
                .map_err(|e| format!("bad ratio {arg:?}: {e}")),
            "stride" => arg
                .parse()
                .map(|step| Self::Stride { step })
                .map_err(|e| format!("bad stride {arg:?}: {e}")),
            "list" => arg
                .split(',')
                .map(|t| t.trim().parse::<u64>().map_err(|e| format!("bad point {t:?}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(|points| Self::Explicit { points }),
            other => Err(format!("unknown grid kind {other:?}; expected geometric, stride or list")),
        }
    }
}

/// `f_1(T^offset x), ..., f_len(T^offset x)` in one pass.
pub fn prefix_log_marginals(symbols: &[Symbol], q: &dyn ShiftMeasure, offset: usize, len: usize) -> Result<Vec<f64>> {
    let end = offset
        .checked_add(len)
        .filter(|&e| e <= symbols.len())
        .ok_or_else(|| Error::InvalidArgument(format!(
            "window [{offset}, {offset} + {len}) exceeds trajectory length {}",
            symbols.len()
        )))?;
    let window = &symbols[offset..end];
    q.alphabet().validate(window)?;
    let mut ev = q.evaluator();
    Ok(window
        .iter()
        .map(|&s| {
            ev.push(s);
            ev.value()
        })
        .collect())
}

/// `v_n = (1/n) log Q_n(x_1^n)` on the grid, single pass. Once `-inf` is
/// reached every later value is `-inf`.
pub fn kingman_series(x: &Trajectory, q: &dyn ShiftMeasure, grid: &Grid) -> Result<ConvergenceSeries> {
    shifted_kingman_series(x, q, 0, grid)
}

/// [`kingman_series`] along `T^offset x`.
pub fn shifted_kingman_series(x: &Trajectory, q: &dyn ShiftMeasure, offset: usize, grid: &Grid) -> Result<ConvergenceSeries> {
    let window = x.shifted(offset);
    if offset > x.len() {
        return Err(Error::InvalidArgument(format!("offset {offset} exceeds trajectory length {}", x.len())));
    }
    let points = grid.points(window.len() as u64)?;
    q.alphabet().validate(window)?;
    let mut series = ConvergenceSeries::new(format!("(1/n) log Q_n(x_{{{}+1..}})", offset))
        .with_seed(x.seed)
        .with_measures([x.measure.clone(), q.id()]);
    let mut ev = q.evaluator();
    let mut dead = false;
    let mut consumed = 0usize;
    for &n in &points {
        while consumed < n as usize {
            ev.push(window[consumed]);
            consumed += 1;
        }
        let v = if dead { f64::NEG_INFINITY } else { ev.normalized() };
        dead |= v == f64::NEG_INFINITY;
        series.push(n, v)?;
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{IidMeasure, MarkovMeasure, MixtureMeasure};
    use std::sync::Arc;

    fn worked() -> MarkovMeasure {
        MarkovMeasure::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    #[test]
    fn deterministic_in_seed() {
        let u = IidMeasure::uniform(2).unwrap();
        let a = sample_trajectory(&u, 10, 42);
        let b = sample_trajectory(&u, 10, 42);
        assert_eq!(a, b);
        let c = sample_trajectory(&u, 1000, 43);
        assert_ne!(a.symbols, c.symbols[..10]);
        assert_ne!(
            sample_trajectory_stream(&u, 64, 42, 1).symbols,
            sample_trajectory_stream(&u, 64, 42, 2).symbols
        );
    }

    #[test]
    fn markov_frequency_matches_stationary_law() {
        let x = sample_trajectory(&worked(), 1_000_000, 7);
        let zeros = x.symbols.iter().filter(|&&s| s == 0).count() as f64 / 1e6;
        assert!((zeros - 2.0 / 3.0).abs() < 0.01, "{zeros}");
    }

    #[test]
    fn mixture_trajectories_cluster_at_component_means() {
        let a: Arc<dyn ShiftMeasure> = Arc::new(IidMeasure::new(vec![0.9, 0.1]).unwrap());
        let b: Arc<dyn ShiftMeasure> = Arc::new(IidMeasure::new(vec![0.1, 0.9]).unwrap());
        let mix = MixtureMeasure::new(vec![a, b], vec![0.5, 0.5]).unwrap();
        let mut near = [0usize; 2];
        for seed in 0..100 {
            let x = sample_trajectory(&mix, 5000, seed);
            let f = x.symbols.iter().filter(|&&s| s == 0).count() as f64 / 5000.0;
            if (f - 0.9).abs() < 0.03 {
                near[0] += 1;
            } else if (f - 0.1).abs() < 0.03 {
                near[1] += 1;
            }
        }
        assert_eq!(near[0] + near[1], 100);
        assert!(near[0] > 25 && near[1] > 25, "{near:?}");
    }

    #[test]
    fn grids() {
        let g = Grid::default().points(10).unwrap();
        assert_eq!(g, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        assert_eq!(Grid::Stride { step: 4 }.points(10).unwrap(), vec![4, 8, 10]);
        assert!(Grid::Explicit { points: vec![0] }.points(5).is_err());
        let parsed: Grid = "list:3,1,3".parse().unwrap();
        assert_eq!(parsed.points(5).unwrap(), vec![1, 3]);
        assert_eq!("geometric:1.5".parse::<Grid>().unwrap().to_string(), "geometric:1.5");
        assert!("spiral:2".parse::<Grid>().is_err());
    }

    #[test]
    fn uniform_series_is_constant() {
        let q = IidMeasure::uniform(2).unwrap();
        let x = sample_trajectory(&worked(), 10_000, 3);
        let s = kingman_series(&x, &q, &Grid::default()).unwrap();
        assert!(s.values().all(|v| v == -(2f64.ln())));
        for offset in [0, 17, 999] {
            let t = shifted_kingman_series(&x, &q, offset, &Grid::Stride { step: 100 }).unwrap();
            assert!(t.values().all(|v| v == -(2f64.ln())));
        }
    }

    #[test]
    fn offset_zero_matches_unshifted() {
        let q = worked();
        let x = sample_trajectory(&q, 5000, 11);
        let a = kingman_series(&x, &q, &Grid::default()).unwrap();
        let b = shifted_kingman_series(&x, &q, 0, &Grid::default()).unwrap();
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn forbidden_bigram_is_sticky() {
        let q = MarkovMeasure::new(vec![vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5]]).unwrap();
        let p = IidMeasure::uniform(3).unwrap();
        let x = sample_trajectory(&p, 2000, 5);
        let s = kingman_series(&x, &q, &Grid::Stride { step: 1 }).unwrap();
        let first = s.entries().iter().position(|e| e.1 == f64::NEG_INFINITY).expect("hits -inf");
        assert!(s.entries()[first..].iter().all(|e| e.1 == f64::NEG_INFINITY));
        assert!(s.entries()[..first].iter().all(|e| e.1.is_finite()));
        // the first -inf is at the first forbidden bigram
        let bad = x
            .symbols
            .windows(2)
            .position(|w| q.transition(w[0] as usize, w[1] as usize) == 0.0)
            .unwrap();
        assert_eq!(first, bad + 1);
    }

    #[test]
    fn window_bounds_checked() {
        let q = worked();
        let x = sample_trajectory(&q, 100, 1);
        assert!(prefix_log_marginals(&x.symbols, &q, 50, 51).is_err());
        assert!(shifted_kingman_series(&x, &q, 101, &Grid::default()).is_err());
        let pre = prefix_log_marginals(&x.symbols, &q, 10, 90).unwrap();
        assert_eq!(pre[89], q.log_marginal(&x.symbols[10..100]).unwrap());
    }

    #[test]
    fn text_round_trip() {
        let x = sample_trajectory(&IidMeasure::uniform(3).unwrap(), 50, 9);
        let text = x.to_text(3);
        assert_eq!(Trajectory::parse_symbols(&text, 3).unwrap(), x.symbols);
        assert!(Trajectory::parse_symbols("0123", 3).is_err());
    }
}
