//! Numerics for gapped subadditive ergodic theory on one-sided shifts.
//!
//! * [`schedules`]: gap and error schedules, convergence series.
//! * [`fekete`]: gapped Fekete engine (brute-force condition check, infimum
//!   formula, limit series, gap lifting).
//! * [`measures`]: iid, Markov, hidden-Markov and mixture measures with exact
//!   log-marginals.
//! * [`sampling`]: seeded trajectories and streaming `log Q_n(x_1^n)`.
//! * [`decoupling`]: upper-decoupling audits and their conversion into
//!   gapped almost-subadditivity data.
//! * [`estimators`]: cross entropy, specific relative entropy, Monte-Carlo
//!   means and closed-form / brute-force oracles.
//! * [`steele`]: bad sets, Birkhoff averages and gapped Steele-type interval
//!   decompositions along a trajectory.
//! * [`cli`]: run configurations and the artifact-writing driver behind the
//!   `gapped` binary.

pub mod cli;
pub mod decoupling;
pub mod error;
pub mod estimators;
pub mod ext;
pub mod fekete;
pub mod measures;
pub mod sampling;
pub mod schedules;
pub mod steele;

pub use error::{Error, Result};
