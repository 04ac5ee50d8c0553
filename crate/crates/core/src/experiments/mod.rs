//! Experiment runners behind the `ctmap` binary.

pub mod slam;
pub mod table2;
pub mod table5;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::IoError;

pub use slam::{run_slam, SlamConfig, SlamOutcome};
pub use table2::{run_table2, Table2Config, Table2Mode, Table2Row, Table2Summary};
pub use table5::{run_table5, Table5Config, Table5Row, Table5Stat, Table5Summary};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{stage}: {message}")]
    Numerical { stage: &'static str, message: String },
}

impl ExperimentError {
    pub fn numerical(stage: &'static str, err: impl std::fmt::Display) -> Self {
        ExperimentError::Numerical {
            stage,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(IoError::Io(e))
    }
}

/// Self-describing configuration file shared by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub table2: Table2Config,
    pub table5: Table5Config,
    pub slam: SlamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            table2: Table2Config::default(),
            table5: Table5Config::default(),
            slam: SlamConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }
}

/// Runs `f` for every seed on up to `threads` worker threads and returns
/// the results in seed order.
pub fn run_seeds<T: Send>(seeds: &[u64], threads: usize, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, seeds.len().max(1));
    if threads == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let chunk = seeds.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(|&s| f(s)).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}

/// Median of the finite values, NaN when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn wrong_schema_is_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 99}"#).is_err());
    }

    #[test]
    fn seeds_keep_order_with_threads() {
        let seeds: Vec<u64> = (0..10).collect();
        assert_eq!(run_seeds(&seeds, 3, |s| s * 2), seeds.iter().map(|s| s * 2).collect::<Vec<_>>());
    }

    #[test]
    fn median_ignores_nan() {
        assert_eq!(median([3.0, f64::NAN, 1.0, 2.0]), 2.0);
        assert_eq!(median([4.0, 1.0]), 2.5);
        assert!(median([f64::NAN]).is_nan());
    }
}
