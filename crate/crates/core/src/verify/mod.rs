//! Executable checks of the identities that tie the Riccati operator, the
//! closed-loop flow and the cost functional together.

mod identities;
mod limits;
pub mod probes;
mod report;
mod suites;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use identities::*;
pub use limits::*;
pub use report::{digest, loglog_slope, CheckRecord, Slope, VerificationReport};
pub use suites::{resolve_suites, VerifyContext, SUITES};

/// Tolerances for every check, addressable by field name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub value: f64,
    pub fundamental: f64,
    /// A `0.1` perturbation of `Q` must move the fundamental gap above this.
    pub detection: f64,
    pub symmetrization: f64,
    pub equivalent_forms: f64,
    pub optimality: f64,
    pub sandwich: f64,
    pub limit_cauchy: f64,
    pub b_equals_ctc: f64,
    pub range: f64,
    pub monotone_slack: f64,
    pub bc_link: f64,
    pub admissibility_vector: f64,
    pub admissibility_path: f64,
    pub strong_limit: f64,
    pub endpoint: f64,
    pub slope_margin: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            value: 1e-5,
            fundamental: 1e-5,
            detection: 1e-2,
            symmetrization: 1e-6,
            equivalent_forms: 1e-6,
            optimality: 1e-6,
            sandwich: 1e-6,
            limit_cauchy: 1e-8,
            b_equals_ctc: 1e-6,
            range: 1e-8,
            monotone_slack: 1e-10,
            bc_link: 1e-5,
            admissibility_vector: 1e-5,
            admissibility_path: 1e-4,
            strong_limit: 1e-2,
            endpoint: 1e-5,
            slope_margin: 0.1,
        }
    }
}

impl Tolerances {
    /// Overrides one tolerance by name.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let mut map = match serde_json::to_value(&*self) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => unreachable!("tolerances serialize to an object"),
        };
        if !map.contains_key(key) {
            return Err(Error::Config {
                key: key.into(),
                detail: format!("unknown tolerance; known keys: {}", Self::keys().join(", ")),
            });
        }
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Config {
                key: key.into(),
                detail: format!("tolerance must be finite and nonnegative, got {value}"),
            });
        }
        map.insert(key.into(), serde_json::json!(value));
        *self = serde_json::from_value(serde_json::Value::Object(map)).expect("same shape");
        Ok(())
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }
}
