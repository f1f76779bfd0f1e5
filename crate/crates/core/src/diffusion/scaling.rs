//! Logistic birth-death chains in the large-population scalings.

use crate::birth_death::{simulate_bd_path, BirthDeathRates};
use crate::error::{QsdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingRegime {
    /// Birth `lambda i`, death `mu i + (c/K) i (i-1)`; `Z/K` tends to the logistic ODE.
    Ode,
    /// Birth `(gamma K + lambda) i`, death `(gamma K + mu) i + (c/K) i (i-1)`;
    /// `Z/K` tends to the logistic Feller diffusion.
    Feller,
}

/// Trajectory of `X^K = Z^K / K`, piecewise constant between `times`.
#[derive(Debug, Clone)]
pub struct ScaledPath {
    pub k: u64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub absorbed_at: Option<f64>,
}

impl ScaledPath {
    pub fn value_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&s| s <= t);
        self.values[i.saturating_sub(1)]
    }
}

#[allow(clippy::too_many_arguments)]
pub fn scaled_bd_paths(
    k: u64,
    lambda: f64,
    mu: f64,
    c: f64,
    regime: ScalingRegime,
    gamma: f64,
    z0: u64,
    t_max: f64,
    seed: u64,
) -> Result<ScaledPath> {
    if k == 0 {
        return Err(QsdError::OutOfRange {
            param: "K",
            value: 0.0,
            range: "[1, inf)".into(),
        });
    }
    let kf = k as f64;
    let rates = match regime {
        ScalingRegime::Ode => BirthDeathRates::logistic(lambda, mu, c / kf)?,
        ScalingRegime::Feller => {
            if !(gamma > 0.0) {
                return Err(QsdError::OutOfRange {
                    param: "gamma",
                    value: gamma,
                    range: "(0, inf)".into(),
                });
            }
            BirthDeathRates::logistic(gamma * kf + lambda, gamma * kf + mu, c / kf)?
        }
    };
    let path = simulate_bd_path(&rates, z0, t_max, seed)?;
    Ok(ScaledPath {
        k,
        times: path.times,
        values: path.states.iter().map(|&z| z as f64 / kf).collect(),
        absorbed_at: path.absorbed_at,
    })
}
