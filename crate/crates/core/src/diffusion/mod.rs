//! Continuous-state models: logistic Feller and Wright-Fisher diffusions,
//! Kolmogorov diffusions `dX = dB - q(X) dt`, multi-type Lotka-Volterra
//! systems, a finite-difference eigen-solver for the killed Kolmogorov
//! generator and rescaled birth-death chains.
//!
//! The logistic Feller diffusion `dZ = sqrt(2 gamma Z) dB + (r Z - c Z^2) dt`
//! with `gamma = 1/2` becomes a Kolmogorov diffusion under `X = 2 sqrt(Z)`,
//! with `q(x) = 1/(2x) - r x / 2 + c x^3 / 8`. Other values of `gamma` are
//! reduced to `gamma = 1/2` by measuring mass in units of `2 gamma`, see
//! [`FellerParams::unit_noise`].

use std::fmt;
use std::sync::Arc;

use crate::error::{QsdError, Result};
use crate::quad;

mod fd;
mod lv;
mod scaling;
mod sde;

pub use fd::{default_x_max, discretize_generator, ContinuousEigenResult};
pub use lv::{
    balance_check, lv_potential, mode_probabilities, pattern_label, simulate_lv, LvParams, LvPath, LvPotential, ModeCurves,
    ModeSampler,
};
pub use scaling::{scaled_bd_paths, ScaledPath, ScalingRegime};
pub use sde::{
    default_dt, simulate_diffusion, simulate_feller, simulate_kolmogorov, simulate_wright_fisher, Diffusion1d,
    DiffusionPath,
};

/// Parameters of `dZ = sqrt(2 gamma Z) dB + (r Z - c Z^2) dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FellerParams {
    pub r: f64,
    pub c: f64,
    pub gamma: f64,
}

impl FellerParams {
    pub fn new(r: f64, c: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("r", r), ("c", c), ("gamma", gamma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(QsdError::OutOfRange {
                    param: name,
                    value: v,
                    range: "(0, inf)".into(),
                });
            }
        }
        Ok(FellerParams { r, c, gamma })
    }

    /// Charge capacity `r / c`.
    pub fn capacity(&self) -> f64 {
        self.r / self.c
    }

    /// `Y = Z / (2 gamma)` solves the same equation with `gamma = 1/2` and
    /// competition `2 gamma c`. Returns those parameters and the mass unit `2 gamma`.
    pub fn unit_noise(&self) -> (FellerParams, f64) {
        (
            FellerParams {
                r: self.r,
                c: 2.0 * self.gamma * self.c,
                gamma: 0.5,
            },
            2.0 * self.gamma,
        )
    }
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Kolmogorov diffusion `dX = dB - q(X) dt` on `(0, inf)` with potential
/// `Q(y) = int_1^y 2 q(z) dz`.
#[derive(Clone)]
pub enum KolmogorovModel {
    /// Image of the logistic Feller diffusion with `gamma = 1/2` under `X = 2 sqrt(Z)`.
    Feller { r: f64, c: f64 },
    /// Brownian motion, `q = 0`.
    Free,
    /// User-supplied drift and its potential; `potential(1)` must vanish.
    Custom { q: RealFn, potential: RealFn },
}

impl fmt::Debug for KolmogorovModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KolmogorovModel::Feller { r, c } => write!(f, "Feller {{ r: {r}, c: {c} }}"),
            KolmogorovModel::Free => write!(f, "Free"),
            KolmogorovModel::Custom { .. } => write!(f, "Custom"),
        }
    }
}

impl KolmogorovModel {
    pub fn custom(q: impl Fn(f64) -> f64 + Send + Sync + 'static, potential: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        KolmogorovModel::Custom {
            q: Arc::new(q),
            potential: Arc::new(potential),
        }
    }

    pub fn q(&self, x: f64) -> f64 {
        match self {
            KolmogorovModel::Feller { r, c } => 0.5 / x - r * x / 2.0 + c * x * x * x / 8.0,
            KolmogorovModel::Free => 0.0,
            KolmogorovModel::Custom { q, .. } => q(x),
        }
    }

    /// `Q(y)`.
    pub fn potential(&self, y: f64) -> f64 {
        match self {
            KolmogorovModel::Feller { r, c } => {
                let y2 = y * y;
                y.ln() + r / 2.0 * (1.0 - y2) + c / 16.0 * (y2 * y2 - 1.0)
            }
            KolmogorovModel::Free => 0.0,
            KolmogorovModel::Custom { potential, .. } => potential(y),
        }
    }

    /// Unnormalised density `e^{-Q(x)}` of the reversible measure.
    pub fn density(&self, x: f64) -> f64 {
        (-self.potential(x)).exp()
    }
}

/// Requires `gamma = 1/2`; rescale first with [`FellerParams::unit_noise`].
pub fn feller_to_kolmogorov(params: &FellerParams) -> Result<KolmogorovModel> {
    if params.gamma != 0.5 {
        return Err(QsdError::OutOfRange {
            param: "gamma",
            value: params.gamma,
            range: "{0.5}; rescale with FellerParams::unit_noise".into(),
        });
    }
    Ok(KolmogorovModel::Feller {
        r: params.r,
        c: params.c,
    })
}

/// `Lambda(x) = int_1^x e^{Q}` and `kappa(x) = int_1^x e^{Q(y)} int_1^y e^{-Q(z)} dz dy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFunctions {
    pub lambda: f64,
    pub kappa: f64,
}

const QUAD_REL: f64 = 1e-10;

fn local_exponent(model: &KolmogorovModel, x: f64) -> f64 {
    2.0 * x * model.q(x)
}

pub fn scale_functions(model: &KolmogorovModel, x: f64) -> Result<ScaleFunctions> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(QsdError::OutOfRange {
            param: "x",
            value: x,
            range: "(0, inf)".into(),
        });
    }
    let fail = |e: quad::QuadFailure| QsdError::Quadrature {
        near: e.near,
        exponent: local_exponent(model, e.near),
    };
    let lambda = quad::integrate(|z| model.potential(z).exp(), 1.0, x, QUAD_REL).map_err(fail)?;
    let inner = |y: f64| quad::integrate(|z| (-model.potential(z)).exp(), 1.0, y, QUAD_REL);
    let kappa = quad::integrate(
        |y| match inner(y) {
            Ok(v) => model.potential(y).exp() * v,
            Err(_) => f64::NAN,
        },
        1.0,
        x,
        QUAD_REL,
    )
    .map_err(fail)?;
    Ok(ScaleFunctions { lambda, kappa })
}

/// Outcome of the tail test for "`Lambda(+inf) = +inf` and `kappa(0+) < inf`",
/// which is equivalent to almost-sure absorption at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorptionCondition {
    /// Power-law exponent of `e^{Q}` at infinity.
    pub exponent_at_infinity: f64,
    /// Power-law exponent of `e^{Q}` at `0+`.
    pub exponent_at_zero: f64,
    pub lambda_infinite: bool,
    pub kappa_finite_at_zero: bool,
}

impl AbsorptionCondition {
    pub fn holds(&self) -> bool {
        self.lambda_infinite && self.kappa_finite_at_zero
    }
}

/// Reads the tails of `Q` on log scales. `e^{Q} ~ x^a` at infinity gives
/// `Lambda(inf) = inf` iff `a >= -1`; `e^{Q} ~ x^b` at zero gives
/// `kappa(0+) < inf` iff `b > -1`.
pub fn absorption_condition(model: &KolmogorovModel) -> AbsorptionCondition {
    let slope = |x1: f64, x2: f64| {
        let (q1, q2) = (model.potential(x1), model.potential(x2));
        if q2.is_infinite() || q1.is_infinite() {
            return if (q2 - q1).is_nan() { 0.0 } else { (q2 - q1).signum() * f64::INFINITY };
        }
        (q2 - q1) / (x2.ln() - x1.ln())
    };
    let a = slope(1e6, 1e8);
    let b = slope(1e-8, 1e-10);
    AbsorptionCondition {
        exponent_at_infinity: a,
        exponent_at_zero: b,
        lambda_infinite: a >= -1.0 - 1e-6,
        kappa_finite_at_zero: b > -1.0 + 1e-6,
    }
}
