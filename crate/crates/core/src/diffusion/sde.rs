//! Euler-Maruyama paths with full truncation and absorption at 0.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{FellerParams, KolmogorovModel};
use crate::error::{QsdError, Result};
use crate::rng::{self, Rng};

/// One-dimensional diffusion absorbed at 0.
#[derive(Debug, Clone)]
pub enum Diffusion1d {
    /// `dZ = sqrt(2 gamma Z) dB + (r Z - c Z^2) dt`.
    Feller(FellerParams),
    /// `dZ = sqrt(Z (1 - Z)) dB - Z dt` on `[0, 1)`.
    WrightFisher,
    /// `dX = dB - q(X) dt`.
    Kolmogorov(KolmogorovModel),
}

impl Diffusion1d {
    pub fn drift(&self, x: f64) -> f64 {
        match self {
            Diffusion1d::Feller(p) => p.r * x - p.c * x * x,
            Diffusion1d::WrightFisher => -x,
            Diffusion1d::Kolmogorov(m) => -m.q(x),
        }
    }

    /// Diffusion coefficient with its argument clamped to the state space.
    pub fn sigma(&self, x: f64) -> f64 {
        match self {
            Diffusion1d::Feller(p) => (2.0 * p.gamma * x.max(0.0)).sqrt(),
            Diffusion1d::WrightFisher => {
                let z = x.clamp(0.0, 1.0);
                (z * (1.0 - z)).sqrt()
            }
            Diffusion1d::Kolmogorov(_) => 1.0,
        }
    }

    /// One Euler step driven by the standard normal `xi`. Wright-Fisher
    /// overshoots above 1 are reflected back into `[0, 1]`.
    pub fn step(&self, x: f64, dt: f64, xi: f64) -> f64 {
        let y = x + self.drift(x) * dt + self.sigma(x) * dt.sqrt() * xi;
        match self {
            Diffusion1d::WrightFisher if y > 1.0 => 2.0 - y,
            _ => y,
        }
    }

    /// Stability advice for a path that reached `x_max`.
    pub fn dt_warning(&self, x_max: f64, dt: f64) -> Option<String> {
        match self {
            Diffusion1d::Feller(p) if p.c * x_max * dt > 0.1 => Some(format!(
                "c * max state * dt = {:.3} exceeds 0.1; reduce dt",
                p.c * x_max * dt
            )),
            _ => None,
        }
    }
}

/// `1e-3 * min(1, 1/r)`.
pub fn default_dt(r: f64) -> f64 {
    1e-3 * (1.0f64).min(1.0 / r)
}

/// Recorded trajectory; it stops at the absorption time with value 0.
#[derive(Debug, Clone)]
pub struct DiffusionPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub absorbed_at: Option<f64>,
    pub warnings: Vec<String>,
}

impl DiffusionPath {
    pub fn final_value(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "x"])?;
        for (t, x) in self.times.iter().zip(&self.values) {
            w.write_record([t.to_string(), x.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_step(dt: f64, t_max: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(QsdError::OutOfRange {
            param: "dt",
            value: dt,
            range: "(0, inf)".into(),
        });
    }
    if !(t_max >= 0.0) || !t_max.is_finite() {
        return Err(QsdError::OutOfRange {
            param: "t_max",
            value: t_max,
            range: "[0, inf)".into(),
        });
    }
    Ok(())
}

/// Step sizes covering `[0, t_max]`: full steps then one shorter remainder.
pub(crate) fn step_sizes(dt: f64, t_max: f64) -> impl Iterator<Item = f64> {
    let full = (t_max / dt + 1e-9).floor() as usize;
    let rest = t_max - full as f64 * dt;
    let tail = (rest > 1e-9 * dt).then_some(rest);
    std::iter::repeat_n(dt, full).chain(tail)
}

/// Advances `x` over `[0, t_max]`; returns the final state and the absorption
/// time if the path reached `<= 0`. `visit(t, x)` sees every step.
pub(crate) fn euler_until(
    model: &Diffusion1d,
    x0: f64,
    dt: f64,
    t_max: f64,
    rng: &mut Rng,
    mut visit: impl FnMut(f64, f64),
) -> (f64, Option<f64>) {
    if x0 <= 0.0 {
        return (0.0, Some(0.0));
    }
    let mut x = x0;
    let mut t = 0.0;
    for h in step_sizes(dt, t_max) {
        let xi: f64 = rng.sample(StandardNormal);
        x = model.step(x, h, xi);
        t += h;
        if x <= 0.0 {
            visit(t, 0.0);
            return (0.0, Some(t));
        }
        visit(t, x);
    }
    (x, None)
}

pub fn simulate_diffusion(model: &Diffusion1d, x0: f64, dt: f64, t_max: f64, seed: u64) -> Result<DiffusionPath> {
    check_step(dt, t_max)?;
    if !(x0 >= 0.0) || !x0.is_finite() {
        return Err(QsdError::OutOfRange {
            param: "x0",
            value: x0,
            range: "[0, inf)".into(),
        });
    }
    let mut times = vec![0.0];
    let mut values = vec![x0.max(0.0)];
    let mut x_max = x0;
    let (_, absorbed_at) = euler_until(model, x0, dt, t_max, &mut rng::stream(seed, 0), |t, x| {
        times.push(t);
        values.push(x);
        x_max = x_max.max(x);
    });
    let warnings = model.dt_warning(x_max, dt).into_iter().collect();
    Ok(DiffusionPath {
        times,
        values,
        absorbed_at,
        warnings,
    })
}

pub fn simulate_feller(params: &FellerParams, z0: f64, dt: f64, t_max: f64, seed: u64) -> Result<DiffusionPath> {
    simulate_diffusion(&Diffusion1d::Feller(*params), z0, dt, t_max, seed)
}

/// Requires `z0` in `(0, 1)`.
pub fn simulate_wright_fisher(z0: f64, dt: f64, t_max: f64, seed: u64) -> Result<DiffusionPath> {
    if !(z0 > 0.0 && z0 < 1.0) {
        return Err(QsdError::OutOfRange {
            param: "z0",
            value: z0,
            range: "(0, 1)".into(),
        });
    }
    simulate_diffusion(&Diffusion1d::WrightFisher, z0, dt, t_max, seed)
}

pub fn simulate_kolmogorov(model: &KolmogorovModel, x0: f64, dt: f64, t_max: f64, seed: u64) -> Result<DiffusionPath> {
    simulate_diffusion(&Diffusion1d::Kolmogorov(model.clone()), x0, dt, t_max, seed)
}
