//! Finite-difference discretisation of `L phi = phi''/2 - q phi'` on
//! `[epsilon, x_max]` with absorbing ends.

use std::path::Path;

use super::KolmogorovModel;
use crate::error::{QsdError, Result};
use crate::finite_qsd::{solve_qsd_spectral, SubGenerator};

const MAX_GRID: usize = 1 << 22;
const EIGEN_TOL: f64 = 1e-12;
/// The default right end sits where `e^{-Q}` has dropped by `e^{-40}` from its peak.
const TAIL_DEPTH: f64 = 40.0;

/// Leading eigen-data of the killed diffusion on the interior grid.
#[derive(Debug, Clone)]
pub struct ContinuousEigenResult {
    /// Interior points; the ends `epsilon` and `x_max` carry the Dirichlet condition.
    pub grid: Vec<f64>,
    pub lambda1: f64,
    /// Right eigenfunction, scaled to maximum 1.
    pub eta1: Vec<f64>,
    /// `eta1 e^{-Q}`, normalised to unit trapezoid mass.
    pub alpha_density: Vec<f64>,
    pub lambda2: f64,
    pub epsilon: f64,
    pub x_max: f64,
    pub n_grid: usize,
    cumulative: Vec<f64>,
}

impl ContinuousEigenResult {
    fn step(&self) -> f64 {
        (self.x_max - self.epsilon) / (self.n_grid + 1) as f64
    }

    /// Mass of the piecewise-linear density on `[epsilon, x]`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.epsilon {
            return 0.0;
        }
        if x >= self.x_max {
            return 1.0;
        }
        let h = self.step();
        let s = (x - self.epsilon) / h;
        let k = (s.floor() as usize).min(self.n_grid);
        let frac = s - k as f64;
        let node = |i: usize| if i == 0 || i > self.n_grid { 0.0 } else { self.alpha_density[i - 1] };
        let (d0, d1) = (node(k), node(k + 1));
        self.cumulative[k] + h * (d0 * frac + 0.5 * (d1 - d0) * frac * frac)
    }

    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        self.cdf(b) - self.cdf(a)
    }

    /// Grid point of largest density.
    pub fn peak(&self) -> f64 {
        let (i, _) = self
            .alpha_density
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        self.grid[i]
    }

    /// For the Feller image `X = 2 sqrt(Z)`: points `z = x^2 / 4` and the
    /// density of `Z`, `alpha(x) dx/dz = 2 alpha(x) / x`.
    pub fn feller_z_density(&self) -> (Vec<f64>, Vec<f64>) {
        let z = self.grid.iter().map(|x| x * x / 4.0).collect();
        let d = self.grid.iter().zip(&self.alpha_density).map(|(x, a)| 2.0 * a / x).collect();
        (z, d)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "eta1", "alpha_density"])?;
        for i in 0..self.grid.len() {
            w.write_record([
                self.grid[i].to_string(),
                self.eta1[i].to_string(),
                self.alpha_density[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Smallest `x >= 1` past the minimum of `Q` on `[1, inf)` where `Q` has risen by 40.
pub fn default_x_max(model: &KolmogorovModel) -> Result<f64> {
    let mut x = 1.0f64;
    let mut q_min = model.potential(1.0);
    while x < 1e6 {
        x *= 1.001;
        let q = model.potential(x);
        if q < q_min {
            q_min = q;
        } else if q >= q_min + TAIL_DEPTH {
            return Ok(x);
        }
    }
    Err(QsdError::InvalidInput(
        "the potential does not grow by 40 above its minimum before x = 1e6; give x_max explicitly".into(),
    ))
}

/// Grid, tridiagonal bands, killing rates, and the worst cell `(x, h |q(x)|)`.
type Assembly = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, (f64, f64));

/// Builds the killed chain on `n` interior points.
fn assemble(model: &KolmogorovModel, epsilon: f64, x_max: f64, n: usize) -> Assembly {
    let h = (x_max - epsilon) / (n + 1) as f64;
    let grid: Vec<f64> = (1..=n).map(|i| epsilon + i as f64 * h).collect();
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut killing = vec![0.0; n];
    let mut worst = (grid[0], 0.0);
    let diff = 0.5 / (h * h);
    for (i, &x) in grid.iter().enumerate() {
        let q = model.q(x);
        if h * q.abs() > worst.1 || !q.is_finite() {
            worst = (x, h * q.abs());
        }
        let down = diff + q / (2.0 * h);
        let up = diff - q / (2.0 * h);
        if i == 0 {
            killing[i] += down;
        } else {
            lower[i] = down;
        }
        if i + 1 == n {
            killing[i] += up;
        } else {
            upper[i] = up;
        }
    }
    (grid, lower, upper, killing, worst)
}

/// Pass `x_max = None` for [`default_x_max`]. The grid is refined from
/// `n_grid` interior points (as `n -> 2n + 1`, keeping old nodes) until every
/// off-diagonal rate is positive, i.e. `h |q| < 1` on the grid.
pub fn discretize_generator(
    model: &KolmogorovModel,
    epsilon: f64,
    x_max: Option<f64>,
    n_grid: usize,
) -> Result<(SubGenerator, ContinuousEigenResult)> {
    let x_max = match x_max {
        Some(x) => x,
        None => default_x_max(model)?,
    };
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(QsdError::OutOfRange {
            param: "epsilon",
            value: epsilon,
            range: "(0, 1)".into(),
        });
    }
    if !(x_max > 1.0) || !x_max.is_finite() {
        return Err(QsdError::OutOfRange {
            param: "x_max",
            value: x_max,
            range: "(1, inf)".into(),
        });
    }
    if n_grid < 100 {
        return Err(QsdError::OutOfRange {
            param: "n_grid",
            value: n_grid as f64,
            range: "[100, inf)".into(),
        });
    }
    let mut n = n_grid;
    let (grid, lower, upper, killing) = loop {
        let (grid, lower, upper, killing, worst) = assemble(model, epsilon, x_max, n);
        if worst.1 < 1.0 {
            break (grid, lower, upper, killing);
        }
        if 2 * n + 1 > MAX_GRID {
            return Err(QsdError::GridTooCoarse {
                x: worst.0,
                value: worst.1,
                n_grid: n,
            });
        }
        n = 2 * n + 1;
    };
    let sub = SubGenerator::tridiagonal(&lower, &upper, killing)?;
    let res = solve_qsd_spectral(&sub, EIGEN_TOL)?;
    let h = (x_max - epsilon) / (n + 1) as f64;
    let eta_max = res.pi.iter().cloned().fold(0.0, f64::max);
    let eta1: Vec<f64> = res.pi.iter().map(|p| p / eta_max).collect();
    let log_w: Vec<f64> = eta1.iter().zip(&grid).map(|(e, &x)| e.ln() - model.potential(x)).collect();
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut alpha_density: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
    let mass: f64 = h * alpha_density.iter().sum::<f64>();
    alpha_density.iter_mut().for_each(|d| *d /= mass);
    let mut cumulative = Vec::with_capacity(n + 2);
    cumulative.push(0.0);
    let node = |i: usize| if i == 0 || i > n { 0.0 } else { alpha_density[i - 1] };
    for k in 0..=n {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + 0.5 * h * (node(k) + node(k + 1)));
    }
    let result = ContinuousEigenResult {
        grid,
        lambda1: res.theta,
        eta1,
        alpha_density,
        lambda2: res.chi,
        epsilon,
        x_max,
        n_grid: n,
        cumulative,
    };
    Ok((sub, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn half_laplacian_ground_state() {
        let (_, r) = discretize_generator(&KolmogorovModel::Free, 1e-9, Some(PI), 1000).unwrap();
        let exact = 0.5 * (PI / (PI - 1e-9)).powi(2);
        assert!((r.lambda1 - exact).abs() < 1e-3 * exact);
        assert!((r.lambda2 - 4.0 * exact).abs() < 1e-2 * exact);
        assert!(r.eta1.iter().all(|&e| e > 0.0));
        let h = (PI - 1e-9) / 1001.0;
        let mass: f64 = h * r.alpha_density.iter().sum::<f64>();
        assert!((mass - 1.0).abs() < 1e-8);
        assert!((r.cdf(PI / 2.0) - 0.5).abs() < 1e-6);
        assert!((r.cdf(PI) - 1.0).abs() < 1e-12);
        for (x, d) in r.grid.iter().zip(&r.alpha_density) {
            assert!((d - 0.5 * x.sin()).abs() < 1e-5);
        }
    }

    #[test]
    fn left_vector_matches_assembled_density() {
        let m = KolmogorovModel::Feller { r: 1.0, c: 1.0 };
        let (sub, r) = discretize_generator(&m, 0.01, None, 400).unwrap();
        let qsd = solve_qsd_spectral(&sub, 1e-12).unwrap();
        let h = (r.x_max - r.epsilon) / (r.n_grid + 1) as f64;
        let worst = qsd
            .alpha
            .iter()
            .zip(&r.alpha_density)
            .map(|(a, d)| (a / h - d).abs())
            .fold(0.0, f64::max);
        let top = r.alpha_density.iter().cloned().fold(0.0, f64::max);
        assert!(worst < 1e-2 * top, "worst {worst} vs peak {top}");
        assert!(r.lambda1 > 0.0 && r.lambda2 > r.lambda1);
    }

    #[test]
    fn refines_until_rates_are_positive() {
        let m = KolmogorovModel::Feller { r: 9.0, c: 1.0 };
        let (_, r) = discretize_generator(&m, 0.001, None, 100).unwrap();
        let h = (r.x_max - r.epsilon) / (r.n_grid + 1) as f64;
        assert!(r.grid.iter().all(|&x| h * m.q(x).abs() < 1.0));
        assert!(r.n_grid > 100);
    }

    #[test]
    fn default_right_end_for_feller() {
        let x = default_x_max(&KolmogorovModel::Feller { r: 9.0, c: 1.0 }).unwrap();
        assert!((x - 7.82).abs() < 0.02, "x_max = {x}");
        assert!(default_x_max(&KolmogorovModel::Free).is_err());
    }

    #[test]
    fn grid_doubling_is_stable() {
        let m = KolmogorovModel::Feller { r: 1.0, c: 1.0 };
        let (_, a) = discretize_generator(&m, 0.01, None, 1000).unwrap();
        let (_, b) = discretize_generator(&m, 0.01, None, 2001).unwrap();
        assert!((a.lambda1 - b.lambda1).abs() < 1e-4 * b.lambda1);
    }

    #[test]
    fn feller_density_peaks_at_capacity() {
        let m = KolmogorovModel::Feller { r: 9.0, c: 1.0 };
        let (_, r) = discretize_generator(&m, 0.01, None, 2000).unwrap();
        let (z, d) = r.feller_z_density();
        let k = (0..d.len()).max_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap()).unwrap();
        assert!((z[k] - 9.0).abs() < 0.5, "peak at {}", z[k]);
        assert!(r.lambda2 > r.lambda1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = KolmogorovModel::Free;
        assert!(discretize_generator(&m, 0.0, Some(2.0), 200).is_err());
        assert!(discretize_generator(&m, 0.1, Some(0.5), 200).is_err());
        assert!(discretize_generator(&m, 0.1, Some(2.0), 50).is_err());
    }
}
