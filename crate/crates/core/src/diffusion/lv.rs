//! Multi-type stochastic Lotka-Volterra system
//! `dZ^i = sqrt(gamma_i Z^i) dB^i + (r_i Z^i - sum_j c_ij Z^i Z^j) dt`.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::sde::step_sizes;
use crate::error::{QsdError, Result};
use crate::fleming_viot::EulerEnsemble;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct LvParams {
    pub gamma: Vec<f64>,
    pub r: Vec<f64>,
    /// `c[i][j]`: pressure felt by type `i` from type `j`.
    pub c: Vec<Vec<f64>>,
}

impl LvParams {
    pub fn new(gamma: Vec<f64>, r: Vec<f64>, c: Vec<Vec<f64>>) -> Result<Self> {
        let k = gamma.len();
        if k == 0 || r.len() != k || c.len() != k || c.iter().any(|row| row.len() != k) {
            return Err(QsdError::InvalidInput(format!(
                "Lotka-Volterra parameters need k = {k} rates and a {k}x{k} competition matrix"
            )));
        }
        let diag = (0..k).map(|i| c[i][i]);
        let all = gamma.iter().chain(&r).copied().chain(diag);
        if let Some(v) = all.clone().find(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(QsdError::OutOfRange {
                param: "lotka-volterra coefficient",
                value: v,
                range: "(0, inf)".into(),
            });
        }
        if let Some(v) = c.iter().flatten().copied().find(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(QsdError::OutOfRange {
                param: "competition coefficient",
                value: v,
                range: "[0, inf)".into(),
            });
        }
        Ok(LvParams { gamma, r, c })
    }

    pub fn k(&self) -> usize {
        self.gamma.len()
    }

    fn drift(&self, z: &[f64], i: usize) -> f64 {
        let mut comp = 0.0;
        for (j, zj) in z.iter().enumerate() {
            comp += self.c[i][j] * z[i] * zj;
        }
        self.r[i] * z[i] - comp
    }

    /// Drift of `X^i = 2 sqrt(Z^i / gamma_i)`:
    /// `r_i x_i / 2 - sum_j c_ij gamma_j x_i x_j^2 / 8 - 1 / (2 x_i)`.
    pub fn x_drift(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|i| {
                let s: f64 = (0..self.k()).map(|j| self.c[i][j] * self.gamma[j] * x[j] * x[j]).sum();
                self.r[i] * x[i] / 2.0 - x[i] * s / 8.0 - 0.5 / x[i]
            })
            .collect()
    }

    fn dt_warning(&self, z_max: &[f64], dt: f64) -> Option<String> {
        let worst = (0..self.k())
            .map(|i| (0..self.k()).map(|j| self.c[i][j] * z_max[j]).sum::<f64>())
            .fold(0.0, f64::max);
        (worst * dt > 0.1).then(|| format!("sum_j c_ij * max Z^j * dt = {:.3} exceeds 0.1; reduce dt", worst * dt))
    }
}

/// Synchronous Euler step of all coordinates; coordinates at 0 stay there.
/// One normal is drawn per coordinate per step whether or not it is alive.
/// Returns true when every coordinate is 0.
fn lv_step(p: &LvParams, z: &mut [f64], h: f64, rng: &mut Rng) -> bool {
    let old = z.to_vec();
    let sq = h.sqrt();
    let mut alive = false;
    for i in 0..z.len() {
        let xi: f64 = rng.sample(StandardNormal);
        if old[i] <= 0.0 {
            continue;
        }
        let y = old[i] + p.drift(&old, i) * h + (p.gamma[i] * old[i]).sqrt() * sq * xi;
        z[i] = if y <= 0.0 { 0.0 } else { y };
        alive |= z[i] > 0.0;
    }
    !alive
}

/// `c_ij gamma_j = c_ji gamma_i` for all pairs, to relative precision 1e-12.
pub fn balance_check(p: &LvParams) -> bool {
    let k = p.k();
    (0..k).all(|i| {
        (0..k).all(|j| {
            let a = p.c[i][j] * p.gamma[j];
            let b = p.c[j][i] * p.gamma[i];
            (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
        })
    })
}

/// Potential of the balanced system in the coordinates `X^i = 2 sqrt(Z^i / gamma_i)`:
/// `V = 1/2 sum_i (ln x_i + c_ii gamma_i x_i^4 / 16 - r_i x_i^2 / 2)
///      + 1/32 sum_{i != j} c_ij gamma_j x_i^2 x_j^2`,
/// so that `dX = dB - grad V(X) dt`.
#[derive(Debug, Clone)]
pub struct LvPotential {
    params: LvParams,
}

impl LvPotential {
    pub fn value(&self, x: &[f64]) -> f64 {
        let p = &self.params;
        let k = p.k();
        let mut v = 0.0;
        for i in 0..k {
            let x2 = x[i] * x[i];
            v += 0.5 * (x[i].ln() + p.c[i][i] * p.gamma[i] * x2 * x2 / 16.0 - p.r[i] * x2 / 2.0);
            for (j, xj) in x.iter().enumerate() {
                if j != i {
                    v += p.c[i][j] * p.gamma[j] * x2 * xj * xj / 32.0;
                }
            }
        }
        v
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.params.x_drift(x).into_iter().map(|d| -d).collect()
    }
}

/// Requires the balance condition.
pub fn lv_potential(p: &LvParams) -> Result<LvPotential> {
    if !balance_check(p) {
        return Err(QsdError::InvalidInput(
            "balance condition c_ij gamma_j = c_ji gamma_i fails; the drift is not a gradient".into(),
        ));
    }
    Ok(LvPotential { params: p.clone() })
}

/// A recorded path. `extinction_times[i]` is the first time `Z^i` reached 0.
/// The exit time of the open orthant is the smallest of these and total
/// extinction the largest, so `T_boundary <= T_i <= T_0` holds by construction.
#[derive(Debug, Clone)]
pub struct LvPath {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub extinction_times: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

impl LvPath {
    pub fn boundary_time(&self) -> Option<f64> {
        self.extinction_times.iter().flatten().copied().reduce(f64::min)
    }

    pub fn extinction_time(&self) -> Option<f64> {
        if self.extinction_times.iter().all(Option::is_some) {
            self.extinction_times.iter().flatten().copied().reduce(f64::max)
        } else {
            None
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let k = self.extinction_times.len();
        let mut header = vec!["t".to_string()];
        header.extend((1..=k).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for (t, z) in self.times.iter().zip(&self.values) {
            let mut row = vec![t.to_string()];
            row.extend(z.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_start(p: &LvParams, z0: &[f64], dt: f64) -> Result<()> {
    if z0.len() != p.k() {
        return Err(QsdError::InvalidInput(format!("z0 has {} entries, expected {}", z0.len(), p.k())));
    }
    if let Some(v) = z0.iter().copied().find(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(QsdError::OutOfRange {
            param: "z0",
            value: v,
            range: "(0, inf)".into(),
        });
    }
    if !(dt > 0.0) {
        return Err(QsdError::OutOfRange {
            param: "dt",
            value: dt,
            range: "(0, inf)".into(),
        });
    }
    Ok(())
}

/// Simulates until `t_max` or total extinction.
pub fn simulate_lv(p: &LvParams, z0: &[f64], dt: f64, t_max: f64, seed: u64) -> Result<LvPath> {
    check_start(p, z0, dt)?;
    let mut rng = rng::stream(seed, 0);
    let k = p.k();
    let mut z = z0.to_vec();
    let mut z_max = z0.to_vec();
    let mut times = vec![0.0];
    let mut values = vec![z.clone()];
    let mut extinction_times = vec![None; k];
    let mut t = 0.0;
    for h in step_sizes(dt, t_max) {
        let all_dead = lv_step(p, &mut z, h, &mut rng);
        t += h;
        for i in 0..k {
            z_max[i] = z_max[i].max(z[i]);
            if z[i] <= 0.0 && extinction_times[i].is_none() {
                extinction_times[i] = Some(t);
            }
        }
        times.push(t);
        values.push(z.clone());
        if all_dead {
            break;
        }
    }
    Ok(LvPath {
        times,
        values,
        extinction_times,
        warnings: p.dt_warning(&z_max, dt).into_iter().collect(),
    })
}

/// How surviving paths are produced for [`mode_probabilities`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModeSampler {
    /// Independent paths, conditioned by discarding extinct ones.
    #[default]
    Independent,
    /// A Fleming-Viot ensemble: a fully extinct particle restarts from the
    /// position of a uniformly chosen surviving one. It keeps the whole sample
    /// alive at times where independent paths would all be extinct.
    FlemingViot,
}

/// Frequencies of survival patterns among surviving paths. A pattern is a bit
/// mask with bit `i` set when type `i + 1` is alive.
#[derive(Debug, Clone)]
pub struct ModeCurves {
    pub times: Vec<f64>,
    /// All nonempty patterns in increasing mask order.
    pub patterns: Vec<u32>,
    /// `frequencies[t][p]`, summing to 1 over `p` whenever `survivors[t] > 0`.
    pub frequencies: Vec<Vec<f64>>,
    pub survivors: Vec<usize>,
    pub warnings: Vec<String>,
}

impl ModeCurves {
    pub fn probability(&self, time_index: usize, mask: u32) -> f64 {
        match self.patterns.iter().position(|&m| m == mask) {
            Some(p) => self.frequencies[time_index][p],
            None => 0.0,
        }
    }

    pub fn coexistence(&self, time_index: usize) -> f64 {
        self.probability(time_index, *self.patterns.last().unwrap())
    }

    /// Only type `i` (0-based) alive.
    pub fn single_type(&self, time_index: usize, i: usize) -> f64 {
        self.probability(time_index, 1 << i)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string(), "survivors".to_string()];
        header.extend(self.patterns.iter().map(|m| format!("mode_{}", pattern_label(*m))));
        w.write_record(&header)?;
        for (ti, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string(), self.survivors[ti].to_string()];
            row.extend(self.frequencies[ti].iter().map(|f| f.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `0b101` -> `"1+3"`.
pub fn pattern_label(mask: u32) -> String {
    (0..32)
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join("+")
}

fn mask_of(z: &[f64]) -> u32 {
    z.iter().enumerate().filter(|(_, v)| **v > 0.0).fold(0, |m, (i, _)| m | (1 << i))
}

const MIN_SURVIVORS: usize = 100;

pub fn mode_probabilities(
    p: &LvParams,
    z0: &[f64],
    dt: f64,
    t_grid: &[f64],
    n_paths: usize,
    seed: u64,
    sampler: ModeSampler,
) -> Result<ModeCurves> {
    check_start(p, z0, dt)?;
    if n_paths < 1000 {
        return Err(QsdError::OutOfRange {
            param: "n_paths",
            value: n_paths as f64,
            range: "[1000, inf)".into(),
        });
    }
    if p.k() > 16 {
        return Err(QsdError::InvalidInput("at most 16 types".into()));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.iter().any(|t| !(*t >= 0.0)) {
        return Err(QsdError::InvalidInput("time grid must be nonnegative and sorted".into()));
    }
    let n_patterns = (1u32 << p.k()) - 1;
    let record_steps: Vec<usize> = t_grid.iter().map(|t| (t / dt).round() as usize).collect();
    let last = record_steps.last().copied().unwrap_or(0);
    let mut counts = vec![vec![0u64; n_patterns as usize]; t_grid.len()];
    let tally = |counts: &mut Vec<Vec<u64>>, step: usize, masks: &mut dyn Iterator<Item = u32>| {
        let masks: Vec<u32> = masks.filter(|m| *m != 0).collect();
        for (ti, _) in record_steps.iter().enumerate().filter(|(_, s)| **s == step) {
            for m in &masks {
                counts[ti][*m as usize - 1] += 1;
            }
        }
    };
    match sampler {
        ModeSampler::Independent => {
            for k in 0..n_paths {
                let mut rng = rng::path_rng(seed, k as u64);
                let mut z = z0.to_vec();
                tally(&mut counts, 0, &mut std::iter::once(mask_of(&z)));
                for step in 1..=last {
                    if lv_step(p, &mut z, dt, &mut rng) {
                        break;
                    }
                    tally(&mut counts, step, &mut std::iter::once(mask_of(&z)));
                }
            }
        }
        ModeSampler::FlemingViot => {
            let mut ens = EulerEnsemble::new(z0.to_vec(), n_paths, seed);
            tally(&mut counts, 0, &mut ens.states.iter().map(|z| mask_of(z)));
            for step in 1..=last {
                ens.advance(dt, |z, h, rng| lv_step(p, z, h, rng))?;
                tally(&mut counts, step, &mut ens.states.iter().map(|z| mask_of(z)));
            }
        }
    }
    let mut warnings = Vec::new();
    let mut survivors = Vec::with_capacity(t_grid.len());
    let frequencies = counts
        .iter()
        .enumerate()
        .map(|(ti, row)| {
            let total: u64 = row.iter().sum();
            survivors.push(total as usize);
            if (total as usize) < MIN_SURVIVORS {
                warnings.push(format!(
                    "only {total} surviving paths at t = {}; frequencies are not meaningful",
                    t_grid[ti]
                ));
            }
            if total == 0 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(ModeCurves {
        times: t_grid.to_vec(),
        patterns: (1..=n_patterns).collect(),
        frequencies,
        survivors,
        warnings,
    })
}
