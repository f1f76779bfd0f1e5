//! Galton-Watson processes and their Yaglom limit.
//!
//! For a subcritical offspring law with generating function `g`, the law of
//! `Z_n` given `Z_n > 0` converges to a limit whose generating function
//! `ghat` solves `ghat(g(s)) = m ghat(s) + 1 - m`.
//!
//! Everything is computed on complements `u = 1 - s`: iterating
//! `G(u) = 1 - g(1 - u)` keeps full relative precision as `g_n(s)` tends to 1.

use rand::Rng as _;
use rand_distr::{Binomial, Distribution};

use crate::error::{QsdError, Result};
use crate::rng;

/// Offspring distribution with finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct Offspring {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl Offspring {
    /// `pmf[k]` is the probability of `k` children.
    pub fn new(pmf: Vec<f64>) -> Result<Self> {
        if pmf.is_empty() || pmf.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(QsdError::InvalidInput("offspring pmf must be nonempty and nonnegative".into()));
        }
        let s: f64 = pmf.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(QsdError::InvalidInput(format!("offspring pmf sums to {s}")));
        }
        let p01 = pmf[0] + pmf.get(1).copied().unwrap_or(0.0);
        if !(p01 > 0.0 && p01 < 1.0) {
            return Err(QsdError::InvalidInput(format!("need 0 < p0 + p1 < 1, got {p01}")));
        }
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Offspring { pmf, cdf })
    }

    /// `p_0 = a`, `p_k = (1 - a)(1 - b) b^{k-1}` for `k >= 1`, truncated where the
    /// remaining mass drops below `1e-17` (which is then added to the last atom).
    pub fn linear_fractional(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) {
            return Err(QsdError::InvalidInput(format!("linear-fractional needs a, b in (0,1), got {a}, {b}")));
        }
        let mut pmf = vec![a];
        // Mass beyond k offspring is (1 - a) b^k.
        let mut tail = 1.0 - a;
        while tail > 1e-17 {
            pmf.push(tail * (1.0 - b));
            tail *= b;
        }
        if let Some(last) = pmf.last_mut() {
            *last += tail;
        }
        Offspring::new(pmf)
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn mean(&self) -> f64 {
        self.pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }

    /// Generating function `g(s)`.
    pub fn pgf(&self, s: f64) -> f64 {
        self.pmf.iter().rev().fold(0.0, |acc, p| acc * s + p)
    }

    /// `1 - g(1 - u)`, accurate for small `u`.
    pub fn complement(&self, u: f64) -> f64 {
        complement_pgf(&self.pmf, 0, u)
    }

    fn sample(&self, rng: &mut rng::Rng) -> u64 {
        let x: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= x).min(self.pmf.len() - 1) as u64
    }
}

/// `1 - f(1 - u)` for the generating function of `weights` (indexed from `offset`).
fn complement_pgf(weights: &[f64], offset: usize, u: f64) -> f64 {
    let l = (-u).ln_1p();
    weights
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let k = (i + offset) as f64;
            if *p == 0.0 || k == 0.0 {
                0.0
            } else {
                -p * (k * l).exp_m1()
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GwClass {
    Subcritical { mean: f64 },
    Critical,
    /// Carries the extinction probability, the smallest fixed point of `g` on `[0, 1]`.
    Supercritical { mean: f64, extinction_probability: f64 },
}

pub fn classify(offspring: &Offspring) -> GwClass {
    let m = offspring.mean();
    if (m - 1.0).abs() <= 1e-12 {
        return GwClass::Critical;
    }
    if m < 1.0 {
        return GwClass::Subcritical { mean: m };
    }
    let mut q = 0.0;
    for _ in 0..1_000_000 {
        let next = offspring.pgf(q);
        if (next - q).abs() <= 1e-15 {
            q = next;
            break;
        }
        q = next;
    }
    GwClass::Supercritical {
        mean: m,
        extinction_probability: q,
    }
}

/// Controls for [`yaglom_iteration`].
#[derive(Debug, Clone)]
pub struct YaglomOptions {
    /// Points of `[0, 1]` where `ghat` is tracked.
    pub s_grid: Vec<f64>,
    pub tol: f64,
    pub n_cap: usize,
    /// Largest population size kept in the distribution vector.
    pub support_cap: usize,
    /// Initial law on `{1, 2, ..}`; `initial[0]` is the mass at 1.
    pub initial: Vec<f64>,
}

impl Default for YaglomOptions {
    fn default() -> Self {
        YaglomOptions {
            s_grid: (0..=100).map(|k| k as f64 / 100.0).collect(),
            tol: 1e-12,
            n_cap: 100_000,
            support_cap: 1000,
            initial: vec![1.0],
        }
    }
}

/// Yaglom limit of a subcritical Galton-Watson process.
#[derive(Debug, Clone)]
pub struct GwYaglom {
    pub s_grid: Vec<f64>,
    /// `ghat` on `s_grid`.
    pub ghat: Vec<f64>,
    /// `pmf[k]` is the limiting probability of `k + 1` individuals.
    pub pmf: Vec<f64>,
    pub generations: usize,
    pub pmf_generations: usize,
    pub converged: bool,
    pub mean: f64,
    offspring: Offspring,
    initial: Vec<f64>,
}

impl GwYaglom {
    fn ghat_from_complement(&self, u0: f64, u_zero: f64) -> f64 {
        let mut u = u0;
        let mut z = u_zero;
        for _ in 0..self.generations {
            u = self.offspring.complement(u);
            z = self.offspring.complement(z);
        }
        1.0 - complement_pgf(&self.initial, 1, u) / complement_pgf(&self.initial, 1, z)
    }

    /// `ghat(s)` at any `s` in `[0, 1]`, using the same number of generations.
    pub fn eval(&self, s: f64) -> f64 {
        self.ghat_from_complement(1.0 - s, 1.0)
    }

    /// `sup_s |ghat(g(s)) - m ghat(s) - (1 - m)|` over the grid.
    pub fn functional_residual(&self) -> f64 {
        self.s_grid
            .iter()
            .map(|&s| {
                let lhs = self.ghat_from_complement(self.offspring.complement(1.0 - s), 1.0);
                (lhs - self.mean * self.eval(s) - (1.0 - self.mean)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `sum_k pmf_k s^k` on the grid.
    pub fn pmf_pgf(&self) -> Vec<f64> {
        self.s_grid
            .iter()
            .map(|&s| self.pmf.iter().rev().fold(0.0, |acc, p| acc * s + p) * s)
            .collect()
    }
}

pub fn yaglom_iteration(offspring: &Offspring, opts: &YaglomOptions) -> Result<GwYaglom> {
    let mean = match classify(offspring) {
        GwClass::Subcritical { mean } => mean,
        other => {
            return Err(QsdError::InvalidInput(format!(
                "the Yaglom iteration needs a subcritical law, got {other:?}"
            )))
        }
    };
    if opts.s_grid.iter().any(|s| !(0.0..=1.0).contains(s)) || opts.s_grid.is_empty() {
        return Err(QsdError::InvalidInput("s_grid must be a nonempty subset of [0, 1]".into()));
    }
    let init_mass: f64 = opts.initial.iter().sum();
    if opts.initial.is_empty() || (init_mass - 1.0).abs() > 1e-12 || opts.initial.iter().any(|p| *p < 0.0) {
        return Err(QsdError::InvalidInput("initial law must be a probability on {1, 2, ..}".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(QsdError::InvalidInput("tol must be positive".into()));
    }

    let mut u: Vec<f64> = opts.s_grid.iter().map(|s| 1.0 - s).collect();
    let mut u_zero = 1.0;
    let form = |u: &[f64], z: f64| -> Vec<f64> {
        let denom = complement_pgf(&opts.initial, 1, z);
        u.iter().map(|&x| 1.0 - complement_pgf(&opts.initial, 1, x) / denom).collect()
    };
    let mut ghat = form(&u, u_zero);
    let mut generations = 0;
    let mut converged = false;
    while generations < opts.n_cap {
        let next_zero = offspring.complement(u_zero);
        if next_zero < 1e-280 {
            break;
        }
        u.iter_mut().for_each(|x| *x = offspring.complement(*x));
        u_zero = next_zero;
        generations += 1;
        let next = form(&u, u_zero);
        let change = next.iter().zip(&ghat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ghat = next;
        if change <= opts.tol {
            converged = true;
            break;
        }
    }

    let mut dist = vec![0.0; opts.initial.len() + 1];
    dist[1..].copy_from_slice(&opts.initial);
    let mut pmf_generations = 0;
    while pmf_generations < opts.n_cap {
        let next = conditioned_step(offspring, &dist, opts.support_cap);
        pmf_generations += 1;
        let change: f64 = (0..next.len().max(dist.len()))
            .map(|k| (next.get(k).unwrap_or(&0.0) - dist.get(k).unwrap_or(&0.0)).abs())
            .sum();
        dist = next;
        if change <= opts.tol {
            break;
        }
    }
    Ok(GwYaglom {
        s_grid: opts.s_grid.clone(),
        ghat,
        pmf: dist[1..].to_vec(),
        generations,
        pmf_generations,
        converged,
        mean,
        offspring: offspring.clone(),
        initial: opts.initial.clone(),
    })
}

/// One generation of the law of `Z_n` (index = population size), conditioned
/// on `Z_{n+1} > 0`, truncated to `0..=support_cap`.
fn conditioned_step(offspring: &Offspring, dist: &[f64], support_cap: usize) -> Vec<f64> {
    let p = offspring.pmf();
    // Horner in the convolution algebra: sum_k dist_k p^{*k}.
    let mut acc: Vec<f64> = vec![*dist.last().unwrap_or(&0.0)];
    for k in (0..dist.len().saturating_sub(1)).rev() {
        let len = (acc.len() + p.len() - 1).min(support_cap + 1);
        let mut next = vec![0.0; len];
        for (i, a) in acc.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (j, q) in p.iter().enumerate() {
                if i + j < len {
                    next[i + j] += a * q;
                }
            }
        }
        next[0] += dist[k];
        acc = next;
    }
    acc[0] = 0.0;
    let peak = acc.iter().cloned().fold(0.0, f64::max);
    while acc.len() > 2 && *acc.last().unwrap() < 1e-18 * peak {
        acc.pop();
    }
    let s: f64 = acc.iter().sum();
    acc.iter_mut().for_each(|x| *x /= s);
    acc
}

/// Law of `Z_n` given `Z_n > 0` after `generations` steps from `initial`
/// (`initial[0]` is the mass at 1); `result[k]` is the mass at `k + 1`.
pub fn conditioned_pmf(offspring: &Offspring, initial: &[f64], generations: usize, support_cap: usize) -> Vec<f64> {
    let mut dist = vec![0.0; initial.len() + 1];
    dist[1..].copy_from_slice(initial);
    for _ in 0..generations {
        dist = conditioned_step(offspring, &dist, support_cap);
    }
    dist[1..].to_vec()
}

pub const GW_POPULATION_CAP: u64 = 10_000_000;

/// Generation sizes `Z_0..=Z_{n_max}`; zeros after extinction.
pub fn simulate_gw(offspring: &Offspring, z0: u64, n_max: usize, seed: u64) -> Result<Vec<u64>> {
    simulate_gw_with(offspring, z0, n_max, &mut rng::stream(seed, 0))
}

pub fn simulate_gw_with(offspring: &Offspring, z0: u64, n_max: usize, rng: &mut rng::Rng) -> Result<Vec<u64>> {
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(z0);
    let mut z = z0;
    for generation in 1..=n_max {
        if z > 0 {
            z = if z < 32 {
                (0..z).map(|_| offspring.sample(rng)).sum()
            } else {
                multinomial_total(offspring, z, rng)
            };
            if z > GW_POPULATION_CAP {
                return Err(QsdError::PopulationOverflow {
                    cap: GW_POPULATION_CAP,
                    generation,
                });
            }
        }
        out.push(z);
    }
    Ok(out)
}

/// Total offspring of `z` parents via sequential binomial counts per family size.
fn multinomial_total(offspring: &Offspring, z: u64, rng: &mut rng::Rng) -> u64 {
    let mut remaining = z;
    let mut mass = 1.0;
    let mut total = 0;
    for (k, &p) in offspring.pmf().iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let prob = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 1.0 };
        let n = Binomial::new(remaining, prob).map(|b| b.sample(rng)).unwrap_or(remaining);
        total += n * k as u64;
        remaining -= n;
        mass -= p;
    }
    total + remaining * (offspring.pmf().len() as u64 - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(Offspring::new(vec![0.5, 0.4]).is_err());
        assert!(Offspring::new(vec![0.0, 1.0]).is_err());
        assert!(Offspring::new(vec![0.0, 0.0, 1.0]).is_err());
        assert!(Offspring::new(vec![0.6, 0.0, 0.4]).is_ok());
    }

    #[test]
    fn classification() {
        assert_eq!(classify(&Offspring::new(vec![0.5, 0.0, 0.5]).unwrap()), GwClass::Critical);
        match classify(&Offspring::new(vec![0.2, 0.0, 0.8]).unwrap()) {
            GwClass::Supercritical { extinction_probability, .. } => {
                assert!((extinction_probability - 0.25).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            classify(&Offspring::new(vec![0.6, 0.0, 0.4]).unwrap()),
            GwClass::Subcritical { .. }
        ));
    }

    #[test]
    fn complement_is_accurate_near_one() {
        let o = Offspring::new(vec![0.6, 0.0, 0.4]).unwrap();
        let u = 1e-12;
        // 1 - g(1-u) = 0.4 (2u - u^2).
        assert!((o.complement(u) - 0.4 * (2.0 * u - u * u)).abs() < 1e-27);
    }

    #[test]
    fn yaglom_of_binary_splitting() {
        let o = Offspring::new(vec![0.6, 0.0, 0.4]).unwrap();
        let y = yaglom_iteration(&o, &YaglomOptions::default()).unwrap();
        assert!(y.converged);
        assert!(y.functional_residual() < 1e-6);
        let from_pmf = y.pmf_pgf();
        for (a, b) in from_pmf.iter().zip(&y.ghat) {
            assert!((a - b).abs() < 5e-4);
        }
        assert!((y.pmf.iter().sum::<f64>() - 1.0).abs() < 5e-4);
    }

    #[test]
    fn rejects_non_subcritical() {
        let o = Offspring::new(vec![0.5, 0.0, 0.5]).unwrap();
        assert!(yaglom_iteration(&o, &YaglomOptions::default()).is_err());
    }

    #[test]
    fn simulation_is_reproducible_and_absorbing() {
        let o = Offspring::new(vec![0.6, 0.0, 0.4]).unwrap();
        let a = simulate_gw(&o, 5, 50, 9).unwrap();
        assert_eq!(a, simulate_gw(&o, 5, 50, 9).unwrap());
        if let Some(k) = a.iter().position(|z| *z == 0) {
            assert!(a[k..].iter().all(|z| *z == 0));
        }
    }

    #[test]
    fn supercritical_growth_hits_the_cap() {
        let o = Offspring::new(vec![0.01, 0.0, 0.0, 0.99]).unwrap();
        assert!(matches!(simulate_gw(&o, 1, 40, 1), Err(QsdError::PopulationOverflow { .. })));
    }
}
