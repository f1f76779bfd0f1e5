//! Exact spectral treatment of killed continuous-time chains on a finite set.
//!
//! A chain is described by its sub-generator `Q`: nonnegative off-diagonal
//! rates, and a killing (row defect) vector `k = -Q 1 >= 0` that is not
//! identically zero. The quasi-stationary distribution `alpha` is the
//! normalised left Perron vector of `Q`, with `alpha Q = -theta alpha`.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{QsdError, Result};
use crate::linalg::MMatrixLu;
use crate::prob::{total_variation, ProbVector};

/// Row sums above `-ROW_SUM_TOL * max|Q_ii|` are treated as conservative rows.
const ROW_SUM_TOL: f64 = 1e-12;
/// Truncation of the Poisson series in uniformisation.
const POISSON_TAIL: f64 = 1e-17;
const DENSE_EIGEN_MAX_DIM: usize = 500;

#[derive(Debug, Clone)]
enum Storage {
    Dense(DMatrix<f64>),
    /// `lower[i] = Q[i][i-1]`, `upper[i] = Q[i][i+1]`.
    Band { lower: Vec<f64>, upper: Vec<f64> },
}

/// Sub-generator of a killed chain on `{0, .., dim-1}`.
#[derive(Debug, Clone)]
pub struct SubGenerator {
    storage: Storage,
    diag: Vec<f64>,
    killing: Vec<f64>,
}

impl SubGenerator {
    /// Validates a full matrix; killing rates are read off as minus the row sums.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return Err(QsdError::NotSubGenerator(format!(
                "matrix is {}x{}, expected square and nonempty",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = (0..n).map(|i| matrix[(i, i)].abs()).fold(0.0, f64::max);
        let mut killing = vec![0.0; n];
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                let v = matrix[(i, j)];
                if !v.is_finite() {
                    return Err(QsdError::NotSubGenerator(format!("entry ({i},{j}) is {v}")));
                }
                if i != j {
                    if v < 0.0 {
                        return Err(QsdError::NotSubGenerator(format!(
                            "negative off-diagonal rate {v} at ({i},{j})"
                        )));
                    }
                    off += v;
                }
            }
            let defect = -(matrix[(i, i)] + off);
            if defect < -ROW_SUM_TOL * scale.max(1.0) {
                return Err(QsdError::NotSubGenerator(format!("row {i} sums to {}", -defect)));
            }
            killing[i] = if defect.abs() <= ROW_SUM_TOL * scale.max(1.0) { 0.0 } else { defect.max(0.0) };
        }
        let mut offdiag = matrix;
        for i in 0..n {
            offdiag[(i, i)] = 0.0;
        }
        Self::from_parts(offdiag, killing)
    }

    /// Builds `Q` from its off-diagonal rates (diagonal ignored) and killing rates.
    pub fn from_parts(mut offdiag: DMatrix<f64>, killing: Vec<f64>) -> Result<Self> {
        let n = killing.len();
        if offdiag.nrows() != n || offdiag.ncols() != n || n == 0 {
            return Err(QsdError::NotSubGenerator("shape mismatch".into()));
        }
        check_killing(&killing)?;
        let mut banded = true;
        let mut diag = vec![0.0; n];
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = offdiag[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(QsdError::NotSubGenerator(format!("rate {v} at ({i},{j})")));
                }
                if v != 0.0 && i.abs_diff(j) > 1 {
                    banded = false;
                }
                off += v;
            }
            diag[i] = -(off + killing[i]);
            offdiag[(i, i)] = diag[i];
        }
        check_irreducible(n, |i| (0..n).filter(|&j| j != i && offdiag[(i, j)] > 0.0).collect(), |i| {
            (0..n).filter(|&j| j != i && offdiag[(j, i)] > 0.0).collect()
        })?;
        let storage = if banded {
            Storage::Band {
                lower: (0..n).map(|i| if i > 0 { offdiag[(i, i - 1)] } else { 0.0 }).collect(),
                upper: (0..n).map(|i| if i + 1 < n { offdiag[(i, i + 1)] } else { 0.0 }).collect(),
            }
        } else {
            Storage::Dense(offdiag)
        };
        Ok(SubGenerator { storage, diag, killing })
    }

    /// Tridiagonal chain: `lower[i] = Q[i][i-1]`, `upper[i] = Q[i][i+1]`.
    /// Stored in banded form, so large grids are cheap.
    pub fn tridiagonal(lower: &[f64], upper: &[f64], killing: Vec<f64>) -> Result<Self> {
        let n = killing.len();
        if lower.len() != n || upper.len() != n || n == 0 {
            return Err(QsdError::NotSubGenerator("band lengths differ from dimension".into()));
        }
        check_killing(&killing)?;
        let mut lo = lower.to_vec();
        let mut up = upper.to_vec();
        lo[0] = 0.0;
        up[n - 1] = 0.0;
        for (i, &v) in lo.iter().chain(&up).enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(QsdError::NotSubGenerator(format!("band rate {v} at position {}", i % n)));
            }
        }
        let diag: Vec<f64> = (0..n).map(|i| -(lo[i] + up[i] + killing[i])).collect();
        let nb = |i: usize, fwd: bool| -> Vec<usize> {
            let mut out = Vec::with_capacity(2);
            // Edge i -> i+1 carries up[i]; edge i -> i-1 carries lo[i].
            if fwd {
                if i + 1 < n && up[i] > 0.0 {
                    out.push(i + 1);
                }
                if i > 0 && lo[i] > 0.0 {
                    out.push(i - 1);
                }
            } else {
                if i > 0 && up[i - 1] > 0.0 {
                    out.push(i - 1);
                }
                if i + 1 < n && lo[i + 1] > 0.0 {
                    out.push(i + 1);
                }
            }
            out
        };
        check_irreducible(n, |i| nb(i, true), |i| nb(i, false))?;
        Ok(SubGenerator {
            storage: Storage::Band { lower: lo, upper: up },
            diag,
            killing,
        })
    }

    pub fn dim(&self) -> usize {
        self.killing.len()
    }

    /// Dense copy of `Q` (borrowed when already stored densely).
    pub fn matrix(&self) -> Cow<'_, DMatrix<f64>> {
        match &self.storage {
            Storage::Dense(m) => Cow::Borrowed(m),
            Storage::Band { lower, upper } => {
                let n = self.dim();
                let mut m = DMatrix::zeros(n, n);
                for i in 0..n {
                    m[(i, i)] = self.diag[i];
                    if i > 0 {
                        m[(i, i - 1)] = lower[i];
                    }
                    if i + 1 < n {
                        m[(i, i + 1)] = upper[i];
                    }
                }
                Cow::Owned(m)
            }
        }
    }

    /// Entry `Q[i][j]`.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        match &self.storage {
            Storage::Dense(m) => m[(i, j)],
            Storage::Band { lower, upper } => {
                if j + 1 == i {
                    lower[i]
                } else if j == i + 1 {
                    upper[i]
                } else {
                    0.0
                }
            }
        }
    }

    pub fn killing(&self) -> &[f64] {
        &self.killing
    }

    pub fn is_tridiagonal(&self) -> bool {
        matches!(self.storage, Storage::Band { .. })
    }

    /// Largest total exit rate, used as the uniformisation constant.
    pub fn max_rate(&self) -> f64 {
        self.diag.iter().map(|d| -d).fold(0.0, f64::max)
    }

    /// Nonzero off-diagonal rates out of state `i` as `(target, rate)`.
    pub fn jumps_from(&self, i: usize) -> Vec<(usize, f64)> {
        match &self.storage {
            Storage::Dense(m) => (0..self.dim())
                .filter(|&j| j != i && m[(i, j)] > 0.0)
                .map(|j| (j, m[(i, j)]))
                .collect(),
            Storage::Band { lower, upper } => {
                let mut out = Vec::with_capacity(2);
                if i > 0 && lower[i] > 0.0 {
                    out.push((i - 1, lower[i]));
                }
                if i + 1 < self.dim() && upper[i] > 0.0 {
                    out.push((i + 1, upper[i]));
                }
                out
            }
        }
    }

    fn factor(&self) -> MMatrixLu {
        match &self.storage {
            Storage::Band { lower, upper } => MMatrixLu::tridiagonal(lower, upper, &self.killing),
            Storage::Dense(m) => MMatrixLu::dense(m, &self.killing),
        }
    }

    /// `v Q` for a row vector `v`.
    pub fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        match &self.storage {
            Storage::Band { lower, upper } => (0..n)
                .map(|j| {
                    let mut s = v[j] * self.diag[j];
                    if j > 0 {
                        s += v[j - 1] * upper[j - 1];
                    }
                    if j + 1 < n {
                        s += v[j + 1] * lower[j + 1];
                    }
                    s
                })
                .collect(),
            Storage::Dense(m) => (0..n).map(|j| (0..n).map(|i| v[i] * m[(i, j)]).sum()).collect(),
        }
    }

    /// `Q w` for a column vector `w`.
    pub fn right_mul(&self, w: &[f64]) -> Vec<f64> {
        let n = self.dim();
        match &self.storage {
            Storage::Band { lower, upper } => (0..n)
                .map(|i| {
                    let mut s = self.diag[i] * w[i];
                    if i > 0 {
                        s += lower[i] * w[i - 1];
                    }
                    if i + 1 < n {
                        s += upper[i] * w[i + 1];
                    }
                    s
                })
                .collect(),
            Storage::Dense(m) => (0..n).map(|i| (0..n).map(|j| m[(i, j)] * w[j]).sum()).collect(),
        }
    }
}

fn check_killing(killing: &[f64]) -> Result<()> {
    for (i, k) in killing.iter().enumerate() {
        if !k.is_finite() || *k < 0.0 {
            return Err(QsdError::NotSubGenerator(format!("killing rate {k} at state {i}")));
        }
    }
    if killing.iter().all(|&k| k == 0.0) {
        return Err(QsdError::NotSubGenerator("no state has a positive killing rate".into()));
    }
    Ok(())
}

fn check_irreducible(
    n: usize,
    out_of: impl Fn(usize) -> Vec<usize>,
    into: impl Fn(usize) -> Vec<usize>,
) -> Result<()> {
    for reverse in [false, true] {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            let next = if reverse { into(i) } else { out_of(i) };
            for j in next {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        let unreachable: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
        if !unreachable.is_empty() {
            return Err(QsdError::Reducible { unreachable });
        }
    }
    Ok(())
}

/// Reads a generator from CSV.
///
/// Two layouts are accepted. A header `from,to,rate` introduces sparse triplets
/// over states `1..=n`, where `to = 0` denotes killing. Any other header is taken
/// as column labels of a dense matrix whose rows follow, one per state; the
/// diagonal is read but killing is recomputed from the row sums.
pub fn read_generator_csv(path: impl AsRef<Path>) -> Result<SubGenerator> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| QsdError::InvalidInput(format!("not a number: {s:?}")))
    };
    if headers == ["from", "to", "rate"] {
        let mut triplets = Vec::new();
        let mut n = 0usize;
        for rec in rdr.records() {
            let rec = rec?;
            let from = parse(&rec[0])? as usize;
            let to = parse(&rec[1])? as usize;
            let rate = parse(&rec[2])?;
            if from == 0 {
                return Err(QsdError::InvalidInput("states are numbered from 1".into()));
            }
            n = n.max(from).max(to);
            triplets.push((from, to, rate));
        }
        let mut off = DMatrix::zeros(n, n);
        let mut killing = vec![0.0; n];
        for (from, to, rate) in triplets {
            if to == 0 {
                killing[from - 1] += rate;
            } else if to != from {
                off[(from - 1, to - 1)] += rate;
            }
        }
        SubGenerator::from_parts(off, killing)
    } else {
        let n = headers.len();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != n {
                return Err(QsdError::InvalidInput(format!("row of length {} in {n} columns", rec.len())));
            }
            for field in rec.iter() {
                rows.push(parse(field)?);
            }
        }
        if rows.len() != n * n {
            return Err(QsdError::InvalidInput(format!("expected {n} rows, found {}", rows.len() / n.max(1))));
        }
        SubGenerator::new(DMatrix::from_row_slice(n, n, &rows))
    }
}

/// `exp(t M)` for a (sub-)generator `M` by uniformisation with scaling and squaring.
pub(crate) fn expm_generator(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let qbar = (0..n).map(|i| -m[(i, i)]).fold(0.0, f64::max);
    if t == 0.0 || qbar == 0.0 {
        return DMatrix::identity(n, n);
    }
    let lam_total = qbar * t;
    let squarings = if lam_total > 0.5 { (lam_total / 0.5).log2().ceil() as u32 } else { 0 };
    let lam = lam_total / 2f64.powi(squarings as i32);
    let u = DMatrix::identity(n, n) + m / qbar;
    let mut weight = (-lam).exp();
    let mut power = DMatrix::identity(n, n);
    let mut p = &power * weight;
    let mut k = 0usize;
    loop {
        k += 1;
        weight *= lam / k as f64;
        // Remaining Poisson mass is below weight / (1 - lam / (k + 1)).
        if weight < POISSON_TAIL {
            break;
        }
        power = &power * &u;
        p += &power * weight;
    }
    for _ in 0..squarings {
        p = &p * &p;
    }
    p
}

/// Sub-stochastic transition matrix `P(t) = exp(tQ)`.
pub fn transition_matrix(q: &SubGenerator, t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(QsdError::InvalidInput(format!("time {t} must be finite and nonnegative")));
    }
    Ok(expm_generator(&q.matrix(), t))
}

/// Evolves row vectors through `exp(tQ)` in bounded steps, keeping the mass in
/// log form so that arbitrarily long horizons never underflow.
struct Propagator<'a> {
    q: &'a SubGenerator,
    cache: HashMap<u64, DMatrix<f64>>,
    max_step: f64,
}

impl<'a> Propagator<'a> {
    fn new(q: &'a SubGenerator) -> Self {
        // Each step loses at most a factor exp(-50) of mass.
        let max_step = 50.0 / q.max_rate().max(1e-300);
        Propagator {
            q,
            cache: HashMap::new(),
            max_step,
        }
    }

    fn step_matrix(&mut self, tau: f64) -> &DMatrix<f64> {
        let q = self.q;
        self.cache
            .entry(tau.to_bits())
            .or_insert_with(|| expm_generator(&q.matrix(), tau))
    }

    /// Advances the normalised vector `v` by `t`; returns the log of the mass factor.
    fn advance(&mut self, v: &mut [f64], t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let steps = (t / self.max_step).ceil().max(1.0);
        let tau = t / steps;
        let mut log_mass = 0.0;
        for _ in 0..steps as usize {
            let p = self.step_matrix(tau);
            let w = (nalgebra::DVector::from_column_slice(v).transpose() * p).transpose();
            let s: f64 = w.iter().sum();
            log_mass += s.ln();
            for (vi, wi) in v.iter_mut().zip(w.iter()) {
                *vi = wi / s;
            }
        }
        log_mass
    }
}

/// Law at time `t` conditioned on survival together with `ln P(T > t)`.
#[derive(Debug, Clone)]
pub struct Conditioned {
    pub distribution: ProbVector,
    pub log_survival: f64,
}

fn check_init(q: &SubGenerator, init: &ProbVector) -> Result<()> {
    if init.len() != q.dim() {
        return Err(QsdError::InvalidInput(format!(
            "initial law has {} states, generator has {}",
            init.len(),
            q.dim()
        )));
    }
    Ok(())
}

/// Log-space conditioned law; valid for any horizon.
pub fn conditioned_distribution_log(q: &SubGenerator, init: &ProbVector, t: f64) -> Result<Conditioned> {
    check_init(q, init)?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(QsdError::InvalidInput(format!("time {t} must be finite and nonnegative")));
    }
    let mut v = init.as_slice().to_vec();
    let log_survival = Propagator::new(q).advance(&mut v, t);
    Ok(Conditioned {
        distribution: ProbVector::normalized(v)?,
        log_survival,
    })
}

/// Conditioned laws on a nondecreasing time grid, propagated incrementally.
pub fn conditioned_on_grid(q: &SubGenerator, init: &ProbVector, t_grid: &[f64]) -> Result<Vec<Conditioned>> {
    check_init(q, init)?;
    if t_grid.windows(2).any(|w| !(w[1] >= w[0])) || t_grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(QsdError::InvalidInput("time grid must be finite, nonnegative and nondecreasing".into()));
    }
    let mut prop = Propagator::new(q);
    let mut v = init.as_slice().to_vec();
    let (mut now, mut log_survival) = (0.0, 0.0);
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        log_survival += prop.advance(&mut v, t - now);
        now = t;
        out.push(Conditioned {
            distribution: ProbVector::normalized(v.clone())?,
            log_survival,
        });
    }
    Ok(out)
}

/// `P_init(Z_t = . | T > t)`; fails with `Underflow` when the survival
/// probability is not representable.
pub fn conditioned_distribution(q: &SubGenerator, init: &ProbVector, t: f64) -> Result<ProbVector> {
    let c = conditioned_distribution_log(q, init, t)?;
    if c.log_survival < f64::MIN_POSITIVE.ln() {
        return Err(QsdError::Underflow { t });
    }
    Ok(c.distribution)
}

/// Survival probability and its logarithm.
#[derive(Debug, Clone, Copy)]
pub struct Survival {
    pub probability: f64,
    pub log_probability: f64,
}

pub fn survival_probability(q: &SubGenerator, init: &ProbVector, t: f64) -> Result<Survival> {
    let c = conditioned_distribution_log(q, init, t)?;
    Ok(Survival {
        probability: c.log_survival.exp(),
        log_probability: c.log_survival,
    })
}

/// Instantaneous extinction rate `-d/dt ln P(T > t)` on a nondecreasing grid.
pub fn extinction_rate_curve(q: &SubGenerator, init: &ProbVector, t_grid: &[f64]) -> Result<Vec<f64>> {
    check_init(q, init)?;
    if t_grid.windows(2).any(|w| !(w[1] >= w[0])) || t_grid.iter().any(|t| !(*t >= 0.0)) {
        return Err(QsdError::InvalidInput("time grid must be nonnegative and nondecreasing".into()));
    }
    let mut prop = Propagator::new(q);
    let mut v = init.as_slice().to_vec();
    let mut now = 0.0;
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        prop.advance(&mut v, t - now);
        now = t;
        out.push(v.iter().zip(q.killing()).map(|(a, k)| a * k).sum());
    }
    Ok(out)
}

/// Output of the spectral solver.
#[derive(Debug, Clone)]
pub struct QsdResult {
    /// Quasi-stationary distribution (left Perron vector).
    pub alpha: Vec<f64>,
    /// Right Perron vector normalised by `sum alpha_i pi_i = 1`.
    pub pi: Vec<f64>,
    /// Extinction rate of the QSD.
    pub theta: f64,
    /// Minus the real part of the second eigenvalue of `Q` (infinite in dimension one).
    pub chi: f64,
    /// `chi - theta`.
    pub gap: f64,
    /// `||alpha Q + theta alpha||_1`.
    pub residual: f64,
    pub iterations: usize,
}

/// How the leading eigenpair is found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenMethod {
    /// Power iteration on `(-Q)^{-1}`, a nonnegative matrix with the same Perron vectors.
    #[default]
    InverseIteration,
    /// Power iteration on the uniformised matrix `I + Q / qbar`.
    UniformizedPower,
}

/// Spectral QSD solve with the default method; `tol` bounds the residual
/// relative to the largest rate.
pub fn solve_qsd_spectral(q: &SubGenerator, tol: f64) -> Result<QsdResult> {
    solve_qsd_spectral_with(q, tol, EigenMethod::InverseIteration, 100_000)
}

fn normalize_sum(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

fn left_residual(q: &SubGenerator, alpha: &[f64], theta: f64) -> f64 {
    q.left_mul(alpha).iter().zip(alpha).map(|(a, b)| (a + theta * b).abs()).sum()
}

fn right_residual(q: &SubGenerator, pi: &[f64], theta: f64) -> f64 {
    let norm: f64 = pi.iter().map(|x| x.abs()).sum();
    q.right_mul(pi).iter().zip(pi).map(|(a, b)| (a + theta * b).abs()).sum::<f64>() / norm
}

pub fn solve_qsd_spectral_with(
    q: &SubGenerator,
    tol: f64,
    method: EigenMethod,
    max_iter: usize,
) -> Result<QsdResult> {
    if !(tol > 0.0) {
        return Err(QsdError::InvalidInput(format!("tolerance {tol} must be positive")));
    }
    let n = q.dim();
    let scale = q.max_rate().max(f64::MIN_POSITIVE);
    let target = tol * scale;
    let lu = q.factor();
    let theta_of = |a: &[f64]| -> f64 { a.iter().zip(q.killing()).map(|(x, k)| x * k).sum() };

    let mut alpha = vec![1.0 / n as f64; n];
    let mut iterations = 0;
    let mut res = left_residual(q, &alpha, theta_of(&alpha));
    while res > target && iterations < max_iter {
        iterations += 1;
        alpha = match method {
            EigenMethod::InverseIteration => lu.solve_left(&alpha),
            EigenMethod::UniformizedPower => {
                let qa = q.left_mul(&alpha);
                alpha.iter().zip(qa).map(|(a, b)| a + b / scale).collect()
            }
        };
        normalize_sum(&mut alpha);
        res = left_residual(q, &alpha, theta_of(&alpha));
    }
    // Polish: a residual at the tolerance still leaves first-order error in theta.
    if method == EigenMethod::InverseIteration && res <= target {
        for _ in 0..50 {
            let before = theta_of(&alpha);
            alpha = lu.solve_left(&alpha);
            normalize_sum(&mut alpha);
            iterations += 1;
            if (theta_of(&alpha) - before).abs() <= 4.0 * f64::EPSILON * before {
                break;
            }
        }
        res = left_residual(q, &alpha, theta_of(&alpha));
    }
    let mut pi = vec![1.0; n];
    let mut theta = theta_of(&alpha);
    let mut pi_iter = 0;
    while right_residual(q, &pi, theta) > target && pi_iter < max_iter {
        pi_iter += 1;
        pi = match method {
            EigenMethod::InverseIteration => lu.solve(&pi),
            EigenMethod::UniformizedPower => {
                let qp = q.right_mul(&pi);
                pi.iter().zip(qp).map(|(a, b)| a + b / scale).collect()
            }
        };
        let m = pi.iter().cloned().fold(0.0, f64::max);
        pi.iter_mut().for_each(|x| *x /= m);
    }
    if method == EigenMethod::InverseIteration {
        for _ in 0..5 {
            pi = lu.solve(&pi);
            let m = pi.iter().cloned().fold(0.0, f64::max);
            pi.iter_mut().for_each(|x| *x /= m);
        }
    }
    if res > target || right_residual(q, &pi, theta) > target {
        if n <= DENSE_EIGEN_MAX_DIM {
            let (a, p, t) = dense_perron(q)?;
            alpha = a;
            pi = p;
            theta = t;
        } else {
            return Err(QsdError::NoConvergence {
                what: "Perron iteration",
                iterations: iterations.max(pi_iter),
                last_change: res / scale,
            });
        }
    }
    let ap: f64 = alpha.iter().zip(&pi).map(|(a, p)| a * p).sum();
    pi.iter_mut().for_each(|x| *x /= ap);
    let residual = left_residual(q, &alpha, theta);
    let chi = second_rate(q, &lu, &alpha, &pi, theta)?;
    Ok(QsdResult {
        alpha,
        pi,
        theta,
        chi,
        gap: chi - theta,
        residual,
        iterations: iterations.max(pi_iter),
    })
}

/// Dense fallback: eigenvalue from the Schur form, vectors by shifted inverse iteration.
fn dense_perron(q: &SubGenerator) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = q.dim();
    let m = q.matrix().into_owned();
    let eig = m.clone().complex_eigenvalues();
    let lead = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let theta0 = -lead;
    let shift = theta0 * (1.0 - 1e-9) - 1e-300;
    let shifted = m + DMatrix::identity(n, n) * shift;
    let lu = shifted.clone().lu();
    let lu_t = shifted.transpose().lu();
    let mut alpha = vec![1.0 / n as f64; n];
    let mut pi = vec![1.0; n];
    for _ in 0..20 {
        let a = lu_t
            .solve(&nalgebra::DVector::from_vec(alpha.clone()))
            .ok_or(QsdError::NoConvergence { what: "dense eigen fallback", iterations: 0, last_change: f64::NAN })?;
        alpha = a.iter().map(|x| x.abs()).collect();
        normalize_sum(&mut alpha);
        let p = lu
            .solve(&nalgebra::DVector::from_vec(pi.clone()))
            .ok_or(QsdError::NoConvergence { what: "dense eigen fallback", iterations: 0, last_change: f64::NAN })?;
        pi = p.iter().map(|x| x.abs()).collect();
        let m = pi.iter().cloned().fold(0.0, f64::max);
        pi.iter_mut().for_each(|x| *x /= m);
    }
    let theta = alpha.iter().zip(q.killing()).map(|(a, k)| a * k).sum();
    Ok((alpha, pi, theta))
}

/// `chi`: minus the real part of the eigenvalue of `Q` next to `-theta`.
fn second_rate(q: &SubGenerator, lu: &MMatrixLu, alpha: &[f64], pi: &[f64], theta: f64) -> Result<f64> {
    let n = q.dim();
    if n == 1 {
        return Ok(f64::INFINITY);
    }
    if !q.is_tridiagonal() && n <= DENSE_EIGEN_MAX_DIM {
        let mut re: Vec<f64> = q.matrix().into_owned().complex_eigenvalues().iter().map(|z| -z.re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        return Ok(re[1]);
    }
    if let Storage::Band { lower, upper } = &q.storage {
        return Ok(sturm_second(&q.diag, lower, upper));
    }
    // Deflated inverse iteration: (-Q)^{-1} - pi alpha / theta has spectral radius 1 / chi.
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut y: Vec<f64> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    let project = |y: &mut Vec<f64>| {
        let c: f64 = alpha.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        y.iter_mut().zip(pi).for_each(|(yi, p)| *yi -= c * p);
    };
    project(&mut y);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ny = norm(&y);
    y.iter_mut().for_each(|x| *x /= ny);
    let mut mu_prev = f64::NAN;
    let mut mu = f64::NAN;
    for it in 0..200_000 {
        let mut w = lu.solve(&y);
        project(&mut w);
        let nw = norm(&w);
        // Rayleigh-type estimate on the sign-consistent component.
        let dot: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
        mu = if dot != 0.0 { dot } else { nw };
        w.iter_mut().for_each(|x| *x /= nw);
        y = w;
        if it > 20 && (mu - mu_prev).abs() <= 1e-13 * mu.abs() {
            return Ok(1.0 / mu);
        }
        mu_prev = mu;
    }
    if mu.is_finite() && mu > 0.0 {
        return Ok(1.0 / mu);
    }
    let _ = theta;
    Err(QsdError::NoConvergence {
        what: "second eigenvalue",
        iterations: 200_000,
        last_change: (mu - mu_prev).abs(),
    })
}

/// Second smallest eigenvalue of `-Q` for an irreducible tridiagonal `Q`.
/// `Q` is diagonally similar to the symmetric matrix with off-diagonal
/// entries `sqrt(upper_i lower_{i+1})`, whose eigenvalues are located by
/// Sturm sequence counts and bisection.
fn sturm_second(diag: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let n = diag.len();
    let off2: Vec<f64> = (1..n).map(|i| upper[i - 1] * lower[i]).collect();
    let count_below = |x: f64| -> usize {
        let mut count = 0;
        let mut d = 1.0;
        for i in 0..n {
            let a = -diag[i];
            d = if i == 0 { a - x } else { a - x - off2[i - 1] / d };
            if d == 0.0 {
                d = -f64::EPSILON * (a.abs() + x.abs()).max(f64::MIN_POSITIVE);
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    let mut hi = (0..n)
        .map(|i| {
            let b = |j: usize| off2.get(j).map_or(0.0, |v| v.sqrt());
            -diag[i] + if i > 0 { b(i - 1) } else { 0.0 } + b(i)
        })
        .fold(0.0, f64::max);
    let mut lo = 0.0;
    while hi - lo > 4.0 * f64::EPSILON * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_below(mid) >= 2 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `||alpha Q + theta(alpha) alpha||_1` with `theta(alpha) = sum alpha_i k_i`.
pub fn qsd_residual(q: &SubGenerator, candidate: &ProbVector) -> Result<f64> {
    check_init(q, candidate)?;
    let a = candidate.as_slice();
    let theta: f64 = a.iter().zip(q.killing()).map(|(x, k)| x * k).sum();
    Ok(left_residual(q, a, theta))
}

/// Generator of the chain conditioned never to be killed, and its stationary law.
#[derive(Debug, Clone)]
pub struct QProcess {
    pub generator: DMatrix<f64>,
    /// `alpha_j pi_j`.
    pub stationary: Vec<f64>,
}

impl QProcess {
    /// Transition matrix of the conditioned chain at time `t`.
    pub fn transition_matrix(&self, t: f64) -> DMatrix<f64> {
        expm_generator(&self.generator, t)
    }
}

/// `Lhat_ij = (pi_j / pi_i) Q_ij` off the diagonal and `Lhat_ii = theta + Q_ii`.
pub fn q_process(q: &SubGenerator, qsd: &QsdResult) -> Result<QProcess> {
    let n = q.dim();
    if qsd.alpha.len() != n || qsd.pi.len() != n {
        return Err(QsdError::InvalidInput("QSD result does not match the generator".into()));
    }
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut off = 0.0;
        for (j, rate) in q.jumps_from(i) {
            let v = qsd.pi[j] / qsd.pi[i] * rate;
            l[(i, j)] = v;
            off += v;
        }
        // Equal to theta + Q_ii in exact arithmetic; written as minus the row
        // total so that rows are conservative to rounding.
        l[(i, i)] = -off;
    }
    let stationary: Vec<f64> = qsd.alpha.iter().zip(&qsd.pi).map(|(a, p)| a * p).collect();
    let s: f64 = stationary.iter().sum();
    Ok(QProcess {
        generator: l,
        stationary: stationary.into_iter().map(|x| x / s).collect(),
    })
}

/// `sup_j |a_j - b_j|`.
pub fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Total variation distance, re-exported for convenience.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    total_variation(a, b)
}

/// Random walk on `{1..n}` with unit nearest-neighbour rates and uniform killing `d`.
pub fn uniform_killing_walk(n: usize, d: f64) -> Result<SubGenerator> {
    if n == 0 || !(d > 0.0) {
        return Err(QsdError::InvalidInput(format!("need n >= 1 and d > 0, got n = {n}, d = {d}")));
    }
    let lower: Vec<f64> = (0..n).map(|i| if i > 0 { 1.0 } else { 0.0 }).collect();
    let upper: Vec<f64> = (0..n).map(|i| if i + 1 < n { 1.0 } else { 0.0 }).collect();
    SubGenerator::tridiagonal(&lower, &upper, vec![d; n])
}

/// Linear birth-death chain on `{1..n}`: births `lambda i` below `n`, deaths `mu i`,
/// killed by a death from state 1.
pub fn linear_bd_chain(n: usize, lambda: f64, mu: f64) -> Result<SubGenerator> {
    if n == 0 || !(lambda >= 0.0) || !(mu > 0.0) {
        return Err(QsdError::InvalidInput(format!("invalid linear chain n={n} lambda={lambda} mu={mu}")));
    }
    let lower: Vec<f64> = (0..n).map(|i| if i > 0 { mu * (i + 1) as f64 } else { 0.0 }).collect();
    let upper: Vec<f64> = (0..n).map(|i| if i + 1 < n { lambda * (i + 1) as f64 } else { 0.0 }).collect();
    let mut killing = vec![0.0; n];
    killing[0] = mu;
    SubGenerator::tridiagonal(&lower, &upper, killing)
}
