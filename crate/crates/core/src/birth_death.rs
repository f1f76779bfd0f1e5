//! Birth-death chains on `{0, 1, 2, ..}` absorbed at 0.
//!
//! State `i >= 1` jumps to `i + 1` at rate `lambda_i` and to `i - 1` at rate
//! `mu_i`. Products of rates are handled in log space throughout, since the
//! logistic rates overflow doubles after a few hundred states.

use std::path::Path;

use rand::Rng as _;
use rand_distr::Exp1;

use crate::error::{QsdError, Result};
use crate::finite_qsd::{solve_qsd_spectral, QsdResult, SubGenerator};
use crate::prob::{log_add_exp, total_variation};
use crate::rng;

/// Jump rates of a birth-death chain.
#[derive(Debug, Clone, PartialEq)]
pub enum BirthDeathRates {
    /// `lambda_i = lambda i`, `mu_i = mu i`.
    Linear { lambda: f64, mu: f64 },
    /// `lambda_i = lambda i`, `mu_i = mu i + c i (i - 1)`.
    Logistic { lambda: f64, mu: f64, c: f64 },
    /// Explicit rates for states `1..=len`; `birth[0]` is `lambda_1`.
    Table { birth: Vec<f64>, death: Vec<f64> },
}

impl BirthDeathRates {
    pub fn linear(lambda: f64, mu: f64) -> Result<Self> {
        check_param("lambda", lambda, lambda >= 0.0)?;
        check_param("mu", mu, mu > 0.0)?;
        Ok(BirthDeathRates::Linear { lambda, mu })
    }

    pub fn logistic(lambda: f64, mu: f64, c: f64) -> Result<Self> {
        check_param("lambda", lambda, lambda >= 0.0)?;
        check_param("mu", mu, mu > 0.0)?;
        check_param("c", c, c >= 0.0)?;
        Ok(BirthDeathRates::Logistic { lambda, mu, c })
    }

    pub fn table(birth: Vec<f64>, death: Vec<f64>) -> Result<Self> {
        if birth.len() != death.len() || birth.is_empty() {
            return Err(QsdError::InvalidInput("birth and death tables must be nonempty and of equal length".into()));
        }
        for (i, (&b, &d)) in birth.iter().zip(&death).enumerate() {
            if !(b >= 0.0) || !(d > 0.0) || !b.is_finite() || !d.is_finite() {
                return Err(QsdError::InvalidInput(format!("rates at state {}: lambda={b}, mu={d}", i + 1)));
            }
        }
        Ok(BirthDeathRates::Table { birth, death })
    }

    /// Reads a table from CSV with header `i,lambda,mu` and states `1..=n` in order.
    pub fn read_table_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut birth = Vec::new();
        let mut death = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| QsdError::InvalidInput(format!("not a number: {s:?}")))
            };
            if rec.len() != 3 || num(&rec[0])? as usize != k + 1 {
                return Err(QsdError::InvalidInput(format!("row {} must be `{},lambda,mu`", k + 1, k + 1)));
            }
            birth.push(num(&rec[1])?);
            death.push(num(&rec[2])?);
        }
        Self::table(birth, death)
    }

    /// Number of states described, if finite.
    pub fn len_limit(&self) -> Option<usize> {
        match self {
            BirthDeathRates::Table { birth, .. } => Some(birth.len()),
            _ => None,
        }
    }

    /// `lambda_i`; zero at `i = 0`.
    pub fn birth(&self, i: usize) -> Result<f64> {
        if i == 0 {
            return Ok(0.0);
        }
        match self {
            BirthDeathRates::Linear { lambda, .. } | BirthDeathRates::Logistic { lambda, .. } => Ok(lambda * i as f64),
            BirthDeathRates::Table { birth, .. } => birth
                .get(i - 1)
                .copied()
                .ok_or(QsdError::TableTooShort { len: birth.len(), index: i }),
        }
    }

    /// `mu_i`; zero at `i = 0`.
    pub fn death(&self, i: usize) -> Result<f64> {
        if i == 0 {
            return Ok(0.0);
        }
        let x = i as f64;
        match self {
            BirthDeathRates::Linear { mu, .. } => Ok(mu * x),
            BirthDeathRates::Logistic { mu, c, .. } => Ok(mu * x + c * x * (x - 1.0)),
            BirthDeathRates::Table { death, .. } => death
                .get(i - 1)
                .copied()
                .ok_or(QsdError::TableTooShort { len: death.len(), index: i }),
        }
    }

    /// Rates for `1..=n` after checking strict positivity.
    fn positive_rates(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut l = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        for i in 1..=n {
            let (b, d) = (self.birth(i)?, self.death(i)?);
            if !(b > 0.0) || !(d > 0.0) || !b.is_finite() || !d.is_finite() {
                return Err(QsdError::InvalidInput(format!(
                    "rates must be positive: lambda_{i} = {b}, mu_{i} = {d}"
                )));
            }
            l.push(b);
            m.push(d);
        }
        Ok((l, m))
    }
}

fn check_param(name: &'static str, v: f64, ok: bool) -> Result<()> {
    if ok && v.is_finite() {
        Ok(())
    } else {
        Err(QsdError::OutOfRange {
            param: name,
            value: v,
            range: "finite, positive (or nonnegative for lambda and c)".into(),
        })
    }
}

/// Three-valued outcome of a numerical series test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeriesVerdict {
    Convergent,
    Divergent,
    /// No tail test was decisive; carries the partial sum.
    Inconclusive { partial_sum: f64 },
}

/// Three-valued answer to a yes/no property.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Holds,
    Fails,
    Inconclusive { bound: f64 },
}

/// Decides convergence of a positive series from `ln` of its terms.
///
/// Tests are applied on the last quarter of the window, in order: nondecreasing
/// terms, ratio, Raabe `n (1 - rho)` and Bertrand `ln n (n (1 - rho) - 1)`.
/// A verdict is only issued when every sampled index clears the threshold by
/// a margin.
pub fn series_verdict(log_terms: &[f64]) -> SeriesVerdict {
    let n = log_terms.len();
    let partial_sum = log_sum_exp(log_terms).exp();
    if n < 8 {
        return SeriesVerdict::Inconclusive { partial_sum };
    }
    if log_terms.iter().any(|t| t.is_nan()) {
        return SeriesVerdict::Inconclusive { partial_sum };
    }
    let start = n - n / 4 - 1;
    let idx: Vec<usize> = (start..n - 1).collect();
    let delta = |k: usize| log_terms[k + 1] - log_terms[k];
    let slack = |k: usize| 1e-14 * log_terms[k].abs().max(1.0);
    if idx.iter().all(|&k| delta(k) >= -slack(k)) {
        return SeriesVerdict::Divergent;
    }
    let rho_max = idx.iter().map(|&k| delta(k)).fold(f64::NEG_INFINITY, f64::max);
    let rho_min = idx.iter().map(|&k| delta(k)).fold(f64::INFINITY, f64::min);
    if rho_max < (1.0f64 - 1e-3).ln() {
        return SeriesVerdict::Convergent;
    }
    if rho_min > (1.0f64 + 1e-3).ln() {
        return SeriesVerdict::Divergent;
    }
    // Term k of the slice is term number k + 1 of the series.
    let raabe = |k: usize| -((k + 1) as f64) * delta(k).exp_m1();
    let r: Vec<f64> = idx.iter().map(|&k| raabe(k)).collect();
    if r.iter().all(|&x| x > 1.05) {
        return SeriesVerdict::Convergent;
    }
    if r.iter().all(|&x| x < 0.95) {
        return SeriesVerdict::Divergent;
    }
    let b: Vec<f64> = idx
        .iter()
        .zip(&r)
        .map(|(&k, &x)| ((k + 1) as f64).ln() * (x - 1.0))
        .collect();
    if b.iter().all(|&x| x > 1.1) {
        return SeriesVerdict::Convergent;
    }
    if b.iter().all(|&x| x < 0.9) {
        return SeriesVerdict::Divergent;
    }
    SeriesVerdict::Inconclusive { partial_sum }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Result of a divergence-type criterion together with the data it was based on.
#[derive(Debug, Clone)]
pub struct SeriesCheck {
    pub verdict: Verdict,
    pub series: SeriesVerdict,
    /// Partial sum over the examined window (may be `inf`).
    pub partial_sum: f64,
}

fn divergence_means_holds(log_terms: &[f64]) -> SeriesCheck {
    let series = series_verdict(log_terms);
    let partial_sum = log_sum_exp(log_terms).exp();
    let verdict = match series {
        SeriesVerdict::Divergent => Verdict::Holds,
        SeriesVerdict::Convergent => Verdict::Fails,
        SeriesVerdict::Inconclusive { .. } => Verdict::Inconclusive { bound: partial_sum },
    };
    SeriesCheck {
        verdict,
        series,
        partial_sum,
    }
}

/// Non-explosion holds iff `sum r_n = inf`, where
/// `r_n = 1/lambda_n + (mu_n / lambda_n) r_{n-1}` and `r_1 = (1 + mu_1) / lambda_1`.
pub fn nonexplosion_check(rates: &BirthDeathRates, n_max: usize) -> Result<SeriesCheck> {
    if n_max < 2 {
        return Err(QsdError::InvalidInput("n_max must be at least 2".into()));
    }
    let (l, m) = rates.positive_rates(n_max)?;
    let mut log_r = Vec::with_capacity(n_max);
    let mut prev = ((1.0 + m[0]) / l[0]).ln();
    log_r.push(prev);
    for k in 1..n_max {
        let cur = log_add_exp(-l[k].ln(), (m[k] / l[k]).ln() + prev);
        log_r.push(cur);
        prev = cur;
    }
    Ok(divergence_means_holds(&log_r))
}

/// Outcome of the almost-sure extinction test.
#[derive(Debug, Clone)]
pub struct ExtinctionCheck {
    pub check: SeriesCheck,
    /// When extinction is not certain: `P_i(T_0 < inf)` for `i = 1..`.
    pub extinction_probabilities: Option<Vec<f64>>,
}

/// Extinction is almost sure iff `sum_k (mu_1..mu_k)/(lambda_1..lambda_k) = inf`.
pub fn extinction_check(rates: &BirthDeathRates, n_max: usize) -> Result<ExtinctionCheck> {
    if n_max < 2 {
        return Err(QsdError::InvalidInput("n_max must be at least 2".into()));
    }
    let (l, m) = rates.positive_rates(n_max)?;
    let mut log_terms = Vec::with_capacity(n_max);
    let mut acc = 0.0;
    for k in 0..n_max {
        acc += (m[k] / l[k]).ln();
        log_terms.push(acc);
    }
    let check = divergence_means_holds(&log_terms);
    let extinction_probabilities = (check.verdict == Verdict::Fails).then(|| {
        // Geometric tail beyond the window from the last ratio.
        let last = log_terms[n_max - 1];
        let ratio = (log_terms[n_max - 1] - log_terms[n_max - 2]).exp();
        let log_tail = if ratio < 1.0 { last + (ratio / (1.0 - ratio)).ln() } else { f64::NEG_INFINITY };
        // Suffix sums in log space: s_i = sum_{k >= i} term_k.
        let mut suffix = vec![0.0; n_max + 1];
        suffix[n_max] = log_tail;
        for k in (0..n_max).rev() {
            suffix[k] = log_add_exp(log_terms[k], suffix[k + 1]);
        }
        let log_norm = log_add_exp(0.0, suffix[0]);
        (0..n_max).map(|i| (suffix[i] - log_norm).exp()).collect()
    });
    Ok(ExtinctionCheck {
        check,
        extinction_probabilities,
    })
}

/// `ln pi_1 .. ln pi_n` with `pi_1 = 1`, `pi_n = pi_{n-1} lambda_{n-1} / mu_n`.
pub fn pi_coefficients(rates: &BirthDeathRates, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(QsdError::InvalidInput("n must be at least 1".into()));
    }
    let (l, m) = rates.positive_rates(n)?;
    let mut out = Vec::with_capacity(n);
    out.push(0.0);
    for k in 1..n {
        let v = out[k - 1] + l[k - 1].ln() - m[k].ln();
        out.push(v);
    }
    Ok(out)
}

/// `H_1(x) .. H_n(x)` for
/// `lambda_n H_{n+1} = (lambda_n + mu_n - x) H_n - mu_n H_{n-1}`, `H_0 = 0`, `H_1 = 1`.
///
/// Entries are stored as `mantissa[k] * 2^exponent[k]`; the running pair is
/// rescaled every `RENORM_EVERY` steps so nothing overflows.
#[derive(Debug, Clone)]
pub struct HPolynomialTable {
    pub x: f64,
    pub mantissa: Vec<f64>,
    pub exponent: Vec<i32>,
}

const RENORM_EVERY: usize = 50;

impl HPolynomialTable {
    pub fn len(&self) -> usize {
        self.mantissa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mantissa.is_empty()
    }

    /// `H_n(x)` as a plain double (may overflow to infinity).
    pub fn value(&self, n: usize) -> f64 {
        self.mantissa[n - 1] * 2f64.powi(self.exponent[n - 1])
    }

    /// `(sign, ln |H_n(x)|)`.
    pub fn signed_log(&self, n: usize) -> (f64, f64) {
        let m = self.mantissa[n - 1];
        (m.signum(), m.abs().ln() + self.exponent[n - 1] as f64 * std::f64::consts::LN_2)
    }

    /// Index of the first `H_n` that is not clearly positive, using the margin
    /// `1e-14 * max_{k <= n} |H_k|`.
    pub fn first_nonpositive(&self) -> Option<usize> {
        let mut log_max = f64::NEG_INFINITY;
        for n in 1..=self.len() {
            let (s, lg) = self.signed_log(n);
            log_max = log_max.max(lg);
            if s <= 0.0 || lg < log_max + (1e-14f64).ln() {
                return Some(n);
            }
        }
        None
    }
}

pub fn h_polynomials(rates: &BirthDeathRates, x: f64, n_max: usize) -> Result<HPolynomialTable> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(QsdError::InvalidInput(format!("x = {x} must be finite and nonnegative")));
    }
    if n_max == 0 {
        return Err(QsdError::InvalidInput("n_max must be at least 1".into()));
    }
    let (l, m) = rates.positive_rates(n_max)?;
    Ok(h_table(&l, &m, x, n_max))
}

fn h_table(l: &[f64], m: &[f64], x: f64, n_max: usize) -> HPolynomialTable {
    let mut mantissa = Vec::with_capacity(n_max);
    let mut exponent = Vec::with_capacity(n_max);
    let (mut prev, mut cur, mut e) = (0.0f64, 1.0f64, 0i32);
    mantissa.push(cur);
    exponent.push(e);
    for k in 1..n_max {
        // cur = H_k, prev = H_{k-1}; rates of state k sit at index k - 1.
        let next = ((l[k - 1] + m[k - 1] - x) * cur - m[k - 1] * prev) / l[k - 1];
        prev = cur;
        cur = next;
        if k % RENORM_EVERY == 0 || !cur.is_finite() || cur.abs() > 1e250 {
            let big = cur.abs().max(prev.abs());
            if big > 0.0 && big.is_finite() {
                let shift = big.log2().floor() as i32;
                prev *= 2f64.powi(-shift);
                cur *= 2f64.powi(-shift);
                e += shift;
            }
        }
        mantissa.push(cur);
        exponent.push(e);
    }
    HPolynomialTable { x, mantissa, exponent }
}

/// Bracket for `xi_1` from `x <= xi_1  <=>  H_n(x) > 0` for all `n <= n_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Xi1Estimate {
    Bracket { lo: f64, hi: f64, n_max: usize },
    /// The positivity predicate was not monotone in `x` on a probe grid.
    Unresolved { n_max: usize },
}

impl Xi1Estimate {
    pub fn midpoint(&self) -> Option<f64> {
        match self {
            Xi1Estimate::Bracket { lo, hi, .. } => Some(0.5 * (lo + hi)),
            Xi1Estimate::Unresolved { .. } => None,
        }
    }
}

pub fn xi1_estimate(rates: &BirthDeathRates, n_max: usize, tol: f64) -> Result<Xi1Estimate> {
    if n_max < 2 || !(tol > 0.0) {
        return Err(QsdError::InvalidInput(format!("need n_max >= 2 and tol > 0, got {n_max}, {tol}")));
    }
    let (l, m) = rates.positive_rates(n_max)?;
    let positive = |x: f64| h_table(&l, &m, x, n_max).first_nonpositive().is_none();
    let top = l[0] + m[0];
    let probes: Vec<bool> = (0..=16).map(|k| positive(top * k as f64 / 16.0)).collect();
    let switches = probes.windows(2).filter(|w| w[0] != w[1]).count();
    if !probes[0] || probes[16] || switches != 1 {
        return Ok(Xi1Estimate::Unresolved { n_max });
    }
    let k = probes.iter().position(|p| !p).unwrap();
    let (mut lo, mut hi) = (top * (k - 1) as f64 / 16.0, top * k as f64 / 16.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if positive(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Xi1Estimate::Bracket { lo, hi, n_max })
}

/// Extrapolation of `xi_1` from estimates at `n_max / 4`, `n_max / 2` and `n_max`.
#[derive(Debug, Clone)]
pub struct Xi1Limit {
    pub estimates: Vec<(usize, f64)>,
    pub limit: f64,
    /// The extrapolated value is indistinguishable from zero.
    pub vanishes: bool,
}

/// Fraction of the last estimate below which the extrapolated limit is read as zero.
const XI1_ZERO_FRACTION: f64 = 0.05;

pub fn xi1_extrapolate(rates: &BirthDeathRates, n_max: usize, tol: f64) -> Result<Xi1Limit> {
    let ns = [n_max / 4, n_max / 2, n_max];
    if ns[0] < 2 {
        return Err(QsdError::InvalidInput("n_max must be at least 8".into()));
    }
    let mut estimates = Vec::new();
    for &n in &ns {
        match xi1_estimate(rates, n, tol)? {
            Xi1Estimate::Bracket { lo, hi, .. } => estimates.push((n, 0.5 * (lo + hi))),
            Xi1Estimate::Unresolved { .. } => {
                return Err(QsdError::Inconclusive {
                    what: "xi_1",
                    detail: format!("positivity predicate not monotone at n_max = {n}"),
                })
            }
        }
    }
    let (a, b, c) = (estimates[0].1, estimates[1].1, estimates[2].1);
    let d1 = a - b;
    let d2 = b - c;
    let limit = if d2.abs() <= 3.0 * tol {
        c
    } else {
        let r = d2 / d1;
        if r > 0.0 && r < 1.0 {
            c - d2 * r / (1.0 - r)
        } else {
            c
        }
    };
    let vanishes = limit <= XI1_ZERO_FRACTION * c;
    Ok(Xi1Limit {
        estimates,
        limit: limit.max(0.0),
        vanishes,
    })
}

/// Convergence of `sum_n pi_n (1/mu_1 + sum_{i<n} 1/(lambda_i pi_i))`, which is
/// equivalent to convergence of `sum_n S_n`.
pub fn series_s_check(rates: &BirthDeathRates, n_max: usize) -> Result<SeriesVerdict> {
    let log_pi = pi_coefficients(rates, n_max)?;
    let (l, m) = rates.positive_rates(n_max)?;
    let mut log_inner = -m[0].ln();
    let mut log_terms = Vec::with_capacity(n_max);
    for n in 0..n_max {
        log_terms.push(log_pi[n] + log_inner);
        log_inner = log_add_exp(log_inner, -(l[n].ln() + log_pi[n]));
    }
    Ok(series_verdict(&log_terms))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QsdRegime {
    None,
    UniqueYaglom,
    Continuum,
}

#[derive(Debug, Clone)]
pub struct BdClassification {
    pub nonexplosion: Verdict,
    pub extinction_as: Verdict,
    pub qsd_regime: QsdRegime,
    /// Largest admissible QSD decay rate; zero when no QSD exists.
    pub xi1: f64,
    pub series_s: SeriesVerdict,
}

/// Trichotomy: no QSD when extinction is not certain or `xi_1 = 0`; a unique
/// QSD (the Yaglom limit) when the series `S` converges; otherwise the family
/// `alpha(x)`, `0 < x <= xi_1`.
pub fn classify_qsd(rates: &BirthDeathRates, n_max: usize) -> Result<BdClassification> {
    let nonexplosion = nonexplosion_check(rates, n_max)?.verdict;
    let extinction_as = extinction_check(rates, n_max)?.check.verdict;
    let series_s = series_s_check(rates, n_max)?;
    if let Verdict::Inconclusive { bound } = extinction_as {
        return Err(QsdError::Inconclusive {
            what: "almost-sure extinction",
            detail: format!("partial sum {bound:e} after {n_max} terms"),
        });
    }
    let base = |qsd_regime, xi1| BdClassification {
        nonexplosion,
        extinction_as,
        qsd_regime,
        xi1,
        series_s,
    };
    if extinction_as == Verdict::Fails {
        return Ok(base(QsdRegime::None, 0.0));
    }
    let h_n = n_max.clamp(8, 4096);
    let xi = xi1_extrapolate(rates, h_n, 1e-10)?;
    if xi.vanishes {
        return Ok(base(QsdRegime::None, 0.0));
    }
    match series_s {
        SeriesVerdict::Convergent => Ok(base(QsdRegime::UniqueYaglom, xi.limit)),
        SeriesVerdict::Divergent => Ok(base(QsdRegime::Continuum, xi.limit)),
        SeriesVerdict::Inconclusive { partial_sum } => Err(QsdError::Inconclusive {
            what: "series S",
            detail: format!("partial sum {partial_sum:e} after {n_max} terms"),
        }),
    }
}

/// Member `alpha(x)_j = pi_j x H_j(x) / mu_1` of the QSD family, truncated to `1..=n_max`.
#[derive(Debug, Clone)]
pub struct FamilyPoint {
    pub x: f64,
    pub alpha: Vec<f64>,
    /// Mass captured by the truncation.
    pub mass: f64,
}

pub fn qsd_family_point(rates: &BirthDeathRates, x: f64, n_max: usize) -> Result<FamilyPoint> {
    if !(x > 0.0) {
        return Err(QsdError::OutOfRange {
            param: "x",
            value: x,
            range: "(0, xi_1]".into(),
        });
    }
    let table = h_polynomials(rates, x, n_max)?;
    if let Some(n) = table.first_nonpositive() {
        return Err(QsdError::OutOfRange {
            param: "x",
            value: x,
            range: format!("(0, xi_1]; H_{n}(x) is not positive"),
        });
    }
    let log_pi = pi_coefficients(rates, n_max)?;
    let mu1 = rates.death(1)?;
    let alpha: Vec<f64> = (1..=n_max)
        .map(|j| {
            let (_, lh) = table.signed_log(j);
            (log_pi[j - 1] + lh + x.ln() - mu1.ln()).exp()
        })
        .collect();
    let mass = alpha.iter().sum();
    Ok(FamilyPoint { x, alpha, mass })
}

/// Largest absolute residual of
/// `lambda_{j-1} a_{j-1} - (lambda_j + mu_j) a_j + mu_{j+1} a_{j+1} = -mu_1 a_1 a_j`
/// over `j = 1..len-1`.
pub fn qsd_bd_residual(rates: &BirthDeathRates, alpha: &[f64]) -> Result<f64> {
    let n = alpha.len();
    if n < 2 {
        return Err(QsdError::InvalidInput("need at least two states".into()));
    }
    let theta = rates.death(1)? * alpha[0];
    let mut worst = 0.0f64;
    for j in 1..n {
        let prev = if j >= 2 { rates.birth(j - 1)? * alpha[j - 2] } else { 0.0 };
        let r = prev - (rates.birth(j)? + rates.death(j)?) * alpha[j - 1] + rates.death(j + 1)? * alpha[j] + theta * alpha[j - 1];
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

/// Chain censored at `n_trunc`: births from `n_trunc` are suppressed.
pub fn truncated_generator(rates: &BirthDeathRates, n_trunc: usize) -> Result<SubGenerator> {
    if n_trunc == 0 {
        return Err(QsdError::InvalidInput("n_trunc must be at least 1".into()));
    }
    let (l, m) = rates.positive_rates(n_trunc)?;
    let lower: Vec<f64> = (0..n_trunc).map(|i| if i > 0 { m[i] } else { 0.0 }).collect();
    let upper: Vec<f64> = (0..n_trunc).map(|i| if i + 1 < n_trunc { l[i] } else { 0.0 }).collect();
    let mut killing = vec![0.0; n_trunc];
    killing[0] = m[0];
    SubGenerator::tridiagonal(&lower, &upper, killing)
}

#[derive(Debug, Clone)]
pub struct TruncatedQsd {
    pub result: QsdResult,
    pub n_trunc: usize,
    /// TV distance to the solve at `2 n_trunc`, when the rates extend that far.
    pub sensitivity: Option<f64>,
    pub warnings: Vec<String>,
}

pub const TRUNCATION_WARN: f64 = 1e-3;

pub fn truncated_qsd(rates: &BirthDeathRates, n_trunc: usize) -> Result<TruncatedQsd> {
    let result = solve_qsd_spectral(&truncated_generator(rates, n_trunc)?, 1e-12)?;
    let doubled = match rates.len_limit() {
        Some(len) if len < 2 * n_trunc => None,
        _ => Some(solve_qsd_spectral(&truncated_generator(rates, 2 * n_trunc)?, 1e-12)?),
    };
    let sensitivity = doubled.map(|d| total_variation(&result.alpha, &d.alpha));
    let mut warnings = Vec::new();
    if let Some(s) = sensitivity {
        if s > TRUNCATION_WARN {
            warnings.push(format!(
                "truncation at {n_trunc} is not converged: TV to the solve at {} is {s:.3e}",
                2 * n_trunc
            ));
        }
    }
    Ok(TruncatedQsd {
        result,
        n_trunc,
        sensitivity,
        warnings,
    })
}

/// Piecewise-constant trajectory: `states[k]` holds on `[times[k], times[k+1])`.
#[derive(Debug, Clone)]
pub struct BdPath {
    pub times: Vec<f64>,
    pub states: Vec<u64>,
    pub absorbed_at: Option<f64>,
    pub t_max: f64,
}

impl BdPath {
    /// State at time `t <= t_max`.
    pub fn state_at(&self, t: f64) -> u64 {
        let k = self.times.partition_point(|&s| s <= t);
        self.states[k.saturating_sub(1)]
    }
}

pub const BD_STEP_CAP: u64 = 100_000_000;

/// Exact event-driven simulation up to `t_max` or absorption.
pub fn simulate_bd_path(rates: &BirthDeathRates, z0: u64, t_max: f64, seed: u64) -> Result<BdPath> {
    simulate_bd_path_with(rates, z0, t_max, &mut rng::stream(seed, 0), true)
}

/// As [`simulate_bd_path`] with a caller-supplied generator; `record = false`
/// keeps only the initial and final states.
pub fn simulate_bd_path_with(
    rates: &BirthDeathRates,
    z0: u64,
    t_max: f64,
    rng: &mut rng::Rng,
    record: bool,
) -> Result<BdPath> {
    if !(t_max >= 0.0) {
        return Err(QsdError::InvalidInput(format!("t_max = {t_max}")));
    }
    let mut times = vec![0.0];
    let mut states = vec![z0];
    let mut t = 0.0;
    let mut z = z0;
    let mut steps = 0u64;
    let mut absorbed_at = (z0 == 0).then_some(0.0);
    while z > 0 {
        let b = rates.birth(z as usize)?;
        let d = rates.death(z as usize)?;
        let total = b + d;
        let e: f64 = rng.sample(Exp1);
        t += e / total;
        if t > t_max {
            break;
        }
        steps += 1;
        if steps > BD_STEP_CAP {
            return Err(QsdError::StepCap { cap: BD_STEP_CAP });
        }
        z = if rng.random::<f64>() * total < b { z + 1 } else { z - 1 };
        if record || z == 0 {
            times.push(t);
            states.push(z);
        }
        if z == 0 {
            absorbed_at = Some(t);
        }
    }
    if !record && states.last() != Some(&z) {
        times.push(t.min(t_max));
        states.push(z);
    }
    Ok(BdPath {
        times,
        states,
        absorbed_at,
        t_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_pi_matches_direct_product() {
        let r = BirthDeathRates::linear(0.7, 1.3).unwrap();
        let lp = pi_coefficients(&r, 60).unwrap();
        for n in 1..=60usize {
            let direct = (0.7f64 / 1.3).powi(n as i32 - 1) / n as f64;
            assert!((lp[n - 1].exp() - direct).abs() <= 1e-12 * direct);
        }
        assert_eq!(lp[0], 0.0);
    }

    #[test]
    fn logistic_pi_decreases_beyond_capacity() {
        let r = BirthDeathRates::logistic(10.0, 1.0, 1.0).unwrap();
        let lp = pi_coefficients(&r, 400).unwrap();
        assert!(lp.iter().all(|x| x.is_finite()));
        for n in 11..400 {
            assert!(lp[n] < lp[n - 1]);
        }
    }

    #[test]
    fn explosion_verdicts() {
        let lin = BirthDeathRates::linear(2.0, 1.0).unwrap();
        assert_eq!(nonexplosion_check(&lin, 10_000).unwrap().verdict, Verdict::Holds);
        let flat = BirthDeathRates::table(vec![1.0; 2000], vec![1.0; 2000]).unwrap();
        assert_eq!(nonexplosion_check(&flat, 2000).unwrap().verdict, Verdict::Holds);
        let n = 2000;
        let cubic = BirthDeathRates::table((1..=n).map(|i| (i as f64).powi(3)).collect(), vec![1.0; n]).unwrap();
        assert_eq!(nonexplosion_check(&cubic, n).unwrap().verdict, Verdict::Fails);
        assert!(nonexplosion_check(&lin, 1).is_err());
    }

    #[test]
    fn extinction_verdicts() {
        for (l, m) in [(0.5, 1.0), (1.0, 1.0)] {
            let r = BirthDeathRates::linear(l, m).unwrap();
            assert_eq!(extinction_check(&r, 10_000).unwrap().check.verdict, Verdict::Holds);
        }
        let logi = BirthDeathRates::logistic(10.0, 1.0, 1.0).unwrap();
        assert_eq!(extinction_check(&logi, 10_000).unwrap().check.verdict, Verdict::Holds);
        let sup = BirthDeathRates::linear(2.0, 1.0).unwrap();
        let e = extinction_check(&sup, 10_000).unwrap();
        assert_eq!(e.check.verdict, Verdict::Fails);
        let u = e.extinction_probabilities.unwrap();
        for i in 1..=20 {
            assert!((u[i - 1] - 0.5f64.powi(i as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn series_s_verdicts() {
        let lin = BirthDeathRates::linear(0.5, 1.0).unwrap();
        assert_eq!(series_s_check(&lin, 10_000).unwrap(), SeriesVerdict::Divergent);
        let logi = BirthDeathRates::logistic(10.0, 1.0, 1.0).unwrap();
        assert_eq!(series_s_check(&logi, 10_000).unwrap(), SeriesVerdict::Convergent);
        let n = 5000;
        let sq = BirthDeathRates::table(vec![1.0; n], (1..=n).map(|i| (i * i) as f64).collect()).unwrap();
        assert_eq!(series_s_check(&sq, n).unwrap(), SeriesVerdict::Convergent);
    }

    #[test]
    fn h_base_cases() {
        let r = BirthDeathRates::linear(1.0, 2.0).unwrap();
        let t = h_polynomials(&r, 0.7, 5).unwrap();
        assert_eq!(t.value(1), 1.0);
        assert!((t.value(2) - (3.0 - 0.7)).abs() < 1e-15);
        let zero = h_polynomials(&BirthDeathRates::logistic(10.0, 1.0, 1.0).unwrap(), 0.0, 1000).unwrap();
        assert!(zero.first_nonpositive().is_none());
    }

    #[test]
    fn h_survives_overflowing_rates() {
        let r = BirthDeathRates::logistic(10.0, 1.0, 1.0).unwrap();
        let t = h_polynomials(&r, 0.001, 1000).unwrap();
        assert!(t.mantissa.iter().all(|m| m.is_finite()));
        assert!(t.signed_log(1000).1 > 700.0);
    }

    #[test]
    fn xi1_linear_subcritical_and_critical() {
        let sub = BirthDeathRates::linear(0.5, 1.0).unwrap();
        let b = xi1_estimate(&sub, 1000, 1e-6).unwrap();
        assert!((b.midpoint().unwrap() - 0.5).abs() < 1e-3);
        let crit = BirthDeathRates::linear(1.0, 1.0).unwrap();
        let lim = xi1_extrapolate(&crit, 4000, 1e-10).unwrap();
        assert!(lim.vanishes && lim.limit < 1e-3, "{lim:?}");
    }

    #[test]
    fn xi1_bracket_does_not_widen_upward() {
        let r = BirthDeathRates::linear(1.0, 1.0).unwrap();
        let mut prev_hi = f64::INFINITY;
        for n in [100, 200, 400, 800] {
            if let Xi1Estimate::Bracket { hi, .. } = xi1_estimate(&r, n, 1e-8).unwrap() {
                assert!(hi <= prev_hi + 1e-8);
                prev_hi = hi;
            } else {
                panic!("unresolved");
            }
        }
    }

    #[test]
    fn classification_of_linear_and_logistic() {
        let c = classify_qsd(&BirthDeathRates::linear(0.5, 1.0).unwrap(), 10_000).unwrap();
        assert_eq!(c.qsd_regime, QsdRegime::Continuum);
        assert!((c.xi1 - 0.5).abs() < 1e-3);
        let c = classify_qsd(&BirthDeathRates::linear(1.0, 1.0).unwrap(), 10_000).unwrap();
        assert_eq!(c.qsd_regime, QsdRegime::None);
        assert_eq!(c.xi1, 0.0);
        let c = classify_qsd(&BirthDeathRates::linear(2.0, 1.0).unwrap(), 10_000).unwrap();
        assert_eq!(c.qsd_regime, QsdRegime::None);
        let c = classify_qsd(&BirthDeathRates::logistic(10.0, 1.0, 1.0).unwrap(), 10_000).unwrap();
        assert_eq!(c.qsd_regime, QsdRegime::UniqueYaglom);
        assert!(c.xi1 > 0.0);
    }

    #[test]
    fn family_point_at_xi1_is_geometric() {
        let r = BirthDeathRates::linear(0.5, 1.0).unwrap();
        let p = qsd_family_point(&r, 0.5, 200).unwrap();
        for (k, a) in p.alpha.iter().enumerate() {
            let g = 0.5f64.powi(k as i32) * 0.5;
            assert!((a - g).abs() < 1e-12);
        }
        assert!(qsd_bd_residual(&r, &p.alpha).unwrap() < 1e-12);
        assert!(qsd_family_point(&r, 0.6, 200).is_err());
        assert!(qsd_family_point(&r, 0.0, 200).is_err());
    }

    #[test]
    fn family_point_below_xi1_is_another_qsd() {
        let r = BirthDeathRates::linear(0.5, 1.0).unwrap();
        let p = qsd_family_point(&r, 0.25, 2000).unwrap();
        assert!(qsd_bd_residual(&r, &p.alpha).unwrap() <= 1e-8);
        assert!((r.death(1).unwrap() * p.alpha[0] - 0.25).abs() < 1e-15);
        // The tail of this member is polynomial, so the truncation keeps most but not all mass.
        assert!(p.mass <= 1.0 + 1e-9 && p.mass > 0.95, "{}", p.mass);
    }

    #[test]
    fn nearly_pure_death_collapses_to_state_one() {
        let eps = 1e-6;
        let r = BirthDeathRates::linear(eps, 1.0).unwrap();
        let t = truncated_qsd(&r, 50).unwrap();
        let a = &t.result.alpha;
        assert!((a[0] - 1.0).abs() < 1e-5);
        assert!((t.result.theta - 1.0).abs() < 1e-5);
        assert!(qsd_bd_residual(&r, a).unwrap() < 1e-8);
    }

    #[test]
    fn truncated_linear_is_geometric() {
        let r = BirthDeathRates::linear(0.5, 1.0).unwrap();
        let t = truncated_qsd(&r, 400).unwrap();
        let geo: Vec<f64> = (0..400).map(|k| 0.5f64.powi(k + 1)).collect();
        assert!(total_variation(&t.result.alpha, &geo) < 1e-3);
        assert!((t.result.theta - 0.5).abs() < 1e-3);
        assert!(t.sensitivity.unwrap() < 1e-3 && t.warnings.is_empty());
    }

    #[test]
    fn short_truncation_warns() {
        let r = BirthDeathRates::linear(0.9, 1.0).unwrap();
        let t = truncated_qsd(&r, 10).unwrap();
        assert!(!t.warnings.is_empty());
    }

    #[test]
    fn table_too_short_is_an_error() {
        let r = BirthDeathRates::table(vec![1.0; 5], vec![1.0; 5]).unwrap();
        assert!(matches!(pi_coefficients(&r, 6), Err(QsdError::TableTooShort { .. })));
        assert!(truncated_qsd(&r, 5).unwrap().sensitivity.is_none());
    }

    #[test]
    fn path_from_zero_stays_at_zero() {
        let r = BirthDeathRates::linear(1.0, 1.0).unwrap();
        let p = simulate_bd_path(&r, 0, 10.0, 1).unwrap();
        assert_eq!(p.states, vec![0]);
        assert_eq!(p.absorbed_at, Some(0.0));
    }

    #[test]
    fn path_is_reproducible() {
        let r = BirthDeathRates::logistic(10.0, 1.0, 1.0).unwrap();
        let a = simulate_bd_path(&r, 1, 5.0, 42).unwrap();
        let b = simulate_bd_path(&r, 1, 5.0, 42).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.states, b.states);
    }
}
