use crate::error::{QsdError, Result};

/// Probability vector on `{0, .., dim-1}`: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

pub const MASS_TOL: f64 = 1e-12;

impl ProbVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(QsdError::InvalidInput("empty probability vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(QsdError::InvalidInput(format!("invalid probability weight {w}")));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > MASS_TOL {
            return Err(QsdError::InvalidInput(format!("weights sum to {s}, not 1")));
        }
        Ok(ProbVector(weights))
    }

    /// Rescales nonnegative weights to unit mass.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(QsdError::InvalidInput(format!("cannot normalise mass {s}")));
        }
        weights.iter_mut().for_each(|w| *w /= s);
        ProbVector::new(weights)
    }

    pub fn dirac(dim: usize, at: usize) -> Result<Self> {
        if at >= dim {
            return Err(QsdError::InvalidInput(format!("state {at} outside 0..{dim}")));
        }
        let mut v = vec![0.0; dim];
        v[at] = 1.0;
        Ok(ProbVector(v))
    }

    pub fn uniform(dim: usize) -> Self {
        ProbVector(vec![1.0 / dim as f64; dim.max(1)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Total variation distance between two weight vectors, padding the shorter one with zeros.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    let get = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    0.5 * (0..n).map(|i| (get(a, i) - get(b, i)).abs()).sum::<f64>()
}

/// `ln(e^a + e^b)` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
