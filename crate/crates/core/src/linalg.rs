//! LU factorisations of nonsingular M-matrices `A = -Q`.
//!
//! Elimination follows the Grassmann-Taksar-Heyman idea: pivots are rebuilt
//! from the (nonnegative) off-diagonal magnitudes plus the accumulated row
//! defect, so no subtraction of nearly equal numbers ever happens. This keeps
//! full relative accuracy even when the smallest eigenvalue is many orders of
//! magnitude below the rates.

use nalgebra::DMatrix;

/// Factorised `A = -Q` for a sub-generator `Q` given by its off-diagonal part and
/// its killing (row defect) vector.
#[derive(Debug, Clone)]
pub(crate) enum MMatrixLu {
    Tridiagonal {
        /// Pivots of the upper factor.
        pivot: Vec<f64>,
        /// Magnitude of the super-diagonal, `Q[i][i+1]`.
        upper: Vec<f64>,
        /// Multipliers `Q[i][i-1] / pivot[i-1]` (entry 0 unused).
        mult: Vec<f64>,
    },
    Dense {
        /// Strict lower part holds the (positive) multipliers, upper part the
        /// factor `U` with positive diagonal and nonpositive off-diagonals.
        lu: DMatrix<f64>,
    },
}

impl MMatrixLu {
    pub(crate) fn tridiagonal(lower: &[f64], upper: &[f64], killing: &[f64]) -> Self {
        let n = killing.len();
        let mut pivot = vec![0.0; n];
        let mut mult = vec![0.0; n];
        let mut defect_prev = 0.0;
        for i in 0..n {
            let mut defect = killing[i];
            if i > 0 {
                mult[i] = lower[i] / pivot[i - 1];
                defect += lower[i] * defect_prev / pivot[i - 1];
            }
            let up = if i + 1 < n { upper[i] } else { 0.0 };
            pivot[i] = up + defect;
            defect_prev = defect;
        }
        MMatrixLu::Tridiagonal {
            pivot,
            upper: upper.to_vec(),
            mult,
        }
    }

    /// `offdiag` holds the nonnegative off-diagonal rates of `Q` (its diagonal is ignored).
    pub(crate) fn dense(offdiag: &DMatrix<f64>, killing: &[f64]) -> Self {
        let n = killing.len();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    a[(i, j)] = -offdiag[(i, j)];
                }
            }
        }
        let mut defect = killing.to_vec();
        for k in 0..n {
            let off: f64 = ((k + 1)..n).map(|j| -a[(k, j)]).sum();
            a[(k, k)] = off + defect[k];
            let p = a[(k, k)];
            for i in (k + 1)..n {
                let aik = a[(i, k)];
                if aik == 0.0 {
                    continue;
                }
                let f = -aik / p;
                for j in (k + 1)..n {
                    if j != i {
                        let akj = a[(k, j)];
                        if akj != 0.0 {
                            a[(i, j)] += f * akj;
                        }
                    }
                }
                defect[i] += f * defect[k];
                a[(i, k)] = f;
            }
        }
        MMatrixLu::Dense { lu: a }
    }

    /// Solves `A x = b`.
    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        match self {
            MMatrixLu::Tridiagonal { pivot, upper, mult } => {
                let n = pivot.len();
                let mut y = b.to_vec();
                for i in 1..n {
                    y[i] += mult[i] * y[i - 1];
                }
                let mut x = vec![0.0; n];
                for i in (0..n).rev() {
                    let mut s = y[i];
                    if i + 1 < n {
                        s += upper[i] * x[i + 1];
                    }
                    x[i] = s / pivot[i];
                }
                x
            }
            MMatrixLu::Dense { lu } => {
                let n = lu.nrows();
                let mut y = b.to_vec();
                for i in 0..n {
                    let mut s = y[i];
                    for k in 0..i {
                        s += lu[(i, k)] * y[k];
                    }
                    y[i] = s;
                }
                let mut x = vec![0.0; n];
                for i in (0..n).rev() {
                    let mut s = y[i];
                    for j in (i + 1)..n {
                        s -= lu[(i, j)] * x[j];
                    }
                    x[i] = s / lu[(i, i)];
                }
                x
            }
        }
    }

    /// Solves `x A = b` (that is `A^T x = b`).
    pub(crate) fn solve_left(&self, b: &[f64]) -> Vec<f64> {
        match self {
            MMatrixLu::Tridiagonal { pivot, upper, mult } => {
                let n = pivot.len();
                let mut z = vec![0.0; n];
                for i in 0..n {
                    let mut s = b[i];
                    if i > 0 {
                        s += upper[i - 1] * z[i - 1];
                    }
                    z[i] = s / pivot[i];
                }
                for i in (0..n.saturating_sub(1)).rev() {
                    z[i] += mult[i + 1] * z[i + 1];
                }
                z
            }
            MMatrixLu::Dense { lu } => {
                let n = lu.nrows();
                let mut z = vec![0.0; n];
                for i in 0..n {
                    let mut s = b[i];
                    for k in 0..i {
                        s -= lu[(k, i)] * z[k];
                    }
                    z[i] = s / lu[(i, i)];
                }
                for i in (0..n).rev() {
                    let mut s = z[i];
                    for k in (i + 1)..n {
                        s += lu[(k, i)] * z[k];
                    }
                    z[i] = s;
                }
                z
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (DMatrix<f64>, Vec<f64>) {
        let off = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 0.0, 1.0, 0.0, 3.0, 0.0, 0.5, 0.0]);
        (off, vec![0.1, 0.0, 0.2])
    }

    fn full(off: &DMatrix<f64>, kill: &[f64]) -> DMatrix<f64> {
        let n = kill.len();
        let mut a = -off.clone();
        for i in 0..n {
            a[(i, i)] = (0..n).filter(|&j| j != i).map(|j| off[(i, j)]).sum::<f64>() + kill[i];
        }
        a
    }

    #[test]
    fn dense_and_tridiagonal_agree_with_direct_products() {
        let (off, kill) = sample();
        let a = full(&off, &kill);
        let b = [1.0, -2.0, 0.5];
        let lower = [0.0, 1.0, 0.5];
        let upper = [2.0, 3.0, 0.0];
        for lu in [MMatrixLu::dense(&off, &kill), MMatrixLu::tridiagonal(&lower, &upper, &kill)] {
            let x = lu.solve(&b);
            let ax = &a * nalgebra::DVector::from_vec(x);
            for i in 0..3 {
                assert!((ax[i] - b[i]).abs() < 1e-12);
            }
            let y = lu.solve_left(&b);
            let ya = nalgebra::DVector::from_vec(y).transpose() * &a;
            for i in 0..3 {
                assert!((ya[i] - b[i]).abs() < 1e-12);
            }
        }
    }
}
