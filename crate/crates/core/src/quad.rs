//! Adaptive Gauss-Kronrod (7/15) quadrature.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// `(kronrod, |kronrod - gauss|)` on `[a, b]`.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct QuadFailure {
    /// Midpoint of the subinterval with the largest remaining error.
    pub near: f64,
}

/// Integral of `f` over `[a, b]` (either orientation) to relative tolerance `rel`.
pub(crate) fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel: f64) -> Result<f64, QuadFailure> {
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut parts = vec![(lo, hi, gk15(&f, lo, hi))];
    for _ in 0..2000 {
        let total: f64 = parts.iter().map(|p| p.2 .0).sum();
        let err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if !total.is_finite() {
            let worst = parts.iter().find(|p| !p.2 .0.is_finite()).unwrap();
            return Err(QuadFailure { near: 0.5 * (worst.0 + worst.1) });
        }
        if err <= rel * total.abs() || err < 1e-300 {
            return Ok(sign * total);
        }
        let (idx, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.partial_cmp(&y.1 .2 .1).unwrap())
            .unwrap();
        let (l, r, _) = parts.swap_remove(idx);
        let m = 0.5 * (l + r);
        if m <= l || m >= r {
            return Err(QuadFailure { near: m });
        }
        parts.push((l, m, gk15(&f, l, m)));
        parts.push((m, r, gk15(&f, m, r)));
    }
    let worst = parts
        .iter()
        .max_by(|x, y| x.2 .1.partial_cmp(&y.2 .1).unwrap())
        .unwrap();
    Err(QuadFailure { near: 0.5 * (worst.0 + worst.1) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_exponential() {
        let v = integrate(|x| x * x * x, 0.0, 2.0, 1e-12).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        let v = integrate(f64::exp, 1.0, 0.0, 1e-12).unwrap();
        assert!((v + (1f64.exp() - 1.0)).abs() < 1e-12);
        let v = integrate(|x| x.sqrt(), 0.0, 1.0, 1e-10).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-9);
    }
}
