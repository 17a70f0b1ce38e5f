//! Special functions: log-gamma, digamma, trigamma, inverse digamma, and
//! the numerically stable softmax / log-sum-exp pair.
//!
//! The gamma-family functions shift small arguments upward with the
//! recurrence relations until the asymptotic (Stirling) series is accurate
//! to machine precision, then evaluate the series.

use crate::error::{Error, Result};

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument the recurrences are applied before the series.
const ASYMPTOTIC_MIN: f64 = 10.0;

// B_{2k} / (2k (2k - 1)), k = 1..8
const LGAMMA_SERIES: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
    -3617.0 / 122_400.0,
];

// B_{2k} / (2k), k = 1..7
const DIGAMMA_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32_760.0,
    1.0 / 12.0,
];

// B_{2k}, k = 1..7
const TRIGAMMA_SERIES: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

fn check_positive(x: f64, name: &str) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} requires a positive finite argument, got {x}")))
    }
}

/// Evaluates `sum(c_k * t^k)` for `k = 0..` with Horner's rule.
fn horner(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// Natural log of the gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_positive(x, "log_gamma")?;
    Ok(log_gamma_unchecked(x))
}

pub(crate) fn log_gamma_unchecked(x: f64) -> f64 {
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    let mut z = x;
    let mut prod = 1.0;
    while z < ASYMPTOTIC_MIN {
        prod *= z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let series = inv * horner(&LGAMMA_SERIES, inv * inv);
    let large = (z - 0.5) * z.ln() - z + HALF_LN_2PI + series;
    if prod == 1.0 {
        large
    } else {
        large - prod.ln()
    }
}

/// The digamma function `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive(x, "digamma")?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut z = x;
    let mut shift = 0.0;
    while z < ASYMPTOTIC_MIN {
        shift += 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let series = inv2 * horner(&DIGAMMA_SERIES, inv2);
    z.ln() - 0.5 / z - series - shift
}

/// The trigamma function `ψ'(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive(x, "trigamma")?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(x: f64) -> f64 {
    let mut z = x;
    let mut shift = 0.0;
    while z < ASYMPTOTIC_MIN {
        shift += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv * inv2 * horner(&TRIGAMMA_SERIES, inv2);
    inv + 0.5 * inv2 + series + shift
}

/// Solves `ψ(x) = y` for `x > 0` by Newton's method.
pub fn inv_digamma(y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Domain(format!("inv_digamma requires a finite argument, got {y}")));
    }
    let mut x = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y + EULER_GAMMA)
    };
    for _ in 0..50 {
        let residual = digamma_unchecked(x) - y;
        if residual.abs() <= 1e-14 * y.abs().max(1.0) {
            return Ok(x);
        }
        let mut next = x - residual / trigamma_unchecked(x);
        if next <= 0.0 {
            next = 0.5 * x;
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::Numeric(format!("inv_digamma({y}) did not converge in 50 iterations")))
}

/// Tempered softmax `exp(z_c / T) / Σ exp(z_k / T)`.
pub fn softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Domain(format!("softmax temperature must be positive, got {temperature}")));
    }
    if z.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("softmax input contains non-finite values".into()));
    }
    Ok(softmax_unchecked(z, temperature))
}

pub(crate) fn softmax_unchecked(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `ln Σ exp(z_c)`, stable for large magnitudes.
pub fn log_sum_exp(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Domain("log_sum_exp of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("log_sum_exp input contains non-finite values".into()));
    }
    Ok(log_sum_exp_unchecked(z))
}

pub(crate) fn log_sum_exp_unchecked(z: &[f64]) -> f64 {
    if z.len() == 1 {
        return z[0];
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy in nats. Zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reference values from a 40-digit evaluation (mpmath).
    const LGAMMA_REF: [(f64, f64); 7] = [
        (1e-6, 13.815_509_980_749_431_669),
        (1e-3, 6.907_178_885_383_853_682_5),
        (0.5, 0.572_364_942_924_700_087_07),
        (3.7, 1.428_072_326_665_387_921_9),
        (123.456, 469.605_547_129_929_468_73),
        (1e4, 82_099.717_496_442_377_272_6),
        (1e6, 12_815_504.569_147_611_659_97),
    ];
    const DIGAMMA_REF: [(f64, f64); 6] = [
        (1e-3, -1000.575_571_931_810_300_47),
        (0.5, -1.963_510_026_021_423_479_4),
        (3.7, 1.167_153_539_361_511_385_9),
        (10.5, 2.303_001_034_297_686_375_3),
        (1e4, 9.210_290_371_142_849_403_6),
        (1e6, 13.815_510_057_964_190_770_8),
    ];

    fn ln_factorial(n: u64) -> f64 {
        ((1..=n).product::<u64>() as f64).ln()
    }

    /// ψ(n) for integer n by the recurrence from ψ(1) = -γ.
    fn digamma_recurrence(n: u64) -> f64 {
        -EULER_GAMMA + (1..n).map(|k| 1.0 / k as f64).sum::<f64>()
    }

    #[test]
    fn log_gamma_small_integers() {
        assert_eq!(log_gamma(1.0).unwrap(), 0.0);
        assert_eq!(log_gamma(2.0).unwrap(), 0.0);
        let v = log_gamma(4.0).unwrap();
        assert!((v - ln_factorial(3)).abs() < 1e-12 * v);
        assert!((v - 1.791_759_469_228_055).abs() < 1e-12);
        for n in 3..20u64 {
            let expect = ln_factorial(n - 1);
            assert!((log_gamma(n as f64).unwrap() - expect).abs() <= 1e-12 * expect, "n={n}");
        }
    }

    #[test]
    fn log_gamma_relative_accuracy() {
        for (x, want) in LGAMMA_REF {
            let got = log_gamma(x).unwrap();
            assert!(((got - want) / want).abs() < 1e-12, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn digamma_known_values() {
        assert!((digamma(1.0).unwrap() + 0.577_215_664_9).abs() < 1e-10);
        assert!((digamma(2.0).unwrap() - 0.422_784_335_1).abs() < 1e-10);
        assert!((digamma(4.0).unwrap() - 1.256_117_668_4).abs() < 1e-10);
        for n in 1..30 {
            assert!((digamma(n as f64).unwrap() - digamma_recurrence(n)).abs() < 1e-12);
        }
        for (x, want) in DIGAMMA_REF {
            let got = digamma(x).unwrap();
            assert!((got - want).abs() < 1e-10, "x={x}: {got} vs {want}");
        }
        // Below ~1e-5 the magnitude exceeds 1e5, so 1e-10 absolute is finer
        // than one ulp; check relative accuracy instead.
        let got = digamma(1e-6).unwrap();
        let want = -1_000_000.577_214_019_968_668;
        assert!(((got - want) / want).abs() < 1e-15);
    }

    #[test]
    fn trigamma_against_reference() {
        let cases = [(0.5, 4.934_802_200_544_679_3), (3.7, 0.310_037_857_670_038_32), (1e4, 1.000_050_001_666_666_7e-4)];
        for (x, want) in cases {
            assert!(((trigamma(x).unwrap() - want) / want).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_errors() {
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(log_gamma(bad), Err(Error::Domain(_))));
            assert!(matches!(digamma(bad), Err(Error::Domain(_))));
        }
        assert!(matches!(inv_digamma(f64::NAN), Err(Error::Domain(_))));
        assert!(softmax(&[1.0, f64::NAN], 1.0).is_err());
        assert!(softmax(&[1.0, 2.0], 0.0).is_err());
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn inv_digamma_examples() {
        let x = inv_digamma(digamma(3.7).unwrap()).unwrap();
        assert!((x - 3.7).abs() < 1e-8);
        assert!((inv_digamma(-0.577_215_664_9).unwrap() - 1.0).abs() < 1e-8);
        let x = inv_digamma(digamma(0.01).unwrap()).unwrap();
        assert!((x - 0.01).abs() < 1e-8);
        let y = -3.2;
        assert!((digamma(inv_digamma(y).unwrap()).unwrap() - y).abs() < 1e-10);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[2f64.ln(), 0.0], 2.0).unwrap();
        let r2 = 2f64.sqrt();
        assert!((p[0] - r2 / (r2 + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (r2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.5858).abs() < 1e-4);
    }

    #[test]
    fn log_sum_exp_examples() {
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        let a = 0.37;
        assert!((log_sum_exp(&[a, a]).unwrap() - (a + 2f64.ln())).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn digamma_recurrence_holds(x in 0.01f64..100.0) {
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            prop_assert!((d - 1.0 / x).abs() < 1e-9);
        }

        #[test]
        fn log_gamma_recurrence_holds(x in 0.01f64..100.0) {
            let d = log_gamma(x + 1.0).unwrap() - log_gamma(x).unwrap();
            prop_assert!((d - x.ln()).abs() < 1e-9);
        }

        #[test]
        fn inv_digamma_round_trip(lx in 0.001f64.ln()..1e4f64.ln()) {
            let x = lx.exp();
            let back = inv_digamma(digamma(x).unwrap()).unwrap();
            prop_assert!((back - x).abs() < 1e-7);
        }

        #[test]
        fn softmax_on_simplex(z in proptest::collection::vec(-1e4f64..1e4, 2..12), t in 0.05f64..10.0) {
            let p = softmax(&z, t).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&z));
        }
    }
}
