//! Diagonal Gaussians over log-concentrations `z = ln α`, used by the
//! Gaussian-headed hierarchical student.

use serde::{Deserialize, Serialize};

use crate::decomposition::Decomposition;
use crate::dirichlet::{clamp_alpha, dir_expected_entropy, DirichletParams};
use crate::error::{contract, Error, Result};
use crate::rng::{seeded, standard_normal};
use crate::specfun::entropy;

pub const SIGMA_MIN: f64 = 1e-6;
pub const SIGMA_MAX: f64 = 1e3;

/// Default number of Dirichlet draws for Monte-Carlo uncertainties.
pub const DEFAULT_MC_SAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiagGaussian {
    /// Standard deviations are clamped into `[SIGMA_MIN, SIGMA_MAX]`.
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return contract(format!("mu has {} entries, sigma {}", mu.len(), sigma.len()));
        }
        if mu.is_empty() {
            return contract("empty gaussian");
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) || sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::Domain("gaussian parameters must be finite with sigma >= 0".into()));
        }
        let sigma = sigma.into_iter().map(|s| s.clamp(SIGMA_MIN, SIGMA_MAX)).collect();
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub gaussian: DiagGaussian,
    /// Fewer than two members, or some dimension had no spread and was
    /// clamped to `SIGMA_MIN`.
    pub degenerate: bool,
}

/// Closed-form maximum-likelihood Gaussian over `ln α` of the members:
/// sample mean and biased (divide-by-M) variance.
pub fn fit_proxy_gaussian(alphas: &[DirichletParams]) -> Result<GaussianFit> {
    let logs: Vec<Vec<f64>> = alphas.iter().map(|a| a.alpha().iter().map(|v| v.ln()).collect()).collect();
    fit_proxy_gaussian_log(&logs)
}

/// [`fit_proxy_gaussian`] from log-concentrations directly.
pub fn fit_proxy_gaussian_log(log_alphas: &[Vec<f64>]) -> Result<GaussianFit> {
    let Some(first) = log_alphas.first() else {
        return contract("proxy gaussian needs at least one member");
    };
    let k = first.len();
    if log_alphas.iter().any(|a| a.len() != k) {
        return contract("ensemble members have differing class counts");
    }
    let m = log_alphas.len() as f64;
    // offset from the first member so identical members give their own
    // value back bit for bit
    let mut mu = vec![0.0; k];
    for a in log_alphas {
        for ((acc, v), b) in mu.iter_mut().zip(a).zip(first) {
            *acc += v - b;
        }
    }
    mu.iter_mut().zip(first).for_each(|(v, b)| *v = b + *v / m);
    let mut var = vec![0.0; k];
    for a in log_alphas {
        for c in 0..k {
            let d = a[c] - mu[c];
            var[c] += d * d;
        }
    }
    let sigma: Vec<f64> = var.iter().map(|v| (v / m).sqrt()).collect();
    let degenerate = log_alphas.len() < 2 || sigma.iter().any(|&s| s < SIGMA_MIN);
    Ok(GaussianFit { gaussian: DiagGaussian::new(mu, sigma)?, degenerate })
}

/// `KL(p ‖ q)` between diagonal Gaussians; `p` is the proxy target, `q` the
/// student prediction.
pub fn kl_diag_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.k() != q.k() {
        return contract(format!("dimension mismatch: K={} vs K={}", p.k(), q.k()));
    }
    Ok((0..p.k())
        .map(|c| {
            let (sp, sq) = (p.sigma[c], q.sigma[c]);
            let dm = q.mu[c] - p.mu[c];
            (sq / sp).ln() + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5
        })
        .sum())
}

/// Draws `n` Dirichlets `α = exp(z)`, `z ~ N(mu, diag(sigma²))`, clamped
/// to the valid concentration range.
pub fn sample_dirichlets(g: &DiagGaussian, n: usize, seed: u64) -> Result<Vec<DirichletParams>> {
    if n == 0 {
        return contract("sample_dirichlets needs n >= 1");
    }
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let alpha = g
                .mu
                .iter()
                .zip(&g.sigma)
                .map(|(&m, &s)| clamp_alpha((m + s * standard_normal(&mut rng)).exp()))
                .collect();
            DirichletParams::clamped(alpha)
        })
        .collect()
}

/// Monte-Carlo decomposition for a Gaussian head: the predictive is the mean
/// of the sampled Dirichlet means, data is the mean closed-form expected
/// entropy, knowledge is the difference.
pub fn gauss_uncertainties(g: &DiagGaussian, n_samples: usize, seed: u64) -> Result<Decomposition> {
    gauss_predictive(g, n_samples, seed).map(|(_, u)| u)
}

/// Monte-Carlo predictive distribution together with its decomposition.
pub fn gauss_predictive(g: &DiagGaussian, n_samples: usize, seed: u64) -> Result<(Vec<f64>, Decomposition)> {
    let draws = sample_dirichlets(g, n_samples, seed)?;
    let n = draws.len() as f64;
    let mut predictive = vec![0.0; g.k()];
    let mut data = 0.0;
    for d in &draws {
        for (acc, a) in predictive.iter_mut().zip(d.alpha()) {
            *acc += a / d.alpha0();
        }
        data += dir_expected_entropy(d);
    }
    predictive.iter_mut().for_each(|p| *p /= n);
    data /= n;
    let total = entropy(&predictive);
    let u = Decomposition {
        total,
        data,
        knowledge: total - data,
        confidence: predictive.iter().copied().fold(f64::MIN, f64::max),
    };
    Ok((predictive, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirichlet::{dir_uncertainties, DirichletParams};
    use proptest::prelude::*;

    fn dir(a: &[f64]) -> DirichletParams {
        DirichletParams::new(a.to_vec()).unwrap()
    }

    fn gauss(mu: &[f64], sigma: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mu.to_vec(), sigma.to_vec()).unwrap()
    }

    #[test]
    fn proxy_two_point() {
        let fit = fit_proxy_gaussian(&[dir(&[1.0, 1.0]), dir(&[2f64.exp(), 2f64.exp()])]).unwrap();
        assert!(!fit.degenerate);
        for c in 0..2 {
            assert!((fit.gaussian.mu()[c] - 1.0).abs() < 1e-14);
            assert!((fit.gaussian.sigma()[c] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn proxy_identical_members_clamp() {
        let fit = fit_proxy_gaussian(&vec![dir(&[2.0, 3.0]); 5]).unwrap();
        assert!(fit.degenerate);
        assert!((fit.gaussian.mu()[0] - 2f64.ln()).abs() < 1e-15);
        assert!((fit.gaussian.mu()[1] - 3f64.ln()).abs() < 1e-15);
        assert_eq!(fit.gaussian.sigma(), &[SIGMA_MIN, SIGMA_MIN]);

        let single = fit_proxy_gaussian(&[dir(&[2.0, 3.0])]).unwrap();
        assert!(single.degenerate);
        assert_eq!(single.gaussian.sigma(), &[SIGMA_MIN, SIGMA_MIN]);
        assert!(fit_proxy_gaussian(&[]).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = gauss(&[0.3, -1.0], &[0.5, 2.0]);
        assert_eq!(kl_diag_gaussian(&p, &p).unwrap(), 0.0);
        let v = kl_diag_gaussian(&gauss(&[0.0], &[1.0]), &gauss(&[1.0], &[1.0])).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let v = kl_diag_gaussian(&gauss(&[0.0], &[2.0]), &gauss(&[0.0], &[1.0])).unwrap();
        assert!((v - (0.5f64.ln() + 2.0 - 0.5)).abs() < 1e-15);
        assert!(kl_diag_gaussian(&p, &gauss(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn kl_matches_numeric_integration() {
        // ∫ p ln(p/q) by the trapezoid rule on a wide grid.
        let (mp, sp, mq, sq) = (0.0, 2.0, 0.0, 1.0);
        let pdf = |x: f64, m: f64, s: f64| (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let (lo, hi, n) = (-30.0, 30.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let p = pdf(x, mp, sp);
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            if p > 0.0 {
                integral += w * p * (p / pdf(x, mq, sq)).ln();
            }
        }
        integral *= h;
        let kl = kl_diag_gaussian(&gauss(&[mp], &[sp]), &gauss(&[mq], &[sq])).unwrap();
        assert!((kl - integral).abs() < 1e-8, "{kl} vs {integral}");
        assert!((kl - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn sampling() {
        let g = gauss(&[0.5, -0.25], &[0.0, 0.0]);
        for d in sample_dirichlets(&g, 10, 3).unwrap() {
            assert!((d.alpha()[0] - 0.5f64.exp()).abs() < 1e-5);
            assert!((d.alpha()[1] - (-0.25f64).exp()).abs() < 1e-5);
        }
        assert!(matches!(sample_dirichlets(&g, 0, 3), Err(Error::Contract(_))));
        let g = gauss(&[0.5, -0.25], &[1.0, 0.3]);
        assert_eq!(sample_dirichlets(&g, 20, 11).unwrap(), sample_dirichlets(&g, 20, 11).unwrap());
    }

    #[test]
    fn mc_uncertainty_reduces_to_dirichlet() {
        let g = gauss(&[0.0, 0.0], &[SIGMA_MIN, SIGMA_MIN]);
        let u = gauss_uncertainties(&g, DEFAULT_MC_SAMPLES, 1).unwrap();
        let want = dir_uncertainties(&dir(&[1.0, 1.0]));
        assert!((u.total - want.total).abs() < 1e-6);
        assert!((u.data - want.data).abs() < 1e-6);
        assert!((u.knowledge - want.knowledge).abs() < 1e-6);
        assert!(u.knowledge >= -1e-6);

        let g = gauss(&[0.4, 1.1, -0.3], &[0.7, 0.2, 1.3]);
        let one = gauss_uncertainties(&g, 1, 99).unwrap();
        let d = &sample_dirichlets(&g, 1, 99).unwrap()[0];
        let want = dir_uncertainties(d);
        assert!((one.knowledge - want.knowledge).abs() < 1e-12);
    }

    #[test]
    fn mc_uncertainty_converges() {
        let g = gauss(&[0.4, 1.1, -0.3], &[0.7, 0.2, 1.3]);
        let a = gauss_uncertainties(&g, 100_000, 1).unwrap();
        let b = gauss_uncertainties(&g, 10_000, 2).unwrap();
        assert!((a.total - b.total).abs() < 1e-2);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(
            (mp, sp, mq, sq) in (1usize..6).prop_flat_map(|k| (
                proptest::collection::vec(-5f64..5.0, k),
                proptest::collection::vec(0.01f64..5.0, k),
                proptest::collection::vec(-5f64..5.0, k),
                proptest::collection::vec(0.01f64..5.0, k),
            ))
        ) {
            let p = gauss(&mp, &sp);
            let q = gauss(&mq, &sq);
            prop_assert!(kl_diag_gaussian(&p, &q).unwrap() >= -1e-12);
            prop_assert!(kl_diag_gaussian(&p, &p).unwrap().abs() < 1e-12);
        }

        #[test]
        fn mc_decomposition_identity(mu in proptest::collection::vec(-2f64..3.0, 3), sigma in proptest::collection::vec(0.0f64..1.5, 3), seed in 0u64..1000) {
            let u = gauss_uncertainties(&gauss(&mu, &sigma), DEFAULT_MC_SAMPLES, seed).unwrap();
            prop_assert!((u.total - (u.data + u.knowledge)).abs() <= 1e-12);
            prop_assert!(u.data >= 0.0);
            prop_assert!(u.knowledge >= -0.05);
        }
    }
}
