//! Dirichlet distributions over categorical predictions.
//!
//! Covers the density, mean, the exponential-logit student parameterisation,
//! maximum-likelihood fitting by Minka's fixed point, the closed-form KL
//! divergence, and the total / data / knowledge uncertainty decomposition.

use serde::{Deserialize, Serialize};

use crate::decomposition::Decomposition;
use crate::error::{contract, Error, Result};
use crate::specfun::{
    digamma_unchecked as digamma, entropy, inv_digamma, log_gamma_unchecked as log_gamma,
    trigamma_unchecked as trigamma,
};

/// Floor applied to categorical probabilities before any logarithm.
pub const EPS_FLOOR: f64 = 1e-8;
/// Upper bound on a single concentration (and on a saturated precision).
pub const ALPHA_CAP: f64 = 1e4;
/// Lower bound on a single concentration.
pub const EPS_ALPHA: f64 = 1e-8;

const FIT_TOL: f64 = 1e-8;
const FIT_MAX_ITER: usize = 1000;

/// A probability vector over `K >= 2` classes, floored at [`EPS_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates `probs` (non-negative, summing to one within 1e-6), then
    /// floors every entry at [`EPS_FLOOR`] and renormalises.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return contract(format!("categorical needs at least 2 classes, got {}", probs.len()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain("categorical probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("categorical probabilities sum to {sum}")));
        }
        Ok(Self::floored(probs))
    }

    fn floored(mut probs: Vec<f64>) -> Self {
        probs.iter_mut().for_each(|p| *p = p.max(EPS_FLOOR));
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        Self { probs }
    }

    /// `softmax(z / T)` as a floored categorical.
    pub fn from_logits(z: &[f64], temperature: f64) -> Result<Self> {
        let p = crate::specfun::softmax(z, temperature)?;
        if p.len() < 2 {
            return contract("categorical needs at least 2 classes");
        }
        Ok(Self::floored(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }

    /// Maximum class probability.
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(f64::MIN, f64::max)
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Concentration parameters of a Dirichlet distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DirichletParams {
    alpha: Vec<f64>,
    alpha0: f64,
}

impl TryFrom<Vec<f64>> for DirichletParams {
    type Error = Error;
    fn try_from(alpha: Vec<f64>) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<DirichletParams> for Vec<f64> {
    fn from(d: DirichletParams) -> Self {
        d.alpha
    }
}

impl DirichletParams {
    /// Requires `K >= 2` and every concentration in `(0, ALPHA_CAP]`.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return contract(format!("dirichlet needs at least 2 classes, got {}", alpha.len()));
        }
        if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0 && **a <= ALPHA_CAP)) {
            return Err(Error::Domain(format!("concentration {a} outside (0, {ALPHA_CAP}]")));
        }
        Ok(Self::from_clamped(alpha))
    }

    /// Builds from concentrations already known to be valid.
    fn from_clamped(alpha: Vec<f64>) -> Self {
        let alpha0 = alpha.iter().sum();
        Self { alpha, alpha0 }
    }

    /// Clamps every entry into `[EPS_ALPHA, ALPHA_CAP]` instead of rejecting.
    pub fn clamped(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return contract(format!("dirichlet needs at least 2 classes, got {}", alpha.len()));
        }
        if alpha.iter().any(|a| a.is_nan()) {
            return Err(Error::Domain("NaN concentration".into()));
        }
        Ok(Self::from_clamped(alpha.into_iter().map(clamp_alpha).collect()))
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }
}

pub(crate) fn clamp_alpha(a: f64) -> f64 {
    a.clamp(EPS_ALPHA, ALPHA_CAP)
}

/// `ln Dir(π; α)`.
pub fn dir_log_pdf(d: &DirichletParams, pi: &CategoricalDist) -> Result<f64> {
    if d.k() != pi.k() {
        return contract(format!("dimension mismatch: dirichlet K={} vs categorical K={}", d.k(), pi.k()));
    }
    let norm = log_gamma(d.alpha0) - d.alpha.iter().map(|&a| log_gamma(a)).sum::<f64>();
    let kernel: f64 = d
        .alpha
        .iter()
        .zip(pi.probs())
        .map(|(&a, &p)| (a - 1.0) * p.max(EPS_FLOOR).ln())
        .sum();
    Ok(norm + kernel)
}

/// `E[π] = α / α0`.
pub fn dir_mean(d: &DirichletParams) -> CategoricalDist {
    CategoricalDist::floored(d.alpha.iter().map(|a| a / d.alpha0).collect())
}

/// Student parameterisation `α_c = exp(z_c)`, clamped to `[EPS_ALPHA, ALPHA_CAP]`.
pub fn alpha_from_logits(z: &[f64]) -> Result<DirichletParams> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite logit".into()));
    }
    DirichletParams::clamped(z.iter().map(|v| v.exp()).collect())
}

/// Largest expected class probability, `max_c α_c / α0`.
pub fn dir_confidence(d: &DirichletParams) -> f64 {
    d.alpha.iter().copied().fold(f64::MIN, f64::max) / d.alpha0
}

/// Closed-form decomposition of a single Dirichlet:
/// total = H[α/α0], data = E_Dir[H[π]], knowledge = total − data.
pub fn dir_uncertainties(d: &DirichletParams) -> Decomposition {
    let mean: Vec<f64> = d.alpha.iter().map(|a| a / d.alpha0).collect();
    let total = entropy(&mean);
    let data = dir_expected_entropy(d);
    Decomposition {
        total,
        data,
        knowledge: total - data,
        confidence: dir_confidence(d),
    }
}

/// `E_{π ~ Dir(α)} H[π] = Σ_c (α_c/α0)(ψ(α0+1) − ψ(α_c+1))`.
pub fn dir_expected_entropy(d: &DirichletParams) -> f64 {
    let psi0 = digamma(d.alpha0 + 1.0);
    d.alpha
        .iter()
        .map(|&a| (a / d.alpha0) * (psi0 - digamma(a + 1.0)))
        .sum()
}

/// `KL(Dir(p) ‖ Dir(q))`.
pub fn kl_dirichlet(p: &DirichletParams, q: &DirichletParams) -> Result<f64> {
    if p.k() != q.k() {
        return contract(format!("dimension mismatch: K={} vs K={}", p.k(), q.k()));
    }
    let psi_p0 = digamma(p.alpha0);
    let mut kl = log_gamma(p.alpha0) - log_gamma(q.alpha0);
    for (&ap, &aq) in p.alpha.iter().zip(&q.alpha) {
        kl += log_gamma(aq) - log_gamma(ap) + (ap - aq) * (digamma(ap) - psi_p0);
    }
    Ok(kl)
}

/// Result of a maximum-likelihood Dirichlet fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletFit {
    pub params: DirichletParams,
    /// The samples carried no spread (or the precision ran past
    /// [`ALPHA_CAP`]); `params` is the sample mean scaled to `α0 = ALPHA_CAP`.
    pub saturated: bool,
    pub iterations: usize,
}

/// Sufficient statistics of a sample set: mean of `ln π_c`, plus the
/// first and second raw moments for the initialiser.
struct SampleStats {
    mean_log: Vec<f64>,
    mean: Vec<f64>,
    mean_sq: Vec<f64>,
}

impl SampleStats {
    fn collect(samples: &[CategoricalDist]) -> Result<Self> {
        if samples.len() < 2 {
            return contract(format!("dirichlet fit needs at least 2 samples, got {}", samples.len()));
        }
        let k = samples[0].k();
        if samples.iter().any(|s| s.k() != k) {
            return contract("dirichlet fit samples have differing class counts");
        }
        let n = samples.len() as f64;
        let mut mean_log = vec![0.0; k];
        let mut mean = vec![0.0; k];
        let mut mean_sq = vec![0.0; k];
        for s in samples {
            for (c, &p) in s.probs().iter().enumerate() {
                let p = p.max(EPS_FLOOR);
                mean_log[c] += p.ln();
                mean[c] += p;
                mean_sq[c] += p * p;
            }
        }
        for c in 0..k {
            mean_log[c] /= n;
            mean[c] /= n;
            mean_sq[c] /= n;
        }
        Ok(Self { mean_log, mean, mean_sq })
    }

    fn saturated(&self) -> DirichletParams {
        let sum: f64 = self.mean.iter().sum();
        DirichletParams::from_clamped(self.mean.iter().map(|m| clamp_alpha(ALPHA_CAP * m / sum)).collect())
    }

    /// Moment-matched initial concentrations, or `None` when the samples
    /// have no usable spread.
    fn moment_match(&self) -> Option<Vec<f64>> {
        let estimates: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.mean_sq)
            .filter_map(|(&m, &s)| {
                let var = s - m * m;
                if var > 1e-14 * m.max(1e-300) {
                    let a0 = (m - s) / var;
                    (a0.is_finite() && a0 > 0.0).then_some(a0)
                } else {
                    None
                }
            })
            .collect();
        if estimates.is_empty() {
            return None;
        }
        let a0 = estimates.iter().sum::<f64>() / estimates.len() as f64;
        let sum: f64 = self.mean.iter().sum();
        Some(self.mean.iter().map(|m| a0 * m / sum).collect())
    }
}

/// Mean (per-sample) log-likelihood of the samples summarised by
/// `mean_log` under `Dir(alpha)`.
fn mean_log_likelihood(alpha: &[f64], mean_log: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    log_gamma(a0)
        + alpha
            .iter()
            .zip(mean_log)
            .map(|(&a, &l)| (a - 1.0) * l - log_gamma(a))
            .sum::<f64>()
}

/// Gradient of the mean log-likelihood: `ψ(α0) − ψ(α_c) + mean ln π_c`.
pub fn dir_log_likelihood_gradient(alpha: &[f64], samples: &[CategoricalDist]) -> Result<Vec<f64>> {
    let stats = SampleStats::collect(samples)?;
    let a0: f64 = alpha.iter().sum();
    let psi0 = digamma(a0);
    Ok(alpha
        .iter()
        .zip(&stats.mean_log)
        .map(|(&a, &l)| psi0 - digamma(a) + l)
        .collect())
}

/// Mean log-likelihood of `samples` under `d`.
pub fn dir_mean_log_likelihood(d: &DirichletParams, samples: &[CategoricalDist]) -> Result<f64> {
    let stats = SampleStats::collect(samples)?;
    if stats.mean_log.len() != d.k() {
        return contract("dimension mismatch");
    }
    Ok(mean_log_likelihood(&d.alpha, &stats.mean_log))
}

/// Moment-matched starting point used by [`fit_dirichlet_mle`]; `None` for
/// spread-free samples.
pub fn dir_moment_match(samples: &[CategoricalDist]) -> Result<Option<DirichletParams>> {
    let stats = SampleStats::collect(samples)?;
    Ok(stats.moment_match().map(|a| DirichletParams::from_clamped(a.into_iter().map(clamp_alpha).collect())))
}

/// One safeguarded Newton step on the mean log-likelihood. The Hessian is
/// `diag(−ψ'(α_c)) + ψ'(α0)·11ᵀ`, so the step solves in O(K) (Minka's
/// Newton iteration). The step is halved until it keeps every α positive
/// and does not lower the likelihood; if no such step exists `alpha` is
/// left unchanged.
fn newton_refine(alpha: &mut [f64], mean_log: &[f64]) {
    let a0: f64 = alpha.iter().sum();
    let psi0 = digamma(a0);
    let z = trigamma(a0);
    let g: Vec<f64> = alpha.iter().zip(mean_log).map(|(&a, &l)| psi0 - digamma(a) + l).collect();
    let q: Vec<f64> = alpha.iter().map(|&a| -trigamma(a)).collect();
    let b = g.iter().zip(&q).map(|(g, q)| g / q).sum::<f64>() / (1.0 / z + q.iter().map(|q| 1.0 / q).sum::<f64>());
    let step: Vec<f64> = g.iter().zip(&q).map(|(g, q)| (g - b) / q).collect();
    if step.iter().any(|v| !v.is_finite()) {
        return;
    }
    let ll = mean_log_likelihood(alpha, mean_log);
    let mut t = 1.0;
    for _ in 0..40 {
        let candidate: Vec<f64> = alpha.iter().zip(&step).map(|(a, d)| a - t * d).collect();
        if candidate.iter().all(|&a| a > 0.0) && mean_log_likelihood(&candidate, mean_log) >= ll {
            alpha.copy_from_slice(&candidate);
            return;
        }
        t *= 0.5;
    }
}

/// Maximum-likelihood Dirichlet for a set of categorical samples by Minka's
/// fixed point `α_c ← ψ⁻¹(ψ(α0) + mean ln π_c)`, started from moment
/// matching and run until `max |Δ ln α_c| < 1e-8`. Each sweep follows the
/// fixed-point update with a safeguarded Newton step, which removes the
/// slow linear convergence of the plain fixed point along likelihood ridges.
pub fn fit_dirichlet_mle(samples: &[CategoricalDist]) -> Result<DirichletFit> {
    let stats = SampleStats::collect(samples)?;
    let Some(mut alpha) = stats.moment_match() else {
        return Ok(DirichletFit { params: stats.saturated(), saturated: true, iterations: 0 });
    };
    if alpha.iter().sum::<f64>() >= ALPHA_CAP {
        return Ok(DirichletFit { params: stats.saturated(), saturated: true, iterations: 0 });
    }
    alpha.iter_mut().for_each(|a| *a = clamp_alpha(*a));

    let mut last_step = f64::INFINITY;
    for iter in 1..=FIT_MAX_ITER {
        let psi0 = digamma(alpha.iter().sum());
        let mut next = Vec::with_capacity(alpha.len());
        for &l in &stats.mean_log {
            next.push(inv_digamma(psi0 + l)?);
        }
        newton_refine(&mut next, &stats.mean_log);
        last_step = alpha
            .iter()
            .zip(&next)
            .map(|(a, b)| (b.ln() - a.ln()).abs())
            .fold(0.0, f64::max);
        alpha = next;
        if alpha.iter().sum::<f64>() > ALPHA_CAP || alpha.iter().any(|&a| a < EPS_ALPHA) {
            return Ok(DirichletFit { params: stats.saturated(), saturated: true, iterations: iter });
        }
        if last_step < FIT_TOL {
            return Ok(DirichletFit {
                params: DirichletParams::from_clamped(alpha),
                saturated: false,
                iterations: iter,
            });
        }
    }
    Err(Error::FitDiverged { iterations: FIT_MAX_ITER, last_step, alpha })
}
