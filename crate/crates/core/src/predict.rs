//! Turns trained networks into per-input predictions and uncertainty
//! decompositions, using the decomposition that fits the model type.

use crate::dirichlet::{alpha_from_logits, dir_mean, dir_uncertainties, CategoricalDist, ALPHA_CAP, EPS_ALPHA};
use crate::ensemble::{
    cat_ensemble_predictive, cat_ensemble_uncertainties, dir_ensemble_predictive, dir_ensemble_uncertainties,
    CategoricalEnsemble, DirichletEnsemble,
};
use crate::error::{contract, Result};
use crate::gaussian::{gauss_predictive, DiagGaussian, SIGMA_MAX, SIGMA_MIN};
use crate::metrics::ModelOutput;
use crate::net::{mc_dropout_batch, HeadKind, NetworkParams};
use crate::rng::derive_seed;
use crate::specfun::softmax_unchecked;
use crate::tape::Matrix;

#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Single(&'a NetworkParams),
    /// Deep ensemble; members must share one head kind.
    Ensemble(&'a [NetworkParams]),
    /// Implicit ensemble of `samples` dropout masks.
    McDropout { net: &'a NetworkParams, samples: usize },
}

/// Monte-Carlo settings for Gaussian heads and dropout ensembles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { mc_samples: crate::gaussian::DEFAULT_MC_SAMPLES, seed: 0 }
    }
}

/// Gaussian-head parameters for one input row.
pub fn gaussian_for_row(logits: &[f64], raw_sigma: &[f64]) -> Result<DiagGaussian> {
    let mu = logits.iter().map(|z| z.clamp(EPS_ALPHA.ln(), ALPHA_CAP.ln())).collect();
    let sigma = raw_sigma.iter().map(|r| r.exp().clamp(SIGMA_MIN, SIGMA_MAX)).collect();
    DiagGaussian::new(mu, sigma)
}

fn categorical_output(p: CategoricalDist) -> ModelOutput {
    ModelOutput { confidence: p.confidence(), total: p.entropy(), data: None, knowledge: None, probs: p }
}

fn single(net: &NetworkParams, x: &Matrix, opts: &PredictOptions) -> Result<Vec<ModelOutput>> {
    let z = net.logits_batch(x)?;
    match net.head {
        HeadKind::Categorical => (0..z.rows()).map(|i| Ok(categorical_output(CategoricalDist::from_logits(z.row(i), 1.0)?))).collect(),
        HeadKind::Dirichlet => (0..z.rows())
            .map(|i| {
                let d = alpha_from_logits(z.row(i))?;
                let u = dir_uncertainties(&d);
                Ok(ModelOutput { probs: dir_mean(&d), confidence: u.confidence, total: u.total, data: Some(u.data), knowledge: Some(u.knowledge) })
            })
            .collect(),
        HeadKind::Gaussian => {
            let raw = net.log_sigma_batch(x)?.expect("validated gaussian head has a sigma head");
            (0..z.rows())
                .map(|i| {
                    let g = gaussian_for_row(z.row(i), raw.row(i))?;
                    let (pred, u) = gauss_predictive(&g, opts.mc_samples, derive_seed(opts.seed, i as u64))?;
                    Ok(ModelOutput {
                        probs: CategoricalDist::new(pred)?,
                        confidence: u.confidence,
                        total: u.total,
                        data: Some(u.data),
                        knowledge: Some(u.knowledge),
                    })
                })
                .collect()
        }
    }
}

fn from_decomposition(probs: CategoricalDist, u: crate::Decomposition) -> ModelOutput {
    ModelOutput { probs, confidence: u.confidence, total: u.total, data: Some(u.data), knowledge: Some(u.knowledge) }
}

fn categorical_members(rows: usize, member_probs: &[Matrix]) -> Result<Vec<ModelOutput>> {
    (0..rows)
        .map(|i| {
            let e = CategoricalEnsemble::new(member_probs.iter().map(|m| CategoricalDist::new(m.row(i).to_vec())).collect::<Result<_>>()?)?;
            Ok(from_decomposition(cat_ensemble_predictive(&e), cat_ensemble_uncertainties(&e)))
        })
        .collect()
}

fn softmax_rows(z: &Matrix) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..z.rows()).map(|i| softmax_unchecked(z.row(i), 1.0)).collect();
    Matrix::from_rows(&rows).expect("rectangular")
}

/// Predictions and uncertainties for every row of `x`.
pub fn predict(p: Predictor<'_>, x: &Matrix, opts: &PredictOptions) -> Result<Vec<ModelOutput>> {
    match p {
        Predictor::Single(net) => single(net, x, opts),
        Predictor::McDropout { net, samples } => {
            if samples == 0 {
                return contract("MC dropout needs at least one sample");
            }
            categorical_members(x.rows(), &mc_dropout_batch(net, x, samples, opts.seed)?)
        }
        Predictor::Ensemble(members) => {
            let Some(first) = members.first() else {
                return contract("empty ensemble");
            };
            if members.iter().any(|m| m.head != first.head) {
                return contract("ensemble members mix head kinds");
            }
            match first.head {
                HeadKind::Categorical => {
                    let probs: Vec<Matrix> = members.iter().map(|m| m.logits_batch(x).map(|z| softmax_rows(&z))).collect::<Result<_>>()?;
                    categorical_members(x.rows(), &probs)
                }
                HeadKind::Dirichlet => {
                    let logits: Vec<Matrix> = members.iter().map(|m| m.logits_batch(x)).collect::<Result<_>>()?;
                    (0..x.rows())
                        .map(|i| {
                            let e = DirichletEnsemble::new(logits.iter().map(|z| alpha_from_logits(z.row(i))).collect::<Result<_>>()?)?;
                            Ok(from_decomposition(dir_ensemble_predictive(&e), dir_ensemble_uncertainties(&e)))
                        })
                        .collect()
                }
                HeadKind::Gaussian => contract("ensembles of gaussian-head students are not supported"),
            }
        }
    }
}
