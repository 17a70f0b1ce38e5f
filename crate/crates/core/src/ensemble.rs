//! Ensemble predictive distributions and the entropy / mutual-information
//! decomposition for ensembles of categoricals and of Dirichlets.

use crate::decomposition::Decomposition;
use crate::dirichlet::{dir_expected_entropy, CategoricalDist, DirichletParams};
use crate::error::{contract, Result};
use crate::specfun::entropy;

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalEnsemble {
    members: Vec<CategoricalDist>,
}

impl CategoricalEnsemble {
    pub fn new(members: Vec<CategoricalDist>) -> Result<Self> {
        check_members(members.iter().map(CategoricalDist::k))?;
        Ok(Self { members })
    }

    pub fn members(&self) -> &[CategoricalDist] {
        &self.members
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletEnsemble {
    members: Vec<DirichletParams>,
}

impl DirichletEnsemble {
    pub fn new(members: Vec<DirichletParams>) -> Result<Self> {
        check_members(members.iter().map(DirichletParams::k))?;
        Ok(Self { members })
    }

    pub fn members(&self) -> &[DirichletParams] {
        &self.members
    }
}

fn check_members(mut ks: impl Iterator<Item = usize>) -> Result<()> {
    let Some(k) = ks.next() else {
        return contract("ensemble needs at least one member");
    };
    if ks.any(|other| other != k) {
        return contract("ensemble members have differing class counts");
    }
    Ok(())
}

fn mean_of<'a>(k: usize, vectors: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut acc = vec![0.0; k];
    let mut n = 0usize;
    for v in vectors {
        acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

fn decompose(predictive: &[f64], data: f64) -> Decomposition {
    let total = entropy(predictive);
    Decomposition {
        total,
        data,
        knowledge: total - data,
        confidence: predictive.iter().copied().fold(f64::MIN, f64::max),
    }
}

/// Arithmetic mean of the member probability vectors.
pub fn cat_ensemble_predictive(e: &CategoricalEnsemble) -> CategoricalDist {
    let k = e.members[0].k();
    let mean = mean_of(k, e.members.iter().map(|m| m.probs().to_vec()));
    CategoricalDist::new(mean).expect("mean of categoricals is a categorical")
}

/// Total = entropy of the mean, data = mean member entropy, knowledge =
/// total − data (the ensemble mutual information).
pub fn cat_ensemble_uncertainties(e: &CategoricalEnsemble) -> Decomposition {
    let predictive = cat_ensemble_predictive(e);
    let data = e.members.iter().map(CategoricalDist::entropy).sum::<f64>() / e.members.len() as f64;
    decompose(predictive.probs(), data)
}

fn dir_predictive_raw(e: &DirichletEnsemble) -> Vec<f64> {
    let k = e.members[0].k();
    mean_of(k, e.members.iter().map(|m| m.alpha().iter().map(|a| a / m.alpha0()).collect()))
}

/// `(1/M) Σ_m α^(m) / α0^(m)`.
pub fn dir_ensemble_predictive(e: &DirichletEnsemble) -> CategoricalDist {
    CategoricalDist::new(dir_predictive_raw(e)).expect("mean of dirichlet means is a categorical")
}

/// Total = entropy of the ensemble predictive, data = mean closed-form
/// expected entropy of the members, knowledge = total − data.
pub fn dir_ensemble_uncertainties(e: &DirichletEnsemble) -> Decomposition {
    let predictive = dir_predictive_raw(e);
    let data = e.members.iter().map(dir_expected_entropy).sum::<f64>() / e.members.len() as f64;
    decompose(&predictive, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirichlet::{dir_mean, dir_uncertainties};
    use proptest::prelude::*;

    fn cat(p: &[f64]) -> CategoricalDist {
        CategoricalDist::new(p.to_vec()).unwrap()
    }

    fn dir(a: &[f64]) -> DirichletParams {
        DirichletParams::new(a.to_vec()).unwrap()
    }

    fn cats(ps: &[&[f64]]) -> CategoricalEnsemble {
        CategoricalEnsemble::new(ps.iter().map(|p| cat(p)).collect()).unwrap()
    }

    #[test]
    fn categorical_predictive() {
        let p = cat_ensemble_predictive(&cats(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!((p.probs()[0] - 0.5).abs() < 1e-15);
        let single = cats(&[&[0.3, 0.7]]);
        assert_eq!(cat_ensemble_predictive(&single).probs(), single.members()[0].probs());
        let p = cat_ensemble_predictive(&cats(&[&[0.6, 0.4], &[0.2, 0.8]]));
        assert!((p.probs()[0] - 0.4).abs() < 1e-15 && (p.probs()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn categorical_uncertainties() {
        let u = cat_ensemble_uncertainties(&cats(&[&[0.2, 0.3, 0.5][..]; 3]));
        assert!(u.knowledge.abs() < 1e-12);

        let u = cat_ensemble_uncertainties(&cats(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!((u.total - 2f64.ln()).abs() < 1e-12);
        assert!(u.data < 1e-6);
        assert!((u.knowledge - 2f64.ln()).abs() < 1e-6);

        let u = cat_ensemble_uncertainties(&cats(&[&[0.5, 0.5], &[0.5, 0.5]]));
        assert!((u.total - 2f64.ln()).abs() < 1e-15 && (u.data - 2f64.ln()).abs() < 1e-15);
        assert!(u.knowledge.abs() < 1e-15);
        assert_eq!(u.confidence, 0.5);
    }

    #[test]
    fn dirichlet_predictive() {
        let e = DirichletEnsemble::new(vec![dir(&[2.0, 2.0]), dir(&[1.0, 3.0])]).unwrap();
        let p = dir_ensemble_predictive(&e);
        assert!((p.probs()[0] - 0.375).abs() < 1e-15 && (p.probs()[1] - 0.625).abs() < 1e-15);
        let d = dir(&[0.7, 2.0, 5.0]);
        let single = DirichletEnsemble::new(vec![d.clone()]).unwrap();
        assert_eq!(dir_ensemble_predictive(&single), dir_mean(&d));
        let sym = DirichletEnsemble::new(vec![dir(&[2.0; 3]), dir(&[0.5; 3])]).unwrap();
        for &p in dir_ensemble_predictive(&sym).probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dirichlet_uncertainties() {
        let d = dir(&[0.7, 2.0, 5.0]);
        let one = dir_ensemble_uncertainties(&DirichletEnsemble::new(vec![d.clone()]).unwrap());
        let want = dir_uncertainties(&d);
        assert!((one.total - want.total).abs() < 1e-15);
        assert!((one.data - want.data).abs() < 1e-15);
        assert!((one.knowledge - want.knowledge).abs() < 1e-15);

        let many = dir_ensemble_uncertainties(&DirichletEnsemble::new(vec![d.clone(); 4]).unwrap());
        assert!((many.knowledge - want.knowledge).abs() < 1e-12);

        let split = DirichletEnsemble::new(vec![dir(&[1000.0, 1.0]), dir(&[1.0, 1000.0])]).unwrap();
        let u = dir_ensemble_uncertainties(&split);
        assert!(u.knowledge > 10.0 * u.data);
        assert!(u.knowledge < 2f64.ln() && u.knowledge > 2f64.ln() - 0.02);
    }

    #[test]
    fn empty_or_ragged_rejected() {
        assert!(CategoricalEnsemble::new(vec![]).is_err());
        assert!(CategoricalEnsemble::new(vec![cat(&[0.5, 0.5]), cat(&[0.2, 0.3, 0.5])]).is_err());
        assert!(DirichletEnsemble::new(vec![]).is_err());
    }

    #[test]
    fn point_mass_dirichlets_match_categoricals() {
        let means = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.25, 0.25, 0.5]];
        let dirs = DirichletEnsemble::new(means.iter().map(|m| dir(&m.map(|p| p * 1e4))).collect()).unwrap();
        let cats = CategoricalEnsemble::new(means.iter().map(|m| cat(m)).collect()).unwrap();
        let (a, b) = (dir_ensemble_uncertainties(&dirs), cat_ensemble_uncertainties(&cats));
        assert!((a.total - b.total).abs() < 1e-3);
        assert!((a.data - b.data).abs() < 1e-3);
        assert!((a.knowledge - b.knowledge).abs() < 1e-3);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(members in (2usize..5).prop_flat_map(|k| proptest::collection::vec(simplex(k), 1..6))) {
            let fwd = CategoricalEnsemble::new(members.iter().map(|m| cat(m)).collect()).unwrap();
            let rev = CategoricalEnsemble::new(members.iter().rev().map(|m| cat(m)).collect()).unwrap();
            let (a, b) = (cat_ensemble_uncertainties(&fwd), cat_ensemble_uncertainties(&rev));
            prop_assert!((a.total - b.total).abs() < 1e-12);
            prop_assert!((a.data - b.data).abs() < 1e-12);
            prop_assert!((a.knowledge - b.knowledge).abs() < 1e-12);
        }
    }
}
