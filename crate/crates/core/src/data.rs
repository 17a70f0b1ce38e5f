//! Synthetic datasets and CSV persistence.
//!
//! CSV layout: header `f0,...,f{d-1},label`, one row per point. An empty
//! label marks an out-of-distribution point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{permutation, seeded, standard_normal};
use crate::tape::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Ood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    /// Empty for OOD data.
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return contract("dataset needs at least one point and one feature");
        }
        if features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature".into()));
        }
        match split {
            Split::Ood if !labels.is_empty() => return contract("OOD datasets carry no labels"),
            Split::Train | Split::Test if labels.len() != features.rows() => {
                return contract(format!("{} labels for {} points", labels.len(), features.rows()))
            }
            _ => {}
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return contract(format!("label {y} out of range for K={classes}"));
        }
        Ok(Self { features, labels, classes, split })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_labelled(&self) -> bool {
        !self.labels.is_empty()
    }

    /// Rows `idx` as a new dataset of the same split.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let labels = if self.is_labelled() { idx.iter().map(|&i| self.labels[i]).collect() } else { Vec::new() };
        Self::new(self.features.select_rows(idx), labels, self.classes, self.split)
    }

    pub fn with_split(mut self, split: Split) -> Result<Self> {
        if split == Split::Ood {
            self.labels.clear();
        } else if !self.is_labelled() {
            return contract("cannot relabel OOD data as train/test");
        }
        self.split = split;
        Ok(self)
    }
}

/// Radius of the class-mean circle: 8 at `overlap = 0`, 1 at `overlap = 1`.
pub fn mixture_radius(overlap: f64) -> f64 {
    8.0 - 7.0 * overlap
}

/// Class means spaced evenly on a circle in the first two coordinates.
pub fn circle_means(k: usize, d: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let t = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            let mut m = vec![0.0; d];
            m[0] = radius * t.cos();
            m[1] = radius * t.sin();
            m
        })
        .collect()
}

/// `K` unit-variance Gaussian clusters with means on a circle whose radius
/// shrinks with `overlap`.
pub fn gen_gaussian_mixture(k: usize, n_per_class: usize, d: usize, overlap: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || d < 2 {
        return contract(format!("mixture needs K >= 2 and d >= 2, got K={k}, d={d}"));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return contract(format!("overlap must be in [0, 1], got {overlap}"));
    }
    gen_mixture(&circle_means(k, d, mixture_radius(overlap)), n_per_class, seed)
}

/// Unit-variance Gaussian clusters at explicit means, class-major order.
pub fn gen_mixture(means: &[Vec<f64>], n_per_class: usize, seed: u64) -> Result<Dataset> {
    let d = means.first().map_or(0, Vec::len);
    if means.len() < 2 || d == 0 || means.iter().any(|m| m.len() != d) {
        return contract("mixture needs at least two means of equal, positive dimension");
    }
    if n_per_class == 0 {
        return contract("n_per_class must be positive");
    }
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(means.len() * n_per_class * d);
    let mut labels = Vec::with_capacity(means.len() * n_per_class);
    for (c, m) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(m.iter().map(|mu| mu + standard_normal(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(labels.len(), d, data)?, labels, means.len(), Split::Train)
}

/// `n` points uniform on the sphere of the given radius in `d` dimensions.
pub fn gen_ood_ring(n: usize, d: usize, radius: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return contract("OOD ring needs n >= 1");
    }
    if d == 0 || !(radius > 0.0) {
        return contract("OOD ring needs d >= 1 and a positive radius");
    }
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| radius * x / norm));
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, Vec::new(), 0, Split::Ood)
}

/// Seeded shuffle then split; the first part gets `train_fraction` of the points.
pub fn train_test_split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return contract(format!("train fraction must be in (0, 1), got {train_fraction}"));
    }
    let perm = permutation(ds.len(), &mut seeded(seed));
    let n_train = ((ds.len() as f64) * train_fraction).round() as usize;
    if n_train == 0 || n_train == ds.len() {
        return contract("split leaves one side empty");
    }
    Ok((ds.subset(&perm[..n_train])?.with_split(Split::Train)?, ds.subset(&perm[n_train..])?.with_split(Split::Test)?))
}

/// Per-feature affine standardisation, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let (n, d) = (ds.len() as f64, ds.dim());
        let x = ds.features();
        let mut mean = vec![0.0; d];
        for i in 0..ds.len() {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..ds.len() {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.mean.len() {
            return contract(format!("standardizer fitted on d={}, data has d={}", self.mean.len(), ds.dim()));
        }
        let mut x = ds.features().clone();
        let d = ds.dim();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Dataset::new(x, ds.labels.clone(), ds.classes, ds.split)
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(if ds.is_labelled() { ds.labels[i].to_string() } else { String::new() });
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Numeric(format!("csv: {other:?}")),
    }
}

/// Loads a dataset; `classes` fixes K (otherwise max label + 1). Rows with
/// empty labels make an OOD dataset; mixing labelled and unlabelled rows is
/// an error. The split defaults to `Train` for labelled data.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, classes)
}

pub fn parse_csv(text: &str, classes: Option<usize>) -> Result<Dataset> {
    if text.trim().is_empty() {
        return contract("empty CSV file");
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut records = rdr.records();
    let header = records
        .next()
        .expect("non-empty text has a first record")
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    let d = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..d).map(|j| format!("f{j}")).chain(std::iter::once("label".into())).collect();
    if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse { line: 1, msg: format!("header must be {}", expected.join(",")) });
    }
    let mut data = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), msg: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != d + 1 {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", d + 1, rec.len()) });
        }
        for (j, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("f{j}: '{field}' is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("f{j}: non-finite value") });
            }
            data.push(v);
        }
        let label = rec[d].trim();
        labels.push(if label.is_empty() {
            None
        } else {
            Some(label.parse().map_err(|_| Error::Parse { line, msg: format!("label '{label}' is not a class index") })?)
        });
    }
    if labels.is_empty() {
        return contract("CSV has a header but no rows");
    }
    let n = labels.len();
    let features = Matrix::from_vec(n, d, data)?;
    if labels.iter().all(Option::is_none) {
        return Dataset::new(features, Vec::new(), classes.unwrap_or(0), Split::Ood);
    }
    if labels.iter().any(Option::is_none) {
        return contract("CSV mixes labelled and unlabelled rows");
    }
    let labels: Vec<usize> = labels.into_iter().map(|l| l.expect("checked")).collect();
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(features, labels, k, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_deterministic_and_labelled() {
        let a = gen_gaussian_mixture(3, 50, 2, 0.3, 7).unwrap();
        assert_eq!(a, gen_gaussian_mixture(3, 50, 2, 0.3, 7).unwrap());
        assert_ne!(a, gen_gaussian_mixture(3, 50, 2, 0.3, 8).unwrap());
        assert_eq!(a.len(), 150);
        assert_eq!(a.labels().iter().filter(|&&y| y == 2).count(), 50);
        assert!(gen_gaussian_mixture(1, 5, 2, 0.0, 0).is_err());
        assert!(gen_gaussian_mixture(3, 5, 1, 0.0, 0).is_err());
        assert!(gen_gaussian_mixture(3, 5, 2, 2.0, 0).is_err());
    }

    #[test]
    fn radius_endpoints() {
        assert_eq!(mixture_radius(0.0), 8.0);
        assert_eq!(mixture_radius(1.0), 1.0);
    }

    #[test]
    fn ring_geometry() {
        let ring = gen_ood_ring(200, 2, 20.0, 1).unwrap();
        assert!(!ring.is_labelled());
        for i in 0..ring.len() {
            let r = ring.features().row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 20.0).abs() < 1e-12);
        }
        assert_eq!(ring, gen_ood_ring(200, 2, 20.0, 1).unwrap());
        assert!(gen_ood_ring(0, 2, 20.0, 1).is_err());
    }

    #[test]
    fn standardizer_moments() {
        let ds = gen_gaussian_mixture(3, 100, 4, 0.5, 2).unwrap();
        let s = Standardizer::fit(&ds);
        let z = s.apply(&ds).unwrap();
        let n = z.len() as f64;
        for j in 0..z.dim() {
            let col: Vec<f64> = (0..z.len()).map(|i| z.features().get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn split_is_seeded() {
        let ds = gen_gaussian_mixture(2, 40, 2, 0.5, 3).unwrap();
        let (a, b) = train_test_split(&ds, 0.75, 9).unwrap();
        assert_eq!((a.len(), b.len()), (60, 20));
        assert_eq!((a.split(), b.split()), (Split::Train, Split::Test));
        assert_eq!(train_test_split(&ds, 0.75, 9).unwrap(), (a, b));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen_gaussian_mixture(3, 20, 3, 0.1, 4).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, Some(3)).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.features().data().iter().zip(ds.features().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let ring = gen_ood_ring(10, 3, 12.0, 0).unwrap();
        save_csv(&ring, &path).unwrap();
        let back = load_csv(&path, None).unwrap();
        assert_eq!(back.split(), Split::Ood);
        assert_eq!(back.features(), ring.features());
    }

    #[test]
    fn csv_errors() {
        match parse_csv("f0,f1,label\n1.0,2.0,0\n1.0,abc,1\n", None) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv("f0,f1,label\n1.0,2.0\n", None), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("", None), Err(Error::Contract(_))));
        assert!(matches!(parse_csv("x,y,label\n1,2,0\n", None), Err(Error::Parse { line: 1, .. })));
        assert!(parse_csv("f0,f1,label\n1,2,0\n3,4,\n", None).is_err());
    }
}
