//! Training procedures: standard cross-entropy, S2D, deep ensembles and
//! distillation into a single student (EnD, H2D-Dir, H2D-Gauss).

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dirichlet::{alpha_from_logits, DirichletParams, ALPHA_CAP, EPS_ALPHA};
use crate::error::{contract, Error, Result};
use crate::gaussian::{fit_proxy_gaussian_log, DiagGaussian};
use crate::losses::{cross_entropy, gaussian_mu, gaussian_sigma, loss_end, loss_h2d_dir, loss_h2d_gauss, loss_s2d_total};
use crate::metrics::{accuracy, nll};
use crate::net::{BoundNet, Dense, HeadKind, NetworkParams, NoiseSpec, ParamGrads, Sgd};
use crate::predict::{predict, PredictOptions, Predictor};
use crate::rng::{derive_seed, permutation, seeded, SeededRng};
use crate::specfun::softmax_unchecked;
use crate::tape::{Matrix, Tape, Var};

/// Hyper-parameters shared by training and distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Weight of the S2D student loss.
    pub mu: f64,
    /// Temperature applied to teacher passes before proxy fitting.
    pub t_proxy: f64,
    /// Stochastic teacher passes per step.
    pub m_teacher: usize,
    pub m_ensemble: usize,
    /// EnD temperature.
    pub t_end: f64,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub distill_epochs: usize,
    /// Distillation starts at `lr * distill_lr_factor` and decays by
    /// `lr_decay` at each of `distill_lr_milestones`.
    pub distill_lr_factor: f64,
    pub distill_lr_milestones: Vec<usize>,
    pub distill_weight_decay: f64,
    /// Rescale the full gradient to at most this L2 norm. Near one-hot
    /// teacher passes give proxies with tiny concentrations, and the
    /// student KL gradient is then stiff enough to blow up plain SGD.
    pub max_grad_norm: Option<f64>,
    /// The same for distillation. Targets near the concentration cap give
    /// the Dirichlet KL a curvature of order α, so this needs to be tight.
    pub distill_max_grad_norm: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mu: 1.28e-4,
            t_proxy: 1.5,
            m_teacher: 5,
            m_ensemble: 5,
            t_end: 1.0,
            lr: 0.05,
            lr_milestones: vec![60, 90],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            distill_epochs: 50,
            distill_lr_factor: 0.2,
            distill_lr_milestones: vec![30, 45],
            distill_weight_decay: 0.0,
            max_grad_norm: Some(10.0),
            distill_max_grad_norm: Some(0.3),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| -> Result<()> { contract(msg) };
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be >= 0, got {}", self.mu));
        }
        if !(self.t_proxy > 0.0) || !(self.t_end > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.m_teacher < 2 {
            return bad(format!("m_teacher must be >= 2 for proxy fitting, got {}", self.m_teacher));
        }
        if self.m_ensemble < 1 {
            return bad("m_ensemble must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || !(self.distill_lr_factor > 0.0) {
            return bad("learning rate, decay and distillation factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.distill_weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if [self.max_grad_norm, self.distill_max_grad_norm].iter().any(|c| matches!(c, Some(c) if !(*c > 0.0))) {
            return bad("max_grad_norm must be positive".into());
        }
        Ok(())
    }

    /// Step-decayed learning rate for an epoch (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    pub fn distill_lr_at(&self, epoch: usize) -> f64 {
        let drops = self.distill_lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.distill_lr_factor * self.lr_decay.powi(drops as i32)
    }
}

/// Network shape and regularisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub noise: NoiseSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![64, 64], dropout: 0.0, noise: NoiseSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainKind {
    Standard,
    S2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    End,
    H2dDir,
    H2dGauss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: Option<f64>,
    pub test_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: NetworkParams,
    pub log: Vec<EpochLog>,
}

impl Trained {
    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn check_train_set(ds: &Dataset) -> Result<()> {
    if !ds.is_labelled() || ds.is_empty() {
        return contract("training needs a non-empty labelled dataset");
    }
    Ok(())
}

fn test_metrics(params: &NetworkParams, test: Option<&Dataset>) -> Result<(Option<f64>, Option<f64>)> {
    let Some(test) = test.filter(|t| t.is_labelled()) else {
        return Ok((None, None));
    };
    let outs = predict(Predictor::Single(params), test.features(), &PredictOptions::default())?;
    let preds: Vec<_> = outs.into_iter().map(|o| o.probs).collect();
    Ok((Some(accuracy(&preds, test.labels())?), Some(nll(&preds, test.labels())?)))
}

fn clip(grads: &mut ParamGrads, max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grads.tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.tensors.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

struct Schedule<'a> {
    cfg: &'a ExperimentConfig,
    epochs: usize,
    lr: Box<dyn Fn(usize) -> f64 + 'a>,
    weight_decay: f64,
    max_grad_norm: Option<f64>,
}

/// Shuffled mini-batch SGD; `batch_loss` records the loss of one batch
/// (given as row indices) on the tape.
fn run_sgd<F>(params: &mut NetworkParams, n: usize, schedule: Schedule<'_>, seed: u64, test: Option<&Dataset>, mut batch_loss: F) -> Result<Vec<EpochLog>>
where
    F: FnMut(&mut Tape, &BoundNet<'_>, &[usize], &mut SeededRng) -> Result<Var>,
{
    let cfg = schedule.cfg;
    let mut opt = Sgd::new((schedule.lr)(0), cfg.momentum, schedule.weight_decay)?;
    // shuffling and per-batch noise use separate streams, so models that
    // draw no noise see the same batch order as those that do
    let mut order_rng = seeded(seed);
    let mut rng = seeded(derive_seed(seed, 1));
    let mut log = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        opt.lr = (schedule.lr)(epoch);
        let order = permutation(n, &mut order_rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let (value, mut grads) = {
                let bound = BoundNet::bind(params, &mut tape);
                let loss = batch_loss(&mut tape, &bound, idx, &mut rng)
                    .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("training diverged: loss {value} at epoch {epoch}, batch {b}")));
                }
                (value, bound.collect(&tape, &tape.backward(loss)?))
            };
            clip(&mut grads, schedule.max_grad_norm);
            opt.step(params, &grads).map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += value * idx.len() as f64;
        }
        let (test_acc, test_nll) = test_metrics(params, test)?;
        log.push(EpochLog { epoch, train_loss: loss_sum / n as f64, test_acc, test_nll });
    }
    Ok(log)
}

fn batch_input(tape: &mut Tape, ds: &Dataset, idx: &[usize]) -> Var {
    tape.constant(ds.features().select_rows(idx))
}

fn batch_labels(ds: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| ds.labels()[i]).collect()
}

/// Trains one model. `standard` uses cross-entropy on the deterministic
/// path; `s2d` uses the teacher loss over `m_teacher` noisy passes plus the
/// weighted proxy-KL student loss on the deterministic path.
pub fn train_model(kind: TrainKind, spec: &ModelSpec, train: &Dataset, test: Option<&Dataset>, cfg: &ExperimentConfig) -> Result<Trained> {
    cfg.validate()?;
    check_train_set(train)?;
    let head = match kind {
        TrainKind::Standard => HeadKind::Categorical,
        TrainKind::S2d => HeadKind::Dirichlet,
    };
    let mut params = NetworkParams::init(train.dim(), &spec.hidden, train.classes(), head, spec.dropout, derive_seed(cfg.seed, 1))?;
    params.noise = spec.noise;
    params.validate()?;
    let noise = spec.noise;
    let schedule = Schedule { cfg, epochs: cfg.epochs, lr: Box::new(|e| cfg.lr_at(e)), weight_decay: cfg.weight_decay, max_grad_norm: cfg.max_grad_norm };
    let log = run_sgd(&mut params, train.len(), schedule, derive_seed(cfg.seed, 2), test, |tape, net, idx, rng| {
        let x = batch_input(tape, train, idx);
        let labels = batch_labels(train, idx);
        let h = net.trunk(tape, x, Some(rng));
        let h = net.output_dropout(tape, h, rng);
        match kind {
            TrainKind::Standard => {
                let z = net.output(tape, h);
                cross_entropy(tape, z, &labels)
            }
            TrainKind::S2d => {
                let teacher = net.teacher_passes(tape, h, &noise, cfg.m_teacher, rng);
                let z = net.output(tape, h);
                loss_s2d_total(tape, &teacher, z, &labels, cfg.mu, cfg.t_proxy)
            }
        }
    })?;
    Ok(Trained { params, log })
}

/// `m_ensemble` independent models with seeds `seed + i`. With `parallel`
/// each member trains on its own thread.
pub fn train_deep_ensemble(
    kind: TrainKind,
    spec: &ModelSpec,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &ExperimentConfig,
    parallel: bool,
) -> Result<Vec<Trained>> {
    cfg.validate()?;
    let member_cfg = |i: usize| ExperimentConfig { seed: cfg.seed + i as u64, ..cfg.clone() };
    if !parallel {
        return (0..cfg.m_ensemble).map(|i| train_model(kind, spec, train, test, &member_cfg(i))).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.m_ensemble)
            .map(|i| {
                let c = member_cfg(i);
                s.spawn(move || train_model(kind, spec, train, test, &c))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("member thread panicked")).collect()
    })
}

/// Fixed per-row distillation targets.
enum Targets {
    Soft(Matrix),
    Dirichlets(Vec<Vec<DirichletParams>>),
    Gaussians(Vec<DiagGaussian>),
}

fn teacher_logits(teachers: &[NetworkParams], x: &Matrix) -> Result<Vec<Matrix>> {
    teachers.iter().map(|t| t.logits_batch(x)).collect()
}

fn clamp_log_alpha(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.clamp(EPS_ALPHA.ln(), ALPHA_CAP.ln())).collect()
}

/// Distils a teacher ensemble into one student, initialised from member 0
/// and trained at the reduced distillation learning rate.
///
/// `end` matches the temperature-scaled ensemble average; `h2d_dir` and
/// `h2d_gauss` need Dirichlet (S2D) teachers, and `h2d_gauss` adds a σ head
/// fed by the detached trunk features.
pub fn distill(kind: DistillKind, teachers: &[NetworkParams], train: &Dataset, test: Option<&Dataset>, cfg: &ExperimentConfig) -> Result<Trained> {
    cfg.validate()?;
    check_train_set(train)?;
    let Some(first) = teachers.first() else {
        return contract("distillation needs at least one teacher");
    };
    let topo = first.topology();
    if teachers.iter().any(|t| t.topology() != topo) {
        return contract("teachers differ in topology");
    }
    if topo.input_dim != train.dim() || topo.classes != train.classes() {
        return contract("teacher shape does not match the training data");
    }
    match kind {
        DistillKind::End if topo.head == HeadKind::Gaussian => return contract("EnD needs categorical or Dirichlet teachers"),
        DistillKind::H2dDir | DistillKind::H2dGauss if topo.head != HeadKind::Dirichlet => {
            return contract(format!("{kind:?} needs Dirichlet (S2D) teachers, got {:?}", topo.head))
        }
        _ => {}
    }

    let x = train.features();
    let logits = teacher_logits(teachers, x)?;
    let m = teachers.len() as f64;
    let k = topo.classes;
    let mut student = first.clone();
    let targets = match kind {
        DistillKind::End => {
            student.head = HeadKind::Categorical;
            let mut soft = Matrix::zeros(x.rows(), k);
            for z in &logits {
                for i in 0..x.rows() {
                    let p = softmax_unchecked(z.row(i), cfg.t_end);
                    soft.data_mut()[i * k..(i + 1) * k].iter_mut().zip(&p).for_each(|(s, v)| *s += v / m);
                }
            }
            Targets::Soft(soft)
        }
        DistillKind::H2dDir => Targets::Dirichlets(
            (0..x.rows())
                .map(|i| logits.iter().map(|z| alpha_from_logits(z.row(i))).collect::<Result<_>>())
                .collect::<Result<_>>()?,
        ),
        DistillKind::H2dGauss => {
            let proxies: Vec<DiagGaussian> = (0..x.rows())
                .map(|i| {
                    let logs: Vec<Vec<f64>> = logits.iter().map(|z| clamp_log_alpha(z.row(i))).collect();
                    fit_proxy_gaussian_log(&logs).map(|f| f.gaussian)
                })
                .collect::<Result<_>>()?;
            // σ head starts at the average proxy log-std, independent of the input
            let mut bias = vec![0.0; k];
            for g in &proxies {
                bias.iter_mut().zip(g.sigma()).for_each(|(b, s)| *b += s.ln() / proxies.len() as f64);
            }
            let hidden = student.output.inputs;
            student.head = HeadKind::Gaussian;
            student.sigma_head = Some(Dense {
                inputs: hidden,
                outputs: k,
                weight: vec![0.0; hidden * k],
                bias,
                activation: crate::net::Activation::Identity,
                dropout: 0.0,
            });
            Targets::Gaussians(proxies)
        }
    };
    student.validate()?;

    let schedule = Schedule { cfg, epochs: cfg.distill_epochs, lr: Box::new(|e| cfg.distill_lr_at(e)),
        weight_decay: cfg.distill_weight_decay,
        max_grad_norm: cfg.distill_max_grad_norm,
    };
    let log = run_sgd(&mut student, train.len(), schedule, derive_seed(cfg.seed, 3), test, |tape, net, idx, rng| {
        let xb = batch_input(tape, train, idx);
        let h = net.trunk(tape, xb, Some(rng));
        let h = net.output_dropout(tape, h, rng);
        let z = net.output(tape, h);
        match &targets {
            Targets::Soft(soft) => loss_end(tape, &soft.select_rows(idx), z, cfg.t_end),
            Targets::Dirichlets(all) => {
                let rows: Vec<Vec<DirichletParams>> = idx.iter().map(|&i| all[i].clone()).collect();
                loss_h2d_dir(tape, &rows, z)
            }
            Targets::Gaussians(all) => {
                let rows: Vec<DiagGaussian> = idx.iter().map(|&i| all[i].clone()).collect();
                let hd = tape.detach(h);
                let raw = net.sigma_raw(tape, hd).expect("student has a sigma head");
                let mu = gaussian_mu(tape, z);
                let sigma = gaussian_sigma(tape, raw);
                loss_h2d_gauss(tape, &rows, mu, sigma)
            }
        }
    })?;
    Ok(Trained { params: student, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_mixture, Split};
    use crate::net::forward_deterministic;

    fn separable() -> Dataset {
        gen_mixture(&[vec![-4.0, 0.0], vec![4.0, 0.0]], 40, 3).unwrap()
    }

    fn quick_cfg() -> ExperimentConfig {
        ExperimentConfig { epochs: 50, batch_size: 16, lr: 0.05, lr_milestones: vec![], ..Default::default() }
    }

    fn small() -> ModelSpec {
        ModelSpec { hidden: vec![16], ..Default::default() }
    }

    fn train_accuracy(p: &NetworkParams, ds: &Dataset) -> f64 {
        let outs = predict(Predictor::Single(p), ds.features(), &PredictOptions::default()).unwrap();
        let preds: Vec<_> = outs.into_iter().map(|o| o.probs).collect();
        accuracy(&preds, ds.labels()).unwrap()
    }

    #[test]
    fn separable_data_is_fit() {
        let ds = separable();
        for kind in [TrainKind::Standard, TrainKind::S2d] {
            let t = train_model(kind, &small(), &ds, Some(&ds), &quick_cfg()).unwrap();
            assert_eq!(train_accuracy(&t.params, &ds), 1.0, "{kind:?}");
            assert_eq!(t.log.len(), 50);
            assert_eq!(t.log.last().unwrap().test_acc, Some(1.0));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable();
        let cfg = ExperimentConfig { epochs: 3, ..quick_cfg() };
        let a = train_model(TrainKind::S2d, &small(), &ds, None, &cfg).unwrap();
        let b = train_model(TrainKind::S2d, &small(), &ds, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log_jsonl().unwrap(), b.log_jsonl().unwrap());
    }

    #[test]
    fn ensemble_members_follow_seeds() {
        let ds = separable();
        let cfg = ExperimentConfig { epochs: 2, m_ensemble: 3, ..quick_cfg() };
        let serial = train_deep_ensemble(TrainKind::Standard, &small(), &ds, None, &cfg, false).unwrap();
        let parallel = train_deep_ensemble(TrainKind::Standard, &small(), &ds, None, &cfg, true).unwrap();
        assert_eq!(serial, parallel);
        assert_ne!(serial[0].params, serial[1].params);
        assert_ne!(serial[1].params, serial[2].params);
        let one = train_deep_ensemble(TrainKind::Standard, &small(), &ds, None, &ExperimentConfig { m_ensemble: 1, ..cfg.clone() }, false).unwrap();
        assert_eq!(one[0], train_model(TrainKind::Standard, &small(), &ds, None, &cfg).unwrap());
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = ExperimentConfig { lr: 1.0, lr_milestones: vec![2, 4], lr_decay: 0.5, ..Default::default() };
        assert_eq!([0, 1, 2, 3, 4, 9].map(|e| cfg.lr_at(e)), [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
        let cfg = ExperimentConfig { distill_lr_factor: 0.5, distill_lr_milestones: vec![3], ..cfg };
        assert_eq!([0, 2, 3, 8].map(|e| cfg.distill_lr_at(e)), [0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = separable();
        let cfg = ExperimentConfig { lr: 1e6, momentum: 0.0, weight_decay: 0.0, epochs: 5, max_grad_norm: None, ..quick_cfg() };
        let err = train_model(TrainKind::Standard, &small(), &ds, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig { m_teacher: 1, ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig { mu: -1.0, ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig { m_ensemble: 0, ..Default::default() }.validate().is_err());
        let unknown: std::result::Result<ExperimentConfig, _> = serde_json::from_str(r#"{"epochs": 3, "bogus": 1}"#);
        assert!(unknown.is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(partial.mu, 1.28e-4);
        assert_eq!(partial.t_proxy, 1.5);
    }

    #[test]
    fn distill_kind_checks() {
        let ds = separable();
        let cfg = ExperimentConfig { epochs: 1, distill_epochs: 1, ..quick_cfg() };
        let std_t = train_model(TrainKind::Standard, &small(), &ds, None, &cfg).unwrap().params;
        assert!(matches!(distill(DistillKind::H2dDir, &[std_t.clone()], &ds, None, &cfg), Err(Error::Contract(_))));
        assert!(matches!(distill(DistillKind::H2dGauss, &[std_t.clone()], &ds, None, &cfg), Err(Error::Contract(_))));
        assert!(distill(DistillKind::End, &[std_t], &ds, None, &cfg).is_ok());
        assert!(matches!(distill(DistillKind::End, &[], &ds, None, &cfg), Err(Error::Contract(_))));
        let ood = crate::data::gen_ood_ring(5, 2, 10.0, 0).unwrap();
        assert_eq!(ood.split(), Split::Ood);
        assert!(train_model(TrainKind::Standard, &small(), &ood, None, &cfg).is_err());
    }

    #[test]
    fn s2d_without_noise_or_student_tracks_standard() {
        let ds = separable();
        let cfg = ExperimentConfig { epochs: 5, mu: 0.0, ..quick_cfg() };
        let quiet = ModelSpec { noise: NoiseSpec { std_lo: 0.0, std_hi: 0.0 }, ..small() };
        let a = train_model(TrainKind::Standard, &quiet, &ds, Some(&ds), &cfg).unwrap();
        let b = train_model(TrainKind::S2d, &quiet, &ds, Some(&ds), &cfg).unwrap();
        for (x, y) in a.log.iter().zip(&b.log) {
            assert!((x.train_loss - y.train_loss).abs() < 1e-9 * x.train_loss.max(1.0), "{x:?} {y:?}");
        }
    }

    fn s2d_batch_grads(net: &NetworkParams, x: &Matrix, labels: &[usize], mu: f64) -> ParamGrads {
        let mut tape = Tape::new();
        let bound = BoundNet::bind(net, &mut tape);
        let mut rng = seeded(11);
        let xv = tape.constant(x.clone());
        let h = bound.trunk(&mut tape, xv, None);
        let teacher = bound.teacher_passes(&mut tape, h, &net.noise, 5, &mut rng);
        let z = bound.output(&mut tape, h);
        let loss = loss_s2d_total(&mut tape, &teacher, z, labels, mu, 1.5).unwrap();
        bound.collect(&tape, &tape.backward(loss).unwrap())
    }

    #[test]
    fn student_loss_reaches_the_trunk() {
        let ds = separable();
        let net = NetworkParams::init(2, &[8, 8], 2, HeadKind::Dirichlet, 0.0, 4).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let x = ds.features().select_rows(&idx);
        let labels = batch_labels(&ds, &idx);
        let g0 = s2d_batch_grads(&net, &x, &labels, 0.0);
        let g1 = s2d_batch_grads(&net, &x, &labels, 0.5);
        // tensors 0..4 are the two trunk layers
        let diff: f64 = (0..4).flat_map(|t| g0.tensors[t].iter().zip(&g1.tensors[t]).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
        assert!(diff > 1e-8, "trunk gradient unchanged by the student loss");
    }

    #[test]
    fn proxy_path_is_detached() {
        let net = NetworkParams::init(2, &[8], 3, HeadKind::Dirichlet, 0.0, 5).unwrap();
        let x = Matrix::from_rows(&[vec![0.4, -1.0], vec![1.5, 0.3], vec![-0.7, 0.9]]).unwrap();
        let mut tape = Tape::new();
        let bound = BoundNet::bind(&net, &mut tape);
        let xv = tape.constant(x);
        let h = bound.trunk(&mut tape, xv, None);
        let teacher = bound.teacher_passes(&mut tape, h, &net.noise, 4, &mut seeded(2));
        let z = bound.output(&mut tape, h);
        let loss = crate::losses::loss_student_s2d(&mut tape, &teacher, z, 1.5).unwrap();
        let g = tape.backward(loss).unwrap();
        for t in &teacher {
            assert!(g.get(*t).is_none_or(|m| m.data().iter().all(|&v| v == 0.0)));
        }
        assert!(g.get(z).unwrap().data().iter().any(|&v| v != 0.0));
    }

    fn s2d_teacher(ds: &Dataset) -> NetworkParams {
        let cfg = ExperimentConfig { epochs: 5, ..quick_cfg() };
        train_model(TrainKind::S2d, &small(), ds, None, &cfg).unwrap().params
    }

    #[test]
    fn identical_teachers_distil_to_zero_loss() {
        let ds = separable();
        let t = s2d_teacher(&ds);
        let teachers = vec![t.clone(), t.clone(), t];
        let cfg = ExperimentConfig { distill_epochs: 5, ..quick_cfg() };
        for kind in [DistillKind::H2dDir, DistillKind::H2dGauss] {
            let s = distill(kind, &teachers, &ds, None, &cfg).unwrap();
            let last = s.log.last().unwrap().train_loss;
            assert!(last.abs() < 1e-4, "{kind:?}: {last}");
        }
        let s = distill(DistillKind::H2dDir, &teachers, &ds, None, &cfg).unwrap();
        let zs = s.params.logits_batch(ds.features()).unwrap();
        let zt = teachers[0].logits_batch(ds.features()).unwrap();
        for (a, b) in zs.data().iter().zip(zt.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn h2d_gauss_matches_the_proxy_of_one_input() {
        let x = vec![0.5, -0.3];
        let ds = Dataset::new(Matrix::from_rows(&[x.clone()]).unwrap(), vec![0], 3, Split::Train).unwrap();
        let a = NetworkParams::init(2, &[8], 3, HeadKind::Dirichlet, 0.0, 21).unwrap();
        let b = NetworkParams::init(2, &[8], 3, HeadKind::Dirichlet, 0.0, 22).unwrap();
        let logs: Vec<Vec<f64>> = [&a, &b].iter().map(|n| clamp_log_alpha(&forward_deterministic(n, &x).unwrap())).collect();
        // closed form for two members: midpoint mean, half-gap std
        let mu: Vec<f64> = (0..3).map(|c| (logs[0][c] + logs[1][c]) / 2.0).collect();
        let sigma: Vec<f64> = (0..3).map(|c| ((logs[0][c] - logs[1][c]) / 2.0).abs().max(crate::gaussian::SIGMA_MIN)).collect();
        let cfg = ExperimentConfig { distill_epochs: 3000, distill_lr_milestones: vec![], batch_size: 1, lr: 0.05, momentum: 0.5, ..Default::default() };
        let s = distill(DistillKind::H2dGauss, &[a, b], &ds, None, &cfg).unwrap();
        let row = Matrix::from_rows(&[x]).unwrap();
        let g = crate::predict::gaussian_for_row(s.params.logits_batch(&row).unwrap().row(0), s.params.log_sigma_batch(&row).unwrap().unwrap().row(0)).unwrap();
        for c in 0..3 {
            assert!((g.mu()[c] - mu[c]).abs() < 1e-3, "mu {c}: {} vs {}", g.mu()[c], mu[c]);
            assert!((g.sigma()[c] - sigma[c]).abs() < 1e-3, "sigma {c}: {} vs {}", g.sigma()[c], sigma[c]);
        }
    }
}
