//! Fully connected networks in the S2D topology: a ReLU trunk, one final
//! linear layer shared by the stochastic teacher passes and the
//! deterministic student path, and an optional secondary head predicting
//! log standard deviations for Gaussian students.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{seeded, standard_normal, SeededRng};
use crate::specfun::softmax_unchecked;
use crate::tape::{Gradients, Matrix, Tape, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// What the final logits mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Softmax over logits; standard and EnD models.
    Categorical,
    /// `α = exp(z)`; S2D models and H2D-Dir students.
    Dirichlet,
    /// `ln α ~ N(z, σ²)` with σ from the secondary head; H2D-Gauss students.
    Gaussian,
}

/// A fully connected layer. `dropout` is applied to the layer input when
/// dropout is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `inputs x outputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let scale = (2.0 / inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| scale * standard_normal(rng)).collect();
        Self { inputs, outputs, weight, bias: vec![0.0; outputs], activation, dropout: 0.0 }
    }

    fn weight_matrix(&self) -> Matrix {
        Matrix::from_vec(self.inputs, self.outputs, self.weight.clone()).expect("checked shape")
    }

    fn bias_matrix(&self) -> Matrix {
        Matrix::row_vector(self.bias.clone())
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight_matrix()).add_row(&self.bias_matrix());
        if self.activation == Activation::Relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        y
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.weight.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return contract(format!("{name}: weight/bias sizes do not match {}x{}", self.inputs, self.outputs));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return contract(format!("{name}: dropout rate {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Range of the per-pass standard deviation of the multiplicative noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std_lo: f64,
    pub std_hi: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { std_lo: 0.05, std_hi: 0.5 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.std_lo >= 0.0 && self.std_lo <= self.std_hi && self.std_hi.is_finite()) {
            return contract(format!("noise range [{}, {}] invalid", self.std_lo, self.std_hi));
        }
        Ok(())
    }

    fn draw_std(&self, rng: &mut SeededRng) -> f64 {
        if self.std_hi > self.std_lo {
            rng.random_range(self.std_lo..=self.std_hi)
        } else {
            self.std_lo
        }
    }
}

/// Shape summary used to check checkpoints against expectations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub head: HeadKind,
    pub sigma_head: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub trunk: Vec<Dense>,
    /// The final linear layer shared by teacher and student.
    pub output: Dense,
    pub sigma_head: Option<Dense>,
    pub head: HeadKind,
    pub noise: NoiseSpec,
}

impl NetworkParams {
    /// Seeded initialisation. A Gaussian head gets a σ head fed by the last
    /// hidden layer.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        head: HeadKind,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || classes < 2 || hidden.iter().any(|&h| h == 0) {
            return contract("network needs input_dim >= 1, classes >= 2 and non-empty layers");
        }
        let mut rng = seeded(seed);
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for (i, &h) in hidden.iter().enumerate() {
            let mut layer = Dense::init(prev, h, Activation::Relu, &mut rng);
            if i > 0 {
                layer.dropout = dropout;
            }
            trunk.push(layer);
            prev = h;
        }
        let mut output = Dense::init(prev, classes, Activation::Identity, &mut rng);
        output.dropout = dropout;
        let sigma_head = (head == HeadKind::Gaussian).then(|| Dense::init(prev, classes, Activation::Identity, &mut rng));
        let p = Self { trunk, output, sigma_head, head, noise: NoiseSpec::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input_dim();
        for (i, layer) in self.trunk.iter().enumerate() {
            layer.check(&format!("trunk.{i}"))?;
            if layer.inputs != prev {
                return contract(format!("trunk.{i} expects {} inputs, previous layer gives {prev}", layer.inputs));
            }
            prev = layer.outputs;
        }
        self.output.check("output")?;
        if self.output.inputs != prev {
            return contract(format!("output layer expects {} inputs, trunk gives {prev}", self.output.inputs));
        }
        match (&self.sigma_head, self.head) {
            (Some(s), HeadKind::Gaussian) => {
                s.check("sigma_head")?;
                if s.inputs != prev || s.outputs != self.output.outputs {
                    return contract("sigma head shape does not match trunk/output");
                }
            }
            (None, HeadKind::Gaussian) => return contract("gaussian head needs a sigma head"),
            (Some(_), _) => return contract("sigma head only allowed with a gaussian head"),
            (None, _) => {}
        }
        self.noise.validate()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().map_or(self.output.inputs, |l| l.inputs)
    }

    pub fn classes(&self) -> usize {
        self.output.outputs
    }

    pub fn topology(&self) -> Topology {
        Topology {
            input_dim: self.input_dim(),
            hidden: self.trunk.iter().map(|l| l.outputs).collect(),
            classes: self.classes(),
            head: self.head,
            sigma_head: self.sigma_head.is_some(),
        }
    }

    pub fn has_dropout(&self) -> bool {
        self.layers().any(|(_, l)| l.dropout > 0.0)
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Dense)> {
        self.trunk
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("trunk.{i}"), l))
            .chain(std::iter::once(("output".to_string(), &self.output)))
            .chain(self.sigma_head.iter().map(|l| ("sigma_head".to_string(), l)))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain(std::iter::once(&mut self.output)).chain(self.sigma_head.iter_mut())
    }

    /// Parameter tensors in canonical order with their names.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        self.layers()
            .flat_map(|(name, l)| [(format!("{name}.weight"), &l.weight[..]), (format!("{name}.bias"), &l.bias[..])])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return contract(format!("input has {cols} features, network expects {}", self.input_dim()));
        }
        Ok(())
    }

    /// Last hidden activation for a batch, no dropout.
    pub fn trunk_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x.cols())?;
        Ok(self.trunk.iter().fold(x.clone(), |h, l| l.apply(&h)))
    }

    /// Student-path logits for a batch; noise and dropout disabled.
    pub fn logits_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.output.apply(&self.trunk_batch(x)?))
    }

    /// Raw σ-head outputs (`ln σ` before clamping) for a batch.
    pub fn log_sigma_batch(&self, x: &Matrix) -> Result<Option<Matrix>> {
        let h = self.trunk_batch(x)?;
        Ok(self.sigma_head.as_ref().map(|s| s.apply(&h)))
    }

    /// Seeded MC-dropout logits for a batch: one mask set per call.
    fn logits_dropout_batch(&self, x: &Matrix, rng: &mut SeededRng) -> Matrix {
        let mut h = x.clone();
        for l in &self.trunk {
            h = l.apply(&dropout_mask_apply(&h, l.dropout, rng));
        }
        self.output.apply(&dropout_mask_apply(&h, self.output.dropout, rng))
    }

    pub fn save_checkpoint(&self, path: &Path, seed: u64) -> Result<()> {
        let ck = Checkpoint::from_params(self, seed);
        std::fs::write(path, serde_json::to_string_pretty(&ck)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64)> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ck.into_params(None)
    }

    /// Loads and rejects checkpoints whose topology differs from `expected`.
    pub fn load_checkpoint_expecting(path: &Path, expected: &Topology) -> Result<(Self, u64)> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ck.into_params(Some(expected))
    }
}

fn dropout_mask_apply(x: &Matrix, rate: f64, rng: &mut SeededRng) -> Matrix {
    if rate == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    let keep = 1.0 / (1.0 - rate);
    for v in out.data_mut() {
        *v = if rng.random::<f64>() < rate { 0.0 } else { *v * keep };
    }
    out
}

/// Student-path logits for one input. Bit-identical across calls.
pub fn forward_deterministic(p: &NetworkParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(p.logits_batch(&Matrix::row_vector(x.to_vec()))?.into_data())
}

/// Layer evaluations made by a forward routine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCalls {
    pub trunk: usize,
    pub output: usize,
}

/// `M` stochastic teacher logit vectors for one input: one trunk pass, then
/// per pass a std `s ~ U[std_lo, std_hi]`, multiplicative `N(1, s²)` noise
/// on the last hidden activation and the shared final layer.
pub fn forward_teacher_samples(p: &NetworkParams, spec: &NoiseSpec, x: &[f64], m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    forward_teacher_samples_instrumented(p, spec, x, m, seed).map(|(z, _)| z)
}

/// [`forward_teacher_samples`] that also reports how many layers it ran.
pub fn forward_teacher_samples_instrumented(
    p: &NetworkParams,
    spec: &NoiseSpec,
    x: &[f64],
    m: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, LayerCalls)> {
    if m == 0 {
        return contract("need at least one teacher pass");
    }
    spec.validate()?;
    p.check_input(x.len())?;
    let mut calls = LayerCalls::default();
    let mut h = Matrix::row_vector(x.to_vec());
    for l in &p.trunk {
        h = l.apply(&h);
        calls.trunk += 1;
    }
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let noisy = multiplicative_noise(&h, spec, &mut rng);
        out.push(p.output.apply(&noisy).into_data());
        calls.output += 1;
    }
    Ok((out, calls))
}

/// Row-wise multiplicative noise: per row a std `s` is drawn, then every
/// unit is scaled by an independent `N(1, s²)` draw.
fn noise_mask(rows: usize, cols: usize, spec: &NoiseSpec, rng: &mut SeededRng) -> Matrix {
    let mut mask = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let s = spec.draw_std(rng);
        for v in &mut mask.data_mut()[r * cols..(r + 1) * cols] {
            *v = 1.0 + s * standard_normal(rng);
        }
    }
    mask
}

fn multiplicative_noise(h: &Matrix, spec: &NoiseSpec, rng: &mut SeededRng) -> Matrix {
    let mask = noise_mask(h.rows(), h.cols(), spec, rng);
    let data = h.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
    Matrix::from_vec(h.rows(), h.cols(), data).expect("same shape")
}

/// `M` softmax outputs with Bernoulli dropout active (inverted scaling).
pub fn forward_mc_dropout(p: &NetworkParams, x: &[f64], m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    p.check_input(x.len())?;
    let xm = Matrix::row_vector(x.to_vec());
    let mut rng = seeded(seed);
    Ok((0..m).map(|_| softmax_unchecked(p.logits_dropout_batch(&xm, &mut rng).data(), 1.0)).collect())
}

/// Batched MC-dropout probabilities: `M` matrices of shape `n x K`.
pub fn mc_dropout_batch(p: &NetworkParams, x: &Matrix, m: usize, seed: u64) -> Result<Vec<Matrix>> {
    p.check_input(x.cols())?;
    let mut rng = seeded(seed);
    Ok((0..m)
        .map(|_| {
            let z = p.logits_dropout_batch(x, &mut rng);
            let rows: Vec<Vec<f64>> = (0..z.rows()).map(|i| softmax_unchecked(z.row(i), 1.0)).collect();
            Matrix::from_rows(&rows).expect("rectangular")
        })
        .collect())
}

/// Network parameters recorded on a tape.
pub struct BoundNet<'a> {
    params: &'a NetworkParams,
    trunk: Vec<(Var, Var)>,
    output: (Var, Var),
    sigma: Option<(Var, Var)>,
}

impl<'a> BoundNet<'a> {
    pub fn bind(params: &'a NetworkParams, tape: &mut Tape) -> Self {
        let mut bind = |l: &Dense| (tape.param(l.weight_matrix()), tape.param(l.bias_matrix()));
        let trunk = params.trunk.iter().map(&mut bind).collect();
        let output = bind(&params.output);
        let sigma = params.sigma_head.as_ref().map(bind);
        Self { params, trunk, output, sigma }
    }

    /// Last hidden activation. With `rng` set, dropout masks are drawn for
    /// layers whose rate is positive.
    pub fn trunk(&self, tape: &mut Tape, x: Var, mut rng: Option<&mut SeededRng>) -> Var {
        let mut h = x;
        for (layer, &(w, b)) in self.params.trunk.iter().zip(&self.trunk) {
            if let Some(r) = rng.as_deref_mut() {
                h = dropout_on_tape(tape, h, layer.dropout, r);
            }
            let y = tape.matmul(h, w);
            let y = tape.add_row(y, b);
            h = match layer.activation {
                Activation::Relu => tape.relu(y),
                Activation::Identity => y,
            };
        }
        h
    }

    /// Dropout on the input of the shared final layer, if active.
    pub fn output_dropout(&self, tape: &mut Tape, h: Var, rng: &mut SeededRng) -> Var {
        dropout_on_tape(tape, h, self.params.output.dropout, rng)
    }

    /// The shared final linear layer.
    pub fn output(&self, tape: &mut Tape, h: Var) -> Var {
        let y = tape.matmul(h, self.output.0);
        tape.add_row(y, self.output.1)
    }

    /// `M` teacher logit matrices from one hidden activation. Noise masks
    /// are constants of the pass.
    pub fn teacher_passes(&self, tape: &mut Tape, h: Var, spec: &NoiseSpec, m: usize, rng: &mut SeededRng) -> Vec<Var> {
        let (rows, cols) = (tape.value(h).rows(), tape.value(h).cols());
        (0..m)
            .map(|_| {
                let mask = tape.constant(noise_mask(rows, cols, spec, rng));
                let noisy = tape.mul(h, mask);
                self.output(tape, noisy)
            })
            .collect()
    }

    /// Raw σ-head output (`ln σ`). `h` is usually detached so the σ head
    /// does not move the shared trunk.
    pub fn sigma_raw(&self, tape: &mut Tape, h: Var) -> Option<Var> {
        self.sigma.map(|(w, b)| {
            let y = tape.matmul(h, w);
            tape.add_row(y, b)
        })
    }

    /// Gradients in canonical tensor order; absent gradients are zero.
    pub fn collect(&self, tape: &Tape, g: &Gradients) -> ParamGrads {
        let vars = self
            .trunk
            .iter()
            .chain(std::iter::once(&self.output))
            .chain(self.sigma.iter())
            .flat_map(|&(w, b)| [w, b]);
        ParamGrads {
            tensors: vars
                .map(|v| g.get(v).map_or_else(|| vec![0.0; tape.value(v).data().len()], |m| m.data().to_vec()))
                .collect(),
        }
    }
}

fn dropout_on_tape(tape: &mut Tape, h: Var, rate: f64, rng: &mut SeededRng) -> Var {
    if rate == 0.0 {
        return h;
    }
    let v = tape.value(h);
    let keep = 1.0 / (1.0 - rate);
    let data = (0..v.data().len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = tape.constant(Matrix::from_vec(v.rows(), v.cols(), data).expect("same shape"));
    tape.mul(h, mask)
}

/// Gradients for every parameter tensor, in [`NetworkParams::named_tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(p: &NetworkParams) -> Self {
        Self { tensors: p.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Momentum SGD with L2 weight decay. Velocities live with the optimiser.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return contract(format!("sgd needs lr > 0, momentum in [0,1), decay >= 0; got {lr}, {momentum}, {weight_decay}"));
        }
        Ok(Self { lr, momentum, weight_decay, velocity: None })
    }

    /// `v ← m·v + g + wd·w; w ← w − lr·v`. A non-finite gradient leaves
    /// the parameters untouched and names the offending tensor.
    pub fn step(&mut self, p: &mut NetworkParams, grads: &ParamGrads) -> Result<()> {
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        if grads.tensors.len() != names.len() {
            return contract(format!("{} gradient tensors for {} parameters", grads.tensors.len(), names.len()));
        }
        for (name, g) in names.iter().zip(&grads.tensors) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}[{i}]")));
            }
        }
        let velocity = self.velocity.get_or_insert_with(|| grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect());
        for ((w, g), v) in p.tensors_mut().into_iter().zip(&grads.tensors).zip(velocity.iter_mut()) {
            for i in 0..w.len() {
                v[i] = self.momentum * v[i] + g[i] + self.weight_decay * w[i];
                w[i] -= self.lr * v[i];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    inputs: usize,
    outputs: usize,
    activation: Activation,
    dropout: f64,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    topology: Topology,
    layers: Vec<LayerRecord>,
    noise: NoiseSpec,
    head: HeadKind,
    seed: u64,
}

impl Checkpoint {
    fn from_params(p: &NetworkParams, seed: u64) -> Self {
        let layers = p
            .layers()
            .map(|(name, l)| LayerRecord {
                name,
                inputs: l.inputs,
                outputs: l.outputs,
                activation: l.activation,
                dropout: l.dropout,
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            })
            .collect();
        Self { format_version: CHECKPOINT_FORMAT_VERSION, topology: p.topology(), layers, noise: p.noise, head: p.head, seed }
    }

    fn into_params(self, expected: Option<&Topology>) -> Result<(NetworkParams, u64)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return contract(format!("unsupported checkpoint format {}", self.format_version));
        }
        if let Some(t) = expected {
            if *t != self.topology {
                return contract(format!("checkpoint topology {:?} does not match expected {:?}", self.topology, t));
            }
        }
        let n_trunk = self.topology.hidden.len();
        let want = n_trunk + 1 + usize::from(self.topology.sigma_head);
        if self.layers.len() != want {
            return contract(format!("checkpoint has {} layers, topology needs {want}", self.layers.len()));
        }
        let mut dense = self.layers.into_iter().map(|r| Dense {
            inputs: r.inputs,
            outputs: r.outputs,
            weight: r.weight,
            bias: r.bias,
            activation: r.activation,
            dropout: r.dropout,
        });
        let trunk: Vec<Dense> = dense.by_ref().take(n_trunk).collect();
        let output = dense.next().expect("counted");
        let sigma_head = dense.next();
        let p = NetworkParams { trunk, output, sigma_head, head: self.head, noise: self.noise };
        p.validate()?;
        if p.topology() != self.topology {
            return contract("checkpoint layers disagree with its topology descriptor");
        }
        Ok((p, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(seed: u64) -> NetworkParams {
        NetworkParams::init(3, &[5, 4], 3, HeadKind::Dirichlet, 0.0, seed).unwrap()
    }

    #[test]
    fn identity_and_zero_layers() {
        let mut p = NetworkParams::init(3, &[], 3, HeadKind::Categorical, 0.0, 0).unwrap();
        p.output.weight = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(forward_deterministic(&p, &[0.5, -2.0, 3.0]).unwrap(), vec![0.5, -2.0, 3.0]);
        p.output.weight = vec![0.0; 9];
        p.output.bias = vec![1.0, 2.0, 3.0];
        assert_eq!(forward_deterministic(&p, &[0.5, -2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(forward_deterministic(&p, &[1.0]).is_err());
    }

    #[test]
    fn deterministic_forward_is_repeatable() {
        let p = net(7);
        let x = [0.3, -1.2, 2.0];
        let a = forward_deterministic(&p, &x).unwrap();
        let b = forward_deterministic(&p, &x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn teacher_without_noise_matches_student() {
        let p = net(2);
        let x = [1.0, 0.5, -0.5];
        let spec = NoiseSpec { std_lo: 0.0, std_hi: 0.0 };
        let det = forward_deterministic(&p, &x).unwrap();
        for z in forward_teacher_samples(&p, &spec, &x, 4, 9).unwrap() {
            assert_eq!(z, det);
        }
        let spec = NoiseSpec::default();
        let a = forward_teacher_samples(&p, &spec, &x, 1, 3).unwrap();
        assert_eq!(a, forward_teacher_samples(&p, &spec, &x, 1, 3).unwrap());
        assert!(forward_teacher_samples(&p, &spec, &x, 0, 3).is_err());
    }

    #[test]
    fn teacher_passes_share_one_trunk_evaluation() {
        let p = net(4);
        let (z, calls) = forward_teacher_samples_instrumented(&p, &NoiseSpec::default(), &[0.1, 0.2, 0.3], 7, 0).unwrap();
        assert_eq!(z.len(), 7);
        assert_eq!(calls, LayerCalls { trunk: 2, output: 7 });
    }

    #[test]
    fn noise_has_unit_mean() {
        let n = 1_000_000;
        let spec = NoiseSpec::default();
        let mask = noise_mask(n, 1, &spec, &mut seeded(5));
        let mean = mask.data().iter().sum::<f64>() / n as f64;
        let var = mask.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
        // E[s²] for s ~ U[0.05, 0.5]
        let es2 = (0.5f64.powi(3) - 0.05f64.powi(3)) / (3.0 * 0.45);
        assert!((var - es2).abs() < 0.01 * es2 + 5.0 * se);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let n = 1_000_000;
        let x = Matrix::from_vec(n, 1, vec![2.5; n]).unwrap();
        let y = dropout_mask_apply(&x, 0.5, &mut seeded(1));
        let mean = y.data().iter().sum::<f64>() / n as f64;
        // each entry is 0 or 5, so the standard error is 2.5/sqrt(n)
        assert!((mean - 2.5).abs() < 3.0 * 2.5 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn mc_dropout_members() {
        let p = net(3);
        let x = [0.2, 0.4, -0.1];
        let members = forward_mc_dropout(&p, &x, 5, 1).unwrap();
        assert!(members.windows(2).all(|w| w[0] == w[1]));
        let mut q = NetworkParams::init(3, &[16, 16], 3, HeadKind::Categorical, 0.5, 3).unwrap();
        q.output.bias = vec![0.1, 0.0, -0.1];
        let a = forward_mc_dropout(&q, &x, 5, 1).unwrap();
        assert_eq!(a, forward_mc_dropout(&q, &x, 5, 1).unwrap());
        assert!(a.windows(2).any(|w| w[0] != w[1]));
        let batch = mc_dropout_batch(&q, &Matrix::row_vector(x.to_vec()), 5, 1).unwrap();
        for (m, b) in a.iter().zip(&batch) {
            assert_eq!(&m[..], b.row(0));
        }
    }

    #[test]
    fn sgd_updates() {
        let base = NetworkParams::init(1, &[], 2, HeadKind::Categorical, 0.0, 0).unwrap();
        let g = ParamGrads { tensors: vec![vec![1.0, -2.0], vec![0.5, 0.0]] };

        let mut p = base.clone();
        Sgd::new(0.1, 0.0, 0.0).unwrap().step(&mut p, &g).unwrap();
        assert_eq!(p.output.weight, vec![base.output.weight[0] - 0.1, base.output.weight[1] + 0.2]);
        assert_eq!(p.output.bias, vec![-0.05, 0.0]);

        let mut p = base.clone();
        Sgd::new(0.1, 0.9, 0.0).unwrap().step(&mut p, &ParamGrads::zeros_like(&base)).unwrap();
        assert_eq!(p, base);

        let mut p = base.clone();
        let mut opt = Sgd::new(1.0, 0.9, 0.0).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        for i in 0..2 {
            let dw = p.output.weight[i] - base.output.weight[i];
            assert!((dw + 2.9 * g.tensors[0][i]).abs() < 1e-12);
        }

        let bad = ParamGrads { tensors: vec![vec![f64::NAN, 0.0], vec![0.0, 0.0]] };
        let err = Sgd::new(0.1, 0.0, 0.0).unwrap().step(&mut p.clone(), &bad).unwrap_err();
        assert!(err.to_string().contains("output.weight"));
        assert!(Sgd::new(0.0, 0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn bound_forward_matches_plain_forward() {
        let p = net(11);
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 2.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let bound = BoundNet::bind(&p, &mut tape);
        let xv = tape.constant(x.clone());
        let h = bound.trunk(&mut tape, xv, None);
        let z = bound.output(&mut tape, h);
        assert_eq!(tape.value(z), &p.logits_batch(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p = NetworkParams::init(2, &[8, 8], 3, HeadKind::Gaussian, 0.0, 5).unwrap();
        p.save_checkpoint(&path, 5).unwrap();
        let (q, seed) = NetworkParams::load_checkpoint(&path).unwrap();
        assert_eq!((q, seed), (p.clone(), 5));
        let mut other = p.topology();
        other.hidden = vec![8, 16];
        assert!(NetworkParams::load_checkpoint_expecting(&path, &other).is_err());
        assert!(NetworkParams::load_checkpoint_expecting(&path, &p.topology()).is_ok());
    }

    #[test]
    fn invalid_networks_rejected() {
        assert!(NetworkParams::init(2, &[4], 1, HeadKind::Categorical, 0.0, 0).is_err());
        assert!(NetworkParams::init(2, &[4], 2, HeadKind::Categorical, 1.0, 0).is_err());
        let mut p = net(0);
        p.trunk[1].inputs = 3;
        assert!(p.validate().is_err());
    }
}
