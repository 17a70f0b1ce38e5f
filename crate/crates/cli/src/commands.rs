use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use s2d_core::data::{gen_mixture, gen_ood_ring, load_csv, save_csv, Dataset, Split};
use s2d_core::metrics::{eval_report, write_histogram_csv, write_scores_csv, ModelOutput};
use s2d_core::net::{HeadKind, NetworkParams};
use s2d_core::predict::{predict, PredictOptions, Predictor};
use s2d_core::rng::derive_seed;
use s2d_core::tape::Matrix;
use s2d_core::training::{distill as distill_model, train_model, DistillKind, Trained};
use serde::Serialize;
use serde_json::json;

use crate::config::{EvalMode, RunConfig};
use crate::report::{aggregate, Aggregate, RunReport};
use crate::ValidationError;

fn reject<T>(msg: impl Into<String>) -> Result<T> {
    Err(ValidationError(msg.into()).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Creates the output directory and writes the config echo.
fn prepare_output(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    write_json(&cfg.output.join("config.json"), cfg)
}

/// The only artifact carrying a timestamp.
fn write_manifest(cfg: &RunConfig, command: &str, inputs: &[PathBuf], outputs: &[String]) -> Result<()> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "command": command,
        "timestamp_unix": ts,
        "seeds": cfg.seeds,
        "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "outputs": outputs,
        "parameters": cfg,
    });
    write_json(&cfg.output.join(format!("manifest_{command}.json")), &manifest)
}

fn require_files(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return reject(format!("data file {} does not exist", p.display()));
        }
    }
    Ok(())
}

fn load_labelled(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (tp, sp) = (cfg.train_path(), cfg.test_path());
    require_files(&[&tp, &sp])?;
    let train = load_csv(&tp, None).with_context(|| format!("loading {}", tp.display()))?;
    let test = load_csv(&sp, Some(train.classes())).with_context(|| format!("loading {}", sp.display()))?;
    if !train.is_labelled() || !test.is_labelled() {
        return reject("train and test data must be labelled");
    }
    if test.dim() != train.dim() {
        return reject(format!("test data has {} features, train data {}", test.dim(), train.dim()));
    }
    Ok((train, test.with_split(Split::Test)?))
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<NetworkParams>> {
    paths
        .iter()
        .map(|p| {
            if !p.is_file() {
                return reject(format!("checkpoint {} does not exist", p.display()));
            }
            NetworkParams::load_checkpoint(p).map(|(n, _)| n).with_context(|| format!("loading checkpoint {}", p.display()))
        })
        .collect()
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let g = &cfg.data.generator;
    let means = g.class_means();
    let train = gen_mixture(&means, g.n_train_per_class, derive_seed(g.seed, 0))?;
    let test = gen_mixture(&means, g.n_test_per_class, derive_seed(g.seed, 1))?.with_split(Split::Test)?;
    let ood = gen_ood_ring(g.ood_n, means[0].len(), g.ood_radius, derive_seed(g.seed, 2))?;
    prepare_output(cfg)?;
    let files = [("train.csv", &train), ("test.csv", &test), ("ood_ring.csv", &ood)];
    for (name, ds) in files {
        let path = cfg.output.join(name);
        save_csv(ds, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    let outputs: Vec<String> = files.iter().map(|(n, _)| n.to_string()).chain(["config.json".into()]).collect();
    write_manifest(cfg, "gen-data", &[], &outputs)
}

fn train_kind_name(cfg: &RunConfig) -> String {
    serde_json::to_value(cfg.model.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

pub fn train(cfg: &RunConfig, parallel: bool) -> Result<()> {
    let (train, test) = load_labelled(cfg)?;
    let spec = cfg.model.spec();
    let run_one = |seed: u64| train_model(cfg.model.kind, &spec, &train, Some(&test), &cfg.experiment(seed));
    let trained: Vec<s2d_core::Result<Trained>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg.seeds.iter().map(|&seed| s.spawn(move || run_one(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    } else {
        cfg.seeds.iter().map(|&seed| run_one(seed)).collect()
    };
    prepare_output(cfg)?;
    let kind = train_kind_name(cfg);
    let mut outputs = Vec::new();
    for (&seed, t) in cfg.seeds.iter().zip(trained) {
        let t = t.with_context(|| format!("training seed {seed}"))?;
        let stem = format!("{kind}_seed{seed}");
        t.params.save_checkpoint(&cfg.output.join(format!("{stem}.json")), seed)?;
        std::fs::write(cfg.output.join(format!("{stem}.log.jsonl")), t.log_jsonl()?)?;
        outputs.extend([format!("{stem}.json"), format!("{stem}.log.jsonl")]);
    }
    write_manifest(cfg, "train", &[cfg.train_path(), cfg.test_path()], &outputs)
}

fn distill_kind_name(kind: DistillKind) -> &'static str {
    match kind {
        DistillKind::End => "end",
        DistillKind::H2dDir => "h2d_dir",
        DistillKind::H2dGauss => "h2d_gauss",
    }
}

pub fn distill(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<()> {
    let kind = cfg.distill.kind;
    let teachers = load_checkpoints(checkpoints)?;
    let topo = teachers[0].topology();
    if teachers.iter().any(|t| t.topology() != topo) {
        return reject("contract error: teacher checkpoints differ in topology");
    }
    match kind {
        DistillKind::H2dDir | DistillKind::H2dGauss if topo.head != HeadKind::Dirichlet => {
            return reject(format!("contract error: {} needs S2D (Dirichlet) teachers, got {:?} heads", distill_kind_name(kind), topo.head));
        }
        DistillKind::End if topo.head == HeadKind::Gaussian => return reject("contract error: end needs categorical or Dirichlet teachers"),
        _ => {}
    }
    let (train, test) = load_labelled(cfg)?;
    if train.dim() != topo.input_dim || train.classes() != topo.classes {
        return reject("contract error: teacher shape does not match the data");
    }
    let seed = cfg.seeds[0];
    let student = distill_model(kind, &teachers, &train, Some(&test), &cfg.experiment(seed))?;
    prepare_output(cfg)?;
    let stem = format!("student_{}", distill_kind_name(kind));
    student.params.save_checkpoint(&cfg.output.join(format!("{stem}.json")), seed)?;
    std::fs::write(cfg.output.join(format!("{stem}.log.jsonl")), student.log_jsonl()?)?;
    write_manifest(cfg, "distill", checkpoints, &[format!("{stem}.json"), format!("{stem}.log.jsonl")])
}

/// One evaluated model: a name and how to predict with it.
struct EvalRun<'a> {
    name: String,
    predictor: Predictor<'a>,
}

fn check_ensemble(members: &[NetworkParams]) -> Result<()> {
    let head = members[0].head;
    if members.iter().any(|m| m.head != head || m.topology() != members[0].topology()) {
        return reject("contract error: ensemble members differ in topology or head");
    }
    if head == HeadKind::Gaussian {
        return reject("contract error: ensembles of gaussian-head students are not supported");
    }
    Ok(())
}

fn eval_runs<'a>(cfg: &RunConfig, paths: &[PathBuf], nets: &'a [NetworkParams]) -> Result<Vec<EvalRun<'a>>> {
    let stem = |p: &PathBuf| p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    match cfg.eval.mode {
        EvalMode::Single => Ok(paths.iter().zip(nets).map(|(p, n)| EvalRun { name: stem(p), predictor: Predictor::Single(n) }).collect()),
        EvalMode::Ensemble => {
            check_ensemble(nets)?;
            Ok(vec![EvalRun { name: "ensemble".into(), predictor: Predictor::Ensemble(nets) }])
        }
        EvalMode::McDropout => paths
            .iter()
            .zip(nets)
            .map(|(p, n)| {
                if !n.has_dropout() {
                    return reject(format!("{} has no dropout layers for MC evaluation", p.display()));
                }
                Ok(EvalRun { name: format!("{}_mc", stem(p)), predictor: Predictor::McDropout { net: n, samples: cfg.eval.mc_dropout_samples } })
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct EvalOutput {
    mode: EvalMode,
    checkpoints: Vec<String>,
    runs: Vec<RunReport>,
    aggregate: Aggregate,
}

struct Evaluated {
    report: RunReport,
    id: Vec<ModelOutput>,
    ood: Vec<(String, Vec<ModelOutput>)>,
}

fn evaluate(run: &EvalRun<'_>, test: &Dataset, ood_sets: &[(String, Dataset)], opts: &PredictOptions, ece_bins: usize) -> s2d_core::Result<Evaluated> {
    let id = predict(run.predictor, test.features(), opts)?;
    let ood: Vec<(String, Vec<ModelOutput>)> = ood_sets
        .iter()
        .map(|(name, ds)| Ok((name.clone(), predict(run.predictor, ds.features(), opts)?)))
        .collect::<s2d_core::Result<_>>()?;
    let report = RunReport::new(run.name.clone(), eval_report(&id, test.labels(), &ood, ece_bins)?);
    Ok(Evaluated { report, id, ood })
}

pub fn eval(cfg: &RunConfig, checkpoints: &[PathBuf], parallel: bool) -> Result<()> {
    let nets = load_checkpoints(checkpoints)?;
    let (_, test) = load_labelled(cfg)?;
    let mut ood_sets = Vec::new();
    for (name, path) in cfg.ood_paths() {
        require_files(&[&path])?;
        let ds = load_csv(&path, None).with_context(|| format!("loading {}", path.display()))?;
        if ds.dim() != test.dim() {
            return reject(format!("OOD set {name} has {} features, test data {}", ds.dim(), test.dim()));
        }
        ood_sets.push((name, ds));
    }
    for (p, n) in checkpoints.iter().zip(&nets) {
        if n.input_dim() != test.dim() || n.classes() != test.classes() {
            return reject(format!("contract error: {} does not match the test data shape", p.display()));
        }
    }
    let runs = eval_runs(cfg, checkpoints, &nets)?;
    let opts = PredictOptions { mc_samples: cfg.eval.mc_samples, seed: cfg.seeds[0] };
    let bins = cfg.eval.ece_bins;
    let results: Vec<s2d_core::Result<Evaluated>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = runs.iter().map(|r| s.spawn(|| evaluate(r, &test, &ood_sets, &opts, bins))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
        })
    } else {
        runs.iter().map(|r| evaluate(r, &test, &ood_sets, &opts, bins)).collect()
    };

    prepare_output(cfg)?;
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    for (run, res) in runs.iter().zip(results) {
        let ev = res.with_context(|| format!("evaluating {}", run.name))?;
        for (set, outs) in &ev.ood {
            let scores = format!("scores_{}_{set}.csv", run.name);
            let hist = format!("hist_{}_{set}.csv", run.name);
            write_scores_csv(&cfg.output.join(&scores), &ev.id, outs)?;
            write_histogram_csv(&cfg.output.join(&hist), &ev.id, outs, cfg.eval.histogram_bins)?;
            outputs.extend([scores, hist]);
        }
        reports.push(ev.report);
    }
    let out = EvalOutput {
        mode: cfg.eval.mode,
        checkpoints: checkpoints.iter().map(|p| file_name(p)).collect(),
        aggregate: aggregate(&reports),
        runs: reports,
    };
    write_json(&cfg.output.join("eval_report.json"), &out)?;
    outputs.push("eval_report.json".into());
    write_manifest(cfg, "eval", checkpoints, &outputs)
}

fn parse_input(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect::<Option<Vec<_>>>()
        .map_or_else(|| reject(format!("--input must be comma-separated finite numbers, got '{s}'")), Ok)
}

#[derive(Serialize)]
struct Decomposed {
    method: &'static str,
    /// Monte-Carlo samples or ensemble members behind the estimate.
    samples: Option<usize>,
    probs: Vec<f64>,
    confidence: f64,
    total: f64,
    data: Option<f64>,
    knowledge: Option<f64>,
}

/// JSON record for one input: one checkpoint uses its own decomposition,
/// several form a deep ensemble.
pub fn decompose(cfg: &RunConfig, checkpoints: &[PathBuf], input: &str) -> Result<String> {
    let x = parse_input(input)?;
    let nets = load_checkpoints(checkpoints)?;
    for (p, n) in checkpoints.iter().zip(&nets) {
        if n.input_dim() != x.len() {
            return reject(format!("contract error: {} expects {} features, input has {}", p.display(), n.input_dim(), x.len()));
        }
    }
    let (predictor, method, samples) = if nets.len() > 1 {
        check_ensemble(&nets)?;
        (Predictor::Ensemble(&nets), "ensemble", Some(nets.len()))
    } else if cfg.eval.mode == EvalMode::McDropout {
        if !nets[0].has_dropout() {
            return reject("checkpoint has no dropout layers for MC evaluation");
        }
        let n = cfg.eval.mc_dropout_samples;
        (Predictor::McDropout { net: &nets[0], samples: n }, "mc_dropout", Some(n))
    } else {
        match nets[0].head {
            HeadKind::Categorical => (Predictor::Single(&nets[0]), "categorical", None),
            HeadKind::Dirichlet => (Predictor::Single(&nets[0]), "dirichlet", None),
            HeadKind::Gaussian => (Predictor::Single(&nets[0]), "gaussian_mc", Some(cfg.eval.mc_samples)),
        }
    };
    let opts = PredictOptions { mc_samples: cfg.eval.mc_samples, seed: cfg.seeds[0] };
    let row = Matrix::from_rows(&[x])?;
    let out = predict(predictor, &row, &opts)?.remove(0);
    let rec = Decomposed {
        method,
        samples,
        probs: out.probs.probs().to_vec(),
        confidence: out.confidence,
        total: out.total,
        data: out.data,
        knowledge: out.knowledge,
    };
    Ok(serde_json::to_string_pretty(&rec)?)
}
