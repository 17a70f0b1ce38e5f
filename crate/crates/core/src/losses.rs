//! Training objectives recorded on a [`Tape`]. Every loss is averaged over
//! the rows of the batch. Proxy targets (fitted Dirichlets and Gaussians)
//! enter as constants and never receive gradient.

use crate::dirichlet::{fit_dirichlet_mle, CategoricalDist, DirichletParams, ALPHA_CAP, EPS_ALPHA};
use crate::error::{contract, Error, Result};
use crate::gaussian::{DiagGaussian, SIGMA_MAX, SIGMA_MIN};
use crate::specfun::{digamma_unchecked, log_gamma_unchecked, softmax_unchecked};
use crate::tape::{Matrix, Tape, Var};

/// Mean cross-entropy `−ln softmax(z)[y]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, logits, labels)?;
    let ls = tape.log_softmax(logits);
    let picked = tape.pick(ls, labels);
    let mean = tape.mean_all(picked);
    Ok(tape.scale(mean, -1.0))
}

fn check_labels(tape: &Tape, logits: Var, labels: &[usize]) -> Result<()> {
    let v = tape.value(logits);
    if labels.len() != v.rows() {
        return contract(format!("{} labels for {} rows", labels.len(), v.rows()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= v.cols()) {
        return contract(format!("label {y} out of range for K={}", v.cols()));
    }
    Ok(())
}

/// Teacher loss: cross-entropy averaged over the `M` stochastic passes.
pub fn loss_teacher(tape: &mut Tape, teacher: &[Var], labels: &[usize]) -> Result<Var> {
    if teacher.is_empty() {
        return contract("teacher loss needs at least one pass");
    }
    let mut total: Option<Var> = None;
    for &z in teacher {
        let ce = cross_entropy(tape, z, labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce),
            None => ce,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / teacher.len() as f64))
}

/// Per-row proxy Dirichlets: the ML fit to `softmax(z_m / T)` over passes.
/// Reads values only, so the result is detached from the graph.
pub fn s2d_proxies(tape: &Tape, teacher: &[Var], t_proxy: f64) -> Result<Vec<DirichletParams>> {
    if teacher.len() < 2 {
        return contract(format!("proxy fitting needs at least 2 teacher passes, got {}", teacher.len()));
    }
    if !(t_proxy > 0.0) {
        return contract(format!("proxy temperature must be positive, got {t_proxy}"));
    }
    let rows = tape.value(teacher[0]).rows();
    (0..rows)
        .map(|r| {
            let samples: Vec<CategoricalDist> = teacher
                .iter()
                .map(|&z| CategoricalDist::new(softmax_unchecked(tape.value(z).row(r), t_proxy)))
                .collect::<Result<_>>()?;
            fit_dirichlet_mle(&samples).map(|f| f.params).map_err(|e| Error::Numeric(format!("proxy fit failed on row {r}: {e}")))
        })
        .collect()
}

/// Mean over rows of `(1/M_r) Σ_m KL(Dir(p_rm) ‖ Dir(clamp(exp(z_r))))`.
///
/// With the targets fixed, the KL is `const − ln Γ(q0) + Σ ln Γ(q_c) −
/// Σ q_c (ψ(p_c) − ψ(p0))`, and the member average only averages the
/// constant and the linear coefficient.
pub fn dirichlet_kl_to_student(tape: &mut Tape, targets: &[Vec<DirichletParams>], student_logits: Var) -> Result<Var> {
    let (rows, k) = (tape.value(student_logits).rows(), tape.value(student_logits).cols());
    if targets.len() != rows {
        return contract(format!("{} target sets for {rows} rows", targets.len()));
    }
    let mut constant = Matrix::zeros(rows, 1);
    let mut coeff = Matrix::zeros(rows, k);
    for (r, members) in targets.iter().enumerate() {
        if members.is_empty() {
            return contract("every row needs at least one target Dirichlet");
        }
        let m = members.len() as f64;
        for p in members {
            if p.k() != k {
                return contract(format!("target has K={}, student K={k}", p.k()));
            }
            let psi0 = digamma_unchecked(p.alpha0());
            let mut c = log_gamma_unchecked(p.alpha0());
            for (j, &a) in p.alpha().iter().enumerate() {
                let d = digamma_unchecked(a) - psi0;
                c += a * d - log_gamma_unchecked(a);
                coeff.data_mut()[r * k + j] += d / m;
            }
            constant.data_mut()[r] += c / m;
        }
    }
    let e = tape.exp(student_logits);
    let q = tape.clamp(e, EPS_ALPHA, ALPHA_CAP);
    let q0 = tape.sum_rows(q);
    let lg_q0 = tape.ln_gamma(q0);
    let lg_q = tape.ln_gamma(q);
    let sum_lg_q = tape.sum_rows(lg_q);
    let coeff = tape.constant(coeff);
    let lin = tape.mul(q, coeff);
    let lin = tape.sum_rows(lin);
    let constant = tape.constant(constant);
    let kl = tape.sub(constant, lg_q0);
    let kl = tape.add(kl, sum_lg_q);
    let kl = tape.sub(kl, lin);
    Ok(tape.mean_all(kl))
}

/// Student loss: `KL(proxy ‖ student)` with the proxy fitted to the
/// temperature-scaled teacher passes.
pub fn loss_student_s2d(tape: &mut Tape, teacher: &[Var], student_logits: Var, t_proxy: f64) -> Result<Var> {
    let proxies = s2d_proxies(tape, teacher, t_proxy)?;
    let targets: Vec<Vec<DirichletParams>> = proxies.into_iter().map(|p| vec![p]).collect();
    dirichlet_kl_to_student(tape, &targets, student_logits)
}

/// `L_teacher + μ · L_student`. With `μ = 0` the student term is not
/// recorded and the result is exactly the teacher loss.
pub fn loss_s2d_total(
    tape: &mut Tape,
    teacher: &[Var],
    student_logits: Var,
    labels: &[usize],
    mu: f64,
    t_proxy: f64,
) -> Result<Var> {
    if !(mu >= 0.0) {
        return contract(format!("student weight must be non-negative, got {mu}"));
    }
    let lt = loss_teacher(tape, teacher, labels)?;
    if mu == 0.0 {
        return Ok(lt);
    }
    let ls = loss_student_s2d(tape, teacher, student_logits, t_proxy)?;
    let ls = tape.scale(ls, mu);
    Ok(tape.add(lt, ls))
}

/// EnD: cross-entropy of `softmax(z / T)` against fixed soft targets
/// (rows of `target`, already temperature-scaled ensemble averages).
pub fn loss_end(tape: &mut Tape, target: &Matrix, student_logits: Var, t_end: f64) -> Result<Var> {
    let v = tape.value(student_logits);
    if (target.rows(), target.cols()) != (v.rows(), v.cols()) {
        return contract("soft targets and logits differ in shape");
    }
    if !(t_end > 0.0) {
        return contract(format!("temperature must be positive, got {t_end}"));
    }
    let scaled = tape.scale(student_logits, 1.0 / t_end);
    let ls = tape.log_softmax(scaled);
    let t = tape.constant(target.clone());
    let prod = tape.mul(ls, t);
    let rows = tape.sum_rows(prod);
    let mean = tape.mean_all(rows);
    Ok(tape.scale(mean, -1.0))
}

/// H2D-Dir: mean over members of `KL(Dir(α_m) ‖ student)`, per row.
pub fn loss_h2d_dir(tape: &mut Tape, members: &[Vec<DirichletParams>], student_logits: Var) -> Result<Var> {
    dirichlet_kl_to_student(tape, members, student_logits)
}

/// Student Gaussian mean: logits clamped to the valid `ln α` range.
pub fn gaussian_mu(tape: &mut Tape, logits: Var) -> Var {
    tape.clamp(logits, EPS_ALPHA.ln(), ALPHA_CAP.ln())
}

/// Student Gaussian std: `clamp(exp(raw), σ_min, σ_max)`.
pub fn gaussian_sigma(tape: &mut Tape, raw: Var) -> Var {
    let e = tape.exp(raw);
    tape.clamp(e, SIGMA_MIN, SIGMA_MAX)
}

/// H2D-Gauss: mean over rows of `KL(N(μ̃, σ̃²) ‖ N(μ, σ²))` with fixed
/// per-row proxies.
pub fn loss_h2d_gauss(tape: &mut Tape, proxies: &[DiagGaussian], student_mu: Var, student_sigma: Var) -> Result<Var> {
    let (rows, k) = (tape.value(student_mu).rows(), tape.value(student_mu).cols());
    if proxies.len() != rows || tape.value(student_sigma).rows() != rows || tape.value(student_sigma).cols() != k {
        return contract("proxy count or student shapes do not match");
    }
    let mut pm = Matrix::zeros(rows, k);
    let mut pvar = Matrix::zeros(rows, k);
    let mut constant = Matrix::zeros(rows, 1);
    for (r, g) in proxies.iter().enumerate() {
        if g.k() != k {
            return contract(format!("proxy has K={}, student K={k}", g.k()));
        }
        for c in 0..k {
            pm.data_mut()[r * k + c] = g.mu()[c];
            pvar.data_mut()[r * k + c] = g.sigma()[c] * g.sigma()[c];
            constant.data_mut()[r] -= g.sigma()[c].ln() + 0.5;
        }
    }
    let pm = tape.constant(pm);
    let pvar = tape.constant(pvar);
    let diff = tape.sub(student_mu, pm);
    let d2 = tape.square(diff);
    let num = tape.add(pvar, d2);
    let s2 = tape.square(student_sigma);
    let den = tape.scale(s2, 2.0);
    let ratio = tape.div(num, den);
    let ln_s = tape.ln(student_sigma);
    let per = tape.add(ln_s, ratio);
    let per = tape.sum_rows(per);
    let constant = tape.constant(constant);
    let kl = tape.add(per, constant);
    Ok(tape.mean_all(kl))
}
