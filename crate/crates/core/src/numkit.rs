//! Deterministic numerical fitting primitives: weighted logistic and
//! multinomial logistic regression by Newton's method with step-halving, and
//! weighted least squares.
//!
//! All probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any
//! log or division so that EM posteriors and downstream weight formulas never
//! see an infinity.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ErrorClass;

/// Clamp applied to every probability before logs and divisions.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("total weight must be positive")]
    ZeroTotalWeight,
    #[error("class label {0} out of range for a {1}-class model")]
    ClassOutOfRange(usize, usize),
    #[error("system is singular and the ridge fallback is disabled")]
    SingularSystem,
}

impl NumError {
    pub fn class(&self) -> ErrorClass {
        match self {
            NumError::SingularSystem => ErrorClass::Numerical,
            _ => ErrorClass::Validation,
        }
    }
}

/// Newton/IRLS settings shared by the logistic and multinomial fits.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Relative log-likelihood change below which a step counts as stalled.
    pub ll_tol: f64,
    /// Gradient norm below which the fit counts as converged.
    pub grad_tol: f64,
    /// L2 penalty on non-intercept coefficients when the fallback engages.
    pub ridge: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { max_iterations: 200, ll_tol: 1e-10, grad_tol: 1e-8, ridge: 1e-8 }
    }
}

/// A fitted weighted logistic or multinomial logistic model.
///
/// `coefficients` holds one vector per class in class order; the reference
/// class vector is identically zero. Class probabilities are the softmax of
/// the per-class linear predictors.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefficients: Vec<DVector<f64>>,
    pub reference: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    /// Weighted log-likelihood at the returned coefficients (unpenalized).
    pub log_likelihood: f64,
    /// Perfect separation (saturated fit) was detected; the ridge fallback
    /// was engaged and the fit is still returned.
    pub separation: bool,
    /// The ridge fallback was engaged (separation or a singular Hessian).
    pub ridged: bool,
}

impl GlmFit {
    pub fn n_classes(&self) -> usize {
        self.coefficients.len()
    }

    pub fn width(&self) -> usize {
        self.coefficients[0].len()
    }
}

/// Class probabilities at one covariate row, clamped and renormalized.
pub fn predict_probabilities(fit: &GlmFit, x_row: &[f64]) -> Result<DVector<f64>, NumError> {
    if x_row.len() != fit.width() {
        return Err(NumError::DimensionMismatch(format!(
            "covariate row has length {}, model expects {}",
            x_row.len(),
            fit.width()
        )));
    }
    let etas: Vec<f64> = fit
        .coefficients
        .iter()
        .map(|c| c.iter().zip(x_row).map(|(a, b)| a * b).sum())
        .collect();
    Ok(DVector::from_vec(softmax_clamped(&etas)))
}

/// Maximizes the weighted Bernoulli log-likelihood of `labels` on `x`.
///
/// Implemented as a two-class multinomial fit with class 0 as reference, so
/// `coefficients[1]` is the usual logistic coefficient vector.
pub fn fit_weighted_logistic(
    x: &DMatrix<f64>,
    labels: &[u8],
    weights: &[f64],
    cfg: &FitConfig,
) -> Result<GlmFit, NumError> {
    check_rows(x, labels.len(), weights)?;
    let n = x.nrows();
    let mut cw = DMatrix::zeros(n, 2);
    for i in 0..n {
        match labels[i] {
            0 => cw[(i, 0)] = weights[i],
            1 => cw[(i, 1)] = weights[i],
            other => return Err(NumError::ClassOutOfRange(other as usize, 2)),
        }
    }
    fit_multinomial_engine(x, &cw, 0, None, cfg)
}

/// Maximizes the weighted multinomial log-likelihood with one class label per
/// row. The `reference` class keeps a zero coefficient vector.
pub fn fit_weighted_multinomial(
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    reference: usize,
    weights: &[f64],
    cfg: &FitConfig,
) -> Result<GlmFit, NumError> {
    check_rows(x, labels.len(), weights)?;
    if n_classes < 2 || reference >= n_classes {
        return Err(NumError::ClassOutOfRange(reference, n_classes));
    }
    let n = x.nrows();
    let mut cw = DMatrix::zeros(n, n_classes);
    for i in 0..n {
        if labels[i] >= n_classes {
            return Err(NumError::ClassOutOfRange(labels[i], n_classes));
        }
        cw[(i, labels[i])] = weights[i];
    }
    fit_multinomial_engine(x, &cw, reference, None, cfg)
}

/// Result of a weighted least-squares solve.
#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coefficients: DVector<f64>,
    /// The weighted Gram matrix was singular and the ridge fallback engaged.
    pub ridged: bool,
}

/// Solves the weighted normal equations `X'WX b = X'Wy`.
///
/// When the Gram matrix is singular, retries with the ridge added to every
/// non-intercept diagonal entry (column 0 is taken to be the intercept) and
/// reports it on the result.
pub fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    cfg: &FitConfig,
) -> Result<WlsFit, NumError> {
    check_rows(x, y.len(), weights)?;
    let p = x.ncols();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut row = vec![0.0; p];
    for i in 0..x.nrows() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        copy_row(x, i, &mut row);
        for a in 0..p {
            let wa = w * row[a];
            rhs[a] += wa * y[i];
            for b in a..p {
                gram[(a, b)] += wa * row[b];
            }
        }
    }
    mirror_upper(&mut gram);
    if let Some(coef) = spd_solve(&gram, &rhs) {
        return Ok(WlsFit { coefficients: coef, ridged: false });
    }
    for j in 1..p {
        gram[(j, j)] += cfg.ridge;
    }
    let coef = spd_solve(&gram, &rhs).ok_or(NumError::SingularSystem)?;
    Ok(WlsFit { coefficients: coef, ridged: true })
}

/// Shared Newton engine over fractional class weights.
///
/// `class_weights` is `n x k`: row `i` distributes its total weight over the
/// classes, which covers both hard labels (one-hot times a row weight) and
/// the fractional rows produced by EM expectation steps.
pub(crate) fn fit_multinomial_engine(
    x: &DMatrix<f64>,
    class_weights: &DMatrix<f64>,
    reference: usize,
    init: Option<&DMatrix<f64>>,
    cfg: &FitConfig,
) -> Result<GlmFit, NumError> {
    let (n, p) = (x.nrows(), x.ncols());
    let k = class_weights.ncols();
    if class_weights.nrows() != n {
        return Err(NumError::DimensionMismatch(format!(
            "x has {} rows, class weights have {}",
            n,
            class_weights.nrows()
        )));
    }
    let mut total = 0.0;
    for v in class_weights.iter() {
        if !v.is_finite() || *v < 0.0 {
            return Err(NumError::InvalidWeights);
        }
        total += v;
    }
    if total <= 0.0 {
        return Err(NumError::ZeroTotalWeight);
    }

    let mut theta = match init {
        Some(t) => t.clone(),
        None => DMatrix::zeros(k, p),
    };
    let mut ws = Workspace::new(n, p, k, reference);

    let mut ridged = false;
    let mut state = newton_loop(x, class_weights, &mut theta, ridged, cfg, &mut ws)?;

    let separation = is_saturated(&ws.probs, class_weights);
    if separation && !ridged {
        ridged = true;
        state = newton_loop(x, class_weights, &mut theta, ridged, cfg, &mut ws)?;
    }
    ridged |= state.used_ridge;

    Ok(GlmFit {
        coefficients: (0..k).map(|m| theta.row(m).transpose()).collect(),
        reference,
        converged: state.converged,
        iterations: state.iterations,
        final_gradient_norm: state.grad_norm,
        log_likelihood: weighted_ll(&ws.probs, class_weights),
        separation,
        ridged,
    })
}

struct NewtonState {
    converged: bool,
    iterations: usize,
    grad_norm: f64,
    used_ridge: bool,
}

struct Workspace {
    probs: DMatrix<f64>,
    etas: Vec<f64>,
    row: Vec<f64>,
    free: Vec<usize>,
}

impl Workspace {
    fn new(n: usize, p: usize, k: usize, reference: usize) -> Self {
        Workspace {
            probs: DMatrix::zeros(n, k),
            etas: vec![0.0; k],
            row: vec![0.0; p],
            free: (0..k).filter(|&m| m != reference).collect(),
        }
    }
}

fn newton_loop(
    x: &DMatrix<f64>,
    cw: &DMatrix<f64>,
    theta: &mut DMatrix<f64>,
    ridge_on: bool,
    cfg: &FitConfig,
    ws: &mut Workspace,
) -> Result<NewtonState, NumError> {
    let (n, p) = (x.nrows(), x.ncols());
    let k = cw.ncols();
    let kf = k - 1;
    let dim = kf * p;
    let lambda = if ridge_on { cfg.ridge } else { 0.0 };

    let mut grad = DVector::zeros(dim);
    let mut info = DMatrix::zeros(dim, dim);
    let mut used_ridge = ridge_on;

    fill_probs(x, theta, ws);
    let mut obj = penalized_ll(&ws.probs, cw, theta, lambda, ws);
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;

    loop {
        grad.fill(0.0);
        info.fill(0.0);
        accumulate(x, cw, &ws.probs, &ws.free, &mut grad, &mut info, &mut ws.row);
        if lambda > 0.0 {
            for (fi, &m) in ws.free.iter().enumerate() {
                for j in 1..p {
                    grad[fi * p + j] -= lambda * theta[(m, j)];
                    info[(fi * p + j, fi * p + j)] += lambda;
                }
            }
        }
        let grad_norm = grad.norm();
        if grad_norm <= cfg.grad_tol && last_change <= cfg.ll_tol * (1.0 + obj.abs()) {
            return Ok(NewtonState { converged: true, iterations, grad_norm, used_ridge });
        }
        if iterations >= cfg.max_iterations {
            return Ok(NewtonState { converged: false, iterations, grad_norm, used_ridge });
        }
        iterations += 1;

        let dir = match solve_damped(&mut info, &grad) {
            Some((d, jittered)) => {
                used_ridge |= jittered;
                d
            }
            None => {
                return Ok(NewtonState { converged: false, iterations, grad_norm, used_ridge })
            }
        };

        // Step-halving line search on the (penalized) log-likelihood.
        let mut step = 1.0;
        let mut accepted = false;
        let base = theta.clone();
        for _ in 0..40 {
            for (fi, &m) in ws.free.iter().enumerate() {
                for j in 0..p {
                    theta[(m, j)] = base[(m, j)] + step * dir[fi * p + j];
                }
            }
            fill_probs(x, theta, ws);
            let cand = penalized_ll(&ws.probs, cw, theta, lambda, ws);
            if cand > obj || (cand - obj).abs() <= 1e-14 * (1.0 + obj.abs()) {
                last_change = (cand - obj).abs();
                obj = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            *theta = base;
            fill_probs(x, theta, ws);
            return Ok(NewtonState {
                converged: grad_norm <= cfg.grad_tol,
                iterations,
                grad_norm,
                used_ridge,
            });
        }
        let _ = n;
    }
}

/// Accumulates the stacked free-class gradient and negated Hessian.
fn accumulate(
    x: &DMatrix<f64>,
    cw: &DMatrix<f64>,
    probs: &DMatrix<f64>,
    free: &[usize],
    grad: &mut DVector<f64>,
    info: &mut DMatrix<f64>,
    row: &mut [f64],
) {
    let p = x.ncols();
    let kf = free.len();
    for i in 0..x.nrows() {
        let mut m_i = 0.0;
        for u in 0..cw.ncols() {
            m_i += cw[(i, u)];
        }
        if m_i == 0.0 {
            // Zero-weight rows still shape nothing; skip.
            continue;
        }
        copy_row(x, i, row);
        for (fi, &m) in free.iter().enumerate() {
            let pm = probs[(i, m)];
            let gscale = cw[(i, m)] - m_i * pm;
            for a in 0..p {
                grad[fi * p + a] += gscale * row[a];
            }
            for (fj, &l) in free.iter().enumerate() {
                if fj < fi {
                    continue;
                }
                let delta = if m == l { 1.0 } else { 0.0 };
                let c = m_i * pm * (delta - probs[(i, l)]);
                for a in 0..p {
                    let ca = c * row[a];
                    for b in 0..p {
                        info[(fi * p + a, fj * p + b)] += ca * row[b];
                    }
                }
            }
        }
    }
    // Mirror the block-upper triangle.
    for fi in 0..kf {
        for fj in (fi + 1)..kf {
            for a in 0..p {
                for b in 0..p {
                    info[(fj * p + b, fi * p + a)] = info[(fi * p + a, fj * p + b)];
                }
            }
        }
    }
}

/// Cholesky solve of `info * d = grad`, escalating a diagonal jitter when the
/// matrix is numerically singular. Returns the direction and whether jitter
/// was needed.
pub(crate) fn solve_damped(
    info: &mut DMatrix<f64>,
    grad: &DVector<f64>,
) -> Option<(DVector<f64>, bool)> {
    if let Some(d) = spd_solve(info, grad) {
        return Some((d, false));
    }
    let dim = info.nrows();
    let scale = (0..dim).map(|j| info[(j, j)]).fold(0.0f64, f64::max).max(1e-300);
    let mut mu = scale * 1e-12;
    for _ in 0..40 {
        let mut damped = info.clone();
        for j in 0..dim {
            damped[(j, j)] += mu;
        }
        if let Some(d) = spd_solve(&damped, grad) {
            return Some((d, true));
        }
        mu *= 10.0;
    }
    None
}

/// Cholesky solve with a relative pivot tolerance so numerically
/// rank-deficient systems are reported instead of silently amplified.
pub(crate) fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    let mut l = a.clone();
    let max_diag = (0..n).map(|j| a[(j, j)]).fold(0.0f64, f64::max);
    let tol = max_diag * 1e-12;
    for j in 0..n {
        let mut d = l[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut v = l[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    let mut y = b.clone();
    for i in 0..n {
        let mut v = y[i];
        for k in 0..i {
            v -= l[(i, k)] * y[k];
        }
        y[i] = v / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v -= l[(k, i)] * y[k];
        }
        y[i] = v / l[(i, i)];
    }
    y.iter().all(|v| v.is_finite()).then_some(y)
}

fn fill_probs(x: &DMatrix<f64>, theta: &DMatrix<f64>, ws: &mut Workspace) {
    let (n, p) = (x.nrows(), x.ncols());
    let k = theta.nrows();
    for i in 0..n {
        copy_row(x, i, &mut ws.row);
        for m in 0..k {
            let mut eta = 0.0;
            for j in 0..p {
                eta += theta[(m, j)] * ws.row[j];
            }
            ws.etas[m] = eta;
        }
        let probs = softmax_clamped(&ws.etas[..k]);
        for m in 0..k {
            ws.probs[(i, m)] = probs[m];
        }
    }
}

fn penalized_ll(
    probs: &DMatrix<f64>,
    cw: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    lambda: f64,
    ws: &Workspace,
) -> f64 {
    let mut ll = weighted_ll(probs, cw);
    if lambda > 0.0 {
        for &m in &ws.free {
            for j in 1..theta.ncols() {
                ll -= 0.5 * lambda * theta[(m, j)] * theta[(m, j)];
            }
        }
    }
    ll
}

fn weighted_ll(probs: &DMatrix<f64>, cw: &DMatrix<f64>) -> f64 {
    let mut ll = 0.0;
    for i in 0..probs.nrows() {
        for u in 0..probs.ncols() {
            let w = cw[(i, u)];
            if w > 0.0 {
                ll += w * probs[(i, u)].ln();
            }
        }
    }
    ll
}

/// Saturated-fit check: every positively weighted row concentrates its
/// fitted probability mass on its own classes.
fn is_saturated(probs: &DMatrix<f64>, cw: &DMatrix<f64>) -> bool {
    let mut any = false;
    for i in 0..probs.nrows() {
        let mut m_i = 0.0;
        let mut own = 0.0;
        for u in 0..probs.ncols() {
            m_i += cw[(i, u)];
            own += cw[(i, u)] * probs[(i, u)];
        }
        if m_i > 0.0 {
            any = true;
            if own < (1.0 - 1e-6) * m_i {
                return false;
            }
        }
    }
    any
}

pub(crate) fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Numerically stable softmax with the probability clamp applied.
pub(crate) fn softmax_clamped(etas: &[f64]) -> Vec<f64> {
    let max = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = etas.iter().map(|e| (e - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = clamp_probability(*v / sum);
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    out
}

pub(crate) fn copy_row(x: &DMatrix<f64>, i: usize, buf: &mut [f64]) {
    for (j, slot) in buf.iter_mut().enumerate() {
        *slot = x[(i, j)];
    }
}

fn mirror_upper(m: &mut DMatrix<f64>) {
    for a in 0..m.nrows() {
        for b in (a + 1)..m.ncols() {
            m[(b, a)] = m[(a, b)];
        }
    }
}

fn check_rows(x: &DMatrix<f64>, n_labels: usize, weights: &[f64]) -> Result<(), NumError> {
    if x.nrows() != n_labels || x.nrows() != weights.len() {
        return Err(NumError::DimensionMismatch(format!(
            "x has {} rows, labels {}, weights {}",
            x.nrows(),
            n_labels,
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(NumError::InvalidWeights);
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(NumError::ZeroTotalWeight);
    }
    Ok(())
}
