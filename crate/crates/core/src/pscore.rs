//! Principal-score models: the conditional probabilities of the latent
//! principal strata given covariates, and the marginal strata proportions.
//!
//! Three regimes are supported. Under strong monotonicity the score is a
//! logistic fit of `S` on `X` in the treated arm. Under monotonicity a
//! three-level multinomial logit over the strata is fitted by EM, treating
//! the stratum as missing data. Without monotonicity, a fixed sensitivity
//! value `xi` (the ratio of control-only to treated-only probabilities)
//! pins the four-stratum model, again fitted by EM over a merged "switcher"
//! class that is split by `xi`.
//!
//! After the EM phase (fixed zero initialization; stopped on a relative
//! observed-likelihood change below `em_tol` or `em_max_iterations`), a
//! Newton polish on the observed-data log-likelihood finishes the
//! maximization. EM alone converges linearly -- and only sublinearly into
//! boundary solutions such as an empty treated-only stratum -- so it cannot
//! reach the parameter accuracy the downstream oracles require; the polish
//! is ascent-guarded, so the recorded likelihood trace stays non-decreasing.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::dataset::{CellSummary, ExperimentData};
use crate::numkit::{
    self, clamp_probability, copy_row, fit_multinomial_engine, softmax_clamped, FitConfig,
    NumError,
};
use crate::ErrorClass;

/// Principal stratum, named by when the intermediate variable turns on:
/// `Both` = S(1)=1, S(0)=1; `TreatedOnly` = (1,0); `ControlOnly` = (0,1);
/// `Neither` = (0,0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Both,
    TreatedOnly,
    ControlOnly,
    Neither,
}

impl Stratum {
    pub const ALL: [Stratum; 4] =
        [Stratum::Both, Stratum::TreatedOnly, Stratum::ControlOnly, Stratum::Neither];

    pub fn label(&self) -> &'static str {
        match self {
            Stratum::Both => "both",
            Stratum::TreatedOnly => "treated_only",
            Stratum::ControlOnly => "control_only",
            Stratum::Neither => "neither",
        }
    }

    /// The potential value `S(z)` shared by every unit of the stratum.
    pub fn s_under(&self, z: u8) -> u8 {
        match (self, z) {
            (Stratum::Both, _) => 1,
            (Stratum::TreatedOnly, 1) => 1,
            (Stratum::TreatedOnly, _) => 0,
            (Stratum::ControlOnly, 0) => 1,
            (Stratum::ControlOnly, _) => 0,
            (Stratum::Neither, _) => 0,
        }
    }
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Identification regime for the latent strata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    /// S(0) = 0 for every unit; strata TreatedOnly and Neither.
    StrongMonotonicity,
    /// S(1) >= S(0); rules out ControlOnly.
    Monotonicity,
    /// All four strata; `xi` is the fixed ratio
    /// Pr(ControlOnly | X) / Pr(TreatedOnly | X).
    NoMonotonicity { xi: f64 },
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::StrongMonotonicity => "strong-mono",
            Regime::Monotonicity => "mono",
            Regime::NoMonotonicity { .. } => "no-mono",
        }
    }

    pub fn xi(&self) -> Option<f64> {
        match self {
            Regime::NoMonotonicity { xi } => Some(*xi),
            _ => None,
        }
    }

    pub fn admitted_strata(&self) -> Vec<Stratum> {
        match self {
            Regime::StrongMonotonicity => vec![Stratum::TreatedOnly, Stratum::Neither],
            Regime::Monotonicity => {
                vec![Stratum::Both, Stratum::TreatedOnly, Stratum::Neither]
            }
            Regime::NoMonotonicity { .. } => Stratum::ALL.to_vec(),
        }
    }

    /// Strata consistent with an observed `(z, s)` cell. Under strong
    /// monotonicity the control arm is uninformative about the stratum, so
    /// both strata remain for `z = 0, s = 0`.
    pub fn cell_strata(&self, z: u8, s: u8) -> Result<Vec<Stratum>, ScoreError> {
        let out: Vec<Stratum> = self
            .admitted_strata()
            .into_iter()
            .filter(|u| u.s_under(z) == s)
            .collect();
        if out.is_empty() {
            return Err(ScoreError::InconsistentCell { z, s, regime: self.label().into() });
        }
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("xi = {xi} is outside the admissible range [0, {bound}] for this data")]
    XiOutOfBounds { xi: f64, bound: f64 },
    #[error(
        "treated share of S=1 ({p1}) is below the control share ({p0}); \
         relabel the arms so the treatment does not decrease S"
    )]
    ArmOrder { p1: f64, p0: f64 },
    #[error("observed cell (z={z}, s={s}) is inconsistent with the {regime} regime")]
    InconsistentCell { z: u8, s: u8, regime: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid score table: {0}")]
    InvalidTable(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

impl ScoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            ScoreError::Num(e) => e.class(),
            _ => ErrorClass::Validation,
        }
    }
}

/// Fitting settings for the score models.
#[derive(Debug, Clone)]
pub struct ScoreConfig {
    pub glm: FitConfig,
    pub em_max_iterations: usize,
    /// Relative observed log-likelihood change that stops the EM phase.
    pub em_tol: f64,
    pub polish_max_iterations: usize,
    pub polish_grad_tol: f64,
    pub polish_ll_tol: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            glm: FitConfig::default(),
            em_max_iterations: 500,
            em_tol: 1e-8,
            polish_max_iterations: 200,
            polish_grad_tol: 1e-9,
            polish_ll_tol: 1e-12,
        }
    }
}

/// Convergence record of an EM fit.
#[derive(Debug, Clone)]
pub struct EmDiagnostics {
    pub em_iterations: usize,
    pub em_converged: bool,
    pub polish_iterations: usize,
    pub polish_converged: bool,
    pub final_gradient_norm: f64,
    /// Observed-data log-likelihood at every EM iteration followed by every
    /// accepted polish step.
    pub ll_trace: Vec<f64>,
}

/// Fitted principal-score model.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    regime: Regime,
    /// Model-class coefficient rows (reference row identically zero). Under
    /// (strong) monotonicity the classes are strata; without monotonicity
    /// they are `both`, `switcher` (split by xi), and `neither`.
    theta: DMatrix<f64>,
    classes: Vec<&'static str>,
    reference: usize,
    strata: Vec<Stratum>,
    proportions: Vec<f64>,
    covariate_names: Vec<String>,
    separation: bool,
    ridged: bool,
    converged: bool,
    em: Option<EmDiagnostics>,
    observed_ll: f64,
    config: ScoreConfig,
}

/// Conditional stratum probabilities given an observed cell and covariates.
#[derive(Debug, Clone)]
pub struct MembershipProbs {
    pub z: u8,
    pub s: u8,
    pub probs: Vec<(Stratum, f64)>,
}

/// Per-unit principal scores with the marginal proportions; what the
/// estimators actually consume. Rows sum to one over the admitted strata.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub regime: Regime,
    pub strata: Vec<Stratum>,
    /// `n x strata.len()`, aligned with `strata`.
    pub scores: DMatrix<f64>,
    pub proportions: Vec<f64>,
}

impl ScoreTable {
    pub fn new(
        regime: Regime,
        strata: Vec<Stratum>,
        scores: DMatrix<f64>,
        proportions: Vec<f64>,
    ) -> Result<Self, ScoreError> {
        if strata.len() != scores.ncols() || strata.len() != proportions.len() {
            return Err(ScoreError::InvalidTable("misaligned strata columns".into()));
        }
        for i in 0..scores.nrows() {
            let sum: f64 = (0..scores.ncols()).map(|k| scores[(i, k)]).sum();
            if (sum - 1.0).abs() > 1e-8 {
                return Err(ScoreError::InvalidTable(format!(
                    "row {i} scores sum to {sum}, expected 1"
                )));
            }
        }
        let psum: f64 = proportions.iter().sum();
        if (psum - 1.0).abs() > 1e-8 || proportions.iter().any(|p| *p < 0.0) {
            return Err(ScoreError::InvalidTable("proportions must be a distribution".into()));
        }
        Ok(ScoreTable { regime, strata, scores, proportions })
    }

    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    pub fn index_of(&self, stratum: Stratum) -> Option<usize> {
        self.strata.iter().position(|&u| u == stratum)
    }

    pub fn score(&self, unit: usize, stratum: Stratum) -> f64 {
        match self.index_of(stratum) {
            Some(k) => self.scores[(unit, k)],
            None => 0.0,
        }
    }

    pub fn proportion(&self, stratum: Stratum) -> f64 {
        match self.index_of(stratum) {
            Some(k) => self.proportions[k],
            None => 0.0,
        }
    }
}

impl ScoreModel {
    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn proportion(&self, stratum: Stratum) -> f64 {
        self.strata
            .iter()
            .position(|&u| u == stratum)
            .map(|k| self.proportions[k])
            .unwrap_or(0.0)
    }

    pub fn separation(&self) -> bool {
        self.separation
    }

    pub fn ridged(&self) -> bool {
        self.ridged
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn em_diagnostics(&self) -> Option<&EmDiagnostics> {
        self.em.as_ref()
    }

    pub fn observed_log_likelihood(&self) -> f64 {
        self.observed_ll
    }

    pub fn config(&self) -> &ScoreConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.theta.ncols()
    }

    /// Model-class probabilities (softmax of the linear predictors).
    fn class_probs(&self, x_row: &[f64]) -> Result<Vec<f64>, ScoreError> {
        if x_row.len() != self.theta.ncols() {
            return Err(ScoreError::Dimension(format!(
                "covariate row has length {}, model expects {}",
                x_row.len(),
                self.theta.ncols()
            )));
        }
        let etas: Vec<f64> = (0..self.theta.nrows())
            .map(|m| (0..x_row.len()).map(|j| self.theta[(m, j)] * x_row[j]).sum())
            .collect();
        Ok(softmax_clamped(&etas))
    }

    /// Principal scores `e_u(x)` over the admitted strata; sums to one.
    pub fn scores_at(&self, x_row: &[f64]) -> Result<Vec<(Stratum, f64)>, ScoreError> {
        let q = self.class_probs(x_row)?;
        let mut e = self.strata_scores(&q);
        let total: f64 = e.iter().sum();
        for v in e.iter_mut() {
            *v /= total;
        }
        Ok(self.strata.iter().cloned().zip(e).collect())
    }

    /// Maps model-class probabilities onto stratum scores (clamped).
    fn strata_scores(&self, q: &[f64]) -> Vec<f64> {
        match self.regime {
            Regime::StrongMonotonicity | Regime::Monotonicity => {
                q.iter().map(|&v| clamp_probability(v)).collect()
            }
            Regime::NoMonotonicity { xi } => {
                // classes: [both, switcher, neither]
                vec![
                    clamp_probability(q[0]),
                    clamp_probability(q[1] / (1.0 + xi)),
                    clamp_probability(q[1] * xi / (1.0 + xi)),
                    clamp_probability(q[2]),
                ]
            }
        }
    }

    /// Conditional stratum probabilities given the observed `(z, s)` cell.
    pub fn membership_at(&self, z: u8, s: u8, x_row: &[f64]) -> Result<MembershipProbs, ScoreError> {
        let cell = self.regime.cell_strata(z, s)?;
        let scores = self.scores_at(x_row)?;
        let mut probs: Vec<(Stratum, f64)> = scores
            .into_iter()
            .filter(|(u, _)| cell.contains(u))
            .collect();
        let total: f64 = probs.iter().map(|(_, e)| e).sum();
        for (_, e) in probs.iter_mut() {
            *e /= total;
        }
        Ok(MembershipProbs { z, s, probs })
    }

    /// Bulk per-unit scores for a dataset, with proportions recomputed as the
    /// sample mean of the fitted scores over the given rows.
    pub fn score_table(&self, data: &ExperimentData) -> Result<ScoreTable, ScoreError> {
        let n = data.n();
        let k = self.strata.len();
        let mut scores = DMatrix::zeros(n, k);
        let mut row = vec![0.0; data.width()];
        for i in 0..n {
            copy_row(data.x(), i, &mut row);
            let q = self.class_probs(&row)?;
            let mut e = self.strata_scores(&q);
            let total: f64 = e.iter().sum();
            for (col, v) in e.iter_mut().enumerate() {
                *v /= total;
                scores[(i, col)] = *v;
            }
        }
        let proportions: Vec<f64> =
            (0..k).map(|col| scores.column(col).sum() / n as f64).collect();
        ScoreTable::new(self.regime, self.strata.clone(), scores, proportions)
    }

    /// JSON document for the CLI `scores` subcommand.
    pub fn to_json(&self) -> serde_json::Value {
        let coeffs: serde_json::Map<String, serde_json::Value> = self
            .classes
            .iter()
            .enumerate()
            .map(|(m, name)| {
                let v: Vec<f64> = (0..self.theta.ncols()).map(|j| self.theta[(m, j)]).collect();
                (name.to_string(), json!(v))
            })
            .collect();
        let props: serde_json::Map<String, serde_json::Value> = self
            .strata
            .iter()
            .zip(&self.proportions)
            .map(|(u, p)| (u.label().to_string(), json!(p)))
            .collect();
        json!({
            "regime": self.regime.label(),
            "xi": self.regime.xi(),
            "reference_class": self.classes[self.reference],
            "coefficients": coeffs,
            "covariates": self.covariate_names,
            "proportions": props,
            "converged": self.converged,
            "separation": self.separation,
            "ridge_fallback": self.ridged,
            "observed_log_likelihood": self.observed_ll,
            "em_iterations": self.em.as_ref().map(|d| d.em_iterations),
            "polish_iterations": self.em.as_ref().map(|d| d.polish_iterations),
        })
    }

    #[cfg(test)]
    pub(crate) fn from_parts(
        regime: Regime,
        theta: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> ScoreModel {
        let (classes, reference) = model_classes(regime);
        let strata = regime.admitted_strata();
        let k = strata.len();
        ScoreModel {
            regime,
            theta,
            classes,
            reference,
            strata,
            proportions: vec![1.0 / k as f64; k],
            covariate_names,
            separation: false,
            ridged: false,
            converged: true,
            em: None,
            observed_ll: 0.0,
            config: ScoreConfig::default(),
        }
    }
}

fn model_classes(regime: Regime) -> (Vec<&'static str>, usize) {
    match regime {
        Regime::StrongMonotonicity => (vec!["treated_only", "neither"], 1),
        Regime::Monotonicity => (vec!["both", "treated_only", "neither"], 1),
        Regime::NoMonotonicity { .. } => (vec!["both", "switcher", "neither"], 1),
    }
}

/// Fits the requested regime.
pub fn fit(
    data: &ExperimentData,
    regime: Regime,
    cfg: &ScoreConfig,
) -> Result<ScoreModel, ScoreError> {
    match regime {
        Regime::StrongMonotonicity => fit_strong_mono(data, cfg),
        Regime::Monotonicity => fit_mono_em(data, cfg),
        Regime::NoMonotonicity { xi } => fit_nomono_em(data, xi, cfg),
    }
}

/// Strong monotonicity: logistic fit of `S` on `X` over the treated arm;
/// `e_treated_only(x)` is the fitted probability.
pub fn fit_strong_mono(
    data: &ExperimentData,
    cfg: &ScoreConfig,
) -> Result<ScoreModel, ScoreError> {
    let treated = data.arm_indices(1);
    let p = data.width();
    let x = DMatrix::from_fn(treated.len(), p, |r, c| data.x()[(treated[r], c)]);
    let n = treated.len();
    // Classes [treated_only, neither], reference = neither, so the
    // treated-only row carries the logistic coefficients of S on X.
    let mut cw = DMatrix::zeros(n, 2);
    for (r, &i) in treated.iter().enumerate() {
        cw[(r, if data.s()[i] == 1 { 0 } else { 1 })] = 1.0;
    }
    let fit = fit_multinomial_engine(&x, &cw, 1, None, &cfg.glm)?;
    let mut theta = DMatrix::zeros(2, p);
    for j in 0..p {
        theta[(0, j)] = fit.coefficients[0][j];
    }
    let mut model = ScoreModel {
        regime: Regime::StrongMonotonicity,
        theta,
        classes: model_classes(Regime::StrongMonotonicity).0,
        reference: 1,
        strata: Regime::StrongMonotonicity.admitted_strata(),
        proportions: vec![],
        covariate_names: data.covariate_names().to_vec(),
        separation: fit.separation,
        ridged: fit.ridged,
        converged: fit.converged,
        em: None,
        observed_ll: fit.log_likelihood,
        config: cfg.clone(),
    };
    model.proportions = mean_scores(&model, data)?;
    Ok(model)
}

/// Monotonicity: three-level multinomial logit over the strata, fitted by EM
/// with the treated-only class as reference.
pub fn fit_mono_em(data: &ExperimentData, cfg: &ScoreConfig) -> Result<ScoreModel, ScoreError> {
    em_fit(data, Regime::Monotonicity, cfg)
}

/// No monotonicity with fixed `xi`: multinomial logit over
/// `{both, switcher, neither}` fitted by EM; the switcher class is split
/// into treated-only and control-only with shares `1/(1+xi)` and
/// `xi/(1+xi)`.
pub fn fit_nomono_em(
    data: &ExperimentData,
    xi: f64,
    cfg: &ScoreConfig,
) -> Result<ScoreModel, ScoreError> {
    let summary = data.summarize();
    let bound = xi_upper_bound(&summary)?;
    if !xi.is_finite() || xi < 0.0 || xi > bound + 1e-12 {
        return Err(ScoreError::XiOutOfBounds { xi, bound });
    }
    em_fit(data, Regime::NoMonotonicity { xi }, cfg)
}

/// The no-monotonicity EM without the data-bound check on `xi`. Used for
/// bootstrap replicates of a grid whose `xi` was validated against the full
/// sample: a resample's own bound fluctuates, but the model stays
/// well-defined for any finite nonnegative `xi`.
pub(crate) fn fit_nomono_em_unchecked(
    data: &ExperimentData,
    xi: f64,
    cfg: &ScoreConfig,
) -> Result<ScoreModel, ScoreError> {
    em_fit(data, Regime::NoMonotonicity { xi }, cfg)
}

/// Upper bound of the monotonicity sensitivity parameter implied by the
/// observed cell shares: `1 - (p1 - p0) / min(p1, 1 - p0)`, floored at zero.
pub fn xi_upper_bound(summary: &CellSummary) -> Result<f64, ScoreError> {
    let (p1, p0) = (summary.p1_hat, summary.p0_hat);
    if p1 < p0 {
        return Err(ScoreError::ArmOrder { p1, p0 });
    }
    let denom = p1.min(1.0 - p0);
    if denom <= 0.0 {
        // p1 = 0 forces p0 = 0 and an all-empty S; no switching possible.
        return Ok(0.0);
    }
    Ok((1.0 - (p1 - p0) / denom).max(0.0))
}

/// Stratum proportions implied by `(p1, p0)` at a fixed `xi`, in the order
/// (both, treated_only, control_only, neither).
pub fn proportions_for_xi(p1: f64, p0: f64, xi: f64) -> Result<[f64; 4], ScoreError> {
    if p1 < p0 {
        return Err(ScoreError::ArmOrder { p1, p0 });
    }
    let bound = (1.0 - (p1 - p0) / p1.min(1.0 - p0).max(1e-300)).max(0.0);
    if !xi.is_finite() || xi < 0.0 || xi > bound + 1e-12 {
        return Err(ScoreError::XiOutOfBounds { xi, bound });
    }
    // Continuity at p1 == p0, where xi may reach 1.
    let pi_to = if p1 - p0 == 0.0 { 0.0 } else { (p1 - p0) / (1.0 - xi) };
    Ok([p1 - pi_to, pi_to, xi * pi_to, 1.0 - p0 - pi_to])
}

// ---------------------------------------------------------------------------
// EM internals
// ---------------------------------------------------------------------------

/// Per-cell mixture layout: which model classes an observed cell mixes, and
/// the constant multiplying each class probability in the observed-data
/// likelihood (the xi split shares; 1 under monotonicity).
type CellTable = [Vec<(usize, f64)>; 4];

fn cell_id(z: u8, s: u8) -> usize {
    (z as usize) * 2 + s as usize
}

fn mixture_table(regime: Regime) -> CellTable {
    match regime {
        // classes: [both=0, treated_only=1, neither=2]
        Regime::Monotonicity => [
            vec![(1, 1.0), (2, 1.0)],           // (z=0, s=0): treated_only + neither
            vec![(0, 1.0)],                     // (z=0, s=1): both
            vec![(2, 1.0)],                     // (z=1, s=0): neither
            vec![(0, 1.0), (1, 1.0)],           // (z=1, s=1): both + treated_only
        ],
        // classes: [both=0, switcher=1, neither=2]
        Regime::NoMonotonicity { xi } => {
            let to = 1.0 / (1.0 + xi);
            let co = xi / (1.0 + xi);
            [
                vec![(1, to), (2, 1.0)],        // (0,0): treated_only share + neither
                vec![(0, 1.0), (1, co)],        // (0,1): both + control_only share
                vec![(1, co), (2, 1.0)],        // (1,0): control_only share + neither
                vec![(0, 1.0), (1, to)],        // (1,1): both + treated_only share
            ]
        }
        Regime::StrongMonotonicity => unreachable!("strong monotonicity is not an EM regime"),
    }
}

struct EmWorkspace {
    /// Model-class probabilities per row.
    q: DMatrix<f64>,
    /// Posterior class weights per row.
    post: DMatrix<f64>,
    etas: Vec<f64>,
    row: Vec<f64>,
}

fn em_fit(
    data: &ExperimentData,
    regime: Regime,
    cfg: &ScoreConfig,
) -> Result<ScoreModel, ScoreError> {
    let (classes, reference) = model_classes(regime);
    let table = mixture_table(regime);
    let (n, p) = (data.n(), data.width());
    let k = classes.len();
    let cells: Vec<usize> =
        (0..n).map(|i| cell_id(data.z()[i], data.s()[i])).collect();

    let mut theta = DMatrix::zeros(k, p);
    let mut ws = EmWorkspace {
        q: DMatrix::zeros(n, k),
        post: DMatrix::zeros(n, k),
        etas: vec![0.0; k],
        row: vec![0.0; p],
    };

    let mut trace = Vec::new();
    let mut em_converged = false;
    let mut em_iterations = 0;
    let mut last_fit_separation = false;
    let mut last_fit_ridged = false;

    let mut prev_ll = f64::NEG_INFINITY;
    for it in 0..cfg.em_max_iterations {
        let ll = e_step(data, &cells, &table, &theta, &mut ws);
        trace.push(ll);
        em_iterations = it;
        if it > 0 && (ll - prev_ll).abs() <= cfg.em_tol * (1.0 + ll.abs()) {
            em_converged = true;
            break;
        }
        prev_ll = ll;
        let fit = fit_multinomial_engine(data.x(), &ws.post, reference, Some(&theta), &cfg.glm)?;
        last_fit_separation = fit.separation;
        last_fit_ridged = fit.ridged;
        for (m, coef) in fit.coefficients.iter().enumerate() {
            for j in 0..p {
                theta[(m, j)] = coef[j];
            }
        }
        em_iterations = it + 1;
    }

    let polish = polish_observed_ll(data, &cells, &table, &mut theta, reference, cfg, &mut trace);
    let observed_ll = e_step(data, &cells, &table, &theta, &mut ws);

    let mut model = ScoreModel {
        regime,
        theta,
        classes,
        reference,
        strata: regime.admitted_strata(),
        proportions: vec![],
        covariate_names: data.covariate_names().to_vec(),
        separation: last_fit_separation,
        ridged: last_fit_ridged,
        converged: em_converged || polish.converged,
        em: Some(EmDiagnostics {
            em_iterations,
            em_converged,
            polish_iterations: polish.iterations,
            polish_converged: polish.converged,
            final_gradient_norm: polish.grad_norm,
            ll_trace: trace,
        }),
        observed_ll,
        config: cfg.clone(),
    };
    model.proportions = mean_scores(&model, data)?;
    Ok(model)
}

/// Fills class probabilities and posterior weights; returns the observed-data
/// log-likelihood at the current coefficients.
fn e_step(
    data: &ExperimentData,
    cells: &[usize],
    table: &CellTable,
    theta: &DMatrix<f64>,
    ws: &mut EmWorkspace,
) -> f64 {
    let (n, p) = (data.n(), data.width());
    let k = theta.nrows();
    let mut ll = 0.0;
    for i in 0..n {
        copy_row(data.x(), i, &mut ws.row);
        for m in 0..k {
            let mut eta = 0.0;
            for j in 0..p {
                eta += theta[(m, j)] * ws.row[j];
            }
            ws.etas[m] = eta;
        }
        let q = softmax_clamped(&ws.etas[..k]);
        let mut obs = 0.0;
        for &(class, c) in &table[cells[i]] {
            obs += c * q[class];
        }
        for m in 0..k {
            ws.q[(i, m)] = q[m];
            ws.post[(i, m)] = 0.0;
        }
        for &(class, c) in &table[cells[i]] {
            ws.post[(i, class)] = c * q[class] / obs;
        }
        ll += obs.ln();
    }
    ll
}

struct PolishOutcome {
    iterations: usize,
    converged: bool,
    grad_norm: f64,
}

/// Newton ascent on the observed-data log-likelihood, warm-started at the EM
/// solution. Every accepted step increases the likelihood, so the appended
/// trace stays monotone.
fn polish_observed_ll(
    data: &ExperimentData,
    cells: &[usize],
    table: &CellTable,
    theta: &mut DMatrix<f64>,
    reference: usize,
    cfg: &ScoreConfig,
    trace: &mut Vec<f64>,
) -> PolishOutcome {
    let (n, p) = (data.n(), data.width());
    let k = theta.nrows();
    let free: Vec<usize> = (0..k).filter(|&m| m != reference).collect();
    let dim = free.len() * p;

    let mut grad = DVector::zeros(dim);
    let mut info = DMatrix::zeros(dim, dim);
    let mut row = vec![0.0; p];
    let mut etas = vec![0.0; k];
    let mut r = vec![0.0; k];

    let obs_ll = |theta: &DMatrix<f64>, row: &mut [f64], etas: &mut [f64]| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            copy_row(data.x(), i, row);
            for m in 0..k {
                let mut eta = 0.0;
                for j in 0..p {
                    eta += theta[(m, j)] * row[j];
                }
                etas[m] = eta;
            }
            let q = softmax_clamped(&etas[..k]);
            let mut obs = 0.0;
            for &(class, c) in &table[cells[i]] {
                obs += c * q[class];
            }
            ll += obs.ln();
        }
        ll
    };

    let mut cur = obs_ll(theta, &mut row, &mut etas);
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;

    loop {
        grad.fill(0.0);
        info.fill(0.0);
        for i in 0..n {
            copy_row(data.x(), i, &mut row);
            for m in 0..k {
                let mut eta = 0.0;
                for j in 0..p {
                    eta += theta[(m, j)] * row[j];
                }
                etas[m] = eta;
            }
            let q = softmax_clamped(&etas[..k]);
            let mut obs = 0.0;
            for &(class, c) in &table[cells[i]] {
                obs += c * q[class];
            }
            r.iter_mut().for_each(|v| *v = 0.0);
            for &(class, c) in &table[cells[i]] {
                r[class] = c * q[class] / obs;
            }
            for (fi, &m) in free.iter().enumerate() {
                let gs = r[m] - q[m];
                for a in 0..p {
                    grad[fi * p + a] += gs * row[a];
                }
                for (fj, &l) in free.iter().enumerate() {
                    if fj < fi {
                        continue;
                    }
                    let delta = if m == l { 1.0 } else { 0.0 };
                    // Negated observed-information block.
                    let c = q[m] * (delta - q[l]) - r[m] * (delta - r[l]);
                    for a in 0..p {
                        let ca = c * row[a];
                        for b in 0..p {
                            info[(fi * p + a, fj * p + b)] += ca * row[b];
                        }
                    }
                }
            }
        }
        for fi in 0..free.len() {
            for fj in (fi + 1)..free.len() {
                for a in 0..p {
                    for b in 0..p {
                        info[(fj * p + b, fi * p + a)] = info[(fi * p + a, fj * p + b)];
                    }
                }
            }
        }
        let grad_norm = grad.norm();
        if grad_norm <= cfg.polish_grad_tol && last_change <= cfg.polish_ll_tol * (1.0 + cur.abs())
        {
            return PolishOutcome { iterations, converged: true, grad_norm };
        }
        if iterations >= cfg.polish_max_iterations {
            return PolishOutcome { iterations, converged: false, grad_norm };
        }
        iterations += 1;

        let dir = match numkit::solve_damped(&mut info, &grad) {
            Some((d, _)) => d,
            None => return PolishOutcome { iterations, converged: false, grad_norm },
        };
        let base = theta.clone();
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for (fi, &m) in free.iter().enumerate() {
                for j in 0..p {
                    theta[(m, j)] = base[(m, j)] + step * dir[fi * p + j];
                }
            }
            let cand = obs_ll(theta, &mut row, &mut etas);
            if cand >= cur {
                last_change = cand - cur;
                cur = cand;
                trace.push(cand);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            *theta = base;
            return PolishOutcome {
                iterations,
                converged: grad_norm <= cfg.polish_grad_tol,
                grad_norm,
            };
        }
    }
}

/// Proportions as the sample mean of the fitted scores over all units.
fn mean_scores(model: &ScoreModel, data: &ExperimentData) -> Result<Vec<f64>, ScoreError> {
    let table = model.score_table(data)?;
    Ok(table.proportions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ExperimentData;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Intercept-only dataset with the given cell counts
    /// (n11, n10, n01, n00).
    fn cells_data(n11: usize, n10: usize, n01: usize, n00: usize) -> ExperimentData {
        let mut z = Vec::new();
        let mut s = Vec::new();
        for (count, zi, si) in
            [(n11, 1, 1), (n10, 1, 0), (n01, 0, 1), (n00, 0, 0)]
        {
            for _ in 0..count {
                z.push(zi);
                s.push(si);
            }
        }
        let n = z.len();
        ExperimentData::new(
            z,
            s,
            None,
            DMatrix::from_element(n, 1, 1.0),
            vec!["(intercept)".into()],
        )
        .unwrap()
    }

    #[test]
    fn strong_mono_intercept_only_matches_treated_share() {
        let data = cells_data(30, 20, 0, 50);
        let model = fit_strong_mono(&data, &ScoreConfig::default()).unwrap();
        let scores = model.scores_at(&[1.0]).unwrap();
        assert_eq!(scores[0].0, Stratum::TreatedOnly);
        assert_relative_eq!(scores[0].1, 0.6, epsilon = 1e-8);
        assert_relative_eq!(model.proportion(Stratum::TreatedOnly), 0.6, epsilon = 1e-8);
    }

    #[test]
    fn strong_mono_perfect_predictor_reports_separation() {
        let mut z = vec![1u8; 20];
        let mut s = vec![0u8; 20];
        let mut xs = vec![0.0; 20];
        for i in 0..10 {
            s[i] = 1;
            xs[i] = 1.0;
        }
        z.extend([0, 0]);
        s.extend([0, 0]);
        xs.extend([0.0, 1.0]);
        let n = z.len();
        let x = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { xs[r] });
        let data =
            ExperimentData::new(z, s, None, x, vec!["(intercept)".into(), "w".into()]).unwrap();
        let model = fit_strong_mono(&data, &ScoreConfig::default()).unwrap();
        assert!(model.separation());
    }

    #[test]
    fn strong_mono_recovers_generating_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 50_000;
        let mut z = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let zi = u8::from(rng.gen_bool(0.5));
            let xi: f64 = rng.gen_range(-2.0..2.0);
            let p = 1.0 / (1.0 + (-xi).exp()); // coefficients (0, 1)
            let u_treated_only = rng.gen_bool(p);
            let si = if zi == 1 { u8::from(u_treated_only) } else { 0 };
            z.push(zi);
            s.push(si);
            xs.push(xi);
        }
        let x = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { xs[r] });
        let data =
            ExperimentData::new(z, s, None, x, vec!["(intercept)".into(), "x".into()]).unwrap();
        let model = fit_strong_mono(&data, &ScoreConfig::default()).unwrap();
        assert!((model.theta[(0, 0)] - 0.0).abs() < 0.05, "{}", model.theta[(0, 0)]);
        assert!((model.theta[(0, 1)] - 1.0).abs() < 0.05, "{}", model.theta[(0, 1)]);
    }

    #[test]
    fn mono_em_matches_closed_form_cell_mle() {
        let data = cells_data(30, 20, 10, 40);
        let model = fit_mono_em(&data, &ScoreConfig::default()).unwrap();
        // p1 = 0.6, p0 = 0.2 imply (both, treated_only, neither) =
        // (0.2, 0.4, 0.4).
        assert_relative_eq!(model.proportion(Stratum::Both), 0.2, epsilon = 1e-7);
        assert_relative_eq!(model.proportion(Stratum::TreatedOnly), 0.4, epsilon = 1e-7);
        assert_relative_eq!(model.proportion(Stratum::Neither), 0.4, epsilon = 1e-7);
    }

    #[test]
    fn mono_em_boundary_empties_treated_only_stratum() {
        let data = cells_data(30, 20, 30, 20); // p1 = p0 = 0.6
        let model = fit_mono_em(&data, &ScoreConfig::default()).unwrap();
        assert!(
            model.proportion(Stratum::TreatedOnly) <= 1e-6,
            "pi_treated_only = {}",
            model.proportion(Stratum::TreatedOnly)
        );
    }

    #[test]
    fn em_trace_is_nondecreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 300;
        let mut z = Vec::new();
        let mut s = Vec::new();
        let mut xs = Vec::new();
        for _ in 0..n {
            let zi = u8::from(rng.gen_bool(0.5));
            let xi: f64 = rng.gen_range(-1.0..1.0);
            let strata_p = softmax_clamped(&[0.3 * xi, 0.2 - 0.5 * xi, 0.1 + xi]);
            let u = pick(&mut rng, &strata_p);
            let si = match u {
                0 => 1,                       // both
                1 => u8::from(zi == 1),       // treated_only
                _ => 0,                       // neither
            };
            z.push(zi);
            s.push(si);
            xs.push(xi);
        }
        let x = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { xs[r] });
        let data =
            ExperimentData::new(z, s, None, x, vec!["(intercept)".into(), "x".into()]).unwrap();
        for model in [
            fit_mono_em(&data, &ScoreConfig::default()).unwrap(),
            fit_nomono_em(&data, 0.05, &ScoreConfig::default()).unwrap(),
        ] {
            let trace = &model.em_diagnostics().unwrap().ll_trace;
            for w in trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs()),
                    "log-likelihood decreased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    fn pick(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    #[test]
    fn nomono_at_xi_zero_matches_mono() {
        let data = cells_data(35, 15, 12, 38);
        let cfg = ScoreConfig::default();
        let mono = fit_mono_em(&data, &cfg).unwrap();
        let nomono = fit_nomono_em(&data, 0.0, &cfg).unwrap();
        for u in [Stratum::Both, Stratum::TreatedOnly, Stratum::Neither] {
            assert!(
                (mono.proportion(u) - nomono.proportion(u)).abs() <= 1e-4,
                "{u}: {} vs {}",
                mono.proportion(u),
                nomono.proportion(u)
            );
        }
        assert!(nomono.proportion(Stratum::ControlOnly) <= 1e-4);
    }

    #[test]
    fn nomono_intercept_only_matches_proportion_formulas() {
        // p1 = 0.6, p0 = 0.3, xi = 0.2.
        let data = cells_data(30, 20, 15, 35);
        let model = fit_nomono_em(&data, 0.2, &ScoreConfig::default()).unwrap();
        assert_relative_eq!(model.proportion(Stratum::TreatedOnly), 0.375, epsilon = 1e-6);
        assert_relative_eq!(model.proportion(Stratum::Neither), 0.325, epsilon = 1e-6);
        assert_relative_eq!(model.proportion(Stratum::Both), 0.225, epsilon = 1e-6);
        assert_relative_eq!(model.proportion(Stratum::ControlOnly), 0.075, epsilon = 1e-6);
    }

    #[test]
    fn nomono_rejects_xi_above_bound() {
        let data = cells_data(30, 20, 15, 35); // bound = 0.5
        let err = fit_nomono_em(&data, 0.7, &ScoreConfig::default()).unwrap_err();
        assert!(matches!(err, ScoreError::XiOutOfBounds { .. }));
    }

    #[test]
    fn scores_sum_to_one_for_every_unit() {
        let data = cells_data(30, 20, 15, 35);
        for model in [
            fit_mono_em(&data, &ScoreConfig::default()).unwrap(),
            fit_nomono_em(&data, 0.3, &ScoreConfig::default()).unwrap(),
        ] {
            let table = model.score_table(&data).unwrap();
            for i in 0..table.n() {
                let sum: f64 = (0..table.strata.len()).map(|k| table.scores[(i, k)]).sum();
                assert_relative_eq!(sum, 1.0, epsilon = 1e-10);
            }
            let pi_sum: f64 = model.proportions().iter().sum();
            assert_relative_eq!(pi_sum, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn mono_scores_with_zero_coefficients_are_uniform() {
        let theta = DMatrix::zeros(3, 1);
        let model =
            ScoreModel::from_parts(Regime::Monotonicity, theta, vec!["(intercept)".into()]);
        for (_, e) in model.scores_at(&[1.0]).unwrap() {
            assert_relative_eq!(e, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn nomono_even_switcher_split_at_xi_one() {
        // Switcher probability 0.5 at xi = 1 gives 0.25 to each switching
        // stratum.
        let mut theta = DMatrix::zeros(3, 1);
        // classes [both, switcher, neither]; reference = switcher.
        // q_both = q_neither = 0.25, q_switcher = 0.5.
        theta[(0, 0)] = (0.25f64 / 0.5).ln();
        theta[(2, 0)] = (0.25f64 / 0.5).ln();
        let model = ScoreModel::from_parts(
            Regime::NoMonotonicity { xi: 1.0 },
            theta,
            vec!["(intercept)".into()],
        );
        let scores = model.scores_at(&[1.0]).unwrap();
        let get = |u: Stratum| scores.iter().find(|(v, _)| *v == u).unwrap().1;
        assert_relative_eq!(get(Stratum::TreatedOnly), 0.25, epsilon = 1e-10);
        assert_relative_eq!(get(Stratum::ControlOnly), 0.25, epsilon = 1e-10);
    }

    #[test]
    fn membership_ratios_follow_cell_mixtures() {
        // Monotonicity with e = (both 0.5, treated_only 0.3, neither 0.2).
        let mut theta = DMatrix::zeros(3, 1);
        theta[(0, 0)] = (0.5f64 / 0.3).ln();
        theta[(2, 0)] = (0.2f64 / 0.3).ln();
        let model =
            ScoreModel::from_parts(Regime::Monotonicity, theta, vec!["(intercept)".into()]);
        let m = model.membership_at(1, 1, &[1.0]).unwrap();
        let get = |u: Stratum| m.probs.iter().find(|(v, _)| *v == u).unwrap().1;
        assert_relative_eq!(get(Stratum::TreatedOnly), 0.375, epsilon = 1e-9);
        assert_relative_eq!(get(Stratum::Both), 0.625, epsilon = 1e-9);

        let pure = model.membership_at(1, 0, &[1.0]).unwrap();
        assert_eq!(pure.probs.len(), 1);
        assert_eq!(pure.probs[0].0, Stratum::Neither);
        assert_relative_eq!(pure.probs[0].1, 1.0);
    }

    #[test]
    fn membership_without_monotonicity_in_control_s1_cell() {
        // e_both = 0.2, e_control_only = 0.1 at (z, s) = (0, 1).
        let mut theta = DMatrix::zeros(3, 1);
        // switcher = treated_only + control_only; choose xi so that
        // control_only = 0.1 with switcher share xi/(1+xi).
        // Let treated_only = 0.3 -> switcher = 0.4, xi = 1/3.
        theta[(0, 0)] = (0.2f64 / 0.4).ln();
        theta[(2, 0)] = (0.3f64 / 0.4).ln();
        let model = ScoreModel::from_parts(
            Regime::NoMonotonicity { xi: 1.0 / 3.0 },
            theta,
            vec!["(intercept)".into()],
        );
        let m = model.membership_at(0, 1, &[1.0]).unwrap();
        let get = |u: Stratum| m.probs.iter().find(|(v, _)| *v == u).unwrap().1;
        assert_relative_eq!(get(Stratum::Both), 2.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(get(Stratum::ControlOnly), 1.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn strong_mono_inconsistent_cell_is_rejected() {
        let theta = DMatrix::zeros(2, 1);
        let model =
            ScoreModel::from_parts(Regime::StrongMonotonicity, theta, vec!["(intercept)".into()]);
        assert!(model.membership_at(0, 1, &[1.0]).is_err());
    }

    #[test]
    fn xi_bound_values() {
        let s = |p1: f64, p0: f64| CellSummary {
            n_11: 0,
            n_10: 0,
            n_01: 0,
            n_00: 0,
            p1_hat: p1,
            p0_hat: p0,
        };
        assert_relative_eq!(xi_upper_bound(&s(0.6, 0.3)).unwrap(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(xi_upper_bound(&s(0.4, 0.4)).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(xi_upper_bound(&s(1.0, 0.0)).unwrap(), 0.0, epsilon = 1e-12);
        assert!(xi_upper_bound(&s(0.3, 0.6)).is_err());
        // Direct evaluation on the survival-trial shares.
        assert_relative_eq!(
            xi_upper_bound(&s(0.496, 0.389)).unwrap(),
            1.0 - 0.107 / 0.496,
            epsilon = 1e-12
        );
    }

    #[test]
    fn xi_proportions_sum_to_one_and_vanish_at_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p0: f64 = rng.gen_range(0.05..0.7);
            let p1: f64 = rng.gen_range(p0 + 0.05..0.95);
            let bound = 1.0 - (p1 - p0) / p1.min(1.0 - p0);
            let xi = rng.gen_range(0.0..bound);
            let pi = proportions_for_xi(p1, p0, xi).unwrap();
            assert_relative_eq!(pi.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
            assert!(pi.iter().all(|v| *v >= -1e-12));
            let at_bound = proportions_for_xi(p1, p0, bound).unwrap();
            // at the bound, one of pi_both / pi_neither hits zero
            assert!(at_bound[0].min(at_bound[3]) <= 1e-10);
        }
    }

    #[test]
    fn mono_em_recovers_multinomial_generator() {
        // Multinomial logit generator with coefficients
        // theta_both = (0.25, 0.5, 0.5, 1, 1, theta),
        // theta_neither = (-0.25, 1, 1, 0.5, 0.5, theta), theta = 0.5.
        let theta_gen = 0.5;
        let t_both = [0.25, 0.5, 0.5, 1.0, 1.0, theta_gen];
        let t_neither = [-0.25, 1.0, 1.0, 0.5, 0.5, theta_gen];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 20_000;
        let mut z = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        let mut xmat = DMatrix::zeros(n, 6);
        use rand_distr::{Distribution, StandardNormal};
        for i in 0..n {
            let mut x = [1.0; 6];
            for j in 1..5 {
                let draw: f64 = StandardNormal.sample(&mut rng);
                x[j] = draw;
            }
            x[5] = f64::from(rng.gen_bool(0.5));
            let eta_b: f64 = t_both.iter().zip(&x).map(|(a, b)| a * b).sum();
            let eta_n: f64 = t_neither.iter().zip(&x).map(|(a, b)| a * b).sum();
            let probs = softmax_clamped(&[eta_b, 0.0, eta_n]);
            let u = pick(&mut rng, &probs);
            let zi = u8::from(rng.gen_bool(0.5));
            let si = match u {
                0 => 1,
                1 => u8::from(zi == 1),
                _ => 0,
            };
            z.push(zi);
            s.push(si);
            for j in 0..6 {
                xmat[(i, j)] = x[j];
            }
        }
        let names =
            vec!["(intercept)".into(), "x1".into(), "x2".into(), "x3".into(), "x4".into(), "x5".into()];
        let data = ExperimentData::new(z, s, None, xmat, names).unwrap();
        let model = fit_mono_em(&data, &ScoreConfig::default()).unwrap();
        // classes [both, treated_only(ref), neither]
        for j in 0..6 {
            assert!(
                (model.theta[(0, j)] - t_both[j]).abs() < 0.1,
                "both[{j}]: {} vs {}",
                model.theta[(0, j)],
                t_both[j]
            );
            assert!(
                (model.theta[(2, j)] - t_neither[j]).abs() < 0.1,
                "neither[{j}]: {} vs {}",
                model.theta[(2, j)],
                t_neither[j]
            );
        }
    }
}
