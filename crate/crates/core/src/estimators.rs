//! Principal-causal-effect estimators: stratum weights (with their
//! sensitivity-parameterized variants), the moment weighting estimator, the
//! model-assisted covariate-adjusted estimator, and bootstrap inference.
//!
//! Weights follow one code path for all regimes: for a target stratum `u`
//! and an observed mixture cell, the unit weight is
//! `eps_u e_u(x) / sum_v eps_v e_v(x)` divided by `pi_u / sum_v pi_v`, where
//! the sum runs over the strata the cell mixes and `eps_v` over-weights the
//! treated-only stratum by the side's sensitivity parameter (all ones at the
//! baseline, which therefore reproduces the plain identification weights
//! bit for bit). Cells containing a single stratum get weight one, and the
//! control side under strong monotonicity is the whole control arm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::dataset::ExperimentData;
use crate::numkit::{weighted_least_squares, NumError, WlsFit};
use crate::pscore::{self, Regime, ScoreConfig, ScoreError, ScoreModel, ScoreTable, Stratum};
use crate::{derive_seed, ErrorClass};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("outcome column required")]
    MissingOutcome,
    #[error("cell (z={z}, s={s}) required for stratum {stratum} is empty")]
    EmptyCell { z: u8, s: u8, stratum: Stratum },
    #[error("sensitivity parameters must be strictly positive and finite")]
    NonPositiveSensitivity,
    #[error("sensitivity parameter {param} does not apply under the {regime} regime")]
    SensitivityRegimeMismatch { param: &'static str, regime: &'static str },
    #[error("operation requires the {required} regime, got {got}")]
    WrongRegime { required: &'static str, got: &'static str },
    #[error("bootstrap needs at least 50 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("confidence level must lie strictly between 0 and 1, got {0}")]
    BadLevel(f64),
    #[error("{failed} of {total} bootstrap replicates failed, above the {max_percent}% cap")]
    BootstrapFailures { failed: usize, total: usize, max_percent: f64 },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Num(#[from] NumError),
}

impl EstimatorError {
    pub fn class(&self) -> ErrorClass {
        match self {
            EstimatorError::BootstrapFailures { .. } => ErrorClass::Numerical,
            EstimatorError::Score(e) => e.class(),
            EstimatorError::Num(e) => e.class(),
            _ => ErrorClass::Validation,
        }
    }
}

/// Sensitivity values for departures from principal ignorability: `eps`
/// applies under strong monotonicity, `(eps1, eps0)` under (no-)monotonicity
/// on the treated and control sides. All default to one (no departure).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityParams {
    pub eps: f64,
    pub eps1: f64,
    pub eps0: f64,
}

impl Default for SensitivityParams {
    fn default() -> Self {
        SensitivityParams { eps: 1.0, eps1: 1.0, eps0: 1.0 }
    }
}

impl SensitivityParams {
    pub fn validate(&self, regime: Regime) -> Result<(), EstimatorError> {
        for v in [self.eps, self.eps1, self.eps0] {
            if !(v.is_finite() && v > 0.0) {
                return Err(EstimatorError::NonPositiveSensitivity);
            }
        }
        match regime {
            Regime::StrongMonotonicity if self.eps1 != 1.0 || self.eps0 != 1.0 => {
                Err(EstimatorError::SensitivityRegimeMismatch {
                    param: "eps1/eps0",
                    regime: regime.label(),
                })
            }
            Regime::Monotonicity | Regime::NoMonotonicity { .. } if self.eps != 1.0 => {
                Err(EstimatorError::SensitivityRegimeMismatch {
                    param: "eps",
                    regime: regime.label(),
                })
            }
            _ => Ok(()),
        }
    }

    /// Over-weighting factor for stratum `v` on side `z`.
    fn factor(&self, regime: Regime, z: u8, v: Stratum) -> f64 {
        if v != Stratum::TreatedOnly {
            return 1.0;
        }
        match regime {
            Regime::StrongMonotonicity => self.eps,
            _ => {
                if z == 1 {
                    self.eps1
                } else {
                    self.eps0
                }
            }
        }
    }
}

/// Which observations one side of a contrast runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CellRef {
    Cell { z: u8, s: u8 },
    Arm { z: u8 },
}

/// Units of one cell with the weight each contributes to a stratum contrast.
#[derive(Debug, Clone)]
pub struct CellWeights {
    pub cell: CellRef,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl CellWeights {
    fn weighted_mean(&self, values: &[f64]) -> f64 {
        let mut sum = 0.0;
        for (&i, &w) in self.indices.iter().zip(&self.weights) {
            sum += w * values[i];
        }
        sum / self.indices.len() as f64
    }
}

/// The two weighted cells entering the contrast for one stratum.
#[derive(Debug, Clone)]
pub struct StratumWeights {
    pub stratum: Stratum,
    pub treated: CellWeights,
    pub control: CellWeights,
}

/// Per-unit stratum weights for every admitted stratum.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub regime: Regime,
    pub sens: SensitivityParams,
    pub strata: Vec<StratumWeights>,
    pub normalized: bool,
}

impl WeightSet {
    pub fn for_stratum(&self, stratum: Stratum) -> Option<&StratumWeights> {
        self.strata.iter().find(|sw| sw.stratum == stratum)
    }
}

/// Evaluates the identification weights for every admitted stratum.
pub fn stratum_weights(
    data: &ExperimentData,
    table: &ScoreTable,
    sens: &SensitivityParams,
) -> Result<WeightSet, EstimatorError> {
    stratum_weights_opt(data, table, sens, false)
}

/// As [`stratum_weights`], optionally rescaling each cell's weights to mean
/// one (a stability option; off in the plain estimators).
pub fn stratum_weights_opt(
    data: &ExperimentData,
    table: &ScoreTable,
    sens: &SensitivityParams,
    normalize: bool,
) -> Result<WeightSet, EstimatorError> {
    let regime = table.regime;
    sens.validate(regime)?;
    let mut strata = Vec::new();
    for &u in &table.strata {
        let treated = side_weights(data, table, sens, 1, u)?;
        let control = side_weights(data, table, sens, 0, u)?;
        strata.push(StratumWeights { stratum: u, treated, control });
    }
    let mut set = WeightSet { regime, sens: *sens, strata, normalized: normalize };
    if normalize {
        for sw in set.strata.iter_mut() {
            for side in [&mut sw.treated, &mut sw.control] {
                let mean = side.weights.iter().sum::<f64>() / side.weights.len() as f64;
                if mean > 0.0 {
                    for w in side.weights.iter_mut() {
                        *w /= mean;
                    }
                }
            }
        }
    }
    Ok(set)
}

fn side_weights(
    data: &ExperimentData,
    table: &ScoreTable,
    sens: &SensitivityParams,
    z: u8,
    u: Stratum,
) -> Result<CellWeights, EstimatorError> {
    let regime = table.regime;
    let (cell, indices, mix): (CellRef, Vec<usize>, Vec<Stratum>) =
        if regime == Regime::StrongMonotonicity && z == 0 {
            (CellRef::Arm { z: 0 }, data.arm_indices(0), regime.admitted_strata())
        } else {
            let s = u.s_under(z);
            (CellRef::Cell { z, s }, data.cell_indices(z, s), regime.cell_strata(z, s)?)
        };
    if indices.is_empty() {
        let s = u.s_under(z);
        return Err(EstimatorError::EmptyCell { z, s, stratum: u });
    }
    let weights = if mix.len() == 1 {
        vec![1.0; indices.len()]
    } else {
        let pi_u = table.proportion(u);
        let pi_cell: f64 = mix.iter().map(|&v| table.proportion(v)).sum();
        assert!(pi_u > 0.0 && pi_cell > 0.0, "proportions vanished despite clamping");
        let num_eps = sens.factor(regime, z, u);
        indices
            .iter()
            .map(|&i| {
                let mut denom = 0.0;
                for &v in &mix {
                    denom += sens.factor(regime, z, v) * table.score(i, v);
                }
                assert!(denom > 0.0, "mixture denominator vanished despite clamping");
                (num_eps * table.score(i, u) / denom) / (pi_u / pi_cell)
            })
            .collect()
    };
    Ok(CellWeights { cell, indices, weights })
}

/// Which estimators to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSel {
    Weighting,
    Adjusted,
    Both,
}

/// Estimator variant tag carried on every estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Weighting,
    Adjusted,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Weighting => "weighting",
            Variant::Adjusted => "adjusted",
        }
    }
}

/// Point estimate for one stratum, optionally with bootstrap uncertainty.
#[derive(Debug, Clone, Serialize)]
pub struct PceEstimate {
    pub stratum: Stratum,
    pub variant: Variant,
    pub point: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub level: Option<f64>,
    pub replicates: usize,
    pub failed_replicates: usize,
}

/// Sample-mean weighting contrasts, one per stratum (points only).
pub fn pce_weighting(
    data: &ExperimentData,
    weights: &WeightSet,
) -> Result<Vec<PceEstimate>, EstimatorError> {
    let y = data.y().ok_or(EstimatorError::MissingOutcome)?;
    Ok(weights
        .strata
        .iter()
        .map(|sw| PceEstimate {
            stratum: sw.stratum,
            variant: Variant::Weighting,
            point: sw.treated.weighted_mean(y) - sw.control.weighted_mean(y),
            se: None,
            ci: None,
            level: None,
            replicates: 0,
            failed_replicates: 0,
        })
        .collect())
}

/// Regression coefficients used by the covariate-adjusted estimator for one
/// stratum: weighted least squares of the outcome on the covariates within
/// each side's cell, using that side's stratum weights.
#[derive(Debug, Clone)]
pub struct AdjustmentFit {
    pub stratum: Stratum,
    pub beta_treated: Vec<f64>,
    pub beta_control: Vec<f64>,
    pub ridged: bool,
}

/// Controls for the adjusted estimator.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdjustConfig {
    /// Force both coefficient vectors to zero (the adjusted estimator then
    /// reduces exactly to the weighting estimator).
    pub zero_beta: bool,
}

/// Fits the per-stratum adjustment regressions.
pub fn adjustment_fits(
    data: &ExperimentData,
    weights: &WeightSet,
) -> Result<Vec<AdjustmentFit>, EstimatorError> {
    let y = data.y().ok_or(EstimatorError::MissingOutcome)?;
    let cfg = crate::numkit::FitConfig::default();
    let mut out = Vec::new();
    for sw in &weights.strata {
        let mut ridged = false;
        let mut side_beta = |side: &CellWeights| -> Result<Vec<f64>, EstimatorError> {
            let x = rows_of(data, &side.indices);
            let ys: Vec<f64> = side.indices.iter().map(|&i| y[i]).collect();
            let fit: WlsFit = weighted_least_squares(&x, &ys, &side.weights, &cfg)?;
            ridged |= fit.ridged;
            Ok(fit.coefficients.iter().cloned().collect())
        };
        let beta_treated = side_beta(&sw.treated)?;
        let beta_control = side_beta(&sw.control)?;
        out.push(AdjustmentFit { stratum: sw.stratum, beta_treated, beta_control, ridged });
    }
    Ok(out)
}

/// Covariate-adjusted estimator: weighted residual contrast plus the
/// recentering term, with the adjustment coefficients from
/// [`adjustment_fits`] (or zeros when configured).
pub fn pce_adjusted(
    data: &ExperimentData,
    weights: &WeightSet,
    cfg: &AdjustConfig,
) -> Result<Vec<PceEstimate>, EstimatorError> {
    if cfg.zero_beta {
        let mut out = pce_weighting(data, weights)?;
        for e in out.iter_mut() {
            e.variant = Variant::Adjusted;
        }
        return Ok(out);
    }
    let fits = adjustment_fits(data, weights)?;
    pce_adjusted_with(data, weights, &fits)
}

/// The adjusted estimator for caller-supplied coefficient vectors.
pub fn pce_adjusted_with(
    data: &ExperimentData,
    weights: &WeightSet,
    fits: &[AdjustmentFit],
) -> Result<Vec<PceEstimate>, EstimatorError> {
    let y = data.y().ok_or(EstimatorError::MissingOutcome)?;
    let p = data.width();
    let mut out = Vec::new();
    for sw in &weights.strata {
        let fit = fits
            .iter()
            .find(|f| f.stratum == sw.stratum)
            .expect("adjustment fit missing for stratum");
        let side_term = |side: &CellWeights, beta: &[f64]| -> (f64, Vec<f64>) {
            let mut resid_sum = 0.0;
            let mut wx = vec![0.0; p];
            for (&i, &w) in side.indices.iter().zip(&side.weights) {
                let mut bx = 0.0;
                for (j, slot) in wx.iter_mut().enumerate() {
                    let xij = data.x()[(i, j)];
                    bx += beta[j] * xij;
                    *slot += w * xij;
                }
                resid_sum += w * (y[i] - bx);
            }
            (resid_sum / side.indices.len() as f64, wx)
        };
        let (term_t, wx_t) = side_term(&sw.treated, &fit.beta_treated);
        let (term_c, wx_c) = side_term(&sw.control, &fit.beta_control);
        let n_pool = (sw.treated.indices.len() + sw.control.indices.len()) as f64;
        let mut recenter = 0.0;
        for j in 0..p {
            recenter += (fit.beta_treated[j] - fit.beta_control[j]) * (wx_t[j] + wx_c[j]);
        }
        out.push(PceEstimate {
            stratum: sw.stratum,
            variant: Variant::Adjusted,
            point: term_t - term_c + recenter / n_pool,
            se: None,
            ci: None,
            level: None,
            replicates: 0,
            failed_replicates: 0,
        });
    }
    Ok(out)
}

fn rows_of(data: &ExperimentData, indices: &[usize]) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(indices.len(), data.width(), |r, c| data.x()[(indices[r], c)])
}

/// The full estimation pipeline: score fit, weights, estimators. Re-run as a
/// whole on every bootstrap replicate.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub regime: Regime,
    pub sens: SensitivityParams,
    pub variant: VariantSel,
    pub score_cfg: ScoreConfig,
    pub normalize_weights: bool,
    pub zero_beta: bool,
}

impl Pipeline {
    pub fn new(regime: Regime) -> Pipeline {
        Pipeline {
            regime,
            sens: SensitivityParams::default(),
            variant: VariantSel::Both,
            score_cfg: ScoreConfig::default(),
            normalize_weights: false,
            zero_beta: false,
        }
    }

    pub fn fit_scores(&self, data: &ExperimentData) -> Result<ScoreModel, ScoreError> {
        pscore::fit(data, self.regime, &self.score_cfg)
    }

    /// Point estimates on one dataset (no uncertainty).
    pub fn run_points(&self, data: &ExperimentData) -> Result<Vec<PceEstimate>, EstimatorError> {
        let model = self.fit_scores(data)?;
        let table = model.score_table(data)?;
        self.run_points_with_table(data, &table)
    }

    pub fn run_points_with_table(
        &self,
        data: &ExperimentData,
        table: &ScoreTable,
    ) -> Result<Vec<PceEstimate>, EstimatorError> {
        let weights = stratum_weights_opt(data, table, &self.sens, self.normalize_weights)?;
        let mut out = Vec::new();
        if matches!(self.variant, VariantSel::Weighting | VariantSel::Both) {
            out.extend(pce_weighting(data, &weights)?);
        }
        if matches!(self.variant, VariantSel::Adjusted | VariantSel::Both) {
            out.extend(pce_adjusted(data, &weights, &AdjustConfig { zero_beta: self.zero_beta })?);
        }
        Ok(out)
    }
}

/// Bootstrap settings.
#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub replicates: usize,
    /// Confidence level of the percentile intervals, e.g. 0.95.
    pub level: f64,
    pub seed: u64,
    /// Evaluate replicates on the rayon pool. Point-identical to the
    /// sequential path; disabled inside study loops that already parallelize
    /// one level up.
    pub parallel: bool,
    /// Abort when more than this fraction of replicates fail.
    pub max_failure_fraction: f64,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, level: f64, seed: u64) -> Self {
        BootstrapConfig { replicates, level, seed, parallel: true, max_failure_fraction: 0.10 }
    }
}

/// Nonparametric unit-resampling bootstrap of the full pipeline.
///
/// Replicate `r` draws its indices from a stream seeded by `(seed, r)`, so
/// results do not depend on evaluation order or worker count. The standard
/// error is the standard deviation over successful replicates; the interval
/// is the percentile interval over the replicates plus the full-sample point
/// (so the interval always brackets the point).
pub fn estimate_with_bootstrap(
    data: &ExperimentData,
    pipeline: &Pipeline,
    cfg: &BootstrapConfig,
) -> Result<Vec<PceEstimate>, EstimatorError> {
    if cfg.replicates < 50 {
        return Err(EstimatorError::TooFewReplicates(cfg.replicates));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(EstimatorError::BadLevel(cfg.level));
    }
    let keyed = |ests: Vec<PceEstimate>| -> Vec<((Stratum, Variant), f64)> {
        ests.into_iter().map(|e| ((e.stratum, e.variant), e.point)).collect()
    };
    let runs = bootstrap_runs(data, cfg, |d| pipeline.run_points(d).map(keyed))?;
    let failed = runs.failed;
    Ok(summarize_bootstrap(&runs, cfg)
        .into_iter()
        .map(|agg| PceEstimate {
            stratum: agg.key.0,
            variant: agg.key.1,
            point: agg.point,
            se: Some(agg.se),
            ci: Some(agg.ci),
            level: Some(cfg.level),
            replicates: cfg.replicates,
            failed_replicates: failed,
        })
        .collect())
}

/// One full-sample evaluation plus the per-replicate evaluations that
/// succeeded. Shared by the estimators, balance diagnostics, and the
/// sensitivity grids.
pub(crate) struct BootstrapRuns<K> {
    pub point: Vec<(K, f64)>,
    pub replicates: Vec<Vec<(K, f64)>>,
    pub failed: usize,
}

pub(crate) fn bootstrap_runs<K, F>(
    data: &ExperimentData,
    cfg: &BootstrapConfig,
    eval: F,
) -> Result<BootstrapRuns<K>, EstimatorError>
where
    K: Clone + Send,
    F: Fn(&ExperimentData) -> Result<Vec<(K, f64)>, EstimatorError> + Sync,
{
    let point = eval(data)?;
    let n = data.n();
    let one = |r: usize| -> Option<Vec<(K, f64)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, r as u64));
        let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        eval(&data.resample(&indices)).ok()
    };
    let results: Vec<Option<Vec<(K, f64)>>> = if cfg.parallel {
        (0..cfg.replicates).into_par_iter().map(one).collect()
    } else {
        (0..cfg.replicates).map(one).collect()
    };
    let mut replicates = Vec::with_capacity(cfg.replicates);
    let mut failed = 0;
    for r in results {
        match r {
            Some(v) => replicates.push(v),
            None => failed += 1,
        }
    }
    if failed as f64 > cfg.max_failure_fraction * cfg.replicates as f64 {
        return Err(EstimatorError::BootstrapFailures {
            failed,
            total: cfg.replicates,
            max_percent: cfg.max_failure_fraction * 100.0,
        });
    }
    Ok(BootstrapRuns { point, replicates, failed })
}

pub(crate) struct BootstrapAggregate<K> {
    pub key: K,
    pub point: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

pub(crate) fn summarize_bootstrap<K: Clone + PartialEq>(
    runs: &BootstrapRuns<K>,
    cfg: &BootstrapConfig,
) -> Vec<BootstrapAggregate<K>> {
    runs.point
        .iter()
        .map(|(key, point)| {
            let mut values: Vec<f64> = runs
                .replicates
                .iter()
                .filter_map(|rep| rep.iter().find(|(k, _)| k == key).map(|(_, v)| *v))
                .collect();
            let se = std_dev(&values);
            values.push(*point);
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let alpha = 1.0 - cfg.level;
            let ci = (percentile(&values, alpha / 2.0), percentile(&values, 1.0 - alpha / 2.0));
            BootstrapAggregate { key: key.clone(), point: *point, se, ci }
        })
        .collect()
}

/// Sample standard deviation (n-1); zero when fewer than two values.
pub(crate) fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Linear-interpolation quantile of pre-sorted values.
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Flat JSON records in the report schema used by the command line front end.
pub fn estimates_to_json(
    estimates: &[PceEstimate],
    regime: Regime,
    sens: &SensitivityParams,
) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = estimates
        .iter()
        .map(|e| {
            json!({
                "stratum": e.stratum.label(),
                "variant": e.variant.label(),
                "point": e.point,
                "se": e.se,
                "ci": e.ci.map(|(lo, hi)| vec![lo, hi]),
                "level": e.level,
                "B": e.replicates,
                "failed_replicates": e.failed_replicates,
                "regime": regime.label(),
                "sensitivity": {
                    "eps": sens.eps,
                    "eps1": sens.eps1,
                    "eps0": sens.eps0,
                    "xi": regime.xi(),
                },
            })
        })
        .collect();
    json!(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    /// Dataset with all four cells populated and a constant score table.
    fn constant_score_fixture(
        regime: Regime,
        scores: &[(Stratum, f64)],
    ) -> (ExperimentData, ScoreTable) {
        let cells = [(1u8, 1u8, 10usize), (1, 0, 10), (0, 1, 10), (0, 0, 10)];
        let mut z = Vec::new();
        let mut s = Vec::new();
        let mut y = Vec::new();
        for (zi, si, count) in cells {
            for k in 0..count {
                z.push(zi);
                s.push(si);
                y.push(f64::from(zi) * 2.0 + f64::from(si) + 0.1 * k as f64);
            }
        }
        let n = z.len();
        let x = DMatrix::from_element(n, 1, 1.0);
        let data = ExperimentData::new(z, s, Some(y), x, vec!["(intercept)".into()]).unwrap();
        let strata: Vec<Stratum> = scores.iter().map(|(u, _)| *u).collect();
        let values: Vec<f64> = scores.iter().map(|(_, e)| *e).collect();
        let mat = DMatrix::from_fn(n, strata.len(), |_, c| values[c]);
        let table = ScoreTable::new(regime, strata, mat, values).unwrap();
        (data, table)
    }

    #[test]
    fn monotonicity_weight_formula_value() {
        let (data, table) = constant_score_fixture(
            Regime::Monotonicity,
            &[(Stratum::Both, 0.45), (Stratum::TreatedOnly, 0.25), (Stratum::Neither, 0.30)],
        );
        // Unit-level scores e = (both .5, treated_only .3, neither .2) with
        // proportions pi = (.45, .25, .30).
        let mut scores = table.scores.clone();
        for i in 0..data.n() {
            scores[(i, 0)] = 0.5;
            scores[(i, 1)] = 0.3;
            scores[(i, 2)] = 0.2;
        }
        let table = ScoreTable::new(
            Regime::Monotonicity,
            table.strata.clone(),
            scores,
            table.proportions.clone(),
        )
        .unwrap();
        let ws = stratum_weights(&data, &table, &SensitivityParams::default()).unwrap();
        let sw = ws.for_stratum(Stratum::TreatedOnly).unwrap();
        // (0.3 / 0.8) / (0.25 / 0.70) = 1.05
        assert_relative_eq!(sw.treated.weights[0], 1.05, epsilon = 1e-12);
    }

    #[test]
    fn strong_mono_sensitivity_weight_value() {
        let (data, table) = constant_score_fixture(
            Regime::StrongMonotonicity,
            &[(Stratum::TreatedOnly, 0.4), (Stratum::Neither, 0.6)],
        );
        let sens = SensitivityParams { eps: 2.0, ..Default::default() };
        let ws = stratum_weights(&data, &table, &sens).unwrap();
        let sw = ws.for_stratum(Stratum::TreatedOnly).unwrap();
        // 0.8 / ((0.8 + 0.6) * 0.4) = 1.428571...
        assert_relative_eq!(sw.control.weights[0], 0.8 / (1.4 * 0.4), epsilon = 1e-12);
    }

    #[test]
    fn unit_sensitivity_reduces_to_plain_weights_bitwise() {
        let (data, table) = constant_score_fixture(
            Regime::Monotonicity,
            &[(Stratum::Both, 0.45), (Stratum::TreatedOnly, 0.25), (Stratum::Neither, 0.30)],
        );
        let base = stratum_weights(&data, &table, &SensitivityParams::default()).unwrap();
        let ones = stratum_weights(
            &data,
            &table,
            &SensitivityParams { eps: 1.0, eps1: 1.0, eps0: 1.0 },
        )
        .unwrap();
        for (a, b) in base.strata.iter().zip(&ones.strata) {
            assert_eq!(a.treated.weights, b.treated.weights);
            assert_eq!(a.control.weights, b.control.weights);
        }
    }

    #[test]
    fn strong_mono_eps_one_is_score_over_proportion() {
        let (data, table) = constant_score_fixture(
            Regime::StrongMonotonicity,
            &[(Stratum::TreatedOnly, 0.4), (Stratum::Neither, 0.6)],
        );
        let ws = stratum_weights(&data, &table, &SensitivityParams::default()).unwrap();
        let sw = ws.for_stratum(Stratum::TreatedOnly).unwrap();
        assert_relative_eq!(sw.control.weights[0], 0.4 / 0.4, epsilon = 1e-12);
    }

    #[test]
    fn constant_scores_give_cell_mean_contrast() {
        let (data, table) = constant_score_fixture(
            Regime::StrongMonotonicity,
            &[(Stratum::TreatedOnly, 0.5), (Stratum::Neither, 0.5)],
        );
        let ws = stratum_weights(&data, &table, &SensitivityParams::default()).unwrap();
        let est = pce_weighting(&data, &ws).unwrap();
        let y = data.y().unwrap();
        let cell_mean = |z: u8, s: Option<u8>| {
            let idx: Vec<usize> = (0..data.n())
                .filter(|&i| data.z()[i] == z && s.map_or(true, |s| data.s()[i] == s))
                .collect();
            idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64
        };
        let to = est.iter().find(|e| e.stratum == Stratum::TreatedOnly).unwrap();
        assert_relative_eq!(to.point, cell_mean(1, Some(1)) - cell_mean(0, None), epsilon = 1e-12);
    }

    #[test]
    fn identical_constant_outcomes_give_zero_pce() {
        let (base, table) = constant_score_fixture(
            Regime::Monotonicity,
            &[(Stratum::Both, 0.4), (Stratum::TreatedOnly, 0.3), (Stratum::Neither, 0.3)],
        );
        let data = ExperimentData::new(
            base.z().to_vec(),
            base.s().to_vec(),
            Some(vec![3.5; base.n()]),
            base.x().clone(),
            base.covariate_names().to_vec(),
        )
        .unwrap();
        let ws = stratum_weights(&data, &table, &SensitivityParams::default()).unwrap();
        for est in pce_weighting(&data, &ws).unwrap() {
            assert_relative_eq!(est.point, 0.0, epsilon = 1e-12);
        }
        for est in pce_adjusted(&data, &ws, &AdjustConfig::default()).unwrap() {
            assert_relative_eq!(est.point, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_beta_adjustment_equals_weighting_exactly() {
        let (data, table) = constant_score_fixture(
            Regime::Monotonicity,
            &[(Stratum::Both, 0.4), (Stratum::TreatedOnly, 0.3), (Stratum::Neither, 0.3)],
        );
        let ws = stratum_weights(&data, &table, &SensitivityParams::default()).unwrap();
        let w = pce_weighting(&data, &ws).unwrap();
        let a = pce_adjusted(&data, &ws, &AdjustConfig { zero_beta: true }).unwrap();
        for (we, ae) in w.iter().zip(&a) {
            assert_eq!(we.point, ae.point);
            assert_eq!(ae.variant, Variant::Adjusted);
        }
    }

    #[test]
    fn affine_outcome_maps_estimates_affinely() {
        let (data, table) = constant_score_fixture(
            Regime::Monotonicity,
            &[(Stratum::Both, 0.4), (Stratum::TreatedOnly, 0.35), (Stratum::Neither, 0.25)],
        );
        let ws = stratum_weights(&data, &table, &SensitivityParams::default()).unwrap();
        let (a, b) = (2.5, -7.0);
        let shifted = ExperimentData::new(
            data.z().to_vec(),
            data.s().to_vec(),
            Some(data.y().unwrap().iter().map(|v| a * v + b).collect()),
            data.x().clone(),
            data.covariate_names().to_vec(),
        )
        .unwrap();
        for (base, trans) in [
            (pce_weighting(&data, &ws).unwrap(), pce_weighting(&shifted, &ws).unwrap()),
            (
                pce_adjusted(&data, &ws, &AdjustConfig::default()).unwrap(),
                pce_adjusted(&shifted, &ws, &AdjustConfig::default()).unwrap(),
            ),
        ] {
            for (e0, e1) in base.iter().zip(&trans) {
                assert_relative_eq!(e1.point, a * e0.point, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn missing_outcome_is_rejected() {
        let (data, table) = constant_score_fixture(
            Regime::StrongMonotonicity,
            &[(Stratum::TreatedOnly, 0.5), (Stratum::Neither, 0.5)],
        );
        let scores_only = data.without_outcome();
        let ws = stratum_weights(&scores_only, &table, &SensitivityParams::default()).unwrap();
        assert!(matches!(pce_weighting(&scores_only, &ws), Err(EstimatorError::MissingOutcome)));
    }

    #[test]
    fn empty_required_cell_is_named() {
        let mut z = Vec::new();
        let mut s = Vec::new();
        for (zi, si, count) in [(1u8, 1u8, 5usize), (1, 0, 5), (0, 0, 5)] {
            for _ in 0..count {
                z.push(zi);
                s.push(si);
            }
        }
        let n = z.len();
        let data = ExperimentData::new(
            z,
            s,
            Some(vec![0.0; n]),
            DMatrix::from_element(n, 1, 1.0),
            vec!["(intercept)".into()],
        )
        .unwrap();
        let table = ScoreTable::new(
            Regime::Monotonicity,
            vec![Stratum::Both, Stratum::TreatedOnly, Stratum::Neither],
            DMatrix::from_fn(n, 3, |_, c| [0.4, 0.3, 0.3][c]),
            vec![0.4, 0.3, 0.3],
        )
        .unwrap();
        let err = stratum_weights(&data, &table, &SensitivityParams::default()).unwrap_err();
        assert!(matches!(err, EstimatorError::EmptyCell { z: 0, s: 1, stratum: Stratum::Both }));
    }

    #[test]
    fn sensitivity_params_respect_regimes() {
        let sens = SensitivityParams { eps: 2.0, ..Default::default() };
        assert!(sens.validate(Regime::StrongMonotonicity).is_ok());
        assert!(sens.validate(Regime::Monotonicity).is_err());
        let sens = SensitivityParams { eps1: 0.5, ..Default::default() };
        assert!(sens.validate(Regime::Monotonicity).is_ok());
        assert!(sens.validate(Regime::StrongMonotonicity).is_err());
        let sens = SensitivityParams { eps: -1.0, ..Default::default() };
        assert!(matches!(
            sens.validate(Regime::StrongMonotonicity),
            Err(EstimatorError::NonPositiveSensitivity)
        ));
    }

    fn seeded_sim_data(seed: u64, n: usize) -> ExperimentData {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Vec::new();
        let mut s = Vec::new();
        let mut y = Vec::new();
        let mut xs = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let zi = u8::from(rng.gen_bool(0.5));
            let p_both = 0.3;
            let p_to = 1.0 / (1.0 + (-x).exp()) * 0.5;
            let draw: f64 = rng.gen();
            let u = if draw < p_both {
                Stratum::Both
            } else if draw < p_both + p_to {
                Stratum::TreatedOnly
            } else {
                Stratum::Neither
            };
            let si = u.s_under(zi);
            let yi = x + f64::from(zi) + 0.3 * rng.gen_range(-1.0..1.0);
            z.push(zi);
            s.push(si);
            y.push(yi);
            xs.push(x);
        }
        let x = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { xs[r] });
        ExperimentData::new(z, s, Some(y), x, vec!["(intercept)".into(), "x".into()]).unwrap()
    }

    #[test]
    fn bootstrap_is_deterministic_given_seed() {
        let data = seeded_sim_data(31, 160);
        let pipeline = Pipeline::new(Regime::Monotonicity);
        let cfg = BootstrapConfig::new(60, 0.95, 999);
        let a = estimate_with_bootstrap(&data, &pipeline, &cfg).unwrap();
        let b = estimate_with_bootstrap(&data, &pipeline, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.point, y.point);
            assert_eq!(x.se, y.se);
            assert_eq!(x.ci, y.ci);
        }
        // And independent of the parallel/sequential path.
        let mut seq_cfg = cfg.clone();
        seq_cfg.parallel = false;
        let c = estimate_with_bootstrap(&data, &pipeline, &seq_cfg).unwrap();
        for (x, y) in a.iter().zip(&c) {
            assert_eq!(x.point, y.point);
            assert_eq!(x.se, y.se);
        }
    }

    #[test]
    fn degenerate_outcome_collapses_interval() {
        // Intercept-only data: the fitted scores are constant, so every
        // stratum weight is exactly one and a constant outcome pins every
        // replicate at zero.
        let base = seeded_sim_data(77, 120);
        let constant = ExperimentData::new(
            base.z().to_vec(),
            base.s().to_vec(),
            Some(vec![1.25; base.n()]),
            DMatrix::from_element(base.n(), 1, 1.0),
            vec!["(intercept)".into()],
        )
        .unwrap();
        let pipeline =
            Pipeline { variant: VariantSel::Weighting, ..Pipeline::new(Regime::Monotonicity) };
        let cfg = BootstrapConfig::new(60, 0.95, 5);
        let ests = estimate_with_bootstrap(&constant, &pipeline, &cfg).unwrap();
        for e in ests {
            assert_relative_eq!(e.point, 0.0, epsilon = 1e-9);
            assert!(e.se.unwrap() <= 1e-9);
            let (lo, hi) = e.ci.unwrap();
            assert_relative_eq!(lo, hi, epsilon = 1e-8);
        }
    }

    #[test]
    fn interval_brackets_the_point() {
        let data = seeded_sim_data(123, 150);
        let pipeline = Pipeline::new(Regime::Monotonicity);
        let cfg = BootstrapConfig::new(50, 0.9, 42);
        for e in estimate_with_bootstrap(&data, &pipeline, &cfg).unwrap() {
            let (lo, hi) = e.ci.unwrap();
            assert!(lo <= e.point && e.point <= hi);
        }
    }

    #[test]
    fn too_few_replicates_rejected() {
        let data = seeded_sim_data(1, 100);
        let pipeline = Pipeline::new(Regime::Monotonicity);
        let cfg = BootstrapConfig::new(10, 0.95, 1);
        assert!(matches!(
            estimate_with_bootstrap(&data, &pipeline, &cfg),
            Err(EstimatorError::TooFewReplicates(10))
        ));
    }
}
