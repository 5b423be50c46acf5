//! Model diagnostics that never require trusting the outcome model: covariate
//! balance over the weighted cells, and the exclusion-restriction /
//! ignorability compatibility test.
//!
//! Balance treats a covariate function `h(X)` as the outcome of the weighting
//! contrast for each stratum; a correct score model makes every contrast zero
//! in expectation, so the standardized statistics behave like standard
//! normals. The balance operation reads only `(X, Z, S)` and works on
//! score-only data.

use serde_json::json;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::ExperimentData;
use crate::estimators::{
    bootstrap_runs, pce_weighting, stratum_weights, summarize_bootstrap, BootstrapConfig,
    EstimatorError, SensitivityParams,
};
use crate::pscore::{self, Regime, ScoreModel, Stratum};

/// A named scalar function of the covariate row.
#[derive(Debug, Clone)]
pub struct BalanceFn {
    pub name: String,
    kind: BalanceKind,
}

#[derive(Debug, Clone, Copy)]
enum BalanceKind {
    Column(usize),
    Square(usize),
    Product(usize, usize),
    Affine { col: usize, scale: f64, shift: f64 },
}

impl BalanceFn {
    pub fn column(name: impl Into<String>, index: usize) -> BalanceFn {
        BalanceFn { name: name.into(), kind: BalanceKind::Column(index) }
    }

    /// An affinely transformed column, e.g. a standardized covariate.
    pub fn affine(name: impl Into<String>, col: usize, scale: f64, shift: f64) -> BalanceFn {
        BalanceFn { name: name.into(), kind: BalanceKind::Affine { col, scale, shift } }
    }

    fn evaluate(&self, data: &ExperimentData, unit: usize) -> f64 {
        match self.kind {
            BalanceKind::Column(j) => data.x()[(unit, j)],
            BalanceKind::Square(j) => data.x()[(unit, j)] * data.x()[(unit, j)],
            BalanceKind::Product(a, b) => data.x()[(unit, a)] * data.x()[(unit, b)],
            BalanceKind::Affine { col, scale, shift } => scale * data.x()[(unit, col)] + shift,
        }
    }
}

/// The set of covariate functions to balance-check.
#[derive(Debug, Clone)]
pub struct BalanceSpec {
    pub functions: Vec<BalanceFn>,
}

impl BalanceSpec {
    /// Every non-intercept covariate column.
    pub fn default_for(data: &ExperimentData) -> BalanceSpec {
        let functions = data
            .covariate_names()
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, name)| BalanceFn { name: name.clone(), kind: BalanceKind::Column(j) })
            .collect();
        BalanceSpec { functions }
    }

    /// Adds the square of every non-intercept column.
    pub fn with_squares(mut self, data: &ExperimentData) -> BalanceSpec {
        for (j, name) in data.covariate_names().iter().enumerate().skip(1) {
            self.functions
                .push(BalanceFn { name: format!("{name}^2"), kind: BalanceKind::Square(j) });
        }
        self
    }

    /// Adds every pairwise product of distinct non-intercept columns.
    pub fn with_products(mut self, data: &ExperimentData) -> BalanceSpec {
        let names = data.covariate_names();
        for a in 1..names.len() {
            for b in (a + 1)..names.len() {
                self.functions.push(BalanceFn {
                    name: format!("{}*{}", names[a], names[b]),
                    kind: BalanceKind::Product(a, b),
                });
            }
        }
        self
    }
}

/// One balancing equation: a covariate function crossed with a stratum.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BalanceRow {
    pub function: String,
    pub stratum: Stratum,
    pub treated_side: f64,
    pub control_side: f64,
    pub difference: f64,
    pub se: f64,
    pub t: f64,
    /// The bootstrap spread vanished (constant function); `t` is reported
    /// as zero.
    pub degenerate: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BalanceReport {
    pub regime: &'static str,
    pub threshold: f64,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub rows: Vec<BalanceRow>,
}

impl BalanceReport {
    /// Fraction of equations with `|t|` above the threshold.
    pub fn flagged_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.flagged).count() as f64 / self.rows.len() as f64
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "function,stratum,treated_side,control_side,difference,se,t,degenerate,flagged\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.function,
                r.stratum.label(),
                r.treated_side,
                r.control_side,
                r.difference,
                r.se,
                r.t,
                r.degenerate,
                r.flagged
            ));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "regime": self.regime,
            "threshold": self.threshold,
            "replicates": self.replicates,
            "failed_replicates": self.failed_replicates,
            "rows": self.rows,
            "recommendation": if self.rows.iter().any(|r| r.flagged) {
                "some balancing equations are violated; consider a richer score model \
                 (higher-order polynomial or interaction terms)"
            } else {
                "balancing equations are consistent with the fitted score model"
            },
        })
    }
}

/// Default flag threshold on the standardized statistics.
pub const BALANCE_THRESHOLD: f64 = 1.96;

/// Evaluates every balancing equation with bootstrap standard errors.
///
/// Each equation is the stratum's weighting contrast applied to `h(X)`; the
/// score model is refit on every replicate with the model's own
/// configuration. Outcomes are never read.
pub fn balance_check(
    data: &ExperimentData,
    model: &ScoreModel,
    spec: &BalanceSpec,
    replicates: usize,
    seed: u64,
    parallel: bool,
) -> Result<BalanceReport, EstimatorError> {
    balance_check_opt(data, model, spec, replicates, seed, parallel, false)
}

/// As [`balance_check`], optionally with the cell-mean-one weight
/// normalization. Normalization makes the statistics exactly invariant to
/// affine changes of the balance functions (the shift term cancels).
#[allow(clippy::too_many_arguments)]
pub fn balance_check_opt(
    data: &ExperimentData,
    model: &ScoreModel,
    spec: &BalanceSpec,
    replicates: usize,
    seed: u64,
    parallel: bool,
    normalize: bool,
) -> Result<BalanceReport, EstimatorError> {
    let regime = model.regime();
    let score_cfg = model.config().clone();
    let sens = SensitivityParams::default();
    let eval = |d: &ExperimentData| -> Result<Vec<((usize, Stratum), f64)>, EstimatorError> {
        let m = pscore::fit(d, regime, &score_cfg)?;
        let table = m.score_table(d)?;
        let ws = crate::estimators::stratum_weights_opt(d, &table, &sens, normalize)?;
        let mut out = Vec::new();
        for (f_idx, f) in spec.functions.iter().enumerate() {
            let h: Vec<f64> = (0..d.n()).map(|i| f.evaluate(d, i)).collect();
            for sw in &ws.strata {
                let lhs = weighted_mean(&sw.treated.indices, &sw.treated.weights, &h);
                let rhs = weighted_mean(&sw.control.indices, &sw.control.weights, &h);
                out.push(((f_idx, sw.stratum), lhs - rhs));
            }
        }
        Ok(out)
    };
    let cfg = BootstrapConfig { parallel, ..BootstrapConfig::new(replicates.max(50), 0.95, seed) };
    let runs = bootstrap_runs(data, &cfg, eval)?;

    // Recompute the two sides on the full sample for reporting.
    let table = model.score_table(data)?;
    let ws = crate::estimators::stratum_weights_opt(data, &table, &sens, normalize)?;
    let mut rows = Vec::new();
    for (f_idx, f) in spec.functions.iter().enumerate() {
        let h: Vec<f64> = (0..data.n()).map(|i| f.evaluate(data, i)).collect();
        for sw in &ws.strata {
            let lhs = weighted_mean(&sw.treated.indices, &sw.treated.weights, &h);
            let rhs = weighted_mean(&sw.control.indices, &sw.control.weights, &h);
            let diff = lhs - rhs;
            let reps: Vec<f64> = runs
                .replicates
                .iter()
                .filter_map(|rep| {
                    rep.iter().find(|(k, _)| *k == (f_idx, sw.stratum)).map(|(_, v)| *v)
                })
                .collect();
            let se = crate::estimators::std_dev(&reps);
            let degenerate = se == 0.0;
            let t = if degenerate { 0.0 } else { diff / se };
            rows.push(BalanceRow {
                function: f.name.clone(),
                stratum: sw.stratum,
                treated_side: lhs,
                control_side: rhs,
                difference: diff,
                se,
                t,
                degenerate,
                flagged: t.abs() > BALANCE_THRESHOLD,
            });
        }
    }
    Ok(BalanceReport {
        regime: regime.label(),
        threshold: BALANCE_THRESHOLD,
        replicates: cfg.replicates,
        failed_replicates: runs.failed,
        rows,
    })
}

fn weighted_mean(indices: &[usize], weights: &[f64], values: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (&i, &w) in indices.iter().zip(weights) {
        sum += w * values[i];
    }
    sum / indices.len() as f64
}

/// One side of the compatibility test report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ErGpiRow {
    pub stratum: Stratum,
    pub eps_used: f64,
    /// Weighted mixed-cell side minus pure-cell side; equals minus the
    /// stratum's principal effect when the sensitivity value is correct, and
    /// zero under exclusion restriction.
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ErGpiReport {
    pub replicates: usize,
    pub failed_replicates: usize,
    pub rows: Vec<ErGpiRow>,
}

impl ErGpiReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "replicates": self.replicates,
            "failed_replicates": self.failed_replicates,
            "rows": self.rows,
        })
    }
}

/// Compatibility test of ignorability and exclusion restriction under
/// monotonicity: for each pure-cell stratum (`neither` at `eps0`, `both` at
/// `eps1`), the difference between the weighted mixed-cell side and the pure
/// cell side, with bootstrap standard errors and two-sided normal p-values.
pub fn er_gpi_test(
    data: &ExperimentData,
    model: &ScoreModel,
    eps0: f64,
    eps1: f64,
    replicates: usize,
    seed: u64,
    parallel: bool,
) -> Result<ErGpiReport, EstimatorError> {
    if model.regime() != Regime::Monotonicity {
        return Err(EstimatorError::WrongRegime { required: "mono", got: model.regime().label() });
    }
    data.y().ok_or(EstimatorError::MissingOutcome)?;
    let sens = SensitivityParams { eps: 1.0, eps1, eps0 };
    sens.validate(Regime::Monotonicity)?;
    let score_cfg = model.config().clone();
    let eval = |d: &ExperimentData| -> Result<Vec<(Stratum, f64)>, EstimatorError> {
        let m = pscore::fit(d, Regime::Monotonicity, &score_cfg)?;
        let table = m.score_table(d)?;
        let ws = stratum_weights(d, &table, &sens)?;
        let ests = pce_weighting(d, &ws)?;
        Ok(ests
            .into_iter()
            .filter(|e| matches!(e.stratum, Stratum::Neither | Stratum::Both))
            .map(|e| (e.stratum, -e.point))
            .collect())
    };
    let cfg = BootstrapConfig { parallel, ..BootstrapConfig::new(replicates.max(50), 0.95, seed) };
    let runs = bootstrap_runs(data, &cfg, eval)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let rows = summarize_bootstrap(&runs, &cfg)
        .into_iter()
        .map(|agg| {
            let se = agg.se;
            let z = if se == 0.0 { 0.0 } else { agg.point / se };
            ErGpiRow {
                stratum: agg.key,
                eps_used: if agg.key == Stratum::Neither { eps0 } else { eps1 },
                estimate: agg.point,
                se,
                z,
                p: 2.0 * (1.0 - normal.cdf(z.abs())),
            }
        })
        .collect();
    Ok(ErGpiReport { replicates: cfg.replicates, failed_replicates: runs.failed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pscore::ScoreConfig;
    use crate::simkit::{self, generate, OutcomeFamily, ScenarioSpec, SimRegime};
    use approx::assert_relative_eq;

    fn mono_data(seed: u64, n: usize) -> ExperimentData {
        let spec =
            ScenarioSpec { n, ..ScenarioSpec::new(SimRegime::Mono, OutcomeFamily::Normal, 0.5) };
        generate(&spec, seed).unwrap().0
    }

    #[test]
    fn balance_runs_on_score_only_data() {
        let data = mono_data(5, 300).without_outcome();
        let model = pscore::fit(&data, Regime::Monotonicity, &ScoreConfig::default()).unwrap();
        let spec = BalanceSpec::default_for(&data);
        let report = balance_check(&data, &model, &spec, 50, 11, false).unwrap();
        assert_eq!(report.rows.len(), 5 * 3);
        for row in &report.rows {
            assert!(row.t.is_finite());
        }
        assert!(!report.to_csv_string().is_empty());
    }

    #[test]
    fn constant_function_reports_degenerate_zero_t() {
        let data = mono_data(9, 250);
        let model = pscore::fit(&data, Regime::Monotonicity, &ScoreConfig::default()).unwrap();
        // The intercept column is constant one; after weighting, both sides
        // of the pure-cell equations are exactly one in every replicate.
        let spec = BalanceSpec { functions: vec![BalanceFn::column("(intercept)", 0)] };
        let report = balance_check(&data, &model, &spec, 50, 3, false).unwrap();
        let neither =
            report.rows.iter().find(|r| r.stratum == Stratum::Neither).unwrap();
        assert!(neither.t.is_finite());
        for row in report.rows.iter().filter(|r| r.degenerate) {
            assert_eq!(row.t, 0.0);
            assert!(!row.flagged);
        }
    }

    #[test]
    fn balance_statistics_invariant_to_affine_h() {
        // Replacing h by a*h + b rescales difference and se together under
        // the cell-mean-one normalization, leaving t unchanged: the shift
        // cancels exactly because every cell's weights average to one.
        let data = mono_data(21, 400);
        let model = pscore::fit(&data, Regime::Monotonicity, &ScoreConfig::default()).unwrap();
        let plain = BalanceSpec { functions: vec![BalanceFn::column("x1", 1)] };
        let affine =
            BalanceSpec { functions: vec![BalanceFn::affine("3*x1-4", 1, 3.0, -4.0)] };
        let a = balance_check_opt(&data, &model, &plain, 60, 7, false, true).unwrap();
        let b = balance_check_opt(&data, &model, &affine, 60, 7, false, true).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert!(!ra.degenerate);
            assert_relative_eq!(ra.t, rb.t, epsilon = 1e-8);
            assert_relative_eq!(3.0 * ra.difference, rb.difference, epsilon = 1e-9);
            assert_relative_eq!(3.0 * ra.se, rb.se, epsilon = 1e-9);
        }
    }

    #[test]
    fn er_gpi_deterministic_and_regime_checked() {
        let data = mono_data(13, 300);
        let model = pscore::fit(&data, Regime::Monotonicity, &ScoreConfig::default()).unwrap();
        let a = er_gpi_test(&data, &model, 1.0, 1.0, 60, 17, false).unwrap();
        let b = er_gpi_test(&data, &model, 1.0, 1.0, 60, 17, false).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.estimate, y.estimate);
            assert_eq!(x.se, y.se);
            assert_eq!(x.p, y.p);
        }
        let sm = pscore::fit(&data, Regime::StrongMonotonicity, &ScoreConfig::default()).unwrap();
        assert!(matches!(
            er_gpi_test(&data, &sm, 1.0, 1.0, 60, 17, false),
            Err(EstimatorError::WrongRegime { .. })
        ));
    }

    #[test]
    fn er_estimate_tracks_minus_effect() {
        // The scenario's neither-stratum effect is 2, so the compatibility
        // difference should sit near -2 with a small p-value at n = 2500.
        let data = mono_data(3, 2500);
        let model = pscore::fit(&data, Regime::Monotonicity, &ScoreConfig::default()).unwrap();
        let report = er_gpi_test(&data, &model, 1.0, 1.0, 80, 23, false).unwrap();
        let neither = report.rows.iter().find(|r| r.stratum == Stratum::Neither).unwrap();
        assert!(
            (neither.estimate + 2.0).abs() < 0.4,
            "estimate {} should be near -2",
            neither.estimate
        );
        assert!(neither.p < 0.01);
    }

    #[test]
    fn exact_balance_shared_with_enumeration_oracle() {
        let pop =
            simkit::random_population(Regime::Monotonicity, &SensitivityParams::default(), 99);
        assert!(simkit::exact_balance_check(&pop).unwrap() <= 1e-10);
    }
}
