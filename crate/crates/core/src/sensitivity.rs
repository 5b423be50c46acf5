//! Sensitivity-analysis grids: estimate surfaces over `eps` (strong
//! monotonicity), `(eps1, eps0)` (monotonicity), and `xi` (no monotonicity).
//!
//! Every grid point is a full analysis (weights, estimators, bootstrap
//! interval). All points share the bootstrap streams of one master seed, so
//! a grid is deterministic and each point's output is independent of the
//! grid's ordering. The `eps` grids reuse one score fit per replicate (the
//! sensitivity parameters enter the weights only); the `xi` grid refits the
//! score model per replicate and per `xi` (it enters the score model).

use serde_json::json;

use crate::dataset::ExperimentData;
use crate::estimators::{
    bootstrap_runs, summarize_bootstrap, BootstrapConfig, EstimatorError, PceEstimate, Pipeline,
    SensitivityParams, Variant,
};
use crate::pscore::{self, xi_upper_bound, Regime, ScoreError, Stratum};

/// One evaluated grid point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GridPoint {
    pub eps: Option<f64>,
    pub eps1: Option<f64>,
    pub eps0: Option<f64>,
    pub xi: Option<f64>,
    pub estimates: Vec<PceEstimate>,
}

impl GridPoint {
    /// Whether the interval at this point covers zero.
    pub fn covers_zero(&self, stratum: Stratum, variant: Variant) -> Option<bool> {
        self.estimates
            .iter()
            .find(|e| e.stratum == stratum && e.variant == variant)
            .and_then(|e| e.ci)
            .map(|(lo, hi)| lo <= 0.0 && 0.0 <= hi)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SensitivityGrid {
    pub regime: &'static str,
    pub level: f64,
    pub replicates: usize,
    pub points: Vec<GridPoint>,
}

impl SensitivityGrid {
    /// Long format: one row per grid point, stratum, and variant.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "eps,eps1,eps0,xi,stratum,variant,point,se,ci_low,ci_high,covers_zero\n",
        );
        for gp in &self.points {
            for e in &gp.estimates {
                let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
                let (lo, hi) = e.ci.unwrap_or((f64::NAN, f64::NAN));
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    opt(gp.eps),
                    opt(gp.eps1),
                    opt(gp.eps0),
                    opt(gp.xi),
                    e.stratum.label(),
                    e.variant.label(),
                    e.point,
                    e.se.map_or(String::new(), |s| s.to_string()),
                    lo,
                    hi,
                    gp.covers_zero(e.stratum, e.variant).map_or(String::new(), |c| c.to_string()),
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "regime": self.regime,
            "level": self.level,
            "replicates": self.replicates,
            "points": self.points.iter().map(|gp| {
                json!({
                    "eps": gp.eps,
                    "eps1": gp.eps1,
                    "eps0": gp.eps0,
                    "xi": gp.xi,
                    "estimates": gp.estimates,
                    "covers_zero": gp.estimates.iter().map(|e| json!({
                        "stratum": e.stratum.label(),
                        "variant": e.variant.label(),
                        "covers_zero": gp.covers_zero(e.stratum, e.variant),
                    })).collect::<Vec<_>>(),
                })
            }).collect::<Vec<_>>(),
        })
    }
}

/// Thirteen log-spaced values spanning [1/2, 2].
pub fn default_eps_grid() -> Vec<f64> {
    let k = 13;
    let (lo, hi) = (0.5f64.ln(), 2.0f64.ln());
    (0..k).map(|i| (lo + (hi - lo) * i as f64 / (k - 1) as f64).exp()).collect()
}

/// Eleven linear values spanning [0, bound].
pub fn default_xi_grid(bound: f64) -> Vec<f64> {
    let k = 11;
    (0..k).map(|i| bound * i as f64 / (k - 1) as f64).collect()
}

type Key = (usize, Stratum, Variant);

fn assemble(
    params: &[(Option<f64>, Option<f64>, Option<f64>, Option<f64>)],
    keyed: Vec<crate::estimators::BootstrapAggregate<Key>>,
    failed: usize,
    cfg: &BootstrapConfig,
    regime: Regime,
) -> SensitivityGrid {
    let mut points: Vec<GridPoint> = params
        .iter()
        .map(|&(eps, eps1, eps0, xi)| GridPoint { eps, eps1, eps0, xi, estimates: Vec::new() })
        .collect();
    for agg in keyed {
        let (idx, stratum, variant) = agg.key;
        points[idx].estimates.push(PceEstimate {
            stratum,
            variant,
            point: agg.point,
            se: Some(agg.se),
            ci: Some(agg.ci),
            level: Some(cfg.level),
            replicates: cfg.replicates,
            failed_replicates: failed,
        });
    }
    SensitivityGrid {
        regime: regime.label(),
        level: cfg.level,
        replicates: cfg.replicates,
        points,
    }
}

fn check_grid_preconditions(cfg: &BootstrapConfig) -> Result<(), EstimatorError> {
    if cfg.replicates < 50 {
        return Err(EstimatorError::TooFewReplicates(cfg.replicates));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(EstimatorError::BadLevel(cfg.level));
    }
    Ok(())
}

/// Estimate surface over `eps` under strong monotonicity. One score fit per
/// replicate serves every grid value.
pub fn grid_eps_strong(
    data: &ExperimentData,
    pipeline: &Pipeline,
    eps_values: &[f64],
    cfg: &BootstrapConfig,
) -> Result<SensitivityGrid, EstimatorError> {
    check_grid_preconditions(cfg)?;
    if pipeline.regime != Regime::StrongMonotonicity {
        return Err(EstimatorError::WrongRegime {
            required: "strong-mono",
            got: pipeline.regime.label(),
        });
    }
    let sens_points: Vec<SensitivityParams> = eps_values
        .iter()
        .map(|&eps| SensitivityParams { eps, ..Default::default() })
        .collect();
    for s in &sens_points {
        s.validate(pipeline.regime)?;
    }
    let eval = |d: &ExperimentData| -> Result<Vec<(Key, f64)>, EstimatorError> {
        let model = pipeline.fit_scores(d)?;
        let table = model.score_table(d)?;
        let mut out = Vec::new();
        for (idx, sens) in sens_points.iter().enumerate() {
            let p = Pipeline { sens: *sens, ..pipeline.clone() };
            for e in p.run_points_with_table(d, &table)? {
                out.push(((idx, e.stratum, e.variant), e.point));
            }
        }
        Ok(out)
    };
    let runs = bootstrap_runs(data, cfg, eval)?;
    let params: Vec<_> =
        eps_values.iter().map(|&e| (Some(e), None, None, None)).collect();
    let failed = runs.failed;
    Ok(assemble(&params, summarize_bootstrap(&runs, cfg), failed, cfg, pipeline.regime))
}

/// Full factorial estimate surface over `(eps1, eps0)` under monotonicity.
pub fn grid_eps_mono(
    data: &ExperimentData,
    pipeline: &Pipeline,
    eps1_values: &[f64],
    eps0_values: &[f64],
    cfg: &BootstrapConfig,
) -> Result<SensitivityGrid, EstimatorError> {
    check_grid_preconditions(cfg)?;
    if pipeline.regime != Regime::Monotonicity {
        return Err(EstimatorError::WrongRegime {
            required: "mono",
            got: pipeline.regime.label(),
        });
    }
    let mut sens_points = Vec::new();
    let mut params = Vec::new();
    for &e1 in eps1_values {
        for &e0 in eps0_values {
            let sens = SensitivityParams { eps1: e1, eps0: e0, ..Default::default() };
            sens.validate(pipeline.regime)?;
            sens_points.push(sens);
            params.push((None, Some(e1), Some(e0), None));
        }
    }
    let eval = |d: &ExperimentData| -> Result<Vec<(Key, f64)>, EstimatorError> {
        let model = pipeline.fit_scores(d)?;
        let table = model.score_table(d)?;
        let mut out = Vec::new();
        for (idx, sens) in sens_points.iter().enumerate() {
            let p = Pipeline { sens: *sens, ..pipeline.clone() };
            for e in p.run_points_with_table(d, &table)? {
                out.push(((idx, e.stratum, e.variant), e.point));
            }
        }
        Ok(out)
    };
    let runs = bootstrap_runs(data, cfg, eval)?;
    let failed = runs.failed;
    Ok(assemble(&params, summarize_bootstrap(&runs, cfg), failed, cfg, pipeline.regime))
}

/// Estimate surface over `xi`. Validates every value against the full
/// sample's admissible range, then refits the score model per replicate and
/// per value.
pub fn grid_xi(
    data: &ExperimentData,
    pipeline: &Pipeline,
    xi_values: &[f64],
    cfg: &BootstrapConfig,
) -> Result<SensitivityGrid, EstimatorError> {
    check_grid_preconditions(cfg)?;
    let bound = xi_upper_bound(&data.summarize())?;
    for &xi in xi_values {
        if !xi.is_finite() || xi < 0.0 || xi > bound + 1e-12 {
            return Err(EstimatorError::Score(ScoreError::XiOutOfBounds { xi, bound }));
        }
    }
    let sens = pipeline.sens;
    sens.validate(Regime::NoMonotonicity { xi: 0.0 })?;
    let eval = |d: &ExperimentData| -> Result<Vec<(Key, f64)>, EstimatorError> {
        let mut out = Vec::new();
        for (idx, &xi) in xi_values.iter().enumerate() {
            let model = pscore::fit_nomono_em_unchecked(d, xi, &pipeline.score_cfg)?;
            let table = model.score_table(d)?;
            let p = Pipeline {
                regime: Regime::NoMonotonicity { xi },
                sens,
                ..pipeline.clone()
            };
            for e in p.run_points_with_table(d, &table)? {
                out.push(((idx, e.stratum, e.variant), e.point));
            }
        }
        Ok(out)
    };
    let runs = bootstrap_runs(data, cfg, eval)?;
    let params: Vec<_> = xi_values.iter().map(|&x| (None, None, None, Some(x))).collect();
    let failed = runs.failed;
    Ok(assemble(
        &params,
        summarize_bootstrap(&runs, cfg),
        failed,
        cfg,
        Regime::NoMonotonicity { xi: f64::NAN },
    ))
}
