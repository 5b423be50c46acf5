//! Simulation harness and the exact identification oracle.
//!
//! `generate` draws synthetic experiments from the repeated-sampling designs
//! (five standard-normal-plus-binary covariates, latent strata from a logit
//! or multinomial-logit model indexed by `theta`, normal / Bernoulli /
//! quadratic-normal outcomes) while retaining the hidden truth. `run_study`
//! aggregates bias and interval coverage over repetitions.
//!
//! `DiscretePopulation` is a finite-support population with known scores and
//! stratum-arm outcome means; `exact_check` evaluates both sides of every
//! applicable identification display by exact summation, which is the oracle
//! behind the estimator and balance test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::ExperimentData;
use crate::estimators::{
    estimate_with_bootstrap, BootstrapConfig, EstimatorError, Pipeline, SensitivityParams, Variant,
};
use crate::pscore::{Regime, Stratum};
use crate::{derive_seed, ErrorClass};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("need at least 50 repetitions, got {0}")]
    TooFewReps(usize),
    #[error("{failed} of {total} repetitions failed, above the 5% cap")]
    RepFailures { failed: usize, total: usize },
    #[error("inconsistent discrete population: {0}")]
    InconsistentPopulation(String),
    #[error("quadratic outcomes are only defined for the strong-monotonicity scenarios")]
    UnsupportedScenario,
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

impl SimError {
    pub fn class(&self) -> ErrorClass {
        match self {
            SimError::RepFailures { .. } => ErrorClass::Numerical,
            SimError::Estimator(e) => e.class(),
            _ => ErrorClass::Validation,
        }
    }
}

/// Scenario regime (the repeated-sampling designs cover these two).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimRegime {
    StrongMono,
    Mono,
}

impl SimRegime {
    pub fn regime(&self) -> Regime {
        match self {
            SimRegime::StrongMono => Regime::StrongMonotonicity,
            SimRegime::Mono => Regime::Monotonicity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    Normal,
    Bernoulli,
    /// Normal outcomes whose mean adds the squares of the four continuous
    /// covariates; the linear working regression is then misspecified.
    QuadraticNormal,
}

/// One simulation scenario. `theta` is both the last stratum-model
/// coefficient and the knob that breaks ignorability when the binary
/// covariate is hidden from the analysis (`oracle = false`).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScenarioSpec {
    pub regime: SimRegime,
    pub theta: f64,
    pub outcome: OutcomeFamily,
    pub n: usize,
    /// `true`: analyze with all covariates; `false`: hide the binary one.
    pub oracle: bool,
}

impl ScenarioSpec {
    pub fn new(regime: SimRegime, outcome: OutcomeFamily, theta: f64) -> ScenarioSpec {
        ScenarioSpec { regime, theta, outcome, n: 500, oracle: true }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.outcome == OutcomeFamily::QuadraticNormal && self.regime != SimRegime::StrongMono {
            return Err(SimError::UnsupportedScenario);
        }
        Ok(())
    }

    /// The dataset view the analysis sees (hides the binary covariate in
    /// "obs" mode).
    pub fn analysis_data(&self, full: &ExperimentData) -> ExperimentData {
        if self.oracle {
            full.clone()
        } else {
            full.select_covariates(&["x1", "x2", "x3", "x4"])
                .expect("generated data always carries x1..x5")
        }
    }
}

/// Hidden truth retained next to a generated dataset.
#[derive(Debug, Clone)]
pub struct TruthRecord {
    pub strata: Vec<Stratum>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

impl TruthRecord {
    /// Sample-level principal effects: mean of `y1 - y0` within a stratum.
    pub fn sample_pce(&self, stratum: Stratum) -> Option<f64> {
        let idx: Vec<usize> =
            (0..self.strata.len()).filter(|&i| self.strata[i] == stratum).collect();
        if idx.is_empty() {
            return None;
        }
        let n = idx.len() as f64;
        Some(idx.iter().map(|&i| self.y1[i] - self.y0[i]).sum::<f64>() / n)
    }

    /// Same effects as the difference of stratum means, for cross-checking.
    pub fn sample_pce_by_means(&self, stratum: Stratum) -> Option<f64> {
        let idx: Vec<usize> =
            (0..self.strata.len()).filter(|&i| self.strata[i] == stratum).collect();
        if idx.is_empty() {
            return None;
        }
        let n = idx.len() as f64;
        let m1 = idx.iter().map(|&i| self.y1[i]).sum::<f64>() / n;
        let m0 = idx.iter().map(|&i| self.y0[i]).sum::<f64>() / n;
        Some(m1 - m0)
    }
}

const SM_THETA: [f64; 5] = [0.0, 0.5, 0.5, 1.0, 1.0];
const MONO_THETA_BOTH: [f64; 5] = [0.25, 0.5, 0.5, 1.0, 1.0];
const MONO_THETA_NEITHER: [f64; 5] = [-0.25, 1.0, 1.0, 0.5, 0.5];

/// Draws one experiment from the scenario's generative model.
pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<(ExperimentData, TruthRecord), SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n;
    let mut x = nalgebra::DMatrix::zeros(n, 6);
    let mut z = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut strata = Vec::with_capacity(n);
    let mut y1s = Vec::with_capacity(n);
    let mut y0s = Vec::with_capacity(n);

    for i in 0..n {
        let mut xi = [1.0f64; 6];
        for slot in xi.iter_mut().take(5).skip(1) {
            *slot = StandardNormal.sample(&mut rng);
        }
        xi[5] = f64::from(rng.gen_bool(0.5));
        let u = draw_stratum(spec, &xi, &mut rng);
        let (y1, y0) = draw_outcomes(spec, &xi, u, &mut rng);
        let zi = u8::from(rng.gen_bool(0.5));
        for j in 0..6 {
            x[(i, j)] = xi[j];
        }
        z.push(zi);
        s.push(u.s_under(zi));
        y.push(if zi == 1 { y1 } else { y0 });
        strata.push(u);
        y1s.push(y1);
        y0s.push(y0);
    }
    let names = vec![
        "(intercept)".to_string(),
        "x1".into(),
        "x2".into(),
        "x3".into(),
        "x4".into(),
        "x5".into(),
    ];
    let data = ExperimentData::new(z, s, Some(y), x, names)
        .map_err(|e| SimError::InconsistentPopulation(e.to_string()))?;
    Ok((data, TruthRecord { strata, y1: y1s, y0: y0s }))
}

fn linear(coefs: &[f64; 5], theta: f64, x: &[f64; 6]) -> f64 {
    let mut eta = 0.0;
    for j in 0..5 {
        eta += coefs[j] * x[j];
    }
    eta + theta * x[5]
}

fn draw_stratum(spec: &ScenarioSpec, x: &[f64; 6], rng: &mut ChaCha8Rng) -> Stratum {
    match spec.regime {
        SimRegime::StrongMono => {
            let eta = linear(&SM_THETA, spec.theta, x);
            let p = 1.0 / (1.0 + (-eta).exp());
            if rng.gen_bool(p) {
                Stratum::TreatedOnly
            } else {
                Stratum::Neither
            }
        }
        SimRegime::Mono => {
            let eb = linear(&MONO_THETA_BOTH, spec.theta, x).exp();
            let en = linear(&MONO_THETA_NEITHER, spec.theta, x).exp();
            let total = eb + 1.0 + en;
            let draw: f64 = rng.gen_range(0.0..total);
            if draw < eb {
                Stratum::Both
            } else if draw < eb + 1.0 {
                Stratum::TreatedOnly
            } else {
                Stratum::Neither
            }
        }
    }
}

fn draw_outcomes(
    spec: &ScenarioSpec,
    x: &[f64; 6],
    u: Stratum,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let xsum: f64 = x[1..6].iter().sum();
    let xsq: f64 = x[1..5].iter().map(|v| v * v).sum();
    let noise = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    match (spec.regime, spec.outcome) {
        (SimRegime::StrongMono, OutcomeFamily::Normal) => {
            let bump = if u == Stratum::TreatedOnly { 2.0 } else { 0.0 };
            (xsum + bump + 1.0 + noise(rng), xsum + 2.0 + noise(rng))
        }
        (SimRegime::StrongMono, OutcomeFamily::QuadraticNormal) => {
            let bump = if u == Stratum::TreatedOnly { 2.0 } else { 0.0 };
            (xsum + xsq + bump + 1.0 + noise(rng), xsum + xsq + 2.0 + noise(rng))
        }
        (SimRegime::StrongMono, OutcomeFamily::Bernoulli) => {
            let bump = if u == Stratum::TreatedOnly { 1.0 } else { 0.0 };
            let p1 = 1.0 / (1.0 + (-(0.3 * xsum + bump)).exp());
            let p0 = 1.0 / (1.0 + (-(0.3 * xsum + 0.5)).exp());
            (f64::from(rng.gen_bool(p1)), f64::from(rng.gen_bool(p0)))
        }
        (SimRegime::Mono, OutcomeFamily::Normal) => {
            let d1 = if u == Stratum::Neither { -1.0 } else { 0.0 };
            let d0 = if u == Stratum::Both { 1.0 } else { 0.0 };
            (xsum + d1 + 4.0 + noise(rng), xsum + d0 + 1.0 + noise(rng))
        }
        (SimRegime::Mono, OutcomeFamily::Bernoulli) => {
            let d1 = if u == Stratum::Neither { 1.0 } else { 0.0 };
            let d0 = if u == Stratum::Both { 1.0 } else { 0.0 };
            let p1 = 1.0 / (1.0 + (-(0.3 * xsum + 0.25 * (d1 - 1.0))).exp());
            let p0 = 1.0 / (1.0 + (-(0.3 * xsum + 0.25 * (1.0 - d0))).exp());
            (f64::from(rng.gen_bool(p1)), f64::from(rng.gen_bool(p0)))
        }
        (SimRegime::Mono, OutcomeFamily::QuadraticNormal) => unreachable!("rejected by validate"),
    }
}

/// Super-population principal effects of a scenario. Closed-form for the
/// normal families (the stratum bumps are additive constants); Monte Carlo
/// integrated for Bernoulli outcomes with a fixed internal seed.
pub fn true_pce(spec: &ScenarioSpec) -> Vec<(Stratum, f64)> {
    match (spec.regime, spec.outcome) {
        (SimRegime::StrongMono, OutcomeFamily::Normal | OutcomeFamily::QuadraticNormal) => {
            vec![(Stratum::TreatedOnly, 1.0), (Stratum::Neither, -1.0)]
        }
        (SimRegime::Mono, OutcomeFamily::Normal) => vec![
            (Stratum::Both, 2.0),
            (Stratum::TreatedOnly, 3.0),
            (Stratum::Neither, 2.0),
        ],
        (_, OutcomeFamily::Bernoulli) => {
            let strata = spec.regime.regime().admitted_strata();
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b11d);
            let draws = 400_000;
            let mut wsum = vec![0.0; strata.len()];
            let mut w1 = vec![0.0; strata.len()];
            let mut w0 = vec![0.0; strata.len()];
            for _ in 0..draws {
                let mut x = [1.0f64; 6];
                for slot in x.iter_mut().take(5).skip(1) {
                    *slot = StandardNormal.sample(&mut rng);
                }
                x[5] = f64::from(rng.gen_bool(0.5));
                let xsum: f64 = x[1..6].iter().sum();
                let probs: Vec<f64> = match spec.regime {
                    SimRegime::StrongMono => {
                        let p = 1.0 / (1.0 + (-linear(&SM_THETA, spec.theta, &x)).exp());
                        vec![p, 1.0 - p]
                    }
                    SimRegime::Mono => {
                        let eb = linear(&MONO_THETA_BOTH, spec.theta, &x).exp();
                        let en = linear(&MONO_THETA_NEITHER, spec.theta, &x).exp();
                        let t = eb + 1.0 + en;
                        vec![eb / t, 1.0 / t, en / t]
                    }
                };
                for (k, &u) in strata.iter().enumerate() {
                    let (m1, m0) = bernoulli_means(spec, xsum, u);
                    wsum[k] += probs[k];
                    w1[k] += probs[k] * m1;
                    w0[k] += probs[k] * m0;
                }
            }
            strata
                .iter()
                .enumerate()
                .map(|(k, &u)| (u, (w1[k] - w0[k]) / wsum[k]))
                .collect()
        }
        (SimRegime::Mono, OutcomeFamily::QuadraticNormal) => vec![],
    }
}

fn bernoulli_means(spec: &ScenarioSpec, xsum: f64, u: Stratum) -> (f64, f64) {
    match spec.regime {
        SimRegime::StrongMono => {
            let bump = if u == Stratum::TreatedOnly { 1.0 } else { 0.0 };
            (
                1.0 / (1.0 + (-(0.3 * xsum + bump)).exp()),
                1.0 / (1.0 + (-(0.3 * xsum + 0.5)).exp()),
            )
        }
        SimRegime::Mono => {
            let d1 = if u == Stratum::Neither { 1.0 } else { 0.0 };
            let d0 = if u == Stratum::Both { 1.0 } else { 0.0 };
            (
                1.0 / (1.0 + (-(0.3 * xsum + 0.25 * (d1 - 1.0))).exp()),
                1.0 / (1.0 + (-(0.3 * xsum + 0.25 * (1.0 - d0))).exp()),
            )
        }
    }
}

/// Settings for a repeated-sampling study.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub reps: usize,
    /// Bootstrap replicates per repetition; zero skips interval metrics.
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
    pub parallel: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub stratum: Stratum,
    pub variant: Variant,
    pub mean_bias: f64,
    pub coverage: Option<f64>,
    pub mean_se: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyMetrics {
    pub spec: ScenarioSpec,
    pub rows: Vec<MetricRow>,
    pub reps_used: usize,
    pub failed: usize,
}

/// Repeated sampling: generate, fit, estimate (both variants), optionally
/// bootstrap; aggregates mean bias against the scenario truth and interval
/// coverage.
pub fn run_study(spec: &ScenarioSpec, cfg: &StudyConfig) -> Result<StudyMetrics, SimError> {
    if cfg.reps < 50 {
        return Err(SimError::TooFewReps(cfg.reps));
    }
    spec.validate()?;
    let truths = true_pce(spec);
    let pipeline = Pipeline::new(spec.regime.regime());

    type RepOut = Vec<((Stratum, Variant), f64, Option<(f64, f64)>, Option<f64>)>;
    let one = |r: usize| -> Option<RepOut> {
        let (full, _truth) = generate(spec, derive_seed(cfg.seed, r as u64)).ok()?;
        let data = spec.analysis_data(&full);
        let ests = if cfg.bootstrap > 0 {
            let mut bcfg =
                BootstrapConfig::new(cfg.bootstrap, cfg.level, derive_seed(cfg.seed, 1_000_003 + r as u64));
            bcfg.parallel = false;
            estimate_with_bootstrap(&data, &pipeline, &bcfg).ok()?
        } else {
            pipeline.run_points(&data).ok()?
        };
        Some(
            ests.into_iter()
                .map(|e| ((e.stratum, e.variant), e.point, e.ci, e.se))
                .collect(),
        )
    };

    let results: Vec<Option<RepOut>> = if cfg.parallel {
        (0..cfg.reps).into_par_iter().map(one).collect()
    } else {
        (0..cfg.reps).map(one).collect()
    };

    let mut failed = 0;
    let mut per_key: std::collections::BTreeMap<(Stratum, Variant), (Vec<f64>, Vec<bool>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    for rep in results {
        let Some(rows) = rep else {
            failed += 1;
            continue;
        };
        for (key, point, ci, se) in rows {
            let truth = truths.iter().find(|(u, _)| *u == key.0).map(|(_, t)| *t);
            let Some(truth) = truth else { continue };
            let entry = per_key.entry(key).or_default();
            entry.0.push(point - truth);
            if let Some((lo, hi)) = ci {
                entry.1.push(lo <= truth && truth <= hi);
            }
            if let Some(se) = se {
                entry.2.push(se);
            }
        }
    }
    if failed * 20 > cfg.reps {
        return Err(SimError::RepFailures { failed, total: cfg.reps });
    }
    let rows = per_key
        .into_iter()
        .map(|((stratum, variant), (biases, covered, ses))| MetricRow {
            stratum,
            variant,
            mean_bias: biases.iter().sum::<f64>() / biases.len() as f64,
            coverage: (!covered.is_empty()).then(|| {
                covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64
            }),
            mean_se: (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64),
        })
        .collect();
    Ok(StudyMetrics { spec: *spec, rows, reps_used: cfg.reps - failed, failed })
}

/// Long-format CSV over several scenario runs (one row per scenario,
/// stratum, and estimator variant).
pub fn metrics_to_csv(metrics: &[StudyMetrics]) -> String {
    let mut out = String::from(
        "regime,outcome,theta,visibility,n,stratum,variant,mean_bias,coverage,mean_se,reps_used,failed\n",
    );
    for m in metrics {
        for row in &m.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                match m.spec.regime {
                    SimRegime::StrongMono => "strong-mono",
                    SimRegime::Mono => "mono",
                },
                match m.spec.outcome {
                    OutcomeFamily::Normal => "normal",
                    OutcomeFamily::Bernoulli => "bernoulli",
                    OutcomeFamily::QuadraticNormal => "quadratic-normal",
                },
                m.spec.theta,
                if m.spec.oracle { "oracle" } else { "obs" },
                m.spec.n,
                row.stratum.label(),
                row.variant.label(),
                row.mean_bias,
                row.coverage.map_or(String::new(), |c| c.to_string()),
                row.mean_se.map_or(String::new(), |s| s.to_string()),
                m.reps_used,
                m.failed,
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Exact discrete-population oracle
// ---------------------------------------------------------------------------

/// Finite-support population with known principal scores and stratum-arm
/// outcome means. Everything downstream of identification can be computed on
/// it by exact summation.
#[derive(Debug, Clone)]
pub struct DiscretePopulation {
    pub regime: Regime,
    pub strata: Vec<Stratum>,
    /// Covariate row of each support point (first entry 1).
    pub x: Vec<Vec<f64>>,
    pub prob: Vec<f64>,
    /// `scores[point][stratum]`, each row summing to one.
    pub scores: Vec<Vec<f64>>,
    /// `mean1[point][stratum]` = E[Y(1) | U, X]; `mean0` likewise.
    pub mean1: Vec<Vec<f64>>,
    pub mean0: Vec<Vec<f64>>,
}

impl DiscretePopulation {
    pub fn validate(&self) -> Result<(), SimError> {
        let k = self.strata.len();
        let m = self.x.len();
        if self.prob.len() != m
            || self.scores.len() != m
            || self.mean1.len() != m
            || self.mean0.len() != m
        {
            return Err(SimError::InconsistentPopulation("misaligned support arrays".into()));
        }
        let psum: f64 = self.prob.iter().sum();
        if (psum - 1.0).abs() > 1e-10 || self.prob.iter().any(|p| *p <= 0.0) {
            return Err(SimError::InconsistentPopulation(
                "support probabilities must be positive and sum to one".into(),
            ));
        }
        if self.strata != self.regime.admitted_strata() {
            return Err(SimError::InconsistentPopulation(
                "strata must match the regime's admitted set".into(),
            ));
        }
        for row in &self.scores {
            if row.len() != k || (row.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
                return Err(SimError::InconsistentPopulation(
                    "scores must sum to one at every support point".into(),
                ));
            }
            if row.iter().any(|e| *e <= 0.0) {
                return Err(SimError::InconsistentPopulation(
                    "scores must be strictly positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn proportion(&self, stratum: Stratum) -> f64 {
        let k = self.strata.iter().position(|&u| u == stratum).unwrap();
        self.prob.iter().zip(&self.scores).map(|(p, e)| p * e[k]).sum()
    }

    /// True principal effect by direct within-stratum integration.
    pub fn true_pce(&self, stratum: Stratum) -> f64 {
        let k = self.strata.iter().position(|&u| u == stratum).unwrap();
        let pi = self.proportion(stratum);
        let mut acc = 0.0;
        for i in 0..self.x.len() {
            acc += self.prob[i] * self.scores[i][k] * (self.mean1[i][k] - self.mean0[i][k]);
        }
        acc / pi
    }

    /// Stratum-arm means outside `[0, 1]`, for populations whose outcome is
    /// declared binary. Reported, never clipped.
    pub fn probability_range_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.x.len() {
            for (k, &u) in self.strata.iter().enumerate() {
                for (arm, mean) in [(1, self.mean1[i][k]), (0, self.mean0[i][k])] {
                    if !(0.0..=1.0).contains(&mean) {
                        out.push(format!(
                            "support point {i}, stratum {u}, arm {arm}: mean {mean}"
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Observed-side value of the identification display for one stratum,
/// computed by exact summation with the sensitivity-parameterized weights.
fn observed_side(
    pop: &DiscretePopulation,
    sens: &SensitivityParams,
    z: u8,
    u: Stratum,
) -> Result<f64, SimError> {
    let k_of = |v: Stratum| pop.strata.iter().position(|&w| w == v).unwrap();
    let ku = k_of(u);
    let mix: Vec<Stratum> = if pop.regime == Regime::StrongMonotonicity && z == 0 {
        pop.regime.admitted_strata()
    } else {
        pop.regime
            .cell_strata(z, u.s_under(z))
            .map_err(|e| SimError::InconsistentPopulation(e.to_string()))?
    };
    let factor = |v: Stratum| -> f64 {
        if v != Stratum::TreatedOnly {
            return 1.0;
        }
        match pop.regime {
            Regime::StrongMonotonicity => sens.eps,
            _ => {
                if z == 1 {
                    sens.eps1
                } else {
                    sens.eps0
                }
            }
        }
    };
    let pi_u = pop.proportion(u);
    let pi_cell: f64 = mix.iter().map(|&v| pop.proportion(v)).sum();
    let mut numer = 0.0;
    let mut cell_mass = 0.0;
    for i in 0..pop.x.len() {
        let e_cell: f64 = mix.iter().map(|&v| pop.scores[i][k_of(v)]).sum();
        // E[Y | cell, x] weighted by the cell's stratum mixture.
        let mut y_mass = 0.0;
        for &v in &mix {
            let kv = k_of(v);
            let m = if z == 1 { pop.mean1[i][kv] } else { pop.mean0[i][kv] };
            y_mass += pop.scores[i][kv] * m;
        }
        let w = if mix.len() == 1 {
            1.0
        } else {
            let mut denom = 0.0;
            for &v in &mix {
                denom += factor(v) * pop.scores[i][k_of(v)];
            }
            (factor(u) * pop.scores[i][ku] / denom) / (pi_u / pi_cell)
        };
        numer += pop.prob[i] * w * y_mass;
        cell_mass += pop.prob[i] * e_cell;
    }
    Ok(numer / cell_mass)
}

/// Weighting-identified principal effects on the population, by exact
/// summation of the displays for the population's regime.
pub fn exact_pce_observed(
    pop: &DiscretePopulation,
    sens: &SensitivityParams,
) -> Result<Vec<(Stratum, f64)>, SimError> {
    pop.validate()?;
    pop.strata
        .iter()
        .map(|&u| Ok((u, observed_side(pop, sens, 1, u)? - observed_side(pop, sens, 0, u)?)))
        .collect()
}

/// Maximum absolute discrepancy between the weighting-identified effects and
/// the direct within-stratum contrasts, over every admitted stratum.
pub fn exact_check(pop: &DiscretePopulation, sens: &SensitivityParams) -> Result<f64, SimError> {
    let observed = exact_pce_observed(pop, sens)?;
    Ok(observed
        .into_iter()
        .map(|(u, v)| (v - pop.true_pce(u)).abs())
        .fold(0.0, f64::max))
}

/// Maximum absolute balance violation over the covariate coordinates: each
/// balancing equality evaluated by exact summation with `h(x)` in place of
/// the outcome.
pub fn exact_balance_check(pop: &DiscretePopulation) -> Result<f64, SimError> {
    pop.validate()?;
    let sens = SensitivityParams::default();
    let mut worst: f64 = 0.0;
    for coord in 0..pop.x[0].len() {
        let mut h_pop = pop.clone();
        for i in 0..h_pop.x.len() {
            for k in 0..h_pop.strata.len() {
                h_pop.mean1[i][k] = pop.x[i][coord];
                h_pop.mean0[i][k] = pop.x[i][coord];
            }
        }
        for &u in &pop.strata {
            let lhs = observed_side(&h_pop, &sens, 1, u)?;
            let rhs = observed_side(&h_pop, &sens, 0, u)?;
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

/// Exact value of the exclusion-restriction compatibility differences:
/// weighted-control side minus pure-treated side for the `neither` equation
/// (at `eps0`), and the mirrored difference for the `both` equation (at
/// `eps1`). Each equals minus the corresponding principal effect when the
/// sensitivity value is correct.
pub fn exact_er_gpi(
    pop: &DiscretePopulation,
    eps0: f64,
    eps1: f64,
) -> Result<(f64, f64), SimError> {
    pop.validate()?;
    let sens = SensitivityParams { eps: 1.0, eps1, eps0 };
    let neither =
        observed_side(pop, &sens, 0, Stratum::Neither)? - observed_side(pop, &sens, 1, Stratum::Neither)?;
    let both =
        observed_side(pop, &sens, 0, Stratum::Both)? - observed_side(pop, &sens, 1, Stratum::Both)?;
    Ok((neither, both))
}

/// Random small population with scores bounded away from degeneracy and
/// stratum-arm means consistent with the given sensitivity values (all-one
/// values give mean-level ignorability).
pub fn random_population(
    regime: Regime,
    sens: &SensitivityParams,
    seed: u64,
) -> DiscretePopulation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata = regime.admitted_strata();
    let k = strata.len();
    let m = rng.gen_range(2..=4usize);
    let mut x = Vec::new();
    let mut prob = Vec::new();
    let mut scores = Vec::new();
    let mut mean1 = Vec::new();
    let mut mean0 = Vec::new();
    let mut raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    for w in raw.iter_mut() {
        *w /= total;
    }
    for (i, &p) in raw.iter().enumerate() {
        x.push(vec![1.0, rng.gen_range(-2.0..2.0), i as f64]);
        prob.push(p);
        // Normalized draws from U(0.5, 1.5) stay within [0.05, 0.95].
        let mut e: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
        let esum: f64 = e.iter().sum();
        for v in e.iter_mut() {
            *v /= esum;
        }
        scores.push(e);

        let a = rng.gen_range(0.2..2.2); // E[Y(1)] in the (1,1) mixture
        let b = rng.gen_range(0.2..2.2); // E[Y(1)] in the (1,0) mixture
        let c = rng.gen_range(0.2..2.2); // E[Y(0)] in the (0,1) mixture
        let d = rng.gen_range(0.2..2.2); // E[Y(0)] in the (0,0) mixture
        let m1: Vec<f64> = strata
            .iter()
            .map(|&u| match u {
                Stratum::Both => a,
                Stratum::TreatedOnly => sens.factor_for_tests(regime, 1) * a,
                Stratum::ControlOnly | Stratum::Neither => b,
            })
            .collect();
        let m0: Vec<f64> = strata
            .iter()
            .map(|&u| match u {
                Stratum::Both | Stratum::ControlOnly => c,
                Stratum::TreatedOnly => sens.factor_for_tests(regime, 0) * d,
                Stratum::Neither => d,
            })
            .collect();
        mean1.push(m1);
        mean0.push(m0);
    }
    DiscretePopulation { regime, strata, x, prob, scores, mean1, mean0 }
}

impl SensitivityParams {
    /// Mean multiplier the random population applies to the treated-only
    /// stratum so the population satisfies the claimed sensitivity values.
    fn factor_for_tests(&self, regime: Regime, z: u8) -> f64 {
        match regime {
            Regime::StrongMonotonicity => {
                if z == 0 {
                    self.eps
                } else {
                    1.0
                }
            }
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

/// Enumerates a population into a finite dataset whose empirical frequencies
/// equal the population exactly: units per (support point, stratum, arm)
/// proportional to `prob * score / 2`, with the outcome set to the exact
/// stratum-arm mean. `scale` is the total (must make every count integral).
pub fn exact_dataset(pop: &DiscretePopulation, scale: usize) -> Result<ExperimentData, SimError> {
    pop.validate()?;
    let mut z = Vec::new();
    let mut s = Vec::new();
    let mut y = Vec::new();
    let mut rows = Vec::new();
    for i in 0..pop.x.len() {
        for (k, &u) in pop.strata.iter().enumerate() {
            for arm in [1u8, 0u8] {
                let ideal = scale as f64 * pop.prob[i] * pop.scores[i][k] * 0.5;
                let count = ideal.round();
                if (ideal - count).abs() > 1e-6 {
                    return Err(SimError::InconsistentPopulation(format!(
                        "scale {scale} does not enumerate point {i} stratum {u} exactly \
                         (ideal count {ideal})"
                    )));
                }
                let mean = if arm == 1 { pop.mean1[i][k] } else { pop.mean0[i][k] };
                for _ in 0..count as usize {
                    z.push(arm);
                    s.push(u.s_under(arm));
                    y.push(mean);
                    rows.push(pop.x[i].clone());
                }
            }
        }
    }
    let n = z.len();
    let p = pop.x[0].len();
    let x = nalgebra::DMatrix::from_fn(n, p, |r, c| rows[r][c]);
    let names: Vec<String> = (0..p)
        .map(|j| if j == 0 { "(intercept)".into() } else { format!("x{j}") })
        .collect();
    ExperimentData::new(z, s, Some(y), x, names)
        .map_err(|e| SimError::InconsistentPopulation(e.to_string()))
}

/// Score table holding the population's exact scores for an enumerated
/// dataset built by [`exact_dataset`] (rows in the same construction order).
pub fn exact_score_table(
    pop: &DiscretePopulation,
    data: &ExperimentData,
) -> Result<crate::pscore::ScoreTable, SimError> {
    let k = pop.strata.len();
    let mut scores = nalgebra::DMatrix::zeros(data.n(), k);
    for r in 0..data.n() {
        // Match the unit's support point by covariates.
        let point = (0..pop.x.len())
            .find(|&i| (0..pop.x[i].len()).all(|j| pop.x[i][j] == data.x()[(r, j)]))
            .ok_or_else(|| {
                SimError::InconsistentPopulation("row does not match any support point".into())
            })?;
        for c in 0..k {
            scores[(r, c)] = pop.scores[point][c];
        }
    }
    let proportions: Vec<f64> = pop.strata.iter().map(|&u| pop.proportion(u)).collect();
    crate::pscore::ScoreTable::new(pop.regime, pop.strata.clone(), scores, proportions)
        .map_err(|e| SimError::InconsistentPopulation(e.to_string()))
}
