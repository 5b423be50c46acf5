use pstrat::pscore::*;
use pstrat::simkit::*;
use std::time::Instant;

fn main() {
    let spec = ScenarioSpec::new(SimRegime::Mono, OutcomeFamily::Normal, 1.0);
    let (data, _) = generate(&spec, 42).unwrap();
    let cfg = ScoreConfig::default();

    // Timing and iteration counts for a single monotonicity fit.
    let t0 = Instant::now();
    let model = fit_mono_em(&data, &cfg).unwrap();
    let dt = t0.elapsed();
    let d = model.em_diagnostics().unwrap();
    println!(
        "mono fit: {:?}, em_iters={}, polish_iters={}, grad={:.2e}",
        dt, d.em_iterations, d.polish_iterations, d.final_gradient_norm
    );

    // Average over 20 fits on resampled data (the bootstrap workload).
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut total_em = 0usize;
    let t0 = Instant::now();
    for _ in 0..20 {
        let idx: Vec<usize> = (0..data.n()).map(|_| rng.gen_range(0..data.n())).collect();
        let d2 = data.resample(&idx);
        let m = fit_mono_em(&d2, &cfg).unwrap();
        total_em += m.em_diagnostics().unwrap().em_iterations;
    }
    println!("20 resample fits: {:?} (avg em iters {})", t0.elapsed(), total_em / 20);

    // With a looser EM phase.
    let loose = ScoreConfig { em_tol: 1e-4, ..ScoreConfig::default() };
    let mut total_em = 0usize;
    let mut total_pol = 0usize;
    let t0 = Instant::now();
    for _ in 0..20 {
        let idx: Vec<usize> = (0..data.n()).map(|_| rng.gen_range(0..data.n())).collect();
        let d2 = data.resample(&idx);
        let m = fit_mono_em(&d2, &loose).unwrap();
        total_em += m.em_diagnostics().unwrap().em_iterations;
        total_pol += m.em_diagnostics().unwrap().polish_iterations;
    }
    println!(
        "20 loose fits: {:?} (avg em {}, polish {})",
        t0.elapsed(),
        total_em / 20,
        total_pol / 20
    );

    // Check agreement between tight and loose paths.
    let tight_model = fit_mono_em(&data, &cfg).unwrap();
    let loose_model = fit_mono_em(&data, &loose).unwrap();
    let max_diff = tight_model
        .proportions()
        .iter()
        .zip(loose_model.proportions())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("tight-vs-loose proportion agreement: {max_diff:.2e}");
}
