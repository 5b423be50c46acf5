//! End-to-end exercises of the command line surface: schemas, exit codes,
//! determinism, and the workflow contracts.

use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pstrat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pstrat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Noncompliance-style synthetic CSV: binary outcome, monotone uptake.
fn write_noncompliance_csv(path: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = String::from("assigned,received,hospital,age,chronic\n");
    for _ in 0..n {
        let age: f64 = rng.gen_range(20.0..80.0);
        let chronic = u8::from(rng.gen_bool(0.3));
        let z = u8::from(rng.gen_bool(0.5));
        let p_both = 0.25 + 0.1 * f64::from(chronic);
        let p_to = 0.35;
        let draw: f64 = rng.gen();
        let s = if draw < p_both {
            1
        } else if draw < p_both + p_to {
            u8::from(z == 1)
        } else {
            0
        };
        let p_y = 0.1 + 0.002 * (age - 20.0) + 0.05 * f64::from(chronic)
            - 0.03 * f64::from(s) * f64::from(z);
        let y = u8::from(rng.gen_bool(p_y.clamp(0.01, 0.99)));
        rows.push_str(&format!("{z},{s},{y},{age},{chronic}\n"));
    }
    std::fs::write(path, rows).unwrap();
}

#[test]
fn scores_succeeds_without_outcome_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    // No outcome column at all.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rows = String::from("z,s,age\n");
    for _ in 0..120 {
        let z = u8::from(rng.gen_bool(0.5));
        let s = if z == 1 { u8::from(rng.gen_bool(0.6)) } else { u8::from(rng.gen_bool(0.2)) };
        rows.push_str(&format!("{z},{s},{}\n", rng.gen_range(20.0..70.0)));
    }
    std::fs::write(&csv, rows).unwrap();

    let out = pstrat(&[
        "scores",
        "--input",
        csv.to_str().unwrap(),
        "--z",
        "z",
        "--s",
        "s",
        "--regime",
        "mono",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["model"]["regime"], "mono");
    assert!(doc["model"]["proportions"]["treated_only"].as_f64().unwrap() > 0.0);
    assert!(doc["config"]["schema"]["y"].is_null());
}

#[test]
fn estimate_requires_outcome_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = String::from("z,s,age\n");
    for _ in 0..80 {
        let z = u8::from(rng.gen_bool(0.5));
        let s = if z == 1 { u8::from(rng.gen_bool(0.6)) } else { 0 };
        rows.push_str(&format!("{z},{s},{}\n", rng.gen_range(20.0..70.0)));
    }
    std::fs::write(&csv, rows).unwrap();

    let out = pstrat(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--z",
        "z",
        "--s",
        "s",
        "--regime",
        "strong-mono",
        "--bootstrap",
        "60",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("outcome column required"));
}

#[test]
fn seed_is_required_for_stochastic_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_noncompliance_csv(&csv, 150, 8);
    let out = pstrat(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--z",
        "assigned",
        "--s",
        "received",
        "--y",
        "hospital",
        "--regime",
        "mono",
        "--bootstrap",
        "60",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--seed"));
}

#[test]
fn estimate_is_deterministic_and_piping_matches_single_shot() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_noncompliance_csv(&csv, 250, 11);
    let args = [
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--z",
        "assigned",
        "--s",
        "received",
        "--y",
        "hospital",
        "--regime",
        "mono",
        "--bootstrap",
        "60",
        "--seed",
        "42",
    ];
    let first = pstrat(&args);
    assert!(first.status.success(), "{}", stderr(&first));

    // Running `scores` first (the two-step workflow) must not change the
    // later estimate: the score fit is deterministic and seed-free.
    let model_path = dir.path().join("model.json");
    let scores = pstrat(&[
        "scores",
        "--input",
        csv.to_str().unwrap(),
        "--z",
        "assigned",
        "--s",
        "received",
        "--regime",
        "mono",
        "--out",
        model_path.to_str().unwrap(),
    ]);
    assert!(scores.status.success(), "{}", stderr(&scores));
    assert!(model_path.exists());

    let second = pstrat(&args);
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn estimate_csv_output_has_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_noncompliance_csv(&csv, 200, 13);
    let out_path = dir.path().join("est.csv");
    let out = pstrat(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--z",
        "assigned",
        "--s",
        "received",
        "--y",
        "hospital",
        "--regime",
        "mono",
        "--bootstrap",
        "60",
        "--seed",
        "2",
        "--csv",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let content = std::fs::read_to_string(&out_path).unwrap();
    assert!(content.starts_with("# config:"));
    assert!(content.contains("stratum,variant,point"));
    assert!(content.contains("treated_only,weighting"));
}

#[test]
fn config_file_supplies_schema_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_noncompliance_csv(&csv, 200, 17);
    let cfg = dir.path().join("analysis.conf");
    std::fs::write(
        &cfg,
        "z = assigned\ns = received\ny = hospital\nregime = mono\nseed = 7\n",
    )
    .unwrap();
    let out = pstrat(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--bootstrap",
        "60",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["config"]["seed"], 7);

    // A flag overrides the config file's seed.
    let out2 = pstrat(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--bootstrap",
        "60",
        "--seed",
        "99",
    ]);
    let doc2: serde_json::Value = serde_json::from_str(&stdout(&out2)).unwrap();
    assert_eq!(doc2["config"]["seed"], 99);
}

#[test]
fn balance_runs_and_flags_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_noncompliance_csv(&csv, 300, 23);
    let out = pstrat(&[
        "balance",
        "--input",
        csv.to_str().unwrap(),
        "--z",
        "assigned",
        "--s",
        "received",
        "--regime",
        "mono",
        "--bootstrap",
        "60",
        "--seed",
        "5",
        "--csv",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("function,stratum"));
    assert!(text.contains("age"));
}

#[test]
fn sensitivity_grid_csv_covers_reduction_point() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_noncompliance_csv(&csv, 250, 29);
    let out = pstrat(&[
        "sensitivity",
        "--input",
        csv.to_str().unwrap(),
        "--z",
        "assigned",
        "--s",
        "received",
        "--y",
        "hospital",
        "--regime",
        "mono",
        "--eps1",
        "0.5:2:3",
        "--eps0",
        "0.5:2:3",
        "--bootstrap",
        "60",
        "--seed",
        "3",
        "--csv",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with(",1,1,")), "grid misses the (1,1) point:\n{text}");
}

#[test]
fn check_subcommand_passes_within_tolerance() {
    let out = pstrat(&["check", "--populations", "20", "--seed", "12"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["pass"], true);
    assert!(doc["max_discrepancy"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn invalid_binary_token_names_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "z,s,y,a\n1,1,1.0,2\n1,0,2.0,3\n0,1,0.5,4\n0,2,1.5,5\n").unwrap();
    let out = pstrat(&[
        "scores",
        "--input",
        csv.to_str().unwrap(),
        "--z",
        "z",
        "--s",
        "s",
        "--covariates",
        "a",
        "--regime",
        "mono",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("row 4") && err.contains("'s'"), "{err}");
}

#[test]
fn simulate_smoke_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    for path in [&out_a, &out_b] {
        let out = pstrat(&[
            "simulate",
            "--regime",
            "strong-mono",
            "--outcome",
            "normal",
            "--theta",
            "0",
            "--n",
            "200",
            "--reps",
            "50",
            "--bootstrap",
            "0",
            "--seed",
            "31",
            "--csv",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = std::fs::read_to_string(&out_a).unwrap();
    let b = std::fs::read_to_string(&out_b).unwrap();
    assert_eq!(a, b);
    assert!(a.contains("strong-mono"));
}
