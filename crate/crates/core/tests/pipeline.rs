mod common;

use std::fs;

use common::cli;
use geomort::pipeline::{validate_config, validate_config_text, RunConfig, TTestWeights, EXIT_CONFIG, EXIT_DATA, EXIT_OK};

#[test]
fn empty_config_gives_defaults() {
    let c = validate_config(None, &[]).unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.train.learning_rate, 1e-4);
    assert_eq!((c.train.epochs, c.k, c.zoom, c.size), (5, 10, 17, 400));
}

#[test]
fn config_errors_are_all_reported() {
    let errs = validate_config_text("epochs = 0\nk = 0\nmystery = 3\n", &[]).unwrap_err();
    assert!(errs.contains(&"epochs ≥ 1".to_string()), "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("\"mystery\"")));
    assert!(errs.len() >= 3);
}

#[test]
fn overrides_win_and_missing_files_are_errors() {
    let c = validate_config_text("epochs = 3\n", &[("epochs".into(), "4".into())]).unwrap();
    assert_eq!(c.train.epochs, 4);
    let errs = validate_config_text("counties_csv = /nonexistent/x.csv\n", &[]).unwrap_err();
    assert!(errs[0].contains("counties_csv"));
    let errs = validate_config_text("learning_rate = 0\n", &[]).unwrap_err();
    assert_eq!(errs.len(), 1);
}

#[test]
fn resolved_config_reparses_to_itself() {
    let c = validate_config_text("seed = 5\nsigma = 0.7\nk = 4\n", &[]).unwrap();
    assert_eq!(validate_config_text(&c.resolved_text(), &[]).unwrap(), c);
}

#[test]
fn ttest_weights_key_parses_both_modes() {
    assert_eq!(validate_config_text("", &[]).unwrap().ttest_weights, TTestWeights::Population);
    let c = validate_config_text("ttest_weights = images\n", &[]).unwrap();
    assert_eq!(c.ttest_weights, TTestWeights::Images);
    assert_eq!(validate_config_text(&c.resolved_text(), &[]).unwrap(), c);
    let errs = validate_config_text("ttest_weights = deaths\n", &[]).unwrap_err();
    assert!(errs.iter().any(|e| e.to_string().contains("ttest_weights")));
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(cli(&["frobnicate"]), EXIT_CONFIG);
    assert_eq!(cli(&[]), EXIT_CONFIG);
}

#[test]
fn bad_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs = 0\nbogus = 1\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(cli(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_CONFIG);
    assert!(!out.exists());
}

#[test]
fn plan_grid_emits_196_rows_for_four_schools() {
    let dir = tempfile::tempdir().unwrap();
    let schools = dir.path().join("schools.csv");
    fs::write(
        &schools,
        "county_fips,school_index,lat,lon\n13121,0,33.75,-84.39\n13121,1,33.80,-84.35\n13121,2,33.70,-84.45\n13121,3,33.85,-84.30\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(cli(&["plan-grid", "--schools", schools.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_OK);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 196);
    assert!(out.join("config.resolved").is_file());
    assert!(!out.join(".lock").exists());
    let hashes = common::output_hashes(&out);
    assert!(hashes.contains_key("manifest.csv"));
}

#[test]
fn bad_rows_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let schools = dir.path().join("schools.csv");
    fs::write(&schools, "county_fips,school_index,lat,lon\n13121,0,95.0,-84.39\n13121,1,x,-84.35\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(cli(&["plan-grid", "--schools", schools.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_DATA);

    let counties = dir.path().join("counties.csv");
    fs::write(&counties, "fips,name\n1,a\n").unwrap();
    assert_eq!(cli(&["ingest", "--counties", counties.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_DATA);
}

#[test]
fn ingest_normalises_and_leaves_input_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<_> = (0..20u64).map(|i| common::county(&format!("{:05}", i + 1), 10_000 + i, 70 + i)).collect();
    let src = dir.path().join("in.csv");
    let mut buf = Vec::new();
    geomort::cohort::write_counties(&mut buf, &recs).unwrap();
    fs::write(&src, &buf).unwrap();
    let out = dir.path().join("out");
    assert_eq!(cli(&["ingest", "--counties", src.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_OK);
    assert_eq!(fs::read(&src).unwrap(), buf);
    assert!(out.join("counties.csv").is_file());
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "").unwrap();
    assert_eq!(cli(&["synth", "--out", out.to_str().unwrap()]), EXIT_CONFIG);
    assert!(!out.join("counties.csv").exists());
}

#[test]
fn commands_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_ne!(cli(&["train", "--out", out.to_str().unwrap()]), EXIT_OK);
    assert_ne!(cli(&["plan-grid", "--out", out.to_str().unwrap()]), EXIT_OK);
}
