//! End-to-end tests for the TOML configuration and the three workflows,
//! exercised both through the library functions and the compiled binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use approx::assert_relative_eq;

use taic_cli::commands::{cmd_evaluate, cmd_select, cmd_simulate, Overrides};
use taic_cli::config::RunConfig;

/// A small balanced longitudinal table with a deterministic response:
/// eight children measured at four ages, sex-specific slopes, and a
/// smooth wiggle standing in for noise.
fn write_growth_csv(path: &Path) {
    let mut out = String::from("child,age,distance,Sex\n");
    for s in 0..8usize {
        let sex = if s < 4 { "Male" } else { "Female" };
        let slope = if s < 4 { 0.8 } else { 0.5 };
        let base = 17.0 + s as f64 * 0.7;
        for (k, age) in [8.0f64, 10.0, 12.0, 14.0].iter().enumerate() {
            let wiggle = ((s * 4 + k) as f64 * 0.9).sin() * 0.6;
            let d = base + slope * age + wiggle;
            out.push_str(&format!("c{s:02},{age},{d:.4},{sex}\n"));
        }
    }
    fs::write(path, out).unwrap();
}

fn growth_config_text(csv_path: &Path, extra_top_level: &str) -> String {
    format!(
        r#"
seed = 7
{extra_top_level}

[data]
format = "long"
path = "{path}"
id = "child"
time = "age"
response = "distance"
covariates = ["Sex"]

[split]
kind = "by-time"
holdout_times = [14.0]

[random]
kind = "subjects"

[covariance]
kind = "lmm"
subject_g = [[4.0]]
sigma2 = 2.0

[[model]]
id = "mean"
[model.fixed]
intercept = true

[[model]]
id = "time"
[model.fixed]
main = ["time"]

[[model]]
id = "full"
[model.fixed]
main = ["time", "Sex"]
interactions = [["Sex", "time"]]
"#,
        path = csv_path.display(),
    )
}

/// Writes the growth table plus a config into `dir` and loads the config.
fn growth_setup(dir: &Path, extra_top_level: &str) -> (RunConfig, PathBuf) {
    let csv_path = dir.join("growth.csv");
    write_growth_csv(&csv_path);
    let config_path = dir.join("run.toml");
    fs::write(&config_path, growth_config_text(&csv_path, extra_top_level)).unwrap();
    (RunConfig::load(&config_path).unwrap(), config_path)
}

fn out_overrides(dir: &Path, name: &str) -> Overrides {
    Overrides { seed: None, out: Some(dir.join(name)), replications: None }
}

#[test]
fn config_load_rejects_unknown_criterion_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "criteria = [\"tAIC\", \"xAIC\"]\n").unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    let message = err.to_string();
    assert!(message.contains("xAIC"), "error should name the bad criterion: {message}");
}

#[test]
fn config_load_rejects_unknown_top_level_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "sede = 7\n").unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert!(err.to_string().contains("sede"), "got: {err}");
}

#[test]
fn config_load_rejects_duplicate_model_ids() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(
        &path,
        r#"
[[model]]
id = "m"
[model.fixed]

[[model]]
id = "m"
[model.fixed]
"#,
    )
    .unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert!(err.to_string().contains("duplicate model id"), "got: {err}");
}

#[test]
fn evaluation_config_without_data_section_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "[[model]]\nid = \"m\"\n[model.fixed]\n").unwrap();
    let config = RunConfig::load(&path).unwrap();
    let err = cmd_evaluate(&config, &out_overrides(dir.path(), "out")).unwrap_err();
    assert!(err.to_string().contains("[data]"), "got: {err}");
}

#[test]
fn evaluate_writes_matching_csv_and_json_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = growth_setup(dir.path(), "");
    let outcome = cmd_evaluate(&config, &out_overrides(dir.path(), "out")).unwrap();

    assert_eq!(outcome.n, 24);
    assert_eq!(outcome.n_star, 8);
    assert_eq!(outcome.response_label, "distance");
    assert_eq!(outcome.rows.len(), 3);
    assert!(outcome.rows.iter().all(|r| r.holdout_neg_loglik.is_some()));

    let csv_text = fs::read_to_string(outcome.out_dir.join("criteria.csv")).unwrap();
    let mut lines = csv_text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,neg_loglik,c_tai,tai,cai,mai,w_t,loss_opt_t,mahalanobis_correction,holdout_neg_loglik,jitter"
    );
    assert_eq!(lines.count(), 3);

    let json_text = fs::read_to_string(outcome.out_dir.join("criteria.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&json_text).unwrap();
    let rows = parsed.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for (row, parsed_row) in outcome.rows.iter().zip(rows) {
        assert_eq!(parsed_row["model"].as_str().unwrap(), row.model);
        assert_relative_eq!(parsed_row["tai"].as_f64().unwrap(), row.tai, max_relative = 1e-12);
    }
}

#[test]
fn output_scale_2n_rescales_likelihood_columns_only() {
    let dir = tempfile::tempdir().unwrap();
    let (per_obs, _) = growth_setup(dir.path(), "");
    let scaled_dir = tempfile::tempdir().unwrap();
    let (scaled, _) = growth_setup(scaled_dir.path(), "output_scale = \"2n\"");

    let a = cmd_evaluate(&per_obs, &out_overrides(dir.path(), "out")).unwrap();
    let b = cmd_evaluate(&scaled, &out_overrides(scaled_dir.path(), "out")).unwrap();

    let two_n = 2.0 * a.n as f64;
    let two_n_star = 2.0 * a.n_star as f64;
    for (pa, pb) in a.rows.iter().zip(&b.rows) {
        assert_relative_eq!(pb.tai, pa.tai * two_n, max_relative = 1e-12);
        assert_relative_eq!(pb.cai, pa.cai * two_n, max_relative = 1e-12);
        assert_relative_eq!(pb.mai, pa.mai * two_n, max_relative = 1e-12);
        assert_relative_eq!(pb.neg_loglik, pa.neg_loglik * two_n, max_relative = 1e-12);
        assert_relative_eq!(
            pb.holdout_neg_loglik.unwrap(),
            pa.holdout_neg_loglik.unwrap() * two_n_star,
            max_relative = 1e-12
        );
        // Squared-error summaries keep their per-observation meaning.
        assert_relative_eq!(pb.w_t, pa.w_t, max_relative = 1e-12);
        assert_relative_eq!(pb.loss_opt_t, pa.loss_opt_t, max_relative = 1e-12);
        assert_relative_eq!(
            pb.mahalanobis_correction,
            pa.mahalanobis_correction,
            max_relative = 1e-12
        );
    }
    // Rescaling never reorders models, so the selections agree.
    assert_eq!(a.selection.chosen, b.selection.chosen);
}

#[test]
fn select_restricts_output_to_configured_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = growth_setup(dir.path(), "criteria = [\"tAIC\", \"OptT\"]");
    let outcome = cmd_select(&config, &out_overrides(dir.path(), "out")).unwrap();

    assert_eq!(outcome.document.criteria, ["tAIC", "OptT"]);
    assert_eq!(outcome.document.chosen.len(), 2);
    assert!(outcome.document.chosen.contains_key("tAIC"));
    assert!(outcome.document.chosen.contains_key("OptT"));
    assert_eq!(outcome.document.models, ["mean", "time", "full"]);

    let text = fs::read_to_string(outcome.out_dir.join("selection.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(parsed["chosen"].get("cAIC").is_none());
    assert_eq!(parsed["table"].as_array().unwrap().len(), 3);
}

#[test]
fn random_split_is_reproducible_under_a_fixed_seed() {
    let run = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("growth.csv");
        write_growth_csv(&csv_path);
        let config_text = growth_config_text(&csv_path, "")
            .replace("kind = \"by-time\"\nholdout_times = [14.0]", "kind = \"random\"\nholdout_fraction = 0.25");
        let config_path = dir.path().join("run.toml");
        fs::write(&config_path, config_text).unwrap();
        let config = RunConfig::load(&config_path).unwrap();
        let overrides =
            Overrides { seed: Some(seed), out: Some(dir.path().join("out")), replications: None };
        let outcome = cmd_evaluate(&config, &overrides).unwrap();
        fs::read_to_string(outcome.out_dir.join("criteria.csv")).unwrap()
    };
    assert_eq!(run(11), run(11), "same seed must reproduce the same table");
    assert_ne!(run(11), run(12), "different seeds should pick different holdout rows");
}

#[test]
fn simulate_writes_one_directory_per_setup_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("sim.toml");
    fs::write(
        &config_path,
        "seed = 42\n\n[simulate]\nsubjects = [3, 4]\nsigma2 = [15.0]\nreplications = 3\n",
    )
    .unwrap();
    let config = RunConfig::load(&config_path).unwrap();
    let outcome = cmd_simulate(&config, &out_overrides(dir.path(), "simout")).unwrap();

    assert_eq!(outcome.setup_dirs.len(), 2);
    assert!(outcome.out_dir.join("S3_sigma15/replications.csv").is_file());
    assert!(outcome.out_dir.join("S4_sigma15/replications.csv").is_file());
    assert!(outcome.out_dir.join("S3_sigma15/summary.json").is_file());
    assert!(outcome.out_dir.join("summary.json").is_file());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(outcome.out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["master_seed"].as_u64().unwrap(), 42);
    assert_eq!(manifest["setups"].as_array().unwrap().len(), 2);

    // 3 replications x 3 models x 5 recorded quantities, plus the header.
    let csv_text =
        fs::read_to_string(outcome.out_dir.join("S3_sigma15/replications.csv")).unwrap();
    assert_eq!(csv_text.lines().count(), 1 + 3 * 3 * 5);
    assert_eq!(csv_text.lines().next().unwrap(), "replication,model,criterion,value");

    for summary in &outcome.summaries {
        assert!(summary.failed_replications.is_empty());
        for key in ["tAIC", "cAIC", "mAIC", "oracle_conditional", "oracle_expected"] {
            assert!(summary.risk_of_selected[key].is_finite());
        }
    }
}

#[test]
fn simulate_replications_override_beats_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("sim.toml");
    fs::write(
        &config_path,
        "seed = 1\n\n[simulate]\nsubjects = [3]\nsigma2 = [15.0]\nreplications = 50\n",
    )
    .unwrap();
    let config = RunConfig::load(&config_path).unwrap();
    let overrides = Overrides {
        seed: None,
        out: Some(dir.path().join("simout")),
        replications: Some(2),
    };
    let outcome = cmd_simulate(&config, &overrides).unwrap();
    assert_eq!(outcome.summaries[0].replications, 2);
    let csv_text =
        fs::read_to_string(outcome.out_dir.join("S3_sigma15/replications.csv")).unwrap();
    assert_eq!(csv_text.lines().count(), 1 + 2 * 3 * 5);
}

#[test]
fn select_binary_prints_a_choice_per_criterion_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config_path) = growth_setup(dir.path(), "");
    let output = Command::new(env!("CARGO_BIN_EXE_taic"))
        .args(["select", config_path.to_str().unwrap(), "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8(output.stdout).unwrap();
    for name in ["tAIC:", "cAIC:", "mAIC:", "OptT:"] {
        assert!(stdout.contains(name), "missing {name} in: {stdout}");
    }
    assert!(dir.path().join("out/selection.json").is_file());
}

#[test]
fn binary_fails_cleanly_on_a_broken_config() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.toml");
    fs::write(&config_path, "criteria = [\"nope\"]\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_taic"))
        .args(["evaluate", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("error:") && stderr.contains("nope"), "got: {stderr}");
}
