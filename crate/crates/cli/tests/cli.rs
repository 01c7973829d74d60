use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ivcate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivcate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_string_lossy().into_owned()
}

#[test]
fn help_lists_subcommands() {
    let o = ivcate(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["simulate", "rates", "401k", "dump-dgp"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn small_scalar_study_writes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let o = ivcate(&[
        "simulate",
        "--reps",
        "2",
        "--n",
        "400",
        "--seed",
        "3",
        "--out",
        &out_arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "estimator,mean_mse,sd,replicates");
    assert_eq!(lines.len(), 4);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * 200);
    assert!(out.join("config.json").is_file());
}

#[test]
fn highdim_table_has_three_estimator_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("hd");
    let o = ivcate(&[
        "simulate",
        "--dgp",
        "highdim",
        "--dim",
        "5",
        "--reps",
        "1",
        "--n",
        "500",
        "--out",
        &out_arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    let names: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["tau_obs", "tau_iv", "alg1"]);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = ivcate(&[
            "simulate",
            "--reps",
            "2",
            "--n",
            "300",
            "--seed",
            "11",
            "--out",
            &out_arg(d),
        ]);
        assert!(o.status.success());
    }
    for f in ["table.csv", "curves.csv", "theta.csv", "config.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_flag_is_a_usage_error() {
    let o = ivcate(&["simulate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_values_exit_with_config_error() {
    let o = ivcate(&["simulate", "--folds", "1", "--reps", "1", "--n", "100"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ivcate(&["simulate", "--estimators", "alg1,bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_survey_file_exits_with_config_error() {
    let o = ivcate(&["401k", "--data", "/nonexistent/401k.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "reps = 2\nnot_a_key = 1\n").unwrap();
    let o = ivcate(&[
        "simulate",
        "--config",
        &out_arg(&cfg),
        "--out",
        &out_arg(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_values_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        "reps = 1\nn_obs = 300\nn_iv = 300\nestimators = [\"alg1\"]\n",
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = ivcate(&[
        "simulate",
        "--config",
        &out_arg(&cfg),
        "--out",
        &out_arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("alg1,"));
}

#[test]
fn dump_dgp_writes_both_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = ivcate(&["dump-dgp", "--n", "50", "--out", &out_arg(&out)]);
    assert!(o.status.success());
    for f in ["obs.csv", "iv.csv"] {
        assert_eq!(fs::read_to_string(out.join(f)).unwrap().lines().count(), 51);
    }
}

#[test]
fn survey_pipeline_runs_on_a_synthetic_file() {
    use ivcate::data401k::{synthetic_survey, write_survey_csv};
    use ivcate::tabular::RngStream;
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("s.csv");
    write_survey_csv(
        &synthetic_survey(2500, RngStream::new(2, 2)).unwrap(),
        &data,
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = ivcate(&[
        "401k",
        "--data",
        &out_arg(&data),
        "--splits",
        "2",
        "--out",
        &out_arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(
        curves.lines().next().unwrap(),
        "educ,marr,estimator,mean,sd,masked"
    );
    assert!(curves.lines().skip(1).any(|l| l.ends_with(",1")));
}
