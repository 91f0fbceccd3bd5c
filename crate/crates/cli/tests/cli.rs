use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn catt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catt")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Simulated long panel written by the CLI itself.
fn simulated_panel(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["simulate", "--n", "1200", "--reps", "1", "--band", "none", "--emit-panel", "-o"];
    let o = s(&out);
    args.push(&o);
    args.extend_from_slice(extra);
    let r = catt(&args);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    out.join("panel.csv")
}

#[test]
fn estimate_writes_the_documented_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let input = simulated_panel(tmp.path(), &[]);
    let out = tmp.path().join("est");
    let r = catt(&["estimate", "--input", &s(&input), "--boot-reps", "100", "-o", &s(&out)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(header(&out.join("band.csv")), "g,t,z,estimate,se,lower,upper,critical,method");
    assert_eq!(header(&out.join("curve.csv")), "g,t,z,estimate,se,n_eff");
    let side = json(&out.join("estimate.json"));
    let cells = side["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 6);
    for c in cells {
        assert!(c["bandwidth"]["h2"].as_f64().unwrap() > 0.0);
        assert!(c["first_stage"]["gps_coefficients"].as_array().unwrap().len() == 2);
        assert_eq!(c["critical"]["method"], "Bootstrap");
    }
    let rows = std::fs::read_to_string(out.join("band.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 6 * 41);
}

#[test]
fn invalid_alpha_is_reported_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let input = simulated_panel(tmp.path(), &[]);
    let r = catt(&["estimate", "--input", &s(&input), "--alpha", "1.5", "-o", &s(&tmp.path().join("x"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("alpha"));
}

#[test]
fn repeated_runs_are_byte_identical_and_never_append() {
    let tmp = tempfile::tempdir().unwrap();
    let input = simulated_panel(tmp.path(), &[]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let r = catt(&["estimate", "--input", &s(&input), "--boot-reps", "150", "--seed", "9", "-o", &s(d)]);
        assert!(r.status.success());
    }
    let band = |d: &Path| std::fs::read(d.join("band.csv")).unwrap();
    assert_eq!(band(&a), band(&b));

    let again = catt(&["estimate", "--input", &s(&input), "--boot-reps", "150", "--seed", "9", "-o", &s(&a)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));
    let r = catt(&["estimate", "--input", &s(&input), "--boot-reps", "150", "--seed", "9", "--overwrite", "-o", &s(&a)]);
    assert!(r.status.success());
    assert_eq!(band(&a), band(&b));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let input = simulated_panel(tmp.path(), &[]);
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, format!(r#"{{"input": "{}", "alpha": 0.1, "boot_reps": 120, "cells": ["2:2"], "p": 1}}"#, s(&input))).unwrap();
    let out = tmp.path().join("out");
    let r = catt(&["estimate", "--config", &s(&cfg), "--alpha", "0.2", "-o", &s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let side = json(&out.join("estimate.json"));
    assert_eq!(side["settings"]["alpha"], 0.2);
    assert_eq!(side["settings"]["boot_reps"], 120);
    assert_eq!(side["settings"]["p"], 1);
    assert_eq!(side["cells"].as_array().unwrap().len(), 1);

    std::fs::write(&cfg, r#"{"alhpa": 0.1}"#).unwrap();
    let r = catt(&["estimate", "--config", &s(&cfg), "-o", &s(&out)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn treatment_status_column_gives_the_same_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let input = simulated_panel(tmp.path(), &[]);
    let text = std::fs::read_to_string(&input).unwrap();
    let mut lines = text.lines();
    let mut with_d = String::from("unit,year,outcome,treated,cov\n");
    lines.next();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (t, g): (i64, i64) = (f[1].parse().unwrap(), f[3].parse().unwrap());
        let d = (g != 0 && t >= g) as u8;
        with_d.push_str(&format!("{},{},{},{d},{}\n", f[0], f[1] .parse::<i64>().unwrap() + 2000, f[2], f[4]));
    }
    let d_input = tmp.path().join("d.csv");
    std::fs::write(&d_input, with_d).unwrap();
    let (a, b) = (tmp.path().join("g"), tmp.path().join("d"));
    let common = ["--band", "none", "--bandwidth", "0.4"];
    let mut args = vec!["estimate", "--input"];
    let gi = s(&input);
    let ao = s(&a);
    args.extend([gi.as_str(), "-o", ao.as_str()]);
    args.extend(common);
    assert!(catt(&args).status.success());
    let di = s(&d_input);
    let bo = s(&b);
    let mut args = vec![
        "estimate", "--input", di.as_str(), "--id-col", "unit", "--time-col", "year", "--y-col", "outcome", "--d-col", "treated",
        "--z-col", "cov", "-o", bo.as_str(),
    ];
    args.extend(common);
    let r = catt(&args);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let body = |d: &Path| {
        let t = std::fs::read_to_string(d.join("curve.csv")).unwrap();
        t.lines().skip(1).map(|l| l.split(',').skip(2).collect::<Vec<_>>().join(",")).collect::<Vec<_>>()
    };
    assert_eq!(body(&a), body(&b));
    let labels = std::fs::read_to_string(b.join("curve.csv")).unwrap();
    assert!(labels.lines().nth(1).unwrap().starts_with("2002,2002,"));
}

#[test]
fn single_replication_report_has_no_missing_values() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("mc");
    let r = catt(&["simulate", "--preset", "section6", "--n", "600", "--reps", "1", "--boot-reps", "50", "-o", &s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("mc_report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "g,t,z,bias,rmse,pwcp,ucp,length");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 21);
    for row in rows {
        assert!(!row.to_ascii_lowercase().contains("nan"), "{row}");
    }
    let side = json(&out.join("mc_report.json"));
    assert_eq!(side["reps"], 1);
    assert_eq!(side["preset"], "section6");
}

#[test]
fn unknown_preset_lists_the_valid_ones() {
    let r = catt(&["simulate", "--preset", "fig4"]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("appendix-d") && err.contains("section6"), "{err}");
}

#[test]
fn discrete_estimator_and_bandwidth_report() {
    let tmp = tempfile::tempdir().unwrap();
    let input = simulated_panel(tmp.path(), &["--covariate", "discrete", "--estimator", "discrete"]);
    let out = tmp.path().join("disc");
    let r = catt(&["estimate", "--input", &s(&input), "--estimator", "discrete", "--boot-reps", "199", "-o", &s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let band = std::fs::read_to_string(out.join("band.csv")).unwrap();
    assert_eq!(band.lines().count(), 1 + 6 * 3);
    assert!(band.lines().nth(1).unwrap().ends_with("discrete-boot"));

    let input = simulated_panel(&tmp.path().join("c"), &[]);
    let bw = tmp.path().join("bw");
    let r = catt(&["bandwidth", "--input", &s(&input), "-o", &s(&bw)]);
    assert!(r.status.success());
    assert_eq!(
        header(&bw.join("bandwidth.csv")),
        "g,t,n,h_imse_p1,h1,h2,pilot_h,preliminary_h,integral_v,integral_b2,zero_bias_fallback"
    );
    assert_eq!(std::fs::read_to_string(bw.join("bandwidth.csv")).unwrap().lines().count(), 7);
}

#[test]
fn one_failed_cell_out_of_six_is_a_partial_success() {
    let tmp = tempfile::tempdir().unwrap();
    let input = simulated_panel(tmp.path(), &[]);
    // cohort 4 only above z = 1, never-treated only below: the (4, 4) logit separates
    let text = std::fs::read_to_string(&input).unwrap();
    let mut out = String::new();
    for (k, line) in text.lines().enumerate() {
        if k == 0 {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let mut f: Vec<String> = line.split(',').map(str::to_string).collect();
        let z: f64 = f[4].parse().unwrap();
        f[3] = match (f[3].as_str(), z > 1.0) {
            ("4", false) => "3".into(),
            ("0", true) => "4".into(),
            (g, _) => g.into(),
        };
        out.push_str(&f.join(","));
        out.push('\n');
    }
    let edited = tmp.path().join("edited.csv");
    std::fs::write(&edited, out).unwrap();
    let dir = tmp.path().join("partial");
    let r = catt(&["estimate", "--input", &s(&edited), "--band", "none", "--bandwidth", "rot", "-o", &s(&dir)]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    let side = json(&dir.join("estimate.json"));
    let failures = side["failures"].as_array().unwrap();
    assert_eq!(failures.len(), 1);
    assert_eq!((failures[0]["g"].as_i64(), failures[0]["t"].as_i64()), (Some(4), Some(4)));
}
