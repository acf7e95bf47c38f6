use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
}

fn problem() -> Value {
    json!({
        "kind": "synthetic",
        "alpha": 0.5,
        "beta": 0.5,
        "devices": 5,
        "sizes": { "mode": "explicit", "sizes": [20, 30, 15, 25, 10] },
        "data_seed": 3
    })
}

fn run_spec(scheme: &str, k: usize) -> Value {
    json!({
        "scheme": scheme,
        "local_steps": 3,
        "participants": k,
        "rounds": 25,
        "batch": 4,
        "schedule": { "kind": "inverse", "eta0": 0.3, "clock": "round" }
    })
}

/// Runs `fedsim <cmd>` on `spec` with output in `dir/out`; returns the exit
/// code and the output directory.
fn invoke(dir: &Path, cmd: &str, spec: &Value, extra: &[&str]) -> (i32, PathBuf) {
    let cfg = dir.join(format!("{cmd}.json"));
    std::fs::write(&cfg, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    let out = dir.join("out");
    let status = bin()
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .env("FEDSIM_LOG", "error")
        .output()
        .unwrap();
    (status.status.code().unwrap(), out)
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records()
        .map(|rec| {
            header
                .iter()
                .cloned()
                .zip(rec.unwrap().iter().map(String::from))
                .collect()
        })
        .collect()
}

fn grid_spec() -> Value {
    json!({
        "problem": problem(),
        "runs": [run_spec("scheme_i", 2), run_spec("scheme_ii_transformed", 3), run_spec("full", 5)],
        "seeds": [0, 1],
        "target": { "loss": 1.2 }
    })
}

#[test]
fn outputs_are_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, oa) = invoke(a.path(), "run", &grid_spec(), &[]);
    let (cb, ob) = invoke(b.path(), "run", &grid_spec(), &["--jobs", "1"]);
    assert_eq!((ca, cb), (0, 0));
    let fa = files(&oa);
    assert_eq!(fa.len(), 7);
    assert_eq!(fa, files(&ob));
}

#[test]
fn summary_agrees_with_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = invoke(dir.path(), "run", &grid_spec(), &[]);
    assert_eq!(code, 0);
    let summary = read_csv(&out.join("summary.csv"));
    assert_eq!(summary.len(), 6);
    let mut reached = 0;
    for row in &summary {
        let eps: f64 = row["eps"].parse().unwrap();
        let name = format!(
            "run{:03}_{}_seed{}.csv",
            row["run"].parse::<usize>().unwrap(),
            row["label"],
            row["seed"]
        );
        let traj = read_csv(&out.join("trajectories").join(name));
        assert_eq!(traj.len().to_string(), row["rounds_run"]);
        let first = traj
            .iter()
            .find(|r| r["loss"].parse::<f64>().unwrap() <= eps)
            .map_or(-1, |r| r["round"].parse::<i64>().unwrap());
        assert_eq!(first.to_string(), row["rounds_to_eps"]);
        reached += usize::from(first > 0);
        assert_eq!(traj.last().unwrap()["loss"], row["final_loss"]);
        for (i, r) in traj.iter().enumerate() {
            assert_eq!(r["round"], (i + 1).to_string());
            assert_eq!(r["status"], "ok");
        }
    }
    assert!(
        reached > 0 && reached < summary.len(),
        "want a mix of reached and unreached runs"
    );
}

#[test]
fn unreachable_target_uses_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = grid_spec();
    spec["target"] = json!({ "loss": -1.0 });
    let (code, out) = invoke(dir.path(), "run", &spec, &["--seed", "4"]);
    assert_eq!(code, 0);
    let summary = read_csv(&out.join("summary.csv"));
    assert_eq!(summary.len(), 3);
    assert!(summary.iter().all(|r| r["rounds_to_eps"] == "-1" && r["seed"] == "4"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut empty = grid_spec();
    empty["runs"] = json!([]);
    assert_eq!(invoke(dir.path(), "run", &empty, &[]).0, 2);

    let sweep =
        json!({ "problem": problem(), "base": run_spec("scheme_i", 2), "e_grid": [], "target": { "gap": 0.1 } });
    assert_eq!(invoke(dir.path(), "sweep-e", &sweep, &[]).0, 2);

    let mut no_target = sweep.clone();
    no_target["e_grid"] = json!([1, 2]);
    no_target.as_object_mut().unwrap().remove("target");
    assert_eq!(invoke(dir.path(), "sweep-e", &no_target, &[]).0, 2);

    let mut typo = grid_spec();
    typo["runz"] = json!([]);
    assert_eq!(invoke(dir.path(), "run", &typo, &[]).0, 2);

    let mut bad_scheme = grid_spec();
    bad_scheme["runs"][0]["scheme"] = json!("scheme_iii");
    assert_eq!(invoke(dir.path(), "run", &bad_scheme, &[]).0, 2);

    let mut too_many = grid_spec();
    too_many["runs"][0]["participants"] = json!(9);
    assert_eq!(invoke(dir.path(), "run", &too_many, &[]).0, 2);

    let missing = bin()
        .args(["run", "--config", "/nonexistent/spec.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn divergence_in_a_required_run_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = grid_spec();
    spec["runs"] = json!([{
        "label": "hot",
        "scheme": "full",
        "local_steps": 2,
        "rounds": 400,
        "schedule": { "kind": "constant", "eta": 1e6 }
    }]);
    spec["seeds"] = json!([0]);
    let (code, out) = invoke(dir.path(), "run", &spec, &[]);
    assert_eq!(code, 3);
    let summary = read_csv(&out.join("summary.csv"));
    assert_eq!(summary[0]["status"], "diverged");
    let traj = read_csv(&out.join("trajectories/run000_hot_seed0.csv"));
    assert_eq!(traj.last().unwrap()["status"], "diverged");
}

#[test]
fn divergence_inside_a_sweep_is_only_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = run_spec("scheme_i", 2);
    base["schedule"] = json!({ "kind": "constant", "eta": 1e6 });
    let spec = json!({ "problem": problem(), "base": base, "k_grid": [2, 3], "target": { "gap": 0.1 } });
    let (code, out) = invoke(dir.path(), "sweep-k", &spec, &[]);
    assert_eq!(code, 0);
    let rows = read_csv(&out.join("sweep_k.csv"));
    assert!(rows
        .iter()
        .all(|r| r["status"] == "diverged" && r["rounds_to_eps"] == "-1"));
}

#[test]
fn sweep_k_full_subset_matches_full_participation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "problem": problem(),
        "base": run_spec("scheme_ii", 2),
        "k_grid": [5, 2],
        "seeds": [7],
        "target": { "gap": 0.3 }
    });
    let (code, out) = invoke(dir.path(), "sweep-k", &spec, &[]);
    assert_eq!(code, 0);
    let rows = read_csv(&out.join("sweep_k.csv"));
    assert_eq!(rows.iter().map(|r| r["K"].as_str()).collect::<Vec<_>>(), ["2", "5"]);

    let full_dir = tempfile::tempdir().unwrap();
    let full = json!({ "problem": problem(), "runs": [run_spec("full", 5)], "seeds": [7], "target": { "gap": 0.3 } });
    let (code, full_out) = invoke(full_dir.path(), "run", &full, &[]);
    assert_eq!(code, 0);
    let a = read_csv(&out.join("trajectories/run001_K5_seed7.csv"));
    let b = read_csv(&full_out.join("trajectories/run000_full_0_seed7.csv"));
    let loss = |t: &[BTreeMap<String, String>]| t.iter().map(|r| r["loss"].clone()).collect::<Vec<_>>();
    assert_eq!(loss(&a), loss(&b));
}

#[test]
fn sweep_e_reports_measured_and_predicted_columns() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "problem": { "kind": "counterexample", "devices": 3, "block": 2, "mu": 0.05 },
        "base": {
            "scheme": "full",
            "local_steps": 1,
            "rounds": 400,
            "schedule": { "kind": "annealed", "eta0": 0.2, "offset": 1.0, "rate": 0.01 }
        },
        "e_grid": [16, 1, 2, 4, 8],
        "target": { "gap": 1e-3 }
    });
    let (code, out) = invoke(dir.path(), "sweep-e", &spec, &[]);
    assert_eq!(code, 0);
    let rows = read_csv(&out.join("sweep_e.csv"));
    assert_eq!(
        rows.iter().map(|r| r["E"].as_str()).collect::<Vec<_>>(),
        ["1", "2", "4", "8", "16"]
    );
    for r in &rows {
        assert!(r["rounds_to_eps"].parse::<i64>().unwrap() > 0, "{r:?}");
        assert!(r["predicted_bracket"].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn counterexample_table_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "counterexample": {
            "devices": 3, "block": 2, "mu": 0.0,
            "eta_grid": [0.5, 1e-2],
            "e_grid": [1, 2, 4],
            "step_tol": 1e-15
        }
    });
    let (code, out) = invoke(dir.path(), "counterexample", &spec, &[]);
    assert_eq!(code, 0);
    let rows = read_csv(&out.join("counterexample.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let eta: f64 = r["eta"].parse().unwrap();
        if eta == 0.5 {
            assert_eq!(r["flag"], "eta_out_of_range");
            continue;
        }
        assert_eq!(r["flag"], "ok");
        let gap: f64 = r["gap_actual"].parse().unwrap();
        let bound: f64 = r["gap_bound"].parse().unwrap();
        if r["E"] == "1" {
            assert!(gap <= 1e-8);
        } else {
            assert!(gap >= bound && bound > 0.0);
        }
        assert!(r["fixed_point_residual"].parse::<f64>().unwrap() <= 1e-8);
    }
}

#[test]
fn validate_flags_large_constant_rate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "problem": { "kind": "counterexample", "devices": 3, "block": 2, "mu": 1e-2 },
        "runs": [
            { "scheme": "full", "local_steps": 4, "rounds": 100, "schedule": { "kind": "theoretical" } },
            { "scheme": "full", "local_steps": 4, "rounds": 100, "schedule": { "kind": "constant", "eta": 0.2 } }
        ]
    });
    let (code, out) = invoke(dir.path(), "validate", &spec, &[]);
    assert_eq!(code, 0);
    assert_eq!(files(&out).len(), 1);
    let rows = read_csv(&out.join("validate.csv"));
    assert_eq!(rows[0]["passes"], "true");
    assert_eq!(rows[1]["passes"], "false");
    assert_eq!(rows[1]["first_step_bounded"], "false");
}

#[test]
fn generated_data_file_reproduces_the_synthetic_run() {
    let dir = tempfile::tempdir().unwrap();
    let (code, data_out) = invoke(dir.path(), "gen-data", &json!({ "problem": problem() }), &[]);
    assert_eq!(code, 0);
    let data = dir.path().join("dataset.csv");
    std::fs::rename(data_out.join("dataset.csv"), &data).unwrap();

    let spec = |p: Value| json!({ "problem": p, "runs": [run_spec("scheme_i", 2)], "seeds": [3] });
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, oa) = invoke(a.path(), "run", &spec(problem()), &[]);
    let (cb, ob) = invoke(b.path(), "run", &spec(json!({ "kind": "file", "path": data })), &[]);
    assert_eq!((ca, cb), (0, 0));
    assert_eq!(files(&oa), files(&ob));
}
