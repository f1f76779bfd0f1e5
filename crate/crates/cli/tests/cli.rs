use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn qsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsd"))
        .args(args)
        .env_remove("QSD_OUT")
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn run_ok(args: &[&str]) -> Output {
    let o = qsd(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

/// Overrides that keep each built-in quick without changing its model.
fn quick(name: &str) -> Vec<&'static str> {
    match name {
        "example1" | "example2" => vec!["--solver.points", "21"],
        "example3_bd" => vec!["--t-max", "2"],
        "example4_feller" => vec!["--t-max", "1", "--fd-grid", "1000"],
        "example5_lv" => vec!["--t-max", "1", "--points", "5", "--n-paths", "1000"],
        "wright_fisher" => vec!["--particles", "500", "--t-burnin", "1", "--t-avg", "1", "--snapshots", "5"],
        _ => vec![],
    }
}

fn listed() -> Vec<String> {
    let o = run_ok(&["--list"]);
    String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect()
}

#[test]
fn list_names_are_unique_and_include_wright_fisher() {
    let names = listed();
    assert!(names.iter().any(|n| n == "wright_fisher"), "{names:?}");
    let unique: BTreeSet<&String> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    for n in ["example1", "example2", "example3_bd", "example4_feller", "example5_lv"] {
        assert!(names.iter().any(|m| m == n), "{n} missing");
    }
}

#[test]
fn every_built_in_runs_end_to_end() {
    for name in listed() {
        let dir = scratch(&format!("builtin_{name}"));
        let out = dir.to_str().unwrap();
        let mut args = vec!["run", name.as_str(), "--out", out];
        args.extend(quick(&name));
        run_ok(&args);
        let m = manifest(&dir);
        let files = m["outputs"].as_array().unwrap();
        assert!(!files.is_empty(), "{name}");
        for f in files {
            let path = dir.join(f.as_str().unwrap());
            let text = fs::read_to_string(&path).unwrap();
            assert!(text.lines().count() >= 2, "{name}: {} is empty", path.display());
        }
        assert!(!m["results"].as_object().unwrap().is_empty(), "{name}");
        assert_eq!(m["config"]["name"], name.as_str());
        assert!(m["wall_time_seconds"]["total"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn example2_manifest_carries_the_decay_rate() {
    let dir = scratch("example2");
    run_ok(&["run", "example2", "--lambda", "1.1", "--out", dir.to_str().unwrap()]);
    let m = manifest(&dir);
    let theta = m["results"]["theta"].as_f64().unwrap();
    assert!((theta - 5.84e-5).abs() < 2e-6, "{theta}");
    assert_eq!(m["config"]["model"]["lambda"], 1.1);
    let qsd = fs::read_to_string(dir.join("qsd.csv")).unwrap();
    assert_eq!(qsd.lines().next(), Some("state,alpha,pi"));
    assert_eq!(qsd.lines().count(), 101);
}

#[test]
fn example1_emits_survival_and_distance_curves() {
    let dir = scratch("example1");
    run_ok(&["run", "example1", "--d", "0.001", "--out", dir.to_str().unwrap()]);
    let curves = fs::read_to_string(dir.join("curves.csv")).unwrap();
    // P(T > t) = exp(-d t) for uniform killing.
    for line in curves.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[1] - (-0.001 * v[0]).exp()).abs() < 1e-10, "{line}");
    }
    let dist = fs::read_to_string(dir.join("distances.csv")).unwrap();
    assert_eq!(dist.lines().next(), Some("t,minus_log_survival,sup_distance,tv_distance"));
}

const LAYERED: &str = r#"name = "layered"
outputs = ["curves"]

[model]
kind = "walk"
n = 10
d = 0.1

[solver]
kind = "spectral"
t_max = 50.0
"#;

#[test]
fn command_line_beats_file_beats_defaults() {
    let dir = scratch("layers");
    let file = dir.join("layered.toml");
    fs::write(&file, LAYERED).unwrap();
    let out = dir.join("out");
    run_ok(&[
        "run",
        file.to_str().unwrap(),
        "--d",
        "0.2",
        "--override",
        "solver.t_max=20",
        "--t-max",
        "30",
        "--out",
        out.to_str().unwrap(),
    ]);
    let c = &manifest(&out)["config"];
    // Default only.
    assert_eq!(c["solver"]["points"], 101);
    // File over default, then command line over file.
    assert_eq!(c["model"]["n"], 10);
    assert_eq!(c["model"]["d"], 0.2);
    assert_eq!(c["solver"]["t_max"], 30.0);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 102);
    assert!(curves.lines().last().unwrap().starts_with("30,"));

    let out = dir.join("file_only");
    run_ok(&["run", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let c = &manifest(&out)["config"];
    assert_eq!(c["model"]["d"], 0.1);
    assert_eq!(c["solver"]["t_max"], 50.0);
}

#[test]
fn output_directory_may_come_from_the_environment() {
    let dir = scratch("env_out");
    let o = Command::new(env!("CARGO_BIN_EXE_qsd"))
        .args(["run", "example2", "--solver.points", "3"])
        .env("QSD_OUT", &dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("manifest.json").exists());
}

#[test]
fn empty_outputs_is_rejected_without_writing() {
    let dir = scratch("empty_outputs");
    let file = dir.join("empty.toml");
    fs::write(&file, LAYERED.replace("outputs = [\"curves\"]", "outputs = []")).unwrap();
    let out = dir.join("out");
    let o = qsd(&["run", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("empty.toml:2: outputs:"), "{e}");
    assert!(!out.exists());
}

#[test]
fn config_errors_carry_line_and_field() {
    let dir = scratch("config_errors");
    let out = dir.join("out");

    let file = dir.join("unknown.toml");
    fs::write(&file, LAYERED.replace("d = 0.1", "d = 0.1\nspeed = 3")).unwrap();
    let o = qsd(&["run", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("unknown.toml:") && e.contains("speed"), "{e}");

    let file = dir.join("bad_value.toml");
    fs::write(&file, LAYERED.replace("d = 0.1", "d = -1.0")).unwrap();
    let o = qsd(&["run", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("bad_value.toml:7: model.d:"), "{e}");

    let file = dir.join("mismatch.toml");
    fs::write(&file, LAYERED.replace("\"spectral\"", "\"gw\"")).unwrap();
    let o = qsd(&["run", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("mismatch.toml:10: solver.kind:"), "{e}");

    let o = qsd(&["run", "example1", "--override", "solver.points=many", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("solver.points=\"many\""), "{}", stderr(&o));

    let o = qsd(&["run", "wright_fisher", "--override", "seed=-1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = qsd(&["run", "no_such_scenario", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn monte_carlo_without_seed_is_rejected() {
    let dir = scratch("no_seed");
    let file = dir.join("fv.toml");
    fs::write(
        &file,
        LAYERED.replace("\"spectral\"", "\"fv\"").replace("outputs = [\"curves\"]", "outputs = [\"qsd\"]"),
    )
    .unwrap();
    let o = qsd(&["run", file.to_str().unwrap(), "--out", dir.join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
    let o = qsd(&[
        "run",
        file.to_str().unwrap(),
        "--seed",
        "7",
        "--particles",
        "200",
        "--t-burnin",
        "5",
        "--t-avg",
        "5",
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn solver_and_io_failures_have_their_own_exit_codes() {
    let dir = scratch("exit_codes");
    let file = dir.join("critical.toml");
    fs::write(
        &file,
        "name = \"critical\"\noutputs = [\"qsd\"]\n\n[model]\nkind = \"galton_watson\"\npmf = [0.5, 0.0, 0.5]\n\n[solver]\nkind = \"gw\"\n",
    )
    .unwrap();
    let o = qsd(&["run", file.to_str().unwrap(), "--out", dir.join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let blocker = dir.join("blocker");
    fs::write(&blocker, "").unwrap();
    let o = qsd(&["run", "example2", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn galton_watson_scenario_from_file() {
    let dir = scratch("gw");
    let file = dir.join("gw.toml");
    fs::write(
        &file,
        "name = \"gw\"\nseed = 9\noutputs = [\"qsd\", \"curves\", \"distances\", \"paths\"]\n\n[model]\nkind = \"galton_watson\"\npmf = [0.6, 0.0, 0.4]\n\n[solver]\nkind = \"gw\"\ngenerations = 10\npaths_out = 3\n",
    )
    .unwrap();
    let out = dir.join("out");
    run_ok(&["run", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let m = manifest(&out);
    assert!(m["results"]["functional_residual"].as_f64().unwrap() < 1e-6);
    let dist = fs::read_to_string(out.join("distances.csv")).unwrap();
    let tv: Vec<f64> = dist.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(tv.len(), 10);
    assert!(tv[9] < tv[0]);
}

#[test]
fn birth_death_table_and_family_point() {
    let dir = scratch("bd_table");
    let mut table = String::from("i,lambda,mu\n");
    for i in 1..=60 {
        table.push_str(&format!("{i},{},{}\n", 0.5 * i as f64, i as f64));
    }
    fs::write(dir.join("rates.csv"), table).unwrap();
    let file = dir.join("bd.toml");
    fs::write(
        &file,
        "name = \"bd\"\noutputs = [\"qsd\"]\n\n[model]\nkind = \"birth_death\"\nrates = { type = \"table\", path = \"rates.csv\" }\n\n[solver]\nkind = \"spectral\"\nn_trunc = 30\n",
    )
    .unwrap();
    let out = dir.join("out");
    run_ok(&["run", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let theta = manifest(&out)["results"]["theta"].as_f64().unwrap();
    assert!((theta - 0.5).abs() < 1e-3, "{theta}");

    let file = dir.join("family.toml");
    fs::write(
        &file,
        "name = \"family\"\noutputs = [\"qsd\"]\n\n[model]\nkind = \"birth_death\"\nrates = { type = \"linear\", lambda = 0.5, mu = 1.0 }\n\n[solver]\nkind = \"bd_analytic\"\nn_trunc = 200\nfamily_x = 0.25\n",
    )
    .unwrap();
    let out = dir.join("family_out");
    run_ok(&["run", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let m = manifest(&out);
    assert_eq!(m["results"]["regime"], "Continuum");
    let qsd = fs::read_to_string(out.join("qsd.csv")).unwrap();
    assert_eq!(qsd.lines().next(), Some("state,alpha,pi,family_alpha"));
}

#[test]
fn csv_output_is_idempotent_with_lf_endings() {
    let a = scratch("idem_a");
    let b = scratch("idem_b");
    for (name, extra) in [("example3_bd", vec!["--t-max", "3"]), ("wright_fisher", quick("wright_fisher"))] {
        for dir in [&a, &b] {
            let out = dir.join(name);
            let mut args = vec!["run", name, "--out", out.to_str().unwrap()];
            args.extend(extra.iter().copied());
            run_ok(&args);
        }
        let (fa, fb) = (csv_files(&a.join(name)), csv_files(&b.join(name)));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{name}: CSVs differ between identical runs");
        for (f, bytes) in &fa {
            assert!(!bytes.contains(&b'\r'), "{name}/{f} has CR");
            assert!(bytes.ends_with(b"\n"), "{name}/{f}");
        }
    }
}

fn drop_nulls(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(_, x)| !x.is_null())
                .map(|(k, x)| (k.clone(), drop_nulls(x)))
                .collect(),
        ),
        Value::Array(a) => Value::Array(a.iter().map(drop_nulls).collect()),
        other => other.clone(),
    }
}

#[test]
fn manifest_config_alone_reproduces_the_csvs() {
    let dir = scratch("replay");
    let first = dir.join("first");
    let mut args = vec!["run", "wright_fisher", "--out", first.to_str().unwrap(), "--epsilon", "0.01"];
    args.extend(quick("wright_fisher"));
    run_ok(&args);
    let config = drop_nulls(&manifest(&first)["config"]);
    let file = dir.join("replay.toml");
    fs::write(&file, toml::to_string(&config).unwrap()).unwrap();
    let second = dir.join("second");
    run_ok(&["run", file.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(csv_files(&first), csv_files(&second));
}
