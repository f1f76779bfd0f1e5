//! `qsd`: runs a quasi-stationary distribution scenario and writes CSV artifacts
//! plus `manifest.json` into the output directory.

mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

use config::{describe, load, Override, Source, BUILT_INS};
use error::{CliError, ConfigError};

const AFTER_HELP: &str = "Any other `--name value` sets a scenario key: `--lambda 1.1` updates the model \
(or its rates), `--n-paths 500` a solver field, and dotted names such as `--solver.points 11` are taken as given.\n\
Precedence: defaults < scenario file < --name value < --override < dedicated flags.\n\
The output directory is --out, else $QSD_OUT, else qsd-out/<scenario name>.";

#[derive(Parser, Debug)]
#[command(name = "qsd", version, about = "Quasi-stationary distributions of absorbed Markov processes", after_help = AFTER_HELP)]
struct Cli {
    /// Optional `run`, then a built-in scenario name or a scenario file.
    #[arg(value_name = "SCENARIO")]
    words: Vec<String>,
    /// Built-in scenario name or path to a scenario file.
    #[arg(long)]
    scenario: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "t-max")]
    t_max: Option<f64>,
    /// `key=value` with a dotted key such as `solver.n_trunc=200`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// List built-in scenarios.
    #[arg(long)]
    list: bool,
}

const VALUED: &[&str] = &["scenario", "out", "seed", "particles", "epsilon", "dt", "t-max", "override"];
const SWITCHES: &[&str] = &["list", "help", "version"];

/// Separates `--name value` pairs that clap does not know into overrides.
fn split_bare_flags(args: Vec<String>) -> (Vec<String>, Vec<Override>) {
    let mut kept = Vec::new();
    let mut bare = Vec::new();
    let mut it = args.into_iter().peekable();
    if let Some(bin) = it.next() {
        kept.push(bin);
    }
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--").filter(|b| !b.is_empty()) else {
            kept.push(a);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if VALUED.contains(&name.as_str()) {
            kept.push(a);
            if inline.is_none() {
                if let Some(v) = it.next() {
                    kept.push(v);
                }
            }
            continue;
        }
        if SWITCHES.contains(&name.as_str()) {
            kept.push(a);
            continue;
        }
        let raw = match inline {
            Some(v) => v,
            None => match it.peek() {
                Some(v) if !v.starts_with("--") => it.next().unwrap_or_default(),
                _ => "true".to_string(),
            },
        };
        bare.push(Override {
            key: name.replace('-', "_"),
            raw,
            bare: true,
        });
    }
    (kept, bare)
}

fn main() {
    let (args, bare) = split_bare_flags(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let code = match real_main(cli, bare) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("qsd: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn real_main(cli: Cli, bare: Vec<Override>) -> Result<(), CliError> {
    if cli.list {
        for b in BUILT_INS {
            println!("{:<16} {}", b.name, describe(b));
        }
        return Ok(());
    }
    let mut words: &[String] = &cli.words;
    if words.first().map(String::as_str) == Some("run") {
        words = &words[1..];
    }
    let name = match (&cli.scenario, words) {
        (Some(s), []) => s.clone(),
        (None, [w]) => w.clone(),
        (None, []) => return Err(ConfigError::new("command line", "no scenario given; see --list").into()),
        _ => return Err(ConfigError::new("command line", "give exactly one scenario").into()),
    };
    let src = Source::locate(&name)?;

    let mut overrides = bare;
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::new("command line", format!("--override `{o}` is not key=value")))?;
        overrides.push(Override {
            key: k.trim().to_string(),
            raw: v.trim().to_string(),
            bare: false,
        });
    }
    let typed = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("solver.particles", cli.particles.map(|v| v.to_string())),
        ("solver.epsilon", cli.epsilon.map(|v| format!("{v:?}"))),
        ("solver.dt", cli.dt.map(|v| format!("{v:?}"))),
        ("solver.t_max", cli.t_max.map(|v| format!("{v:?}"))),
    ];
    for (key, raw) in typed {
        if let Some(raw) = raw {
            overrides.push(Override {
                key: key.to_string(),
                raw,
                bare: false,
            });
        }
    }

    let (scenario, applied) = load(&src, &overrides).map_err(CliError::Config)?;
    let built = run::build(&scenario, &src)?;

    let out = cli
        .out
        .or_else(|| std::env::var_os("QSD_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("qsd-out").join(&scenario.name));
    std::fs::create_dir_all(&out)?;
    let start = Instant::now();
    let report = run::execute(&scenario, built, &out)?;
    let mut wall = report.wall_times;
    wall.insert("total".into(), start.elapsed().as_secs_f64().into());

    let manifest = json!({
        "tool": "qsd",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": qsd_core::VERSION,
        "source": src.label,
        "seed": scenario.seed,
        "seed_rule": "path k uses seed XOR k; particle ensembles use the seed itself",
        "config": scenario,
        "overrides": applied,
        "outputs": report.files,
        "results": report.results,
        "warnings": report.warnings,
        "wall_time_seconds": wall,
    });
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(out.join("manifest.json"), text)?;

    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}: wrote {} to {}", scenario.name, report.files.join(", "), out.display());
    for (k, v) in manifest["results"].as_object().into_iter().flatten() {
        println!("  {k} = {v}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_flags_become_overrides() {
        let (kept, bare) = split_bare_flags(args(&[
            "qsd", "run", "example2", "--lambda", "1.1", "--out", "dir", "--n-paths=5", "--d", "-0.5", "--flag", "--list",
        ]));
        assert_eq!(kept, args(&["qsd", "run", "example2", "--out", "dir", "--list"]));
        let got: Vec<(&str, &str)> = bare.iter().map(|o| (o.key.as_str(), o.raw.as_str())).collect();
        assert_eq!(got, [("lambda", "1.1"), ("n_paths", "5"), ("d", "-0.5"), ("flag", "true")]);
    }
}
