//! Scenario files: TOML with a `[model]`, a `[solver]`, optional
//! `[tolerances]`, and top-level `name`, `description`, `seed`, `outputs`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: Option<u64>,
    pub outputs: Vec<OutputKind>,
    pub model: Model,
    pub solver: Solver,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Qsd,
    Curves,
    Paths,
    Distances,
}

impl OutputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputKind::Qsd => "qsd",
            OutputKind::Curves => "curves",
            OutputKind::Paths => "paths",
            OutputKind::Distances => "distances",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RatesSpec {
    Linear { lambda: f64, mu: f64 },
    Logistic { lambda: f64, mu: f64, c: f64 },
    /// CSV `i,lambda,mu`, resolved against the scenario file's directory.
    Table { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Model {
    /// Walk on `1..=n` with unit jump rates and killing rate `d` everywhere.
    Walk { n: usize, d: f64 },
    /// Birth-death chain on `1..=n` with rates `lambda i`, `mu i`.
    LinearChain { n: usize, lambda: f64, mu: f64 },
    GeneratorCsv { path: PathBuf },
    BirthDeath { rates: RatesSpec },
    GaltonWatson { pmf: Vec<f64> },
    Feller {
        r: f64,
        c: f64,
        #[serde(default = "half")]
        gamma: f64,
    },
    /// `X = 2 sqrt(Z)` for the Feller diffusion with `gamma = 1/2`.
    KolmogorovFeller { r: f64, c: f64 },
    WrightFisher,
    LotkaVolterra {
        gamma: Vec<f64>,
        r: Vec<f64>,
        c: Vec<Vec<f64>>,
    },
}

fn half() -> f64 {
    0.5
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Walk { .. } => "walk",
            Model::LinearChain { .. } => "linear_chain",
            Model::GeneratorCsv { .. } => "generator_csv",
            Model::BirthDeath { .. } => "birth_death",
            Model::GaltonWatson { .. } => "galton_watson",
            Model::Feller { .. } => "feller",
            Model::KolmogorovFeller { .. } => "kolmogorov_feller",
            Model::WrightFisher => "wright_fisher",
            Model::LotkaVolterra { .. } => "lotka_volterra",
        }
    }

    pub fn is_finite_chain(&self) -> bool {
        matches!(self, Model::Walk { .. } | Model::LinearChain { .. } | Model::GeneratorCsv { .. })
    }

    pub fn is_diffusion_1d(&self) -> bool {
        matches!(self, Model::Feller { .. } | Model::KolmogorovFeller { .. } | Model::WrightFisher)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Spectral,
    BdAnalytic,
    Fv,
    Euler,
    Gw,
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::Spectral => "spectral",
            SolverKind::BdAnalytic => "bd_analytic",
            SolverKind::Fv => "fv",
            SolverKind::Euler => "euler",
            SolverKind::Gw => "gw",
        }
    }

    pub fn is_monte_carlo(self) -> bool {
        matches!(self, SolverKind::Fv | SolverKind::Euler)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Independent,
    FlemingViot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Init {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// Fields not used by the chosen solver are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solver {
    pub kind: SolverKind,
    /// Starting state (1-based for chains), point, or vector for multi-type models.
    pub init: Option<Init>,
    #[serde(default = "d_t_max")]
    pub t_max: f64,
    /// Number of points of the output time grid on `[0, t_max]`.
    #[serde(default = "d_points")]
    pub points: usize,
    #[serde(default = "d_particles")]
    pub particles: usize,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    /// Euler step; defaults to `1e-3 min(1, 1/r)` for Feller models and `1e-3` otherwise.
    pub dt: Option<f64>,
    #[serde(default = "d_t_burnin")]
    pub t_burnin: f64,
    #[serde(default = "d_t_avg")]
    pub t_avg: f64,
    #[serde(default = "d_snapshots")]
    pub snapshots: usize,
    #[serde(default = "d_bins")]
    pub bins: usize,
    #[serde(default = "d_n_trunc")]
    pub n_trunc: usize,
    #[serde(default = "d_n_max")]
    pub n_max: usize,
    /// Optional member `alpha(x)` of a birth-death QSD family.
    pub family_x: Option<f64>,
    /// Sample size for Monte Carlo statistics.
    #[serde(default = "d_n_paths")]
    pub n_paths: usize,
    /// Number of trajectories written to `paths.csv`.
    #[serde(default = "d_paths_out")]
    pub paths_out: usize,
    /// Every `stride`-th Euler step is written to `paths.csv`.
    #[serde(default = "d_stride")]
    pub stride: usize,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default = "d_generations")]
    pub generations: usize,
    #[serde(default = "d_fd_grid")]
    pub fd_grid: usize,
    pub fd_x_max: Option<f64>,
}

fn d_t_max() -> f64 {
    10.0
}
fn d_points() -> usize {
    101
}
fn d_particles() -> usize {
    1000
}
fn d_epsilon() -> f64 {
    1e-3
}
fn d_t_burnin() -> f64 {
    10.0
}
fn d_t_avg() -> f64 {
    10.0
}
fn d_snapshots() -> usize {
    51
}
fn d_bins() -> usize {
    50
}
fn d_n_trunc() -> usize {
    400
}
fn d_n_max() -> usize {
    10_000
}
fn d_n_paths() -> usize {
    1000
}
fn d_paths_out() -> usize {
    1
}
fn d_stride() -> usize {
    10
}
fn d_generations() -> usize {
    30
}
fn d_fd_grid() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "d_tol")]
    pub spectral: f64,
    #[serde(default = "d_tol")]
    pub yaglom: f64,
}

fn d_tol() -> f64 {
    1e-12
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            spectral: d_tol(),
            yaglom: d_tol(),
        }
    }
}

/// Field names of `[solver]`, used to route bare `--name value` flags.
pub const SOLVER_FIELDS: &[&str] = &[
    "kind", "init", "t_max", "points", "particles", "epsilon", "dt", "t_burnin", "t_avg", "snapshots", "bins",
    "n_trunc", "n_max", "family_x", "n_paths", "paths_out", "stride", "sampler", "generations", "fd_grid", "fd_x_max",
];

pub struct BuiltIn {
    pub name: &'static str,
    pub text: &'static str,
}

pub const BUILT_INS: &[BuiltIn] = &[
    BuiltIn {
        name: "example1",
        text: include_str!("../scenarios/example1.toml"),
    },
    BuiltIn {
        name: "example2",
        text: include_str!("../scenarios/example2.toml"),
    },
    BuiltIn {
        name: "example3_bd",
        text: include_str!("../scenarios/example3_bd.toml"),
    },
    BuiltIn {
        name: "example4_feller",
        text: include_str!("../scenarios/example4_feller.toml"),
    },
    BuiltIn {
        name: "example5_lv",
        text: include_str!("../scenarios/example5_lv.toml"),
    },
    BuiltIn {
        name: "wright_fisher",
        text: include_str!("../scenarios/wright_fisher.toml"),
    },
];

/// Raw scenario text plus where it came from.
pub struct Source {
    pub label: String,
    pub text: String,
    /// Relative paths inside the scenario resolve against this directory.
    pub base: PathBuf,
}

impl Source {
    pub fn locate(name_or_path: &str) -> Result<Source, ConfigError> {
        if let Some(b) = BUILT_INS.iter().find(|b| b.name == name_or_path) {
            return Ok(Source {
                label: format!("<built-in {}>", b.name),
                text: b.text.to_string(),
                base: std::env::current_dir().unwrap_or_default(),
            });
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigError::new(
                name_or_path,
                format!("not a built-in scenario and not a readable file ({e})"),
            )
        })?;
        Ok(Source {
            label: name_or_path.to_string(),
            text,
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }
}

/// One-line description from a built-in's `description` key.
pub fn describe(b: &BuiltIn) -> String {
    toml::from_str::<toml::Table>(b.text)
        .ok()
        .and_then(|t| t.get("description").and_then(|d| d.as_str()).map(str::to_string))
        .unwrap_or_default()
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]` (or at top level when `section` is empty).
pub fn find_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key `{key}`"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn has_key(table: &toml::Table, path: &[&str]) -> bool {
    let mut cur = table;
    for (i, p) in path.iter().enumerate() {
        match cur.get(*p) {
            Some(toml::Value::Table(t)) if i + 1 < path.len() => cur = t,
            Some(_) if i + 1 == path.len() => return true,
            _ => return false,
        }
    }
    false
}

/// Full key for a bare flag name: a key already present under `model.rates`,
/// `model` or `solver` wins, then solver field names, then top-level keys,
/// and `model.<name>` otherwise.
pub fn route_flag(table: &toml::Table, name: &str) -> String {
    if name.contains('.') {
        return name.to_string();
    }
    for prefix in [&["model", "rates"][..], &["model"][..], &["solver"][..]] {
        let mut path = prefix.to_vec();
        path.push(name);
        if has_key(table, &path) {
            return path.join(".");
        }
    }
    if SOLVER_FIELDS.contains(&name) {
        return format!("solver.{name}");
    }
    if ["name", "description", "seed", "outputs"].contains(&name) {
        return name.to_string();
    }
    format!("model.{name}")
}

/// A command-line override before routing.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    /// Dotted key, or a bare flag name routed by [`route_flag`].
    pub key: String,
    pub raw: String,
    pub bare: bool,
}

/// An override after routing and parsing, as recorded in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Applied {
    pub key: String,
    pub value: toml::Value,
}

/// Parses the file, applies overrides in order, and validates.
pub fn load(src: &Source, overrides: &[Override]) -> Result<(Scenario, Vec<Applied>), Vec<ConfigError>> {
    let mut table: toml::Table = toml::from_str(&src.text).map_err(|e| vec![toml_error(src, &e)])?;
    // Type errors in the file itself get the file's line numbers.
    toml::from_str::<Scenario>(&src.text).map_err(|e| vec![toml_error(src, &e)])?;
    let mut applied = Vec::new();
    for o in overrides {
        let key = if o.bare { route_flag(&table, &o.key) } else { o.key.clone() };
        let value = parse_value(&o.raw);
        set_path(&mut table, &key, value.clone())
            .map_err(|m| vec![ConfigError::new("command line", m).field(key.clone())])?;
        applied.push(Applied { key, value });
    }
    let scenario: Scenario = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        let keys: Vec<String> = applied.iter().map(|a| format!("{}={}", a.key, a.value)).collect();
        vec![ConfigError::new("command line", format!("{} (overrides: {})", e.message(), keys.join(", ")))]
    })?;
    let errors = validate(&scenario, src);
    if errors.is_empty() {
        Ok((scenario, applied))
    } else {
        Err(errors)
    }
}

fn toml_error(src: &Source, e: &toml::de::Error) -> ConfigError {
    let line = e.span().map(|s| line_of(&src.text, s.start));
    ConfigError::new(&src.label, e.message().trim()).line(line)
}

/// Semantic checks after deserialization. Each error names the offending field.
pub fn validate(s: &Scenario, src: &Source) -> Vec<ConfigError> {
    let mut errors = Vec::new();
    let mut err = |section: &str, key: &str, msg: String| {
        let field = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        let line = find_line(&src.text, section, key).or_else(|| find_line(&src.text, section, ""));
        errors.push(ConfigError::new(&src.label, msg).field(field).line(line));
    };

    if s.outputs.is_empty() {
        err("", "outputs", "at least one output is required".into());
    }
    let mut seen = Vec::new();
    for o in &s.outputs {
        if seen.contains(o) {
            err("", "outputs", format!("`{}` listed twice", o.as_str()));
        }
        seen.push(*o);
    }

    let kind = s.solver.kind;
    let m = &s.model;
    let supported = match kind {
        SolverKind::Spectral => m.is_finite_chain() || matches!(m, Model::BirthDeath { .. }),
        SolverKind::BdAnalytic => matches!(m, Model::BirthDeath { .. }),
        SolverKind::Fv => m.is_finite_chain() || m.is_diffusion_1d() || matches!(m, Model::BirthDeath { .. }),
        SolverKind::Euler => m.is_diffusion_1d() || matches!(m, Model::LotkaVolterra { .. }),
        SolverKind::Gw => matches!(m, Model::GaltonWatson { .. }),
    };
    if !supported {
        err(
            "solver",
            "kind",
            format!("solver `{}` does not apply to model `{}`", kind.as_str(), m.kind()),
        );
        return errors;
    }
    for o in &s.outputs {
        let ok = match (kind, o) {
            (SolverKind::Spectral, OutputKind::Paths) => false,
            (SolverKind::Fv, OutputKind::Paths) => false,
            (SolverKind::Euler, OutputKind::Distances) => false,
            (SolverKind::Euler, OutputKind::Qsd) => matches!(m, Model::Feller { .. } | Model::KolmogorovFeller { .. }),
            _ => true,
        };
        if !ok {
            err(
                "",
                "outputs",
                format!(
                    "output `{}` is not produced by solver `{}` for model `{}`",
                    o.as_str(),
                    kind.as_str(),
                    m.kind()
                ),
            );
        }
    }

    let mut model_checks: Vec<(&str, f64, bool)> = Vec::new();
    match m {
        Model::Walk { n, d } => {
            model_checks.push(("n", *n as f64, *n >= 1));
            model_checks.push(("d", *d, *d > 0.0 && d.is_finite()));
        }
        Model::LinearChain { n, lambda, mu } => {
            model_checks.push(("n", *n as f64, *n >= 1));
            model_checks.push(("lambda", *lambda, *lambda > 0.0 && lambda.is_finite()));
            model_checks.push(("mu", *mu, *mu > 0.0 && mu.is_finite()));
        }
        Model::Feller { r, c, gamma } => {
            for (k, v) in [("r", r), ("c", c), ("gamma", gamma)] {
                model_checks.push((k, *v, *v > 0.0 && v.is_finite()));
            }
        }
        Model::KolmogorovFeller { r, c } => {
            for (k, v) in [("r", r), ("c", c)] {
                model_checks.push((k, *v, *v > 0.0 && v.is_finite()));
            }
        }
        _ => {}
    }
    for (key, v, ok) in model_checks {
        if !ok {
            err("model", key, format!("must be positive, got {v}"));
        }
    }

    let random = kind.is_monte_carlo() || s.outputs.contains(&OutputKind::Paths);
    if random && s.seed.is_none() {
        err("", "seed", "a seed is required for Monte Carlo solvers and path outputs".into());
    }

    let sv = &s.solver;
    let positive = |v: f64| v > 0.0 && v.is_finite();
    if !(sv.t_max >= 0.0 && sv.t_max.is_finite()) {
        err("solver", "t_max", format!("must be finite and nonnegative, got {}", sv.t_max));
    }
    if sv.points < 2 {
        err("solver", "points", format!("must be at least 2, got {}", sv.points));
    }
    if let Some(dt) = sv.dt {
        if !positive(dt) {
            err("solver", "dt", format!("must be positive, got {dt}"));
        }
    }
    if sv.stride == 0 {
        err("solver", "stride", "must be at least 1".into());
    }
    if sv.n_paths == 0 {
        err("solver", "n_paths", "must be at least 1".into());
    }
    if sv.paths_out == 0 {
        err("solver", "paths_out", "must be at least 1".into());
    }
    if !(positive(s.tolerances.spectral) && positive(s.tolerances.yaglom)) {
        err("tolerances", "spectral", "tolerances must be positive".into());
    }
    if kind == SolverKind::Fv {
        if sv.particles < 2 {
            err("solver", "particles", format!("must be at least 2, got {}", sv.particles));
        }
        if m.is_diffusion_1d() && !(sv.epsilon > 0.0 && sv.epsilon < 1.0) {
            err("solver", "epsilon", format!("must lie in (0, 1), got {}", sv.epsilon));
        }
        if sv.snapshots == 0 {
            err("solver", "snapshots", "must be at least 1".into());
        }
        if !(sv.t_burnin >= 0.0 && sv.t_avg >= 0.0) {
            err("solver", "t_burnin", "burn-in and averaging times must be nonnegative".into());
        }
        if sv.bins == 0 {
            err("solver", "bins", "must be at least 1".into());
        }
    }
    if kind == SolverKind::Euler {
        if let Model::LotkaVolterra { .. } = m {
            if s.outputs.contains(&OutputKind::Curves) && sv.n_paths < 1000 {
                err("solver", "n_paths", format!("mode curves need at least 1000 paths, got {}", sv.n_paths));
            }
        } else if matches!(sv.init, Some(Init::Vector(_))) {
            err("solver", "init", "one-dimensional models take a scalar start".into());
        }
        if s.outputs.contains(&OutputKind::Qsd) && !(sv.epsilon > 0.0 && sv.epsilon < 1.0) {
            err("solver", "epsilon", format!("must lie in (0, 1), got {}", sv.epsilon));
        }
    }
    if matches!(kind, SolverKind::Spectral | SolverKind::BdAnalytic | SolverKind::Fv) {
        if let Some(Init::Vector(_)) = sv.init {
            err("solver", "init", "chains and one-dimensional diffusions take a scalar start".into());
        }
        let chain = m.is_finite_chain() || matches!(m, Model::BirthDeath { .. });
        if let (true, Some(Init::Scalar(v))) = (chain, &sv.init) {
            if !(*v >= 1.0 && v.fract() == 0.0) {
                err("solver", "init", format!("chain states are integers from 1, got {v}"));
            }
        }
    }
    if matches!(m, Model::BirthDeath { .. }) && sv.n_trunc < 2 {
        err("solver", "n_trunc", "must be at least 2".into());
    }
    if kind == SolverKind::Gw {
        if sv.generations == 0 {
            err("solver", "generations", "must be at least 1".into());
        }
        if let Some(Init::Scalar(v)) = sv.init {
            if !(v >= 1.0 && v.fract() == 0.0) {
                err("solver", "init", format!("initial population is an integer from 1, got {v}"));
            }
        }
    }
    errors
}
