//! Executes a validated scenario and writes its CSV artifacts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qsd_core::birth_death::{
    classify_qsd, qsd_family_point, simulate_bd_path, truncated_generator, truncated_qsd, BirthDeathRates,
};
use qsd_core::branching::{conditioned_pmf, simulate_gw, yaglom_iteration, Offspring, YaglomOptions};
use qsd_core::diffusion::{
    default_dt, discretize_generator, feller_to_kolmogorov, mode_probabilities, pattern_label, simulate_diffusion,
    simulate_lv, ContinuousEigenResult, Diffusion1d, FellerParams, KolmogorovModel, LvParams, ModeSampler,
};
use qsd_core::finite_qsd::{
    conditioned_on_grid, extinction_rate_curve, linear_bd_chain, read_generator_csv, solve_qsd_spectral,
    sup_distance, tv_distance, uniform_killing_walk, QsdResult, SubGenerator,
};
use qsd_core::fleming_viot::{distance, fv_run, EmpiricalMeasure, InitState, KilledDynamics, Metric, Reference};
use qsd_core::rng::path_seed;
use qsd_core::{ProbVector, QsdError};
use serde_json::{Map, Value};

use crate::config::{find_line, Init, Model, OutputKind, RatesSpec, Sampler, Scenario, SolverKind, Source};
use crate::error::{CliError, ConfigError};

/// Model objects built before anything is written.
pub enum Built {
    Chain(SubGenerator),
    Bd(BirthDeathRates),
    Gw(Offspring),
    Feller(FellerParams),
    KolmogorovFeller(KolmogorovModel),
    WrightFisher,
    Lv(LvParams),
}

/// Builds the model, reporting bad parameters as configuration errors.
pub fn build(s: &Scenario, src: &Source) -> Result<Built, CliError> {
    let as_config = |e: QsdError| -> CliError {
        let (key, msg) = match &e {
            QsdError::OutOfRange { param, .. } => (param.to_string(), e.to_string()),
            _ => (String::new(), e.to_string()),
        };
        let line = find_line(&src.text, "model", &key).or_else(|| find_line(&src.text, "model", ""));
        ConfigError::new(&src.label, msg).field("model").line(line).into()
    };
    let built = match &s.model {
        Model::Walk { n, d } => Built::Chain(uniform_killing_walk(*n, *d).map_err(as_config)?),
        Model::LinearChain { n, lambda, mu } => Built::Chain(linear_bd_chain(*n, *lambda, *mu).map_err(as_config)?),
        Model::GeneratorCsv { path } => Built::Chain(read_generator_csv(src.base.join(path)).map_err(as_config)?),
        Model::BirthDeath { rates } => Built::Bd(
            match rates {
                RatesSpec::Linear { lambda, mu } => BirthDeathRates::linear(*lambda, *mu),
                RatesSpec::Logistic { lambda, mu, c } => BirthDeathRates::logistic(*lambda, *mu, *c),
                RatesSpec::Table { path } => BirthDeathRates::read_table_csv(src.base.join(path)),
            }
            .map_err(as_config)?,
        ),
        Model::GaltonWatson { pmf } => Built::Gw(Offspring::new(pmf.clone()).map_err(as_config)?),
        Model::Feller { r, c, gamma } => Built::Feller(FellerParams::new(*r, *c, *gamma).map_err(as_config)?),
        Model::KolmogorovFeller { r, c } => Built::KolmogorovFeller(
            FellerParams::new(*r, *c, 0.5)
                .and_then(|p| feller_to_kolmogorov(&p))
                .map_err(as_config)?,
        ),
        Model::WrightFisher => Built::WrightFisher,
        Model::LotkaVolterra { gamma, r, c } => {
            Built::Lv(LvParams::new(gamma.clone(), r.clone(), c.clone()).map_err(as_config)?)
        }
    };
    Ok(built)
}

#[derive(Default)]
pub struct Report {
    pub results: Map<String, Value>,
    pub warnings: Vec<String>,
    pub wall_times: Map<String, Value>,
    pub files: Vec<String>,
}

struct Ctx<'a> {
    s: &'a Scenario,
    out: &'a Path,
    report: Report,
}

impl Ctx<'_> {
    fn wants(&self, o: OutputKind) -> bool {
        self.s.outputs.contains(&o)
    }

    fn file(&mut self, o: OutputKind) -> PathBuf {
        let name = format!("{}.csv", o.as_str());
        self.report.files.push(name.clone());
        self.out.join(name)
    }

    fn put(&mut self, key: &str, v: impl Into<Value>) {
        self.report.results.insert(key.to_string(), v.into());
    }

    fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let v = f();
        self.report
            .wall_times
            .insert(label.to_string(), start.elapsed().as_secs_f64().into());
        v
    }

    fn seed(&self) -> u64 {
        // Validation guarantees a seed wherever randomness is used.
        self.s.seed.unwrap_or(0)
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn grid(t_max: f64, points: usize) -> Vec<f64> {
    (0..points).map(|k| t_max * k as f64 / (points - 1) as f64).collect()
}

fn scalar_init(s: &Scenario, default: f64) -> f64 {
    match s.solver.init {
        Some(Init::Scalar(v)) => v,
        _ => default,
    }
}

pub fn execute(s: &Scenario, built: Built, out: &Path) -> Result<Report, CliError> {
    let mut ctx = Ctx {
        s,
        out,
        report: Report::default(),
    };
    match (s.solver.kind, built) {
        (SolverKind::Spectral, Built::Chain(q)) => spectral(&mut ctx, q)?,
        (SolverKind::Spectral, Built::Bd(rates)) => {
            let q = truncated_generator(&rates, s.solver.n_trunc)?;
            spectral(&mut ctx, q)?
        }
        (SolverKind::BdAnalytic, Built::Bd(rates)) => bd_analytic(&mut ctx, &rates)?,
        (SolverKind::Fv, built) => fleming_viot(&mut ctx, built)?,
        (SolverKind::Euler, Built::Lv(p)) => euler_lv(&mut ctx, &p)?,
        (SolverKind::Euler, built) => euler_1d(&mut ctx, built)?,
        (SolverKind::Gw, Built::Gw(off)) => galton_watson(&mut ctx, &off)?,
        _ => unreachable!("solver and model were validated together"),
    }
    Ok(ctx.report)
}

fn put_spectral(ctx: &mut Ctx, q: &SubGenerator, r: &QsdResult) {
    ctx.put("states", q.dim());
    ctx.put("theta", r.theta);
    ctx.put("chi", r.chi);
    ctx.put("gap", r.gap);
    ctx.put("residual", r.residual);
}

fn spectral(ctx: &mut Ctx, q: SubGenerator) -> Result<(), CliError> {
    let tol = ctx.s.tolerances.spectral;
    let r = ctx.timed("spectral", || solve_qsd_spectral(&q, tol))?;
    put_spectral(ctx, &q, &r);
    chain_outputs(ctx, &q, &r, None)
}

/// QSD table plus survival and distance curves of a finite chain started at `solver.init`.
fn chain_outputs(ctx: &mut Ctx, q: &SubGenerator, r: &QsdResult, family: Option<&[f64]>) -> Result<(), CliError> {
    let start = scalar_init(ctx.s, 1.0) as usize;
    if ctx.wants(OutputKind::Qsd) {
        let path = ctx.file(OutputKind::Qsd);
        let mut header = vec!["state", "alpha", "pi"];
        if family.is_some() {
            header.push("family_alpha");
        }
        let rows = (0..q.dim()).map(|i| {
            let mut row = vec![(i + 1).to_string(), r.alpha[i].to_string(), r.pi[i].to_string()];
            if let Some(f) = family {
                row.push(f.get(i).copied().unwrap_or(0.0).to_string());
            }
            row
        });
        write_rows(&path, &header, rows)?;
    }
    if !(ctx.wants(OutputKind::Curves) || ctx.wants(OutputKind::Distances)) {
        return Ok(());
    }
    let init = ProbVector::dirac(q.dim(), start - 1)?;
    let ts = grid(ctx.s.solver.t_max, ctx.s.solver.points);
    let laws = ctx.timed("propagation", || conditioned_on_grid(q, &init, &ts))?;
    if ctx.wants(OutputKind::Curves) {
        let rates = extinction_rate_curve(q, &init, &ts)?;
        let path = ctx.file(OutputKind::Curves);
        let rows = ts.iter().zip(&laws).zip(&rates).map(|((t, c), h)| {
            vec![t.to_string(), c.log_survival.exp().to_string(), h.to_string()]
        });
        write_rows(&path, &["t", "survival", "extinction_rate"], rows)?;
    }
    if ctx.wants(OutputKind::Distances) {
        let path = ctx.file(OutputKind::Distances);
        let rows = ts.iter().zip(&laws).map(|(t, c)| {
            let d = c.distribution.as_slice();
            vec![
                t.to_string(),
                (0.0 - c.log_survival).to_string(),
                sup_distance(d, &r.alpha).to_string(),
                tv_distance(d, &r.alpha).to_string(),
            ]
        });
        write_rows(&path, &["t", "minus_log_survival", "sup_distance", "tv_distance"], rows)?;
    }
    Ok(())
}

fn bd_analytic(ctx: &mut Ctx, rates: &BirthDeathRates) -> Result<(), CliError> {
    let sv = &ctx.s.solver;
    let (n_max, n_trunc, family_x) = (sv.n_max, sv.n_trunc, sv.family_x);
    let class = ctx.timed("classification", || classify_qsd(rates, n_max))?;
    ctx.put("regime", format!("{:?}", class.qsd_regime));
    ctx.put("xi1", class.xi1);
    ctx.put("nonexplosion", format!("{:?}", class.nonexplosion));
    ctx.put("extinction_almost_sure", format!("{:?}", class.extinction_as));
    ctx.put("series_s", format!("{:?}", class.series_s));
    let needs_qsd = [OutputKind::Qsd, OutputKind::Curves, OutputKind::Distances]
        .iter()
        .any(|o| ctx.wants(*o));
    if needs_qsd {
        let t = ctx.timed("truncated_solve", || truncated_qsd(rates, n_trunc))?;
        ctx.put("n_trunc", n_trunc);
        ctx.put("theta", t.result.theta);
        ctx.put("gap", t.result.gap);
        ctx.put("residual", t.result.residual);
        if let Some(sens) = t.sensitivity {
            ctx.put("truncation_sensitivity", sens);
        }
        let mode = t.result.alpha.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i + 1);
        ctx.put("mode", mode.unwrap_or(0));
        ctx.report.warnings.extend(t.warnings.iter().cloned());
        let family = match family_x {
            Some(x) => {
                let fp = qsd_family_point(rates, x, n_trunc)?;
                ctx.put("family_x", x);
                Some(fp.alpha)
            }
            None => None,
        };
        let q = truncated_generator(rates, n_trunc)?;
        chain_outputs(ctx, &q, &t.result, family.as_deref())?;
    }
    if ctx.wants(OutputKind::Paths) {
        let (seed, start, t_max, count) = (
            ctx.seed(),
            scalar_init(ctx.s, 1.0) as u64,
            ctx.s.solver.t_max,
            ctx.s.solver.paths_out,
        );
        let mut rows = Vec::new();
        for k in 0..count {
            let p = simulate_bd_path(rates, start, t_max, path_seed(seed, k as u64))?;
            for (t, z) in p.times.iter().zip(&p.states) {
                rows.push(vec![k.to_string(), t.to_string(), z.to_string()]);
            }
        }
        let path = ctx.file(OutputKind::Paths);
        write_rows(&path, &["path", "t", "state"], rows)?;
    }
    Ok(())
}

enum Target {
    /// `weights[i]` sits on particle state `offset + i`; rows are labelled `state + label_shift`.
    Discrete { weights: Vec<f64>, offset: u64, label_shift: u64 },
    Cdf(Box<dyn Fn(f64) -> f64>),
}

/// FD solve for the Feller model in `X = 2 sqrt(Z / unit)`; `epsilon` is the
/// boundary in `Z` and maps to `2 sqrt(epsilon / unit)`.
fn feller_reference(p: &FellerParams, epsilon: f64, n_grid: usize, x_max: Option<f64>) -> Result<(ContinuousEigenResult, f64), CliError> {
    let (unit_params, unit) = p.unit_noise();
    let x_eps = 2.0 * (epsilon / unit).sqrt();
    if !(x_eps > 0.0 && x_eps < 1.0) {
        return Err(QsdError::OutOfRange {
            param: "epsilon",
            value: epsilon,
            range: format!("(0, {})", unit / 4.0),
        }
        .into());
    }
    let model = feller_to_kolmogorov(&unit_params)?;
    let (_, eig) = discretize_generator(&model, x_eps, x_max, n_grid)?;
    Ok((eig, unit))
}

fn fleming_viot(ctx: &mut Ctx, built: Built) -> Result<(), CliError> {
    let sv = ctx.s.solver.clone();
    let seed = ctx.seed();
    let dt_or = |d: f64| sv.dt.unwrap_or(d);
    let (dynamics, init, target) = match built {
        Built::Chain(q) => {
            let r = solve_qsd_spectral(&q, ctx.s.tolerances.spectral)?;
            ctx.put("theta", r.theta);
            let start = scalar_init(ctx.s, 1.0) as u64 - 1;
            let target = Target::Discrete {
                weights: r.alpha,
                offset: 0,
                label_shift: 1,
            };
            (KilledDynamics::FiniteChain(q), InitState::State(start), target)
        }
        Built::Bd(rates) => {
            let t = truncated_qsd(&rates, sv.n_trunc)?;
            ctx.put("theta", t.result.theta);
            let start = scalar_init(ctx.s, 1.0) as u64;
            let target = Target::Discrete {
                weights: t.result.alpha,
                offset: 1,
                label_shift: 0,
            };
            (KilledDynamics::BdChain(rates), InitState::State(start), target)
        }
        Built::Feller(p) => {
            let (eig, unit) = feller_reference(&p, sv.epsilon, sv.fd_grid, sv.fd_x_max)?;
            ctx.put("lambda1", eig.lambda1);
            let dynamics = KilledDynamics::Diffusion {
                model: Diffusion1d::Feller(p),
                epsilon: sv.epsilon,
                dt: dt_or(default_dt(p.r)),
            };
            let cdf = move |z: f64| if z <= 0.0 { 0.0 } else { eig.cdf(2.0 * (z / unit).sqrt()) };
            (dynamics, InitState::Point(scalar_init(ctx.s, p.capacity())), Target::Cdf(Box::new(cdf)))
        }
        Built::KolmogorovFeller(model) => {
            let (_, eig) = discretize_generator(&model, sv.epsilon, sv.fd_x_max, sv.fd_grid)?;
            ctx.put("lambda1", eig.lambda1);
            let default_x0 = match model {
                KolmogorovModel::Feller { r, c } => 2.0 * (r / c).sqrt(),
                _ => 1.0,
            };
            let r = match model {
                KolmogorovModel::Feller { r, .. } => r,
                _ => 1.0,
            };
            let dynamics = KilledDynamics::Diffusion {
                model: Diffusion1d::Kolmogorov(model),
                epsilon: sv.epsilon,
                dt: dt_or(default_dt(r)),
            };
            let cdf = move |x: f64| eig.cdf(x);
            (dynamics, InitState::Point(scalar_init(ctx.s, default_x0)), Target::Cdf(Box::new(cdf)))
        }
        Built::WrightFisher => {
            let dynamics = KilledDynamics::Diffusion {
                model: Diffusion1d::WrightFisher,
                epsilon: sv.epsilon,
                dt: dt_or(1e-3),
            };
            let cdf = |x: f64| {
                let x = x.clamp(0.0, 1.0);
                2.0 * x - x * x
            };
            (dynamics, InitState::Point(scalar_init(ctx.s, 0.5)), Target::Cdf(Box::new(cdf)))
        }
        Built::Gw(_) | Built::Lv(_) => unreachable!("validated"),
    };

    let t_end = sv.t_burnin + sv.t_avg;
    let avg_times: Vec<f64> = if sv.snapshots == 1 {
        vec![sv.t_burnin]
    } else {
        (0..sv.snapshots)
            .map(|k| sv.t_burnin + sv.t_avg * k as f64 / (sv.snapshots - 1) as f64)
            .collect()
    };
    let track = ctx.wants(OutputKind::Curves) || ctx.wants(OutputKind::Distances);
    let track_times = if track { grid(t_end, sv.points) } else { Vec::new() };
    let mut record: Vec<f64> = avg_times.iter().chain(&track_times).copied().collect();
    record.sort_by(f64::total_cmp);
    record.dedup();
    let run = ctx.timed("fleming_viot", || fv_run(&dynamics, sv.particles, init, t_end, &record, seed))?;
    let index: HashMap<u64, usize> = record.iter().enumerate().map(|(i, t)| (t.to_bits(), i)).collect();
    let snap = |t: &f64| &run.snapshots[index[&t.to_bits()]];
    let averaged: Vec<EmpiricalMeasure> = avg_times.iter().map(|t| snap(t).clone()).collect();
    let pooled = EmpiricalMeasure::pool(&averaged)?;
    ctx.put("particles", sv.particles);
    ctx.put("revivals", run.jump_count);
    ctx.put("mean", pooled.mean());
    if averaged.len() >= 2 {
        let (a, b) = averaged.split_at(averaged.len() / 2);
        let (a, b) = (EmpiricalMeasure::pool(a)?, EmpiricalMeasure::pool(b)?);
        let metric = match a {
            EmpiricalMeasure::Discrete { .. } => Metric::Tv,
            EmpiricalMeasure::Continuous { .. } => Metric::Ks,
        };
        let split = distance(&a, Reference::Measure(&b), &metric)?;
        ctx.put("half_split", split);
        if split > 0.1 {
            ctx.report
                .warnings
                .push(format!("first and second halves of the average differ by {split:.3}; burn-in may be too short"));
        }
    }

    // Continuous measures share one set of bins so every row is comparable.
    let edges: Vec<f64> = match (&target, &pooled) {
        (Target::Cdf(_), EmpiricalMeasure::Continuous { samples }) => {
            let (lo, hi) = match ctx.s.model {
                Model::WrightFisher => (0.0, 1.0),
                _ => (samples[0], samples[samples.len() - 1]),
            };
            (0..=sv.bins).map(|k| lo + (hi - lo) * k as f64 / sv.bins as f64).collect()
        }
        _ => Vec::new(),
    };
    let measure_distance = |m: &EmpiricalMeasure| -> Result<f64, QsdError> {
        match &target {
            Target::Discrete { weights, offset, .. } => distance(
                m,
                Reference::Probabilities {
                    weights,
                    offset: *offset,
                },
                &Metric::Tv,
            ),
            Target::Cdf(f) => distance(m, Reference::Cdf(f.as_ref()), &Metric::L1Hist(Some(edges.clone()))),
        }
    };
    let d = measure_distance(&pooled)?;
    ctx.put(
        match target {
            Target::Discrete { .. } => "tv_to_reference",
            Target::Cdf(_) => "l1_to_reference",
        },
        d,
    );

    let measure_rows = |lead: Option<f64>, m: &EmpiricalMeasure, with_ref: bool| -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        let head = |row: &mut Vec<String>| {
            if let Some(t) = lead {
                row.push(t.to_string());
            }
        };
        match &target {
            Target::Discrete {
                weights,
                offset,
                label_shift,
            } => {
                let n_ref = weights.len() as u64;
                let mut states: Vec<u64> = (*offset..*offset + n_ref).collect();
                if let EmpiricalMeasure::Discrete { counts, .. } = m {
                    states.extend(counts.keys().filter(|s| **s >= offset + n_ref || **s < *offset));
                }
                states.sort_unstable();
                for s in states {
                    let mass = m.mass(s);
                    let reference = if s >= *offset && s < offset + n_ref {
                        weights[(s - offset) as usize]
                    } else {
                        0.0
                    };
                    if !with_ref && mass == 0.0 {
                        continue;
                    }
                    let mut row = Vec::new();
                    head(&mut row);
                    row.push((s + label_shift).to_string());
                    row.push(mass.to_string());
                    if with_ref {
                        row.push(reference.to_string());
                    }
                    rows.push(row);
                }
            }
            Target::Cdf(f) => {
                let atoms = m.atoms();
                let mut mass = vec![0.0; edges.len() - 1];
                let last = edges.len() - 1;
                for (x, w) in atoms {
                    if x < edges[0] || x > edges[last] {
                        continue;
                    }
                    let k = edges.partition_point(|e| *e <= x).clamp(1, last) - 1;
                    mass[k] += w;
                }
                for (k, e) in edges.windows(2).enumerate() {
                    let mut row = Vec::new();
                    head(&mut row);
                    row.push(e[0].to_string());
                    row.push(e[1].to_string());
                    row.push(mass[k].to_string());
                    if with_ref {
                        row.push((f(e[1]) - f(e[0])).to_string());
                    }
                    rows.push(row);
                }
            }
        }
        rows
    };
    let discrete = matches!(target, Target::Discrete { .. });

    if ctx.wants(OutputKind::Qsd) {
        let path = ctx.file(OutputKind::Qsd);
        let header: &[&str] = if discrete {
            &["state", "weight", "reference"]
        } else {
            &["bin_left", "bin_right", "weight", "reference"]
        };
        write_rows(&path, header, measure_rows(None, &pooled, true))?;
    }
    if ctx.wants(OutputKind::Curves) {
        let path = ctx.file(OutputKind::Curves);
        let header: &[&str] = if discrete {
            &["t", "state", "weight"]
        } else {
            &["t", "bin_left", "bin_right", "weight"]
        };
        let rows = track_times.iter().flat_map(|t| measure_rows(Some(*t), snap(t), false));
        write_rows(&path, header, rows)?;
    }
    if ctx.wants(OutputKind::Distances) {
        let mut rows = Vec::new();
        for t in &track_times {
            rows.push(vec![t.to_string(), measure_distance(snap(t))?.to_string()]);
        }
        let path = ctx.file(OutputKind::Distances);
        let col = if discrete { "tv_distance" } else { "l1_distance" };
        write_rows(&path, &["t", col], rows)?;
    }
    Ok(())
}

fn euler_1d(ctx: &mut Ctx, built: Built) -> Result<(), CliError> {
    let sv = ctx.s.solver.clone();
    let seed = ctx.seed();
    let (model, x0, dt) = match &built {
        Built::Feller(p) => (Diffusion1d::Feller(*p), scalar_init(ctx.s, 1.0), sv.dt.unwrap_or(default_dt(p.r))),
        Built::KolmogorovFeller(m) => {
            let r = match m {
                KolmogorovModel::Feller { r, .. } => *r,
                _ => 1.0,
            };
            (Diffusion1d::Kolmogorov(m.clone()), scalar_init(ctx.s, 2.0), sv.dt.unwrap_or(default_dt(r)))
        }
        Built::WrightFisher => (Diffusion1d::WrightFisher, scalar_init(ctx.s, 0.5), sv.dt.unwrap_or(1e-3)),
        _ => unreachable!("validated"),
    };
    ctx.put("dt", dt);

    if ctx.wants(OutputKind::Qsd) {
        let path = ctx.file(OutputKind::Qsd);
        match &built {
            Built::Feller(p) => {
                let (eig, unit) = ctx.timed("generator_solve", || feller_reference(p, sv.epsilon, sv.fd_grid, sv.fd_x_max))?;
                let (z, dens) = eig.feller_z_density();
                let rows = z
                    .iter()
                    .zip(&dens)
                    .map(|(z, d)| vec![(z * unit).to_string(), (d / unit).to_string()]);
                write_rows(&path, &["z", "density"], rows)?;
                let peak = z.iter().zip(&dens).max_by(|a, b| a.1.total_cmp(b.1)).map(|(z, _)| z * unit);
                ctx.put("lambda1", eig.lambda1);
                ctx.put("lambda2", eig.lambda2);
                ctx.put("peak", peak.unwrap_or(f64::NAN));
            }
            Built::KolmogorovFeller(m) => {
                let (_, eig) = ctx.timed("generator_solve", || discretize_generator(m, sv.epsilon, sv.fd_x_max, sv.fd_grid))?;
                eig.write_csv(&path)?;
                ctx.put("lambda1", eig.lambda1);
                ctx.put("lambda2", eig.lambda2);
                ctx.put("peak", eig.peak());
            }
            _ => unreachable!("validated"),
        }
    }
    if ctx.wants(OutputKind::Paths) {
        let mut rows = Vec::new();
        for k in 0..sv.paths_out {
            let p = simulate_diffusion(&model, x0, dt, sv.t_max, path_seed(seed, k as u64))?;
            let last = p.times.len() - 1;
            for (i, (t, x)) in p.times.iter().zip(&p.values).enumerate() {
                if i % sv.stride == 0 || i == last {
                    rows.push(vec![k.to_string(), t.to_string(), x.to_string()]);
                }
            }
            ctx.report.warnings.extend(p.warnings);
        }
        let path = ctx.file(OutputKind::Paths);
        write_rows(&path, &["path", "t", "x"], rows)?;
    }
    if ctx.wants(OutputKind::Curves) {
        let ts = grid(sv.t_max, sv.points);
        let mut alive = vec![0usize; ts.len()];
        let mut sum = vec![0.0; ts.len()];
        let start = Instant::now();
        for k in 0..sv.n_paths {
            let p = simulate_diffusion(&model, x0, dt, sv.t_max, path_seed(seed, k as u64))?;
            for (i, t) in ts.iter().enumerate() {
                if p.absorbed_at.is_some_and(|a| a <= *t) {
                    continue;
                }
                let j = p.times.partition_point(|s| s <= t).max(1) - 1;
                alive[i] += 1;
                sum[i] += p.values[j];
            }
        }
        ctx.report
            .wall_times
            .insert("monte_carlo".into(), start.elapsed().as_secs_f64().into());
        let n = sv.n_paths as f64;
        let rows = ts.iter().enumerate().map(|(i, t)| {
            let mean = if alive[i] > 0 { sum[i] / alive[i] as f64 } else { f64::NAN };
            vec![t.to_string(), (alive[i] as f64 / n).to_string(), mean.to_string()]
        });
        let path = ctx.file(OutputKind::Curves);
        write_rows(&path, &["t", "survival", "mean_given_alive"], rows)?;
        ctx.put("n_paths", sv.n_paths);
    }
    Ok(())
}

fn euler_lv(ctx: &mut Ctx, p: &LvParams) -> Result<(), CliError> {
    let sv = ctx.s.solver.clone();
    let seed = ctx.seed();
    let z0 = match &sv.init {
        Some(Init::Vector(v)) => v.clone(),
        Some(Init::Scalar(v)) => vec![*v; p.k()],
        None => vec![1.0; p.k()],
    };
    let dt = sv.dt.unwrap_or(1e-3);
    ctx.put("dt", dt);
    if ctx.wants(OutputKind::Paths) {
        let mut rows = Vec::new();
        for k in 0..sv.paths_out {
            let path = simulate_lv(p, &z0, dt, sv.t_max, path_seed(seed, k as u64))?;
            let last = path.times.len() - 1;
            for (i, (t, z)) in path.times.iter().zip(&path.values).enumerate() {
                if i % sv.stride == 0 || i == last {
                    let mut row = vec![k.to_string(), t.to_string()];
                    row.extend(z.iter().map(|v| v.to_string()));
                    rows.push(row);
                }
            }
            ctx.report.warnings.extend(path.warnings);
        }
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((1..=p.k()).map(|i| format!("x{i}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let path = ctx.file(OutputKind::Paths);
        write_rows(&path, &header, rows)?;
    }
    if ctx.wants(OutputKind::Curves) {
        let sampler = match sv.sampler {
            Sampler::Independent => ModeSampler::Independent,
            Sampler::FlemingViot => ModeSampler::FlemingViot,
        };
        let ts = grid(sv.t_max, sv.points);
        let curves = ctx.timed("monte_carlo", || mode_probabilities(p, &z0, dt, &ts, sv.n_paths, seed, sampler))?;
        let last = ts.len() - 1;
        let mut finals = Map::new();
        for (i, m) in curves.patterns.iter().enumerate() {
            finals.insert(pattern_label(*m), curves.frequencies[last][i].into());
        }
        ctx.put("n_paths", sv.n_paths);
        ctx.put("final_mode_probabilities", Value::Object(finals));
        ctx.report.warnings.extend(curves.warnings.iter().cloned());
        let path = ctx.file(OutputKind::Curves);
        curves.write_csv(&path)?;
    }
    Ok(())
}

fn galton_watson(ctx: &mut Ctx, off: &Offspring) -> Result<(), CliError> {
    let sv = ctx.s.solver.clone();
    let z0 = scalar_init(ctx.s, 1.0) as usize;
    let mut initial = vec![0.0; z0];
    initial[z0 - 1] = 1.0;
    let opts = YaglomOptions {
        tol: ctx.s.tolerances.yaglom,
        initial: initial.clone(),
        ..YaglomOptions::default()
    };
    let support_cap = opts.support_cap;
    let y = ctx.timed("yaglom", || yaglom_iteration(off, &opts))?;
    ctx.put("mean_offspring", off.mean());
    ctx.put("generations", y.generations);
    ctx.put("converged", y.converged);
    ctx.put("functional_residual", y.functional_residual());
    if !y.converged {
        ctx.report
            .warnings
            .push(format!("Yaglom iteration stopped after {} generations", y.generations));
    }
    if ctx.wants(OutputKind::Qsd) {
        let path = ctx.file(OutputKind::Qsd);
        let rows = y.pmf.iter().enumerate().map(|(k, p)| vec![(k + 1).to_string(), p.to_string()]);
        write_rows(&path, &["k", "probability"], rows)?;
    }
    if ctx.wants(OutputKind::Curves) {
        let path = ctx.file(OutputKind::Curves);
        let rows = y.s_grid.iter().zip(&y.ghat).map(|(s, g)| vec![s.to_string(), g.to_string()]);
        write_rows(&path, &["s", "ghat"], rows)?;
    }
    if ctx.wants(OutputKind::Distances) {
        let mut rows = Vec::new();
        for n in 1..=sv.generations {
            let mut c = conditioned_pmf(off, &initial, n, support_cap);
            let mut limit = y.pmf.clone();
            let len = c.len().max(limit.len());
            c.resize(len, 0.0);
            limit.resize(len, 0.0);
            rows.push(vec![n.to_string(), tv_distance(&c, &limit).to_string()]);
        }
        let path = ctx.file(OutputKind::Distances);
        write_rows(&path, &["generation", "tv_distance"], rows)?;
    }
    if ctx.wants(OutputKind::Paths) {
        let seed = ctx.seed();
        let mut rows = Vec::new();
        for k in 0..sv.paths_out {
            let sizes = simulate_gw(off, z0 as u64, sv.generations, path_seed(seed, k as u64))?;
            for (g, z) in sizes.iter().enumerate() {
                rows.push(vec![k.to_string(), g.to_string(), z.to_string()]);
            }
        }
        let path = ctx.file(OutputKind::Paths);
        write_rows(&path, &["path", "generation", "size"], rows)?;
    }
    Ok(())
}
