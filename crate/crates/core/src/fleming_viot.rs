//! Fleming-Viot particle approximation of conditioned laws.
//!
//! `N` particles follow the killed dynamics independently. When one is
//! absorbed it jumps onto the position of a uniformly chosen survivor. The
//! empirical measure of the ensemble approximates the law conditioned on
//! survival, and its long-time average approximates the Yaglom limit.
//!
//! Chains run event by event: the ensemble is one big chain whose next event
//! is drawn from a sum tree of per-particle exit rates, reading
//! `rng::stream(seed, 0)`. Diffusions take synchronized Euler steps, particle
//! `i` reading `rng::stream(seed, i)`. Revival choices always read
//! [`REVIVAL_STREAM`].

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};

use crate::birth_death::BirthDeathRates;
use crate::diffusion::Diffusion1d;
use crate::error::{QsdError, Result};
use crate::finite_qsd::SubGenerator;
use crate::rng::{self, Rng, REVIVAL_STREAM};

pub const FV_EVENT_CAP: u64 = 2_000_000_000;
pub const DEFAULT_BINS: usize = 100;

/// Underlying killed process.
#[derive(Debug, Clone)]
pub enum KilledDynamics {
    /// States `0..dim`.
    FiniteChain(SubGenerator),
    /// States `1, 2, ..`; death from 1 kills.
    BdChain(BirthDeathRates),
    /// Killed on leaving `(epsilon, 1/epsilon)`, stepped with Euler step `dt`.
    Diffusion {
        model: Diffusion1d,
        epsilon: f64,
        dt: f64,
    },
}

/// Common starting point of all particles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitState {
    State(u64),
    Point(f64),
}

/// Equal-weight empirical measure. Discrete measures keep integer counts,
/// so the total mass is exactly one.
#[derive(Debug, Clone, PartialEq)]
pub enum EmpiricalMeasure {
    Discrete { counts: BTreeMap<u64, u64>, total: u64 },
    /// Sorted sample.
    Continuous { samples: Vec<f64> },
}

impl EmpiricalMeasure {
    pub fn from_states(states: impl IntoIterator<Item = u64>) -> Self {
        let mut counts = BTreeMap::new();
        let mut total = 0;
        for s in states {
            *counts.entry(s).or_insert(0) += 1;
            total += 1;
        }
        EmpiricalMeasure::Discrete { counts, total }
    }

    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        EmpiricalMeasure::Continuous { samples }
    }

    pub fn len(&self) -> u64 {
        match self {
            EmpiricalMeasure::Discrete { total, .. } => *total,
            EmpiricalMeasure::Continuous { samples } => samples.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weight of a discrete state.
    pub fn mass(&self, state: u64) -> f64 {
        match self {
            EmpiricalMeasure::Discrete { counts, total } => {
                counts.get(&state).copied().unwrap_or(0) as f64 / *total as f64
            }
            EmpiricalMeasure::Continuous { .. } => 0.0,
        }
    }

    /// Weights of states `offset .. offset + len`.
    pub fn to_dense(&self, offset: u64, len: usize) -> Vec<f64> {
        (0..len as u64).map(|i| self.mass(offset + i)).collect()
    }

    /// Sorted `(point, weight)` atoms.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            EmpiricalMeasure::Discrete { counts, total } => {
                counts.iter().map(|(s, c)| (*s as f64, *c as f64 / *total as f64)).collect()
            }
            EmpiricalMeasure::Continuous { samples } => {
                let w = 1.0 / samples.len() as f64;
                samples.iter().map(|x| (*x, w)).collect()
            }
        }
    }

    /// Smallest atom with cumulative weight `>= p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let atoms = self.atoms();
        let mut acc = 0.0;
        for (x, w) in &atoms {
            acc += w;
            if acc >= p - 1e-12 {
                return *x;
            }
        }
        atoms.last().map(|a| a.0).unwrap_or(f64::NAN)
    }

    pub fn mean(&self) -> f64 {
        self.atoms().iter().map(|(x, w)| x * w).sum()
    }

    /// `DEFAULT_BINS`-style histogram over the occupied range.
    pub fn histogram(&self, bins: usize) -> Histogram {
        let atoms = self.atoms();
        let lo = atoms.first().map(|a| a.0).unwrap_or(0.0);
        let hi = atoms.last().map(|a| a.0).unwrap_or(1.0);
        Histogram::from_atoms(&atoms, &uniform_edges(lo, hi, bins))
    }

    /// Equal-weight pooling of several measures of the same kind.
    pub fn pool(parts: &[EmpiricalMeasure]) -> Result<Self> {
        match parts.first() {
            None => Err(QsdError::InvalidInput("nothing to pool".into())),
            Some(EmpiricalMeasure::Discrete { .. }) => {
                let mut counts = BTreeMap::new();
                let mut total = 0;
                for p in parts {
                    match p {
                        EmpiricalMeasure::Discrete { counts: c, total: t } => {
                            for (s, n) in c {
                                *counts.entry(*s).or_insert(0) += n;
                            }
                            total += t;
                        }
                        _ => return Err(QsdError::Mismatch("cannot pool discrete and continuous".into())),
                    }
                }
                Ok(EmpiricalMeasure::Discrete { counts, total })
            }
            Some(EmpiricalMeasure::Continuous { .. }) => {
                let mut all = Vec::new();
                for p in parts {
                    match p {
                        EmpiricalMeasure::Continuous { samples } => all.extend_from_slice(samples),
                        _ => return Err(QsdError::Mismatch("cannot pool discrete and continuous".into())),
                    }
                }
                Ok(EmpiricalMeasure::from_samples(all))
            }
        }
    }
}

fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let bins = bins.max(1);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let w = (hi - lo) / bins as f64;
    let mut e: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * w).collect();
    e[bins] = hi;
    e
}

/// Bin masses; the last bin is closed on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Histogram {
    fn from_atoms(atoms: &[(f64, f64)], edges: &[f64]) -> Self {
        let nb = edges.len() - 1;
        let mut weights = vec![0.0; nb];
        for (x, w) in atoms {
            if *x < edges[0] || *x > edges[nb] {
                continue;
            }
            let k = edges.partition_point(|e| e <= x).clamp(1, nb) - 1;
            weights[k] += w;
        }
        Histogram {
            edges: edges.to_vec(),
            weights,
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Bin weight divided by bin width.
    pub fn densities(&self) -> Vec<f64> {
        self.edges.windows(2).zip(&self.weights).map(|(e, w)| w / (e[1] - e[0])).collect()
    }

    /// Center of the heaviest bin.
    pub fn peak(&self) -> f64 {
        let d = self.densities();
        let (k, _) = d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.centers()[k]
    }
}

/// What an empirical measure is compared with.
pub enum Reference<'a> {
    Measure(&'a EmpiricalMeasure),
    /// `weights[i]` sits on state `offset + i`.
    Probabilities { weights: &'a [f64], offset: u64 },
    /// A distribution function on the real line.
    Cdf(&'a dyn Fn(f64) -> f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    /// Total variation on a discrete space.
    Tv,
    /// `sum |a(bin) - b(bin)|` over bins, plus reference mass outside them.
    /// Default bins: `DEFAULT_BINS` uniform bins over the occupied range.
    L1Hist(Option<Vec<f64>>),
    /// Kolmogorov-Smirnov.
    Ks,
}

pub fn distance(a: &EmpiricalMeasure, b: Reference<'_>, metric: &Metric) -> Result<f64> {
    match metric {
        Metric::Tv => {
            let EmpiricalMeasure::Discrete { counts, .. } = a else {
                return Err(QsdError::Mismatch("total variation needs discrete measures".into()));
            };
            let mut other: BTreeMap<u64, f64> = BTreeMap::new();
            match b {
                Reference::Measure(m @ EmpiricalMeasure::Discrete { counts: cb, .. }) => {
                    for s in cb.keys() {
                        other.insert(*s, m.mass(*s));
                    }
                }
                Reference::Probabilities { weights, offset } => {
                    for (i, w) in weights.iter().enumerate() {
                        if *w != 0.0 {
                            other.insert(offset + i as u64, *w);
                        }
                    }
                }
                _ => return Err(QsdError::Mismatch("total variation needs a discrete reference".into())),
            }
            let mut s = 0.0;
            for k in counts.keys() {
                s += (a.mass(*k) - other.get(k).copied().unwrap_or(0.0)).abs();
            }
            for (k, w) in &other {
                if !counts.contains_key(k) {
                    s += w.abs();
                }
            }
            Ok(0.5 * s)
        }
        Metric::L1Hist(edges) => {
            let atoms_a = a.atoms();
            let atoms_b = match &b {
                Reference::Measure(m) => Some(m.atoms()),
                Reference::Probabilities { weights, offset } => Some(
                    weights
                        .iter()
                        .enumerate()
                        .map(|(i, w)| ((*offset + i as u64) as f64, *w))
                        .collect(),
                ),
                Reference::Cdf(_) => None,
            };
            let edges = match edges {
                Some(e) => {
                    if e.len() < 2 || e.windows(2).any(|w| !(w[1] > w[0])) {
                        return Err(QsdError::Mismatch("bin edges must be strictly increasing".into()));
                    }
                    e.clone()
                }
                None => {
                    let mut lo = atoms_a.first().map(|x| x.0).unwrap_or(0.0);
                    let mut hi = atoms_a.last().map(|x| x.0).unwrap_or(1.0);
                    if let Some(ab) = &atoms_b {
                        for (x, w) in ab {
                            if *w > 0.0 {
                                lo = lo.min(*x);
                                hi = hi.max(*x);
                            }
                        }
                    }
                    uniform_edges(lo, hi, DEFAULT_BINS)
                }
            };
            let ha = Histogram::from_atoms(&atoms_a, &edges);
            let wb: Vec<f64> = match (&b, &atoms_b) {
                (Reference::Cdf(f), _) => edges.windows(2).map(|e| f(e[1]) - f(e[0])).collect(),
                (_, Some(ab)) => Histogram::from_atoms(ab, &edges).weights,
                _ => unreachable!(),
            };
            let total_b: f64 = match (&b, &atoms_b) {
                (Reference::Cdf(_), _) => 1.0,
                (_, Some(ab)) => ab.iter().map(|x| x.1).sum(),
                _ => unreachable!(),
            };
            let inside_a: f64 = ha.weights.iter().sum();
            let inside_b: f64 = wb.iter().sum();
            let core: f64 = ha.weights.iter().zip(&wb).map(|(x, y)| (x - y).abs()).sum();
            Ok(core + (1.0 - inside_a).max(0.0) + (total_b - inside_b).max(0.0))
        }
        Metric::Ks => {
            let atoms_a = a.atoms();
            match b {
                Reference::Cdf(f) => {
                    let mut fa = 0.0;
                    let mut d: f64 = 0.0;
                    let mut i = 0;
                    while i < atoms_a.len() {
                        let x = atoms_a[i].0;
                        let fb = f(x);
                        d = d.max((fa - fb).abs());
                        while i < atoms_a.len() && atoms_a[i].0 == x {
                            fa += atoms_a[i].1;
                            i += 1;
                        }
                        d = d.max((fa - fb).abs());
                    }
                    Ok(d)
                }
                other => {
                    let atoms_b = match other {
                        Reference::Measure(m) => m.atoms(),
                        Reference::Probabilities { weights, offset } => weights
                            .iter()
                            .enumerate()
                            .map(|(i, w)| ((offset + i as u64) as f64, *w))
                            .collect(),
                        Reference::Cdf(_) => unreachable!(),
                    };
                    Ok(ks_atoms(&atoms_a, &atoms_b))
                }
            }
        }
    }
}

fn ks_atoms(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut d: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => break,
        };
        while i < a.len() && a[i].0 == x {
            fa += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 == x {
            fb += b[j].1;
            j += 1;
        }
        d = d.max((fa - fb).abs());
    }
    d
}

/// Synchronized Euler ensemble with random-order revivals.
pub(crate) struct EulerEnsemble<S> {
    pub(crate) states: Vec<S>,
    rngs: Vec<Rng>,
    revival: Rng,
    pub(crate) jump_count: u64,
    pub(crate) clock: f64,
}

impl<S: Clone> EulerEnsemble<S> {
    pub(crate) fn new(init: S, n: usize, seed: u64) -> Self {
        EulerEnsemble {
            states: vec![init; n],
            rngs: (0..n as u64).map(|i| rng::stream(seed, i)).collect(),
            revival: rng::stream(seed, REVIVAL_STREAM),
            jump_count: 0,
            clock: 0.0,
        }
    }

    /// Advances every particle by `h`; `step` returns true on absorption.
    /// Absorbed particles are revived in uniformly random order, each onto a
    /// particle alive at that moment (already revived ones included).
    pub(crate) fn advance(&mut self, h: f64, step: impl Fn(&mut S, f64, &mut Rng) -> bool) -> Result<()> {
        let mut killed = Vec::new();
        for (i, (s, r)) in self.states.iter_mut().zip(self.rngs.iter_mut()).enumerate() {
            if step(s, h, r) {
                killed.push(i);
            }
        }
        self.clock += h;
        if killed.is_empty() {
            return Ok(());
        }
        let n = self.states.len();
        if killed.len() == n {
            return Err(QsdError::EnsembleCollapse { particles: n, t: self.clock });
        }
        killed.shuffle(&mut self.revival);
        let mut dead = vec![false; n];
        for &i in &killed {
            dead[i] = true;
        }
        let mut alive: Vec<usize> = (0..n).filter(|&i| !dead[i]).collect();
        for i in killed {
            let j = alive[self.revival.random_range(0..alive.len())];
            self.states[i] = self.states[j].clone();
            alive.push(i);
            self.jump_count += 1;
        }
        Ok(())
    }
}

/// Binary tree of partial sums for O(log N) proportional selection.
struct SumTree {
    size: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(values: &[f64]) -> Self {
        let size = values.len().next_power_of_two();
        let mut nodes = vec![0.0; 2 * size];
        nodes[size..size + values.len()].copy_from_slice(values);
        for i in (1..size).rev() {
            nodes[i] = nodes[2 * i] + nodes[2 * i + 1];
        }
        SumTree { size, nodes }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn set(&mut self, i: usize, v: f64) {
        let mut k = self.size + i;
        self.nodes[k] = v;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative interval contains `u` in `[0, total)`.
    fn find(&self, mut u: f64) -> usize {
        let mut k = 1;
        while k < self.size {
            let left = self.nodes[2 * k];
            if u < left || self.nodes[2 * k + 1] == 0.0 {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        k - self.size
    }
}

/// Per-state event tables of a finite chain; target `None` is killing.
struct ChainTable {
    exits: Vec<f64>,
    events: Vec<Vec<(Option<usize>, f64)>>,
}

impl ChainTable {
    fn new(q: &SubGenerator) -> Self {
        let mut exits = Vec::with_capacity(q.dim());
        let mut events = Vec::with_capacity(q.dim());
        for i in 0..q.dim() {
            let mut ev: Vec<(Option<usize>, f64)> = q.jumps_from(i).into_iter().map(|(j, r)| (Some(j), r)).collect();
            if q.killing()[i] > 0.0 {
                ev.push((None, q.killing()[i]));
            }
            exits.push(ev.iter().map(|e| e.1).sum());
            events.push(ev);
        }
        ChainTable { exits, events }
    }
}

enum ChainKind<'a> {
    Finite(ChainTable),
    Bd(&'a BirthDeathRates),
}

impl ChainKind<'_> {
    fn rate(&self, s: u64) -> Result<f64> {
        match self {
            ChainKind::Finite(t) => Ok(t.exits[s as usize]),
            ChainKind::Bd(r) => Ok(r.birth(s as usize)? + r.death(s as usize)?),
        }
    }

    /// Next state, or `None` on killing; `u` is uniform on `[0, rate(s))`.
    fn fire(&self, s: u64, u: f64) -> Result<Option<u64>> {
        match self {
            ChainKind::Finite(t) => {
                let ev = &t.events[s as usize];
                let mut acc = 0.0;
                for (target, r) in ev {
                    acc += r;
                    if u < acc {
                        return Ok(target.map(|j| j as u64));
                    }
                }
                Ok(ev.last().unwrap().0.map(|j| j as u64))
            }
            ChainKind::Bd(r) => {
                let b = r.birth(s as usize)?;
                Ok(if u < b {
                    Some(s + 1)
                } else if s == 1 {
                    None
                } else {
                    Some(s - 1)
                })
            }
        }
    }
}

/// Snapshots of one run.
#[derive(Debug, Clone)]
pub struct FvRun {
    pub times: Vec<f64>,
    pub snapshots: Vec<EmpiricalMeasure>,
    /// Number of revivals.
    pub jump_count: u64,
    pub wall_time: f64,
}

impl FvRun {
    /// Discrete snapshots as `time,state,weight`; continuous ones as
    /// `time,bin_left,bin_right,weight` with `DEFAULT_BINS` bins.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        match self.snapshots.first() {
            Some(EmpiricalMeasure::Continuous { .. }) => w.write_record(["time", "bin_left", "bin_right", "weight"])?,
            _ => w.write_record(["time", "state", "weight"])?,
        }
        for (t, m) in self.times.iter().zip(&self.snapshots) {
            write_measure_rows(&mut w, &t.to_string(), m)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn write_measure_rows<W: std::io::Write>(w: &mut csv::Writer<W>, lead: &str, m: &EmpiricalMeasure) -> Result<()> {
    match m {
        EmpiricalMeasure::Discrete { counts, .. } => {
            for s in counts.keys() {
                w.write_record([lead.to_string(), s.to_string(), m.mass(*s).to_string()])?;
            }
        }
        EmpiricalMeasure::Continuous { .. } => {
            let h = m.histogram(DEFAULT_BINS);
            for (e, wt) in h.edges.windows(2).zip(&h.weights) {
                w.write_record([lead.to_string(), e[0].to_string(), e[1].to_string(), wt.to_string()])?;
            }
        }
    }
    Ok(())
}

fn check_record(record: &[f64], t_end: f64) -> Result<()> {
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(QsdError::OutOfRange {
            param: "t_end",
            value: t_end,
            range: "[0, inf)".into(),
        });
    }
    if record.windows(2).any(|w| w[1] < w[0]) || record.iter().any(|t| !(*t >= 0.0 && *t <= t_end)) {
        return Err(QsdError::InvalidInput(format!(
            "record times must be sorted within [0, {t_end}]"
        )));
    }
    Ok(())
}

fn run_chain(kind: ChainKind<'_>, n: usize, init: u64, t_end: f64, record: &[f64], seed: u64) -> Result<(Vec<EmpiricalMeasure>, u64)> {
    let mut pos = vec![init; n];
    let r0 = kind.rate(init)?;
    let mut tree = SumTree::new(&vec![r0; n]);
    let mut rng = rng::stream(seed, 0);
    let mut revival = rng::stream(seed, REVIVAL_STREAM);
    let mut snapshots = Vec::with_capacity(record.len());
    let mut next_record = 0;
    let mut t = 0.0;
    let mut events = 0u64;
    let mut jumps = 0u64;
    loop {
        let total = tree.total();
        let wait: f64 = rng.sample(Exp1);
        let t_next = if total > 0.0 { t + wait / total } else { f64::INFINITY };
        while next_record < record.len() && record[next_record] < t_next {
            snapshots.push(EmpiricalMeasure::from_states(pos.iter().copied()));
            next_record += 1;
        }
        if t_next > t_end {
            break;
        }
        t = t_next;
        events += 1;
        if events > FV_EVENT_CAP {
            return Err(QsdError::StepCap { cap: FV_EVENT_CAP });
        }
        let u = rng.random::<f64>() * total;
        let i = tree.find(u).min(n - 1);
        let s = pos[i];
        let rate_s = kind.rate(s)?;
        let v = rng.random::<f64>() * rate_s;
        match kind.fire(s, v)? {
            Some(next) => pos[i] = next,
            None => {
                // Uniform among the other n - 1 particles.
                let mut j = revival.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                pos[i] = pos[j];
                jumps += 1;
            }
        }
        tree.set(i, kind.rate(pos[i])?);
    }
    while snapshots.len() < record.len() {
        snapshots.push(EmpiricalMeasure::from_states(pos.iter().copied()));
    }
    Ok((snapshots, jumps))
}

#[allow(clippy::too_many_arguments)]
fn run_diffusion(model: &Diffusion1d, epsilon: f64, dt: f64, n: usize, init: f64, t_end: f64, record: &[f64], seed: u64) -> Result<(Vec<EmpiricalMeasure>, u64)> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(QsdError::OutOfRange {
            param: "epsilon",
            value: epsilon,
            range: "(0, 1)".into(),
        });
    }
    if !(dt > 0.0) {
        return Err(QsdError::OutOfRange {
            param: "dt",
            value: dt,
            range: "(0, inf)".into(),
        });
    }
    let upper = 1.0 / epsilon;
    if !(init > epsilon && init < upper) {
        return Err(QsdError::OutOfRange {
            param: "init",
            value: init,
            range: format!("({epsilon}, {upper})"),
        });
    }
    let steps = (t_end / dt).round() as usize;
    let record_steps: Vec<usize> = record.iter().map(|t| ((t / dt).round() as usize).min(steps)).collect();
    let mut ens = EulerEnsemble::new(init, n, seed);
    let mut snapshots = Vec::with_capacity(record.len());
    let mut next = 0;
    let step = |x: &mut f64, h: f64, r: &mut Rng| {
        let xi: f64 = r.sample(StandardNormal);
        *x = model.step(*x, h, xi);
        *x <= epsilon || *x >= upper
    };
    for k in 0..=steps {
        if k > 0 {
            ens.advance(dt, step)?;
        }
        while next < record_steps.len() && record_steps[next] == k {
            snapshots.push(EmpiricalMeasure::from_samples(ens.states.clone()));
            next += 1;
        }
    }
    Ok((snapshots, ens.jump_count))
}

/// Runs `n` particles from `init` up to `t_end`, recording the empirical
/// measure at each time in `record`.
pub fn fv_run(dynamics: &KilledDynamics, n: usize, init: InitState, t_end: f64, record: &[f64], seed: u64) -> Result<FvRun> {
    if n < 2 {
        return Err(QsdError::OutOfRange {
            param: "N",
            value: n as f64,
            range: "[2, inf)".into(),
        });
    }
    check_record(record, t_end)?;
    let start = Instant::now();
    let (snapshots, jump_count) = match (dynamics, init) {
        (KilledDynamics::FiniteChain(q), InitState::State(s)) => {
            if s as usize >= q.dim() {
                return Err(QsdError::InvalidInput(format!("state {s} outside 0..{}", q.dim())));
            }
            run_chain(ChainKind::Finite(ChainTable::new(q)), n, s, t_end, record, seed)?
        }
        (KilledDynamics::BdChain(r), InitState::State(s)) => {
            if s == 0 {
                return Err(QsdError::InvalidInput("birth-death particles start at a state >= 1".into()));
            }
            run_chain(ChainKind::Bd(r), n, s, t_end, record, seed)?
        }
        (KilledDynamics::Diffusion { model, epsilon, dt }, InitState::Point(x)) => {
            run_diffusion(model, *epsilon, *dt, n, x, t_end, record, seed)?
        }
        _ => return Err(QsdError::InvalidInput("initial state does not match the dynamics".into())),
    };
    Ok(FvRun {
        times: record.to_vec(),
        snapshots,
        jump_count,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Time-averaged ensemble measure.
#[derive(Debug, Clone)]
pub struct YaglomEstimate {
    pub measure: EmpiricalMeasure,
    pub snapshot_times: Vec<f64>,
    /// Distance between the averages over the first and second halves of the
    /// snapshots (total variation for chains, Kolmogorov-Smirnov for
    /// diffusions). A large value means the burn-in was too short.
    pub half_split: f64,
    pub jump_count: u64,
    pub wall_time: f64,
}

/// Averages the ensemble over `n_snapshots` equally spaced times in
/// `[t_burnin, t_burnin + t_avg]`.
#[allow(clippy::too_many_arguments)]
pub fn fv_yaglom_estimate(
    dynamics: &KilledDynamics,
    n: usize,
    init: InitState,
    t_burnin: f64,
    t_avg: f64,
    n_snapshots: usize,
    seed: u64,
) -> Result<YaglomEstimate> {
    if n_snapshots == 0 || !(t_avg >= 0.0) || !(t_burnin >= 0.0) {
        return Err(QsdError::InvalidInput("need n_snapshots >= 1, t_burnin >= 0, t_avg >= 0".into()));
    }
    let times: Vec<f64> = if n_snapshots == 1 {
        vec![t_burnin]
    } else {
        (0..n_snapshots)
            .map(|k| t_burnin + t_avg * k as f64 / (n_snapshots - 1) as f64)
            .collect()
    };
    let t_end = *times.last().unwrap();
    let run = fv_run(dynamics, n, init, t_end, &times, seed)?;
    let measure = EmpiricalMeasure::pool(&run.snapshots)?;
    let half_split = if n_snapshots >= 2 {
        let (a, b) = run.snapshots.split_at(n_snapshots / 2);
        let (a, b) = (EmpiricalMeasure::pool(a)?, EmpiricalMeasure::pool(b)?);
        let metric = match a {
            EmpiricalMeasure::Discrete { .. } => Metric::Tv,
            EmpiricalMeasure::Continuous { .. } => Metric::Ks,
        };
        distance(&a, Reference::Measure(&b), &metric)?
    } else {
        f64::NAN
    };
    Ok(YaglomEstimate {
        measure,
        snapshot_times: times,
        half_split,
        jump_count: run.jump_count,
        wall_time: run.wall_time,
    })
}

/// `mu_1` times the time-averaged ensemble mass at state 1, over the second
/// half of `[0, t_end]`, starting all particles at 1.
pub fn xi1_from_fv(rates: &BirthDeathRates, n: usize, t_end: f64, seed: u64) -> Result<f64> {
    let est = fv_yaglom_estimate(
        &KilledDynamics::BdChain(rates.clone()),
        n,
        InitState::State(1),
        t_end / 2.0,
        t_end / 2.0,
        51,
        seed,
    )?;
    Ok(rates.death(1)? * est.measure.mass(1))
}
