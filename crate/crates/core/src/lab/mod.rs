//! Scenario files, experiment execution, artifacts and the distance cache.
//!
//! A scenario names a frame, solver options, a set of measures and an ordered
//! list of experiments. Every experiment writes `<name>.json` plus CSV
//! artifacts into the output directory; `manifest.json` records input hashes,
//! versions, cache traffic and wall times, and is the only file that changes
//! between identical runs.

pub mod cache;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::displacement::{
    abs_continuity_probe, build_map, geodesic_check, geodesic_split, interpolate, mass_balance, monotonicity_violation,
    Label, MapOptions,
};
use crate::frames::{catalog, ControlFrame, Covector, Point};
use crate::geodesics::{flow_extremal, uniform_grid, HorizontalPath};
use crate::kantorovich::{
    sinkhorn::{solve_sinkhorn, SinkhornOptions}, solve_kantorovich, superdifferential_check, DiscreteMeasure, DistanceTable,
    TransportPlan,
};
use crate::metric::{distance, DistanceOptions};
use crate::regularity::{lipschitz_probe, semiconcavity_probe, BoxRegion, PairRegion, LIPSCHITZ_SCALE};
use crate::singular::{classify, GRAMIAN_TOL};

pub use cache::DistanceCache;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("experiment `{experiment}`, {stage}: {message}")]
    Solver { experiment: String, stage: String, message: String },
}

impl LabError {
    /// 2 for configuration and I/O problems, 3 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Io { .. } => 2,
            LabError::Solver { .. } => 3,
        }
    }
}

fn config(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> LabError {
    let context = context.into();
    move |source| LabError::Io { context, source }
}

fn solver(experiment: &str, stage: &str) -> impl FnOnce(&dyn std::fmt::Display) -> LabError {
    let (experiment, stage) = (experiment.to_string(), stage.to_string());
    move |e| LabError::Solver { experiment, stage, message: e.to_string() }
}

macro_rules! solve {
    ($expr:expr, $exp:expr, $stage:expr) => {
        $expr.map_err(|e| solver($exp, $stage)(&e))?
    };
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// CSV with a header; columns are coordinates, plus an optional `weight`.
    File { path: PathBuf },
    UniformBox { n: usize, lo: Vec<f64>, hi: Vec<f64>, seed: Option<u64> },
    /// Normal samples around `mean`, redrawn until inside `mean ± clip`.
    GaussianClip { n: usize, mean: Vec<f64>, sigma: f64, clip: f64, seed: Option<u64> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    Semiconcavity,
    Lipschitz,
    #[default]
    Both,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtSolver {
    #[default]
    Exact,
    Sinkhorn,
}

fn default_tol() -> f64 {
    1e-3
}
fn default_steps() -> usize {
    1000
}
fn default_samples() -> usize {
    200
}
fn default_t() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}
fn default_mu_grid() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}
fn default_r_cluster() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentKind {
    Geodesic {
        x0: Vec<f64>,
        p0: Vec<f64>,
        #[serde(default = "default_steps")]
        steps: usize,
    },
    Distance {
        x: Vec<f64>,
        y: Vec<f64>,
        expect: Option<f64>,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// All distances from `source` to `target` (to itself when absent).
    DistanceTable { source: String, target: Option<String> },
    /// A path CSV with columns `t, u1..um`, started at `start`.
    Singular { path: PathBuf, start: Vec<f64> },
    /// Random smooth controls from random base points in `[lo, hi]`.
    SingularSweep {
        paths: usize,
        #[serde(default = "default_samples")]
        steps: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default = "one")]
        amplitude: f64,
        expect_singular: Option<bool>,
    },
    Regularity {
        #[serde(default)]
        probe: Probe,
        #[serde(default = "default_samples")]
        samples: usize,
        base_x: Option<Vec<f64>>,
        base_y: Option<Vec<f64>>,
        #[serde(default = "half")]
        radius: f64,
        #[serde(default = "half")]
        d_min: f64,
        #[serde(default = "two")]
        d_max: f64,
        #[serde(default = "default_mu_grid")]
        mu_grid: Vec<f64>,
        lo: Option<Vec<f64>>,
        hi: Option<Vec<f64>>,
        #[serde(default = "lipschitz_scale")]
        scale: f64,
    },
    Ot {
        source: String,
        target: String,
        #[serde(default)]
        solver: OtSolver,
    },
    Transport {
        source: String,
        target: String,
        #[serde(default = "default_t")]
        t: Vec<f64>,
        #[serde(default)]
        geodesic_check: bool,
        #[serde(default = "default_r_cluster")]
        r_cluster: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn two() -> f64 {
    2.0
}
fn lipschitz_scale() -> f64 {
    LIPSCHITZ_SCALE
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Experiment {
    pub name: String,
    /// Failed checks of acceptance experiments make the run fail.
    #[serde(default)]
    pub acceptance: bool,
    #[serde(flatten)]
    pub kind: ExperimentKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub frame: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub distance: DistanceOptions,
    #[serde(default)]
    pub map: MapOptions,
    #[serde(default)]
    pub sinkhorn: SinkhornOptions,
    #[serde(default)]
    pub measures: BTreeMap<String, MeasureSpec>,
    pub experiments: Vec<Experiment>,
    pub output: Option<PathBuf>,
}

/// Solver options that the single-experiment subcommands read from `--config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub distance: DistanceOptions,
    pub map: MapOptions,
    pub sinkhorn: SinkhornOptions,
}

impl SolverConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, LabError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| config(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config(format!("parsing {}: {e}", path.display())))
    }
}

impl Scenario {
    pub fn single(frame: &str, solvers: SolverConfig, measures: BTreeMap<String, MeasureSpec>, experiment: Experiment) -> Self {
        Self {
            frame: frame.to_string(),
            seed: 0,
            distance: solvers.distance,
            map: solvers.map,
            sinkhorn: solvers.sinkhorn,
            measures,
            experiments: vec![experiment],
            output: None,
        }
    }

    fn validate(&self) -> Result<ControlFrame, LabError> {
        let frame = catalog(&self.frame).map_err(|e| config(e.to_string()))?;
        let d = &self.distance;
        let positive = [
            ("distance.endpoint_tol", d.endpoint_tol),
            ("distance.minimizer_rel_tol", d.minimizer_rel_tol),
            ("distance.sep_tol", d.sep_tol),
            ("distance.min_radius", d.min_radius),
            ("distance.direct_endpoint_tol", d.direct_endpoint_tol),
            ("map.static_tol", self.map.static_tol),
            ("map.pairing_tol", self.map.pairing_tol),
            ("sinkhorn.epsilon", self.sinkhorn.epsilon),
            ("sinkhorn.tol", self.sinkhorn.tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be positive, got {v}")));
            }
        }
        if d.steps == 0 || d.search_steps == 0 {
            return Err(config("distance steps must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.experiments {
            if e.name.is_empty() || e.name.contains(['/', '\\']) {
                return Err(config(format!("invalid experiment name `{}`", e.name)));
            }
            if !seen.insert(&e.name) {
                return Err(config(format!("duplicate experiment name `{}`", e.name)));
            }
            let refs: Vec<&String> = match &e.kind {
                ExperimentKind::DistanceTable { source, target } => std::iter::once(source).chain(target).collect(),
                ExperimentKind::Ot { source, target, .. } | ExperimentKind::Transport { source, target, .. } => vec![source, target],
                _ => vec![],
            };
            for r in refs {
                if !self.measures.contains_key(r) {
                    return Err(config(format!("experiment `{}` refers to unknown measure `{r}`", e.name)));
                }
            }
        }
        Ok(frame)
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value: Some(value), threshold: Some(threshold), passed: value <= threshold }
    }

    pub fn above(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value: Some(value), threshold: Some(threshold), passed: value > threshold }
    }

    pub fn holds(name: &str, passed: bool) -> Self {
        Self { name: name.into(), value: None, threshold: None, passed }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub name: String,
    pub kind: String,
    pub acceptance: bool,
    pub checks: Vec<Check>,
    pub data: Value,
}

impl Report {
    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
}

pub struct RunSummary {
    pub out: PathBuf,
    pub reports: Vec<Report>,
    /// `experiment/check` for every failed check of an acceptance experiment.
    pub acceptance_failures: Vec<String>,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.acceptance_failures.is_empty() {
            0
        } else {
            1
        }
    }
}

fn mix_seed(seed: u64, k: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15_u64.wrapping_mul(k as u64 + 1)
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, LabError> {
    let file = fs::File::open(path).map_err(|e| config(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn parse_row(path: &Path, record: &csv::StringRecord) -> Result<Vec<f64>, LabError> {
    record
        .iter()
        .map(|s| s.parse::<f64>().map_err(|_| config(format!("{}: `{s}` is not a number", path.display()))))
        .collect()
}

/// Points from a CSV with a header and one coordinate per column.
pub fn read_points_csv(path: &Path) -> Result<Vec<Point>, LabError> {
    let mut rdr = csv_reader(path)?;
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| config(format!("{}: {e}", path.display())))?;
        points.push(Point::new(&parse_row(path, &rec)?));
    }
    Ok(points)
}

/// A measure from a CSV whose optional `weight` column is normalized to one;
/// without it the atoms are equally weighted.
pub fn read_measure_csv(path: &Path) -> Result<DiscreteMeasure, LabError> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| config(format!("{}: {e}", path.display())))?.clone();
    let weight_col = headers.iter().position(|h| h == "weight");
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| config(format!("{}: {e}", path.display())))?;
        let mut row = parse_row(path, &rec)?;
        if let Some(c) = weight_col {
            weights.push(row.remove(c));
        }
        points.push(Point::new(&row));
    }
    let measure = if weight_col.is_some() {
        let total: f64 = weights.iter().sum();
        DiscreteMeasure::new(points, weights.iter().map(|w| w / total).collect())
    } else {
        DiscreteMeasure::uniform(points)
    };
    measure.map_err(|e| config(format!("{}: {e}", path.display())))
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), LabError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::Io { context: format!("writing {}", path.display()), source: e.into() })?;
    let wrap = |e: csv::Error| LabError::Io { context: format!("writing {}", path.display()), source: e.into() };
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(io(format!("writing {}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), LabError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(io(format!("writing {}", path.display())))
}

fn columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn generate(spec: &MeasureSpec, base: &Path, seed: u64) -> Result<DiscreteMeasure, LabError> {
    match spec {
        MeasureSpec::File { path } => read_measure_csv(&resolve(base, path)),
        MeasureSpec::UniformBox { n, lo, hi, seed: own } => {
            if lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| a >= b) {
                return Err(config("uniform_box needs lo < hi componentwise"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(own.unwrap_or(seed));
            let pts = (0..*n).map(|_| Point::new(&lo.iter().zip(hi).map(|(a, b)| rng.random_range(*a..*b)).collect::<Vec<_>>())).collect();
            DiscreteMeasure::uniform(pts).map_err(|e| config(e.to_string()))
        }
        MeasureSpec::GaussianClip { n, mean, sigma, clip, seed: own } => {
            let normal = Normal::new(0.0, *sigma).map_err(|e| config(format!("gaussian_clip: {e}")))?;
            if !(*clip > 0.0) {
                return Err(config("gaussian_clip needs clip > 0"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(own.unwrap_or(seed));
            let pts = (0..*n)
                .map(|_| {
                    let coords = mean
                        .iter()
                        .map(|m| loop {
                            let z: f64 = normal.sample(&mut rng);
                            if z.abs() <= *clip {
                                break m + z;
                            }
                        })
                        .collect::<Vec<_>>();
                    Point::new(&coords)
                })
                .collect();
            DiscreteMeasure::uniform(pts).map_err(|e| config(e.to_string()))
        }
    }
}

struct Context<'a> {
    frame: ControlFrame,
    scenario: &'a Scenario,
    seed: u64,
    out: PathBuf,
    measures: BTreeMap<String, DiscreteMeasure>,
    paths: BTreeMap<String, (Vec<f64>, Vec<Vec<f64>>)>,
    cache: DistanceCache,
}

impl Context<'_> {
    fn table(&self, experiment: &str, xs: &[Point], ys: &[Point]) -> Result<(DistanceTable, String), LabError> {
        let key = DistanceCache::key(&self.frame, xs, ys, &self.scenario.distance);
        let table = self.cache.get_or_compute(&key, || {
            Ok(solve!(crate::kantorovich::distance_table(&self.frame, xs, ys, &self.scenario.distance), experiment, "distance table"))
        })?;
        Ok((table, key))
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn path_csv(path: &Path, m: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>), LabError> {
    let mut grid = Vec::new();
    let mut controls = Vec::new();
    let mut rdr = csv_reader(path)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| config(format!("{}: {e}", path.display())))?;
        let row = parse_row(path, &rec)?;
        if row.len() != m + 1 {
            return Err(config(format!("{}: expected columns t, u1..u{m}", path.display())));
        }
        grid.push(row[0]);
        controls.push(row[1..].to_vec());
    }
    Ok((grid, controls))
}

fn plan_rows(plan: &TransportPlan) -> Vec<Vec<String>> {
    plan.entries.iter().map(|(a, b, w)| vec![a.to_string(), b.to_string(), fmt(*w)]).collect()
}

fn run_experiment(ctx: &Context, index: usize, exp: &Experiment) -> Result<Report, LabError> {
    let frame = &ctx.frame;
    let n = frame.dim();
    let name = exp.name.as_str();
    let opts = &ctx.scenario.distance;
    let mut checks = Vec::new();
    let data = match &exp.kind {
        ExperimentKind::Geodesic { x0, p0, steps } => {
            let ext = solve!(flow_extremal(frame, &Point::new(x0), &Covector::new(p0), *steps), name, "extremal");
            let mut header = vec!["t".to_string()];
            header.extend(columns("x", n));
            header.extend(columns("p", n));
            header.extend(columns("u", frame.rank()));
            header.push("H".into());
            let rows = (0..ext.grid.len()).map(|k| {
                let mut row = vec![fmt(ext.grid[k])];
                row.extend(ext.xs[k].iter().chain(&ext.ps[k]).chain(&ext.controls[k]).map(|v| fmt(*v)));
                row.push(fmt(ext.hamiltonian[k]));
                row
            });
            write_csv(&ctx.artifact(&format!("{name}.csv")), &header, rows)?;
            let (length, energy) = ext.length_energy();
            let drift = ext.hamiltonian_drift();
            checks.push(Check::at_most("hamiltonian_drift", drift, 1e-6));
            json!({ "steps": steps, "length": length, "energy": energy, "hamiltonian": ext.hamiltonian[0],
                    "hamiltonian_drift": drift, "end": ext.xs.last() })
        }
        ExperimentKind::Distance { x, y, expect, tol } => {
            let r = solve!(distance(frame, &Point::new(x), &Point::new(y), opts), name, "distance");
            checks.push(Check::holds("converged", r.converged));
            if let Some(e) = expect {
                checks.push(Check::at_most("value_error", (r.value - e).abs(), *tol));
            }
            serde_json::to_value(&r).expect("result serializes")
        }
        ExperimentKind::DistanceTable { source, target } => {
            let xs = ctx.measures[source].points();
            let ys = target.as_ref().map(|t| ctx.measures[t].points()).unwrap_or(xs);
            let (table, key) = ctx.table(name, xs, ys)?;
            let header: Vec<String> = std::iter::once("row".to_string()).chain((0..table.cols).map(|b| format!("d{b}"))).collect();
            let rows = (0..table.rows).map(|a| std::iter::once(a.to_string()).chain((0..table.cols).map(|b| fmt(table.value(a, b)))).collect());
            write_csv(&ctx.artifact(&format!("{name}.csv")), &header, rows)?;
            let finite = table.values.iter().all(|v| v.is_finite());
            checks.push(Check::holds("finite", finite));
            let mut methods = BTreeMap::new();
            for m in &table.methods {
                *methods.entry(serde_json::to_value(m).unwrap().as_str().unwrap_or("?").to_string()).or_insert(0usize) += 1;
            }
            let max_mult = table.multiplicities.iter().copied().max().unwrap_or(0);
            json!({ "rows": table.rows, "cols": table.cols, "cache_key": key, "methods": methods, "max_multiplicity": max_mult })
        }
        ExperimentKind::Singular { start, .. } => {
            let (grid, controls) = ctx.paths[name].clone();
            let path = solve!(HorizontalPath::new(frame, Point::new(start), grid, controls), name, "path");
            let report = solve!(classify(frame, &path, 1e-8), name, "classification");
            serde_json::to_value(&report).expect("report serializes")
        }
        ExperimentKind::SingularSweep { paths, steps, lo, hi, amplitude, expect_singular } => {
            if lo.len() != n || hi.len() != n {
                return Err(config(format!("experiment `{name}`: lo/hi need {n} coordinates")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(ctx.seed, 1000 + index));
            let m = frame.rank();
            let grid = uniform_grid(*steps);
            let mut rows = Vec::new();
            let mut singular = 0;
            let mut matches = true;
            for k in 0..*paths {
                let start: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| rng.random_range(*a..=*b)).collect();
                let coeffs: Vec<f64> = (0..m * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let controls = grid
                    .iter()
                    .map(|t| {
                        (0..m)
                            .map(|i| {
                                amplitude
                                    * (0..3)
                                        .map(|j| coeffs[i * 6 + 2 * j] * ((j + 1) as f64 * std::f64::consts::PI * t + coeffs[i * 6 + 2 * j + 1]).sin())
                                        .sum::<f64>()
                            })
                            .collect()
                    })
                    .collect();
                let path = solve!(HorizontalPath::new(frame, Point::new(&start), grid.clone(), controls), name, "path");
                let r = solve!(classify(frame, &path, 1e-8), name, "classification");
                singular += r.singular as usize;
                if let Some(e) = expect_singular {
                    matches &= r.singular == *e;
                }
                let mut row = vec![k.to_string(), r.rank.to_string(), r.singular.to_string(), format!("{:?}", r.goh)];
                row.extend(start.iter().map(|v| fmt(*v)));
                rows.push(row);
            }
            let mut header: Vec<String> = ["path", "rank", "singular", "goh"].iter().map(|s| s.to_string()).collect();
            header.extend(columns("x", n));
            write_csv(&ctx.artifact(&format!("{name}.csv")), &header, rows)?;
            if expect_singular.is_some() {
                checks.push(Check::holds("verdicts_match", matches));
            }
            json!({ "paths": paths, "singular": singular, "regular": paths - singular, "gramian_tol": GRAMIAN_TOL })
        }
        ExperimentKind::Regularity { probe, samples, base_x, base_y, radius, d_min, d_max, mu_grid, lo, hi, scale } => {
            let seed = mix_seed(ctx.seed, 2000 + index);
            let mut data = json!({ "samples": samples });
            if matches!(probe, Probe::Semiconcavity | Probe::Both) {
                let bx = base_x.clone().unwrap_or_else(|| vec![0.0; n]);
                let by = base_y.clone().unwrap_or_else(|| (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect());
                let region = PairRegion::new(&bx, &by, *radius).with_band(*d_min, *d_max);
                let est = solve!(semiconcavity_probe(frame, &region, *samples, mu_grid, seed, opts), name, "semiconcavity probe");
                checks.push(Check::holds("C_hat_finite", est.c_hat.is_finite()));
                data["C_hat"] = json!(est.c_hat);
                data["semiconcavity"] = serde_json::to_value(&est).expect("estimate serializes");
            }
            if matches!(probe, Probe::Lipschitz | Probe::Both) {
                let region = match (lo, hi) {
                    (Some(l), Some(h)) => BoxRegion { lo: l.clone(), hi: h.clone() },
                    _ => BoxRegion::unit(n),
                };
                let est = solve!(lipschitz_probe(frame, &region, *samples, *scale, seed ^ 1, opts), name, "lipschitz probe");
                checks.push(Check::holds("L_hat_finite", est.l_hat.is_finite()));
                data["L_hat"] = json!(est.l_hat);
                data["scales"] = json!([scale]);
                data["lipschitz"] = serde_json::to_value(&est).expect("estimate serializes");
            }
            data
        }
        ExperimentKind::Ot { source, target, solver: which } => {
            let (mu, nu) = (&ctx.measures[source], &ctx.measures[target]);
            let (table, key) = ctx.table(name, mu.points(), nu.points())?;
            let cost = table.cost_matrix();
            let (plan, duals) = match which {
                OtSolver::Exact => solve!(solve_kantorovich(mu, nu, &cost), name, "linear program"),
                OtSolver::Sinkhorn => {
                    solve!(solve_sinkhorn(mu, nu, &cost, &ctx.scenario.sinkhorn), name, "sinkhorn")
                }
            };
            let marginal = plan
                .row_sums()
                .iter()
                .zip(mu.weights())
                .chain(plan.col_sums().iter().zip(nu.weights()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let sup = superdifferential_check(&plan, &duals, &cost, 1e-9);
            checks.push(Check::at_most("marginal_error", marginal, 1e-12));
            if *which == OtSolver::Exact {
                checks.push(Check::at_most("duality_gap", duals.gap.abs(), 1e-9 * (1.0 + plan.cost.abs())));
                checks.push(Check::at_most("superdifferential_violation", sup.max_violation, 1e-9));
            }
            write_csv(&ctx.artifact(&format!("{name}_plan.csv")), &["source".into(), "target".into(), "mass".into()], plan_rows(&plan))?;
            let duals_rows = duals
                .phi
                .iter()
                .enumerate()
                .map(|(i, v)| vec!["source".to_string(), i.to_string(), fmt(*v)])
                .chain(duals.phic.iter().enumerate().map(|(j, v)| vec!["target".to_string(), j.to_string(), fmt(*v)]));
            write_csv(&ctx.artifact(&format!("{name}_duals.csv")), &["side".into(), "index".into(), "potential".into()], duals_rows)?;
            json!({ "solver": which, "cost": plan.cost, "w2": plan.cost.max(0.0).sqrt(), "gap": duals.gap,
                    "support": plan.entries.len(), "multi_destination_rows": plan.multi_destination_rows(),
                    "superdifferential": sup, "cache_key": key })
        }
        ExperimentKind::Transport { source, target, t, geodesic_check: with_geodesic, r_cluster } => {
            let (mu, nu) = (&ctx.measures[source], &ctx.measures[target]);
            let (table, key) = ctx.table(name, mu.points(), nu.points())?;
            let cost = table.cost_matrix();
            let (plan, duals) = solve!(solve_kantorovich(mu, nu, &cost), name, "linear program");
            let map_opts = MapOptions { distance: opts.clone(), ..ctx.scenario.map.clone() };
            let map = solve!(build_map(mu, nu, &plan, &duals, frame, &table, &map_opts), name, "map");
            let mut interp = solve!(interpolate(&map, frame, t, opts.steps), name, "interpolation");
            let graph_moving: Vec<_> = map.graph_records().filter(|r| r.label == Label::Moving).collect();
            let exact = graph_moving.iter().filter(|r| r.endpoint_residual <= 1e-6).count();
            let single = 1.0 - map.multi_destination_rows.len() as f64 / mu.len() as f64;
            checks.push(Check::at_most("mass_balance", mass_balance(&map, nu), 1e-12));
            checks.push(Check::at_most("monotonicity_violation", monotonicity_violation(&map, &cost), 1e-9));
            checks.push(Check::above("single_destination_fraction", single, 0.95 - 1e-12));
            let exact_fraction = if graph_moving.is_empty() { 1.0 } else { exact as f64 / graph_moving.len() as f64 };
            checks.push(Check::above("endpoint_consistent_fraction", exact_fraction, 0.95 - 1e-12));
            let pairing = map.records.iter().filter_map(|r| r.pairing_residual).fold(0.0, f64::max);
            checks.push(Check::at_most("static_pairing", pairing, map_opts.pairing_tol));
            let mut probes = Vec::new();
            let mut splits = Vec::new();
            for (k, &tk) in t.iter().enumerate() {
                let header: Vec<String> = ["source", "target", "weight"].iter().map(|s| s.to_string()).chain(columns("x", n)).collect();
                let rows = map.records.iter().zip(&interp.clouds[k]).map(|(r, p)| {
                    let mut row = vec![r.source.to_string(), r.target.to_string(), fmt(r.mass)];
                    row.extend(p.iter().map(|v| fmt(*v)));
                    row
                });
                write_csv(&ctx.artifact(&format!("{name}_t{}.csv", fmt(tk))), &header, rows)?;
                if tk == 1.0 {
                    let err = map
                        .records
                        .iter()
                        .zip(&interp.clouds[k])
                        .map(|(r, p)| r.destination.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                        .fold(0.0, f64::max);
                    checks.push(Check::at_most("endpoint_exactness", err, 1e-8));
                }
                if tk > 0.0 && tk < 1.0 {
                    let probe = solve!(abs_continuity_probe(&interp, tk, *r_cluster), name, "absolute continuity probe");
                    checks.push(Check::above(&format!("injectivity_margin_t{}", fmt(tk)), probe.injectivity_margin, 0.0));
                    probes.push(probe);
                }
                if tk == 0.5 {
                    let s = solve!(geodesic_split(&map, &interp, frame, tk, opts), name, "geodesic split");
                    checks.push(Check::at_most("split_error_t0.5", s.split_error, 1e-3));
                    checks.push(Check::at_most("speed_error_t0.5", s.speed_error, 1e-4));
                    splits.push(s);
                }
            }
            let geodesic = if *with_geodesic {
                let rep = solve!(geodesic_check(mu, &mut interp, nu, frame, opts), name, "geodesic check");
                let worst = rep.relative_error.iter().copied().fold(0.0, f64::max);
                checks.push(Check::at_most("w2_geodesic_relative_error", worst, 2e-2));
                Some(rep)
            } else {
                None
            };
            let mut header: Vec<String> = ["source", "target", "mass", "label"].iter().map(|s| s.to_string()).collect();
            header.extend(columns("x", n));
            header.extend(columns("y", n));
            header.extend(columns("p", n));
            header.extend(columns("g", n));
            let rows = map.records.iter().map(|r| {
                let mut row = vec![r.source.to_string(), r.target.to_string(), fmt(r.mass), format!("{:?}", r.label).to_lowercase()];
                row.extend(r.x.iter().chain(&r.destination).chain(&r.covector).map(|v| fmt(*v)));
                match &r.gradient {
                    Some(g) => row.extend(g.iter().map(|v| fmt(*v))),
                    None => row.extend((0..n).map(|_| String::new())),
                }
                row
            });
            write_csv(&ctx.artifact(&format!("{name}_map.csv")), &header, rows)?;
            let moving = map.records.iter().filter(|r| r.label == Label::Moving).count();
            json!({ "cost": plan.cost, "w2": plan.cost.max(0.0).sqrt(), "moving": moving, "static": map.records.len() - moving,
                    "multi_destination_rows": map.multi_destination_rows, "t": t, "min_spacing": interp.min_spacing,
                    "abs_continuity": probes, "split": splits, "geodesic": geodesic, "cache_key": key })
        }
    };
    Ok(Report {
        name: name.to_string(),
        kind: serde_json::to_value(&exp.kind).ok().and_then(|v| v["kind"].as_str().map(String::from)).unwrap_or_default(),
        acceptance: exp.acceptance,
        checks,
        data,
    })
}

/// Reads and runs a scenario file; relative paths inside it are resolved
/// against its directory.
pub fn run(path: &Path, opts: &RunOptions) -> Result<RunSummary, LabError> {
    let bytes = fs::read(path).map_err(|e| config(format!("reading scenario {}: {e}", path.display())))?;
    let scenario: Scenario =
        serde_json::from_slice(&bytes).map_err(|e| config(format!("parsing scenario {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    execute(&scenario, &base, &bytes, opts)
}

pub fn execute(scenario: &Scenario, base: &Path, scenario_bytes: &[u8], opts: &RunOptions) -> Result<RunSummary, LabError> {
    let started = Instant::now();
    let frame = scenario.validate()?;
    let seed = opts.seed.unwrap_or(scenario.seed);

    // everything that can fail on input happens before the first artifact
    let mut inputs = BTreeMap::new();
    let mut hash_file = |p: &Path| -> Result<(), LabError> {
        let bytes = fs::read(p).map_err(|e| config(format!("cannot read {}: {e}", p.display())))?;
        inputs.insert(p.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    };
    let mut measures = BTreeMap::new();
    for (k, (name, spec)) in scenario.measures.iter().enumerate() {
        if let MeasureSpec::File { path } = spec {
            hash_file(&resolve(base, path))?;
        }
        let m = generate(spec, base, mix_seed(seed, k))?;
        if m.dim() != frame.dim() {
            return Err(config(format!("measure `{name}` has dimension {}, frame has {}", m.dim(), frame.dim())));
        }
        measures.insert(name.clone(), m);
    }
    let mut paths = BTreeMap::new();
    for e in &scenario.experiments {
        if let ExperimentKind::Singular { path, start } = &e.kind {
            let p = resolve(base, path);
            hash_file(&p)?;
            if start.len() != frame.dim() {
                return Err(config(format!("experiment `{}`: start needs {} coordinates", e.name, frame.dim())));
            }
            paths.insert(e.name.clone(), path_csv(&p, frame.rank())?);
        }
    }
    let out = opts.out.clone().or_else(|| scenario.output.as_ref().map(|o| resolve(base, o))).unwrap_or_else(|| PathBuf::from("srotlab-out"));
    let cache = match &opts.cache_dir {
        Some(dir) => DistanceCache::new(dir),
        None => DistanceCache::from_env(".srotlab-cache"),
    };
    fs::create_dir_all(&out).map_err(io(format!("creating {}", out.display())))?;
    write_json(&out.join("frame.json"), &frame.describe())?;

    let ctx = Context { frame, scenario, seed, out: out.clone(), measures, paths, cache };
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    let mut failures = Vec::new();
    for (i, exp) in scenario.experiments.iter().enumerate() {
        let t0 = Instant::now();
        log::info!("running experiment `{}`", exp.name);
        let report = run_experiment(&ctx, i, exp)?;
        write_json(&out.join(format!("{}.json", exp.name)), &report)?;
        if exp.acceptance {
            failures.extend(report.failed().map(|c| format!("{}/{}", exp.name, c.name)));
        }
        timings.push(json!({ "name": exp.name, "wall_time_s": t0.elapsed().as_secs_f64(),
                             "failed_checks": report.failed().map(|c| c.name.clone()).collect::<Vec<_>>() }));
        reports.push(report);
    }
    let manifest = json!({
        "srotlab_version": env!("CARGO_PKG_VERSION"),
        "scenario_sha256": hex::encode(Sha256::digest(scenario_bytes)),
        "input_files": inputs,
        "frame": scenario.frame,
        "seed": seed,
        "experiments": timings,
        "acceptance_failures": failures,
        "cache": { "dir": ctx.cache.dir().display().to_string(), "hits": ctx.cache.hits(), "misses": ctx.cache.misses() },
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        out,
        reports,
        acceptance_failures: failures,
        cache_hits: ctx.cache.hits(),
        cache_misses: ctx.cache.misses(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_parses_with_defaults() {
        let s: Scenario = serde_json::from_str(
            r#"{ "frame": "heisenberg",
                 "measures": { "mu": { "kind": "uniform_box", "n": 3, "lo": [0,0,0], "hi": [1,1,1] } },
                 "experiments": [ { "name": "d", "kind": "distance", "x": [0,0,0], "y": [1,1,0.5] },
                                  { "name": "o", "kind": "ot", "source": "mu", "target": "mu", "acceptance": true } ] }"#,
        )
        .unwrap();
        assert_eq!(s.distance, DistanceOptions::default());
        assert!(matches!(s.experiments[0].kind, ExperimentKind::Distance { tol, .. } if tol == 1e-3));
        assert!(s.experiments[1].acceptance);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn invalid_scenarios_are_config_errors() {
        let bad = [
            r#"{ "frame": "nope", "experiments": [] }"#,
            r#"{ "frame": "heisenberg", "distance": { "endpoint_tol": -1 }, "experiments": [] }"#,
            r#"{ "frame": "heisenberg", "experiments": [ { "name": "o", "kind": "ot", "source": "a", "target": "b" } ] }"#,
            r#"{ "frame": "heisenberg", "experiments": [ { "name": "d", "kind": "distance", "x": [0,0,0], "y": [1,0,0] },
                                                         { "name": "d", "kind": "distance", "x": [0,0,0], "y": [1,0,0] } ] }"#,
        ];
        for text in bad {
            let s: Scenario = serde_json::from_str(text).unwrap();
            let err = s.validate().unwrap_err();
            assert_eq!(err.exit_code(), 2, "{err}");
        }
    }

    #[test]
    fn generators_are_seeded() {
        let spec = MeasureSpec::GaussianClip { n: 5, mean: vec![0.0; 3], sigma: 1.0, clip: 0.5, seed: None };
        let a = generate(&spec, Path::new(""), 9).unwrap();
        let b = generate(&spec, Path::new(""), 9).unwrap();
        let c = generate(&spec, Path::new(""), 10).unwrap();
        assert_eq!(a.points(), b.points());
        assert_ne!(a.points(), c.points());
        assert!(a.points().iter().all(|p| p.as_slice().iter().all(|v| v.abs() <= 0.5)));
    }
}
