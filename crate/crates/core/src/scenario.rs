//! Declarative experiment files.
//!
//! A scenario is a TOML document naming the graph, the per-edge scale and
//! speed, the vertex conditions, the grid, the kernel policy, the ensemble to
//! run and the artifacts to write. Every random draw derives from
//! `run.master_seed`.

use crate::analysis::{
    run_ensemble, self_convergence, AnalysisError, ConvergenceConfig, ConvergenceReport, EnsembleConfig, StatsConfig,
};
use crate::diffusion::{Density, DiffusionError, DiffusionSpec, ScaleFn, SpeedMeasure, VertexCondition, DEFAULT_QUAD_PANELS};
use crate::graph::{EdgeSpec, GraphPoint, MetricGraph, VertexId};
use crate::kernel::KernelPolicy;
use crate::sampler::{write_paths_csv, write_samples_csv, Engine, FrontierPolicy, SamplerError, DEFAULT_MAX_EXTENSIONS};
use crate::subdivision::{GridConfig, Subdivision, SubdivisionError};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid value at `{path}`: {message}")]
    Invariant { path: String, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Subdivision(#[from] SubdivisionError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl ScenarioError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            ScenarioError::Schema { .. } => "schema",
            ScenarioError::Invariant { .. } => "invariant",
            ScenarioError::Io { .. } => "io",
            ScenarioError::Subdivision(_) => "subdivision",
            ScenarioError::Sampler(_) => "sampler",
            ScenarioError::Analysis(_) => "analysis",
        }
    }
}

fn invariant(path: impl Into<String>, message: impl ToString) -> ScenarioError {
    ScenarioError::Invariant {
        path: path.into(),
        message: message.to_string(),
    }
}

fn io_error(path: &Path, err: std::io::Error) -> ScenarioError {
    ScenarioError::Io {
        path: path.display().to_string(),
        message: err.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScaleModel {
    #[default]
    Identity,
    /// `(exp(k x) - 1) / k`
    Exponential { k: f64 },
}

impl ScaleModel {
    pub fn build(&self) -> ScaleFn {
        match self {
            ScaleModel::Identity => ScaleFn::identity(),
            ScaleModel::Exponential { k } => ScaleFn::exponential(*k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeedModel {
    #[default]
    Lebesgue,
    Constant { value: f64 },
    /// `(eps + x)^(-p)`
    PowerShifted { eps: f64, p: f64 },
    /// `(end - x)^(-p)`
    PowerBoundary { end: f64, p: f64 },
    /// Piecewise-linear density through the knots.
    Table { xs: Vec<f64>, ys: Vec<f64> },
}

impl SpeedModel {
    pub fn density(&self) -> Result<Density, DiffusionError> {
        Ok(match self {
            SpeedModel::Lebesgue => Density::lebesgue(),
            SpeedModel::Constant { value } => Density::Constant(*value),
            SpeedModel::PowerShifted { eps, p } => Density::PowerShifted { eps: *eps, p: *p },
            SpeedModel::PowerBoundary { end, p } => Density::PowerBoundary { end: *end, p: *p },
            SpeedModel::Table { xs, ys } => Density::table(xs.clone(), ys.clone())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomModel {
    pub position: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeModel {
    /// `inf` for an edge without far end.
    pub length: f64,
    pub tail: usize,
    /// Omitted when the far end is open or at infinity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default)]
    pub scale: ScaleModel,
    #[serde(default)]
    pub speed: SpeedModel,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atoms: Vec<AtomModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VertexModel {
    pub id: usize,
    /// One weight per edge slot, in slot order.
    pub betas: Vec<f64>,
    #[serde(default)]
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default)]
    pub policy: KernelPolicy,
    #[serde(default = "default_panels")]
    pub quad_panels: usize,
}

fn default_panels() -> usize {
    DEFAULT_QUAD_PANELS
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            policy: KernelPolicy::default(),
            quad_panels: DEFAULT_QUAD_PANELS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPoint {
    pub edge: usize,
    pub coord: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub x0: StartPoint,
    pub horizon: f64,
    pub n_paths: usize,
    pub sample_times: Vec<f64>,
    pub master_seed: u64,
    #[serde(default)]
    pub frontier_policy: FrontierPolicy,
    #[serde(default = "default_extensions")]
    pub max_extensions: u32,
}

fn default_extensions() -> u32 {
    DEFAULT_MAX_EXTENSIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSection {
    /// Run the study on every invocation, not only when requested.
    #[serde(default)]
    pub enabled: bool,
    pub h_list: Vec<f64>,
    /// Defaults to `run.n_paths`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub subdivision: bool,
    #[serde(default = "yes")]
    pub kernel: bool,
    #[serde(default)]
    pub paths: bool,
    #[serde(default = "yes")]
    pub samples: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            subdivision: true,
            kernel: true,
            paths: false,
            samples: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    /// Number of graph vertices, numbered from 0.
    pub vertices: usize,
    pub edges: Vec<EdgeModel>,
    pub conditions: Vec<VertexModel>,
    pub grid: GridConfig,
    #[serde(default)]
    pub kernel: KernelSection,
    pub run: RunSection,
    #[serde(default)]
    pub analysis: StatsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Parses and validates a scenario.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ScenarioError::Schema {
        path: String::new(),
        message: e.to_string(),
    })?;
    let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
        path: e.path().to_string(),
        message: e.into_inner().message().trim().to_string(),
    })?;
    if sc.schema_version != SCHEMA_VERSION {
        return Err(ScenarioError::Schema {
            path: "schema_version".into(),
            message: format!("unsupported version {}, expected {SCHEMA_VERSION}", sc.schema_version),
        });
    }
    sc.validate()?;
    Ok(sc)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_scenario(&text)
}

impl Scenario {
    pub fn render(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn graph(&self) -> Result<MetricGraph, ScenarioError> {
        let specs: Vec<EdgeSpec> = self.edges.iter().map(|e| EdgeSpec::new(e.length, e.tail, e.head)).collect();
        MetricGraph::build(self.vertices, &specs).map_err(|e| invariant("edges", e))
    }

    pub fn spec(&self) -> Result<DiffusionSpec, ScenarioError> {
        let graph = self.graph()?;
        let mut speeds = Vec::with_capacity(self.edges.len());
        for (i, e) in self.edges.iter().enumerate() {
            let mut speed = SpeedMeasure::new(e.speed.density().map_err(|err| invariant(format!("edges[{i}].speed"), err))?);
            for (k, a) in e.atoms.iter().enumerate() {
                speed = speed
                    .with_atom(a.position, a.mass)
                    .map_err(|err| invariant(format!("edges[{i}].atoms[{k}]"), err))?;
            }
            speeds.push(speed);
        }
        let scales = self.edges.iter().map(|e| e.scale.build()).collect();
        let mut conditions: Vec<Option<VertexCondition>> = vec![None; self.vertices];
        for (i, c) in self.conditions.iter().enumerate() {
            let path = format!("conditions[{i}]");
            if c.id >= self.vertices {
                return Err(invariant(path + ".id", format!("vertex {} does not exist", c.id)));
            }
            if conditions[c.id].is_some() {
                return Err(invariant(path + ".id", format!("vertex {} has two conditions", c.id)));
            }
            let cond = VertexCondition::new(VertexId(c.id), c.betas.clone(), c.rho).map_err(|e| invariant(&path, e))?;
            conditions[c.id] = Some(cond);
        }
        let conditions = conditions
            .into_iter()
            .enumerate()
            .map(|(v, c)| c.ok_or_else(|| invariant("conditions", format!("vertex {v} has no condition"))))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = DiffusionSpec::new(graph, scales, speeds, conditions).map_err(|e| invariant("", e))?;
        Ok(spec.with_quad_panels(self.kernel.quad_panels))
    }

    pub fn start(&self) -> GraphPoint {
        GraphPoint::new(self.run.x0.edge, self.run.x0.coord)
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let spec = self.spec()?;
        spec.graph().locate(self.start()).map_err(|e| invariant("run.x0", e))?;
        if !(self.grid.h > 0.0 && self.grid.h.is_finite()) {
            return Err(invariant("grid.h", "must be positive and finite"));
        }
        if !(self.grid.frontier > 0.0) {
            return Err(invariant("grid.frontier", "must be positive"));
        }
        if self.kernel.quad_panels == 0 {
            return Err(invariant("kernel.quad_panels", "must be at least 1"));
        }
        let run = &self.run;
        if !(run.horizon > 0.0 && run.horizon.is_finite()) {
            return Err(invariant("run.horizon", "must be positive and finite"));
        }
        if run.n_paths == 0 {
            return Err(invariant("run.n_paths", "must be at least 1"));
        }
        if run.sample_times.iter().any(|t| !(0.0..=run.horizon).contains(t)) {
            return Err(invariant("run.sample_times", "must lie in [0, horizon]"));
        }
        if run.sample_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invariant("run.sample_times", "must be strictly increasing"));
        }
        if self.analysis.hist_bins == 0 || self.analysis.kde_points < 2 {
            return Err(invariant("analysis", "need at least 1 bin and 2 kde points"));
        }
        if let Some(c) = &self.convergence {
            if c.h_list.len() < 3 || c.h_list.windows(2).any(|w| w[1] > w[0]) || c.h_list.iter().any(|h| !(*h > 0.0)) {
                return Err(invariant("convergence.h_list", "need at least 3 positive, non-increasing steps"));
            }
            if c.n_paths == Some(0) {
                return Err(invariant("convergence.n_paths", "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub thinness: f64,
    pub step: f64,
    pub c_delta: Option<f64>,
    pub table_rows: usize,
    pub grid_nodes: usize,
    pub vertex_fraction: f64,
    pub n_absorbed: usize,
    pub wall_seconds: f64,
    pub artifacts: Vec<PathBuf>,
    pub convergence: Option<ConvergenceReport>,
}

impl RunSummary {
    pub fn line(&self) -> String {
        let c = self.c_delta.map_or("n/a".to_string(), |c| format!("{c:.4}"));
        let mut line = format!(
            "{}: thinness={:.3e} step={:.3e} c_delta={c} table_rows={} nodes={} vertex_fraction={:.4e} absorbed={} wall={:.2}s",
            self.name,
            self.thinness,
            self.step,
            self.table_rows,
            self.grid_nodes,
            self.vertex_fraction,
            self.n_absorbed,
            self.wall_seconds
        );
        if let Some(r) = &self.convergence {
            line.push_str(&format!(" convergence_slope={:.3}", r.slope));
        }
        line
    }
}

fn write_file(dir: &Path, name: &str, artifacts: &mut Vec<PathBuf>, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), ScenarioError> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| io_error(&path, e))?;
    let mut out = BufWriter::new(file);
    body(&mut out).and_then(|_| out.flush()).map_err(|e| io_error(&path, e))?;
    artifacts.push(path);
    Ok(())
}

/// Builds the grid and table, runs the ensemble, and writes the artifacts
/// into `output.dir`.
pub fn run_scenario(sc: &Scenario, with_convergence: bool) -> Result<RunSummary, ScenarioError> {
    let started = Instant::now();
    let spec = sc.spec()?;
    let dir = &sc.output.dir;
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut artifacts = Vec::new();
    write_file(dir, "scenario.toml", &mut artifacts, |out| out.write_all(sc.render().as_bytes()))?;

    let sub = Subdivision::build(&spec, sc.grid)?;
    let mut engine = Engine::new(spec.clone(), sub, sc.kernel.policy)?
        .with_frontier_policy(sc.run.frontier_policy)
        .with_max_extensions(sc.run.max_extensions);
    let cfg = EnsembleConfig {
        horizon: sc.run.horizon,
        n_paths: sc.run.n_paths,
        sample_times: sc.run.sample_times.clone(),
        master_seed: sc.run.master_seed,
        keep_paths: sc.output.paths,
        stats: sc.analysis,
    };
    let ens = run_ensemble(&mut engine, sc.start(), &cfg)?;
    let sub = engine.subdivision();

    if sc.output.subdivision {
        write_file(dir, "subdivision_nodes.csv", &mut artifacts, |out| sub.write_nodes_csv(out))?;
        write_file(dir, "subdivision_cells.csv", &mut artifacts, |out| sub.write_cells_csv(out))?;
    }
    if sc.output.kernel {
        write_file(dir, "kernel.csv", &mut artifacts, |out| engine.table().write_csv(out))?;
    }
    if sc.output.paths {
        let paths = ens.cursors.iter().filter_map(|c| c.path());
        write_file(dir, "paths.csv", &mut artifacts, |out| write_paths_csv(sub, paths, out))?;
    }
    if sc.output.samples {
        write_file(dir, "samples.csv", &mut artifacts, |out| {
            write_samples_csv(sub, &cfg.sample_times, &ens.cursors, out)
        })?;
    }
    write_file(dir, "stats.json", &mut artifacts, |out| out.write_all(ens.stats.to_json().as_bytes()))?;

    let convergence = match &sc.convergence {
        Some(c) if with_convergence || c.enabled => {
            let report = self_convergence(
                &spec,
                sc.start(),
                &ConvergenceConfig {
                    grid: sc.grid,
                    h_list: c.h_list.clone(),
                    policy: sc.kernel.policy,
                    frontier_policy: sc.run.frontier_policy,
                    horizon: sc.run.horizon,
                    n_paths: c.n_paths.unwrap_or(sc.run.n_paths),
                    master_seed: sc.run.master_seed,
                },
            )?;
            write_file(dir, "convergence.json", &mut artifacts, |out| out.write_all(report.to_json().as_bytes()))?;
            Some(report)
        }
        Some(_) => None,
        None if with_convergence => {
            return Err(invariant("convergence", "no convergence section in the scenario"));
        }
        None => None,
    };

    Ok(RunSummary {
        name: sc.name.clone(),
        thinness: sub.quantifier(),
        step: sub.step(),
        c_delta: sub.c_delta(&spec).ok(),
        table_rows: engine.table().len(),
        grid_nodes: sub.nodes().len(),
        vertex_fraction: ens.stats.vertex_fraction,
        n_absorbed: ens.stats.n_absorbed,
        wall_seconds: started.elapsed().as_secs_f64(),
        artifacts,
        convergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const INTERVAL: &str = r#"
schema_version = 1
name = "interval"
vertices = 2

[[edges]]
length = 1.0
tail = 0
head = 1

[[conditions]]
id = 0
betas = [1.0]

[[conditions]]
id = 1
betas = [1.0]

[grid]
mode = "uniform"
h = 0.1

[run]
x0 = { edge = 0, coord = 0.5 }
horizon = 0.2
n_paths = 50
sample_times = [0.1, 0.2]
master_seed = 3
"#;

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let sc = parse_scenario(INTERVAL).unwrap();
        assert_eq!(sc.kernel, KernelSection::default());
        assert_eq!(sc.output, OutputSection::default());
        assert_eq!(sc.edges[0].speed, SpeedModel::Lebesgue);
        assert_eq!(parse_scenario(&sc.render()).unwrap(), sc);
    }

    #[test]
    fn schema_errors_carry_the_field_path() {
        let text = INTERVAL.replace("h = 0.1", "h = \"fine\"");
        match parse_scenario(&text) {
            Err(ScenarioError::Schema { path, .. }) => assert_eq!(path, "grid.h"),
            other => panic!("{other:?}"),
        }
        let text = INTERVAL.replace("length = 1.0", "length = 1.0\nspeed = { kind = \"cubic\" }");
        match parse_scenario(&text) {
            Err(ScenarioError::Schema { path, .. }) => assert_eq!(path, "edges[0].speed.kind"),
            other => panic!("{other:?}"),
        }
        let text = INTERVAL.replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Schema { path, .. }) if path == "schema_version"));
        let text = INTERVAL.replace("n_paths = 50", "");
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Schema { path, .. }) if path == "run"));
    }

    #[test]
    fn invariant_errors() {
        let text = INTERVAL.replacen("betas = [1.0]", "betas = [0.9]", 1);
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Invariant { path, .. }) if path == "conditions[0]"));
        let text = INTERVAL.replace("coord = 0.5", "coord = 1.5");
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Invariant { path, .. }) if path == "run.x0"));
        let text = INTERVAL.replace("[0.1, 0.2]", "[0.2, 0.1]");
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Invariant { path, .. }) if path == "run.sample_times"));
        let text = INTERVAL.replacen("id = 1", "id = 0", 1);
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Invariant { .. })));
    }

    #[test]
    fn run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut sc = parse_scenario(INTERVAL).unwrap();
        sc.output.dir = dir.path().join("out");
        sc.output.paths = true;
        let summary = run_scenario(&sc, false).unwrap();
        for name in ["scenario.toml", "subdivision_nodes.csv", "subdivision_cells.csv", "kernel.csv", "paths.csv", "samples.csv", "stats.json"] {
            assert!(sc.output.dir.join(name).exists(), "{name}");
        }
        assert_eq!(summary.artifacts.len(), 7);
        assert!(summary.line().contains("table_rows="));
        assert!(matches!(run_scenario(&sc, true), Err(ScenarioError::Invariant { .. })));
    }
}
