//! Monte Carlo ensembles and their statistics.
//!
//! Marginals are compared at fixed times through an empirical distance that
//! mixes the total variation of edge and vertex frequencies with the
//! one-dimensional Wasserstein distance of the coordinates on shared edges.

use crate::diffusion::DiffusionSpec;
use crate::graph::{EdgeId, GraphPoint, VertexId};
use crate::kernel::KernelPolicy;
use crate::sampler::{Engine, FrontierPolicy, PathCursor, SamplerError};
use crate::subdivision::{GridConfig, Subdivision, SubdivisionError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_KDE_POINTS: usize = 512;
pub const DEFAULT_HIST_BINS: usize = 30;
// Unbounded KDE grids extend this many bandwidths past the extreme samples.
const KDE_PAD: f64 = 4.0;
// Kernel contributions beyond this many bandwidths are dropped.
const KDE_CUTOFF: f64 = 8.0;
const TIME_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("kde needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("time {0} was not sampled")]
    TimeNotSampled(f64),
    #[error("invalid ensemble settings: {0}")]
    BadSettings(String),
    #[error("invalid stats document: {0}")]
    Schema(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Subdivision(#[from] SubdivisionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BandwidthRule {
    #[default]
    Silverman,
    Fixed {
        bandwidth: f64,
    },
}

/// Reflecting bounds of a KDE. Missing bounds leave the grid open on that side.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KdeBounds {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl Kde {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    /// Mass of the curve on `[x, end of grid]`.
    pub fn mass_above(&self, x: f64) -> f64 {
        let k = self.grid.partition_point(|&g| g < x);
        if k >= self.grid.len() {
            return 0.0;
        }
        let mut mass = trapezoid(&self.grid[k..], &self.density[k..]);
        if k > 0 {
            let (x0, x1) = (self.grid[k - 1], self.grid[k]);
            let w = (x1 - x) / (x1 - x0);
            let fx = self.density[k - 1] * w + self.density[k] * (1.0 - w);
            mass += 0.5 * (fx + self.density[k]) * (x1 - x);
        }
        mass
    }

    pub fn value_at(&self, x: f64) -> f64 {
        let k = self.grid.partition_point(|&g| g < x);
        if k == 0 || k >= self.grid.len() {
            return if k < self.grid.len() && self.grid[k] == x { self.density[k] } else { 0.0 };
        }
        let (x0, x1) = (self.grid[k - 1], self.grid[k]);
        let w = (x - x0) / (x1 - x0);
        self.density[k - 1] * (1.0 - w) + self.density[k] * w
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(x, y)| 0.5 * (y[0] + y[1]) * (x[1] - x[0])).sum()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9 min(sd, iqr/1.34) n^(-1/5)`. Falls back to the
/// nonzero spread measure, then to unit spread for constant data.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = (quantile(sorted, 0.75) - quantile(sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => 1.0,
    };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian kernel density estimate on an evenly spaced grid of `points`
/// nodes. Bounds reflect the kernel mass that would fall outside them.
pub fn kde(samples: &[f64], rule: BandwidthRule, bounds: KdeBounds, points: usize) -> Result<Kde, AnalysisError> {
    if samples.len() < 2 {
        return Err(AnalysisError::TooFewSamples(samples.len()));
    }
    if points < 2 {
        return Err(AnalysisError::BadSettings(format!("kde needs at least 2 grid points, got {points}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let bw = match rule {
        BandwidthRule::Silverman => silverman_bandwidth(&sorted),
        BandwidthRule::Fixed { bandwidth } if bandwidth > 0.0 && bandwidth.is_finite() => bandwidth,
        BandwidthRule::Fixed { bandwidth } => {
            return Err(AnalysisError::BadSettings(format!("bandwidth {bandwidth} must be positive")))
        }
    };
    let lo = bounds.lower.unwrap_or(sorted[0] - KDE_PAD * bw);
    let hi = bounds.upper.unwrap_or(sorted[sorted.len() - 1] + KDE_PAD * bw);
    let step = (hi - lo) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|k| lo + step * k as f64).collect();
    let norm = 1.0 / (sorted.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    let window = |x: f64| -> f64 {
        let a = sorted.partition_point(|&s| s < x - KDE_CUTOFF * bw);
        let b = sorted.partition_point(|&s| s <= x + KDE_CUTOFF * bw);
        sorted[a..b].iter().map(|s| (-0.5 * ((x - s) / bw).powi(2)).exp()).sum()
    };
    let density = grid
        .iter()
        .map(|&x| {
            let mut sum = window(x);
            if let Some(l) = bounds.lower {
                sum += window(2.0 * l - x);
            }
            if let Some(u) = bounds.upper {
                sum += window(2.0 * u - x);
            }
            sum * norm
        })
        .collect();
    Ok(Kde { bandwidth: bw, grid, density })
}

/// One-dimensional Wasserstein-1 distance of two empirical distributions,
/// `∫|F_a − F_b|`. Inputs must be sorted.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    let mut dist = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        dist += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    dist
}

/// Empirical distribution of the walk at one time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Marginal {
    pub n: usize,
    /// Sample count per graph vertex.
    pub vertex_counts: Vec<u64>,
    /// Sorted coordinates per edge, excluding vertex samples.
    pub edge_coords: Vec<Vec<f64>>,
}

impl Marginal {
    fn edge_frequency(&self, e: usize) -> f64 {
        self.edge_coords[e].len() as f64 / self.n as f64
    }

    fn vertex_frequency(&self, v: usize) -> f64 {
        self.vertex_counts[v] as f64 / self.n as f64
    }
}

/// Distance between two marginals on the same graph.
pub fn marginal_gap(a: &Marginal, b: &Marginal) -> f64 {
    let mut d = 0.0;
    for v in 0..a.vertex_counts.len().max(b.vertex_counts.len()) {
        let fa = if v < a.vertex_counts.len() { a.vertex_frequency(v) } else { 0.0 };
        let fb = if v < b.vertex_counts.len() { b.vertex_frequency(v) } else { 0.0 };
        d += (fa - fb).abs();
    }
    for e in 0..a.edge_coords.len().max(b.edge_coords.len()) {
        let fa = if e < a.edge_coords.len() { a.edge_frequency(e) } else { 0.0 };
        let fb = if e < b.edge_coords.len() { b.edge_frequency(e) } else { 0.0 };
        d += (fa - fb).abs();
        if fa > 0.0 && fb > 0.0 {
            d += fa.min(fb) * wasserstein1(&a.edge_coords[e], &b.edge_coords[e]);
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges; the last bin is closed.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(sorted: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let width = (hi - lo) / bins as f64;
        let bin_edges: Vec<f64> = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0u64; bins];
        for &x in sorted {
            let k = (((x - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
            counts[k] += 1;
        }
        Self { bin_edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub count: u64,
    pub hist: Histogram,
    /// Absent with fewer than two samples.
    pub kde: Option<Kde>,
    pub mean: Option<f64>,
    /// 5%, 50% and 95% quantiles of the coordinate.
    pub quantiles: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub vertex_count: u64,
    pub edges: BTreeMap<String, EdgeStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub hist_bins: usize,
    pub kde_points: usize,
    pub bandwidth: BandwidthRule,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            hist_bins: DEFAULT_HIST_BINS,
            kde_points: DEFAULT_KDE_POINTS,
            bandwidth: BandwidthRule::Silverman,
        }
    }
}

/// Statistics of an ensemble. The JSON form is keyed by time, then by edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub n_paths: usize,
    pub horizon: f64,
    pub sample_times: Vec<f64>,
    /// Time spent at graph vertices divided by `n_paths · horizon`.
    pub vertex_fraction: f64,
    pub n_absorbed: usize,
    pub times: Vec<TimeStats>,
    pub marginals: Vec<Marginal>,
}

/// Serialized layout of [`EnsembleStats`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsDocument {
    pub n_paths: usize,
    pub horizon: f64,
    pub sample_times: Vec<f64>,
    pub vertex_fraction: f64,
    pub n_absorbed: usize,
    pub times: BTreeMap<String, TimeStats>,
}

pub fn time_key(t: f64) -> String {
    format!("{t:?}")
}

impl StatsDocument {
    pub fn from_json(text: &str) -> Result<Self, AnalysisError> {
        let doc: Self = serde_json::from_str(text).map_err(|e| AnalysisError::Schema(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn time(&self, t: f64) -> Result<&TimeStats, AnalysisError> {
        self.times.get(&time_key(t)).ok_or(AnalysisError::TimeNotSampled(t))
    }

    /// Counts add up to `n_paths`, histograms and curves are well formed.
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: String| Err(AnalysisError::Schema(m));
        if self.times.len() != self.sample_times.len() {
            return bad(format!("{} time entries for {} sample times", self.times.len(), self.sample_times.len()));
        }
        for &t in &self.sample_times {
            let key = time_key(t);
            let Some(ts) = self.times.get(&key) else {
                return bad(format!("times.{key} is missing"));
            };
            let total: u64 = ts.vertex_count + ts.edges.values().map(|e| e.count).sum::<u64>();
            if total != self.n_paths as u64 {
                return bad(format!("times.{key}: counts sum to {total}, expected {}", self.n_paths));
            }
            for (name, es) in &ts.edges {
                let path = format!("times.{key}.edges.{name}");
                if es.hist.bin_edges.len() != es.hist.counts.len() + 1 {
                    return bad(format!("{path}.hist: bin edge count mismatch"));
                }
                if es.hist.counts.iter().sum::<u64>() != es.count {
                    return bad(format!("{path}.hist: counts do not sum to count"));
                }
                if let Some(k) = &es.kde {
                    if k.grid.len() != k.density.len() {
                        return bad(format!("{path}.kde: grid and density lengths differ"));
                    }
                    if k.density.iter().any(|d| !(*d >= 0.0)) {
                        return bad(format!("{path}.kde: negative density"));
                    }
                }
            }
        }
        Ok(())
    }
}

impl EnsembleStats {
    pub fn document(&self) -> StatsDocument {
        StatsDocument {
            n_paths: self.n_paths,
            horizon: self.horizon,
            sample_times: self.sample_times.clone(),
            vertex_fraction: self.vertex_fraction,
            n_absorbed: self.n_absorbed,
            times: self
                .sample_times
                .iter()
                .zip(&self.times)
                .map(|(&t, ts)| (time_key(t), ts.clone()))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.document()).expect("stats serialize")
    }

    pub fn time_index(&self, t: f64) -> Result<usize, AnalysisError> {
        self.sample_times
            .iter()
            .position(|&s| (s - t).abs() <= TIME_TOL * t.abs().max(1.0))
            .ok_or(AnalysisError::TimeNotSampled(t))
    }

    pub fn marginal(&self, t: f64) -> Result<&Marginal, AnalysisError> {
        Ok(&self.marginals[self.time_index(t)?])
    }

    /// Pooled `q`-quantile of the coordinate at time `t`, vertex samples
    /// counted at 0, and the KDE mass of each edge beyond it weighted by the
    /// edge frequency. On a star this is the distance to the center.
    pub fn tail_masses(&self, t: f64, q: f64) -> Result<(f64, Vec<f64>), AnalysisError> {
        let k = self.time_index(t)?;
        let m = &self.marginals[k];
        let mut pooled: Vec<f64> = m.edge_coords.iter().flatten().copied().collect();
        pooled.extend(std::iter::repeat_n(0.0, m.vertex_counts.iter().sum::<u64>() as usize));
        pooled.sort_by(f64::total_cmp);
        let x = quantile(&pooled, q);
        let masses = (0..m.edge_coords.len())
            .map(|e| {
                let kde = self.times[k].edges.get(&EdgeId(e).to_string()).and_then(|s| s.kde.as_ref());
                kde.map_or(0.0, |k| m.edge_frequency(e) * k.mass_above(x))
            })
            .collect();
        Ok((x, masses))
    }

    pub fn edge_stats(&self, t: f64, e: EdgeId) -> Result<Option<&EdgeStats>, AnalysisError> {
        Ok(self.times[self.time_index(t)?].edges.get(&e.to_string()))
    }
}

/// Distance between the time-`t` marginals of two ensembles.
pub fn marginal_distance(a: &EnsembleStats, b: &EnsembleStats, t: f64) -> Result<f64, AnalysisError> {
    Ok(marginal_gap(a.marginal(t)?, b.marginal(t)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub horizon: f64,
    pub n_paths: usize,
    pub sample_times: Vec<f64>,
    pub master_seed: u64,
    /// Keep full paths in the returned cursors.
    #[serde(default)]
    pub keep_paths: bool,
    #[serde(default)]
    pub stats: StatsConfig,
}

impl EnsembleConfig {
    fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: String| Err(AnalysisError::BadSettings(m));
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon {} must be positive and finite", self.horizon));
        }
        if self.sample_times.iter().any(|&t| !(0.0..=self.horizon).contains(&t)) {
            return bad("sample times must lie in [0, horizon]".into());
        }
        if self.sample_times.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sample times must be strictly increasing".into());
        }
        if self.stats.hist_bins == 0 {
            return bad("hist_bins must be at least 1".into());
        }
        Ok(())
    }
}

pub struct Ensemble {
    pub stats: EnsembleStats,
    /// Finished walks in path-id order.
    pub cursors: Vec<PathCursor>,
}

/// Runs `n_paths` walks from `x0` and aggregates their marginals. The result
/// depends only on the engine state and `master_seed`.
pub fn run_ensemble(engine: &mut Engine, x0: GraphPoint, cfg: &EnsembleConfig) -> Result<Ensemble, AnalysisError> {
    cfg.validate()?;
    let init = engine.initial_distribution(x0)?;
    let times: Arc<[f64]> = Arc::from(cfg.sample_times.clone());
    let mut cursors: Vec<PathCursor> = (0..cfg.n_paths as u64)
        .map(|id| PathCursor::new(&init, cfg.horizon, cfg.master_seed, id, times.clone(), cfg.keep_paths))
        .collect();
    engine.run(&mut cursors)?;
    let stats = ensemble_stats(engine.subdivision(), &cursors, cfg)?;
    Ok(Ensemble { stats, cursors })
}

fn ensemble_stats(sub: &Subdivision, cursors: &[PathCursor], cfg: &EnsembleConfig) -> Result<EnsembleStats, AnalysisError> {
    let graph = sub.graph();
    let n_edges = graph.n_edges();
    let mut marginals = Vec::with_capacity(cfg.sample_times.len());
    for k in 0..cfg.sample_times.len() {
        let mut m = Marginal {
            n: cursors.len(),
            vertex_counts: vec![0; graph.n_vertices()],
            edge_coords: vec![Vec::new(); n_edges],
        };
        for c in cursors {
            let node = sub.node(c.samples()[k]);
            match node.vertex {
                Some(VertexId(v)) => m.vertex_counts[v] += 1,
                None => m.edge_coords[node.edge.0].push(node.coord),
            }
        }
        for coords in &mut m.edge_coords {
            coords.sort_by(f64::total_cmp);
        }
        marginals.push(m);
    }
    let times = marginals
        .iter()
        .map(|m| time_stats(sub, m, &cfg.stats))
        .collect::<Result<Vec<_>, _>>()?;
    let vertex_time: f64 = cursors.iter().map(|c| c.vertex_time()).sum();
    Ok(EnsembleStats {
        n_paths: cursors.len(),
        horizon: cfg.horizon,
        sample_times: cfg.sample_times.clone(),
        vertex_fraction: vertex_time / (cursors.len() as f64 * cfg.horizon),
        n_absorbed: cursors.iter().filter(|c| c.absorbed()).count(),
        times,
        marginals,
    })
}

fn time_stats(sub: &Subdivision, m: &Marginal, cfg: &StatsConfig) -> Result<TimeStats, AnalysisError> {
    let mut edges = BTreeMap::new();
    for edge in sub.graph().edges() {
        let coords = &m.edge_coords[edge.id.0];
        let length = edge.length.is_finite().then_some(edge.length);
        let hi = length.unwrap_or_else(|| coords.last().copied().unwrap_or(1.0));
        let hist = Histogram::new(coords, 0.0, hi, cfg.hist_bins);
        let kde = if coords.len() >= 2 {
            let bounds = KdeBounds { lower: Some(0.0), upper: length };
            Some(kde(coords, cfg.bandwidth, bounds, cfg.kde_points)?)
        } else {
            None
        };
        let (mean, quantiles) = if coords.is_empty() {
            (None, None)
        } else {
            let mean = coords.iter().sum::<f64>() / coords.len() as f64;
            let q = [quantile(coords, 0.05), quantile(coords, 0.5), quantile(coords, 0.95)];
            (Some(mean), Some(q))
        };
        edges.insert(
            edge.id.to_string(),
            EdgeStats {
                count: coords.len() as u64,
                hist,
                kde,
                mean,
                quantiles,
            },
        );
    }
    Ok(TimeStats {
        vertex_count: m.vertex_counts.iter().sum(),
        edges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub time: f64,
    /// Grid steps, coarsest first.
    pub h: Vec<f64>,
    /// Distance of each coarser grid's marginal to the finest one.
    pub distance_to_finest: Vec<f64>,
    /// Distances between consecutive grids.
    pub consecutive: Vec<f64>,
    /// Least-squares slope of `log D` against `log h`; NaN when undefined.
    pub slope: f64,
    /// Set when the slope could not be fitted.
    pub degenerate: bool,
    /// Nodes of each grid after lazy extension.
    pub grid_nodes: Vec<usize>,
}

impl ConvergenceReport {
    pub fn is_monotone(&self) -> bool {
        self.distance_to_finest.windows(2).all(|w| w[1] < w[0])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }
}

/// Least-squares slope of `y` on `x`; NaN without spread or finite data.
pub fn loglog_slope(h: &[f64], d: &[f64]) -> f64 {
    if h.len() < 2 || h.iter().chain(d).any(|v| !(*v > 0.0 && v.is_finite())) {
        return f64::NAN;
    }
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = d.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx <= 1e-24 {
        return f64::NAN;
    }
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    /// Grid template; its step is replaced by each entry of `h_list`.
    pub grid: GridConfig,
    pub h_list: Vec<f64>,
    pub policy: KernelPolicy,
    pub frontier_policy: FrontierPolicy,
    pub horizon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
}

/// Runs the same seeded ensemble on each grid and compares the time-`T`
/// marginals with the finest grid.
pub fn self_convergence(spec: &DiffusionSpec, x0: GraphPoint, cfg: &ConvergenceConfig) -> Result<ConvergenceReport, AnalysisError> {
    if cfg.h_list.len() < 3 {
        return Err(AnalysisError::BadSettings("self-convergence needs at least 3 grid steps".into()));
    }
    if cfg.h_list.windows(2).any(|w| w[1] > w[0]) {
        return Err(AnalysisError::BadSettings("grid steps must be non-increasing".into()));
    }
    let ens_cfg = EnsembleConfig {
        horizon: cfg.horizon,
        n_paths: cfg.n_paths,
        sample_times: vec![cfg.horizon],
        master_seed: cfg.master_seed,
        keep_paths: false,
        stats: StatsConfig::default(),
    };
    let mut marginals = Vec::with_capacity(cfg.h_list.len());
    let mut grid_nodes = Vec::with_capacity(cfg.h_list.len());
    for &h in &cfg.h_list {
        let sub = Subdivision::build(spec, GridConfig { h, ..cfg.grid })?;
        let mut engine = Engine::new(spec.clone(), sub, cfg.policy)?.with_frontier_policy(cfg.frontier_policy);
        let ens = run_ensemble(&mut engine, x0, &ens_cfg)?;
        grid_nodes.push(engine.subdivision().nodes().len());
        marginals.push(ens.stats.marginals.into_iter().next().expect("one sample time"));
    }
    let finest = marginals.last().unwrap();
    let distance_to_finest: Vec<f64> = marginals[..marginals.len() - 1].iter().map(|m| marginal_gap(m, finest)).collect();
    let consecutive = marginals.windows(2).map(|w| marginal_gap(&w[0], &w[1])).collect();
    let slope = loglog_slope(&cfg.h_list[..cfg.h_list.len() - 1], &distance_to_finest);
    Ok(ConvergenceReport {
        time: cfg.horizon,
        h: cfg.h_list.clone(),
        distance_to_finest,
        consecutive,
        slope,
        degenerate: slope.is_nan(),
        grid_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ScaleFn, SpeedMeasure, VertexCondition};
    use crate::graph::MetricGraph;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn marginal(edges: Vec<Vec<f64>>, vertex: u64) -> Marginal {
        let n = edges.iter().map(Vec::len).sum::<usize>() + vertex as usize;
        Marginal {
            n,
            vertex_counts: vec![vertex],
            edge_coords: edges,
        }
    }

    #[test]
    fn kde_two_points_is_symmetric_and_normalized() {
        let k = kde(&[0.0, 1.0], BandwidthRule::Fixed { bandwidth: 0.1 }, KdeBounds::default(), 512).unwrap();
        assert!((k.integral() - 1.0).abs() < 1e-3);
        let n = k.density.len();
        for i in 0..n {
            assert!((k.density[i] - k.density[n - 1 - i]).abs() < 1e-9);
        }
        assert!(k.value_at(0.0) > 10.0 * k.value_at(0.5));
    }

    #[test]
    fn kde_of_constant_data_is_one_bump() {
        let k = kde(&[2.0; 10], BandwidthRule::Silverman, KdeBounds::default(), 512).unwrap();
        let argmax = (0..k.grid.len()).max_by(|&a, &b| k.density[a].total_cmp(&k.density[b])).unwrap();
        assert!((k.grid[argmax] - 2.0).abs() <= k.grid[1] - k.grid[0]);
        assert!((k.integral() - 1.0).abs() < 1e-3);
        assert_eq!(
            kde(&[1.0], BandwidthRule::Silverman, KdeBounds::default(), 512),
            Err(AnalysisError::TooFewSamples(1))
        );
    }

    #[test]
    fn reflected_kde_matches_half_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..10_000).map(|_| f64::abs(StandardNormal.sample(&mut rng))).collect();
        let k = kde(&xs, BandwidthRule::Silverman, KdeBounds { lower: Some(0.0), upper: None }, 512).unwrap();
        let half_normal = |x: f64| (2.0 / std::f64::consts::PI).sqrt() * (-0.5 * x * x).exp();
        let sup = k.grid.iter().zip(&k.density).map(|(&x, &d)| (d - half_normal(x)).abs()).fold(0.0, f64::max);
        assert!(sup <= 0.05, "sup distance {sup}");
        assert!((k.integral() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn silverman_reference_value() {
        // sd = sqrt(2.5), iqr = 2 for 1..=5
        let bw = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let expected = 0.9 * (2.0f64 / 1.34).min(2.5f64.sqrt()) * 5f64.powf(-0.2);
        assert!((bw - expected).abs() < 1e-15);
    }

    #[test]
    fn kde_mass_above_splits_total() {
        let k = kde(&[0.0, 1.0, 2.0], BandwidthRule::Fixed { bandwidth: 0.3 }, KdeBounds::default(), 512).unwrap();
        assert!((k.mass_above(1.0) - 0.5).abs() < 1e-3);
        assert!((k.mass_above(-10.0) - k.integral()).abs() < 1e-12);
        assert_eq!(k.mass_above(100.0), 0.0);
    }

    #[test]
    fn wasserstein_reference_values() {
        assert_eq!(wasserstein1(&[0.3], &[0.8]), 0.5);
        assert!((wasserstein1(&[0.0, 1.0], &[0.5]) - 0.5).abs() < 1e-15);
        // uniform grids on [0,1] with 2 and 4 atoms: quantile functions differ by 1/4 on half the mass
        assert!((wasserstein1(&[0.0, 0.5], &[0.0, 0.25, 0.5, 0.75]) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn marginal_gap_examples() {
        let a = marginal(vec![vec![0.2, 0.4], vec![]], 0);
        assert_eq!(marginal_gap(&a, &a), 0.0);
        let p = marginal(vec![vec![0.3]], 0);
        let q = marginal(vec![vec![0.9]], 0);
        assert!((marginal_gap(&p, &q) - 0.6).abs() < 1e-15);
        let left = marginal(vec![vec![0.5, 0.6], vec![]], 0);
        let right = marginal(vec![vec![], vec![0.5, 0.6]], 0);
        assert_eq!(marginal_gap(&left, &right), 2.0);
        let at_vertex = marginal(vec![vec![]], 3);
        let on_edge = marginal(vec![vec![0.1, 0.1, 0.1]], 0);
        assert_eq!(marginal_gap(&at_vertex, &on_edge), 2.0);
    }

    fn arb_marginal() -> impl Strategy<Value = Marginal> {
        (prop::collection::vec(prop::collection::vec(0.0..5.0f64, 0..20), 3), 0u64..5)
            .prop_filter("nonempty", |(e, v)| e.iter().map(Vec::len).sum::<usize>() + *v as usize > 0)
            .prop_map(|(mut e, v)| {
                for c in &mut e {
                    c.sort_by(f64::total_cmp);
                }
                marginal(e, v)
            })
    }

    proptest! {
        #[test]
        fn marginal_gap_is_a_symmetric_nonnegative_semimetric(a in arb_marginal(), b in arb_marginal()) {
            let ab = marginal_gap(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - marginal_gap(&b, &a)).abs() <= 1e-12);
            prop_assert_eq!(marginal_gap(&a, &a), 0.0);
        }

        #[test]
        fn kde_integrates_to_one(xs in prop::collection::vec(0.0..3.0f64, 2..200), reflect in any::<bool>()) {
            let bounds = if reflect { KdeBounds { lower: Some(0.0), upper: Some(3.0) } } else { KdeBounds::default() };
            let k = kde(&xs, BandwidthRule::Silverman, bounds, 512).unwrap();
            prop_assert!(k.density.iter().all(|d| *d >= 0.0));
            // reflection at both ends loses the mass of second reflections
            let tol = if reflect && k.bandwidth > 0.5 { 2e-2 } else { 1e-3 };
            prop_assert!((k.integral() - 1.0).abs() <= tol, "integral {} bw {}", k.integral(), k.bandwidth);
        }
    }

    #[test]
    fn loglog_slope_cases() {
        let h = [0.4, 0.2, 0.1];
        let d: Vec<f64> = h.iter().map(|x: &f64| 3.0 * x.powf(0.7)).collect();
        assert!((loglog_slope(&h, &d) - 0.7).abs() < 1e-12);
        assert!(loglog_slope(&[0.1, 0.1], &[0.2, 0.3]).is_nan());
        assert!(loglog_slope(&h, &[0.1, 0.0, 0.2]).is_nan());
    }

    fn interval_bm() -> DiffusionSpec {
        DiffusionSpec::new(
            MetricGraph::interval(1.0).unwrap(),
            vec![ScaleFn::identity()],
            vec![SpeedMeasure::lebesgue()],
            vec![
                VertexCondition::new(VertexId(0), vec![1.0], 0.0).unwrap(),
                VertexCondition::new(VertexId(1), vec![1.0], 0.0).unwrap(),
            ],
        )
        .unwrap()
    }

    fn cfg(n: usize, seed: u64) -> EnsembleConfig {
        EnsembleConfig {
            horizon: 0.5,
            n_paths: n,
            sample_times: vec![0.1, 0.5],
            master_seed: seed,
            keep_paths: false,
            stats: StatsConfig::default(),
        }
    }

    #[test]
    fn ensemble_counts_and_json_round_trip() {
        let spec = interval_bm();
        let sub = Subdivision::uniform(&spec, GridConfig::uniform(0.1)).unwrap();
        let mut engine = Engine::new(spec, sub, KernelPolicy::Exact).unwrap();
        let ens = run_ensemble(&mut engine, GraphPoint::new(0, 0.5), &cfg(500, 1)).unwrap();
        let doc = StatsDocument::from_json(&ens.stats.to_json()).unwrap();
        assert_eq!(doc, ens.stats.document());
        for ts in &ens.stats.times {
            let total: u64 = ts.vertex_count + ts.edges.values().map(|e| e.count).sum::<u64>();
            assert_eq!(total, 500);
        }
        assert!(ens.stats.vertex_fraction >= 0.0 && ens.stats.vertex_fraction < 0.1);
        assert_eq!(marginal_distance(&ens.stats, &ens.stats, 0.5), Ok(0.0));
        assert_eq!(marginal_distance(&ens.stats, &ens.stats, 0.3), Err(AnalysisError::TimeNotSampled(0.3)));

        let (x95, tails) = ens.stats.tail_masses(0.5, 0.95).unwrap();
        let m = ens.stats.marginal(0.5).unwrap();
        let beyond = m.edge_coords[0].iter().filter(|&&c| c >= x95).count() as f64 / 500.0;
        assert!(x95 > 0.5 && x95 < 1.0);
        // smoothing moves some mass across the cut, but not much
        assert!((tails[0] - beyond).abs() < 0.05, "{} vs {beyond}", tails[0]);

        let one = run_ensemble(&mut engine, GraphPoint::new(0, 0.5), &cfg(1, 1)).unwrap();
        assert_eq!(one.stats.n_paths, 1);
        assert!(one.stats.times.iter().all(|t| t.edges["e0"].kde.is_none()));
    }

    #[test]
    fn ensemble_is_reproducible_across_thread_counts() {
        let spec = interval_bm();
        let sub = Subdivision::uniform(&spec, GridConfig::uniform(0.1)).unwrap();
        let run = |threads| {
            let mut engine = Engine::new(spec.clone(), sub.clone(), KernelPolicy::Exact).unwrap();
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_ensemble(&mut engine, GraphPoint::new(0, 0.3), &cfg(300, 9)))
                .unwrap()
                .stats
                .to_json()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let spec = interval_bm();
        let sub = Subdivision::uniform(&spec, GridConfig::uniform(0.2)).unwrap();
        let mut engine = Engine::new(spec, sub, KernelPolicy::Exact).unwrap();
        let ens = run_ensemble(&mut engine, GraphPoint::new(0, 0.5), &cfg(50, 2)).unwrap();
        let mut doc = ens.stats.document();
        doc.times.get_mut("0.5").unwrap().edges.get_mut("e0").unwrap().count += 1;
        let err = StatsDocument::from_json(&serde_json::to_string(&doc).unwrap()).unwrap_err();
        assert!(err.to_string().contains("times.0.5"), "{err}");
        doc.times.get_mut("0.5").unwrap().edges.remove("e0");
        assert!(StatsDocument::from_json(&serde_json::to_string(&doc).unwrap()).is_err());
        assert!(matches!(StatsDocument::from_json("{\"n_paths\": 1}"), Err(AnalysisError::Schema(_))));
    }

    #[test]
    fn identical_grids_give_degenerate_report() {
        let spec = interval_bm();
        let report = self_convergence(
            &spec,
            GraphPoint::new(0, 0.5),
            &ConvergenceConfig {
                grid: GridConfig::uniform(0.1),
                h_list: vec![0.1, 0.1, 0.1],
                policy: KernelPolicy::Exact,
                frontier_policy: FrontierPolicy::Error,
                horizon: 0.2,
                n_paths: 200,
                master_seed: 4,
            },
        )
        .unwrap();
        assert!(report.degenerate && report.slope.is_nan());
        assert_eq!(report.distance_to_finest, vec![0.0, 0.0]);
    }
}
