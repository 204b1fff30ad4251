//! Sampling of the grid random walk.
//!
//! A walk at node `x` picks an exit `y` of the cell centered at `x` with the
//! kernel probability and advances the clock by the conditional exit time of
//! that exit. Every path draws from its own ChaCha stream, selected by the
//! path id under one master seed, so results do not depend on scheduling.
//!
//! Walks that reach the frontier of an unbounded edge pause; the [`Engine`]
//! extends the grid and the table, then resumes them with their RNG intact.

use crate::diffusion::DiffusionSpec;
use crate::graph::{EdgeId, GraphError, GraphPoint, Location};
use crate::kernel::{interior_exit_prob, vertex_exit_prob, KernelError, KernelPolicy, KernelTable, VertexCell};
use crate::subdivision::{CellShape, NodeId, Subdivision, SubdivisionError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};
use std::sync::Arc;
use thiserror::Error;

pub const ZERO_TIME_LIMIT: u64 = 1_000_000;
pub const DEFAULT_MAX_EXTENSIONS: u32 = 64;
// Grid nodes closer than this are taken to coincide with a start point.
const COORD_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("start point ({edge}, {coord}) is outside the generated region")]
    OutsideGeneratedRegion { edge: EdgeId, coord: f64 },
    #[error("path {path}: frontier of edge {edge} cannot be extended further")]
    FrontierExhausted { path: u64, edge: EdgeId },
    #[error("path {path}: {steps} consecutive zero-time steps at node {node}")]
    ZeroTimeLoop { path: u64, node: NodeId, steps: u64 },
    #[error("time {t} is outside the path's range [0, {end}]")]
    TimeOutOfRange { t: f64, end: f64 },
    #[error("node {0} has no kernel row")]
    MissingRow(NodeId),
    #[error("sampling needs identity scales on every edge")]
    NotNaturalScale,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Subdivision(#[from] SubdivisionError),
    #[error("paths csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("path {0} is not in the file")]
    MissingPath(u64),
}

/// What happens when a walk reaches a frontier that cannot move further.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrontierPolicy {
    #[default]
    Error,
    /// The walk stays at the frontier node until the horizon.
    Absorb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialDistribution {
    pub support: Vec<NodeId>,
    pub weights: Vec<f64>,
}

impl InitialDistribution {
    pub fn point(node: NodeId) -> Self {
        Self {
            support: vec![node],
            weights: vec![1.0],
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> NodeId {
        if self.support.len() == 1 {
            return self.support[0];
        }
        pick(&self.weights, rng.random::<f64>()).map_or(*self.support.last().unwrap(), |k| self.support[k])
    }
}

/// First index whose cumulative weight exceeds `u`.
fn pick(weights: &[f64], u: f64) -> Option<usize> {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Some(k);
        }
    }
    None
}

/// Point mass on a grid node, or the exit distribution of the cell centered
/// at the nearest grid node.
pub fn initial_distribution(
    spec: &DiffusionSpec,
    sub: &Subdivision,
    x0: GraphPoint,
) -> Result<InitialDistribution, SamplerError> {
    let graph = spec.graph();
    if let Location::Vertex(v) = graph.locate(x0)? {
        let node = sub.vertex_node(v).expect("vertex on an edge has a node");
        return Ok(InitialDistribution::point(node));
    }
    let e = x0.edge;
    let coords = sub.edge_coords(e);
    let ids = sub.edge_nodes(e);
    let x = x0.coord;
    if x > *coords.last().unwrap() {
        return Err(SamplerError::OutsideGeneratedRegion { edge: e, coord: x });
    }
    let k = coords.partition_point(|&c| c < x);
    if (coords[k] - x).abs() <= COORD_TOL {
        return Ok(InitialDistribution::point(ids[k]));
    }
    if k > 0 && (x - coords[k - 1]).abs() <= COORD_TOL {
        return Ok(InitialDistribution::point(ids[k - 1]));
    }
    // x lies strictly between nodes k-1 and k
    let (left, right) = (k - 1, k);
    let mut nearest = if x - coords[left] <= coords[right] - x { left } else { right };
    if sub.cell_of(ids[nearest]).is_none() {
        nearest = if nearest == left { right } else { left };
    }
    let cell = sub.cell_of(ids[nearest]).ok_or(SamplerError::MissingRow(ids[nearest]))?;
    match &cell.shape {
        CellShape::Interior {
            edge,
            a,
            b,
            left,
            right,
            ..
        } => {
            let (to_b, to_a) = interior_exit_prob(spec, *edge, *a, *b, x)?;
            Ok(InitialDistribution {
                support: vec![*left, *right],
                weights: vec![to_a, to_b],
            })
        }
        CellShape::Vertex { arms, .. } => {
            let vc = VertexCell::from_cell(spec, cell)?;
            let from = vc.locate(spec, x0)?;
            let weights = (0..arms.len())
                .map(|j| vertex_exit_prob(&vc, from, j))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(InitialDistribution {
                support: arms.iter().map(|a| a.boundary).collect(),
                weights,
            })
        }
    }
}

/// A sampled walk. `states[k]` is held on `[jump_times[k], jump_times[k+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub path_id: u64,
    pub jump_times: Vec<f64>,
    pub states: Vec<NodeId>,
    /// The walk was stopped at a frontier; its last entry repeats the state
    /// at the horizon.
    pub absorbed: bool,
}

impl Path {
    pub fn end_time(&self) -> f64 {
        *self.jump_times.last().unwrap()
    }

    /// Right-continuous value at time `t`.
    pub fn value_at(&self, t: f64) -> Result<NodeId, SamplerError> {
        let end = self.end_time();
        if !(t >= 0.0 && t <= end) {
            return Err(SamplerError::TimeOutOfRange { t, end });
        }
        let k = self.jump_times.partition_point(|&s| s <= t) - 1;
        Ok(self.states[k])
    }
}

pub fn value_at(path: &Path, t: f64) -> Result<NodeId, SamplerError> {
    path.value_at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CursorState {
    Running,
    /// Paused at the frontier node of this edge.
    AtFrontier(EdgeId),
    Done,
}

/// A resumable walk that records its states at fixed sample times, the time
/// spent at graph vertices, and optionally the full path.
#[derive(Debug, Clone)]
pub struct PathCursor {
    path_id: u64,
    rng: ChaCha8Rng,
    horizon: f64,
    time: f64,
    node: NodeId,
    steps: u64,
    zero_run: u64,
    sample_times: Arc<[f64]>,
    samples: Vec<NodeId>,
    vertex_time: f64,
    record: Option<Path>,
    state: CursorState,
    absorbed: bool,
}

impl PathCursor {
    /// `sample_times` must be sorted and lie in `[0, horizon]`.
    pub fn new(
        init: &InitialDistribution,
        horizon: f64,
        master_seed: u64,
        path_id: u64,
        sample_times: Arc<[f64]>,
        keep_path: bool,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(path_id);
        let node = init.draw(&mut rng);
        let record = keep_path.then(|| Path {
            path_id,
            jump_times: vec![0.0],
            states: vec![node],
            absorbed: false,
        });
        Self {
            path_id,
            rng,
            horizon,
            time: 0.0,
            node,
            steps: 0,
            zero_run: 0,
            samples: Vec::with_capacity(sample_times.len()),
            sample_times,
            vertex_time: 0.0,
            record,
            state: CursorState::Running,
            absorbed: false,
        }
    }

    pub fn path_id(&self) -> u64 {
        self.path_id
    }

    pub fn state(&self) -> CursorState {
        self.state
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Node at each sample time; complete once the cursor is done.
    pub fn samples(&self) -> &[NodeId] {
        &self.samples
    }

    /// Time spent at graph-vertex nodes within `[0, horizon]`.
    pub fn vertex_time(&self) -> f64 {
        self.vertex_time
    }

    pub fn absorbed(&self) -> bool {
        self.absorbed
    }

    pub fn path(&self) -> Option<&Path> {
        self.record.as_ref()
    }

    pub fn into_path(self) -> Option<Path> {
        self.record
    }

    /// Walks until the horizon or a frontier node.
    pub fn advance(&mut self, sub: &Subdivision, table: &KernelTable) -> Result<CursorState, SamplerError> {
        if self.state == CursorState::Done {
            return Ok(self.state);
        }
        loop {
            if self.time >= self.horizon {
                self.finish();
                return Ok(self.state);
            }
            let row = match table.row(self.node) {
                Some(row) => row,
                None if sub.is_frontier(self.node) => {
                    self.state = CursorState::AtFrontier(sub.node(self.node).edge);
                    return Ok(self.state);
                }
                None => return Err(SamplerError::MissingRow(self.node)),
            };
            let u = self.rng.random::<f64>();
            let k = row
                .exits
                .iter()
                .position({
                    let mut acc = 0.0;
                    move |e| {
                        acc += e.p;
                        u < acc
                    }
                })
                .unwrap_or(row.exits.len() - 1);
            let exit = row.exits[k];
            let next_time = self.time + exit.t;
            self.hold(next_time, sub);
            if exit.t == 0.0 {
                self.zero_run += 1;
                if self.zero_run > ZERO_TIME_LIMIT {
                    return Err(SamplerError::ZeroTimeLoop {
                        path: self.path_id,
                        node: self.node,
                        steps: self.zero_run,
                    });
                }
            } else {
                self.zero_run = 0;
            }
            self.time = next_time;
            self.node = exit.to;
            self.steps += 1;
            if let Some(p) = &mut self.record {
                p.jump_times.push(next_time);
                p.states.push(exit.to);
            }
        }
    }

    /// Books the stay at the current node on `[time, until)`.
    fn hold(&mut self, until: f64, sub: &Subdivision) {
        while self.samples.len() < self.sample_times.len() && self.sample_times[self.samples.len()] < until {
            self.samples.push(self.node);
        }
        if sub.node(self.node).vertex.is_some() {
            self.vertex_time += until.min(self.horizon) - self.time.min(self.horizon);
        }
    }

    fn finish(&mut self) {
        while self.samples.len() < self.sample_times.len() {
            self.samples.push(self.node);
        }
        self.state = CursorState::Done;
    }

    /// Stops the walk at its current node until the horizon.
    pub fn absorb(&mut self, sub: &Subdivision) {
        let horizon = self.horizon.max(self.time);
        self.hold(horizon, sub);
        if let Some(p) = &mut self.record {
            p.jump_times.push(horizon);
            p.states.push(self.node);
            p.absorbed = true;
        }
        self.time = horizon;
        self.absorbed = true;
        self.finish();
    }
}

/// Grid, kernel table and extension bookkeeping shared by all walks.
#[derive(Debug, Clone)]
pub struct Engine {
    spec: DiffusionSpec,
    sub: Subdivision,
    table: KernelTable,
    frontier_policy: FrontierPolicy,
    max_extensions: u32,
    extensions: Vec<u32>,
    exhausted: Vec<bool>,
}

impl Engine {
    pub fn new(spec: DiffusionSpec, sub: Subdivision, policy: KernelPolicy) -> Result<Self, SamplerError> {
        if !spec.is_nse() {
            return Err(SamplerError::NotNaturalScale);
        }
        let table = KernelTable::build(&spec, &sub, policy)?;
        Ok(Self::with_table(spec, sub, table))
    }

    /// Uses a prebuilt table; identity scales are not checked.
    pub fn with_table(spec: DiffusionSpec, sub: Subdivision, table: KernelTable) -> Self {
        let n = spec.graph().n_edges();
        Self {
            spec,
            sub,
            table,
            frontier_policy: FrontierPolicy::Error,
            max_extensions: DEFAULT_MAX_EXTENSIONS,
            extensions: vec![0; n],
            exhausted: vec![false; n],
        }
    }

    pub fn with_frontier_policy(mut self, policy: FrontierPolicy) -> Self {
        self.frontier_policy = policy;
        self
    }

    pub fn with_max_extensions(mut self, n: u32) -> Self {
        self.max_extensions = n;
        self
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }

    pub fn subdivision(&self) -> &Subdivision {
        &self.sub
    }

    pub fn table(&self) -> &KernelTable {
        &self.table
    }

    /// Pushes the frontier of `e` once. `Ok(false)` when no further extension
    /// is possible.
    pub fn extend(&mut self, e: EdgeId) -> Result<bool, SamplerError> {
        if self.exhausted[e.0] || self.extensions[e.0] >= self.max_extensions {
            self.exhausted[e.0] = true;
            return Ok(false);
        }
        let next = match self.sub.next_frontier(e) {
            Ok(f) => f,
            Err(SubdivisionError::FrontierLimit(_)) => {
                self.exhausted[e.0] = true;
                return Ok(false);
            }
            Err(err) => return Err(err.into()),
        };
        let cells = self.sub.extend_edge(&self.spec, e, next)?;
        self.table.extend(&self.spec, &self.sub, &cells)?;
        self.extensions[e.0] += 1;
        Ok(true)
    }

    /// Initial distribution at `x0`, extending the grid until it covers `x0`.
    pub fn initial_distribution(&mut self, x0: GraphPoint) -> Result<InitialDistribution, SamplerError> {
        loop {
            match initial_distribution(&self.spec, &self.sub, x0) {
                Err(SamplerError::OutsideGeneratedRegion { edge, coord }) => {
                    if !self.extend(edge)? {
                        return Err(SamplerError::OutsideGeneratedRegion { edge, coord });
                    }
                }
                other => return other,
            }
        }
    }

    /// Advances all cursors to completion. Walks run in parallel between
    /// extension rounds; extensions happen sequentially in edge order.
    pub fn run(&mut self, cursors: &mut [PathCursor]) -> Result<(), SamplerError> {
        loop {
            let sub = &self.sub;
            let table = &self.table;
            let states: Vec<CursorState> = cursors
                .par_iter_mut()
                .map(|c| c.advance(sub, table))
                .collect::<Result<_, _>>()?;
            let waiting: BTreeSet<EdgeId> = states
                .iter()
                .filter_map(|s| match s {
                    CursorState::AtFrontier(e) => Some(*e),
                    _ => None,
                })
                .collect();
            if waiting.is_empty() {
                return Ok(());
            }
            for e in waiting {
                if !self.extend(e)? {
                    for c in cursors.iter_mut() {
                        if c.state() == CursorState::AtFrontier(e) {
                            match self.frontier_policy {
                                FrontierPolicy::Absorb => c.absorb(&self.sub),
                                FrontierPolicy::Error => {
                                    return Err(SamplerError::FrontierExhausted {
                                        path: c.path_id(),
                                        edge: e,
                                    })
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// One full path.
    pub fn sample_path(
        &mut self,
        init: &InitialDistribution,
        horizon: f64,
        master_seed: u64,
        path_id: u64,
    ) -> Result<Path, SamplerError> {
        let mut cursor = [PathCursor::new(init, horizon, master_seed, path_id, Arc::from(vec![]), true)];
        self.run(&mut cursor)?;
        let [c] = cursor;
        Ok(c.into_path().expect("recording cursor"))
    }
}

/// Walk over a fixed table; reaching a frontier is an error.
pub fn sample_path(
    sub: &Subdivision,
    table: &KernelTable,
    init: &InitialDistribution,
    horizon: f64,
    master_seed: u64,
    path_id: u64,
) -> Result<Path, SamplerError> {
    let mut c = PathCursor::new(init, horizon, master_seed, path_id, Arc::from(vec![]), true);
    match c.advance(sub, table)? {
        CursorState::AtFrontier(edge) => Err(SamplerError::FrontierExhausted { path: path_id, edge }),
        _ => Ok(c.into_path().expect("recording cursor")),
    }
}

/// `path_id,k,time,edge,coord`, one row per jump epoch.
pub fn write_paths_csv<'a>(
    sub: &Subdivision,
    paths: impl IntoIterator<Item = &'a Path>,
    mut out: impl Write,
) -> io::Result<()> {
    writeln!(out, "path_id,k,time,edge,coord")?;
    for p in paths {
        for (k, (t, &node)) in p.jump_times.iter().zip(&p.states).enumerate() {
            let n = sub.node(node);
            writeln!(out, "{},{},{:?},{},{:?}", p.path_id, k, t, n.edge.0, n.coord)?;
        }
    }
    Ok(())
}

/// One row of a paths CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathRow {
    pub path_id: u64,
    pub k: usize,
    pub time: f64,
    pub edge: usize,
    pub coord: f64,
}

/// Reads and checks a paths CSV: epochs of each path are numbered from 0
/// and their times do not decrease.
pub fn read_paths_csv(input: impl BufRead) -> Result<Vec<PathRow>, SamplerError> {
    let csv_err = |line: usize, message: String| SamplerError::Csv { line, message };
    let mut lines = input.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == "path_id,k,time,edge,coord" => {}
        Some((_, Ok(h))) => return Err(csv_err(1, format!("unexpected header `{h}`"))),
        Some((_, Err(e))) => return Err(csv_err(1, e.to_string())),
        None => return Err(csv_err(1, "empty file".into())),
    }
    let mut rows: Vec<PathRow> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| csv_err(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(csv_err(line_no, format!("expected 5 fields, got {}", f.len())));
        }
        let bad = |what: &str| csv_err(line_no, format!("cannot parse {what}"));
        let row = PathRow {
            path_id: f[0].parse().map_err(|_| bad("path_id"))?,
            k: f[1].parse().map_err(|_| bad("k"))?,
            time: f[2].parse().map_err(|_| bad("time"))?,
            edge: f[3].parse().map_err(|_| bad("edge"))?,
            coord: f[4].parse().map_err(|_| bad("coord"))?,
        };
        match rows.last() {
            Some(prev) if prev.path_id == row.path_id => {
                if row.k != prev.k + 1 || row.time < prev.time {
                    return Err(csv_err(line_no, "epochs out of order".into()));
                }
            }
            _ if row.k != 0 => return Err(csv_err(line_no, "path does not start at k = 0".into())),
            _ => {}
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Rows of one path.
pub fn select_path(rows: &[PathRow], path_id: u64) -> Result<Vec<PathRow>, SamplerError> {
    let out: Vec<PathRow> = rows.iter().filter(|r| r.path_id == path_id).copied().collect();
    if out.is_empty() {
        return Err(SamplerError::MissingPath(path_id));
    }
    Ok(out)
}

/// `path_id,t_1,...,t_m` with `edge:coord` entries.
pub fn write_samples_csv(
    sub: &Subdivision,
    sample_times: &[f64],
    cursors: &[PathCursor],
    mut out: impl Write,
) -> io::Result<()> {
    write!(out, "path_id")?;
    for t in sample_times {
        write!(out, ",{t:?}")?;
    }
    writeln!(out)?;
    for c in cursors {
        write!(out, "{}", c.path_id())?;
        for &node in c.samples() {
            let n = sub.node(node);
            write!(out, ",{}:{:?}", n.edge.0, n.coord)?;
        }
        writeln!(out)?;
    }
    Ok(())
}
