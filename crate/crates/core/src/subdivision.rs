//! Subdivisions of a metric graph into cells, and their thinness.
//!
//! Every grid node is the center of exactly one cell, except the frontier
//! node at the generated end of an unbounded edge. Interior cells span the
//! two neighbouring nodes on an edge; the cell of a graph vertex is a
//! neighbourhood with one radius per edge slot, whose far ends are grid nodes.
//!
//! Unbounded edges (infinite, or open at the far end) are generated up to a
//! frontier that can be pushed outwards with [`Subdivision::extend_edge`].
//! Extension only appends nodes and cells; existing ones never change.

use crate::diffusion::{DiffusionError, DiffusionSpec};
use crate::graph::{EdgeEnd, EdgeId, Incidence, MetricGraph, VertexId};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

pub type NodeId = usize;
pub type CellId = usize;

pub const DEFAULT_FRONTIER: f64 = 10.0;
pub const MAX_BISECTION_LEVELS: u32 = 30;
// Open edges start with their frontier at l (1 - 2^-4).
const OPEN_FRONTIER_FRACTION: f64 = 1.0 / 16.0;
// Open edges are never generated closer than this fraction of l to the open end.
const OPEN_FRONTIER_LIMIT: f64 = 1e-10;
// Relative slack when comparing against refinement targets.
const TARGET_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubdivisionError {
    #[error("step {h} is too large: must be below {limit} (half the shortest finite edge)")]
    StepTooLarge { h: f64, limit: f64 },
    #[error("refinement cap of {levels} bisection levels exceeded at {location} (thinness {thinness})")]
    RefinementCapExceeded {
        location: String,
        thinness: f64,
        levels: u32,
    },
    #[error("subdivision has no vertex cells")]
    NoVertexCells,
    #[error("edge {0} is closed and cannot be extended")]
    NotExtendable(EdgeId),
    #[error("edge {edge}: new frontier {requested} must lie beyond {current} and inside the edge")]
    BadFrontier {
        edge: EdgeId,
        current: f64,
        requested: f64,
    },
    #[error("edge {0} has reached its extension limit")]
    FrontierLimit(EdgeId),
    #[error("vertex radius {radius} does not fit on edge {edge}")]
    RadiusTooLarge { edge: EdgeId, radius: f64 },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// How the radii of vertex cells are chosen from the step `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum VertexRadiusRule {
    /// `h²` on every edge slot.
    StepSquared,
    /// `c · h` on every edge slot.
    StepMultiple { factor: f64 },
    Fixed { radius: f64 },
}

impl Default for VertexRadiusRule {
    fn default() -> Self {
        VertexRadiusRule::StepSquared
    }
}

impl VertexRadiusRule {
    pub fn radius(&self, h: f64) -> f64 {
        match *self {
            VertexRadiusRule::StepSquared => h * h,
            VertexRadiusRule::StepMultiple { factor } => factor * h,
            VertexRadiusRule::Fixed { radius } => radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    Uniform,
    Adapted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub mode: GridMode,
    pub h: f64,
    #[serde(default)]
    pub vertex_radius: VertexRadiusRule,
    /// Initial extent of infinite edges.
    #[serde(default = "default_frontier")]
    pub frontier: f64,
}

fn default_frontier() -> f64 {
    DEFAULT_FRONTIER
}

impl GridConfig {
    pub fn uniform(h: f64) -> Self {
        Self {
            mode: GridMode::Uniform,
            h,
            vertex_radius: VertexRadiusRule::StepSquared,
            frontier: DEFAULT_FRONTIER,
        }
    }

    pub fn adapted(h: f64) -> Self {
        Self {
            mode: GridMode::Adapted,
            ..Self::uniform(h)
        }
    }

    pub fn with_frontier(mut self, frontier: f64) -> Self {
        self.frontier = frontier;
        self
    }

    pub fn with_vertex_radius(mut self, rule: VertexRadiusRule) -> Self {
        self.vertex_radius = rule;
        self
    }

    /// Largest admissible cell thinness for adapted grids.
    pub fn thinness_target(&self) -> f64 {
        self.h * self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridNode {
    pub id: NodeId,
    /// For a graph vertex, the edge of its first slot.
    pub edge: EdgeId,
    pub coord: f64,
    pub vertex: Option<VertexId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexArm {
    pub incidence: Incidence,
    /// Radius in the coordinate reoriented away from the vertex.
    pub radius: f64,
    pub boundary: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellShape {
    Interior {
        edge: EdgeId,
        a: f64,
        b: f64,
        center: f64,
        left: NodeId,
        right: NodeId,
    },
    Vertex {
        vertex: VertexId,
        arms: Vec<VertexArm>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: CellId,
    pub center: NodeId,
    pub shape: CellShape,
    pub thinness: f64,
}

impl Cell {
    /// `|U|`: width of an interior cell, largest radius of a vertex cell.
    pub fn size(&self) -> f64 {
        match &self.shape {
            CellShape::Interior { a, b, .. } => b - a,
            CellShape::Vertex { arms, .. } => arms.iter().map(|a| a.radius).fold(0.0, f64::max),
        }
    }

    /// Grid nodes on the cell boundary.
    pub fn boundary(&self) -> Vec<NodeId> {
        match &self.shape {
            CellShape::Interior { left, right, .. } => vec![*left, *right],
            CellShape::Vertex { arms, .. } => arms.iter().map(|a| a.boundary).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct EdgeGrid {
    /// Node ids sorted by coordinate, endpoints included.
    nodes: Vec<NodeId>,
    coords: Vec<f64>,
    /// Bisection depth of the interval `[coords[i], coords[i+1]]`.
    depth: Vec<u32>,
    frontier: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Subdivision {
    graph: MetricGraph,
    config: GridConfig,
    nodes: Vec<GridNode>,
    edges: Vec<EdgeGrid>,
    cells: Vec<Cell>,
    cell_of: Vec<Option<CellId>>,
    vertex_node: Vec<Option<NodeId>>,
    quantifier: f64,
    step: f64,
}

/// Coordinates before node ids are assigned.
struct Layout {
    coords: Vec<Vec<f64>>,
    depth: Vec<Vec<u32>>,
    // radius per vertex slot, aligned with graph.incidences(v)
    radii: Vec<Vec<f64>>,
    radius_depth: Vec<u32>,
}

impl Subdivision {
    /// Nodes spaced `h` along every edge, vertex cells of radius `rule(h)`.
    pub fn uniform(spec: &DiffusionSpec, config: GridConfig) -> Result<Self, SubdivisionError> {
        let layout = uniform_layout(spec.graph(), &config)?;
        Self::materialize(spec, config, layout)
    }

    /// Uniform grid bisected until every cell has thinness at most `h²` and
    /// width at most `h`.
    pub fn adapted(spec: &DiffusionSpec, config: GridConfig) -> Result<Self, SubdivisionError> {
        let config = GridConfig {
            mode: GridMode::Adapted,
            ..config
        };
        let mut layout = uniform_layout(spec.graph(), &config)?;
        refine_layout(spec, &config, &mut layout)?;
        Self::materialize(spec, config, layout)
    }

    pub fn build(spec: &DiffusionSpec, config: GridConfig) -> Result<Self, SubdivisionError> {
        match config.mode {
            GridMode::Uniform => Self::uniform(spec, config),
            GridMode::Adapted => Self::adapted(spec, config),
        }
    }

    fn materialize(
        spec: &DiffusionSpec,
        config: GridConfig,
        layout: Layout,
    ) -> Result<Self, SubdivisionError> {
        let graph = spec.graph().clone();
        let mut nodes = Vec::new();
        let mut vertex_node = vec![None; graph.n_vertices()];
        for v in graph.vertices() {
            if let Some(p) = graph.vertex_point(v) {
                let id = nodes.len();
                nodes.push(GridNode {
                    id,
                    edge: p.edge,
                    coord: p.coord,
                    vertex: Some(v),
                });
                vertex_node[v.0] = Some(id);
            }
        }
        let mut edges = Vec::with_capacity(graph.n_edges());
        for (edge, (coords, depth)) in graph
            .edges()
            .iter()
            .zip(layout.coords.into_iter().zip(layout.depth))
        {
            let last = coords.len() - 1;
            let mut ids = Vec::with_capacity(coords.len());
            for (i, &x) in coords.iter().enumerate() {
                let id = if i == 0 {
                    vertex_node[edge.tail.0].expect("tail vertex has a node")
                } else if i == last && edge.head.is_some() {
                    vertex_node[edge.head.unwrap().0].expect("head vertex has a node")
                } else {
                    let id = nodes.len();
                    nodes.push(GridNode {
                        id,
                        edge: edge.id,
                        coord: x,
                        vertex: None,
                    });
                    id
                };
                ids.push(id);
            }
            let frontier = edge.is_unbounded().then(|| ids[last]);
            edges.push(EdgeGrid {
                nodes: ids,
                coords,
                depth,
                frontier,
            });
        }

        let mut sub = Self {
            graph,
            config,
            cell_of: vec![None; nodes.len()],
            nodes,
            edges,
            cells: Vec::new(),
            vertex_node,
            quantifier: 0.0,
            step: 0.0,
        };
        for id in 0..sub.nodes.len() {
            if let Some(shape) = sub.shape_for(id, &layout.radii) {
                sub.push_cell(spec, id, shape)?;
            }
        }
        Ok(sub)
    }

    fn shape_for(&self, id: NodeId, radii: &[Vec<f64>]) -> Option<CellShape> {
        let node = self.nodes[id];
        if let Some(v) = node.vertex {
            let slots = self.graph.incidences(v).ok()?;
            let arms = slots
                .iter()
                .zip(&radii[v.0])
                .map(|(&inc, &radius)| {
                    let grid = &self.edges[inc.edge.0];
                    let idx = match inc.end {
                        EdgeEnd::Tail => 1,
                        EdgeEnd::Head => grid.nodes.len() - 2,
                    };
                    VertexArm {
                        incidence: inc,
                        radius,
                        boundary: grid.nodes[idx],
                    }
                })
                .collect();
            return Some(CellShape::Vertex { vertex: v, arms });
        }
        let grid = &self.edges[node.edge.0];
        if grid.frontier == Some(id) {
            return None;
        }
        let i = grid.nodes.iter().position(|&n| n == id)?;
        Some(CellShape::Interior {
            edge: node.edge,
            a: grid.coords[i - 1],
            b: grid.coords[i + 1],
            center: grid.coords[i],
            left: grid.nodes[i - 1],
            right: grid.nodes[i + 1],
        })
    }

    fn push_cell(
        &mut self,
        spec: &DiffusionSpec,
        center: NodeId,
        shape: CellShape,
    ) -> Result<CellId, SubdivisionError> {
        let thinness = shape_thinness(spec, &shape)?;
        let id = self.cells.len();
        let cell = Cell {
            id,
            center,
            shape,
            thinness,
        };
        self.quantifier = self.quantifier.max(thinness);
        self.step = self.step.max(cell.size());
        self.cells.push(cell);
        self.cell_of[center] = Some(id);
        Ok(id)
    }

    pub fn graph(&self) -> &MetricGraph {
        &self.graph
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[GridNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &GridNode {
        &self.nodes[id]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: CellId) -> &Cell {
        &self.cells[id]
    }

    /// Cell centered at `node`, if any (frontier nodes have none).
    pub fn cell_of(&self, node: NodeId) -> Option<&Cell> {
        self.cell_of.get(node).copied().flatten().map(|c| &self.cells[c])
    }

    pub fn vertex_node(&self, v: VertexId) -> Option<NodeId> {
        self.vertex_node.get(v.0).copied().flatten()
    }

    pub fn is_frontier(&self, node: NodeId) -> bool {
        let n = &self.nodes[node];
        n.vertex.is_none() && self.edges[n.edge.0].frontier == Some(node)
    }

    /// Current frontier coordinate of an unbounded edge.
    pub fn frontier(&self, e: EdgeId) -> Option<f64> {
        let grid = &self.edges[e.0];
        grid.frontier.map(|_| *grid.coords.last().unwrap())
    }

    /// Node coordinates along an edge, endpoints included.
    pub fn edge_coords(&self, e: EdgeId) -> &[f64] {
        &self.edges[e.0].coords
    }

    pub fn edge_nodes(&self, e: EdgeId) -> &[NodeId] {
        &self.edges[e.0].nodes
    }

    /// `|Δ|_X`: largest cell thinness.
    pub fn quantifier(&self) -> f64 {
        self.quantifier
    }

    /// `|Δ|`: largest cell size.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn vertex_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells
            .iter()
            .filter(|c| matches!(c.shape, CellShape::Vertex { .. }))
    }

    /// `c_Δ`: the minimum over vertex cells of `min_i(β_i/u_i) / Σ_i β_i/u_i`.
    pub fn c_delta(&self, spec: &DiffusionSpec) -> Result<f64, SubdivisionError> {
        let mut out: Option<f64> = None;
        for cell in self.vertex_cells() {
            if let CellShape::Vertex { vertex, arms } = &cell.shape {
                let radii: Vec<f64> = arms.iter().map(|a| a.radius).collect();
                let c = vertex_cell_constant(spec.vertex_condition(*vertex).betas(), &radii);
                out = Some(out.map_or(c, |o| o.min(c)));
            }
        }
        out.ok_or(SubdivisionError::NoVertexCells)
    }

    /// Largest `ε` such that every vertex cell is `(ε, V)`-symmetric.
    pub fn symmetry_epsilon(&self) -> Result<f64, SubdivisionError> {
        let mut out: Option<f64> = None;
        for cell in self.vertex_cells() {
            if let CellShape::Vertex { arms, .. } = &cell.shape {
                let radii: Vec<f64> = arms.iter().map(|a| a.radius).collect();
                let eps = radius_symmetry(&radii);
                out = Some(out.map_or(eps, |o| o.min(eps)));
            }
        }
        out.ok_or(SubdivisionError::NoVertexCells)
    }

    /// Default next frontier: doubled for infinite edges, half the remaining
    /// distance for open edges.
    pub fn next_frontier(&self, e: EdgeId) -> Result<f64, SubdivisionError> {
        let edge = &self.graph.edges()[e.0];
        let current = self.frontier(e).ok_or(SubdivisionError::NotExtendable(e))?;
        if edge.is_infinite() {
            Ok(2.0 * current.max(self.config.h))
        } else {
            let remaining = edge.length - current;
            if remaining <= OPEN_FRONTIER_LIMIT * edge.length {
                return Err(SubdivisionError::FrontierLimit(e));
            }
            Ok(edge.length - 0.5 * remaining)
        }
    }

    /// Pushes the frontier of an unbounded edge out to `new_frontier`, using
    /// the same local rule as the original build. Returns the new cells.
    pub fn extend_edge(
        &mut self,
        spec: &DiffusionSpec,
        e: EdgeId,
        new_frontier: f64,
    ) -> Result<Vec<CellId>, SubdivisionError> {
        let edge = self.graph.edges()[e.0].clone();
        let current = self.frontier(e).ok_or(SubdivisionError::NotExtendable(e))?;
        if !(new_frontier > current) || !(new_frontier < edge.length) {
            return Err(SubdivisionError::BadFrontier {
                edge: e,
                current,
                requested: new_frontier,
            });
        }
        let h = self.config.h;
        let mut coords = self.edges[e.0].coords.clone();
        let mut depth = self.edges[e.0].depth.clone();
        let frozen = coords.len() - 1;
        let n = ((new_frontier - current) / h).round().max(1.0) as usize;
        let spacing = (new_frontier - current) / n as f64;
        for k in 1..=n {
            coords.push(if k == n {
                new_frontier
            } else {
                current + spacing * k as f64
            });
            depth.push(0);
        }
        if self.config.mode == GridMode::Adapted {
            refine_edge(spec, &self.config, &edge, &mut coords, &mut depth, frozen)?;
        }

        let old_frontier = self.edges[e.0].frontier.expect("unbounded edge");
        let mut new_ids = Vec::new();
        for &x in &coords[frozen + 1..] {
            let id = self.nodes.len();
            self.nodes.push(GridNode {
                id,
                edge: e,
                coord: x,
                vertex: None,
            });
            self.cell_of.push(None);
            new_ids.push(id);
        }
        let grid = &mut self.edges[e.0];
        grid.nodes.extend(&new_ids);
        grid.coords = coords;
        grid.depth = depth;
        grid.frontier = new_ids.last().copied();

        let mut added = Vec::new();
        let centers: Vec<NodeId> = std::iter::once(old_frontier)
            .chain(new_ids[..new_ids.len() - 1].iter().copied())
            .collect();
        for id in centers {
            let shape = self
                .shape_for(id, &[])
                .expect("non-frontier edge node has a cell");
            added.push(self.push_cell(spec, id, shape)?);
        }
        Ok(added)
    }

    /// Extended copy; `self` is left untouched.
    pub fn lazy_extend(
        &self,
        spec: &DiffusionSpec,
        e: EdgeId,
        new_frontier: f64,
    ) -> Result<Subdivision, SubdivisionError> {
        let mut out = self.clone();
        out.extend_edge(spec, e, new_frontier)?;
        Ok(out)
    }

    /// Copy with one cell bisected: both intervals of an interior cell, or all
    /// radii of a vertex cell halved. Node and cell ids are reassigned.
    pub fn bisected(&self, spec: &DiffusionSpec, cell: CellId) -> Result<Subdivision, SubdivisionError> {
        let mut layout = self.layout();
        match &self.cells[cell].shape {
            CellShape::Interior { edge, center, .. } => {
                let coords = &mut layout.coords[edge.0];
                let depth = &mut layout.depth[edge.0];
                let i = coords.iter().position(|x| x == center).expect("center on edge");
                let edge_info = &self.graph.edges()[edge.0];
                let tail_arm = i == 1;
                let head_arm = edge_info.head.is_some() && i + 2 == coords.len();
                let mut marks = Vec::new();
                if !tail_arm {
                    marks.push(i - 1);
                }
                if !head_arm {
                    marks.push(i);
                }
                split_intervals(coords, depth, &marks);
            }
            CellShape::Vertex { vertex, .. } => {
                halve_radii(&self.graph, &mut layout, *vertex);
            }
        }
        Self::materialize(spec, self.config, layout)
    }

    fn layout(&self) -> Layout {
        let radii = self
            .graph
            .vertices()
            .map(|v| match self.vertex_node(v).and_then(|n| self.cell_of(n)) {
                Some(Cell {
                    shape: CellShape::Vertex { arms, .. },
                    ..
                }) => arms.iter().map(|a| a.radius).collect(),
                _ => Vec::new(),
            })
            .collect();
        Layout {
            coords: self.edges.iter().map(|g| g.coords.clone()).collect(),
            depth: self.edges.iter().map(|g| g.depth.clone()).collect(),
            radii,
            radius_depth: vec![0; self.graph.n_vertices()],
        }
    }

    /// Grid nodes as CSV: `node,edge,coord,vertex`.
    pub fn write_nodes_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "node,edge,coord,vertex")?;
        for n in &self.nodes {
            let v = n.vertex.map(|v| v.0.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", n.id, n.edge.0, n.coord, v)?;
        }
        Ok(())
    }

    /// Cells as CSV: `cell,center,kind,location,a,b,radii,thinness`.
    /// Radii are `;`-separated in slot order.
    pub fn write_cells_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "cell,center,kind,location,a,b,radii,thinness")?;
        for c in &self.cells {
            match &c.shape {
                CellShape::Interior { edge, a, b, .. } => writeln!(
                    out,
                    "{},{},interior,{},{},{},,{}",
                    c.id, c.center, edge.0, a, b, c.thinness
                )?,
                CellShape::Vertex { vertex, arms } => {
                    let radii: Vec<String> = arms.iter().map(|a| a.radius.to_string()).collect();
                    writeln!(
                        out,
                        "{},{},vertex,{},,,{},{}",
                        c.id,
                        c.center,
                        vertex.0,
                        radii.join(";"),
                        c.thinness
                    )?
                }
            }
        }
        Ok(())
    }
}

/// `(Σ β_i/u_i)^{-1} min_i β_i/u_i` for one vertex cell.
pub fn vertex_cell_constant(betas: &[f64], radii: &[f64]) -> f64 {
    let weights: Vec<f64> = betas.iter().zip(radii).map(|(b, u)| b / u).collect();
    let sum: f64 = weights.iter().sum();
    weights.iter().copied().fold(f64::INFINITY, f64::min) / sum
}

/// Smallest ratio `u_i/u_j` over pairs of radii; 1 for a single radius.
pub fn radius_symmetry(radii: &[f64]) -> f64 {
    let max = radii.iter().copied().fold(0.0, f64::max);
    let min = radii.iter().copied().fold(f64::INFINITY, f64::min);
    if radii.len() < 2 {
        1.0
    } else {
        min / max
    }
}

/// `|U|_X` of a cell.
pub fn cell_thinness(spec: &DiffusionSpec, cell: &Cell) -> Result<f64, SubdivisionError> {
    shape_thinness(spec, &cell.shape)
}

fn shape_thinness(spec: &DiffusionSpec, shape: &CellShape) -> Result<f64, SubdivisionError> {
    match shape {
        CellShape::Interior { edge, a, b, .. } => interior_thinness(spec, *edge, *a, *b),
        CellShape::Vertex { vertex, arms } => {
            let slots: Vec<Incidence> = arms.iter().map(|a| a.incidence).collect();
            let radii: Vec<f64> = arms.iter().map(|a| a.radius).collect();
            vertex_thinness(spec, *vertex, &slots, &radii)
        }
    }
}

/// `m((a, b)) · |s(b) - s(a)|` on edge `e`.
pub fn interior_thinness(spec: &DiffusionSpec, e: EdgeId, a: f64, b: f64) -> Result<f64, SubdivisionError> {
    let mass = spec.speed_mass(e, a, b)?;
    let scale = spec.scale(e);
    Ok(mass * (scale.eval(b) - scale.eval(a)).abs())
}

/// `ρ Σ ŝ(u_e)/β_e + Σ m̂((0, u_e)) ŝ(u_e)` over the slots of `v`.
pub fn vertex_thinness(
    spec: &DiffusionSpec,
    v: VertexId,
    slots: &[Incidence],
    radii: &[f64],
) -> Result<f64, SubdivisionError> {
    let cond = spec.vertex_condition(v);
    let mut sticky = 0.0;
    let mut diffusive = 0.0;
    for ((&inc, &u), &beta) in slots.iter().zip(radii).zip(cond.betas()) {
        let o = spec.oriented(inc);
        let su = o.scale.eval(u);
        let mass = o.speed.mass(0.0, u, spec.quad_panels())?;
        sticky += su / beta;
        diffusive += mass * su;
    }
    Ok(cond.rho() * sticky + diffusive)
}

fn uniform_layout(graph: &MetricGraph, config: &GridConfig) -> Result<Layout, SubdivisionError> {
    let h = config.h;
    let shortest = graph
        .edges()
        .iter()
        .map(|e| e.length)
        .fold(f64::INFINITY, f64::min);
    let limit = if shortest.is_finite() {
        shortest / 2.0
    } else {
        f64::INFINITY
    };
    if !(h > 0.0) || !(h < limit) {
        return Err(SubdivisionError::StepTooLarge { h, limit });
    }
    let r = config.vertex_radius.radius(h);

    let mut coords = Vec::with_capacity(graph.n_edges());
    for edge in graph.edges() {
        let l = edge.length;
        let r_head = if edge.head.is_some() { r } else { 0.0 };
        if !(r > 0.0) || r + r_head >= l {
            return Err(SubdivisionError::RadiusTooLarge {
                edge: edge.id,
                radius: r,
            });
        }
        let mut xs = vec![0.0, r];
        let (last, spaced) = if edge.is_infinite() {
            let f = (config.frontier / h).ceil().max(2.0) * h;
            (f, (1..(f / h).round() as usize).map(|k| k as f64 * h).collect::<Vec<_>>())
        } else if edge.head.is_some() {
            let n = (l / h).ceil() as usize;
            let d = l / n as f64;
            (l, (1..n).map(|k| k as f64 * d).collect())
        } else {
            let f = l * (1.0 - OPEN_FRONTIER_FRACTION);
            let n = (f / h).ceil() as usize;
            let d = f / n as f64;
            (f, (1..n).map(|k| k as f64 * d).collect())
        };
        let upper = if edge.head.is_some() { l - r } else { last };
        let gap = 1e-9 * h;
        xs.extend(spaced.into_iter().filter(|&x| x > r + gap && x < upper - gap));
        if edge.head.is_some() {
            xs.push(l - r);
        }
        xs.push(last);
        coords.push(xs);
    }
    let depth = coords.iter().map(|c: &Vec<f64>| vec![0; c.len() - 1]).collect();
    let radii = graph
        .vertices()
        .map(|v| vec![r; graph.incidences(v).map(|s| s.len()).unwrap_or(0)])
        .collect();
    Ok(Layout {
        coords,
        depth,
        radii,
        radius_depth: vec![0; graph.n_vertices()],
    })
}

fn refine_layout(spec: &DiffusionSpec, config: &GridConfig, layout: &mut Layout) -> Result<(), SubdivisionError> {
    let graph = spec.graph();
    let target = config.thinness_target();
    loop {
        let mut changed = false;
        for v in graph.vertices() {
            let slots = graph.incidences(v).unwrap_or(&[]);
            if slots.is_empty() {
                continue;
            }
            let t = vertex_thinness(spec, v, slots, &layout.radii[v.0])?;
            if t > target * (1.0 + TARGET_SLACK) {
                if layout.radius_depth[v.0] >= MAX_BISECTION_LEVELS {
                    return Err(SubdivisionError::RefinementCapExceeded {
                        location: format!("vertex {v}"),
                        thinness: t,
                        levels: MAX_BISECTION_LEVELS,
                    });
                }
                halve_radii(graph, layout, v);
                changed = true;
            }
        }
        for edge in graph.edges() {
            let before = layout.coords[edge.id.0].len();
            refine_edge(
                spec,
                config,
                edge,
                &mut layout.coords[edge.id.0],
                &mut layout.depth[edge.id.0],
                0,
            )?;
            changed |= layout.coords[edge.id.0].len() != before;
        }
        if !changed {
            return Ok(());
        }
    }
}

fn halve_radii(graph: &MetricGraph, layout: &mut Layout, v: VertexId) {
    let slots = graph.incidences(v).unwrap_or(&[]);
    for (k, inc) in slots.iter().enumerate() {
        let u = layout.radii[v.0][k] * 0.5;
        layout.radii[v.0][k] = u;
        let coords = &mut layout.coords[inc.edge.0];
        match inc.end {
            EdgeEnd::Tail => coords[1] = u,
            EdgeEnd::Head => {
                let n = coords.len();
                let l = coords[n - 1];
                coords[n - 2] = l - u;
            }
        }
    }
    layout.radius_depth[v.0] += 1;
}

/// Bisects intervals of one edge until every interior cell centered at an
/// index above `frozen` (exclusive of the first and last node) meets the
/// thinness and width targets. Intervals below index `frozen` are kept.
fn refine_edge(
    spec: &DiffusionSpec,
    config: &GridConfig,
    edge: &crate::graph::Edge,
    coords: &mut Vec<f64>,
    depth: &mut Vec<u32>,
    frozen: usize,
) -> Result<(), SubdivisionError> {
    let target = config.thinness_target();
    let h = config.h;
    let has_head = edge.head.is_some();
    loop {
        let n = coords.len();
        let mut marks: Vec<usize> = Vec::new();
        // centers 1..n-1; the last node is a vertex or the frontier
        for i in 1..n - 1 {
            let (a, b) = (coords[i - 1], coords[i + 1]);
            let t = interior_thinness(spec, edge.id, a, b)?;
            if t <= target * (1.0 + TARGET_SLACK) && b - a <= h * (1.0 + TARGET_SLACK) {
                continue;
            }
            let mut splittable = Vec::new();
            // [vertex, radius node] intervals belong to vertex cells
            if i - 1 >= frozen && i != 1 {
                splittable.push(i - 1);
            }
            if i >= frozen && !(has_head && i + 2 == n) {
                splittable.push(i);
            }
            if splittable.is_empty() {
                if i < frozen {
                    continue;
                }
                return Err(SubdivisionError::RefinementCapExceeded {
                    location: format!("edge {} cell ({a}, {b})", edge.id),
                    thinness: t,
                    levels: MAX_BISECTION_LEVELS,
                });
            }
            for k in splittable {
                if depth[k] >= MAX_BISECTION_LEVELS {
                    return Err(SubdivisionError::RefinementCapExceeded {
                        location: format!("edge {} cell ({a}, {b})", edge.id),
                        thinness: t,
                        levels: MAX_BISECTION_LEVELS,
                    });
                }
                marks.push(k);
            }
        }
        if marks.is_empty() {
            return Ok(());
        }
        marks.sort_unstable();
        marks.dedup();
        split_intervals(coords, depth, &marks);
    }
}

fn split_intervals(coords: &mut Vec<f64>, depth: &mut Vec<u32>, marks: &[usize]) {
    let mut new_coords = Vec::with_capacity(coords.len() + marks.len());
    let mut new_depth = Vec::with_capacity(depth.len() + marks.len());
    let mut m = marks.iter().peekable();
    for i in 0..coords.len() {
        new_coords.push(coords[i]);
        if i + 1 == coords.len() {
            break;
        }
        if m.peek() == Some(&&i) {
            m.next();
            new_coords.push(0.5 * (coords[i] + coords[i + 1]));
            new_depth.push(depth[i] + 1);
            new_depth.push(depth[i] + 1);
        } else {
            new_depth.push(depth[i]);
        }
    }
    *coords = new_coords;
    *depth = new_depth;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Density, ScaleFn, SpeedMeasure, VertexCondition};
    use proptest::prelude::*;

    fn walsh_star(lengths: &[f64], rho: f64) -> DiffusionSpec {
        let g = MetricGraph::star(lengths).unwrap();
        let conds = vec![VertexCondition::uniform(VertexId(0), lengths.len(), rho).unwrap()];
        DiffusionSpec::walsh(g, conds).unwrap()
    }

    fn unit_interval(speed: SpeedMeasure) -> DiffusionSpec {
        let g = MetricGraph::interval(1.0).unwrap();
        DiffusionSpec::new(
            g,
            vec![ScaleFn::identity()],
            vec![speed],
            vec![
                VertexCondition::new(VertexId(0), vec![1.0], 0.0).unwrap(),
                VertexCondition::new(VertexId(1), vec![1.0], 0.0).unwrap(),
            ],
        )
        .unwrap()
    }

    fn open_star(p: f64) -> DiffusionSpec {
        let g = MetricGraph::star(&[1.0, 1.0, 1.0]).unwrap();
        let speeds = (0..3)
            .map(|_| SpeedMeasure::new(Density::PowerBoundary { end: 1.0, p }))
            .collect();
        DiffusionSpec::new(
            g,
            vec![ScaleFn::identity(); 3],
            speeds,
            vec![VertexCondition::uniform(VertexId(0), 3, 0.0).unwrap()],
        )
        .unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    fn check_tiling(sub: &Subdivision) {
        for node in sub.nodes() {
            let frontier = sub.is_frontier(node.id);
            assert_eq!(sub.cell_of(node.id).is_none(), frontier, "node {}", node.id);
            if let Some(c) = sub.cell_of(node.id) {
                assert_eq!(c.center, node.id);
            }
        }
        for e in sub.graph().edges() {
            let coords = sub.edge_coords(e.id);
            assert!(coords.windows(2).all(|w| w[0] < w[1]), "edge {} not sorted", e.id);
            let ids = sub.edge_nodes(e.id);
            for w in ids.windows(3) {
                if let Some(c) = sub.cell_of(w[1]) {
                    if let CellShape::Interior { left, right, .. } = c.shape {
                        assert_eq!((left, right), (w[0], w[2]));
                    }
                }
            }
        }
    }

    fn recomputed_quantifier(spec: &DiffusionSpec, sub: &Subdivision) -> f64 {
        sub.cells()
            .iter()
            .map(|c| cell_thinness(spec, c).unwrap())
            .fold(0.0, f64::max)
    }

    #[test]
    fn unit_interval_quarter_step() {
        let spec = unit_interval(SpeedMeasure::lebesgue());
        let sub = Subdivision::uniform(&spec, GridConfig::uniform(0.25)).unwrap();
        assert_close(
            sub.edge_coords(EdgeId(0)),
            &[0.0, 0.0625, 0.25, 0.5, 0.75, 0.9375, 1.0],
        );
        let radii: Vec<f64> = sub
            .vertex_cells()
            .map(|c| c.size())
            .collect();
        assert_close(&radii, &[0.0625, 0.0625]);
        check_tiling(&sub);
        assert_eq!(sub.symmetry_epsilon().unwrap(), 1.0);
    }

    #[test]
    fn infinite_star_with_short_frontier() {
        let inf = f64::INFINITY;
        let spec = walsh_star(&[inf, inf, inf], 0.0);
        let sub = Subdivision::uniform(&spec, GridConfig::uniform(0.5).with_frontier(2.0)).unwrap();
        for e in 0..3 {
            assert_close(sub.edge_coords(EdgeId(e)), &[0.0, 0.25, 0.5, 1.0, 1.5, 2.0]);
            assert_eq!(sub.frontier(EdgeId(e)), Some(2.0));
        }
        let center = sub.cell_of(sub.vertex_node(VertexId(0)).unwrap()).unwrap();
        assert_eq!(center.size(), 0.25);
        check_tiling(&sub);
    }

    #[test]
    fn step_too_large() {
        let spec = unit_interval(SpeedMeasure::lebesgue());
        let err = Subdivision::uniform(&spec, GridConfig::uniform(0.6)).unwrap_err();
        assert!(matches!(err, SubdivisionError::StepTooLarge { .. }));
    }

    #[test]
    fn thinness_closed_forms() {
        let h = 0.05;
        let spec = walsh_star(&[1.0, 1.0, 1.0], 0.0);
        let t = interior_thinness(&spec, EdgeId(1), 0.4 - h, 0.4 + h).unwrap();
        assert!((t - 4.0 * h * h).abs() < 1e-15);

        let r = 0.1;
        let slots = spec.graph().incidences(VertexId(0)).unwrap().to_vec();
        let t0 = vertex_thinness(&spec, VertexId(0), &slots, &[r; 3]).unwrap();
        assert!((t0 - 3.0 * r * r).abs() < 1e-15);
        let sticky = walsh_star(&[1.0, 1.0, 1.0], 1.0);
        let t1 = vertex_thinness(&sticky, VertexId(0), &slots, &[r; 3]).unwrap();
        let by_hand: f64 = 3.0 * r * r + (0..3).map(|_| 1.0 * r / (1.0 / 3.0)).sum::<f64>();
        assert!((t1 - by_hand).abs() < 1e-14);
        assert!((t1 - (3.0 * r * r + 9.0 * r)).abs() < 1e-14);
    }

    #[test]
    fn vertex_constant_examples() {
        let r = 0.01;
        assert!((vertex_cell_constant(&[1.0 / 3.0; 3], &[r; 3]) - 1.0 / 3.0).abs() < 1e-15);
        assert!((vertex_cell_constant(&[0.5, 0.25, 0.25], &[r; 3]) - 0.25).abs() < 1e-15);
        let direct = (0.25 / r) / (0.5 / r + 0.25 / r);
        let c = vertex_cell_constant(&[0.5, 0.5], &[r, 2.0 * r]);
        assert!((c - direct).abs() < 1e-15);
        assert!((c - 1.0 / 3.0).abs() < 1e-15);

        assert_eq!(radius_symmetry(&[r, r, r]), 1.0);
        assert_eq!(radius_symmetry(&[r, 2.0 * r]), 0.5);
        assert_eq!(radius_symmetry(&[r]), 1.0);
    }

    #[test]
    fn c_delta_of_walsh_grid() {
        let spec = walsh_star(&[1.0, 1.0, 1.0], 0.0);
        let sub = Subdivision::uniform(&spec, GridConfig::uniform(0.1)).unwrap();
        assert!((sub.c_delta(&spec).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn adapted_lebesgue_is_one_bisection() {
        let h = 0.1;
        let spec = unit_interval(SpeedMeasure::lebesgue());
        let uni = Subdivision::uniform(&spec, GridConfig::uniform(h)).unwrap();
        assert!(uni.quantifier() > h * h);
        let sub = Subdivision::adapted(&spec, GridConfig::adapted(h)).unwrap();
        for c in sub.cells() {
            let oracle = match c.shape {
                CellShape::Interior { a, b, .. } => (b - a) * (b - a),
                CellShape::Vertex { .. } => c.size() * c.size(),
            };
            assert!((c.thinness - oracle).abs() < 1e-15);
            assert!(c.thinness <= h * h * (1.0 + 1e-9));
        }
        // interior spacing is h/2 away from the vertex cells
        let xs = sub.edge_coords(EdgeId(0));
        let mid = xs.iter().position(|&x| (x - 0.5).abs() < 1e-12).unwrap();
        assert!((xs[mid + 1] - xs[mid] - 0.05).abs() < 1e-12);
        assert!((xs[mid] - xs[mid - 1] - 0.05).abs() < 1e-12);
        assert!(sub.step() <= h * (1.0 + 1e-9));
        check_tiling(&sub);
    }

    #[test]
    fn adapted_refines_towards_open_boundary() {
        let h = 0.05;
        let spec = open_star(2.0);
        let sub = Subdivision::adapted(&spec, GridConfig::adapted(h)).unwrap();
        let xs = sub.edge_coords(EdgeId(0));
        let first = xs[2] - xs[1];
        let last = xs[xs.len() - 1] - xs[xs.len() - 2];
        assert!(last < first / 4.0, "first {first} last {last}");
        // over the second half, widths never grow towards the open end
        let half = xs.iter().position(|&x| x >= 0.5).unwrap();
        let widths: Vec<f64> = xs[half..].windows(2).map(|w| w[1] - w[0]).collect();
        assert!(widths.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
        for c in sub.cells() {
            assert!(cell_thinness(&spec, c).unwrap() <= h * h * (1.0 + 1e-9));
        }
        check_tiling(&sub);
    }

    #[test]
    fn huge_atom_exceeds_refinement_cap() {
        let speed = SpeedMeasure::lebesgue().with_atom(0.5, 1e12).unwrap();
        let spec = unit_interval(speed);
        let err = Subdivision::adapted(&spec, GridConfig::adapted(0.1)).unwrap_err();
        match err {
            SubdivisionError::RefinementCapExceeded { location, .. } => {
                assert!(location.contains("edge e0"), "{location}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extend_infinite_edge() {
        let inf = f64::INFINITY;
        let spec = walsh_star(&[inf, inf, inf], 0.0);
        let sub = Subdivision::uniform(&spec, GridConfig::uniform(0.5)).unwrap();
        assert_eq!(sub.frontier(EdgeId(1)), Some(10.0));
        assert_eq!(sub.next_frontier(EdgeId(1)).unwrap(), 20.0);
        let ext = sub.lazy_extend(&spec, EdgeId(1), 20.0).unwrap();
        assert_eq!(ext.nodes().len(), sub.nodes().len() + 20);
        assert_eq!(ext.frontier(EdgeId(1)), Some(20.0));
        assert_eq!(&ext.cells()[..sub.cells().len()], sub.cells());
        assert_eq!(&ext.nodes()[..sub.nodes().len()], sub.nodes());
        assert_eq!(ext.cells().len(), sub.cells().len() + 20);
        check_tiling(&ext);
    }

    #[test]
    fn closed_edge_is_not_extendable() {
        let spec = unit_interval(SpeedMeasure::lebesgue());
        let sub = Subdivision::uniform(&spec, GridConfig::uniform(0.1)).unwrap();
        assert_eq!(
            sub.lazy_extend(&spec, EdgeId(0), 2.0).unwrap_err(),
            SubdivisionError::NotExtendable(EdgeId(0))
        );
    }

    #[test]
    fn extend_open_edge_with_adapted_spacing() {
        let h = 0.05;
        let spec = open_star(2.0);
        let mut sub = Subdivision::adapted(&spec, GridConfig::adapted(h)).unwrap();
        let e = EdgeId(2);
        for k in 4..12 {
            let f = sub.frontier(e).unwrap();
            assert!((f - (1.0 - 0.5f64.powi(k))).abs() < 1e-12);
            let next = sub.next_frontier(e).unwrap();
            assert!((next - (1.0 - 0.5f64.powi(k + 1))).abs() < 1e-12);
            let before = sub.cells().to_vec();
            let added = sub.extend_edge(&spec, e, next).unwrap();
            assert_eq!(&sub.cells()[..before.len()], &before[..]);
            for id in added {
                assert!(sub.cell(id).thinness <= h * h * (1.0 + 1e-9));
            }
        }
        assert!((sub.quantifier() - recomputed_quantifier(&spec, &sub)).abs() < 1e-15);
        check_tiling(&sub);
    }

    #[test]
    fn cell_csv_has_one_row_per_cell() {
        let spec = walsh_star(&[1.0, 2.0], 0.5);
        let sub = Subdivision::uniform(&spec, GridConfig::uniform(0.25)).unwrap();
        let mut buf = Vec::new();
        sub.write_cells_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), sub.cells().len() + 1);
        assert!(text.lines().any(|l| l.contains(",vertex,0,,,0.0625;0.0625,")));
        let mut buf = Vec::new();
        sub.write_nodes_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), sub.nodes().len() + 1);
    }

    fn random_density() -> impl Strategy<Value = Density> {
        prop_oneof![
            (0.1f64..5.0).prop_map(Density::Constant),
            (0.2f64..2.0, 0.5f64..2.5).prop_map(|(eps, p)| Density::PowerShifted { eps, p }),
            (1.05f64..2.0, 0.5f64..2.0).prop_map(|(end, p)| Density::PowerBoundary { end, p }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn quantifier_is_max_thinness(d in random_density(), h in 0.04f64..0.3, adapted in any::<bool>()) {
            let spec = unit_interval(SpeedMeasure::new(d));
            let cfg = if adapted { GridConfig::adapted(h) } else { GridConfig::uniform(h) };
            let sub = Subdivision::build(&spec, cfg).unwrap();
            prop_assert!((sub.quantifier() - recomputed_quantifier(&spec, &sub)).abs() <= 1e-15);
            if adapted {
                for c in sub.cells() {
                    prop_assert!(cell_thinness(&spec, c).unwrap() <= h * h * (1.0 + 1e-9));
                }
            } else {
                prop_assert_eq!(sub.symmetry_epsilon().unwrap(), 1.0);
            }
            check_tiling(&sub);
        }

        #[test]
        fn bisection_never_increases_quantifier(
            d in random_density(),
            h in 0.05f64..0.3,
            pick in 0.0f64..1.0,
            rho in 0.0f64..2.0,
        ) {
            let g = MetricGraph::star(&[1.0, 0.9, 0.8]).unwrap();
            let speeds = (0..3).map(|_| SpeedMeasure::new(d.clone())).collect();
            let conds = vec![VertexCondition::new(VertexId(0), vec![0.5, 0.3, 0.2], rho).unwrap()];
            let spec = DiffusionSpec::new(g, vec![ScaleFn::identity(); 3], speeds, conds).unwrap();
            let sub = Subdivision::uniform(&spec, GridConfig::uniform(h)).unwrap();
            let cell = ((pick * sub.cells().len() as f64) as usize).min(sub.cells().len() - 1);
            let finer = sub.bisected(&spec, cell).unwrap();
            prop_assert!(finer.quantifier() <= sub.quantifier() * (1.0 + 1e-12));
            check_tiling(&finer);
        }
    }
}
