//! Exit probabilities and conditional exit times for every cell of a
//! subdivision.
//!
//! For a cell `U` centered at `x` with boundary node `y_j`, the walk moves to
//! `y_j` with probability `v0_j(x) = P_x(exit through y_j)` after the time
//! `v1_j(x) / v0_j(x)`, where `v1_j(x) = E_x[T_U; exit through y_j]`.
//! Interior cells use scale ratios and the Green kernel. Vertex cells solve a
//! Dirichlet problem on the star-shaped neighbourhood.

use crate::diffusion::{DiffusionError, DiffusionSpec, ScaleFn, SpeedMeasure};
use crate::graph::{EdgeEnd, EdgeId, GraphPoint, Incidence, VertexId};
use crate::quadrature::{cumulative, nodes, trapezoid};
use crate::subdivision::{Cell, CellId, CellShape, NodeId, Subdivision};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};
use thiserror::Error;

// Radii equal within this relative spread count as a ball.
const BALL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("point {x} is not strictly inside ({a}, {b}) on edge {edge}")]
    OutOfInterval { edge: EdgeId, a: f64, b: f64, x: f64 },
    #[error("point is outside the vertex cell")]
    OutOfCell,
    #[error("cell {0} is not a vertex cell")]
    NotVertexCell(CellId),
    #[error("vertex {vertex}: radius {radius} does not fit on edge {edge}")]
    BadRadius {
        vertex: VertexId,
        edge: EdgeId,
        radius: f64,
    },
    #[error("cell {cell}: exit to node {to} has zero probability")]
    DegenerateExit { cell: CellId, to: NodeId },
    #[error("cell {cell}: {source}")]
    InCell {
        cell: CellId,
        #[source]
        source: Box<KernelError>,
    },
    #[error("quadrature failed: {0}")]
    Quadrature(#[from] DiffusionError),
    #[error("kernel csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelPolicy {
    /// Dirichlet solver at every vertex cell.
    #[default]
    Exact,
    /// Small-ball asymptotics at sticky vertex cells with equal radii and
    /// identity scales; exact elsewhere.
    Asymptotic,
}

/// `G(x, y) = (s(x∧y) - s(a)) (s(b) - s(x∨y)) / (s(b) - s(a))` on `(a, b)`.
#[derive(Clone)]
pub struct GreenKernel {
    scale: ScaleFn,
    sa: f64,
    sb: f64,
}

impl GreenKernel {
    pub fn new(scale: &ScaleFn, a: f64, b: f64) -> Self {
        Self {
            scale: scale.clone(),
            sa: scale.eval(a),
            sb: scale.eval(b),
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let lo = self.scale.eval(x.min(y));
        let hi = self.scale.eval(x.max(y));
        self.from_scale(lo, hi)
    }

    fn from_scale(&self, s_lo: f64, s_hi: f64) -> f64 {
        (s_lo - self.sa) * (self.sb - s_hi) / (self.sb - self.sa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

fn check_interval(spec: &DiffusionSpec, e: EdgeId, a: f64, b: f64, x: f64) -> Result<(), KernelError> {
    let l = spec.graph().edges()[e.0].length;
    if !(a >= 0.0 && a < x && x < b && b <= l) {
        return Err(KernelError::OutOfInterval { edge: e, a, b, x });
    }
    Ok(())
}

/// `(P_x(exit at b), P_x(exit at a))` for the interval `(a, b)` on edge `e`.
pub fn interior_exit_prob(spec: &DiffusionSpec, e: EdgeId, a: f64, b: f64, x: f64) -> Result<(f64, f64), KernelError> {
    check_interval(spec, e, a, b, x)?;
    let s = spec.scale(e);
    let (sa, sb, sx) = (s.eval(a), s.eval(b), s.eval(x));
    let to_b = (sx - sa) / (sb - sa);
    Ok((to_b, (sb - sx) / (sb - sa)))
}

/// `v1 = 2 ∫ G(x, y) v0(y) m(dy)` for both exits of `(a, b)`, as
/// `(to_b, to_a)`. The integral is split at `x`, where `G` has a kink.
pub fn interior_first_moments(
    spec: &DiffusionSpec,
    e: EdgeId,
    a: f64,
    b: f64,
    x: f64,
) -> Result<(f64, f64), KernelError> {
    check_interval(spec, e, a, b, x)?;
    let s = spec.scale(e);
    let speed = spec.speed(e);
    let green = GreenKernel::new(s, a, b);
    let (sa, sb, sx) = (s.eval(a), s.eval(b), s.eval(x));
    let panels = spec.quad_panels();
    let weight = |y: f64| -> (f64, f64, f64) {
        let sy = s.eval(y);
        let g = if y <= x {
            green.from_scale(sy, sx)
        } else {
            green.from_scale(sx, sy)
        };
        let p_b = (sy - sa) / (sb - sa);
        (g, p_b, 1.0 - p_b)
    };
    let mut to_b = 0.0;
    let mut to_a = 0.0;
    for (lo, hi) in [(a, x), (x, b)] {
        to_b += trapezoid(
            |y| {
                let (g, p, _) = weight(y);
                g * p * speed.density_at(y)
            },
            lo,
            hi,
            panels,
        )
        .map_err(|x| DiffusionError::NonFiniteDensity { x })?;
        to_a += trapezoid(
            |y| {
                let (g, _, q) = weight(y);
                g * q * speed.density_at(y)
            },
            lo,
            hi,
            panels,
        )
        .map_err(|x| DiffusionError::NonFiniteDensity { x })?;
    }
    for atom in speed.atoms_in(a, b) {
        let (g, p, q) = weight(atom.position);
        to_b += g * p * atom.mass;
        to_a += g * q * atom.mass;
    }
    Ok((2.0 * to_b, 2.0 * to_a))
}

/// `E_x[T | exit on the given side]` for the interval `(a, b)`.
pub fn interior_conditional_time(
    spec: &DiffusionSpec,
    e: EdgeId,
    a: f64,
    b: f64,
    x: f64,
    target: Side,
) -> Result<f64, KernelError> {
    let (p_b, p_a) = interior_exit_prob(spec, e, a, b, x)?;
    let (v1_b, v1_a) = interior_first_moments(spec, e, a, b, x)?;
    Ok(match target {
        Side::Right => v1_b / p_b,
        Side::Left => v1_a / p_a,
    })
}

/// `E_x[T_(a,b)]`, the unconditional mean exit time.
pub fn interior_mean_exit_time(spec: &DiffusionSpec, e: EdgeId, a: f64, b: f64, x: f64) -> Result<f64, KernelError> {
    let (v1_b, v1_a) = interior_first_moments(spec, e, a, b, x)?;
    Ok(v1_b + v1_a)
}

/// A point of a vertex cell in reoriented coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellPoint {
    Vertex,
    /// Distance `u` from the vertex along arm `arm`, `0 < u <= radius`.
    Arm { arm: usize, u: f64 },
}

#[derive(Debug, Clone)]
pub struct Arm {
    pub incidence: Incidence,
    pub radius: f64,
    pub beta: f64,
    pub scale: ScaleFn,
    pub speed: SpeedMeasure,
    length: f64,
    s_radius: f64,
    slope0: f64,
}

impl Arm {
    /// `β ŝ'(0) / ŝ(u)`.
    pub fn weight(&self) -> f64 {
        self.beta * self.slope0 / self.s_radius
    }

    pub fn scale_at_radius(&self) -> f64 {
        self.s_radius
    }

    fn edge_coord(&self, u: f64) -> f64 {
        match self.incidence.end {
            EdgeEnd::Tail => u,
            EdgeEnd::Head => self.length - u,
        }
    }
}

/// A star-shaped neighbourhood `{d(v, ·) < u_e}` with its reoriented data.
#[derive(Debug, Clone)]
pub struct VertexCell {
    pub vertex: VertexId,
    pub arms: Vec<Arm>,
    pub rho: f64,
    panels: usize,
}

impl VertexCell {
    /// Radii aligned with the vertex's edge slots.
    pub fn new(spec: &DiffusionSpec, vertex: VertexId, radii: &[f64]) -> Result<Self, KernelError> {
        let slots = spec
            .graph()
            .incidences(vertex)
            .map_err(|_| KernelError::OutOfCell)?;
        let cond = spec.vertex_condition(vertex);
        if slots.len() != radii.len() {
            return Err(KernelError::Quadrature(DiffusionError::WrongCount {
                what: "vertex radii",
                expected: slots.len(),
                got: radii.len(),
            }));
        }
        let arms = slots
            .iter()
            .zip(radii)
            .zip(cond.betas())
            .map(|((&inc, &radius), &beta)| {
                let o = spec.oriented(inc);
                if !(radius > 0.0 && radius < o.length) {
                    return Err(KernelError::BadRadius {
                        vertex,
                        edge: inc.edge,
                        radius,
                    });
                }
                Ok(Arm {
                    incidence: inc,
                    radius,
                    beta,
                    s_radius: o.scale.eval(radius),
                    slope0: o.scale.slope(0.0),
                    scale: o.scale,
                    speed: o.speed,
                    length: o.length,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            vertex,
            arms,
            rho: cond.rho(),
            panels: spec.quad_panels().max(4),
        })
    }

    pub fn from_cell(spec: &DiffusionSpec, cell: &Cell) -> Result<Self, KernelError> {
        match &cell.shape {
            CellShape::Vertex { vertex, arms } => {
                let radii: Vec<f64> = arms.iter().map(|a| a.radius).collect();
                Self::new(spec, *vertex, &radii)
            }
            CellShape::Interior { .. } => Err(KernelError::NotVertexCell(cell.id)),
        }
    }

    /// At least four panels are kept.
    pub fn with_panels(mut self, panels: usize) -> Self {
        self.panels = panels.max(4);
        self
    }

    pub fn panels(&self) -> usize {
        self.panels
    }

    /// `Σ_e β_e ŝ_e'(0) / ŝ_e(u_e)`.
    pub fn total_weight(&self) -> f64 {
        self.arms.iter().map(Arm::weight).sum()
    }

    /// All radii equal.
    pub fn is_ball(&self) -> bool {
        let max = self.arms.iter().map(|a| a.radius).fold(0.0, f64::max);
        let min = self.arms.iter().map(|a| a.radius).fold(f64::INFINITY, f64::min);
        max - min <= BALL_TOL * max
    }

    /// Converts a graph point into cell coordinates.
    pub fn locate(&self, spec: &DiffusionSpec, p: GraphPoint) -> Result<CellPoint, KernelError> {
        if let Some(vp) = spec.graph().vertex_point(self.vertex) {
            if spec.graph().same_point(vp, p).unwrap_or(false) {
                return Ok(CellPoint::Vertex);
            }
        }
        for (k, arm) in self.arms.iter().enumerate() {
            if arm.incidence.edge != p.edge {
                continue;
            }
            let u = match arm.incidence.end {
                EdgeEnd::Tail => p.coord,
                EdgeEnd::Head => arm.length - p.coord,
            };
            if u > 0.0 && u <= arm.radius {
                return Ok(CellPoint::Arm { arm: k, u });
            }
        }
        Err(KernelError::OutOfCell)
    }

    /// Graph point of a cell point.
    pub fn graph_point(&self, p: CellPoint) -> GraphPoint {
        match p {
            CellPoint::Vertex => {
                let arm = &self.arms[0];
                GraphPoint {
                    edge: arm.incidence.edge,
                    coord: arm.edge_coord(0.0),
                }
            }
            CellPoint::Arm { arm, u } => GraphPoint {
                edge: self.arms[arm].incidence.edge,
                coord: self.arms[arm].edge_coord(u),
            },
        }
    }

    fn check(&self, p: CellPoint) -> Result<(), KernelError> {
        match p {
            CellPoint::Vertex => Ok(()),
            CellPoint::Arm { arm, u } => match self.arms.get(arm) {
                Some(a) if u >= 0.0 && u <= a.radius => Ok(()),
                _ => Err(KernelError::OutOfCell),
            },
        }
    }
}

/// `v0_j(p)`: probability of leaving the vertex cell through the end of arm `j`.
pub fn vertex_exit_prob(cell: &VertexCell, from: CellPoint, j: usize) -> Result<f64, KernelError> {
    cell.check(from)?;
    if j >= cell.arms.len() {
        return Err(KernelError::OutOfCell);
    }
    let at_vertex = cell.arms[j].weight() / cell.total_weight();
    Ok(match from {
        CellPoint::Vertex => at_vertex,
        CellPoint::Arm { arm, u } => {
            let a = &cell.arms[arm];
            let ratio = a.scale.eval(u) / a.s_radius;
            (1.0 - ratio) * at_vertex + if arm == j { ratio } else { 0.0 }
        }
    })
}

/// `v1_j(p) = E_p[T_U; exit through arm j]`.
pub fn vertex_first_moment(cell: &VertexCell, from: CellPoint, j: usize) -> Result<f64, KernelError> {
    let source = |p: CellPoint| -vertex_exit_prob(cell, p, j).unwrap_or(0.0);
    let zero = vec![0.0; cell.arms.len()];
    let sol = dirichlet_solve(cell, &source, &zero)?;
    sol.eval(from)
}

/// `E_p[T_U | exit through arm j]`.
pub fn vertex_conditional_time(cell: &VertexCell, from: CellPoint, j: usize) -> Result<f64, KernelError> {
    Ok(vertex_first_moment(cell, from, j)? / vertex_exit_prob(cell, from, j)?)
}

/// Small-ball kernel at the vertex: `p_j = β_j` and `t_j = ρ · r`, with `r`
/// the largest radius. Meant for sticky vertices with equal radii.
pub fn vertex_asymptotic_kernel(cell: &VertexCell) -> Vec<(f64, f64)> {
    let r = cell.arms.iter().map(|a| a.radius).fold(0.0, f64::max);
    cell.arms.iter().map(|a| (a.beta, cell.rho * r)).collect()
}

/// The per-arm expression for `v1_j` at the vertex obtained by following one
/// arm only, and the average of those values with weights `d_e / Σ d`.
/// The average coincides with the Dirichlet solution; single arms need not.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmMomentCheck {
    pub per_arm: Vec<f64>,
    pub weighted: f64,
}

pub fn vertex_moment_by_arm(cell: &VertexCell, j: usize) -> Result<ArmMomentCheck, KernelError> {
    let p_j = vertex_exit_prob(cell, CellPoint::Vertex, j)?;
    let total = cell.total_weight();
    let sticky = cell.rho * p_j / total;
    let mut per_arm = Vec::with_capacity(cell.arms.len());
    for (e, arm) in cell.arms.iter().enumerate() {
        // 2 ∫ (ŝ(u) - ŝ(y)) v0_j(e, y) m̂(dy)
        let f = |y: f64| {
            let v0 = vertex_exit_prob(cell, CellPoint::Arm { arm: e, u: y }, j).unwrap_or(0.0);
            (arm.s_radius - arm.scale.eval(y)) * v0
        };
        let mut integral = trapezoid(|y| f(y) * arm.speed.density_at(y), 0.0, arm.radius, cell.panels)
            .map_err(|x| DiffusionError::NonFiniteDensity { x })?;
        for atom in arm.speed.atoms_in(0.0, arm.radius) {
            integral += f(atom.position) * atom.mass;
        }
        per_arm.push(2.0 * integral + sticky);
    }
    let weighted = cell
        .arms
        .iter()
        .zip(&per_arm)
        .map(|(a, v)| a.weight() / total * v)
        .sum();
    Ok(ArmMomentCheck { per_arm, weighted })
}

/// Nodal data of the particular solution `A(x) = 2 ∫_0^x (ŝ(x) - ŝ(ζ)) g(ζ) m̂(dζ)`
/// on one arm.
#[derive(Debug, Clone)]
struct ArmIntegrals {
    xs: Vec<f64>,
    s: Vec<f64>,
    density: Vec<f64>,
    g: Vec<f64>,
    // ∫_0^x g dm̂ and ∫_0^x ŝ g dm̂, atoms included
    i0: Vec<f64>,
    i1: Vec<f64>,
    // (position, g·mass, ŝ·g·mass), sorted by position
    atoms: Vec<(f64, f64, f64)>,
}

impl ArmIntegrals {
    fn a_at_node(&self, k: usize) -> f64 {
        2.0 * (self.s[k] * self.i0[k] - self.i1[k])
    }
}

/// Solution of `(1/2) D_m̂ D_ŝ f = g` on a vertex cell with `f = a_e` at the
/// end of arm `e`, continuity at the vertex and the lateral condition
/// `Σ β_e f'(e, 0) = ρ g(v)`.
pub struct DirichletSolution<'a> {
    cell: &'a VertexCell,
    source: &'a dyn Fn(CellPoint) -> f64,
    boundary: Vec<f64>,
    arms: Vec<ArmIntegrals>,
    constant: f64,
}

pub fn dirichlet_solve<'a>(
    cell: &'a VertexCell,
    source: &'a dyn Fn(CellPoint) -> f64,
    boundary: &[f64],
) -> Result<DirichletSolution<'a>, KernelError> {
    if boundary.len() != cell.arms.len() {
        return Err(KernelError::Quadrature(DiffusionError::WrongCount {
            what: "boundary values",
            expected: cell.arms.len(),
            got: boundary.len(),
        }));
    }
    let mut arms = Vec::with_capacity(cell.arms.len());
    for (e, arm) in cell.arms.iter().enumerate() {
        let xs = nodes(0.0, arm.radius, cell.panels);
        let s: Vec<f64> = xs.iter().map(|&x| arm.scale.eval(x)).collect();
        let density: Vec<f64> = xs.iter().map(|&x| arm.speed.density_at(x)).collect();
        let g: Vec<f64> = xs
            .iter()
            .map(|&x| source(if x == 0.0 { CellPoint::Vertex } else { CellPoint::Arm { arm: e, u: x } }))
            .collect();
        let gm: Vec<f64> = g.iter().zip(&density).map(|(g, d)| g * d).collect();
        if let Some(k) = gm.iter().position(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFiniteDensity { x: arm.edge_coord(xs[k]) }.into());
        }
        let sgm: Vec<f64> = gm.iter().zip(&s).map(|(v, s)| v * s).collect();
        let mut i0 = cumulative(&xs, &gm);
        let mut i1 = cumulative(&xs, &sgm);
        let mut atoms: Vec<(f64, f64, f64)> = arm
            .speed
            .atoms_in(0.0, arm.radius)
            .map(|at| {
                let gv = source(CellPoint::Arm { arm: e, u: at.position }) * at.mass;
                (at.position, gv, arm.scale.eval(at.position) * gv)
            })
            .collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(p, w0, w1) in &atoms {
            for k in 0..xs.len() {
                if xs[k] >= p {
                    i0[k] += w0;
                    i1[k] += w1;
                }
            }
        }
        arms.push(ArmIntegrals {
            xs,
            s,
            density,
            g,
            i0,
            i1,
            atoms,
        });
    }
    let total = cell.total_weight();
    let g_vertex = source(CellPoint::Vertex);
    let mismatch: f64 = cell
        .arms
        .iter()
        .zip(&arms)
        .zip(boundary)
        .map(|((arm, ints), a)| (ints.a_at_node(ints.xs.len() - 1) - a) * arm.weight())
        .sum();
    let constant = -(cell.rho * g_vertex + mismatch) / total;
    Ok(DirichletSolution {
        cell,
        source,
        boundary: boundary.to_vec(),
        arms,
        constant,
    })
}

/// Largest residuals of a Dirichlet solution on its quadrature nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletResidual {
    /// `(1/2) D_m D_s f - g` by nested fourth-order central differences.
    pub equation: f64,
    pub boundary: f64,
    /// Spread of `f(e, 0)` over arms.
    pub continuity: f64,
    /// `Σ β_e f'(e, 0) - ρ g(v)` with one-sided fourth-order differences.
    pub gluing: f64,
}

impl DirichletResidual {
    pub fn max(&self) -> f64 {
        self.equation
            .max(self.boundary)
            .max(self.continuity)
            .max(self.gluing)
    }
}

impl DirichletSolution<'_> {
    /// `C`, the value at the vertex.
    pub fn at_vertex(&self) -> f64 {
        self.constant
    }

    pub fn eval(&self, p: CellPoint) -> Result<f64, KernelError> {
        self.cell.check(p)?;
        match p {
            CellPoint::Vertex => Ok(self.constant),
            CellPoint::Arm { arm, u } => {
                let a_x = self.particular(arm, u);
                Ok(self.combine(arm, u, a_x))
            }
        }
    }

    fn combine(&self, arm: usize, u: f64, a_x: f64) -> f64 {
        let info = &self.cell.arms[arm];
        let ints = &self.arms[arm];
        let su = info.s_radius;
        let sx = info.scale.eval(u);
        let a_u = ints.a_at_node(ints.xs.len() - 1);
        (su * a_x - sx * a_u) / su + self.constant * (su - sx) / su + self.boundary[arm] * sx / su
    }

    fn value_at_node(&self, arm: usize, k: usize) -> f64 {
        let ints = &self.arms[arm];
        let info = &self.cell.arms[arm];
        let su = info.s_radius;
        let sx = ints.s[k];
        let a_u = ints.a_at_node(ints.xs.len() - 1);
        (su * ints.a_at_node(k) - sx * a_u) / su + self.constant * (su - sx) / su + self.boundary[arm] * sx / su
    }

    fn particular(&self, arm: usize, x: f64) -> f64 {
        let ints = &self.arms[arm];
        let info = &self.cell.arms[arm];
        let n = ints.xs.len();
        let k = match ints.xs.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(k) => return ints.a_at_node(k),
            Err(k) => k.clamp(1, n - 1) - 1,
        };
        let xk = ints.xs[k];
        let sx = info.scale.eval(x);
        let gm_x = (self.source)(CellPoint::Arm { arm, u: x }) * info.speed.density_at(x);
        let gm_k = ints.g[k] * ints.density[k];
        let mut i0 = ints.i0[k] + 0.5 * (x - xk) * (gm_k + gm_x);
        let mut i1 = ints.i1[k] + 0.5 * (x - xk) * (ints.s[k] * gm_k + sx * gm_x);
        for &(p, w0, w1) in &ints.atoms {
            if p > xk && p <= x {
                i0 += w0;
                i1 += w1;
            }
        }
        2.0 * (sx * i0 - i1)
    }

    pub fn residuals(&self) -> DirichletResidual {
        let mut equation: f64 = 0.0;
        let mut boundary: f64 = 0.0;
        let mut gluing = -self.cell.rho * (self.source)(CellPoint::Vertex);
        let mut at_vertex = Vec::with_capacity(self.arms.len());
        for (e, ints) in self.arms.iter().enumerate() {
            let n = ints.xs.len();
            let f: Vec<f64> = (0..n).map(|k| self.value_at_node(e, k)).collect();
            let dx = ints.xs[1] - ints.xs[0];
            let d = |v: &[f64], k: usize| (v[k - 2] - 8.0 * v[k - 1] + 8.0 * v[k + 1] - v[k + 2]) / (12.0 * dx);
            let flux: Vec<f64> = (0..n)
                .map(|k| if k < 2 || k + 2 >= n { f64::NAN } else { d(&f, k) / d(&ints.s, k) })
                .collect();
            for k in 4..n.saturating_sub(4) {
                let lhs = 0.5 * d(&flux, k) / ints.density[k];
                equation = equation.max((lhs - ints.g[k]).abs());
            }
            boundary = boundary.max((f[n - 1] - self.boundary[e]).abs());
            at_vertex.push(f[0]);
            let slope = (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / (12.0 * dx);
            gluing += self.cell.arms[e].beta * slope;
        }
        let hi = at_vertex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = at_vertex.iter().copied().fold(f64::INFINITY, f64::min);
        DirichletResidual {
            equation,
            boundary,
            continuity: hi - lo,
            gluing: gluing.abs(),
        }
    }
}

/// `E_p[∫_0^{T_U} g(X_t) dt]` on a vertex cell.
pub fn expected_occupation(
    cell: &VertexCell,
    g: &dyn Fn(CellPoint) -> f64,
    from: CellPoint,
) -> Result<f64, KernelError> {
    let source = |p: CellPoint| -g(p);
    let zero = vec![0.0; cell.arms.len()];
    dirichlet_solve(cell, &source, &zero)?.eval(from)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exit {
    pub to: NodeId,
    pub p: f64,
    pub t: f64,
    pub v0: f64,
    pub v1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellKernel {
    pub cell: CellId,
    pub from: NodeId,
    pub exits: Vec<Exit>,
    pub asymptotic: bool,
}

impl CellKernel {
    pub fn probability_sum(&self) -> f64 {
        self.exits.iter().map(|e| e.p).sum()
    }
}

pub fn cell_kernel(
    spec: &DiffusionSpec,
    cell: &Cell,
    policy: KernelPolicy,
) -> Result<CellKernel, KernelError> {
    let wrap = |e: KernelError| KernelError::InCell {
        cell: cell.id,
        source: Box::new(e),
    };
    match &cell.shape {
        CellShape::Interior {
            edge,
            a,
            b,
            center,
            left,
            right,
        } => {
            let (p_b, p_a) = interior_exit_prob(spec, *edge, *a, *b, *center).map_err(wrap)?;
            let (v1_b, v1_a) = interior_first_moments(spec, *edge, *a, *b, *center).map_err(wrap)?;
            let exits = vec![
                Exit {
                    to: *left,
                    p: p_a,
                    t: v1_a / p_a,
                    v0: p_a,
                    v1: v1_a,
                },
                Exit {
                    to: *right,
                    p: p_b,
                    t: v1_b / p_b,
                    v0: p_b,
                    v1: v1_b,
                },
            ];
            check_exits(cell, &exits)?;
            Ok(CellKernel {
                cell: cell.id,
                from: cell.center,
                exits,
                asymptotic: false,
            })
        }
        CellShape::Vertex { arms, .. } => {
            let vc = VertexCell::from_cell(spec, cell).map_err(wrap)?;
            let identity = vc.arms.iter().all(|a| a.scale.is_identity());
            let use_asymptotic =
                policy == KernelPolicy::Asymptotic && vc.rho > 0.0 && vc.is_ball() && identity;
            let mut exits = Vec::with_capacity(arms.len());
            if use_asymptotic {
                for (arm, (p, t)) in arms.iter().zip(vertex_asymptotic_kernel(&vc)) {
                    exits.push(Exit {
                        to: arm.boundary,
                        p,
                        t,
                        v0: p,
                        v1: p * t,
                    });
                }
            } else {
                for (j, arm) in arms.iter().enumerate() {
                    let p = vertex_exit_prob(&vc, CellPoint::Vertex, j).map_err(wrap)?;
                    let v1 = vertex_first_moment(&vc, CellPoint::Vertex, j).map_err(wrap)?;
                    exits.push(Exit {
                        to: arm.boundary,
                        p,
                        t: v1 / p,
                        v0: p,
                        v1,
                    });
                }
            }
            check_exits(cell, &exits)?;
            Ok(CellKernel {
                cell: cell.id,
                from: cell.center,
                exits,
                asymptotic: use_asymptotic,
            })
        }
    }
}

fn check_exits(cell: &Cell, exits: &[Exit]) -> Result<(), KernelError> {
    for e in exits {
        if !(e.p > 0.0) || !e.t.is_finite() {
            return Err(KernelError::DegenerateExit {
                cell: cell.id,
                to: e.to,
            });
        }
    }
    Ok(())
}

/// Worst observed `v1/v0` against `2 max(1, 1/c_Δ) |Δ|_X`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioDiagnostic {
    pub bound: f64,
    pub worst_ratio: f64,
    pub worst_cell: Option<CellId>,
    pub violations: Vec<(CellId, NodeId, f64)>,
}

impl RatioDiagnostic {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Kernel rows indexed by the center node of each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    rows: Vec<Option<CellKernel>>,
    policy: KernelPolicy,
}

impl KernelTable {
    /// All cells in parallel.
    pub fn build(spec: &DiffusionSpec, sub: &Subdivision, policy: KernelPolicy) -> Result<Self, KernelError> {
        let mut table = Self {
            rows: Vec::new(),
            policy,
        };
        let ids: Vec<CellId> = (0..sub.cells().len()).collect();
        table.extend(spec, sub, &ids)?;
        Ok(table)
    }

    /// Adds rows for `cells`, e.g. after the subdivision was extended.
    pub fn extend(&mut self, spec: &DiffusionSpec, sub: &Subdivision, cells: &[CellId]) -> Result<(), KernelError> {
        let rows: Vec<CellKernel> = cells
            .par_iter()
            .map(|&c| cell_kernel(spec, sub.cell(c), self.policy))
            .collect::<Result<_, _>>()?;
        if self.rows.len() < sub.nodes().len() {
            self.rows.resize(sub.nodes().len(), None);
        }
        for row in rows {
            let from = row.from;
            self.rows[from] = Some(row);
        }
        Ok(())
    }

    /// Table from explicit rows, keyed by their `from` node.
    pub fn from_rows(rows: Vec<CellKernel>, policy: KernelPolicy) -> Self {
        let mut out: Vec<Option<CellKernel>> = Vec::new();
        for row in rows {
            let from = row.from;
            if out.len() <= from {
                out.resize(from + 1, None);
            }
            out[from] = Some(row);
        }
        Self { rows: out, policy }
    }

    pub fn policy(&self) -> KernelPolicy {
        self.policy
    }

    pub fn row(&self, node: NodeId) -> Option<&CellKernel> {
        self.rows.get(node).and_then(Option::as_ref)
    }

    pub fn rows(&self) -> impl Iterator<Item = &CellKernel> {
        self.rows.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.rows().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest `|Σ_j p_j - 1|` over rows.
    pub fn max_row_defect(&self) -> f64 {
        self.rows()
            .map(|r| (r.probability_sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn ratio_diagnostic(&self, spec: &DiffusionSpec, sub: &Subdivision) -> RatioDiagnostic {
        let c = sub.c_delta(spec).unwrap_or(1.0);
        let bound = 2.0 * (1.0f64).max(1.0 / c) * sub.quantifier();
        let mut out = RatioDiagnostic {
            bound,
            worst_ratio: 0.0,
            worst_cell: None,
            violations: Vec::new(),
        };
        for row in self.rows() {
            for e in &row.exits {
                let ratio = e.v1 / e.v0;
                if ratio > out.worst_ratio {
                    out.worst_ratio = ratio;
                    out.worst_cell = Some(row.cell);
                }
                if ratio > bound {
                    out.violations.push((row.cell, e.to, ratio));
                }
            }
        }
        out
    }

    /// `from,to,p,t,v0,v1,cell` with round-trip float formatting.
    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "from,to,p,t,v0,v1,cell")?;
        for row in self.rows() {
            for e in &row.exits {
                writeln!(
                    out,
                    "{},{},{:?},{:?},{:?},{:?},{}",
                    row.from, e.to, e.p, e.t, e.v0, e.v1, row.cell
                )?;
            }
        }
        Ok(())
    }

    /// Reads a table written by [`KernelTable::write_csv`]. The asymptotic
    /// flag of rows is not stored and reads back as `false`.
    pub fn read_csv(input: impl BufRead, policy: KernelPolicy) -> Result<Self, KernelError> {
        let mut rows: Vec<Option<CellKernel>> = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| KernelError::Csv {
                line: line_no,
                message: e.to_string(),
            })?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(KernelError::Csv {
                    line: line_no,
                    message: format!("expected 7 fields, got {}", fields.len()),
                });
            }
            let bad = |what: &str| KernelError::Csv {
                line: line_no,
                message: format!("bad {what}"),
            };
            let from: NodeId = fields[0].parse().map_err(|_| bad("from"))?;
            let to: NodeId = fields[1].parse().map_err(|_| bad("to"))?;
            let num = |k: usize, what: &str| fields[k].parse::<f64>().map_err(|_| bad(what));
            let exit = Exit {
                to,
                p: num(2, "p")?,
                t: num(3, "t")?,
                v0: num(4, "v0")?,
                v1: num(5, "v1")?,
            };
            let cell: CellId = fields[6].parse().map_err(|_| bad("cell"))?;
            if rows.len() <= from {
                rows.resize(from + 1, None);
            }
            let row = rows[from].get_or_insert_with(|| CellKernel {
                cell,
                from,
                exits: Vec::new(),
                asymptotic: false,
            });
            row.exits.push(exit);
        }
        Ok(Self { rows, policy })
    }
}
