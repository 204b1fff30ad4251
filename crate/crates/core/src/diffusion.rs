//! Analytical data of a general diffusion on a metric graph: a scale function
//! and speed measure per edge, bias weights and stickiness per vertex.
//!
//! The generator acts as `(1/2) D_m D_s` on every edge. With `s(x) = x` and
//! `m(dx) = dx` this is standard Brownian motion.

use crate::graph::{EdgeEnd, EdgeId, Incidence, MetricGraph, VertexId};
use crate::quadrature::trapezoid;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_QUAD_PANELS: usize = 256;
const BETA_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("edge {edge} is not incident to vertex {vertex}")]
    NotIncident { vertex: VertexId, edge: EdgeId },
    #[error("interval ({a}, {b}) is not inside edge {edge} of length {length}")]
    IntervalOutOfRange {
        edge: EdgeId,
        a: f64,
        b: f64,
        length: f64,
    },
    #[error("speed density is not finite at x = {x}")]
    NonFiniteDensity { x: f64 },
    #[error("bias weights at vertex {vertex} sum to {sum}, expected 1")]
    BetaSum { vertex: VertexId, sum: f64 },
    #[error("bias weight {beta} at vertex {vertex} must be positive")]
    NonPositiveBeta { vertex: VertexId, beta: f64 },
    #[error("stickiness {rho} at vertex {vertex} must be non-negative")]
    NegativeRho { vertex: VertexId, rho: f64 },
    #[error("vertex {vertex} has {expected} edge slots but {got} bias weights were given")]
    BetaCount {
        vertex: VertexId,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} {what}, got {got}")]
    WrongCount {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("scale on edge {edge} is not strictly increasing near x = {x}")]
    ScaleNotIncreasing { edge: EdgeId, x: f64 },
    #[error("scale on edge {edge} has s(0) = {value}, expected 0")]
    ScaleOrigin { edge: EdgeId, value: f64 },
    #[error("scale on edge {edge} has non-positive slope {slope} at an endpoint")]
    ScaleSlope { edge: EdgeId, slope: f64 },
    #[error("atom at {position} has non-positive mass {mass}")]
    BadAtom { position: f64, mass: f64 },
    #[error("piecewise-linear table needs at least two strictly increasing abscissae with positive values")]
    BadTable,
    #[error("density parameters invalid: {0}")]
    BadDensity(String),
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Continuous strictly increasing edge scale with `s(0) = 0`.
#[derive(Clone)]
pub struct ScaleFn {
    value: RealFn,
    slope: RealFn,
    identity: bool,
}

impl fmt::Debug for ScaleFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScaleFn")
            .field("identity", &self.identity)
            .field("slope_at_0", &(self.slope)(0.0))
            .finish()
    }
}

impl ScaleFn {
    pub fn identity() -> Self {
        Self {
            value: Arc::new(|x| x),
            slope: Arc::new(|_| 1.0),
            identity: true,
        }
    }

    /// Arbitrary scale given with its right-derivative.
    pub fn custom(
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        slope: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            slope: Arc::new(slope),
            identity: false,
        }
    }

    /// `s(x) = (exp(k x) - 1) / k`.
    pub fn exponential(k: f64) -> Self {
        if k == 0.0 {
            return Self::identity();
        }
        Self::custom(move |x| (k * x).exp_m1() / k, move |x| (k * x).exp())
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.value)(x)
    }

    pub fn slope(&self, x: f64) -> f64 {
        (self.slope)(x)
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// `u ↦ s(l) - s(l - u)`, the scale seen from the far end of an edge of length `l`.
    pub fn reflected(&self, length: f64) -> Self {
        if self.identity {
            return Self::identity();
        }
        let inner = self.clone();
        let slope = self.clone();
        let top = inner.eval(length);
        Self {
            value: Arc::new(move |u| top - inner.eval(length - u)),
            slope: Arc::new(move |u| slope.slope(length - u)),
            identity: false,
        }
    }
}

/// Lebesgue density of a speed measure.
#[derive(Clone)]
pub enum Density {
    Constant(f64),
    /// `(eps + x)^(-p)`
    PowerShifted { eps: f64, p: f64 },
    /// `(end - x)^(-p)`
    PowerBoundary { end: f64, p: f64 },
    /// Piecewise-linear interpolation, constant extrapolation.
    Table(Arc<PiecewiseLinear>),
    Custom(RealFn),
    /// `u ↦ inner(length - u)`
    Reflected { inner: Box<Density>, length: f64 },
}

impl fmt::Debug for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Density::Constant(c) => write!(f, "Constant({c})"),
            Density::PowerShifted { eps, p } => write!(f, "PowerShifted(eps={eps}, p={p})"),
            Density::PowerBoundary { end, p } => write!(f, "PowerBoundary(end={end}, p={p})"),
            Density::Table(t) => write!(f, "Table({} knots)", t.xs.len()),
            Density::Custom(_) => write!(f, "Custom"),
            Density::Reflected { inner, length } => write!(f, "Reflected({inner:?}, {length})"),
        }
    }
}

impl Density {
    pub fn lebesgue() -> Self {
        Density::Constant(1.0)
    }

    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Density::Custom(Arc::new(f))
    }

    pub fn table(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, DiffusionError> {
        Ok(Density::Table(Arc::new(PiecewiseLinear::new(xs, ys)?)))
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Density::Constant(c) => *c,
            Density::PowerShifted { eps, p } => (eps + x).powf(-p),
            Density::PowerBoundary { end, p } => (end - x).powf(-p),
            Density::Table(t) => t.value(x),
            Density::Custom(f) => f(x),
            Density::Reflected { inner, length } => inner.value(length - x),
        }
    }

    /// An antiderivative, when one is known in closed form.
    pub fn primitive(&self, x: f64) -> Option<f64> {
        match self {
            Density::Constant(c) => Some(c * x),
            Density::PowerShifted { eps, p } => Some(if *p == 1.0 {
                (eps + x).ln()
            } else {
                (eps + x).powf(1.0 - p) / (1.0 - p)
            }),
            Density::PowerBoundary { end, p } => Some(if *p == 1.0 {
                -(end - x).ln()
            } else {
                (end - x).powf(1.0 - p) / (p - 1.0)
            }),
            Density::Table(t) => Some(t.primitive(x)),
            Density::Custom(_) => None,
            Density::Reflected { inner, length } => inner.primitive(length - x).map(|v| -v),
        }
    }
}

/// Piecewise-linear function through `(xs[i], ys[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
    // integral from xs[0] to xs[i]
    cumulative: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, DiffusionError> {
        if xs.len() < 2
            || xs.len() != ys.len()
            || xs.windows(2).any(|w| !(w[1] > w[0]))
            || ys.iter().any(|&y| !(y > 0.0) || !y.is_finite())
        {
            return Err(DiffusionError::BadTable);
        }
        let mut cumulative = vec![0.0; xs.len()];
        for i in 1..xs.len() {
            cumulative[i] = cumulative[i - 1] + 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
        }
        Ok(Self { xs, ys, cumulative })
    }

    pub fn value(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = self.xs.partition_point(|&t| t <= x) - 1;
        let w = (x - self.xs[i]) / (self.xs[i + 1] - self.xs[i]);
        self.ys[i] + w * (self.ys[i + 1] - self.ys[i])
    }

    pub fn primitive(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0] * (x - self.xs[0]);
        }
        if x >= self.xs[n - 1] {
            return self.cumulative[n - 1] + self.ys[n - 1] * (x - self.xs[n - 1]);
        }
        let i = self.xs.partition_point(|&t| t <= x) - 1;
        self.cumulative[i] + 0.5 * (self.ys[i] + self.value(x)) * (x - self.xs[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub position: f64,
    pub mass: f64,
}

/// Positive speed measure: a density plus finitely many atoms.
#[derive(Debug, Clone)]
pub struct SpeedMeasure {
    pub density: Density,
    pub atoms: Vec<Atom>,
}

impl SpeedMeasure {
    pub fn new(density: Density) -> Self {
        Self {
            density,
            atoms: Vec::new(),
        }
    }

    pub fn lebesgue() -> Self {
        Self::new(Density::lebesgue())
    }

    pub fn with_atom(mut self, position: f64, mass: f64) -> Result<Self, DiffusionError> {
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(DiffusionError::BadAtom { position, mass });
        }
        self.atoms.push(Atom { position, mass });
        Ok(self)
    }

    pub fn density_at(&self, x: f64) -> f64 {
        self.density.value(x)
    }

    /// Atoms strictly inside `(a, b)`.
    pub fn atoms_in(&self, a: f64, b: f64) -> impl Iterator<Item = &Atom> {
        self.atoms
            .iter()
            .filter(move |at| at.position > a && at.position < b)
    }

    /// `m((a, b))`: closed-form integral of the density when available,
    /// composite trapezoid with `panels` panels otherwise, plus atoms.
    pub fn mass(&self, a: f64, b: f64, panels: usize) -> Result<f64, DiffusionError> {
        let continuous = match (self.density.primitive(a), self.density.primitive(b)) {
            (Some(pa), Some(pb)) => {
                let v = pb - pa;
                if !v.is_finite() {
                    return Err(DiffusionError::NonFiniteDensity {
                        x: if pa.is_finite() { b } else { a },
                    });
                }
                v
            }
            _ => self.trapezoid_mass(a, b, panels)?,
        };
        let atoms: f64 = self.atoms_in(a, b).map(|at| at.mass).sum();
        Ok(continuous + atoms)
    }

    /// Composite trapezoid integral of the density over `[a, b]`.
    pub fn trapezoid_mass(&self, a: f64, b: f64, panels: usize) -> Result<f64, DiffusionError> {
        trapezoid(|x| self.density.value(x), a, b, panels)
            .map_err(|x| DiffusionError::NonFiniteDensity { x })
    }

    /// `m(l - ·)` viewed from the far end of an edge of length `l`.
    pub fn reflected(&self, length: f64) -> Self {
        Self {
            density: match &self.density {
                Density::Constant(c) => Density::Constant(*c),
                Density::Reflected { inner, length: l } if *l == length => (**inner).clone(),
                other => Density::Reflected {
                    inner: Box::new(other.clone()),
                    length,
                },
            },
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    position: length - a.position,
                    mass: a.mass,
                })
                .collect(),
        }
    }
}

/// Lateral condition at a vertex: bias weights per edge slot and stickiness.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexCondition {
    betas: Vec<f64>,
    rho: f64,
}

impl VertexCondition {
    pub fn new(vertex: VertexId, betas: Vec<f64>, rho: f64) -> Result<Self, DiffusionError> {
        if let Some(&beta) = betas.iter().find(|&&b| !(b > 0.0)) {
            return Err(DiffusionError::NonPositiveBeta { vertex, beta });
        }
        let sum: f64 = betas.iter().sum();
        if (sum - 1.0).abs() > BETA_SUM_TOL {
            return Err(DiffusionError::BetaSum { vertex, sum });
        }
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(DiffusionError::NegativeRho { vertex, rho });
        }
        Ok(Self { betas, rho })
    }

    /// Equal weights over `degree` slots.
    pub fn uniform(vertex: VertexId, degree: usize, rho: f64) -> Result<Self, DiffusionError> {
        Self::new(vertex, vec![1.0 / degree as f64; degree], rho)
    }

    /// Weights aligned with [`MetricGraph::incidences`].
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

/// Scale and speed as seen from a vertex along one edge slot.
#[derive(Debug, Clone)]
pub struct OrientedEdge {
    pub incidence: Incidence,
    pub length: f64,
    pub scale: ScaleFn,
    pub speed: SpeedMeasure,
}

impl OrientedEdge {
    /// Maps a reoriented coordinate back to the edge coordinate.
    pub fn edge_coord(&self, u: f64) -> f64 {
        match self.incidence.end {
            EdgeEnd::Tail => u,
            EdgeEnd::Head => self.length - u,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    graph: MetricGraph,
    scales: Vec<ScaleFn>,
    speeds: Vec<SpeedMeasure>,
    vertex_conditions: Vec<VertexCondition>,
    quad_panels: usize,
}

impl DiffusionSpec {
    pub fn new(
        graph: MetricGraph,
        scales: Vec<ScaleFn>,
        speeds: Vec<SpeedMeasure>,
        vertex_conditions: Vec<VertexCondition>,
    ) -> Result<Self, DiffusionError> {
        let n_edges = graph.n_edges();
        for (what, got) in [("scales", scales.len()), ("speeds", speeds.len())] {
            if got != n_edges {
                return Err(DiffusionError::WrongCount {
                    what,
                    expected: n_edges,
                    got,
                });
            }
        }
        if vertex_conditions.len() != graph.n_vertices() {
            return Err(DiffusionError::WrongCount {
                what: "vertex conditions",
                expected: graph.n_vertices(),
                got: vertex_conditions.len(),
            });
        }
        for v in graph.vertices() {
            let expected = graph.incidences(v).map(|s| s.len()).unwrap_or(0);
            let got = vertex_conditions[v.0].betas.len();
            if expected != got {
                return Err(DiffusionError::BetaCount {
                    vertex: v,
                    expected,
                    got,
                });
            }
        }
        for (edge, scale) in graph.edges().iter().zip(&scales) {
            validate_scale(edge.id, edge.length, scale)?;
        }
        for (edge, speed) in graph.edges().iter().zip(&speeds) {
            for atom in &speed.atoms {
                if !(atom.position > 0.0 && atom.position < edge.length) {
                    return Err(DiffusionError::IntervalOutOfRange {
                        edge: edge.id,
                        a: atom.position,
                        b: atom.position,
                        length: edge.length,
                    });
                }
            }
        }
        Ok(Self {
            graph,
            scales,
            speeds,
            vertex_conditions,
            quad_panels: DEFAULT_QUAD_PANELS,
        })
    }

    /// Natural scale and Lebesgue speed on every edge.
    pub fn walsh(graph: MetricGraph, conditions: Vec<VertexCondition>) -> Result<Self, DiffusionError> {
        let n = graph.n_edges();
        Self::new(
            graph,
            vec![ScaleFn::identity(); n],
            vec![SpeedMeasure::lebesgue(); n],
            conditions,
        )
    }

    pub fn with_quad_panels(mut self, panels: usize) -> Self {
        self.quad_panels = panels.max(1);
        self
    }

    pub fn quad_panels(&self) -> usize {
        self.quad_panels
    }

    pub fn graph(&self) -> &MetricGraph {
        &self.graph
    }

    pub fn scale(&self, e: EdgeId) -> &ScaleFn {
        &self.scales[e.0]
    }

    pub fn speed(&self, e: EdgeId) -> &SpeedMeasure {
        &self.speeds[e.0]
    }

    pub fn vertex_condition(&self, v: VertexId) -> &VertexCondition {
        &self.vertex_conditions[v.0]
    }

    /// Natural scale on every edge.
    pub fn is_nse(&self) -> bool {
        self.scales.iter().all(ScaleFn::is_identity)
    }

    /// Scale and speed of `e` reoriented so that coordinate 0 sits at `v`.
    pub fn reoriented(&self, v: VertexId, e: EdgeId) -> Result<(ScaleFn, SpeedMeasure), DiffusionError> {
        let slots = self
            .graph
            .incidences(v)
            .map_err(|_| DiffusionError::NotIncident { vertex: v, edge: e })?;
        let inc = slots
            .iter()
            .find(|s| s.edge == e)
            .copied()
            .ok_or(DiffusionError::NotIncident { vertex: v, edge: e })?;
        let o = self.oriented(inc);
        Ok((o.scale, o.speed))
    }

    pub fn oriented(&self, inc: Incidence) -> OrientedEdge {
        let edge = &self.graph.edges()[inc.edge.0];
        let (scale, speed) = match inc.end {
            EdgeEnd::Tail => (self.scales[inc.edge.0].clone(), self.speeds[inc.edge.0].clone()),
            EdgeEnd::Head => (
                self.scales[inc.edge.0].reflected(edge.length),
                self.speeds[inc.edge.0].reflected(edge.length),
            ),
        };
        OrientedEdge {
            incidence: inc,
            length: edge.length,
            scale,
            speed,
        }
    }

    /// `m_e((a, b))`.
    pub fn speed_mass(&self, e: EdgeId, a: f64, b: f64) -> Result<f64, DiffusionError> {
        let edge = self
            .graph
            .edge(e)
            .map_err(|_| DiffusionError::IntervalOutOfRange {
                edge: e,
                a,
                b,
                length: f64::NAN,
            })?;
        if !(a >= 0.0 && a < b && b <= edge.length) {
            return Err(DiffusionError::IntervalOutOfRange {
                edge: e,
                a,
                b,
                length: edge.length,
            });
        }
        self.speeds[e.0].mass(a, b, self.quad_panels)
    }

    /// Samples every reoriented density and every edge density against
    /// `k1 / (1 + k2 y²)` on a log-spaced grid. Sampling only; not a proof.
    pub fn check_speed_lower_bound(&self, k1: f64, k2: f64) -> SpeedBoundReport {
        let bound = |y: f64| k1 / (1.0 + k2 * y * y);
        let mut report = SpeedBoundReport::default();
        for v in self.graph.vertices() {
            for &inc in self.graph.incidences(v).unwrap_or(&[]) {
                let o = self.oriented(inc);
                for y in lower_bound_grid(o.length) {
                    let m = o.speed.density_at(y);
                    report.points_checked += 1;
                    if !(m >= bound(y)) {
                        report.reoriented.push(SpeedViolation {
                            vertex: Some(v),
                            edge: inc.edge,
                            y,
                            density: m,
                            bound: bound(y),
                        });
                    }
                }
            }
        }
        for edge in self.graph.edges() {
            for y in lower_bound_grid(edge.length) {
                let m = self.speeds[edge.id.0].density_at(y);
                if !(m >= bound(y)) {
                    report.unoriented.push(SpeedViolation {
                        vertex: None,
                        edge: edge.id,
                        y,
                        density: m,
                        bound: bound(y),
                    });
                }
            }
        }
        report
    }
}

fn validate_scale(edge: EdgeId, length: f64, scale: &ScaleFn) -> Result<(), DiffusionError> {
    if scale.is_identity() {
        return Ok(());
    }
    let s0 = scale.eval(0.0);
    if s0 != 0.0 {
        return Err(DiffusionError::ScaleOrigin { edge, value: s0 });
    }
    let slope = scale.slope(0.0);
    if !(slope > 0.0) || !slope.is_finite() {
        return Err(DiffusionError::ScaleSlope { edge, slope });
    }
    let top = if length.is_finite() { length } else { 1e3 };
    let n = 256;
    let mut prev = s0;
    for i in 1..=n {
        let x = top * i as f64 / n as f64;
        let x = if length.is_finite() && i == n { length } else { x };
        let s = scale.eval(x);
        if !(s > prev) {
            return Err(DiffusionError::ScaleNotIncreasing { edge, x });
        }
        prev = s;
    }
    Ok(())
}

// Log-spaced sample points in (0, min(length, 1e3)] plus the origin.
fn lower_bound_grid(length: f64) -> Vec<f64> {
    let top = if length.is_finite() {
        length * (1.0 - 1e-9)
    } else {
        1e3
    };
    let n = 200;
    let lo = (1e-6f64).min(top * 1e-3);
    let mut grid = vec![0.0];
    grid.extend((0..n).map(|i| lo * (top / lo).powf(i as f64 / (n - 1) as f64)));
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedViolation {
    pub vertex: Option<VertexId>,
    pub edge: EdgeId,
    pub y: f64,
    pub density: f64,
    pub bound: f64,
}

/// Outcome of [`DiffusionSpec::check_speed_lower_bound`].
#[derive(Debug, Clone, Default)]
pub struct SpeedBoundReport {
    /// Violations of the reoriented densities, measured from each vertex.
    pub reoriented: Vec<SpeedViolation>,
    /// Violations of the densities in their own edge coordinates.
    pub unoriented: Vec<SpeedViolation>,
    pub points_checked: usize,
}

impl SpeedBoundReport {
    pub fn holds(&self) -> bool {
        self.reoriented.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EdgeSpec;
    use proptest::prelude::*;

    fn interval_spec(density: Density) -> DiffusionSpec {
        let g = MetricGraph::interval(1.0).unwrap();
        DiffusionSpec::new(
            g,
            vec![ScaleFn::identity()],
            vec![SpeedMeasure::new(density)],
            vec![
                VertexCondition::new(VertexId(0), vec![1.0], 0.0).unwrap(),
                VertexCondition::new(VertexId(1), vec![1.0], 0.0).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn lebesgue_mass() {
        let spec = interval_spec(Density::lebesgue());
        let m = spec.speed_mass(EdgeId(0), 0.2, 0.5).unwrap();
        assert!((m - 0.3).abs() < 1e-15);
    }

    #[test]
    fn boundary_power_mass_closed_form_and_trapezoid() {
        let d = Density::PowerBoundary { end: 1.0, p: 2.0 };
        let speed = SpeedMeasure::new(d);
        // 1/(1-x) from 0 to 0.5
        let exact = speed.mass(0.0, 0.5, 256).unwrap();
        assert!((exact - 1.0).abs() < 1e-14);
        let quad = speed.trapezoid_mass(0.0, 0.5, 256).unwrap();
        assert!((quad - 1.0).abs() < 1e-5, "trapezoid {quad}");
        let quad_fine = speed.trapezoid_mass(0.0, 0.5, 4096).unwrap();
        assert!((quad_fine - 1.0).abs() < (quad - 1.0).abs());
    }

    #[test]
    fn atom_only_mass() {
        let speed = SpeedMeasure::new(Density::Constant(0.0))
            .with_atom(0.3, 2.0)
            .unwrap();
        assert_eq!(speed.mass(0.0, 1.0, 16).unwrap(), 2.0);
        assert_eq!(speed.mass(0.3, 1.0, 16).unwrap(), 0.0);
    }

    #[test]
    fn custom_density_singular_inside_interval_errors() {
        let speed = SpeedMeasure::new(Density::custom(|x| 1.0 / (x - 0.5)));
        assert!(matches!(
            speed.mass(0.0, 1.0, 2),
            Err(DiffusionError::NonFiniteDensity { .. })
        ));
    }

    #[test]
    fn out_of_range_interval() {
        let spec = interval_spec(Density::lebesgue());
        assert!(matches!(
            spec.speed_mass(EdgeId(0), 0.5, 1.5),
            Err(DiffusionError::IntervalOutOfRange { .. })
        ));
        assert!(matches!(
            spec.speed_mass(EdgeId(0), 0.5, 0.4),
            Err(DiffusionError::IntervalOutOfRange { .. })
        ));
    }

    #[test]
    fn reorientation_of_inward_edge() {
        let spec = interval_spec(Density::PowerBoundary { end: 1.0, p: 2.0 });
        let (s, m) = spec.reoriented(VertexId(0), EdgeId(0)).unwrap();
        assert!(s.is_identity());
        assert_eq!(m.density_at(0.25), 1.0 / 0.75f64.powi(2));
        let (_, m) = spec.reoriented(VertexId(1), EdgeId(0)).unwrap();
        // m'(1 - u) = u^-2
        assert!((m.density_at(0.25) - 16.0).abs() < 1e-12);
        let star = MetricGraph::star(&[1.0, 1.0]).unwrap();
        let other = DiffusionSpec::walsh(
            star,
            vec![VertexCondition::uniform(VertexId(0), 2, 0.0).unwrap()],
        )
        .unwrap();
        assert_eq!(
            other.reoriented(VertexId(1), EdgeId(0)).unwrap_err(),
            DiffusionError::NotIncident {
                vertex: VertexId(1),
                edge: EdgeId(0)
            }
        );
    }

    #[test]
    fn reflected_scale_offsets_to_zero() {
        let s = ScaleFn::custom(|x| x * x + x, |x| 2.0 * x + 1.0);
        let r = s.reflected(2.0);
        assert_eq!(r.eval(0.0), 0.0);
        assert!((r.eval(0.5) - (6.0 - (1.5 * 1.5 + 1.5))).abs() < 1e-12);
        assert_eq!(r.slope(0.0), 5.0);
    }

    #[test]
    fn vertex_condition_invariants() {
        let v = VertexId(0);
        assert!(matches!(
            VertexCondition::new(v, vec![0.3, 0.3, 0.3], 0.0),
            Err(DiffusionError::BetaSum { .. })
        ));
        assert!(matches!(
            VertexCondition::new(v, vec![1.5, -0.5], 0.0),
            Err(DiffusionError::NonPositiveBeta { .. })
        ));
        assert!(matches!(
            VertexCondition::new(v, vec![1.0], -1.0),
            Err(DiffusionError::NegativeRho { .. })
        ));
        assert!(VertexCondition::new(v, vec![0.5, 0.25, 0.25], 2.0).is_ok());
    }

    #[test]
    fn spec_rejects_mismatched_betas_and_bad_scales() {
        let g = MetricGraph::build(1, &[EdgeSpec::new(1.0, 0, None)]).unwrap();
        let err = DiffusionSpec::walsh(
            g.clone(),
            vec![VertexCondition::uniform(VertexId(0), 2, 0.0).unwrap()],
        )
        .unwrap_err();
        assert!(matches!(err, DiffusionError::BetaCount { .. }));
        let err = DiffusionSpec::new(
            g,
            vec![ScaleFn::custom(|x| -x, |_| -1.0)],
            vec![SpeedMeasure::lebesgue()],
            vec![VertexCondition::uniform(VertexId(0), 1, 0.0).unwrap()],
        )
        .unwrap_err();
        assert!(matches!(err, DiffusionError::ScaleSlope { .. }));
    }

    fn star_with(densities: Vec<Density>) -> DiffusionSpec {
        let n = densities.len();
        let g = MetricGraph::star(&vec![f64::INFINITY; n]).unwrap();
        DiffusionSpec::new(
            g,
            vec![ScaleFn::identity(); n],
            densities.into_iter().map(SpeedMeasure::new).collect(),
            vec![VertexCondition::uniform(VertexId(0), n, 0.0).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn lower_bound_checker() {
        let spec = star_with(vec![Density::lebesgue()]);
        assert!(spec.check_speed_lower_bound(1.0, 1.0).holds());

        let spec = star_with(vec![Density::PowerShifted { eps: 0.5, p: 2.0 }]);
        let report = spec.check_speed_lower_bound(0.1, 1.0);
        assert!(report.holds());
        assert!(report.unoriented.is_empty());
        // independent evaluation of both curves on [0, 1e3]
        for i in 0..=10_000 {
            let y = 1e3 * i as f64 / 1e4;
            assert!((0.5 + y).powi(-2) >= 0.1 / (1.0 + y * y));
        }

        let spec = star_with(vec![Density::custom(|x: f64| (-x).exp())]);
        let report = spec.check_speed_lower_bound(1.0, 0.0);
        assert!(!report.holds());
        assert!(report.reoriented.iter().all(|v| v.y > 0.0));
    }

    proptest! {
        #[test]
        fn mass_is_additive(a in 0.0f64..0.9, t1 in 0.01f64..1.0, t2 in 0.01f64..1.0, p in 0.5f64..2.5) {
            let speed = SpeedMeasure::new(Density::PowerBoundary { end: 1.0, p })
                .with_atom(0.45, 0.7).unwrap();
            let b = a + (0.95 - a) * t1 * 0.5;
            let c = b + (0.95 - b) * t2;
            prop_assume!(b > a && c > b);
            let m = |x, y| speed.mass(x, y, 256).unwrap();
            let total = m(a, c);
            let split = m(a, b) + m(b, c) + if b == 0.45 { 0.7 } else { 0.0 };
            prop_assert!((total - split).abs() <= 1e-10 * (1.0 + total));
        }

        #[test]
        fn double_reflection_is_identity(x in 0.0f64..2.0, eps in 0.1f64..2.0) {
            let s = ScaleFn::exponential(0.7);
            let rr = s.reflected(2.0).reflected(2.0);
            prop_assert!((rr.eval(x) - s.eval(x)).abs() < 1e-12);
            let m = SpeedMeasure::new(Density::PowerShifted { eps, p: 1.5 }).with_atom(0.3, 1.0).unwrap();
            let mm = m.reflected(2.0).reflected(2.0);
            prop_assert!((mm.density_at(x) - m.density_at(x)).abs() <= 1e-12 * m.density_at(x));
            prop_assert!((mm.atoms[0].position - 0.3).abs() < 1e-15);
        }
    }
}
