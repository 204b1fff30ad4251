//! Finite metric graphs: edges are intervals `[0, l)`, `[0, l]` or `[0, ∞)`
//! glued at their closed endpoints.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexId(pub usize);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge {index} has non-positive length {length}")]
    NonPositiveLength { index: usize, length: f64 },
    #[error("edge {index} references vertex {vertex} but the graph has {n_vertices} vertices")]
    DanglingVertexReference {
        index: usize,
        vertex: usize,
        n_vertices: usize,
    },
    #[error("edge {index} has infinite length and cannot carry a head vertex")]
    InfiniteEdgeWithHead { index: usize },
    #[error("point ({edge}, {coord}) is not on the graph")]
    InvalidPoint { edge: EdgeId, coord: f64 },
    #[error("unknown vertex {0}")]
    UnknownVertex(VertexId),
    #[error("unknown edge {0}")]
    UnknownEdge(EdgeId),
}

/// Which end of an edge touches a vertex. `Tail` is coordinate 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeEnd {
    Tail,
    Head,
}

/// Input description of one edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub length: f64,
    pub tail: VertexId,
    pub head: Option<VertexId>,
}

impl EdgeSpec {
    pub fn new(length: f64, tail: usize, head: Option<usize>) -> Self {
        Self {
            length,
            tail: VertexId(tail),
            head: head.map(VertexId),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: EdgeId,
    pub length: f64,
    pub tail: VertexId,
    pub head: Option<VertexId>,
}

impl Edge {
    pub fn is_infinite(&self) -> bool {
        self.length.is_infinite()
    }

    /// Finite length with no head vertex: the far end is an open boundary.
    pub fn is_open(&self) -> bool {
        self.head.is_none() && self.length.is_finite()
    }

    /// The far end is either open or at infinity.
    pub fn is_unbounded(&self) -> bool {
        self.head.is_none()
    }
}

/// An edge slot at a vertex. A self-loop contributes two slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Incidence {
    pub edge: EdgeId,
    pub end: EdgeEnd,
}

/// A point `(edge, coordinate)`; several representations may denote the same vertex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphPoint {
    pub edge: EdgeId,
    pub coord: f64,
}

impl GraphPoint {
    pub fn new(edge: usize, coord: f64) -> Self {
        Self {
            edge: EdgeId(edge),
            coord,
        }
    }
}

/// Canonical location of a point under the vertex identification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    Vertex(VertexId),
    Edge { edge: EdgeId, coord: f64 },
}

#[derive(Debug, Clone)]
pub struct MetricGraph {
    edges: Vec<Edge>,
    n_vertices: usize,
    edges_in: Vec<Vec<EdgeId>>,
    edges_out: Vec<Vec<EdgeId>>,
    slots: Vec<Vec<Incidence>>,
    // all-pairs vertex distances
    vertex_dist: Vec<Vec<f64>>,
}

impl MetricGraph {
    /// Builds and validates a graph with `n_vertices` vertices `0..n_vertices`.
    pub fn build(n_vertices: usize, edges: &[EdgeSpec]) -> Result<Self, GraphError> {
        let mut built = Vec::with_capacity(edges.len());
        let mut edges_in = vec![Vec::new(); n_vertices];
        let mut edges_out = vec![Vec::new(); n_vertices];
        let mut slots = vec![Vec::new(); n_vertices];

        for (index, spec) in edges.iter().enumerate() {
            if !(spec.length > 0.0) {
                return Err(GraphError::NonPositiveLength {
                    index,
                    length: spec.length,
                });
            }
            for v in std::iter::once(spec.tail).chain(spec.head) {
                if v.0 >= n_vertices {
                    return Err(GraphError::DanglingVertexReference {
                        index,
                        vertex: v.0,
                        n_vertices,
                    });
                }
            }
            if spec.length.is_infinite() && spec.head.is_some() {
                return Err(GraphError::InfiniteEdgeWithHead { index });
            }
            let id = EdgeId(index);
            edges_out[spec.tail.0].push(id);
            slots[spec.tail.0].push(Incidence {
                edge: id,
                end: EdgeEnd::Tail,
            });
            if let Some(h) = spec.head {
                edges_in[h.0].push(id);
                slots[h.0].push(Incidence {
                    edge: id,
                    end: EdgeEnd::Head,
                });
            }
            built.push(Edge {
                id,
                length: spec.length,
                tail: spec.tail,
                head: spec.head,
            });
        }

        let vertex_dist = floyd_warshall(n_vertices, &built);
        Ok(Self {
            edges: built,
            n_vertices,
            edges_in,
            edges_out,
            slots,
            vertex_dist,
        })
    }

    /// Star graph with one central vertex (id 0) and outward edges of the given lengths.
    /// Finite lengths are open at the far end.
    pub fn star(lengths: &[f64]) -> Result<Self, GraphError> {
        let specs: Vec<_> = lengths.iter().map(|&l| EdgeSpec::new(l, 0, None)).collect();
        Self::build(1, &specs)
    }

    /// The closed interval `[0, length]` with vertices 0 (tail) and 1 (head).
    pub fn interval(length: f64) -> Result<Self, GraphError> {
        Self::build(2, &[EdgeSpec::new(length, 0, Some(1))])
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexId> {
        (0..self.n_vertices).map(VertexId)
    }

    pub fn edge(&self, e: EdgeId) -> Result<&Edge, GraphError> {
        self.edges.get(e.0).ok_or(GraphError::UnknownEdge(e))
    }

    /// `(E_in(v), E_out(v))`.
    pub fn incident_edges(&self, v: VertexId) -> Result<(&[EdgeId], &[EdgeId]), GraphError> {
        if v.0 >= self.n_vertices {
            return Err(GraphError::UnknownVertex(v));
        }
        Ok((&self.edges_in[v.0], &self.edges_out[v.0]))
    }

    /// Edge slots at `v`, outward (tail) and inward (head) ends in edge order.
    pub fn incidences(&self, v: VertexId) -> Result<&[Incidence], GraphError> {
        self.slots
            .get(v.0)
            .map(Vec::as_slice)
            .ok_or(GraphError::UnknownVertex(v))
    }

    pub fn endpoint(&self, inc: Incidence) -> Option<VertexId> {
        let edge = &self.edges[inc.edge.0];
        match inc.end {
            EdgeEnd::Tail => Some(edge.tail),
            EdgeEnd::Head => edge.head,
        }
    }

    /// A representation of vertex `v` as a point, if `v` has an incident edge.
    pub fn vertex_point(&self, v: VertexId) -> Option<GraphPoint> {
        let inc = self.slots.get(v.0)?.first()?;
        let edge = &self.edges[inc.edge.0];
        Some(GraphPoint {
            edge: inc.edge,
            coord: match inc.end {
                EdgeEnd::Tail => 0.0,
                EdgeEnd::Head => edge.length,
            },
        })
    }

    /// Validates `p` and maps it to its canonical location.
    pub fn locate(&self, p: GraphPoint) -> Result<Location, GraphError> {
        let edge = self.edge(p.edge).map_err(|_| GraphError::InvalidPoint {
            edge: p.edge,
            coord: p.coord,
        })?;
        let invalid = GraphError::InvalidPoint {
            edge: p.edge,
            coord: p.coord,
        };
        if !p.coord.is_finite() || p.coord < 0.0 || p.coord > edge.length {
            return Err(invalid);
        }
        if p.coord == 0.0 {
            return Ok(Location::Vertex(edge.tail));
        }
        if p.coord == edge.length {
            return match edge.head {
                Some(h) => Ok(Location::Vertex(h)),
                None => Err(invalid),
            };
        }
        Ok(Location::Edge {
            edge: p.edge,
            coord: p.coord,
        })
    }

    pub fn same_point(&self, p: GraphPoint, q: GraphPoint) -> Result<bool, GraphError> {
        Ok(self.locate(p)? == self.locate(q)?)
    }

    pub fn vertex_distance(&self, v: VertexId, w: VertexId) -> f64 {
        self.vertex_dist[v.0][w.0]
    }

    /// Length of a shortest path between `p` and `q`.
    pub fn geodesic_distance(&self, p: GraphPoint, q: GraphPoint) -> Result<f64, GraphError> {
        let lp = self.locate(p)?;
        let lq = self.locate(q)?;
        let mut best = f64::INFINITY;
        if let (
            Location::Edge { edge: e1, coord: x },
            Location::Edge { edge: e2, coord: y },
        ) = (lp, lq)
        {
            if e1 == e2 {
                best = (x - y).abs();
            }
        }
        for (a, da) in self.exits(lp) {
            for (b, db) in self.exits(lq) {
                best = best.min(da + self.vertex_dist[a.0][b.0] + db);
            }
        }
        Ok(best)
    }

    // Vertices reachable directly from a location, with the distance to each.
    fn exits(&self, loc: Location) -> Vec<(VertexId, f64)> {
        match loc {
            Location::Vertex(v) => vec![(v, 0.0)],
            Location::Edge { edge, coord } => {
                let e = &self.edges[edge.0];
                let mut out = vec![(e.tail, coord)];
                if let Some(h) = e.head {
                    out.push((h, e.length - coord));
                }
                out
            }
        }
    }
}

fn floyd_warshall(n: usize, edges: &[Edge]) -> Vec<Vec<f64>> {
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for e in edges {
        if let Some(h) = e.head {
            let (a, b) = (e.tail.0, h.0);
            if e.length < d[a][b] {
                d[a][b] = e.length;
                d[b][a] = e.length;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[i][k];
            if dik.is_infinite() {
                continue;
            }
            for j in 0..n {
                let via = dik + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn star3() -> MetricGraph {
        MetricGraph::star(&[f64::INFINITY; 3]).unwrap()
    }

    #[test]
    fn star_graph_construction() {
        let g = star3();
        assert_eq!(g.n_edges(), 3);
        let (ein, eout) = g.incident_edges(VertexId(0)).unwrap();
        assert!(ein.is_empty());
        assert_eq!(eout, &[EdgeId(0), EdgeId(1), EdgeId(2)]);
    }

    #[test]
    fn interval_incidence() {
        let g = MetricGraph::interval(1.0).unwrap();
        let (ein, eout) = g.incident_edges(VertexId(1)).unwrap();
        assert_eq!(ein, &[EdgeId(0)]);
        assert!(eout.is_empty());
        assert_eq!(
            g.incident_edges(VertexId(7)),
            Err(GraphError::UnknownVertex(VertexId(7)))
        );
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(matches!(
            MetricGraph::build(1, &[EdgeSpec::new(0.0, 0, None)]),
            Err(GraphError::NonPositiveLength { .. })
        ));
        assert!(matches!(
            MetricGraph::build(1, &[EdgeSpec::new(1.0, 0, Some(3))]),
            Err(GraphError::DanglingVertexReference { vertex: 3, .. })
        ));
        assert!(matches!(
            MetricGraph::build(2, &[EdgeSpec::new(f64::INFINITY, 0, Some(1))]),
            Err(GraphError::InfiniteEdgeWithHead { .. })
        ));
    }

    #[test]
    fn star_distances_match_closed_form() {
        let g = star3();
        let d = |p, q| g.geodesic_distance(p, q).unwrap();
        assert_eq!(d(GraphPoint::new(0, 0.3), GraphPoint::new(0, 1.7)), 1.4);
        assert_eq!(d(GraphPoint::new(0, 0.3), GraphPoint::new(1, 1.7)), 2.0);
        assert_eq!(d(GraphPoint::new(0, 0.0), GraphPoint::new(2, 0.0)), 0.0);
        assert!(g
            .same_point(GraphPoint::new(0, 0.0), GraphPoint::new(1, 0.0))
            .unwrap());
    }

    #[test]
    fn open_endpoint_is_not_a_point() {
        let g = MetricGraph::star(&[1.0, 1.0]).unwrap();
        assert!(matches!(
            g.locate(GraphPoint::new(0, 1.0)),
            Err(GraphError::InvalidPoint { .. })
        ));
        assert!(g.locate(GraphPoint::new(0, 0.999)).is_ok());
    }

    #[test]
    fn cycle_routes_the_short_way() {
        // triangle with sides 1, 1, 5
        let g = MetricGraph::build(
            3,
            &[
                EdgeSpec::new(1.0, 0, Some(1)),
                EdgeSpec::new(1.0, 1, Some(2)),
                EdgeSpec::new(5.0, 2, Some(0)),
            ],
        )
        .unwrap();
        let d = g
            .geodesic_distance(GraphPoint::new(2, 4.0), GraphPoint::new(2, 0.5))
            .unwrap();
        // around: 1 (to v0) + 2 (v0 -> v2) + 0.5 = 3.5 ; direct 3.5
        assert!((d - 3.5).abs() < 1e-12);
        let d = g
            .geodesic_distance(GraphPoint::new(2, 4.5), GraphPoint::new(2, 0.5))
            .unwrap();
        assert!((d - 3.0).abs() < 1e-12);
    }

    fn random_graph() -> MetricGraph {
        MetricGraph::build(
            4,
            &[
                EdgeSpec::new(1.0, 0, Some(1)),
                EdgeSpec::new(2.5, 1, Some(2)),
                EdgeSpec::new(0.7, 2, Some(0)),
                EdgeSpec::new(1.3, 2, Some(3)),
                EdgeSpec::new(f64::INFINITY, 3, None),
                EdgeSpec::new(0.9, 1, None),
            ],
        )
        .unwrap()
    }

    fn point_strategy() -> impl Strategy<Value = GraphPoint> {
        (0usize..6, 0.0f64..1.0).prop_map(|(e, t)| {
            let lens = [1.0, 2.5, 0.7, 1.3, 6.0, 0.9];
            // open edge 5 must stay below its length
            let scale = if e == 5 { 0.999 } else { 1.0 };
            GraphPoint::new(e, t * lens[e] * scale)
        })
    }

    proptest! {
        #[test]
        fn geodesic_is_a_metric(p in point_strategy(), q in point_strategy(), r in point_strategy()) {
            let g = random_graph();
            let d = |a, b| g.geodesic_distance(a, b).unwrap();
            prop_assert!(d(p, q) >= 0.0);
            prop_assert!((d(p, q) - d(q, p)).abs() < 1e-12);
            prop_assert!(d(p, r) <= d(p, q) + d(q, r) + 1e-12);
            prop_assert!(d(p, p) == 0.0);
            if d(p, q) == 0.0 {
                prop_assert!(g.same_point(p, q).unwrap());
            }
        }

        #[test]
        fn single_edge_distance_is_coordinate_gap(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let g = MetricGraph::interval(1.0).unwrap();
            let d = g.geodesic_distance(GraphPoint::new(0, x), GraphPoint::new(0, y)).unwrap();
            prop_assert_eq!(d, (x - y).abs());
        }
    }
}
