//! Structured triangulation of the axisymmetric half-plane `(0, L) x (0, R)`.
//!
//! Vertices are laid out on a tensor grid `x_i`, `r_j` with node index
//! `i * (nr + 1) + j`. Every cell is split along the diagonal running from
//! its bottom-left to its top-right corner. The radial grid always contains
//! the fiber wall radii `R1` and `R2` as grid lines, so each triangle lies in
//! exactly one subdomain.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),
    #[error("unknown boundary tag `{0}`")]
    UnknownTag(String),
}

/// Fiber geometry: length and the three radii `R1 < R2 < R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxiGeometry {
    pub length: f64,
    pub r_blood: f64,
    pub r_membrane: f64,
    pub r_outer: f64,
}

impl AxiGeometry {
    pub fn new(length: f64, r_blood: f64, r_membrane: f64, r_outer: f64) -> Result<Self, MeshError> {
        let g = AxiGeometry {
            length,
            r_blood,
            r_membrane,
            r_outer,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let all = [self.length, self.r_blood, self.r_membrane, self.r_outer];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(MeshError::InvalidGeometry("non-finite dimension".into()));
        }
        if self.length <= 0.0 {
            return Err(MeshError::InvalidGeometry(format!("length must be positive, got {}", self.length)));
        }
        if !(0.0 < self.r_blood && self.r_blood < self.r_membrane && self.r_membrane < self.r_outer) {
            return Err(MeshError::InvalidGeometry(format!(
                "radii must satisfy 0 < R1 < R2 < R, got {} {} {}",
                self.r_blood, self.r_membrane, self.r_outer
            )));
        }
        Ok(())
    }
}

/// Number of cells along `x` and across each radial layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub nx: usize,
    pub nr_blood: usize,
    pub nr_membrane: usize,
    pub nr_dialysate: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution {
            nx: 80,
            nr_blood: 12,
            nr_membrane: 6,
            nr_dialysate: 12,
        }
    }
}

impl Resolution {
    pub fn new(nx: usize, nr_blood: usize, nr_membrane: usize, nr_dialysate: usize) -> Self {
        Resolution {
            nx,
            nr_blood,
            nr_membrane,
            nr_dialysate,
        }
    }

    /// Coarser grid used for studies that need thousands of forward solves.
    pub fn study() -> Self {
        Resolution::new(40, 6, 3, 6)
    }

    pub fn nr(&self) -> usize {
        self.nr_blood + self.nr_membrane + self.nr_dialysate
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.nx == 0 || self.nr_blood == 0 || self.nr_membrane == 0 || self.nr_dialysate == 0 {
            return Err(MeshError::InvalidResolution(format!(
                "all cell counts must be at least 1, got nx={} nr=({}, {}, {})",
                self.nx, self.nr_blood, self.nr_membrane, self.nr_dialysate
            )));
        }
        Ok(())
    }

    /// Every count multiplied by `k`.
    pub fn refined(&self, k: usize) -> Self {
        Resolution::new(self.nx * k, self.nr_blood * k, self.nr_membrane * k, self.nr_dialysate * k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subdomain {
    Blood,
    Membrane,
    Dialysate,
}

/// Boundary pieces of the computational domain.
///
/// `MembraneEnd` covers the two short wall segments at `x = 0` and `x = L`
/// with `R1 < r < R2`; they carry homogeneous natural conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTag {
    InletBlood,
    OutletBlood,
    InletDialysate,
    OutletDialysate,
    Axis,
    Outer,
    BloodMembrane,
    DialysateMembrane,
    MembraneEnd,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 9] = [
        BoundaryTag::InletBlood,
        BoundaryTag::OutletBlood,
        BoundaryTag::InletDialysate,
        BoundaryTag::OutletDialysate,
        BoundaryTag::Axis,
        BoundaryTag::Outer,
        BoundaryTag::BloodMembrane,
        BoundaryTag::DialysateMembrane,
        BoundaryTag::MembraneEnd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryTag::InletBlood => "inlet_blood",
            BoundaryTag::OutletBlood => "outlet_blood",
            BoundaryTag::InletDialysate => "inlet_dialysate",
            BoundaryTag::OutletDialysate => "outlet_dialysate",
            BoundaryTag::Axis => "axis",
            BoundaryTag::Outer => "outer",
            BoundaryTag::BloodMembrane => "blood_membrane",
            BoundaryTag::DialysateMembrane => "dialysate_membrane",
            BoundaryTag::MembraneEnd => "membrane_end",
        }
    }

    /// True for the tags lying on a line `r = const`.
    pub fn is_horizontal(&self) -> bool {
        matches!(
            self,
            BoundaryTag::Axis | BoundaryTag::Outer | BoundaryTag::BloodMembrane | BoundaryTag::DialysateMembrane
        )
    }
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoundaryTag {
    type Err = MeshError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BoundaryTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| MeshError::UnknownTag(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub a: usize,
    pub b: usize,
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    geometry: AxiGeometry,
    resolution: Resolution,
    x: Vec<f64>,
    r: Vec<f64>,
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    subdomains: Vec<Subdomain>,
    edges: Vec<BoundaryEdge>,
}

fn layer(start: f64, end: f64, n: usize, out: &mut Vec<f64>, include_start: bool) {
    let first = if include_start { 0 } else { 1 };
    for k in first..=n {
        let t = k as f64 / n as f64;
        out.push(if k == n { end } else { start + (end - start) * t });
    }
}

impl Mesh {
    pub fn build(geometry: AxiGeometry, resolution: Resolution) -> Result<Mesh, MeshError> {
        geometry.validate()?;
        resolution.validate()?;
        let nx = resolution.nx;
        let nr = resolution.nr();

        let mut x = Vec::with_capacity(nx + 1);
        layer(0.0, geometry.length, nx, &mut x, true);
        let mut r = Vec::with_capacity(nr + 1);
        layer(0.0, geometry.r_blood, resolution.nr_blood, &mut r, true);
        layer(geometry.r_blood, geometry.r_membrane, resolution.nr_membrane, &mut r, false);
        layer(geometry.r_membrane, geometry.r_outer, resolution.nr_dialysate, &mut r, false);

        let mut vertices = Vec::with_capacity((nx + 1) * (nr + 1));
        for &xi in &x {
            for &rj in &r {
                vertices.push([xi, rj]);
            }
        }

        let idx = |i: usize, j: usize| i * (nr + 1) + j;
        let j_b = resolution.nr_blood;
        let j_m = j_b + resolution.nr_membrane;
        let mut triangles = Vec::with_capacity(2 * nx * nr);
        let mut subdomains = Vec::with_capacity(2 * nx * nr);
        for i in 0..nx {
            for j in 0..nr {
                let bl = idx(i, j);
                let br = idx(i + 1, j);
                let tr = idx(i + 1, j + 1);
                let tl = idx(i, j + 1);
                let sub = if j < j_b {
                    Subdomain::Blood
                } else if j < j_m {
                    Subdomain::Membrane
                } else {
                    Subdomain::Dialysate
                };
                triangles.push([bl, br, tr]);
                triangles.push([bl, tr, tl]);
                subdomains.push(sub);
                subdomains.push(sub);
            }
        }

        let mut edges = Vec::new();
        for j in 0..nr {
            let left = if j < j_b {
                BoundaryTag::InletBlood
            } else if j < j_m {
                BoundaryTag::MembraneEnd
            } else {
                BoundaryTag::OutletDialysate
            };
            let right = if j < j_b {
                BoundaryTag::OutletBlood
            } else if j < j_m {
                BoundaryTag::MembraneEnd
            } else {
                BoundaryTag::InletDialysate
            };
            edges.push(BoundaryEdge {
                a: idx(0, j),
                b: idx(0, j + 1),
                tag: left,
            });
            edges.push(BoundaryEdge {
                a: idx(nx, j),
                b: idx(nx, j + 1),
                tag: right,
            });
        }
        for i in 0..nx {
            for (j, tag) in [
                (0, BoundaryTag::Axis),
                (nr, BoundaryTag::Outer),
                (j_b, BoundaryTag::BloodMembrane),
                (j_m, BoundaryTag::DialysateMembrane),
            ] {
                edges.push(BoundaryEdge {
                    a: idx(i, j),
                    b: idx(i + 1, j),
                    tag,
                });
            }
        }

        Ok(Mesh {
            geometry,
            resolution,
            x,
            r,
            vertices,
            triangles,
            subdomains,
            edges,
        })
    }

    pub fn geometry(&self) -> &AxiGeometry {
        &self.geometry
    }

    pub fn resolution(&self) -> &Resolution {
        &self.resolution
    }

    pub fn x_coords(&self) -> &[f64] {
        &self.x
    }

    pub fn r_coords(&self) -> &[f64] {
        &self.r
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn subdomains(&self) -> &[Subdomain] {
        &self.subdomains
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.edges
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn nx(&self) -> usize {
        self.resolution.nx
    }

    pub fn nr(&self) -> usize {
        self.resolution.nr()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * (self.nr() + 1) + j
    }

    /// Grid coordinates `(i, j)` of a vertex.
    pub fn grid_position(&self, v: usize) -> (usize, usize) {
        (v / (self.nr() + 1), v % (self.nr() + 1))
    }

    /// Radial grid index of `R1`.
    pub fn j_blood(&self) -> usize {
        self.resolution.nr_blood
    }

    /// Radial grid index of `R2`.
    pub fn j_membrane(&self) -> usize {
        self.resolution.nr_blood + self.resolution.nr_membrane
    }

    /// True when the vertex lies in the closure of the blood region (`r <= R1`).
    pub fn is_blood_vertex(&self, v: usize) -> bool {
        self.grid_position(v).1 <= self.j_blood()
    }

    /// True when the vertex lies in the closure of the membrane region.
    pub fn is_membrane_vertex(&self, v: usize) -> bool {
        let j = self.grid_position(v).1;
        j >= self.j_blood() && j <= self.j_membrane()
    }

    /// Signed area of triangle `t` (positive: counter-clockwise in the `(x, r)` plane).
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    /// Vertices on the given boundary piece, sorted along the boundary
    /// (by `x` for horizontal pieces, by `r` otherwise).
    pub fn boundary_vertices(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut vs: Vec<usize> = self
            .edges
            .iter()
            .filter(|e| e.tag == tag)
            .flat_map(|e| [e.a, e.b])
            .collect();
        vs.sort_unstable();
        vs.dedup();
        let key = if tag.is_horizontal() { 0 } else { 1 };
        vs.sort_by(|&p, &q| self.vertices[p][key].total_cmp(&self.vertices[q][key]));
        vs
    }

    /// Boundary edges with the given tag, each oriented with increasing coordinate.
    pub fn edges_with_tag(&self, tag: BoundaryTag) -> impl Iterator<Item = &BoundaryEdge> {
        self.edges.iter().filter(move |e| e.tag == tag)
    }

    /// Plain-text dump for inspection: vertices, then triangles with subdomain, then tagged edges.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("vertices {}\n", self.vertices.len()));
        for p in &self.vertices {
            s.push_str(&format!("{} {}\n", p[0], p[1]));
        }
        s.push_str(&format!("triangles {}\n", self.triangles.len()));
        for (t, sub) in self.triangles.iter().zip(&self.subdomains) {
            let name = match sub {
                Subdomain::Blood => "blood",
                Subdomain::Membrane => "membrane",
                Subdomain::Dialysate => "dialysate",
            };
            s.push_str(&format!("{} {} {} {}\n", t[0], t[1], t[2], name));
        }
        s.push_str(&format!("edges {}\n", self.edges.len()));
        for e in &self.edges {
            s.push_str(&format!("{} {} {}\n", e.a, e.b, e.tag));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_mesh() -> Mesh {
        let g = AxiGeometry::new(1.0, 0.5, 0.6, 1.0).unwrap();
        Mesh::build(g, Resolution::new(2, 2, 1, 2)).unwrap()
    }

    #[test]
    fn counts_and_area() {
        let m = unit_mesh();
        assert_eq!(m.n_vertices(), 3 * 6);
        assert_eq!(m.n_triangles(), 2 * 2 * 5);
        let total: f64 = (0..m.n_triangles()).map(|t| m.triangle_area(t)).sum();
        assert!((total - 1.0).abs() < 1e-14);
        assert!((0..m.n_triangles()).all(|t| m.triangle_area(t) > 0.0));
    }

    #[test]
    fn interface_radii_are_grid_lines() {
        let m = unit_mesh();
        assert_eq!(m.r_coords()[m.j_blood()], 0.5);
        assert_eq!(m.r_coords()[m.j_membrane()], 0.6);
        assert_eq!(*m.r_coords().last().unwrap(), 1.0);
    }

    #[test]
    fn tags_round_trip() {
        for t in BoundaryTag::ALL {
            assert_eq!(t.as_str().parse::<BoundaryTag>().unwrap(), t);
        }
        assert!("nowhere".parse::<BoundaryTag>().is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(AxiGeometry::new(1.0, 0.6, 0.5, 1.0).is_err());
        assert!(AxiGeometry::new(0.0, 0.1, 0.2, 0.3).is_err());
        let g = AxiGeometry::new(1.0, 0.5, 0.6, 1.0).unwrap();
        assert!(Mesh::build(g, Resolution::new(2, 0, 1, 1)).is_err());
    }
}
