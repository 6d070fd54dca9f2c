//! Plot-ready CSV renderings. Numbers use the shortest representation that
//! round-trips, so identical inputs give identical bytes.

use crate::mesh::Mesh;
use crate::optim::{GridResult, TracePoint};
use crate::transport::{ConcentrationField, N_SPECIES};

/// One row per node: `x, r, c1..c5`.
pub fn field_csv(mesh: &Mesh, c: &ConcentrationField) -> String {
    let mut s = String::from("x,r,c1,c2,c3,c4,c5\n");
    for (v, [x, r]) in mesh.vertices().iter().enumerate() {
        s.push_str(&format!("{x},{r}"));
        for k in 0..N_SPECIES {
            s.push_str(&format!(",{}", c.get(v, k)));
        }
        s.push('\n');
    }
    s
}

/// One row per grid cell: `d_ca, d_ci, J, log10_J`.
pub fn landscape_csv(grid: &GridResult) -> String {
    let mut s = String::from("d_ca,d_ci,J,log10_J\n");
    for (i, a) in grid.axis1.iter().enumerate() {
        for (j, b) in grid.axis2.iter().enumerate() {
            let v = grid.value(i, j);
            s.push_str(&format!("{a},{b},{v},{}\n", v.log10()));
        }
    }
    s
}

/// Iterates with their values and, when a reference point is given, the
/// max-norm distance to it.
pub fn trace_csv(trace: &[TracePoint], truth: Option<[f64; 2]>) -> String {
    let mut s = String::from("k,d_ca,d_ci,J");
    if truth.is_some() {
        s.push_str(",error");
    }
    s.push('\n');
    for (k, t) in trace.iter().enumerate() {
        s.push_str(&format!("{k},{},{},{}", t.point[0], t.point[1], t.value));
        if let Some(b) = truth {
            let e = (t.point[0] - b[0]).abs().max((t.point[1] - b[1]).abs());
            s.push_str(&format!(",{e}"));
        }
        s.push('\n');
    }
    s
}
