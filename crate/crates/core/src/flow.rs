//! Reduced velocity model.
//!
//! Darcy pressure in the membrane is solved with P1 elements (weight `r`),
//! with linear-in-`x` pressure profiles imposed on both membrane faces. The
//! resulting radial filtration flux `q = r U_r` per axial cell drives axial
//! profiles built from stream functions:
//!
//! * blood: Poiseuille profile scaled by the local flow rate `Q_b(x)`;
//! * membrane: purely radial flow `U_r = q / r`;
//! * dialysate: annular Poiseuille profile (no slip at `R2` and `R`) scaled by
//!   the signed flow rate `Q_d(x) < 0` (counter-current).
//!
//! Within each axial cell the field is exactly divergence free in the
//! weighted sense `d_x(r U_x) + d_r(r U_r) = 0`, and the normal flux is
//! continuous across the membrane faces.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::linalg::{solve_linear, LinalgError, SparseMatrix};
use crate::mesh::Mesh;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid hydraulic input: {0}")]
    InvalidInput(String),
    #[error("membrane pressure solve failed: {0}")]
    Linalg(#[from] LinalgError),
    #[error("blood flow rate is non-positive ({value:e}) at x = {x}")]
    BloodFlowReversal { x: f64, value: f64 },
    #[error("dialysate flow rate is non-negative ({value:e}) at x = {x}; flow must stay counter-current")]
    DialysateFlowReversal { x: f64, value: f64 },
    #[error("target filtration {target} outside the admissible range ({lo}, {hi})")]
    TargetOutOfRange { target: f64, lo: f64, hi: f64 },
    #[error("filtration flux does not depend on the pressure offset; cannot calibrate")]
    DegenerateCalibration,
    #[error("calibration did not converge: residual {residual:e}")]
    CalibrationFailed { residual: f64 },
}

/// Darcy constants of the membrane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydraulicParams {
    pub permeability: f64,
    pub viscosity: f64,
}

impl HydraulicParams {
    pub fn conductivity(&self) -> f64 {
        self.permeability / self.viscosity
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.permeability.is_finite() && self.permeability >= 0.0) {
            return Err(FlowError::InvalidInput(format!("permeability must be >= 0, got {}", self.permeability)));
        }
        if !(self.viscosity.is_finite() && self.viscosity > 0.0) {
            return Err(FlowError::InvalidInput(format!("viscosity must be > 0, got {}", self.viscosity)));
        }
        Ok(())
    }
}

/// Flow rates (both positive magnitudes) and end pressures of one treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydraulicState {
    pub q_blood: f64,
    pub q_dialysate: f64,
    pub p_in_blood: f64,
    pub p_out_blood: f64,
    pub p_in_dialysate: f64,
    pub p_out_dialysate: f64,
}

impl HydraulicState {
    pub fn validate(&self) -> Result<(), FlowError> {
        let vals = [
            self.q_blood,
            self.q_dialysate,
            self.p_in_blood,
            self.p_out_blood,
            self.p_in_dialysate,
            self.p_out_dialysate,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::InvalidInput("non-finite flow rate or pressure".into()));
        }
        if self.q_blood <= 0.0 || self.q_dialysate <= 0.0 {
            return Err(FlowError::InvalidInput(format!(
                "flow rates must be positive, got Q_b = {}, Q_d = {}",
                self.q_blood, self.q_dialysate
            )));
        }
        Ok(())
    }

    /// Blood-side pressure at `x` (inlet at `x = 0`).
    pub fn blood_pressure(&self, x: f64, length: f64) -> f64 {
        self.p_in_blood + (self.p_out_blood - self.p_in_blood) * x / length
    }

    /// Dialysate-side pressure at `x` (inlet at `x = L`).
    pub fn dialysate_pressure(&self, x: f64, length: f64) -> f64 {
        self.p_out_dialysate + (self.p_in_dialysate - self.p_out_dialysate) * x / length
    }

    fn with_blood_offset(&self, t: f64) -> Self {
        HydraulicState {
            p_in_blood: self.p_in_blood + t,
            p_out_blood: self.p_out_blood + t,
            ..*self
        }
    }
}

/// Nodal membrane pressure; entries off the membrane are `NaN`.
#[derive(Debug, Clone)]
pub struct MembranePressure {
    pub values: Vec<f64>,
}

/// Solves `div(r grad p) = 0` in the membrane with the given face pressures.
/// The short lateral faces at `x = 0` and `x = L` are insulated.
pub fn solve_membrane_pressure(
    mesh: &Mesh,
    face_blood: &dyn Fn(f64) -> f64,
    face_dialysate: &dyn Fn(f64) -> f64,
) -> Result<MembranePressure, FlowError> {
    let nv = mesh.n_vertices();
    let (jb, jm) = (mesh.j_blood(), mesh.j_membrane());
    let verts = mesh.vertices();
    let mut local = vec![usize::MAX; nv];
    let mut global = Vec::new();
    for v in 0..nv {
        if mesh.is_membrane_vertex(v) {
            local[v] = global.len();
            global.push(v);
        }
    }
    let n = global.len();
    let mut trip = Vec::with_capacity(mesh.n_triangles() * 3);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        if mesh.subdomains()[t] != crate::mesh::Subdomain::Membrane {
            continue;
        }
        let (area, grads, rc) = p1_geometry(mesh, t);
        for a in 0..3 {
            for b in 0..3 {
                let k = area * rc * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                trip.push((local[tri[a]], local[tri[b]], k));
            }
        }
    }
    trip.extend((0..n).map(|l| (l, l, 0.0)));
    let mut a = SparseMatrix::from_triplets(n, &trip)?;
    let mut rhs = vec![0.0; n];
    for (l, &v) in global.iter().enumerate() {
        let (_, j) = mesh.grid_position(v);
        let x = verts[v][0];
        if j == jb {
            a.set_identity_row(l);
            rhs[l] = face_blood(x);
        } else if j == jm {
            a.set_identity_row(l);
            rhs[l] = face_dialysate(x);
        }
    }
    let p = solve_linear(&a, &rhs)?;
    let mut values = vec![f64::NAN; nv];
    for (l, &v) in global.iter().enumerate() {
        values[v] = p[l];
    }
    Ok(MembranePressure { values })
}

/// Area, barycentric gradients `[d/dx, d/dr]` and centroid radius of a triangle.
pub(crate) fn p1_geometry(mesh: &Mesh, t: usize) -> (f64, [[f64; 2]; 3], f64) {
    let tri = mesh.triangles()[t];
    let p = [mesh.vertices()[tri[0]], mesh.vertices()[tri[1]], mesh.vertices()[tri[2]]];
    let area = mesh.triangle_area(t);
    let two_a = 2.0 * area;
    let grads = [
        [(p[1][1] - p[2][1]) / two_a, (p[2][0] - p[1][0]) / two_a],
        [(p[2][1] - p[0][1]) / two_a, (p[0][0] - p[2][0]) / two_a],
        [(p[0][1] - p[1][1]) / two_a, (p[1][0] - p[0][0]) / two_a],
    ];
    let rc = (p[0][1] + p[1][1] + p[2][1]) / 3.0;
    (area, grads, rc)
}

/// Radial profile shapes for the three regions.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Profiles {
    r1: f64,
    r2: f64,
    r: f64,
    log_ratio: f64,
    c_log: f64,
    norm_d: f64,
}

impl Profiles {
    fn new(r1: f64, r2: f64, r: f64) -> Self {
        let log_ratio = (r / r2).ln();
        let c_log = (r * r - r2 * r2) / log_ratio;
        let mut p = Profiles {
            r1,
            r2,
            r,
            log_ratio,
            c_log,
            norm_d: 1.0,
        };
        p.norm_d = 2.0 * PI * (p.phi_d(r) - p.phi_d(r2));
        p
    }

    /// Blood axial shape with `int_0^R1 2 pi r g dr = 1`.
    fn g_b(&self, r: f64) -> f64 {
        2.0 / (PI * self.r1 * self.r1) * (1.0 - r * r / (self.r1 * self.r1))
    }

    /// `int_0^r s g_b(s) ds`.
    fn big_g_b(&self, r: f64) -> f64 {
        (r * r - r.powi(4) / (2.0 * self.r1 * self.r1)) / (PI * self.r1 * self.r1)
    }

    fn w_d(&self, r: f64) -> f64 {
        self.r * self.r - r * r - self.c_log * (self.r / r).ln()
    }

    fn phi_d(&self, r: f64) -> f64 {
        let r2 = r * r;
        self.r * self.r * r2 / 2.0 - r2 * r2 / 4.0 - self.c_log * (r2 / 2.0 * (self.r / r).ln() + r2 / 4.0)
    }

    /// Dialysate axial shape with `int_R2^R 2 pi r g dr = 1`.
    fn g_d(&self, r: f64) -> f64 {
        self.w_d(r) / self.norm_d
    }

    /// `int_R2^r s g_d(s) ds`.
    fn big_g_d(&self, r: f64) -> f64 {
        (self.phi_d(r) - self.phi_d(self.r2)) / self.norm_d
    }
}

/// Velocity on the transport mesh plus the axial flow-rate profiles.
#[derive(Debug, Clone)]
pub struct VelocityField {
    /// Nodal `U_x`.
    pub ux: Vec<f64>,
    /// Nodal `U_r`.
    pub ur: Vec<f64>,
    /// Filtration flux `q = r U_r` through the membrane, one value per axial cell.
    pub q_cell: Vec<f64>,
    /// Blood flow rate at each axial grid line.
    pub q_blood: Vec<f64>,
    /// Signed dialysate flow rate at each axial grid line (negative).
    pub q_dialysate: Vec<f64>,
    /// Axial grid.
    pub x: Vec<f64>,
    pub state: HydraulicState,
    profiles_r: [f64; 3],
}

impl VelocityField {
    /// Fluid at rest on `mesh`; all flow rates and pressures are zero.
    pub fn at_rest(mesh: &Mesh) -> Self {
        let nv = mesh.n_vertices();
        let nx = mesh.nx();
        let g = mesh.geometry();
        VelocityField {
            ux: vec![0.0; nv],
            ur: vec![0.0; nv],
            q_cell: vec![0.0; nx],
            q_blood: vec![0.0; nx + 1],
            q_dialysate: vec![0.0; nx + 1],
            x: mesh.x_coords().to_vec(),
            state: HydraulicState {
                q_blood: 0.0,
                q_dialysate: 0.0,
                p_in_blood: 0.0,
                p_out_blood: 0.0,
                p_in_dialysate: 0.0,
                p_out_dialysate: 0.0,
            },
            profiles_r: [g.r_blood, g.r_membrane, g.r_outer],
        }
    }

    /// Net volume leaving the blood through the membrane.
    pub fn filtration(&self) -> f64 {
        self.q_blood[0] - self.q_blood[self.q_blood.len() - 1]
    }

    fn profiles(&self) -> Profiles {
        Profiles::new(self.profiles_r[0], self.profiles_r[1], self.profiles_r[2])
    }

    fn cell_of(&self, x: f64) -> usize {
        let n = self.q_cell.len();
        match self.x.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Continuous velocity `(U_x, U_r)` at `(x, r)`, evaluated inside the axial
    /// cell that contains `x` (the left cell on a grid line unless `cell` is given).
    pub fn evaluate(&self, x: f64, r: f64, cell: Option<usize>) -> [f64; 2] {
        let c = cell.unwrap_or_else(|| self.cell_of(x));
        let p = self.profiles();
        let q = self.q_cell[c];
        let dx = x - self.x[c];
        let qb = self.q_blood[c] - 2.0 * PI * q * dx;
        let qd = self.q_dialysate[c] + 2.0 * PI * q * dx;
        if r <= p.r1 {
            let ur = if r == 0.0 { 0.0 } else { 2.0 * PI * q * p.big_g_b(r) / r };
            [qb * p.g_b(r), ur]
        } else if r <= p.r2 {
            [0.0, q / r]
        } else {
            [qd * p.g_d(r), q * (1.0 - 2.0 * PI * p.big_g_d(r)) / r]
        }
    }

    /// Largest relative weighted flux imbalance `|oint r U.n ds|` over all
    /// triangles, scaled by `max |U_x| * R * perimeter`.
    pub fn max_divergence_defect(&self, mesh: &Mesh) -> f64 {
        const GX: [f64; 5] = [
            -0.906_179_845_938_664,
            -0.538_469_310_105_683,
            0.0,
            0.538_469_310_105_683,
            0.906_179_845_938_664,
        ];
        const GW: [f64; 5] = [
            0.236_926_885_056_189,
            0.478_628_670_499_366,
            0.568_888_888_888_889,
            0.478_628_670_499_366,
            0.236_926_885_056_189,
        ];
        let umax = self.ux.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let r_outer = mesh.geometry().r_outer;
        let nr = mesh.nr();
        let mut worst = 0.0f64;
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let cell = (t / 2) / nr;
            let p = tri.map(|v| mesh.vertices()[v]);
            let mut flux = 0.0;
            let mut perim = 0.0;
            for e in 0..3 {
                let (a, b) = (p[e], p[(e + 1) % 3]);
                let (tx, tr) = (b[0] - a[0], b[1] - a[1]);
                let len = (tx * tx + tr * tr).sqrt();
                perim += len;
                // outward normal scaled by the edge length for a counter-clockwise triangle
                let n = [tr, -tx];
                for (xi, wi) in GX.iter().zip(GW) {
                    let s = 0.5 * (1.0 + xi);
                    let (x, r) = (a[0] + s * tx, a[1] + s * tr);
                    let u = self.evaluate(x, r, Some(cell));
                    flux += 0.5 * wi * r * (u[0] * n[0] + u[1] * n[1]);
                }
            }
            worst = worst.max(flux.abs() / (umax * r_outer * perim));
        }
        worst
    }
}

/// Builds the velocity field for the given pressures and flow rates.
pub fn compute_velocity(mesh: &Mesh, params: &HydraulicParams, state: &HydraulicState) -> Result<VelocityField, FlowError> {
    params.validate()?;
    state.validate()?;
    let geom = *mesh.geometry();
    let len = geom.length;
    let pressure = solve_membrane_pressure(
        mesh,
        &|x| state.blood_pressure(x, len),
        &|x| state.dialysate_pressure(x, len),
    )?;
    velocity_from_pressure(mesh, params, state, &pressure)
}

/// Radial Darcy flux `q = -(K/mu) r dp/dr` per axial cell, averaged over the
/// membrane cell rows.
fn cell_fluxes(mesh: &Mesh, kappa: f64, pressure: &MembranePressure) -> Vec<f64> {
    let rs = mesh.r_coords();
    let (jb, jm) = (mesh.j_blood(), mesh.j_membrane());
    let p = &pressure.values;
    (0..mesh.nx())
        .map(|i| {
            let mut acc = 0.0;
            for j in jb..jm {
                let hr = rs[j + 1] - rs[j];
                let rmid = 0.5 * (rs[j] + rs[j + 1]);
                let top = p[mesh.index(i, j + 1)] + p[mesh.index(i + 1, j + 1)];
                let bot = p[mesh.index(i, j)] + p[mesh.index(i + 1, j)];
                acc += rmid * (top - bot) / (2.0 * hr);
            }
            -kappa * acc / (jm - jb) as f64
        })
        .collect()
}

fn velocity_from_pressure(
    mesh: &Mesh,
    params: &HydraulicParams,
    state: &HydraulicState,
    pressure: &MembranePressure,
) -> Result<VelocityField, FlowError> {
    let geom = *mesh.geometry();
    let nx = mesh.nx();
    let x = mesh.x_coords().to_vec();
    let rs = mesh.r_coords();
    let (jb, jm) = (mesh.j_blood(), mesh.j_membrane());

    let q_cell = cell_fluxes(mesh, params.conductivity(), pressure);

    let mut q_blood = vec![0.0; nx + 1];
    q_blood[0] = state.q_blood;
    for i in 0..nx {
        q_blood[i + 1] = q_blood[i] - 2.0 * PI * q_cell[i] * (x[i + 1] - x[i]);
    }
    let mut q_dial = vec![0.0; nx + 1];
    q_dial[nx] = -state.q_dialysate;
    for i in (0..nx).rev() {
        q_dial[i] = q_dial[i + 1] - 2.0 * PI * q_cell[i] * (x[i + 1] - x[i]);
    }
    for i in 0..=nx {
        if q_blood[i] <= 0.0 {
            return Err(FlowError::BloodFlowReversal { x: x[i], value: q_blood[i] });
        }
        if q_dial[i] >= 0.0 {
            return Err(FlowError::DialysateFlowReversal { x: x[i], value: q_dial[i] });
        }
    }

    let prof = Profiles::new(geom.r_blood, geom.r_membrane, geom.r_outer);
    let nv = mesh.n_vertices();
    let mut ux = vec![0.0; nv];
    let mut ur = vec![0.0; nv];
    for i in 0..=nx {
        let q = match i {
            0 => q_cell[0],
            i if i == nx => q_cell[nx - 1],
            _ => 0.5 * (q_cell[i - 1] + q_cell[i]),
        };
        for (j, &r) in rs.iter().enumerate() {
            let v = mesh.index(i, j);
            if j <= jb {
                ux[v] = q_blood[i] * prof.g_b(r);
                ur[v] = if r == 0.0 { 0.0 } else { 2.0 * PI * q * prof.big_g_b(r) / r };
            } else if j < jm {
                ur[v] = q / r;
            } else {
                ux[v] = q_dial[i] * prof.g_d(r);
                ur[v] = q * (1.0 - 2.0 * PI * prof.big_g_d(r)) / r;
            }
        }
        // exact values at the wall
        ux[mesh.index(i, jm)] = 0.0;
        ur[mesh.index(i, jm)] = q / geom.r_membrane;
        ur[mesh.index(i, mesh.nr())] = 0.0;
    }

    Ok(VelocityField {
        ux,
        ur,
        q_cell,
        q_blood,
        q_dialysate: q_dial,
        x,
        state: *state,
        profiles_r: [geom.r_blood, geom.r_membrane, geom.r_outer],
    })
}

/// Net transmembrane volume flux for the given pressures.
pub fn filtration_rate(mesh: &Mesh, params: &HydraulicParams, state: &HydraulicState) -> Result<f64, FlowError> {
    let len = mesh.geometry().length;
    let pressure = solve_membrane_pressure(
        mesh,
        &|x| state.blood_pressure(x, len),
        &|x| state.dialysate_pressure(x, len),
    )?;
    let xs = mesh.x_coords();
    let q = cell_fluxes(mesh, params.conductivity(), &pressure);
    Ok(q.iter().enumerate().map(|(i, qi)| 2.0 * PI * qi * (xs[i + 1] - xs[i])).sum())
}

/// Shifts both blood-side pressures by a common offset so that the net
/// filtration equals `target`, then builds the velocity field.
///
/// The filtration is affine in the offset, so a secant iteration converges in
/// one step up to round-off; it is repeated until the relative mismatch is
/// below `1e-6`.
pub fn calibrate_filtration(
    mesh: &Mesh,
    params: &HydraulicParams,
    state: &HydraulicState,
    target: f64,
) -> Result<(HydraulicState, VelocityField), FlowError> {
    params.validate()?;
    state.validate()?;
    if !target.is_finite() || target <= -state.q_dialysate || target >= state.q_blood {
        return Err(FlowError::TargetOutOfRange {
            target,
            lo: -state.q_dialysate,
            hi: state.q_blood,
        });
    }
    // absolute floor for targets near zero, well above the round-off of the flux
    let scale = target.abs().max(1e-9 * state.q_blood);
    let f = |t: f64| filtration_rate(mesh, params, &state.with_blood_offset(t));
    let (mut t0, mut f0) = (0.0, f(0.0)?);
    let (mut t1, mut f1) = (1.0, f(1.0)?);
    for _ in 0..20 {
        if (f1 - target).abs() <= 1e-6 * scale {
            break;
        }
        let slope = (f1 - f0) / (t1 - t0);
        if slope == 0.0 || !slope.is_finite() {
            return Err(FlowError::DegenerateCalibration);
        }
        let t2 = t1 + (target - f1) / slope;
        if t2 == t1 {
            break;
        }
        (t0, f0) = (t1, f1);
        t1 = t2;
        f1 = f(t1)?;
    }
    if (f1 - target).abs() > 1e-6 * scale {
        return Err(FlowError::CalibrationFailed {
            residual: (f1 - target).abs(),
        });
    }
    let shifted = state.with_blood_offset(t1);
    let field = compute_velocity(mesh, params, &shifted)?;
    Ok((shifted, field))
}
