//! Stationary five-species convection-reaction-diffusion solver.
//!
//! Species order: `c1` free calcium, `c2` albumin, `c3` calcium-albumin,
//! `c4` citrate, `c5` calcium-citrate. Species 1, 4, 5 live on the whole
//! domain; albumin and its complex stay in the blood channel and are stored
//! as full-mesh vectors pinned to zero off the blood region.
//!
//! Discretization: P1 Galerkin with the axisymmetric weight `r` integrated
//! exactly for the diffusion and convection terms, row-lumped (exact
//! `r`-weighted) mass for the reaction source, Dirichlet rows replaced by
//! identity rows. Unknowns are interleaved per node: `dof = 5 * node + species`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{p1_geometry, VelocityField};
use crate::linalg::{LinalgError, LuSolver, SparseMatrix, SparsityPattern};
use crate::mesh::{BoundaryTag, Mesh, Subdomain};

pub const N_SPECIES: usize = 5;

pub const SPECIES_NAMES: [&str; N_SPECIES] = ["ca", "alb", "ca_alb", "cit", "ca_cit"];

/// Albumin and calcium-albumin do not cross the membrane.
pub fn is_blood_only(species: usize) -> bool {
    species == 1 || species == 2
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid transport configuration: {0}")]
    InvalidConfig(String),
    #[error("velocity field does not match the mesh ({got} nodes, mesh has {expected})")]
    VelocityMismatch { expected: usize, got: usize },
    #[error("linear solve failed: {0}")]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NewtonError {
    #[error("{0}")]
    Setup(#[from] TransportError),
    #[error("Newton did not converge in {} iterations (last update {:e})", .trace.len().saturating_sub(1), .trace.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { trace: Vec<f64> },
    #[error("linear solve failed at Newton iteration {}: {source}", .trace.len())]
    LinearSolve { source: LinalgError, trace: Vec<f64> },
    #[error("Newton iterate became non-finite after {} iterations", .trace.len())]
    Diverged { trace: Vec<f64> },
}

impl NewtonError {
    pub fn trace(&self) -> &[f64] {
        match self {
            NewtonError::Setup(_) => &[],
            NewtonError::NonConvergence { trace } | NewtonError::LinearSolve { trace, .. } | NewtonError::Diverged { trace } => trace,
        }
    }
}

/// Mass-action constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionParams {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub fd: f64,
}

impl ReactionParams {
    pub fn validate(&self) -> Result<(), TransportError> {
        // zero rate constants are allowed: they switch the kinetics off
        for (name, v) in [("delta1", self.delta1), ("delta2", self.delta2), ("delta3", self.delta3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TransportError::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.fd.is_finite() && self.fd > 0.0) {
            return Err(TransportError::InvalidConfig(format!("fd must be positive, got {}", self.fd)));
        }
        Ok(())
    }

    /// Albumin and citrate binding rates `(r_alb, r_cit)`, so that
    /// `F = (r_alb + r_cit, r_alb, -r_alb, r_cit, -r_cit)`.
    fn rates(&self, c: &[f64; N_SPECIES]) -> (f64, f64) {
        let ra = (c[2] - self.delta1 * c[0] * c[1]) / self.fd;
        let rc = (self.delta2 * c[4] - self.delta3 * c[0] * c[3]) / self.fd;
        (ra, rc)
    }

    fn rate_gradients(&self, c: &[f64; N_SPECIES]) -> ([f64; N_SPECIES], [f64; N_SPECIES]) {
        let k = 1.0 / self.fd;
        let dra = [-self.delta1 * c[1] * k, -self.delta1 * c[0] * k, k, 0.0, 0.0];
        let drc = [-self.delta3 * c[3] * k, 0.0, 0.0, -self.delta3 * c[0] * k, self.delta2 * k];
        (dra, drc)
    }
}

/// How each reaction rate enters each species equation.
const RA_SIGN: [f64; N_SPECIES] = [1.0, 1.0, -1.0, 0.0, 0.0];
const RC_SIGN: [f64; N_SPECIES] = [1.0, 0.0, 0.0, 1.0, -1.0];

/// Reaction source `F(c)`.
pub fn reaction_source(c: &[f64; N_SPECIES], rp: &ReactionParams) -> [f64; N_SPECIES] {
    let (ra, rc) = rp.rates(c);
    [ra + rc, ra, -ra, rc, -rc]
}

/// Analytic Jacobian `dF_i/dc_j`.
pub fn reaction_jacobian(c: &[f64; N_SPECIES], rp: &ReactionParams) -> [[f64; N_SPECIES]; N_SPECIES] {
    let (dra, drc) = rp.rate_gradients(c);
    let mut j = [[0.0; N_SPECIES]; N_SPECIES];
    for s in 0..N_SPECIES {
        for t in 0..N_SPECIES {
            j[s][t] = RA_SIGN[s] * dra[t] + RC_SIGN[s] * drc[t];
        }
    }
    j
}

/// Per-species transport constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesParams {
    pub d_blood: f64,
    pub d_dialysate: f64,
    /// Membrane diffusivity as a fraction of `d_blood`.
    pub alpha: f64,
    pub sieving: f64,
    pub crosses_membrane: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    pub peclet: f64,
    pub eps2: f64,
    pub species: [SpeciesParams; N_SPECIES],
    pub reactions: ReactionParams,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub streamline_diffusion: bool,
}

impl TransportConfig {
    pub fn validate(&self) -> Result<(), TransportError> {
        let bad = |m: String| Err(TransportError::InvalidConfig(m));
        if !(self.peclet.is_finite() && self.peclet > 0.0) {
            return bad(format!("peclet must be positive, got {}", self.peclet));
        }
        if !(self.eps2.is_finite() && self.eps2 >= 0.0) {
            return bad(format!("eps2 must be non-negative, got {}", self.eps2));
        }
        if !(self.newton_tol.is_finite() && self.newton_tol > 0.0) {
            return bad(format!("newton_tol must be positive, got {}", self.newton_tol));
        }
        self.reactions.validate()?;
        for (s, sp) in self.species.iter().enumerate() {
            let name = SPECIES_NAMES[s];
            if !(sp.d_blood.is_finite() && sp.d_blood > 0.0) {
                return bad(format!("{name}: d_blood must be positive"));
            }
            if !(sp.d_dialysate.is_finite() && sp.d_dialysate > 0.0) {
                return bad(format!("{name}: d_dialysate must be positive"));
            }
            if !(sp.alpha.is_finite() && sp.alpha >= 0.0) {
                return bad(format!("{name}: alpha must be non-negative, got {}", sp.alpha));
            }
            if !(0.0..=1.0).contains(&sp.sieving) {
                return bad(format!("{name}: sieving must lie in [0, 1], got {}", sp.sieving));
            }
            if sp.crosses_membrane == is_blood_only(s) {
                return bad(format!("{name}: crosses_membrane must be {}", !is_blood_only(s)));
            }
            if is_blood_only(s) && sp.alpha != 0.0 {
                return bad(format!("{name}: alpha must be 0 for species confined to blood"));
            }
        }
        if self.species[3].alpha != self.species[4].alpha {
            return bad("citrate and calcium-citrate must share the same alpha".into());
        }
        Ok(())
    }

    /// Copy with membrane fractions replaced.
    pub fn with_alpha(&self, alpha: [f64; N_SPECIES]) -> Self {
        let mut c = self.clone();
        for (sp, a) in c.species.iter_mut().zip(alpha) {
            sp.alpha = a;
        }
        c
    }

    pub fn alpha(&self) -> [f64; N_SPECIES] {
        self.species.map(|s| s.alpha)
    }
}

/// Inlet concentrations. Albumin entries of `inlet_dialysate` are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryData {
    pub inlet_blood: [f64; N_SPECIES],
    pub inlet_dialysate: [f64; N_SPECIES],
}

impl BoundaryData {
    pub fn validate(&self) -> Result<(), TransportError> {
        for (s, (&b, &d)) in self.inlet_blood.iter().zip(&self.inlet_dialysate).enumerate() {
            if !(b.is_finite() && b >= 0.0) || (!is_blood_only(s) && !(d.is_finite() && d >= 0.0)) {
                return Err(TransportError::InvalidConfig(format!(
                    "inlet concentrations of {} must be finite and non-negative",
                    SPECIES_NAMES[s]
                )));
            }
        }
        Ok(())
    }
}

/// Nodal concentrations, interleaved per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationField {
    values: Vec<f64>,
}

impl ConcentrationField {
    pub fn zeros(n_vertices: usize) -> Self {
        ConcentrationField {
            values: vec![0.0; N_SPECIES * n_vertices],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        assert!(values.len() % N_SPECIES == 0, "length must be a multiple of {N_SPECIES}");
        ConcentrationField { values }
    }

    pub fn n_vertices(&self) -> usize {
        self.values.len() / N_SPECIES
    }

    pub fn get(&self, v: usize, s: usize) -> f64 {
        self.values[N_SPECIES * v + s]
    }

    pub fn set(&mut self, v: usize, s: usize, value: f64) {
        self.values[N_SPECIES * v + s] = value;
    }

    pub fn node(&self, v: usize) -> [f64; N_SPECIES] {
        let mut c = [0.0; N_SPECIES];
        c.copy_from_slice(&self.values[N_SPECIES * v..N_SPECIES * (v + 1)]);
        c
    }

    pub fn species(&self, s: usize) -> Vec<f64> {
        self.values.iter().skip(s).step_by(N_SPECIES).copied().collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Result of a converged Newton solve.
#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub field: ConcentrationField,
    /// Iteration counter `n` at exit.
    pub iterations: usize,
    /// `|c_{k+1} - c_k|` for every solve performed.
    pub trace: Vec<f64>,
}

/// Essential conditions and an optional volume source, one entry per dof.
struct Problem {
    dirichlet: Vec<Option<f64>>,
    source: Option<Vec<f64>>,
}

/// Geometry-dependent data shared by every solve on one mesh.
pub struct TransportSolver {
    mesh: Arc<Mesh>,
    pattern: Arc<SparsityPattern>,
    lu: LuSolver,
    /// Exact `r`-weighted row sums of the P1 mass matrix over the whole domain.
    mass_full: Vec<f64>,
    /// Same, restricted to blood triangles.
    mass_blood: Vec<f64>,
}

impl std::fmt::Debug for TransportSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransportSolver")
            .field("vertices", &self.mesh.n_vertices())
            .field("nnz", &self.pattern.nnz())
            .finish()
    }
}

/// `int_T lambda_k lambda_m lambda_i / |T|`.
fn cubic_weight(k: usize, m: usize, i: usize) -> f64 {
    if k == m && m == i {
        1.0 / 10.0
    } else if k == m || m == i || k == i {
        1.0 / 30.0
    } else {
        1.0 / 60.0
    }
}

/// `int_e lambda_k lambda_j lambda_i / |e|` on a two-node edge.
fn edge_cubic_weight(k: usize, j: usize, i: usize) -> f64 {
    if k == j && j == i {
        0.25
    } else {
        1.0 / 12.0
    }
}

impl TransportSolver {
    pub fn new(mesh: Arc<Mesh>) -> Result<Self, TransportError> {
        let nv = mesh.n_vertices();
        let mut entries = Vec::new();
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let blood = mesh.subdomains()[t] == Subdomain::Blood;
            for s in 0..N_SPECIES {
                if is_blood_only(s) && !blood {
                    continue;
                }
                for &a in tri {
                    for &b in tri {
                        entries.push((N_SPECIES * a + s, N_SPECIES * b + s));
                    }
                }
            }
        }
        for v in 0..nv {
            let base = N_SPECIES * v;
            if mesh.is_blood_vertex(v) {
                for s in 0..N_SPECIES {
                    for t in 0..N_SPECIES {
                        entries.push((base + s, base + t));
                    }
                }
            } else {
                for s in [0, 3, 4] {
                    for t in [0, 3, 4] {
                        entries.push((base + s, base + t));
                    }
                }
                entries.push((base + 1, base + 1));
                entries.push((base + 2, base + 2));
            }
        }
        let pattern = Arc::new(SparsityPattern::from_entries(N_SPECIES * nv, entries)?);
        let lu = LuSolver::analyze(pattern.clone())?;

        let mut mass_full = vec![0.0; nv];
        let mut mass_blood = vec![0.0; nv];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let area = mesh.triangle_area(t);
            let r = tri.map(|v| mesh.vertices()[v][1]);
            let rsum = r[0] + r[1] + r[2];
            for a in 0..3 {
                let m = area * (rsum + r[a]) / 12.0;
                mass_full[tri[a]] += m;
                if mesh.subdomains()[t] == Subdomain::Blood {
                    mass_blood[tri[a]] += m;
                }
            }
        }
        Ok(TransportSolver {
            mesh,
            pattern,
            lu,
            mass_full,
            mass_blood,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn n_dofs(&self) -> usize {
        N_SPECIES * self.mesh.n_vertices()
    }

    /// Lumped `r`-weighted nodal masses (whole domain).
    pub fn lumped_mass(&self) -> &[f64] {
        &self.mass_full
    }

    fn check(&self, u: &VelocityField, cfg: &TransportConfig) -> Result<(), TransportError> {
        cfg.validate()?;
        let nv = self.mesh.n_vertices();
        if u.ux.len() != nv || u.ur.len() != nv {
            return Err(TransportError::VelocityMismatch {
                expected: nv,
                got: u.ux.len(),
            });
        }
        Ok(())
    }

    fn inlet_problem(&self, bd: &BoundaryData) -> Problem {
        let mesh = &self.mesh;
        let mut dirichlet = vec![None; self.n_dofs()];
        for v in mesh.boundary_vertices(BoundaryTag::InletBlood) {
            for s in 0..N_SPECIES {
                dirichlet[N_SPECIES * v + s] = Some(bd.inlet_blood[s]);
            }
        }
        for v in mesh.boundary_vertices(BoundaryTag::InletDialysate) {
            for s in [0, 3, 4] {
                dirichlet[N_SPECIES * v + s] = Some(bd.inlet_dialysate[s]);
            }
        }
        self.pin_albumin(&mut dirichlet);
        Problem { dirichlet, source: None }
    }

    fn pin_albumin(&self, dirichlet: &mut [Option<f64>]) {
        for v in 0..self.mesh.n_vertices() {
            if !self.mesh.is_blood_vertex(v) {
                dirichlet[N_SPECIES * v + 1] = Some(0.0);
                dirichlet[N_SPECIES * v + 2] = Some(0.0);
            }
        }
    }

    /// Linear part of the operator: convection, diffusion and the albumin
    /// wall term. Dirichlet rows are not yet applied.
    pub fn assemble_linear(&self, u: &VelocityField, cfg: &TransportConfig) -> Result<SparseMatrix, TransportError> {
        self.check(u, cfg)?;
        let mesh = &*self.mesh;
        let mut k = SparseMatrix::zeros(self.pattern.clone());
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let sub = mesh.subdomains()[t];
            let (area, g, rc) = p1_geometry(mesh, t);
            let r = tri.map(|v| mesh.vertices()[v][1]);
            let uu = tri.map(|v| [u.ux[v], u.ur[v]]);
            // V_a = sum_{k,m} r_k U_m w(k, m, a), so that the convection entry is |T| V_a . grad(lambda_b)
            let mut vel = [[0.0; 2]; 3];
            for (a, va) in vel.iter_mut().enumerate() {
                for kk in 0..3 {
                    for m in 0..3 {
                        let w = r[kk] * cubic_weight(kk, m, a);
                        va[0] += w * uu[m][0];
                        va[1] += w * uu[m][1];
                    }
                }
            }
            let uc = [
                (uu[0][0] + uu[1][0] + uu[2][0]) / 3.0,
                (uu[0][1] + uu[1][1] + uu[2][1]) / 3.0,
            ];
            let mut conv = [[0.0; 3]; 3];
            let mut lap_x = [[0.0; 3]; 3];
            let mut lap_r = [[0.0; 3]; 3];
            let mut streamline = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    conv[a][b] = area * (vel[a][0] * g[b][0] + vel[a][1] * g[b][1]);
                    lap_x[a][b] = area * rc * g[a][0] * g[b][0];
                    lap_r[a][b] = area * rc * g[a][1] * g[b][1];
                    streamline[a][b] =
                        area * rc * (uc[0] * g[a][0] + uc[1] * g[a][1]) * (uc[0] * g[b][0] + uc[1] * g[b][1]);
                }
            }
            let unorm = (uc[0] * uc[0] + uc[1] * uc[1]).sqrt();
            let h = (2.0 * area).sqrt();
            for s in 0..N_SPECIES {
                if is_blood_only(s) && sub != Subdomain::Blood {
                    continue;
                }
                let sp = &cfg.species[s];
                let (d, sieve) = match sub {
                    Subdomain::Blood => (sp.d_blood, 1.0),
                    Subdomain::Membrane => (sp.alpha * sp.d_blood, sp.sieving),
                    Subdomain::Dialysate => (sp.d_dialysate, 1.0),
                };
                let dr = d / cfg.peclet;
                let dx = cfg.eps2 * d / cfg.peclet;
                let tau = if cfg.streamline_diffusion && unorm > 0.0 {
                    let dd = dx.max(f64::MIN_POSITIVE);
                    let peh = sieve * unorm * h / (2.0 * dd);
                    let xi = if peh > 1e-3 { 1.0 / peh.tanh() - 1.0 / peh } else { peh / 3.0 };
                    sieve * h / (2.0 * unorm) * xi
                } else {
                    0.0
                };
                for a in 0..3 {
                    for b in 0..3 {
                        let val = sieve * conv[a][b]
                            + dr * lap_r[a][b]
                            + dx * lap_x[a][b]
                            + tau * sieve * streamline[a][b];
                        k.add(N_SPECIES * tri[a] + s, N_SPECIES * tri[b] + s, val);
                    }
                }
            }
        }
        let r1 = mesh.geometry().r_blood;
        for e in mesh.edges_with_tag(BoundaryTag::BloodMembrane) {
            let nodes = [e.a, e.b];
            let len = (mesh.vertices()[e.b][0] - mesh.vertices()[e.a][0]).abs();
            let urs = nodes.map(|v| u.ur[v]);
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for kk in 0..2 {
                        acc += urs[kk] * edge_cubic_weight(kk, j, i);
                    }
                    let val = -r1 * acc * len / cfg.peclet;
                    for s in [1, 2] {
                        k.add(N_SPECIES * nodes[i] + s, N_SPECIES * nodes[j] + s, val);
                    }
                }
            }
        }
        Ok(k)
    }

    /// Adds `-M dF(c)` to `jac` and returns the lumped reaction vector `M F(c)`
    /// and `M dF(c) c`.
    fn add_reaction(&self, cfg: &TransportConfig, c: &ConcentrationField, jac: Option<&mut SparseMatrix>) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_dofs();
        let mut react = vec![0.0; n];
        let mut lin = vec![0.0; n];
        let rp = &cfg.reactions;
        let mut jac = jac;
        for v in 0..self.mesh.n_vertices() {
            let mut cv = c.node(v);
            let mb = self.mass_blood[v];
            let mf = self.mass_full[v];
            if mb == 0.0 {
                cv[1] = 0.0;
                cv[2] = 0.0;
            }
            let (ra, rc) = rp.rates(&cv);
            let (dra, drc) = rp.rate_gradients(&cv);
            let base = N_SPECIES * v;
            for s in 0..N_SPECIES {
                let wa = RA_SIGN[s] * mb;
                let wc = RC_SIGN[s] * mf;
                if wa == 0.0 && wc == 0.0 {
                    continue;
                }
                react[base + s] = wa * ra + wc * rc;
                let mut acc = 0.0;
                for t in 0..N_SPECIES {
                    let gst = wa * dra[t] + wc * drc[t];
                    if gst == 0.0 {
                        continue;
                    }
                    acc += gst * cv[t];
                    if let Some(j) = jac.as_deref_mut() {
                        j.add(base + s, base + t, -gst);
                    }
                }
                lin[base + s] = acc;
            }
        }
        (react, lin)
    }

    fn newton_system(
        &self,
        k: &SparseMatrix,
        cfg: &TransportConfig,
        problem: &Problem,
        c: &ConcentrationField,
    ) -> (SparseMatrix, Vec<f64>) {
        let mut jac = k.clone();
        let (react, lin) = self.add_reaction(cfg, c, Some(&mut jac));
        let mut rhs: Vec<f64> = react.iter().zip(&lin).map(|(f, l)| f - l).collect();
        if let Some(src) = &problem.source {
            for (r, s) in rhs.iter_mut().zip(src) {
                *r += s;
            }
        }
        for (i, d) in problem.dirichlet.iter().enumerate() {
            if let Some(g) = d {
                jac.set_identity_row(i);
                rhs[i] = *g;
            }
        }
        (jac, rhs)
    }

    fn residual_of(&self, k: &SparseMatrix, cfg: &TransportConfig, problem: &Problem, c: &ConcentrationField) -> Vec<f64> {
        let mut res = k.matvec(c.values());
        let (react, _) = self.add_reaction(cfg, c, None);
        for (r, f) in res.iter_mut().zip(&react) {
            *r -= f;
        }
        if let Some(src) = &problem.source {
            for (r, s) in res.iter_mut().zip(src) {
                *r -= s;
            }
        }
        for (i, d) in problem.dirichlet.iter().enumerate() {
            if let Some(g) = d {
                res[i] = c.values()[i] - g;
            }
        }
        res
    }

    /// Newton matrix and right-hand side at `c_n`:
    /// `J(c_n) c_{n+1} = J(c_n) c_n - F(c_n)` with identity rows on Dirichlet dofs.
    pub fn assemble_newton_system(
        &self,
        u: &VelocityField,
        cfg: &TransportConfig,
        bd: &BoundaryData,
        c_n: &ConcentrationField,
    ) -> Result<(SparseMatrix, Vec<f64>), TransportError> {
        let k = self.assemble_linear(u, cfg)?;
        Ok(self.newton_system(&k, cfg, &self.inlet_problem(bd), c_n))
    }

    /// Discrete residual `F(c)`; Dirichlet rows hold `c - g`.
    pub fn residual(
        &self,
        u: &VelocityField,
        cfg: &TransportConfig,
        bd: &BoundaryData,
        c: &ConcentrationField,
    ) -> Result<Vec<f64>, TransportError> {
        let k = self.assemble_linear(u, cfg)?;
        Ok(self.residual_of(&k, cfg, &self.inlet_problem(bd), c))
    }

    /// Constant extension of the inlet values: blood values on the blood and
    /// membrane nodes, dialysate values on the dialysate nodes, albumin only
    /// in blood.
    pub fn initial_guess(&self, bd: &BoundaryData) -> ConcentrationField {
        let mesh = &self.mesh;
        let jm = mesh.j_membrane();
        let mut c = ConcentrationField::zeros(mesh.n_vertices());
        for v in 0..mesh.n_vertices() {
            let j = mesh.grid_position(v).1;
            for s in 0..N_SPECIES {
                let val = if is_blood_only(s) {
                    if mesh.is_blood_vertex(v) {
                        bd.inlet_blood[s]
                    } else {
                        0.0
                    }
                } else if j > jm {
                    bd.inlet_dialysate[s]
                } else {
                    bd.inlet_blood[s]
                };
                c.set(v, s, val);
            }
        }
        c
    }

    /// Starting iterate used when none is supplied: the inlet data carried
    /// through the domain by convection and diffusion alone, with the
    /// reactions switched off. One linear solve.
    pub fn reaction_free_guess(
        &self,
        u: &VelocityField,
        cfg: &TransportConfig,
        bd: &BoundaryData,
    ) -> Result<ConcentrationField, NewtonError> {
        bd.validate()?;
        self.transport_predictor(u, cfg, &self.inlet_problem(bd))
    }

    fn transport_predictor(
        &self,
        u: &VelocityField,
        cfg: &TransportConfig,
        problem: &Problem,
    ) -> Result<ConcentrationField, NewtonError> {
        let mut k = self.assemble_linear(u, cfg)?;
        let mut rhs = problem.source.clone().unwrap_or_else(|| vec![0.0; self.n_dofs()]);
        for (i, d) in problem.dirichlet.iter().enumerate() {
            if let Some(g) = d {
                k.set_identity_row(i);
                rhs[i] = *g;
            }
        }
        let values = self
            .lu
            .solve(&k, &rhs)
            .map_err(|source| NewtonError::LinearSolve { source, trace: Vec::new() })?;
        Ok(ConcentrationField { values })
    }

    /// Weighted discrete L2 norm `sqrt(sum_v m_v sum_s d_{v,s}^2)`.
    pub fn norm(&self, d: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (v, m) in self.mass_full.iter().enumerate() {
            let s2: f64 = d[N_SPECIES * v..N_SPECIES * (v + 1)].iter().map(|x| x * x).sum();
            acc += m * s2;
        }
        acc.sqrt()
    }

    /// Newton iteration in variational form for the inlet problem.
    pub fn newton_solve(
        &self,
        u: &VelocityField,
        cfg: &TransportConfig,
        bd: &BoundaryData,
        c0: Option<&ConcentrationField>,
    ) -> Result<NewtonOutcome, NewtonError> {
        bd.validate()?;
        let problem = self.inlet_problem(bd);
        let start = match c0 {
            Some(c) => c.clone(),
            None => self.transport_predictor(u, cfg, &problem)?,
        };
        self.run_newton(u, cfg, &problem, start)
    }

    /// Newton solve with Dirichlet data `exact` on the inlet boundaries and a
    /// volume source; used to verify the discretization on manufactured
    /// solutions. Albumin species are pinned to zero off the blood region.
    ///
    /// The source is evaluated per subdomain and lumped with that
    /// subdomain's share of the nodal mass, so a source that jumps across an
    /// interface (as the calcium source does where albumin ends) is
    /// integrated consistently with the lumped reaction terms.
    pub fn newton_solve_with_source(
        &self,
        u: &VelocityField,
        cfg: &TransportConfig,
        exact: &dyn Fn(usize, f64, f64) -> f64,
        source: &dyn Fn(usize, f64, f64, Subdomain) -> f64,
    ) -> Result<NewtonOutcome, NewtonError> {
        let mesh = &self.mesh;
        let mut dirichlet = vec![None; self.n_dofs()];
        for v in mesh.boundary_vertices(BoundaryTag::InletBlood) {
            let [x, r] = mesh.vertices()[v];
            for s in 0..N_SPECIES {
                dirichlet[N_SPECIES * v + s] = Some(exact(s, x, r));
            }
        }
        for v in mesh.boundary_vertices(BoundaryTag::InletDialysate) {
            let [x, r] = mesh.vertices()[v];
            for s in [0, 3, 4] {
                dirichlet[N_SPECIES * v + s] = Some(exact(s, x, r));
            }
        }
        self.pin_albumin(&mut dirichlet);
        const LAYERS: [Subdomain; 3] = [Subdomain::Blood, Subdomain::Membrane, Subdomain::Dialysate];
        let mut mass = vec![[0.0; 3]; mesh.n_vertices()];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let k = LAYERS.iter().position(|&l| l == mesh.subdomains()[t]).unwrap();
            let area = mesh.triangle_area(t);
            let r = tri.map(|v| mesh.vertices()[v][1]);
            for a in 0..3 {
                mass[tri[a]][k] += area * (r[0] + r[1] + r[2] + r[a]) / 12.0;
            }
        }
        let mut src = vec![0.0; self.n_dofs()];
        for (v, m) in mass.iter().enumerate() {
            let [x, r] = mesh.vertices()[v];
            for s in 0..N_SPECIES {
                let layers = if is_blood_only(s) { &LAYERS[..1] } else { &LAYERS[..] };
                src[N_SPECIES * v + s] =
                    layers.iter().zip(m).filter(|(_, &m)| m > 0.0).map(|(&l, &m)| m * source(s, x, r, l)).sum();
            }
        }
        let problem = Problem {
            dirichlet,
            source: Some(src),
        };
        let mut start = ConcentrationField::zeros(mesh.n_vertices());
        for v in 0..mesh.n_vertices() {
            let [x, r] = mesh.vertices()[v];
            for s in 0..N_SPECIES {
                if !is_blood_only(s) || mesh.is_blood_vertex(v) {
                    start.set(v, s, exact(s, x, r));
                }
            }
        }
        // start away from the answer so the iteration is exercised
        for x in start.values.iter_mut() {
            *x *= 0.9;
        }
        self.run_newton(u, cfg, &problem, start)
    }

    fn run_newton(
        &self,
        u: &VelocityField,
        cfg: &TransportConfig,
        problem: &Problem,
        start: ConcentrationField,
    ) -> Result<NewtonOutcome, NewtonError> {
        let k = self.assemble_linear(u, cfg)?;
        let mut c = start;
        for (i, d) in problem.dirichlet.iter().enumerate() {
            if let Some(g) = d {
                c.values[i] = *g;
            }
        }
        let mut trace = Vec::new();
        let step = |c: &ConcentrationField, trace: &Vec<f64>| -> Result<ConcentrationField, NewtonError> {
            let (jac, rhs) = self.newton_system(&k, cfg, problem, c);
            let next = self.lu.solve(&jac, &rhs).map_err(|source| NewtonError::LinearSolve {
                source,
                trace: trace.clone(),
            })?;
            Ok(ConcentrationField { values: next })
        };
        let diff = |a: &ConcentrationField, b: &ConcentrationField| -> f64 {
            let d: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
            self.norm(&d)
        };

        let mut n = 0;
        let mut next = step(&c, &trace)?;
        trace.push(diff(&next, &c));
        while n < cfg.newton_max_iter && trace[trace.len() - 1] > cfg.newton_tol {
            if !trace[trace.len() - 1].is_finite() {
                return Err(NewtonError::Diverged { trace });
            }
            n += 1;
            c = next;
            next = step(&c, &trace)?;
            trace.push(diff(&next, &c));
        }
        let last = trace[trace.len() - 1];
        if !last.is_finite() {
            return Err(NewtonError::Diverged { trace });
        }
        if last > cfg.newton_tol {
            return Err(NewtonError::NonConvergence { trace });
        }
        Ok(NewtonOutcome {
            field: next,
            iterations: n,
            trace,
        })
    }
}

/// Cross-section average at the blood outlet, `(2 R^2 / R1^2) int r c dr`,
/// integrated exactly for the P1 trace.
pub fn outlet_concentration(c: &ConcentrationField, mesh: &Mesh) -> [f64; N_SPECIES] {
    let g = mesh.geometry();
    let scale = 2.0 * g.r_outer * g.r_outer / (g.r_blood * g.r_blood);
    let nodes = mesh.boundary_vertices(BoundaryTag::OutletBlood);
    let mut out = [0.0; N_SPECIES];
    for w in nodes.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (ra, rb) = (mesh.vertices()[a][1], mesh.vertices()[b][1]);
        let h = rb - ra;
        for (s, o) in out.iter_mut().enumerate() {
            let (ca, cb) = (c.get(a, s), c.get(b, s));
            *o += h * (ra * ca / 3.0 + (ra * cb + rb * ca) / 6.0 + rb * cb / 3.0);
        }
    }
    out.map(|v| v * scale)
}
