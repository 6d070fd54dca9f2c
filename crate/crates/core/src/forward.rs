//! Forward map from membrane coefficients to outlet concentrations for one
//! treatment: hydraulic calibration, velocity field, Newton solve, outlet
//! average.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{calibrate_filtration, compute_velocity, FlowError, HydraulicState, VelocityField};
use crate::mesh::{Mesh, MeshError, Resolution};
use crate::profile::Profile;
use crate::transport::{
    outlet_concentration, BoundaryData, NewtonError, NewtonOutcome, TransportError, TransportSolver, N_SPECIES,
};

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("Newton solve failed: {0}")]
    Newton(#[from] NewtonError),
    #[error("invalid coefficients {0:?}: both must be finite and non-negative")]
    InvalidBeta([f64; 2]),
}

/// Treatment settings in units independent of the geometry: the blood flow
/// relative to a unit mean velocity in the lumen, the dialysate flow and the
/// ultrafiltration as fractions of the blood flow, and end pressures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatmentSettings {
    pub q_blood_rel: f64,
    pub dialysate_ratio: f64,
    pub uf_fraction: f64,
    pub p_in_blood: f64,
    pub p_out_blood: f64,
    pub p_in_dialysate: f64,
    pub p_out_dialysate: f64,
}

impl TreatmentSettings {
    /// Uncalibrated hydraulic state on a fiber of blood radius `r_blood`.
    pub fn hydraulic_state(&self, r_blood: f64) -> HydraulicState {
        let q_blood = self.q_blood_rel * PI * r_blood * r_blood;
        HydraulicState {
            q_blood,
            q_dialysate: self.dialysate_ratio * q_blood,
            p_in_blood: self.p_in_blood,
            p_out_blood: self.p_out_blood,
            p_in_dialysate: self.p_in_dialysate,
            p_out_dialysate: self.p_out_dialysate,
        }
    }

    pub fn filtration_target(&self, r_blood: f64) -> f64 {
        self.uf_fraction * self.q_blood_rel * PI * r_blood * r_blood
    }
}

/// Embedding `alpha = (b1, 0, 0, b2, b2)`.
pub fn alpha_of(beta: [f64; 2]) -> [f64; N_SPECIES] {
    [beta[0], 0.0, 0.0, beta[1], beta[1]]
}

/// Immutable solver state for one profile and resolution; safe to share
/// between threads.
#[derive(Debug)]
pub struct ForwardModel {
    profile: Profile,
    mesh: Arc<Mesh>,
    solver: TransportSolver,
}

impl ForwardModel {
    pub fn new(profile: Profile, resolution: Resolution) -> Result<Self, ForwardError> {
        let mesh = Arc::new(Mesh::build(profile.geometry, resolution)?);
        let solver = TransportSolver::new(mesh.clone())?;
        Ok(ForwardModel { profile, mesh, solver })
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn solver(&self) -> &TransportSolver {
        &self.solver
    }

    /// Adjusts the blood-side pressures so the transmembrane flux matches the
    /// prescribed ultrafiltration.
    pub fn calibrate(&self, settings: &TreatmentSettings) -> Result<HydraulicState, ForwardError> {
        let r1 = self.profile.geometry.r_blood;
        let (state, _) = calibrate_filtration(
            &self.mesh,
            &self.profile.hydraulics,
            &settings.hydraulic_state(r1),
            settings.filtration_target(r1),
        )?;
        Ok(state)
    }

    pub fn velocity(&self, state: &HydraulicState) -> Result<VelocityField, ForwardError> {
        Ok(compute_velocity(&self.mesh, &self.profile.hydraulics, state)?)
    }

    /// Full Newton solve for the coefficients `beta`.
    pub fn solve(&self, beta: [f64; 2], u: &VelocityField, bd: &BoundaryData) -> Result<NewtonOutcome, ForwardError> {
        if !beta.iter().all(|b| b.is_finite() && *b >= 0.0) {
            return Err(ForwardError::InvalidBeta(beta));
        }
        let cfg = self.profile.transport_config(alpha_of(beta));
        Ok(self.solver.newton_solve(u, &cfg, bd, None)?)
    }

    /// Predicted outlet concentrations.
    pub fn outlet(&self, beta: [f64; 2], u: &VelocityField, bd: &BoundaryData) -> Result<[f64; N_SPECIES], ForwardError> {
        let out = self.solve(beta, u, bd)?;
        Ok(outlet_concentration(&out.field, &self.mesh))
    }
}
