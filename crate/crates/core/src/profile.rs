//! Physical constants profile.
//!
//! Every constant must be spelled out: the JSON reader rejects unknown keys
//! and reports missing ones by name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flow::HydraulicParams;
use crate::mesh::AxiGeometry;
use crate::transport::{is_blood_only, ReactionParams, SpeciesParams, TransportConfig, N_SPECIES};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot read profile {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid profile: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConstants {
    pub d_blood: f64,
    pub d_dialysate: f64,
    pub sieving: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesTable {
    pub ca: SpeciesConstants,
    pub alb: SpeciesConstants,
    pub ca_alb: SpeciesConstants,
    pub cit: SpeciesConstants,
    pub ca_cit: SpeciesConstants,
}

impl SpeciesTable {
    pub fn as_array(&self) -> [SpeciesConstants; N_SPECIES] {
        [self.ca, self.alb, self.ca_alb, self.cit, self.ca_cit]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub streamline_diffusion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub geometry: AxiGeometry,
    pub peclet: f64,
    pub eps2: f64,
    pub reactions: ReactionParams,
    pub species: SpeciesTable,
    pub hydraulics: HydraulicParams,
    pub newton: NewtonSettings,
}

impl Profile {
    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let p: Profile = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Profile::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        self.geometry.validate().map_err(|e| ProfileError::Invalid(e.to_string()))?;
        self.hydraulics.validate().map_err(|e| ProfileError::Invalid(e.to_string()))?;
        self.transport_config([1.0, 0.0, 0.0, 1.0, 1.0])
            .validate()
            .map_err(|e| ProfileError::Invalid(e.to_string()))?;
        if self.newton.max_iter == 0 {
            return Err(ProfileError::Invalid("newton.max_iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Transport configuration with the given membrane fractions.
    pub fn transport_config(&self, alpha: [f64; N_SPECIES]) -> TransportConfig {
        let table = self.species.as_array();
        let species: [SpeciesParams; N_SPECIES] = std::array::from_fn(|s| SpeciesParams {
            d_blood: table[s].d_blood,
            d_dialysate: table[s].d_dialysate,
            alpha: alpha[s],
            sieving: table[s].sieving,
            crosses_membrane: !is_blood_only(s),
        });
        TransportConfig {
            peclet: self.peclet,
            eps2: self.eps2,
            species,
            reactions: self.reactions,
            newton_tol: self.newton.tol,
            newton_max_iter: self.newton.max_iter,
            streamline_diffusion: self.newton.streamline_diffusion,
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("profile serializes");
        hex_digest(text.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
