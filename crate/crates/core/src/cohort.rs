//! Patient records, cohort tables and synthetic data.
//!
//! Cohort tables are stored with one row per field and one column per
//! patient. Random draws come from ChaCha8 streams seeded with
//! `sha256(seed, label, key...)`, so each (field, patient) or
//! (patient, species) draw is independent of table order and thread count.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flow::HydraulicState;
use crate::forward::{ForwardError, ForwardModel, TreatmentSettings};
use crate::transport::{BoundaryData, N_SPECIES, SPECIES_NAMES};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}, column {column}: cannot parse {text:?} as a number")]
    Number { line: u64, column: usize, text: String },
    #[error("malformed table: {0}")]
    Malformed(String),
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("patient {patient}: missing value for {field:?}")]
    MissingValue { patient: String, field: String },
    #[error("{0}")]
    Usage(String),
}

/// Blood inlet fields, in species order.
pub const INLET_BLOOD_FIELDS: [&str; N_SPECIES] = ["ca_in", "alb_in", "ca_alb_in", "cit_in", "ca_cit_in"];
/// Dialysate inlet fields for the species that enter with the dialysate.
pub const INLET_DIALYSATE_FIELDS: [(usize, &str); 3] = [(0, "ca_dial"), (3, "cit_dial"), (4, "ca_cit_dial")];
/// Measured blood outlet fields, in species order. Optional.
pub const OUTLET_FIELDS: [&str; N_SPECIES] = ["ca_out", "alb_out", "ca_alb_out", "cit_out", "ca_cit_out"];
pub const TREATMENT_FIELDS: [&str; 7] = [
    "q_blood_rel",
    "dialysate_ratio",
    "uf_fraction",
    "p_in_blood",
    "p_out_blood",
    "p_in_dialysate",
    "p_out_dialysate",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub inlet_blood: [f64; N_SPECIES],
    pub inlet_dialysate: [f64; N_SPECIES],
    /// Outlet targets `y_p^obs`.
    pub observed_outlet: Option<[f64; N_SPECIES]>,
    pub settings: TreatmentSettings,
    /// Calibrated hydraulic state, frozen once set.
    pub hydraulics: Option<HydraulicState>,
    /// Every numeric field of the source table.
    pub extras: BTreeMap<String, f64>,
}

impl PatientRecord {
    pub fn boundary_data(&self) -> BoundaryData {
        BoundaryData {
            inlet_blood: self.inlet_blood,
            inlet_dialysate: self.inlet_dialysate,
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.hydraulics.is_some()
    }
}

/// Single-patient boundary table: species columns, one row per boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTable {
    pub inlet_blood: [f64; N_SPECIES],
    pub inlet_dialysate: [f64; N_SPECIES],
    pub outlet_blood: Option<[f64; N_SPECIES]>,
}

fn parse_number(text: &str, line: u64, column: usize) -> Result<f64, CohortError> {
    let t = text.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    t.parse::<f64>().map_err(|_| CohortError::Number {
        line,
        column,
        text: t.to_string(),
    })
}

impl BoundaryTable {
    /// Parses `boundary,c1,c2,c3,c4,c5` with rows `inlet_blood`,
    /// `inlet_dialysate` and optionally `outlet_blood`.
    pub fn from_csv(text: &str) -> Result<Self, CohortError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        if headers.len() != N_SPECIES + 1 {
            return Err(CohortError::Malformed(format!(
                "line 1: expected a boundary column and {N_SPECIES} species columns, found {} columns",
                headers.len()
            )));
        }
        let mut rows: BTreeMap<String, [f64; N_SPECIES]> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != N_SPECIES + 1 {
                return Err(CohortError::Malformed(format!("line {line}: expected {} columns", N_SPECIES + 1)));
            }
            let mut vals = [0.0; N_SPECIES];
            for (s, v) in vals.iter_mut().enumerate() {
                *v = parse_number(&rec[s + 1], line, s + 2)?;
                if v.is_nan() {
                    return Err(CohortError::Number {
                        line,
                        column: s + 2,
                        text: rec[s + 1].to_string(),
                    });
                }
            }
            let name = rec[0].to_string();
            if !matches!(name.as_str(), "inlet_blood" | "inlet_dialysate" | "outlet_blood") {
                return Err(CohortError::Malformed(format!("line {line}: unknown boundary {name:?}")));
            }
            if rows.insert(name.clone(), vals).is_some() {
                return Err(CohortError::Malformed(format!("line {line}: duplicate boundary {name:?}")));
            }
        }
        let get = |k: &str| rows.get(k).copied().ok_or_else(|| CohortError::MissingField(k.to_string()));
        Ok(BoundaryTable {
            inlet_blood: get("inlet_blood")?,
            inlet_dialysate: get("inlet_dialysate")?,
            outlet_blood: rows.get("outlet_blood").copied(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("boundary,c1,c2,c3,c4,c5\n");
        let mut row = |name: &str, v: &[f64; N_SPECIES]| {
            s.push_str(name);
            for x in v {
                s.push_str(&format!(",{x}"));
            }
            s.push('\n');
        };
        row("inlet_blood", &self.inlet_blood);
        row("inlet_dialysate", &self.inlet_dialysate);
        if let Some(o) = &self.outlet_blood {
            row("outlet_blood", o);
        }
        s
    }

    pub fn into_patient(self, id: &str, settings: TreatmentSettings) -> PatientRecord {
        let mut inlet_dialysate = self.inlet_dialysate;
        inlet_dialysate[1] = 0.0;
        inlet_dialysate[2] = 0.0;
        PatientRecord {
            id: id.to_string(),
            inlet_blood: self.inlet_blood,
            inlet_dialysate,
            observed_outlet: self.outlet_blood,
            settings,
            hydraulics: None,
            extras: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Fields-by-patients table; missing entries are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    pub field_names: Vec<String>,
    pub patient_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub provenance: Provenance,
    pub seed: Option<u64>,
}

impl CohortTable {
    /// Reads a table whose header is `field,<patient ids...>` and whose first
    /// column holds field names. Empty, `NA` or `NaN` cells are missing.
    pub fn from_csv(text: &str, provenance: Provenance) -> Result<Self, CohortError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 {
            return Err(CohortError::Malformed("line 1: no patient columns".into()));
        }
        let patient_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut field_names = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != headers.len() {
                return Err(CohortError::Malformed(format!(
                    "line {line}: expected {} columns, found {}",
                    headers.len(),
                    rec.len()
                )));
            }
            let name = rec[0].to_string();
            if field_names.contains(&name) {
                return Err(CohortError::Malformed(format!("line {line}: duplicate field {name:?}")));
            }
            let row = (1..rec.len())
                .map(|k| parse_number(&rec[k], line, k + 1))
                .collect::<Result<Vec<_>, _>>()?;
            field_names.push(name);
            values.push(row);
        }
        if field_names.is_empty() {
            return Err(CohortError::Malformed("table has no fields".into()));
        }
        Ok(CohortTable {
            field_names,
            patient_ids,
            values,
            provenance,
            seed: None,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("field");
        for id in &self.patient_ids {
            s.push(',');
            s.push_str(id);
        }
        s.push('\n');
        for (name, row) in self.field_names.iter().zip(&self.values) {
            s.push_str(name);
            for v in row {
                if v.is_nan() {
                    s.push_str(",NA");
                } else {
                    s.push_str(&format!(",{v}"));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn row(&self, field: &str) -> Option<&[f64]> {
        self.field_names.iter().position(|f| f == field).map(|i| self.values[i].as_slice())
    }

    /// Patient records; every inlet and treatment field must be present.
    pub fn patients(&self) -> Result<Vec<PatientRecord>, CohortError> {
        let required = INLET_BLOOD_FIELDS
            .iter()
            .chain(INLET_DIALYSATE_FIELDS.iter().map(|(_, f)| f))
            .chain(TREATMENT_FIELDS.iter());
        for f in required {
            if self.row(f).is_none() {
                return Err(CohortError::MissingField(f.to_string()));
            }
        }
        (0..self.n_patients()).map(|p| self.patient(p)).collect()
    }

    /// Like [`CohortTable::patients`] but skips patients with missing
    /// values, returning them with the reason.
    pub fn complete_patients(&self) -> Result<(Vec<PatientRecord>, Vec<(String, String)>), CohortError> {
        let mut ok = Vec::new();
        let mut skipped = Vec::new();
        for p in 0..self.n_patients() {
            match self.patient(p) {
                Ok(r) => ok.push(r),
                Err(e @ CohortError::MissingValue { .. }) => skipped.push((self.patient_ids[p].clone(), e.to_string())),
                Err(e) => return Err(e),
            }
        }
        Ok((ok, skipped))
    }

    fn patient(&self, p: usize) -> Result<PatientRecord, CohortError> {
        let id = &self.patient_ids[p];
        let get = |f: &str| -> Result<f64, CohortError> {
            let v = self.row(f).ok_or_else(|| CohortError::MissingField(f.to_string()))?[p];
            if v.is_nan() {
                Err(CohortError::MissingValue {
                    patient: id.clone(),
                    field: f.to_string(),
                })
            } else {
                Ok(v)
            }
        };
        let mut inlet_blood = [0.0; N_SPECIES];
        for (s, f) in INLET_BLOOD_FIELDS.iter().enumerate() {
            inlet_blood[s] = get(f)?;
        }
        let mut inlet_dialysate = [0.0; N_SPECIES];
        for (s, f) in INLET_DIALYSATE_FIELDS {
            inlet_dialysate[s] = get(f)?;
        }
        let t: Vec<f64> = TREATMENT_FIELDS.iter().map(|f| get(f)).collect::<Result<_, _>>()?;
        let settings = TreatmentSettings {
            q_blood_rel: t[0],
            dialysate_ratio: t[1],
            uf_fraction: t[2],
            p_in_blood: t[3],
            p_out_blood: t[4],
            p_in_dialysate: t[5],
            p_out_dialysate: t[6],
        };
        let observed_outlet = if OUTLET_FIELDS.iter().all(|f| self.row(f).is_some_and(|r| !r[p].is_nan())) {
            let mut o = [0.0; N_SPECIES];
            for (s, f) in OUTLET_FIELDS.iter().enumerate() {
                o[s] = get(f)?;
            }
            Some(o)
        } else {
            None
        };
        let extras = self
            .field_names
            .iter()
            .zip(&self.values)
            .filter(|(_, row)| !row[p].is_nan())
            .map(|(f, row)| (f.clone(), row[p]))
            .collect();
        Ok(PatientRecord {
            id: id.clone(),
            inlet_blood,
            inlet_dialysate,
            observed_outlet,
            settings,
            hydraulics: None,
            extras,
        })
    }
}

/// Independent random stream for one labelled draw.
pub fn stream(seed: u64, label: &str, keys: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    for k in keys {
        h.update([0u8]);
        h.update(k.as_bytes());
    }
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Per-row mean, sample standard deviation and minimum over non-missing
/// entries. `None` when the row has no data.
pub fn row_statistics(row: &[f64]) -> Option<(f64, Option<f64>, f64)> {
    let data: Vec<f64> = row.iter().copied().filter(|v| !v.is_nan()).collect();
    if data.is_empty() {
        return None;
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let sd = if data.len() > 1 {
        Some((data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    Some((mean, sd, min))
}

/// Draws `ns` synthetic patients: every field independently from a normal
/// law with the row's empirical mean and standard deviation, floored at half
/// the row minimum. Rows without spread are copied as constants and rows
/// without data stay missing.
pub fn generate_cohort(real: &CohortTable, ns: usize, seed: u64) -> Result<CohortTable, CohortError> {
    if ns == 0 {
        return Err(CohortError::Usage("number of synthetic patients must be at least 1".into()));
    }
    if real.n_patients() == 0 || real.field_names.is_empty() {
        return Err(CohortError::Usage("source table is empty".into()));
    }
    let width = ns.to_string().len().max(3);
    let patient_ids: Vec<String> = (1..=ns).map(|k| format!("S{k:0width$}")).collect();
    let values = real
        .field_names
        .iter()
        .zip(&real.values)
        .map(|(field, row)| match row_statistics(row) {
            None => vec![f64::NAN; ns],
            Some((mean, sd, min)) => match sd {
                Some(sd) if sd > 0.0 => patient_ids
                    .iter()
                    .map(|id| {
                        let z = standard_normal(&mut stream(seed, "cohort", &[field, id]));
                        (mean + sd * z).max(0.5 * min)
                    })
                    .collect(),
                _ => vec![mean; ns],
            },
        })
        .collect();
    Ok(CohortTable {
        field_names: real.field_names.clone(),
        patient_ids,
        values,
        provenance: Provenance::Synthetic,
        seed: Some(seed),
    })
}

/// Result of the two-stage target generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTargets {
    pub records: Vec<PatientRecord>,
    /// Patients dropped because calibration or the forward solve failed.
    pub excluded: Vec<(String, String)>,
}

/// Calibrates each patient and stores the model outlet at `beta_star` as its
/// target. Patients are processed concurrently; the output keeps the input
/// order.
pub fn make_reference_targets(patients: &[PatientRecord], model: &ForwardModel, beta_star: [f64; 2]) -> ReferenceTargets {
    let results: Vec<Result<PatientRecord, ForwardError>> = patients
        .par_iter()
        .map(|p| {
            let state = match p.hydraulics {
                Some(s) => s,
                None => model.calibrate(&p.settings)?,
            };
            let u = model.velocity(&state)?;
            let y = model.outlet(beta_star, &u, &p.boundary_data())?;
            let mut rec = p.clone();
            rec.hydraulics = Some(state);
            rec.observed_outlet = Some(y);
            Ok(rec)
        })
        .collect();
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (p, r) in patients.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => excluded.push((p.id.clone(), e.to_string())),
        }
    }
    ReferenceTargets { records, excluded }
}

/// Multiplicative noise `y (1 + eps)` with `eps = sigma * clamp(z, -k, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub clip_factor: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            sigma,
            clip_factor: 3.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(CohortError::Usage(format!("noise level must be >= 0, got {}", self.sigma)));
        }
        if !(self.clip_factor > 0.0) {
            return Err(CohortError::Usage(format!("clip factor must be > 0, got {}", self.clip_factor)));
        }
        Ok(())
    }

    fn factor(&self, label: &str, keys: &[&str]) -> f64 {
        let z = standard_normal(&mut stream(self.seed, label, keys));
        1.0 + self.sigma * z.clamp(-self.clip_factor, self.clip_factor)
    }
}

/// Perturbs the outlet targets only. The same seed gives the same standard
/// normal draws at every noise level.
pub fn add_measurement_noise(records: &[PatientRecord], spec: &NoiseSpec) -> Result<Vec<PatientRecord>, CohortError> {
    spec.validate()?;
    Ok(records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            if let Some(y) = out.observed_outlet.as_mut() {
                for (s, v) in y.iter_mut().enumerate() {
                    *v *= spec.factor("target", &[&r.id, SPECIES_NAMES[s]]);
                }
            }
            out
        })
        .collect())
}

/// Per-patient coefficients `beta* (1 + eps)` with independent draws for
/// each patient and coefficient.
pub fn perturb_coefficients(beta_star: [f64; 2], spec: &NoiseSpec, ns: usize) -> Result<Vec<[f64; 2]>, CohortError> {
    spec.validate()?;
    Ok((0..ns)
        .map(|p| {
            let key = p.to_string();
            [
                beta_star[0] * spec.factor("coefficient", &[&key, "d_ca"]),
                beta_star[1] * spec.factor("coefficient", &[&key, "d_ci"]),
            ]
        })
        .collect())
}
