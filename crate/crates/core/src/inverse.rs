//! Cost functionals and identification drivers for the membrane
//! coefficients `beta = (d_Ca, d_Ci)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{add_measurement_noise, perturb_coefficients, NoiseSpec, PatientRecord};
use crate::flow::VelocityField;
use crate::forward::{ForwardError, ForwardModel};
use crate::optim::{
    grid_search, powell_minimize, projected_gradient, EvalError, GradientOptions, GridResult, OptimError, OptimResult,
    PowellOptions, StopReason, TracePoint,
};
use crate::transport::{BoundaryData, N_SPECIES};

#[derive(Debug, Error)]
pub enum InverseError {
    #[error("patient {0} has not been calibrated")]
    NotCalibrated(String),
    #[error("patient {0} has no outlet targets")]
    NoTargets(String),
    #[error("patient {patient}: target {species} is zero; relative misfit undefined, use absolute weights")]
    ZeroTarget { patient: String, species: usize },
    #[error("patient {patient}: {source}")]
    Forward { patient: String, source: ForwardError },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{0}")]
    Usage(String),
}

/// A calibrated patient with its frozen velocity field.
#[derive(Debug, Clone)]
pub struct PreparedPatient {
    pub record: PatientRecord,
    pub targets: [f64; N_SPECIES],
    velocity: VelocityField,
    bd: BoundaryData,
}

impl PreparedPatient {
    pub fn new(model: &ForwardModel, record: PatientRecord) -> Result<Self, InverseError> {
        let state = record.hydraulics.ok_or_else(|| InverseError::NotCalibrated(record.id.clone()))?;
        let targets = record.observed_outlet.ok_or_else(|| InverseError::NoTargets(record.id.clone()))?;
        let velocity = model.velocity(&state).map_err(|source| InverseError::Forward {
            patient: record.id.clone(),
            source,
        })?;
        let bd = record.boundary_data();
        Ok(PreparedPatient {
            record,
            targets,
            velocity,
            bd,
        })
    }

    pub fn id(&self) -> &str {
        &self.record.id
    }

    pub fn predict(&self, model: &ForwardModel, beta: [f64; 2]) -> Result<[f64; N_SPECIES], InverseError> {
        model.outlet(beta, &self.velocity, &self.bd).map_err(|source| InverseError::Forward {
            patient: self.record.id.clone(),
            source,
        })
    }
}

/// Prepares every record, in parallel.
pub fn prepare(model: &ForwardModel, records: &[PatientRecord]) -> Result<Vec<PreparedPatient>, InverseError> {
    records.par_iter().map(|r| PreparedPatient::new(model, r.clone())).collect()
}

/// Sum of squared relative misfits of the five outlet concentrations.
pub fn single_patient_cost(model: &ForwardModel, patient: &PreparedPatient, beta: [f64; 2]) -> Result<f64, InverseError> {
    if let Some(s) = patient.targets.iter().position(|t| *t == 0.0) {
        return Err(InverseError::ZeroTarget {
            patient: patient.id().to_string(),
            species: s,
        });
    }
    let y = patient.predict(model, beta)?;
    Ok(y.iter().zip(&patient.targets).map(|(a, b)| ((a - b) / b).powi(2)).sum())
}

/// Weights, bounds and safeguards of the multi-patient functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiCostConfig {
    pub weights: [f64; N_SPECIES],
    pub lambda: f64,
    /// Regularization center; the box center when absent.
    pub prior: Option<[f64; 2]>,
    pub bounds: [[f64; 2]; 2],
    pub penalty_scale: f64,
    pub failure_value: f64,
}

impl MultiCostConfig {
    /// Inverse mean magnitude of each target over the cohort, or unit weights
    /// if some mean is below `1e-12`.
    pub fn with_default_weights(patients: &[PreparedPatient], bounds: [[f64; 2]; 2]) -> Self {
        MultiCostConfig {
            weights: default_weights(patients),
            lambda: 0.0,
            prior: None,
            bounds,
            penalty_scale: 1e4,
            failure_value: 1e10,
        }
    }

    pub fn validate(&self) -> Result<(), InverseError> {
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(InverseError::Usage("weights must be positive".into()));
        }
        if self.bounds.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(InverseError::Usage("each lower bound must be below its upper bound".into()));
        }
        if !(self.lambda >= 0.0 && self.penalty_scale > 0.0 && self.failure_value > 0.0) {
            return Err(InverseError::Usage("lambda must be >= 0, penalty and failure values > 0".into()));
        }
        Ok(())
    }

    fn prior(&self) -> [f64; 2] {
        self.prior.unwrap_or([
            0.5 * (self.bounds[0][0] + self.bounds[0][1]),
            0.5 * (self.bounds[1][0] + self.bounds[1][1]),
        ])
    }

    /// Regularization plus the soft bound penalty.
    pub fn extra_terms(&self, beta: [f64; 2]) -> f64 {
        let mut v = 0.0;
        if self.lambda > 0.0 {
            let p = self.prior();
            v += self.lambda * ((beta[0] - p[0]).powi(2) + (beta[1] - p[1]).powi(2));
        }
        for k in 0..2 {
            let [lo, hi] = self.bounds[k];
            let excess = (lo - beta[k]).max(beta[k] - hi).max(0.0);
            v += self.penalty_scale * excess * excess;
        }
        v
    }
}

pub fn default_weights(patients: &[PreparedPatient]) -> [f64; N_SPECIES] {
    let n = patients.len().max(1) as f64;
    let mut means = [0.0; N_SPECIES];
    for p in patients {
        for (m, t) in means.iter_mut().zip(&p.targets) {
            *m += t.abs() / n;
        }
    }
    if patients.is_empty() || means.iter().any(|m| *m < 1e-12) {
        [1.0; N_SPECIES]
    } else {
        means.map(|m| 1.0 / m)
    }
}

/// Weighted misfit of one patient, `|W (F_p(beta) - y_p)|^2`.
pub fn weighted_misfit(model: &ForwardModel, patient: &PreparedPatient, weights: &[f64; N_SPECIES], beta: [f64; 2]) -> Result<f64, InverseError> {
    let y = patient.predict(model, beta)?;
    Ok((0..N_SPECIES).map(|i| (weights[i] * (y[i] - patient.targets[i])).powi(2)).sum())
}

/// Multi-patient functional. Failed forward solves contribute
/// `failure_value`; per-patient terms are summed in list order.
pub fn multi_patient_cost(model: &ForwardModel, patients: &[PreparedPatient], cfg: &MultiCostConfig, beta: [f64; 2]) -> f64 {
    let terms: Vec<f64> = patients
        .par_iter()
        .map(|p| match weighted_misfit(model, p, &cfg.weights, beta) {
            Ok(v) if v.is_finite() => v,
            _ => cfg.failure_value,
        })
        .collect();
    terms.iter().sum::<f64>() + cfg.extra_terms(beta)
}

/// Projected gradient descent on the single-patient functional over
/// `[0, 1]^2`.
pub fn identify_single(model: &ForwardModel, patient: &PreparedPatient, beta0: [f64; 2], opts: &GradientOptions) -> Result<OptimResult, InverseError> {
    if !beta0.iter().all(|b| (0.0..=1.0).contains(b)) {
        return Err(InverseError::Usage(format!("start point {beta0:?} outside [0, 1]^2")));
    }
    // fail early with a typed error at the start point
    single_patient_cost(model, patient, beta0)?;
    let f = |b: &[f64]| single_patient_cost(model, patient, [b[0], b[1]]).map_err(|e| EvalError(e.to_string()));
    Ok(projected_gradient(&f, &beta0, &[0.0, 0.0], &[1.0, 1.0], opts)?)
}

/// Powell minimization of the multi-patient functional in `z = ln beta`.
/// The returned points are in `beta` space.
pub fn identify_multi(
    model: &ForwardModel,
    patients: &[PreparedPatient],
    init: [f64; 2],
    cfg: &MultiCostConfig,
    opts: &PowellOptions,
) -> Result<OptimResult, InverseError> {
    if patients.is_empty() {
        return Err(InverseError::Usage("no patients to invert".into()));
    }
    cfg.validate()?;
    for k in 0..2 {
        let [lo, hi] = cfg.bounds[k];
        if !(init[k] > 0.0 && init[k] >= lo && init[k] <= hi) {
            return Err(InverseError::Usage(format!("initial point {init:?} outside the bounds")));
        }
    }
    let f = |z: &[f64]| Ok(multi_patient_cost(model, patients, cfg, [z[0].exp(), z[1].exp()]));
    let z0 = [init[0].ln(), init[1].ln()];
    let mut res = powell_minimize(&f, &z0, opts)?;
    let to_beta = |z: &[f64]| z.iter().map(|v| v.exp()).collect::<Vec<f64>>();
    res.best_point = to_beta(&res.best_point);
    res.iterate_trace = res
        .iterate_trace
        .iter()
        .map(|t| TracePoint {
            point: to_beta(&t.point),
            value: t.value,
        })
        .collect();
    if res.best_value >= patients.len() as f64 * cfg.failure_value {
        res.converged = false;
        res.stop_reason = StopReason::Stalled;
    }
    Ok(res)
}

/// Multi-patient functional on a uniform grid.
pub fn landscape_scan(
    model: &ForwardModel,
    patients: &[PreparedPatient],
    box_: [[f64; 2]; 2],
    n1: usize,
    n2: usize,
    cfg: &MultiCostConfig,
) -> Result<GridResult, InverseError> {
    let f = |b: &[f64]| Ok(multi_patient_cost(model, patients, cfg, [b[0], b[1]]));
    Ok(grid_search(&f, box_, n1, n2)?)
}

/// Value ranges of a landscape through its minimum: along the row (varying
/// `d_Ci` at fixed `d_Ca`) and along the column (varying `d_Ca`). Failed
/// cells are ignored.
pub fn valley_ranges(grid: &GridResult) -> (f64, f64) {
    let (i0, j0) = grid.argmin_index();
    let range = |vals: Vec<f64>| {
        let finite: Vec<f64> = vals.into_iter().filter(|v| v.is_finite()).collect();
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    };
    let along_ci = range((0..grid.axis2.len()).map(|j| grid.value(i0, j)).collect());
    let along_ca = range((0..grid.axis1.len()).map(|i| grid.value(i, j0)).collect());
    (along_ci, along_ca)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub patients: Vec<String>,
    pub beta: [f64; 2],
    pub value: f64,
    /// `|beta_hat - beta*| / beta*` per coefficient.
    pub relative_error: [f64; 2],
    pub n_evals: usize,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelReport {
    pub sigma: f64,
    pub subcohorts: Vec<Estimate>,
    pub full: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStudyOptions {
    pub sigmas: Vec<f64>,
    pub seed: u64,
    pub clip_factor: f64,
    pub subcohort_size: usize,
    pub n_subcohorts: usize,
    pub init: [f64; 2],
    pub bounds: [[f64; 2]; 2],
    pub powell: PowellOptions,
}

/// Inverts noisy copies of exact targets on disjoint sub-cohorts and on
/// their union. Weights are recomputed from the noisy targets of each
/// inverted group.
pub fn noise_study(
    model: &ForwardModel,
    exact: &[PatientRecord],
    beta_star: [f64; 2],
    opts: &NoiseStudyOptions,
) -> Result<Vec<NoiseLevelReport>, InverseError> {
    let needed = opts.subcohort_size * opts.n_subcohorts;
    if opts.subcohort_size == 0 || opts.n_subcohorts == 0 || exact.len() < needed {
        return Err(InverseError::Usage(format!(
            "need {needed} patients for {} sub-cohorts of {}, have {}",
            opts.n_subcohorts,
            opts.subcohort_size,
            exact.len()
        )));
    }
    let exact = &exact[..needed];
    let mut reports = Vec::new();
    for &sigma in &opts.sigmas {
        let spec = NoiseSpec {
            sigma,
            clip_factor: opts.clip_factor,
            seed: opts.seed,
        };
        let noisy = add_measurement_noise(exact, &spec).map_err(|e| InverseError::Usage(e.to_string()))?;
        let prepared = prepare(model, &noisy)?;
        let invert = |group: &[PreparedPatient]| -> Result<Estimate, InverseError> {
            let cfg = MultiCostConfig::with_default_weights(group, opts.bounds);
            let res = identify_multi(model, group, opts.init, &cfg, &opts.powell)?;
            let beta = [res.best_point[0], res.best_point[1]];
            Ok(Estimate {
                patients: group.iter().map(|p| p.id().to_string()).collect(),
                beta,
                value: res.best_value,
                relative_error: [
                    (beta[0] - beta_star[0]).abs() / beta_star[0],
                    (beta[1] - beta_star[1]).abs() / beta_star[1],
                ],
                n_evals: res.n_evals,
                converged: res.converged,
                trace: res.iterate_trace,
            })
        };
        let subcohorts = prepared
            .chunks(opts.subcohort_size)
            .map(invert)
            .collect::<Result<Vec<_>, _>>()?;
        let full = invert(&prepared)?;
        reports.push(NoiseLevelReport { sigma, subcohorts, full });
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSensitivity {
    pub id: String,
    pub beta: [f64; 2],
    pub relative_error: [f64; N_SPECIES],
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityLevel {
    pub sigma: f64,
    pub patients: Vec<PatientSensitivity>,
    pub excluded: Vec<(String, String)>,
    pub cohort_mean: f64,
    pub cohort_max: f64,
    pub species_mean: [f64; N_SPECIES],
}

/// Output deviations caused by per-patient multiplicative perturbations of
/// the coefficients. `reference` must hold exact targets at `beta_star`.
pub fn sensitivity_study(
    model: &ForwardModel,
    reference: &[PatientRecord],
    beta_star: [f64; 2],
    sigmas: &[f64],
    seed: u64,
    clip_factor: f64,
) -> Result<Vec<SensitivityLevel>, InverseError> {
    let prepared = prepare(model, reference)?;
    let mut levels = Vec::new();
    for &sigma in sigmas {
        let spec = NoiseSpec { sigma, clip_factor, seed };
        let betas = perturb_coefficients(beta_star, &spec, prepared.len()).map_err(|e| InverseError::Usage(e.to_string()))?;
        let results: Vec<Result<PatientSensitivity, InverseError>> = prepared
            .par_iter()
            .zip(betas.par_iter())
            .map(|(p, beta)| {
                let y = p.predict(model, *beta)?;
                let mut rel = [0.0; N_SPECIES];
                for i in 0..N_SPECIES {
                    rel[i] = if p.targets[i] != 0.0 {
                        (y[i] - p.targets[i]).abs() / p.targets[i].abs()
                    } else {
                        (y[i] - p.targets[i]).abs()
                    };
                }
                Ok(PatientSensitivity {
                    id: p.id().to_string(),
                    beta: *beta,
                    relative_error: rel,
                    mean_error: rel.iter().sum::<f64>() / N_SPECIES as f64,
                })
            })
            .collect();
        let mut patients = Vec::new();
        let mut excluded = Vec::new();
        for (p, r) in prepared.iter().zip(results) {
            match r {
                Ok(s) => patients.push(s),
                Err(e) => excluded.push((p.id().to_string(), e.to_string())),
            }
        }
        let n = patients.len().max(1) as f64;
        let cohort_mean = patients.iter().map(|p| p.mean_error).sum::<f64>() / n;
        let cohort_max = patients.iter().map(|p| p.mean_error).fold(0.0, f64::max);
        let mut species_mean = [0.0; N_SPECIES];
        for p in &patients {
            for (m, e) in species_mean.iter_mut().zip(&p.relative_error) {
                *m += e / n;
            }
        }
        levels.push(SensitivityLevel {
            sigma,
            patients,
            excluded,
            cohort_mean,
            cohort_max,
            species_mean,
        });
    }
    Ok(levels)
}

/// Coarse grid, refined grid around the coarse minimum, then Powell from the
/// refined minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalOptions {
    pub coarse_box: [[f64; 2]; 2],
    pub coarse_n: usize,
    /// Box of the refined scan; centered on the coarse minimum when absent.
    pub refine_box: Option<[[f64; 2]; 2]>,
    pub refine_n: usize,
    pub powell: PowellOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalReport {
    pub coarse: GridResult,
    pub refined: GridResult,
    pub powell: OptimResult,
}

pub fn clinical_workflow(
    model: &ForwardModel,
    patients: &[PreparedPatient],
    cfg: &MultiCostConfig,
    opts: &ClinicalOptions,
) -> Result<ClinicalReport, InverseError> {
    let coarse = landscape_scan(model, patients, opts.coarse_box, opts.coarse_n, opts.coarse_n, cfg)?;
    let refine_box = opts.refine_box.unwrap_or_else(|| {
        let cb = opts.coarse_box;
        let h = [
            (cb[0][1] - cb[0][0]) / (opts.coarse_n - 1) as f64,
            (cb[1][1] - cb[1][0]) / (opts.coarse_n - 1) as f64,
        ];
        std::array::from_fn(|k| {
            let lo = (coarse.argmin[k] - h[k]).max(cb[k][0]);
            let hi = (coarse.argmin[k] + h[k]).min(cb[k][1]);
            [lo, hi]
        })
    });
    let refined = landscape_scan(model, patients, refine_box, opts.refine_n, opts.refine_n, cfg)?;
    let init = [refined.argmin[0].max(1e-6), refined.argmin[1].max(1e-6)];
    let powell = identify_multi(model, patients, init, cfg, &opts.powell)?;
    Ok(ClinicalReport { coarse, refined, powell })
}
