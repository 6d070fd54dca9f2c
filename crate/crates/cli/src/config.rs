//! Run configuration. One JSON file; every section is optional and falls
//! back to the defaults below, but the constants profile it points to must
//! be complete.

use std::path::{Path, PathBuf};

use dialyzer_core::forward::TreatmentSettings;
use dialyzer_core::mesh::Resolution;
use dialyzer_core::optim::{GradientOptions, PowellOptions};
use dialyzer_core::profile::Profile;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable holding the profile path when the config has none.
pub const PROFILE_ENV: &str = "DIALYZER_PROFILE";

pub type Box2 = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Option<PathBuf>,
    pub mesh: Resolution,
    /// Treatment used for single-patient boundary tables.
    pub treatment: TreatmentSettings,
    /// Coefficients used to build synthetic targets.
    pub beta_star: [f64; 2],
    pub cohort: CohortOptions,
    pub single: SingleOptions,
    pub multi: MultiOptions,
    pub grid: GridOptions,
    pub noise: NoiseOptions,
    pub sensitivity: SensitivityOptions,
    pub clinical: ClinicalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: None,
            mesh: Resolution::default(),
            treatment: TreatmentSettings {
                q_blood_rel: 1.0,
                dialysate_ratio: 1.67,
                uf_fraction: 0.071,
                p_in_blood: 1.0,
                p_out_blood: 0.6,
                p_in_dialysate: 0.2,
                p_out_dialysate: 0.3,
            },
            beta_star: [0.8, 0.4],
            cohort: CohortOptions::default(),
            single: SingleOptions::default(),
            multi: MultiOptions::default(),
            grid: GridOptions::default(),
            noise: NoiseOptions::default(),
            sensitivity: SensitivityOptions::default(),
            clinical: ClinicalConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortOptions {
    /// Real (or stand-in) cohort, fields by patients.
    pub source: PathBuf,
    pub ns: usize,
    pub seed: u64,
}

impl Default for CohortOptions {
    fn default() -> Self {
        CohortOptions {
            source: PathBuf::from("data/cohort_standin.csv"),
            ns: 40,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SingleOptions {
    pub beta0: [f64; 2],
    pub gradient: GradientOptions,
}

impl Default for SingleOptions {
    fn default() -> Self {
        SingleOptions {
            beta0: [0.2, 0.2],
            gradient: GradientOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiOptions {
    pub init: [f64; 2],
    pub bounds: Box2,
    /// Number of leading patients of the targets bundle to invert.
    pub subset: usize,
    pub lambda: f64,
    pub penalty_scale: f64,
    pub failure_value: f64,
    pub powell: PowellOptions,
}

impl Default for MultiOptions {
    fn default() -> Self {
        MultiOptions {
            init: [0.3, 0.8],
            bounds: [[0.02, 3.0], [0.02, 3.0]],
            subset: 4,
            lambda: 0.0,
            penalty_scale: 1e4,
            failure_value: 1e10,
            powell: PowellOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    #[serde(rename = "box")]
    pub box_: Box2,
    pub n: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            box_: [[0.02, 1.0], [0.02, 1.0]],
            n: 31,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseOptions {
    pub sigmas: Vec<f64>,
    pub seed: u64,
    pub clip_factor: f64,
    pub subcohort_size: usize,
    pub n_subcohorts: usize,
    pub powell: PowellOptions,
}

impl Default for NoiseOptions {
    fn default() -> Self {
        NoiseOptions {
            sigmas: vec![0.01, 0.03, 0.05],
            seed: 2024,
            clip_factor: 3.0,
            subcohort_size: 5,
            n_subcohorts: 4,
            powell: PowellOptions {
                xtol: 1e-4,
                ftol: 1e-8,
                ..PowellOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityOptions {
    pub sigmas: Vec<f64>,
    pub seed: u64,
    pub clip_factor: f64,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            sigmas: vec![0.01, 0.03, 0.05],
            seed: 11,
            clip_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClinicalConfig {
    pub coarse_box: Box2,
    pub coarse_n: usize,
    pub refine_box: Option<Box2>,
    pub refine_n: usize,
    pub powell: PowellOptions,
}

impl Default for ClinicalConfig {
    fn default() -> Self {
        ClinicalConfig {
            coarse_box: [[0.02, 3.0], [0.02, 3.0]],
            coarse_n: 31,
            refine_box: None,
            refine_n: 21,
            powell: PowellOptions::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file. Without a file the defaults apply, relative to the working
    /// directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?;
                let base = absolute(p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
                (cfg, base)
            }
            None => (RunConfig::default(), absolute(Path::new("."))?),
        };
        if cfg.profile.is_none() {
            cfg.profile = std::env::var_os(PROFILE_ENV).map(|p| absolute(Path::new(&p))).transpose()?;
        }
        cfg.profile = cfg.profile.map(|p| base.join(p));
        cfg.cohort.source = base.join(&cfg.cohort.source);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn load_profile(&self) -> Result<Profile, CliError> {
        let path = self.profile.as_ref().ok_or_else(|| {
            CliError::Config(format!("no constants profile: set \"profile\" in the config or {PROFILE_ENV}"))
        })?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read profile {}: {e}", path.display())))?;
        Profile::from_json(&text).map_err(|e| CliError::Config(format!("profile {}: {e}", path.display())))
    }
}

pub fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
}

pub fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v = parse_list(s, 2)?;
    Ok([v[0], v[1]])
}

/// `lo1,hi1,lo2,hi2`.
pub fn parse_box(s: &str) -> Result<Box2, String> {
    let v = parse_list(s, 4)?;
    if !(v[0] < v[1] && v[2] < v[3]) {
        return Err(format!("box {s:?}: each lower bound must be below its upper bound"));
    }
    Ok([[v[0], v[1]], [v[2], v[3]]])
}

pub fn parse_mesh(s: &str) -> Result<Resolution, String> {
    match s {
        "default" => Ok(Resolution::default()),
        "study" => Ok(Resolution::study()),
        _ => {
            let v: Vec<usize> = s
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| format!("cannot parse {t:?} as a cell count")))
                .collect::<Result<_, _>>()?;
            if v.len() != 4 {
                return Err("expected `default`, `study` or nx,nr_blood,nr_membrane,nr_dialysate".into());
            }
            let r = Resolution::new(v[0], v[1], v[2], v[3]);
            r.validate().map_err(|e| e.to_string())?;
            Ok(r)
        }
    }
}

fn parse_list(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("cannot parse {t:?} as a number")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err("values must be finite".into());
    }
    Ok(v)
}
