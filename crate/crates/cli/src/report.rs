//! Plot-ready CSVs and a text summary derived from a finished bundle. The
//! report reads nothing but the bundle, so regenerating it changes nothing.

use std::fmt::Write as _;
use std::path::Path;

use dialyzer_core::inverse::{NoiseLevelReport, SensitivityLevel};
use dialyzer_core::optim::TracePoint;
use dialyzer_core::transport::SPECIES_NAMES;
use serde::de::DeserializeOwned;

use crate::bundle::{read_manifest, verify_outputs, Manifest};
use crate::commands::{ClinicalFile, MultiEstimate, SingleEstimate, TargetsFile, TARGETS_FILE};
use crate::error::CliError;

fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T, CliError> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))
}

fn phase_plane(trace: &[TracePoint]) -> String {
    let mut s = String::from("k,d_ca,d_ci\n");
    for (k, t) in trace.iter().enumerate() {
        let _ = writeln!(s, "{k},{},{}", t.point[0], t.point[1]);
    }
    s
}

fn j_curve(trace: &[TracePoint]) -> String {
    let mut s = String::from("k,J\n");
    for (k, t) in trace.iter().enumerate() {
        let _ = writeln!(s, "{k},{}", t.value);
    }
    s
}

fn beta_error(trace: &[TracePoint], truth: [f64; 2]) -> String {
    let mut s = String::from("k,err_ca,err_ci,err_max\n");
    for (k, t) in trace.iter().enumerate() {
        let (a, b) = ((t.point[0] - truth[0]).abs(), (t.point[1] - truth[1]).abs());
        let _ = writeln!(s, "{k},{a},{b},{}", a.max(b));
    }
    s
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// The figure files for one bundle, as `(name, contents)`.
pub fn figures(dir: &Path, m: &Manifest) -> Result<Vec<(String, String)>, CliError> {
    let mut files = Vec::new();
    let copy = |name: &str| -> Result<(String, String), CliError> {
        let path = dir.join(name);
        Ok((name.to_string(), std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?))
    };
    match m.command.as_str() {
        "forward" => files.push(copy("newton_trace.csv")?),
        "synth" => {
            let t: TargetsFile = read_json(dir, TARGETS_FILE)?;
            let mut s = String::from("patient");
            for n in SPECIES_NAMES {
                let _ = write!(s, ",{n}");
            }
            s.push('\n');
            for r in &t.records {
                s.push_str(&r.id);
                for v in r.observed_outlet.unwrap_or([f64::NAN; 5]) {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
            files.push(("outlet_targets.csv".into(), s));
        }
        "invert-single" => {
            let e: SingleEstimate = read_json(dir, "estimate.json")?;
            files.push(("phase_plane.csv".into(), phase_plane(&e.result.iterate_trace)));
            files.push(("j_curve.csv".into(), j_curve(&e.result.iterate_trace)));
        }
        "invert-multi" => {
            let e: MultiEstimate = read_json(dir, "estimate.json")?;
            files.push(("phase_plane.csv".into(), phase_plane(&e.result.iterate_trace)));
            files.push(("j_curve.csv".into(), j_curve(&e.result.iterate_trace)));
            files.push(("beta_error.csv".into(), beta_error(&e.result.iterate_trace, e.beta_star)));
        }
        "grid" => {
            files.push(copy("landscape.csv")?);
            if dir.join("landscape_refined.csv").is_file() {
                files.push(copy("landscape_refined.csv")?);
            }
        }
        "noise-study" => {
            let reports: Vec<NoiseLevelReport> = read_json(dir, "noise.json")?;
            let mut scatter = String::from("sigma,group,d_ca,d_ci\n");
            let mut spread =
                String::from("sigma,std_d_ca,std_d_ci,mean_rel_err_ca,mean_rel_err_ci,full_rel_err_ca,full_rel_err_ci\n");
            for r in &reports {
                for (k, e) in r.subcohorts.iter().enumerate() {
                    let _ = writeln!(scatter, "{},sub{},{},{}", r.sigma, k + 1, e.beta[0], e.beta[1]);
                }
                let _ = writeln!(scatter, "{},full,{},{}", r.sigma, r.full.beta[0], r.full.beta[1]);
                let ca: Vec<f64> = r.subcohorts.iter().map(|e| e.beta[0]).collect();
                let ci: Vec<f64> = r.subcohorts.iter().map(|e| e.beta[1]).collect();
                let n = r.subcohorts.len().max(1) as f64;
                let mean_err = |k: usize| r.subcohorts.iter().map(|e| e.relative_error[k]).sum::<f64>() / n;
                let _ = writeln!(
                    spread,
                    "{},{},{},{},{},{},{}",
                    r.sigma,
                    sample_std(&ca),
                    sample_std(&ci),
                    mean_err(0),
                    mean_err(1),
                    r.full.relative_error[0],
                    r.full.relative_error[1]
                );
            }
            files.push(("subcohort_scatter.csv".into(), scatter));
            files.push(("noise_spread.csv".into(), spread));
        }
        "sensitivity" => {
            let levels: Vec<SensitivityLevel> = read_json(dir, "sensitivity.json")?;
            let mut bars = String::from("sigma,species,mean_rel_error\n");
            let mut cohort = String::from("sigma,cohort_mean,cohort_max\n");
            for l in &levels {
                for (name, v) in SPECIES_NAMES.iter().zip(l.species_mean) {
                    let _ = writeln!(bars, "{},{name},{v}", l.sigma);
                }
                let _ = writeln!(cohort, "{},{},{}", l.sigma, l.cohort_mean, l.cohort_max);
            }
            files.push(("sensitivity_bars.csv".into(), bars));
            files.push(("sensitivity_cohort.csv".into(), cohort));
        }
        "clinical" => {
            let c: ClinicalFile = read_json(dir, "clinical.json")?;
            files.push(copy("landscape_coarse.csv")?);
            files.push(copy("landscape_refined.csv")?);
            files.push(("phase_plane.csv".into(), phase_plane(&c.powell.iterate_trace)));
            files.push(("j_curve.csv".into(), j_curve(&c.powell.iterate_trace)));
        }
        other => return Err(CliError::Mismatch(format!("unknown bundle command {other:?}"))),
    }
    Ok(files)
}

pub fn summary(m: &Manifest, figures: &[(String, String)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "command: {}", m.command);
    let _ = writeln!(s, "profile: {} ({})", m.profile.name, m.profile_hash);
    let _ = writeln!(s, "config hash: {}", m.config_hash);
    let r = m.config.mesh;
    let _ = writeln!(s, "mesh: nx={} nr_blood={} nr_membrane={} nr_dialysate={}", r.nx, r.nr_blood, r.nr_membrane, r.nr_dialysate);
    for (k, v) in &m.seeds {
        let _ = writeln!(s, "seed {k}: {v}");
    }
    let _ = writeln!(
        s,
        "results:\n{}",
        serde_json::to_string_pretty(&m.results).expect("results serialize")
    );
    let _ = writeln!(s, "figures:");
    for (name, _) in figures {
        let _ = writeln!(s, "  {name}");
    }
    s
}

/// Writes the report of `bundle` into `out`.
pub fn run(bundle: &Path, out: &Path) -> Result<(), CliError> {
    let m = read_manifest(bundle)?;
    verify_outputs(bundle, &m)?;
    let figs = figures(bundle, &m)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for (name, text) in &figs {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    }
    let p = out.join("summary.txt");
    std::fs::write(&p, summary(&m, &figs)).map_err(|e| CliError::io(&p, e))
}
