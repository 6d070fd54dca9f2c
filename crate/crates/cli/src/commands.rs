//! Pipeline commands. Each one writes its files through a [`BundleWriter`]
//! and reports seeds, inputs and headline results for the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use dialyzer_core::cohort::{
    generate_cohort, make_reference_targets, BoundaryTable, CohortTable, PatientRecord, Provenance,
};
use dialyzer_core::export::{field_csv, landscape_csv, trace_csv};
use dialyzer_core::forward::{ForwardError, ForwardModel};
use dialyzer_core::inverse::{
    clinical_workflow, identify_multi, identify_single, landscape_scan, noise_study, prepare, sensitivity_study,
    valley_ranges, ClinicalOptions, MultiCostConfig, NoiseStudyOptions, PreparedPatient,
};
use dialyzer_core::optim::{GridResult, OptimResult, StopReason};
use dialyzer_core::profile::Profile;
use dialyzer_core::transport::{outlet_concentration, N_SPECIES, SPECIES_NAMES};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bundle::{digest_file, read_manifest, verify_outputs, BundleWriter, FileDigest};
use crate::config::{absolute, parse_box, parse_pair, Box2, RunConfig};
use crate::error::CliError;

pub const TARGETS_FILE: &str = "targets.json";

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardArgs {
    /// Boundary table: species columns, one row per boundary.
    #[arg(long)]
    pub patient: PathBuf,
    /// Membrane coefficients `d_ca,d_ci`.
    #[arg(long, value_parser = parse_pair)]
    pub beta: [f64; 2],
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Number of synthetic patients; defaults to the config.
    #[arg(long)]
    pub ns: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Source cohort CSV (fields by patients).
    #[arg(long)]
    pub source: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertSingleArgs {
    /// Boundary table with an `outlet_blood` row.
    #[arg(long)]
    pub patient: PathBuf,
    #[arg(long, value_parser = parse_pair)]
    pub beta0: Option<[f64; 2]>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertMultiArgs {
    /// Bundle written by `synth`.
    #[arg(long)]
    pub targets: PathBuf,
    /// Invert the first N patients.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, value_parser = parse_pair)]
    pub init: Option<[f64; 2]>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridArgs {
    /// Bundle written by `synth`.
    #[arg(long, conflicts_with = "cohort")]
    pub targets: Option<PathBuf>,
    /// Cohort CSV with measured outlets, calibrated on the fly.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// With `--targets`, scan the functional of the first N patients.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Scan box `lo1,hi1,lo2,hi2`.
    #[arg(long = "box", value_parser = parse_box)]
    pub box_: Option<Box2>,
    /// Points per axis.
    #[arg(long)]
    pub n: Option<usize>,
    /// Use the clinical box and resolution from the config.
    #[arg(long)]
    pub clinical: bool,
    /// Second, localized scan over this box.
    #[arg(long, value_parser = parse_box)]
    pub refine: Option<Box2>,
    #[arg(long)]
    pub refine_n: Option<usize>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetsArgs {
    /// Bundle written by `synth`.
    #[arg(long)]
    pub targets: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalArgs {
    /// Cohort CSV with measured outlets.
    #[arg(long)]
    pub cohort: PathBuf,
    /// Box of the localized scan; centered on the coarse minimum by default.
    #[arg(long, value_parser = parse_box)]
    pub refine: Option<Box2>,
}

/// Exact targets at `beta_star` for a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetsFile {
    pub beta_star: [f64; 2],
    pub records: Vec<PatientRecord>,
    pub excluded: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    #[serde(rename = "box")]
    pub box_: Box2,
    pub n: [usize; 2],
    pub argmin: [f64; 2],
    pub min_value: f64,
    /// Value range through the minimum along `d_ci` at fixed `d_ca`.
    pub range_along_ci: f64,
    /// Value range through the minimum along `d_ca` at fixed `d_ci`.
    pub range_along_ca: f64,
}

impl GridSummary {
    pub fn of(grid: &GridResult) -> Self {
        let (range_along_ci, range_along_ca) = valley_ranges(grid);
        let (a, b) = (&grid.axis1, &grid.axis2);
        GridSummary {
            box_: [[a[0], a[a.len() - 1]], [b[0], b[b.len() - 1]]],
            n: [a.len(), b.len()],
            argmin: grid.argmin,
            min_value: grid.min_value,
            range_along_ci,
            range_along_ca,
        }
    }
}

/// Result of a multi-patient inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiEstimate {
    pub patients: Vec<String>,
    pub beta_star: [f64; 2],
    pub init: [f64; 2],
    pub weights: [f64; N_SPECIES],
    pub result: OptimResult,
}

/// Result of a single-patient inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleEstimate {
    pub patient: String,
    pub beta0: [f64; 2],
    pub initial_value: f64,
    pub result: OptimResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFile {
    pub patients: Vec<String>,
    pub excluded: Vec<(String, String)>,
    pub weights: [f64; N_SPECIES],
    pub coarse: GridSummary,
    pub refined: GridSummary,
    pub powell: OptimResult,
}

/// Everything a command hands back besides its files.
#[derive(Debug, Default)]
pub struct Record {
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub results: serde_json::Value,
    /// Set when an optimizer ran out of iterations; the bundle is still
    /// written and the command exits with the non-convergence code.
    pub not_converged: Option<String>,
}

pub struct Ctx {
    pub config: RunConfig,
    pub profile: Profile,
}

impl Ctx {
    pub fn model(&self) -> Result<ForwardModel, CliError> {
        ForwardModel::new(self.profile.clone(), self.config.mesh).map_err(|e| CliError::Config(e.to_string()))
    }
}

fn read_text(path: &Path, rec: &mut Record) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    rec.inputs.push(digest_file(path)?);
    Ok(text)
}

fn read_boundary_table(path: &Path, rec: &mut Record) -> Result<BoundaryTable, CliError> {
    let text = read_text(path, rec)?;
    BoundaryTable::from_csv(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn patient_id(path: &Path) -> String {
    path.file_stem().map_or("patient".into(), |s| s.to_string_lossy().into_owned())
}

fn stop_check(res: &OptimResult, what: &str, rec: &mut Record) {
    if res.stop_reason == StopReason::MaxIter {
        rec.not_converged = Some(format!("{what} stopped at the iteration limit without meeting its tolerance"));
    }
}

/// Loads the targets of a `synth` bundle made with the current profile and
/// mesh.
pub fn load_targets(ctx: &Ctx, dir: &Path, rec: &mut Record) -> Result<TargetsFile, CliError> {
    let m = read_manifest(dir)?;
    verify_outputs(dir, &m)?;
    if m.command != "synth" {
        return Err(CliError::Mismatch(format!("{} is a {} bundle, expected synth", dir.display(), m.command)));
    }
    if m.profile_hash != ctx.profile.hash() {
        return Err(CliError::Mismatch(format!(
            "{} was made with profile {:?} ({}), current profile is {:?}",
            dir.display(),
            m.profile.name,
            &m.profile_hash[..12],
            ctx.profile.name
        )));
    }
    if m.config.mesh != ctx.config.mesh {
        return Err(CliError::Mismatch(format!(
            "{} was made on mesh {:?}, current mesh is {:?}",
            dir.display(),
            m.config.mesh,
            ctx.config.mesh
        )));
    }
    let path = dir.join(TARGETS_FILE);
    let text = read_text(&path, rec)?;
    serde_json::from_str(&text).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))
}

/// Patients of a cohort CSV that have measured outlets, calibrated to their
/// treatment. Incomplete or failing patients are listed, not fatal.
pub fn calibrated_cohort(
    model: &ForwardModel,
    path: &Path,
    rec: &mut Record,
) -> Result<(Vec<PatientRecord>, Vec<(String, String)>), CliError> {
    let text = read_text(path, rec)?;
    let table = CohortTable::from_csv(&text, Provenance::Real).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let (records, mut excluded) = table.complete_patients()?;
    let (measured, unmeasured): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.observed_outlet.is_some());
    excluded.extend(unmeasured.into_iter().map(|r| (r.id, "no outlet measurements".to_string())));
    let calibrated: Vec<Result<PatientRecord, ForwardError>> = measured
        .par_iter()
        .map(|r| {
            let state = model.calibrate(&r.settings)?;
            let mut r = r.clone();
            r.hydraulics = Some(state);
            Ok(r)
        })
        .collect();
    let mut ok = Vec::new();
    for (r, c) in measured.iter().zip(calibrated) {
        match c {
            Ok(c) => ok.push(c),
            Err(e) => excluded.push((r.id.clone(), e.to_string())),
        }
    }
    if ok.is_empty() {
        return Err(CliError::Config(format!("{}: no usable patients", path.display())));
    }
    Ok((ok, excluded))
}

fn multi_cost_config(ctx: &Ctx, patients: &[PreparedPatient], bounds: Box2) -> MultiCostConfig {
    let m = &ctx.config.multi;
    MultiCostConfig {
        lambda: m.lambda,
        penalty_scale: m.penalty_scale,
        failure_value: m.failure_value,
        ..MultiCostConfig::with_default_weights(patients, bounds)
    }
}

pub fn forward(ctx: &Ctx, args: &ForwardArgs, w: &mut BundleWriter, rec: &mut Record) -> Result<(), CliError> {
    let table = read_boundary_table(&args.patient, rec)?;
    let patient = table.into_patient(&patient_id(&args.patient), ctx.config.treatment);
    let model = ctx.model()?;
    let state = model.calibrate(&patient.settings)?;
    let u = model.velocity(&state)?;
    let out = match model.solve(args.beta, &u, &patient.boundary_data()) {
        Ok(o) => o,
        Err(ForwardError::Newton(e)) => {
            w.write("newton_trace.csv", newton_trace_csv(e.trace()))?;
            return Err(CliError::NonConvergence(format!("{e}; trace written to {}", w.dir().join("newton_trace.csv").display())));
        }
        Err(e) => return Err(e.into()),
    };
    let outlet = outlet_concentration(&out.field, model.mesh());
    w.write("field.csv", field_csv(model.mesh(), &out.field))?;
    w.write("newton_trace.csv", newton_trace_csv(&out.trace))?;
    let doc = json!({
        "patient": patient.id,
        "beta": args.beta,
        "species": SPECIES_NAMES,
        "outlet": outlet,
        "iterations": out.iterations,
        "trace": out.trace,
        "hydraulics": state,
    });
    w.write_json("outlet.json", &doc)?;
    rec.results = json!({ "outlet": outlet, "iterations": out.iterations });
    Ok(())
}

pub fn newton_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("k,update\n");
    for (k, v) in trace.iter().enumerate() {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

pub fn synth(ctx: &Ctx, args: &SynthArgs, w: &mut BundleWriter, rec: &mut Record) -> Result<(), CliError> {
    let c = &ctx.config.cohort;
    let ns = args.ns.unwrap_or(c.ns);
    let seed = args.seed.unwrap_or(c.seed);
    let source = args.source.clone().unwrap_or_else(|| c.source.clone());
    let text = read_text(&source, rec)?;
    let real = CohortTable::from_csv(&text, Provenance::Real).map_err(|e| CliError::Config(format!("{}: {e}", source.display())))?;
    let syn = generate_cohort(&real, ns, seed)?;
    w.write("cohort.csv", syn.to_csv())?;
    let (patients, mut excluded) = syn.complete_patients()?;
    let model = ctx.model()?;
    let targets = make_reference_targets(&patients, &model, ctx.config.beta_star);
    excluded.extend(targets.excluded);
    let file = TargetsFile {
        beta_star: ctx.config.beta_star,
        records: targets.records,
        excluded,
    };
    w.write_json(TARGETS_FILE, &file)?;
    rec.seeds.insert("cohort".into(), seed);
    rec.results = json!({
        "patients": ns,
        "targets": file.records.len(),
        "excluded": file.excluded.iter().map(|(id, _)| id).collect::<Vec<_>>(),
    });
    Ok(())
}

pub fn invert_single(ctx: &Ctx, args: &InvertSingleArgs, w: &mut BundleWriter, rec: &mut Record) -> Result<(), CliError> {
    let table = read_boundary_table(&args.patient, rec)?;
    if table.outlet_blood.is_none() {
        return Err(CliError::Config(format!("{}: no outlet_blood row to fit", args.patient.display())));
    }
    let mut patient = table.into_patient(&patient_id(&args.patient), ctx.config.treatment);
    let model = ctx.model()?;
    patient.hydraulics = Some(model.calibrate(&patient.settings)?);
    let prepared = PreparedPatient::new(&model, patient)?;
    let beta0 = args.beta0.unwrap_or(ctx.config.single.beta0);
    let res = identify_single(&model, &prepared, beta0, &ctx.config.single.gradient)?;
    stop_check(&res, "projected gradient", rec);
    let est = SingleEstimate {
        patient: prepared.id().to_string(),
        beta0,
        initial_value: res.iterate_trace[0].value,
        result: res,
    };
    w.write("trace.csv", trace_csv(&est.result.iterate_trace, None))?;
    w.write_json("estimate.json", &est)?;
    rec.results = json!({
        "beta": est.result.best_point,
        "value": est.result.best_value,
        "initial_value": est.initial_value,
        "reduction": est.initial_value / est.result.best_value,
        "stop_reason": est.result.stop_reason,
    });
    Ok(())
}

fn subset_size(ctx: &Ctx, requested: Option<usize>, available: usize) -> Result<usize, CliError> {
    let n = requested.unwrap_or(ctx.config.multi.subset);
    if n == 0 || n > available {
        return Err(CliError::Config(format!("subset {n} out of range 1..={available}")));
    }
    Ok(n)
}

pub fn invert_multi(ctx: &Ctx, args: &InvertMultiArgs, w: &mut BundleWriter, rec: &mut Record) -> Result<(), CliError> {
    let targets = load_targets(ctx, &args.targets, rec)?;
    let n = subset_size(ctx, args.subset, targets.records.len())?;
    let model = ctx.model()?;
    let patients = prepare(&model, &targets.records[..n])?;
    let cfg = multi_cost_config(ctx, &patients, ctx.config.multi.bounds);
    let init = args.init.unwrap_or(ctx.config.multi.init);
    let res = identify_multi(&model, &patients, init, &cfg, &ctx.config.multi.powell)?;
    stop_check(&res, "Powell", rec);
    let b = targets.beta_star;
    let err = [(res.best_point[0] - b[0]).abs(), (res.best_point[1] - b[1]).abs()];
    w.write("trace.csv", trace_csv(&res.iterate_trace, Some(b)))?;
    let est = MultiEstimate {
        patients: patients.iter().map(|p| p.id().to_string()).collect(),
        beta_star: b,
        init,
        weights: cfg.weights,
        result: res,
    };
    w.write_json("estimate.json", &est)?;
    rec.results = json!({
        "beta": est.result.best_point,
        "value": est.result.best_value,
        "abs_error": err,
        "n_evals": est.result.n_evals,
        "stop_reason": est.result.stop_reason,
    });
    Ok(())
}

pub fn grid(ctx: &Ctx, args: &GridArgs, w: &mut BundleWriter, rec: &mut Record) -> Result<(), CliError> {
    let model = ctx.model()?;
    let (records, excluded) = match (&args.targets, &args.cohort) {
        (Some(t), None) => {
            let mut t = load_targets(ctx, t, rec)?;
            let n = subset_size(ctx, args.subset, t.records.len())?;
            t.records.truncate(n);
            (t.records, t.excluded)
        }
        (None, Some(c)) => calibrated_cohort(&model, c, rec)?,
        _ => return Err(CliError::Config("grid needs exactly one of --targets or --cohort".into())),
    };
    let patients = prepare(&model, &records)?;
    let (box_, n) = if args.clinical {
        (args.box_.unwrap_or(ctx.config.clinical.coarse_box), args.n.unwrap_or(ctx.config.clinical.coarse_n))
    } else {
        (args.box_.unwrap_or(ctx.config.grid.box_), args.n.unwrap_or(ctx.config.grid.n))
    };
    let bounds = if args.clinical { ctx.config.clinical.coarse_box } else { ctx.config.multi.bounds };
    let cfg = multi_cost_config(ctx, &patients, bounds);
    let coarse = landscape_scan(&model, &patients, box_, n, n, &cfg)?;
    w.write("landscape.csv", landscape_csv(&coarse))?;
    let mut doc = json!({
        "patients": patients.iter().map(|p| p.id()).collect::<Vec<_>>(),
        "excluded": excluded,
        "weights": cfg.weights,
        "coarse": GridSummary::of(&coarse),
    });
    if let Some(rb) = args.refine {
        let rn = args.refine_n.unwrap_or(ctx.config.clinical.refine_n);
        let refined = landscape_scan(&model, &patients, rb, rn, rn, &cfg)?;
        w.write("landscape_refined.csv", landscape_csv(&refined))?;
        doc["refined"] = serde_json::to_value(GridSummary::of(&refined)).expect("summary serializes");
    }
    w.write_json("grid.json", &doc)?;
    rec.results = json!({ "argmin": coarse.argmin, "min_value": coarse.min_value });
    Ok(())
}

pub fn noise(ctx: &Ctx, args: &TargetsArgs, w: &mut BundleWriter, rec: &mut Record) -> Result<(), CliError> {
    let targets = load_targets(ctx, &args.targets, rec)?;
    let model = ctx.model()?;
    let c = &ctx.config.noise;
    let opts = NoiseStudyOptions {
        sigmas: c.sigmas.clone(),
        seed: c.seed,
        clip_factor: c.clip_factor,
        subcohort_size: c.subcohort_size,
        n_subcohorts: c.n_subcohorts,
        init: ctx.config.multi.init,
        bounds: ctx.config.multi.bounds,
        powell: c.powell,
    };
    let reports = noise_study(&model, &targets.records, targets.beta_star, &opts)?;
    let mut csv = String::from("sigma,group,d_ca,d_ci,rel_err_ca,rel_err_ci,J,n_evals,converged\n");
    let mut summary = Vec::new();
    for r in &reports {
        let groups = r.subcohorts.iter().enumerate().map(|(k, e)| (format!("sub{}", k + 1), e));
        for (name, e) in groups.chain(std::iter::once(("full".to_string(), &r.full))) {
            csv.push_str(&format!(
                "{},{name},{},{},{},{},{},{},{}\n",
                r.sigma, e.beta[0], e.beta[1], e.relative_error[0], e.relative_error[1], e.value, e.n_evals, e.converged
            ));
            if !e.converged {
                rec.not_converged = Some(format!("Powell did not converge for {name} at sigma {}", r.sigma));
            }
        }
        let max_err = r
            .subcohorts
            .iter()
            .flat_map(|e| e.relative_error)
            .fold(0.0f64, f64::max);
        summary.push(json!({ "sigma": r.sigma, "max_subcohort_rel_error": max_err, "full": r.full.beta }));
    }
    w.write("noise_estimates.csv", csv)?;
    w.write_json("noise.json", &reports)?;
    rec.seeds.insert("noise".into(), c.seed);
    rec.results = serde_json::Value::Array(summary);
    Ok(())
}

pub fn sensitivity(ctx: &Ctx, args: &TargetsArgs, w: &mut BundleWriter, rec: &mut Record) -> Result<(), CliError> {
    let targets = load_targets(ctx, &args.targets, rec)?;
    let model = ctx.model()?;
    let c = &ctx.config.sensitivity;
    let levels = sensitivity_study(&model, &targets.records, targets.beta_star, &c.sigmas, c.seed, c.clip_factor)?;
    let mut csv = String::from("sigma,patient,d_ca,d_ci,err_ca,err_alb,err_ca_alb,err_cit,err_ca_cit,mean\n");
    for l in &levels {
        for p in &l.patients {
            csv.push_str(&format!("{},{},{},{}", l.sigma, p.id, p.beta[0], p.beta[1]));
            for e in p.relative_error {
                csv.push_str(&format!(",{e}"));
            }
            csv.push_str(&format!(",{}\n", p.mean_error));
        }
    }
    w.write("sensitivity.csv", csv)?;
    w.write_json("sensitivity.json", &levels)?;
    rec.seeds.insert("sensitivity".into(), c.seed);
    rec.results = serde_json::Value::Array(
        levels
            .iter()
            .map(|l| json!({ "sigma": l.sigma, "cohort_mean": l.cohort_mean, "cohort_max": l.cohort_max, "species_mean": l.species_mean }))
            .collect(),
    );
    Ok(())
}

pub fn clinical(ctx: &Ctx, args: &ClinicalArgs, w: &mut BundleWriter, rec: &mut Record) -> Result<(), CliError> {
    let model = ctx.model()?;
    let (records, excluded) = calibrated_cohort(&model, &args.cohort, rec)?;
    let patients = prepare(&model, &records)?;
    let c = &ctx.config.clinical;
    let cfg = multi_cost_config(ctx, &patients, c.coarse_box);
    let opts = ClinicalOptions {
        coarse_box: c.coarse_box,
        coarse_n: c.coarse_n,
        refine_box: args.refine.or(c.refine_box),
        refine_n: c.refine_n,
        powell: c.powell,
    };
    let report = clinical_workflow(&model, &patients, &cfg, &opts)?;
    stop_check(&report.powell, "Powell", rec);
    w.write("landscape_coarse.csv", landscape_csv(&report.coarse))?;
    w.write("landscape_refined.csv", landscape_csv(&report.refined))?;
    w.write("trace.csv", trace_csv(&report.powell.iterate_trace, None))?;
    let file = ClinicalFile {
        patients: patients.iter().map(|p| p.id().to_string()).collect(),
        excluded,
        weights: cfg.weights,
        coarse: GridSummary::of(&report.coarse),
        refined: GridSummary::of(&report.refined),
        powell: report.powell,
    };
    w.write_json("clinical.json", &file)?;
    rec.results = json!({
        "beta": file.powell.best_point,
        "value": file.powell.best_value,
        "patients": file.patients.len(),
        "excluded": file.excluded.len(),
    });
    Ok(())
}

pub(crate) fn absolutize(p: &mut PathBuf) -> Result<(), CliError> {
    *p = absolute(p)?;
    Ok(())
}
