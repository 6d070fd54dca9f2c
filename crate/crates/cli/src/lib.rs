//! Command-line pipeline around `dialyzer-core`.
//!
//! Exit codes: 0 success, 1 solver or optimizer non-convergence, 2 config or
//! parse error, 3 bundle mismatch, 4 incomplete bundle.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dialyzer_core::mesh::Resolution;
use dialyzer_core::profile::Profile;
use serde::{Deserialize, Serialize};

use crate::bundle::{config_hash, read_manifest, verify_inputs, verify_outputs, BundleWriter, Manifest, FORMAT_VERSION, MANIFEST};
use crate::commands::{
    absolutize, ClinicalArgs, Ctx, ForwardArgs, GridArgs, InvertMultiArgs, InvertSingleArgs, Record, SynthArgs,
    TargetsArgs,
};
use crate::config::{absolute, parse_mesh, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "dialyzer", version, about = "Hollow-fiber dialyzer model: forward runs, cohorts and coefficient identification")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Mesh: `default`, `study` or `nx,nr_blood,nr_membrane,nr_dialysate`.
    #[arg(long, global = true, value_parser = parse_mesh)]
    pub mesh: Option<Resolution>,
    /// Maximum number of concurrent forward solves.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Solve one patient at given coefficients.
    Forward(ForwardArgs),
    /// Synthesize a cohort and its exact targets at the reference coefficients.
    Synth(SynthArgs),
    /// Fit one patient by projected gradient.
    InvertSingle(InvertSingleArgs),
    /// Fit a cohort subset by Powell's method.
    InvertMulti(InvertMultiArgs),
    /// Scan the multi-patient functional on a grid.
    Grid(GridArgs),
    /// Invert noisy targets on disjoint sub-cohorts.
    NoiseStudy(TargetsArgs),
    /// Output deviations under perturbed coefficients.
    Sensitivity(TargetsArgs),
    /// Coarse grid, localized grid, then Powell, on measured data.
    Clinical(ClinicalArgs),
    /// Plot-ready CSVs and a summary of a bundle.
    Report(BundleArgs),
    /// Re-execute a bundle from its manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleArgs {
    pub bundle: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerunArgs {
    pub bundle: PathBuf,
    /// Fail with the mismatch code unless every file comes out identical.
    #[arg(long)]
    pub check: bool,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Forward(_) => "forward",
            Command::Synth(_) => "synth",
            Command::InvertSingle(_) => "invert-single",
            Command::InvertMulti(_) => "invert-multi",
            Command::Grid(_) => "grid",
            Command::NoiseStudy(_) => "noise-study",
            Command::Sensitivity(_) => "sensitivity",
            Command::Clinical(_) => "clinical",
            Command::Report(_) => "report",
            Command::Rerun(_) => "rerun",
        }
    }

    /// Makes path arguments absolute so the manifest can be replayed from
    /// any working directory.
    fn absolutize(&mut self) -> Result<(), CliError> {
        match self {
            Command::Forward(a) => absolutize(&mut a.patient),
            Command::Synth(a) => a.source.as_mut().map_or(Ok(()), absolutize),
            Command::InvertSingle(a) => absolutize(&mut a.patient),
            Command::InvertMulti(a) => absolutize(&mut a.targets),
            Command::Grid(a) => {
                a.targets.as_mut().map_or(Ok(()), absolutize)?;
                a.cohort.as_mut().map_or(Ok(()), absolutize)
            }
            Command::NoiseStudy(a) | Command::Sensitivity(a) => absolutize(&mut a.targets),
            Command::Clinical(a) => absolutize(&mut a.cohort),
            Command::Report(a) => absolutize(&mut a.bundle),
            Command::Rerun(a) => absolutize(&mut a.bundle),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Failure(e.to_string()))?;
    }
    let mut command = cli.command;
    command.absolutize()?;
    match command {
        Command::Report(a) => {
            let out = match &cli.out {
                Some(o) => absolute(o)?,
                None => a.bundle.join("report"),
            };
            report::run(&a.bundle, &out)
        }
        Command::Rerun(a) => {
            let out = cli
                .out
                .as_deref()
                .ok_or_else(|| CliError::Config("rerun needs --out".into()))
                .and_then(absolute)?;
            rerun(&a.bundle, &out, a.check)
        }
        cmd => {
            let mut config = RunConfig::load(cli.config.as_deref())?;
            if let Some(m) = cli.mesh {
                config.mesh = m;
            }
            if let Some(o) = &cli.out {
                config.output_dir = absolute(o)?;
            }
            let profile = config.load_profile()?;
            execute(&cmd, config, profile)
        }
    }
}

/// Runs a pipeline command and writes its bundle under `config.output_dir`.
pub fn execute(cmd: &Command, config: RunConfig, profile: Profile) -> Result<(), CliError> {
    let out = config.output_dir.clone();
    let ctx = Ctx { config, profile };
    let mut w = BundleWriter::create(&out)?;
    let mut rec = Record::default();
    match cmd {
        Command::Forward(a) => commands::forward(&ctx, a, &mut w, &mut rec),
        Command::Synth(a) => commands::synth(&ctx, a, &mut w, &mut rec),
        Command::InvertSingle(a) => commands::invert_single(&ctx, a, &mut w, &mut rec),
        Command::InvertMulti(a) => commands::invert_multi(&ctx, a, &mut w, &mut rec),
        Command::Grid(a) => commands::grid(&ctx, a, &mut w, &mut rec),
        Command::NoiseStudy(a) => commands::noise(&ctx, a, &mut w, &mut rec),
        Command::Sensitivity(a) => commands::sensitivity(&ctx, a, &mut w, &mut rec),
        Command::Clinical(a) => commands::clinical(&ctx, a, &mut w, &mut rec),
        Command::Report(_) | Command::Rerun(_) => unreachable!("handled by run"),
    }?;
    let mut stored = ctx.config.clone();
    stored.output_dir = PathBuf::new();
    let invocation = serde_json::to_value(cmd).expect("command serializes");
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cmd.name().to_string(),
        config_hash: config_hash(&invocation, &stored, &ctx.profile),
        invocation,
        config: stored,
        profile_hash: ctx.profile.hash(),
        profile: ctx.profile,
        seeds: rec.seeds,
        inputs: rec.inputs,
        outputs: Vec::new(),
        results: rec.results,
    };
    w.finish(manifest)?;
    match rec.not_converged {
        Some(msg) => Err(CliError::NonConvergence(msg)),
        None => Ok(()),
    }
}

/// Replays a bundle into `out`; with `check`, every output and the manifest
/// must come out byte-identical.
pub fn rerun(bundle: &Path, out: &Path, check: bool) -> Result<(), CliError> {
    let m = read_manifest(bundle)?;
    verify_outputs(bundle, &m)?;
    verify_inputs(&m)?;
    if absolute(bundle)? == absolute(out)? {
        return Err(CliError::Config("rerun output must differ from the bundle directory".into()));
    }
    let cmd: Command = serde_json::from_value(m.invocation.clone())
        .map_err(|e| CliError::Mismatch(format!("{}: invocation: {e}", bundle.display())))?;
    let mut config = m.config.clone();
    config.output_dir = out.to_path_buf();
    let result = execute(&cmd, config, m.profile.clone());
    if let Err(e) = &result {
        if !matches!(e, CliError::NonConvergence(_)) {
            return result;
        }
    }
    if check {
        let mut differing = Vec::new();
        let names = m.outputs.iter().map(|o| o.path.as_str()).chain(std::iter::once(MANIFEST));
        for name in names {
            let a = std::fs::read(bundle.join(name)).ok();
            let b = std::fs::read(out.join(name)).ok();
            if a.is_none() || a != b {
                differing.push(name.to_string());
            }
        }
        if !differing.is_empty() {
            return Err(CliError::Mismatch(format!("rerun differs from {}: {}", bundle.display(), differing.join(", "))));
        }
    }
    result
}
