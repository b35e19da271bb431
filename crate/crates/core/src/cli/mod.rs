//! The `dcshield` command line.
//!
//! Exit status: 0 on success, 1 on any other failure, 2 on a usage error,
//! 3 when the safety target is infeasible and 4 when a shield, environment
//! or product digest does not match what it is paired with.
//!
//! Environments are named either by a built-in kind (`gridworld`,
//! `car-following`) or by the metadata file `build-env` writes. Links are
//! given by exactly one of `--delay-model FILE`, `--constant TAU` or
//! `--mostly-zero TAU`. Every subcommand that writes files also writes a
//! [`RunManifest`] beside its first output (or to `--manifest`).

mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::dcmdp::{build_constant_delay_with, build_random_delay_with, BuildOptions, DcMdp, Link, Seeds};
use crate::delay::{estimate_from_traces, DelayModel, EstimateOptions, LatencyTrace, DEFAULT_BIN_WIDTH_MS};
use crate::envs::{build_car_following, build_gridworld, CarFollowConfig, Env, EnvKind, GridworldConfig};
use crate::mdp::format::{read_mdp, read_policy, write_mdp, write_policy};
use crate::mdp::{
    compute_q, compute_safety_values, expected_initial_value, satisfaction_values, BasicMdp, Model, Objective,
    Policy, SolveOptions, ValueMode,
};
use crate::shield::{
    load_shield, save_shield, synthesize, FallbackChoice, ShieldError, SynthesisMode, SynthesisOptions,
};
use crate::sim::{aggregate_log, run_batch, BatchOptions, RuntimeFallback, ShieldBinding, SimError, SimSetup};
use crate::teleop::{Catalog, Channel, TeleopServer};

pub use manifest::{beside, FileDigest, RunManifest};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("infeasible: delta {delta} exceeds the feasibility bound E_init[V^max] = {bound}")]
    Infeasible { delta: f64, bound: f64 },
    #[error("digest mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Infeasible { .. } => EXIT_INFEASIBLE,
            CliError::Mismatch(_) => EXIT_MISMATCH,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

impl From<ShieldError> for CliError {
    fn from(e: ShieldError) -> Self {
        match e {
            ShieldError::Infeasible { delta, bound } => CliError::Infeasible { delta, bound },
            ShieldError::DigestMismatch { .. } | ShieldError::StateCountMismatch { .. } => {
                CliError::Mismatch(e.to_string())
            }
            ShieldError::BadDelta(_) | ShieldError::BadEta(_) | ShieldError::BadEpsilon(_) => {
                CliError::Usage(e.to_string())
            }
            other => failed(other),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Mismatch(_) => CliError::Mismatch(e.to_string()),
            other => failed(other),
        }
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "dcshield", version, about = "Shield synthesis for control over delayed links")]
pub struct Cli {
    /// Print results as one JSON object instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Where to write the run manifest (default: beside the first output).
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a benchmark environment: MDP file, metadata and controller.
    BuildEnv(BuildEnvArgs),
    /// Estimate a delay transition matrix from latency traces.
    EstimateDelayModel(EstimateArgs),
    /// Build the delayed-communication product of an environment and link.
    BuildDcmdp(BuildDcmdpArgs),
    /// Model-check an MDP or product and print the initial value.
    Verify(VerifyArgs),
    /// Synthesize the smallest-ε shield meeting a safety target.
    SynthesizeShield(SynthesizeArgs),
    /// Run closed-loop episodes and log every tick.
    Simulate(SimulateArgs),
    /// Serve shielded teleoperation sessions over TCP.
    Serve(ServeArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildEnv(_) => "build-env",
            Command::EstimateDelayModel(_) => "estimate-delay-model",
            Command::BuildDcmdp(_) => "build-dcmdp",
            Command::Verify(_) => "verify",
            Command::SynthesizeShield(_) => "synthesize-shield",
            Command::Simulate(_) => "simulate",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedsArg {
    /// Enumerate from every base state (the default; matches published counts).
    All,
    /// Enumerate from the initial distribution's support only.
    Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Max,
    Min,
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Safety,
    ReachAvoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackArg {
    Safest,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthModeArg {
    WithPolicy,
    PolicyFree,
}

#[derive(Debug, Args, Serialize)]
pub struct LinkArgs {
    /// Delay transition matrix file.
    #[arg(long, value_name = "FILE")]
    pub delay_model: Option<PathBuf>,
    /// Constant delay of TAU steps.
    #[arg(long, value_name = "TAU")]
    pub constant: Option<usize>,
    /// Random delay up to TAU that mostly stays at zero (10% up, 10% hold).
    #[arg(long, value_name = "TAU")]
    pub mostly_zero: Option<usize>,
    /// Where product enumeration starts.
    #[arg(long, value_enum, default_value_t = SeedsArg::All)]
    pub seeds: SeedsArg,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildEnvArgs {
    /// gridworld or car-following.
    #[arg(long)]
    pub env: EnvKind,
    /// JSON configuration overriding the defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    /// CSV trace with `timestamp_ms,delay_ms` columns; repeatable.
    #[arg(long = "trace", value_name = "FILE", required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH_MS)]
    pub bin_width_ms: u64,
    /// Largest delay bin (default: the largest observed).
    #[arg(long)]
    pub tau_max: Option<usize>,
    /// Additive smoothing over the allowed cells of each row.
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildDcmdpArgs {
    /// Built-in env name or metadata file.
    #[arg(long)]
    pub env: String,
    #[command(flatten)]
    pub link: LinkArgs,
    /// Write the product as an MDP file.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Write the index -> (state, buffer, delay) mapping.
    #[arg(long, value_name = "FILE")]
    pub mapping: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    /// Verify a plain MDP file instead of an environment.
    #[arg(long, value_name = "FILE", conflicts_with = "env")]
    pub mdp: Option<PathBuf>,
    /// Built-in env name or metadata file; with no link, the delay-free MDP.
    #[arg(long)]
    pub env: Option<String>,
    #[command(flatten)]
    pub link: LinkArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Max)]
    pub mode: ModeArg,
    /// Defaults to the environment's objective, or safety for MDP files.
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Policy file for `--mode policy` (default: the env's controller).
    #[arg(long, value_name = "FILE")]
    pub policy: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub env: String,
    #[command(flatten)]
    pub link: LinkArgs,
    /// Required safety probability.
    #[arg(long)]
    pub delta: f64,
    /// ε grid step.
    #[arg(long, default_value_t = crate::shield::DEFAULT_ETA)]
    pub eta: f64,
    #[arg(long, value_enum, default_value_t = SynthModeArg::WithPolicy)]
    pub mode: SynthModeArg,
    /// Controller over base states (default: the env's controller).
    #[arg(long, value_name = "FILE")]
    pub policy: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FallbackArg::Safest)]
    pub fallback: FallbackArg,
    /// Bisect below the chosen grid point.
    #[arg(long)]
    pub refine: bool,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub env: String,
    #[command(flatten)]
    pub link: LinkArgs,
    /// Controller over base states (default: the env's controller).
    #[arg(long, value_name = "FILE")]
    pub controller: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub shield: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FallbackArg::Safest)]
    pub fallback: FallbackArg,
    #[arg(long, default_value_t = 1000)]
    pub episodes: u64,
    /// Episode i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to the environment's horizon.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Log only episode summaries, not every tick.
    #[arg(long)]
    pub summaries_only: bool,
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// `ID=NAME_OR_METADATA_FILE`; repeatable.
    #[arg(long = "env", value_name = "ID=ENV", required = true)]
    pub envs: Vec<String>,
    /// `ID=constant:TAU`, `ID=mostly-zero:TAU` or `ID=MODEL_FILE`; repeatable.
    #[arg(long = "channel", value_name = "ID=SPEC", required = true)]
    pub channels: Vec<String>,
    /// `ID=SHIELD_FILE`; repeatable.
    #[arg(long = "shield", value_name = "ID=FILE", required = true)]
    pub shields: Vec<String>,
    /// How session products are enumerated; must match the shields.
    #[arg(long, value_enum, default_value_t = SeedsArg::All)]
    pub seeds: SeedsArg,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let start = Instant::now();
    let mut ctx = Ctx { inputs: Vec::new(), outputs: Vec::new(), results: serde_json::Map::new() };
    match &cli.command {
        Command::BuildEnv(a) => build_env(a, &mut ctx)?,
        Command::EstimateDelayModel(a) => estimate(a, &mut ctx)?,
        Command::BuildDcmdp(a) => build_dcmdp(a, &mut ctx)?,
        Command::Verify(a) => verify(a, &mut ctx)?,
        Command::SynthesizeShield(a) => synthesize_shield(a, &mut ctx)?,
        Command::Simulate(a) => simulate(a, &mut ctx)?,
        Command::Serve(a) => return serve(a),
    }
    let results = Value::Object(ctx.results);
    if cli.json {
        println!("{results}");
    } else {
        for (k, v) in results.as_object().expect("object") {
            match v {
                Value::String(s) => println!("{k}: {s}"),
                other => println!("{k}: {other}"),
            }
        }
    }
    let target = cli.manifest.clone().or_else(|| ctx.outputs.first().map(|p| beside(p)));
    if let Some(path) = target {
        let parameters = serde_json::to_value(&cli.command).map_err(failed)?;
        let parameters = parameters.as_object().and_then(|o| o.values().next().cloned()).unwrap_or(parameters);
        let manifest =
            RunManifest::new(cli.command.name(), &ctx.inputs, parameters, &ctx.outputs, results, start.elapsed())
                .map_err(failed)?;
        manifest.write(&path).map_err(failed)?;
    }
    Ok(())
}

struct Ctx {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    results: serde_json::Map<String, Value>,
}

impl Ctx {
    fn put(&mut self, key: &str, value: impl Serialize) {
        self.results.insert(key.into(), serde_json::to_value(value).expect("serializable result"));
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| failed(format!("{}: {e}", dir.display())))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| failed(format!("{}: {e}", path.display())))?))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    Ok(BufReader::new(File::open(path).map_err(|e| failed(format!("{}: {e}", path.display())))?))
}

/// A built-in env name or a metadata file whose rebuilt MDP must match
/// the digest it records.
fn load_env(spec: &str, ctx: &mut Ctx) -> Result<Env, CliError> {
    let path = Path::new(spec);
    if path.is_file() {
        let meta = Env::read_meta(path).map_err(failed)?;
        let env = Env::from_meta(&meta).map_err(failed)?;
        if env.meta.mdp_digest != meta.mdp_digest {
            return Err(CliError::Mismatch(format!(
                "{} records MDP digest {} but its configuration builds {}",
                path.display(),
                meta.mdp_digest,
                env.meta.mdp_digest
            )));
        }
        ctx.inputs.push(path.to_path_buf());
        // the stored controller wins over the rebuilt one
        return Ok(Env { meta, ..env });
    }
    let kind: EnvKind =
        spec.parse().map_err(|_| CliError::Usage(format!("'{spec}' is neither a built-in env nor a file")))?;
    Env::build(kind).map_err(failed)
}

fn load_link(args: &LinkArgs, env: &Env, ctx: &mut Ctx) -> Result<Option<Link>, CliError> {
    let given = [args.delay_model.is_some(), args.constant.is_some(), args.mostly_zero.is_some()];
    match given.iter().filter(|g| **g).count() {
        0 => return Ok(None),
        1 => {}
        _ => return Err(CliError::Usage("give at most one of --delay-model, --constant, --mostly-zero".into())),
    }
    if let Some(path) = &args.delay_model {
        let model = DelayModel::read(open(path)?).map_err(failed)?;
        ctx.inputs.push(path.clone());
        return Ok(Some(Link::Random(model)));
    }
    if let Some(tau) = args.constant {
        return Ok(Some(Link::Constant { tau, safe_action: env.meta.safe_action }));
    }
    let tau = args.mostly_zero.expect("counted");
    Ok(Some(Link::Random(DelayModel::mostly_zero(tau, 0.1, 0.1).map_err(failed)?)))
}

fn require_link(args: &LinkArgs, env: &Env, ctx: &mut Ctx) -> Result<Link, CliError> {
    load_link(args, env, ctx)?
        .ok_or_else(|| CliError::Usage("one of --delay-model, --constant or --mostly-zero is required".into()))
}

fn seeds_of(arg: SeedsArg) -> Seeds {
    match arg {
        SeedsArg::All => Seeds::AllStates,
        SeedsArg::Init => Seeds::InitSupport,
    }
}

fn build_product(env: &Env, link: &Link, seeds: SeedsArg) -> Result<DcMdp, CliError> {
    let opts = BuildOptions { seeds: seeds_of(seeds) };
    match link {
        Link::Random(m) => build_random_delay_with(&env.mdp, m, &opts),
        Link::Constant { tau, safe_action } => build_constant_delay_with(&env.mdp, *tau, *safe_action, &opts),
    }
    .map_err(failed)
}

fn load_policy(path: &Path, model: &BasicMdp, ctx: &mut Ctx) -> Result<Policy, CliError> {
    let actions = read_policy(open(path)?).map_err(failed)?;
    ctx.inputs.push(path.to_path_buf());
    Policy::new(model, actions).map_err(failed)
}

fn build_env(a: &BuildEnvArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let env = match (a.env, &a.config) {
        (EnvKind::Gridworld, Some(p)) => {
            ctx.inputs.push(p.clone());
            let cfg: GridworldConfig = serde_json::from_reader(open(p)?).map_err(failed)?;
            build_gridworld(&cfg)
        }
        (EnvKind::CarFollowing, Some(p)) => {
            ctx.inputs.push(p.clone());
            let cfg: CarFollowConfig = serde_json::from_reader(open(p)?).map_err(failed)?;
            build_car_following(&cfg)
        }
        (kind, None) => Env::build(kind),
    }
    .map_err(failed)?;
    let mdp_path = a.out_dir.join("env.mdp");
    let meta_path = a.out_dir.join("env.meta.json");
    let policy_path = a.out_dir.join("controller.txt");
    let mut out = create(&mdp_path)?;
    write_mdp(&env.mdp, &mut out).and_then(|_| out.flush()).map_err(failed)?;
    env.write_meta(&meta_path).map_err(failed)?;
    let mut out = create(&policy_path)?;
    write_policy(&env.controller(), &mut out).and_then(|_| out.flush()).map_err(failed)?;
    ctx.outputs.extend([mdp_path, meta_path, policy_path]);
    ctx.put("env", env.kind());
    ctx.put("states", env.mdp.state_count());
    ctx.put("actions", env.mdp.action_count());
    ctx.put("mdp_digest", &env.meta.mdp_digest);
    Ok(())
}

fn estimate(a: &EstimateArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let mut traces = Vec::new();
    for path in &a.traces {
        traces.push(LatencyTrace::read_csv(open(path)?).map_err(|e| failed(format!("{}: {e}", path.display())))?);
        ctx.inputs.push(path.clone());
    }
    let opts = EstimateOptions { bin_width_ms: a.bin_width_ms, tau_max: a.tau_max, smoothing: a.smoothing };
    let est = estimate_from_traces(&traces, &opts).map_err(failed)?;
    let mut out = create(&a.out)?;
    est.model.write(&mut out).and_then(|_| out.flush()).map_err(failed)?;
    ctx.outputs.push(a.out.clone());
    ctx.put("tau_max", est.model.tau_max());
    ctx.put("transitions", est.transitions);
    ctx.put("clamped", est.clamped);
    ctx.put("fallback_rows", &est.fallback_rows);
    ctx.put("matrix", est.model.matrix());
    Ok(())
}

fn build_dcmdp(a: &BuildDcmdpArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let env = load_env(&a.env, ctx)?;
    let link = require_link(&a.link, &env, ctx)?;
    let dc = build_product(&env, &link, a.link.seeds)?;
    if let Some(path) = &a.out {
        let mdp = dc.to_basic_mdp().map_err(failed)?;
        let mut out = create(path)?;
        write_mdp(&mdp, &mut out).and_then(|_| out.flush()).map_err(failed)?;
        ctx.outputs.push(path.clone());
    }
    if let Some(path) = &a.mapping {
        let mut out = create(path)?;
        dc.write_mapping(&mut out).and_then(|_| out.flush()).map_err(failed)?;
        ctx.outputs.push(path.clone());
    }
    ctx.put("states", dc.state_count());
    ctx.put("tau_max", dc.tau_max());
    ctx.put("digest", dc.digest());
    Ok(())
}

fn value_mode(m: ModeArg) -> ValueMode {
    match m {
        ModeArg::Max => ValueMode::Max,
        ModeArg::Min => ValueMode::Min,
        ModeArg::Policy => ValueMode::Policy,
    }
}

fn verify(a: &VerifyArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let opts = SolveOptions { tol: a.tol, ..Default::default() };
    let mode = value_mode(a.mode);
    let objective = |default: Objective| match a.objective {
        Some(ObjectiveArg::Safety) => Objective::Safety,
        Some(ObjectiveArg::ReachAvoid) => Objective::ReachAvoid,
        None => default,
    };
    let (values, init, states) = match (&a.mdp, &a.env) {
        (Some(path), _) => {
            let mdp = read_mdp(open(path)?).map_err(|e| failed(format!("{}: {e}", path.display())))?;
            ctx.inputs.push(path.clone());
            let policy = match (a.mode, &a.policy) {
                (ModeArg::Policy, Some(p)) => Some(load_policy(p, &mdp, ctx)?),
                (ModeArg::Policy, None) => return Err(CliError::Usage("--mode policy needs --policy".into())),
                _ => None,
            };
            let v = satisfaction_values(&mdp, objective(Objective::Safety), mode, policy.as_ref(), &opts)
                .map_err(failed)?;
            (v, mdp.init().to_vec(), mdp.state_count())
        }
        (None, Some(spec)) => {
            let env = load_env(spec, ctx)?;
            let base_policy = match &a.policy {
                Some(p) => load_policy(p, &env.mdp, ctx)?,
                None => env.controller(),
            };
            let policy_mode = a.mode == ModeArg::Policy;
            let objective = objective(env.meta.objective);
            match load_link(&a.link, &env, ctx)? {
                None => {
                    let policy = policy_mode.then_some(&base_policy);
                    let v = satisfaction_values(&env.mdp, objective, mode, policy, &opts).map_err(failed)?;
                    (v, env.mdp.init().to_vec(), env.mdp.state_count())
                }
                Some(link) => {
                    let dc = build_product(&env, &link, a.link.seeds)?;
                    let lifted = if policy_mode { Some(dc.lift_policy(&base_policy).map_err(failed)?) } else { None };
                    let v = satisfaction_values(&dc, objective, mode, lifted.as_ref(), &opts).map_err(failed)?;
                    ctx.put("product_digest", dc.digest());
                    (v, dc.init().to_vec(), dc.state_count())
                }
            }
        }
        (None, None) => return Err(CliError::Usage("give --mdp FILE or --env ENV".into())),
    };
    ctx.put("states", states);
    ctx.put("mode", format!("{:?}", mode).to_lowercase());
    ctx.put("initial_value", expected_initial_value(&values.values, &init));
    ctx.put("iterations", values.iterations);
    ctx.put("residual", values.residual);
    Ok(())
}

fn synthesize_shield(a: &SynthesizeArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let env = load_env(&a.env, ctx)?;
    let link = require_link(&a.link, &env, ctx)?;
    let dc = build_product(&env, &link, a.link.seeds)?;
    let mode = match a.mode {
        SynthModeArg::WithPolicy => SynthesisMode::WithPolicy,
        SynthModeArg::PolicyFree => SynthesisMode::PolicyFree,
    };
    let lifted = match (mode, &a.policy) {
        (SynthesisMode::WithPolicy, p) => {
            let base = match p {
                Some(p) => load_policy(p, &env.mdp, ctx)?,
                None => env.controller(),
            };
            Some(dc.lift_policy(&base).map_err(failed)?)
        }
        (SynthesisMode::PolicyFree, Some(_)) => {
            return Err(CliError::Usage("--policy only applies to --mode with-policy".into()))
        }
        (SynthesisMode::PolicyFree, None) => None,
    };
    let fallback = match a.fallback {
        FallbackArg::Safest => FallbackChoice::Safest,
        FallbackArg::Nearest => FallbackChoice::Nearest(env.meta.metric.clone()),
    };
    let opts = SynthesisOptions { eta: a.eta, fallback, refine: a.refine, ..Default::default() };
    let result = synthesize(&dc, lifted.as_ref(), a.delta, mode, &opts)?;
    save_shield(&result.shield, &a.out)?;
    ctx.outputs.push(a.out.clone());
    ctx.put("states", dc.state_count());
    ctx.put("product_digest", dc.digest());
    ctx.put("epsilon_star", result.epsilon_star);
    ctx.put("certified", result.achieved);
    ctx.put("bound", result.bound);
    ctx.put("shield_size", result.shield.size());
    ctx.put("grid_points", result.sweep_log.len());
    Ok(())
}

fn simulate(a: &SimulateArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    if a.episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let env = Arc::new(load_env(&a.env, ctx)?);
    let link = load_link(&a.link, &env, ctx)?.unwrap_or(Link::Constant { tau: 0, safe_action: env.meta.safe_action });
    let controller = match &a.controller {
        Some(p) => load_policy(p, &env.mdp, ctx)?,
        None => env.controller(),
    };
    let horizon = a.horizon.unwrap_or(env.meta.horizon);
    let mut setup = SimSetup::new(env.clone(), link.clone(), horizon)?;
    if let Some(path) = &a.shield {
        let dc = build_product(&env, &link, a.link.seeds)?;
        let shield = load_shield(path, &dc)?;
        ctx.inputs.push(path.clone());
        let fallback = match a.fallback {
            FallbackArg::Nearest => RuntimeFallback::Nearest,
            FallbackArg::Safest => {
                let v = compute_safety_values(&dc, ValueMode::Max, None, &SolveOptions::default()).map_err(failed)?;
                RuntimeFallback::Safest(Arc::new(compute_q(&dc, &v)))
            }
        };
        setup = setup
            .with_product(Arc::new(dc))?
            .with_shield(ShieldBinding { shield: Arc::new(shield), fallback })?;
    }
    let opts = BatchOptions { episodes: a.episodes, seed_base: a.seed, log_ticks: !a.summaries_only };
    let mut log = create(&a.log)?;
    run_batch(&setup, &controller, &opts, Some(&mut log))?;
    log.flush().map_err(failed)?;
    drop(log);
    ctx.outputs.push(a.log.clone());
    let report = aggregate_log(&a.log)?;
    ctx.put("episodes", report.episodes);
    ctx.put("outcomes", &report.outcomes);
    ctx.put("safety_rate", report.safety_rate);
    ctx.put("safety_interval", [report.safety_interval.lo, report.safety_interval.hi]);
    ctx.put("mean_separation", report.mean_separation.mean);
    ctx.put("min_separation", report.min_separation.mean);
    ctx.put("interventions", report.interventions.mean);
    Ok(())
}

fn split_id(spec: &str) -> Result<(&str, &str), CliError> {
    spec.split_once('=')
        .filter(|(id, rest)| !id.is_empty() && !rest.is_empty())
        .ok_or_else(|| CliError::Usage(format!("expected ID=VALUE, got '{spec}'")))
}

/// Parses a `serve` channel spec.
pub fn parse_channel(spec: &str) -> Result<Channel, CliError> {
    let number = |s: &str| s.parse::<usize>().map_err(|_| CliError::Usage(format!("bad delay '{s}'")));
    if let Some(t) = spec.strip_prefix("constant:") {
        return Ok(Channel::Constant { tau: number(t)? });
    }
    if let Some(t) = spec.strip_prefix("mostly-zero:") {
        return Ok(Channel::Random(DelayModel::mostly_zero(number(t)?, 0.1, 0.1).map_err(failed)?));
    }
    Ok(Channel::Random(DelayModel::read(open(Path::new(spec))?).map_err(failed)?))
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let mut catalog = Catalog::new();
    catalog.set_seeds(seeds_of(a.seeds));
    let mut scratch = Ctx { inputs: Vec::new(), outputs: Vec::new(), results: serde_json::Map::new() };
    for spec in &a.envs {
        let (id, env) = split_id(spec)?;
        catalog.add_env(id, load_env(env, &mut scratch)?);
    }
    for spec in &a.channels {
        let (id, channel) = split_id(spec)?;
        catalog.add_channel(id, parse_channel(channel)?);
    }
    for spec in &a.shields {
        let (id, path) = split_id(spec)?;
        let shield = crate::shield::read_shield(open(Path::new(path))?)?;
        catalog.add_shield(id, shield);
    }
    let server = TeleopServer::bind(&a.addr, Arc::new(catalog)).map_err(failed)?;
    eprintln!("listening on {}", server.local_addr().map_err(failed)?);
    server.run().map_err(failed)
}
