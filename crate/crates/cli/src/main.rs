//! Command-line front end for the online RL system.
//!
//! Three commands cover the daily workflow:
//!
//! * `simulate` runs a scripted experiment (persona chat or multi-step toy
//!   tasks) and writes a score-vs-updates CSV next to the run's records,
//! * `replay` audits a finished run's record stream and re-derives every
//!   recorded advantage from the recorded votes, hints, and archived
//!   snapshots, reporting any disagreement with its file and line,
//! * `repl` connects a human to a gateway: whatever you type next doubles
//!   as the previous turn's next-state signal, exactly like persona
//!   traffic, so live conversations feed the same training pipeline.
//!
//! Flags give quick overrides; a `--config` TOML file, when present, wins
//! over the flags, so a checked-in run config stays authoritative however
//! the command is invoked. The gateway API key comes from the
//! `NEXTSTATE_API_KEY` environment variable when set.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::thread;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use nextstate_core::orchestrator::{
    audit_sample_conservation, audit_version_monotonic, replay_advantages, run_experiment,
    Deployment, DeploymentConfig, ExperimentConfig, ExperimentSpec, OrchestratorError, Preset,
    RunSummary, StepwiseConfig, EXPERIMENT_API_KEY,
};
use nextstate_core::recorder::{RecordEvent, RecordKind};
use nextstate_core::types::{AdvantageMode, Message};
use nextstate_core::worlds::{client_agent, post_chat, run_persona_instance, Persona};
use nextstate_core::Vocabulary;

// ───────────────────────── errors ─────────────────────────

#[derive(Debug, Error)]
enum CliError {
    /// Bad flag combinations or an unusable config file.
    #[error("{0}")]
    Config(String),
    /// A record line that does not parse; names the file and 1-based line.
    #[error("parse error at {}:{line}: {detail}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        detail: String,
    },
    /// Record streams that parse but fail an audit.
    #[error("{0}")]
    Records(String),
    #[error("gateway: {0}")]
    Gateway(String),
    #[error(transparent)]
    Run(#[from] OrchestratorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    /// Usage and parse problems exit 2, everything else exits 1, matching
    /// the distinction between "you asked wrong" and "the run went wrong".
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) | CliError::Parse { .. } => ExitCode::from(2),
            _ => ExitCode::FAILURE,
        }
    }
}

// ───────────────────────── command line ─────────────────────────

/// Desk-scale online RL from next-state signals.
#[derive(Parser)]
#[command(name = "nextstate", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scripted experiment; writes scores.csv, summary.json, records.
    Simulate(SimulateArgs),
    /// Audit a run's records and re-derive every advantage from them.
    Replay(ReplayArgs),
    /// Chat with a gateway from the terminal; replies become reward signals.
    Repl(ReplArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Experiment preset: "personal" (persona chat) or "general" (toy tasks).
    #[arg(long, default_value = "personal")]
    preset: String,

    /// Reward route for the personal preset: binary, opd, or combined.
    /// The general preset is step-wise and takes no other route.
    #[arg(long)]
    mode: Option<String>,

    /// Run seeds, comma separated; one full run per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,

    /// Trainer updates per run (defaults: 16 personal, 50 general).
    #[arg(long)]
    steps: Option<u64>,

    /// Output directory; several seeds nest under seed-N subdirectories.
    #[arg(long, default_value = "runs/simulate")]
    out: PathBuf,

    /// Judge votes per turn.
    #[arg(long)]
    m_votes: Option<usize>,

    /// Weight on the binary advantage when both routes combine.
    #[arg(long)]
    w_binary: Option<f64>,

    /// Weight on the distillation advantage when both routes combine.
    #[arg(long)]
    w_opd: Option<f64>,

    /// TOML run config; values set in the file override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// A run directory (holding records/ and snapshots/), a records
    /// directory, or a single record .jsonl file.
    path: PathBuf,

    /// Snapshot directory (defaults to the run's snapshots/ sibling).
    #[arg(long)]
    snapshots: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplArgs {
    /// Gateway to connect to; omitted, a private deployment is started and
    /// its address printed.
    #[arg(long)]
    gateway_url: Option<String>,

    /// Bearer key for the gateway. NEXTSTATE_API_KEY overrides this flag;
    /// a config file overrides both.
    #[arg(long)]
    api_key: Option<String>,

    /// Session id the conversation runs under.
    #[arg(long, default_value = "repl")]
    session: String,

    /// Reward route when self-hosting: binary, opd, or combined.
    #[arg(long, default_value = "combined")]
    mode: String,

    /// Run seed when self-hosting.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Persona clients chatting alongside you, for background traffic.
    #[arg(long, default_value_t = 0)]
    shadow_clients: usize,

    /// Record directory when self-hosting (default: a temp directory).
    #[arg(long)]
    out: Option<PathBuf>,

    /// TOML run config; values set in the file override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

// ───────────────────────── file config ─────────────────────────

/// Optional TOML overrides. Every key is optional; anything present beats
/// the corresponding flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<String>,
    mode: Option<String>,
    seed: Option<Vec<u64>>,
    steps: Option<u64>,
    out: Option<PathBuf>,
    gateway_url: Option<String>,
    api_key: Option<String>,
    m_votes: Option<usize>,
    w_binary: Option<f64>,
    w_opd: Option<f64>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn parse_preset(name: &str) -> Result<Preset, CliError> {
    match name {
        "personal" => Ok(Preset::Personal),
        "general" => Ok(Preset::General),
        other => Err(CliError::Config(format!(
            "unknown preset '{other}' (expected personal or general)"
        ))),
    }
}

/// One fully resolved simulate request: flags first, config file on top.
#[derive(Debug, Clone)]
struct RunSpec {
    preset: Preset,
    mode: AdvantageMode,
    seeds: Vec<u64>,
    steps: Option<u64>,
    out: PathBuf,
    m_votes: Option<usize>,
    w_binary: Option<f64>,
    w_opd: Option<f64>,
}

impl RunSpec {
    fn resolve(args: &SimulateArgs, file: &FileConfig) -> Result<RunSpec, CliError> {
        let preset = parse_preset(file.preset.as_deref().unwrap_or(&args.preset))?;
        let mode_name = file.mode.as_deref().or(args.mode.as_deref());
        let mode = match preset {
            Preset::General => match mode_name {
                None | Some("stepwise") => AdvantageMode::Stepwise,
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "the general preset is step-wise; mode '{other}' only applies to personal"
                    )))
                }
            },
            Preset::Personal => {
                let mode =
                    AdvantageMode::from_str(mode_name.unwrap_or("combined")).map_err(CliError::Config)?;
                if mode == AdvantageMode::Stepwise {
                    return Err(CliError::Config(
                        "mode stepwise needs the general preset".into(),
                    ));
                }
                mode
            }
        };
        let seeds = file.seed.clone().unwrap_or_else(|| args.seed.clone());
        if seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        Ok(RunSpec {
            preset,
            mode,
            seeds,
            steps: file.steps.or(args.steps),
            out: file.out.clone().unwrap_or_else(|| args.out.clone()),
            m_votes: file.m_votes.or(args.m_votes),
            w_binary: file.w_binary.or(args.w_binary),
            w_opd: file.w_opd.or(args.w_opd),
        })
    }

    fn experiment(&self, seed: u64) -> ExperimentSpec {
        match self.preset {
            Preset::Personal => {
                let mut config = ExperimentConfig::personal(self.mode, seed);
                if let Some(steps) = self.steps {
                    config.updates = steps;
                    config.eval_updates = eval_points(steps);
                }
                if let Some(m) = self.m_votes {
                    config.m_votes = m;
                }
                if let Some(w) = self.w_binary {
                    config.w_binary = w;
                }
                if let Some(w) = self.w_opd {
                    config.w_opd = w;
                }
                ExperimentSpec::Personal(config)
            }
            Preset::General => {
                let mut config = StepwiseConfig::general(seed, true);
                if let Some(steps) = self.steps {
                    config.updates = steps;
                    config.eval_updates = eval_points(steps);
                }
                if let Some(m) = self.m_votes {
                    config.m_votes = m;
                }
                ExperimentSpec::Stepwise(config)
            }
        }
    }
}

/// Evaluation schedule for a custom update budget: start, midpoint, end.
fn eval_points(steps: u64) -> Vec<u64> {
    let mut points = vec![0, steps / 2, steps];
    points.dedup();
    points
}

// ───────────────────────── simulate ─────────────────────────

fn write_scores_csv(path: &Path, summary: &RunSummary) -> Result<(), CliError> {
    let mut text = String::from("updates,score\n");
    for point in &summary.trajectory {
        text.push_str(&format!("{},{:.6}\n", point.updates, point.score));
    }
    fs::write(path, text)?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let spec = RunSpec::resolve(&args, &file)?;
    fs::create_dir_all(&spec.out)?;

    let mut finals = Vec::new();
    let mut metric = String::new();
    for &seed in &spec.seeds {
        let run_dir = if spec.seeds.len() == 1 {
            spec.out.clone()
        } else {
            spec.out.join(format!("seed-{seed}"))
        };
        if run_dir.join("records").exists() {
            return Err(CliError::Config(format!(
                "{} already holds a run; records are append-only, pick a fresh --out",
                run_dir.display()
            )));
        }
        fs::create_dir_all(&run_dir)?;
        let summary = run_experiment(&spec.experiment(seed), &run_dir)?;
        write_scores_csv(&run_dir.join("scores.csv"), &summary)?;
        let baseline = summary.baseline_score().unwrap_or(0.0);
        let final_score = summary.final_score().unwrap_or(0.0);
        println!(
            "seed {seed}: {} {:.3} -> {:.3} over {} updates ({})",
            summary.metric,
            baseline,
            final_score,
            summary.updates,
            run_dir.display()
        );
        finals.push(final_score);
        metric = summary.metric;
    }
    if finals.len() > 1 {
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!("mean final {metric} over {} seeds: {mean:.3}", finals.len());
    }
    Ok(ExitCode::SUCCESS)
}

// ───────────────────────── replay ─────────────────────────

/// A record event together with where it sits on disk, so audit findings
/// can point at the exact line.
struct LocatedEvent {
    file: PathBuf,
    line: usize,
    event: RecordEvent,
}

/// Lists a run's record files in write order: archived versions first,
/// live file last, all sorted by version.
fn record_files(records_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    let mut scan = |d: &Path| -> Result<(), CliError> {
        if !d.exists() {
            return Ok(());
        }
        for entry in fs::read_dir(d)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(version) = name
                .strip_prefix('v')
                .and_then(|r| r.strip_suffix(".jsonl"))
                .and_then(|r| r.parse::<u64>().ok())
            {
                files.push((version, path.clone()));
            }
        }
        Ok(())
    };
    scan(&records_dir.join("archive"))?;
    scan(records_dir)?;
    files.sort();
    Ok(files.into_iter().map(|(_, path)| path).collect())
}

fn load_located(files: &[PathBuf]) -> Result<Vec<LocatedEvent>, CliError> {
    let mut located = Vec::new();
    for file in files {
        let text = fs::read_to_string(file)?;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: RecordEvent =
                serde_json::from_str(line).map_err(|e| CliError::Parse {
                    file: file.clone(),
                    line: idx + 1,
                    detail: e.to_string(),
                })?;
            located.push(LocatedEvent {
                file: file.clone(),
                line: idx + 1,
                event,
            });
        }
    }
    Ok(located)
}

fn resolve_replay_paths(args: &ReplayArgs) -> Result<(Vec<PathBuf>, PathBuf), CliError> {
    let path = &args.path;
    let (files, records_dir) = if path.is_file() {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        (vec![path.clone()], dir)
    } else if path.join("records").is_dir() {
        let dir = path.join("records");
        (record_files(&dir)?, dir)
    } else if path.is_dir() {
        (record_files(path)?, path.clone())
    } else {
        return Err(CliError::Records(format!(
            "{} does not exist",
            path.display()
        )));
    };
    if files.is_empty() {
        return Err(CliError::Records(format!(
            "no record files under {}",
            path.display()
        )));
    }
    let snapshots = match &args.snapshots {
        Some(dir) => dir.clone(),
        None => records_dir
            .parent()
            .unwrap_or(Path::new("."))
            .join("snapshots"),
    };
    Ok((files, snapshots))
}

fn cmd_replay(args: ReplayArgs) -> Result<ExitCode, CliError> {
    let (files, snapshots) = resolve_replay_paths(&args)?;
    let located = load_located(&files)?;
    if located.is_empty() {
        return Err(CliError::Records(format!(
            "no record events under {}",
            args.path.display()
        )));
    }
    let events: Vec<RecordEvent> = located.iter().map(|l| l.event.clone()).collect();

    let conservation = audit_sample_conservation(&events).map_err(CliError::Records)?;
    println!(
        "conservation: {} submitted, {} trained, {} dropped stale, {} pending",
        conservation.submitted,
        conservation.trained,
        conservation.dropped_for_staleness,
        conservation.pending
    );
    let final_version = audit_version_monotonic(&events).map_err(CliError::Records)?;
    println!("versions: swaps consistent through v{final_version}");

    let report = replay_advantages(&events, &snapshots, &Vocabulary::default_64())
        .map_err(CliError::Records)?;

    // Map each mismatch back to the line its submission event sits on.
    // Guarantee copies are skipped by the replay, so they never shadow the
    // original submission here.
    let mut lines: HashMap<(String, usize, String), (&Path, usize)> = HashMap::new();
    for l in &located {
        if l.event.kind != RecordKind::SampleSubmitted {
            continue;
        }
        if l.event.payload["guarantee"].as_bool() == Some(true) {
            continue;
        }
        let (Some(sid), Some(idx)) = (l.event.session_id.as_deref(), l.event.turn_index) else {
            continue;
        };
        let Some(source) = l.event.payload["source"].as_str() else {
            continue;
        };
        lines
            .entry((sid.to_string(), idx, source.to_string()))
            .or_insert((l.file.as_path(), l.line));
    }
    for m in &report.mismatches {
        let key = (m.session_id.clone(), m.turn_index, m.source.clone());
        match lines.get(&key) {
            Some((file, line)) => println!(
                "mismatch at {}:{}: session {} turn {} source {}: {}",
                file.display(),
                line,
                m.session_id,
                m.turn_index,
                m.source,
                m.detail
            ),
            None => println!(
                "mismatch: session {} turn {} source {}: {}",
                m.session_id, m.turn_index, m.source, m.detail
            ),
        }
    }
    println!(
        "replay: {} advantages checked, {} skipped, {} mismatches",
        report.checked,
        report.skipped,
        report.mismatches.len()
    );
    Ok(if report.mismatches.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

// ───────────────────────── repl ─────────────────────────

fn cmd_repl(args: ReplArgs) -> Result<ExitCode, CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let api_key = file
        .api_key
        .or_else(|| std::env::var("NEXTSTATE_API_KEY").ok())
        .or(args.api_key)
        .unwrap_or_else(|| EXPERIMENT_API_KEY.to_string());
    let mode = AdvantageMode::from_str(file.mode.as_deref().unwrap_or(&args.mode))
        .map_err(CliError::Config)?;
    if mode == AdvantageMode::Stepwise {
        return Err(CliError::Config(
            "the repl hosts persona-style chat; use binary, opd, or combined".into(),
        ));
    }
    let seed = file
        .seed
        .as_ref()
        .and_then(|s| s.first().copied())
        .unwrap_or(args.seed);

    let mut hosted: Option<Deployment> = None;
    let url = match file.gateway_url.or(args.gateway_url) {
        Some(url) => url.trim_end_matches('/').to_string(),
        None => {
            let out = file.out.or(args.out).unwrap_or_else(|| {
                std::env::temp_dir().join(format!("nextstate-repl-{}", std::process::id()))
            });
            fs::create_dir_all(&out)?;
            let deployment = Deployment::start(
                DeploymentConfig::scripted_personal(mode, seed, &out),
                true,
            )?;
            let url = deployment.url();
            println!(
                "self-hosted gateway at {url} ({} mode, records in {})",
                mode.as_str(),
                out.display()
            );
            hosted = Some(deployment);
            url
        }
    };

    let agent = client_agent();
    match agent.get(format!("{url}/healthz")).call() {
        Ok(response) if response.status().as_u16() == 200 => {}
        Ok(response) => {
            return Err(CliError::Gateway(format!(
                "{url}/healthz returned status {}",
                response.status()
            )))
        }
        Err(e) => return Err(CliError::Gateway(format!("cannot reach {url}: {e}"))),
    }

    let mut shadows = Vec::new();
    for i in 0..args.shadow_clients {
        let url = url.clone();
        let key = api_key.clone();
        shadows.push(thread::spawn(move || {
            let vocab = Vocabulary::default_64();
            let persona = Persona::student(&vocab);
            let session = format!("shadow-{i}");
            let _ = run_persona_instance(&url, &key, &persona, &session, 12, 7_000, i as u64, true);
        }));
    }

    println!("type a message; your next message doubles as feedback on the last reply; /quit exits");
    let mut messages = vec![Message::system("homework helper chat keep it natural")];
    let mut served = 0usize;
    let stdin = io::stdin();
    print!("you> ");
    io::stdout().flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        let text = line.trim();
        if text == "/quit" {
            break;
        }
        if !text.is_empty() {
            messages.push(Message::user(text));
            let response = post_chat(&agent, &url, &api_key, Some(&args.session), None, &messages)
                .map_err(|e| CliError::Gateway(e.to_string()))?;
            println!("policy v{}> {}", response.policy_version, response.response_text);
            messages.push(Message::assistant(&response.response_text));
            served += 1;
        }
        print!("you> ");
        io::stdout().flush()?;
    }
    println!("bye ({served} turns served)");

    for handle in shadows {
        let _ = handle.join();
    }
    if let Some(mut deployment) = hosted {
        deployment.shutdown();
    }
    Ok(ExitCode::SUCCESS)
}

// ───────────────────────── entry ─────────────────────────

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Repl(args) => cmd_repl(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
