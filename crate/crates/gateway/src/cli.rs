//! Command-line entry point: `serve`, `replay` and `gen-trace`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dwellgrasp_core::fixation::TriggerMode;
use dwellgrasp_core::intent::ResolvePolicy;
use dwellgrasp_core::orchestrator::{
    generate_dwell_trace, replay, read_trace_file, write_trace, DetectorConfig, SessionConfig,
    TraceGenOptions,
};
use dwellgrasp_core::perception::ExternalConfig;
use dwellgrasp_core::simworld::load_scene_file;
use tokio::net::TcpListener;

use crate::server::{serve, AppState, ServeConfig, DEFAULT_RATE_LIMIT};

/// Overrides `serve --port` when set.
pub const PORT_ENV: &str = "GAZE_ENGINE_PORT";

#[derive(Debug, Parser)]
#[command(name = "dwellgrasp", version, about = "Gaze dwell object selection and simulated grasping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Auto,
    Confirm,
}

impl From<ModeArg> for TriggerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Auto => TriggerMode::AutoOnDwell,
            ModeArg::Confirm => TriggerMode::DwellPlusConfirm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Strict,
    Confidence,
}

impl From<PolicyArg> for ResolvePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Strict => ResolvePolicy::Strict,
            PolicyArg::Confidence => ResolvePolicy::HighestConfidence,
        }
    }
}

/// Options that shape a session, shared by `serve` and `replay`.
#[derive(Debug, Clone, clap::Args)]
pub struct SessionArgs {
    /// Session config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Seeds the synthetic detector and the arm's fault injection.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Confidence gate applied before hit-testing.
    #[arg(long)]
    pub min_conf: Option<f64>,
    /// Use an HTTP detection service instead of the synthetic detector.
    #[arg(long)]
    pub detector_url: Option<String>,
}

impl SessionArgs {
    pub fn build(&self) -> Result<SessionConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => SessionConfig::default(),
        };
        if let Some(url) = &self.detector_url {
            config.detector = DetectorConfig::External(ExternalConfig {
                url: url.clone(),
                timeout_ms: 2000,
            });
        }
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        if let Some(mode) = self.mode {
            config.fixation.trigger_mode = mode.into();
        }
        if let Some(policy) = self.policy {
            config.policy = policy.into();
        }
        if let Some(min_conf) = self.min_conf {
            config.min_conf = min_conf;
        }
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the WebSocket service at /session.
    Serve {
        #[arg(long)]
        scene: PathBuf,
        /// Listening port; the GAZE_ENGINE_PORT environment variable wins.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Serve a built UI bundle from this directory at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Client messages accepted per second before excess is dropped.
        #[arg(long, default_value_t = DEFAULT_RATE_LIMIT)]
        rate_limit: u32,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Run a recorded gaze trace through a session and write a report.
    Replay {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Synthesize a trace that dwells on each target in turn.
    GenTrace {
        #[arg(long)]
        scene: PathBuf,
        /// Object id or label; repeat for several trials.
        #[arg(long = "target", required = true)]
        targets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Emit a confirm at the end of each dwell.
        #[arg(long, value_enum, default_value = "auto")]
        mode: ModeArg,
        /// Uniform gaze jitter radius in meters on the gaze plane.
        #[arg(long, default_value_t = 0.0)]
        jitter_m: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How long to hold each target.
        #[arg(long)]
        hold_ms: Option<u64>,
    },
}

pub async fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve {
            scene,
            port,
            host,
            static_dir,
            rate_limit,
            session,
        } => {
            let port = match std::env::var(PORT_ENV) {
                Ok(v) => v
                    .parse::<u16>()
                    .with_context(|| format!("{PORT_ENV}={v:?} is not a port number"))?,
                Err(_) => port.context("--port is required unless GAZE_ENGINE_PORT is set")?,
            };
            if rate_limit == 0 {
                bail!("--rate-limit must be positive");
            }
            let scene = load_scene_file(&scene)
                .with_context(|| format!("loading scene {}", scene.display()))?;
            let config = session.build()?;
            dwellgrasp_core::orchestrator::Session::new(scene.clone(), config.clone())
                .context("invalid session config")?;
            let addr = format!("{host}:{port}");
            let listener = TcpListener::bind(&addr)
                .await
                .with_context(|| format!("cannot listen on {addr}"))?;
            tracing::info!(addr = %listener.local_addr()?, "serving /session");
            let mut serve_config = ServeConfig::new(scene, config);
            serve_config.rate_limit_per_s = rate_limit;
            serve_config.static_dir = static_dir;
            let shutdown = async {
                let _ = tokio::signal::ctrl_c().await;
            };
            serve(listener, AppState::new(serve_config), shutdown).await?;
            Ok(())
        }
        Command::Replay {
            scene,
            trace,
            report,
            session,
        } => {
            let config = session.build()?;
            let summary = run_replay(&scene, &trace, &report, config)?;
            println!("{summary}");
            Ok(())
        }
        Command::GenTrace {
            scene,
            targets,
            out,
            mode,
            jitter_m,
            seed,
            hold_ms,
        } => {
            let scene_doc = load_scene_file(&scene)
                .with_context(|| format!("loading scene {}", scene.display()))?;
            let defaults = SessionConfig::default();
            let mut fixation = defaults.fixation.clone();
            fixation.trigger_mode = mode.into();
            let mut opts = TraceGenOptions::for_session(&fixation, &defaults.robot.durations);
            opts.jitter_m = jitter_m;
            opts.seed = seed;
            if let Some(h) = hold_ms {
                opts.hold_ms = h;
            }
            let refs: Vec<&str> = targets.iter().map(String::as_str).collect();
            let inputs = generate_dwell_trace(&scene_doc, &refs, &opts)?;
            std::fs::write(&out, write_trace(&inputs))
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} inputs to {}", inputs.len(), out.display());
            Ok(())
        }
    }
}

/// Replays `trace` over `scene`, writes the report and returns a summary line.
pub fn run_replay(scene: &Path, trace: &Path, report: &Path, config: SessionConfig) -> Result<String> {
    let scene_doc =
        load_scene_file(scene).with_context(|| format!("loading scene {}", scene.display()))?;
    let inputs =
        read_trace_file(trace).with_context(|| format!("reading trace {}", trace.display()))?;
    let rep = replay(&inputs, scene_doc, config).context("replay failed")?;
    std::fs::write(report, rep.to_json_pretty())
        .with_context(|| format!("writing report {}", report.display()))?;
    let a = &rep.aggregate;
    Ok(format!(
        "{} trials: {} matched, {} ambiguous, {} no_match, {} no_object, {} errors; accuracy {}",
        a.trials,
        a.matched,
        a.ambiguous,
        a.no_match,
        a.no_object,
        a.errors,
        a.selection_accuracy.map_or("n/a".to_string(), |x| format!("{x:.3}"))
    ))
}
