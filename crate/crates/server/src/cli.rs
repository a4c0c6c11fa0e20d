//! Command-line interface: headless runs, the API server, comparisons and
//! trace utilities.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use switchboard_core::domain::{ArrivalTrace, ExperimentConfig, PayloadSpec, StrategySpec};
use switchboard_core::loadgen::{
    import_counts, parse_trace, render_trace, scale_trace, synth_trace, SynthSpec, TraceSpec,
};
use switchboard_core::orchestrator::Orchestrator;

use crate::api::{self, AppState};

#[derive(Debug, Parser)]
#[command(
    name = "switchboard",
    version,
    about = "Self-adaptive model-serving testbed"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment headless and print its summary.
    Run(RunArgs),
    /// Serve the REST API.
    Serve(ServeArgs),
    /// Print the comparison table of finished experiments.
    Compare(CompareArgs),
    /// Trace utilities.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, env = "SWITCHBOARD_CONFIG")]
    pub config: PathBuf,
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the experiment id.
    #[arg(long)]
    pub id: Option<String>,
    /// Overrides the strategy: naive, adamls, single:<model>, external:<path>.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<StrategySpec>,
    /// Also write the export archive here.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Print the summary as a table instead of JSON.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    /// Default config for startProcess.
    #[arg(long, env = "SWITCHBOARD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Replay real-time traces straight into the backlog instead of
    /// through the upload endpoint.
    #[arg(long)]
    pub direct_replay: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(required = true)]
    pub ids: Vec<String>,
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    /// Validate a gap trace and print its statistics.
    Parse {
        file: PathBuf,
        /// The file holds timestamp,count rows.
        #[arg(long)]
        counts: bool,
    },
    /// Multiply a trace's request rate by a factor.
    Scale {
        file: PathBuf,
        #[arg(long)]
        factor: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic trace.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Convert timestamp,count rows into a gap trace.
    Import {
        file: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum SynthKind {
    Poisson {
        #[arg(long)]
        rate: f64,
    },
    Bursty {
        #[arg(long)]
        high_rate: f64,
        #[arg(long)]
        low_rate: f64,
        #[arg(long)]
        phase_length: f64,
    },
    Constant {
        #[arg(long)]
        gap: f64,
    },
}

impl From<SynthKind> for SynthSpec {
    fn from(k: SynthKind) -> Self {
        match k {
            SynthKind::Poisson { rate } => SynthSpec::Poisson { rate },
            SynthKind::Bursty {
                high_rate,
                low_rate,
                phase_length,
            } => SynthSpec::Bursty {
                high_rate,
                low_rate,
                phase_length,
            },
            SynthKind::Constant { gap } => SynthSpec::Constant { gap },
        }
    }
}

pub fn parse_strategy(s: &str) -> Result<StrategySpec, String> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    match (kind, arg) {
        ("single", Some(model)) => Ok(StrategySpec::single(model)),
        ("external", Some(path)) => Ok(StrategySpec::external(path)),
        ("single" | "external", None) => {
            Err(format!("{kind} needs an argument, e.g. {kind}:<value>"))
        }
        (k, None) if StrategySpec::KINDS.contains(&k) => Ok(StrategySpec::new(k)),
        _ => Err(format!("unknown strategy {s:?}")),
    }
}

/// Reads a TOML config. Relative trace and payload paths are taken
/// relative to the config file.
pub fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = ExperimentConfig::from_toml(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    if let TraceSpec::File { path, .. } = &mut config.trace {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    if let PayloadSpec::Files { path } = &mut config.payload {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    Ok(config)
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => run(args, out),
        Command::Serve(args) => serve(args),
        Command::Compare(args) => {
            let table = Orchestrator::new(&args.data_dir).compare(&args.ids)?;
            if args.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&table)?)?;
            } else {
                write!(out, "{}", table.to_text())?;
            }
            Ok(())
        }
        Command::Trace(cmd) => trace(cmd, out),
    }
}

fn run(args: RunArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(id) = args.id {
        config.experiment_id = id;
    }
    if let Some(s) = args.strategy {
        config.strategy = s;
    }
    let id = config.experiment_id.clone();
    let orch = Orchestrator::new(&args.data_dir);
    orch.start_experiment(config)?;
    let summary = orch.wait()?;
    if let Some(path) = &args.export {
        std::fs::write(path, orch.export(&id)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if args.table {
        write!(
            out,
            "{}",
            switchboard_core::report::ComparisonTable::new(&[summary]).to_text()
        )?;
    } else {
        writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let default_config = args.config.as_deref().map(load_config).transpose()?;
    let mut state = AppState::new(Arc::new(Orchestrator::new(&args.data_dir)));
    state.default_config = default_config;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        if !args.direct_replay {
            state.replay_url = Some(api::upload_url(listener.local_addr()?));
        }
        api::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(trace: &ArrivalTrace, output: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<()> {
    let text = render_trace(trace);
    match output {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn trace(cmd: TraceCommand, out: &mut dyn Write) -> anyhow::Result<()> {
    match cmd {
        TraceCommand::Parse { file, counts } => {
            let label = file.display().to_string();
            let text = read_text(&file)?;
            let t = if counts {
                import_counts(&text, &label)?
            } else {
                parse_trace(&text, &label)?
            };
            let duration = t.duration();
            writeln!(out, "requests: {}", t.len())?;
            writeln!(out, "duration: {duration} s")?;
            if duration > 0.0 {
                writeln!(out, "mean rate: {:.3}/s", t.len() as f64 / duration)?;
            }
            Ok(())
        }
        TraceCommand::Scale {
            file,
            factor,
            output,
        } => {
            let t = parse_trace(&read_text(&file)?, &file.display().to_string())?;
            emit(&scale_trace(&t, factor)?, output.as_deref(), out)
        }
        TraceCommand::Synth {
            count,
            seed,
            output,
            kind,
        } => {
            if count == 0 {
                bail!("--count must be at least 1");
            }
            emit(
                &synth_trace(&kind.into(), seed, count)?,
                output.as_deref(),
                out,
            )
        }
        TraceCommand::Import { file, output } => {
            let t = import_counts(&read_text(&file)?, &file.display().to_string())?;
            emit(&t, output.as_deref(), out)
        }
    }
}
