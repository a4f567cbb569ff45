use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cogail_cli::commands;
use cogail_cli::config::parse_dist;
use cogail_cli::UsageError;

#[derive(Parser)]
#[command(name = "cogail", version, about = "Co-policy imitation learning on 2D-Fetch-Quest")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted two-agent demonstrations.
    GenDemos(GenDemosArgs),
    /// Train one method on a demonstration file.
    Train(TrainArgs),
    /// Evaluate checkpoints by interpolation or open-loop replay.
    Eval(EvalArgs),
    /// Write the mean recognized code of every demonstration.
    ExportLatent(ExportArgs),
    /// Run the real-time game service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenDemosArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Strategy weights, e.g. 17,17,33,33.
    #[arg(long, value_parser = parse_dist)]
    dist: Option<[f64; 4]>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Output file.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Supervised epochs before the first adversarial episode.
    #[arg(long)]
    warm_start_epochs: Option<usize>,
    /// Output directory (checkpoints, metrics log, resolved config).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Interp,
    Replay,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(value_enum)]
    protocol: ProtocolArg,
    /// Checkpoint files to evaluate.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Evaluate every checkpoint in this directory and aggregate over seeds.
    #[arg(long)]
    all_checkpoints: Option<PathBuf>,
    /// Seeds to aggregate, e.g. 300,400,500.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Held-out demonstrations (replay only).
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long)]
    codes: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Report directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    demos: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Checkpoint playlist for play_vs_policy sessions; rounds draw from it
    /// in a seeded random order under blinded labels.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    ws_port: Option<u16>,
    #[arg(long)]
    tick_hz: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    record_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = cogail_cli::config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenDemos(a) => {
            let d = &mut cfg.dataset;
            d.n = a.n.unwrap_or(d.n);
            d.dist = a.dist.unwrap_or(d.dist);
            d.seed = a.seed.unwrap_or(d.seed);
            d.noise = a.noise.unwrap_or(d.noise);
            cfg.validate()?;
            commands::gen_demos(&cfg, &a.out)
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            if let Some(m) = a.mode {
                t.mode =
                    cogail_core::train::Mode::from_tag(&m).ok_or_else(|| UsageError(format!("unknown mode {m:?}")))?;
            }
            t.seed = a.seed.unwrap_or(t.seed);
            t.episodes = a.episodes.unwrap_or(t.episodes);
            t.steps_per_episode = a.steps.unwrap_or(t.steps_per_episode);
            t.checkpoint_interval = a.checkpoint_interval.unwrap_or(t.checkpoint_interval);
            t.warm_start_epochs = a.warm_start_epochs.unwrap_or(t.warm_start_epochs);
            cfg.demos = a.demos.or(cfg.demos);
            cfg.output_dir = a.out.unwrap_or(cfg.output_dir);
            cfg.validate()?;
            commands::train(&cfg)
        }
        Command::Eval(a) => {
            cfg.eval.codes = a.codes.unwrap_or(cfg.eval.codes);
            cfg.eval.seed = a.eval_seed.unwrap_or(cfg.eval.seed);
            if !a.seeds.is_empty() {
                cfg.seeds = a.seeds;
            }
            cfg.output_dir = a.out.unwrap_or(cfg.output_dir);
            cfg.validate()?;
            let protocol = match a.protocol {
                ProtocolArg::Interp => cogail_core::eval::Protocol::Interpolation,
                ProtocolArg::Replay => cogail_core::eval::Protocol::Replay,
            };
            commands::eval(
                &cfg,
                protocol,
                &a.checkpoints,
                a.all_checkpoints.as_deref(),
                a.demos.as_deref(),
            )
        }
        Command::ExportLatent(a) => {
            cfg.validate()?;
            commands::export_latent(&cfg, &a.checkpoint, &a.demos, &a.out)
        }
        Command::Serve(a) => {
            let s = &mut cfg.serve;
            s.host = a.host.unwrap_or(std::mem::take(&mut s.host));
            s.port = a.port.unwrap_or(s.port);
            s.ws_port = a.ws_port.unwrap_or(s.ws_port);
            s.tick_hz = a.tick_hz.unwrap_or(s.tick_hz);
            s.rounds = a.rounds.unwrap_or(s.rounds);
            s.record_dir = a.record_dir.or(s.record_dir.take());
            cfg.validate()?;
            commands::serve(&cfg, &a.checkpoints)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}
