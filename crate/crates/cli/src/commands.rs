//! Subcommand bodies. Each takes a validated [`RunConfig`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cogail_core::checkpoint::checkpoint_name;
use cogail_core::demos::{generate_dataset, DemoDataset};
use cogail_core::env::FetchQuest;
use cogail_core::eval::{self, EvalReport, HumanStream, LatentRow, Protocol};
use cogail_core::train::EpisodeMetrics;
use cogail_core::{Checkpoint, CoreError, Trainer};
use serde::Serialize;

use crate::config::{usage, RunConfig};
use crate::service::{blind_label, PlaylistEntry, Server, ServerConfig, SessionSettings};

fn load_demos(path: &Path, env: &FetchQuest) -> anyhow::Result<DemoDataset> {
    if !path.exists() {
        return Err(usage(format!("demonstration file {} does not exist", path.display())));
    }
    let ds = DemoDataset::load(path).with_context(|| format!("loading {}", path.display()))?;
    ds.check_layout(env).map_err(usage)?;
    Ok(ds)
}

fn load_checkpoint(path: &Path, env: &FetchQuest) -> anyhow::Result<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    ck.check_env(env).map_err(usage)?;
    Ok(ck)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen_demos(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let env = cfg.env()?;
    let spec = cfg.dataset.spec()?;
    let ds = generate_dataset(&env, &spec)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ds.save(out)?;
    std::fs::write(out.with_extension("config.toml"), cfg.to_toml())?;
    let c = ds.strategy_counts();
    println!(
        "wrote {} demos ({} steps) to {}; strategy counts 1={} 2={} 3={} 4={}",
        ds.demos.len(),
        ds.total_steps(),
        out.display(),
        c[0],
        c[1],
        c[2],
        c[3]
    );
    Ok(())
}

/// Append-only JSON-lines metrics log.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn append(&mut self, m: &EpisodeMetrics) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let env = cfg.env()?;
    let Some(demos) = &cfg.demos else {
        return Err(usage(format!("mode {} needs --demos", cfg.train.mode.tag())));
    };
    let ds = load_demos(demos, &env)?;
    let dir = &cfg.output_dir;
    cfg.write_resolved(dir)?;
    let mut log = MetricsLog::create(&dir.join("metrics.jsonl"))?;
    let mut trainer = Trainer::new(&env, Some(&ds), cfg.train.clone()).map_err(|e| match e {
        CoreError::Config(_) => usage(e),
        e => e.into(),
    })?;
    let total = cfg.train.schedule_len();
    let mode = cfg.train.mode.tag();
    let seed = cfg.train.seed;
    trainer.run(
        |m| {
            log.append(m).map_err(|source| CoreError::Io {
                path: "metrics.jsonl".into(),
                source,
            })?;
            println!(
                "[{mode} s{seed}] {}/{total} D={:.3} Lz={:.3} La={:.3} r={:.3} bc={:.4} ({:.0}s)",
                m.episode, m.disc_loss, m.l_z, m.l_a, m.mean_reward, m.bc_loss, m.wall_time
            );
            Ok(())
        },
        |t| {
            let path = dir.join(checkpoint_name(mode, seed, t.learner.episode));
            Checkpoint::new(&env, &t.cfg, t.learner.clone()).save(&path)?;
            println!("saved {}", path.display());
            Ok(())
        },
    )?;
    Ok(())
}

fn protocol_tag(p: Protocol) -> &'static str {
    match p {
        Protocol::Interpolation => "interp",
        Protocol::Replay => "replay",
    }
}

fn evaluate(
    cfg: &RunConfig,
    env: &FetchQuest,
    protocol: Protocol,
    path: &Path,
    streams: Option<&[HumanStream]>,
) -> anyhow::Result<EvalReport> {
    let ck = load_checkpoint(path, env)?;
    let report = match protocol {
        Protocol::Interpolation => eval::eval_interpolation(env, &ck.learner, cfg.eval.codes, cfg.eval.seed)?,
        Protocol::Replay => eval::eval_replay(
            env,
            &ck.learner,
            streams.expect("checked by caller"),
            ck.config().history,
        )?,
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    write_json(
        &cfg.output_dir.join(format!("{name}.{}.json", protocol_tag(protocol))),
        &report,
    )?;
    Ok(report)
}

/// Checkpoints of `seed` in `dir`, ordered by training progress.
pub fn checkpoints_for_seed(dir: &Path, seed: u64) -> anyhow::Result<Vec<PathBuf>> {
    let marker = format!("-s{seed}-e");
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "ckpt")
                && p.file_name().is_some_and(|n| n.to_string_lossy().contains(&marker))
        })
        .collect();
    found.sort();
    Ok(found)
}

pub fn eval(
    cfg: &RunConfig,
    protocol: Protocol,
    checkpoints: &[PathBuf],
    all_dir: Option<&Path>,
    demos: Option<&Path>,
) -> anyhow::Result<()> {
    let env = cfg.env()?;
    let streams = match (protocol, demos) {
        (Protocol::Replay, Some(p)) => {
            let ds = load_demos(p, &env)?;
            Some(ds.demos.iter().map(HumanStream::from_demo).collect::<Vec<_>>())
        }
        (Protocol::Replay, None) => return Err(usage("replay evaluation needs --demos")),
        (Protocol::Interpolation, Some(_)) => return Err(usage("interpolation does not take --demos")),
        (Protocol::Interpolation, None) => None,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.write_resolved(&cfg.output_dir)?;
    let tag = protocol_tag(protocol);
    match (all_dir, checkpoints.is_empty()) {
        (Some(_), false) => Err(usage("give either --checkpoint or --all-checkpoints, not both")),
        (None, true) => Err(usage("nothing to evaluate: pass --checkpoint or --all-checkpoints")),
        (None, false) => {
            for path in checkpoints {
                let r = evaluate(cfg, &env, protocol, path, streams.as_deref())?;
                println!(
                    "{} {tag}: success {}/{} = {:.3}",
                    path.display(),
                    r.successes,
                    r.n_trials,
                    r.success_rate
                );
                print_histogram(&r);
            }
            Ok(())
        }
        (Some(dir), true) => {
            let mut series = Vec::new();
            for &seed in &cfg.seeds {
                let paths = checkpoints_for_seed(dir, seed)?;
                if paths.is_empty() {
                    return Err(usage(format!("no checkpoints for seed {seed} in {}", dir.display())));
                }
                let reports = paths
                    .iter()
                    .map(|p| evaluate(cfg, &env, protocol, p, streams.as_deref()))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                series.push(reports);
            }
            let agg = eval::aggregate_seeds(&series).map_err(usage)?;
            write_json(&cfg.output_dir.join(format!("aggregate.{tag}.json")), &agg)?;
            for (i, e) in agg.episodes.iter().enumerate() {
                println!("episode {e:5}: {tag} success {:.3} ± {:.3}", agg.mean[i], agg.std[i]);
            }
            println!(
                "best: episode {} with {:.3} ± {:.3} over seeds {:?}",
                agg.episodes[agg.best_index], agg.best_mean, agg.best_std, cfg.seeds
            );
            Ok(())
        }
    }
}

fn print_histogram(r: &EvalReport) {
    let h = &r.success_histogram;
    println!(
        "  successful strategies: 1={} 2={} 3={} 4={} unclassified={}",
        h[0], h[1], h[2], h[3], h[4]
    );
}

#[derive(Serialize)]
struct LatentExport {
    checkpoint: String,
    rows: Vec<LatentRow>,
    clusters: Option<eval::ClusterStats>,
}

pub fn export_latent(cfg: &RunConfig, checkpoint: &Path, demos: &Path, out: &Path) -> anyhow::Result<()> {
    let env = cfg.env()?;
    let ck = load_checkpoint(checkpoint, &env)?;
    let ds = load_demos(demos, &env)?;
    let rows = eval::export_latent(&ck.learner, &ds.demos, ck.config().history)?;
    let clusters = eval::cluster_stats(&rows).ok();
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_json(
        out,
        &LatentExport {
            checkpoint: checkpoint.display().to_string(),
            rows,
            clusters,
        },
    )?;
    match clusters {
        Some(c) => println!(
            "within-strategy dispersion {:.4}, between-centroid distance {:.4}, ratio {:.3}",
            c.within, c.between, c.ratio
        ),
        None => println!("fewer than two labelled strategies; no cluster statistics"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn serve(cfg: &RunConfig, checkpoints: &[PathBuf]) -> anyhow::Result<()> {
    let env = cfg.env()?;
    let mut playlist = Vec::new();
    for (i, path) in checkpoints.iter().enumerate() {
        let ck = load_checkpoint(path, &env)?;
        playlist.push(PlaylistEntry {
            label: blind_label(i),
            source: path.display().to_string(),
            history: ck.config().history,
            learner: ck.learner,
        });
    }
    let s = &cfg.serve;
    let server_cfg = ServerConfig {
        tick_hz: s.tick_hz,
        settings: SessionSettings {
            rounds: s.rounds,
            round_seed: s.round_seed,
        },
        record_dir: s.record_dir.clone(),
    };
    if let Some(dir) = &s.record_dir {
        cfg.write_resolved(dir)?;
    }
    let tcp = format!("{}:{}", s.host, s.port);
    let ws = (s.ws_port != 0).then(|| format!("{}:{}", s.host, s.ws_port));
    let server = Server::start(env, playlist, server_cfg, &tcp, ws.as_deref())?;
    println!("listening on {} (newline-delimited JSON)", server.tcp_addr);
    if let Some(a) = server.ws_addr {
        println!("listening on ws://{a}");
    }
    if checkpoints.is_empty() {
        println!("no checkpoint loaded: only collect_two_human sessions are available");
    }
    server.wait();
    bail!("server stopped")
}
