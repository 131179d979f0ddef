use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ovd_cli::commands;
use ovd_cli::config::RunConfig;
use ovd_cli::dataset::load_vocabulary;
use ovd_cli::pngio::read_png;
use ovd_core::text::ClassVocabulary;

#[derive(Parser)]
#[command(name = "ovd", version, about = "Open-vocabulary detection: data, training, evaluation")]
struct Cli {
    /// key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set train.lr=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Fully serial execution for bit-exact reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Default)]
struct AblationFlags {
    #[arg(long)]
    disable_tg_fe: bool,
    #[arg(long)]
    disable_vg_tr: bool,
    #[arg(long)]
    disable_tg_qe: bool,
    #[arg(long)]
    disable_gate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a train/eval dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        eval_scenes: Option<usize>,
        /// Extra base-only scenes for closed-set checks.
        #[arg(long, default_value_t = 0)]
        holdout_scenes: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Withhold a class from training (repeatable).
        #[arg(long)]
        novel: Vec<String>,
    },
    /// Cut a split into fixed-size tiles.
    Tile {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        min_visible: Option<f64>,
    },
    /// Train on the base classes of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        optimizer: Option<String>,
        #[command(flatten)]
        ablation: AblationFlags,
        /// Print the loss every N steps (0 = never).
        #[arg(long, default_value_t = 500)]
        log_every: usize,
    },
    /// Evaluate a checkpoint and write reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// zsd, gzsd or closed.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        split: Option<String>,
        /// Vocabulary file replacing the dataset's.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        score_floor: Option<f64>,
    },
    /// Detect arbitrary classes in one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated class names.
        #[arg(long, conflicts_with = "vocab")]
        classes: Option<String>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        score_floor: f64,
    },
    /// Finite-difference check of every differentiable piece.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0x9d)]
        seed: u64,
    },
}

fn push<T: ToString>(o: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push(format!("{key}={}", v.to_string()));
    }
}

fn common(o: &mut Vec<String>, c: Common) {
    push(o, "seed", c.seed);
    push(o, "data.dir", c.data.map(|p| p.display().to_string()));
}

fn run(cli: Cli) -> Result<()> {
    let mut o = Vec::new();
    // Dedicated flags count as command-line settings and win over `--set`.
    let resolve = |extra: Vec<String>| -> Result<RunConfig> {
        let mut all = cli.set.clone();
        all.extend(extra);
        RunConfig::resolve(cli.config.as_deref(), &all)
    };
    match cli.command {
        Command::Generate { out, scenes, eval_scenes, holdout_scenes, seed, novel } => {
            push(&mut o, "data.train_scenes", scenes);
            push(&mut o, "data.eval_scenes", eval_scenes);
            push(&mut o, "seed", seed);
            if !novel.is_empty() {
                o.push(format!("data.novel={}", novel.join(",")));
            }
            let cfg = resolve(o)?;
            let s = commands::generate(&cfg, &out, holdout_scenes, cli.deterministic)?;
            for (name, sum) in &s.checksums {
                println!("{name} {sum}");
            }
        }
        Command::Tile { data, split, out, tile, stride, min_visible } => {
            push(&mut o, "tile.size", tile);
            push(&mut o, "tile.stride", stride);
            push(&mut o, "tile.min_visible", min_visible);
            let cfg = resolve(o)?;
            let n = commands::tile(&cfg, &data, &split, &out)?;
            println!("{n} tiles");
        }
        Command::Train { common: c, out, steps, lr, batch, optimizer, ablation, log_every } => {
            common(&mut o, c);
            push(&mut o, "train.steps", steps);
            push(&mut o, "train.lr", lr);
            push(&mut o, "train.batch", batch);
            push(&mut o, "train.optimizer", optimizer);
            for (off, key) in [
                (ablation.disable_tg_fe, "ablation.tg_fe"),
                (ablation.disable_vg_tr, "ablation.vg_tr"),
                (ablation.disable_tg_qe, "ablation.tg_qe"),
                (ablation.disable_gate, "ablation.gate"),
            ] {
                if off {
                    o.push(format!("{key}=false"));
                }
            }
            let cfg = resolve(o)?;
            let r = commands::train(&cfg, &out, cli.deterministic, |s| {
                if log_every > 0 && (s.step + 1) % log_every == 0 {
                    eprintln!(
                        "step {:>6} loss {:.4} (con {:.4} giou {:.4} l1 {:.4}) |g| {:.3}",
                        s.step + 1,
                        s.loss.total,
                        s.loss.l_con,
                        s.loss.l_giou,
                        s.loss.l_l1,
                        s.grad_norm
                    );
                }
            })?;
            println!("{}", r.checkpoint.display());
        }
        Command::Eval { common: c, checkpoint, out, protocol, split, vocab, score_floor } => {
            common(&mut o, c);
            push(&mut o, "eval.protocol", protocol);
            push(&mut o, "eval.split", split);
            push(&mut o, "eval.score_floor", score_floor);
            let cfg = resolve(o)?;
            commands::eval(&cfg, &checkpoint, vocab.as_deref(), &out, cli.deterministic)?;
            print!("{}", std::fs::read_to_string(out.join("report.txt"))?);
        }
        Command::Infer { checkpoint, image, classes, vocab, score_floor } => {
            let cfg = resolve(o)?;
            let vocab = match (classes, vocab) {
                (Some(list), _) => {
                    let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                    ClassVocabulary::open(&names).context("--classes")?
                }
                (None, Some(p)) => load_vocabulary(&p)?,
                (None, None) => anyhow::bail!("infer needs --classes or --vocab"),
            };
            let model = commands::load_model(&checkpoint)?;
            let img = read_png(&image)?;
            for d in commands::infer(&model, &img, &vocab, score_floor, cfg.max_dets)? {
                println!(
                    "{}\t{:.6}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                    d.class, d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]
                );
            }
        }
        Command::Gradcheck { instances, seed } => {
            resolve(o)?;
            let reports = commands::gradcheck(instances, seed)?;
            let mut failed = Vec::new();
            for c in &reports {
                let ok = c.report.max_rel_err < 1e-4;
                println!(
                    "{:<20} instances={:<4} checked={:<8} max_rel_err={:.3e} {}",
                    c.name,
                    c.instances,
                    c.report.checked,
                    c.report.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(c.name);
                }
            }
            if !failed.is_empty() {
                anyhow::bail!("finite-difference mismatch in {failed:?}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
