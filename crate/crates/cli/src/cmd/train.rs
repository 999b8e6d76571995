use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use ltdarts::train::{prepare_data, Mode, RunHistory, TrainConfig, Trainer};

use crate::io::{create_dir, write_atomic, ConfigArgs};
use crate::UsageError;

#[derive(clap::Args)]
pub struct Args {
    #[command(flatten)]
    config: ConfigArgs,

    #[arg(long)]
    mode: Option<Mode>,

    #[arg(long)]
    seed: Option<u64>,

    /// Run directory.
    #[arg(long, required_unless_present = "dry_run")]
    out: Option<PathBuf>,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,

    /// Continue from `<out>/checkpoint.bin`.
    #[arg(long)]
    resume: bool,

    /// Stop once this many epochs are complete.
    #[arg(long)]
    stop_after: Option<usize>,
}

pub const CHECKPOINT: &str = "checkpoint.bin";

/// history.csv, history.json and genotypes.jsonl.
pub fn write_history(dir: &Path, history: &RunHistory) -> Result<()> {
    write_atomic(&dir.join("history.csv"), history.to_csv().as_bytes())?;
    write_atomic(&dir.join("history.json"), history.to_json()?.as_bytes())?;
    write_atomic(
        &dir.join("genotypes.jsonl"),
        history.genotypes_jsonl()?.as_bytes(),
    )
}

pub fn dry_run_text(cfg: &TrainConfig) -> String {
    format!("# config-hash: {}\n{}", cfg.hash(), cfg.to_text())
}

pub fn run(a: Args) -> Result<ExitCode> {
    let cfg = a.config.resolve(a.mode, a.seed)?;
    if a.dry_run {
        print!("{}", dry_run_text(&cfg));
        return Ok(ExitCode::SUCCESS);
    }
    let out = a.out.expect("clap requires --out without --dry-run");
    let ckpt = out.join(CHECKPOINT);
    if a.resume && !ckpt.exists() {
        return Err(UsageError(format!("--resume: {} does not exist", ckpt.display())).into());
    }
    if !a.resume && ckpt.exists() {
        bail!(
            "{} already exists; pass --resume or use a fresh --out",
            ckpt.display()
        );
    }
    create_dir(&out)?;

    let data = prepare_data(&cfg)?;
    write_atomic(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    write_atomic(
        &out.join("manifest.json"),
        data.manifest.to_json()?.as_bytes(),
    )?;
    let mut trainer = if a.resume {
        Trainer::resume(&cfg, &data, &ckpt)?
    } else {
        Trainer::new(&cfg, &data)?
    };
    let total = cfg.total_epochs();
    let last = a.stop_after.map_or(total, |k| k.min(total));
    let start = trainer.completed_epochs();
    if start == 0 {
        trainer.run(Some(&ckpt), Some(0))?;
        write_history(&out, trainer.history())?;
    }
    for t in start + 1..=last {
        trainer.run(Some(&ckpt), Some(t))?;
        write_history(&out, trainer.history())?;
        if let Some(e) = trainer.history().last() {
            eprintln!(
                "epoch {:>3}/{total} [{}] mu={:.3} loss={:.4} test@val-mu={:.4}",
                e.epoch,
                e.phase,
                e.mu,
                e.train_loss,
                e.test_at_best_mu()
            );
        }
    }
    let history = trainer.history();
    if let Some(e) = history.last() {
        let (mu, acc) = e.test.best();
        println!("epochs completed: {}/{total}", history.epochs.len());
        println!(
            "val-selected mu: {}, balanced test accuracy: {:.4}",
            e.best_mu(),
            e.test_at_best_mu()
        );
        println!("best mu on test grid: {mu}, balanced test accuracy: {acc:.4}");
    }
    println!("config-hash: {}", cfg.hash());
    Ok(ExitCode::SUCCESS)
}
