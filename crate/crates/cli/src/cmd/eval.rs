use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::ValueEnum;
use ltdarts::bbn::BbnModel;
use ltdarts::data::LabeledImageSet;
use ltdarts::nas::ExportFormat;
use ltdarts::train::{evaluate, open_checkpoint, prepare_data, Checkpoint, EvalReport};

use crate::io::{grid_arg, with_hash, write_atomic, Grid};
use crate::UsageError;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// Test-time mixing ratio; defaults to the one selected on validation.
    #[arg(long)]
    mu: Option<f64>,

    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(clap::Args)]
pub struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// `start:stop:step`, inclusive.
    #[arg(long, default_value = "0:1:0.1", value_parser = grid_arg)]
    grid: Grid,

    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,

    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Json,
    Dot,
}

#[derive(clap::Args)]
pub struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Destination file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn open(path: &PathBuf) -> Result<(Checkpoint, BbnModel)> {
    open_checkpoint(path).with_context(|| format!("opening {}", path.display()))
}

fn split_of(ckpt: &Checkpoint, split: Split) -> Result<LabeledImageSet> {
    let data = prepare_data(&ckpt.config)?;
    Ok(match split {
        Split::Train => data.train_eval,
        Split::Val => data.val,
        Split::Test => data.test,
    })
}

fn report(model: &BbnModel, ds: &LabeledImageSet, grid: &[f64]) -> Result<EvalReport> {
    Ok(evaluate(model, ds.images(), ds.labels(), grid)?)
}

fn fmt_class(a: Option<f64>) -> String {
    a.map_or(String::new(), |v| v.to_string())
}

pub fn run_eval(a: EvalArgs) -> Result<ExitCode> {
    let (ckpt, model) = open(&a.checkpoint)?;
    let mu = match a.mu {
        Some(m) if (0.0..=1.0).contains(&m) => m,
        Some(m) => return Err(UsageError(format!("--mu must lie in [0, 1], got {m}")).into()),
        None => ckpt.history.last().map_or(1.0, |e| e.best_mu()),
    };
    let ds = split_of(&ckpt, a.split)?;
    let r = report(&model, &ds, &[mu])?;
    println!("mu: {mu}");
    println!("accuracy: {}", r.accuracy[0]);
    let per: Vec<String> = r.per_class[0].iter().map(|&c| fmt_class(c)).collect();
    println!("per-class: {}", per.join(","));
    Ok(ExitCode::SUCCESS)
}

pub fn run_sweep(a: SweepArgs) -> Result<ExitCode> {
    let (ckpt, model) = open(&a.checkpoint)?;
    let ds = split_of(&ckpt, a.split)?;
    let r = report(&model, &ds, &a.grid.0)?;
    let mut csv = String::from("mu,accuracy");
    for c in 0..ds.classes() {
        let _ = write!(csv, ",acc_class{c}");
    }
    csv.push('\n');
    for ((mu, acc), per) in r.grid.iter().zip(&r.accuracy).zip(&r.per_class) {
        let per: Vec<String> = per.iter().map(|&c| fmt_class(c)).collect();
        let _ = writeln!(csv, "{mu},{acc},{}", per.join(","));
    }
    let csv = with_hash(&ckpt.config.hash(), &csv);
    match &a.out {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    let (mu, acc) = r.best();
    let summary = format!("argmax mu: {mu} (accuracy {acc})");
    if a.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn run_export(a: ExportArgs) -> Result<ExitCode> {
    let (_, model) = open(&a.checkpoint)?;
    let format = match a.format {
        Format::Json => ExportFormat::Json,
        Format::Dot => ExportFormat::Dot,
    };
    let mut text = model.genotype()?.export(format);
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match &a.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
