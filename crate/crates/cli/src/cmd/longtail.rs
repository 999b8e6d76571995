use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use ltdarts::data::{
    build_longtail, load_cifar10_dir, make_synthetic, LabeledImageSet, LongTailSpec, SyntheticSpec,
};
use ltdarts::train::content_hash;

use crate::io::{create_dir, with_hash, write_atomic};
use crate::{UsageError, DATA_DIR_ENV};

#[derive(clap::Args)]
pub struct Args {
    /// CIFAR-10 binary directory, or `synthetic:C,n,H` (C classes of n
    /// H×H images). Defaults to $LTDARTS_DATA_DIR.
    #[arg(long)]
    input: Option<String>,

    #[arg(long, default_value_t = 100.0)]
    imbalance_ratio: f64,

    /// Head-class count; defaults to the smallest class of the input.
    #[arg(long)]
    base_count: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output directory for manifest.json and summary.csv.
    #[arg(long)]
    out: PathBuf,
}

fn parse_synthetic(spec: &str, seed: u64) -> Result<SyntheticSpec> {
    let bad = || UsageError(format!("expected synthetic:C,n,H, got {spec:?}"));
    let nums: Vec<usize> = spec
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [classes, n, size] = nums[..] else {
        return Err(bad().into());
    };
    Ok(SyntheticSpec::new(classes, n, size, seed))
}

fn load_input(input: &str, seed: u64) -> Result<LabeledImageSet> {
    match input.strip_prefix("synthetic:") {
        Some(spec) => Ok(make_synthetic(&parse_synthetic(spec, seed)?)?),
        None => {
            let (train, _) = load_cifar10_dir(Path::new(input))
                .with_context(|| format!("loading CIFAR-10 from {input}"))?;
            Ok(train)
        }
    }
}

pub fn run(a: Args) -> Result<ExitCode> {
    let input = match a.input {
        Some(i) => i,
        None => std::env::var(DATA_DIR_ENV)
            .map_err(|_| UsageError(format!("--input is required when {DATA_DIR_ENV} is unset")))?,
    };
    let ds = load_input(&input, a.seed)?;
    let available = ds.counts();
    let base = a
        .base_count
        .unwrap_or_else(|| available.iter().copied().min().unwrap_or(0));
    let spec = LongTailSpec::new(a.imbalance_ratio, base, ds.classes())?;
    let (_, manifest) = build_longtail(&ds, &spec, a.seed)?;

    let args_text = format!(
        "input = {input}\nimbalance_ratio = {}\nbase_count = {base}\nseed = {}\n",
        a.imbalance_ratio, a.seed
    );
    let mut summary = String::from("class,available,retained\n");
    for (c, (have, kept)) in available.iter().zip(&manifest.counts).enumerate() {
        let _ = writeln!(summary, "{c},{have},{kept}");
    }
    create_dir(&a.out)?;
    write_atomic(&a.out.join("manifest.json"), manifest.to_json()?.as_bytes())?;
    write_atomic(
        &a.out.join("summary.csv"),
        with_hash(&content_hash(&args_text), &summary).as_bytes(),
    )?;
    println!("retained per class: {:?}", manifest.counts);
    println!("total: {}", manifest.counts.iter().sum::<usize>());
    Ok(ExitCode::SUCCESS)
}
