use std::process::ExitCode;

use anyhow::Result;
use ltdarts::gradcheck::{operator_suite, supernet_check, GradCheckReport, DEFAULT_TOLERANCE};

use crate::io::ConfigArgs;

#[derive(clap::Args)]
pub struct Args {
    #[command(flatten)]
    config: ConfigArgs,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Random supernet coordinates to check.
    #[arg(long, default_value_t = 20)]
    coords: usize,
}

pub fn run(a: Args) -> Result<ExitCode> {
    let cfg = a.config.resolve(None, None)?;
    let mut overall = GradCheckReport::default();
    for (name, r) in operator_suite(a.seed)? {
        println!(
            "{name:<28} {:>5} checks  max rel err {:.3e}",
            r.checked, r.max_rel_err
        );
        overall.merge(r);
    }
    let r = supernet_check(&cfg.model, cfg.data.size, a.coords, a.seed)?;
    println!(
        "{:<28} {:>5} checks  max rel err {:.3e}  (worst {})",
        "supernet", r.checked, r.max_rel_err, r.worst
    );
    overall.merge(r);
    println!(
        "max rel err: {:.3e} at {} ({} checks)",
        overall.max_rel_err, overall.worst, overall.checked
    );
    if overall.passes(DEFAULT_TOLERANCE) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("FAIL: max rel err >= {DEFAULT_TOLERANCE:e}");
        Ok(ExitCode::from(1))
    }
}
