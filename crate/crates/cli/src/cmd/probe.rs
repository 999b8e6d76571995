use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use ltdarts::bbn::gradient_probe;
use ltdarts::train::{init_model, prepare_data, probe_batch};
use ltdarts::Role;

use crate::io::{list_arg, with_hash, write_atomic, ConfigArgs, List};
use crate::UsageError;

/// Bound on the linearity and clone-head residuals.
pub const PROBE_TOLERANCE: f64 = 1e-10;

#[derive(clap::Args)]
pub struct Args {
    #[command(flatten)]
    config: ConfigArgs,

    #[arg(long)]
    seed: Option<u64>,

    /// Comma-separated mixing ratios.
    #[arg(long, default_value = "0,0.25,0.5,0.75,1", value_parser = list_arg::<f64>)]
    mu_list: List<f64>,

    /// Copy the instance head into the class head and feed both branches
    /// the instance batch.
    #[arg(long)]
    clone_heads: bool,

    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<ExitCode> {
    let mus = a.mu_list.0;
    if let Some(m) = mus.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(UsageError(format!("--mu-list values must lie in [0, 1], got {m}")).into());
    }
    let cfg = a.config.resolve(None, a.seed)?;
    let data = prepare_data(&cfg)?;
    let mut batch = probe_batch(&cfg, &data)?;
    let mut model = init_model(&cfg)?;
    if a.clone_heads {
        model.clone_ins_head_into_cls();
        batch.x_cls = batch.x_ins.clone();
        batch.y_cls = batch.y_ins.clone();
    }
    let report = gradient_probe(&mut model, &batch, &mus)?;

    let linearity = report.max_linearity_residual();
    let mut csv = String::new();
    let _ = writeln!(csv, "# clone-heads: {}", a.clone_heads);
    let _ = writeln!(csv, "# max-linearity-residual: {linearity:e}");
    let _ = writeln!(csv, "# backbone-mu-spread: {:e}", report.backbone_mu_spread);
    let _ = writeln!(csv, "# backbone-norm-ratio: {}", report.backbone_norm_ratio);
    csv.push_str(
        "mu,role,loss,grad_norm,linearity_residual,mixed_form_grad_norm,mixed_form_residual\n",
    );
    for e in &report.entries {
        for role in Role::ALL {
            let _ = writeln!(
                csv,
                "{},{},{},{},{:e},{},{:e}",
                e.mu,
                role.name(),
                e.loss,
                e.norms[&role],
                e.linearity_residual[&role],
                e.mixed_form_norms[&role],
                e.mixed_form_residual[&role],
            );
        }
    }
    let csv = with_hash(&cfg.hash(), &csv);
    match &a.out {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }

    let mut failed = Vec::new();
    if linearity >= PROBE_TOLERANCE {
        failed.push(format!(
            "linearity residual {linearity:e} >= {PROBE_TOLERANCE:e}"
        ));
    }
    if a.clone_heads && report.backbone_mu_spread >= PROBE_TOLERANCE {
        failed.push(format!(
            "clone-head backbone spread {:e} >= {PROBE_TOLERANCE:e}",
            report.backbone_mu_spread
        ));
    }
    eprintln!("max linearity residual: {linearity:e}");
    eprintln!("backbone mu spread: {:e}", report.backbone_mu_spread);
    eprintln!(
        "backbone norm ratio (max/min over mu): {}",
        report.backbone_norm_ratio
    );
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in failed {
            eprintln!("FAIL: {f}");
        }
        Ok(ExitCode::from(1))
    }
}
