use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};
use ltdarts::train::{
    matrix_csv, matrix_table, prepare_data, summarize, train, CellResult, ExperimentMatrix, Mode,
    TABLE_MODES,
};

use super::train::write_history;
use crate::io::{create_dir, list_arg, write_atomic, ConfigArgs, List};

#[derive(clap::Args)]
pub struct Args {
    #[command(flatten)]
    config: ConfigArgs,

    /// Comma-separated run seeds.
    #[arg(long, default_value = "0,1,2,3,4", value_parser = list_arg::<u64>)]
    seeds: List<u64>,

    /// Comma-separated modes; defaults to the six table methods.
    #[arg(long, value_parser = list_arg::<Mode>)]
    modes: Option<List<Mode>>,

    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,

    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> Result<ExitCode> {
    let base = a.config.resolve(None, None)?;
    let modes = a.modes.map_or_else(|| TABLE_MODES.to_vec(), |m| m.0);
    let matrix = ExperimentMatrix::new(base.clone(), modes, a.seeds.0)?;
    let cells = matrix.cells();
    for &(m, s) in &cells {
        matrix.cell_config(m, s)?;
    }
    create_dir(&a.out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult>>>> =
        Mutex::new(cells.iter().map(|_| None).collect());
    let run_cell = |i: usize| -> Result<CellResult> {
        let (mode, seed) = cells[i];
        let cfg = matrix.cell_config(mode, seed)?;
        let dir = a.out.join(mode.name()).join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let data = prepare_data(&cfg)?;
        let (_, history) = train(&cfg, &data).with_context(|| format!("{mode} seed {seed}"))?;
        write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
        write_history(&dir, &history)?;
        let r = CellResult::from_history(&history)?;
        eprintln!(
            "{mode} seed {seed}: best-mu acc {:.4}, val-mu acc {:.4}, late alpha displacement {:.5}",
            r.best_mu_accuracy, r.val_selected_accuracy, r.late_alpha_displacement
        );
        Ok(r)
    };
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell(i);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });

    let results: Vec<CellResult> = results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(anyhow!("cell did not run"))))
        .collect::<Result<_>>()?;
    let rows = summarize(&results);
    write_atomic(
        &a.out.join("matrix.csv"),
        matrix_csv(&rows, &base.hash()).as_bytes(),
    )?;
    print!("{}", matrix_table(&rows));
    Ok(ExitCode::SUCCESS)
}
