use std::fmt::Write as _;

use super::config::{Mode, TrainConfig};
use super::history::RunHistory;
use crate::error::{Error, Result};

/// The six methods of the comparison table, in table order.
pub const TABLE_MODES: [Mode; 6] = [
    Mode::DartsOnly,
    Mode::DartsResample,
    Mode::BbnNaive,
    Mode::Hls,
    Mode::HlsReverseSigmoid,
    Mode::HlsContinuous,
];

/// Row label used in the table.
pub fn method_label(mode: Mode) -> &'static str {
    match mode {
        Mode::DartsOnly => "DARTS",
        Mode::DartsResample => "DARTS+Re-sampling",
        Mode::BbnNaive => "DARTS+BBN",
        Mode::Hls => "HLS",
        Mode::HlsReverseSigmoid => "HLS + Reverse Sigmoid",
        Mode::HlsContinuous => "HLS + Continuous Learning",
        Mode::HlsMuHalf => "HLS + mu=0.5 continuation",
        Mode::FrozenBackbone => "HLS + frozen backbone",
    }
}

/// Published full-scale top-1 accuracy (%) on long-tailed CIFAR-10 with
/// imbalance ratio 100. Reference only; desk-scale runs do not reproduce it.
pub fn reference_accuracy(mode: Mode) -> Option<f64> {
    match mode {
        Mode::DartsOnly => Some(64.56),
        Mode::DartsResample => Some(61.20),
        Mode::BbnNaive => Some(52.14),
        Mode::Hls => Some(65.12),
        Mode::HlsReverseSigmoid => Some(61.85),
        Mode::HlsContinuous => Some(63.12),
        Mode::HlsMuHalf | Mode::FrozenBackbone => None,
    }
}

/// `(mode, seed)` cells sharing one base configuration.
#[derive(Clone, Debug)]
pub struct ExperimentMatrix {
    pub base: TrainConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl ExperimentMatrix {
    pub fn new(base: TrainConfig, modes: Vec<Mode>, seeds: Vec<u64>) -> Result<Self> {
        let mut errors = Vec::new();
        if modes.is_empty() {
            errors.push("matrix needs at least one mode".to_string());
        }
        if seeds.is_empty() {
            errors.push("matrix needs at least one seed".to_string());
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        Ok(Self { base, modes, seeds })
    }

    /// Cells in mode-major order.
    pub fn cells(&self) -> Vec<(Mode, u64)> {
        self.modes
            .iter()
            .flat_map(|&m| self.seeds.iter().map(move |&s| (m, s)))
            .collect()
    }

    pub fn cell_config(&self, mode: Mode, seed: u64) -> Result<TrainConfig> {
        self.base.with_overrides(&[
            ("run.mode".into(), mode.name().into()),
            ("run.seed".into(), seed.to_string()),
        ])
    }
}

/// Final-epoch summary of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub mode: Mode,
    pub seed: u64,
    /// Balanced test accuracy at the best μ of the grid.
    pub best_mu_accuracy: f64,
    pub best_mu: f64,
    /// Balanced test accuracy at the μ selected on validation.
    pub val_selected_accuracy: f64,
    pub val_selected_mu: f64,
    pub late_alpha_displacement: f64,
}

impl CellResult {
    /// Displacement is taken over the final fifth of the main phase.
    pub fn from_history(history: &RunHistory) -> Result<Self> {
        let last = history
            .last()
            .ok_or_else(|| Error::invalid("CellResult::from_history", "history has no epochs"))?;
        let mode: Mode = history.mode.parse()?;
        let (best_mu, best_mu_accuracy) = last.test.best();
        Ok(Self {
            mode,
            seed: history.seed,
            best_mu_accuracy,
            best_mu,
            val_selected_accuracy: last.test_at_best_mu(),
            val_selected_mu: last.best_mu(),
            late_alpha_displacement: history.late_alpha_displacement(0.2),
        })
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    pub mode: Mode,
    pub seeds: usize,
    pub best_mu_mean: f64,
    pub best_mu_std: f64,
    pub val_selected_mean: f64,
    pub val_selected_std: f64,
    pub displacement_mean: f64,
    pub reference: Option<f64>,
}

/// One row per mode, in the order modes first appear.
pub fn summarize(results: &[CellResult]) -> Vec<MatrixRow> {
    let mut modes: Vec<Mode> = Vec::new();
    for r in results {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    modes
        .into_iter()
        .map(|mode| {
            let cell: Vec<&CellResult> = results.iter().filter(|r| r.mode == mode).collect();
            let pick = |f: fn(&CellResult) -> f64| cell.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (best_mu_mean, best_mu_std) = mean_std(&pick(|r| r.best_mu_accuracy));
            let (val_selected_mean, val_selected_std) =
                mean_std(&pick(|r| r.val_selected_accuracy));
            MatrixRow {
                mode,
                seeds: cell.len(),
                best_mu_mean,
                best_mu_std,
                val_selected_mean,
                val_selected_std,
                displacement_mean: mean_std(&pick(|r| r.late_alpha_displacement)).0,
                reference: reference_accuracy(mode),
            }
        })
        .collect()
}

const MATRIX_HEADER: &str = "method,mode,seeds,best_mu_acc_mean,best_mu_acc_std,val_selected_acc_mean,val_selected_acc_std,late_alpha_displacement_mean,reference_acc_full_scale,reference_status";

/// Accuracies are percentages. The reference column holds published
/// full-scale numbers and is marked as not reproduced.
pub fn matrix_csv(rows: &[MatrixRow], config_hash: &str) -> String {
    let mut s = format!("# config-hash: {config_hash}\n{MATRIX_HEADER}\n");
    for r in rows {
        let reference = r.reference.map_or(String::new(), |v| format!("{v:.2}"));
        let _ = writeln!(
            s,
            "{},{},{},{:.2},{:.2},{:.2},{:.2},{:.6},{},{}",
            method_label(r.mode),
            r.mode,
            r.seeds,
            100.0 * r.best_mu_mean,
            100.0 * r.best_mu_std,
            100.0 * r.val_selected_mean,
            100.0 * r.val_selected_std,
            r.displacement_mean,
            reference,
            if r.reference.is_some() {
                "NOT reproduced at desk scale"
            } else {
                ""
            },
        );
    }
    s
}

/// Fixed-width text rendering of [`matrix_csv`].
pub fn matrix_table(rows: &[MatrixRow]) -> String {
    let mut s = format!(
        "{:<27} {:>5} {:>16} {:>16} {:>10}\n",
        "method", "seeds", "best-mu acc %", "val-mu acc %", "ref %*"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<27} {:>5} {:>7.2} ± {:<6.2} {:>7.2} ± {:<6.2} {:>10}",
            method_label(r.mode),
            r.seeds,
            100.0 * r.best_mu_mean,
            100.0 * r.best_mu_std,
            100.0 * r.val_selected_mean,
            100.0 * r.val_selected_std,
            r.reference.map_or("-".to_string(), |v| format!("{v:.2}")),
        );
    }
    s.push_str(
        "* published full-scale long-tailed CIFAR-10 results, NOT reproduced at desk scale\n",
    );
    s
}
