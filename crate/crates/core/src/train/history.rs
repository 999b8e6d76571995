use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::EvalReport;
use crate::error::Result;
use crate::nas::Genotype;

/// Metrics of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `main` or `continuation`.
    pub phase: String,
    pub mu: f64,
    pub lr_w: f64,
    pub lr_arch_bb: f64,
    pub lr_arch_heads: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean norm of the backbone-weight gradient over the epoch's batches.
    pub bb_grad_norm: f64,
    /// ‖α_bb after the epoch − α_bb before it‖₂.
    pub alpha_bb_step: f64,
    pub train: EvalReport,
    pub val: EvalReport,
    pub test: EvalReport,
    pub genotype: Genotype,
}

impl EpochRecord {
    /// Test-time μ chosen on the validation split.
    pub fn best_mu(&self) -> f64 {
        self.val.best().0
    }

    /// Balanced test accuracy at the validation-selected μ.
    pub fn test_at_best_mu(&self) -> f64 {
        self.test.accuracy[self.val.best_index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub config_hash: String,
    pub mode: String,
    pub seed: u64,
    /// Evaluation before any update.
    pub initial: Option<InitialEval>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialEval {
    pub train: EvalReport,
    pub val: EvalReport,
    pub test: EvalReport,
}

const CSV_HEADER: &str = "epoch,phase,mu,lr_w,lr_arch_bb,lr_arch_heads,train_loss,val_loss,train_acc,val_acc,best_mu,test_acc_best_mu,test_acc_best,test_acc_mu0,test_acc_mu1,bb_grad_norm,alpha_bb_step";

impl RunHistory {
    pub fn new(config_hash: String, mode: String, seed: u64) -> Self {
        Self {
            config_hash,
            mode,
            seed,
            initial: None,
            epochs: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Sum of per-epoch backbone-logit displacements over the last
    /// `ceil(fraction · n_main)` epochs of the main phase.
    pub fn late_alpha_displacement(&self, fraction: f64) -> f64 {
        let main: Vec<&EpochRecord> = self.epochs.iter().filter(|e| e.phase == "main").collect();
        let k = ((main.len() as f64 * fraction).ceil() as usize).min(main.len());
        main[main.len() - k..].iter().map(|e| e.alpha_bb_step).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# config-hash: {}\n{CSV_HEADER}\n", self.config_hash);
        for e in &self.epochs {
            let (best_mu, val_acc) = e.val.best();
            let best_i = e.val.best_index();
            let nan = f64::NAN;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.phase,
                e.mu,
                e.lr_w,
                e.lr_arch_bb,
                e.lr_arch_heads,
                e.train_loss,
                e.val_loss,
                e.train.accuracy[best_i],
                val_acc,
                best_mu,
                e.test.accuracy[best_i],
                e.test.best().1,
                e.test.accuracy_at(0.0).unwrap_or(nan),
                e.test.accuracy_at(1.0).unwrap_or(nan),
                e.bb_grad_norm,
                e.alpha_bb_step,
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One `{"epoch": t, "genotype": ...}` object per line.
    pub fn genotypes_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            let line = serde_json::json!({ "epoch": e.epoch, "genotype": e.genotype });
            s.push_str(&serde_json::to_string(&line)?);
            s.push('\n');
        }
        Ok(s)
    }
}
