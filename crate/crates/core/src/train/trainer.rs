use std::path::Path;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bilevel::{arch_step, weight_step, ComponentLrs, OptimConfig, StepBatch};
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{Branches, ContinuationKind, DataSourceKind, TrainConfig};
use super::eval::{evaluate, EvalReport};
use super::history::{EpochRecord, InitialEval, RunHistory};
use crate::bbn::{BbnModel, BilateralBatch};
use crate::data::{
    augment, build_longtail, channel_stats, load_cifar10_dir, make_synthetic, normalize,
    split_train_val, AugmentConfig, BatchSampler, LabeledImageSet, LongTailManifest, LongTailSpec,
    SamplerKind, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::param::Role;
use crate::schedule::{cosine_anneal, hls_scale};
use crate::tensor::{l2_norm, Tensor};

/// Seed offset separating the balanced test set from the training pool.
const TEST_SEED_OFFSET: u64 = 0x7E57;

/// Independent RNG streams of one epoch.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
enum Stream {
    Model = 0,
    TrainIns = 1,
    TrainCls = 2,
    ValIns = 3,
    ValCls = 4,
    Augment = 5,
}

/// A 64-bit seed determined by `(seed, epoch, stream)` alone.
pub fn derive_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&stream.to_le_bytes());
    ChaCha8Rng::from_seed(key).next_u64()
}

/// Splits used by one run. `val`, `test` and `train_eval` hold normalized
/// images; `train` holds raw images for augmentation.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: LabeledImageSet,
    pub train_eval: LabeledImageSet,
    pub val: LabeledImageSet,
    pub test: LabeledImageSet,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub manifest: LongTailManifest,
}

fn normalized(ds: &LabeledImageSet, mean: &[f64], std: &[f64]) -> Result<LabeledImageSet> {
    LabeledImageSet::new(
        normalize(ds.images(), mean, std)?,
        ds.labels().to_vec(),
        ds.classes(),
    )
}

/// Build the long-tailed pool, split it, and attach a balanced test set.
pub fn prepare_data(cfg: &TrainConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let (pool, test) = match d.source {
        DataSourceKind::Synthetic => {
            let spec = SyntheticSpec {
                classes: d.classes,
                n_per_class: d.base_count,
                size: d.size,
                noise: d.noise,
                seed: d.seed,
            };
            let test_spec = SyntheticSpec {
                n_per_class: d.test_per_class,
                seed: d.seed.wrapping_add(TEST_SEED_OFFSET),
                ..spec
            };
            (make_synthetic(&spec)?, make_synthetic(&test_spec)?)
        }
        DataSourceKind::Cifar10 => load_cifar10_dir(Path::new(&d.dir))?,
    };
    let spec = LongTailSpec::new(d.imbalance_ratio, d.base_count, pool.classes())?;
    let (longtail, manifest) = build_longtail(&pool, &spec, d.seed)?;
    let (train, val) = split_train_val(&longtail, d.split, d.seed)?;
    let (mean, std) = channel_stats(&longtail);
    let std: Vec<f64> = std
        .into_iter()
        .map(|s| if s > 0.0 { s } else { 1.0 })
        .collect();
    Ok(Datasets {
        train_eval: normalized(&train, &mean, &std)?,
        val: normalized(&val, &mean, &std)?,
        test: normalized(&test, &mean, &std)?,
        train,
        mean,
        std,
        manifest,
    })
}

/// A bilateral batch of `cfg.batch_size` rows per branch from the normalized
/// training split, for gradient probes.
pub fn probe_batch(cfg: &TrainConfig, data: &Datasets) -> Result<BilateralBatch> {
    let s = |stream: Stream| derive_seed(cfg.seed, 0, stream as u64);
    let b = cfg.batch_size;
    let (x_ins, y_ins) = BatchSampler::new(SamplerKind::Instance, b, s(Stream::TrainIns))
        .sample(&data.train_eval)?;
    let (x_cls, y_cls) = BatchSampler::new(SamplerKind::ClassBalanced, b, s(Stream::TrainCls))
        .sample(&data.train_eval)?;
    Ok(BilateralBatch {
        x_ins,
        y_ins,
        x_cls,
        y_cls,
    })
}

pub fn init_model(cfg: &TrainConfig) -> Result<BbnModel> {
    BbnModel::new(
        cfg.model.clone(),
        derive_seed(cfg.seed, 0, Stream::Model as u64),
    )
}

/// Learning rates and mixing ratio of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochPlan {
    pub continuation: bool,
    pub mu: f64,
    pub weights: ComponentLrs,
    pub arch: ComponentLrs,
}

impl EpochPlan {
    pub fn for_epoch(cfg: &TrainConfig, t: usize) -> Result<Self> {
        let (continuation, mu, lr_w) = if t <= cfg.epochs {
            let mu = match cfg.branches {
                Branches::Single => 1.0,
                Branches::Bilateral => cfg.mixing.mu(t)?,
            };
            (
                false,
                mu,
                cosine_anneal(cfg.lr, (t - 1) as f64, cfg.epochs as f64),
            )
        } else {
            let s = t - cfg.epochs;
            let mu = if cfg.continuation == ContinuationKind::MuHalf {
                0.5
            } else {
                0.0
            };
            let n = cfg.continuation_epochs() as f64;
            (true, mu, cosine_anneal(cfg.lr, (s - 1) as f64, n))
        };
        let arch_bb = match &cfg.hls {
            Some(h) => hls_scale(h, mu),
            None => cfg.arch_lr,
        };
        let frozen = continuation && cfg.continuation == ContinuationKind::FrozenBackbone;
        let bb = |lr: f64| if frozen { 0.0 } else { lr };
        Ok(Self {
            continuation,
            mu,
            weights: ComponentLrs {
                backbone: bb(lr_w),
                heads: lr_w,
            },
            arch: ComponentLrs {
                backbone: bb(arch_bb),
                heads: cfg.arch_lr,
            },
        })
    }
}

struct Samplers {
    train_ins: BatchSampler,
    train_cls: BatchSampler,
    val_ins: BatchSampler,
    val_cls: BatchSampler,
    augment_seed: u64,
}

impl Samplers {
    fn for_epoch(cfg: &TrainConfig, t: usize) -> Self {
        let s = |stream: Stream| derive_seed(cfg.seed, t, stream as u64);
        let (ins_kind, cls_kind) = match cfg.branches {
            Branches::Single => (cfg.data.single_sampler, cfg.data.single_sampler),
            Branches::Bilateral => (SamplerKind::Instance, SamplerKind::ClassBalanced),
        };
        let b = cfg.batch_size;
        Self {
            train_ins: BatchSampler::new(ins_kind, b, s(Stream::TrainIns)),
            train_cls: BatchSampler::new(cls_kind, b, s(Stream::TrainCls)),
            val_ins: BatchSampler::new(ins_kind, b, s(Stream::ValIns)),
            val_cls: BatchSampler::new(cls_kind, b, s(Stream::ValCls)),
            augment_seed: s(Stream::Augment),
        }
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Datasets,
    model: BbnModel,
    history: RunHistory,
    augment: AugmentConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Datasets) -> Result<Self> {
        let model = init_model(cfg)?;
        Ok(Self {
            history: RunHistory::new(cfg.hash(), cfg.mode.name().to_string(), cfg.seed),
            augment: AugmentConfig {
                pad: cfg.data.pad,
                crop: None,
                flip: cfg.data.flip,
                mean: data.mean.clone(),
                std: data.std.clone(),
            },
            cfg: cfg.clone(),
            data,
            model,
        })
    }

    /// Continue a run from its checkpoint.
    pub fn resume(cfg: &TrainConfig, data: &'a Datasets, checkpoint: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        let (epoch, history) = load_checkpoint(checkpoint, cfg, &mut t.model)?;
        if history.epochs.len() != epoch {
            return Err(Error::Checkpoint(format!(
                "history has {} epochs, header says {epoch}",
                history.epochs.len()
            )));
        }
        t.history = history;
        Ok(t)
    }

    pub fn model(&self) -> &BbnModel {
        &self.model
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn into_parts(self) -> (BbnModel, RunHistory) {
        (self.model, self.history)
    }

    pub fn completed_epochs(&self) -> usize {
        self.history.epochs.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.cfg.batch_size)
    }

    fn eval_all(&self) -> Result<(EvalReport, EvalReport, EvalReport)> {
        let grid = self.cfg.mu_grid();
        let run = |ds: &LabeledImageSet| evaluate(&self.model, ds.images(), ds.labels(), &grid);
        Ok((
            run(&self.data.train_eval)?,
            run(&self.data.val)?,
            run(&self.data.test)?,
        ))
    }

    fn draw(
        &self,
        sampler: &mut BatchSampler,
        ds: &LabeledImageSet,
        aug_seed: Option<u64>,
    ) -> Result<(Tensor, Vec<usize>)> {
        let (x, y) = sampler.sample(ds)?;
        match aug_seed {
            Some(seed) => Ok((augment(&x, &self.augment, seed)?, y)),
            None => Ok((x, y)),
        }
    }

    /// Train epoch `t` (1-based) and append its record.
    pub fn run_epoch(&mut self, t: usize) -> Result<&EpochRecord> {
        let cfg = &self.cfg;
        let plan = EpochPlan::for_epoch(cfg, t)?;
        let mut s = Samplers::for_epoch(cfg, t);
        let single = cfg.branches == Branches::Single;
        let w_opt = OptimConfig {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let a_opt = OptimConfig {
            momentum: cfg.arch_momentum,
            weight_decay: cfg.arch_weight_decay,
        };
        let xi = cfg.virtual_lr.unwrap_or(plan.weights.heads);
        let alpha_before = self.model.store.flatten_values(&[Role::ArchBackbone]);
        let (mut train_loss, mut val_loss, mut grad_norm) = (0.0, 0.0, 0.0);
        let n_batches = self.batches_per_epoch();
        for b in 0..n_batches {
            let aug = derive_seed(s.augment_seed, b, 0);
            let (xi_ins, yi_ins) = self.draw(&mut s.train_ins, &self.data.train, Some(aug))?;
            let (xi_cls, yi_cls) = if single {
                (xi_ins.clone(), yi_ins.clone())
            } else {
                self.draw(
                    &mut s.train_cls,
                    &self.data.train,
                    Some(derive_seed(s.augment_seed, b, 1)),
                )?
            };
            let (xv_ins, yv_ins) = self.draw(&mut s.val_ins, &self.data.val, None)?;
            let (xv_cls, yv_cls) = if single {
                (xv_ins.clone(), yv_ins.clone())
            } else {
                self.draw(&mut s.val_cls, &self.data.val, None)?
            };
            let train = StepBatch {
                x_ins: &xi_ins,
                y_ins: &yi_ins,
                x_cls: &xi_cls,
                y_cls: &yi_cls,
            };
            let val = StepBatch {
                x_ins: &xv_ins,
                y_ins: &yv_ins,
                x_cls: &xv_cls,
                y_cls: &yv_cls,
            };
            let a = arch_step(
                &mut self.model,
                &val,
                &train,
                plan.mu,
                plan.arch,
                a_opt,
                cfg.order,
                xi,
            )?;
            let (loss, norm) = weight_step(&mut self.model, &train, plan.mu, plan.weights, w_opt)?;
            if !loss.is_finite() || !a.val_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: t,
                    batch: b,
                    detail: format!("train loss {loss}, val loss {}, mu {}", a.val_loss, plan.mu),
                });
            }
            train_loss += loss;
            val_loss += a.val_loss;
            grad_norm += norm;
        }
        let alpha_after = self.model.store.flatten_values(&[Role::ArchBackbone]);
        let step: Vec<f64> = alpha_after
            .iter()
            .zip(&alpha_before)
            .map(|(a, b)| a - b)
            .collect();
        let (train, val, test) = self.eval_all()?;
        let n = n_batches as f64;
        let record = EpochRecord {
            epoch: t,
            phase: if plan.continuation {
                "continuation"
            } else {
                "main"
            }
            .to_string(),
            mu: plan.mu,
            lr_w: plan.weights.heads,
            lr_arch_bb: plan.arch.backbone,
            lr_arch_heads: plan.arch.heads,
            train_loss: train_loss / n,
            val_loss: val_loss / n,
            bb_grad_norm: grad_norm / n,
            alpha_bb_step: l2_norm(&step),
            train,
            val,
            test,
            genotype: self.model.genotype()?,
        };
        info!(
            "epoch {t}: mu={:.3} loss={:.4} val_loss={:.4} best_mu={} test@best={:.3}",
            record.mu,
            record.train_loss,
            record.val_loss,
            record.best_mu(),
            record.test_at_best_mu()
        );
        self.history.epochs.push(record);
        Ok(self.history.epochs.last().expect("just pushed"))
    }

    /// Train through the remaining epochs, optionally checkpointing after
    /// each one and stopping once `stop_after` epochs are complete.
    pub fn run(&mut self, checkpoint: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
        if self.history.initial.is_none() {
            let (train, val, test) = self.eval_all()?;
            self.history.initial = Some(InitialEval { train, val, test });
        }
        let total = self.cfg.total_epochs();
        let last = stop_after.map_or(total, |k| k.min(total));
        for t in self.completed_epochs() + 1..=last {
            self.run_epoch(t)?;
            if let Some(path) = checkpoint {
                save_checkpoint(path, &self.cfg, &self.model.store, t, &self.history)?;
            }
        }
        Ok(())
    }
}

/// Run a full search from scratch.
pub fn train(cfg: &TrainConfig, data: &Datasets) -> Result<(BbnModel, RunHistory)> {
    let mut t = Trainer::new(cfg, data)?;
    t.run(None, None)?;
    Ok(t.into_parts())
}
