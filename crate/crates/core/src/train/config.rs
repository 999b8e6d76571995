//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::bbn::ModelConfig;
use crate::data::SamplerKind;
use crate::error::{Error, Result};
use crate::nas::OpSet;
use crate::schedule::{HlsConfig, MixingKind, MixingSchedule};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$var),)+
                    _ => Err(Error::invalid(stringify!($name), format!(
                        "unknown value {s:?}; expected one of {}",
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(
    /// Training variants compared in the mode matrix.
    Mode {
        DartsOnly => "darts-only",
        DartsResample => "darts-resample",
        BbnNaive => "bbn-naive",
        Hls => "hls",
        HlsReverseSigmoid => "hls-reverse-sigmoid",
        HlsContinuous => "hls-continuous",
        HlsMuHalf => "hls-mu-half",
        FrozenBackbone => "frozen-backbone",
    }
);

named_enum!(ArchOrder { First => "first", Second => "second" });

named_enum!(Branches { Single => "single", Bilateral => "bilateral" });

named_enum!(
    /// Extra phase appended after the main schedule.
    ContinuationKind {
        None => "none",
        MuZero => "mu-zero",
        MuHalf => "mu-half",
        FrozenBackbone => "frozen-backbone",
    }
);

named_enum!(DataSourceKind { Synthetic => "synthetic", Cifar10 => "cifar10" });

impl Mode {
    /// The settings a mode overrides, as `key = value` pairs.
    pub fn overrides(self) -> Vec<(&'static str, &'static str)> {
        let single = |sampler| {
            vec![
                ("model.branches", "single"),
                ("data.single_sampler", sampler),
                ("schedule.mixing", "constant"),
                ("schedule.mu", "1"),
                ("hls.enabled", "false"),
                ("continuation.kind", "none"),
            ]
        };
        let bilateral = |mixing, hls, cont| {
            vec![
                ("model.branches", "bilateral"),
                ("schedule.mixing", mixing),
                ("hls.enabled", hls),
                ("continuation.kind", cont),
            ]
        };
        match self {
            Mode::DartsOnly => single("instance"),
            Mode::DartsResample => single("class-balanced"),
            Mode::BbnNaive => bilateral("parabolic", "false", "none"),
            Mode::Hls => bilateral("parabolic", "true", "none"),
            Mode::HlsReverseSigmoid => bilateral("reverse-sigmoid", "true", "none"),
            Mode::HlsContinuous => bilateral("parabolic", "true", "mu-zero"),
            Mode::HlsMuHalf => bilateral("parabolic", "true", "mu-half"),
            Mode::FrozenBackbone => bilateral("parabolic", "true", "frozen-backbone"),
        }
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn content_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Keys that some mode sets.
pub fn mode_controlled_keys() -> Vec<&'static str> {
    let mut keys: Vec<&str> = Mode::ALL
        .iter()
        .flat_map(|m| m.overrides())
        .map(|(k, _)| k)
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Every recognised key with its default (the desk-scale benchmark).
pub const DEFAULTS: &[(&str, &str)] = &[
    ("arch.lr", "0.01"),
    ("arch.momentum", "0.9"),
    ("arch.order", "first"),
    ("arch.virtual_lr", "auto"),
    ("arch.weight_decay", "0.001"),
    ("continuation.epochs", "auto"),
    ("continuation.kind", "none"),
    ("data.augment.flip", "false"),
    ("data.augment.pad", "1"),
    ("data.base_count", "150"),
    ("data.classes", "3"),
    ("data.dir", ""),
    ("data.imbalance_ratio", "10"),
    ("data.noise", "0.5"),
    ("data.seed", "0"),
    ("data.single_sampler", "instance"),
    ("data.size", "8"),
    ("data.source", "synthetic"),
    ("data.split", "0.8"),
    ("data.test_per_class", "100"),
    ("eval.grid_step", "0.1"),
    ("hls.enabled", "true"),
    ("hls.tau", "5"),
    ("model.branches", "bilateral"),
    ("model.layers", "4"),
    ("model.nodes", "5"),
    ("model.ops", "desk"),
    ("model.reduction_width_mult", "1"),
    ("model.width", "8"),
    ("run.mode", "hls"),
    ("run.seed", "0"),
    ("schedule.k", "6"),
    ("schedule.mixing", "parabolic"),
    ("schedule.mu", "1"),
    ("train.batch_size", "16"),
    ("train.epochs", "20"),
    ("train.lr", "0.05"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0.0003"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSourceKind,
    pub dir: String,
    pub classes: usize,
    pub size: usize,
    pub noise: f64,
    /// Head-class size before the long tail is applied.
    pub base_count: usize,
    pub test_per_class: usize,
    pub imbalance_ratio: f64,
    pub split: f64,
    pub seed: u64,
    pub pad: usize,
    pub flip: bool,
    pub single_sampler: SamplerKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub branches: Branches,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arch_lr: f64,
    pub arch_momentum: f64,
    pub arch_weight_decay: f64,
    pub order: ArchOrder,
    /// Virtual-step learning rate for the second-order update; `None` follows the weight LR.
    pub virtual_lr: Option<f64>,
    pub mixing: MixingSchedule,
    pub hls: Option<HlsConfig>,
    pub continuation: ContinuationKind,
    pub continuation_epochs: usize,
    pub grid_step: f64,
    canonical: BTreeMap<String, String>,
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or("")
    }

    fn get<T: FromStr>(&mut self, key: &str, fallback: T) -> T
    where
        T::Err: fmt::Display,
    {
        match self.raw(key).parse() {
            Ok(v) => v,
            Err(e) => {
                self.errors
                    .push(format!("{key}: cannot parse {:?}: {e}", self.raw(key)));
                fallback
            }
        }
    }

    /// `None` for the literal `auto`.
    fn auto<T: FromStr + Default>(&mut self, key: &str) -> Option<T>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            "auto" => None,
            _ => Some(self.get(key, T::default())),
        }
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.errors.push(msg());
        }
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                out.push((k.trim().to_string(), v.trim().to_string()))
            }
            _ => errors.push(format!(
                "line {}: expected `key = value`, got {line:?}",
                n + 1
            )),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(errors))
    }
}

impl TrainConfig {
    /// The desk-scale benchmark in the given mode.
    pub fn desk(mode: Mode) -> Self {
        Self::from_pairs(&[("run.mode".into(), mode.name().into())]).expect("defaults are valid")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_kv(text)?)
    }

    /// Defaults, then `pairs` in order, then the overrides of the resulting
    /// mode. Setting a key the mode controls to a different value is an error.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut errors = Vec::new();
        for (k, v) in pairs {
            if map.contains_key(k) {
                map.insert(k.clone(), v.clone());
            } else {
                errors.push(format!("unknown key {k:?}"));
            }
        }
        if let Ok(mode) = map["run.mode"].parse::<Mode>() {
            for (k, v) in mode.overrides() {
                if let Some((_, user)) = pairs.iter().rev().find(|(pk, _)| pk == k) {
                    if user != v {
                        errors.push(format!(
                            "{k} = {user} conflicts with run.mode = {mode}, which sets it to {v}"
                        ));
                    }
                }
                map.insert(k.to_string(), v.to_string());
            }
        }
        match Self::from_map(map) {
            Ok(cfg) if errors.is_empty() => Ok(cfg),
            Ok(_) => Err(Error::Config(errors)),
            Err(Error::Config(more)) => {
                errors.extend(more);
                Err(Error::Config(errors))
            }
            Err(e) => Err(e),
        }
    }

    /// Apply more settings on top of this configuration. Changing `run.mode`
    /// resets every mode-controlled key.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut base = self.canonical.clone();
        if pairs.iter().any(|(k, _)| k == "run.mode") {
            for k in mode_controlled_keys() {
                base.remove(k);
            }
        }
        let mut all: Vec<(String, String)> = base.into_iter().collect();
        all.extend_from_slice(pairs);
        Self::from_pairs(&all)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let mut r = Reader {
            map: &map,
            errors: Vec::new(),
        };
        let mode: Mode = r.get("run.mode", Mode::Hls);
        let seed = r.get("run.seed", 0u64);
        let data = DataConfig {
            source: r.get("data.source", DataSourceKind::Synthetic),
            dir: r.raw("data.dir").to_string(),
            classes: r.get("data.classes", 3usize),
            size: r.get("data.size", 8usize),
            noise: r.get("data.noise", 0.5f64),
            base_count: r.get("data.base_count", 150usize),
            test_per_class: r.get("data.test_per_class", 100usize),
            imbalance_ratio: r.get("data.imbalance_ratio", 10f64),
            split: r.get("data.split", 0.8f64),
            seed: r.get("data.seed", 0u64),
            pad: r.get("data.augment.pad", 1usize),
            flip: r.get("data.augment.flip", false),
            single_sampler: r.get("data.single_sampler", SamplerKind::Instance),
        };
        let op_set = match OpSet::by_name(r.raw("model.ops")) {
            Ok(s) => s,
            Err(e) => {
                r.errors.push(format!("model.ops: {e}"));
                OpSet::desk()
            }
        };
        let model = ModelConfig {
            in_channels: if data.source == DataSourceKind::Cifar10 {
                3
            } else {
                1
            },
            classes: if data.source == DataSourceKind::Cifar10 {
                10
            } else {
                data.classes
            },
            width: r.get("model.width", 8usize),
            layers: r.get("model.layers", 4usize),
            n_nodes: r.get("model.nodes", 5usize),
            op_set,
            reduction_width_mult: r.get("model.reduction_width_mult", 1usize),
        };
        if let Err(Error::Config(errs)) = model.validate() {
            r.errors.extend(errs);
        }
        let epochs = r.get("train.epochs", 20usize);
        let mixing_kind = r.get("schedule.mixing", MixingKind::Parabolic);
        let k = r.get("schedule.k", 6f64);
        let mu = r.get("schedule.mu", 1f64);
        let mixing = MixingSchedule {
            kind: mixing_kind,
            total: epochs,
            k,
            constant: mu,
        };
        let arch_lr = r.get("arch.lr", 0.01f64);
        let tau = r.get("hls.tau", 5f64);
        let hls = if r.get("hls.enabled", true) {
            Some(HlsConfig { xi0: arch_lr, tau })
        } else {
            None
        };
        let continuation = r.get("continuation.kind", ContinuationKind::None);
        let continuation_epochs = r.auto::<usize>("continuation.epochs").unwrap_or(epochs / 2);
        let cfg = TrainConfig {
            mode,
            seed,
            branches: r.get("model.branches", Branches::Bilateral),
            epochs,
            batch_size: r.get("train.batch_size", 16usize),
            lr: r.get("train.lr", 0.05f64),
            momentum: r.get("train.momentum", 0.9f64),
            weight_decay: r.get("train.weight_decay", 3e-4f64),
            arch_lr,
            arch_momentum: r.get("arch.momentum", 0.9f64),
            arch_weight_decay: r.get("arch.weight_decay", 1e-3f64),
            order: r.get("arch.order", ArchOrder::First),
            virtual_lr: r.auto::<f64>("arch.virtual_lr"),
            mixing,
            hls,
            continuation,
            continuation_epochs,
            grid_step: r.get("eval.grid_step", 0.1f64),
            data,
            model,
            canonical: BTreeMap::new(),
        };

        let d = &cfg.data;
        r.check(epochs >= 1, || "train.epochs must be at least 1".into());
        r.check(cfg.batch_size >= 1, || {
            "train.batch_size must be at least 1".into()
        });
        for (key, v) in [
            ("train.lr", cfg.lr),
            ("train.weight_decay", cfg.weight_decay),
            ("arch.lr", cfg.arch_lr),
            ("arch.weight_decay", cfg.arch_weight_decay),
            ("data.noise", d.noise),
        ] {
            r.check(v >= 0.0 && v.is_finite(), || {
                format!("{key} must be a finite non-negative number, got {v}")
            });
        }
        for (key, v) in [
            ("train.momentum", cfg.momentum),
            ("arch.momentum", cfg.arch_momentum),
        ] {
            r.check((0.0..1.0).contains(&v), || {
                format!("{key} must lie in [0, 1), got {v}")
            });
        }
        if let Some(v) = cfg.virtual_lr {
            r.check(v >= 0.0, || {
                format!("arch.virtual_lr must be non-negative, got {v}")
            });
        }
        r.check(k > 0.0, || format!("schedule.k must be positive, got {k}"));
        r.check((0.0..=1.0).contains(&mu), || {
            format!("schedule.mu must lie in [0, 1], got {mu}")
        });
        r.check(tau > 0.0, || format!("hls.tau must be positive, got {tau}"));
        r.check(d.imbalance_ratio >= 1.0, || {
            format!(
                "data.imbalance_ratio must be >= 1, got {}",
                d.imbalance_ratio
            )
        });
        r.check(d.split > 0.0 && d.split < 1.0, || {
            format!("data.split must lie in (0, 1), got {}", d.split)
        });
        r.check(d.size >= 1, || "data.size must be positive".into());
        r.check(d.base_count >= 2, || {
            "data.base_count must be at least 2".into()
        });
        r.check(d.test_per_class >= 1, || {
            "data.test_per_class must be positive".into()
        });
        r.check(
            d.source == DataSourceKind::Synthetic || !d.dir.is_empty(),
            || "data.dir is required for data.source = cifar10".into(),
        );
        r.check(cfg.grid_step > 0.0 && cfg.grid_step <= 1.0, || {
            format!("eval.grid_step must lie in (0, 1], got {}", cfg.grid_step)
        });
        r.check(
            cfg.continuation == ContinuationKind::None || cfg.continuation_epochs >= 1,
            || "continuation.epochs must be at least 1 when a continuation phase is enabled".into(),
        );

        let errors = r.errors;
        if errors.is_empty() {
            Ok(TrainConfig {
                canonical: map,
                ..cfg
            })
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Sorted `key = value` lines; parsing them back yields the same config.
    pub fn to_text(&self) -> String {
        self.canonical
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.canonical.get(key).map(String::as_str)
    }

    /// [`content_hash`] of [`Self::to_text`].
    pub fn hash(&self) -> String {
        content_hash(&self.to_text())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.continuation_epochs()
    }

    pub fn continuation_epochs(&self) -> usize {
        match self.continuation {
            ContinuationKind::None => 0,
            _ => self.continuation_epochs,
        }
    }

    /// μ values at which models are evaluated.
    pub fn mu_grid(&self) -> Vec<f64> {
        match self.branches {
            Branches::Single => vec![1.0],
            Branches::Bilateral => mu_grid(self.grid_step),
        }
    }
}

/// `0, step, 2·step, ..., 1`, with the last point pinned to 1.
pub fn mu_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n)
        .map(|i| if i == n { 1.0 } else { i as f64 * step })
        .collect()
}

/// `start:stop:step` inclusive of `stop`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || {
        Error::invalid(
            "parse_grid",
            format!("expected start:stop:step, got {spec:?}"),
        )
    };
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [a, b, s] = parts[..] else {
        return Err(bad());
    };
    if !(s > 0.0) || b < a || !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
        return Err(bad());
    }
    let n = ((b - a) / s + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| a + i as f64 * s)
        .map(|v| (v * 1e12).round() / 1e12)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrainConfig::desk(Mode::Hls);
        let again = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        assert_eq!(cfg.hash().len(), 16);
        assert_eq!(cfg.model.layers, 4);
        assert_eq!(cfg.total_epochs(), 20);
    }

    #[test]
    fn every_error_is_reported_at_once() {
        let text =
            "train.epochs = 0\nbogus.key = 1\narch.order = third\ntrain.lr = -1\nmodel.nodes = 3\n";
        match TrainConfig::from_text(text) {
            Err(Error::Config(errs)) => {
                assert_eq!(errs.len(), 5, "{errs:#?}");
                assert!(errs.iter().any(|e| e.contains("bogus.key")));
                assert!(errs.iter().any(|e| e.contains("arch.order")));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            TrainConfig::from_text("no equals sign"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = TrainConfig::from_text("# header\n\ntrain.epochs = 7 # short\n").unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.continuation_epochs, 3);
    }

    #[test]
    fn modes_differ_only_in_their_documented_keys() {
        let base = TrainConfig::desk(Mode::Hls);
        for &mode in Mode::ALL {
            let cfg = TrainConfig::desk(mode);
            let documented: Vec<&str> = mode
                .overrides()
                .iter()
                .map(|(k, _)| *k)
                .chain(Mode::DartsOnly.overrides().iter().map(|(k, _)| *k))
                .chain(["run.mode"])
                .collect();
            for (k, v) in &cfg.canonical {
                if base.canonical[k] != *v {
                    assert!(documented.contains(&k.as_str()), "{mode}: {k}");
                }
            }
        }
        let d = TrainConfig::desk(Mode::DartsOnly);
        assert_eq!(d.branches, Branches::Single);
        assert!(d.hls.is_none());
        assert_eq!(d.mu_grid(), vec![1.0]);
        let c = TrainConfig::desk(Mode::HlsContinuous);
        assert_eq!(c.total_epochs(), 30);
        let switched = c
            .with_overrides(&pairs(&[("run.mode", "darts-only")]))
            .unwrap();
        assert_eq!(switched, TrainConfig::desk(Mode::DartsOnly));
    }

    #[test]
    fn conflicting_mode_keys_are_rejected() {
        let err = TrainConfig::from_text("run.mode = bbn-naive\nhls.enabled = true\n").unwrap_err();
        assert!(err.to_string().contains("hls.enabled"), "{err}");
        assert!(TrainConfig::from_text("run.mode = bbn-naive\nhls.enabled = false\n").is_ok());
        assert_eq!(mode_controlled_keys().len(), 6);
    }

    #[test]
    fn overrides_change_the_hash() {
        let a = TrainConfig::desk(Mode::Hls);
        let b = a.with_overrides(&pairs(&[("run.seed", "3")])).unwrap();
        assert_eq!(b.seed, 3);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn grids() {
        let g = mu_grid(0.1);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert_eq!(parse_grid("0:1:0.1").unwrap().len(), 11);
        assert_eq!(parse_grid("0.5:1:0.25").unwrap(), vec![0.5, 0.75, 1.0]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:2:0.5").is_err());
    }
}
