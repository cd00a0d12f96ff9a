//! Flat key-value experiment configuration with dotted sections, e.g.
//!
//! ```text
//! dataset.source = synth
//! trainer.lr = 0.1
//! run.trials = 5
//! ```
//!
//! Unknown keys are hard errors — a silently ignored typo would corrupt a
//! sweep. `#` starts a comment; blank lines are skipped.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::trainer::{Architecture, AugmentPolicy, DpSgdConfig, TrainConfig};

/// Where the base dataset comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synth {
        classes: usize,
        per_class: usize,
        height: usize,
        width: usize,
        channels: usize,
        separation: f64,
    },
    Container { path: String },
    Idx { images: String, labels: String },
    Cifar { path: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackConfig {
    None,
    Backdoor {
        target_class: usize,
        victim_class: usize,
        fraction: f64,
        patch_h: usize,
        patch_w: usize,
        bernoulli_p: f64,
    },
    Collision {
        target_class: usize,
        victim_class: usize,
        bases: usize,
        steps: usize,
        step_size: f64,
        beta: f64,
        budget: f64,
    },
}

/// Exactly one defense pathway per run.
#[derive(Debug, Clone, PartialEq)]
pub enum DefenseConfig {
    None,
    /// Mixing augmentation applied during training.
    Policy(AugmentPolicy),
    Spectral { fraction: f64 },
    ActivationClustering,
    DeepKnn { k: usize },
    DpSgd(DpSgdConfig),
    /// Certified release: train on the mechanism's output instead of the
    /// raw (possibly poisoned) data.
    Release {
        k: usize,
        sigma: f64,
        t_count: usize,
        delta: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub arch: Architecture,
    pub trainer: TrainConfig,
    pub trials: usize,
    pub master_seed: u64,
}

struct Raw {
    map: BTreeMap<String, (String, usize)>,
}

impl Raw {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(v, _)| v)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, &v)),
        }
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn require_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse().map_err(|_| bad(key, &v))
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("cannot parse `{key} = {value}`"))
}

fn lex(text: &str) -> Result<Raw> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if map.contains_key(&key) {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
        map.insert(key, (value.trim().to_string(), lineno + 1));
    }
    Ok(Raw { map })
}

fn parse_dataset(raw: &mut Raw) -> Result<DatasetConfig> {
    let source = match raw.take("dataset.source").as_deref() {
        None | Some("synth") => DatasetSource::Synth {
            classes: raw.parse("dataset.classes", 3)?,
            per_class: raw.parse("dataset.per_class", 200)?,
            height: raw.parse("dataset.height", 8)?,
            width: raw.parse("dataset.width", 8)?,
            channels: raw.parse("dataset.channels", 1)?,
            separation: raw.parse("dataset.separation", 0.8)?,
        },
        Some("container") => DatasetSource::Container {
            path: raw.require("dataset.path")?,
        },
        Some("idx") => DatasetSource::Idx {
            images: raw.require("dataset.images")?,
            labels: raw.require("dataset.labels")?,
        },
        Some("cifar") => DatasetSource::Cifar {
            path: raw.require("dataset.path")?,
        },
        Some(other) => return Err(bad("dataset.source", other)),
    };
    let train_fraction = raw.parse("dataset.train_fraction", 0.8)?;
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "dataset.train_fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    Ok(DatasetConfig { source, train_fraction })
}

fn parse_attack(raw: &mut Raw) -> Result<AttackConfig> {
    match raw.take("attack.kind").as_deref() {
        None | Some("none") => Ok(AttackConfig::None),
        Some("backdoor") => Ok(AttackConfig::Backdoor {
            target_class: raw.require_parse("attack.target_class")?,
            victim_class: raw.require_parse("attack.victim_class")?,
            fraction: raw.parse("attack.fraction", 1.0)?,
            patch_h: raw.parse("attack.patch_h", 4)?,
            patch_w: raw.parse("attack.patch_w", 4)?,
            bernoulli_p: raw.parse("attack.bernoulli_p", 0.5)?,
        }),
        Some("collision") => Ok(AttackConfig::Collision {
            target_class: raw.require_parse("attack.target_class")?,
            victim_class: raw.require_parse("attack.victim_class")?,
            bases: raw.parse("attack.bases", 4)?,
            steps: raw.parse("attack.steps", 200)?,
            step_size: raw.parse("attack.step_size", 0.01)?,
            beta: raw.parse("attack.beta", 0.1)?,
            budget: raw.parse("attack.budget", 16.0 / 255.0)?,
        }),
        Some(other) => Err(bad("attack.kind", other)),
    }
}

fn parse_defense(raw: &mut Raw) -> Result<DefenseConfig> {
    match raw.take("defense.kind").as_deref() {
        None | Some("none") => Ok(DefenseConfig::None),
        Some("mixup") => Ok(DefenseConfig::Policy(AugmentPolicy::Mixup {
            k: raw.parse("defense.k", 2)?,
        })),
        Some("cutmix") => Ok(DefenseConfig::Policy(AugmentPolicy::CutMix {
            prob: raw.parse("defense.prob", 0.5)?,
        })),
        Some("cutout") => Ok(DefenseConfig::Policy(AugmentPolicy::Cutout {
            height: raw.parse("defense.height", 4)?,
            width: raw.parse("defense.width", 4)?,
        })),
        Some("maxup") => Ok(DefenseConfig::Policy(AugmentPolicy::MaxUp {
            candidates: raw.parse("defense.candidates", 4)?,
            cutout: (
                raw.parse("defense.height", 4)?,
                raw.parse("defense.width", 4)?,
            ),
            warm_epochs: raw.parse("defense.warm_epochs", 0)?,
        })),
        Some("spectral") => Ok(DefenseConfig::Spectral {
            fraction: raw.parse("defense.fraction", 0.15)?,
        }),
        Some("activation_clustering") => Ok(DefenseConfig::ActivationClustering),
        Some("deep_knn") => Ok(DefenseConfig::DeepKnn {
            k: raw.parse("defense.knn_k", 5)?,
        }),
        Some("dp_sgd") => Ok(DefenseConfig::DpSgd(DpSgdConfig {
            clip_norm: raw.parse("defense.clip_norm", 1.0)?,
            gauss_noise: raw.parse("defense.gauss_noise", 0.001)?,
        })),
        Some("release") => Ok(DefenseConfig::Release {
            k: raw.parse("defense.k", 2)?,
            sigma: raw.require_parse("defense.sigma")?,
            t_count: raw.require_parse("defense.T")?,
            delta: raw.parse("defense.delta", 1.0)?,
        }),
        Some(other) => Err(bad("defense.kind", other)),
    }
}

fn parse_lr_drops(spec: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (epoch, factor) = part
            .split_once(':')
            .ok_or_else(|| bad("trainer.lr_drops", spec))?;
        out.push((
            epoch.trim().parse().map_err(|_| bad("trainer.lr_drops", spec))?,
            factor.trim().parse().map_err(|_| bad("trainer.lr_drops", spec))?,
        ));
    }
    Ok(out)
}

fn parse_trainer(raw: &mut Raw) -> Result<(Architecture, TrainConfig)> {
    let arch = match raw.take("trainer.arch").as_deref() {
        None | Some("mlp") => {
            let hidden = raw.take("trainer.hidden").unwrap_or_else(|| "64".into());
            let sizes = hidden
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| p.trim().parse().map_err(|_| bad("trainer.hidden", &hidden)))
                .collect::<Result<Vec<usize>>>()?;
            Architecture::Mlp { hidden: sizes }
        }
        Some("smallconv") => Architecture::SmallConv,
        Some(other) => return Err(bad("trainer.arch", other)),
    };
    let defaults = TrainConfig::default();
    let lr_drops = match raw.take("trainer.lr_drops") {
        None => Vec::new(),
        Some(s) => parse_lr_drops(&s)?,
    };
    let cfg = TrainConfig {
        epochs: raw.parse("trainer.epochs", defaults.epochs)?,
        batch: raw.parse("trainer.batch", defaults.batch)?,
        lr: raw.parse("trainer.lr", defaults.lr)?,
        momentum: raw.parse("trainer.momentum", defaults.momentum)?,
        weight_decay: raw.parse("trainer.weight_decay", defaults.weight_decay)?,
        lr_drops,
        policy: AugmentPolicy::None, // installed by the defense pathway
        input_noise_sigma: raw.parse("trainer.input_noise_sigma", 0.0)?,
        dp_sgd: None,
        seed: 0, // per-trial
    };
    Ok((arch, cfg))
}

/// Parse and validate a full experiment configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut raw = lex(text)?;
    let dataset = parse_dataset(&mut raw)?;
    let attack = parse_attack(&mut raw)?;
    let defense = parse_defense(&mut raw)?;
    let (arch, trainer) = parse_trainer(&mut raw)?;
    let trials = raw.parse("run.trials", 1)?;
    let master_seed = raw.parse("run.seed", 0u64)?;
    if trials == 0 {
        return Err(Error::Config("run.trials must be >= 1".into()));
    }
    if let Some((key, (_, line))) = raw.map.iter().next() {
        return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
    }
    Ok(ExperimentConfig {
        dataset,
        attack,
        defense,
        arch,
        trainer,
        trials,
        master_seed,
    })
}

/// FNV-1a hash of the raw configuration text; stamped into reports so a
/// report can be traced back to the exact config that produced it.
pub fn config_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_a_minimal_config() {
        let cfg = parse_config("run.trials = 2\n").unwrap();
        assert_eq!(cfg.trials, 2);
        assert_eq!(cfg.attack, AttackConfig::None);
        assert_eq!(cfg.defense, DefenseConfig::None);
        assert!(matches!(
            cfg.dataset.source,
            DatasetSource::Synth { classes: 3, per_class: 200, .. }
        ));
        assert_eq!(cfg.trainer.lr, 0.1);
        assert_eq!(cfg.trainer.batch, 128);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = parse_config("trainer.lrate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("trainer.lrate"), "unexpected message: {msg}");
    }

    #[test]
    fn full_config_round_trip() {
        let text = "\
# backdoor vs mixup
dataset.source = synth
dataset.classes = 3
dataset.per_class = 100
dataset.separation = 0.9
attack.kind = backdoor
attack.target_class = 2
attack.victim_class = 0
attack.fraction = 1.0
defense.kind = mixup
defense.k = 4
trainer.epochs = 6
trainer.lr = 0.05
trainer.lr_drops = 4:0.1
trainer.input_noise_sigma = 0.0627
run.trials = 5
run.seed = 99
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.defense, DefenseConfig::Policy(AugmentPolicy::Mixup { k: 4 }));
        assert_eq!(cfg.trainer.lr_drops, vec![(4, 0.1)]);
        assert_eq!(cfg.master_seed, 99);
        match cfg.attack {
            AttackConfig::Backdoor { target_class: 2, victim_class: 0, .. } => {}
            other => panic!("bad attack parse: {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(parse_config("no equals sign\n").is_err());
        assert!(parse_config("run.trials = 1\nrun.trials = 2\n").is_err());
        assert!(parse_config("run.trials = 0\n").is_err());
        assert!(parse_config("dataset.train_fraction = 1.5\n").is_err());
        assert!(parse_config("defense.kind = release\n").is_err()); // sigma/T required
    }

    #[test]
    fn hash_is_stable_and_text_sensitive() {
        let a = config_hash("run.trials = 1\n");
        assert_eq!(a, config_hash("run.trials = 1\n"));
        assert_ne!(a, config_hash("run.trials = 2\n"));
    }
}
