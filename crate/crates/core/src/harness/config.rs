//! Plain UTF-8 `key = value` run configuration with `[section]` headers.
//! Every key is addressable as `section.key` so command-line flags can
//! override file values one at a time.

use crate::error::{Error, Result};
use crate::harness::bench::{BenchConfig, Protocol, Surrogate};
use crate::harness::data::{DataSource, DatasetSpec, SynthSpec};
use crate::harness::optim::OptimizerKind;
use crate::harness::train::TrainConfig;
use crate::peft::{AdaptStrategy, AdapterPlacement, KronTarget, LoraTarget};
use crate::subspace::{ProjectionKind, SubmoduleKind};
use crate::vit::ViTConfig;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,

    // [model]
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub class_token: bool,
    pub surrogate: String, // "pretext" | "random"
    pub surrogate_epochs: usize,
    pub surrogate_lr: f64,
    pub surrogate_seed: u64,

    // [data]
    pub data_source: String, // "synthetic" | "idx"
    pub per_class: usize,
    pub noise_sigma: f64,
    pub data_seed: u64,
    pub idx_images: PathBuf,
    pub idx_labels: PathBuf,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub normalize_mean: f64,
    pub normalize_std: f64,

    // [train]
    pub optimizer: String, // "sgd" | "adamw"
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub parallel: bool,

    // [bench]
    pub strategies: Vec<String>,
    pub protocol: String, // "few_shot" | "full_shot"
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub m0: f64,
    pub kadapt_n: usize,
    pub kadapt_rank: usize,
    pub kadapt_target: String, // "attention_qv" | "mlp"
    pub lora_rank: usize,
    pub lora_targets: String, // e.g. "q,v"
    pub adapter_bottleneck: usize,
    pub adapter_bias: bool,
    pub compacter_n: usize,
    pub compacter_bottleneck: usize,
    pub lepe_kernel: usize,

    // [id]
    pub id_target: String, // "attention" | "mlp"
    pub id_layers: Vec<usize>,
    pub id_grid: Vec<usize>,
    pub id_threshold: f64,
    pub id_projection: String, // "fastfood" | "dense"
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            image_size: 16,
            patch_size: 4,
            channels: 1,
            d_model: 64,
            num_heads: 4,
            num_layers: 4,
            mlp_ratio: 4,
            num_classes: 10,
            class_token: true,
            surrogate: "pretext".into(),
            surrogate_epochs: 5,
            surrogate_lr: 0.05,
            surrogate_seed: 7_777,
            data_source: "synthetic".into(),
            per_class: 40,
            noise_sigma: 0.25,
            data_seed: 0,
            idx_images: PathBuf::new(),
            idx_labels: PathBuf::new(),
            split_train: 0.5,
            split_val: 0.25,
            split_test: 0.25,
            normalize_mean: 0.0,
            normalize_std: 1.0,
            optimizer: "sgd".into(),
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_grid: vec![1e-3, 1e-2, 1e-1],
            wd_grid: vec![0.0, 1e-4],
            epochs: 50,
            batch_size: 32,
            eval_every: 0,
            parallel: true,
            strategies: [
                "full-finetune",
                "linear-probe",
                "transformer-probe",
                "bitfit",
                "layernorm-tune",
                "attention-tune",
                "adapter",
                "adapter-drop",
                "lora",
                "lora-fix",
                "compacter",
                "kadaptation",
                "lepe-tune",
                "rpb-tune",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            protocol: "few_shot".into(),
            shots: 5,
            seeds: vec![0, 1, 2],
            m0: 1e8,
            kadapt_n: 4,
            kadapt_rank: 1,
            kadapt_target: "attention_qv".into(),
            lora_rank: 4,
            lora_targets: "q,v".into(),
            adapter_bottleneck: 8,
            adapter_bias: true,
            compacter_n: 4,
            compacter_bottleneck: 8,
            lepe_kernel: 3,
            id_target: "attention".into(),
            id_layers: vec![0],
            id_grid: vec![4, 16, 64, 256],
            id_threshold: 0.9,
            id_projection: "fastfood".into(),
        }
    }
}

impl Config {
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidInput(format!(
                    "{}:{}: expected key = value, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let full_key = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            self.apply(&full_key, value.trim())?;
        }
        Ok(())
    }

    /// Set one `section.key` to a string value (CLI overrides use this too).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidInput(format!("cannot parse {v:?} for key {key}")))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| {
                        Error::InvalidInput(format!("cannot parse {s:?} in list for key {key}"))
                    })
                })
                .collect()
        }
        match key {
            "seed" => self.seed = p(key, value)?,
            "model.image_size" => self.image_size = p(key, value)?,
            "model.patch_size" => self.patch_size = p(key, value)?,
            "model.channels" => self.channels = p(key, value)?,
            "model.d_model" => self.d_model = p(key, value)?,
            "model.num_heads" => self.num_heads = p(key, value)?,
            "model.num_layers" => self.num_layers = p(key, value)?,
            "model.mlp_ratio" => self.mlp_ratio = p(key, value)?,
            "model.num_classes" => self.num_classes = p(key, value)?,
            "model.class_token" => self.class_token = p(key, value)?,
            "model.surrogate" => self.surrogate = value.into(),
            "model.surrogate_epochs" => self.surrogate_epochs = p(key, value)?,
            "model.surrogate_lr" => self.surrogate_lr = p(key, value)?,
            "model.surrogate_seed" => self.surrogate_seed = p(key, value)?,
            "data.source" => self.data_source = value.into(),
            "data.per_class" => self.per_class = p(key, value)?,
            "data.noise_sigma" => self.noise_sigma = p(key, value)?,
            "data.seed" => self.data_seed = p(key, value)?,
            "data.idx_images" => self.idx_images = value.into(),
            "data.idx_labels" => self.idx_labels = value.into(),
            "data.split_train" => self.split_train = p(key, value)?,
            "data.split_val" => self.split_val = p(key, value)?,
            "data.split_test" => self.split_test = p(key, value)?,
            "data.normalize_mean" => self.normalize_mean = p(key, value)?,
            "data.normalize_std" => self.normalize_std = p(key, value)?,
            "train.optimizer" => self.optimizer = value.into(),
            "train.momentum" => self.momentum = p(key, value)?,
            "train.adam_beta1" => self.adam_beta1 = p(key, value)?,
            "train.adam_beta2" => self.adam_beta2 = p(key, value)?,
            "train.adam_eps" => self.adam_eps = p(key, value)?,
            "train.lr_grid" => self.lr_grid = list(key, value)?,
            "train.wd_grid" => self.wd_grid = list(key, value)?,
            "train.epochs" => self.epochs = p(key, value)?,
            "train.batch_size" => self.batch_size = p(key, value)?,
            "train.eval_every" => self.eval_every = p(key, value)?,
            "train.parallel" => self.parallel = p(key, value)?,
            "bench.strategies" => self.strategies = list(key, value)?,
            "bench.protocol" => self.protocol = value.into(),
            "bench.shots" => self.shots = p(key, value)?,
            "bench.seeds" => self.seeds = list(key, value)?,
            "bench.m0" => self.m0 = p(key, value)?,
            "bench.kadapt_n" => self.kadapt_n = p(key, value)?,
            "bench.kadapt_rank" => self.kadapt_rank = p(key, value)?,
            "bench.kadapt_target" => self.kadapt_target = value.into(),
            "bench.lora_rank" => self.lora_rank = p(key, value)?,
            "bench.lora_targets" => self.lora_targets = value.into(),
            "bench.adapter_bottleneck" => self.adapter_bottleneck = p(key, value)?,
            "bench.adapter_bias" => self.adapter_bias = p(key, value)?,
            "bench.compacter_n" => self.compacter_n = p(key, value)?,
            "bench.compacter_bottleneck" => self.compacter_bottleneck = p(key, value)?,
            "bench.lepe_kernel" => self.lepe_kernel = p(key, value)?,
            "id.target" => self.id_target = value.into(),
            "id.layers" => self.id_layers = list(key, value)?,
            "id.grid" => self.id_grid = list(key, value)?,
            "id.threshold" => self.id_threshold = p(key, value)?,
            "id.projection" => self.id_projection = value.into(),
            other => {
                return Err(Error::InvalidInput(format!("unknown config key {other}")));
            }
        }
        Ok(())
    }

    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            d_model: self.d_model,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
            class_token: self.class_token,
        }
    }

    pub fn surrogate(&self) -> Result<Surrogate> {
        match self.surrogate.as_str() {
            "random" => Ok(Surrogate::RandomInit),
            "pretext" => Ok(Surrogate::Pretext {
                per_class: self.per_class.max(1),
                noise_sigma: self.noise_sigma,
                seed: self.surrogate_seed,
                epochs: self.surrogate_epochs,
                lr: self.surrogate_lr,
            }),
            other => Err(Error::InvalidInput(format!("unknown surrogate {other}"))),
        }
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.optimizer.as_str() {
            "sgd" => Ok(OptimizerKind::Sgd {
                momentum: self.momentum,
            }),
            "adamw" => Ok(OptimizerKind::AdamW {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            }),
            other => Err(Error::InvalidInput(format!("unknown optimizer {other}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            optimizer: self.optimizer_kind()?,
            lr_grid: self.lr_grid.clone(),
            wd_grid: self.wd_grid.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            seed: self.seed,
            parallel: self.parallel,
        })
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let source = match self.data_source.as_str() {
            "synthetic" => DataSource::Synthetic(SynthSpec {
                classes: self.num_classes,
                per_class: self.per_class,
                image_size: self.image_size,
                channels: self.channels,
                noise_sigma: self.noise_sigma,
                seed: self.data_seed,
            }),
            "idx" => DataSource::Idx {
                images: self.idx_images.clone(),
                labels: self.idx_labels.clone(),
            },
            other => {
                return Err(Error::InvalidInput(format!("unknown data source {other}")));
            }
        };
        Ok(DatasetSpec {
            source,
            split: (self.split_train, self.split_val, self.split_test),
            normalize_mean: self.normalize_mean,
            normalize_std: self.normalize_std,
            split_seed: self.data_seed,
        })
    }

    pub fn kron_target(&self) -> Result<KronTarget> {
        match self.kadapt_target.as_str() {
            "attention_qv" => Ok(KronTarget::AttentionQv),
            "mlp" => Ok(KronTarget::Mlp),
            other => Err(Error::InvalidInput(format!(
                "unknown kadaptation target {other}"
            ))),
        }
    }

    fn lora_target_list(&self) -> Result<Vec<LoraTarget>> {
        self.lora_targets
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "q" => Ok(LoraTarget::Q),
                "k" => Ok(LoraTarget::K),
                "v" => Ok(LoraTarget::V),
                "o" => Ok(LoraTarget::O),
                other => Err(Error::InvalidInput(format!("unknown LoRA target {other}"))),
            })
            .collect()
    }

    /// Resolve a strategy name using the configured hyperparameters.
    pub fn strategy_by_name(&self, name: &str) -> Result<AdaptStrategy> {
        Ok(match name {
            "full-finetune" => AdaptStrategy::FullFinetune,
            "linear-probe" => AdaptStrategy::LinearProbe,
            "transformer-probe" => AdaptStrategy::TransformerProbe,
            "bitfit" => AdaptStrategy::BitFit,
            "layernorm-tune" => AdaptStrategy::LayerNormTune,
            "attention-tune" => AdaptStrategy::AttentionTune,
            "adapter" => AdaptStrategy::Adapter {
                bottleneck: self.adapter_bottleneck,
                placement: AdapterPlacement::AfterMlpAndAttn,
                bias: self.adapter_bias,
            },
            "adapter-inside" => AdaptStrategy::Adapter {
                bottleneck: self.adapter_bottleneck,
                placement: AdapterPlacement::InsideAttention,
                bias: self.adapter_bias,
            },
            "adapter-drop" => AdaptStrategy::AdapterDrop {
                bottleneck: self.adapter_bottleneck,
                bias: self.adapter_bias,
            },
            "lora" => AdaptStrategy::Lora {
                rank: self.lora_rank,
                targets: self.lora_target_list()?,
                fix_a: false,
            },
            "lora-fix" => AdaptStrategy::Lora {
                rank: self.lora_rank,
                targets: self.lora_target_list()?,
                fix_a: true,
            },
            "compacter" => AdaptStrategy::Compacter {
                n: self.compacter_n,
                bottleneck: self.compacter_bottleneck,
                bias: self.adapter_bias,
            },
            "kadaptation" => AdaptStrategy::KAdaptation {
                n: self.kadapt_n,
                rank: self.kadapt_rank,
                target: self.kron_target()?,
                slow_rank: None,
                delta_bias: false,
            },
            "kadaptation-mlp" => AdaptStrategy::KAdaptation {
                n: self.kadapt_n,
                rank: self.kadapt_rank,
                target: KronTarget::Mlp,
                slow_rank: None,
                delta_bias: false,
            },
            "lepe-tune" => AdaptStrategy::LepeTune {
                kernel_size: self.lepe_kernel,
            },
            "rpb-tune" => AdaptStrategy::RpbTune,
            other => {
                return Err(Error::InvalidInput(format!("unknown strategy {other}")));
            }
        })
    }

    pub fn protocol(&self) -> Result<Protocol> {
        match self.protocol.as_str() {
            "few_shot" => Ok(Protocol::FewShot {
                shots: self.shots,
                seeds: self.seeds.clone(),
            }),
            "full_shot" => Ok(Protocol::FullShot {
                seeds: self.seeds.clone(),
            }),
            other => Err(Error::InvalidInput(format!("unknown protocol {other}"))),
        }
    }

    pub fn bench_config(&self) -> Result<BenchConfig> {
        let strategies = self
            .strategies
            .iter()
            .map(|name| self.strategy_by_name(name))
            .collect::<Result<Vec<_>>>()?;
        Ok(BenchConfig {
            strategies,
            datasets: vec![("synthetic".into(), self.dataset_spec()?)],
            protocol: self.protocol()?,
            train: self.train_config()?,
            m0: self.m0,
        })
    }

    pub fn id_kind(&self) -> Result<SubmoduleKind> {
        SubmoduleKind::parse(&self.id_target)
    }

    pub fn id_projection_kind(&self) -> Result<ProjectionKind> {
        match self.id_projection.as_str() {
            "fastfood" => Ok(ProjectionKind::Fastfood),
            "dense" => Ok(ProjectionKind::DenseGaussian),
            other => Err(Error::InvalidInput(format!("unknown projection {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nseed = 9\n[model]\nd_model = 32\nnum_heads = 2\n\n[train]\nlr_grid = 0.1, 0.01\nepochs = 7\n",
        )
        .unwrap();
        let mut cfg = Config::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.d_model, 32);
        assert_eq!(cfg.lr_grid, vec![0.1, 0.01]);
        assert_eq!(cfg.epochs, 7);
        // flag-style override wins over the file value
        cfg.apply("train.epochs", "3").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = Config::default();
        assert!(cfg.apply("nope.key", "1").is_err());
        assert!(cfg.apply("train.epochs", "many").is_err());
    }

    #[test]
    fn strategy_names_resolve_with_config_hyperparameters() {
        let mut cfg = Config::default();
        cfg.kadapt_n = 8;
        cfg.kadapt_rank = 2;
        let s = cfg.strategy_by_name("kadaptation").unwrap();
        assert!(matches!(
            s,
            AdaptStrategy::KAdaptation {
                n: 8,
                rank: 2,
                target: KronTarget::AttentionQv,
                ..
            }
        ));
        assert!(cfg.strategy_by_name("mystery").is_err());
        // every default bench strategy resolves
        for name in Config::default().strategies {
            cfg.strategy_by_name(&name).unwrap();
        }
    }
}
