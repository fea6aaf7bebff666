//! Adaptation strategies: declarative descriptions of which parameters train
//! and which delta modules are injected, plus the machinery that wires them
//! into the ViT forward pass and folds weight deltas back into the base.
//!
//! Weight-delta kinds (LoRA, KAdaptation) parameterize `W = W₀ + ΔW` with the
//! base frozen; module kinds (Adapter, Compacter, probes) insert extra
//! computation. Every delta initializes to an exact zero update so step-0
//! logits equal the frozen base bit-for-bit.

mod binder;

pub use binder::{adapter_forward, compacter_forward, phm_matrix, AdapterVars, CompacterVars};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{self, AttentionVariant, ViTModel};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterPlacement {
    /// One adapter on each sublayer output (the standard two-per-layer setup).
    AfterMlpAndAttn,
    /// One adapter on the merged attention context, before the output
    /// projection (the "adapters inside attention" ablation).
    InsideAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    fn weight(&self) -> &'static str {
        match self {
            LoraTarget::Q => "Wq",
            LoraTarget::K => "Wk",
            LoraTarget::V => "Wv",
            LoraTarget::O => "Wo",
        }
    }

    fn bias(&self) -> &'static str {
        match self {
            LoraTarget::Q => "bq",
            LoraTarget::K => "bk",
            LoraTarget::V => "bv",
            LoraTarget::O => "bo",
        }
    }
}

/// Which weight matrices receive Kronecker deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KronTarget {
    /// Wq and Wv in every attention block.
    AttentionQv,
    /// Both MLP projections in every block.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdaptStrategy {
    FullFinetune,
    LinearProbe,
    /// An extra trainable encoder block stacked before the head,
    /// zero-initialized on its output projections so it starts as identity.
    TransformerProbe,
    /// Bias and LayerNorm-affine vectors only (plus head).
    BitFit,
    LayerNormTune,
    AttentionTune,
    Adapter {
        bottleneck: usize,
        placement: AdapterPlacement,
        bias: bool,
    },
    /// Adapters kept only in the final encoder layer.
    AdapterDrop { bottleneck: usize, bias: bool },
    Lora {
        rank: usize,
        targets: Vec<LoraTarget>,
        fix_a: bool,
    },
    Compacter {
        n: usize,
        bottleneck: usize,
        bias: bool,
    },
    KAdaptation {
        n: usize,
        rank: usize,
        target: KronTarget,
        /// Optionally decompose the shared slow factors as a low-rank
        /// product as well; off by default.
        slow_rank: Option<usize>,
        /// Learn an additive bias delta on each adapted site; off by default.
        delta_bias: bool,
    },
    LepeTune { kernel_size: usize },
    RpbTune,
}

impl AdaptStrategy {
    pub fn adapter() -> Self {
        AdaptStrategy::Adapter {
            bottleneck: 64,
            placement: AdapterPlacement::AfterMlpAndAttn,
            bias: true,
        }
    }

    pub fn adapter_drop() -> Self {
        AdaptStrategy::AdapterDrop {
            bottleneck: 64,
            bias: true,
        }
    }

    pub fn lora() -> Self {
        AdaptStrategy::Lora {
            rank: 4,
            targets: vec![LoraTarget::Q, LoraTarget::V],
            fix_a: false,
        }
    }

    pub fn lora_fix() -> Self {
        AdaptStrategy::Lora {
            rank: 4,
            targets: vec![LoraTarget::Q, LoraTarget::V],
            fix_a: true,
        }
    }

    pub fn compacter() -> Self {
        AdaptStrategy::Compacter {
            n: 4,
            bottleneck: 64,
            bias: true,
        }
    }

    /// n = 32 is the best-performing setting reported at full scale; desk
    /// benchmark configs usually override to n = 4.
    pub fn kadaptation(n: usize, rank: usize, target: KronTarget) -> Self {
        AdaptStrategy::KAdaptation {
            n,
            rank,
            target,
            slow_rank: None,
            delta_bias: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdaptStrategy::FullFinetune => "full-finetune",
            AdaptStrategy::LinearProbe => "linear-probe",
            AdaptStrategy::TransformerProbe => "transformer-probe",
            AdaptStrategy::BitFit => "bitfit",
            AdaptStrategy::LayerNormTune => "layernorm-tune",
            AdaptStrategy::AttentionTune => "attention-tune",
            AdaptStrategy::Adapter { .. } => "adapter",
            AdaptStrategy::AdapterDrop { .. } => "adapter-drop",
            AdaptStrategy::Lora { fix_a: false, .. } => "lora",
            AdaptStrategy::Lora { fix_a: true, .. } => "lora-fix",
            AdaptStrategy::Compacter { .. } => "compacter",
            AdaptStrategy::KAdaptation { .. } => "kadaptation",
            AdaptStrategy::LepeTune { .. } => "lepe-tune",
            AdaptStrategy::RpbTune => "rpb-tune",
        }
    }

    /// Weight-delta kinds can be folded into the base weights.
    pub fn mergeable(&self) -> bool {
        matches!(
            self,
            AdaptStrategy::Lora { .. } | AdaptStrategy::KAdaptation { .. }
        )
    }
}

/// An adapted weight site: `rows × cols` base matrix plus delta factors.
#[derive(Debug, Clone)]
pub struct DeltaSite {
    pub weight: String,
    pub bias: Option<String>,
    pub rows: usize,
    pub cols: usize,
}

/// Sum-of-Kronecker-products delta: slow factors are shared tensors (stored
/// once under `delta.slow.{i}`), fast factors are per-site low-rank pairs.
#[derive(Debug, Clone)]
pub struct KronDelta {
    pub n: usize,
    pub rank: usize,
    pub scale: f64,
    pub slow_rank: Option<usize>,
    pub delta_bias: bool,
    pub sites: Vec<DeltaSite>,
}

#[derive(Debug, Clone)]
pub struct LoraDelta {
    pub rank: usize,
    pub scale: f64,
    pub fix_a: bool,
    pub sites: Vec<DeltaSite>,
}

#[derive(Debug, Clone)]
pub(crate) enum DeltaKind {
    None,
    Kron(KronDelta),
    Lora(LoraDelta),
}

/// A frozen base model plus the strategy's injected parameters.
///
/// The base registry is mutated only at trainable paths (the head, and
/// whatever the strategy unfreezes); everything injected lives in `extras`
/// under `delta.`-prefixed paths.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub base: ViTModel,
    pub strategy: AdaptStrategy,
    extras: IndexMap<String, Tensor>,
    trainable_base: Vec<String>,
    frozen_extras: BTreeSet<String>,
    pub(crate) delta: DeltaKind,
}

impl AdaptedModel {
    pub fn apply_strategy(model: &ViTModel, strategy: AdaptStrategy, seed: u64) -> Result<Self> {
        let cfg = model.config.clone();
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b61_6461_7074);
        let mut extras: IndexMap<String, Tensor> = IndexMap::new();
        let mut frozen_extras = BTreeSet::new();
        let mut delta = DeltaKind::None;

        let uniform = |shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data).expect("shape matches")
        };

        match &strategy {
            AdaptStrategy::FullFinetune
            | AdaptStrategy::LinearProbe
            | AdaptStrategy::BitFit
            | AdaptStrategy::LayerNormTune
            | AdaptStrategy::AttentionTune => {}

            AdaptStrategy::TransformerProbe => {
                let md = cfg.mlp_dim();
                let rand2 =
                    |shape: Vec<usize>, rng: &mut ChaCha8Rng| uniform(shape.clone(), 1.0 / (shape[0] as f64).sqrt(), rng);
                extras.insert("delta.probe.ln1.weight".into(), Tensor::full(vec![d], 1.0));
                extras.insert("delta.probe.ln1.bias".into(), Tensor::zeros(vec![d]));
                for w in ["Wq", "Wk", "Wv"] {
                    extras.insert(format!("delta.probe.attn.{w}"), rand2(vec![d, d], &mut rng));
                }
                // zero output projection: the probe starts as identity
                extras.insert("delta.probe.attn.Wo".into(), Tensor::zeros(vec![d, d]));
                for b in ["bq", "bk", "bv", "bo"] {
                    extras.insert(format!("delta.probe.attn.{b}"), Tensor::zeros(vec![d]));
                }
                extras.insert("delta.probe.ln2.weight".into(), Tensor::full(vec![d], 1.0));
                extras.insert("delta.probe.ln2.bias".into(), Tensor::zeros(vec![d]));
                extras.insert("delta.probe.mlp.W1".into(), rand2(vec![d, md], &mut rng));
                extras.insert("delta.probe.mlp.b1".into(), Tensor::zeros(vec![md]));
                extras.insert("delta.probe.mlp.W2".into(), Tensor::zeros(vec![md, d]));
                extras.insert("delta.probe.mlp.b2".into(), Tensor::zeros(vec![d]));
            }

            AdaptStrategy::Adapter {
                bottleneck,
                placement,
                bias,
            } => {
                check_positive("bottleneck", *bottleneck)?;
                for layer in 0..cfg.num_layers {
                    let slots: &[&str] = match placement {
                        AdapterPlacement::AfterMlpAndAttn => &["attn", "mlp"],
                        AdapterPlacement::InsideAttention => &["attn_inner"],
                    };
                    for slot in slots {
                        insert_adapter(&mut extras, layer, slot, d, *bottleneck, *bias, &mut rng);
                    }
                }
            }

            AdaptStrategy::AdapterDrop { bottleneck, bias } => {
                check_positive("bottleneck", *bottleneck)?;
                let last = cfg.num_layers - 1;
                for slot in ["attn", "mlp"] {
                    insert_adapter(&mut extras, last, slot, d, *bottleneck, *bias, &mut rng);
                }
            }

            AdaptStrategy::Lora {
                rank,
                targets,
                fix_a,
            } => {
                check_positive("rank", *rank)?;
                if *rank > d {
                    return Err(Error::RankTooLarge { rank: *rank, max: d });
                }
                if targets.is_empty() {
                    return Err(Error::Config("LoRA needs at least one target".into()));
                }
                let mut sites = Vec::new();
                for layer in 0..cfg.num_layers {
                    for target in targets {
                        let weight = format!("block.{layer}.attn.{}", target.weight());
                        let a = format!("delta.{weight}.a");
                        let b = format!("delta.{weight}.b");
                        extras.insert(a.clone(), uniform(vec![d, *rank], 1.0 / (d as f64).sqrt(), &mut rng));
                        extras.insert(b, Tensor::zeros(vec![*rank, d]));
                        if *fix_a {
                            frozen_extras.insert(a);
                        }
                        sites.push(DeltaSite {
                            weight,
                            bias: Some(format!("block.{layer}.attn.{}", target.bias())),
                            rows: d,
                            cols: d,
                        });
                    }
                }
                delta = DeltaKind::Lora(LoraDelta {
                    rank: *rank,
                    scale: 1.0,
                    fix_a: *fix_a,
                    sites,
                });
            }

            AdaptStrategy::Compacter { n, bottleneck, bias } => {
                check_positive("n", *n)?;
                check_positive("bottleneck", *bottleneck)?;
                check_divides(*n, d, "compacter input dim")?;
                check_divides(*n, *bottleneck, "compacter bottleneck")?;
                for i in 0..*n {
                    extras.insert(
                        format!("delta.compacter.slow.{i}"),
                        uniform(vec![*n, *n], 1.0 / *n as f64, &mut rng),
                    );
                }
                for layer in 0..cfg.num_layers {
                    for slot in ["attn", "mlp"] {
                        insert_compacter_layer(
                            &mut extras,
                            layer,
                            slot,
                            d,
                            *bottleneck,
                            *n,
                            *bias,
                            &mut rng,
                        );
                    }
                }
            }

            AdaptStrategy::KAdaptation {
                n,
                rank,
                target,
                slow_rank,
                delta_bias,
            } => {
                check_positive("n", *n)?;
                check_positive("rank", *rank)?;
                let site_dims: Vec<(String, Option<String>, usize, usize)> = match target {
                    KronTarget::AttentionQv => (0..cfg.num_layers)
                        .flat_map(|layer| {
                            [("Wq", "bq"), ("Wv", "bv")].map(|(w, b)| {
                                (
                                    format!("block.{layer}.attn.{w}"),
                                    Some(format!("block.{layer}.attn.{b}")),
                                    d,
                                    d,
                                )
                            })
                        })
                        .collect(),
                    KronTarget::Mlp => (0..cfg.num_layers)
                        .flat_map(|layer| {
                            [
                                (
                                    format!("block.{layer}.mlp.W1"),
                                    Some(format!("block.{layer}.mlp.b1")),
                                    d,
                                    cfg.mlp_dim(),
                                ),
                                (
                                    format!("block.{layer}.mlp.W2"),
                                    Some(format!("block.{layer}.mlp.b2")),
                                    cfg.mlp_dim(),
                                    d,
                                ),
                            ]
                        })
                        .collect(),
                };
                for (_, _, rows, cols) in &site_dims {
                    check_divides(*n, *rows, "adapted rows")?;
                    check_divides(*n, *cols, "adapted cols")?;
                }

                // shared slow factors, n of them, referenced by every site
                for i in 0..*n {
                    match slow_rank {
                        None => {
                            extras.insert(
                                format!("delta.slow.{i}"),
                                uniform(vec![*n, *n], 1.0 / *n as f64, &mut rng),
                            );
                        }
                        Some(sr) => {
                            check_positive("slow_rank", *sr)?;
                            let bound = 1.0 / (*n as f64).sqrt();
                            extras.insert(
                                format!("delta.slow.{i}.u"),
                                uniform(vec![*n, *sr], bound, &mut rng),
                            );
                            extras.insert(
                                format!("delta.slow.{i}.v"),
                                uniform(vec![*sr, *n], bound, &mut rng),
                            );
                        }
                    }
                }

                let mut sites = Vec::new();
                for (weight, bias_path, rows, cols) in site_dims {
                    let fan = rows / *n;
                    let bound = 1.0 / ((*n * fan) as f64).sqrt();
                    for i in 0..*n {
                        extras.insert(
                            format!("delta.{weight}.u{i}"),
                            uniform(vec![rows / *n, *rank], bound, &mut rng),
                        );
                        // zero fast v factors guarantee ΔW = 0 at step 0
                        extras.insert(
                            format!("delta.{weight}.v{i}"),
                            Tensor::zeros(vec![*rank, cols / *n]),
                        );
                    }
                    if *delta_bias {
                        extras.insert(format!("delta.{weight}.bias"), Tensor::zeros(vec![cols]));
                    }
                    sites.push(DeltaSite {
                        weight,
                        bias: bias_path,
                        rows,
                        cols,
                    });
                }
                delta = DeltaKind::Kron(KronDelta {
                    n: *n,
                    rank: *rank,
                    scale: 1.0,
                    slow_rank: *slow_rank,
                    delta_bias: *delta_bias,
                    sites,
                });
            }

            AdaptStrategy::LepeTune { kernel_size } => {
                if kernel_size % 2 == 0 || *kernel_size == 0 {
                    return Err(Error::Config(format!(
                        "LePE kernel size must be odd and positive, got {kernel_size}"
                    )));
                }
                for layer in 0..cfg.num_layers {
                    extras.insert(
                        format!("delta.block.{layer}.attn.lepe.kernel"),
                        Tensor::zeros(vec![d, *kernel_size, *kernel_size]),
                    );
                }
            }

            AdaptStrategy::RpbTune => {
                let len = AttentionVariant::rpb_table_len(&cfg);
                for layer in 0..cfg.num_layers {
                    extras.insert(
                        format!("delta.block.{layer}.attn.rpb.table"),
                        Tensor::zeros(vec![len]),
                    );
                }
            }
        }

        let trainable_base = trainable_base_paths(model, &strategy);
        Ok(AdaptedModel {
            base: model.clone(),
            strategy,
            extras,
            trainable_base,
            frozen_extras,
            delta,
        })
    }

    pub fn config(&self) -> &vit::ViTConfig {
        &self.base.config
    }

    pub fn variant(&self) -> AttentionVariant {
        match &self.strategy {
            AdaptStrategy::LepeTune { kernel_size } => AttentionVariant::Lepe {
                kernel_size: *kernel_size,
            },
            AdaptStrategy::RpbTune => AttentionVariant::Rpb,
            _ => AttentionVariant::Plain,
        }
    }

    pub fn extras(&self) -> &IndexMap<String, Tensor> {
        &self.extras
    }

    /// Trainable paths in deterministic order: base registry order first,
    /// then extras in insertion order (minus fixed factors).
    pub fn trainable_paths(&self) -> Vec<String> {
        let mut out = self.trainable_base.clone();
        out.extend(
            self.extras
                .keys()
                .filter(|k| !self.frozen_extras.contains(*k))
                .cloned(),
        );
        out
    }

    /// (head, non-head) trainable parameter counts.
    pub fn trainable_counts(&self) -> (usize, usize) {
        let mut head = 0;
        let mut rest = 0;
        for path in self.trainable_paths() {
            let n = self.param(&path).expect("trainable path exists").numel();
            if path.starts_with("head.") {
                head += n;
            } else {
                rest += n;
            }
        }
        (head, rest)
    }

    pub fn param(&self, path: &str) -> Option<&Tensor> {
        if path.starts_with("delta.") {
            self.extras.get(path)
        } else {
            self.base.param(path)
        }
    }

    pub fn param_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        if path.starts_with("delta.") {
            self.extras.get_mut(path)
        } else {
            self.base.param_mut(path)
        }
    }

    /// Bytes held by base + injected tensors.
    pub fn param_bytes(&self) -> usize {
        self.base.param_bytes()
            + self
                .extras
                .values()
                .map(|t| t.numel() * std::mem::size_of::<f64>())
                .sum::<usize>()
    }

    /// Materialize `ΔW` for one adapted site with plain tensor math
    /// (`scale · Σᵢ Aᵢ ⊗ (uᵢ·vᵢ)` or `scale · a·b`).
    pub fn materialize_delta(&self, site: &str) -> Result<Tensor> {
        match &self.delta {
            DeltaKind::Kron(kron) => {
                let s = kron
                    .sites
                    .iter()
                    .find(|s| s.weight == site)
                    .ok_or_else(|| Error::UnregisteredSite(site.into()))?;
                let mut acc = Tensor::zeros(vec![s.rows, s.cols]);
                for i in 0..kron.n {
                    let slow = self.slow_factor(kron, i)?;
                    let u = self.extra_tensor(&format!("delta.{site}.u{i}"))?;
                    let v = self.extra_tensor(&format!("delta.{site}.v{i}"))?;
                    let fast = u.matmul(v)?;
                    acc = acc.add(&slow.kron(&fast)?)?;
                }
                Ok(acc.scale(kron.scale))
            }
            DeltaKind::Lora(lora) => {
                lora.sites
                    .iter()
                    .find(|s| s.weight == site)
                    .ok_or_else(|| Error::UnregisteredSite(site.into()))?;
                let a = self.extra_tensor(&format!("delta.{site}.a"))?;
                let b = self.extra_tensor(&format!("delta.{site}.b"))?;
                Ok(a.matmul(b)?.scale(lora.scale))
            }
            DeltaKind::None => Err(Error::UnregisteredSite(site.into())),
        }
    }

    fn slow_factor(&self, kron: &KronDelta, i: usize) -> Result<Tensor> {
        match kron.slow_rank {
            None => Ok(self.extra_tensor(&format!("delta.slow.{i}"))?.clone()),
            Some(_) => {
                let u = self.extra_tensor(&format!("delta.slow.{i}.u"))?;
                let v = self.extra_tensor(&format!("delta.slow.{i}.v"))?;
                Ok(u.matmul(v)?)
            }
        }
    }

    fn extra_tensor(&self, path: &str) -> Result<&Tensor> {
        self.extras
            .get(path)
            .ok_or_else(|| Error::MissingParam(path.into()))
    }

    /// Fold every `ΔW` (and bias delta, when present) into a standalone
    /// model with no injected modules.
    pub fn merge(&self) -> Result<ViTModel> {
        let sites: Vec<DeltaSite> = match &self.delta {
            DeltaKind::Kron(k) => k.sites.clone(),
            DeltaKind::Lora(l) => l.sites.clone(),
            DeltaKind::None => return Err(Error::NotMergeable(self.strategy.name().into())),
        };
        let mut merged = self.base.clone();
        for site in &sites {
            let w0 = merged
                .param(&site.weight)
                .ok_or_else(|| Error::MissingParam(site.weight.clone()))?;
            let folded = w0.add(&self.materialize_delta(&site.weight)?)?;
            merged.set_param(&site.weight, folded)?;
            if let DeltaKind::Kron(k) = &self.delta {
                if k.delta_bias {
                    if let Some(bias_path) = &site.bias {
                        let b0 = merged
                            .param(bias_path)
                            .ok_or_else(|| Error::MissingParam(bias_path.clone()))?;
                        let db = self.extra_tensor(&format!("delta.{}.bias", site.weight))?;
                        let folded = b0.add(db)?;
                        merged.set_param(bias_path, folded)?;
                    }
                }
            }
        }
        Ok(merged)
    }

    /// Serialize base + strategy + injected tensors in the checkpoint format.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut entries: Vec<(&str, &Tensor)> = Vec::new();
        for p in self.base.paths() {
            entries.push((p, self.base.param(p).expect("registry path")));
        }
        for (p, t) in &self.extras {
            entries.push((p.as_str(), t));
        }
        let strategy = serde_json::to_value(&self.strategy)?;
        vit::checkpoint::save(path, &self.base.config, Some(strategy), &entries)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let loaded = vit::checkpoint::load(path)?;
        let strategy_json = loaded
            .strategy
            .ok_or_else(|| Error::Checkpoint("checkpoint has no strategy".into()))?;
        let strategy: AdaptStrategy = serde_json::from_value(strategy_json)?;
        let mut base = ViTModel::new(loaded.config.clone(), 0)?;
        let mut extra_tensors = Vec::new();
        for (p, t) in loaded.tensors {
            if p.starts_with("delta.") {
                extra_tensors.push((p, t));
            } else {
                base.set_param(&p, t)?;
            }
        }
        let mut adapted = AdaptedModel::apply_strategy(&base, strategy, 0)?;
        for (p, t) in extra_tensors {
            match adapted.extras.get_mut(&p) {
                Some(slot) => {
                    if slot.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!(
                            "shape {:?} does not match {:?} for {p}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t;
                }
                None => return Err(Error::Checkpoint(format!("unexpected tensor {p}"))),
            }
        }
        Ok(adapted)
    }
}

fn check_positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{what} must be positive")));
    }
    Ok(())
}

fn check_divides(n: usize, dim: usize, what: &str) -> Result<()> {
    if dim % n != 0 {
        return Err(Error::Divisibility {
            n,
            dim,
            what: what.into(),
        });
    }
    Ok(())
}

fn insert_adapter(
    extras: &mut IndexMap<String, Tensor>,
    layer: usize,
    slot: &str,
    d: usize,
    bottleneck: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) {
    let bound = 1.0 / (d as f64).sqrt();
    let down: Vec<f64> = (0..d * bottleneck)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let prefix = format!("delta.adapter.{layer}.{slot}");
    extras.insert(
        format!("{prefix}.down.weight"),
        Tensor::new(vec![d, bottleneck], down).expect("sized"),
    );
    if bias {
        extras.insert(format!("{prefix}.down.bias"), Tensor::zeros(vec![bottleneck]));
    }
    // zero up-projection: the adapter is the identity at step 0
    extras.insert(format!("{prefix}.up.weight"), Tensor::zeros(vec![bottleneck, d]));
    if bias {
        extras.insert(format!("{prefix}.up.bias"), Tensor::zeros(vec![d]));
    }
}

#[allow(clippy::too_many_arguments)]
fn insert_compacter_layer(
    extras: &mut IndexMap<String, Tensor>,
    layer: usize,
    slot: &str,
    d: usize,
    bottleneck: usize,
    n: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) {
    let prefix = format!("delta.compacter.{layer}.{slot}");
    // down: d -> bottleneck, up: bottleneck -> d, both PHM with rank-1 fast
    // factors; zero up fast-v keeps the layer an identity at step 0.
    for (proj, rows, cols, zero_v) in [
        ("down", d, bottleneck, false),
        ("up", bottleneck, d, true),
    ] {
        let bound = 1.0 / ((rows / n) as f64).sqrt();
        for i in 0..n {
            let u: Vec<f64> = (0..rows / n)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            extras.insert(
                format!("{prefix}.{proj}.u{i}"),
                Tensor::new(vec![rows / n, 1], u).expect("sized"),
            );
            let v = if zero_v {
                Tensor::zeros(vec![1, cols / n])
            } else {
                let bound_v = 1.0 / ((cols / n) as f64).sqrt();
                let data: Vec<f64> = (0..cols / n)
                    .map(|_| rng.random_range(-bound_v..bound_v))
                    .collect();
                Tensor::new(vec![1, cols / n], data).expect("sized")
            };
            extras.insert(format!("{prefix}.{proj}.v{i}"), v);
        }
        if bias {
            extras.insert(format!("{prefix}.{proj}.bias"), Tensor::zeros(vec![cols]));
        }
    }
}

fn is_bias_path(path: &str) -> bool {
    path.ends_with(".bias")
        || [".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo", ".mlp.b1", ".mlp.b2"]
            .iter()
            .any(|suffix| path.ends_with(suffix))
}

fn is_ln_path(path: &str) -> bool {
    path.starts_with("ln_f.") || path.contains(".ln1.") || path.contains(".ln2.")
}

fn trainable_base_paths(model: &ViTModel, strategy: &AdaptStrategy) -> Vec<String> {
    let keep: Box<dyn Fn(&str) -> bool> = match strategy {
        AdaptStrategy::FullFinetune => Box::new(|_| true),
        AdaptStrategy::BitFit => Box::new(|p| is_bias_path(p) || is_ln_path(p)),
        AdaptStrategy::LayerNormTune => Box::new(is_ln_path),
        AdaptStrategy::AttentionTune => Box::new(|p| p.contains(".attn.")),
        _ => Box::new(|_| false),
    };
    model
        .paths()
        .filter(|p| p.starts_with("head.") || keep(p))
        .map(str::to_string)
        .collect()
}
