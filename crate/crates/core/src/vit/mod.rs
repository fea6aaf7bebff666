//! A small vision transformer in which every parameter is addressable by a
//! stable path name (`block.3.attn.Wq`, `head.weight`, ...), plus the LePE
//! (depthwise-convolution positional) and RPB (relative position bias)
//! attention variants.
//!
//! The forward pass is built on a [`Tape`] through a [`ForwardBinder`], which
//! decides how each named parameter enters the graph (frozen, trainable, or
//! replaced by a composed expression such as `W₀ + ΔW`) and provides the
//! injection points used by the adaptation strategies.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// LayerNorm epsilon, fixed; gradient checks assume this exact value.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// When false the head pools the mean of all tokens instead.
    pub class_token: bool,
}

impl ViTConfig {
    /// Desk-scale default: full training stays under a minute per run.
    pub fn vit_tiny() -> Self {
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            d_model: 64,
            num_heads: 4,
            num_layers: 4,
            mlp_ratio: 4,
            num_classes: 10,
            class_token: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.channels == 0 || self.num_layers == 0 || self.mlp_ratio == 0 || self.num_classes == 0
        {
            return Err(Error::Config(
                "channels, num_layers, mlp_ratio and num_classes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Sequence length including the class token when present.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Attention flavor used by the forward pass.
///
/// The extra parameters (depthwise kernel, bias table) are looked up through
/// the binder under `block.{i}.attn.lepe.kernel` / `block.{i}.attn.rpb.table`,
/// so they can live either in a model registry or in an adapter overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttentionVariant {
    Plain,
    /// Adds `DWConv(V)` (per-channel k×k over the patch grid) to the
    /// attention output; the class token passes through the conv unchanged.
    Lepe { kernel_size: usize },
    /// Adds a learned bias indexed by relative patch offset to the attention
    /// logits before the softmax.
    Rpb,
}

impl AttentionVariant {
    /// Bias-table length: one entry per relative offset plus one shared
    /// entry for all token↔class interactions.
    pub fn rpb_table_len(cfg: &ViTConfig) -> usize {
        let s = cfg.grid_side();
        (2 * s - 1) * (2 * s - 1) + usize::from(cfg.class_token)
    }
}

// ── model ───────────────────────────────────────────────────────────

/// ViT with a registry covering every trainable tensor exactly once.
#[derive(Debug, Clone)]
pub struct ViTModel {
    pub config: ViTConfig,
    params: IndexMap<String, Tensor>,
}

impl ViTModel {
    /// Fixed-seed random initialization; two builds with the same seed are
    /// bit-identical.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params = IndexMap::new();
        let d = config.d_model;

        let randn = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::new(shape, data).expect("shape matches data")
        };

        params.insert(
            "patch.weight".into(),
            randn(vec![config.patch_dim(), d], &mut rng),
        );
        params.insert("patch.bias".into(), Tensor::zeros(vec![d]));
        if config.class_token {
            params.insert("cls".into(), randn(vec![d], &mut rng));
        }
        params.insert("pos".into(), randn(vec![config.seq_len(), d], &mut rng));
        for i in 0..config.num_layers {
            params.insert(format!("block.{i}.ln1.weight"), Tensor::full(vec![d], 1.0));
            params.insert(format!("block.{i}.ln1.bias"), Tensor::zeros(vec![d]));
            for w in ["Wq", "Wk", "Wv", "Wo"] {
                params.insert(format!("block.{i}.attn.{w}"), randn(vec![d, d], &mut rng));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.insert(format!("block.{i}.attn.{b}"), Tensor::zeros(vec![d]));
            }
            params.insert(format!("block.{i}.ln2.weight"), Tensor::full(vec![d], 1.0));
            params.insert(format!("block.{i}.ln2.bias"), Tensor::zeros(vec![d]));
            params.insert(
                format!("block.{i}.mlp.W1"),
                randn(vec![d, config.mlp_dim()], &mut rng),
            );
            params.insert(format!("block.{i}.mlp.b1"), Tensor::zeros(vec![config.mlp_dim()]));
            params.insert(
                format!("block.{i}.mlp.W2"),
                randn(vec![config.mlp_dim(), d], &mut rng),
            );
            params.insert(format!("block.{i}.mlp.b2"), Tensor::zeros(vec![d]));
        }
        params.insert("ln_f.weight".into(), Tensor::full(vec![d], 1.0));
        params.insert("ln_f.bias".into(), Tensor::zeros(vec![d]));
        params.insert(
            "head.weight".into(),
            randn(vec![d, config.num_classes], &mut rng),
        );
        params.insert("head.bias".into(), Tensor::zeros(vec![config.num_classes]));

        Ok(ViTModel { config, params })
    }

    pub fn param(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn param_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn set_param(&mut self, path: &str, tensor: Tensor) -> Result<()> {
        match self.params.get_mut(path) {
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(Error::Config(format!(
                        "shape {:?} does not match {:?} for {path}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                *slot = tensor;
                Ok(())
            }
            None => Err(Error::MissingParam(path.into())),
        }
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Deterministic (path, shape, count) listing of the registry.
    pub fn param_paths(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.params
            .iter()
            .map(|(p, t)| (p.clone(), t.shape().to_vec(), t.numel()))
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Bytes held by the registry tensors.
    pub fn param_bytes(&self) -> usize {
        self.total_params() * std::mem::size_of::<f64>()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .map(|(p, t)| (p.as_str(), t))
            .collect();
        checkpoint::save(path, &self.config, None, &entries)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let mut model = ViTModel::new(loaded.config.clone(), 0)?;
        let mut remaining: std::collections::BTreeSet<String> =
            model.params.keys().cloned().collect();
        for (p, t) in loaded.tensors {
            if !remaining.remove(&p) {
                return Err(Error::Checkpoint(format!("unexpected tensor {p}")));
            }
            model.set_param(&p, t)?;
        }
        if let Some(missing) = remaining.into_iter().next() {
            return Err(Error::Checkpoint(format!("missing tensor {missing}")));
        }
        Ok(model)
    }
}

// ── forward construction ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sublayer {
    Attention,
    Mlp,
}

/// Supplies parameter tensors to the forward pass and exposes the points
/// where adaptation strategies graft extra computation onto a block.
pub trait ForwardBinder {
    fn bind(&mut self, tape: &mut Tape, path: &str) -> Result<Var>;

    /// Applied to a sublayer output before it is added back to the residual.
    fn sublayer_out(
        &mut self,
        _tape: &mut Tape,
        _layer: usize,
        _which: Sublayer,
        z: Var,
    ) -> Result<Var> {
        Ok(z)
    }

    /// Applied to the merged-head attention context before the output
    /// projection.
    fn attn_ctx(&mut self, _tape: &mut Tape, _layer: usize, ctx: Var) -> Result<Var> {
        Ok(ctx)
    }

    /// Applied to the token sequence after the encoder stack, before the
    /// final norm and pooling.
    fn pre_pool(&mut self, _tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Binder over a bare model: every path resolves to the registry, with an
/// optional predicate marking paths trainable.
pub struct ModelBinder<'m> {
    model: &'m ViTModel,
    trainable: Option<Box<dyn Fn(&str) -> bool + 'm>>,
    /// Trainable bindings in bind order.
    pub bound: Vec<(String, Var)>,
    cache: HashMap<String, Var>,
}

impl<'m> ModelBinder<'m> {
    pub fn frozen(model: &'m ViTModel) -> Self {
        ModelBinder {
            model,
            trainable: None,
            bound: Vec::new(),
            cache: HashMap::new(),
        }
    }

    pub fn trainable_if(model: &'m ViTModel, pred: impl Fn(&str) -> bool + 'm) -> Self {
        ModelBinder {
            model,
            trainable: Some(Box::new(pred)),
            bound: Vec::new(),
            cache: HashMap::new(),
        }
    }
}

impl ForwardBinder for ModelBinder<'_> {
    fn bind(&mut self, tape: &mut Tape, path: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(path) {
            return Ok(v);
        }
        let tensor = self
            .model
            .param(path)
            .ok_or_else(|| Error::MissingParam(path.into()))?;
        let train = self.trainable.as_ref().is_some_and(|p| p(path));
        let v = if train {
            tape.param(tensor)
        } else {
            tape.constant(tensor)
        };
        if train {
            self.bound.push((path.into(), v));
        }
        self.cache.insert(path.into(), v);
        Ok(v)
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Post-softmax attention weights, one `[b*heads, t, t]` tensor per layer.
    pub attn_probs: Vec<Var>,
}

/// Identifies which block's parameters to bind: a numbered encoder layer or
/// the stacked probe block.
#[derive(Debug, Clone, Copy)]
pub enum BlockId {
    Layer(usize),
    Probe,
}

impl BlockId {
    fn prefix(&self) -> String {
        match self {
            BlockId::Layer(i) => format!("block.{i}"),
            BlockId::Probe => "probe".into(),
        }
    }

    fn layer(&self) -> Option<usize> {
        match self {
            BlockId::Layer(i) => Some(*i),
            BlockId::Probe => None,
        }
    }
}

/// Extract non-overlapping patches: `[b,c,h,w] -> [b*T, c*p*p]` row-major by
/// grid position. Images never require gradients, so this runs off-tape.
pub fn patchify(cfg: &ViTConfig, images: &Tensor) -> Result<Tensor> {
    let want = [
        images.shape().first().copied().unwrap_or(0),
        cfg.channels,
        cfg.image_size,
        cfg.image_size,
    ];
    if images.shape().len() != 4 || images.shape()[1..] != want[1..] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match configured {:?}",
            images.shape(),
            &want[1..]
        )));
    }
    let b = want[0];
    let (c, hw, p, side) = (
        cfg.channels,
        cfg.image_size,
        cfg.patch_size,
        cfg.grid_side(),
    );
    let src = images.data();
    let mut out = Vec::with_capacity(b * cfg.num_patches() * cfg.patch_dim());
    for img in 0..b {
        let base = img * c * hw * hw;
        for gy in 0..side {
            for gx in 0..side {
                for ch in 0..c {
                    for py in 0..p {
                        let row = base + ch * hw * hw + (gy * p + py) * hw + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![b * cfg.num_patches(), cfg.patch_dim()], out)?)
}

fn affine(tape: &mut Tape, binder: &mut dyn ForwardBinder, prefix: &str, x: Var) -> Result<Var> {
    let w = binder.bind(tape, &format!("{prefix}.weight"))?;
    let b = binder.bind(tape, &format!("{prefix}.bias"))?;
    let y = tape.mul_broadcast(x, w)?;
    Ok(tape.add_broadcast(y, b)?)
}

fn linear(
    tape: &mut Tape,
    binder: &mut dyn ForwardBinder,
    w_path: &str,
    b_path: &str,
    x: Var,
) -> Result<Var> {
    let w = binder.bind(tape, w_path)?;
    let b = binder.bind(tape, b_path)?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_broadcast(y, b)?)
}

/// `[b*t, d] -> [b*heads, t, head_dim]`.
fn to_heads(tape: &mut Tape, x: Var, b: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = tape.reshape(x, vec![b, t, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(x, vec![b * heads, t, dh])?)
}

/// `[b*heads, t, head_dim] -> [b*t, d]`.
fn from_heads(tape: &mut Tape, x: Var, b: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = tape.reshape(x, vec![b, heads, t, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(x, vec![b * t, heads * dh])?)
}

/// One pre-norm encoder block on `x: [b,t,d]`.
pub fn encoder_block(
    tape: &mut Tape,
    cfg: &ViTConfig,
    variant: &AttentionVariant,
    binder: &mut dyn ForwardBinder,
    id: BlockId,
    x: Var,
    attn_probs: &mut Vec<Var>,
) -> Result<Var> {
    let prefix = id.prefix();
    let shape = tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();

    // attention sublayer
    let h = tape.layernorm(x, LN_EPS)?;
    let h = affine(tape, binder, &format!("{prefix}.ln1"), h)?;
    let h2 = tape.reshape(h, vec![b * t, d])?;
    let q = linear(
        tape,
        binder,
        &format!("{prefix}.attn.Wq"),
        &format!("{prefix}.attn.bq"),
        h2,
    )?;
    let k = linear(
        tape,
        binder,
        &format!("{prefix}.attn.Wk"),
        &format!("{prefix}.attn.bk"),
        h2,
    )?;
    let v = linear(
        tape,
        binder,
        &format!("{prefix}.attn.Wv"),
        &format!("{prefix}.attn.bv"),
        h2,
    )?;

    let qh = to_heads(tape, q, b, t, heads, dh)?;
    let kh = tape.reshape(k, vec![b, t, heads, dh])?;
    let kh = tape.permute(kh, &[0, 2, 3, 1])?; // [b, heads, dh, t]
    let kh = tape.reshape(kh, vec![b * heads, dh, t])?;
    let scores = tape.bmm(qh, kh)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());

    if matches!(variant, AttentionVariant::Rpb) && id.layer().is_some() {
        let table = binder.bind(tape, &format!("{prefix}.attn.rpb.table"))?;
        let idx = rpb_index_map(cfg);
        let bias = tape.gather(table, &idx, vec![t, t])?;
        scores = tape.add_broadcast(scores, bias)?;
    }

    let probs = tape.softmax(scores, 2)?;
    attn_probs.push(probs);

    let vh = to_heads(tape, v, b, t, heads, dh)?;
    let ctx = tape.bmm(probs, vh)?;
    let mut ctx = from_heads(tape, ctx, b, t, heads, dh)?;

    if let AttentionVariant::Lepe { kernel_size } = variant {
        if id.layer().is_some() {
            let kernel = binder.bind(tape, &format!("{prefix}.attn.lepe.kernel"))?;
            let v3 = tape.reshape(v, vec![b, t, d])?;
            let conv = dwconv(tape, v3, kernel, cfg.class_token)?;
            debug_assert_eq!(*kernel_size, tape.shape(kernel)[1]);
            let conv2 = tape.reshape(conv, vec![b * t, d])?;
            ctx = tape.add(ctx, conv2)?;
        }
    }

    if let Some(layer) = id.layer() {
        ctx = binder.attn_ctx(tape, layer, ctx)?;
    }

    let mut attn_out = linear(
        tape,
        binder,
        &format!("{prefix}.attn.Wo"),
        &format!("{prefix}.attn.bo"),
        ctx,
    )?;
    if let Some(layer) = id.layer() {
        attn_out = binder.sublayer_out(tape, layer, Sublayer::Attention, attn_out)?;
    }
    let attn3 = tape.reshape(attn_out, vec![b, t, d])?;
    let x = tape.add(x, attn3)?;

    // MLP sublayer
    let h = tape.layernorm(x, LN_EPS)?;
    let h = affine(tape, binder, &format!("{prefix}.ln2"), h)?;
    let h2 = tape.reshape(h, vec![b * t, d])?;
    let u = linear(
        tape,
        binder,
        &format!("{prefix}.mlp.W1"),
        &format!("{prefix}.mlp.b1"),
        h2,
    )?;
    let u = tape.gelu(u);
    let mut u = linear(
        tape,
        binder,
        &format!("{prefix}.mlp.W2"),
        &format!("{prefix}.mlp.b2"),
        u,
    )?;
    if let Some(layer) = id.layer() {
        u = binder.sublayer_out(tape, layer, Sublayer::Mlp, u)?;
    }
    let u3 = tape.reshape(u, vec![b, t, d])?;
    Ok(tape.add(x, u3)?)
}

/// Full forward pass: `[b,c,h,w]` images to `[b,num_classes]` logits.
pub fn forward(
    tape: &mut Tape,
    cfg: &ViTConfig,
    variant: &AttentionVariant,
    binder: &mut dyn ForwardBinder,
    images: &Tensor,
) -> Result<ForwardOutput> {
    let patches = patchify(cfg, images)?;
    let b = images.shape()[0];
    let d = cfg.d_model;

    let pv = tape.leaf(patches);
    let x = linear(tape, binder, "patch.weight", "patch.bias", pv)?;
    let mut x = tape.reshape(x, vec![b, cfg.num_patches(), d])?;
    if cfg.class_token {
        let cls = binder.bind(tape, "cls")?;
        x = tape.prepend_token(x, cls)?;
    }
    let pos = binder.bind(tape, "pos")?;
    x = tape.add_broadcast(x, pos)?;

    let mut attn_probs = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        x = encoder_block(
            tape,
            cfg,
            variant,
            binder,
            BlockId::Layer(layer),
            x,
            &mut attn_probs,
        )?;
    }

    x = binder.pre_pool(tape, x)?;

    let h = tape.layernorm(x, LN_EPS)?;
    let h = affine(tape, binder, "ln_f", h)?;
    let feats = if cfg.class_token {
        tape.take_token(h, 0)?
    } else {
        mean_tokens(tape, h)?
    };
    let logits = linear(tape, binder, "head.weight", "head.bias", feats)?;
    Ok(ForwardOutput { logits, attn_probs })
}

/// Mean over the token axis via a constant averaging vector.
fn mean_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let xt = tape.permute(x, &[0, 2, 1])?;
    let flat = tape.reshape(xt, vec![b * d, t])?;
    let avg = tape.leaf(Tensor::full(vec![t, 1], 1.0 / t as f64));
    let pooled = tape.matmul(flat, avg)?;
    Ok(tape.reshape(pooled, vec![b, d])?)
}

// ── relative position bias ──────────────────────────────────────────

/// Flat `[t*t]` index map into the RPB table. Patch pairs index by relative
/// offset; any pair involving the class token maps to the shared final entry.
pub fn rpb_index_map(cfg: &ViTConfig) -> Vec<usize> {
    let s = cfg.grid_side();
    let cls = usize::from(cfg.class_token);
    let t = cfg.seq_len();
    let span = 2 * s - 1;
    let cls_idx = span * span;
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            if cls == 1 && (i == 0 || j == 0) {
                out.push(cls_idx);
                continue;
            }
            let (pi, pj) = (i - cls, j - cls);
            let dy = pi / s + s - 1 - pj / s;
            let dx = pi % s + s - 1 - pj % s;
            out.push(dy * span + dx);
        }
    }
    out
}

// ── depthwise convolution (LePE) ────────────────────────────────────

#[derive(Debug)]
struct DwConvOp {
    v: Var,
    kernel: Var,
    b: usize,
    t: usize,
    d: usize,
    side: usize,
    ksize: usize,
    cls: usize,
}

impl DwConvOp {
    fn run(&self, v: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (b, t, d, side, ks, cls) = (self.b, self.t, self.d, self.side, self.ksize, self.cls);
        let r = ks / 2;
        let mut out = vec![0.0; b * t * d];
        for img in 0..b {
            let base = img * t * d;
            if cls == 1 {
                out[base..base + d].copy_from_slice(&v[base..base + d]);
            }
            for gy in 0..side {
                for gx in 0..side {
                    let o = base + (cls + gy * side + gx) * d;
                    for ky in 0..ks {
                        let iy = gy + ky;
                        if iy < r || iy - r >= side {
                            continue;
                        }
                        for kx in 0..ks {
                            let ix = gx + kx;
                            if ix < r || ix - r >= side {
                                continue;
                            }
                            let src = base + (cls + (iy - r) * side + (ix - r)) * d;
                            let kk = ky * ks + kx;
                            for c in 0..d {
                                out[o + c] += kernel[c * ks * ks + kk] * v[src + c];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl CustomOp for DwConvOp {
    fn name(&self) -> &'static str {
        "dwconv"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.v, self.kernel]
    }

    fn backward(
        &self,
        values: &dyn Fn(Var) -> Tensor,
        out_grad: &[f64],
        input_grads: &mut [Vec<f64>],
    ) {
        let v = values(self.v);
        let kernel = values(self.kernel);
        let (vd, kd) = (v.data(), kernel.data());
        let (b, t, d, side, ks, cls) = (self.b, self.t, self.d, self.side, self.ksize, self.cls);
        let r = ks / 2;
        let (dv, dk) = {
            let (a, rest) = input_grads.split_at_mut(1);
            (&mut a[0], &mut rest[0])
        };
        for img in 0..b {
            let base = img * t * d;
            if cls == 1 {
                for c in 0..d {
                    dv[base + c] += out_grad[base + c];
                }
            }
            for gy in 0..side {
                for gx in 0..side {
                    let o = base + (cls + gy * side + gx) * d;
                    for ky in 0..ks {
                        let iy = gy + ky;
                        if iy < r || iy - r >= side {
                            continue;
                        }
                        for kx in 0..ks {
                            let ix = gx + kx;
                            if ix < r || ix - r >= side {
                                continue;
                            }
                            let src = base + (cls + (iy - r) * side + (ix - r)) * d;
                            let kk = ky * ks + kx;
                            for c in 0..d {
                                dv[src + c] += kd[c * ks * ks + kk] * out_grad[o + c];
                                dk[c * ks * ks + kk] += vd[src + c] * out_grad[o + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel 2-D convolution of token values over the patch grid with zero
/// padding. `v: [b, tokens, d]`, `kernel: [d, k, k]` with odd `k`; the class
/// token (when `class_token`) passes through unchanged.
pub fn dwconv(tape: &mut Tape, v: Var, kernel: Var, class_token: bool) -> Result<Var> {
    let vs = tape.shape(v).to_vec();
    let ks = tape.shape(kernel).to_vec();
    if vs.len() != 3 {
        return Err(Error::Config(format!("dwconv expects [b,t,d] input, got {vs:?}")));
    }
    let cls = usize::from(class_token);
    let grid_tokens = vs[1]
        .checked_sub(cls)
        .ok_or(Error::NonSquareGrid { tokens: 0 })?;
    let side = (grid_tokens as f64).sqrt().round() as usize;
    if side * side != grid_tokens {
        return Err(Error::NonSquareGrid {
            tokens: grid_tokens,
        });
    }
    if ks.len() != 3 || ks[0] != vs[2] || ks[1] != ks[2] || ks[1] % 2 == 0 {
        return Err(Error::Config(format!(
            "dwconv kernel must be [d={}, k, k] with odd k, got {ks:?}",
            vs[2]
        )));
    }
    let op = DwConvOp {
        v,
        kernel,
        b: vs[0],
        t: vs[1],
        d: vs[2],
        side,
        ksize: ks[1],
        cls,
    };
    let out = op.run(tape.value(v).data(), tape.value(kernel).data());
    let value = Tensor::new(vs, out)?;
    Ok(tape.custom(value, Box::new(op)))
}
