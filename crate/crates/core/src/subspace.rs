//! Subspace reparameterization of a chosen submodule: the effective
//! parameters are always `Θ = Θ₀ + P·θ` with a frozen flattened snapshot
//! `Θ₀ ∈ R^D`, a structured (Fastfood) or dense Gaussian projection
//! `P: R^d → R^D`, and θ the only trainable object besides the head.
//! Grid search over ascending `d` yields the local intrinsic dimension:
//! the smallest `d` whose accuracy reaches a fraction of full accuracy.

use crate::error::{Error, Result};
use crate::harness::data::SplitDataset;
use crate::harness::derive_seed;
use crate::harness::train::{grid_search_train, TrainConfig, Trainable};
use crate::tensor::{CustomOp, Tape, Tensor, Var};
use crate::vit::{self, ForwardBinder, ViTModel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Default fraction of full accuracy that defines the intrinsic dimension.
pub const ID_THRESHOLD: f64 = 0.90;

/// Dense projection entry cap: D·d beyond this is a configuration error.
pub const DENSE_CAP: usize = 1 << 24;

// ── Walsh–Hadamard ──────────────────────────────────────────────────

/// In-place unnormalized Walsh–Hadamard butterfly; `v.len()` must be a
/// power of two.
pub fn wht_inplace(v: &mut [f64]) {
    let n = v.len();
    debug_assert!(n.is_power_of_two() || n <= 1);
    let mut h = 1;
    while h < n {
        let mut i = 0;
        while i < n {
            for j in i..i + h {
                let x = v[j];
                let y = v[j + h];
                v[j] = x + y;
                v[j + h] = x - y;
            }
            i += h * 2;
        }
        h *= 2;
    }
}

fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

// ── Fastfood projection ─────────────────────────────────────────────

/// One power-of-two block of the structured factorization S·H·G·Π·H·B.
#[derive(Clone)]
struct FastfoodBlock {
    signs: Vec<f64>,
    perm: Vec<usize>,
    gauss: Vec<f64>,
    /// Scalar scaling diagonal 1/(√ℓ·‖g‖): keeps E‖block(x)‖² = ‖x‖².
    scale: f64,
}

impl FastfoodBlock {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let signs: Vec<f64> = (0..len)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(rng);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let gauss: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
        let norm = gauss.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = 1.0 / ((len as f64).sqrt() * norm);
        FastfoodBlock {
            signs,
            perm,
            gauss,
            scale,
        }
    }

    /// S·H·G·Π·H·B applied to the padded input.
    fn apply(&self, x_pad: &[f64]) -> Vec<f64> {
        let len = self.signs.len();
        let mut z: Vec<f64> = x_pad.iter().zip(&self.signs).map(|(x, s)| x * s).collect();
        wht_inplace(&mut z);
        let mut w: Vec<f64> = (0..len).map(|i| self.gauss[i] * z[self.perm[i]]).collect();
        wht_inplace(&mut w);
        for v in &mut w {
            *v *= self.scale;
        }
        w
    }

    /// Transpose: B·H·Πᵀ·G·H·S.
    fn apply_transpose(&self, g_pad: &[f64]) -> Vec<f64> {
        let len = self.signs.len();
        let mut u: Vec<f64> = g_pad.iter().map(|v| v * self.scale).collect();
        wht_inplace(&mut u);
        let mut t = vec![0.0; len];
        for i in 0..len {
            t[self.perm[i]] += self.gauss[i] * u[i];
        }
        wht_inplace(&mut t);
        for (v, s) in t.iter_mut().zip(&self.signs) {
            *v *= s;
        }
        t
    }
}

/// Structured `R^d → R^D` linear map, a deterministic function of
/// `(D, d, seed)`, applied in O(D log d) per vector.
#[derive(Clone)]
pub struct FastfoodProjection {
    pub d_full: usize,
    pub d_sub: usize,
    pub seed: u64,
    pub block_len: usize,
    blocks: Vec<FastfoodBlock>,
}

impl std::fmt::Debug for FastfoodProjection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "FastfoodProjection({}x{}, {} blocks of {}, seed {})",
            self.d_full,
            self.d_sub,
            self.blocks.len(),
            self.block_len,
            self.seed
        )
    }
}

pub fn build_fastfood(d_full: usize, d_sub: usize, seed: u64) -> Result<FastfoodProjection> {
    if d_full == 0 || d_sub == 0 {
        return Err(Error::InvalidInput(
            "projection dimensions must be positive".into(),
        ));
    }
    let block_len = next_pow2(d_sub);
    let n_blocks = d_full.div_ceil(block_len);
    let blocks = (0..n_blocks)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[7, b as u64]));
            FastfoodBlock::new(block_len, &mut rng)
        })
        .collect();
    Ok(FastfoodProjection {
        d_full,
        d_sub,
        seed,
        block_len,
        blocks,
    })
}

impl FastfoodProjection {
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(theta.len(), self.d_sub);
        let mut pad = vec![0.0; self.block_len];
        pad[..self.d_sub].copy_from_slice(theta);
        let mut out = Vec::with_capacity(self.d_full);
        for block in &self.blocks {
            let y = block.apply(&pad);
            let take = (self.d_full - out.len()).min(self.block_len);
            out.extend_from_slice(&y[..take]);
        }
        out
    }

    pub fn project_transpose(&self, grad_full: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad_full.len(), self.d_full);
        let mut out = vec![0.0; self.d_sub];
        for (b, block) in self.blocks.iter().enumerate() {
            let start = b * self.block_len;
            let end = (start + self.block_len).min(self.d_full);
            let mut pad = vec![0.0; self.block_len];
            pad[..end - start].copy_from_slice(&grad_full[start..end]);
            let t = block.apply_transpose(&pad);
            for (o, v) in out.iter_mut().zip(&t[..self.d_sub]) {
                *o += v;
            }
        }
        out
    }
}

// ── dense Gaussian projection (oracle alternative) ──────────────────

#[derive(Clone)]
pub struct DenseGaussianProjection {
    pub d_full: usize,
    pub d_sub: usize,
    pub seed: u64,
    /// Row-major `D × d`, entries ~ N(0, 1/d).
    matrix: Vec<f64>,
}

impl std::fmt::Debug for DenseGaussianProjection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "DenseGaussianProjection({}x{}, seed {})",
            self.d_full, self.d_sub, self.seed
        )
    }
}

pub fn dense_gaussian_projection(
    d_full: usize,
    d_sub: usize,
    seed: u64,
) -> Result<DenseGaussianProjection> {
    if d_full == 0 || d_sub == 0 {
        return Err(Error::InvalidInput(
            "projection dimensions must be positive".into(),
        ));
    }
    let size = d_full * d_sub;
    if size > DENSE_CAP {
        return Err(Error::SizeCap {
            size,
            cap: DENSE_CAP,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[8]));
    let normal = Normal::new(0.0, (1.0 / d_sub as f64).sqrt()).expect("finite std");
    let matrix = (0..size).map(|_| normal.sample(&mut rng)).collect();
    Ok(DenseGaussianProjection {
        d_full,
        d_sub,
        seed,
        matrix,
    })
}

impl DenseGaussianProjection {
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_full];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * self.d_sub..(i + 1) * self.d_sub];
            *o = row.iter().zip(theta).map(|(m, t)| m * t).sum();
        }
        out
    }

    pub fn project_transpose(&self, grad_full: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_sub];
        for (i, &g) in grad_full.iter().enumerate() {
            let row = &self.matrix[i * self.d_sub..(i + 1) * self.d_sub];
            for (o, m) in out.iter_mut().zip(row) {
                *o += m * g;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionKind {
    Fastfood,
    DenseGaussian,
}

#[derive(Debug, Clone)]
pub enum Projection {
    Fastfood(FastfoodProjection),
    Dense(DenseGaussianProjection),
}

impl Projection {
    pub fn build(kind: ProjectionKind, d_full: usize, d_sub: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            ProjectionKind::Fastfood => Projection::Fastfood(build_fastfood(d_full, d_sub, seed)?),
            ProjectionKind::DenseGaussian => {
                Projection::Dense(dense_gaussian_projection(d_full, d_sub, seed)?)
            }
        })
    }

    pub fn d_full(&self) -> usize {
        match self {
            Projection::Fastfood(p) => p.d_full,
            Projection::Dense(p) => p.d_full,
        }
    }

    pub fn d_sub(&self) -> usize {
        match self {
            Projection::Fastfood(p) => p.d_sub,
            Projection::Dense(p) => p.d_sub,
        }
    }

    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            Projection::Fastfood(p) => p.project(theta),
            Projection::Dense(p) => p.project(theta),
        }
    }

    pub fn project_transpose(&self, grad: &[f64]) -> Vec<f64> {
        match self {
            Projection::Fastfood(p) => p.project_transpose(grad),
            Projection::Dense(p) => p.project_transpose(grad),
        }
    }
}

// ── projection as a tape op ─────────────────────────────────────────

#[derive(Debug)]
struct ProjectOp {
    theta: Var,
    projection: Arc<Projection>,
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "subspace_project"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.theta]
    }

    fn backward(
        &self,
        _values: &dyn Fn(Var) -> Tensor,
        out_grad: &[f64],
        input_grads: &mut [Vec<f64>],
    ) {
        let dt = self.projection.project_transpose(out_grad);
        for (o, v) in input_grads[0].iter_mut().zip(dt) {
            *o += v;
        }
    }
}

/// Record `P·θ` on the tape; the backward rule applies `Pᵀ`.
pub fn project_on_tape(tape: &mut Tape, theta: Var, projection: Arc<Projection>) -> Result<Var> {
    let shape = tape.shape(theta).to_vec();
    if shape != [projection.d_sub()] {
        return Err(Error::InvalidInput(format!(
            "theta shape {shape:?} does not match subspace dimension {}",
            projection.d_sub()
        )));
    }
    let out = projection.project(tape.value(theta).data());
    let value = Tensor::new(vec![projection.d_full()], out)?;
    Ok(tape.custom(
        value,
        Box::new(ProjectOp {
            theta,
            projection,
        }),
    ))
}

// ── submodule selection ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubmoduleKind {
    Attention,
    Mlp,
}

impl SubmoduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(SubmoduleKind::Attention),
            "mlp" => Ok(SubmoduleKind::Mlp),
            other => Err(Error::InvalidInput(format!("unknown submodule {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SubmoduleKind::Attention => "attention",
            SubmoduleKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmoduleSel {
    pub kind: SubmoduleKind,
    pub layers: Vec<usize>,
}

impl SubmoduleSel {
    /// Registry-order parameter paths of the selected submodule.
    pub fn paths(&self, model: &ViTModel) -> Vec<String> {
        let marker = match self.kind {
            SubmoduleKind::Attention => ".attn.",
            SubmoduleKind::Mlp => ".mlp.",
        };
        model
            .paths()
            .filter(|p| {
                p.contains(marker)
                    && self.layers.iter().any(|l| {
                        p.starts_with(&format!("block.{l}."))
                    })
            })
            .map(str::to_string)
            .collect()
    }
}

// ── subspace trainer ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Train the target parameters directly (full-accuracy reference).
    Direct,
    /// d = 0: target frozen, only the head trains.
    Frozen,
    /// Train θ through the projection.
    Projected,
}

/// A frozen model whose target submodule is reparameterized as
/// `Θ₀ + P·θ`; the classification head always trains alongside.
#[derive(Debug, Clone)]
pub struct SubspaceTrainer {
    base: ViTModel,
    target_paths: Vec<String>,
    slices: Vec<(usize, usize, Vec<usize>)>,
    theta0: Tensor,
    pub theta: Option<Tensor>,
    projection: Option<Arc<Projection>>,
    mode: Mode,
}

impl SubspaceTrainer {
    pub fn new(
        model: &ViTModel,
        target: &SubmoduleSel,
        d: usize,
        kind: ProjectionKind,
        seed: u64,
    ) -> Result<Self> {
        let (paths, slices, theta0) = flatten_target(model, target)?;
        let (theta, projection, mode) = if d == 0 {
            (None, None, Mode::Frozen)
        } else {
            let projection = Projection::build(kind, theta0.numel(), d, derive_seed(seed, &[9]))?;
            (
                Some(Tensor::zeros(vec![d])),
                Some(Arc::new(projection)),
                Mode::Projected,
            )
        };
        Ok(SubspaceTrainer {
            base: model.clone(),
            target_paths: paths,
            slices,
            theta0,
            theta,
            projection,
            mode,
        })
    }

    /// Reference trainer: the same target parameters trained directly.
    pub fn direct(model: &ViTModel, target: &SubmoduleSel) -> Result<Self> {
        let (paths, slices, theta0) = flatten_target(model, target)?;
        Ok(SubspaceTrainer {
            base: model.clone(),
            target_paths: paths,
            slices,
            theta0,
            theta: None,
            projection: None,
            mode: Mode::Direct,
        })
    }

    pub fn full_dim(&self) -> usize {
        self.theta0.numel()
    }

    /// Current effective target parameters `Θ₀ + P·θ` (flattened).
    pub fn effective_params(&self) -> Vec<f64> {
        match (&self.theta, &self.projection) {
            (Some(theta), Some(p)) => {
                let delta = p.project(theta.data());
                self.theta0
                    .data()
                    .iter()
                    .zip(delta)
                    .map(|(a, b)| a + b)
                    .collect()
            }
            _ => self.theta0.data().to_vec(),
        }
    }
}

fn flatten_target(
    model: &ViTModel,
    target: &SubmoduleSel,
) -> Result<(Vec<String>, Vec<(usize, usize, Vec<usize>)>, Tensor)> {
    let paths = target.paths(model);
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "target {target:?} selects no parameters"
        )));
    }
    let mut flat = Vec::new();
    let mut slices = Vec::new();
    for p in &paths {
        let t = model.param(p).expect("selected from registry");
        slices.push((flat.len(), t.numel(), t.shape().to_vec()));
        flat.extend_from_slice(t.data());
    }
    let d_full = flat.len();
    Ok((paths, slices, Tensor::new(vec![d_full], flat)?))
}

struct SubspaceBinder<'a> {
    trainer: &'a SubspaceTrainer,
    reconstructed: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
    train: bool,
    cache: HashMap<String, Var>,
}

impl ForwardBinder for SubspaceBinder<'_> {
    fn bind(&mut self, tape: &mut Tape, path: &str) -> Result<Var> {
        if let Some(&v) = self.reconstructed.get(path) {
            return Ok(v);
        }
        if let Some(&v) = self.cache.get(path) {
            return Ok(v);
        }
        let tensor = self
            .trainer
            .base
            .param(path)
            .ok_or_else(|| Error::MissingParam(path.into()))?;
        let is_target = self.trainer.target_paths.iter().any(|p| p == path);
        let trainable = self.train
            && (path.starts_with("head.")
                || (self.trainer.mode == Mode::Direct && is_target));
        let v = if trainable {
            tape.param(tensor)
        } else {
            tape.constant(tensor)
        };
        if trainable {
            self.trainable.push((path.into(), v));
        }
        self.cache.insert(path.into(), v);
        Ok(v)
    }
}

impl Trainable for SubspaceTrainer {
    fn forward_train(
        &self,
        tape: &mut Tape,
        images: &Tensor,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let (logits, trainable) = self.build_forward(tape, images, true)?;
        Ok((logits, trainable))
    }

    fn eval_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (logits, _) = self.build_forward(&mut tape, images, false)?;
        Ok(tape.value(logits).clone())
    }

    fn param_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        if path == "theta" {
            return self.theta.as_mut();
        }
        self.base.param_mut(path)
    }

    fn param_bytes(&self) -> usize {
        self.base.param_bytes()
            + self.theta0.numel() * 8
            + self.theta.as_ref().map_or(0, |t| t.numel() * 8)
    }
}

impl SubspaceTrainer {
    fn build_forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        train: bool,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let mut reconstructed = HashMap::new();
        let mut trainable = Vec::new();
        if self.mode == Mode::Projected {
            let theta = self.theta.as_ref().expect("projected mode has theta");
            let projection = self.projection.as_ref().expect("projected mode");
            let tv = if train {
                tape.param(theta)
            } else {
                tape.constant(theta)
            };
            if train {
                trainable.push(("theta".to_string(), tv));
            }
            let delta = project_on_tape(tape, tv, projection.clone())?;
            let t0 = tape.constant(&self.theta0);
            let full = tape.add(t0, delta)?;
            for (path, (offset, len, shape)) in self.target_paths.iter().zip(&self.slices) {
                let piece = tape.narrow(full, 0, *offset, *len)?;
                let shaped = tape.reshape(piece, shape.clone())?;
                reconstructed.insert(path.clone(), shaped);
            }
        }
        let mut binder = SubspaceBinder {
            trainer: self,
            reconstructed,
            trainable,
            train,
            cache: HashMap::new(),
        };
        let out = vit::forward(
            tape,
            &self.base.config,
            &crate::vit::AttentionVariant::Plain,
            &mut binder,
            images,
        )?;
        Ok((out.logits, binder.trainable))
    }
}

// ── subspace training and intrinsic dimension ───────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SubspaceRunResult {
    pub d: usize,
    pub d_full: usize,
    pub accuracy: f64,
    pub best_lr: f64,
    pub best_wd: f64,
    pub failed_cells: usize,
}

/// Train only θ (plus head) through `Θ = Θ₀ + Pθ` and return the selected
/// cell's validation accuracy (best over the lr/wd grid).
pub fn subspace_train(
    model: &ViTModel,
    target: &SubmoduleSel,
    d: usize,
    kind: ProjectionKind,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<SubspaceRunResult> {
    let trainer = SubspaceTrainer::new(model, target, d, kind, cfg.seed)?;
    let d_full = trainer.full_dim();
    let outcome = grid_search_train(&trainer, data, cfg)?;
    Ok(SubspaceRunResult {
        d,
        d_full,
        accuracy: outcome.val_accuracy,
        best_lr: outcome.best_lr,
        best_wd: outcome.best_wd,
        failed_cells: outcome.failed_cells,
    })
}

/// Accuracy of training the target submodule directly (unprojected) with
/// the same budget: the full-accuracy reference for the 90% threshold.
pub fn direct_submodule_train(
    model: &ViTModel,
    target: &SubmoduleSel,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    let trainer = SubspaceTrainer::direct(model, target)?;
    let outcome = grid_search_train(&trainer, data, cfg)?;
    Ok(outcome.val_accuracy)
}

#[derive(Debug, Clone, Serialize)]
pub struct IdMeasurement {
    pub target: SubmoduleSel,
    pub grid: Vec<usize>,
    pub full_accuracy: f64,
    pub threshold: f64,
    /// (d, accuracy) for the evaluated prefix of the grid.
    pub results: Vec<(usize, f64)>,
    /// Smallest grid d reaching `threshold · full_accuracy`, when any.
    pub d_t: Option<usize>,
}

/// Core measurement loop over an arbitrary evaluator (the analytic stubs in
/// the test suite use this directly).
pub fn measure_with(
    grid: &[usize],
    full_accuracy: f64,
    threshold: f64,
    mut eval: impl FnMut(usize) -> Result<f64>,
) -> Result<(Vec<(usize, f64)>, Option<usize>)> {
    if full_accuracy <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "full accuracy {full_accuracy} must be positive"
        )));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(
            "grid must be non-empty and strictly ascending".into(),
        ));
    }
    let bar = threshold * full_accuracy;
    let mut results = Vec::new();
    let mut d_t = None;
    for &d in grid {
        let acc = eval(d)?;
        results.push((d, acc));
        if acc >= bar {
            d_t = Some(d);
            break;
        }
    }
    Ok((results, d_t))
}

/// Evaluate the grid in ascending order with live subspace training,
/// early-stopping at the first d that reaches the threshold.
pub fn measure_local_id(
    model: &ViTModel,
    target: &SubmoduleSel,
    grid: &[usize],
    full_accuracy: Option<f64>,
    threshold: f64,
    kind: ProjectionKind,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<IdMeasurement> {
    let full = match full_accuracy {
        Some(f) => f,
        None => direct_submodule_train(model, target, data, cfg)?,
    };
    let (results, d_t) = measure_with(grid, full, threshold, |d| {
        Ok(subspace_train(model, target, d, kind, data, cfg)?.accuracy)
    })?;
    Ok(IdMeasurement {
        target: target.clone(),
        grid: grid.to_vec(),
        full_accuracy: full,
        threshold,
        results,
        d_t,
    })
}

/// Per-layer measurements plus the mean curve over the common evaluated
/// prefix, with the mean curve's own threshold crossing.
#[derive(Debug, Clone, Serialize)]
pub struct IdReport {
    pub kind: SubmoduleKind,
    pub layers: Vec<usize>,
    pub grid: Vec<usize>,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub projection: String,
    pub per_layer: Vec<IdMeasurement>,
    pub mean_full_accuracy: f64,
    pub mean_curve: Vec<(usize, f64)>,
    pub mean_curve_d_t: Option<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn measure_id_report(
    model: &ViTModel,
    kind: SubmoduleKind,
    layers: &[usize],
    grid: &[usize],
    threshold: f64,
    projection: ProjectionKind,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<IdReport> {
    if layers.is_empty() {
        return Err(Error::InvalidInput("no layers selected".into()));
    }
    let mut per_layer = Vec::new();
    for &layer in layers {
        let sel = SubmoduleSel {
            kind,
            layers: vec![layer],
        };
        per_layer.push(measure_local_id(
            model, &sel, grid, None, threshold, projection, data, cfg,
        )?);
    }
    let prefix = per_layer
        .iter()
        .map(|m| m.results.len())
        .min()
        .unwrap_or(0);
    let mean_curve: Vec<(usize, f64)> = (0..prefix)
        .map(|i| {
            let d = per_layer[0].results[i].0;
            let mean = per_layer.iter().map(|m| m.results[i].1).sum::<f64>()
                / per_layer.len() as f64;
            (d, mean)
        })
        .collect();
    let mean_full_accuracy =
        per_layer.iter().map(|m| m.full_accuracy).sum::<f64>() / per_layer.len() as f64;
    let mean_curve_d_t = mean_curve
        .iter()
        .find(|(_, acc)| *acc >= threshold * mean_full_accuracy)
        .map(|(d, _)| *d);
    Ok(IdReport {
        kind,
        layers: layers.to_vec(),
        grid: grid.to_vec(),
        threshold,
        seeds: vec![cfg.seed],
        projection: format!("{projection:?}"),
        per_layer,
        mean_full_accuracy,
        mean_curve,
        mean_curve_d_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wht_matches_explicit_hadamard_up_to_64() {
        let mut len = 2;
        while len <= 64 {
            // explicit H via recursion: H[i][j] = (-1)^{popcount(i & j)}
            let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut fast = x.clone();
            wht_inplace(&mut fast);
            for i in 0..len {
                let mut s = 0.0;
                for (j, xv) in x.iter().enumerate() {
                    let sign = if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                    s += sign * xv;
                }
                assert!(
                    (fast[i] - s).abs() < 1e-9,
                    "len {len} row {i}: {} vs {s}",
                    fast[i]
                );
            }
            len *= 2;
        }
    }

    #[test]
    fn projection_of_zero_is_zero() {
        let p = build_fastfood(100, 16, 3).unwrap();
        assert!(p.project(&vec![0.0; 16]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn d1_projection_scales_exactly() {
        let p = build_fastfood(37, 1, 5).unwrap();
        let one = p.project(&[1.0]);
        let two = p.project(&[2.0]);
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn projection_is_linear_within_tolerance() {
        let p = build_fastfood(200, 24, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t1: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t2: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = t1.iter().zip(&t2).map(|(x, y)| a * x + b * y).collect();
        let lhs = p.project(&combo);
        let p1 = p.project(&t1);
        let p2 = p.project(&t2);
        for ((l, x), y) in lhs.iter().zip(&p1).zip(&p2) {
            assert!((l - (a * x + b * y)).abs() < 1e-10);
        }
    }

    #[test]
    fn transpose_satisfies_adjoint_identity() {
        // <P x, y> = <x, Pᵀ y>
        for kind in [ProjectionKind::Fastfood, ProjectionKind::DenseGaussian] {
            let p = Projection::build(kind, 150, 20, 17).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..150).map(|_| rng.random_range(-1.0..1.0)).collect();
            let px = p.project(&x);
            let pty = p.project_transpose(&y);
            let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&pty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{kind:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn basis_vector_norm_is_calibrated() {
        // d = D = 256: one block, ‖P·e₁‖² is exactly 1 per seed by the
        // scaling-diagonal normalization; spot-check a few seeds here.
        let mut mean = 0.0;
        for seed in 0..20 {
            let p = build_fastfood(256, 256, seed).unwrap();
            let mut e1 = vec![0.0; 256];
            e1[0] = 1.0;
            let y = p.project(&e1);
            mean += y.iter().map(|v| v * v).sum::<f64>();
        }
        mean /= 20.0;
        assert!((0.8..=1.2).contains(&mean), "mean {mean}");
    }

    #[test]
    fn fastfood_and_dense_norm_statistics_agree() {
        // pow-2 d: both have E‖Pθ‖² = (D/d)·‖θ‖²
        let (d_full, d_sub, trials) = (512usize, 64usize, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut ratios = [0.0f64; 2];
        for t in 0..trials {
            let theta: Vec<f64> = (0..d_sub).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (slot, kind) in [ProjectionKind::Fastfood, ProjectionKind::DenseGaussian]
                .iter()
                .enumerate()
            {
                let p = Projection::build(*kind, d_full, d_sub, 1000 + t as u64).unwrap();
                let y = p.project(&theta);
                ratios[slot] += y.iter().map(|v| v * v).sum::<f64>().sqrt() / norm;
            }
        }
        let ff = ratios[0] / trials as f64;
        let dg = ratios[1] / trials as f64;
        assert!(
            (ff - dg).abs() / dg < 0.1,
            "fastfood {ff} vs dense {dg} mean norm ratio"
        );
    }

    #[test]
    fn dense_projection_determinism_and_cap() {
        let a = dense_gaussian_projection(64, 8, 3).unwrap();
        let b = dense_gaussian_projection(64, 8, 3).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert!(matches!(
            dense_gaussian_projection(1 << 13, 1 << 13, 0),
            Err(Error::SizeCap { .. })
        ));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        use crate::tensor::finite_diff_grad;
        for kind in [ProjectionKind::Fastfood, ProjectionKind::DenseGaussian] {
            let proj = Arc::new(Projection::build(kind, 40, 12, 29).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let theta =
                Tensor::new(vec![12], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap();
            let weights: Vec<f64> = (0..40).map(|_| rng.random_range(0.5..1.5)).collect();

            let mut tape = Tape::new();
            let tv = tape.param(&theta);
            let out = project_on_tape(&mut tape, tv, proj.clone()).unwrap();
            let wt = tape.leaf(Tensor::new(vec![40], weights.clone()).unwrap());
            let prod = tape.mul(out, wt).unwrap();
            let loss = tape.sum(prod);
            tape.backward(loss).unwrap();
            let analytic = tape.grad(tv).unwrap().to_vec();

            let fd = finite_diff_grad(
                &mut |probe| {
                    proj.project(probe.data())
                        .iter()
                        .zip(&weights)
                        .map(|(o, w)| o * w)
                        .sum()
                },
                &theta,
                1e-5,
            );
            for (a, f) in analytic.iter().zip(fd.data()) {
                assert!(
                    (a - f).abs() / a.abs().max(f.abs()).max(1e-3) < 1e-4,
                    "{kind:?}: {a} vs {f}"
                );
            }
        }
    }

    #[test]
    fn measure_with_analytic_stub_crosses_at_450() {
        let grid: Vec<usize> = (1..=20).map(|i| i * 50).collect();
        let full = 0.8;
        let (results, d_t) =
            measure_with(&grid, full, 0.9, |d| Ok((d as f64 / 500.0).min(1.0) * full)).unwrap();
        assert_eq!(d_t, Some(450));
        assert_eq!(results.len(), 9, "early stop right at the crossing");
    }

    #[test]
    fn measure_with_constant_half_never_qualifies() {
        let grid: Vec<usize> = (1..=20).map(|i| i * 50).collect();
        let (results, d_t) = measure_with(&grid, 0.8, 0.9, |_| Ok(0.4)).unwrap();
        assert_eq!(d_t, None);
        assert_eq!(results.len(), grid.len());
    }

    #[test]
    fn measure_threshold_is_monotone() {
        let grid: Vec<usize> = (1..=20).map(|i| i * 50).collect();
        let eval = |d: usize| Ok((d as f64 / 500.0).min(1.0) * 0.8);
        let mut prev: Option<usize> = None;
        for threshold in [0.5, 0.7, 0.9, 0.95] {
            let (_, d_t) = measure_with(&grid, 0.8, threshold, eval).unwrap();
            let d_t = d_t.expect("crossing exists for these thresholds");
            if let Some(p) = prev {
                assert!(d_t >= p, "raising the threshold lowered d_t");
            }
            prev = Some(d_t);
        }
    }

    #[test]
    fn measure_with_rejects_bad_inputs() {
        assert!(measure_with(&[10, 20], 0.0, 0.9, |_| Ok(0.5)).is_err());
        assert!(measure_with(&[], 0.5, 0.9, |_| Ok(0.5)).is_err());
        assert!(measure_with(&[20, 10], 0.5, 0.9, |_| Ok(0.5)).is_err());
    }

    #[test]
    fn submodule_selector_picks_registry_paths() {
        let model = ViTModel::new(crate::vit::ViTConfig::vit_tiny(), 1).unwrap();
        let sel = SubmoduleSel {
            kind: SubmoduleKind::Attention,
            layers: vec![0, 2],
        };
        let paths = sel.paths(&model);
        assert!(paths.contains(&"block.0.attn.Wq".to_string()));
        assert!(paths.contains(&"block.2.attn.bo".to_string()));
        assert!(!paths.iter().any(|p| p.starts_with("block.1.")));
        assert!(!paths.iter().any(|p| p.contains(".mlp.")));
        // 4 weights + 4 biases per layer, 2 layers
        assert_eq!(paths.len(), 16);
    }

    #[test]
    fn effective_params_anchor_to_theta0() {
        let model = ViTModel::new(crate::vit::ViTConfig::vit_tiny(), 1).unwrap();
        let sel = SubmoduleSel {
            kind: SubmoduleKind::Attention,
            layers: vec![0],
        };
        let mut trainer =
            SubspaceTrainer::new(&model, &sel, 8, ProjectionKind::Fastfood, 0).unwrap();
        // θ = 0 at init: effective params equal Θ₀ exactly
        assert_eq!(trainer.effective_params(), trainer.theta0.data());
        // moving θ moves the effective params by exactly P·θ
        let theta = trainer.theta.as_mut().unwrap();
        theta.data_mut()[3] = 0.5;
        let snapshot = trainer.theta.clone().unwrap();
        let delta = trainer.projection.as_ref().unwrap().project(snapshot.data());
        let eff = trainer.effective_params();
        for ((e, t0), d) in eff.iter().zip(trainer.theta0.data()).zip(delta) {
            assert!((e - (t0 + d)).abs() < 1e-15);
        }
    }
}
