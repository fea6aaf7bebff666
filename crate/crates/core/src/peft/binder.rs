//! Forward-pass wiring for adapted models: parameter binding (frozen,
//! trainable, or `W₀ + ΔW` composition) and the adapter/probe hooks.

use super::{AdaptStrategy, AdaptedModel, AdapterPlacement, DeltaKind};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{self, BlockId, ForwardBinder, Sublayer};
use std::collections::HashMap;

/// Tape handles for one bottleneck adapter.
pub struct AdapterVars {
    pub down_w: Var,
    pub down_b: Option<Var>,
    pub up_w: Var,
    pub up_b: Option<Var>,
}

/// `x + up(gelu(down(x)))` on rows of `x: [rows, k]`; with a zero-initialized
/// up-projection this is the identity.
pub fn adapter_forward(tape: &mut Tape, block: &AdapterVars, x: Var) -> Result<Var> {
    let mut h = tape.matmul(x, block.down_w)?;
    if let Some(b) = block.down_b {
        h = tape.add_broadcast(h, b)?;
    }
    let h = tape.gelu(h);
    let mut h = tape.matmul(h, block.up_w)?;
    if let Some(b) = block.up_b {
        h = tape.add_broadcast(h, b)?;
    }
    Ok(tape.add(x, h)?)
}

/// Tape handles for one Compacter layer: projections are sums of Kronecker
/// products between shared slow factors and per-layer rank-1 fast factors.
pub struct CompacterVars {
    pub slow: Vec<Var>,
    pub down_u: Vec<Var>,
    pub down_v: Vec<Var>,
    pub down_b: Option<Var>,
    pub up_u: Vec<Var>,
    pub up_v: Vec<Var>,
    pub up_b: Option<Var>,
}

/// `Σᵢ kron(Aᵢ, uᵢ·vᵢ)`, differentiable in every factor.
pub fn phm_matrix(tape: &mut Tape, slow: &[Var], us: &[Var], vs: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for ((&a, &u), &v) in slow.iter().zip(us).zip(vs) {
        let fast = tape.matmul(u, v)?;
        let term = tape.kron(a, fast)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    acc.ok_or_else(|| Error::Config("PHM needs at least one Kronecker term".into()))
}

/// Residual bottleneck with PHM-parameterized projections; identical in
/// topology to [`adapter_forward`].
pub fn compacter_forward(tape: &mut Tape, vars: &CompacterVars, x: Var) -> Result<Var> {
    let down = phm_matrix(tape, &vars.slow, &vars.down_u, &vars.down_v)?;
    let up = phm_matrix(tape, &vars.slow, &vars.up_u, &vars.up_v)?;
    let mut h = tape.matmul(x, down)?;
    if let Some(b) = vars.down_b {
        h = tape.add_broadcast(h, b)?;
    }
    let h = tape.gelu(h);
    let mut h = tape.matmul(h, up)?;
    if let Some(b) = vars.up_b {
        h = tape.add_broadcast(h, b)?;
    }
    Ok(tape.add(x, h)?)
}

pub struct AdaptedForward {
    pub logits: Var,
    pub attn_probs: Vec<Var>,
    /// Trainable (path, var) bindings in bind order.
    pub trainable: Vec<(String, Var)>,
}

impl AdaptedModel {
    /// Build the adapted forward graph. With `train` false every parameter
    /// enters as a frozen constant.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, train: bool) -> Result<AdaptedForward> {
        let mut binder = StrategyBinder {
            adapted: self,
            train,
            trainable: Vec::new(),
            cache: HashMap::new(),
        };
        let variant = self.variant();
        let out = vit::forward(tape, &self.base.config, &variant, &mut binder, images)?;
        Ok(AdaptedForward {
            logits: out.logits,
            attn_probs: out.attn_probs,
            trainable: binder.trainable,
        })
    }

    /// Logits for a batch without recording anything trainable.
    pub fn eval_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, false)?;
        Ok(tape.value(out.logits).clone())
    }

    fn delta_site(&self, path: &str) -> Option<&super::DeltaSite> {
        match &self.delta {
            DeltaKind::Kron(k) => k.sites.iter().find(|s| s.weight == path),
            DeltaKind::Lora(l) => l.sites.iter().find(|s| s.weight == path),
            DeltaKind::None => None,
        }
    }

    fn delta_bias_site(&self, path: &str) -> Option<&super::DeltaSite> {
        match &self.delta {
            DeltaKind::Kron(k) if k.delta_bias => {
                k.sites.iter().find(|s| s.bias.as_deref() == Some(path))
            }
            _ => None,
        }
    }
}

struct StrategyBinder<'a> {
    adapted: &'a AdaptedModel,
    train: bool,
    trainable: Vec<(String, Var)>,
    cache: HashMap<String, Var>,
}

impl StrategyBinder<'_> {
    /// Bind an injected tensor (trainable unless fixed by the strategy).
    fn bind_extra(&mut self, tape: &mut Tape, path: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(path) {
            return Ok(v);
        }
        let tensor = self
            .adapted
            .extras()
            .get(path)
            .ok_or_else(|| Error::MissingParam(path.into()))?;
        let train = self.train && !self.adapted.frozen_extras.contains(path);
        let v = if train {
            tape.param(tensor)
        } else {
            tape.constant(tensor)
        };
        if train {
            self.trainable.push((path.into(), v));
        }
        self.cache.insert(path.into(), v);
        Ok(v)
    }

    fn bind_base(&mut self, tape: &mut Tape, path: &str) -> Result<Var> {
        let tensor = self
            .adapted
            .base
            .param(path)
            .ok_or_else(|| Error::MissingParam(path.into()))?;
        let train = self.train && self.adapted.trainable_base.iter().any(|p| p == path);
        let v = if train {
            tape.param(tensor)
        } else {
            tape.constant(tensor)
        };
        if train {
            self.trainable.push((path.into(), v));
        }
        Ok(v)
    }

    /// Compose `W₀ + ΔW` on the tape for an adapted weight site.
    fn bind_delta_site(&mut self, tape: &mut Tape, path: &str) -> Result<Var> {
        let w0 = {
            let tensor = self
                .adapted
                .base
                .param(path)
                .ok_or_else(|| Error::MissingParam(path.into()))?;
            tape.constant(tensor)
        };
        let delta = match &self.adapted.delta {
            DeltaKind::Kron(kron) => {
                let slow: Vec<Var> = (0..kron.n)
                    .map(|i| match kron.slow_rank {
                        None => self.bind_extra(tape, &format!("delta.slow.{i}")),
                        Some(_) => {
                            let u = self.bind_extra(tape, &format!("delta.slow.{i}.u"))?;
                            let v = self.bind_extra(tape, &format!("delta.slow.{i}.v"))?;
                            Ok(tape.matmul(u, v)?)
                        }
                    })
                    .collect::<Result<_>>()?;
                let us: Vec<Var> = (0..kron.n)
                    .map(|i| self.bind_extra(tape, &format!("delta.{path}.u{i}")))
                    .collect::<Result<_>>()?;
                let vs: Vec<Var> = (0..kron.n)
                    .map(|i| self.bind_extra(tape, &format!("delta.{path}.v{i}")))
                    .collect::<Result<_>>()?;
                let mut d = phm_matrix(tape, &slow, &us, &vs)?;
                if kron.scale != 1.0 {
                    d = tape.scale(d, kron.scale);
                }
                d
            }
            DeltaKind::Lora(lora) => {
                let a = self.bind_extra(tape, &format!("delta.{path}.a"))?;
                let b = self.bind_extra(tape, &format!("delta.{path}.b"))?;
                let mut d = tape.matmul(a, b)?;
                if lora.scale != 1.0 {
                    d = tape.scale(d, lora.scale);
                }
                d
            }
            DeltaKind::None => unreachable!("delta_site implies a delta kind"),
        };
        Ok(tape.add(w0, delta)?)
    }

    fn adapter_vars(&mut self, tape: &mut Tape, layer: usize, slot: &str) -> Result<AdapterVars> {
        let prefix = format!("delta.adapter.{layer}.{slot}");
        let down_w = self.bind_extra(tape, &format!("{prefix}.down.weight"))?;
        let up_w = self.bind_extra(tape, &format!("{prefix}.up.weight"))?;
        let down_b = if self.adapted.extras().contains_key(&format!("{prefix}.down.bias")) {
            Some(self.bind_extra(tape, &format!("{prefix}.down.bias"))?)
        } else {
            None
        };
        let up_b = if self.adapted.extras().contains_key(&format!("{prefix}.up.bias")) {
            Some(self.bind_extra(tape, &format!("{prefix}.up.bias"))?)
        } else {
            None
        };
        Ok(AdapterVars {
            down_w,
            down_b,
            up_w,
            up_b,
        })
    }

    fn compacter_vars(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        slot: &str,
        n: usize,
    ) -> Result<CompacterVars> {
        let prefix = format!("delta.compacter.{layer}.{slot}");
        let slow: Vec<Var> = (0..n)
            .map(|i| self.bind_extra(tape, &format!("delta.compacter.slow.{i}")))
            .collect::<Result<_>>()?;
        let mut factors = |proj: &str| -> Result<(Vec<Var>, Vec<Var>, Option<Var>)> {
            let us = (0..n)
                .map(|i| self.bind_extra(tape, &format!("{prefix}.{proj}.u{i}")))
                .collect::<Result<Vec<_>>>()?;
            let vs = (0..n)
                .map(|i| self.bind_extra(tape, &format!("{prefix}.{proj}.v{i}")))
                .collect::<Result<Vec<_>>>()?;
            let bias_path = format!("{prefix}.{proj}.bias");
            let b = if self.adapted.extras().contains_key(&bias_path) {
                Some(self.bind_extra(tape, &bias_path)?)
            } else {
                None
            };
            Ok((us, vs, b))
        };
        let (down_u, down_v, down_b) = factors("down")?;
        let (up_u, up_v, up_b) = factors("up")?;
        Ok(CompacterVars {
            slow,
            down_u,
            down_v,
            down_b,
            up_u,
            up_v,
            up_b,
        })
    }
}

impl ForwardBinder for StrategyBinder<'_> {
    fn bind(&mut self, tape: &mut Tape, path: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(path) {
            return Ok(v);
        }
        // variant parameters and the probe block live in the extras overlay
        let overlay = format!("delta.{path}");
        if self.adapted.extras().contains_key(&overlay) {
            return self.bind_extra(tape, &overlay);
        }
        let v = if self.adapted.delta_site(path).is_some() {
            self.bind_delta_site(tape, path)?
        } else if let Some(site) = self.adapted.delta_bias_site(path) {
            let b0 = {
                let tensor = self
                    .adapted
                    .base
                    .param(path)
                    .ok_or_else(|| Error::MissingParam(path.into()))?;
                tape.constant(tensor)
            };
            let db = self.bind_extra(tape, &format!("delta.{}.bias", site.weight))?;
            tape.add(b0, db)?
        } else {
            self.bind_base(tape, path)?
        };
        self.cache.insert(path.into(), v);
        Ok(v)
    }

    fn sublayer_out(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        which: Sublayer,
        z: Var,
    ) -> Result<Var> {
        let slot = match which {
            Sublayer::Attention => "attn",
            Sublayer::Mlp => "mlp",
        };
        match &self.adapted.strategy {
            AdaptStrategy::Adapter {
                placement: AdapterPlacement::AfterMlpAndAttn,
                ..
            } => {
                let vars = self.adapter_vars(tape, layer, slot)?;
                adapter_forward(tape, &vars, z)
            }
            AdaptStrategy::AdapterDrop { .. }
                if layer + 1 == self.adapted.base.config.num_layers =>
            {
                let vars = self.adapter_vars(tape, layer, slot)?;
                adapter_forward(tape, &vars, z)
            }
            AdaptStrategy::Compacter { n, .. } => {
                let n = *n;
                let vars = self.compacter_vars(tape, layer, slot, n)?;
                compacter_forward(tape, &vars, z)
            }
            _ => Ok(z),
        }
    }

    fn attn_ctx(&mut self, tape: &mut Tape, layer: usize, ctx: Var) -> Result<Var> {
        match &self.adapted.strategy {
            AdaptStrategy::Adapter {
                placement: AdapterPlacement::InsideAttention,
                ..
            } => {
                let vars = self.adapter_vars(tape, layer, "attn_inner")?;
                adapter_forward(tape, &vars, ctx)
            }
            _ => Ok(ctx),
        }
    }

    fn pre_pool(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if matches!(self.adapted.strategy, AdaptStrategy::TransformerProbe) {
            let cfg = self.adapted.base.config.clone();
            let mut probe_probs = Vec::new();
            return vit::encoder_block(
                tape,
                &cfg,
                &crate::vit::AttentionVariant::Plain,
                self,
                BlockId::Probe,
                x,
                &mut probe_probs,
            );
        }
        Ok(x)
    }
}
