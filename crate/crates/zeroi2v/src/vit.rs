//! The image-transformer skeleton: patch embedding, attention + MLP blocks in
//! a pre-norm residual layout, and a video-level classifier head.
//!
//! Per block: `z = x + Attn(LN(x))`, `out = z + MLP(LN(z))`. The attention
//! sublayer is injected — plain multi-head self-attention, the dual-headed
//! temporal variant, or one of the channel-shift baselines — so the same block
//! wiring serves all of them. Video-level readout averages the per-frame
//! class tokens after the final layer norm and applies one linear classifier.
//! The positional table is spatial only and shared across frames: all
//! temporal information must enter through the attention sublayer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdapterSite, AdapterSpec};
use crate::error::{Error, Result};
use crate::stdha::{self, AttentionOp};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor};
use crate::weights::{TrainableMask, WeightStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Block count L.
    pub depth: usize,
    /// Channel count d.
    pub width: usize,
    /// Head count h.
    pub heads: usize,
    /// MLP hidden width d' (> d; conventionally 4d).
    pub mlp_width: usize,
    /// Patch side in pixels.
    pub patch_size: usize,
    /// Image side in pixels.
    pub image_size: usize,
    /// Frames per clip T.
    pub frames: usize,
    /// Input channels per pixel.
    pub channels: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.frames == 0 || self.channels == 0 {
            return Err(Error::Config(
                "depth/heads/frames/channels must be positive".into(),
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.mlp_width <= self.width {
            return Err(Error::Config(format!(
                "mlp width {} must exceed width {}",
                self.mlp_width, self.width
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Tokens per frame: patches plus one class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    /// Flattened patch vector length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Per-head channel width.
    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Small default used throughout the test and acceptance suites:
    /// L=4, d=64, h=8, d'=256, p=4, s=32, T=8, grayscale, two classes.
    pub fn tiny() -> Self {
        ViTConfig {
            depth: 4,
            width: 64,
            heads: 8,
            mlp_width: 256,
            patch_size: 4,
            image_size: 32,
            frames: 8,
            channels: 1,
            num_classes: 2,
        }
    }

    pub fn vit_b_16(frames: usize, num_classes: usize) -> Self {
        ViTConfig {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_width: 3072,
            patch_size: 16,
            image_size: 224,
            frames,
            channels: 3,
            num_classes,
        }
    }

    pub fn vit_l_14(frames: usize, num_classes: usize) -> Self {
        ViTConfig {
            depth: 24,
            width: 1024,
            heads: 16,
            mlp_width: 4096,
            patch_size: 14,
            image_size: 224,
            frames,
            channels: 3,
            num_classes,
        }
    }
}

/// Lazily binds store tensors onto a tape, caching the `Var` per name so
/// fan-out (e.g. a shared adapter) resolves to a single tape node.
pub struct Binder<'a, E: Elem> {
    store: &'a WeightStore<E>,
    mask: Option<&'a TrainableMask>,
    bound: BTreeMap<String, Var>,
}

impl<'a, E: Elem> Binder<'a, E> {
    pub fn new(store: &'a WeightStore<E>, mask: Option<&'a TrainableMask>) -> Self {
        Binder {
            store,
            mask,
            bound: BTreeMap::new(),
        }
    }

    pub fn var(&mut self, tape: &mut Tape<E>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = self.store.get(name)?;
        let trainable = self.mask.map(|m| m.is_trainable(name)).unwrap_or(false);
        let v = if trainable {
            tape.param(tensor)
        } else {
            tape.constant(tensor)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn store(&self) -> &WeightStore<E> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Names bound so far with their tape handles (trainer uses this to route
    /// gradients back to store tensors).
    pub fn bound(self) -> BTreeMap<String, Var> {
        self.bound
    }
}

/// Everything a caller may want from one forward pass.
pub struct ModelOutput {
    pub logits: Var,
    /// Residual-stream output of each block, for layer-diff probes.
    pub block_outputs: Vec<Var>,
    /// name -> tape var for every weight touched.
    pub params: BTreeMap<String, Var>,
}

/// Patch embedding: non-overlapping patches linearly projected, class token
/// prepended per frame, shared positional table added.
pub fn patch_embed<E: Elem>(
    tape: &mut Tape<E>,
    binder: &mut Binder<'_, E>,
    cfg: &ViTConfig,
    frames: Var,
) -> Result<Var> {
    let fsh = tape.shape(frames).to_vec();
    if fsh.len() != 4
        || fsh[1] != cfg.image_size
        || fsh[2] != cfg.image_size
        || fsh[3] != cfg.channels
    {
        return Err(Error::Shape {
            op: "patch_embed",
            detail: format!(
                "frames {fsh:?} vs config [T, {}, {}, {}]",
                cfg.image_size, cfg.image_size, cfg.channels
            ),
        });
    }
    let patches = tape.extract_patches(frames, cfg.patch_size)?;
    let proj = binder.var(tape, "embed.proj")?;
    let bias = binder.var(tape, "embed.bias")?;
    let projected = tape.matmul(patches, proj)?;
    let projected = tape.bias_add(projected, bias)?;
    let cls = binder.var(tape, "cls_token")?;
    let with_cls = tape.prepend_token(projected, cls)?;
    let pos = binder.var(tape, "pos_embed")?;
    tape.bias_add(with_cls, pos)
}

/// One transformer block: pre-norm attention and MLP, both residual.
pub fn block_forward<E: Elem>(
    tape: &mut Tape<E>,
    binder: &mut Binder<'_, E>,
    cfg: &ViTConfig,
    block: usize,
    attn: &AttentionOp,
    adapters: Option<&AdapterSpec>,
    x: Var,
) -> Result<Var> {
    let g1 = binder.var(tape, &format!("block.{block}.ln1.gamma"))?;
    let b1 = binder.var(tape, &format!("block.{block}.ln1.beta"))?;
    let ln1 = tape.layer_norm(x, g1, b1, LN_EPS)?;
    let attn_out = stdha::attention_sublayer(tape, binder, cfg, block, attn, adapters, ln1)?;
    let z = tape.add(x, attn_out)?;

    let g2 = binder.var(tape, &format!("block.{block}.ln2.gamma"))?;
    let b2 = binder.var(tape, &format!("block.{block}.ln2.beta"))?;
    let ln2 = tape.layer_norm(z, g2, b2, LN_EPS)?;
    let mlp_out = mlp_forward(tape, binder, cfg, block, adapters, ln2)?;
    tape.add(z, mlp_out)
}

/// Position-wise MLP: `gelu(x W_up + b_up) W_down + b_down`, with optional
/// adapters around both projections.
pub fn mlp_forward<E: Elem>(
    tape: &mut Tape<E>,
    binder: &mut Binder<'_, E>,
    cfg: &ViTConfig,
    block: usize,
    adapters: Option<&AdapterSpec>,
    x: Var,
) -> Result<Var> {
    let _ = cfg;
    let up =
        crate::adapt::project_with_adapter(tape, binder, adapters, block, AdapterSite::MlpUp, x)?;
    let hidden = tape.gelu(up)?;
    crate::adapt::project_with_adapter(tape, binder, adapters, block, AdapterSite::MlpDown, hidden)
}

/// Full video forward pass: embed, blocks, final norm, frame-averaged class
/// token, classifier. Returns plain logits.
pub fn model_forward<E: Elem>(
    tape: &mut Tape<E>,
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    attn: &AttentionOp,
    adapters: Option<&AdapterSpec>,
    mask: Option<&TrainableMask>,
    frames: &Tensor<E>,
) -> Result<Var> {
    Ok(model_forward_full(tape, store, cfg, attn, adapters, mask, frames)?.logits)
}

/// Forward pass that also exposes per-block outputs and bound parameters.
pub fn model_forward_full<E: Elem>(
    tape: &mut Tape<E>,
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    attn: &AttentionOp,
    adapters: Option<&AdapterSpec>,
    mask: Option<&TrainableMask>,
    frames: &Tensor<E>,
) -> Result<ModelOutput> {
    cfg.validate()?;
    attn.validate(cfg)?;
    if let Some(spec) = adapters {
        spec.validate(cfg)?;
    }
    let mut binder = Binder::new(store, mask);
    let input = tape.constant(frames);
    let mut x = patch_embed(tape, &mut binder, cfg, input)?;
    let mut block_outputs = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        x = block_forward(tape, &mut binder, cfg, i, attn, adapters, x)?;
        block_outputs.push(x);
    }
    let gf = binder.var(tape, "final_ln.gamma")?;
    let bf = binder.var(tape, "final_ln.beta")?;
    let normed = tape.layer_norm(x, gf, bf, LN_EPS)?;
    let cls = tape.select_token(normed, 0)?;
    let pooled = tape.mean_axis0(cls)?;
    let pooled = tape.reshape(pooled, vec![1, cfg.width])?;
    let hw = binder.var(tape, "head.w")?;
    let hb = binder.var(tape, "head.b")?;
    let logits = tape.matmul(pooled, hw)?;
    let logits = tape.bias_add(logits, hb)?;
    let logits = tape.reshape(logits, vec![cfg.num_classes])?;
    Ok(ModelOutput {
        logits,
        block_outputs,
        params: binder.bound(),
    })
}

/// Inference helper: logits as a plain tensor, no gradient machinery.
/// Read-only evaluation over a shared frozen store is safe from multiple
/// threads; each call owns its tape.
pub fn infer_logits<E: Elem>(
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    attn: &AttentionOp,
    adapters: Option<&AdapterSpec>,
    frames: &Tensor<E>,
) -> Result<Tensor<E>> {
    let mut tape = Tape::new(false);
    let logits = model_forward(&mut tape, store, cfg, attn, adapters, None, frames)?;
    Ok(tape.value(logits).clone())
}
