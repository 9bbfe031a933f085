//! Named weight store: the in-memory form of a checkpoint.
//!
//! Tensor names follow a fixed grammar; everything that consumes a store
//! (forward passes, merging, accounting, serialization) keys off these names:
//!
//! ```text
//! embed.{proj,bias}
//! cls_token
//! pos_embed
//! block.<i>.attn.{w_q,b_q,w_k,b_k,w_v,b_v,w_o,b_o}
//! block.<i>.ln1.{gamma,beta}      block.<i>.ln2.{gamma,beta}
//! block.<i>.mlp.{w_up,b_up,w_down,b_down}
//! block.<i>.adapter.<site>.{w_a,w_b,b_a}   site in {qkv,q,k,v,o,mlp_up,mlp_down}
//! final_ln.{gamma,beta}
//! head.{w,b}
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{CheckpointError, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{DType, Elem, Tensor};
use crate::vit::ViTConfig;

pub const ADAPTER_SITES: [&str; 7] = ["qkv", "q", "k", "v", "o", "mlp_up", "mlp_down"];

#[derive(Debug, Clone, PartialEq)]
pub enum NameKind {
    Embed {
        leaf: String,
    },
    ClsToken,
    PosEmbed,
    Block {
        index: usize,
        part: BlockPart,
        leaf: String,
    },
    FinalLn {
        leaf: String,
    },
    Head {
        leaf: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockPart {
    Attn,
    Mlp,
    Ln1,
    Ln2,
    Adapter { site: String },
}

/// Parse and validate a tensor name against the grammar.
pub fn parse_name(name: &str) -> Result<NameKind> {
    let bad = || Error::Checkpoint(CheckpointError::BadName(name.to_string()));
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["cls_token"] => Ok(NameKind::ClsToken),
        ["pos_embed"] => Ok(NameKind::PosEmbed),
        ["embed", leaf] if ["proj", "bias"].contains(leaf) => Ok(NameKind::Embed {
            leaf: leaf.to_string(),
        }),
        ["final_ln", leaf] if ["gamma", "beta"].contains(leaf) => Ok(NameKind::FinalLn {
            leaf: leaf.to_string(),
        }),
        ["head", leaf] if ["w", "b"].contains(leaf) => Ok(NameKind::Head {
            leaf: leaf.to_string(),
        }),
        ["block", idx, "attn", leaf]
            if ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"].contains(leaf) =>
        {
            let index = idx.parse().map_err(|_| bad())?;
            Ok(NameKind::Block {
                index,
                part: BlockPart::Attn,
                leaf: leaf.to_string(),
            })
        }
        ["block", idx, ln @ ("ln1" | "ln2"), leaf] if ["gamma", "beta"].contains(leaf) => {
            let index = idx.parse().map_err(|_| bad())?;
            let part = if *ln == "ln1" {
                BlockPart::Ln1
            } else {
                BlockPart::Ln2
            };
            Ok(NameKind::Block {
                index,
                part,
                leaf: leaf.to_string(),
            })
        }
        ["block", idx, "mlp", leaf] if ["w_up", "b_up", "w_down", "b_down"].contains(leaf) => {
            let index = idx.parse().map_err(|_| bad())?;
            Ok(NameKind::Block {
                index,
                part: BlockPart::Mlp,
                leaf: leaf.to_string(),
            })
        }
        ["block", idx, "adapter", site, leaf]
            if ADAPTER_SITES.contains(site) && ["w_a", "w_b", "b_a"].contains(leaf) =>
        {
            let index = idx.parse().map_err(|_| bad())?;
            Ok(NameKind::Block {
                index,
                part: BlockPart::Adapter {
                    site: site.to_string(),
                },
                leaf: leaf.to_string(),
            })
        }
        _ => Err(bad()),
    }
}

pub fn is_adapter_name(name: &str) -> bool {
    matches!(
        parse_name(name),
        Ok(NameKind::Block {
            part: BlockPart::Adapter { .. },
            ..
        })
    )
}

#[derive(Debug, Clone)]
pub struct StoreEntry<E: Elem> {
    pub tensor: Tensor<E>,
    pub frozen: bool,
}

/// Ordered map of named tensors with per-tensor frozen flags.
#[derive(Debug, Clone, Default)]
pub struct WeightStore<E: Elem> {
    entries: BTreeMap<String, StoreEntry<E>>,
}

impl<E: Elem> WeightStore<E> {
    pub fn new() -> Self {
        WeightStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<E>, frozen: bool) -> Result<()> {
        parse_name(name)?;
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate tensor name `{name}`")));
        }
        self.entries
            .insert(name.to_string(), StoreEntry { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        entry.tensor = tensor;
        Ok(())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<E>> {
        self.entries.remove(name).map(|e| e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn frozen(&self, name: &str) -> Result<bool> {
        self.entries
            .get(name)
            .map(|e| e.frozen)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        entry.frozen = frozen;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoreEntry<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn total_params(&self) -> u64 {
        self.entries.values().map(|e| e.tensor.numel() as u64).sum()
    }

    pub fn cast<F: Elem>(&self) -> WeightStore<F> {
        let mut out = WeightStore::new();
        for (name, entry) in &self.entries {
            out.entries.insert(
                name.clone(),
                StoreEntry {
                    tensor: entry.tensor.cast(),
                    frozen: entry.frozen,
                },
            );
        }
        out
    }

    /// Every backbone tensor required by `cfg` present with the right shape.
    pub fn validate_for(&self, cfg: &ViTConfig) -> Result<()> {
        for (name, shape) in canonical_backbone_names(cfg) {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "weight_store",
                    detail: format!("`{name}`: expected {shape:?}, found {:?}", t.shape()),
                });
            }
        }
        Ok(())
    }

    /// Bitwise comparison of two stores (names, shapes, payloads, flags).
    pub fn bit_eq(&self, other: &WeightStore<E>) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((an, ae), (bn, be))| {
                an == bn && ae.frozen == be.frozen && ae.tensor.bit_eq(&be.tensor)
            })
    }
}

/// Full list of backbone tensor names and shapes for a config.
pub fn canonical_backbone_names(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.width;
    let dp = cfg.mlp_width;
    let mut names = vec![
        ("embed.proj".to_string(), vec![cfg.patch_dim(), d]),
        ("embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.tokens(), d]),
    ];
    for i in 0..cfg.depth {
        for leaf in ["w_q", "w_k", "w_v", "w_o"] {
            names.push((format!("block.{i}.attn.{leaf}"), vec![d, d]));
        }
        for leaf in ["b_q", "b_k", "b_v", "b_o"] {
            names.push((format!("block.{i}.attn.{leaf}"), vec![d]));
        }
        for ln in ["ln1", "ln2"] {
            names.push((format!("block.{i}.{ln}.gamma"), vec![d]));
            names.push((format!("block.{i}.{ln}.beta"), vec![d]));
        }
        names.push((format!("block.{i}.mlp.w_up"), vec![d, dp]));
        names.push((format!("block.{i}.mlp.b_up"), vec![dp]));
        names.push((format!("block.{i}.mlp.w_down"), vec![dp, d]));
        names.push((format!("block.{i}.mlp.b_down"), vec![d]));
    }
    names.push(("final_ln.gamma".to_string(), vec![d]));
    names.push(("final_ln.beta".to_string(), vec![d]));
    names.push(("head.w".to_string(), vec![d, cfg.num_classes]));
    names.push(("head.b".to_string(), vec![cfg.num_classes]));
    names
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_0000_01b3);
    }
    h
}

/// Per-tensor RNG stream so initialization is independent of iteration order.
pub fn tensor_rng(seed: u64, name: &str) -> SeededRng {
    SeededRng::new(seed).derive(fnv1a(name))
}

/// Fresh randomly initialized backbone. Projection weights and embeddings are
/// N(0, 0.02), biases zero, layer-norm affine at identity, classifier zero
/// (zero head weights give zero logits, which keeps probing well-defined).
pub fn init_backbone<E: Elem>(cfg: &ViTConfig, seed: u64) -> Result<WeightStore<E>> {
    cfg.validate()?;
    let mut store = WeightStore::new();
    for (name, shape) in canonical_backbone_names(cfg) {
        let mut rng = tensor_rng(seed, &name);
        let leaf = name.rsplit('.').next().unwrap();
        let tensor = match leaf {
            "gamma" => Tensor::full(shape, E::ONE),
            "beta" => Tensor::zeros(shape),
            _ if name == "head.w" || name == "head.b" => Tensor::zeros(shape),
            _ if leaf.starts_with("b_") || leaf == "bias" => Tensor::zeros(shape),
            _ => Tensor::randn(shape, 0.02, &mut rng),
        };
        store.insert(&name, tensor, false)?;
    }
    Ok(store)
}

// ── trainability masks ───────────────────────────────────────────────

/// Which elements of one tensor receive gradient updates.
#[derive(Debug, Clone)]
pub enum ElemMask {
    All,
    None,
    /// Per-element flags (used for head-slice training).
    Partial(Arc<Vec<bool>>),
}

impl ElemMask {
    pub fn any(&self) -> bool {
        match self {
            ElemMask::All => true,
            ElemMask::None => false,
            ElemMask::Partial(v) => v.iter().any(|&b| b),
        }
    }

    pub fn count(&self, numel: usize) -> u64 {
        match self {
            ElemMask::All => numel as u64,
            ElemMask::None => 0,
            ElemMask::Partial(v) => v.iter().filter(|&&b| b).count() as u64,
        }
    }
}

/// Per-tensor trainability over a weight store. Names absent from the map are
/// frozen.
#[derive(Debug, Clone, Default)]
pub struct TrainableMask {
    map: BTreeMap<String, ElemMask>,
}

impl TrainableMask {
    pub fn new() -> Self {
        TrainableMask {
            map: BTreeMap::new(),
        }
    }

    pub fn all_trainable<E: Elem>(store: &WeightStore<E>) -> Self {
        let mut m = TrainableMask::new();
        for name in store.names() {
            m.map.insert(name.to_string(), ElemMask::All);
        }
        m
    }

    /// Trainability from the store's own frozen flags.
    pub fn from_frozen_flags<E: Elem>(store: &WeightStore<E>) -> Self {
        let mut m = TrainableMask::new();
        for (name, entry) in store.iter() {
            if !entry.frozen {
                m.map.insert(name.to_string(), ElemMask::All);
            }
        }
        m
    }

    pub fn set(&mut self, name: &str, mask: ElemMask) {
        self.map.insert(name.to_string(), mask);
    }

    pub fn mask(&self, name: &str) -> &ElemMask {
        self.map.get(name).unwrap_or(&ElemMask::None)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.mask(name).any()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.map
            .iter()
            .filter(|(_, m)| m.any())
            .map(|(n, _)| n.as_str())
    }

    pub fn trainable_param_count<E: Elem>(&self, store: &WeightStore<E>) -> u64 {
        store
            .iter()
            .map(|(name, e)| self.mask(name).count(e.tensor.numel()))
            .sum()
    }

    /// Zero out gradient entries that the mask freezes.
    pub fn apply_to_grad<E: Elem>(&self, name: &str, grad: &mut Tensor<E>) {
        match self.mask(name) {
            ElemMask::All => {}
            ElemMask::None => {
                for g in grad.data_mut() {
                    *g = E::ZERO;
                }
            }
            ElemMask::Partial(flags) => {
                for (g, &keep) in grad.data_mut().iter_mut().zip(flags.iter()) {
                    if !keep {
                        *g = E::ZERO;
                    }
                }
            }
        }
    }
}
