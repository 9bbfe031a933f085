//! Trainable adaptation structures over a frozen backbone.
//!
//! Three adapter kinds wrap the backbone's linear projections:
//!
//! * `linear` — serial identity-plus-low-rank map `x + (x W_a) W_b` applied at
//!   model width. Mergeable into the wrapped projection.
//! * `lora` — parallel low-rank update `x W_old + b_old + (x A) B`. Mergeable.
//! * `gelu` — serial `x + gelu(x W_a) W_b`. Trainable but NOT mergeable; the
//!   nonlinearity blocks reparameterization.
//!
//! Naming note: `w_a` is always the down-projection (D -> k) and `w_b` the
//! up-projection (k -> D), named by function rather than direction.
//!
//! Placement covers every projection of attention and MLP. All serial
//! adapters attach at model width `d`: on the input side of their projection,
//! except the MLP down-projection whose adapter sits on the output side
//! (its input side is the wider hidden dim). One shared adapter may feed all
//! three of Q/K/V.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor};
use crate::vit::{Binder, ViTConfig};
use crate::weights::{tensor_rng, ElemMask, TrainableMask, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Linear,
    Lora,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterSite {
    #[serde(rename = "qkv")]
    QkvShared,
    #[serde(rename = "q")]
    Q,
    #[serde(rename = "k")]
    K,
    #[serde(rename = "v")]
    V,
    #[serde(rename = "o")]
    O,
    #[serde(rename = "mlp_up")]
    MlpUp,
    #[serde(rename = "mlp_down")]
    MlpDown,
}

impl AdapterSite {
    pub fn name(self) -> &'static str {
        match self {
            AdapterSite::QkvShared => "qkv",
            AdapterSite::Q => "q",
            AdapterSite::K => "k",
            AdapterSite::V => "v",
            AdapterSite::O => "o",
            AdapterSite::MlpUp => "mlp_up",
            AdapterSite::MlpDown => "mlp_down",
        }
    }

    /// Wrapped projection's weight/bias names (QkvShared has no single one).
    pub fn projection_names(self, block: usize) -> Option<(String, String)> {
        let leaf = match self {
            AdapterSite::QkvShared => return None,
            AdapterSite::Q => "attn.w_q",
            AdapterSite::K => "attn.w_k",
            AdapterSite::V => "attn.w_v",
            AdapterSite::O => "attn.w_o",
            AdapterSite::MlpUp => "mlp.w_up",
            AdapterSite::MlpDown => "mlp.w_down",
        };
        let bias_leaf = leaf.replace(".w_", ".b_");
        Some((
            format!("block.{block}.{leaf}"),
            format!("block.{block}.{bias_leaf}"),
        ))
    }

    /// In/out dims of the wrapped projection (for the parallel kind).
    pub fn projection_dims(self, cfg: &ViTConfig) -> (usize, usize) {
        match self {
            AdapterSite::MlpUp => (cfg.width, cfg.mlp_width),
            AdapterSite::MlpDown => (cfg.mlp_width, cfg.width),
            _ => (cfg.width, cfg.width),
        }
    }

    /// Serial adapters for the down-projection attach after it (at width d);
    /// everywhere else they transform the projection input.
    pub fn serial_on_output(self) -> bool {
        matches!(self, AdapterSite::MlpDown)
    }

    pub fn tensor_name(self, block: usize, leaf: &str) -> String {
        format!("block.{block}.adapter.{}.{leaf}", self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bottleneck {
    /// Explicit rank k.
    Width(usize),
    /// k = round(ratio · d).
    Ratio(f64),
}

impl Bottleneck {
    pub fn resolve(&self, cfg: &ViTConfig) -> Result<usize> {
        let k = match *self {
            Bottleneck::Width(k) => k,
            Bottleneck::Ratio(r) => {
                if r <= 0.0 {
                    return Err(Error::Config(format!(
                        "bottleneck ratio {r} must be positive"
                    )));
                }
                (r * cfg.width as f64).round() as usize
            }
        };
        if k == 0 {
            return Err(Error::Config("bottleneck width resolves to 0".into()));
        }
        Ok(k)
    }
}

/// Which projections are wrapped, by what kind, at what rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub placement: Vec<AdapterSite>,
    pub kind: AdapterKind,
    pub bottleneck: Bottleneck,
    /// Optional adapter bias `b_a` (serial kinds only; off by default).
    #[serde(default)]
    pub bias: bool,
}

impl AdapterSpec {
    /// Shared-QKV + O + MLP up/down: four adapters per block.
    pub fn canonical4(kind: AdapterKind, bottleneck: Bottleneck) -> Self {
        AdapterSpec {
            placement: vec![
                AdapterSite::QkvShared,
                AdapterSite::O,
                AdapterSite::MlpUp,
                AdapterSite::MlpDown,
            ],
            kind,
            bottleneck,
            bias: false,
        }
    }

    /// Separate Q/K/V + O + MLP up/down: six adapters per block.
    pub fn canonical6(kind: AdapterKind, bottleneck: Bottleneck) -> Self {
        AdapterSpec {
            placement: vec![
                AdapterSite::Q,
                AdapterSite::K,
                AdapterSite::V,
                AdapterSite::O,
                AdapterSite::MlpUp,
                AdapterSite::MlpDown,
            ],
            kind,
            bottleneck,
            bias: false,
        }
    }

    pub fn has_site(&self, site: AdapterSite) -> bool {
        self.placement.contains(&site)
    }

    pub fn adapters_per_block(&self) -> usize {
        self.placement.len()
    }

    pub fn validate(&self, cfg: &ViTConfig) -> Result<()> {
        if self.placement.is_empty() {
            return Err(Error::Config("adapter placement is empty".into()));
        }
        for (i, a) in self.placement.iter().enumerate() {
            if self.placement[i + 1..].contains(a) {
                return Err(Error::Config(format!(
                    "duplicate adapter site `{}`",
                    a.name()
                )));
            }
        }
        let shared = self.has_site(AdapterSite::QkvShared);
        let separate = [AdapterSite::Q, AdapterSite::K, AdapterSite::V]
            .iter()
            .any(|s| self.has_site(*s));
        if shared && separate {
            return Err(Error::Config(
                "shared qkv adapter excludes individual q/k/v adapters".into(),
            ));
        }
        if shared && self.kind == AdapterKind::Lora {
            return Err(Error::Config(
                "a parallel low-rank update cannot be shared across q/k/v; use separate sites"
                    .into(),
            ));
        }
        if self.bias && self.kind == AdapterKind::Lora {
            return Err(Error::Config(
                "the parallel kind has no adapter bias".into(),
            ));
        }
        let k = self.bottleneck.resolve(cfg)?;
        match self.kind {
            AdapterKind::Linear | AdapterKind::Gelu => {
                if k >= cfg.width {
                    return Err(Error::Config(format!(
                        "bottleneck {k} must be below width {}",
                        cfg.width
                    )));
                }
            }
            AdapterKind::Lora => {
                for site in &self.placement {
                    let (din, dout) = site.projection_dims(cfg);
                    if k >= din.min(dout) {
                        return Err(Error::Config(format!(
                            "bottleneck {k} must be below min({din}, {dout}) at site `{}`",
                            site.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Shapes of this spec's tensors at one site.
    pub fn site_shapes(
        &self,
        cfg: &ViTConfig,
        site: AdapterSite,
    ) -> Result<Vec<(String, Vec<usize>)>> {
        let k = self.bottleneck.resolve(cfg)?;
        let mut out = Vec::new();
        match self.kind {
            AdapterKind::Linear | AdapterKind::Gelu => {
                let d = cfg.width;
                out.push(("w_a".to_string(), vec![d, k]));
                out.push(("w_b".to_string(), vec![k, d]));
                if self.bias {
                    out.push(("b_a".to_string(), vec![d]));
                }
            }
            AdapterKind::Lora => {
                let (din, dout) = site.projection_dims(cfg);
                out.push(("w_a".to_string(), vec![din, k]));
                out.push(("w_b".to_string(), vec![k, dout]));
            }
        }
        Ok(out)
    }
}

/// Closed-form trainable-parameter count for a spec over the whole model:
/// serial adapters cost `2·d·k` (+`d` bias) per site, parallel ones
/// `k·(D_in + D_out)`.
pub fn adapter_param_count(spec: &AdapterSpec, cfg: &ViTConfig) -> Result<u64> {
    spec.validate(cfg)?;
    let k = spec.bottleneck.resolve(cfg)? as u64;
    let mut per_block = 0u64;
    for site in &spec.placement {
        per_block += match spec.kind {
            AdapterKind::Linear | AdapterKind::Gelu => {
                2 * cfg.width as u64 * k + if spec.bias { cfg.width as u64 } else { 0 }
            }
            AdapterKind::Lora => {
                let (din, dout) = site.projection_dims(cfg);
                k * (din as u64 + dout as u64)
            }
        };
    }
    Ok(per_block * cfg.depth as u64)
}

/// Serial adapter application: `x + (x W_a) W_b (+ b_a)`, with a GELU between
/// the two maps for the nonlinear kind.
pub fn apply_serial_adapter<E: Elem>(
    tape: &mut Tape<E>,
    binder: &mut Binder<'_, E>,
    spec: &AdapterSpec,
    block: usize,
    site: AdapterSite,
    x: Var,
) -> Result<Var> {
    debug_assert!(matches!(spec.kind, AdapterKind::Linear | AdapterKind::Gelu));
    let w_a = binder.var(tape, &site.tensor_name(block, "w_a"))?;
    let w_b = binder.var(tape, &site.tensor_name(block, "w_b"))?;
    let mut down = tape.matmul(x, w_a)?;
    if spec.kind == AdapterKind::Gelu {
        down = tape.gelu(down)?;
    }
    let up = tape.matmul(down, w_b)?;
    let mut y = tape.add(x, up)?;
    if spec.bias {
        let b_a = binder.var(tape, &site.tensor_name(block, "b_a"))?;
        y = tape.bias_add(y, b_a)?;
    }
    Ok(y)
}

/// A wrapped projection: applies the site's adapter (if any) around
/// `x W + b`. Serial adapters transform the input (output for the MLP
/// down-projection); the parallel kind adds `(x A) B` to the result.
pub fn project_with_adapter<E: Elem>(
    tape: &mut Tape<E>,
    binder: &mut Binder<'_, E>,
    adapters: Option<&AdapterSpec>,
    block: usize,
    site: AdapterSite,
    x: Var,
) -> Result<Var> {
    let (w_name, b_name) = site
        .projection_names(block)
        .ok_or_else(|| Error::Config("shared qkv site has no single projection".into()))?;
    let spec = match adapters {
        Some(s) if s.has_site(site) => s,
        _ => {
            let w = binder.var(tape, &w_name)?;
            let b = binder.var(tape, &b_name)?;
            let y = tape.matmul(x, w)?;
            return tape.bias_add(y, b);
        }
    };
    match spec.kind {
        AdapterKind::Lora => {
            let w = binder.var(tape, &w_name)?;
            let b = binder.var(tape, &b_name)?;
            let base = tape.matmul(x, w)?;
            let base = tape.bias_add(base, b)?;
            let a = binder.var(tape, &site.tensor_name(block, "w_a"))?;
            let bb = binder.var(tape, &site.tensor_name(block, "w_b"))?;
            let low = tape.matmul(x, a)?;
            let low = tape.matmul(low, bb)?;
            tape.add(base, low)
        }
        AdapterKind::Linear | AdapterKind::Gelu => {
            if site.serial_on_output() {
                let w = binder.var(tape, &w_name)?;
                let b = binder.var(tape, &b_name)?;
                let y = tape.matmul(x, w)?;
                let y = tape.bias_add(y, b)?;
                apply_serial_adapter(tape, binder, spec, block, site, y)
            } else {
                let adapted = apply_serial_adapter(tape, binder, spec, block, site, x)?;
                let w = binder.var(tape, &w_name)?;
                let b = binder.var(tape, &b_name)?;
                let y = tape.matmul(adapted, w)?;
                tape.bias_add(y, b)
            }
        }
    }
}

/// Adapter tensors appended to a cloned store, backbone frozen. `w_a` is
/// small Gaussian (std 0.02), `w_b` zero, so the adapted model's first
/// forward equals the frozen model's exactly. The classifier stays trainable.
pub fn build_adapted_model<E: Elem>(
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    spec: &AdapterSpec,
    seed: u64,
) -> Result<(WeightStore<E>, TrainableMask)> {
    spec.validate(cfg)?;
    store.validate_for(cfg)?;
    let mut adapted = store.clone();
    let mut mask = TrainableMask::new();
    for name in store.names() {
        let head = name.starts_with("head.");
        if head {
            mask.set(name, ElemMask::All);
        }
    }
    for name in store.names().map(String::from).collect::<Vec<_>>() {
        adapted.set_frozen(&name, !name.starts_with("head."))?;
    }
    for block in 0..cfg.depth {
        for &site in &spec.placement {
            for (leaf, shape) in spec.site_shapes(cfg, site)? {
                let name = site.tensor_name(block, &leaf);
                let tensor = match leaf.as_str() {
                    "w_a" => {
                        let mut rng = tensor_rng(seed, &name);
                        Tensor::randn(shape, 0.02, &mut rng)
                    }
                    _ => Tensor::zeros(shape),
                };
                adapted.insert(&name, tensor, false)?;
                mask.set(&name, ElemMask::All);
            }
        }
    }
    Ok((adapted, mask))
}

/// Mask that trains exactly the temporal-head channel blocks of the four
/// attention projections (plus the classifier): Q/K/V output columns and
/// output-projection input rows belonging to heads with nonzero offsets.
pub fn temporal_head_mask<E: Elem>(
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    plan: &crate::stdha::HeadOffsetPlan,
) -> Result<TrainableMask> {
    plan.validate_for(cfg)?;
    let d = cfg.width;
    let dh = cfg.head_width();
    let temporal: Vec<bool> = plan.offsets().iter().map(|&o| o != 0).collect();
    let col_mask: Vec<bool> = (0..d).map(|c| temporal[c / dh]).collect();

    let mut mask = TrainableMask::new();
    mask.set("head.w", ElemMask::All);
    mask.set("head.b", ElemMask::All);
    for block in 0..cfg.depth {
        for leaf in ["w_q", "w_k", "w_v"] {
            let name = format!("block.{block}.attn.{leaf}");
            store.get(&name)?;
            let flags: Vec<bool> = (0..d * d).map(|i| col_mask[i % d]).collect();
            mask.set(&name, ElemMask::Partial(flags.into()));
        }
        for leaf in ["b_q", "b_k", "b_v"] {
            let name = format!("block.{block}.attn.{leaf}");
            store.get(&name)?;
            mask.set(&name, ElemMask::Partial(col_mask.clone().into()));
        }
        // output projection reads head channels as rows
        let name = format!("block.{block}.attn.w_o");
        store.get(&name)?;
        let flags: Vec<bool> = (0..d * d).map(|i| col_mask[i / d]).collect();
        mask.set(&name, ElemMask::Partial(flags.into()));
    }
    Ok(mask)
}
