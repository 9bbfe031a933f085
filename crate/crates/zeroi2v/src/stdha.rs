//! Dual-headed spatial-temporal attention and the zero-cost baselines it is
//! measured against.
//!
//! Every head computes scaled dot-product attention with queries from the
//! current frame. A head's key/value source is what varies:
//!
//! * offset heads read K,V from frame `clip(t + dt, 0, T-1)` — nonzero `dt`
//!   makes a temporal head, zero a spatial head;
//! * channel-shift baselines splice a leading channel block of K,V (and
//!   optionally Q) from the two adjacent frames;
//! * the class-token-shift baseline swaps class-token channels with the
//!   neighbors before the projections.
//!
//! All variants reuse the backbone's projection weights unchanged, so their
//! parameter and FLOP counts equal plain attention's exactly.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adapt::{AdapterSite, AdapterSpec};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Elem;
use crate::vit::{Binder, ViTConfig};
use crate::weights::WeightStore;

/// Upper bound on parsed plan length; no real head count comes close.
pub const MAX_PLAN_HEADS: usize = 4096;

/// One temporal offset per attention head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadOffsetPlan {
    offsets: Vec<i64>,
}

impl HeadOffsetPlan {
    pub fn new(offsets: Vec<i64>) -> Self {
        HeadOffsetPlan { offsets }
    }

    /// The pure-spatial plan: every head stays on its own frame.
    pub fn zeros(heads: usize) -> Self {
        HeadOffsetPlan {
            offsets: vec![0; heads],
        }
    }

    /// Default offsets for a given head count and clip length: one +/-1 pair
    /// for short clips, widening with the input so the receptive field grows.
    pub fn default_for(heads: usize, frames: usize) -> Self {
        let nonzero: &[i64] = if frames <= 8 {
            &[1, -1]
        } else if frames <= 16 {
            &[1, -1, 2, -2]
        } else {
            &[1, -1, 2, -2, 3]
        };
        let take = nonzero.len().min(heads.saturating_sub(1));
        let mut offsets: Vec<i64> = nonzero[..take].to_vec();
        offsets.resize(heads, 0);
        HeadOffsetPlan { offsets }
    }

    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.offsets.iter().all(|&o| o == 0)
    }

    /// Number of temporal heads (nonzero offsets).
    pub fn temporal_head_count(&self) -> usize {
        self.offsets.iter().filter(|&&o| o != 0).count()
    }

    pub fn validate_for(&self, cfg: &ViTConfig) -> Result<()> {
        if self.offsets.len() != cfg.heads {
            return Err(Error::Config(format!(
                "offset plan has {} entries for {} heads",
                self.offsets.len(),
                cfg.heads
            )));
        }
        Ok(())
    }

    /// Frames visible to one attention layer: `max(dt ∪ {0}) - min(dt ∪ {0}) + 1`.
    pub fn temporal_receptive_field(&self) -> usize {
        let max = self.offsets.iter().copied().max().unwrap_or(0).max(0);
        let min = self.offsets.iter().copied().min().unwrap_or(0).min(0);
        (max - min + 1) as usize
    }

    /// Receptive field of `layers` stacked applications (clamped composition
    /// widens the window by `max - min` per layer).
    pub fn stacked_receptive_field(&self, layers: usize) -> usize {
        assert!(layers >= 1, "layer count must be positive");
        let max = self.offsets.iter().copied().max().unwrap_or(0).max(0);
        let min = self.offsets.iter().copied().min().unwrap_or(0).min(0);
        layers * (max - min) as usize + 1
    }

    /// Multiset notation, nonzero offsets ordered by magnitude then sign,
    /// zeros last: `{1·1, -1·1, 0·10}`.
    pub fn multiset_string(&self) -> String {
        let mut groups: Vec<(i64, usize)> = Vec::new();
        for &o in &self.offsets {
            match groups.iter_mut().find(|(v, _)| *v == o) {
                Some((_, c)) => *c += 1,
                None => groups.push((o, 1)),
            }
        }
        groups.sort_by_key(|&(v, _)| (v == 0, v.abs(), v < 0));
        let parts: Vec<String> = groups
            .iter()
            .map(|(v, c)| format!("{v}\u{b7}{c}"))
            .collect();
        format!("{{{}}}", parts.join(", "))
    }

    /// Accepts either a JSON integer array (`[1,-1,0,0]`) or multiset
    /// notation (`{1*1,-1*1,0*2}`, `·` also accepted as the separator).
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('[') {
            let offsets: Vec<i64> =
                serde_json::from_str(s).map_err(|e| Error::Config(format!("offset array: {e}")))?;
            return Ok(HeadOffsetPlan::new(offsets));
        }
        if let Some(body) = s.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
            let mut offsets = Vec::new();
            for raw in body.split(',') {
                let item = raw.trim();
                if item.is_empty() {
                    continue;
                }
                let (off_s, count_s) = item
                    .split_once(['*', '\u{b7}'])
                    .ok_or_else(|| Error::Config(format!("multiset entry `{item}`")))?;
                let off: i64 = off_s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("offset `{off_s}` in `{item}`")))?;
                let count: usize = count_s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("count `{count_s}` in `{item}`")))?;
                if offsets.len() + count > MAX_PLAN_HEADS {
                    return Err(Error::Config(format!(
                        "plan exceeds {MAX_PLAN_HEADS} heads"
                    )));
                }
                offsets.extend(std::iter::repeat_n(off, count));
            }
            if offsets.is_empty() {
                return Err(Error::Config("empty offset multiset".into()));
            }
            return Ok(HeadOffsetPlan::new(offsets));
        }
        Err(Error::Config(format!(
            "plan `{s}` is neither a JSON array nor multiset notation"
        )))
    }
}

impl Serialize for HeadOffsetPlan {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.offsets.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HeadOffsetPlan {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Array(Vec<i64>),
            Multiset(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Array(offsets) => Ok(HeadOffsetPlan::new(offsets)),
            Repr::Multiset(s) => HeadOffsetPlan::parse(&s).map_err(D::Error::custom),
        }
    }
}

/// Which projections a channel-shift baseline touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftTargets {
    Kv,
    Qkv,
}

/// Channel-shift baseline: within every head, the leading `ratio` fraction of
/// channels is spliced in from the adjacent frames (first half from t-1,
/// second half from t+1, clamped at the clip edges).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub ratio: f64,
    pub targets: ShiftTargets,
}

impl ShiftSpec {
    pub fn new(ratio: f64, targets: ShiftTargets) -> Self {
        ShiftSpec { ratio, targets }
    }

    /// Shifted channel count per head; errors unless `ratio · head_width`
    /// is integral so the shifted block is well defined.
    pub fn shifted_channels(&self, cfg: &ViTConfig) -> Result<usize> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "shift ratio {} outside [0, 1)",
                self.ratio
            )));
        }
        let exact = self.ratio * cfg.head_width() as f64;
        let rounded = exact.round();
        if (exact - rounded).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "shift ratio {} gives non-integral shifted channel count {exact} per head",
                self.ratio
            )));
        }
        Ok(rounded as usize)
    }
}

/// The attention sublayer variant injected into each transformer block.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionOp {
    Mhsa,
    Stdha(HeadOffsetPlan),
    ShiftKv(ShiftSpec),
    ClsShift { ratio: f64 },
}

impl AttentionOp {
    pub fn validate(&self, cfg: &ViTConfig) -> Result<()> {
        match self {
            AttentionOp::Mhsa => Ok(()),
            AttentionOp::Stdha(plan) => plan.validate_for(cfg),
            AttentionOp::ShiftKv(spec) => spec.shifted_channels(cfg).map(|_| ()),
            AttentionOp::ClsShift { ratio } => {
                if !(0.0..1.0).contains(ratio) {
                    return Err(Error::Config(format!(
                        "cls shift ratio {ratio} outside [0, 1)"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn plan(&self) -> Option<&HeadOffsetPlan> {
        match self {
            AttentionOp::Stdha(p) => Some(p),
            _ => None,
        }
    }
}

/// Per-head key/value source.
#[derive(Debug, Clone, Copy)]
enum HeadKv {
    /// K,V from frame `clip(t + dt)`.
    Offset(i64),
    /// Leading `back` channels from t-1, next `fwd` channels from t+1.
    Shifted { back: usize, fwd: usize },
}

/// Shared scaled-dot-product core. Computes per-head attention with the given
/// K/V sources and returns the per-head outputs (pre-concatenation).
fn head_outputs<E: Elem>(
    tape: &mut Tape<E>,
    cfg: &ViTConfig,
    q: Var,
    k: Var,
    v: Var,
    sources: &[HeadKv],
) -> Result<Vec<Var>> {
    let dh = cfg.head_width();
    let scale = 1.0 / (dh as f64).sqrt();

    // one gather per distinct offset; dt == 0 aliases the ungathered tensors
    let mut gathered: Vec<(i64, Var, Var)> = Vec::new();
    let mut kv_for = |tape: &mut Tape<E>, dt: i64| -> Result<(Var, Var)> {
        if dt == 0 {
            return Ok((k, v));
        }
        if let Some(&(_, gk, gv)) = gathered.iter().find(|(o, _, _)| *o == dt) {
            return Ok((gk, gv));
        }
        let gk = tape.gather_time(k, dt)?;
        let gv = tape.gather_time(v, dt)?;
        gathered.push((dt, gk, gv));
        Ok((gk, gv))
    };

    let mut heads = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let qh = tape.slice_last(q, i * dh, dh)?;
        let (kh, vh) = match *src {
            HeadKv::Offset(dt) => {
                let (ks, vs) = kv_for(tape, dt)?;
                (
                    tape.slice_last(ks, i * dh, dh)?,
                    tape.slice_last(vs, i * dh, dh)?,
                )
            }
            HeadKv::Shifted { back, fwd } => {
                let (kb, vb) = kv_for(tape, -1)?;
                let (kf, vf) = kv_for(tape, 1)?;
                let build = |tape: &mut Tape<E>, base: Var, from_b: Var, from_f: Var| {
                    let mut parts = Vec::new();
                    if back > 0 {
                        parts.push(tape.slice_last(from_b, i * dh, back)?);
                    }
                    if fwd > 0 {
                        parts.push(tape.slice_last(from_f, i * dh + back, fwd)?);
                    }
                    let rest = dh - back - fwd;
                    if rest > 0 {
                        parts.push(tape.slice_last(base, i * dh + back + fwd, rest)?);
                    }
                    if parts.len() == 1 {
                        Ok(parts[0])
                    } else {
                        tape.concat_last(&parts)
                    }
                };
                (build(tape, k, kb, kf)?, build(tape, v, vb, vf)?)
            }
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.softmax_last(scaled)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    Ok(heads)
}

fn project_qkv<E: Elem>(
    tape: &mut Tape<E>,
    binder: &mut Binder<'_, E>,
    adapters: Option<&AdapterSpec>,
    block: usize,
    xq: Var,
    xk: Var,
    xv: Var,
) -> Result<(Var, Var, Var)> {
    let q = crate::adapt::project_with_adapter(tape, binder, adapters, block, AdapterSite::Q, xq)?;
    let k = crate::adapt::project_with_adapter(tape, binder, adapters, block, AdapterSite::K, xk)?;
    let v = crate::adapt::project_with_adapter(tape, binder, adapters, block, AdapterSite::V, xv)?;
    Ok((q, k, v))
}

/// Full attention sublayer on a normalized input, with the chosen variant and
/// optional adapters on the Q/K/V inputs and the pre-output concat.
pub fn attention_sublayer<E: Elem>(
    tape: &mut Tape<E>,
    binder: &mut Binder<'_, E>,
    cfg: &ViTConfig,
    block: usize,
    op: &AttentionOp,
    adapters: Option<&AdapterSpec>,
    x: Var,
) -> Result<Var> {
    op.validate(cfg)?;
    let sh = tape.shape(x).to_vec();
    if sh.len() != 3 || sh[2] != cfg.width {
        return Err(Error::Shape {
            op: "attention",
            detail: format!("input {sh:?} vs width {}", cfg.width),
        });
    }

    // class-token shift happens before the projections
    let x = match op {
        AttentionOp::ClsShift { ratio } => cls_shift(tape, cfg, x, *ratio)?,
        _ => x,
    };

    // one shared serial adapter may feed all three projections
    let shared_in = match adapters {
        Some(spec) if spec.has_site(AdapterSite::QkvShared) => crate::adapt::apply_serial_adapter(
            tape,
            binder,
            spec,
            block,
            AdapterSite::QkvShared,
            x,
        )?,
        _ => x,
    };
    let (q, k, v) = project_qkv(
        tape, binder, adapters, block, shared_in, shared_in, shared_in,
    )?;

    let sources: Vec<HeadKv> = match op {
        AttentionOp::Mhsa | AttentionOp::ClsShift { .. } => {
            vec![HeadKv::Offset(0); cfg.heads]
        }
        AttentionOp::Stdha(plan) => plan.offsets().iter().map(|&o| HeadKv::Offset(o)).collect(),
        AttentionOp::ShiftKv(spec) => {
            let shifted = spec.shifted_channels(cfg)?;
            let back = shifted / 2;
            let fwd = shifted - back;
            vec![HeadKv::Shifted { back, fwd }; cfg.heads]
        }
    };

    // Shift-QKV variant also shifts the query channels.
    let q = match op {
        AttentionOp::ShiftKv(spec) if spec.targets == ShiftTargets::Qkv => {
            let shifted = spec.shifted_channels(cfg)?;
            let back = shifted / 2;
            let fwd = shifted - back;
            shift_channels_per_head(tape, cfg, q, back, fwd)?
        }
        _ => q,
    };

    let heads = head_outputs(tape, cfg, q, k, v, &sources)?;
    let cat = tape.concat_last(&heads)?;
    crate::adapt::project_with_adapter(tape, binder, adapters, block, AdapterSite::O, cat)
}

/// Splice per-head leading channels from adjacent frames (whole-tensor form,
/// used for the query side of the Shift-QKV baseline).
fn shift_channels_per_head<E: Elem>(
    tape: &mut Tape<E>,
    cfg: &ViTConfig,
    x: Var,
    back: usize,
    fwd: usize,
) -> Result<Var> {
    if back + fwd == 0 {
        return Ok(x);
    }
    let dh = cfg.head_width();
    let xb = tape.gather_time(x, -1)?;
    let xf = tape.gather_time(x, 1)?;
    let mut parts = Vec::new();
    for i in 0..cfg.heads {
        if back > 0 {
            parts.push(tape.slice_last(xb, i * dh, back)?);
        }
        if fwd > 0 {
            parts.push(tape.slice_last(xf, i * dh + back, fwd)?);
        }
        let rest = dh - back - fwd;
        if rest > 0 {
            parts.push(tape.slice_last(x, i * dh + back + fwd, rest)?);
        }
    }
    tape.concat_last(&parts)
}

/// Swap a leading fraction of class-token channels with the adjacent frames'
/// class tokens (first half from t-1, second from t+1, clamped). Patch tokens
/// pass through untouched.
fn cls_shift<E: Elem>(tape: &mut Tape<E>, cfg: &ViTConfig, x: Var, ratio: f64) -> Result<Var> {
    let d = cfg.width;
    let shifted = (ratio * d as f64).round() as usize;
    if shifted == 0 {
        return Ok(x);
    }
    let back = shifted / 2;
    let fwd = shifted - back;
    let tokens = tape.shape(x)[1];
    let cls = tape.select_token(x, 0)?; // [T, d]
    let mut parts = Vec::new();
    if back > 0 {
        let prev = tape.gather_time(cls, -1)?;
        parts.push(tape.slice_last(prev, 0, back)?);
    }
    if fwd > 0 {
        let next = tape.gather_time(cls, 1)?;
        parts.push(tape.slice_last(next, back, fwd)?);
    }
    if shifted < d {
        parts.push(tape.slice_last(cls, shifted, d - shifted)?);
    }
    let new_cls = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_last(&parts)?
    };
    let patches = tape.slice_tokens(x, 1, tokens - 1)?;
    tape.prepend_frame_tokens(patches, new_cls)
}

// ── standalone sublayer entry points ─────────────────────────────────
//
// These bind weights read-only and run just the attention sublayer on an
// already-normalized input; the test suites use them to compare variants
// in isolation.

pub fn stdha_forward<E: Elem>(
    tape: &mut Tape<E>,
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    block: usize,
    x: Var,
    plan: &HeadOffsetPlan,
) -> Result<Var> {
    let mut binder = Binder::new(store, None);
    attention_sublayer(
        tape,
        &mut binder,
        cfg,
        block,
        &AttentionOp::Stdha(plan.clone()),
        None,
        x,
    )
}

pub fn mhsa_forward<E: Elem>(
    tape: &mut Tape<E>,
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    block: usize,
    x: Var,
) -> Result<Var> {
    let mut binder = Binder::new(store, None);
    attention_sublayer(tape, &mut binder, cfg, block, &AttentionOp::Mhsa, None, x)
}

pub fn shift_kv_forward<E: Elem>(
    tape: &mut Tape<E>,
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    block: usize,
    x: Var,
    spec: &ShiftSpec,
) -> Result<Var> {
    let mut binder = Binder::new(store, None);
    attention_sublayer(
        tape,
        &mut binder,
        cfg,
        block,
        &AttentionOp::ShiftKv(spec.clone()),
        None,
        x,
    )
}

pub fn cls_shift_forward<E: Elem>(
    tape: &mut Tape<E>,
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    block: usize,
    x: Var,
    ratio: f64,
) -> Result<Var> {
    let mut binder = Binder::new(store, None);
    attention_sublayer(
        tape,
        &mut binder,
        cfg,
        block,
        &AttentionOp::ClsShift { ratio },
        None,
        x,
    )
}

/// Per-head outputs before concatenation and the output projection. The
/// information-purity tests use this to watch a single head in isolation.
pub fn stdha_head_outputs<E: Elem>(
    tape: &mut Tape<E>,
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    block: usize,
    x: Var,
    plan: &HeadOffsetPlan,
) -> Result<Vec<Var>> {
    plan.validate_for(cfg)?;
    let mut binder = Binder::new(store, None);
    let (q, k, v) = project_qkv(tape, &mut binder, None, block, x, x, x)?;
    let sources: Vec<HeadKv> = plan.offsets().iter().map(|&o| HeadKv::Offset(o)).collect();
    head_outputs(tape, cfg, q, k, v, &sources)
}
