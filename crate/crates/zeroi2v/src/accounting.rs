//! Exact parameter and FLOP ledgers.
//!
//! Two counters cross-check each other: the analytic formulas here and the
//! runtime meter on the tape must agree to the integer for the same forward
//! pass. FLOPs are matmul-only at 2 per multiply-add (projections, attention
//! score/value products, patch embedding, classifier); normalizations,
//! softmax internals, and activations are excluded. Reported "GFLOPs" follow
//! the table convention of counting one per multiply-add, i.e. raw/2e9 —
//! raw counts are always retained alongside.

use serde::Serialize;

use crate::adapt::{AdapterKind, AdapterSpec};
use crate::error::{Error, Result};
use crate::stdha::HeadOffsetPlan;
use crate::tensor::Elem;
use crate::vit::ViTConfig;
use crate::weights::{canonical_backbone_names, is_adapter_name, TrainableMask, WeightStore};

/// Evaluation protocol: frames x spatial crops x temporal clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Views {
    pub frames: usize,
    pub crops: usize,
    pub clips: usize,
}

impl Views {
    pub fn new(frames: usize, crops: usize, clips: usize) -> Self {
        Views {
            frames,
            crops,
            clips,
        }
    }

    /// Parse `"8x3x1"` (also accepts `*` separators).
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X', '*']).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "views `{s}`: expected FRAMESxCROPSxCLIPS"
            )));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("views `{s}`")))
            })
            .collect::<Result<_>>()?;
        if nums.contains(&0) {
            return Err(Error::Config(format!(
                "views `{s}`: all factors must be positive"
            )));
        }
        Ok(Views {
            frames: nums[0],
            crops: nums[1],
            clips: nums[2],
        })
    }

    pub fn count(&self) -> u64 {
        (self.crops * self.clips) as u64
    }
}

impl std::fmt::Display for Views {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.crops, self.clips)
    }
}

/// Parameter tallies split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    /// Canonical backbone tensors (embedding, blocks, norms, classifier).
    pub backbone: u64,
    /// Adapter tensors still present at inference time.
    pub new_at_inference: u64,
    /// Elements receiving gradient updates.
    pub trainable: u64,
}

/// Element counts split by the name grammar and trainability. With no mask,
/// trainability comes from the store's frozen flags.
pub fn count_params<E: Elem>(store: &WeightStore<E>, mask: Option<&TrainableMask>) -> ParamCounts {
    let mut backbone = 0u64;
    let mut new_at_inference = 0u64;
    for (name, entry) in store.iter() {
        let n = entry.tensor.numel() as u64;
        if is_adapter_name(name) {
            new_at_inference += n;
        } else {
            backbone += n;
        }
    }
    let trainable = match mask {
        Some(m) => m.trainable_param_count(store),
        None => store
            .iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(_, e)| e.tensor.numel() as u64)
            .sum(),
    };
    ParamCounts {
        backbone,
        new_at_inference,
        trainable,
    }
}

/// Backbone parameter count straight from the config (no store needed).
pub fn backbone_param_count(cfg: &ViTConfig) -> Result<u64> {
    cfg.validate()?;
    Ok(canonical_backbone_names(cfg)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>() as u64)
        .sum())
}

/// FLOP tallies (2 per multiply-add, matmuls only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopCounts {
    /// One clip of `views.frames` frames through the full model.
    pub per_view: u64,
    /// All views: `per_view x crops x clips`.
    pub total: u64,
}

impl FlopCounts {
    /// Table-convention GFLOPs: one FLOP per multiply-add.
    pub fn gflops_table(&self) -> f64 {
        self.total as f64 / 2.0 / 1e9
    }
}

fn per_clip_flops(cfg: &ViTConfig, frames: usize) -> u64 {
    let t = frames as u64;
    let n = cfg.tokens() as u64;
    let d = cfg.width as u64;
    let dp = cfg.mlp_width as u64;
    let np = (cfg.grid() * cfg.grid()) as u64;
    let pd = cfg.patch_dim() as u64;

    let embed = 2 * t * np * pd * d;
    let qkv = 3 * 2 * t * n * d * d;
    let scores = 2 * t * n * n * d;
    let attn_v = 2 * t * n * n * d;
    let out_proj = 2 * t * n * d * d;
    let mlp = 2 * 2 * t * n * d * dp;
    let block = qkv + scores + attn_v + out_proj + mlp;
    let head = 2 * d * cfg.num_classes as u64;
    embed + cfg.depth as u64 * block + head
}

/// Adapter matmul cost per clip. A shared Q/K/V adapter runs once.
fn adapter_clip_flops(cfg: &ViTConfig, spec: &AdapterSpec, frames: usize) -> Result<u64> {
    spec.validate(cfg)?;
    let t = frames as u64;
    let n = cfg.tokens() as u64;
    let k = spec.bottleneck.resolve(cfg)? as u64;
    let mut per_block = 0u64;
    for site in &spec.placement {
        per_block += match spec.kind {
            AdapterKind::Linear | AdapterKind::Gelu => {
                // two maps at model width: d->k then k->d
                2 * t * n * (cfg.width as u64 * k) * 2
            }
            AdapterKind::Lora => {
                let (din, dout) = site.projection_dims(cfg);
                2 * t * n * k * (din as u64 + dout as u64)
            }
        };
    }
    Ok(per_block * cfg.depth as u64)
}

/// Analytic inference cost. The offset plan is validated but cannot change
/// the count: head relocation adds no matmuls.
pub fn count_flops(
    cfg: &ViTConfig,
    plan: Option<&HeadOffsetPlan>,
    views: Views,
) -> Result<FlopCounts> {
    cfg.validate()?;
    if let Some(p) = plan {
        p.validate_for(cfg)?;
    }
    let per_view = per_clip_flops(cfg, views.frames);
    Ok(FlopCounts {
        per_view,
        total: per_view * views.count(),
    })
}

/// Analytic inference cost of an unmerged adapted model.
pub fn count_flops_adapted(
    cfg: &ViTConfig,
    spec: &AdapterSpec,
    views: Views,
) -> Result<FlopCounts> {
    cfg.validate()?;
    let per_view = per_clip_flops(cfg, views.frames) + adapter_clip_flops(cfg, spec, views.frames)?;
    Ok(FlopCounts {
        per_view,
        total: per_view * views.count(),
    })
}

/// The full cost report emitted by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub views: String,
    pub params_backbone: u64,
    pub params_new_at_inference: u64,
    pub params_trainable: u64,
    pub flops_per_view: u64,
    pub flops_total: u64,
    pub extra_flops_vs_backbone: u64,
    /// Table-convention GFLOPs (one per multiply-add).
    pub gflops: f64,
}

pub fn cost_report<E: Elem>(
    store: &WeightStore<E>,
    mask: Option<&TrainableMask>,
    cfg: &ViTConfig,
    plan: Option<&HeadOffsetPlan>,
    spec: Option<&AdapterSpec>,
    views: Views,
) -> Result<CostReport> {
    let params = count_params(store, mask);
    let base = count_flops(cfg, plan, views)?;
    let actual = match spec {
        Some(s) if params.new_at_inference > 0 => count_flops_adapted(cfg, s, views)?,
        _ => base,
    };
    Ok(CostReport {
        views: views.to_string(),
        params_backbone: params.backbone,
        params_new_at_inference: params.new_at_inference,
        params_trainable: params.trainable,
        flops_per_view: actual.per_view,
        flops_total: actual.total,
        extra_flops_vs_backbone: actual.total - base.total,
        gflops: actual.gflops_table(),
    })
}

/// Zero-extra-cost audit of a model state against its backbone.
#[derive(Debug, Clone, Serialize)]
pub struct ZeroExtraReport {
    pub pass: bool,
    pub params_delta: u64,
    pub flops_delta: u64,
    pub offending: Vec<String>,
    pub reason: Option<String>,
}

/// Passes iff the store's parameter and FLOP counts equal the bare
/// backbone's exactly. Unmerged adapter tensors fail with their names and
/// the exact deltas; a nonlinear adapter spec fails outright because it can
/// never merge.
pub fn assert_zero_extra<E: Elem>(
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    plan: Option<&HeadOffsetPlan>,
    spec: Option<&AdapterSpec>,
    views: Views,
) -> Result<ZeroExtraReport> {
    store.validate_for(cfg)?;
    let params = count_params(store, None);
    let offending: Vec<String> = store
        .names()
        .filter(|n| is_adapter_name(n))
        .map(String::from)
        .collect();
    let base = count_flops(cfg, plan, views)?;
    let flops_delta = match spec {
        Some(s) if !offending.is_empty() => count_flops_adapted(cfg, s, views)?.total - base.total,
        _ => 0,
    };
    let mut reason = None;
    let mut pass = params.new_at_inference == 0 && flops_delta == 0;
    if let Some(s) = spec {
        if s.kind == AdapterKind::Gelu && !offending.is_empty() {
            pass = false;
            reason = Some("gelu adapters cannot merge; zero extra cost is unreachable".into());
        }
    }
    if params.new_at_inference > 0 && reason.is_none() {
        reason = Some(format!(
            "{} adapter parameters remain unmerged",
            params.new_at_inference
        ));
    }
    Ok(ZeroExtraReport {
        pass,
        params_delta: params.new_at_inference,
        flops_delta,
        offending,
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{adapter_param_count, build_adapted_model, Bottleneck};
    use crate::rng::SeededRng;
    use crate::stdha::AttentionOp;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use crate::vit::model_forward;
    use crate::weights::init_backbone;

    #[test]
    fn views_parse_and_display() {
        let v = Views::parse("8x3x1").unwrap();
        assert_eq!(v, Views::new(8, 3, 1));
        assert_eq!(v.to_string(), "8x3x1");
        assert!(Views::parse("8x3").is_err());
        assert!(Views::parse("8x0x1").is_err());
        assert_eq!(Views::parse("16*3*2").unwrap(), Views::new(16, 3, 2));
    }

    #[test]
    fn base_scale_config_reproduces_published_table_costs() {
        // 12-block width-768 model at 224/16: ~17.6 G MACs per frame
        let cfg = ViTConfig::vit_b_16(8, 400);
        let flops = count_flops(&cfg, None, Views::new(8, 3, 1)).unwrap();
        let g = flops.gflops_table();
        assert!((g - 422.0).abs() / 422.0 <= 0.02, "{g} vs 422");

        let cfg_l = ViTConfig::vit_l_14(8, 400);
        let gl = count_flops(&cfg_l, None, Views::new(8, 3, 1))
            .unwrap()
            .gflops_table();
        assert!((gl - 1946.0).abs() / 1946.0 <= 0.02, "{gl} vs 1946");

        // linearity in clips
        let double = count_flops(&cfg, None, Views::new(8, 3, 2)).unwrap();
        assert_eq!(double.total, 2 * flops.total);
    }

    #[test]
    fn backbone_param_count_at_scale() {
        let cfg = ViTConfig::vit_b_16(8, 400);
        let count = backbone_param_count(&cfg).unwrap();
        let m = count as f64 / 1e6;
        assert!((m - 86.0).abs() / 86.0 <= 0.01, "{m} M vs 86 M");

        let cfg_l = ViTConfig::vit_l_14(8, 400);
        let ml = backbone_param_count(&cfg_l).unwrap() as f64 / 1e6;
        assert!((ml - 304.0).abs() / 304.0 <= 0.01, "{ml} M vs 304 M");
    }

    #[test]
    fn tiny_param_count_matches_instantiated_store() {
        let cfg = ViTConfig::tiny();
        let store = init_backbone::<f32>(&cfg, 1).unwrap();
        assert_eq!(backbone_param_count(&cfg).unwrap(), store.total_params());
        let counts = count_params(&store, None);
        assert_eq!(counts.backbone, store.total_params());
        assert_eq!(counts.new_at_inference, 0);
    }

    #[test]
    fn analytic_flops_equal_runtime_meter() {
        let mut cfg = ViTConfig::tiny();
        cfg.frames = 3;
        cfg.image_size = 16;
        let store = init_backbone::<f32>(&cfg, 2).unwrap();
        let mut rng = SeededRng::new(3);
        let video = Tensor::<f32>::randn(vec![3, 16, 16, 1], 1.0, &mut rng);

        let mut tape = Tape::new(false);
        model_forward(
            &mut tape,
            &store,
            &cfg,
            &AttentionOp::Mhsa,
            None,
            None,
            &video,
        )
        .unwrap();
        let analytic = count_flops(&cfg, None, Views::new(3, 1, 1)).unwrap();
        assert_eq!(tape.flops(), analytic.total);

        // offset plans change nothing, as integers
        let plan = HeadOffsetPlan::new(vec![1, -1, 2, 0, 0, 0, 0, 0]);
        let mut tape2 = Tape::new(false);
        model_forward(
            &mut tape2,
            &store,
            &cfg,
            &AttentionOp::Stdha(plan.clone()),
            None,
            None,
            &video,
        )
        .unwrap();
        assert_eq!(tape2.flops(), analytic.total);
        assert_eq!(
            count_flops(&cfg, Some(&plan), Views::new(3, 1, 1))
                .unwrap()
                .total,
            analytic.total
        );
    }

    #[test]
    fn analytic_adapted_flops_equal_runtime_meter() {
        let mut cfg = ViTConfig::tiny();
        cfg.frames = 2;
        cfg.image_size = 16;
        let store = init_backbone::<f32>(&cfg, 4).unwrap();
        for spec in [
            AdapterSpec::canonical4(AdapterKind::Linear, Bottleneck::Width(8)),
            AdapterSpec::canonical6(AdapterKind::Linear, Bottleneck::Width(8)),
            AdapterSpec::canonical6(AdapterKind::Lora, Bottleneck::Width(8)),
            AdapterSpec::canonical4(AdapterKind::Gelu, Bottleneck::Width(8)),
        ] {
            let (adapted, _) = build_adapted_model(&store, &cfg, &spec, 5).unwrap();
            let mut rng = SeededRng::new(6);
            let video = Tensor::<f32>::randn(vec![2, 16, 16, 1], 1.0, &mut rng);
            let mut tape = Tape::new(false);
            model_forward(
                &mut tape,
                &adapted,
                &cfg,
                &AttentionOp::Mhsa,
                Some(&spec),
                None,
                &video,
            )
            .unwrap();
            let analytic = count_flops_adapted(&cfg, &spec, Views::new(2, 1, 1)).unwrap();
            assert_eq!(tape.flops(), analytic.total, "{:?}", spec.kind);
        }
    }

    #[test]
    fn zero_extra_passes_on_clean_store_and_fails_on_adapted() {
        let cfg = ViTConfig::tiny();
        let store = init_backbone::<f32>(&cfg, 7).unwrap();
        let views = Views::new(cfg.frames, 1, 1);
        let report = assert_zero_extra(&store, &cfg, None, None, views).unwrap();
        assert!(report.pass);
        assert_eq!(report.params_delta, 0);

        let spec = AdapterSpec::canonical4(AdapterKind::Linear, Bottleneck::Width(8));
        let (adapted, _) = build_adapted_model(&store, &cfg, &spec, 8).unwrap();
        let fail = assert_zero_extra(&adapted, &cfg, None, Some(&spec), views).unwrap();
        assert!(!fail.pass);
        assert_eq!(fail.params_delta, adapter_param_count(&spec, &cfg).unwrap());
        assert!(fail.flops_delta > 0);
        assert!(!fail.offending.is_empty());

        let gelu = AdapterSpec::canonical4(AdapterKind::Gelu, Bottleneck::Width(8));
        let (gadapted, _) = build_adapted_model(&store, &cfg, &gelu, 9).unwrap();
        let gfail = assert_zero_extra(&gadapted, &cfg, None, Some(&gelu), views).unwrap();
        assert!(!gfail.pass);
        assert!(gfail
            .reason
            .as_deref()
            .unwrap_or("")
            .contains("cannot merge"));
    }
}
