//! Run configuration: one JSON document covering model, offset plan, adapter
//! spec, training settings, and the synthetic-data spec. Unknown keys are
//! rejected everywhere; the plan field accepts either an integer array or
//! the multiset shorthand (`"{1*1,-1*1,0*10}"`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::AdapterSpec;
use crate::data::SyntheticVideoSpec;
use crate::error::{Error, Result};
use crate::stdha::{AttentionOp, HeadOffsetPlan};
use crate::tensor::DType;
use crate::train::TrainConfig;
use crate::vit::ViTConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Model section: ViT dimensions plus numeric precision. `mlp_width`
/// defaults to `4 x width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_width: Option<usize>,
    pub patch_size: usize,
    pub image_size: usize,
    pub frames: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub precision: Precision,
}

fn default_channels() -> usize {
    1
}

impl ModelSection {
    pub fn to_vit_config(&self) -> ViTConfig {
        ViTConfig {
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            mlp_width: self.mlp_width.unwrap_or(4 * self.width),
            patch_size: self.patch_size,
            image_size: self.image_size,
            frames: self.frames,
            channels: self.channels,
            num_classes: self.num_classes,
        }
    }

    pub fn from_vit_config(cfg: &ViTConfig, precision: Precision) -> Self {
        ModelSection {
            depth: cfg.depth,
            width: cfg.width,
            heads: cfg.heads,
            mlp_width: Some(cfg.mlp_width),
            patch_size: cfg.patch_size,
            image_size: cfg.image_size,
            frames: cfg.frames,
            channels: cfg.channels,
            num_classes: cfg.num_classes,
            precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<HeadOffsetPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<SyntheticVideoSpec>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let vit = self.model.to_vit_config();
        vit.validate()?;
        if let Some(plan) = &self.plan {
            plan.validate_for(&vit)?;
        }
        if let Some(adapter) = &self.adapter {
            adapter.validate(&vit)?;
        }
        if let Some(train) = &self.train {
            train.validate()?;
        }
        if let Some(data) = &self.data {
            data.validate()?;
            if data.frames != vit.frames {
                return Err(Error::Config(format!(
                    "data frames {} != model frames {}",
                    data.frames, vit.frames
                )));
            }
            if data.image_size != vit.image_size {
                return Err(Error::Config(format!(
                    "data image size {} != model image size {}",
                    data.image_size, vit.image_size
                )));
            }
            if vit.channels != 1 {
                return Err(Error::Config(
                    "synthetic video data is single-channel; set model channels to 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn vit_config(&self) -> ViTConfig {
        self.model.to_vit_config()
    }

    /// Attention variant implied by the plan field (absent plan = plain).
    pub fn attention_op(&self) -> AttentionOp {
        match &self.plan {
            Some(plan) => AttentionOp::Stdha(plan.clone()),
            None => AttentionOp::Mhsa,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{AdapterKind, Bottleneck};

    fn sample_json() -> String {
        r#"{
            "model": {
                "depth": 4, "width": 64, "heads": 8,
                "patch_size": 4, "image_size": 32, "frames": 8,
                "channels": 1, "num_classes": 2
            },
            "plan": [1, -1, 0, 0, 0, 0, 0, 0],
            "adapter": {
                "placement": ["qkv", "o", "mlp_up", "mlp_down"],
                "kind": "linear",
                "bottleneck": {"ratio": 0.25}
            },
            "train": {"epochs": 3, "seed": 7},
            "data": {
                "task": "direction", "frames": 8, "image_size": 32,
                "sprite": 5, "noise_std": 0.1, "dataset_size": 100, "seed": 1
            }
        }"#
        .to_string()
    }

    #[test]
    fn full_config_parses_and_validates() {
        let cfg = RunConfig::from_json(&sample_json()).unwrap();
        let vit = cfg.vit_config();
        assert_eq!(vit.mlp_width, 256); // 4x default
        assert_eq!(cfg.plan.as_ref().unwrap().offsets().len(), 8);
        let adapter = cfg.adapter.as_ref().unwrap();
        assert_eq!(adapter.kind, AdapterKind::Linear);
        assert_eq!(adapter.bottleneck, Bottleneck::Ratio(0.25));
        assert_eq!(cfg.train.as_ref().unwrap().epochs, 3);
        assert_eq!(cfg.train.as_ref().unwrap().learning_rate, 3e-4); // default
        assert_eq!(cfg.model.precision, Precision::F32);
    }

    #[test]
    fn plan_accepts_multiset_notation() {
        let json = sample_json().replace("[1, -1, 0, 0, 0, 0, 0, 0]", "\"{1*1, -1*1, 0*6}\"");
        let cfg = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg.plan.unwrap().offsets(), &[1, -1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        let top = sample_json().replace("\"plan\"", "\"extra\": 1, \"plan\"");
        assert!(RunConfig::from_json(&top).is_err());
        let nested = sample_json().replace("\"depth\": 4,", "\"depth\": 4, \"bogus\": true,");
        assert!(RunConfig::from_json(&nested).is_err());
    }

    #[test]
    fn cross_field_validation() {
        // plan length vs heads
        let bad_plan = sample_json().replace("[1, -1, 0, 0, 0, 0, 0, 0]", "[1, -1]");
        assert!(RunConfig::from_json(&bad_plan).is_err());
        // data frames vs model frames
        let bad_frames = sample_json().replace(
            "\"task\": \"direction\", \"frames\": 8",
            "\"task\": \"direction\", \"frames\": 4",
        );
        assert!(RunConfig::from_json(&bad_frames).is_err());
    }

    #[test]
    fn roundtrip_through_json() {
        let cfg = RunConfig::from_json(&sample_json()).unwrap();
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn precision_parses() {
        let json = sample_json().replace(
            "\"num_classes\": 2",
            "\"num_classes\": 2, \"precision\": \"f64\"",
        );
        let cfg = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg.model.precision, Precision::F64);
        assert_eq!(cfg.model.precision.dtype(), DType::F64);
    }
}
