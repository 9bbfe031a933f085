//! Desk-scale training: decoupled-weight-decay Adam over masked parameter
//! sets, cross-entropy with optional label smoothing, and a strategy
//! comparison runner.
//!
//! Everything is deterministic given the config seed: shuffling, batching,
//! and the optimizer involve no other entropy source, so identical configs
//! reproduce identical final metrics bit for bit. Frozen tensors are
//! snapshotted up front and re-checked after every epoch.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::adapt::{build_adapted_model, temporal_head_mask, AdapterKind, AdapterSpec, Bottleneck};
use crate::data::VideoDataset;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::stdha::{AttentionOp, HeadOffsetPlan};
use crate::tape::Tape;
use crate::tensor::{Elem, Tensor};
use crate::vit::{model_forward_full, ViTConfig};
use crate::weights::{ElemMask, TrainableMask, WeightStore};

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 10,
            label_smoothing: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // learning_rate 0 is legal (a no-op run); only negatives are rejected
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "negative learning rate or weight decay".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub top1: f64,
    pub loss_curve: Vec<f64>,
    pub per_class: Vec<f64>,
    pub steps: usize,
}

struct AdamState<E: Elem> {
    m: Tensor<E>,
    v: Tensor<E>,
}

/// Decoupled-weight-decay Adam over the trainable subset of a store.
pub struct AdamW<E: Elem> {
    cfg: TrainConfig,
    state: BTreeMap<String, AdamState<E>>,
    t: u64,
}

impl<E: Elem> AdamW<E> {
    pub fn new(cfg: TrainConfig) -> Self {
        AdamW {
            cfg,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    /// One optimizer step over averaged gradients. Gradients must already be
    /// masked; weight decay honors the mask so frozen elements never move.
    pub fn step(
        &mut self,
        store: &mut WeightStore<E>,
        grads: &BTreeMap<String, Tensor<E>>,
        mask: &TrainableMask,
    ) -> Result<()> {
        self.t += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one = E::ONE;
        let bias1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let lr = E::from_f64(self.cfg.learning_rate);
        let wd = E::from_f64(self.cfg.weight_decay);
        let eps = E::from_f64(self.cfg.eps);
        let inv_bias1 = E::from_f64(1.0 / bias1);
        let inv_bias2 = E::from_f64(1.0 / bias2);

        for (name, grad) in grads {
            if !mask.is_trainable(name) {
                continue;
            }
            let numel = grad.numel();
            let entry = self.state.entry(name.clone()).or_insert_with(|| AdamState {
                m: Tensor::zeros(grad.shape().to_vec()),
                v: Tensor::zeros(grad.shape().to_vec()),
            });
            let weight = store.tensor_mut(name)?;
            if weight.numel() != numel {
                return Err(Error::Shape {
                    op: "adamw",
                    detail: format!(
                        "`{name}`: gradient {:?} vs weight {:?}",
                        grad.shape(),
                        weight.shape()
                    ),
                });
            }
            let elem_mask = mask.mask(name);
            let wdata = weight.data_mut();
            let mdata = entry.m.data_mut();
            let vdata = entry.v.data_mut();
            for i in 0..numel {
                let keep = match elem_mask {
                    ElemMask::All => true,
                    ElemMask::None => false,
                    ElemMask::Partial(flags) => flags[i],
                };
                if !keep {
                    continue;
                }
                let g = grad.data()[i];
                mdata[i] = b1 * mdata[i] + (one - b1) * g;
                vdata[i] = b2 * vdata[i] + (one - b2) * g * g;
                let mhat = mdata[i] * inv_bias1;
                let vhat = vdata[i] * inv_bias2;
                wdata[i] = wdata[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * wdata[i]);
            }
        }
        Ok(())
    }
}

/// What a training run needs to know about the model besides its weights.
#[derive(Debug, Clone)]
pub struct ModelSetup {
    pub cfg: ViTConfig,
    pub attn: AttentionOp,
    pub adapters: Option<AdapterSpec>,
}

fn snapshot_frozen<E: Elem>(
    store: &WeightStore<E>,
    mask: &TrainableMask,
) -> Vec<(String, Tensor<E>)> {
    store
        .iter()
        .filter(|(name, _)| !matches!(mask.mask(name), ElemMask::All))
        .map(|(name, e)| (name.to_string(), e.tensor.clone()))
        .collect()
}

fn check_frozen_conserved<E: Elem>(
    store: &WeightStore<E>,
    mask: &TrainableMask,
    snapshot: &[(String, Tensor<E>)],
) -> Result<()> {
    for (name, orig) in snapshot {
        let now = store.get(name)?;
        let ok =
            match mask.mask(name) {
                ElemMask::All => true,
                ElemMask::None => now.bit_eq(orig),
                ElemMask::Partial(flags) => {
                    now.data().iter().zip(orig.data()).zip(flags.iter()).all(
                        |((a, b), &trainable)| {
                            trainable || a.to_f64().to_bits() == b.to_f64().to_bits()
                        },
                    )
                }
            };
        if !ok {
            return Err(Error::Contract(format!(
                "frozen tensor `{name}` changed during training"
            )));
        }
    }
    Ok(())
}

/// Train in place. Gradients are averaged over each mini-batch, masked, and
/// fed to the optimizer; the loss curve holds one mean loss per epoch and
/// `top1`/`per_class` report training accuracy of the final epoch.
pub fn train<E: Elem>(
    store: &mut WeightStore<E>,
    setup: &ModelSetup,
    dataset: &VideoDataset<E>,
    tcfg: &TrainConfig,
    mask: &TrainableMask,
) -> Result<Metrics> {
    tcfg.validate()?;
    setup.cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    let snapshot = snapshot_frozen(store, mask);
    let mut opt = AdamW::new(tcfg.clone());
    let mut loss_curve = Vec::with_capacity(tcfg.epochs);
    let mut steps = 0usize;
    let mut final_correct = vec![0usize; setup.cfg.num_classes];
    let mut final_total = vec![0usize; setup.cfg.num_classes];
    let shuffle_root = SeededRng::new(tcfg.seed).derive(0x5f);

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
        let mut rng = shuffle_root.derive(epoch as u64);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = vec![0usize; setup.cfg.num_classes];
        let mut epoch_total = vec![0usize; setup.cfg.num_classes];

        for batch in order.chunks(tcfg.batch_size) {
            let mut grad_sum: BTreeMap<String, Tensor<E>> = BTreeMap::new();
            for &idx in batch {
                let (video, label) = &dataset.samples[idx];
                let mut tape = Tape::new(true);
                let out = model_forward_full(
                    &mut tape,
                    store,
                    &setup.cfg,
                    &setup.attn,
                    setup.adapters.as_ref(),
                    Some(mask),
                    video,
                )?;
                let loss = tape.cross_entropy(out.logits, *label, tcfg.label_smoothing)?;
                let loss_val = tape.value(loss).data()[0].to_f64();
                if !loss_val.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss {loss_val} at epoch {epoch}, step {steps}, sample {idx}"
                    )));
                }
                epoch_loss += loss_val;
                let logits = tape.value(out.logits).data();
                let pred = argmax(logits);
                epoch_total[*label] += 1;
                if pred == *label {
                    epoch_correct[*label] += 1;
                }
                let params = out.params.clone();
                let mut grads = tape.backward(loss)?;
                for (name, var) in params {
                    if !mask.is_trainable(&name) {
                        continue;
                    }
                    if let Some(g) = grads.take(var) {
                        match grad_sum.get_mut(&name) {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += *b;
                                }
                            }
                            None => {
                                grad_sum.insert(name, g);
                            }
                        }
                    }
                }
            }
            let scale = E::from_f64(1.0 / batch.len() as f64);
            for (name, g) in grad_sum.iter_mut() {
                for v in g.data_mut() {
                    *v = *v * scale;
                }
                mask.apply_to_grad(name, g);
            }
            opt.step(store, &grad_sum, mask)?;
            steps += 1;
        }
        loss_curve.push(epoch_loss / dataset.samples.len() as f64);
        check_frozen_conserved(store, mask, &snapshot)?;
        if epoch + 1 == tcfg.epochs {
            final_correct = epoch_correct;
            final_total = epoch_total;
        }
    }

    let correct: usize = final_correct.iter().sum();
    let total: usize = final_total.iter().sum();
    Ok(Metrics {
        top1: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        loss_curve,
        per_class: final_correct
            .iter()
            .zip(&final_total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        steps,
    })
}

fn argmax<E: Elem>(xs: &[E]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Deterministic evaluation: argmax over logits, top-1 and per-class rates.
pub fn evaluate<E: Elem>(
    store: &WeightStore<E>,
    setup: &ModelSetup,
    dataset: &VideoDataset<E>,
) -> Result<Metrics> {
    let classes = setup.cfg.num_classes;
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (video, label) in &dataset.samples {
        let mut tape = Tape::new(false);
        let out = model_forward_full(
            &mut tape,
            store,
            &setup.cfg,
            &setup.attn,
            setup.adapters.as_ref(),
            None,
            video,
        )?;
        let pred = argmax(tape.value(out.logits).data());
        total[*label] += 1;
        if pred == *label {
            correct[*label] += 1;
        }
    }
    let c: usize = correct.iter().sum();
    let t: usize = total.iter().sum();
    Ok(Metrics {
        top1: if t == 0 { 0.0 } else { c as f64 / t as f64 },
        loss_curve: Vec::new(),
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        steps: 0,
    })
}

// ── adaptation strategies ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FullFinetune,
    LinearProbe,
    TemporalHeadOnly,
    LinearAdapter,
    Lora,
    GeluAdapter,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FullFinetune,
        Strategy::LinearProbe,
        Strategy::TemporalHeadOnly,
        Strategy::LinearAdapter,
        Strategy::Lora,
        Strategy::GeluAdapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FullFinetune => "full_finetune",
            Strategy::LinearProbe => "linear_probe",
            Strategy::TemporalHeadOnly => "temporal_head_only",
            Strategy::LinearAdapter => "linear_adapter",
            Strategy::Lora => "lora",
            Strategy::GeluAdapter => "gelu_adapter",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }

    /// Materialize the strategy: a store to train, its mask, and the adapter
    /// spec driving the forward pass (if any). Adapter strategies default to
    /// the shared-QKV 4-adapter layout at bottleneck ratio 0.25; the parallel
    /// kind uses separate projections.
    pub fn build<E: Elem>(
        self,
        backbone: &WeightStore<E>,
        cfg: &ViTConfig,
        plan: &HeadOffsetPlan,
        seed: u64,
    ) -> Result<(WeightStore<E>, TrainableMask, Option<AdapterSpec>)> {
        match self {
            Strategy::FullFinetune => Ok((
                backbone.clone(),
                TrainableMask::all_trainable(backbone),
                None,
            )),
            Strategy::LinearProbe => {
                let mut mask = TrainableMask::new();
                mask.set("head.w", ElemMask::All);
                mask.set("head.b", ElemMask::All);
                Ok((backbone.clone(), mask, None))
            }
            Strategy::TemporalHeadOnly => {
                let mask = temporal_head_mask(backbone, cfg, plan)?;
                Ok((backbone.clone(), mask, None))
            }
            Strategy::LinearAdapter => {
                let spec = AdapterSpec::canonical4(AdapterKind::Linear, Bottleneck::Ratio(0.25));
                let (store, mask) = build_adapted_model(backbone, cfg, &spec, seed)?;
                Ok((store, mask, Some(spec)))
            }
            Strategy::Lora => {
                let spec = AdapterSpec::canonical6(AdapterKind::Lora, Bottleneck::Ratio(0.25));
                let (store, mask) = build_adapted_model(backbone, cfg, &spec, seed)?;
                Ok((store, mask, Some(spec)))
            }
            Strategy::GeluAdapter => {
                let spec = AdapterSpec::canonical4(AdapterKind::Gelu, Bottleneck::Ratio(0.25));
                let (store, mask) = build_adapted_model(backbone, cfg, &spec, seed)?;
                Ok((store, mask, Some(spec)))
            }
        }
    }
}

/// Pretraining stand-in: briefly train the whole backbone on single-frame
/// sprite-position classification (left half vs right half) so frozen
/// features carry some signal before adapters are attached. The caller
/// freezes afterwards.
pub fn warm_start_backbone<E: Elem>(
    store: &mut WeightStore<E>,
    cfg: &ViTConfig,
    tcfg: &TrainConfig,
    samples: usize,
    sprite: usize,
) -> Result<Metrics> {
    if sprite == 0 || sprite > cfg.image_size {
        return Err(Error::Config(format!(
            "sprite {sprite} does not fit image {}",
            cfg.image_size
        )));
    }
    let s = cfg.image_size;
    let span = s - sprite;
    let root = SeededRng::new(tcfg.seed).derive(0x77a7);
    let mut dataset = VideoDataset {
        spec: crate::data::SyntheticVideoSpec {
            task: crate::data::SynthTask::Direction,
            frames: 1,
            image_size: s,
            sprite,
            noise_std: 0.05,
            num_classes: 2,
            dataset_size: samples,
            seed: tcfg.seed,
        },
        samples: Vec::with_capacity(samples),
    };
    for i in 0..samples {
        let mut rng = root.derive(i as u64);
        let x = rng.next_below(span as u64 + 1) as usize;
        let y = rng.next_below(span as u64 + 1) as usize;
        let label = usize::from(x + sprite / 2 >= s / 2);
        let frame = Tensor::<E>::from_fn(vec![1, s, s, 1], |idx| {
            let (py, px) = (idx / s, idx % s);
            let lit = py >= y && py < y + sprite && px >= x && px < x + sprite;
            let noise = 0.05 * rng.normal();
            E::from_f64(if lit { 1.0 + noise } else { noise })
        });
        dataset.samples.push((frame, label));
    }
    let mut warm_cfg = cfg.clone();
    warm_cfg.frames = 1;
    let setup = ModelSetup {
        cfg: warm_cfg,
        attn: AttentionOp::Mhsa,
        adapters: None,
    };
    let mask = TrainableMask::all_trainable(store);
    train(store, &setup, &dataset, tcfg, &mask)
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyRow {
    pub strategy: String,
    /// Trainable parameters excluding the classifier (the table convention).
    pub tunable_params: u64,
    pub train_top1: f64,
    pub test_top1: f64,
}

/// One training run per strategy under a shared seed and budget.
pub fn compare_strategies<E: Elem>(
    backbone: &WeightStore<E>,
    cfg: &ViTConfig,
    plan: &HeadOffsetPlan,
    train_data: &VideoDataset<E>,
    test_data: &VideoDataset<E>,
    tcfg: &TrainConfig,
    strategies: &[Strategy],
) -> Result<Vec<StrategyRow>> {
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let (mut store, mask, adapters) = strategy.build(backbone, cfg, plan, tcfg.seed)?;
        let setup = ModelSetup {
            cfg: cfg.clone(),
            attn: AttentionOp::Stdha(plan.clone()),
            adapters,
        };
        let head_params = mask.mask("head.w").count(store.get("head.w")?.numel())
            + mask.mask("head.b").count(store.get("head.b")?.numel());
        let tunable = mask.trainable_param_count(&store) - head_params;
        let train_metrics = train(&mut store, &setup, train_data, tcfg, &mask)?;
        let test_metrics = evaluate(&store, &setup, test_data)?;
        rows.push(StrategyRow {
            strategy: strategy.name().to_string(),
            tunable_params: tunable,
            train_top1: train_metrics.top1,
            test_top1: test_metrics.top1,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthTask, SyntheticVideoSpec};
    use crate::weights::init_backbone;

    fn tiny_setup() -> (ViTConfig, SyntheticVideoSpec) {
        let cfg = ViTConfig {
            depth: 2,
            width: 16,
            heads: 4,
            mlp_width: 32,
            patch_size: 4,
            image_size: 8,
            frames: 4,
            channels: 1,
            num_classes: 2,
        };
        let data = SyntheticVideoSpec {
            task: SynthTask::Direction,
            frames: 4,
            image_size: 8,
            sprite: 2,
            noise_std: 0.02,
            num_classes: 2,
            dataset_size: 8,
            seed: 5,
        };
        (cfg, data)
    }

    #[test]
    fn zero_epochs_or_zero_lr_leave_model_unchanged() {
        let (cfg, dspec) = tiny_setup();
        let store0 = init_backbone::<f32>(&cfg, 1).unwrap();
        let data = gen_synthetic::<f32>(&dspec).unwrap();
        let setup = ModelSetup {
            cfg: cfg.clone(),
            attn: AttentionOp::Stdha(HeadOffsetPlan::new(vec![1, -1, 0, 0])),
            adapters: None,
        };
        let mask = TrainableMask::all_trainable(&store0);

        let mut zero_epochs = store0.clone();
        let tcfg = TrainConfig {
            epochs: 0,
            seed: 1,
            ..TrainConfig::default()
        };
        train(&mut zero_epochs, &setup, &data, &tcfg, &mask).unwrap();
        assert!(zero_epochs.bit_eq(&store0));

        let mut zero_lr = store0.clone();
        let tcfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        train(&mut zero_lr, &setup, &data, &tcfg, &mask).unwrap();
        assert!(zero_lr.bit_eq(&store0));
    }

    #[test]
    fn single_sample_overfit_reaches_tiny_loss() {
        let (cfg, dspec) = tiny_setup();
        let store = init_backbone::<f32>(&cfg, 3).unwrap();
        let mut data = gen_synthetic::<f32>(&dspec).unwrap();
        data.samples.truncate(1);
        let setup = ModelSetup {
            cfg: cfg.clone(),
            attn: AttentionOp::Mhsa,
            adapters: None,
        };
        let mask = TrainableMask::all_trainable(&store);
        let tcfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut trained = store.clone();
        let metrics = train(&mut trained, &setup, &data, &tcfg, &mask).unwrap();
        let last = *metrics.loss_curve.last().unwrap();
        assert!(last < 0.01, "loss {last} after {} steps", metrics.steps);
    }

    #[test]
    fn frozen_tensors_bit_conserved_under_training() {
        let (cfg, dspec) = tiny_setup();
        let store = init_backbone::<f32>(&cfg, 7).unwrap();
        let data = gen_synthetic::<f32>(&dspec).unwrap();
        let spec = AdapterSpec::canonical4(AdapterKind::Linear, Bottleneck::Width(4));
        let (mut adapted, mask) = build_adapted_model(&store, &cfg, &spec, 8).unwrap();
        let setup = ModelSetup {
            cfg: cfg.clone(),
            attn: AttentionOp::Stdha(HeadOffsetPlan::new(vec![1, -1, 0, 0])),
            adapters: Some(spec),
        };
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        train(&mut adapted, &setup, &data, &tcfg, &mask).unwrap();
        // every backbone tensor bit-identical
        for (name, entry) in store.iter() {
            if name.starts_with("head.") {
                continue;
            }
            assert!(
                adapted.get(name).unwrap().bit_eq(&entry.tensor),
                "{name} moved"
            );
        }
        // adapters moved
        assert!(!adapted
            .get("block.0.adapter.qkv.w_b")
            .unwrap()
            .bit_eq(&Tensor::zeros(vec![4, 16])));
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let (cfg, dspec) = tiny_setup();
        let store = init_backbone::<f32>(&cfg, 9).unwrap();
        let data = gen_synthetic::<f32>(&dspec).unwrap();
        let setup = ModelSetup {
            cfg: cfg.clone(),
            attn: AttentionOp::Mhsa,
            adapters: None,
        };
        let mask = TrainableMask::all_trainable(&store);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut a = store.clone();
        let ma = train(&mut a, &setup, &data, &tcfg, &mask).unwrap();
        let mut b = store.clone();
        let mb = train(&mut b, &setup, &data, &tcfg, &mask).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(ma.loss_curve, mb.loss_curve);
        assert_eq!(ma.top1, mb.top1);
    }

    #[test]
    fn evaluate_counts_chance_for_zero_head() {
        let (cfg, dspec) = tiny_setup();
        let store = init_backbone::<f32>(&cfg, 13).unwrap();
        let data = gen_synthetic::<f32>(&dspec).unwrap();
        let setup = ModelSetup {
            cfg,
            attn: AttentionOp::Mhsa,
            adapters: None,
        };
        // zero head -> zero logits -> argmax always class 0 -> exactly 50%
        let m = evaluate(&store, &setup, &data).unwrap();
        assert_eq!(m.top1, 0.5);
        assert_eq!(m.per_class, vec![1.0, 0.0]);
        // repeated calls identical
        let m2 = evaluate(&store, &setup, &data).unwrap();
        assert_eq!(m.top1, m2.top1);
    }

    #[test]
    fn strategy_param_count_ordering() {
        let cfg = ViTConfig::tiny();
        let store = init_backbone::<f32>(&cfg, 17).unwrap();
        let plan = HeadOffsetPlan::new(vec![1, -1, 0, 0, 0, 0, 0, 0]);
        let count = |s: Strategy| -> u64 {
            let (st, mask, _) = s.build(&store, &cfg, &plan, 1).unwrap();
            let head = mask.mask("head.w").count(st.get("head.w").unwrap().numel())
                + mask.mask("head.b").count(st.get("head.b").unwrap().numel());
            mask.trainable_param_count(&st) - head
        };
        let probe = count(Strategy::LinearProbe);
        let temporal = count(Strategy::TemporalHeadOnly);
        let adapter = count(Strategy::LinearAdapter);
        let full = count(Strategy::FullFinetune);
        assert_eq!(probe, 0);
        assert!(probe < temporal, "{probe} < {temporal}");
        assert!(temporal < adapter, "{temporal} < {adapter}");
        assert!(adapter < full, "{adapter} < {full}");
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!(
            Strategy::parse("linear_adapter").unwrap(),
            Strategy::LinearAdapter
        );
        assert!(Strategy::parse("nope").is_err());
    }

    #[test]
    fn random_logit_model_scores_near_chance_on_balanced_set() {
        let (cfg, mut dspec) = tiny_setup();
        dspec.dataset_size = 1000;
        let data = gen_synthetic::<f32>(&dspec).unwrap();
        let mut store = init_backbone::<f32>(&cfg, 21).unwrap();
        let mut rng = crate::rng::SeededRng::new(33);
        store
            .set(
                "head.w",
                Tensor::randn(vec![cfg.width, cfg.num_classes], 1.0, &mut rng),
            )
            .unwrap();
        store
            .set(
                "head.b",
                Tensor::randn(vec![cfg.num_classes], 1.0, &mut rng),
            )
            .unwrap();
        let setup = ModelSetup {
            cfg,
            attn: AttentionOp::Mhsa,
            adapters: None,
        };
        let m = evaluate(&store, &setup, &data).unwrap();
        assert!((m.top1 - 0.5).abs() <= 0.05, "top1 {}", m.top1);
    }

    #[test]
    fn warm_start_learns_single_frame_positions_and_stays_deterministic() {
        let cfg = ViTConfig {
            depth: 2,
            width: 16,
            heads: 4,
            mlp_width: 32,
            patch_size: 4,
            image_size: 8,
            frames: 4,
            channels: 1,
            num_classes: 2,
        };
        let tcfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut a = init_backbone::<f32>(&cfg, 6).unwrap();
        let metrics = warm_start_backbone(&mut a, &cfg, &tcfg, 32, 3).unwrap();
        assert!(metrics.top1 > 0.8, "warm start train top1 {}", metrics.top1);
        let mut b = init_backbone::<f32>(&cfg, 6).unwrap();
        warm_start_backbone(&mut b, &cfg, &tcfg, 32, 3).unwrap();
        assert!(a.bit_eq(&b));
    }
}
