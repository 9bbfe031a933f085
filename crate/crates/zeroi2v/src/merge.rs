//! Structural reparameterization: fold trained adapters into the frozen
//! weights so the deployed checkpoint has exactly the backbone's shape.
//!
//! Serial adapters on the input side fold as `W_new = (I + W_a W_b) W_old`,
//! output-side ones as `W_new = W_old (I + W_a W_b)`; the parallel kind is
//! `W_new = W_old + A B`. Merging is an algebraic identity, not an
//! approximation — the equivalence verifier holds it to 1e-10 in 64-bit.
//! All merge arithmetic runs in 64-bit regardless of the store's precision
//! and rounds once at the end, which bounds the error of the 32-bit path.
//!
//! The nonlinear (GELU) adapter kind is rejected with a dedicated error:
//! a nonlinearity between the two low-rank maps is exactly what makes a
//! branch impossible to fold into one matrix.

use serde::Serialize;

use crate::adapt::{AdapterKind, AdapterSite, AdapterSpec};
use crate::error::{CheckpointError, Error, Result};
use crate::rng::SeededRng;
use crate::stdha::AttentionOp;
use crate::tape::Tape;
use crate::tensor::{matmul_2d, Elem, Tensor};
use crate::vit::{model_forward_full, ViTConfig};
use crate::weights::{canonical_backbone_names, is_adapter_name, WeightStore};

/// Serial adapter weights: down-projection `w_a` (D -> k), up-projection
/// `w_b` (k -> D), optional bias.
pub struct LinearAdapterWeights<'a, E: Elem> {
    pub w_a: &'a Tensor<E>,
    pub w_b: &'a Tensor<E>,
    pub b_a: Option<&'a Tensor<E>>,
}

/// Parallel low-rank weights: `a` (D_in -> k), `b` (k -> D_out).
pub struct LoraWeights<'a, E: Elem> {
    pub a: &'a Tensor<E>,
    pub b: &'a Tensor<E>,
}

fn check_square_wrap<E: Elem>(
    w_old: &Tensor<E>,
    aw: &LinearAdapterWeights<'_, E>,
    width: usize,
) -> Result<usize> {
    let k = aw.w_a.shape().get(1).copied().unwrap_or(0);
    if aw.w_a.shape() != [width, k] || aw.w_b.shape() != [k, width] {
        return Err(Error::Shape {
            op: "merge_linear_adapter",
            detail: format!(
                "adapter {:?}/{:?} does not wrap width {width} of {:?}",
                aw.w_a.shape(),
                aw.w_b.shape(),
                w_old.shape()
            ),
        });
    }
    if let Some(b) = aw.b_a {
        if b.shape() != [width] {
            return Err(Error::Shape {
                op: "merge_linear_adapter",
                detail: format!("adapter bias {:?} vs width {width}", b.shape()),
            });
        }
    }
    Ok(k)
}

/// dense I + W_a W_b in f64
fn identity_plus_low_rank(
    w_a: &Tensor<f64>,
    w_b: &Tensor<f64>,
    width: usize,
) -> Result<Tensor<f64>> {
    let prod = matmul_2d(w_a, w_b)?;
    Ok(Tensor::from_fn(vec![width, width], |i| {
        prod.data()[i] + if i / width == i % width { 1.0 } else { 0.0 }
    }))
}

/// Fold an input-side serial adapter into a projection:
/// `W_new = (I + W_a W_b) W_old`, `b_new = b_old + b_a W_old`.
pub fn merge_linear_adapter<E: Elem>(
    w_old: &Tensor<E>,
    b_old: Option<&Tensor<E>>,
    aw: &LinearAdapterWeights<'_, E>,
    kind: AdapterKind,
) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
    if kind == AdapterKind::Gelu {
        return Err(Error::NonMergeable(
            "gelu adapter: the nonlinearity between W_a and W_b cannot be folded".into(),
        ));
    }
    if kind == AdapterKind::Lora {
        return Err(Error::Contract(
            "parallel adapters merge via merge_lora".into(),
        ));
    }
    if w_old.shape().len() != 2 {
        return Err(Error::Shape {
            op: "merge_linear_adapter",
            detail: format!("projection {:?} must be rank 2", w_old.shape()),
        });
    }
    let width = w_old.shape()[0];
    check_square_wrap(w_old, aw, width)?;

    let w64: Tensor<f64> = w_old.cast();
    let ipw = identity_plus_low_rank(&aw.w_a.cast(), &aw.w_b.cast(), width)?;
    let w_new = matmul_2d(&ipw, &w64)?;
    let b_new = match (b_old, aw.b_a) {
        (None, None) => None,
        (Some(b), None) => Some(b.clone()),
        (b, Some(ba)) => {
            let ba_row = ba.cast::<f64>().reshaped(vec![1, width])?;
            let shift = matmul_2d(&ba_row, &w64)?;
            let out_dim = w_old.shape()[1];
            let base: Tensor<f64> = match b {
                Some(t) => t.cast(),
                None => Tensor::zeros(vec![out_dim]),
            };
            Some(
                Tensor::<f64>::from_fn(vec![out_dim], |i| base.data()[i] + shift.data()[i])
                    .cast::<E>(),
            )
        }
    };
    Ok((w_new.cast(), b_new))
}

/// Fold an output-side serial adapter (the MLP down-projection case):
/// `W_new = W_old (I + W_a W_b)`, `b_new = b_old + (b_old W_a) W_b + b_a`.
pub fn merge_linear_adapter_output<E: Elem>(
    w_old: &Tensor<E>,
    b_old: Option<&Tensor<E>>,
    aw: &LinearAdapterWeights<'_, E>,
    kind: AdapterKind,
) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
    if kind == AdapterKind::Gelu {
        return Err(Error::NonMergeable(
            "gelu adapter: the nonlinearity between W_a and W_b cannot be folded".into(),
        ));
    }
    if kind == AdapterKind::Lora {
        return Err(Error::Contract(
            "parallel adapters merge via merge_lora".into(),
        ));
    }
    if w_old.shape().len() != 2 {
        return Err(Error::Shape {
            op: "merge_linear_adapter_output",
            detail: format!("projection {:?} must be rank 2", w_old.shape()),
        });
    }
    let width = w_old.shape()[1];
    check_square_wrap(w_old, aw, width)?;

    let w64: Tensor<f64> = w_old.cast();
    let ipw = identity_plus_low_rank(&aw.w_a.cast(), &aw.w_b.cast(), width)?;
    let w_new = matmul_2d(&w64, &ipw)?.cast::<E>();
    let b_new = match b_old {
        None => aw.b_a.cloned(),
        Some(b) => {
            let b_row = b.cast::<f64>().reshaped(vec![1, width])?;
            let through = matmul_2d(&b_row, &ipw)?;
            let ba: Option<Tensor<f64>> = aw.b_a.map(|t| t.cast());
            Some(
                Tensor::<f64>::from_fn(vec![width], |i| {
                    through.data()[i] + ba.as_ref().map_or(0.0, |t| t.data()[i])
                })
                .cast::<E>(),
            )
        }
    };
    Ok((w_new, b_new))
}

/// Fold a parallel low-rank update: `W_new = W_old + A B`.
pub fn merge_lora<E: Elem>(w_old: &Tensor<E>, lw: &LoraWeights<'_, E>) -> Result<Tensor<E>> {
    let (din, dout) = match w_old.shape() {
        [a, b] => (*a, *b),
        other => {
            return Err(Error::Shape {
                op: "merge_lora",
                detail: format!("projection {other:?} must be rank 2"),
            })
        }
    };
    let k = lw.a.shape().get(1).copied().unwrap_or(0);
    if lw.a.shape() != [din, k] || lw.b.shape() != [k, dout] {
        return Err(Error::Shape {
            op: "merge_lora",
            detail: format!(
                "low-rank {:?}/{:?} does not conform to projection [{din}, {dout}]",
                lw.a.shape(),
                lw.b.shape()
            ),
        });
    }
    let ab = matmul_2d(&lw.a.cast::<f64>(), &lw.b.cast::<f64>())?;
    let w64: Tensor<f64> = w_old.cast();
    Ok(Tensor::<f64>::from_fn(vec![din, dout], |i| w64.data()[i] + ab.data()[i]).cast())
}

struct SiteAdapter<E: Elem> {
    w_a: Tensor<E>,
    w_b: Tensor<E>,
    b_a: Option<Tensor<E>>,
}

fn take_site_adapter<E: Elem>(
    adapted: &WeightStore<E>,
    consumed: &mut Vec<String>,
    block: usize,
    site: AdapterSite,
    bias: bool,
) -> Result<SiteAdapter<E>> {
    let wa_name = site.tensor_name(block, "w_a");
    let wb_name = site.tensor_name(block, "w_b");
    let w_a = adapted.get(&wa_name)?.clone();
    let w_b = adapted.get(&wb_name)?.clone();
    consumed.push(wa_name);
    consumed.push(wb_name);
    let b_a = if bias {
        let ba_name = site.tensor_name(block, "b_a");
        let t = adapted.get(&ba_name)?.clone();
        consumed.push(ba_name);
        Some(t)
    } else {
        None
    };
    Ok(SiteAdapter { w_a, w_b, b_a })
}

/// Fold every adapter in `spec` into the backbone weights. The output store
/// contains exactly the canonical backbone tensors — adapter names are gone,
/// shapes match a never-adapted model. With `spec = None` the store must
/// already be adapter-free and is returned unchanged.
pub fn merge_model<E: Elem>(
    adapted: &WeightStore<E>,
    cfg: &ViTConfig,
    spec: Option<&AdapterSpec>,
) -> Result<WeightStore<E>> {
    adapted.validate_for(cfg)?;
    let spec = match spec {
        None => {
            if let Some(orphan) = adapted.names().find(|n| is_adapter_name(n)) {
                return Err(Error::Checkpoint(CheckpointError::Manifest(format!(
                    "orphan adapter tensor `{orphan}` (no adapter spec given)"
                ))));
            }
            return Ok(adapted.clone());
        }
        Some(s) => s,
    };
    spec.validate(cfg)?;
    if spec.kind == AdapterKind::Gelu {
        return Err(Error::NonMergeable(
            "model carries gelu adapters; only linear structures fold into the backbone".into(),
        ));
    }

    let mut merged = WeightStore::new();
    for (name, shape) in canonical_backbone_names(cfg) {
        let t = adapted.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "merge_model",
                detail: format!("`{name}`: {:?} vs {:?}", t.shape(), shape),
            });
        }
        merged.insert(&name, t.clone(), false)?;
    }

    let mut consumed = Vec::new();
    for block in 0..cfg.depth {
        for &site in &spec.placement {
            let ad = take_site_adapter(adapted, &mut consumed, block, site, spec.bias)?;
            let aw = LinearAdapterWeights {
                w_a: &ad.w_a,
                w_b: &ad.w_b,
                b_a: ad.b_a.as_ref(),
            };
            let targets: Vec<AdapterSite> = match site {
                AdapterSite::QkvShared => vec![AdapterSite::Q, AdapterSite::K, AdapterSite::V],
                s => vec![s],
            };
            for target in targets {
                let (w_name, b_name) = target.projection_names(block).expect("concrete site");
                let w_old = merged.get(&w_name)?.clone();
                let b_old = merged.get(&b_name)?.clone();
                match spec.kind {
                    AdapterKind::Lora => {
                        let w_new = merge_lora(
                            &w_old,
                            &LoraWeights {
                                a: &ad.w_a,
                                b: &ad.w_b,
                            },
                        )?;
                        merged.set(&w_name, w_new)?;
                    }
                    AdapterKind::Linear => {
                        let (w_new, b_new) = if site.serial_on_output() {
                            merge_linear_adapter_output(&w_old, Some(&b_old), &aw, spec.kind)?
                        } else {
                            merge_linear_adapter(&w_old, Some(&b_old), &aw, spec.kind)?
                        };
                        merged.set(&w_name, w_new)?;
                        if let Some(b) = b_new {
                            merged.set(&b_name, b)?;
                        }
                    }
                    AdapterKind::Gelu => unreachable!("rejected above"),
                }
            }
        }
    }

    // nothing may be left behind
    for name in adapted.names() {
        if is_adapter_name(name) && !consumed.iter().any(|c| c == name) {
            return Err(Error::Checkpoint(CheckpointError::Manifest(format!(
                "orphan adapter tensor `{name}` not covered by the adapter spec"
            ))));
        }
    }
    Ok(merged)
}

/// Outcome of the seeded input battery comparing two models.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub tolerance: f64,
    /// Max abs residual-stream difference per block, worst case over samples.
    pub per_layer_diffs: Vec<f64>,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub pass: bool,
}

/// Drive both models over `n_samples` seeded random videos and compare logits
/// (and per-block outputs). `adapted_spec` describes the adapters present in
/// the first store; the second store runs bare.
#[allow(clippy::too_many_arguments)]
pub fn verify_equivalence<E: Elem>(
    adapted: &WeightStore<E>,
    adapted_spec: Option<&AdapterSpec>,
    merged: &WeightStore<E>,
    cfg: &ViTConfig,
    attn: &AttentionOp,
    n_samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    adapted.validate_for(cfg)?;
    merged.validate_for(cfg)?;
    let mut per_layer = vec![0.0f64; cfg.depth];
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let root = SeededRng::new(seed);
    for i in 0..n_samples {
        let mut rng = root.derive(i as u64);
        let video = Tensor::<E>::randn(
            vec![cfg.frames, cfg.image_size, cfg.image_size, cfg.channels],
            1.0,
            &mut rng,
        );
        let mut t_a = Tape::new(false);
        let out_a = model_forward_full(&mut t_a, adapted, cfg, attn, adapted_spec, None, &video)?;
        let mut t_m = Tape::new(false);
        let out_m = model_forward_full(&mut t_m, merged, cfg, attn, None, None, &video)?;
        for (l, (va, vm)) in out_a
            .block_outputs
            .iter()
            .zip(&out_m.block_outputs)
            .enumerate()
        {
            let d = t_a.value(*va).max_abs_diff(t_m.value(*vm));
            per_layer[l] = per_layer[l].max(d);
        }
        let la = t_a.value(out_a.logits);
        let lm = t_m.value(out_m.logits);
        max_abs = max_abs.max(la.max_abs_diff(lm));
        for (a, m) in la.data().iter().zip(lm.data()) {
            let (a, m) = (a.to_f64(), m.to_f64());
            let denom = a.abs().max(m.abs());
            if denom > 1e-12 {
                max_rel = max_rel.max((a - m).abs() / denom);
            }
        }
    }
    Ok(EquivalenceReport {
        samples: n_samples,
        tolerance,
        per_layer_diffs: per_layer,
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        pass: max_abs <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{build_adapted_model, Bottleneck};
    use crate::stdha::HeadOffsetPlan;
    use crate::weights::init_backbone;

    fn cfg() -> ViTConfig {
        ViTConfig {
            depth: 2,
            width: 16,
            heads: 4,
            mlp_width: 32,
            patch_size: 4,
            image_size: 8,
            frames: 3,
            channels: 1,
            num_classes: 2,
        }
    }

    fn randomize_adapters<E: Elem>(store: &mut WeightStore<E>, seed: u64) {
        let names: Vec<String> = store
            .names()
            .filter(|n| is_adapter_name(n))
            .map(String::from)
            .collect();
        let mut rng = SeededRng::new(seed);
        for name in names {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store
                .set(&name, Tensor::randn(shape, 0.3, &mut rng))
                .unwrap();
        }
    }

    #[test]
    fn identity_adapter_merges_to_identical_weights() {
        let mut rng = SeededRng::new(1);
        let w_old = Tensor::<f64>::randn(vec![6, 8], 1.0, &mut rng);
        let w_a = Tensor::<f64>::randn(vec![6, 2], 1.0, &mut rng);
        let w_b = Tensor::<f64>::zeros(vec![2, 6]);
        let (w_new, b_new) = merge_linear_adapter(
            &w_old,
            None,
            &LinearAdapterWeights {
                w_a: &w_a,
                w_b: &w_b,
                b_a: None,
            },
            AdapterKind::Linear,
        )
        .unwrap();
        assert!(w_new.bit_eq(&w_old));
        assert!(b_new.is_none());
    }

    #[test]
    fn full_rank_identity_product_doubles_weights() {
        let mut rng = SeededRng::new(2);
        let w_old = Tensor::<f64>::randn(vec![4, 4], 1.0, &mut rng);
        let eye = Tensor::<f64>::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let (w_new, _) = merge_linear_adapter(
            &w_old,
            None,
            &LinearAdapterWeights {
                w_a: &eye,
                w_b: &eye,
                b_a: None,
            },
            AdapterKind::Linear,
        )
        .unwrap();
        for (n, o) in w_new.data().iter().zip(w_old.data()) {
            assert!((n - 2.0 * o).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_projection_matches_unmerged_forward_oracle() {
        // D=16, k=4, with bias: forward through (adapter, W_old) vs W_new
        let mut rng = SeededRng::new(3);
        let d = 16;
        let w_old = Tensor::<f64>::randn(vec![d, 12], 0.5, &mut rng);
        let b_old = Tensor::<f64>::randn(vec![12], 0.5, &mut rng);
        let w_a = Tensor::<f64>::randn(vec![d, 4], 0.5, &mut rng);
        let w_b = Tensor::<f64>::randn(vec![4, d], 0.5, &mut rng);
        let b_a = Tensor::<f64>::randn(vec![d], 0.5, &mut rng);
        let (w_new, b_new) = merge_linear_adapter(
            &w_old,
            Some(&b_old),
            &LinearAdapterWeights {
                w_a: &w_a,
                w_b: &w_b,
                b_a: Some(&b_a),
            },
            AdapterKind::Linear,
        )
        .unwrap();
        let b_new = b_new.unwrap();

        for probe in 0..100 {
            let mut prng = SeededRng::new(1000 + probe);
            let x = Tensor::<f64>::randn(vec![1, d], 1.0, &mut prng);
            // unmerged: (x + (x W_a) W_b + b_a) W_old + b_old
            let mut tape = Tape::<f64>::new(false);
            let xv = tape.constant(&x);
            let wav = tape.constant(&w_a);
            let wbv = tape.constant(&w_b);
            let bav = tape.constant(&b_a);
            let wov = tape.constant(&w_old);
            let bov = tape.constant(&b_old);
            let down = tape.matmul(xv, wav).unwrap();
            let up = tape.matmul(down, wbv).unwrap();
            let sum = tape.add(xv, up).unwrap();
            let adapted = tape.bias_add(sum, bav).unwrap();
            let proj = tape.matmul(adapted, wov).unwrap();
            let unmerged = tape.bias_add(proj, bov).unwrap();
            // merged: x W_new + b_new
            let wnv = tape.constant(&w_new);
            let bnv = tape.constant(&b_new);
            let proj2 = tape.matmul(xv, wnv).unwrap();
            let merged = tape.bias_add(proj2, bnv).unwrap();
            let diff = tape.value(unmerged).max_abs_diff(tape.value(merged));
            assert!(diff <= 1e-10, "probe {probe}: {diff}");
        }
    }

    #[test]
    fn output_side_merge_matches_forward_oracle() {
        let mut rng = SeededRng::new(5);
        let (din, d) = (12, 8);
        let w_old = Tensor::<f64>::randn(vec![din, d], 0.5, &mut rng);
        let b_old = Tensor::<f64>::randn(vec![d], 0.5, &mut rng);
        let w_a = Tensor::<f64>::randn(vec![d, 3], 0.5, &mut rng);
        let w_b = Tensor::<f64>::randn(vec![3, d], 0.5, &mut rng);
        let b_a = Tensor::<f64>::randn(vec![d], 0.5, &mut rng);
        let (w_new, b_new) = merge_linear_adapter_output(
            &w_old,
            Some(&b_old),
            &LinearAdapterWeights {
                w_a: &w_a,
                w_b: &w_b,
                b_a: Some(&b_a),
            },
            AdapterKind::Linear,
        )
        .unwrap();
        let b_new = b_new.unwrap();
        for probe in 0..100 {
            let mut prng = SeededRng::new(2000 + probe);
            let x = Tensor::<f64>::randn(vec![1, din], 1.0, &mut prng);
            let mut tape = Tape::<f64>::new(false);
            let xv = tape.constant(&x);
            let wov = tape.constant(&w_old);
            let bov = tape.constant(&b_old);
            let y = tape.matmul(xv, wov).unwrap();
            let y = tape.bias_add(y, bov).unwrap();
            let wav = tape.constant(&w_a);
            let wbv = tape.constant(&w_b);
            let bav = tape.constant(&b_a);
            let down = tape.matmul(y, wav).unwrap();
            let up = tape.matmul(down, wbv).unwrap();
            let sum = tape.add(y, up).unwrap();
            let unmerged = tape.bias_add(sum, bav).unwrap();
            let wnv = tape.constant(&w_new);
            let bnv = tape.constant(&b_new);
            let p = tape.matmul(xv, wnv).unwrap();
            let merged = tape.bias_add(p, bnv).unwrap();
            assert!(tape.value(unmerged).max_abs_diff(tape.value(merged)) <= 1e-10);
        }
    }

    #[test]
    fn lora_merge_cases() {
        let mut rng = SeededRng::new(7);
        let w_old = Tensor::<f64>::randn(vec![5, 7], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(vec![5, 2], 1.0, &mut rng);
        let b0 = Tensor::<f64>::zeros(vec![2, 7]);
        let merged = merge_lora(&w_old, &LoraWeights { a: &a, b: &b0 }).unwrap();
        assert!(merged.bit_eq(&w_old));

        // A B = -W_old gives the zero matrix (full-rank identity trick)
        let eye5 = Tensor::<f64>::from_fn(vec![5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
        let neg = Tensor::<f64>::from_fn(vec![5, 7], |i| -w_old.data()[i]);
        let zeroed = merge_lora(&w_old, &LoraWeights { a: &eye5, b: &neg }).unwrap();
        assert!(zeroed.data().iter().all(|&v| v.abs() <= 1e-12));

        // random case against unmerged-forward oracle
        let b = Tensor::<f64>::randn(vec![2, 7], 1.0, &mut rng);
        let merged = merge_lora(&w_old, &LoraWeights { a: &a, b: &b }).unwrap();
        let x = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng);
        let direct = matmul_2d(&x, &merged).unwrap();
        let base = matmul_2d(&x, &w_old).unwrap();
        let low = matmul_2d(&matmul_2d(&x, &a).unwrap(), &b).unwrap();
        for i in 0..direct.numel() {
            assert!((direct.data()[i] - base.data()[i] - low.data()[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn gelu_adapter_merge_is_rejected() {
        let mut rng = SeededRng::new(8);
        let w_old = Tensor::<f64>::randn(vec![4, 4], 1.0, &mut rng);
        let w_a = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
        let w_b = Tensor::<f64>::randn(vec![2, 4], 1.0, &mut rng);
        let err = merge_linear_adapter(
            &w_old,
            None,
            &LinearAdapterWeights {
                w_a: &w_a,
                w_b: &w_b,
                b_a: None,
            },
            AdapterKind::Gelu,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonMergeable(_)));

        // and at model level
        let c = cfg();
        let store = init_backbone::<f64>(&c, 1).unwrap();
        let spec = AdapterSpec::canonical4(AdapterKind::Gelu, Bottleneck::Width(4));
        let (adapted, _) = build_adapted_model(&store, &c, &spec, 2).unwrap();
        assert!(matches!(
            merge_model(&adapted, &c, Some(&spec)).unwrap_err(),
            Error::NonMergeable(_)
        ));
    }

    #[test]
    fn zero_init_adapted_merges_back_to_original_backbone() {
        let c = cfg();
        let store = init_backbone::<f32>(&c, 11).unwrap();
        let spec = AdapterSpec::canonical4(AdapterKind::Linear, Bottleneck::Width(4));
        let (adapted, _) = build_adapted_model(&store, &c, &spec, 3).unwrap();
        let merged = merge_model(&adapted, &c, Some(&spec)).unwrap();
        assert!(merged.bit_eq(&store));
        assert_eq!(merged.total_params(), store.total_params());
        assert!(merged.names().all(|n| !is_adapter_name(n)));
    }

    #[test]
    fn merge_without_adapters_is_identity_and_orphans_are_caught() {
        let c = cfg();
        let store = init_backbone::<f32>(&c, 13).unwrap();
        let merged = merge_model(&store, &c, None).unwrap();
        assert!(merged.bit_eq(&store));

        // an adapter tensor with no spec is an orphan
        let spec = AdapterSpec::canonical4(AdapterKind::Linear, Bottleneck::Width(4));
        let (adapted, _) = build_adapted_model(&store, &c, &spec, 4).unwrap();
        assert!(merge_model(&adapted, &c, None).is_err());

        // spec that covers fewer sites than the store carries
        let narrow = AdapterSpec {
            placement: vec![AdapterSite::O],
            kind: AdapterKind::Linear,
            bottleneck: Bottleneck::Width(4),
            bias: false,
        };
        assert!(merge_model(&adapted, &c, Some(&narrow)).is_err());
    }

    #[test]
    fn trained_like_adapters_merge_to_equivalent_model() {
        let c = cfg();
        let store = init_backbone::<f64>(&c, 17).unwrap();
        let spec = AdapterSpec::canonical4(AdapterKind::Linear, Bottleneck::Width(4));
        let (mut adapted, _) = build_adapted_model(&store, &c, &spec, 5).unwrap();
        randomize_adapters(&mut adapted, 99);
        let merged = merge_model(&adapted, &c, Some(&spec)).unwrap();
        let plan = HeadOffsetPlan::new(vec![1, -1, 0, 0]);
        let report = verify_equivalence(
            &adapted,
            Some(&spec),
            &merged,
            &c,
            &AttentionOp::Stdha(plan),
            20,
            1e-10,
            7,
        )
        .unwrap();
        assert!(report.pass, "max diff {}", report.max_abs_diff);
        assert_eq!(report.per_layer_diffs.len(), c.depth);
    }

    #[test]
    fn lora_model_merge_equivalence() {
        let c = cfg();
        let store = init_backbone::<f64>(&c, 19).unwrap();
        let spec = AdapterSpec::canonical6(AdapterKind::Lora, Bottleneck::Width(3));
        let (mut adapted, _) = build_adapted_model(&store, &c, &spec, 6).unwrap();
        randomize_adapters(&mut adapted, 101);
        let merged = merge_model(&adapted, &c, Some(&spec)).unwrap();
        let report = verify_equivalence(
            &adapted,
            Some(&spec),
            &merged,
            &c,
            &AttentionOp::Mhsa,
            20,
            1e-10,
            8,
        )
        .unwrap();
        assert!(report.pass, "max diff {}", report.max_abs_diff);
    }

    #[test]
    fn wrap_and_merge_composition_is_noop() {
        let c = cfg();
        let store = init_backbone::<f32>(&c, 23).unwrap();
        let spec = AdapterSpec::canonical4(AdapterKind::Linear, Bottleneck::Width(4));
        let (mut adapted, _) = build_adapted_model(&store, &c, &spec, 7).unwrap();
        randomize_adapters(&mut adapted, 55);
        let merged = merge_model(&adapted, &c, Some(&spec)).unwrap();
        // wrap the merged model with fresh zero-init adapters, merge again
        let (rewrapped, _) = build_adapted_model(&merged, &c, &spec, 8).unwrap();
        let merged2 = merge_model(&rewrapped, &c, Some(&spec)).unwrap();
        assert!(merged2.bit_eq(&merged));
    }

    #[test]
    fn verify_store_against_itself_is_exact() {
        let c = cfg();
        let store = init_backbone::<f64>(&c, 29).unwrap();
        let report =
            verify_equivalence(&store, None, &store, &c, &AttentionOp::Mhsa, 5, 0.0, 9).unwrap();
        assert_eq!(report.max_abs_diff, 0.0);
        assert!(report.pass);
    }
}
