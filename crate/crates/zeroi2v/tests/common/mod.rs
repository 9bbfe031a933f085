//! Helpers shared by the integration suites.

use zeroi2v::rng::SeededRng;
use zeroi2v::stdha::HeadOffsetPlan;
use zeroi2v::tensor::{Elem, Tensor};
use zeroi2v::vit::ViTConfig;
use zeroi2v::weights::{is_adapter_name, WeightStore};

/// Small config used by the fast structural checks.
pub fn small_cfg() -> ViTConfig {
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

pub fn random_video<E: Elem>(cfg: &ViTConfig, seed: u64) -> Tensor<E> {
    let mut rng = SeededRng::new(seed);
    Tensor::randn(
        vec![cfg.frames, cfg.image_size, cfg.image_size, cfg.channels],
        1.0,
        &mut rng,
    )
}

/// Overwrite every adapter tensor with non-trivial random values, as a stand-in
/// for a trained state when only the algebra is under test.
pub fn randomize_adapters<E: Elem>(store: &mut WeightStore<E>, seed: u64, std: f64) {
    let names: Vec<String> = store
        .names()
        .filter(|n| is_adapter_name(n))
        .map(String::from)
        .collect();
    let mut rng = SeededRng::new(seed);
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        store
            .set(&name, Tensor::randn(shape, std, &mut rng))
            .unwrap();
    }
}

/// Permute an offset plan together with the per-head channel blocks of the
/// attention projections: Q/K/V output columns (and bias segments) move with
/// their head, and the output projection's input rows move identically.
pub fn permute_heads<E: Elem>(
    store: &WeightStore<E>,
    cfg: &ViTConfig,
    plan: &HeadOffsetPlan,
    perm: &[usize],
) -> (WeightStore<E>, HeadOffsetPlan) {
    assert_eq!(perm.len(), cfg.heads);
    let d = cfg.width;
    let dh = cfg.head_width();
    let mut out = store.clone();

    let permute_cols = |t: &Tensor<E>| -> Tensor<E> {
        Tensor::from_fn(t.shape().to_vec(), |i| {
            let (r, c) = (i / d, i % d);
            let (head, off) = (c / dh, c % dh);
            t.data()[r * d + perm[head] * dh + off]
        })
    };
    let permute_vec = |t: &Tensor<E>| -> Tensor<E> {
        Tensor::from_fn(t.shape().to_vec(), |c| {
            let (head, off) = (c / dh, c % dh);
            t.data()[perm[head] * dh + off]
        })
    };
    let permute_rows = |t: &Tensor<E>| -> Tensor<E> {
        Tensor::from_fn(t.shape().to_vec(), |i| {
            let (r, c) = (i / d, i % d);
            let (head, off) = (r / dh, r % dh);
            t.data()[(perm[head] * dh + off) * d + c]
        })
    };

    for block in 0..cfg.depth {
        for leaf in ["w_q", "w_k", "w_v"] {
            let name = format!("block.{block}.attn.{leaf}");
            let permuted = permute_cols(store.get(&name).unwrap());
            out.set(&name, permuted).unwrap();
        }
        for leaf in ["b_q", "b_k", "b_v"] {
            let name = format!("block.{block}.attn.{leaf}");
            let permuted = permute_vec(store.get(&name).unwrap());
            out.set(&name, permuted).unwrap();
        }
        let name = format!("block.{block}.attn.w_o");
        let permuted = permute_rows(store.get(&name).unwrap());
        out.set(&name, permuted).unwrap();
    }
    let new_plan = HeadOffsetPlan::new(perm.iter().map(|&p| plan.offsets()[p]).collect::<Vec<_>>());
    (out, new_plan)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
