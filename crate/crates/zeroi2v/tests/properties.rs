//! Randomized invariant suites for the numeric core and the merge algebra.

use proptest::prelude::*;

use zeroi2v::accounting::{count_flops, Views};
use zeroi2v::adapt::{
    adapter_param_count, build_adapted_model, AdapterKind, AdapterSite, AdapterSpec, Bottleneck,
};
use zeroi2v::merge::{merge_linear_adapter, merge_lora, LinearAdapterWeights, LoraWeights};
use zeroi2v::rng::SeededRng;
use zeroi2v::stdha::HeadOffsetPlan;
use zeroi2v::tape::Tape;
use zeroi2v::tensor::{matmul_2d, Tensor};
use zeroi2v::vit::ViTConfig;
use zeroi2v::weights::{init_backbone, is_adapter_name};

fn tensor_strategy(max_dim: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_dim, 1..=max_dim, any::<u64>()).prop_map(|(r, c, seed)| {
        let mut rng = SeededRng::new(seed);
        Tensor::randn(vec![r, c], 1.0, &mut rng)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(t in tensor_strategy(12)) {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(&t);
        let y = tape.softmax_last(x).unwrap();
        let width = t.shape()[1];
        for row in tape.value(y).data().chunks_exact(width) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_output_statistics(t in tensor_strategy(16)) {
        let width = t.shape()[1];
        prop_assume!(width >= 2);
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(&t);
        let g = tape.constant(&Tensor::full(vec![width], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![width]));
        let y = tape.layer_norm(x, g, b, 1e-10).unwrap();
        for row in tape.value(y).data().chunks_exact(width) {
            let mean: f64 = row.iter().sum::<f64>() / width as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            prop_assert!(mean.abs() < 1e-5, "mean {mean}");
            prop_assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn flop_meter_equals_closed_form_over_chains(
        dims in proptest::collection::vec(1usize..8, 3..6),
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let mut tape = Tape::<f64>::new(false);
        let mut expected = 0u64;
        let mut cur = tape.constant(&Tensor::randn(vec![dims[0], dims[1]], 1.0, &mut rng));
        for w in dims[1..].windows(2) {
            let rhs = tape.constant(&Tensor::randn(vec![w[0], w[1]], 1.0, &mut rng));
            let m = tape.shape(cur)[0] as u64;
            cur = tape.matmul(cur, rhs).unwrap();
            expected += 2 * m * w[0] as u64 * w[1] as u64;
        }
        prop_assert_eq!(tape.flops(), expected);
    }

    #[test]
    fn gather_time_clamps_to_edges(
        frames in 1usize..6,
        inner in 1usize..5,
        dt in -7i64..8,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let t = Tensor::<f64>::randn(vec![frames, inner], 1.0, &mut rng);
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(&t);
        let y = tape.gather_time(x, dt).unwrap();
        let yd = tape.value(y).data();
        for f in 0..frames {
            let src = (f as i64 + dt).clamp(0, frames as i64 - 1) as usize;
            prop_assert_eq!(&yd[f * inner..(f + 1) * inner], &t.data()[src * inner..(src + 1) * inner]);
        }
    }

    /// Merging is an algebraic identity: random wrapped projections and
    /// adapters agree with the unmerged forward to 1e-10 in 64-bit.
    #[test]
    fn serial_merge_is_exact(
        d in 2usize..12,
        out_dim in 1usize..12,
        k in 1usize..6,
        seed in any::<u64>(),
        bias in any::<bool>(),
    ) {
        prop_assume!(k < d);
        let mut rng = SeededRng::new(seed);
        let w_old = Tensor::<f64>::randn(vec![d, out_dim], 1.0, &mut rng);
        let b_old = Tensor::<f64>::randn(vec![out_dim], 1.0, &mut rng);
        let w_a = Tensor::<f64>::randn(vec![d, k], 1.0, &mut rng);
        let w_b = Tensor::<f64>::randn(vec![k, d], 1.0, &mut rng);
        let b_a = if bias { Some(Tensor::<f64>::randn(vec![d], 1.0, &mut rng)) } else { None };
        let aw = LinearAdapterWeights { w_a: &w_a, w_b: &w_b, b_a: b_a.as_ref() };
        let (w_new, b_new) = merge_linear_adapter(&w_old, Some(&b_old), &aw, AdapterKind::Linear).unwrap();
        let b_new = b_new.unwrap();

        let x = Tensor::<f64>::randn(vec![3, d], 1.0, &mut rng);
        // unmerged: (x + (x Wa) Wb (+ ba)) W_old + b_old
        let low = matmul_2d(&matmul_2d(&x, &w_a).unwrap(), &w_b).unwrap();
        let adapted = Tensor::<f64>::from_fn(vec![3, d], |i| {
            x.data()[i] + low.data()[i] + b_a.as_ref().map_or(0.0, |b| b.data()[i % d])
        });
        let unmerged = matmul_2d(&adapted, &w_old).unwrap();
        let merged = matmul_2d(&x, &w_new).unwrap();
        for r in 0..3 {
            for c in 0..out_dim {
                let u = unmerged.data()[r * out_dim + c] + b_old.data()[c];
                let m = merged.data()[r * out_dim + c] + b_new.data()[c];
                prop_assert!((u - m).abs() <= 1e-10, "{u} vs {m}");
            }
        }
    }

    #[test]
    fn lora_merge_is_exact(
        din in 1usize..10,
        dout in 1usize..10,
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let w_old = Tensor::<f64>::randn(vec![din, dout], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(vec![din, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![k, dout], 1.0, &mut rng);
        let merged = merge_lora(&w_old, &LoraWeights { a: &a, b: &b }).unwrap();
        let x = Tensor::<f64>::randn(vec![2, din], 1.0, &mut rng);
        let base = matmul_2d(&x, &w_old).unwrap();
        let low = matmul_2d(&matmul_2d(&x, &a).unwrap(), &b).unwrap();
        let via_merge = matmul_2d(&x, &merged).unwrap();
        for i in 0..via_merge.numel() {
            prop_assert!((via_merge.data()[i] - base.data()[i] - low.data()[i]).abs() <= 1e-10);
        }
    }

    /// Closed-form adapter parameter counts equal the instantiated tensor
    /// element sums, for randomized specs.
    #[test]
    fn adapter_count_law(
        kind_pick in 0usize..3,
        k in 1usize..8,
        bias in any::<bool>(),
        site_mask in 1u8..64,
        seed in any::<u64>(),
    ) {
        let cfg = ViTConfig {
            depth: 2, width: 16, heads: 4, mlp_width: 32,
            patch_size: 4, image_size: 8, frames: 2, channels: 1, num_classes: 2,
        };
        let kind = [AdapterKind::Linear, AdapterKind::Gelu, AdapterKind::Lora][kind_pick];
        let all_sites = [
            AdapterSite::QkvShared, AdapterSite::Q, AdapterSite::K, AdapterSite::V,
            AdapterSite::O, AdapterSite::MlpUp, AdapterSite::MlpDown,
        ];
        let mut placement: Vec<AdapterSite> = all_sites
            .iter()
            .enumerate()
            .filter(|(i, _)| site_mask & (1 << i) != 0)
            .map(|(_, s)| *s)
            .collect();
        // keep the spec valid: shared excludes separate q/k/v; lora never shares
        if placement.contains(&AdapterSite::QkvShared) {
            placement.retain(|s| !matches!(s, AdapterSite::Q | AdapterSite::K | AdapterSite::V));
        }
        if kind == AdapterKind::Lora {
            placement.retain(|s| *s != AdapterSite::QkvShared);
        }
        prop_assume!(!placement.is_empty());
        let spec = AdapterSpec {
            placement,
            kind,
            bottleneck: Bottleneck::Width(k),
            bias: bias && kind != AdapterKind::Lora,
        };
        prop_assume!(spec.validate(&cfg).is_ok());

        let store = init_backbone::<f32>(&cfg, seed).unwrap();
        let (adapted, _) = build_adapted_model(&store, &cfg, &spec, seed).unwrap();
        let instantiated: u64 = adapted
            .iter()
            .filter(|(n, _)| is_adapter_name(n))
            .map(|(_, e)| e.tensor.numel() as u64)
            .sum();
        prop_assert_eq!(adapter_param_count(&spec, &cfg).unwrap(), instantiated);
    }

    #[test]
    fn flops_invariant_under_plan(
        heads in 1usize..6,
        seed in any::<u64>(),
    ) {
        let cfg = ViTConfig {
            depth: 2, width: 4 * heads, heads, mlp_width: 16 * heads,
            patch_size: 4, image_size: 8, frames: 4, channels: 1, num_classes: 2,
        };
        let mut rng = SeededRng::new(seed);
        let offsets: Vec<i64> = (0..heads).map(|_| rng.next_below(7) as i64 - 3).collect();
        let plan = HeadOffsetPlan::new(offsets);
        let views = Views::new(4, 2, 3);
        prop_assert_eq!(
            count_flops(&cfg, Some(&plan), views).unwrap().total,
            count_flops(&cfg, None, views).unwrap().total
        );
    }

    #[test]
    fn plan_multiset_roundtrip(offsets in proptest::collection::vec(-4i64..5, 1..16)) {
        let plan = HeadOffsetPlan::new(offsets);
        let printed = plan.multiset_string();
        let back = HeadOffsetPlan::parse(&printed).unwrap();
        // multiset notation preserves the multiset, not the order
        let mut a = plan.offsets().to_vec();
        let mut b = back.offsets().to_vec();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        prop_assert_eq!(plan.temporal_receptive_field(), back.temporal_receptive_field());
        prop_assert_eq!(plan.temporal_head_count(), back.temporal_head_count());
    }

    #[test]
    fn receptive_field_bounds(offsets in proptest::collection::vec(-4i64..5, 1..16)) {
        let plan = HeadOffsetPlan::new(offsets.clone());
        let rf = plan.temporal_receptive_field();
        let span = offsets.iter().copied().max().unwrap().max(0)
            - offsets.iter().copied().min().unwrap().min(0);
        prop_assert_eq!(rf, span as usize + 1);
        prop_assert!(rf >= 1);
        for layers in 1..4usize {
            prop_assert_eq!(plan.stacked_receptive_field(layers), layers * span as usize + 1);
        }
    }
}
