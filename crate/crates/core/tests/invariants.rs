use proptest::prelude::*;

use ladder_core::autograd::{
    compare_policies, CheckpointPolicy, GraphBuilder, ParamStore, Part, Stage, Tag,
};
use ladder_core::dataio::image::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use ladder_core::dataio::{Image, LabelMap};
use ladder_core::kernels::conv::ConvParams;
use ladder_core::kernels::norm::{channel_stats, BnRunning};
use ladder_core::rng::SplitMix64;
use ladder_core::tensor::Tensor;
use ladder_core::trainer::{cosine_lr, soft_targets, Confusion};

fn labels(h: usize, w: usize, classes: u8, seed: u64) -> LabelMap {
    let mut rng = SplitMix64::new(seed);
    let data = (0..h * w)
        .map(|_| {
            if rng.bernoulli(0.1) {
                255
            } else {
                rng.below(classes as u64) as u8
            }
        })
        .collect();
    LabelMap {
        height: h,
        width: w,
        data,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn soft_targets_sum_to_one_where_unmasked(n in 1usize..5, cells in 1usize..5, classes in 2u8..7, seed in any::<u64>()) {
        let l = labels(n * cells, n * (cells + 1), classes, seed);
        let t = soft_targets(&l, n, classes as usize, 255).unwrap();
        let plane = cells * (cells + 1);
        for p in 0..plane {
            let s: f64 = (0..classes as usize).map(|c| t.data()[c * plane + p] as f64).sum();
            prop_assert!(s.abs() < 1e-6 || (s - 1.0).abs() < 1e-6);
            let (i, j) = (p / (cells + 1), p % (cells + 1));
            let valid = (0..n).any(|y| (0..n).any(|x| l.get(i * n + y, j * n + x) != 255));
            prop_assert_eq!(valid, (s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn miou_is_a_probability(counts in proptest::collection::vec(0u64..50, 9)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let r = Confusion::from_counts(3, counts.clone()).unwrap().miou().unwrap();
        prop_assert!((0.0..=1.0).contains(&r.mean));
        let diag_only = (0..3).all(|i| (0..3).all(|j| i == j || counts[i * 3 + j] == 0));
        prop_assert_eq!(r.mean == 1.0, diag_only);
    }

    #[test]
    fn pooled_moments_match_the_whole_set(sizes in proptest::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let batches: Vec<Tensor<f64>> = sizes.iter().map(|&n| Tensor::from_fn(&[n, 2, 3, 3], |_| rng.normal() * 3.0 + 1.0)).collect();
        let mut acc = BnRunning::new(2);
        for b in &batches {
            let (m, v) = channel_stats(b).unwrap();
            acc.accumulate(&m, &v, (b.shape()[0] * 9) as u64);
        }
        let all: Vec<f64> = batches.iter().flat_map(|b| b.data().iter().copied()).collect();
        let whole = Tensor::from_vec(&[all.len() / 18, 2, 3, 3], all).unwrap();
        let (m, v) = channel_stats(&whole).unwrap();
        for c in 0..2 {
            prop_assert!((acc.acc_mean[c] - m[c]).abs() < 1e-9);
            prop_assert!((acc.acc_var[c] - v[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_schedule_is_monotone(total in 1usize..200, base in 1e-6f64..1.0) {
        let lrs: Vec<f64> = (0..=total).map(|e| cosine_lr(e, total, base).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!((lrs[0] - base).abs() < 1e-15);
    }

    #[test]
    fn netpbm_round_trips(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let rgb: Vec<u8> = (0..h * w * 3).map(|_| rng.below(256) as u8).collect();
        let img = Image::from_rgb8(h, w, &rgb).unwrap();
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        let l = labels(h, w, 5, seed);
        prop_assert_eq!(decode_pgm(&encode_pgm(&l)).unwrap(), l);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn policies_agree_on_random_unit_stacks(units in 1usize..4, seed in any::<u64>()) {
        let mut b = GraphBuilder::new(&[2, 8, 6, 6]).unwrap();
        let mut feats = vec![b.input()];
        for u in 0..units {
            b.set_tag(Tag::new(Part::Cat, u, Stage::Block(0)));
            let cat = if feats.len() > 1 { b.concat(&feats, "cat").unwrap() } else { feats[0] };
            b.set_tag(Tag::new(Part::Proj1x1, u, Stage::Block(0)));
            let c = b.channels(cat);
            let p = b.bn_relu_conv(cat, ConvParams::pointwise(c, 8), &format!("u{}.c1", u)).unwrap();
            b.set_tag(Tag::new(Part::Conv3x3, u, Stage::Block(0)));
            let y = b.bn_relu_conv(p, ConvParams::square(8, 4, 3, 1, 1), &format!("u{}.c2", u)).unwrap();
            feats.push(y);
        }
        b.set_tag(Tag::other());
        let out = b.concat(&feats, "out").unwrap();
        b.mark_output(out, "y");
        let g = b.finish();
        let store = ParamStore::init(&g, seed);
        let mut rng = SplitMix64::new(seed ^ 1);
        let x = Tensor::from_fn(g.input_shape(), |_| rng.uniform(-1.0, 1.0) as f32);
        let policies = [CheckpointPolicy::Conv3x3Only, CheckpointPolicy::CatProj, CheckpointPolicy::UnitWhole];
        for d in compare_policies(&g, &store, &x, &policies, seed).unwrap() {
            prop_assert_eq!(d.max_abs_diff, 0.0, "{}", d.policy.name());
        }
    }
}
