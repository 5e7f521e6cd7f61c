use arvo_core::aggregate::{aggregate_level, aggregate_pair, fuse_three, init_refinement, AggregatedFeature};
use arvo_core::corrvol::{CorrelationVolume, VolumeDims, VolumeKind};
use arvo_core::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn volume(g: &mut Graph<f64>, weights: Tensor<f64>, dims: VolumeDims) -> CorrelationVolume {
    let values = g.constant(weights);
    CorrelationVolume { values, level: 1, kind: VolumeKind::InterNext, dims, normalized: true }
}

const DIMS: VolumeDims = VolumeDims { h: 4, w: 4, hk: 2, wk: 2 };

#[test]
fn one_hot_weights_select_one_pixel() {
    let (p, q) = (DIMS.h * DIMS.w, DIMS.hk * DIMS.wk);
    let pick = |row: usize| (row * 3 + 1) % q;
    let weights = Tensor::from_fn(&[1, p, q], |i| if i % q == pick(i / q) { 1.0 } else { 0.0 });
    let refined = random(&[1, 5, 2, 2], 1);
    let mut g = Graph::new();
    let vol = volume(&mut g, weights, DIMS);
    let r = g.constant(refined.clone());
    let out = aggregate_level(&mut g, &vol, r).unwrap();
    let out = g.value(out);
    assert_eq!(out.shape(), &[1, 5, 4, 4]);
    for c in 0..5 {
        for row in 0..p {
            let src = pick(row);
            assert_eq!(out.get(&[0, c, row / 4, row % 4]), refined.get(&[0, c, src / 2, src % 2]));
        }
    }
}

#[test]
fn uniform_weights_give_the_mean() {
    let (p, q) = (DIMS.h * DIMS.w, DIMS.hk * DIMS.wk);
    let weights = Tensor::full(&[2, p, q], 1.0 / q as f64);
    let refined = random(&[2, 3, 2, 2], 2);
    let mut g = Graph::new();
    let vol = volume(&mut g, weights, DIMS);
    let r = g.constant(refined.clone());
    let out = aggregate_level(&mut g, &vol, r).unwrap();
    let out = g.value(out);
    for n in 0..2 {
        for c in 0..3 {
            let mean: f64 = (0..4).map(|j| refined.get(&[n, c, j / 2, j % 2])).sum::<f64>() / 4.0;
            for row in 0..p {
                assert!((out.get(&[n, c, row / 4, row % 4]) - mean).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_is_convex(seed in 0u64..10_000) {
        let (p, q) = (DIMS.h * DIMS.w, DIMS.hk * DIMS.wk);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w: Vec<f64> = (0..p * q).map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-9).collect();
        for row in w.chunks_mut(q) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let refined = random(&[1, 4, 2, 2], seed + 1);
        let mut g = Graph::new();
        let vol = volume(&mut g, Tensor::new(&[1, p, q], w).unwrap(), DIMS);
        let r = g.constant(refined.clone());
        let out = aggregate_level(&mut g, &vol, r).unwrap();
        let out = g.value(out).clone();
        for c in 0..4 {
            let vals: Vec<f64> = (0..q).map(|j| refined.get(&[0, c, j / 2, j % 2])).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for row in 0..p {
                let v = out.get(&[0, c, row / 4, row % 4]);
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }
}

fn fused(depth: usize, c: usize) -> (Graph<f64>, Var, [AggregatedFeature; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
    let mut store = ParamStore::<f64>::new();
    init_refinement(&mut store, c, depth, &mut rng);
    let mut g = Graph::new();
    let params = store.bind(&mut g);
    let side = 2 << depth;
    let frames: Vec<Var> = (0..3).map(|i| g.constant(random(&[1, c, side, side], 10 + i))).collect();
    let parts = [
        aggregate_pair(&mut g, frames[1], frames[2], depth, &params, VolumeKind::InterNext).unwrap(),
        aggregate_pair(&mut g, frames[1], frames[0], depth, &params, VolumeKind::InterPrev).unwrap(),
        aggregate_pair(&mut g, frames[1], frames[1], depth, &params, VolumeKind::Intra).unwrap(),
    ];
    let out = fuse_three(&mut g, parts).unwrap();
    (g, out, parts)
}

#[test]
fn fused_channels_are_three_l_c() {
    for depth in 1..=3 {
        let c = 4;
        let (g, out, _) = fused(depth, c);
        let side = 2 << depth;
        assert_eq!(g.shape(out), &[1, 3 * depth * c, side, side]);
    }
}

#[test]
fn fused_blocks_are_prev_self_next() {
    let (g, out, parts) = fused(2, 3);
    let out = g.value(out);
    let block = 2 * 3 * 8 * 8;
    let by_kind = |k: VolumeKind| g.value(parts.iter().find(|p| p.source == k).unwrap().values).data().to_vec();
    assert_eq!(&out.data()[..block], by_kind(VolumeKind::InterPrev).as_slice());
    assert_eq!(&out.data()[block..2 * block], by_kind(VolumeKind::Intra).as_slice());
    assert_eq!(&out.data()[2 * block..], by_kind(VolumeKind::InterNext).as_slice());
}
