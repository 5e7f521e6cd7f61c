//! Warping, blur synthesis and metric laws on random inputs.

use arvo_core::data::{make_toy_dataset, subsample_centers, synthesize_blur, synthesize_clip, ToyConfig, VideoClip};
use arvo_core::flow::{warp, FlowField};
use arvo_core::metrics::{psnr, ssim, SSIM_K1};
use arvo_core::train::{Augmentation, Flip};
use arvo_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0))
}

fn flow(h: usize, w: usize, seed: u64, max: f32) -> FlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = FlowField::zeros(h, w);
    for v in f.u_x.iter_mut().chain(f.u_y.iter_mut()) {
        *v = rng.random_range(-max..max);
    }
    f
}

fn augmentation() -> impl Strategy<Value = Augmentation> {
    (0..3usize, 0..4u8).prop_map(|(f, rot90)| Augmentation { flip: [Flip::None, Flip::Horizontal, Flip::Vertical][f], rot90 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_flow_is_identity(seed in 0u64..10_000, h in 1usize..9, w in 1usize..9) {
        let img = image(3, h, w, seed);
        prop_assert_eq!(warp(&img, &FlowField::zeros(h, w)).unwrap(), img);
    }

    #[test]
    fn integer_flow_shifts_interior(seed in 0u64..10_000, dx in -2i32..=2, dy in -2i32..=2) {
        let (h, w) = (9, 10);
        let img = image(2, h, w, seed);
        let out = warp(&img, &FlowField::uniform(h, w, dx as f32, dy as f32)).unwrap();
        for c in 0..2 {
            for y in 2..h - 2 {
                for x in 2..w - 2 {
                    let src = [c, (y as i32 + dy) as usize, (x as i32 + dx) as usize];
                    prop_assert_eq!(out.get(&[c, y, x]), img.get(&src));
                }
            }
        }
    }

    /// Warping commutes with a flip/rotation applied to image and flow alike.
    #[test]
    fn warp_commutes_with_augmentation(seed in 0u64..10_000, aug in augmentation()) {
        let img = image(3, 6, 6, seed);
        let f = flow(6, 6, seed + 1, 2.5);
        let a = aug.apply_image(&warp(&img, &f).unwrap()).unwrap();
        let b = warp(&aug.apply_image(&img).unwrap(), &aug.apply_flow(&f).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
    }

    #[test]
    fn flips_are_involutions(seed in 0u64..10_000, f in 1..3usize) {
        let aug = Augmentation { flip: [Flip::None, Flip::Horizontal, Flip::Vertical][f], rot90: 0 };
        let img = image(3, 4, 7, seed);
        prop_assert_eq!(aug.apply_image(&aug.apply_image(&img).unwrap()).unwrap(), img);
        let fl = flow(4, 7, seed, 3.0);
        let back = aug.apply_flow(&aug.apply_flow(&fl).unwrap()).unwrap();
        prop_assert_eq!((back.u_x, back.u_y), (fl.u_x, fl.u_y));
    }

    #[test]
    fn four_quarter_turns_are_identity(seed in 0u64..10_000) {
        let quarter = Augmentation { flip: Flip::None, rot90: 1 };
        let img = image(3, 5, 5, seed);
        let mut t = img.clone();
        let mut fl = flow(5, 5, seed, 3.0);
        let orig = fl.clone();
        for _ in 0..4 {
            t = quarter.apply_image(&t).unwrap();
            fl = quarter.apply_flow(&fl).unwrap();
        }
        prop_assert_eq!(t, img);
        prop_assert_eq!((fl.u_x, fl.u_y), (orig.u_x, orig.u_y));
    }

    #[test]
    fn blur_is_linear(seed in 0u64..10_000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let x: Vec<_> = (0..5).map(|i| image(3, 4, 4, seed * 10 + i)).collect();
        let y: Vec<_> = (0..5).map(|i| image(3, 4, 4, seed * 10 + 5 + i)).collect();
        let mixed: Vec<_> = x.iter().zip(&y).map(|(p, q)| {
            Tensor::new(p.shape(), p.data().iter().zip(q.data()).map(|(u, v)| a * u + b * v).collect()).unwrap()
        }).collect();
        let lhs = synthesize_blur(&mixed).unwrap();
        let (bx, by) = (synthesize_blur(&x).unwrap(), synthesize_blur(&y).unwrap());
        for ((l, u), v) in lhs.data().iter().zip(bx.data()).zip(by.data()) {
            prop_assert!((l - (a * u + b * v)).abs() <= 1e-5);
        }
    }

    /// Windows are consecutive, gap-free and lie inside the clip.
    #[test]
    fn subsample_windows_tile(seed in 0u64..10_000, n in 1usize..300, lo in 1usize..12, extra in 0usize..6) {
        let hi = lo + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = subsample_centers(n, (lo, hi), &mut rng).unwrap();
        let mut next_start = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(mid, start) in &centres {
            prop_assert_eq!(start, next_start);
            let len = rng.random_range(lo..=hi);
            prop_assert_eq!(mid, start + len / 2);
            next_start = start + len;
        }
        prop_assert!(next_start <= n);
        prop_assert!(n - next_start < hi);
    }

    #[test]
    fn metrics_are_symmetric(seed in 0u64..10_000) {
        let a = image(3, 12, 13, seed);
        let b = image(3, 12, 13, seed + 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn constant_frames_survive_blur() {
    let frames = vec![Tensor::full(&[3, 4, 5], 0.37f32); 41];
    assert_eq!(synthesize_blur(&frames).unwrap(), frames[0]);
}

#[test]
fn moving_impulse_leaves_a_streak() {
    let w = 9;
    let frames: Vec<Tensor<f32>> = (0..w)
        .map(|t| {
            let mut f = Tensor::zeros(&[3, 3, 12]);
            for c in 0..3 {
                f.set(&[c, 1, t + 1], 1.0);
            }
            f
        })
        .collect();
    let blur = synthesize_blur(&frames).unwrap();
    let expect = Tensor::from_fn(&[3, 3, 12], |i| {
        let (y, x) = ((i / 12) % 3, i % 12);
        let hits = frames.iter().filter(|f| f.get(&[0, y, x]) == 1.0).count();
        hits as f32 / w as f32
    });
    assert!(blur.max_abs_diff(&expect).unwrap() <= 1e-7);
    assert_eq!(blur.get(&[0, 1, 0]), 0.0);
    assert!((blur.get(&[0, 1, 5]) - 1.0 / 9.0).abs() <= 1e-7);
}

#[test]
fn toy_generation_is_bit_deterministic() {
    let cfg = ToyConfig { n_clips: 2, frames_per_clip: 30, height: 16, width: 16, seed: 11, speed: None };
    let a = make_toy_dataset(&cfg).unwrap();
    let b = make_toy_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    let other = make_toy_dataset(&ToyConfig { seed: 12, ..cfg.clone() }).unwrap();
    assert_ne!(a[0].frames, other[0].frames);
    let pairs = |clips: &[VideoClip]| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        clips.iter().map(|c| synthesize_clip(c, 9, (9, 11), &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(pairs(&a), pairs(&b));
}

/// Faster shapes leave more blur behind.
#[test]
fn blur_grows_with_speed() {
    let residual = |speed: f32| {
        let cfg = ToyConfig { n_clips: 3, frames_per_clip: 30, height: 32, width: 32, seed: 5, speed: Some(speed) };
        let clips = make_toy_dataset(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0f64;
        for c in &clips {
            let p = synthesize_clip(c, 9, (9, 11), &mut rng).unwrap();
            for (b, s) in p.blurry.iter().zip(&p.sharp) {
                total += b.data().iter().zip(s.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
            }
        }
        total
    };
    let r: Vec<f64> = [0.25, 1.0, 2.0].map(residual).to_vec();
    assert!(r[0] < r[1] && r[1] < r[2], "{r:?}");
}

#[test]
fn psnr_of_one_percent_mse_is_twenty_db() {
    let a = Tensor::<f32>::zeros(&[3, 10, 10]);
    let mut b = a.clone();
    // 12 of 300 values off by 0.5: MSE = 3 / 300.
    for i in 0..12 {
        b.data_mut()[i * 25] = 0.5;
    }
    assert_eq!(psnr(&a, &b).unwrap(), 20.0);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

#[test]
fn ssim_closed_forms() {
    let a = Tensor::<f32>::zeros(&[3, 16, 16]);
    let b = Tensor::<f32>::full(&[3, 16, 16], 1.0);
    let c1 = SSIM_K1 * SSIM_K1;
    assert!((ssim(&a, &b).unwrap() - c1 / (1.0 + c1)).abs() <= 1e-12);
    let img = image(3, 16, 16, 4);
    assert_eq!(ssim(&img, &img).unwrap(), 1.0);
}
