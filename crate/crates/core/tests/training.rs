use arvo_core::data::{make_toy_dataset, synthesize_clip, windows, BlurWindow, ToyConfig};
use arvo_core::flow::{AlignMode, Alignment};
use arvo_core::model::{deblur_step, encode, init_generator, DeblurConfig};
use arvo_core::train::{config_path, csv_logger, read_config, save_checkpoint, TrainConfig, Trainer};
use arvo_core::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frames(n: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor::from_fn(&[1, 3, size, size], |_| rng.random_range(0.0..1.0))).collect()
}

fn small_model() -> DeblurConfig {
    DeblurConfig { pyramid_l: 2, channels: 4, align: AlignMode::Off, use_volumes: true, stages: 1 }
}

fn toy_windows(stages: usize) -> Vec<BlurWindow> {
    let cfg = ToyConfig { n_clips: 1, frames_per_clip: 40, height: 16, width: 16, seed: 2, speed: None };
    let clip = &make_toy_dataset(&cfg).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let paired = synthesize_clip(clip, 3, (2, 3), &mut rng).unwrap();
    windows(&paired, 2 * stages + 1, false).unwrap()
}

fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: DeblurConfig { pyramid_l: 1, channels: 4, align: AlignMode::Classical, use_volumes: true, stages: 2 },
        lr: 1e-3,
        alpha: 0.1,
        patch: 16,
        epochs: 100,
        max_steps: Some(12),
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn encoder_quarters_the_resolution() {
    let cfg = small_model();
    let store: ParamStore<f32> = init_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(frames(1, 64, 1).remove(0));
    let e = encode(&mut g, x, &p).unwrap();
    assert_eq!(g.shape(e.features), &[1, 4, 16, 16]);
    assert_eq!(g.shape(e.skip_half), &[1, 2, 32, 32]);
    assert_eq!(g.shape(e.skip_full), &[1, 1, 64, 64]);
}

#[test]
fn restored_frame_matches_input_size() {
    let cfg = small_model();
    let store: ParamStore<f32> = init_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for size in [64, 96] {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = frames(3, size, size as u64);
        let vars = [0, 1, 2].map(|i| g.constant(f[i].clone()));
        let out = deblur_step(&mut g, vars, [0, 1, 2], &cfg, &Alignment::Off, &p).unwrap();
        assert_eq!(g.shape(out), &[1, 3, size, size]);
        // Zero output head: the untrained generator passes the reference through.
        assert_eq!(g.value(out), &f[1]);
    }
}

#[test]
fn every_generator_parameter_gets_a_gradient() {
    let cfg = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store: ParamStore<f64> = init_generator(&cfg, &mut rng).unwrap();
    for v in store.get_mut("dec.out.w").unwrap().data_mut() {
        *v = rng.random_range(-0.1..0.1);
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let f: Vec<Tensor<f64>> = frames(3, 16, 4).iter().map(Tensor::cast).collect();
    let vars = [0, 1, 2].map(|i| g.constant(f[i].clone()));
    let out = deblur_step(&mut g, vars, [0, 1, 2], &cfg, &Alignment::Off, &p).unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    store.set_grads(&p, &grads);
    for (name, t) in store.iter() {
        let grad = t.grad.as_ref().unwrap();
        assert!(grad.iter().any(|v| *v != 0.0), "{name} receives no gradient");
    }
}

#[test]
fn checkpoint_and_config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_config(9);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    trainer.fit(&toy_windows(2), |_, _| Ok(()), |_| Ok(())).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&trainer, &path).unwrap();
    assert_eq!(ParamStore::<f32>::load(&path).unwrap(), trainer.checkpoint());
    let back = TrainConfig::from_map(&read_config(&config_path(&path)).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn equal_seeds_train_identically() {
    let data = toy_windows(2);
    let run = |seed: u64| {
        let mut csv = Vec::new();
        let mut t = Trainer::new(small_train_config(seed)).unwrap();
        t.fit(&data, csv_logger(&mut csv).unwrap(), |_| Ok(())).unwrap();
        assert_eq!(t.step, 12);
        let rows: Vec<String> = String::from_utf8(csv)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect();
        let mut bytes = Vec::new();
        t.checkpoint().write_checkpoint(&mut bytes).unwrap();
        (bytes, rows)
    };
    let (a, b) = (run(4), run(4));
    assert_eq!(a.1.len(), 13);
    assert!(a.0 == b.0, "checkpoints differ");
    assert_eq!(a.1, b.1);
    assert_ne!(run(5).0, a.0);
}
