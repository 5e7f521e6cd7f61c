use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn arvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arvo")).args(args).output().expect("spawn arvo")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Two small toy clips with many blurry frames each.
fn small_dataset(dir: &Path) {
    ok(arvo(&[
        "synth", "--toy", "--clips", "2", "--frames", "40", "--size", "32x32", "--window", "3", "--n-range", "2,3",
        "--seed", "1", "--out", p(dir),
    ]));
}

#[test]
fn toy_synthesis_is_byte_identical() {
    let t = TempDir::new().unwrap();
    let args = |out: &Path| {
        ok(arvo(&["synth", "--toy", "--seed", "7", "--clips", "2", "--frames", "30", "--size", "16x16", "--out", p(out)]))
    };
    args(&t.path().join("a"));
    args(&t.path().join("b"));
    let a = tree(&t.path().join("a"));
    assert!(a.len() > 4);
    assert_eq!(a, tree(&t.path().join("b")));
}

#[test]
fn even_window_rejected() {
    let t = TempDir::new().unwrap();
    let o = arvo(&["synth", "--toy", "--window", "8", "--out", p(t.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_source_rejected() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&arvo(&["synth", "--out", p(t.path())])), 2);
    let o = arvo(&["synth", "--sharp-dir", p(&t.path().join("nope")), "--out", p(&t.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_flag_rejected() {
    assert_eq!(code(&arvo(&["bench", "--frobnicate", "3"])), 2);
}

#[test]
fn sharp_dir_with_default_parameters() {
    let t = TempDir::new().unwrap();
    let toy = t.path().join("toy");
    ok(arvo(&["synth", "--toy", "--clips", "1", "--frames", "100", "--size", "16x16", "--window", "1", "--n-range", "1,1", "--out", p(&toy)]));
    let out = t.path().join("hfr");
    let o = ok(arvo(&["synth", "--sharp-dir", p(&toy.join("clip000").join("sharp")), "--out", p(&out)]));
    let echoed = String::from_utf8_lossy(&o.stderr);
    assert!(echoed.contains("window=41") && echoed.contains("n_range=38,44"), "{echoed}");
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    let count: usize = manifest.trim().split(',').nth(1).unwrap().parse().unwrap();
    assert!((1..=2).contains(&count), "{manifest}");
}

#[test]
fn flags_override_config_file() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("bench.cfg");
    fs::write(&cfg, "# bench settings\nchannels=3\nreps=2\n").unwrap();
    let o = ok(arvo(&["--config", p(&cfg), "bench", "--size", "8x8", "--pyramid-L", "1", "--reps", "1"]));
    let echoed = String::from_utf8_lossy(&o.stderr);
    assert!(echoed.contains("channels=3"));
    assert!(echoed.contains("reps=1"));
    fs::write(&cfg, "colour=blue\n").unwrap();
    assert_eq!(code(&arvo(&["--config", p(&cfg), "bench"])), 2);
}

#[test]
fn bench_table() {
    let t = TempDir::new().unwrap();
    for imp in ["naive", "optimized"] {
        let o = ok(arvo(&["bench", "--size", "8x8", "--channels", "4", "--pyramid-L", "2", "--impl", imp, "--reps", "2", "--out", p(t.path())]));
        let text = String::from_utf8(o.stdout).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "impl,height,width,channels,level,nbr_height,nbr_width,reps,mean_ms,max_abs_diff");
        assert_eq!(lines.len(), 3);
        for (row, k) in lines[1..].iter().zip(1..) {
            let f: Vec<&str> = row.split(',').collect();
            assert_eq!(f[0], imp);
            assert_eq!(f[4].parse::<usize>().unwrap(), k);
            assert_eq!(f[5].parse::<usize>().unwrap(), 8 >> k);
            assert!(f[9].parse::<f64>().unwrap() <= 1e-5);
        }
        assert_eq!(fs::read_to_string(t.path().join("bench.csv")).unwrap(), text);
    }
    assert_eq!(code(&arvo(&["bench", "--reps", "0"])), 2);
    assert_eq!(code(&arvo(&["bench", "--impl", "fast"])), 2);
}

#[test]
fn train_deblur_eval_round_trip() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    small_dataset(&data);
    let run = t.path().join("run");
    let common = ["--data", p(&data), "--stages", "1", "--pyramid-L", "1", "--channels", "4", "--alpha", "0", "--patch", "16"];

    // An untrained checkpoint restores nothing: every output is its input frame.
    let ident = t.path().join("ident");
    ok(arvo(&[&["train", "--out", p(&ident), "--max-steps", "0"][..], &common[..]].concat()));
    let blur = data.join("clip000").join("blur");
    let n_frames = fs::read_dir(&blur).unwrap().count();
    let restored = t.path().join("restored");
    ok(arvo(&["deblur", "--ckpt", p(&ident.join("model.ckpt")), "--in", p(&blur), "--out", p(&restored)]));
    let outs = tree(&restored);
    assert_eq!(outs.len(), n_frames - 2);
    for (name, bytes) in &outs {
        assert_eq!(bytes, &fs::read(blur.join(name)).unwrap(), "{name}");
    }

    let o = ok(arvo(&[&["train", "--out", p(&run), "--max-steps", "3", "--seed", "5"][..], &common[..]].concat()));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pyramid_L=1"));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.is_file());
    let cfg = fs::read_to_string(run.join("model.ckpt.cfg")).unwrap();
    assert!(cfg.contains("stages=1") && cfg.contains("seed=5"), "{cfg}");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,epoch,l1,loss_G,loss_D,lr,wall_ms");
    assert_eq!(lines.len(), 4);

    let pred = t.path().join("pred");
    ok(arvo(&["deblur", "--ckpt", p(&ckpt), "--in", p(&blur), "--out", p(&pred), "--stages", "1"]));
    assert_eq!(tree(&pred).len(), n_frames - 2);
    assert_eq!(code(&arvo(&["deblur", "--ckpt", p(&ckpt), "--in", p(&blur), "--out", p(&pred), "--stages", "2"])), 2);

    let sharp = data.join("clip000").join("sharp");
    let report = t.path().join("report");
    ok(arvo(&["eval", "--pred", p(&pred), "--gt", p(&sharp), "--by-name", "--out", p(&report)]));
    let csv = fs::read_to_string(report.join("metrics.csv")).unwrap();
    let mean: Vec<f64> = csv.lines().last().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(mean.iter().all(|v| v.is_finite()), "{csv}");
    assert_eq!(code(&arvo(&["eval", "--pred", p(&pred), "--gt", p(&sharp)])), 2);
}

#[test]
fn short_clip_rejected() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    small_dataset(&data);
    let run = t.path().join("run");
    ok(arvo(&["train", "--data", p(&data), "--out", p(&run), "--stages", "2", "--pyramid-L", "1", "--channels", "4", "--alpha", "0", "--patch", "16", "--max-steps", "0"]));
    let short = t.path().join("short");
    fs::create_dir_all(&short).unwrap();
    for i in 0..4 {
        let name = format!("{i:05}.png");
        fs::copy(data.join("clip000").join("blur").join(&name), short.join(&name)).unwrap();
    }
    let o = arvo(&["deblur", "--ckpt", p(&run.join("model.ckpt")), "--in", p(&short), "--out", p(&t.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn identical_dirs_score_perfect_ssim() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    small_dataset(&data);
    let sharp = data.join("clip000").join("sharp");
    let o = ok(arvo(&["eval", "--pred", p(&sharp), "--gt", p(&sharp)]));
    let text = String::from_utf8(o.stdout).unwrap();
    let last = text.lines().last().unwrap();
    assert_eq!(last.split(',').nth(2).unwrap(), "1.000000");
    assert_eq!(last.split(',').nth(1).unwrap(), "inf");
    let fewer = t.path().join("fewer");
    fs::create_dir_all(&fewer).unwrap();
    fs::copy(sharp.join("00000.png"), fewer.join("00000.png")).unwrap();
    assert_eq!(code(&arvo(&["eval", "--pred", p(&fewer), "--gt", p(&sharp)])), 2);
}

#[test]
fn diverging_training_exits_with_numerical_code() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    small_dataset(&data);
    let o = arvo(&[
        "train", "--data", p(&data), "--out", p(&t.path().join("run")), "--stages", "1", "--pyramid-L", "1", "--channels",
        "4", "--alpha", "0", "--patch", "16", "--max-steps", "5", "--lr", "1e30",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
