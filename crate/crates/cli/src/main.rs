use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use arvo_core::corrvol::{correlation_volume, correlation_volume_naive};
use arvo_core::data::{
    self, downsize_area, frame_name, load_dataset, load_frame, make_toy_dataset, save_frame, synthesize_clip, windows,
    PairedClip, ToyConfig, VideoClip,
};
use arvo_core::flow::{AlignMode, LkParams};
use arvo_core::train::{
    config_path, csv_logger, deblur_windows, read_config, save_checkpoint, TrainConfig, Trainer,
};
use arvo_core::{Error, Graph, ParamStore, Tensor};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "arvo", version, about = "Multi-frame video deblurring with correlation volumes")]
struct Cli {
    /// File of `key=value` lines. Flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a blurry/sharp dataset from sharp clips or procedural toy videos.
    Synth(SynthArgs),
    /// Train a generator (and discriminator when alpha > 0).
    Train(TrainArgs),
    /// Restore every eligible frame of a blurry clip.
    Deblur(DeblurArgs),
    /// PSNR/SSIM of predicted frames against ground truth.
    Eval(EvalArgs),
    /// Time the correlation-volume kernel.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of sharp PNG frames, or of clip subdirectories holding them.
    #[arg(long, conflicts_with = "toy")]
    sharp_dir: Option<PathBuf>,
    /// Generate procedural toy clips instead of reading frames.
    #[arg(long)]
    toy: bool,
    /// Sharp frames averaged per blurry frame (odd).
    #[arg(long)]
    window: Option<usize>,
    /// Inclusive range of the spacing between blurry frames, `lo,hi`.
    #[arg(long)]
    n_range: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clips: Option<usize>,
    /// Sharp frames per toy clip.
    #[arg(long)]
    frames: Option<usize>,
    /// Toy frame size, `HxW`.
    #[arg(long)]
    size: Option<String>,
    /// Area-downsize blurry and sharp frames to `HxW` after blurring.
    #[arg(long)]
    downsize: Option<String>,
    /// Also write classical optical flow between neighbouring blurry frames.
    #[arg(long)]
    flows: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the metrics log and default checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long = "pyramid-L")]
    pyramid_l: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// off | classical | file
    #[arg(long)]
    align: Option<String>,
    #[arg(long)]
    use_volumes: Option<bool>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_halve_every: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Args)]
struct DeblurArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory of blurry PNG frames.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Must match the checkpoint when given.
    #[arg(long)]
    stages: Option<usize>,
    /// Flow files for `align=file` checkpoints.
    #[arg(long)]
    flow_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Directory for `metrics.csv`; the table goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pair frames by file name; `--gt` may then hold extra frames.
    #[arg(long)]
    by_name: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Feature map size `HxW`.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long = "pyramid-L")]
    pyramid_l: Option<usize>,
    /// naive | optimized
    #[arg(long = "impl")]
    implementation: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `bench.csv`; the table goes to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flag values keyed like the config file; `None` when not given.
type Flags = Vec<(&'static str, Option<String>)>;

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn set(v: bool) -> Option<String> {
    v.then(|| "true".to_string())
}

/// Defaults, then the config file, then flags. Unknown file keys are errors.
fn resolve(defaults: Vec<(String, String)>, file: &BTreeMap<String, String>, flags: Flags) -> anyhow::Result<BTreeMap<String, String>> {
    let mut map: BTreeMap<String, String> = defaults.into_iter().collect();
    for (k, v) in file {
        if !map.contains_key(k) {
            return Err(Error::Config(format!("unknown config key `{k}`")).into());
        }
        map.insert(k.clone(), v.clone());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    }
    Ok(map)
}

fn echo(command: &str, map: &BTreeMap<String, String>) {
    eprintln!("# arvo {command}");
    for (k, v) in map {
        eprintln!("{k}={v}");
    }
}

fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> &'a str {
    map.get(key).map(String::as_str).unwrap_or("")
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> anyhow::Result<T> {
    let v = get(map, key);
    v.trim().parse().map_err(|_| Error::Config(format!("invalid value `{v}` for {key}")).into())
}

fn required(map: &BTreeMap<String, String>, key: &str) -> anyhow::Result<PathBuf> {
    match get(map, key) {
        "" => Err(Error::Config(format!("missing required setting `{key}`")).into()),
        v => Ok(PathBuf::from(v)),
    }
}

fn parse_pair(key: &str, v: &str, sep: char) -> anyhow::Result<(usize, usize)> {
    let bad = || Error::Config(format!("`{key}` expects two integers separated by `{sep}`, got `{v}`"));
    let (a, b) = v.split_once(sep).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_numerical() => 3,
        Some(Error::Io(_)) | Some(Error::Image(_)) => 1,
        Some(_) => 2,
        None if e.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => read_config(p)?,
        None => BTreeMap::new(),
    };
    match cli.command {
        Command::Synth(a) => synth(a, &file),
        Command::Train(a) => train(a, &file),
        Command::Deblur(a) => deblur(a, &file),
        Command::Eval(a) => eval(a, &file),
        Command::Bench(a) => bench(a, &file),
    }
}

fn synth(a: SynthArgs, file: &BTreeMap<String, String>) -> anyhow::Result<()> {
    let toy_given = a.toy || file.get("toy").is_some_and(|v| v == "true");
    let (window, range) =
        if toy_given { (data::TOY_BLUR_WINDOW, data::TOY_N_RANGE) } else { (data::DEFAULT_BLUR_WINDOW, data::DEFAULT_N_RANGE) };
    let toy = ToyConfig::default();
    let defaults = vec![
        ("toy".into(), "false".into()),
        ("sharp_dir".into(), String::new()),
        ("window".into(), window.to_string()),
        ("n_range".into(), format!("{},{}", range.0, range.1)),
        ("out".into(), String::new()),
        ("seed".into(), "0".into()),
        ("clips".into(), toy.n_clips.to_string()),
        ("frames".into(), toy.frames_per_clip.to_string()),
        ("size".into(), format!("{}x{}", toy.height, toy.width)),
        ("downsize".into(), "none".into()),
        ("flows".into(), "false".into()),
    ];
    let flags: Flags = vec![
        ("toy", set(a.toy)),
        ("sharp_dir", path(&a.sharp_dir)),
        ("window", opt(&a.window)),
        ("n_range", a.n_range.clone()),
        ("out", path(&a.out)),
        ("seed", opt(&a.seed)),
        ("clips", opt(&a.clips)),
        ("frames", opt(&a.frames)),
        ("size", a.size.clone()),
        ("downsize", a.downsize.clone()),
        ("flows", set(a.flows)),
    ];
    let map = resolve(defaults, file, flags)?;
    echo("synth", &map);

    let window: usize = parse(&map, "window")?;
    if window % 2 == 0 {
        return Err(Error::Config(format!("window must be odd, got {window}")).into());
    }
    let n_range = parse_pair("n_range", get(&map, "n_range"), ',')?;
    let out = required(&map, "out")?;
    let seed: u64 = parse(&map, "seed")?;
    let downsize = match get(&map, "downsize") {
        "none" => None,
        v => Some(parse_pair("downsize", v, 'x')?),
    };

    let sharp: Vec<VideoClip> = if parse(&map, "toy")? {
        let (height, width) = parse_pair("size", get(&map, "size"), 'x')?;
        make_toy_dataset(&ToyConfig {
            n_clips: parse(&map, "clips")?,
            frames_per_clip: parse(&map, "frames")?,
            height,
            width,
            seed,
            speed: None,
        })?
    } else {
        match get(&map, "sharp_dir") {
            "" => return Err(Error::Config("either --toy or --sharp-dir is required".into()).into()),
            dir => read_sharp_clips(Path::new(dir))?,
        }
    };

    let lk = LkParams::default();
    let mut clips = Vec::with_capacity(sharp.len());
    for (i, clip) in sharp.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut paired = synthesize_clip(clip, window, n_range, &mut rng)?;
        if let Some((h, w)) = downsize {
            let shrink = |v: &[Tensor<f32>]| v.iter().map(|f| downsize_area(f, h, w)).collect::<arvo_core::Result<Vec<_>>>();
            paired.blurry = shrink(&paired.blurry)?;
            paired.sharp = shrink(&paired.sharp)?;
        }
        clips.push(paired);
    }
    data::write_dataset(&out, &clips)?;
    if parse(&map, "flows")? {
        for clip in &clips {
            data::write_clip_flows(&out.join(&clip.id).join("flow"), &clip.blurry, &lk)?;
        }
    }
    let pairs: usize = clips.iter().map(|c| c.blurry.len()).sum();
    println!("wrote {} clips, {pairs} blurry/sharp pairs to {}", clips.len(), out.display());
    Ok(())
}

/// One clip if `dir` holds PNGs itself, else one clip per subdirectory.
fn read_sharp_clips(dir: &Path) -> anyhow::Result<Vec<VideoClip>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()).into());
    }
    let id = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "clip".into());
    if !list_pngs(dir)?.is_empty() {
        return Ok(vec![VideoClip { id: id(dir), frames: data::load_frames(dir)?, fps_source: 0.0 }]);
    }
    let mut subdirs: Vec<PathBuf> =
        fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<Vec<_>>>()?;
    subdirs.retain(|p| p.is_dir());
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()).into());
    }
    subdirs
        .iter()
        .map(|d| Ok(VideoClip { id: id(d), frames: data::load_frames(d)?, fps_source: 0.0 }))
        .collect()
}

fn list_pngs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()).into());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    Ok(paths)
}

fn train(a: TrainArgs, file: &BTreeMap<String, String>) -> anyhow::Result<()> {
    let mut defaults = TrainConfig::default().to_pairs();
    defaults.extend([("data".into(), String::new()), ("out".into(), String::new()), ("ckpt_out".into(), String::new())]);
    let flags: Flags = vec![
        ("data", path(&a.data)),
        ("out", path(&a.out)),
        ("ckpt_out", path(&a.ckpt_out)),
        ("stages", opt(&a.stages)),
        ("pyramid_L", opt(&a.pyramid_l)),
        ("channels", opt(&a.channels)),
        ("align", a.align.clone()),
        ("use_volumes", opt(&a.use_volumes)),
        ("alpha", opt(&a.alpha)),
        ("lr", opt(&a.lr)),
        ("lr_halve_every", opt(&a.lr_halve_every)),
        ("epochs", opt(&a.epochs)),
        ("max_steps", opt(&a.max_steps)),
        ("patch", opt(&a.patch)),
        ("batch", opt(&a.batch)),
        ("seed", opt(&a.seed)),
        ("grad_clip", opt(&a.grad_clip)),
    ];
    let mut map = resolve(defaults, file, flags)?;
    let data_dir = required(&map, "data")?;
    let out = required(&map, "out")?;
    if get(&map, "ckpt_out").is_empty() {
        map.insert("ckpt_out".into(), out.join("model.ckpt").display().to_string());
    }
    echo("train", &map);
    let ckpt = PathBuf::from(get(&map, "ckpt_out"));
    let cfg = TrainConfig::from_map(&map)?;

    let clips = load_dataset(&data_dir)?;
    let file_flows = cfg.model.align == AlignMode::File;
    let mut train_windows = Vec::new();
    for clip in &clips {
        train_windows.extend(windows(clip, cfg.model.window_frames(), file_flows)?);
    }
    if train_windows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no clip in {} has the {} frames a window needs",
            data_dir.display(),
            cfg.model.window_frames()
        ))
        .into());
    }
    fs::create_dir_all(&out)?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let metrics = fs::File::create(out.join("metrics.csv"))?;
    let mut log = csv_logger(std::io::BufWriter::new(metrics))?;
    let mut trainer = Trainer::new(cfg)?;
    eprintln!("training on {} windows from {} clips", train_windows.len(), clips.len());
    trainer.fit(&train_windows, |t, m| log(t, m), |t| save_checkpoint(t, &ckpt))?;
    save_checkpoint(&trainer, &ckpt)?;
    println!("checkpoint {} after {} steps", ckpt.display(), trainer.step);
    Ok(())
}

fn deblur(a: DeblurArgs, file: &BTreeMap<String, String>) -> anyhow::Result<()> {
    let defaults = ["ckpt", "in", "out", "stages", "flow_dir"].map(|k| (k.to_string(), String::new())).to_vec();
    let flags: Flags = vec![
        ("ckpt", path(&a.ckpt)),
        ("in", path(&a.input)),
        ("out", path(&a.out)),
        ("stages", opt(&a.stages)),
        ("flow_dir", path(&a.flow_dir)),
    ];
    let map = resolve(defaults, file, flags)?;
    let ckpt = required(&map, "ckpt")?;
    let input = required(&map, "in")?;
    let out = required(&map, "out")?;
    let ckpt_cfg = read_config(&config_path(&ckpt))?;
    let cfg = TrainConfig::from_map(&ckpt_cfg)?;
    let mut echoed = map.clone();
    echoed.extend(cfg.model.to_pairs());
    echo("deblur", &echoed);
    if !get(&map, "stages").is_empty() {
        let stages: usize = parse(&map, "stages")?;
        if stages != cfg.model.stages {
            return Err(Error::Config(format!("--stages {stages} but the checkpoint was trained with {}", cfg.model.stages)).into());
        }
    }
    let gen = ParamStore::<f32>::load(&ckpt)?;
    let frames = data::load_frames(&input)?;
    let needed = cfg.model.window_frames();
    if frames.len() < needed {
        return Err(Error::InvalidArgument(format!(
            "{} holds {} frames; {} stages need at least {needed}",
            input.display(),
            frames.len(),
            cfg.model.stages
        ))
        .into());
    }
    let flow_dir = match get(&map, "flow_dir") {
        "" => input.parent().map(|p| p.join("flow")).filter(|d| d.is_dir()),
        d => Some(PathBuf::from(d)),
    };
    let clip = PairedClip { id: "input".into(), sharp: frames.clone(), blurry: frames, flow_dir };
    let wins = windows(&clip, needed, cfg.model.align == AlignMode::File)?;
    let restored = deblur_windows(&gen, &cfg.model, &cfg.lk, &wins)?;
    fs::create_dir_all(&out)?;
    for (w, r) in wins.iter().zip(&restored) {
        save_frame(&out.join(frame_name(w.center_index)), r)?;
    }
    println!("restored {} frames into {}", restored.len(), out.display());
    Ok(())
}

fn eval(a: EvalArgs, file: &BTreeMap<String, String>) -> anyhow::Result<()> {
    let defaults = vec![
        ("pred".into(), String::new()),
        ("gt".into(), String::new()),
        ("out".into(), String::new()),
        ("by_name".into(), "false".into()),
    ];
    let flags: Flags = vec![("pred", path(&a.pred)), ("gt", path(&a.gt)), ("out", path(&a.out)), ("by_name", set(a.by_name))];
    let map = resolve(defaults, file, flags)?;
    echo("eval", &map);
    let pred_dir = required(&map, "pred")?;
    let gt_dir = required(&map, "gt")?;
    let pred_paths = list_pngs(&pred_dir)?;
    let gt_paths = list_pngs(&gt_dir)?;
    if pred_paths.is_empty() {
        return Err(Error::NoFrames(pred_dir).into());
    }
    let gt_paths = if parse(&map, "by_name")? {
        pred_paths
            .iter()
            .map(|p| {
                let g = gt_dir.join(p.file_name().unwrap_or_default());
                if g.is_file() { Ok(g) } else { Err(Error::MissingFile(g)) }
            })
            .collect::<arvo_core::Result<Vec<_>>>()?
    } else if gt_paths.len() != pred_paths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted frames but {} ground-truth frames",
            pred_paths.len(),
            gt_paths.len()
        ))
        .into());
    } else {
        gt_paths
    };
    let ids: Vec<String> =
        pred_paths.iter().map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned()).collect();
    let load = |v: &[PathBuf]| v.iter().map(|p| load_frame(p)).collect::<arvo_core::Result<Vec<_>>>();
    let report = arvo_core::metrics::MetricReport::evaluate(&ids, &load(&pred_paths)?, &load(&gt_paths)?)?;
    match get(&map, "out") {
        "" => report.write_csv(std::io::stdout().lock())?,
        dir => {
            fs::create_dir_all(dir)?;
            report.write_csv(fs::File::create(Path::new(dir).join("metrics.csv"))?)?;
            println!("mean PSNR {:.4} dB, mean SSIM {:.4}", report.mean_psnr, report.mean_ssim);
        }
    }
    Ok(())
}

/// Largest difference the two kernels may show before timings are reported.
const BENCH_TOLERANCE: f64 = 1e-5;
const BENCH_HEADER: &str = "impl,height,width,channels,level,nbr_height,nbr_width,reps,mean_ms,max_abs_diff";

fn bench(a: BenchArgs, file: &BTreeMap<String, String>) -> anyhow::Result<()> {
    let defaults = vec![
        ("size".into(), "32x32".into()),
        ("channels".into(), "16".into()),
        ("pyramid_L".into(), "2".into()),
        ("impl".into(), "optimized".into()),
        ("reps".into(), "5".into()),
        ("seed".into(), "0".into()),
        ("out".into(), String::new()),
    ];
    let flags: Flags = vec![
        ("size", a.size.clone()),
        ("channels", opt(&a.channels)),
        ("pyramid_L", opt(&a.pyramid_l)),
        ("impl", a.implementation.clone()),
        ("reps", opt(&a.reps)),
        ("seed", opt(&a.seed)),
        ("out", path(&a.out)),
    ];
    let map = resolve(defaults, file, flags)?;
    echo("bench", &map);
    let (h, w) = parse_pair("size", get(&map, "size"), 'x')?;
    let c: usize = parse(&map, "channels")?;
    let l: usize = parse(&map, "pyramid_L")?;
    let reps: usize = parse(&map, "reps")?;
    let naive = match get(&map, "impl") {
        "naive" => true,
        "optimized" => false,
        other => return Err(Error::Config(format!("unknown impl `{other}` (naive|optimized)")).into()),
    };
    if reps == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Config("reps, channels and size must be positive".into()).into());
    }
    if h % (1 << l) != 0 || w % (1 << l) != 0 {
        return Err(Error::Config(format!("size {h}x{w} is not divisible by 2^{l}")).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(parse(&map, "seed")?);
    let f_ref = Tensor::<f64>::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
    let f_nbr = Tensor::<f64>::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
    let levels: Vec<usize> = if l == 0 { vec![0] } else { (1..=l).collect() };

    let mut rows = Vec::new();
    for k in levels {
        let pooled = pool(&f_nbr, k)?;
        let fast = correlation_volume(&f_ref, &pooled)?;
        let slow = correlation_volume_naive(&f_ref, &pooled)?;
        let diff = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !(diff <= BENCH_TOLERANCE) {
            return Err(Error::NonFinite(format!("level {k}: kernels differ by {diff:e}")).into());
        }
        let start = Instant::now();
        for _ in 0..reps {
            let v = if naive { correlation_volume_naive(&f_ref, &pooled)? } else { correlation_volume(&f_ref, &pooled)? };
            std::hint::black_box(v);
        }
        let mean_ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let s = pooled.shape();
        rows.push(format!("{},{h},{w},{c},{k},{},{},{reps},{mean_ms:.4},{diff:e}", get(&map, "impl"), s[1], s[2]));
    }
    let table: String = std::iter::once(BENCH_HEADER.to_string()).chain(rows).map(|r| r + "\n").collect();
    print!("{table}");
    let out = get(&map, "out");
    if !out.is_empty() {
        fs::create_dir_all(out)?;
        fs::File::create(Path::new(out).join("bench.csv"))?.write_all(table.as_bytes())?;
    }
    Ok(())
}

/// Max-pools `[c, h, w]` by `2^k`.
fn pool(x: &Tensor<f64>, k: usize) -> anyhow::Result<Tensor<f64>> {
    if k == 0 {
        return Ok(x.clone());
    }
    let s = x.shape().to_vec();
    let mut g = Graph::new();
    let v = g.constant(x.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let p = g.max_pool2d(v, 1 << k, 1 << k)?;
    let shape = g.shape(p)[1..].to_vec();
    g.value(p).clone().reshape(&shape).context("pooled shape")
}
