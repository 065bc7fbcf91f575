//! The `compvid` command line.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 for usage
//! errors (bad flags, unreadable config, missing input paths).

pub mod figures;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use compvid::config::ModelConfig;
use compvid::container::{decode_kv, encode_kv};
use compvid::datagen::{generate_dataset, DatasetManifest, DatasetParams, VideoSequence, MANIFEST_FILE};
use compvid::evalkit::{evaluate, EvalOptions, FrameMetrics, DEFAULT_K};
use compvid::latent::{ChaChaNoise, NoiseSource};
use compvid::model::{LatentMode, Model, Outputs};
use compvid::training::{load_checkpoint, train_run, RunDir, TrainOptions};
use compvid::Error;

use figures::{frame_image, gray_image, grid, line_chart, overlay, save, upscale, Table, COLORS};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "compvid", version, about = "Compositional stochastic video prediction on toy block towers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a toy dataset (train/val/test splits plus manifest).
    Generate(GenerateArgs),
    /// Train a model and write checkpoints and a metrics log.
    Train(TrainArgs),
    /// Best-of-K evaluation with per-sequence and summary CSV reports.
    Eval(EvalArgs),
    /// Draw K futures of one sequence as frame grids and trajectory overlays.
    Sample(SampleArgs),
    /// Render one chart per column of a metrics or evaluation CSV.
    Plot(PlotArgs),
    /// Visualize the warped entity masks of a posterior-mean rollout.
    Masks(MasksArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub train: usize,
    #[arg(long, default_value_t = 2)]
    pub val: usize,
    #[arg(long, default_value_t = 2)]
    pub test: usize,
    /// Entity counts for the training split, cycled over sequences (e.g. `3` or `3,4`).
    #[arg(long, default_value = "3", value_delimiter = ',')]
    pub blocks: Vec<usize>,
    /// Entity counts for validation (defaults to --blocks).
    #[arg(long, value_delimiter = ',')]
    pub val_blocks: Option<Vec<usize>>,
    /// Entity counts for test (defaults to --blocks).
    #[arg(long, value_delimiter = ',')]
    pub test_blocks: Option<Vec<usize>>,
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    #[arg(long, default_value_t = 64)]
    pub canvas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability that a tower is unstable and falls.
    #[arg(long, default_value_t = 0.75)]
    pub p_unstable: f64,
    /// Frames a fall takes to complete.
    #[arg(long, default_value_t = 10)]
    pub fall_steps: usize,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory containing `manifest.txt`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory (config, checkpoints/, logs/, figures/, samples/).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[arg(long, default_value = FrameMetrics::BUILTIN)]
    pub metric: String,
    /// Evaluate locations only and skip decoding frames.
    #[arg(long)]
    pub no_frames: bool,
    /// Report directory (default: `eval/` in the checkpoint's run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A sequence file written by `generate`.
    #[arg(long)]
    pub seq: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Output directory (default: `samples/<sequence>` in the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MasksArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub seq: PathBuf,
    /// Output directory (default: `figures/` in the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Plot(a) => plot(a),
        Command::Masks(a) => masks(a),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Record the flags of a command next to its outputs.
fn write_record(dir: &Path, command: &str, pairs: Vec<(&str, String)>) -> Result<()> {
    let mut all = vec![("command", command.to_string())];
    all.extend(pairs);
    write_text(&dir.join(format!("run_{command}.txt")), &encode_kv(all))
}

/// Defaults, then the config file, then `--set` pairs, then dedicated flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    if let Some(path) = &args.config {
        require(path, "config file")?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let pairs = decode_kv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply(&pairs)?;
    }
    let mut pairs = BTreeMap::new();
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    for (k, v) in &pairs {
        cfg.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_manifest(data: &Path) -> Result<DatasetManifest> {
    let path = if data.is_dir() { data.join(MANIFEST_FILE) } else { data.to_path_buf() };
    require(&path, "dataset manifest")?;
    Ok(DatasetManifest::load(&path)?)
}

fn load_model(ckpt: &Path) -> Result<Model> {
    require(ckpt, "checkpoint")?;
    Ok(load_checkpoint(ckpt)?.0)
}

fn load_sequence(path: &Path) -> Result<VideoSequence> {
    require(path, "sequence file")?;
    Ok(VideoSequence::load(path)?)
}

/// The run directory a checkpoint lives in: the parent of `checkpoints/`, or the file's directory.
pub fn run_root(ckpt: &Path) -> PathBuf {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    match dir.file_name() {
        Some(n) if n == "checkpoints" => dir.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => dir.to_path_buf(),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let params = DatasetParams {
        n_train: a.train,
        n_val: a.val,
        n_test: a.test,
        base_seed: a.seed,
        horizon: a.horizon,
        canvas: a.canvas,
        train_blocks: a.blocks.clone(),
        val_blocks: a.val_blocks.unwrap_or_else(|| a.blocks.clone()),
        test_blocks: a.test_blocks.unwrap_or(a.blocks),
        p_unstable: a.p_unstable,
        fall_steps: a.fall_steps,
    };
    let manifest = generate_dataset(&a.out, &params).map_err(|e| match e {
        Error::Argument(m) | Error::Validation(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    println!("{}", manifest.manifest_path().display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let manifest = load_manifest(&a.data)?;
    if let Some(r) = &a.resume {
        require(r, "checkpoint")?;
    }
    let data = manifest.load_split("train")?;
    let run = RunDir::new(&a.out);
    let opts = TrainOptions {
        resume: a.resume.clone(),
        max_steps: a.max_steps,
    };
    let last = train_run(&cfg, data, &run, &opts)?;
    write_record(
        &a.out,
        "train",
        vec![
            ("data", a.data.display().to_string()),
            ("out", a.out.display().to_string()),
            ("resume", a.resume.map(|p| p.display().to_string()).unwrap_or_default()),
            ("max_steps", a.max_steps.map(|s| s.to_string()).unwrap_or_default()),
        ],
    )?;
    println!("{}", last.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let manifest = load_manifest(&a.data)?;
    let metrics = FrameMetrics::new();
    if !metrics.contains(&a.metric) {
        return Err(CliError::Usage(format!(
            "unknown frame metric `{}` (known: {})",
            a.metric,
            metrics.names().join(", ")
        )));
    }
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let seqs = manifest
        .load_split(&a.split)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let opts = EvalOptions {
        k: a.k,
        noise_seed: a.noise_seed,
        frames: !a.no_frames,
        metric: a.metric.clone(),
    };
    let out = a.out.clone().unwrap_or_else(|| run_root(&a.ckpt).join("eval"));
    let report = evaluate(&model, &seqs, &opts, &metrics)?;
    let summary = report.write(&out)?;
    write_text(&out.join("config.txt"), &model.config.to_text())?;
    write_record(
        &out,
        "eval",
        vec![
            ("ckpt", a.ckpt.display().to_string()),
            ("data", a.data.display().to_string()),
            ("split", a.split),
            ("k", a.k.to_string()),
            ("noise_seed", a.noise_seed.to_string()),
            ("metric", a.metric),
            ("frames", (!a.no_frames).to_string()),
        ],
    )?;
    println!("{}", summary.display());
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "sequence".into(), |s| s.to_string_lossy().into_owned())
}

fn sample(a: SampleArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let seq = load_sequence(&a.seq)?;
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| run_root(&a.ckpt).join("samples").join(stem(&a.seq)));
    let steps = seq.horizon();
    let mut noises: Vec<ChaChaNoise> = (0..a.k as u64).map(|i| ChaChaNoise::new(a.noise_seed, i)).collect();
    let refs: Vec<&mut dyn NoiseSource> = noises.iter_mut().map(|n| n as &mut dyn NoiseSource).collect();
    let roll = model.rollout(&seq, 0, steps, LatentMode::Prior(refs), Outputs::FRAMES)?;
    let frames = roll.frames.as_ref().expect("frames were requested");
    if frames.iter().any(|f| !f.all_finite()) {
        return Err(CliError::Runtime("sampled frames contain non-finite values".into()));
    }

    let truth: Vec<_> = (1..=steps).map(|t| frame_image(&seq.frame_chw(t))).collect();
    let mut rows = vec![truth];
    for f in frames {
        rows.push(
            (0..steps)
                .map(|t| frame_image(&f.narrow(0, t, 1).reshape([3, seq.height, seq.width])))
                .collect(),
        );
    }
    save(&grid(&rows), &out.join("grid.png"))?;

    let scale = (256 / seq.width.max(1)).max(1) as u32;
    let first = upscale(&frame_image(&seq.frame_chw(0)), scale);
    let gt_paths: Vec<_> = (0..seq.n_entities)
        .map(|n| ((0..=steps).map(|t| seq.center(t, n)).collect::<Vec<_>>(), image::Rgb([90, 90, 90])))
        .collect();
    let sample_paths = |k: usize| -> Vec<(Vec<[f64; 2]>, image::Rgb<u8>)> {
        (0..seq.n_entities)
            .map(|n| {
                let mut p = vec![seq.center(0, n)];
                p.extend(roll.centers[k].iter().map(|c| c[n]));
                (p, COLORS[n % COLORS.len()])
            })
            .collect()
    };
    let mut all = gt_paths.clone();
    let mut csv = String::from("sample,timestep,entity,x,y\n");
    for k in 0..a.k {
        let mut paths = gt_paths.clone();
        paths.extend(sample_paths(k));
        save(&overlay(&first, &paths, 3), &out.join(format!("overlay_{k:03}.png")))?;
        all.extend(sample_paths(k).into_iter().map(|(p, _)| (p, COLORS[k % COLORS.len()])));
        for (t, centers) in roll.centers[k].iter().enumerate() {
            for (n, c) in centers.iter().enumerate() {
                csv.push_str(&format!("{k},{},{n},{},{}\n", t + 1, c[0], c[1]));
            }
        }
    }
    save(&overlay(&first, &all, 2), &out.join("overlay_all.png"))?;
    write_text(&out.join("centers.csv"), &csv)?;
    write_record(
        &out,
        "sample",
        vec![
            ("ckpt", a.ckpt.display().to_string()),
            ("seq", a.seq.display().to_string()),
            ("k", a.k.to_string()),
            ("noise_seed", a.noise_seed.to_string()),
        ],
    )?;
    println!("{}", out.display());
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    require(&a.metrics, "metrics file")?;
    let text = std::fs::read_to_string(&a.metrics).map_err(|e| CliError::io(&a.metrics, e))?;
    let table = Table::parse(&text)?;
    let mut written = 0;
    for (i, name) in table.header.iter().enumerate().skip(1) {
        if name == "wall_time" {
            continue;
        }
        let series = table.series(i);
        if series.is_empty() {
            continue;
        }
        save(&line_chart(&series, COLORS[(i - 1) % COLORS.len()]), &a.out.join(format!("{name}.png")))?;
        written += 1;
    }
    println!("{written} figures in {}", a.out.display());
    Ok(())
}

fn masks(a: MasksArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let seq = load_sequence(&a.seq)?;
    let out = a.out.clone().unwrap_or_else(|| run_root(&a.ckpt).join("figures"));
    let steps = seq.horizon();
    let roll = model.rollout(&seq, 0, steps, LatentMode::PosteriorMean, Outputs::ALL)?;
    let Some(masks) = roll.masks.as_ref().map(|m| &m[0]) else {
        return Err(CliError::Runtime("this model does not produce entity masks".into()));
    };
    let s = masks.shape().to_vec();
    let (n, h, w) = (s[1], s[2], s[3]);
    let scale = (seq.width / w.max(1)).max(1) as u32;
    let frames = &roll.frames.as_ref().expect("frames were requested")[0];
    let mut rows = vec![(0..steps)
        .map(|t| frame_image(&frames.narrow(0, t, 1).reshape([3, seq.height, seq.width])))
        .collect::<Vec<_>>()];
    for e in 0..n {
        rows.push(
            (0..steps)
                .map(|t| {
                    let off = (t * n + e) * h * w;
                    upscale(&gray_image(&masks.data()[off..off + h * w], h, w), scale)
                })
                .collect(),
        );
    }
    let path = out.join(format!("masks_{}.png", stem(&a.seq)));
    save(&grid(&rows), &path)?;
    println!("{}", path.display());
    Ok(())
}
