//! Location and frame metrics, best-of-K evaluation, and the nearest-neighbor baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::datagen::{DatasetManifest, VideoSequence};
use crate::error::{Error, Result};
use crate::latent::{ChaChaNoise, NoiseSource};
use crate::model::{LatentMode, Model, Outputs};
use crate::tensor::Tensor;

/// Number of best samples summarized by the top-5 statistics.
pub const TOP_N: usize = 5;

/// Default number of prior samples per sequence.
pub const DEFAULT_K: usize = 100;

pub const SEQUENCE_CSV_HEADER: &str = "timestep,loc_best,loc_mean,loc_sigma,frame_best,frame_mean,top5_mean,top5_sigma";

/// Mean over entities of the squared distance between predicted and true centers, per step.
pub fn location_error(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::arg(format!("{} predicted steps vs {} true steps", pred.len(), gt.len())));
    }
    pred.iter()
        .zip(gt)
        .enumerate()
        .map(|(t, (p, g))| {
            if p.len() != g.len() {
                return Err(Error::arg(format!("step {t}: {} predicted entities vs {} true", p.len(), g.len())));
            }
            if p.is_empty() {
                return Ok(0.0);
            }
            let sum: f64 = p
                .iter()
                .zip(g)
                .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
                .sum();
            Ok(sum / p.len() as f64)
        })
        .collect()
}

/// A frame distance over two equally sized `(3, H, W)` frames.
pub type FrameMetricFn = dyn Fn(&[f32], &[f32]) -> f64 + Send + Sync;

/// Named frame metrics. `l1` is built in; further metrics (a perceptual
/// distance, say) are registered under their own names.
pub struct FrameMetrics {
    plugins: BTreeMap<String, Box<FrameMetricFn>>,
}

impl Default for FrameMetrics {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameMetrics {
    pub const BUILTIN: &'static str = "l1";

    pub fn new() -> Self {
        FrameMetrics { plugins: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, metric: Box<FrameMetricFn>) -> Result<()> {
        if name == Self::BUILTIN || self.plugins.contains_key(name) {
            return Err(Error::arg(format!("frame metric `{name}` is already registered")));
        }
        self.plugins.insert(name.to_string(), metric);
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        std::iter::once(Self::BUILTIN.to_string())
            .chain(self.plugins.keys().cloned())
            .collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        name == Self::BUILTIN || self.plugins.contains_key(name)
    }

    /// Per-step error between `(T, 3, H, W)` frame stacks.
    pub fn frame_error(&self, pred: &Tensor<f32>, gt: &Tensor<f32>, name: &str) -> Result<Vec<f64>> {
        if pred.shape() != gt.shape() || pred.rank() != 4 {
            return Err(Error::arg(format!(
                "frame stacks must share a (T, C, H, W) shape, got {:?} and {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let plugin = match name {
            Self::BUILTIN => None,
            _ => Some(self.plugins.get(name).ok_or_else(|| {
                Error::arg(format!("unknown frame metric `{name}` (known: {})", self.names().join(", ")))
            })?),
        };
        let per: usize = pred.shape()[1..].iter().product();
        let errors: Vec<f64> = pred
            .data()
            .chunks(per.max(1))
            .zip(gt.data().chunks(per.max(1)))
            .take(pred.dim(0))
            .map(|(p, g)| match plugin {
                None => l1(p, g),
                Some(f) => f(p, g),
            })
            .collect();
        if let Some(t) = errors.iter().position(|e| !e.is_finite()) {
            return Err(Error::Numerical(format!("frame error at step {} is not finite", t + 1)));
        }
        Ok(errors)
    }
}

fn l1(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64
}

/// Mean absolute pixel difference per step.
pub fn frame_error(pred: &Tensor<f32>, gt: &Tensor<f32>, metric: &str) -> Result<Vec<f64>> {
    FrameMetrics::new().frame_error(pred, gt, metric)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Population standard deviation.
fn sigma(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

/// Per-step reductions of a `[k][t]` error table.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSummary {
    /// Minimum over samples at each step.
    pub best: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Sample with the lowest error averaged over steps (lowest index on ties).
    pub best_index: usize,
}

impl ErrorSummary {
    pub fn from_samples(per_sample: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = per_sample.first() else {
            return Err(Error::arg("need at least one sample"));
        };
        let steps = first.len();
        if per_sample.iter().any(|s| s.len() != steps) {
            return Err(Error::arg("samples have different lengths"));
        }
        let column = |t: usize| -> Vec<f64> { per_sample.iter().map(|s| s[t]).collect() };
        let mut best_index = 0;
        let mut best_mean = f64::INFINITY;
        for (i, s) in per_sample.iter().enumerate() {
            let m = mean(s);
            if m < best_mean {
                best_mean = m;
                best_index = i;
            }
        }
        Ok(ErrorSummary {
            best: (0..steps).map(|t| column(t).into_iter().fold(f64::INFINITY, f64::min)).collect(),
            mean: (0..steps).map(|t| mean(&column(t))).collect(),
            sigma: (0..steps).map(|t| sigma(&column(t))).collect(),
            best_index,
        })
    }
}

/// Indices of the `n` samples with the lowest step-averaged error, best first.
pub fn top_indices(per_sample: &[Vec<f64>], n: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = per_sample.iter().enumerate().map(|(i, s)| (mean(s), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(n).map(|(_, i)| i).collect()
}

/// Spread of final-step centers over samples: root of the per-coordinate
/// variance summed over x and y and averaged over entities.
pub fn trajectory_spread(centers: &[Vec<Vec<[f64; 2]>>]) -> f64 {
    let Some(last) = centers.first().and_then(|c| c.last()) else {
        return 0.0;
    };
    let n = last.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for e in 0..n {
        for d in 0..2 {
            let xs: Vec<f64> = centers.iter().map(|c| c.last().unwrap()[e][d]).collect();
            total += sigma(&xs).powi(2);
        }
    }
    (total / n as f64).sqrt()
}

/// Best-of-K evaluation settings.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub k: usize,
    /// Sample `i` draws from stream `i` of this seed, so a smaller `k` sees a prefix of a larger one.
    pub noise_seed: u64,
    /// Decode frames and report frame errors (locations are always evaluated).
    pub frames: bool,
    pub metric: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: DEFAULT_K,
            noise_seed: 0,
            frames: true,
            metric: FrameMetrics::BUILTIN.to_string(),
        }
    }
}

/// Everything recorded for one sequence.
#[derive(Clone, Debug)]
pub struct BestOfKResult {
    pub k: usize,
    pub location: ErrorSummary,
    pub frame: Option<ErrorSummary>,
    /// Per-step location error averaged over the top-5 samples, and its spread.
    pub top5_mean: Vec<f64>,
    pub top5_sigma: Vec<f64>,
    /// Location error of the posterior-mean rollout.
    pub mean_latent_location: Vec<f64>,
    pub mean_latent_frame: Option<Vec<f64>>,
    /// [`trajectory_spread`] over the K samples.
    pub final_spread: f64,
    /// `[k][t]` raw errors.
    pub sample_location: Vec<Vec<f64>>,
    pub sample_frame: Option<Vec<Vec<f64>>>,
    /// Sampled centers `[k][t][n]`.
    pub centers: Vec<Vec<Vec<[f64; 2]>>>,
}

impl BestOfKResult {
    pub fn steps(&self) -> usize {
        self.location.best.len()
    }

    pub fn is_finite(&self) -> bool {
        let mut all = self.location.best.iter().chain(&self.location.mean).chain(&self.location.sigma);
        let frames_ok = self
            .frame
            .as_ref()
            .is_none_or(|f| f.best.iter().chain(&f.mean).all(|v| v.is_finite()));
        all.all(|v| v.is_finite()) && frames_ok && self.mean_latent_location.iter().all(|v| v.is_finite())
    }

    /// One CSV row per step with the columns of [`SEQUENCE_CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SEQUENCE_CSV_HEADER}\n");
        for t in 0..self.steps() {
            let (fb, fm) = match &self.frame {
                Some(f) => (fmt(f.best[t]), fmt(f.mean[t])),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{fb},{fm},{},{}",
                t + 1,
                fmt(self.location.best[t]),
                fmt(self.location.mean[t]),
                fmt(self.location.sigma[t]),
                fmt(self.top5_mean[t]),
                fmt(self.top5_sigma[t]),
            );
        }
        out
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.9e}")
}

fn true_frames(seq: &VideoSequence, start: usize, steps: usize) -> Tensor<f32> {
    let frames: Vec<Tensor<f32>> = (1..=steps).map(|t| seq.frame_chw(start + t)).collect();
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    Tensor::concat(&refs, 0).reshape([steps, 3, seq.height, seq.width])
}

/// Draw `k` prior samples, roll each out over the whole sequence and score them.
pub fn best_of_k(model: &Model, seq: &VideoSequence, opts: &EvalOptions, metrics: &FrameMetrics) -> Result<BestOfKResult> {
    if opts.k == 0 {
        return Err(Error::arg("best-of-K needs k >= 1"));
    }
    if opts.frames && !metrics.contains(&opts.metric) {
        return Err(Error::arg(format!("unknown frame metric `{}`", opts.metric)));
    }
    let steps = seq.horizon();
    let outputs = if opts.frames { Outputs::FRAMES } else { Outputs::LOCATIONS };
    let gt_centers: Vec<Vec<[f64; 2]>> = (1..=steps).map(|t| seq.centers_at(t)).collect();
    let gt_frames = opts.frames.then(|| true_frames(seq, 0, steps));

    let mut noises: Vec<ChaChaNoise> = (0..opts.k as u64).map(|i| ChaChaNoise::new(opts.noise_seed, i)).collect();
    let refs: Vec<&mut dyn NoiseSource> = noises.iter_mut().map(|n| n as &mut dyn NoiseSource).collect();
    let sampled = model.rollout(seq, 0, steps, LatentMode::Prior(refs), outputs)?;
    let sample_location = sampled
        .centers
        .iter()
        .map(|c| location_error(c, &gt_centers))
        .collect::<Result<Vec<_>>>()?;
    if sample_location.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("sampled rollout produced non-finite locations".into()));
    }
    let sample_frame = match (&sampled.frames, &gt_frames) {
        (Some(frames), Some(gt)) => Some(
            frames
                .iter()
                .map(|f| metrics.frame_error(f, gt, &opts.metric))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };

    let location = ErrorSummary::from_samples(&sample_location)?;
    let frame = sample_frame.as_deref().map(ErrorSummary::from_samples).transpose()?;
    let top: Vec<Vec<f64>> = top_indices(&sample_location, TOP_N)
        .into_iter()
        .map(|i| sample_location[i].clone())
        .collect();
    let top_summary = ErrorSummary::from_samples(&top)?;

    let mean_run = model.rollout(seq, 0, steps, LatentMode::PosteriorMean, outputs)?;
    let mean_latent_location = location_error(&mean_run.centers[0], &gt_centers)?;
    let mean_latent_frame = match (&mean_run.frames, &gt_frames) {
        (Some(frames), Some(gt)) => Some(metrics.frame_error(&frames[0], gt, &opts.metric)?),
        _ => None,
    };

    Ok(BestOfKResult {
        k: opts.k,
        final_spread: trajectory_spread(&sampled.centers),
        location,
        frame,
        top5_mean: top_summary.mean,
        top5_sigma: top_summary.sigma,
        mean_latent_location,
        mean_latent_frame,
        sample_location,
        sample_frame,
        centers: sampled.centers,
    })
}

/// Results over a set of sequences.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub results: Vec<BestOfKResult>,
}

pub const SUMMARY_CSV_HEADER: &str =
    "timestep,loc_best,loc_mean,loc_sigma,frame_best,frame_mean,top5_mean,top5_sigma,loc_mean_latent,frame_mean_latent";

impl EvalReport {
    /// Per-step averages over sequences, then an `all` row averaged over steps.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_CSV_HEADER}\n");
        let Some(first) = self.results.first() else {
            return out;
        };
        let steps = first.steps();
        let avg = |f: &dyn Fn(&BestOfKResult) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = self.results.iter().map(f).collect();
            vals.map(|v| mean(&v))
        };
        let col = |t: usize| -> [Option<f64>; 9] {
            [
                avg(&|r| Some(r.location.best[t])),
                avg(&|r| Some(r.location.mean[t])),
                avg(&|r| Some(r.location.sigma[t])),
                avg(&|r| r.frame.as_ref().map(|f| f.best[t])),
                avg(&|r| r.frame.as_ref().map(|f| f.mean[t])),
                avg(&|r| Some(r.top5_mean[t])),
                avg(&|r| Some(r.top5_sigma[t])),
                avg(&|r| Some(r.mean_latent_location[t])),
                avg(&|r| r.mean_latent_frame.as_ref().map(|f| f[t])),
            ]
        };
        let cols: Vec<[Option<f64>; 9]> = (0..steps).map(col).collect();
        let render = |vals: &[Option<f64>]| -> String {
            vals.iter().map(|v| v.map(fmt).unwrap_or_default()).collect::<Vec<_>>().join(",")
        };
        for (t, c) in cols.iter().enumerate() {
            let _ = writeln!(out, "{},{}", t + 1, render(c));
        }
        let overall: Vec<Option<f64>> = (0..9)
            .map(|i| {
                let v: Option<Vec<f64>> = cols.iter().map(|c| c[i]).collect();
                v.map(|v| mean(&v))
            })
            .collect();
        let _ = writeln!(out, "all,{}", render(&overall));
        out
    }

    /// Writes `seq_XXXX.csv` per sequence and `summary.csv`; returns the summary path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, r) in self.results.iter().enumerate() {
            let path = dir.join(format!("seq_{i:04}.csv"));
            std::fs::write(&path, r.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("summary.csv");
        std::fs::write(&path, self.summary_csv()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Best-of-K over every sequence; sequence `i` uses noise seed `opts.noise_seed + i`.
pub fn evaluate(model: &Model, seqs: &[VideoSequence], opts: &EvalOptions, metrics: &FrameMetrics) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let o = EvalOptions {
            noise_seed: opts.noise_seed.wrapping_add(i as u64),
            ..opts.clone()
        };
        let r = best_of_k(model, seq, &o, metrics)?;
        if !r.is_finite() {
            return Err(Error::Numerical(format!("evaluation of sequence {i} produced non-finite errors")));
        }
        log::info!(
            "sequence {i}: best loc {:.5}, mean loc {:.5}",
            mean(&r.location.best),
            mean(&r.location.mean)
        );
        results.push(r);
    }
    Ok(EvalReport { results })
}

/// Mean-pooled background features of a `(3, H, W)` frame.
pub fn frame_feature(model: &Model, frame: &Tensor<f32>) -> Result<Vec<f64>> {
    let fm = model.frontend.encode_background(&model.params, frame)?;
    let c = fm.channels();
    let per = fm.tensor.len() / c.max(1);
    Ok(fm
        .tensor
        .data()
        .chunks(per.max(1))
        .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / per as f64)
        .collect())
}

/// Index of the training sequence whose first frame is nearest to `query` in feature space.
pub fn nearest_index(model: &Model, query: &Tensor<f32>, train: &[VideoSequence]) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::arg("nearest-neighbor retrieval needs a non-empty training set"));
    }
    let q = frame_feature(model, query)?;
    let mut best = (f64::INFINITY, 0);
    for (i, seq) in train.iter().enumerate() {
        let f = frame_feature(model, &seq.frame_chw(0))?;
        let d: f64 = q.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// Retrieve the training video whose initial frame best matches `query`.
pub fn nn_baseline(model: &Model, query: &Tensor<f32>, manifest: &DatasetManifest) -> Result<VideoSequence> {
    let train = manifest.load_split("train")?;
    let i = nearest_index(model, query, &train)?;
    Ok(train.into_iter().nth(i).expect("index within the training split"))
}
