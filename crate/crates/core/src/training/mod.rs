//! Objective, optimizer loop, checkpoints and metrics log.

mod checkpoint;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainState, CHECKPOINT_FORMAT};
pub use loss::{compute_losses, graph_losses, total_loss, GraphLosses, LossReport, LossWeights};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config::ModelConfig;
use crate::datagen::{DatasetManifest, VideoSequence};
use crate::error::{Error, Result};
use crate::latent::ChaChaNoise;
use crate::model::{build_model, Clip, Model};
use crate::nn::Adam;

pub const METRICS_HEADER: &str = "step,l_pred_frame,l_pred_loc,l_dec,l_enc,total,wall_time";

const DATA_KEY: u64 = 0x0da7_a5ee_d000_0001;
const NOISE_KEY: u64 = 0x0015_e5ee_d000_0002;
const JITTER_KEY: u64 = 0x0717_75ee_d000_0003;

impl ModelConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_loc: self.lambda_loc,
            lambda_kl: self.lambda_kl,
        }
    }
}

/// Batches grouped by entity count, reshuffled every epoch from `(seed, epoch)`.
#[derive(Clone, Debug)]
struct BatchSchedule {
    buckets: Vec<Vec<usize>>,
    batch_size: usize,
    per_epoch: u64,
    seed: u64,
}

impl BatchSchedule {
    fn new(data: &[VideoSequence], batch_size: usize, seed: u64) -> Self {
        let mut by_n: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in data.iter().enumerate() {
            by_n.entry(s.n_entities).or_default().push(i);
        }
        let buckets: Vec<Vec<usize>> = by_n.into_values().collect();
        let per_epoch = buckets.iter().map(|b| b.len().div_ceil(batch_size) as u64).sum();
        BatchSchedule {
            buckets,
            batch_size,
            per_epoch,
            seed,
        }
    }

    fn batch(&self, step: u64) -> Vec<usize> {
        let (epoch, pos) = (step / self.per_epoch, step % self.per_epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ DATA_KEY);
        rng.set_stream(epoch);
        let mut batches = Vec::new();
        for bucket in &self.buckets {
            let mut idx = bucket.clone();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        batches.swap_remove(pos as usize)
    }
}

/// Single-threaded trainer. Step `s` draws its batch, start frames and latent
/// noise from `(config.seed, s)` alone, so runs and resumed runs are reproducible.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam<f32>,
    pub step: u64,
    pub weights: LossWeights,
    data: Vec<VideoSequence>,
    schedule: BatchSchedule,
}

impl Trainer {
    pub fn new(model: Model, data: Vec<VideoSequence>) -> Result<Self> {
        let state = TrainState::fresh(&model);
        Self::resume(model, state, data)
    }

    pub fn resume(model: Model, state: TrainState, data: Vec<VideoSequence>) -> Result<Self> {
        let cfg = &model.config;
        if data.is_empty() {
            return Err(Error::arg("training set is empty"));
        }
        if let Some(s) = data.iter().find(|s| s.n_frames <= cfg.horizon) {
            return Err(Error::arg(format!(
                "sequence seed {} has {} frames; horizon {} needs {}",
                s.meta.seed,
                s.n_frames,
                cfg.horizon,
                cfg.horizon + 1
            )));
        }
        if let Some(s) = data.iter().find(|s| s.height != cfg.canvas || s.width != cfg.canvas) {
            return Err(Error::arg(format!(
                "sequence is {}x{}, config canvas is {}",
                s.height, s.width, cfg.canvas
            )));
        }
        for s in &data {
            model.check_entities(s.n_entities)?;
        }
        let schedule = BatchSchedule::new(&data, cfg.batch_size, state.rng_seed);
        let mut adam = Adam::new(&model.params, cfg.learning_rate);
        adam.restore(state.adam_step, state.adam_m, state.adam_v)?;
        Ok(Trainer {
            weights: cfg.loss_weights(),
            model,
            adam,
            step: state.step,
            data,
            schedule,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState::from_adam(self.step, self.schedule.seed, &self.adam)
    }

    /// Sequence indices and start frames used at step `step`.
    pub fn batch_for_step(&self, step: u64) -> (Vec<usize>, Vec<usize>) {
        let idx = self.schedule.batch(step);
        let jitter = self.model.config.start_jitter;
        let mut rng = ChaCha8Rng::seed_from_u64(self.schedule.seed ^ JITTER_KEY);
        rng.set_stream(step);
        let starts = idx
            .iter()
            .map(|&i| {
                let room = self.data[i].n_frames - 1 - self.model.config.horizon;
                if jitter == 0 || room == 0 {
                    0
                } else {
                    rng.random_range(0..=jitter.min(room))
                }
            })
            .collect();
        (idx, starts)
    }

    /// One optimizer step; returns the batch-averaged losses before the update.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let (idx, starts) = self.batch_for_step(self.step);
        let seqs: Vec<&VideoSequence> = idx.iter().map(|&i| &self.data[i]).collect();
        let horizon = self.model.config.horizon;
        let clip = Clip::<f32>::new(&seqs, &starts, horizon)?;
        let mut noise = ChaChaNoise::new(self.schedule.seed ^ NOISE_KEY, self.step);

        let mut g = Graph::<f32>::new();
        let p = self.model.params.bind(&mut g, true);
        let pass = self.model.training_pass(&mut g, &p, &clip, &mut noise)?;
        let losses = graph_losses(&mut g, &pass, &clip, self.weights);

        let diagnose = |what: String| {
            let seeds: Vec<u64> = seqs.iter().map(|s| s.meta.seed).collect();
            Error::Numerical(format!(
                "step {}: {what}; batch sequence seeds {seeds:?}, start frames {starts:?}",
                self.step
            ))
        };
        let report = batch_report(&g, &pass, &clip, &seqs, &starts, self.weights).map_err(|e| diagnose(e.to_string()))?;
        let graph_total = g.value(losses.total).item();
        if !graph_total.is_finite() {
            return Err(diagnose(format!(
                "total loss is {graph_total} (frame {}, loc {}, dec {}, kl {})",
                report.l_pred_frame, report.l_pred_loc, report.l_dec, report.l_enc
            )));
        }
        let grads = g.backward(losses.total);
        self.adam.step(&mut self.model.params, &p, &grads);
        self.step += 1;
        Ok(report)
    }
}

/// Per-sample array losses from a training pass, averaged over the batch.
fn batch_report(
    g: &Graph<f32>,
    pass: &crate::model::TrainingPass,
    clip: &Clip<f32>,
    seqs: &[&VideoSequence],
    starts: &[usize],
    w: LossWeights,
) -> Result<LossReport> {
    let steps = clip.steps;
    let pred = g.value(pass.pred_frames);
    let dec = g.value(pass.dec_frames);
    let kl = g.value(pass.kl).to_f64_vec();
    let centers: Vec<Vec<f64>> = pass.pred_centers.iter().map(|&b| g.value(b).to_f64_vec()).collect();
    let n = clip.n_entities;
    let mut reports = Vec::with_capacity(clip.batch);
    for (b, (seq, &start)) in seqs.iter().zip(starts).enumerate() {
        let gt = seq.window(start, steps)?;
        let pc: Vec<Vec<[f64; 2]>> = centers
            .iter()
            .map(|c| (0..n).map(|i| [c[(b * n + i) * 2], c[(b * n + i) * 2 + 1]]).collect())
            .collect();
        reports.push(compute_losses(
            &pred.narrow(0, b * steps, steps),
            &pc,
            &gt,
            &dec.narrow(0, b * (steps + 1), steps + 1),
            kl[b],
            w,
        )?);
    }
    Ok(LossReport::mean(&reports, w))
}

/// Losses of `model` on each sequence from frame 0 with fixed noise, averaged.
pub fn dataset_loss(model: &Model, data: &[VideoSequence], noise_seed: u64) -> Result<LossReport> {
    let w = model.config.loss_weights();
    let horizon = model.config.horizon;
    let mut reports = Vec::with_capacity(data.len());
    for (i, seq) in data.iter().enumerate() {
        let clip = Clip::<f32>::new(&[seq], &[0], horizon)?;
        let mut g = Graph::<f32>::new();
        let p = model.params.bind(&mut g, false);
        let mut noise = ChaChaNoise::new(noise_seed, i as u64);
        let pass = model.training_pass(&mut g, &p, &clip, &mut noise)?;
        reports.push(batch_report(&g, &pass, &clip, &[seq], &[0], w)?);
    }
    Ok(LossReport::mean(&reports, w))
}

/// Options for [`train_run`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of fresh parameters.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation (default: run to `config.steps`).
    pub max_steps: Option<u64>,
}

/// Run directory layout shared by training, evaluation and sampling.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.ckpt")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn metrics(&self) -> PathBuf {
        self.logs().join("metrics.csv")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.logs(), self.figures(), self.samples()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

fn open_metrics(path: &Path) -> Result<File> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Train on `data`, writing config, metrics and checkpoints under `run`.
/// Returns the final checkpoint path.
pub fn train_run(config: &ModelConfig, data: Vec<VideoSequence>, run: &RunDir, opts: &TrainOptions) -> Result<PathBuf> {
    config.validate()?;
    run.create()?;
    let mut trainer = match &opts.resume {
        Some(ckpt) => {
            let (model, state) = load_checkpoint(ckpt)?;
            if model.config != *config {
                log::warn!("resuming with the checkpoint's config; command-line config ignored");
            }
            Trainer::resume(model, state, data)?
        }
        None => Trainer::new(build_model(config)?, data)?,
    };
    let cfg = trainer.model.config.clone();
    std::fs::write(run.config(), cfg.to_text()).map_err(|e| Error::io(run.config(), e))?;
    let metrics_path = run.metrics();
    let mut metrics = open_metrics(&metrics_path)?;
    let start = Instant::now();
    let total = cfg.steps as u64;
    let end = opts.max_steps.map_or(total, |m| (trainer.step + m).min(total));
    while trainer.step < end {
        let r = trainer.train_step()?;
        let step = trainer.step;
        writeln!(
            metrics,
            "{step},{},{},{},{},{},{:.3}",
            r.l_pred_frame,
            r.l_pred_loc,
            r.l_dec,
            r.l_enc,
            r.total,
            start.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(&metrics_path, e))?;
        if step == 1 || step % 50 == 0 {
            log::info!("step {step}: total {:.5} (loc {:.6}, frame {:.4})", r.total, r.l_pred_loc, r.l_pred_frame);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
            save_checkpoint(&run.checkpoints().join(format!("step_{step:06}.ckpt")), &trainer.model, &trainer.state())?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let path = run.final_checkpoint();
    save_checkpoint(&path, &trainer.model, &trainer.state())?;
    Ok(path)
}

/// Train on the manifest's train split.
pub fn train(config: &ModelConfig, manifest: &DatasetManifest, run: &RunDir) -> Result<PathBuf> {
    manifest.validate()?;
    train_run(config, manifest.load_split("train")?, run, &TrainOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_sequence;

    fn config(steps: usize) -> ModelConfig {
        ModelConfig {
            steps,
            checkpoint_every: 3,
            ..ModelConfig::small()
        }
    }

    fn data(cfg: &ModelConfig, n: u64) -> Vec<VideoSequence> {
        (0..n).map(|i| generate_sequence(40 + i, 3, cfg.horizon, cfg.canvas).unwrap()).collect()
    }

    fn snapshot(model: &Model) -> Vec<(String, Vec<f32>)> {
        model.params.iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let cfg = ModelConfig {
            learning_rate: 0.0,
            ..config(2)
        };
        let mut tr = Trainer::new(build_model(&cfg).unwrap(), data(&cfg, 2)).unwrap();
        let before = snapshot(&tr.model);
        tr.train_step().unwrap();
        tr.train_step().unwrap();
        assert_eq!(snapshot(&tr.model), before);
    }

    #[test]
    fn one_step_updates_every_module() {
        let cfg = config(1);
        let mut tr = Trainer::new(build_model(&cfg).unwrap(), data(&cfg, 2)).unwrap();
        let before = snapshot(&tr.model);
        let report = tr.train_step().unwrap();
        assert!(report.is_finite());
        let after = snapshot(&tr.model);
        for prefix in ["frontend.", "predictor.", "decoder.", "latent."] {
            let changed = before
                .iter()
                .zip(&after)
                .filter(|((n, _), _)| n.starts_with(prefix))
                .any(|((_, a), (_, b))| a != b);
            assert!(changed, "no parameter under {prefix} moved");
        }
        assert_eq!(tr.step, 1);
    }

    #[test]
    fn graph_and_array_losses_agree() {
        let cfg = config(1);
        let model = build_model(&cfg).unwrap();
        let seqs = data(&cfg, 2);
        let refs: Vec<&VideoSequence> = seqs.iter().collect();
        let clip = Clip::<f32>::new(&refs, &[0, 0], cfg.horizon).unwrap();
        let mut g = Graph::<f32>::new();
        let p = model.params.bind(&mut g, true);
        let pass = model.training_pass(&mut g, &p, &clip, &mut ChaChaNoise::new(3, 0)).unwrap();
        let w = cfg.loss_weights();
        let losses = graph_losses(&mut g, &pass, &clip, w);
        let report = batch_report(&g, &pass, &clip, &refs, &[0, 0], w).unwrap();
        let graph_total = g.value(losses.total).item() as f64;
        assert!(
            (graph_total - report.total).abs() <= 1e-4 * report.total.abs().max(1.0),
            "graph {graph_total} vs array {}",
            report.total
        );
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let cfg = ModelConfig {
            batch_size: 2,
            ..config(1)
        };
        let mut seqs = data(&cfg, 4);
        seqs.push(generate_sequence(99, 4, cfg.horizon, cfg.canvas).unwrap());
        let tr = Trainer::new(build_model(&cfg).unwrap(), seqs.clone()).unwrap();
        let per_epoch = tr.schedule.per_epoch;
        assert_eq!(per_epoch, 3);
        let mut seen: Vec<usize> = (0..per_epoch).flat_map(|s| tr.batch_for_step(s).0).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        for s in 0..6 {
            let (idx, starts) = tr.batch_for_step(s);
            let n = seqs[idx[0]].n_entities;
            assert!(idx.iter().all(|&i| seqs[i].n_entities == n));
            assert!(starts.iter().all(|&s| s == 0));
            assert_eq!(tr.batch_for_step(s).0, idx);
        }
    }

    #[test]
    fn run_writes_checkpoints_metrics_and_config() {
        let cfg = config(10);
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().join("run"));
        let last = train_run(&cfg, data(&cfg, 2), &run, &TrainOptions::default()).unwrap();
        assert_eq!(last, run.final_checkpoint());
        let metrics = std::fs::read_to_string(run.metrics()).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 11);
        assert!(lines[10].starts_with("10,"));
        for s in [3, 6, 9] {
            assert!(run.checkpoints().join(format!("step_{s:06}.ckpt")).exists());
        }
        assert_eq!(ModelConfig::from_text(&std::fs::read_to_string(run.config()).unwrap()).unwrap(), cfg);
        let (model, state) = load_checkpoint(&last).unwrap();
        assert_eq!(state.step, 10);
        assert_eq!(model.config, cfg);
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let cfg = config(6);
        let dir = tempfile::tempdir().unwrap();
        let full = RunDir::new(dir.path().join("a"));
        let again = RunDir::new(dir.path().join("b"));
        let split = RunDir::new(dir.path().join("c"));
        train_run(&cfg, data(&cfg, 3), &full, &TrainOptions::default()).unwrap();
        train_run(&cfg, data(&cfg, 3), &again, &TrainOptions::default()).unwrap();
        let bytes = |r: &RunDir| std::fs::read(r.final_checkpoint()).unwrap();
        assert_eq!(bytes(&full), bytes(&again));

        let half = TrainOptions {
            max_steps: Some(3),
            ..TrainOptions::default()
        };
        train_run(&cfg, data(&cfg, 3), &split, &half).unwrap();
        let resume = TrainOptions {
            resume: Some(split.checkpoints().join("step_000003.ckpt")),
            ..TrainOptions::default()
        };
        train_run(&cfg, data(&cfg, 3), &split, &resume).unwrap();
        assert_eq!(bytes(&split), bytes(&full));
        let rows = std::fs::read_to_string(split.metrics()).unwrap().lines().count();
        assert_eq!(rows, 7);
    }

    #[test]
    fn resume_rejects_unusable_data() {
        let cfg = config(1);
        let model = build_model(&cfg).unwrap();
        assert!(matches!(Trainer::new(model.clone(), Vec::new()), Err(Error::Argument(_))));
        let big = generate_sequence(1, 3, cfg.horizon, cfg.canvas * 2).unwrap();
        assert!(matches!(Trainer::new(model.clone(), vec![big]), Err(Error::Argument(_))));
        let short = generate_sequence(1, 3, cfg.horizon - 1, cfg.canvas).unwrap();
        assert!(matches!(Trainer::new(model, vec![short]), Err(Error::Argument(_))));
    }
}
