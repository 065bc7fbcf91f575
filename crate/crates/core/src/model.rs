//! Model assembly: frontend, dynamics (graph predictor or the No-Factor
//! baseline), latent module and decoder, plus batched training and sampling
//! passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{Baseline, GraphKind, LatentScheme, ModelConfig};
use crate::datagen::VideoSequence;
use crate::decoder::{Decoded, Decoder};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::frontend::{Adjacency, Frontend};
use crate::latent::{kl_between_var, kl_standard_var, reparameterize, LatentModule, NoiseSource};
use crate::nn::{Bound, Linear, ParamStore};
use crate::predictor::{Predictor, StateVars};
use crate::tensor::Tensor;

/// Monolithic baseline: one global foreground feature, fully connected
/// dynamics over all boxes at once.
#[derive(Clone, Debug)]
pub struct NoFactorPredictor {
    pub hidden: Vec<Linear>,
    pub head_b: Linear,
    pub head_g: Linear,
    pub n_entities: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub slope: f64,
}

impl NoFactorPredictor {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let n = cfg.n_entities;
        let h = cfg.predictor_hidden;
        let d_in = cfg.appearance_dim + 2 * n + cfg.latent_dim;
        let hidden = (0..cfg.predictor_blocks)
            .map(|i| Linear::new(store, rng, &format!("no_factor.fc{i}"), if i == 0 { d_in } else { h }, h))
            .collect();
        NoFactorPredictor {
            hidden,
            head_b: Linear::with_gain(store, rng, "no_factor.head_b", h, 2 * n, 0.1),
            head_g: Linear::new(store, rng, "no_factor.head_g", h, cfg.appearance_dim),
            n_entities: n,
            latent_dim: cfg.latent_dim,
            feature_dim: cfg.appearance_dim,
            slope: cfg.leaky_slope,
        }
    }

    /// `state.a` holds the global feature as `(B, 1, A)`.
    pub fn step<T: Float>(&self, g: &mut Graph<T>, p: &Bound, state: StateVars, z: Var) -> Result<StateVars> {
        let s = g.shape(state.b).to_vec();
        let (batch, n) = (s[0], s[1]);
        if n != self.n_entities {
            return Err(Error::IncompatibleEntityCount {
                expected: self.n_entities,
                got: n,
            });
        }
        let gf = g.reshape(state.a, &[batch, self.feature_dim]);
        let bf = g.reshape(state.b, &[batch, 2 * n]);
        let mut h = g.concat(&[gf, bf, z], 1);
        for fc in &self.hidden {
            h = fc.forward(g, p, h);
            h = g.leaky_relu(h, self.slope);
        }
        let db = self.head_b.forward(g, p, h);
        let db = g.reshape(db, &[batch, n, 2]);
        let b = g.add(state.b, db);
        let a = self.head_g.forward(g, p, h);
        let a = g.reshape(a, &[batch, 1, self.feature_dim]);
        Ok(StateVars { b, a })
    }
}

#[derive(Clone, Debug)]
pub enum Dynamics {
    Graph(Predictor),
    NoFactor(NoFactorPredictor),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub frontend: Frontend,
    pub dynamics: Dynamics,
    pub decoder: Decoder,
    pub latent: LatentModule,
    pub params: ParamStore<f32>,
    /// User-supplied interaction graph (e.g. a skeleton); overrides `config.graph`.
    pub graph: Option<Adjacency>,
}

/// Parameter initialisation uses its own ChaCha8 stream of `config.seed`.
const INIT_STREAM: u64 = 7;

/// Build a model with freshly initialised parameters.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    let mut params = ParamStore::new();
    let frontend = Frontend::new(&mut params, &mut rng, config);
    let dynamics = match config.baseline {
        Baseline::NoFactor => Dynamics::NoFactor(NoFactorPredictor::new(&mut params, &mut rng, config)),
        Baseline::Ours | Baseline::NoEdge => Dynamics::Graph(Predictor::new(&mut params, &mut rng, config)),
    };
    let decoder = Decoder::new(&mut params, &mut rng, config);
    let latent = LatentModule::new(&mut params, &mut rng, config);
    Ok(Model {
        config: config.clone(),
        frontend,
        dynamics,
        decoder,
        latent,
        params,
        graph: None,
    })
}

/// Frames `start..=start + steps` of each sequence, as model inputs.
#[derive(Clone, Debug)]
pub struct Clip<T> {
    /// `(B * (T + 1), 3, H, W)`, sample-major.
    pub frames: Tensor<T>,
    /// Per frame, per entity centers, same order as `frames`.
    pub centers: Vec<Vec<[f64; 2]>>,
    pub batch: usize,
    pub steps: usize,
    pub n_entities: usize,
}

impl<T: Float> Clip<T> {
    pub fn new(seqs: &[&VideoSequence], starts: &[usize], steps: usize) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::arg("empty batch"))?;
        let (h, w, n) = (first.height, first.width, first.n_entities);
        let mut frames = Vec::with_capacity(seqs.len() * (steps + 1) * 3 * h * w);
        let mut centers = Vec::new();
        for (seq, &s) in seqs.iter().zip(starts) {
            if (seq.height, seq.width, seq.n_entities) != (h, w, n) {
                return Err(Error::arg("sequences in a batch must share size and entity count"));
            }
            if s + steps >= seq.n_frames {
                return Err(Error::arg(format!(
                    "sequence with {} frames cannot supply frames {s}..={}",
                    seq.n_frames,
                    s + steps
                )));
            }
            for t in s..=s + steps {
                frames.extend(seq.frame_chw::<T>(t).into_data());
                centers.push(seq.centers_at(t));
            }
        }
        Ok(Clip {
            frames: Tensor::new([seqs.len() * (steps + 1), 3, h, w], frames),
            centers,
            batch: seqs.len(),
            steps,
            n_entities: n,
        })
    }

    pub fn per_sample(&self) -> usize {
        self.steps + 1
    }

    /// Row index of frame `t` of sample `b`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.per_sample() + t
    }

    pub fn frames_at(&self, t: usize) -> Tensor<T> {
        let idx: Vec<usize> = (0..self.batch).map(|b| self.row(b, t)).collect();
        self.frames.index_select(0, &idx)
    }

    fn centers_tensor(&self, rows: &[usize]) -> Tensor<T> {
        let data: Vec<f64> = rows.iter().flat_map(|&r| self.centers[r].iter().flatten().copied()).collect();
        Tensor::from_f64([rows.len(), self.n_entities, 2], &data)
    }
}

/// Graph values produced by one training pass.
#[derive(Clone, Debug)]
pub struct TrainingPass {
    /// `(B * T, 3, H, W)` predicted frames `1..=T`, sample-major.
    pub pred_frames: Var,
    /// `(B * (T + 1), 3, H, W)` frames decoded from encoded ground truth.
    pub dec_frames: Var,
    /// Predicted locations `(B, N, 2)` for steps `1..=T`.
    pub pred_centers: Vec<Var>,
    /// Per-sample KL `(B)`.
    pub kl: Var,
    pub masks: Option<Var>,
}

/// Results of a batched inference rollout.
#[derive(Clone, Debug)]
pub struct Rollouts {
    /// `[k][t][n]` predicted centers for steps `1..=T`.
    pub centers: Vec<Vec<Vec<[f64; 2]>>>,
    /// `[k]` frames `(T, 3, H, W)` when decoding was requested.
    pub frames: Option<Vec<Tensor<f32>>>,
    /// `[k]` warped masks `(T, N, h, w)` when requested.
    pub masks: Option<Vec<Tensor<f32>>>,
}

/// What a rollout should produce besides locations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Outputs {
    pub frames: bool,
    pub masks: bool,
}

impl Outputs {
    pub const LOCATIONS: Outputs = Outputs { frames: false, masks: false };
    pub const FRAMES: Outputs = Outputs { frames: true, masks: false };
    pub const ALL: Outputs = Outputs { frames: true, masks: true };
}

/// How latents are chosen for a rollout.
pub enum LatentMode<'a> {
    /// Sample from the prior, one noise source per rollout.
    Prior(Vec<&'a mut dyn NoiseSource>),
    /// Posterior mean from the ground-truth frames (no noise).
    PosteriorMean,
}

const DECODE_CHUNK: usize = 32;

impl Model {
    pub fn n_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn adjacency(&self, n: usize) -> Result<Adjacency> {
        if let Some(adj) = &self.graph {
            if adj.len() != n {
                return Err(Error::arg(format!(
                    "custom graph has {} nodes, scene has {n} entities",
                    adj.len()
                )));
            }
            return Ok(adj.clone());
        }
        Ok(match self.config.effective_graph() {
            GraphKind::Full => Adjacency::full(n),
            GraphKind::SelfOnly => Adjacency::self_only(n),
        })
    }

    /// Entity representations for each listed frame: `(F, N, A)`, or `(F, 1, A)` for No-Factor.
    pub fn encode_frames<T: Float>(&self, g: &mut Graph<T>, p: &Bound, frames: &Tensor<T>, centers: &[Vec<[f64; 2]>]) -> Var {
        let f = frames.dim(0);
        match &self.dynamics {
            Dynamics::Graph(_) => {
                let n = centers.first().map_or(0, Vec::len);
                let frame_of: Vec<usize> = (0..f).flat_map(|i| std::iter::repeat_n(i, n)).collect();
                let flat: Vec<[f64; 2]> = centers.iter().flatten().copied().collect();
                let a = self.frontend.encode_crops(g, p, frames, &frame_of, &flat);
                g.reshape(a, &[f, n, self.config.appearance_dim])
            }
            Dynamics::NoFactor(_) => {
                let x = g.constant(frames.clone());
                let a = self.frontend.appearance.forward(g, p, x);
                g.reshape(a, &[f, 1, self.config.appearance_dim])
            }
        }
    }

    pub fn step<T: Float>(&self, g: &mut Graph<T>, p: &Bound, state: StateVars, z: Var, adj: &Adjacency) -> Result<StateVars> {
        match &self.dynamics {
            Dynamics::Graph(pred) => pred.step(g, p, state, z, adj),
            Dynamics::NoFactor(nf) => nf.step(g, p, state, z),
        }
    }

    /// Check that the dynamics can run on `n` entities.
    pub fn check_entities(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::arg("scene has no entities"));
        }
        match &self.dynamics {
            Dynamics::NoFactor(nf) if nf.n_entities != n => Err(Error::IncompatibleEntityCount {
                expected: nf.n_entities,
                got: n,
            }),
            _ => Ok(()),
        }
    }

    /// Decode frames from states; No-Factor places its global patch over the whole frame.
    pub fn decode_states<T: Float>(&self, g: &mut Graph<T>, p: &Bound, bg: Var, f0: Var, src: &[usize], b: Var, a: Var) -> Decoded {
        match &self.dynamics {
            Dynamics::Graph(_) => self.decoder.decode(g, p, bg, f0, src, b, a),
            Dynamics::NoFactor(_) => {
                let f = src.len();
                let size = self.decoder.fusion_size();
                let a_dim = g.shape(a)[2];
                let a = g.reshape(a, &[f, a_dim]);
                let (feats, masks) = self.decoder.entity.forward(g, p, a);
                let centers = g.constant(Tensor::full([f, 2], T::from_f64(0.5)));
                let wf = g.warp(feats, centers, size as f64, size, size, 1);
                let wm = g.warp(masks, centers, size as f64, size, size, 1);
                let bg_f = g.index_select(bg, 0, src);
                let composed = g.compose(bg_f, wf, wm);
                self.decoder.finish(g, p, composed, f0, src, Some(wm))
            }
        }
    }

    /// Encode, sample posterior latents, roll out and decode one training batch.
    pub fn training_pass<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        clip: &Clip<T>,
        noise: &mut dyn NoiseSource,
    ) -> Result<TrainingPass> {
        let (batch, steps) = (clip.batch, clip.steps);
        self.check_entities(clip.n_entities)?;
        let adj = self.adjacency(clip.n_entities)?;
        let all_rows: Vec<usize> = (0..batch * clip.per_sample()).collect();
        let a_all = self.encode_frames(g, p, &clip.frames, &clip.centers);
        let first_rows: Vec<usize> = (0..batch).map(|b| clip.row(b, 0)).collect();
        let a0 = g.index_select(a_all, 0, &first_rows);
        let b0 = g.constant(clip.centers_tensor(&first_rows));
        let f0 = g.constant(clip.frames_at(0));
        let bg = self.frontend.background_at_fusion(g, p, f0);

        let frames_var = g.constant(clip.frames.clone());
        let feats = self.latent.encoder.features(g, p, frames_var);
        let lat = self.latent.posterior_latents(g, p, feats, batch, steps, noise);

        let mut state = StateVars { b: b0, a: a0 };
        let mut states = Vec::with_capacity(steps);
        let mut kl_terms = Vec::new();
        for t in 0..steps {
            if self.latent.scheme == LatentScheme::Lp {
                let (mq, lq) = lat.posteriors[t];
                let (mp, lp) = self.latent.learned_prior(g, p, state.b, state.a).expect("lp prior");
                kl_terms.push(kl_between_var(g, mq, lq, mp, lp));
            }
            state = self.step(g, p, state, lat.zs[t], &adj)?;
            states.push(state);
        }
        if self.latent.scheme != LatentScheme::Lp {
            for &(mu, ls) in &lat.posteriors {
                kl_terms.push(kl_standard_var(g, mu, ls));
            }
        }
        let mut kl = match kl_terms.first() {
            Some(&k) => k,
            None => g.constant(Tensor::zeros([batch])),
        };
        for &k in kl_terms.iter().skip(1) {
            kl = g.add(kl, k);
        }

        let n_rep = g.shape(a0)[1];
        let a_dim = self.config.appearance_dim;
        let n = clip.n_entities;
        let (pb, pa) = if steps == 0 {
            (
                g.constant(Tensor::zeros([0, n, 2])),
                g.constant(Tensor::zeros([0, n_rep, a_dim])),
            )
        } else {
            let bs: Vec<Var> = states.iter().map(|s| s.b).collect();
            let as_: Vec<Var> = states.iter().map(|s| s.a).collect();
            let sb = g.stack(&bs, 1);
            let sa = g.stack(&as_, 1);
            (g.reshape(sb, &[batch * steps, n, 2]), g.reshape(sa, &[batch * steps, n_rep, a_dim]))
        };
        let gt_b = g.constant(clip.centers_tensor(&all_rows));
        let dec_b = g.concat(&[pb, gt_b], 0);
        let dec_a = g.concat(&[pa, a_all], 0);
        let mut src: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, steps)).collect();
        src.extend((0..batch).flat_map(|b| std::iter::repeat_n(b, steps + 1)));
        let decoded = self.decode_states(g, p, bg, f0, &src, dec_b, dec_a);
        let pred_frames = g.narrow(decoded.frames, 0, 0, batch * steps);
        let dec_frames = g.narrow(decoded.frames, 0, batch * steps, batch * (steps + 1));
        Ok(TrainingPass {
            pred_frames,
            dec_frames,
            pred_centers: states.iter().map(|s| s.b).collect(),
            kl,
            masks: decoded.masks,
        })
    }

    /// Roll out `K` futures of `seq` from frame `start`, batched over samples.
    pub fn rollout(
        &self,
        seq: &VideoSequence,
        start: usize,
        steps: usize,
        mode: LatentMode<'_>,
        outputs: Outputs,
    ) -> Result<Rollouts> {
        self.check_entities(seq.n_entities)?;
        let adj = self.adjacency(seq.n_entities)?;
        let clip = Clip::<f32>::new(&[seq], &[start], steps)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let l = self.latent.dim;
        let (k, mut noises) = match mode {
            LatentMode::Prior(v) => (v.len(), Some(v)),
            LatentMode::PosteriorMean => (1, None),
        };
        if k == 0 {
            return Err(Error::arg("rollout needs at least one sample"));
        }
        let a_first = self.encode_frames(&mut g, &p, &clip.frames_at(0), &clip.centers[..1]);
        let rep = vec![0usize; k];
        let a0 = g.index_select(a_first, 0, &rep);
        let b0 = g.constant(clip.centers_tensor(&rep));

        // latents for schemes that do not depend on the rollout state
        let scheme = self.latent.scheme;
        let mut zs: Vec<Var> = Vec::new();
        let mut mean_steps: Vec<Var> = Vec::new();
        match (&mut noises, scheme) {
            (Some(noises), s) if s.is_global() => {
                let data: Vec<f64> = noises.iter_mut().flat_map(|n| n.draw(l)).collect();
                let u = g.constant(Tensor::from_f64([k, l], &data));
                zs = self.latent.from_global(&mut g, &p, u, steps);
            }
            (Some(noises), LatentScheme::Fp) => {
                let draws: Vec<Vec<f64>> = noises.iter_mut().map(|n| (0..steps).flat_map(|_| n.draw(l)).collect()).collect();
                for t in 0..steps {
                    let data: Vec<f64> = draws.iter().flat_map(|d| d[t * l..(t + 1) * l].to_vec()).collect();
                    zs.push(g.constant(Tensor::from_f64([k, l], &data)));
                }
            }
            (Some(_), _) => {}
            (None, s) => {
                let frames = g.constant(clip.frames.clone());
                let feats = self.latent.encoder.features(&mut g, &p, frames);
                let pick = |g: &mut Graph<f32>, t: usize| g.narrow(feats, 0, t, 1);
                if s.is_global() {
                    let first = pick(&mut g, 0);
                    let last = pick(&mut g, steps);
                    let (mu, _) = self.latent.encoder.head(&mut g, &p, first, last);
                    zs = self.latent.from_global(&mut g, &p, mu, steps);
                } else {
                    for t in 1..=steps {
                        let prev = pick(&mut g, t - 1);
                        let cur = pick(&mut g, t);
                        mean_steps.push(self.latent.encoder.head(&mut g, &p, prev, cur).0);
                    }
                    zs = mean_steps.clone();
                }
            }
        }

        let mut state = StateVars { b: b0, a: a0 };
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let z = if scheme == LatentScheme::Lp && noises.is_some() {
                let (mu, ls) = self.latent.learned_prior(&mut g, &p, state.b, state.a).expect("lp prior");
                let eps = match &mut noises {
                    Some(ns) => {
                        let data: Vec<f64> = ns.iter_mut().flat_map(|n| n.draw(l)).collect();
                        Tensor::from_f64([k, l], &data)
                    }
                    None => unreachable!(),
                };
                reparameterize(&mut g, mu, ls, eps)
            } else {
                zs[t]
            };
            state = self.step(&mut g, &p, state, z, &adj)?;
            states.push(state);
        }
        let n = seq.n_entities;
        let mut centers = vec![Vec::with_capacity(steps); k];
        for s in &states {
            let v = g.value(s.b).to_f64_vec();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical("rollout produced non-finite locations".into()));
            }
            for (ki, c) in centers.iter_mut().enumerate() {
                c.push((0..n).map(|i| [v[(ki * n + i) * 2], v[(ki * n + i) * 2 + 1]]).collect());
            }
        }
        let decode = outputs.frames || outputs.masks;
        if !decode || steps == 0 {
            return Ok(Rollouts {
                centers,
                frames: outputs.frames.then(|| vec![Tensor::zeros([0, 3, seq.height, seq.width]); k]),
                masks: None,
            });
        }
        // decode in chunks on fresh graphs to bound memory
        let n_rep = g.shape(a0)[1];
        let a_dim = self.config.appearance_dim;
        let all_b: Vec<f32> = states.iter().flat_map(|s| g.value(s.b).data().to_vec()).collect();
        let all_a: Vec<f32> = states.iter().flat_map(|s| g.value(s.a).data().to_vec()).collect();
        // rows are step-major: row = t * k + ki
        let f0 = clip.frames_at(0);
        let mut frames = vec![Vec::<f32>::new(); k];
        let mut masks = vec![Vec::<f32>::new(); k];
        let mut mask_hw = (0, 0);
        let total = steps * k;
        let mut row = 0;
        while row < total {
            let len = DECODE_CHUNK.min(total - row);
            let mut g = Graph::<f32>::new();
            let p = self.params.bind(&mut g, false);
            let b = g.constant(Tensor::new([len, n, 2], all_b[row * n * 2..(row + len) * n * 2].to_vec()));
            let a = g.constant(Tensor::new(
                [len, n_rep, a_dim],
                all_a[row * n_rep * a_dim..(row + len) * n_rep * a_dim].to_vec(),
            ));
            let f0v = g.constant(f0.clone());
            let bg = self.frontend.background_at_fusion(&mut g, &p, f0v);
            let out = self.decode_states(&mut g, &p, bg, f0v, &vec![0; len], b, a);
            let vals = g.value(out.frames).data();
            let per = 3 * seq.height * seq.width;
            for r in 0..len {
                let ki = (row + r) % k;
                frames[ki].extend_from_slice(&vals[r * per..(r + 1) * per]);
            }
            if outputs.masks {
                if let Some(m) = out.masks {
                    let ms = g.shape(m).to_vec();
                    mask_hw = (ms[3], ms[4]);
                    let per = ms[1] * ms[3] * ms[4];
                    let vals = g.value(m).data();
                    for r in 0..len {
                        masks[(row + r) % k].extend_from_slice(&vals[r * per..(r + 1) * per]);
                    }
                }
            }
            row += len;
        }
        let (mh, mw) = mask_hw;
        let n_masks = if outputs.masks && mh > 0 { masks[0].len() / (steps * mh * mw) } else { 0 };
        Ok(Rollouts {
            centers,
            frames: outputs.frames.then(|| {
                frames
                    .into_iter()
                    .map(|d| Tensor::new([steps, 3, seq.height, seq.width], d))
                    .collect()
            }),
            masks: (outputs.masks && mh > 0).then(|| {
                masks
                    .into_iter()
                    .map(|d| Tensor::new([steps, n_masks, mh, mw], d))
                    .collect()
            }),
        })
    }

    /// Reconstruct frames `0..=T` from the encoded ground truth (the auto-encoding path).
    pub fn reconstruct(&self, seq: &VideoSequence) -> Result<Tensor<f32>> {
        let steps = seq.n_frames - 1;
        let clip = Clip::<f32>::new(&[seq], &[0], steps)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let a = self.encode_frames(&mut g, &p, &clip.frames, &clip.centers);
        let rows: Vec<usize> = (0..=steps).collect();
        let b = g.constant(clip.centers_tensor(&rows));
        let f0 = g.constant(clip.frames_at(0));
        let bg = self.frontend.background_at_fusion(&mut g, &p, f0);
        let out = self.decode_states(&mut g, &p, bg, f0, &vec![0; steps + 1], b, a);
        Ok(g.value(out.frames).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FusionLevel;
    use crate::datagen::generate_sequence;
    use crate::latent::{ChaChaNoise, CountingNoise, ZeroNoise};

    fn seq(seed: u64, n: usize, cfg: &ModelConfig) -> VideoSequence {
        generate_sequence(seed, n, cfg.horizon, cfg.canvas).unwrap()
    }

    fn sample_rollout(model: &Model, s: &VideoSequence, seeds: &[u64], outputs: Outputs) -> Rollouts {
        let mut noises: Vec<ChaChaNoise> = seeds.iter().map(|&k| ChaChaNoise::new(1, k)).collect();
        let refs: Vec<&mut dyn NoiseSource> = noises.iter_mut().map(|n| n as &mut dyn NoiseSource).collect();
        model.rollout(s, 0, s.horizon(), LatentMode::Prior(refs), outputs).unwrap()
    }

    #[test]
    fn training_pass_shapes_for_every_variant() {
        let base = ModelConfig::small();
        let seqs = [seq(1, 3, &base), seq(2, 3, &base)];
        let refs: Vec<&VideoSequence> = seqs.iter().collect();
        let mut variants = Vec::new();
        for fusion in FusionLevel::ALL {
            variants.push(ModelConfig { fusion: *fusion, ..base.clone() });
        }
        for scheme in LatentScheme::ALL {
            variants.push(ModelConfig { latent_scheme: *scheme, ..base.clone() });
        }
        for baseline in Baseline::ALL {
            variants.push(ModelConfig { baseline: *baseline, ..base.clone() });
        }
        for cfg in variants {
            let model = build_model(&cfg).unwrap();
            let clip = Clip::<f32>::new(&refs, &[0, 0], cfg.horizon).unwrap();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let out = model.training_pass(&mut g, &p, &clip, &mut ChaChaNoise::new(0, 0)).unwrap();
            assert_eq!(g.shape(out.pred_frames), &[2 * cfg.horizon, 3, 32, 32]);
            assert_eq!(g.shape(out.dec_frames), &[2 * (cfg.horizon + 1), 3, 32, 32]);
            assert_eq!(out.pred_centers.len(), cfg.horizon);
            assert_eq!(g.shape(out.kl), &[2]);
            assert!(g.value(out.pred_frames).all_finite());
        }
    }

    #[test]
    fn variable_entity_counts_for_factorized_model() {
        let cfg = ModelConfig::small();
        let model = build_model(&cfg).unwrap();
        for n in 3..=6 {
            let s = seq(10 + n as u64, n, &cfg);
            let r = sample_rollout(&model, &s, &[0, 1], Outputs::FRAMES);
            assert_eq!(r.centers.len(), 2);
            assert_eq!(r.centers[0].len(), cfg.horizon);
            assert_eq!(r.centers[0][0].len(), n);
            assert_eq!(r.frames.unwrap()[1].shape(), &[cfg.horizon, 3, 32, 32]);
        }
    }

    #[test]
    fn no_factor_rejects_other_entity_counts() {
        let cfg = ModelConfig {
            baseline: Baseline::NoFactor,
            ..ModelConfig::small()
        };
        let model = build_model(&cfg).unwrap();
        let s = seq(3, 4, &cfg);
        let err = model
            .rollout(&s, 0, 2, LatentMode::PosteriorMean, Outputs::LOCATIONS)
            .unwrap_err();
        assert!(matches!(err, Error::IncompatibleEntityCount { expected: 3, got: 4 }));
        let ok = seq(3, 3, &cfg);
        assert!(model.rollout(&ok, 0, 2, LatentMode::PosteriorMean, Outputs::FRAMES).is_ok());
    }

    #[test]
    fn no_edge_trajectories_ignore_other_entities() {
        let cfg = ModelConfig {
            baseline: Baseline::NoEdge,
            ..ModelConfig::small()
        };
        let model = build_model(&cfg).unwrap();
        let s = seq(4, 3, &cfg);
        let mut moved = s.clone();
        // shift entity 2 in the first frame's annotation only
        let c = moved.center(0, 2);
        moved.centers[4] = (c[0] + 0.1) as f32;
        let r1 = sample_rollout(&model, &s, &[5], Outputs::LOCATIONS);
        let r2 = sample_rollout(&model, &moved, &[5], Outputs::LOCATIONS);
        for t in 0..cfg.horizon {
            for i in 0..2 {
                for d in 0..2 {
                    assert!((r1.centers[0][t][i][d] - r2.centers[0][t][i][d]).abs() < 1e-6);
                }
            }
        }
        assert!((r1.centers[0][0][2][0] - r2.centers[0][0][2][0]).abs() > 1e-3);
    }

    #[test]
    fn noise_draw_counts_per_scheme() {
        for (scheme, per_rollout) in [
            (LatentScheme::Ours, 1),
            (LatentScheme::NoZ, 1),
            (LatentScheme::Fp, 3),
            (LatentScheme::Lp, 3),
        ] {
            let cfg = ModelConfig {
                latent_scheme: scheme,
                ..ModelConfig::small()
            };
            let model = build_model(&cfg).unwrap();
            let s = seq(6, 3, &cfg);
            let mut a = CountingNoise::new(ChaChaNoise::new(0, 0));
            let mut b = CountingNoise::new(ZeroNoise);
            model
                .rollout(&s, 0, 3, LatentMode::Prior(vec![&mut a, &mut b]), Outputs::LOCATIONS)
                .unwrap();
            assert_eq!(a.draws, per_rollout, "{scheme}");
            assert_eq!(b.draws, per_rollout, "{scheme}");
        }
    }

    #[test]
    fn rollout_is_deterministic_and_batch_independent() {
        let cfg = ModelConfig::small();
        let model = build_model(&cfg).unwrap();
        let s = seq(7, 3, &cfg);
        let one = sample_rollout(&model, &s, &[3], Outputs::FRAMES);
        let many = sample_rollout(&model, &s, &[0, 3, 9], Outputs::FRAMES);
        for t in 0..cfg.horizon {
            for n in 0..3 {
                for d in 0..2 {
                    assert!((one.centers[0][t][n][d] - many.centers[1][t][n][d]).abs() < 1e-5);
                }
            }
        }
        let f1 = &one.frames.unwrap()[0];
        let f2 = &many.frames.unwrap()[1];
        let diff = f1.zip_map(f2, |a, b| (a - b).abs()).data().iter().cloned().fold(0.0f32, f32::max);
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn masks_and_reconstruction() {
        let cfg = ModelConfig::small();
        let model = build_model(&cfg).unwrap();
        let s = seq(9, 4, &cfg);
        let r = model.rollout(&s, 0, 2, LatentMode::PosteriorMean, Outputs::ALL).unwrap();
        let m = &r.masks.unwrap()[0];
        assert_eq!(m.shape(), &[2, 4, 32, 32]);
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let rec = model.reconstruct(&s).unwrap();
        assert_eq!(rec.shape(), &[s.n_frames, 3, 32, 32]);
    }

    #[test]
    fn custom_graph_size_is_checked() {
        let mut model = build_model(&ModelConfig::small()).unwrap();
        model.graph = Some(Adjacency::from_edges(2, &[(0, 1)]).unwrap());
        assert!(model.adjacency(3).is_err());
        assert!(model.adjacency(2).is_ok());
    }
}
