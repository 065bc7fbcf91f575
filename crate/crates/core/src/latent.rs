//! Global latent `u`, its posterior, the recurrent per-step latents and the
//! per-step baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::config::{LatentScheme, ModelConfig};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{Bound, Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Source of standard-normal vectors. One call is one draw.
pub trait NoiseSource {
    fn draw(&mut self, dim: usize) -> Vec<f64>;
}

/// Standard normals from a ChaCha8 stream.
#[derive(Clone, Debug)]
pub struct ChaChaNoise {
    rng: ChaCha8Rng,
}

impl ChaChaNoise {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        ChaChaNoise { rng }
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        ChaChaNoise { rng }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

impl NoiseSource for ChaChaNoise {
    fn draw(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }
}

/// Always zero: the mean-latent rollout.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&mut self, dim: usize) -> Vec<f64> {
        vec![0.0; dim]
    }
}

/// Wraps another source and counts draws.
#[derive(Clone, Debug)]
pub struct CountingNoise<S> {
    pub inner: S,
    pub draws: usize,
}

impl<S> CountingNoise<S> {
    pub fn new(inner: S) -> Self {
        CountingNoise { inner, draws: 0 }
    }
}

impl<S: NoiseSource> NoiseSource for CountingNoise<S> {
    fn draw(&mut self, dim: usize) -> Vec<f64> {
        self.draws += 1;
        self.inner.draw(dim)
    }
}

/// Diagonal Gaussian with `sigma > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn standard(dim: usize) -> Self {
        GaussianParams {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `u = mu + sigma * noise`.
    pub fn sample(&self, noise: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(x)
            .map(|((m, s), v)| -0.5 * ((v - m) / s).powi(2) - s.ln() - 0.5 * ln2pi)
            .sum()
    }
}

/// `KL(q || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_to_standard(q: &GaussianParams) -> f64 {
    q.mu
        .iter()
        .zip(&q.sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum()
}

/// `KL(q || p)` for diagonal Gaussians.
pub fn kl_between(q: &GaussianParams, p: &GaussianParams) -> f64 {
    q.mu
        .iter()
        .zip(&q.sigma)
        .zip(p.mu.iter().zip(&p.sigma))
        .map(|((mq, sq), (mp, sp))| (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5)
        .sum()
}

/// Per-sample KL to the standard normal from `(B, L)` mean and log-sigma; returns `(B)`.
pub fn kl_standard_var<T: Float>(g: &mut Graph<T>, mu: Var, log_sigma: Var) -> Var {
    let mu2 = g.sqr(mu);
    let two_ls = g.scale(log_sigma, 2.0);
    let var = g.exp(two_ls);
    let a = g.add(mu2, var);
    let b = g.sub(a, two_ls);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_axis(c, 1);
    g.scale(s, 0.5)
}

/// Per-sample `KL(q || p)` for `(B, L)` parameters; returns `(B)`.
pub fn kl_between_var<T: Float>(g: &mut Graph<T>, mu_q: Var, ls_q: Var, mu_p: Var, ls_p: Var) -> Var {
    let d_ls = g.sub(ls_p, ls_q);
    let two_q = g.scale(ls_q, 2.0);
    let var_q = g.exp(two_q);
    let dm = g.sub(mu_q, mu_p);
    let dm2 = g.sqr(dm);
    let num = g.add(var_q, dm2);
    let neg_two_p = g.scale(ls_p, -2.0);
    let inv_var_p = g.exp(neg_two_p);
    let ratio = g.mul(num, inv_var_p);
    let half = g.scale(ratio, 0.5);
    let t = g.add(d_ls, half);
    let t = g.add_scalar(t, -0.5);
    g.sum_axis(t, 1)
}

/// `mu + exp(log_sigma) * eps` with a constant `eps`.
pub fn reparameterize<T: Float>(g: &mut Graph<T>, mu: Var, log_sigma: Var, eps: Tensor<T>) -> Var {
    let sigma = g.exp(log_sigma);
    let e = g.constant(eps);
    let scaled = g.mul(sigma, e);
    g.add(mu, scaled)
}

/// Draws `batch` vectors from `noise`, stacked as `(batch, dim)`.
pub fn noise_tensor<T: Float>(noise: &mut dyn NoiseSource, batch: usize, dim: usize) -> Tensor<T> {
    let data: Vec<f64> = (0..batch).flat_map(|_| noise.draw(dim)).collect();
    Tensor::from_f64([batch, dim], &data)
}

/// Shared per-frame conv encoder plus one affine layer on a frame pair.
#[derive(Clone, Debug)]
pub struct PosteriorEncoder {
    pub convs: Vec<Conv2d>,
    pub head: Linear,
    pub flat: usize,
    pub dim: usize,
    pub canvas: usize,
    pub slope: f64,
}

impl PosteriorEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let widths = [3, 16, 16, 8];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::down3(store, rng, &format!("latent.encoder.conv{i}"), w[0], w[1]))
            .collect();
        let side = cfg.canvas / 8;
        let flat = 8 * side * side;
        let head = Linear::with_gain(store, rng, "latent.encoder.head", 2 * flat, 2 * cfg.latent_dim, 0.5);
        PosteriorEncoder {
            convs,
            head,
            flat,
            dim: cfg.latent_dim,
            canvas: cfg.canvas,
            slope: cfg.leaky_slope,
        }
    }

    /// `(F, 3, H, W)` to `(F, flat)`.
    pub fn features<T: Float>(&self, g: &mut Graph<T>, p: &Bound, frames: Var) -> Var {
        let mut x = frames;
        for conv in &self.convs {
            x = conv.forward(g, p, x);
            x = g.leaky_relu(x, self.slope);
        }
        let f = g.shape(x)[0];
        g.reshape(x, &[f, self.flat])
    }

    /// Mean and log-sigma `(B, L)` from paired `(B, flat)` features.
    pub fn head<T: Float>(&self, g: &mut Graph<T>, p: &Bound, first: Var, last: Var) -> (Var, Var) {
        let cat = g.concat(&[first, last], 1);
        let out = self.head.forward(g, p, cat);
        (g.narrow(out, 1, 0, self.dim), g.narrow(out, 1, self.dim, self.dim))
    }
}

/// One-layer LSTM with a learned constant input.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub recurrent: ParamId,
    pub token: ParamId,
    pub dim: usize,
}

impl LstmCell {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let input = Linear::new(store, rng, "latent.lstm.input", dim, 4 * dim);
        let recurrent = store.add_uniform(rng, "latent.lstm.recurrent.w", vec![4 * dim, dim], dim, 1.0);
        let token = store.add_uniform(rng, "latent.lstm.token", vec![dim], 1, 1.0);
        LstmCell {
            input,
            recurrent,
            token,
            dim,
        }
    }

    /// `z_1..z_T` from cell state `u` (`(B, L)`), hidden state starting at zero.
    pub fn unroll<T: Float>(&self, g: &mut Graph<T>, p: &Bound, u: Var, steps: usize) -> Vec<Var> {
        let batch = g.shape(u)[0];
        let l = self.dim;
        let ones = g.constant(Tensor::ones([batch, 1]));
        let token = g.reshape(p[self.token], &[1, l]);
        let x = g.mul(ones, token);
        let x_gates = self.input.forward(g, p, x);
        let mut h = g.constant(Tensor::zeros([batch, l]));
        let mut c = u;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let hg = g.linear(h, p[self.recurrent], None);
            let gates = g.add(x_gates, hg);
            let i = g.narrow(gates, 1, 0, l);
            let f = g.narrow(gates, 1, l, l);
            let cand = g.narrow(gates, 1, 2 * l, l);
            let o = g.narrow(gates, 1, 3 * l, l);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cand = g.tanh(cand);
            let o = g.sigmoid(o);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            out.push(h);
        }
        out
    }
}

/// The latent variable side of the model.
#[derive(Clone, Debug)]
pub struct LatentModule {
    pub encoder: PosteriorEncoder,
    pub lstm: LstmCell,
    /// Learned per-step prior, only for the `lp` scheme.
    pub prior: Option<Linear>,
    pub scheme: LatentScheme,
    pub dim: usize,
}

/// Per-step latents `(B, L)` for a training rollout with their KL terms.
#[derive(Clone, Debug)]
pub struct TrainLatents {
    pub zs: Vec<Var>,
    /// Posterior parameters of each draw: one pair for global schemes, T pairs otherwise.
    pub posteriors: Vec<(Var, Var)>,
}

/// A global latent and the per-step latents derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPath {
    pub u: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

impl LatentModule {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let encoder = PosteriorEncoder::new(store, rng, cfg);
        let lstm = LstmCell::new(store, rng, cfg.latent_dim);
        let prior = (cfg.latent_scheme == LatentScheme::Lp).then(|| {
            Linear::with_gain(store, rng, "latent.prior", 2 + cfg.appearance_dim, 2 * cfg.latent_dim, 0.1)
        });
        LatentModule {
            encoder,
            lstm,
            prior,
            scheme: cfg.latent_scheme,
            dim: cfg.latent_dim,
        }
    }

    /// Per-step latents from a global `u` according to the scheme.
    pub fn from_global<T: Float>(&self, g: &mut Graph<T>, p: &Bound, u: Var, steps: usize) -> Vec<Var> {
        match self.scheme {
            LatentScheme::NoZ => vec![u; steps],
            _ => self.lstm.unroll(g, p, u, steps),
        }
    }

    /// Posterior samples for training. `features` holds the encoder features of
    /// frames `0..=T` for each sample, laid out `(B * (T + 1), flat)`.
    pub fn posterior_latents<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        features: Var,
        batch: usize,
        steps: usize,
        noise: &mut dyn NoiseSource,
    ) -> TrainLatents {
        let per = steps + 1;
        let pick = |g: &mut Graph<T>, t: usize| {
            let idx: Vec<usize> = (0..batch).map(|b| b * per + t).collect();
            g.index_select(features, 0, &idx)
        };
        if self.scheme.is_global() {
            let first = pick(g, 0);
            let last = pick(g, steps);
            let (mu, ls) = self.encoder.head(g, p, first, last);
            let u = reparameterize(g, mu, ls, noise_tensor(noise, batch, self.dim));
            TrainLatents {
                zs: self.from_global(g, p, u, steps),
                posteriors: vec![(mu, ls)],
            }
        } else {
            let mut zs = Vec::with_capacity(steps);
            let mut posteriors = Vec::with_capacity(steps);
            let mut prev = pick(g, 0);
            for t in 1..=steps {
                let cur = pick(g, t);
                let (mu, ls) = self.encoder.head(g, p, prev, cur);
                zs.push(reparameterize(g, mu, ls, noise_tensor(noise, batch, self.dim)));
                posteriors.push((mu, ls));
                prev = cur;
            }
            TrainLatents { zs, posteriors }
        }
    }

    /// Learned prior `(mu, log_sigma)` from `(B, N, 2)` locations and `(B, N, A)` appearances.
    pub fn learned_prior<T: Float>(&self, g: &mut Graph<T>, p: &Bound, b: Var, a: Var) -> Option<(Var, Var)> {
        let prior = self.prior.as_ref()?;
        let x = g.concat(&[b, a], 2);
        let pooled = g.mean_axis(x, 1);
        let out = prior.forward(g, p, pooled);
        Some((g.narrow(out, 1, 0, self.dim), g.narrow(out, 1, self.dim, self.dim)))
    }

    fn check_pair<T: Float>(&self, f0: &Tensor<T>, ft: &Tensor<T>) -> Result<()> {
        if f0.shape() != ft.shape() {
            return Err(Error::arg(format!(
                "frames differ in shape: {:?} vs {:?}",
                f0.shape(),
                ft.shape()
            )));
        }
        let c = self.encoder.canvas;
        if f0.shape() != [3, c, c] {
            return Err(Error::arg(format!("expected (3, {c}, {c}) frames, got {:?}", f0.shape())));
        }
        Ok(())
    }

    /// `q(u | f0, fT)`.
    pub fn posterior<T: Float>(&self, params: &ParamStore<T>, f0: &Tensor<T>, ft: &Tensor<T>) -> Result<GaussianParams> {
        self.check_pair(f0, ft)?;
        let c = self.encoder.canvas;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let frames = Tensor::concat(&[f0, ft], 0).reshape([2, 3, c, c]);
        let frames = g.constant(frames);
        let feats = self.encoder.features(&mut g, &p, frames);
        let first = g.narrow(feats, 0, 0, 1);
        let last = g.narrow(feats, 0, 1, 1);
        let (mu, ls) = self.encoder.head(&mut g, &p, first, last);
        Ok(GaussianParams {
            mu: g.value(mu).to_f64_vec(),
            sigma: g.value(ls).to_f64_vec().iter().map(|v| v.exp()).collect(),
        })
    }

    /// `z_1..z_T` from `u` by the recurrent cell.
    pub fn z_sequence<T: Float>(&self, params: &ParamStore<T>, u: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
        if u.len() != self.dim {
            return Err(Error::arg(format!("u has {} entries, expected {}", u.len(), self.dim)));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let uv = g.constant(Tensor::from_f64([1, self.dim], u));
        let zs = self.lstm.unroll(&mut g, &p, uv, steps);
        Ok(zs.iter().map(|&z| g.value(z).to_f64_vec()).collect())
    }

    /// Prior latents for schemes that do not depend on the rollout state
    /// (`ours`, `no_z`, `fp`). `lp` needs the predicted states and is driven by the model.
    pub fn prior_path<T: Float>(&self, params: &ParamStore<T>, steps: usize, noise: &mut dyn NoiseSource) -> Result<LatentPath> {
        match self.scheme {
            LatentScheme::Ours => {
                let u = noise.draw(self.dim);
                let z = self.z_sequence(params, &u, steps)?;
                Ok(LatentPath { u, z })
            }
            LatentScheme::NoZ => {
                let u = noise.draw(self.dim);
                Ok(LatentPath {
                    z: vec![u.clone(); steps],
                    u,
                })
            }
            LatentScheme::Fp => Ok(LatentPath {
                u: Vec::new(),
                z: (0..steps).map(|_| noise.draw(self.dim)).collect(),
            }),
            LatentScheme::Lp => Err(Error::arg(
                "the lp scheme samples each step from the predicted state; use the model rollout",
            )),
        }
    }
}
