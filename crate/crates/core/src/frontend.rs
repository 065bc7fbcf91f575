//! Initial entity and background features extracted from the first frame.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{FusionLevel, ModelConfig};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Interaction graph over N entities; self-links are always present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    links: Vec<bool>,
}

impl Adjacency {
    pub fn full(n: usize) -> Self {
        Adjacency {
            n,
            links: vec![true; n * n],
        }
    }

    pub fn self_only(n: usize) -> Self {
        let mut links = vec![false; n * n];
        for i in 0..n {
            links[i * n + i] = true;
        }
        Adjacency { n, links }
    }

    /// Undirected user-supplied edges (e.g. a skeleton) plus self-links.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = Self::self_only(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::arg(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            adj.links[i * n + j] = true;
            adj.links[j * n + i] = true;
        }
        Ok(adj)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Does receiver `i` get a message from sender `j`.
    pub fn linked(&self, i: usize, j: usize) -> bool {
        self.links[i * self.n + j]
    }

    pub fn in_degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.linked(i, j)).count()
    }

    /// Same links after relabelling node `k` as `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = vec![false; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                out[perm[i] * self.n + perm[j]] = self.linked(i, j);
            }
        }
        Adjacency { n: self.n, links: out }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityState {
    /// Normalized `(x, y)` center.
    pub location: [f64; 2],
    pub appearance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub entities: Vec<EntityState>,
    pub graph: Adjacency,
}

impl SceneState {
    pub fn new(entities: Vec<EntityState>, graph: Adjacency) -> Result<Self> {
        if graph.len() != entities.len() {
            return Err(Error::arg(format!(
                "graph has {} nodes but the scene has {} entities",
                graph.len(),
                entities.len()
            )));
        }
        Ok(SceneState { entities, graph })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn locations(&self) -> Vec<[f64; 2]> {
        self.entities.iter().map(|e| e.location).collect()
    }

    /// `(1, N, 2)` locations and `(1, N, A)` appearances.
    pub fn to_tensors<T: Float>(&self) -> (Tensor<T>, Tensor<T>) {
        let n = self.len();
        let a_dim = self.entities.first().map_or(0, |e| e.appearance.len());
        let b: Vec<f64> = self.entities.iter().flat_map(|e| e.location).collect();
        let a: Vec<f64> = self.entities.iter().flat_map(|e| e.appearance.iter().copied()).collect();
        (Tensor::from_f64([1, n, 2], &b), Tensor::from_f64([1, n, a_dim], &a))
    }

    pub fn from_tensors<T: Float>(b: &Tensor<T>, a: &Tensor<T>, graph: Adjacency) -> Self {
        let n = b.dim(1);
        let a_dim = a.dim(2);
        let (bv, av) = (b.to_f64_vec(), a.to_f64_vec());
        let entities = (0..n)
            .map(|i| EntityState {
                location: [bv[i * 2], bv[i * 2 + 1]],
                appearance: av[i * a_dim..(i + 1) * a_dim].to_vec(),
            })
            .collect();
        SceneState { entities, graph }
    }
}

/// Spatial grid of feature vectors, `(C, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub tensor: Tensor<T>,
}

impl<T: Float> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.tensor.dim(0)
    }

    pub fn height(&self) -> usize {
        self.tensor.dim(1)
    }

    pub fn width(&self) -> usize {
        self.tensor.dim(2)
    }
}

/// Square crops of side `extent` around each center, zero outside the frame.
///
/// `frames` is `(F, 3, H, W)`; crop `m` reads frame `frame_of[m]`. Returns `(M, 3, e, e)`.
pub fn crop_patches<T: Float>(frames: &Tensor<T>, frame_of: &[usize], centers: &[[f64; 2]], extent: usize) -> Tensor<T> {
    assert_eq!(frame_of.len(), centers.len());
    let (c, h, w) = (frames.dim(1), frames.dim(2), frames.dim(3));
    let e = extent;
    let mut out = Tensor::zeros([centers.len(), c, e, e]);
    let src = frames.data();
    let dst = out.data_mut();
    for (m, (&f, ctr)) in frame_of.iter().zip(centers).enumerate() {
        let x0 = (ctr[0] * w as f64 - e as f64 / 2.0).round() as isize;
        let y0 = (ctr[1] * h as f64 - e as f64 / 2.0).round() as isize;
        for ch in 0..c {
            for dy in 0..e {
                let y = y0 + dy as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..e {
                    let x = x0 + dx as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    dst[((m * c + ch) * e + dy) * e + dx] = src[((f * c + ch) * h + y as usize) * w + x as usize];
                }
            }
        }
    }
    out
}

/// Four stride-2 convolutions and global average pooling.
#[derive(Clone, Debug)]
pub struct AppearanceEncoder {
    pub convs: Vec<Conv2d>,
    pub dim: usize,
    pub slope: f64,
}

impl AppearanceEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dim: usize, slope: f64) -> Self {
        let widths = [3, 16, 32, 32, dim];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::down3(store, rng, &format!("frontend.appearance.conv{i}"), w[0], w[1]))
            .collect();
        AppearanceEncoder { convs, dim, slope }
    }

    /// `(M, 3, e, e)` crops to `(M, A)`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, crops: Var) -> Var {
        let mut x = crops;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, p, x);
            if i + 1 < self.convs.len() {
                x = g.leaky_relu(x, self.slope);
            }
        }
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]]);
        g.mean_axis(flat, 2)
    }
}

/// Small encoder-decoder with one skip connection, run at full resolution.
#[derive(Clone, Debug)]
pub struct BackgroundEncoder {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
    pub out: Conv2d,
    pub channels: usize,
    pub slope: f64,
}

impl BackgroundEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, channels: usize, slope: f64) -> Self {
        let c1 = Conv2d::same3(store, rng, "frontend.background.c1", 3, 16);
        let c2 = Conv2d::down3(store, rng, "frontend.background.c2", 16, 16);
        let c3 = Conv2d::same3(store, rng, "frontend.background.c3", 16, 16);
        let out = Conv2d::same3(store, rng, "frontend.background.out", 32, channels);
        BackgroundEncoder {
            c1,
            c2,
            c3,
            out,
            channels,
            slope,
        }
    }

    /// `(B, 3, H, W)` to `(B, C, H, W)`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, frames: Var) -> Var {
        let h1 = self.c1.forward(g, p, frames);
        let h1 = g.leaky_relu(h1, self.slope);
        let h2 = self.c2.forward(g, p, h1);
        let h2 = g.leaky_relu(h2, self.slope);
        let h3 = self.c3.forward(g, p, h2);
        let h3 = g.leaky_relu(h3, self.slope);
        let up = g.upsample_nearest(h3, 2);
        let cat = g.concat(&[up, h1], 1);
        self.out.forward(g, p, cat)
    }
}

#[derive(Clone, Debug)]
pub struct Frontend {
    pub appearance: AppearanceEncoder,
    pub background: BackgroundEncoder,
    pub extent: usize,
    pub canvas: usize,
    pub fusion: FusionLevel,
}

impl Frontend {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        Frontend {
            appearance: AppearanceEncoder::new(store, rng, cfg.appearance_dim, cfg.leaky_slope),
            background: BackgroundEncoder::new(store, rng, cfg.feature_channels, cfg.leaky_slope),
            extent: cfg.crop_extent,
            canvas: cfg.canvas,
            fusion: cfg.fusion,
        }
    }

    /// Appearance vectors for crops taken from `frames` (a constant `(F, 3, H, W)` tensor).
    pub fn encode_crops<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        frames: &Tensor<T>,
        frame_of: &[usize],
        centers: &[[f64; 2]],
    ) -> Var {
        let crops = crop_patches(frames, frame_of, centers, self.extent);
        let crops = g.constant(crops);
        self.appearance.forward(g, p, crops)
    }

    /// Background features at the fusion resolution; RGB itself for pixel fusion.
    pub fn background_at_fusion<T: Float>(&self, g: &mut Graph<T>, p: &Bound, f0: Var) -> Var {
        if self.fusion == FusionLevel::Pixel {
            return f0;
        }
        let full = self.background.forward(g, p, f0);
        match self.fusion.downscale() {
            1 => full,
            k => g.avg_pool(full, k),
        }
    }

    /// Mean-pooled background features, used for nearest-neighbour retrieval.
    pub fn global_feature<T: Float>(&self, g: &mut Graph<T>, p: &Bound, frames: Var) -> Var {
        let full = self.background.forward(g, p, frames);
        let s = g.shape(full).to_vec();
        let flat = g.reshape(full, &[s[0], s[1], s[2] * s[3]]);
        g.mean_axis(flat, 2)
    }

    fn check_frame<T: Float>(&self, frame: &Tensor<T>) -> Result<()> {
        let s = frame.shape();
        if s != [3, self.canvas, self.canvas] {
            return Err(Error::arg(format!(
                "expected a (3, {0}, {0}) frame, got {s:?}",
                self.canvas
            )));
        }
        Ok(())
    }

    /// One appearance vector per center.
    pub fn encode_entities<T: Float>(
        &self,
        params: &ParamStore<T>,
        frame: &Tensor<T>,
        centers: &[[f64; 2]],
    ) -> Result<Vec<EntityState>> {
        self.check_frame(frame)?;
        if centers.is_empty() {
            return Err(Error::arg("encode_entities needs at least one center"));
        }
        if let Some(c) = centers
            .iter()
            .find(|c| !c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)))
        {
            return Err(Error::arg(format!("center {c:?} outside [0, 1]^2")));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let frames = frame.clone().reshape([1, 3, self.canvas, self.canvas]);
        let a = self.encode_crops(&mut g, &p, &frames, &vec![0; centers.len()], centers);
        let av = g.value(a).to_f64_vec();
        let dim = self.appearance.dim;
        Ok(centers
            .iter()
            .enumerate()
            .map(|(i, &c)| EntityState {
                location: c,
                appearance: av[i * dim..(i + 1) * dim].to_vec(),
            })
            .collect())
    }

    pub fn encode_background<T: Float>(&self, params: &ParamStore<T>, frame: &Tensor<T>) -> Result<FeatureMap<T>> {
        self.check_frame(frame)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let f0 = g.constant(frame.clone().reshape([1, 3, self.canvas, self.canvas]));
        let bg = self.background_at_fusion(&mut g, &p, f0);
        let s = g.shape(bg).to_vec();
        Ok(FeatureMap {
            tensor: g.value(bg).clone().reshape([s[1], s[2], s[3]]),
        })
    }
}
