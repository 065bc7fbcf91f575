//! Entity patches, warping into the frame, weighted-average composition and
//! pixel refinement.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{FusionLevel, ModelConfig, BACKGROUND_MASK};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::frontend::{FeatureMap, SceneState};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, ParamStore};
use crate::tensor::Tensor;

/// Where output row (or column) `y` samples the patch.
#[derive(Clone, Copy, Debug)]
struct AxisSample {
    k0: usize,
    t: f64,
    /// Derivative of the patch coordinate with respect to the normalized center; 0 when clamped.
    du_dc: f64,
}

/// Bilinear sampling positions along one axis, `None` outside the box.
///
/// Patch texel `k` sits at `top + (k + 0.5) * s` with `top = c * size - extent / 2`
/// and `s = extent / p`.
fn axis_samples(center: f64, size: usize, extent: f64, p: usize) -> Vec<Option<AxisSample>> {
    let top = center * size as f64 - extent / 2.0;
    let s = extent / p as f64;
    let last = (p - 1) as f64;
    (0..size)
        .map(|y| {
            let pos = y as f64 + 0.5;
            if pos < top || pos >= top + extent {
                return None;
            }
            let u = (pos - top) / s - 0.5;
            let clamped = u < 0.0 || u > last;
            let uc = u.clamp(0.0, last);
            let k0 = (uc.floor() as usize).min(p - 2);
            Some(AxisSample {
                k0,
                t: uc - k0 as f64,
                du_dc: if clamped { 0.0 } else { -(size as f64) / s },
            })
        })
        .collect()
}

impl<T: Float> Graph<T> {
    /// Place `(M, C, p, p)` patches into `(M / groups, groups, C, h, w)` maps.
    ///
    /// Patch `m` fills the square of side `extent` (output pixels) centered at
    /// `centers[m] = (x, y)` in normalized coordinates, with bilinear resampling.
    /// Outside the square the output is exactly zero.
    pub fn warp(&mut self, patches: Var, centers: Var, extent: f64, out_h: usize, out_w: usize, groups: usize) -> Var {
        let ps = self.shape(patches).to_vec();
        assert_eq!(ps.len(), 4, "patches must be (M, C, p, p)");
        let (m, c, p) = (ps[0], ps[1], ps[2]);
        assert_eq!(ps[3], p, "patches must be square");
        assert!(p >= 2, "patch side must be at least 2");
        assert_eq!(self.shape(centers), [m, 2], "centers must be (M, 2)");
        assert!(groups > 0 && m % groups == 0, "M must be a multiple of groups");
        let ctr = self.value(centers).to_f64_vec();
        let rows: Vec<Vec<Option<AxisSample>>> = (0..m).map(|i| axis_samples(ctr[2 * i + 1], out_h, extent, p)).collect();
        let cols: Vec<Vec<Option<AxisSample>>> = (0..m).map(|i| axis_samples(ctr[2 * i], out_w, extent, p)).collect();
        let mut out = Tensor::zeros([m / groups, groups, c, out_h, out_w]);
        {
            let src = self.value(patches).data();
            let dst = out.data_mut();
            for i in 0..m {
                for ch in 0..c {
                    let plane = &src[(i * c + ch) * p * p..(i * c + ch + 1) * p * p];
                    let obase = (i * c + ch) * out_h * out_w;
                    for (y, ry) in rows[i].iter().enumerate() {
                        let Some(ry) = ry else { continue };
                        let ty = T::from_f64(ry.t);
                        let r0 = &plane[ry.k0 * p..ry.k0 * p + p];
                        let r1 = &plane[(ry.k0 + 1) * p..(ry.k0 + 1) * p + p];
                        for (x, rx) in cols[i].iter().enumerate() {
                            let Some(rx) = rx else { continue };
                            let tx = T::from_f64(rx.t);
                            let k = rx.k0;
                            let top = r0[k] + tx * (r0[k + 1] - r0[k]);
                            let bot = r1[k] + tx * (r1[k + 1] - r1[k]);
                            dst[obase + y * out_w + x] = top + ty * (bot - top);
                        }
                    }
                }
            }
        }
        self.custom(&[patches, centers], out, move |ctx| {
            let src = ctx.inputs[0].data();
            let g = ctx.grad.data();
            let mut dpatch = ctx.needs[0].then(|| Tensor::<T>::zeros([m, c, p, p]));
            let mut dctr = vec![0.0f64; m * 2];
            for i in 0..m {
                for ch in 0..c {
                    let plane = &src[(i * c + ch) * p * p..(i * c + ch + 1) * p * p];
                    let gbase = (i * c + ch) * out_h * out_w;
                    for (y, ry) in rows[i].iter().enumerate() {
                        let Some(ry) = ry else { continue };
                        let ty = ry.t;
                        for (x, rx) in cols[i].iter().enumerate() {
                            let Some(rx) = rx else { continue };
                            let gv = g[gbase + y * out_w + x].to_f64();
                            if gv == 0.0 {
                                continue;
                            }
                            let tx = rx.t;
                            let (ky, kx) = (ry.k0, rx.k0);
                            let v00 = plane[ky * p + kx].to_f64();
                            let v01 = plane[ky * p + kx + 1].to_f64();
                            let v10 = plane[(ky + 1) * p + kx].to_f64();
                            let v11 = plane[(ky + 1) * p + kx + 1].to_f64();
                            if let Some(dp) = dpatch.as_mut() {
                                let d = &mut dp.data_mut()[(i * c + ch) * p * p..];
                                d[ky * p + kx] += T::from_f64(gv * (1.0 - ty) * (1.0 - tx));
                                d[ky * p + kx + 1] += T::from_f64(gv * (1.0 - ty) * tx);
                                d[(ky + 1) * p + kx] += T::from_f64(gv * ty * (1.0 - tx));
                                d[(ky + 1) * p + kx + 1] += T::from_f64(gv * ty * tx);
                            }
                            let d_tx = (1.0 - ty) * (v01 - v00) + ty * (v11 - v10);
                            let d_ty = (1.0 - tx) * (v10 - v00) + tx * (v11 - v01);
                            dctr[2 * i] += gv * d_tx * rx.du_dc;
                            dctr[2 * i + 1] += gv * d_ty * ry.du_dc;
                        }
                    }
                }
            }
            vec![dpatch, ctx.needs[1].then(|| Tensor::from_f64([m, 2], &dctr))]
        })
    }

    /// Weighted average of the background (weight 0.1) and entity maps.
    ///
    /// `bg` is `(F, C, h, w)`, `feats` `(F, N, C, h, w)`, `masks` `(F, N, 1, h, w)`.
    pub fn compose(&mut self, bg: Var, feats: Var, masks: Var) -> Var {
        let bs = self.shape(bg).to_vec();
        let fs = self.shape(feats).to_vec();
        assert_eq!(bs.len(), 4, "background must be (F, C, h, w)");
        let (f, c, hw) = (bs[0], bs[1], bs[2] * bs[3]);
        let n = fs[1];
        assert_eq!(fs, [f, n, c, bs[2], bs[3]], "feature maps do not match the background");
        assert_eq!(self.shape(masks), [f, n, 1, bs[2], bs[3]], "masks do not match the background");
        if n == 0 {
            return bg;
        }
        let m_bg = T::from_f64(BACKGROUND_MASK);
        let mut den = vec![m_bg; f * hw];
        {
            let mv = self.value(masks).data();
            for fi in 0..f {
                for ni in 0..n {
                    let src = &mv[(fi * n + ni) * hw..(fi * n + ni + 1) * hw];
                    for (d, &mval) in den[fi * hw..(fi + 1) * hw].iter_mut().zip(src) {
                        *d += mval;
                    }
                }
            }
        }
        let mut out = Tensor::zeros(bs.clone());
        {
            let (bgv, fv, mv) = (self.value(bg).data(), self.value(feats).data(), self.value(masks).data());
            let o = out.data_mut();
            for fi in 0..f {
                let den = &den[fi * hw..(fi + 1) * hw];
                for ch in 0..c {
                    let dst = &mut o[(fi * c + ch) * hw..(fi * c + ch + 1) * hw];
                    let b = &bgv[(fi * c + ch) * hw..(fi * c + ch + 1) * hw];
                    for (d, &bv) in dst.iter_mut().zip(b) {
                        *d = m_bg * bv;
                    }
                    for ni in 0..n {
                        let fe = &fv[((fi * n + ni) * c + ch) * hw..((fi * n + ni) * c + ch + 1) * hw];
                        let ma = &mv[(fi * n + ni) * hw..(fi * n + ni + 1) * hw];
                        for ((d, &fvv), &mval) in dst.iter_mut().zip(fe).zip(ma) {
                            *d += fvv * mval;
                        }
                    }
                    for (d, &dv) in dst.iter_mut().zip(den) {
                        *d /= dv;
                    }
                }
            }
        }
        self.custom(&[bg, feats, masks], out, move |ctx| {
            let (fv, mv) = (ctx.inputs[1].data(), ctx.inputs[2].data());
            let (g, out) = (ctx.grad.data(), ctx.output.data());
            // g / den, shared by all three gradients
            let mut gd = g.to_vec();
            for fi in 0..f {
                for ch in 0..c {
                    let row = &mut gd[(fi * c + ch) * hw..(fi * c + ch + 1) * hw];
                    for (v, &dv) in row.iter_mut().zip(&den[fi * hw..(fi + 1) * hw]) {
                        *v /= dv;
                    }
                }
            }
            let dbg = ctx.needs[0].then(|| Tensor::new(bs.clone(), gd.iter().map(|&v| v * m_bg).collect()));
            let dfeat = ctx.needs[1].then(|| {
                let mut d = Tensor::zeros(fs.clone());
                let dd = d.data_mut();
                for fi in 0..f {
                    for ni in 0..n {
                        let ma = &mv[(fi * n + ni) * hw..(fi * n + ni + 1) * hw];
                        for ch in 0..c {
                            let dst = &mut dd[((fi * n + ni) * c + ch) * hw..((fi * n + ni) * c + ch + 1) * hw];
                            let gsrc = &gd[(fi * c + ch) * hw..(fi * c + ch + 1) * hw];
                            for ((d, &gv), &mval) in dst.iter_mut().zip(gsrc).zip(ma) {
                                *d = gv * mval;
                            }
                        }
                    }
                }
                d
            });
            let dmask = ctx.needs[2].then(|| {
                let mut d = Tensor::zeros([f, n, 1, bs[2], bs[3]]);
                let dd = d.data_mut();
                for fi in 0..f {
                    for ni in 0..n {
                        let dst = &mut dd[(fi * n + ni) * hw..(fi * n + ni + 1) * hw];
                        for ch in 0..c {
                            let fe = &fv[((fi * n + ni) * c + ch) * hw..((fi * n + ni) * c + ch + 1) * hw];
                            let gsrc = &gd[(fi * c + ch) * hw..(fi * c + ch + 1) * hw];
                            let o = &out[(fi * c + ch) * hw..(fi * c + ch + 1) * hw];
                            for (((d, &gv), &fvv), &ov) in dst.iter_mut().zip(gsrc).zip(fe).zip(o) {
                                *d += gv * (fvv - ov);
                            }
                        }
                    }
                }
                d
            });
            vec![dbg, dfeat, dmask]
        })
    }
}

/// Decoded feature patch and soft mask of one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityPatch<T> {
    /// `(C, p, p)`.
    pub features: Tensor<T>,
    /// `(1, p, p)`, strictly inside `(0, 1)`.
    pub mask: Tensor<T>,
}

/// Up-convolutional decoder from an appearance vector to a patch and a mask.
#[derive(Clone, Debug)]
pub struct EntityDecoder {
    pub fc: Linear,
    pub units: Vec<(Conv2d, GroupNorm)>,
    pub out: Conv2d,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Squash features to `[0, 1]` (pixel fusion decodes RGB).
    pub rgb: bool,
    pub slope: f64,
}

impl EntityDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        appearance_dim: usize,
        width: usize,
        channels: usize,
        patch: usize,
        groups: usize,
        rgb: bool,
        slope: f64,
    ) -> Self {
        let fc = Linear::new(store, rng, "decoder.entity.fc", appearance_dim, width * 16);
        let mut units = Vec::new();
        let mut side = 4;
        while side < patch {
            let i = units.len();
            units.push((
                Conv2d::same3(store, rng, &format!("decoder.entity.unit{i}.conv"), width, width),
                GroupNorm::new(store, &format!("decoder.entity.unit{i}.norm"), width, groups),
            ));
            side *= 2;
        }
        let out = Conv2d::same3(store, rng, "decoder.entity.out", width, channels + 1);
        EntityDecoder {
            fc,
            units,
            out,
            width,
            channels,
            patch,
            rgb,
            slope,
        }
    }

    /// `(M, A)` appearances to `(M, C, p, p)` features and `(M, 1, p, p)` masks.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, a: Var) -> (Var, Var) {
        let m = g.shape(a)[0];
        let h = self.fc.forward(g, p, a);
        let h = g.leaky_relu(h, self.slope);
        let mut x = g.reshape(h, &[m, self.width, 4, 4]);
        for (conv, norm) in &self.units {
            x = g.upsample_nearest(x, 2);
            x = conv.forward(g, p, x);
            x = norm.forward(g, p, x);
            x = g.leaky_relu(x, self.slope);
        }
        let y = self.out.forward(g, p, x);
        let feats = g.narrow(y, 1, 0, self.channels);
        let feats = if self.rgb { g.sigmoid(feats) } else { feats };
        let logits = g.narrow(y, 1, self.channels, 1);
        (feats, g.sigmoid(logits))
    }
}

/// Initial logit of the first-frame copy gate, so an untrained decoder starts near a static scene.
pub const COPY_GATE_BIAS: f64 = 2.0;

/// Conv, normalization and leaky-ReLU units that also see the first frame at
/// every scale, upsampling until the output resolution is reached.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub units: Vec<(Conv2d, GroupNorm)>,
    pub out: Conv2d,
    pub slope: f64,
}

impl Refinement {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        width: usize,
        n_units: usize,
        groups: usize,
        slope: f64,
    ) -> Self {
        let units = (0..n_units)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { width } + 3;
                (
                    Conv2d::same3(store, rng, &format!("decoder.refine.unit{i}.conv"), cin, width),
                    GroupNorm::new(store, &format!("decoder.refine.unit{i}.norm"), width, groups),
                )
            })
            .collect();
        // Three color channels plus a gate that blends the output with the first frame.
        let out = Conv2d::new(store, rng, "decoder.refine.out", width, 4, 1, 1, 0);
        store.get_mut(out.b).data_mut()[3] = T::from_f64(COPY_GATE_BIAS);
        Refinement { units, out, slope }
    }

    /// `f0_at(k)` must return the first frame average-pooled by `k`, shaped like `x` spatially.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        mut x: Var,
        full: usize,
        f0_at: &mut dyn FnMut(&mut Graph<T>, usize) -> Var,
    ) -> Var {
        for (conv, norm) in &self.units {
            let res = g.shape(x)[2];
            let guide = f0_at(g, full / res);
            let cat = g.concat(&[x, guide], 1);
            x = conv.forward(g, p, cat);
            x = norm.forward(g, p, x);
            x = g.leaky_relu(x, self.slope);
            if res < full {
                x = g.upsample_nearest(x, 2);
            }
        }
        let y = self.out.forward(g, p, x);
        let rgb = g.narrow(y, 1, 0, 3);
        let rgb = g.sigmoid(rgb);
        let gate = g.narrow(y, 1, 3, 1);
        let gate = g.sigmoid(gate);
        let f0 = f0_at(g, 1);
        let diff = g.sub(f0, rgb);
        let copied = g.mul(gate, diff);
        g.add(rgb, copied)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub entity: EntityDecoder,
    pub refine: Option<Refinement>,
    pub fusion: FusionLevel,
    pub canvas: usize,
    /// Side of an entity's box in full-resolution pixels.
    pub extent: usize,
}

/// Output of [`Decoder::decode`].
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `(F, 3, H, W)` in `[0, 1]`.
    pub frames: Var,
    /// `(F, N, 1, h, w)` warped masks at the fusion resolution, if any entity was decoded.
    pub masks: Option<Var>,
}

impl Decoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let pixel = cfg.fusion == FusionLevel::Pixel;
        let channels = if pixel { 3 } else { cfg.feature_channels };
        let entity = EntityDecoder::new(
            store,
            rng,
            cfg.appearance_dim,
            cfg.decoder_width,
            channels,
            cfg.patch_size,
            cfg.norm_groups,
            pixel,
            cfg.leaky_slope,
        );
        let refine = (!pixel).then(|| {
            Refinement::new(
                store,
                rng,
                channels,
                cfg.refine_width,
                cfg.refine_units,
                cfg.norm_groups,
                cfg.leaky_slope,
            )
        });
        Decoder {
            entity,
            refine,
            fusion: cfg.fusion,
            canvas: cfg.canvas,
            extent: cfg.crop_extent,
        }
    }

    pub fn fusion_size(&self) -> usize {
        self.canvas / self.fusion.downscale()
    }

    /// Entity maps at the fusion resolution: `(F, N, C, h, w)` features and `(F, N, 1, h, w)` masks.
    pub fn warped_entities<T: Float>(&self, g: &mut Graph<T>, p: &Bound, b: Var, a: Var) -> (Var, Var) {
        let s = g.shape(a).to_vec();
        let (f, n) = (s[0], s[1]);
        let flat_a = g.reshape(a, &[f * n, s[2]]);
        let flat_b = g.reshape(b, &[f * n, 2]);
        let (feats, masks) = self.entity.forward(g, p, flat_a);
        let size = self.fusion_size();
        let extent = self.extent as f64 / self.fusion.downscale() as f64;
        let wf = g.warp(feats, flat_b, extent, size, size, n);
        let wm = g.warp(masks, flat_b, extent, size, size, n);
        (wf, wm)
    }

    /// Decode `F` frames. Frame `i` uses background `bg[src[i]]` and first frame
    /// `f0[src[i]]`; `b` is `(F, N, 2)` and `a` is `(F, N, A)`.
    pub fn decode<T: Float>(&self, g: &mut Graph<T>, p: &Bound, bg: Var, f0: Var, src: &[usize], b: Var, a: Var) -> Decoded {
        let n = g.shape(a)[1];
        let bg_f = g.index_select(bg, 0, src);
        let (composed, masks) = if n == 0 {
            (bg_f, None)
        } else {
            let (wf, wm) = self.warped_entities(g, p, b, a);
            (g.compose(bg_f, wf, wm), Some(wm))
        };
        self.finish(g, p, composed, f0, src, masks)
    }

    /// Refine a composed map `(F, C, h, w)` into frames.
    pub fn finish<T: Float>(&self, g: &mut Graph<T>, p: &Bound, composed: Var, f0: Var, src: &[usize], masks: Option<Var>) -> Decoded {
        let Some(refine) = &self.refine else {
            return Decoded {
                frames: composed,
                masks,
            };
        };
        let mut cache: Vec<(usize, Var)> = Vec::new();
        let src = src.to_vec();
        let mut f0_at = |g: &mut Graph<T>, k: usize| {
            if let Some(&(_, v)) = cache.iter().find(|(kk, _)| *kk == k) {
                return v;
            }
            let pooled = if k == 1 { f0 } else { g.avg_pool(f0, k) };
            let v = g.index_select(pooled, 0, &src);
            cache.push((k, v));
            v
        };
        Decoded {
            frames: refine.forward(g, p, composed, self.canvas, &mut f0_at),
            masks,
        }
    }

    pub fn decode_entity<T: Float>(&self, params: &ParamStore<T>, appearance: &[f64]) -> Result<EntityPatch<T>> {
        if appearance.len() != self.entity.fc.in_dim {
            return Err(Error::arg(format!(
                "appearance has {} entries, expected {}",
                appearance.len(),
                self.entity.fc.in_dim
            )));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let a = g.constant(Tensor::from_f64([1, appearance.len()], appearance));
        let (f, m) = self.entity.forward(&mut g, &p, a);
        let (c, ps) = (self.entity.channels, self.entity.patch);
        Ok(EntityPatch {
            features: g.value(f).clone().reshape([c, ps, ps]),
            mask: g.value(m).clone().reshape([1, ps, ps]),
        })
    }

    /// Full pipeline for one frame, given the background map of `f0`.
    pub fn decode_frame<T: Float>(
        &self,
        params: &ParamStore<T>,
        scene: &SceneState,
        f0: &Tensor<T>,
        bg: &FeatureMap<T>,
    ) -> Result<Tensor<T>> {
        let size = self.fusion_size();
        if bg.height() != size || bg.width() != size {
            return Err(Error::arg(format!(
                "background map is {}x{}, fusion level {} needs {size}x{size}",
                bg.height(),
                bg.width(),
                self.fusion
            )));
        }
        if f0.shape() != [3, self.canvas, self.canvas] {
            return Err(Error::arg(format!("first frame has shape {:?}", f0.shape())));
        }
        if scene.entities.iter().any(|e| !e.location.iter().all(|v| v.is_finite())) {
            return Err(Error::arg("entity location is not finite"));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let (b, a) = scene.to_tensors::<T>();
        let b = g.constant(b);
        let a = g.constant(a);
        let bgv = g.constant(bg.tensor.clone().reshape([1, bg.channels(), size, size]));
        let f0v = g.constant(f0.clone().reshape([1, 3, self.canvas, self.canvas]));
        let out = self.decode(&mut g, &p, bgv, f0v, &[0], b, a);
        Ok(g.value(out.frames).clone().reshape([3, self.canvas, self.canvas]))
    }
}

/// Place one `(C, p, p)` patch into an `(C, out_h, out_w)` map.
pub fn warp_to_frame<T: Float>(patch: &Tensor<T>, center: [f64; 2], extent: f64, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if !center.iter().all(|v| v.is_finite()) {
        return Err(Error::arg(format!("center {center:?} is not finite")));
    }
    let s = patch.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] < 2 {
        return Err(Error::arg(format!("patch must be (C, p, p) with p >= 2, got {s:?}")));
    }
    if !(extent > 0.0) || extent > out_h.min(out_w) as f64 {
        return Err(Error::arg(format!("extent {extent} must be in (0, {}]", out_h.min(out_w))));
    }
    let mut g = Graph::new();
    let pv = g.constant(patch.clone().reshape([1, s[0], s[1], s[2]]));
    let cv = g.constant(Tensor::from_f64([1, 2], &center));
    let out = g.warp(pv, cv, extent, out_h, out_w, 1);
    Ok(g.value(out).clone().reshape([s[0], out_h, out_w]))
}

/// Compose `(C, h, w)` background with warped `(features (C, h, w), mask (1, h, w))` pairs.
pub fn compose<T: Float>(bg: &Tensor<T>, warped: &[(Tensor<T>, Tensor<T>)]) -> Result<Tensor<T>> {
    let s = bg.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::arg(format!("background must be (C, h, w), got {s:?}")));
    }
    for (f, m) in warped {
        if f.shape() != s.as_slice() || m.shape() != [1, s[1], s[2]] {
            return Err(Error::arg(format!(
                "entity map shapes {:?} / {:?} do not match background {s:?}",
                f.shape(),
                m.shape()
            )));
        }
    }
    let n = warped.len();
    let mut g = Graph::new();
    let bgv = g.constant(bg.clone().reshape([1, s[0], s[1], s[2]]));
    let feats: Vec<&Tensor<T>> = warped.iter().map(|(f, _)| f).collect();
    let masks: Vec<&Tensor<T>> = warped.iter().map(|(_, m)| m).collect();
    let (fv, mv) = if n == 0 {
        (Tensor::zeros([1, 0, s[0], s[1], s[2]]), Tensor::zeros([1, 0, 1, s[1], s[2]]))
    } else {
        (
            Tensor::concat(&feats, 0).reshape([1, n, s[0], s[1], s[2]]),
            Tensor::concat(&masks, 0).reshape([1, n, 1, s[1], s[2]]),
        )
    };
    let fv = g.constant(fv);
    let mv = g.constant(mv);
    let out = g.compose(bgv, fv, mv);
    Ok(g.value(out).clone().reshape(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{Adjacency, EntityState};
    use crate::gradcheck::max_relative_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    /// Independent per-pixel evaluation of the weighted average.
    fn compose_oracle(bg: &Tensor<f64>, warped: &[(Tensor<f64>, Tensor<f64>)]) -> Vec<f64> {
        let (c, h, w) = (bg.dim(0), bg.dim(1), bg.dim(2));
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = (ch * h + y) * w + x;
                    let mut num = 0.1 * bg.data()[i];
                    let mut den = 0.1;
                    for (f, m) in warped {
                        let mv = m.data()[y * w + x];
                        num += f.data()[i] * mv;
                        den += mv;
                    }
                    out[i] = num / den;
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn compose_matches_scalar_oracle(seed in 0u64..10_000, n in 0usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bg = random(&[3, 5, 6], &mut rng, -2.0, 2.0);
            let warped: Vec<_> = (0..n)
                .map(|_| (random(&[3, 5, 6], &mut rng, -2.0, 2.0), random(&[1, 5, 6], &mut rng, 0.0, 1.0)))
                .collect();
            let got = compose(&bg, &warped).unwrap();
            for (a, b) in got.data().iter().zip(compose_oracle(&bg, &warped)) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn warp_is_zero_outside_the_box(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let patch = random(&[2, 8, 8], &mut rng, 0.5, 1.5);
            let center = [rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)];
            let extent = rng.random_range(2.0..20.0);
            let out = warp_to_frame(&patch, center, extent, 32, 32).unwrap();
            for ch in 0..2 {
                for y in 0..32 {
                    for x in 0..32 {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        let (left, top) = (center[0] * 32.0 - extent / 2.0, center[1] * 32.0 - extent / 2.0);
                        let inside = px >= left && px < left + extent && py >= top && py < top + extent;
                        let v = out.data()[(ch * 32 + y) * 32 + x];
                        if inside {
                            prop_assert!(v > 0.0);
                        } else {
                            prop_assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn compose_examples() {
        let bg: Tensor<f64> = Tensor::from_f64([1, 1, 1], &[1.0]);
        let one = compose(&bg, &[(Tensor::from_f64([1, 1, 1], &[5.0]), Tensor::from_f64([1, 1, 1], &[0.9]))]).unwrap();
        assert!((one.data()[0] - 4.6).abs() < 1e-12);
        let bg: Tensor<f64> = Tensor::from_f64([2, 1, 2], &[0.3, 0.7, -1.1, 0.123456789]);
        assert_eq!(compose(&bg, &[]).unwrap(), bg);
        let pair = [
            (Tensor::from_f64([1, 1, 1], &[2.0]), Tensor::from_f64([1, 1, 1], &[0.4])),
            (Tensor::from_f64([1, 1, 1], &[-3.0]), Tensor::from_f64([1, 1, 1], &[0.4])),
        ];
        let v = compose(&Tensor::from_f64([1, 1, 1], &[0.5]), &pair).unwrap().data()[0];
        assert!((-3.0..=2.0).contains(&v));
        let bad = [(Tensor::zeros([1, 2, 2]), Tensor::zeros([1, 1, 1]))];
        assert!(matches!(compose(&Tensor::<f64>::zeros([1, 1, 1]), &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn dominant_entity_mask() {
        let bg: Tensor<f64> = Tensor::from_f64([1, 2, 1], &[0.0, 0.0]);
        let f = Tensor::from_f64([1, 2, 1], &[1.0, 1.0]);
        let m = Tensor::from_f64([1, 2, 1], &[0.95, 0.0]);
        let out = compose(&bg, &[(f, m)]).unwrap();
        assert!(out.data()[0] >= 0.9);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn warp_full_extent_is_partition_of_unity() {
        let ones = Tensor::<f64>::ones([1, 16, 16]);
        let out = warp_to_frame(&ones, [0.5, 0.5], 64.0, 64, 64).unwrap();
        let sum = out.sum();
        assert!((sum - 64.0 * 64.0).abs() / (64.0 * 64.0) < 1e-4);
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        // the same patch resized by a plain bilinear resampler
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patch = random(&[1, 4, 4], &mut rng, 0.0, 1.0);
        let out = warp_to_frame(&patch, [0.5, 0.5], 8.0, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let u = |i: usize| ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 3.0);
                let (uy, ux) = (u(y), u(x));
                let (y0, x0) = ((uy.floor() as usize).min(2), (ux.floor() as usize).min(2));
                let (ty, tx) = (uy - y0 as f64, ux - x0 as f64);
                let at = |r: usize, c: usize| patch.data()[r * 4 + c];
                let want = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                    + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
                assert!((out.data()[y * 8 + x] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_shifts_with_the_center() {
        let mut patch = Tensor::<f64>::zeros([1, 4, 4]);
        patch.data_mut()[5] = 1.0;
        let a = warp_to_frame(&patch, [10.0 / 32.0, 12.0 / 32.0], 4.0, 32, 32).unwrap();
        let b = warp_to_frame(&patch, [11.0 / 32.0, 12.0 / 32.0], 4.0, 32, 32).unwrap();
        for y in 0..32 {
            for x in 1..32 {
                assert_eq!(b.data()[y * 32 + x], a.data()[y * 32 + x - 1]);
            }
        }
        assert!(a.sum() > 0.0);
    }

    #[test]
    fn warp_rejects_nan_centers() {
        let patch = Tensor::<f64>::ones([1, 4, 4]);
        assert!(matches!(warp_to_frame(&patch, [f64::NAN, 0.5], 4.0, 8, 8), Err(Error::Argument(_))));
        assert!(warp_to_frame(&patch, [0.5, 0.5], 9.0, 8, 8).is_err());
    }

    #[test]
    fn warp_and_compose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patches = random(&[2, 2, 4, 4], &mut rng, -1.0, 1.0);
        let centers = Tensor::from_f64([2, 2], &[0.43, 0.52, 0.61, 0.37]);
        let err = max_relative_error(|g, v| g.warp(v[0], v[1], 5.3, 8, 8, 2), &[patches, centers], 1e-5);
        assert!(err < 1e-4, "warp {err}");
        let bg = random(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
        let feats = random(&[1, 3, 2, 3, 3], &mut rng, -1.0, 1.0);
        let masks = random(&[1, 3, 1, 3, 3], &mut rng, 0.05, 1.0);
        let err = max_relative_error(|g, v| g.compose(v[0], v[1], v[2]), &[bg, feats, masks], 1e-5);
        assert!(err < 1e-6, "compose {err}");
    }

    #[test]
    fn decode_entity_warp_compose_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let dec = EntityDecoder::new(&mut store, &mut rng, 3, 2, 2, 4, 1, false, 0.2);
        let appearance = random(&[2, 3], &mut rng, -1.0, 1.0);
        let centers = Tensor::from_f64([2, 2], &[0.41, 0.47, 0.58, 0.63]);
        let bg = random(&[1, 2, 8, 8], &mut rng, -1.0, 1.0);
        let mut inputs = vec![appearance, centers, bg];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let err = max_relative_error(
            |g, v| {
                let p = Bound::from_vars(v[3..].to_vec());
                let (f, m) = dec.forward(g, &p, v[0]);
                let wf = g.warp(f, v[1], 4.7, 8, 8, 2);
                let wm = g.warp(m, v[1], 4.7, 8, 8, 2);
                g.compose(v[2], wf, wm)
            },
            &inputs,
            1e-5,
        );
        assert!(err <= 1e-3, "relative error {err}");
    }

    fn decoder(fusion: FusionLevel) -> (Decoder, ParamStore<f32>) {
        let cfg = ModelConfig {
            fusion,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), &cfg);
        (dec, store)
    }

    #[test]
    fn decode_entity_contract() {
        let (dec, store) = decoder(FusionLevel::Late);
        let a: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let patch = dec.decode_entity(&store, &a).unwrap();
        assert_eq!(patch.features.shape(), [32, 16, 16]);
        assert_eq!(patch.mask.shape(), [1, 16, 16]);
        assert!(patch.mask.data().iter().all(|&m| m > 0.0 && m < 1.0));
        assert_eq!(patch, dec.decode_entity(&store, &a).unwrap());
        assert!(matches!(dec.decode_entity(&store, &a[..5]), Err(Error::Argument(_))));
    }

    fn scene(appearance_shift: f64) -> SceneState {
        let entities = (0..2)
            .map(|i| EntityState {
                location: [0.3 + 0.4 * i as f64, 0.5],
                appearance: (0..32)
                    .map(|k| (k as f64 * 0.3 + i as f64).cos() + if i == 1 { appearance_shift } else { 0.0 })
                    .collect(),
            })
            .collect();
        SceneState::new(entities, Adjacency::full(2)).unwrap()
    }

    #[test]
    fn decoded_frames_are_valid_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f0 = random(&[3, 64, 64], &mut rng, 0.0, 1.0).cast::<f32>();
        for fusion in FusionLevel::ALL {
            let (dec, store) = decoder(*fusion);
            let size = dec.fusion_size();
            let ch = if *fusion == FusionLevel::Pixel { 3 } else { 32 };
            let bg = FeatureMap {
                tensor: random(&[ch, size, size], &mut rng, 0.0, 1.0).cast::<f32>(),
            };
            let frame = dec.decode_frame(&store, &scene(0.0), &f0, &bg).unwrap();
            assert_eq!(frame.shape(), [3, 64, 64]);
            assert!(frame.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(frame, dec.decode_frame(&store, &scene(0.0), &f0, &bg).unwrap());
        }
    }

    #[test]
    fn pixel_fusion_changes_are_local_to_the_box() {
        let (dec, store) = decoder(FusionLevel::Pixel);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f0 = random(&[3, 64, 64], &mut rng, 0.0, 1.0).cast::<f32>();
        let bg = FeatureMap { tensor: f0.clone() };
        let a = dec.decode_frame(&store, &scene(0.0), &f0, &bg).unwrap();
        let b = dec.decode_frame(&store, &scene(0.5), &f0, &bg).unwrap();
        let (left, top) = (0.7 * 64.0 - 10.0, 0.5 * 64.0 - 10.0);
        let mut changed = 0;
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let i = (c * 64 + y) * 64 + x;
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let inside = px >= left && px < left + 20.0 && py >= top && py < top + 20.0;
                    if !inside {
                        assert_eq!(a.data()[i], b.data()[i]);
                    } else if a.data()[i] != b.data()[i] {
                        changed += 1;
                    }
                }
            }
        }
        assert!(changed > 0);
    }
}
