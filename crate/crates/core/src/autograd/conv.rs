//! Spatial operations on NCHW tensors: convolution, resampling, group norm.

use super::{Graph, Var};
use crate::float::Float;
use crate::tensor::Tensor;

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= kernel, "kernel larger than padded input");
    (size + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output rows per column tile, keeping an `f32` tile of im2col columns near 512 KiB.
    fn tile_rows(&self) -> usize {
        const TILE_BYTES: usize = 512 * 1024;
        let per_row = self.rows() * self.wo * 4;
        (TILE_BYTES / per_row.max(1)).clamp(1, self.ho.max(1))
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.tile_rows();
        let ho = self.ho;
        (0..ho).step_by(step).map(move |a| (a, (a + step).min(ho)))
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in bounds.
fn valid_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let pad = g.pad as isize;
    let s = g.stride as isize;
    let first = pad - kx as isize;
    let lo = if first <= 0 { 0 } else { ((first + s - 1) / s) as usize };
    let last = g.w as isize - 1 + pad - kx as isize;
    let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(g.wo) };
    (lo.min(hi), hi)
}

/// Columns for output rows `oy0..oy1`, laid out `(rows, (oy1 - oy0) * wo)`.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let n = (oy1 - oy0) * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_range(g, kx);
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::ZERO);
                        continue;
                    }
                    line[..lo].fill(T::ZERO);
                    line[hi..].fill(T::ZERO);
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (j, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = src[start + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [T]) {
    let n = (oy1 - oy0) * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_range(g, kx);
                if lo >= hi {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kx - g.pad;
                    let seg = &src[(oy - oy0) * g.wo + lo..(oy - oy0) * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in line[start..start + (hi - lo)].iter_mut().zip(seg) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in seg.iter().enumerate() {
                            line[start + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Plain (non-differentiable) convolution, shared by the graph op and by oracles in tests.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (out, _) = conv_impl(x, w, b, stride, pad);
    out
}

fn conv_impl<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, ConvGeom) {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be (out, in, k, k)");
    assert_eq!(ws[1], xs[1], "conv2d channel mismatch: weight {ws:?} input {xs:?}");
    assert_eq!(ws[2], ws[3], "only square kernels are supported");
    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let geom = ConvGeom {
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: conv_out_size(h, k, stride, pad),
        wo: conv_out_size(wd, k, stride, pad),
    };
    let (rows, n) = (geom.rows(), geom.cols());
    let mut out = Tensor::zeros([batch, cout, geom.ho, geom.wo]);
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; rows * geom.tile_rows() * geom.wo]
    };
    let in_stride = cin * h * wd;
    for bi in 0..batch {
        let xb = &x.data()[bi * in_stride..(bi + 1) * in_stride];
        let ob = &mut out.data_mut()[bi * cout * n..(bi + 1) * cout * n];
        if let Some(bias) = b {
            for (co, &bv) in bias.data().iter().enumerate() {
                ob[co * n..(co + 1) * n].fill(bv);
            }
        }
        let beta = if b.is_some() { T::ONE } else { T::ZERO };
        if geom.is_pointwise() {
            T::gemm(cout, rows, n, T::ONE, w.data(), rows as isize, 1, xb, n as isize, 1, beta, ob, n as isize, 1);
            continue;
        }
        for (oy0, oy1) in geom.tiles() {
            let tn = (oy1 - oy0) * geom.wo;
            im2col(xb, &geom, oy0, oy1, &mut cols);
            T::gemm(
                cout,
                rows,
                tn,
                T::ONE,
                w.data(),
                rows as isize,
                1,
                &cols,
                tn as isize,
                1,
                beta,
                &mut ob[oy0 * geom.wo..],
                n as isize,
                1,
            );
        }
    }
    (out, geom)
}

impl<T: Float> Graph<T> {
    /// 2-d convolution, NCHW input, `(out, in, k, k)` weight, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (value, geom) = conv_impl(self.value(x), self.value(w), b.map(|v| self.value(v)), stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.custom(&inputs, value, move |ctx| {
            let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
            let batch = x.dim(0);
            let cout = w.dim(0);
            let (rows, n) = (geom.rows(), geom.cols());
            let in_stride = geom.cin * geom.h * geom.w;
            let g = ctx.grad.data();
            let mut dx = ctx.needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
            let mut dw = ctx.needs[1].then(|| Tensor::zeros(w.shape().to_vec()));
            let tile = if geom.is_pointwise() { 0 } else { rows * geom.tile_rows() * geom.wo };
            let mut cols = vec![T::ZERO; tile];
            let mut dcols = vec![T::ZERO; tile];
            let mut gtile = vec![T::ZERO; if geom.is_pointwise() { 0 } else { cout * geom.tile_rows() * geom.wo }];
            for bi in 0..batch {
                let gb = &g[bi * cout * n..(bi + 1) * cout * n];
                let xb = &x.data()[bi * in_stride..(bi + 1) * in_stride];
                if geom.is_pointwise() {
                    if let Some(dw) = dw.as_mut() {
                        T::gemm(cout, n, rows, T::ONE, gb, n as isize, 1, xb, 1, n as isize, T::ONE, dw.data_mut(), rows as isize, 1);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx.data_mut()[bi * in_stride..(bi + 1) * in_stride];
                        T::gemm(rows, cout, n, T::ONE, w.data(), 1, rows as isize, gb, n as isize, 1, T::ZERO, dxb, n as isize, 1);
                    }
                    continue;
                }
                for (oy0, oy1) in geom.tiles() {
                    let tn = (oy1 - oy0) * geom.wo;
                    let gt = &gb[oy0 * geom.wo..];
                    if let Some(dw) = dw.as_mut() {
                        // contiguous copy: rows a full image apart alias in L1
                        for co in 0..cout {
                            gtile[co * tn..(co + 1) * tn].copy_from_slice(&gt[co * n..co * n + tn]);
                        }
                        im2col(xb, &geom, oy0, oy1, &mut cols);
                        T::gemm(
                            cout,
                            tn,
                            rows,
                            T::ONE,
                            &gtile,
                            tn as isize,
                            1,
                            &cols,
                            1,
                            tn as isize,
                            T::ONE,
                            dw.data_mut(),
                            rows as isize,
                            1,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx.data_mut()[bi * in_stride..(bi + 1) * in_stride];
                        T::gemm(
                            rows,
                            cout,
                            tn,
                            T::ONE,
                            w.data(),
                            1,
                            rows as isize,
                            gt,
                            n as isize,
                            1,
                            T::ZERO,
                            &mut dcols,
                            tn as isize,
                            1,
                        );
                        col2im(&dcols, &geom, oy0, oy1, dxb);
                    }
                }
            }
            let mut out = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                out.push(ctx.needs[2].then(|| {
                    let mut db = vec![T::ZERO; cout];
                    for bi in 0..batch {
                        for (co, acc) in db.iter_mut().enumerate() {
                            let base = (bi * cout + co) * n;
                            *acc += g[base..base + n].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new([cout], db)
                }));
            }
            out
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "upsample expects NCHW");
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros([xs[0], xs[1], ho, wo]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for p in 0..planes {
                for y in 0..ho {
                    for xo in 0..wo {
                        dst[(p * ho + y) * wo + xo] = src[(p * h + y / factor) * w + xo / factor];
                    }
                }
            }
        }
        self.custom(&[x], out, move |ctx| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape().to_vec());
            let g = ctx.grad.data();
            let d = dx.data_mut();
            for p in 0..planes {
                for y in 0..ho {
                    for xo in 0..wo {
                        d[(p * h + y / factor) * w + xo / factor] += g[(p * ho + y) * wo + xo];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Average pooling over non-overlapping `factor x factor` windows.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let out = avg_pool_tensor(self.value(x), factor);
        let xs = self.shape(x).to_vec();
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / factor, w / factor);
        let inv = T::from_f64(1.0 / (factor * factor) as f64);
        self.custom(&[x], out, move |ctx| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape().to_vec());
            let g = ctx.grad.data();
            let d = dx.data_mut();
            for p in 0..planes {
                for y in 0..ho * factor {
                    for xi in 0..wo * factor {
                        d[(p * h + y) * w + xi] = g[(p * ho + y / factor) * wo + xi / factor] * inv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Group normalization with per-channel affine, statistics per sample and group.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "group_norm expects NCHW");
        let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        assert!(groups > 0 && c % groups == 0, "channels {c} not divisible by groups {groups}");
        let cg = c / groups;
        let group_len = cg * hw;
        let eps = T::from_f64(eps);
        let mut stats = Vec::with_capacity(batch * groups);
        let mut out = Tensor::zeros(xs.clone());
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            assert_eq!(gv.len(), c, "gamma width mismatch");
            let dst = out.data_mut();
            let n = T::from_f64(group_len as f64);
            for bi in 0..batch {
                for gi in 0..groups {
                    let base = (bi * c + gi * cg) * hw;
                    let seg = &xv[base..base + group_len];
                    let mean = seg.iter().copied().sum::<T>() / n;
                    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let rstd = T::ONE / (var + eps).sqrt();
                    stats.push((mean, rstd));
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        for i in 0..hw {
                            let j = base + ci * hw + i;
                            dst[j] = (xv[j] - mean) * rstd * gv[ch] + bv[ch];
                        }
                    }
                }
            }
        }
        self.custom(&[x, gamma, beta], out, move |ctx| {
            let (xv, gv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = ctx.grad.data();
            let mut dx = vec![T::ZERO; xv.len()];
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            let n = T::from_f64(group_len as f64);
            for bi in 0..batch {
                for gi in 0..groups {
                    let (mean, rstd) = stats[bi * groups + gi];
                    let base = (bi * c + gi * cg) * hw;
                    let mut sum_d = T::ZERO;
                    let mut sum_dx = T::ZERO;
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        for i in 0..hw {
                            let j = base + ci * hw + i;
                            let xhat = (xv[j] - mean) * rstd;
                            dgamma[ch] += g[j] * xhat;
                            dbeta[ch] += g[j];
                            let d = g[j] * gv[ch];
                            sum_d += d;
                            sum_dx += d * xhat;
                        }
                    }
                    let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        for i in 0..hw {
                            let j = base + ci * hw + i;
                            let xhat = (xv[j] - mean) * rstd;
                            dx[j] = rstd * (g[j] * gv[ch] - mean_d - xhat * mean_dx);
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(ctx.inputs[0].shape().to_vec(), dx)),
                Some(Tensor::new([c], dgamma)),
                Some(Tensor::new([c], dbeta)),
            ]
        })
    }
}

/// Non-differentiable average pooling, also used to build input pyramids.
pub(crate) fn avg_pool_tensor<T: Float>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "avg_pool expects NCHW");
    let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    assert!(h % factor == 0 && w % factor == 0, "avg_pool factor must divide the size");
    let (ho, wo) = (h / factor, w / factor);
    let inv = T::from_f64(1.0 / (factor * factor) as f64);
    let mut out = Tensor::zeros([xs[0], xs[1], ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for y in 0..h {
            for xi in 0..w {
                dst[(p * ho + y / factor) * wo + xi / factor] += src[(p * h + y) * w + xi] * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, seed: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (((i * 7919 + seed * 104729) % 1000) as f64 / 1000.0 - 0.5) * 1.3)
            .collect()
    }

    /// Direct 7-loop convolution used as the oracle for the im2col path.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, k) = (w.dim(0), w.dim(2));
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new([n, cout, ho, wo], out)
    }

    #[test]
    fn conv_matches_naive_loop() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = Tensor::new([2, 3, 7, 6], pseudo(2 * 3 * 42, 1));
            let w = Tensor::new([4, 3, k, k], pseudo(12 * k * k, 2));
            let b = Tensor::new([4], pseudo(4, 3));
            let got = conv2d_forward(&x, &w, Some(&b), s, p);
            let want = naive_conv(&x, &w, &b, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn grad_check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, shapes: &[Vec<usize>]) {
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| pseudo(s.iter().product(), i + 10))
            .collect();
        let eval = |vals: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = vals
                .iter()
                .zip(shapes)
                .map(|(v, s)| g.leaf(Tensor::new(s.clone(), v.clone())))
                .collect();
            let y = build(&mut g, &vars);
            let wts = Tensor::new(g.shape(y).to_vec(), pseudo(g.value(y).len(), 99));
            let wv = g.constant(wts);
            let p = g.mul(y, wv);
            let l = g.sum_all(p);
            let grads = g.backward(l);
            let gs = vars.iter().map(|&v| grads.get(v).unwrap().data().to_vec()).collect();
            (g.value(l).item(), gs)
        };
        let (_, analytic) = eval(&inputs);
        let h = 1e-6;
        for (vi, vals) in inputs.iter().enumerate() {
            for i in 0..vals.len() {
                let mut p = inputs.clone();
                p[vi][i] += h;
                let mut m = inputs.clone();
                m[vi][i] -= h;
                let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
                let a = analytic[vi][i];
                assert!(
                    (fd - a).abs() <= 1e-6 * fd.abs().max(1.0),
                    "input {vi} element {i}: fd {fd} analytic {a}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        grad_check(
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
            &[vec![2, 2, 5, 4], vec![3, 2, 3, 3], vec![3]],
        );
        grad_check(
            |g, v| g.conv2d(v[0], v[1], None, 1, 0),
            &[vec![1, 3, 2, 2], vec![2, 3, 1, 1]],
        );
    }

    #[test]
    fn resample_and_norm_gradients() {
        grad_check(|g, v| g.upsample_nearest(v[0], 2), &[vec![1, 2, 2, 3]]);
        grad_check(|g, v| g.avg_pool(v[0], 2), &[vec![1, 2, 4, 2]]);
        grad_check(
            |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5),
            &[vec![2, 4, 2, 3], vec![4], vec![4]],
        );
    }
}
