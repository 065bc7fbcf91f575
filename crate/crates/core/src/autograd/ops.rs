//! Elementwise, reduction, shape and dense-algebra operations.

use super::{Graph, Var};
use crate::float::Float;
use crate::tensor::Tensor;

impl<T: Float> Graph<T> {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.custom(&[x], value, move |ctx| {
            let input = ctx.inputs[0];
            let mut g = ctx.grad.clone();
            for ((gv, &xv), &yv) in g.data_mut().iter_mut().zip(input.data()).zip(ctx.output.data()) {
                *gv *= df(xv, yv);
            }
            vec![Some(g)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).broadcast_zip(self.value(b), |x, y| x + y);
        self.custom(&[a, b], value, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.sum_to_shape(ctx.inputs[0].shape())),
                ctx.needs[1].then(|| ctx.grad.sum_to_shape(ctx.inputs[1].shape())),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).broadcast_zip(self.value(b), |x, y| x - y);
        self.custom(&[a, b], value, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.sum_to_shape(ctx.inputs[0].shape())),
                ctx.needs[1].then(|| ctx.grad.map(|v| -v).sum_to_shape(ctx.inputs[1].shape())),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).broadcast_zip(self.value(b), |x, y| x * y);
        self.custom(&[a, b], value, |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| ctx.grad.broadcast_zip(b, |g, y| g * y).sum_to_shape(a.shape())),
                ctx.needs[1].then(|| ctx.grad.broadcast_zip(a, |g, x| g * x).sum_to_shape(b.shape())),
            ]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).broadcast_zip(self.value(b), |x, y| x / y);
        self.custom(&[a, b], value, |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| ctx.grad.broadcast_zip(b, |g, y| g / y).sum_to_shape(a.shape())),
                ctx.needs[1].then(|| {
                    // d(a/b)/db = -out / b
                    let q = ctx.grad.zip_map(ctx.output, |g, o| -g * o);
                    q.broadcast_zip(b, |v, y| v / y).sum_to_shape(b.shape())
                }),
            ]
        })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, |v| v + c, |_, _| T::ONE)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |x, _| T::ONE / x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sigmoid(), |_, y| y * (T::ONE - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::ONE - y * y)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(
            x,
            move |v| if v > T::ZERO { v } else { v * s },
            move |x, _| if x > T::ZERO { T::ONE } else { s },
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > T::ZERO {
                    T::ONE
                } else if x < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            },
        )
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.custom(&[x], value, |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self.value(x).sum_axis(axis);
        self.custom(&[x], value, move |ctx| {
            let len = ctx.inputs[0].dim(axis);
            vec![Some(ctx.grad.expand_axis(axis, len))]
        })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis].max(1) as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape.to_vec());
        self.custom(&[x], value, |ctx| {
            vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape().to_vec()))]
        })
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow(axis, start, len);
        self.custom(&[x], value, move |ctx| {
            let full = ctx.inputs[0].dim(axis);
            let idx: Vec<usize> = (start..start + len).collect();
            vec![Some(ctx.grad.index_add(axis, &idx, full))]
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let value = {
            let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat(&tensors, axis)
        };
        self.custom(parts, value, move |ctx| {
            let mut start = 0;
            ctx.inputs
                .iter()
                .zip(&ctx.needs)
                .map(|(inp, &need)| {
                    let len = inp.dim(axis);
                    let g = need.then(|| ctx.grad.narrow(axis, start, len));
                    start += len;
                    g
                })
                .collect()
        })
    }

    /// Stack equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Var {
        let expanded: Vec<Var> = parts
            .iter()
            .map(|&p| {
                let mut shape = self.shape(p).to_vec();
                shape.insert(axis, 1);
                self.reshape(p, &shape)
            })
            .collect();
        self.concat(&expanded, axis)
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Var {
        let value = self.value(x).index_select(axis, indices);
        let indices = indices.to_vec();
        self.custom(&[x], value, move |ctx| {
            let full = ctx.inputs[0].dim(axis);
            vec![Some(ctx.grad.index_add(axis, &indices, full))]
        })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self.value(x).permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.custom(&[x], value, move |ctx| vec![Some(ctx.grad.permute(&inverse))])
    }

    /// Batched matmul over the last two axes (leading axes equal).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.custom(&[a, b], value, |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| ctx.grad.matmul(&b.transpose_last2())),
                ctx.needs[1].then(|| a.transpose_last2().matmul(ctx.grad)),
            ]
        })
    }

    /// `x @ w^T + b` on the last axis; `w` is `(out, in)`, `b` is `(out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-d");
        let (out_dim, in_dim) = (ws[0], ws[1]);
        assert_eq!(
            *xs.last().expect("linear input must have rank >= 1"),
            in_dim,
            "linear input width mismatch"
        );
        let rows = self.value(x).len() / in_dim.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = out_dim;
        let mut value = Tensor::zeros(out_shape);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if let Some(bv) = b {
                let bias = self.value(bv).data();
                assert_eq!(bias.len(), out_dim, "linear bias width mismatch");
                for r in 0..rows {
                    value.data_mut()[r * out_dim..(r + 1) * out_dim].copy_from_slice(bias);
                }
            }
            T::gemm(
                rows,
                in_dim,
                out_dim,
                T::ONE,
                xv,
                in_dim as isize,
                1,
                wv,
                1,
                in_dim as isize,
                if b.is_some() { T::ONE } else { T::ZERO },
                value.data_mut(),
                out_dim as isize,
                1,
            );
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.custom(&inputs, value, move |ctx| {
            let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
            let g = ctx.grad.data();
            let gx = ctx.needs[0].then(|| {
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                T::gemm(
                    rows,
                    out_dim,
                    in_dim,
                    T::ONE,
                    g,
                    out_dim as isize,
                    1,
                    wv.data(),
                    in_dim as isize,
                    1,
                    T::ZERO,
                    gx.data_mut(),
                    in_dim as isize,
                    1,
                );
                gx
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = Tensor::zeros(wv.shape().to_vec());
                T::gemm(
                    out_dim,
                    rows,
                    in_dim,
                    T::ONE,
                    g,
                    1,
                    out_dim as isize,
                    xv.data(),
                    in_dim as isize,
                    1,
                    T::ZERO,
                    gw.data_mut(),
                    in_dim as isize,
                    1,
                );
                gw
            });
            let mut out = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                out.push(ctx.needs[2].then(|| {
                    let mut gb = vec![T::ZERO; out_dim];
                    for r in 0..rows {
                        for (acc, &v) in gb.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                            *acc += v;
                        }
                    }
                    Tensor::new([out_dim], gb)
                }));
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use crate::tensor::Tensor;

    /// Central-difference check of d(sum(w * f(x)))/dx for a graph builder `f`.
    fn check(shape: &[usize], f: impl Fn(&mut Graph<f64>, super::Var) -> super::Var) {
        let n: usize = shape.iter().product();
        let x0: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13 + 0.05).collect();
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::<f64>::new();
            let xv = g.leaf(Tensor::new(shape.to_vec(), x.to_vec()));
            let y = f(&mut g, xv);
            let weights: Vec<f64> = (0..g.value(y).len()).map(|i| 1.0 + 0.1 * i as f64).collect();
            let w = g.constant(Tensor::new(g.shape(y).to_vec(), weights));
            let p = g.mul(y, w);
            let l = g.sum_all(p);
            let grads = g.backward(l);
            (g.value(l).item(), grads.get(xv).unwrap().data().to_vec())
        };
        let (_, analytic) = eval(&x0);
        let h = 1e-6;
        for i in 0..n {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / (1.0f64).max(fd.abs());
            assert!(err < 1e-6, "element {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    #[test]
    fn elementwise_gradients() {
        check(&[2, 3], |g, x| g.sigmoid(x));
        check(&[2, 3], |g, x| g.tanh(x));
        check(&[2, 3], |g, x| g.exp(x));
        check(&[2, 3], |g, x| g.leaky_relu(x, 0.2));
        check(&[2, 3], |g, x| g.sqr(x));
        check(&[2, 3], |g, x| {
            let s = g.sqr(x);
            let s = g.add_scalar(s, 1.0);
            g.ln(s)
        });
    }

    #[test]
    fn broadcast_binary_gradients() {
        check(&[2, 1, 3], |g, x| {
            let c = g.constant(Tensor::from_f64([4, 1], &[0.5, -1.0, 2.0, 1.5]));
            let m = g.mul(x, c);
            let d = g.div(m, x);
            let s = g.sub(d, x);
            g.add(s, m)
        });
        check(&[3], |g, x| {
            let c = g.constant(Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]));
            let xx = g.add_scalar(x, 3.0);
            g.div(c, xx)
        });
    }

    #[test]
    fn shape_op_gradients() {
        check(&[2, 3, 2], |g, x| {
            let a = g.narrow(x, 1, 1, 2);
            let b = g.permute(a, &[2, 0, 1]);
            let c = g.reshape(b, &[4, 2]);
            let d = g.index_select(c, 0, &[3, 0, 0]);
            let e = g.concat(&[d, d], 1);
            g.sum_axis(e, 0)
        });
    }

    #[test]
    fn dense_gradients() {
        check(&[2, 3, 4], |g, x| {
            let w = g.constant(Tensor::from_f64([2, 4], &[0.1, -0.2, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8]));
            let b = g.constant(Tensor::from_f64([2], &[0.01, -0.02]));
            g.linear(x, w, Some(b))
        });
        check(&[2, 3, 2], |g, x| {
            let other = g.constant(Tensor::from_f64([2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
            g.matmul(x, other)
        });
    }

    #[test]
    fn linear_weight_gradient() {
        // gradient w.r.t. the weight and bias through the same check harness
        check(&[3, 2], |g, w| {
            let x = g.constant(Tensor::from_f64([4, 2], &[1., 2., -1., 0.5, 0.3, 0.3, 2., -2.]));
            let b = g.constant(Tensor::from_f64([3], &[0.0, 1.0, 2.0]));
            g.linear(x, w, Some(b))
        });
        check(&[3], |g, b| {
            let x = g.constant(Tensor::from_f64([4, 2], &[1., 2., -1., 0.5, 0.3, 0.3, 2., -2.]));
            let w = g.constant(Tensor::from_f64([3, 2], &[1., 2., -1., 0.5, 0.3, 0.3]));
            g.linear(x, w, Some(b))
        });
    }
}
