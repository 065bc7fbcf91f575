//! Parameter storage, layer descriptors and the Adam optimizer.
//!
//! Layers hold only [`ParamId`]s, so the same model description runs in `f32`
//! or `f64` depending on the [`ParamStore`] it is bound to.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Add a parameter initialised uniformly in `±gain / sqrt(fan_in)`.
    pub fn add_uniform(&mut self, rng: &mut ChaCha8Rng, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, gain: f64) -> ParamId {
        let value = uniform_init(rng, shape, fan_in, gain);
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Put every parameter on the tape; `trainable` decides whether they get gradients.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a particular graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Parameters already on a graph, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform(-bound, bound) with bound = gain / sqrt(fan_in), the usual default for
/// linear and conv layers.
fn uniform_init<T: Float>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::with_gain(store, rng, name, in_dim, out_dim, 1.0)
    }

    pub fn with_gain<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, vec![out_dim, in_dim], in_dim, gain));
        let b = store.add(format!("{name}.b"), uniform_init(rng, vec![out_dim], in_dim, gain));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            uniform_init(rng, vec![cout, cin, kernel, kernel], fan_in, 1.0),
        );
        let b = store.add(format!("{name}.b"), uniform_init(rng, vec![cout], fan_in, 1.0));
        Conv2d {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    /// 3x3, padding 1.
    pub fn same3<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, rng, name, cin, cout, 3, 1, 1)
    }

    /// 3x3, stride 2, padding 1.
    pub fn down3<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, rng, name, cin, cout, 3, 2, 1)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]));
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.group_norm(x, p[self.gamma], p[self.beta], self.groups, 1e-5)
    }
}

fn largest_divisor_at_most(n: usize, k: usize) -> usize {
    (1..=k.min(n).max(1)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = |_: &Tensor<T>| Tensor::zeros([0]);
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.values.iter().map(zeros).collect(),
            v: store.values.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates per parameter (empty before the first update).
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restore state saved with [`Adam::moments`] and [`Adam::steps_taken`].
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Validation(format!(
                "optimizer state has {} entries, model has {}",
                m.len(),
                self.m.len()
            )));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Apply one update from the gradients of `bound` (bound with `trainable = true`).
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(self.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(bound.var(id)) else {
                continue;
            };
            let i = id.0;
            if self.m[i].is_empty() {
                self.m[i] = Tensor::zeros(g.shape().to_vec());
                self.v[i] = Tensor::zeros(g.shape().to_vec());
            }
            let param = store.values[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..param.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                param[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_learning_rate_is_a_bitwise_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2);
        let before = store.clone();
        let mut opt = Adam::new(&store, 0.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let x = g.constant(Tensor::from_f64([4, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 1., 2., 3.]));
        let y = lin.forward(&mut g, &p, x);
        let l = g.sum_all(y);
        let grads = g.backward(l);
        opt.step(&mut store, &p, &grads);
        assert_eq!(store, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64([2], &[3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let s = g.sqr(p[id]);
            let l = g.sum_all(s);
            let grads = g.backward(l);
            opt.step(&mut store, &p, &grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
