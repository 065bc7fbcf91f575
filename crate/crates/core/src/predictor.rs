//! Graph message-passing predictor over entity states.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::frontend::{Adjacency, SceneState};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

/// Node-to-edge and edge-to-node transforms of one interaction round.
#[derive(Clone, Copy, Debug)]
pub struct InteractionBlock {
    /// Consumes `v_i ++ v_j`, receiver first.
    pub ve: Linear,
    pub ev: Linear,
}

impl InteractionBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d_in: usize, hidden: usize) -> Self {
        InteractionBlock {
            ve: Linear::new(store, rng, &format!("{name}.ve"), 2 * d_in, hidden),
            ev: Linear::new(store, rng, &format!("{name}.ev"), hidden, hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.ve.in_dim / 2
    }
}

/// `(N, N, 1)` weights: `1 / in_degree(i)` where `j` sends to `i`.
fn pooling_weights<T: Float>(adj: &Adjacency) -> Tensor<T> {
    let n = adj.len();
    let mut w = Tensor::zeros([n, n, 1]);
    for i in 0..n {
        let inv = 1.0 / adj.in_degree(i) as f64;
        for j in 0..n {
            if adj.linked(i, j) {
                w.data_mut()[i * n + j] = T::from_f64(inv);
            }
        }
    }
    w
}

/// One interaction round on `(B, N, D)` node features.
///
/// `e_ij = act(f_ve(v_i ++ v_j))`, `v_i' = act(f_ev(mean_j e_ij))` over the
/// senders `j` linked to receiver `i`.
pub fn message_pass_block<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    block: &InteractionBlock,
    nodes: Var,
    adj: &Adjacency,
    slope: f64,
) -> Result<Var> {
    let s = g.shape(nodes).to_vec();
    if s.len() != 3 {
        return Err(Error::arg(format!("node features must be (B, N, D), got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if n == 0 {
        return Err(Error::arg("message passing needs at least one node"));
    }
    if d != block.input_dim() {
        return Err(Error::arg(format!(
            "block expects node width {}, got {d}",
            block.input_dim()
        )));
    }
    if adj.len() != n {
        return Err(Error::arg(format!("adjacency has {} nodes, features have {n}", adj.len())));
    }
    let hidden = block.ve.out_dim;
    let w = p[block.ve.w];
    let w_recv = g.narrow(w, 1, 0, d);
    let w_send = g.narrow(w, 1, d, d);
    let recv = g.linear(nodes, w_recv, Some(p[block.ve.b]));
    let send = g.linear(nodes, w_send, None);
    let recv = g.reshape(recv, &[b, n, 1, hidden]);
    let send = g.reshape(send, &[b, 1, n, hidden]);
    let edges = g.add(recv, send);
    let edges = g.leaky_relu(edges, slope);
    let weights = g.constant(pooling_weights(adj));
    let weighted = g.mul(edges, weights);
    let pooled = g.sum_axis(weighted, 2);
    let out = block.ev.forward(g, p, pooled);
    Ok(g.leaky_relu(out, slope))
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub blocks: Vec<InteractionBlock>,
    /// Residual location head.
    pub head_b: Linear,
    pub head_a: Linear,
    pub latent_dim: usize,
    pub appearance_dim: usize,
    pub slope: f64,
}

/// Entity locations `(B, N, 2)` and appearances `(B, N, A)` on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub b: Var,
    pub a: Var,
}

impl Predictor {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d0 = 2 + cfg.appearance_dim + cfg.latent_dim;
        let h = cfg.predictor_hidden;
        let blocks = (0..cfg.predictor_blocks)
            .map(|i| InteractionBlock::new(store, rng, &format!("predictor.block{i}"), if i == 0 { d0 } else { h }, h))
            .collect();
        Predictor {
            blocks,
            head_b: Linear::with_gain(store, rng, "predictor.head_b", h, 2, 0.1),
            head_a: Linear::new(store, rng, "predictor.head_a", h, cfg.appearance_dim),
            latent_dim: cfg.latent_dim,
            appearance_dim: cfg.appearance_dim,
            slope: cfg.leaky_slope,
        }
    }

    /// One step: `z` is `(B, L)` and joins the node inputs of the first block only.
    pub fn step<T: Float>(&self, g: &mut Graph<T>, p: &Bound, state: StateVars, z: Var, adj: &Adjacency) -> Result<StateVars> {
        let bs = g.shape(state.b).to_vec();
        let (batch, n) = (bs[0], bs[1]);
        let zs = g.shape(z).to_vec();
        if zs != [batch, self.latent_dim] {
            return Err(Error::arg(format!(
                "latent must be ({batch}, {}), got {zs:?}",
                self.latent_dim
            )));
        }
        if g.shape(state.a) != [batch, n, self.appearance_dim] {
            return Err(Error::arg("appearance width does not match the predictor".to_string()));
        }
        let ones = g.constant(Tensor::ones([batch, n, 1]));
        let z3 = g.reshape(z, &[batch, 1, self.latent_dim]);
        let z_nodes = g.mul(ones, z3);
        let mut h = g.concat(&[state.b, state.a, z_nodes], 2);
        for block in &self.blocks {
            h = message_pass_block(g, p, block, h, adj, self.slope)?;
        }
        let db = self.head_b.forward(g, p, h);
        let b = g.add(state.b, db);
        let a = self.head_a.forward(g, p, h);
        Ok(StateVars { b, a })
    }

    /// States `1..=T`, each computed from the previous prediction.
    pub fn rollout<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        start: StateVars,
        zs: &[Var],
        adj: &Adjacency,
    ) -> Result<Vec<StateVars>> {
        let mut out = Vec::with_capacity(zs.len());
        let mut state = start;
        for &z in zs {
            state = self.step(g, p, state, z, adj)?;
            out.push(state);
        }
        Ok(out)
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(Error::arg(format!(
                "latent has {} entries, expected {}",
                z.len(),
                self.latent_dim
            )));
        }
        Ok(())
    }

    pub fn predict_step<T: Float>(&self, params: &ParamStore<T>, scene: &SceneState, z: &[f64]) -> Result<SceneState> {
        Ok(self.rollout_scene(params, scene, &[z.to_vec()])?.remove(0))
    }

    pub fn rollout_scene<T: Float>(&self, params: &ParamStore<T>, scene: &SceneState, zs: &[Vec<f64>]) -> Result<Vec<SceneState>> {
        for z in zs {
            self.check_latent(z)?;
        }
        if scene.is_empty() {
            return Err(Error::arg("scene has no entities"));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let (b, a) = scene.to_tensors::<T>();
        let start = StateVars {
            b: g.constant(b),
            a: g.constant(a),
        };
        let zs: Vec<Var> = zs
            .iter()
            .map(|z| g.constant(Tensor::from_f64([1, z.len()], z)))
            .collect();
        let states = self.rollout(&mut g, &p, start, &zs, &scene.graph)?;
        Ok(states
            .iter()
            .map(|s| SceneState::from_tensors(g.value(s.b), g.value(s.a), scene.graph.clone()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_relative_error;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn fixed_block(store: &mut ParamStore<f64>, ve_w: &[f64], d: usize, h: usize) -> InteractionBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = InteractionBlock::new(store, &mut rng, "b", d, h);
        *store.get_mut(block.ve.w) = Tensor::from_f64([h, 2 * d], ve_w);
        *store.get_mut(block.ve.b) = Tensor::zeros([h]);
        let mut eye = Tensor::zeros([h, h]);
        for i in 0..h {
            eye.data_mut()[i * h + i] = 1.0;
        }
        *store.get_mut(block.ev.w) = eye;
        *store.get_mut(block.ev.b) = Tensor::zeros([h]);
        block
    }

    fn run_block(store: &ParamStore<f64>, block: &InteractionBlock, nodes: Tensor<f64>, adj: &Adjacency, slope: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(nodes);
        let y = message_pass_block(&mut g, &p, block, x, adj, slope).unwrap();
        g.value(y).to_f64_vec()
    }

    #[test]
    fn hand_evaluated_two_node_graph() {
        let mut store = ParamStore::new();
        let block = fixed_block(&mut store, &[1.0, 1.0], 1, 1);
        let out = run_block(&store, &block, Tensor::from_f64([1, 2, 1], &[1.0, 3.0]), &Adjacency::full(2), 0.2);
        assert_eq!(out, vec![3.0, 5.0]);
    }

    #[test]
    fn self_links_with_left_half_is_identity() {
        let mut store = ParamStore::new();
        // ve = [I | 0] keeps the receiver half
        let block = fixed_block(&mut store, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], 2, 2);
        let input = [0.5, -1.5, 2.0, 0.25, -3.0, 4.0];
        let out = run_block(&store, &block, Tensor::from_f64([1, 3, 2], &input), &Adjacency::self_only(3), 1.0);
        assert_eq!(out, input.to_vec());
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let mut store = ParamStore::new();
        let block = fixed_block(&mut store, &[1.0, 1.0], 1, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 2, 3]));
        assert!(matches!(
            message_pass_block(&mut g, &p, &block, x, &Adjacency::full(2), 0.2),
            Err(Error::Argument(_))
        ));
        let x = g.constant(Tensor::zeros([1, 2, 1]));
        assert!(message_pass_block(&mut g, &p, &block, x, &Adjacency::full(3), 0.2).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (d, h, n) = (4, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let block = InteractionBlock::new(&mut store, &mut rng, "b", d, h);
        let nodes = Tensor::from_f64([1, n, d], &[0.3, -0.2, 0.9, 0.1, -0.7, 0.4, 0.05, -0.6]);
        let mut inputs = vec![nodes];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let adj = Adjacency::full(n);
        let err = max_relative_error(
            |g, vars| {
                let bound = crate::nn::Bound::from_vars(vars[1..].to_vec());
                message_pass_block(g, &bound, &block, vars[0], &adj, 0.2).unwrap()
            },
            &inputs,
            1e-5,
        );
        assert!(err <= 1e-3, "relative error {err}");
    }

    fn small_predictor(store: &mut ParamStore<f64>, seed: u64) -> Predictor {
        let cfg = ModelConfig {
            appearance_dim: 6,
            latent_dim: 3,
            predictor_hidden: 12,
            ..ModelConfig::default()
        };
        Predictor::new(store, &mut ChaCha8Rng::seed_from_u64(seed), &cfg)
    }

    fn scene(n: usize, seed: u64, graph: Adjacency) -> SceneState {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entities = (0..n)
            .map(|_| crate::frontend::EntityState {
                location: [rng.random(), rng.random()],
                appearance: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        SceneState::new(entities, graph).unwrap()
    }

    #[test]
    fn shapes_purity_and_variable_n() {
        let mut store = ParamStore::new();
        let pred = small_predictor(&mut store, 1);
        let s3 = scene(3, 0, Adjacency::full(3));
        let next = pred.predict_step(&store, &s3, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(next.len(), 3);
        assert_eq!(next.graph, s3.graph);
        assert!(next.entities.iter().all(|e| e.appearance.len() == 6));
        assert_eq!(next, pred.predict_step(&store, &s3, &[0.1, 0.2, 0.3]).unwrap());
        let s5 = scene(5, 1, Adjacency::full(5));
        assert_eq!(pred.predict_step(&store, &s5, &[0.0; 3]).unwrap().len(), 5);
        assert!(matches!(pred.predict_step(&store, &s3, &[0.0; 4]), Err(Error::Argument(_))));
    }

    #[test]
    fn rollout_lengths_and_determinism() {
        let mut store = ParamStore::new();
        let pred = small_predictor(&mut store, 2);
        let s = scene(3, 2, Adjacency::full(3));
        assert!(pred.rollout_scene(&store, &s, &[]).unwrap().is_empty());
        let zs: Vec<Vec<f64>> = (0..16).map(|t| vec![t as f64 * 0.1, -0.2, 0.3]).collect();
        let a = pred.rollout_scene(&store, &s, &zs).unwrap();
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|st| st.len() == 3 && st.locations().iter().flatten().all(|v| v.is_finite())));
        assert_eq!(a, pred.rollout_scene(&store, &s, &zs).unwrap());
    }

    #[test]
    fn self_only_graph_decouples_entities() {
        let mut store = ParamStore::new();
        let pred = small_predictor(&mut store, 3);
        let s = scene(3, 4, Adjacency::self_only(3));
        let mut perturbed = s.clone();
        perturbed.entities[2].location = [0.9, 0.1];
        perturbed.entities[2].appearance[0] += 1.0;
        let zs = vec![vec![0.5, -0.5, 0.1]; 8];
        let a = pred.rollout_scene(&store, &s, &zs).unwrap();
        let b = pred.rollout_scene(&store, &perturbed, &zs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.entities[0], y.entities[0]);
            assert_eq!(x.entities[1], y.entities[1]);
            assert_ne!(x.entities[2], y.entities[2]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn rollout_is_permutation_equivariant(seed in 0u64..1000, n in 1usize..6, rot in 0usize..6) {
            let mut store = ParamStore::new();
            let pred = small_predictor(&mut store, seed);
            let s = scene(n, seed + 1, Adjacency::full(n));
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let mut ps = s.clone();
            for (i, &pi) in perm.iter().enumerate() {
                ps.entities[pi] = s.entities[i].clone();
            }
            ps.graph = s.graph.permuted(&perm);
            let zs: Vec<Vec<f64>> = (0..4).map(|t| vec![0.1 * t as f64, 0.2, -0.3]).collect();
            let a = pred.rollout_scene(&store, &s, &zs).unwrap();
            let b = pred.rollout_scene(&store, &ps, &zs).unwrap();
            for (sa, sb) in a.iter().zip(&b) {
                for (i, &pi) in perm.iter().enumerate() {
                    for k in 0..2 {
                        prop_assert!((sa.entities[i].location[k] - sb.entities[pi].location[k]).abs() < 1e-9);
                    }
                    for (x, y) in sa.entities[i].appearance.iter().zip(&sb.entities[pi].appearance) {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
