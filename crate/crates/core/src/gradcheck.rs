//! Central finite-difference checks of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Fixed, non-degenerate projection weights so vector outputs reduce to a scalar.
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.3 + ((i * 7919 + 13) % 101) as f64 / 101.0).collect()
}

fn projected(build: &impl Fn(&mut Graph<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let w = projection(g.value(out).len());
    g.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum()
}

/// Per-input relative error `|analytic - numeric| / max(|analytic|, |numeric|)`
/// (Euclidean norms), using central differences with step `h`. Returns the worst input.
pub fn max_relative_error(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>], h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let seed = Tensor::new(g.shape(out).to_vec(), projection(g.value(out).len()));
    let grads = g.backward_with(out, seed);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut probe = inputs.to_vec();
        let mut diff2 = 0.0;
        let (mut an2, mut nu2) = (0.0, 0.0);
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = projected(&build, &probe);
            probe[k].data_mut()[i] = orig - h;
            let down = projected(&build, &probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff2 += (analytic[i] - numeric).powi(2);
            an2 += analytic[i].powi(2);
            nu2 += numeric.powi(2);
        }
        let scale = an2.sqrt().max(nu2.sqrt());
        let rel = if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale };
        worst = worst.max(rel);
    }
    worst
}
