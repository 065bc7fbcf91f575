//! Prediction, auto-encoding and latent losses.

use crate::autograd::{Graph, Var};
use crate::datagen::VideoSequence;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::{Clip, TrainingPass};
use crate::tensor::Tensor;

/// Loss weights: `total = l_dec + l_pred_frame + lambda_loc * l_pred_loc + lambda_kl * l_enc`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_loc: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_loc: 100.0,
            lambda_kl: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_pred_frame: f64,
    pub l_pred_loc: f64,
    pub l_dec: f64,
    pub l_enc: f64,
    pub total: f64,
    /// Frame term at steps `1..=T`.
    pub frame_per_step: Vec<f64>,
    /// Location term at steps `1..=T`.
    pub loc_per_step: Vec<f64>,
    /// Auto-encoding term at frames `0..=T`.
    pub dec_per_step: Vec<f64>,
}

impl LossReport {
    fn from_parts(frame: Vec<f64>, loc: Vec<f64>, dec: Vec<f64>, kl: f64, w: LossWeights) -> Self {
        let l_pred_frame = frame.iter().sum();
        let l_pred_loc = loc.iter().sum();
        let l_dec = dec.iter().sum();
        LossReport {
            l_pred_frame,
            l_pred_loc,
            l_dec,
            l_enc: kl,
            total: total_loss(l_pred_frame, l_pred_loc, l_dec, kl, w),
            frame_per_step: frame,
            loc_per_step: loc,
            dec_per_step: dec,
        }
    }

    /// Average of several reports, component-wise.
    pub fn mean(reports: &[LossReport], w: LossWeights) -> LossReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: &dyn Fn(&LossReport) -> &Vec<f64>| -> Vec<f64> {
            let len = reports.first().map_or(0, |r| f(r).len());
            (0..len).map(|i| reports.iter().map(|r| f(r)[i]).sum::<f64>() / n).collect()
        };
        let kl = reports.iter().map(|r| r.l_enc).sum::<f64>() / n;
        Self::from_parts(avg(&|r| &r.frame_per_step), avg(&|r| &r.loc_per_step), avg(&|r| &r.dec_per_step), kl, w)
    }

    pub fn components(&self) -> [f64; 5] {
        [self.l_pred_frame, self.l_pred_loc, self.l_dec, self.l_enc, self.total]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite())
    }
}

pub fn total_loss(l_pred_frame: f64, l_pred_loc: f64, l_dec: f64, l_enc: f64, w: LossWeights) -> f64 {
    l_dec + (l_pred_frame + w.lambda_loc * l_pred_loc) + w.lambda_kl * l_enc
}

fn check_finite(name: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    match values.into_iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numerical(format!("non-finite value in {name} at flat index {i}"))),
        None => Ok(()),
    }
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Losses of one sequence from plain arrays.
///
/// `pred_frames` is `(T, 3, H, W)` for frames `1..=T` of `gt`, `pred_centers`
/// is `[t][n]` for the same steps, `gt_decoded` is `(T + 1, 3, H, W)` decoded
/// from the ground-truth encodings of frames `0..=T`.
pub fn compute_losses<T: Float>(
    pred_frames: &Tensor<T>,
    pred_centers: &[Vec<[f64; 2]>],
    gt: &VideoSequence,
    gt_decoded: &Tensor<T>,
    kl: f64,
    weights: LossWeights,
) -> Result<LossReport> {
    let steps = pred_centers.len();
    let (h, w) = (gt.height, gt.width);
    let per = 3 * h * w;
    if pred_frames.shape() != [steps, 3, h, w] {
        return Err(Error::arg(format!(
            "predicted frames have shape {:?}, expected [{steps}, 3, {h}, {w}]",
            pred_frames.shape()
        )));
    }
    if gt_decoded.shape() != [steps + 1, 3, h, w] {
        return Err(Error::arg(format!(
            "decoded frames have shape {:?}, expected [{}, 3, {h}, {w}]",
            gt_decoded.shape(),
            steps + 1
        )));
    }
    if steps + 1 > gt.n_frames {
        return Err(Error::arg(format!("horizon {steps} exceeds the sequence ({} frames)", gt.n_frames)));
    }
    let pf = pred_frames.to_f64_vec();
    let gd = gt_decoded.to_f64_vec();
    check_finite("predicted frames", pf.iter().copied())?;
    check_finite("decoded frames", gd.iter().copied())?;
    check_finite("predicted centers", pred_centers.iter().flatten().flatten().copied())?;
    check_finite("kl", [kl])?;

    let gt_frames: Vec<Vec<f64>> = (0..=steps).map(|t| gt.frame_chw::<f64>(t).into_data()).collect();
    let frame: Vec<f64> = (0..steps)
        .map(|t| mean_abs_diff(&pf[t * per..(t + 1) * per], &gt_frames[t + 1]))
        .collect();
    let dec: Vec<f64> = (0..=steps)
        .map(|t| mean_abs_diff(&gd[t * per..(t + 1) * per], &gt_frames[t]))
        .collect();
    let mut loc = Vec::with_capacity(steps);
    for (t, centers) in pred_centers.iter().enumerate() {
        if centers.len() != gt.n_entities {
            return Err(Error::arg(format!(
                "{} predicted centers at step {}, sequence has {} entities",
                centers.len(),
                t + 1,
                gt.n_entities
            )));
        }
        loc.push(
            centers
                .iter()
                .enumerate()
                .map(|(n, c)| {
                    let g = gt.center(t + 1, n);
                    (c[0] - g[0]).powi(2) + (c[1] - g[1]).powi(2)
                })
                .sum(),
        );
    }
    Ok(LossReport::from_parts(frame, loc, dec, kl, weights))
}

/// Loss terms as graph values, each averaged over the batch.
#[derive(Clone, Copy, Debug)]
pub struct GraphLosses {
    pub l_pred_frame: Var,
    pub l_pred_loc: Var,
    pub l_dec: Var,
    pub l_enc: Var,
    pub total: Var,
}

pub fn graph_losses<T: Float>(g: &mut Graph<T>, pass: &TrainingPass, clip: &Clip<T>, weights: LossWeights) -> GraphLosses {
    let (batch, steps) = (clip.batch, clip.steps);
    let s = clip.frames.shape();
    let per = (s[1] * s[2] * s[3]) as f64;
    let pred_rows: Vec<usize> = (0..batch).flat_map(|b| (1..=steps).map(move |t| (b, t))).map(|(b, t)| clip.row(b, t)).collect();
    let gt_pred = g.constant(clip.frames.index_select(0, &pred_rows));
    let gt_all = g.constant(clip.frames.clone());

    let d = g.sub(pass.pred_frames, gt_pred);
    let d = g.abs(d);
    let d = g.sum_all(d);
    let l_pred_frame = g.scale(d, 1.0 / (batch as f64 * per));

    let d = g.sub(pass.dec_frames, gt_all);
    let d = g.abs(d);
    let d = g.sum_all(d);
    let l_dec = g.scale(d, 1.0 / (batch as f64 * per));

    let mut loc_terms = Vec::with_capacity(steps);
    for (t, &b) in pass.pred_centers.iter().enumerate() {
        let rows: Vec<usize> = (0..batch).map(|bi| clip.row(bi, t + 1)).collect();
        let data: Vec<f64> = rows.iter().flat_map(|&r| clip.centers[r].iter().flatten().copied()).collect();
        let gt = g.constant(Tensor::from_f64([batch, clip.n_entities, 2], &data));
        let d = g.sub(b, gt);
        let d = g.sqr(d);
        loc_terms.push(g.sum_all(d));
    }
    let l_pred_loc = match loc_terms.split_first() {
        Some((&first, rest)) => {
            let mut acc = first;
            for &x in rest {
                acc = g.add(acc, x);
            }
            g.scale(acc, 1.0 / batch as f64)
        }
        None => g.constant(Tensor::scalar(T::from_f64(0.0))),
    };
    let l_enc = g.mean_all(pass.kl);

    let wl = g.scale(l_pred_loc, weights.lambda_loc);
    let wk = g.scale(l_enc, weights.lambda_kl);
    let pred = g.add(l_pred_frame, wl);
    let total = g.add(l_dec, pred);
    let total = g.add(total, wk);
    GraphLosses {
        l_pred_frame,
        l_pred_loc,
        l_dec,
        l_enc,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_sequence;
    use proptest::prelude::*;

    fn perfect(seq: &VideoSequence, steps: usize) -> (Tensor<f64>, Vec<Vec<[f64; 2]>>, Tensor<f64>) {
        let frames = |range: std::ops::RangeInclusive<usize>| {
            let parts: Vec<Tensor<f64>> = range.map(|t| seq.frame_chw::<f64>(t)).collect();
            let refs: Vec<&Tensor<f64>> = parts.iter().collect();
            let s = refs[0].shape().to_vec();
            Tensor::concat(&refs, 0).reshape([refs.len(), s[0], s[1], s[2]])
        };
        let centers = (1..=steps).map(|t| seq.centers_at(t)).collect();
        (frames(1..=steps), centers, frames(0..=steps))
    }

    #[test]
    fn perfect_prediction_gives_zero() {
        let seq = generate_sequence(3, 3, 4, 32).unwrap();
        let (pf, pc, gd) = perfect(&seq, 4);
        let r = compute_losses(&pf, &pc, &seq, &gd, 0.0, LossWeights::default()).unwrap();
        assert_eq!(r.components(), [0.0; 5]);
        assert_eq!(r.frame_per_step.len(), 4);
        assert_eq!(r.dec_per_step.len(), 5);
    }

    #[test]
    fn location_example() {
        let seq = generate_sequence(4, 1, 1, 32).unwrap();
        let (pf, mut pc, gd) = perfect(&seq, 1);
        pc[0][0][0] += 0.1;
        let r = compute_losses(&pf, &pc, &seq, &gd, 0.0, LossWeights::default()).unwrap();
        assert!((r.l_pred_loc - 0.01).abs() < 1e-12);
        assert!((r.total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn kl_enters_with_its_weight() {
        let seq = generate_sequence(5, 2, 2, 32).unwrap();
        let (pf, pc, gd) = perfect(&seq, 2);
        let w = LossWeights::default();
        let a = compute_losses(&pf, &pc, &seq, &gd, 1.5, w).unwrap();
        let b = compute_losses(&pf, &pc, &seq, &gd, 3.0, w).unwrap();
        assert!((b.total - a.total - 1e-3 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn nan_is_reported() {
        let seq = generate_sequence(6, 2, 2, 32).unwrap();
        let (mut pf, pc, gd) = perfect(&seq, 2);
        pf.data_mut()[7] = f64::NAN;
        let err = compute_losses(&pf, &pc, &seq, &gd, 0.0, LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        let (pf, pc, gd) = perfect(&seq, 2);
        assert!(compute_losses(&pf, &pc, &seq, &gd, f64::NAN, LossWeights::default()).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let seq = generate_sequence(6, 2, 2, 32).unwrap();
        let (pf, pc, gd) = perfect(&seq, 2);
        let err = compute_losses(&pf, &pc[..1], &seq, &gd, 0.0, LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn total_identity_and_nonnegative(
            frame in proptest::collection::vec(0.0f64..2.0, 3),
            loc in proptest::collection::vec(0.0f64..1.0, 3),
            dec in proptest::collection::vec(0.0f64..2.0, 4),
            kl in 0.0f64..50.0,
            l1 in 0.0f64..200.0,
            l2 in 0.0f64..0.1,
        ) {
            let w = LossWeights { lambda_loc: l1, lambda_kl: l2 };
            let r = LossReport::from_parts(frame, loc, dec, kl, w);
            let expect = r.l_dec + (r.l_pred_frame + l1 * r.l_pred_loc) + l2 * r.l_enc;
            prop_assert!((r.total - expect).abs() <= 1e-9);
            prop_assert!(r.components().iter().all(|&v| v >= 0.0));
        }
    }
}
