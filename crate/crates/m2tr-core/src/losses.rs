//! Training objective: classification and segmentation cross-entropies plus
//! the cosine contrastive term, combined with weighted sum.
//!
//! The printed forms of the two likelihood terms are negated here so that
//! minimization is the correct direction, and the segmentation term is
//! mean-reduced over pixels so its weight is stable across image sizes.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Balancing weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_seg: 1.0,
            lambda_con: 0.001,
        }
    }
}

/// Binary cross-entropy of a scalar probability against a 0/1 label.
pub fn cls_loss<T: Scalar>(tape: &mut Tape<T>, y_hat: Var, label: u8) -> Result<Var> {
    if label > 1 {
        return Err(Error::Data(format!("label must be 0 or 1, got {label}")));
    }
    if !tape.value(y_hat).is_scalar() {
        return Err(Error::Contract(format!(
            "cls_loss wants a scalar prediction, got {:?}",
            tape.value(y_hat).shape()
        )));
    }
    let eps = T::from_f64(PROB_EPS);
    let p = tape.clamp(y_hat, eps, T::one() - eps);
    let inner = if label == 1 {
        tape.ln(p)
    } else {
        let q = tape.affine(p, -T::one(), T::one());
        tape.ln(q)
    };
    Ok(tape.affine(inner, -T::one(), T::zero()))
}

/// Pixel-mean binary cross-entropy of a predicted soft mask against a 0/1
/// ground-truth mask. Real images use an all-zero truth mask.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, mask_pred: Var, mask_true: &Tensor<T>) -> Result<Var> {
    if tape.value(mask_pred).shape() != mask_true.shape() {
        return Err(Error::Shape(format!(
            "mask shapes disagree: predicted {:?}, truth {:?}",
            tape.value(mask_pred).shape(),
            mask_true.shape()
        )));
    }
    if mask_true
        .data()
        .iter()
        .any(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Data("ground-truth mask must be binary".into()));
    }
    let eps = T::from_f64(PROB_EPS);
    let p = tape.clamp(mask_pred, eps, T::one() - eps);
    let ln_p = tape.ln(p);
    let q = tape.affine(p, -T::one(), T::one());
    let ln_q = tape.ln(q);
    let m = tape.input(mask_true.clone());
    let m_inv = tape.affine(m, -T::one(), T::one());
    let pos = tape.mul(m, ln_p)?;
    let neg = tape.mul(m_inv, ln_q)?;
    let total = tape.add(pos, neg)?;
    let mean = tape.mean(total);
    Ok(tape.affine(mean, -T::one(), T::zero()))
}

/// Cosine distance `1 - cos(a, b)` between two equally sized vectors.
fn cosine_distance<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let aa = tape.dot(a, a)?;
    let bb = tape.dot(b, b)?;
    if tape.value(aa).item()? == T::zero() || tape.value(bb).item()? == T::zero() {
        return Err(Error::Numeric(
            "zero-norm feature vector: cosine distance undefined".into(),
        ));
    }
    let ab = tape.dot(a, b)?;
    let na = tape.sqrt(aa);
    let nb = tape.sqrt(bb);
    let denom = tape.mul(na, nb)?;
    let cos = tape.div(ab, denom)?;
    Ok(tape.affine(cos, -T::one(), T::one()))
}

fn mean_of_scalars<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.affine(acc, T::from_f64(1.0 / vars.len() as f64), T::zero()))
}

/// Batch contrastive term: pulls real-sample features toward the batch's
/// real-feature center, pushes fake-sample features away.
///
/// `features` pairs each sample's feature vector with its label (0 = real).
/// Returns `None` when the batch holds no real samples (the term is skipped),
/// and omits the second term when there are no fakes.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    features: &[(Var, u8)],
) -> Result<Option<Var>> {
    for (_, label) in features {
        if *label > 1 {
            return Err(Error::Data(format!("label must be 0 or 1, got {label}")));
        }
    }
    let pos: Vec<Var> = features.iter().filter(|(_, l)| *l == 0).map(|(v, _)| *v).collect();
    let neg: Vec<Var> = features.iter().filter(|(_, l)| *l == 1).map(|(v, _)| *v).collect();
    if pos.is_empty() {
        return Ok(None);
    }
    let mut center = pos[0];
    for &v in &pos[1..] {
        center = tape.add(center, v)?;
    }
    let center = tape.affine(center, T::from_f64(1.0 / pos.len() as f64), T::zero());
    let pos_d: Vec<Var> = pos
        .iter()
        .map(|&f| cosine_distance(tape, f, center))
        .collect::<Result<_>>()?;
    let pos_term = mean_of_scalars(tape, &pos_d)?;
    if neg.is_empty() {
        return Ok(Some(pos_term));
    }
    let neg_d: Vec<Var> = neg
        .iter()
        .map(|&f| cosine_distance(tape, f, center))
        .collect::<Result<_>>()?;
    let neg_term = mean_of_scalars(tape, &neg_d)?;
    Ok(Some(tape.sub(pos_term, neg_term)?))
}

/// Weighted combination: `cls + lambda_seg * seg + lambda_con * con`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cls: Var,
    seg: Var,
    con: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let seg_w = tape.affine(seg, T::from_f64(weights.lambda_seg), T::zero());
    let mut total = tape.add(cls, seg_w)?;
    if let Some(con) = con {
        let con_w = tape.affine(con, T::from_f64(weights.lambda_con), T::zero());
        total = tape.add(total, con_w)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, DEFAULT_EPS};
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn scalar_loss(y_hat: f64, label: u8) -> f64 {
        let mut tape = Tape::<f64>::new();
        let p = tape.scalar(y_hat);
        let l = cls_loss(&mut tape, p, label).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn cls_loss_analytic_values() {
        assert!(scalar_loss(1.0 - PROB_EPS, 1) < 1e-6);
        assert!((scalar_loss(0.5, 0) - LN2).abs() < 1e-9);
        assert!((scalar_loss(0.5, 1) - LN2).abs() < 1e-9);
        assert!(scalar_loss(0.999999999, 0).is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let y_hat: f64 = rng.gen_range(0.01..0.99);
            for label in [0u8, 1] {
                let direct = -((label as f64) * y_hat.ln() + (1.0 - label as f64) * (1.0 - y_hat).ln());
                assert!((scalar_loss(y_hat, label) - direct).abs() < 1e-12);
                assert!(scalar_loss(y_hat, label) >= 0.0);
            }
        }
    }

    #[test]
    fn cls_loss_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let p = tape.scalar(0.5);
        assert!(matches!(cls_loss(&mut tape, p, 2), Err(Error::Data(_))));
    }

    #[test]
    fn seg_loss_analytic_values_and_oracle() {
        let shape = [4usize, 4];
        let truth = Tensor::<f64>::from_fn(&shape, |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        // near-perfect prediction
        let perfect = Tensor::from_fn(&shape, |i| {
            if truth.data()[i] == 1.0 { 1.0 - 1e-9 } else { 1e-9 }
        });
        let mut tape = Tape::new();
        let p = tape.input(perfect);
        let l = seg_loss(&mut tape, p, &truth).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);
        // uniform 0.5 prediction
        let mut tape = Tape::new();
        let half = tape.input(Tensor::filled(&shape, 0.5));
        let l = seg_loss(&mut tape, half, &truth).unwrap();
        assert!((tape.value(l).item().unwrap() - LN2).abs() < 1e-9);
        // random pair against a per-pixel loop
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = Tensor::from_fn(&shape, |_| rng.gen_range(0.05..0.95));
        let mut tape = Tape::new();
        let pv = tape.input(pred.clone());
        let l = seg_loss(&mut tape, pv, &truth).unwrap();
        let mut acc = 0.0;
        for i in 0..pred.numel() {
            let (m, p) = (truth.data()[i], pred.data()[i]);
            acc -= m * p.ln() + (1.0 - m) * (1.0 - p).ln();
        }
        acc /= pred.numel() as f64;
        assert!((tape.value(l).item().unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_non_binary_truth() {
        let truth = Tensor::<f64>::filled(&[2, 2], 0.5);
        let mut tape = Tape::new();
        let p = tape.input(Tensor::filled(&[2, 2], 0.5));
        assert!(matches!(seg_loss(&mut tape, p, &truth), Err(Error::Data(_))));
    }

    fn feat_var(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.input(Tensor::from_vec(&[v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn contrastive_identical_reals_have_zero_first_term() {
        let mut tape = Tape::new();
        let f = [0.5, -0.25, 1.0];
        let r1 = feat_var(&mut tape, &f);
        let r2 = feat_var(&mut tape, &f);
        let n1 = feat_var(&mut tape, &[1.0, 1.0, 0.0]);
        let n2 = feat_var(&mut tape, &[-0.5, 0.75, 0.25]);
        let loss = contrastive_loss(&mut tape, &[(r1, 0), (r2, 0), (n1, 1), (n2, 1)])
            .unwrap()
            .unwrap();
        // center == every real feature, so the loss is minus the mean fake
        // distance to that center.
        let d = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb)
        };
        let expect = -(d(&[1.0, 1.0, 0.0], &f) + d(&[-0.5, 0.75, 0.25], &f)) / 2.0;
        assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn contrastive_orthogonal_fakes_score_minus_one() {
        let mut tape = Tape::new();
        let r = feat_var(&mut tape, &[2.0, 0.0]);
        let n = feat_var(&mut tape, &[0.0, 3.0]);
        let loss = contrastive_loss(&mut tape, &[(r, 0), (n, 1)]).unwrap().unwrap();
        assert!((tape.value(loss).item().unwrap() - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 5;
        let feats: Vec<(Vec<f64>, u8)> = (0..8)
            .map(|i| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (v, (i % 3 == 0) as u8)
            })
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<(Var, u8)> = feats
            .iter()
            .map(|(v, l)| (feat_var(&mut tape, v), *l))
            .collect();
        let loss = contrastive_loss(&mut tape, &vars).unwrap().unwrap();

        // oracle: explicit center, explicit cosine loops
        let pos: Vec<&Vec<f64>> = feats.iter().filter(|(_, l)| *l == 0).map(|(v, _)| v).collect();
        let neg: Vec<&Vec<f64>> = feats.iter().filter(|(_, l)| *l == 1).map(|(v, _)| v).collect();
        let mut center = vec![0.0; dim];
        for p in &pos {
            for j in 0..dim {
                center[j] += p[j] / pos.len() as f64;
            }
        }
        let d = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb)
        };
        let mp: f64 = pos.iter().map(|p| d(p, &center)).sum::<f64>() / pos.len() as f64;
        let mn: f64 = neg.iter().map(|q| d(q, &center)).sum::<f64>() / neg.len() as f64;
        assert!((tape.value(loss).item().unwrap() - (mp - mn)).abs() < 1e-6);
    }

    #[test]
    fn contrastive_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<(Vec<f64>, u8)> = (0..6)
            .map(|i| {
                let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (v, (i % 2) as u8)
            })
            .collect();
        let eval = |scale: f64| {
            let mut tape = Tape::new();
            let vars: Vec<(Var, u8)> = feats
                .iter()
                .map(|(v, l)| {
                    let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
                    (feat_var(&mut tape, &scaled), *l)
                })
                .collect();
            let loss = contrastive_loss(&mut tape, &vars).unwrap().unwrap();
            tape.value(loss).item().unwrap()
        };
        assert!((eval(1.0) - eval(37.5)).abs() < 1e-6);
        assert!((eval(1.0) - eval(0.004)).abs() < 1e-6);
    }

    #[test]
    fn contrastive_skips_and_degenerates() {
        let mut tape = Tape::new();
        let n = feat_var(&mut tape, &[1.0, 2.0]);
        assert!(contrastive_loss(&mut tape, &[(n, 1)]).unwrap().is_none());
        let r = feat_var(&mut tape, &[1.0, 0.0]);
        let only_real = contrastive_loss(&mut tape, &[(r, 0)]).unwrap().unwrap();
        assert!((tape.value(only_real).item().unwrap()).abs() < 1e-12);
        let z = feat_var(&mut tape, &[0.0, 0.0]);
        assert!(matches!(
            contrastive_loss(&mut tape, &[(z, 0)]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::<f64>::new();
        let cls = tape.scalar(0.8);
        let seg = tape.scalar(0.3);
        let con = tape.scalar(-0.4);
        let zero = total_loss(
            &mut tape,
            cls,
            seg,
            Some(con),
            &LossWeights { lambda_seg: 0.0, lambda_con: 0.0 },
        )
        .unwrap();
        assert!((tape.value(zero).item().unwrap() - 0.8).abs() < 1e-12);
        let defaults = total_loss(&mut tape, cls, seg, Some(con), &LossWeights::default()).unwrap();
        assert!((tape.value(defaults).item().unwrap() - (0.8 + 0.3 + 0.001 * -0.4)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (a, b, c) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>() - 0.5);
            let (ls, lc) = (rng.gen::<f64>(), rng.gen::<f64>());
            let mut tape = Tape::<f64>::new();
            let cls = tape.scalar(a);
            let seg = tape.scalar(b);
            let con = tape.scalar(c);
            let t = total_loss(&mut tape, cls, seg, Some(con), &LossWeights { lambda_seg: ls, lambda_con: lc })
                .unwrap();
            assert!((tape.value(t).item().unwrap() - (a + ls * b + lc * c)).abs() < 1e-12);
        }
    }

    /// Finite-difference check on all three losses together, differentiating
    /// through predictions and features registered as parameters.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let logit = store.register("logit", Tensor::from_vec(&[], vec![0.3]).unwrap()).unwrap();
        let mask_pred = store
            .register("mask", Tensor::from_fn(&[3, 3], |i| (i as f64 - 4.0) * 0.3))
            .unwrap();
        let f0 = store.register("f0", Tensor::from_vec(&[3], vec![0.6, -0.2, 0.8]).unwrap()).unwrap();
        let f1 = store.register("f1", Tensor::from_vec(&[3], vec![-0.1, 0.9, 0.2]).unwrap()).unwrap();
        let f2 = store.register("f2", Tensor::from_vec(&[3], vec![0.4, 0.4, -0.6]).unwrap()).unwrap();
        let truth = Tensor::<f64>::from_fn(&[3, 3], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let report = gradcheck(&mut store, DEFAULT_EPS, |store, tape| {
            let lv = tape.param(store, logit);
            let y_hat = tape.sigmoid(lv);
            let cls = cls_loss(tape, y_hat, 1)?;
            let mp = tape.param(store, mask_pred);
            let probs = tape.sigmoid(mp);
            let seg = seg_loss(tape, probs, &truth)?;
            let feats = vec![
                (tape.param(store, f0), 0u8),
                (tape.param(store, f1), 1u8),
                (tape.param(store, f2), 1u8),
            ];
            let con = contrastive_loss(tape, &feats)?;
            total_loss(tape, cls, seg, con, &LossWeights::default())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    /// Gradient descent on a frozen toy feature set strictly tightens the
    /// real cluster for the first ten steps.
    #[test]
    fn contrastive_descent_pulls_reals_toward_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dim = 4;
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<_> = (0..6)
            .map(|i| {
                let t = Tensor::from_fn(&[dim], |_| rng.gen_range(-1.0..1.0));
                (store.register(format!("f{i}"), t).unwrap(), (i >= 3) as u8)
            })
            .collect();
        let mean_pos_distance = |store: &ParamStore<f64>| {
            let pos: Vec<&[f64]> = ids
                .iter()
                .filter(|(_, l)| *l == 0)
                .map(|(id, _)| store.get(*id).data())
                .collect();
            let mut center = vec![0.0; dim];
            for p in &pos {
                for j in 0..dim {
                    center[j] += p[j] / pos.len() as f64;
                }
            }
            pos.iter()
                .map(|p| {
                    let dot: f64 = p.iter().zip(&center).map(|(a, b)| a * b).sum();
                    let np: f64 = p.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nc: f64 = center.iter().map(|a| a * a).sum::<f64>().sqrt();
                    1.0 - dot / (np * nc)
                })
                .sum::<f64>()
                / pos.len() as f64
        };
        let mut prev = mean_pos_distance(&store);
        for _ in 0..10 {
            store.zero_grads();
            let mut tape = Tape::new();
            let feats: Vec<(Var, u8)> = ids.iter().map(|(id, l)| (tape.param(&store, *id), *l)).collect();
            let loss = contrastive_loss(&mut tape, &feats).unwrap().unwrap();
            tape.backward(loss, &mut store).unwrap();
            for (id, _) in &ids {
                let grad = store.get(*id).grad_or_zeros();
                let t = store.get_mut(*id);
                for (v, g) in t.data_mut().iter_mut().zip(grad) {
                    *v -= 0.05 * g;
                }
            }
            let now = mean_pos_distance(&store);
            assert!(now < prev, "mean positive distance did not decrease: {now} vs {prev}");
            prev = now;
        }
    }
}
