//! Central finite-difference verification of tape gradients.
//!
//! Runs in f64: perturbs every parameter component by `±eps`, compares the
//! symmetric difference quotient against the tape gradient, and reports the
//! worst relative error (with a unit floor on the denominator so near-zero
//! gradients are compared absolutely).

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Spec'd perturbation for 64-bit checking.
pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub components: usize,
}

/// Checks d(loss)/d(parameter) for every component of every parameter in the
/// store against central finite differences.
///
/// `forward` must rebuild the same scalar loss from the store's current
/// values each time it is called.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, eps: f64, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = forward(store, &mut tape)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.get(id).grad_or_zeros()).collect();
    drop(tape);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(store, &mut tape)?;
        tape.value(loss).item()
    };

    let mut max_rel = 0.0f64;
    let mut components = 0usize;
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let lp = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let lm = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let ad = analytic[id.index()][i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            components += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        components,
    })
}

/// Deterministic probe weights for reducing a block output to a scalar loss:
/// `loss = sum(w ⊙ out)` with fixed pseudo-random `w`, so every output
/// element influences the check.
pub fn probe_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    let probe = Tensor::from_fn(&shape, |_| {
        // splitmix64 step, mapped to (-1, 1)
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 52) as f64 * 2.0 - 1.0
    });
    let w = tape.input(probe);
    let prod = tape.mul(w, out)?;
    Ok(tape.sum(prod))
}
