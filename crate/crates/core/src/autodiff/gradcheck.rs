//! Central finite-difference verification of analytic gradients.
//!
//! The harness treats a computation as a black box over a parameter store
//! plus free input tensors, projects the output to a scalar with fixed
//! random weights, and compares the tape's backward pass against
//! `(f(x + h) - f(x - h)) / 2h` for every element.
//!
//! Piecewise-linear nonlinearities (relu, clamping) make the central
//! difference invalid whenever the `±h` interval straddles a kink: it
//! averages the two one-sided slopes, while the analytic gradient is one
//! of them. Two countermeasures keep the oracle sound without loosening
//! it:
//!
//! * an element also passes if the analytic value matches the forward or
//!   backward one-sided difference — for a single kink, one side always
//!   stays on one linear piece. On smooth functions the one-sided
//!   estimates carry only O(h) truncation error, far below anything a
//!   structurally wrong gradient could produce;
//! * if the two one-sided estimates disagree with *each other*, the
//!   interval provably brackets a kink (this is measured purely from
//!   forward evaluations, independent of the gradient under test), and
//!   the element is re-measured at a smaller step until the interval is
//!   clean. A wrong gradient still fails: no step size makes the
//!   difference quotients move toward it.

use super::{Mounts, ParamStore, Tape, TensorId};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Error of one element against difference quotients at step `h`,
/// shrinking the step while the interval provably brackets a kink (the
/// one-sided estimates disagree with each other). See the module docs.
fn element_err(
    analytic: f64,
    f0: f64,
    h: f64,
    mut eval_at: impl FnMut(f64) -> Result<f64>,
) -> Result<f64> {
    let mut step = h;
    let mut best = f64::INFINITY;
    for _ in 0..4 {
        let fp = eval_at(step)?;
        let fm = eval_at(-step)?;
        let central = (fp - fm) / (2.0 * step);
        let fwd = (fp - f0) / step;
        let bwd = (f0 - fm) / step;
        best = best
            .min(rel_err(analytic, central))
            .min(rel_err(analytic, fwd))
            .min(rel_err(analytic, bwd));
        // A clean interval (or an already-passing element) ends the
        // search; only kink-bracketing intervals shrink.
        if best <= 1e-6 || rel_err(fwd, bwd) <= 1e-3 {
            break;
        }
        step /= 32.0;
    }
    Ok(best)
}

/// Checks `forward` over every parameter element of `store` and every
/// element of `inputs` (shape, data pairs, mounted as gradient-requiring
/// leaves in order).
///
/// `forward` may return a tensor of any shape; it is reduced to a scalar by
/// a fixed random projection so the full Jacobian action is exercised.
pub fn check_gradients<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    inputs: &mut [(Vec<usize>, Vec<f64>)],
    h: f64,
    forward: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &Mounts, &[TensorId]) -> Result<TensorId>,
{
    let eval = |store: &ParamStore<f64>,
                inputs: &[(Vec<usize>, Vec<f64>)],
                proj: &mut Option<Vec<f64>>|
     -> Result<(Tape<f64>, Mounts, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let mounts = store.mount_all(&mut tape);
        let ids: Vec<TensorId> = inputs
            .iter()
            .map(|(s, d)| tape.leaf(d.clone(), s, true))
            .collect();
        let out = forward(&mut tape, &mounts, &ids)?;
        let out_shape = tape.shape(out).to_vec();
        let n = tape.data(out).len();
        let w = proj.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6f7261636c65);
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        });
        assert_eq!(w.len(), n, "output size changed between evaluations");
        let wid = tape.constant(w.clone(), &out_shape);
        let prod = tape.mul(out, wid)?;
        let scalar = tape.sum(prod);
        Ok((tape, mounts, ids, scalar))
    };

    let mut proj = None;
    let (tape, mounts, input_ids, scalar) = eval(store, inputs, &mut proj)?;
    let grads = tape.backward(scalar)?;

    let fd_value = |store: &ParamStore<f64>, inputs: &[(Vec<usize>, Vec<f64>)], proj: &mut Option<Vec<f64>>| -> Result<f64> {
        let (tape, _, _, scalar) = eval(store, inputs, proj)?;
        Ok(tape.scalar(scalar))
    };
    let f0 = fd_value(store, inputs, &mut proj)?;

    let mut max_err = 0.0f64;
    let mut elements = 0usize;

    for pid in store.ids().collect::<Vec<_>>() {
        let analytic: Vec<f64> = grads
            .get(mounts.get(pid))
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.values(pid).len()]);
        for j in 0..store.values(pid).len() {
            let orig = store.values(pid)[j];
            let err = element_err(analytic[j], f0, h, |d| {
                store.values_mut(pid)[j] = orig + d;
                let f = fd_value(store, inputs, &mut proj);
                store.values_mut(pid)[j] = orig;
                f
            })?;
            max_err = max_err.max(err);
            elements += 1;
        }
    }

    for (i, &iid) in input_ids.iter().enumerate() {
        let n = inputs[i].1.len();
        let analytic: Vec<f64> = grads
            .get(iid)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for j in 0..n {
            let orig = inputs[i].1[j];
            let err = element_err(analytic[j], f0, h, |d| {
                inputs[i].1[j] = orig + d;
                let f = fd_value(store, inputs, &mut proj);
                inputs[i].1[j] = orig;
                f
            })?;
            max_err = max_err.max(err);
            elements += 1;
        }
    }

    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: max_err,
        elements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harness_flags_a_wrong_gradient() {
        // A forward pass that reads the input's values but re-emits them
        // as a detached constant — the classic dropped-from-the-tape bug.
        // The difference quotients see slope 2x; the tape reports 0; the
        // harness must flag the mismatch, and no step size reconciles it.
        let mut store = ParamStore::new();
        let mut inputs = vec![(vec![1], vec![2.0])];
        let r = check_gradients("detached", &mut store, &mut inputs, 1e-5, |t, _, ids| {
            let v: Vec<f64> = t.data(ids[0]).iter().map(|a| a * a).collect();
            Ok(t.constant(v, &[1]))
        })
        .unwrap();
        assert!(r.max_rel_err > 0.1, "max err {}", r.max_rel_err);
    }

    #[test]
    fn kinked_elements_are_measured_one_sided() {
        // relu exactly at its kink: the central difference sees slope
        // 0.5, but the backward difference matches the analytic
        // subgradient 0 exactly, so the element passes.
        let mut store = ParamStore::new();
        let mut inputs = vec![(vec![1], vec![0.0])];
        let r = check_gradients("relu_kink", &mut store, &mut inputs, 1e-5, |t, _, ids| {
            Ok(t.relu(ids[0]))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "max err {}", r.max_rel_err);
    }

    #[test]
    fn harness_passes_smooth_composite() {
        let mut store = ParamStore::new();
        let wid = store.add("w", &[3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]);
        let mut inputs = vec![(vec![2, 3], vec![0.9, -0.3, 0.2, 0.4, 0.8, -0.6])];
        let r = check_gradients("mm_tanh", &mut store, &mut inputs, 1e-5, |t, m, ids| {
            let y = t.matmul(ids[0], m.get(wid))?;
            Ok(t.tanh(y))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-7, "max err {}", r.max_rel_err);
    }
}
