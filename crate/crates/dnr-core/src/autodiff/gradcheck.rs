//! Finite-difference verification of tape gradients.

use super::{NodeId, ParamStore, Tape};
use crate::error::Result;

/// Compare analytic gradients against central differences for every
/// coordinate of every parameter in the store.
///
/// `build` must be deterministic: it is re-run twice per coordinate with a
/// perturbed store, so any randomness has to be fixed outside the closure.
/// Returns the maximum of |analytic - fd| / max(1, |fd|) over coordinates.
pub fn grad_check<F>(mut build: F, store: &mut ParamStore, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.scalar_value(loss)?;
    tape.backward(loss, store)?;

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let analytic: Vec<(String, Vec<f64>)> = names
        .iter()
        .map(|n| Ok((n.clone(), store.grad(n)?.as_slice().to_vec())))
        .collect::<Result<_>>()?;

    let eval = |store: &ParamStore, build: &mut F| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, store)?;
        t.scalar_value(l)
    };

    let mut max_rel: f64 = 0.0;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let orig = store.value(name)?.as_slice()[i];
            store.value_mut(name)?.as_mut_slice()[i] = orig + step;
            let plus = eval(store, &mut build)?;
            store.value_mut(name)?.as_mut_slice()[i] = orig - step;
            let minus = eval(store, &mut build)?;
            store.value_mut(name)?.as_mut_slice()[i] = orig;

            let fd = (plus - minus) / (2.0 * step);
            let rel = (grads[i] - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    store.zero_grads();
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2 {
        Array2::from_fn(rows, cols, |_, _| (rng.random::<f64>() - 0.5) * 2.0 * scale)
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // Deliberately check a function the tape cannot represent exactly:
        // perturb the analytic result by fudging the loss scale between
        // build calls would be invisible, so instead verify the checker
        // flags a mismatch when the closure is non-deterministic.
        let mut store = ParamStore::new();
        store.insert("w", Array2::scalar(1.0)).unwrap();
        let mut flip = 0;
        let err = grad_check(
            |t, s| {
                flip += 1;
                let w = t.param(s, "w")?;
                // alternate the loss scale between calls
                t.scale(w, if flip % 2 == 0 { 1.0 } else { 3.0 })
            },
            &mut store,
            1e-4,
        )
        .unwrap();
        assert!(err > 0.1, "expected a large discrepancy, got {err}");
    }

    #[test]
    fn passes_on_a_small_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.insert("w1", randn(&mut rng, 3, 4, 0.8)).unwrap();
        store.insert("b1", randn(&mut rng, 1, 4, 0.2)).unwrap();
        store.insert("w2", randn(&mut rng, 4, 1, 0.8)).unwrap();
        let x = randn(&mut rng, 5, 3, 1.0);
        let err = grad_check(
            |t, s| {
                let x = t.constant(x.clone())?;
                let w1 = t.param(s, "w1")?;
                let b1 = t.param(s, "b1")?;
                let w2 = t.param(s, "w2")?;
                let h = t.matmul(x, w1)?;
                let b = t.repeat_rows(b1, 5)?;
                let h = t.add(h, b)?;
                let h = t.relu(h)?;
                let out = t.matmul(h, w2)?;
                let out = t.sigmoid(out)?;
                t.mean(out)
            },
            &mut store,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "composite gradcheck error {err}");
        assert!(store.grads_all_zero());
    }
}
