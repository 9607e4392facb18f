//! Central-difference verification of reverse-mode gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::tape::{Grads, ParamId, ParamStore};
use crate::rng;

/// Options for [`grad_check`]. `coords_per_param` caps how many coordinates
/// of each parameter tensor are probed (seeded choice); `None` probes all.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_param: None,
            seed: 0,
        }
    }
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences. Returns the max over checked coordinates of
/// `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
///
/// `loss_fn(store, with_grads)` evaluates the loss, returning gradients when
/// asked; the finite-difference probes call it value-only.
pub fn grad_check<F>(store: &mut ParamStore, loss_fn: F, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&ParamStore, bool) -> Result<(f64, Option<Grads>)>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Invalid(format!("grad_check eps {} out of range", opts.eps)));
    }
    let (loss0, grads) = loss_fn(store, true)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss0}")));
    }
    let grads = grads.ok_or_else(|| Error::Invalid("loss_fn returned no gradients".into()))?;
    if !grads.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut r = rng::stream(opts.seed, "grad-check");
    let mut max_rel: f64 = 0.0;
    for slot in 0..store.len() {
        let len = store.get(ParamId(slot)).len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(cap) if cap < len => (0..cap).map(|_| r.gen_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let orig = store.get(ParamId(slot)).data[i];
            store.get_mut(ParamId(slot)).data[i] = orig + opts.eps;
            let (lp, _) = loss_fn(store, false)?;
            store.get_mut(ParamId(slot)).data[i] = orig - opts.eps;
            let (lm, _) = loss_fn(store, false)?;
            store.get_mut(ParamId(slot)).data[i] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::NonFinite("finite-difference probe".into()));
            }
            let fd = (lp - lm) / (2.0 * opts.eps);
            let analytic = grads.get(ParamId(slot)).map(|g| g[i]).unwrap_or(0.0);
            let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::tape::Tape;
    use crate::math::tensor::Tensor;

    #[test]
    fn sum_of_weights_has_all_ones_gradient() {
        let mut store = ParamStore::new();
        store.add(
            "w",
            Tensor::new(vec![2, 3], vec![0.4, -1.0, 2.0, 0.1, 0.0, 3.0]).unwrap(),
        );
        let err = grad_check(
            &mut store,
            |s, with_grads| {
                let mut tape = Tape::new(s);
                let w = tape.param(ParamId(0));
                let loss = tape.sum_all(w);
                let value = tape.scalar_value(loss);
                let grads = if with_grads {
                    let bp = tape.backward_scalar(loss)?;
                    let mut g = Grads::new(s.len());
                    tape.param_grads_into(&bp, &mut g);
                    Some(g)
                } else {
                    None
                };
                Ok((value, grads))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn x_squared_at_three() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(3.0));
        let err = grad_check(
            &mut store,
            |s, with_grads| {
                let mut tape = Tape::new(s);
                let x = tape.param(ParamId(0));
                let y = tape.mul(x, x);
                let value = tape.scalar_value(y);
                let grads = if with_grads {
                    let bp = tape.backward_scalar(y)?;
                    let mut g = Grads::new(s.len());
                    tape.param_grads_into(&bp, &mut g);
                    assert!((g.get(ParamId(0)).unwrap()[0] - 6.0).abs() < 1e-12);
                    Some(g)
                } else {
                    None
                };
                Ok((value, grads))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0));
        let r = grad_check(
            &mut store,
            |_, _| Ok((0.0, Some(Grads::new(1)))),
            GradCheckOptions {
                eps: 1e-2,
                ..Default::default()
            },
        );
        assert!(r.is_err());
    }
}
