//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over its sampled coordinates)`.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Compares backward against `(L(w + h) - L(w - h)) / 2h` on up to
/// `coords` randomly chosen coordinates per parameter.
///
/// `build` must be a pure function of the parameters: every evaluation gets a
/// train graph seeded identically, so dropout masks repeat. A build whose
/// loss differs between two unperturbed evaluations is rejected.
pub fn grad_check<T, F>(params: &mut ParamStore<T>, build: F, step: f64, coords: usize, seed: u64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<NodeId>,
{
    let graph_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let eval = |p: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::train(graph_seed);
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).item().as_f64())
    };

    let mut g = Graph::train(graph_seed);
    let loss = build(&mut g, params)?;
    let base = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NondeterministicForward(format!("{base} vs {again}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = T::lit(step);
    let mut per_param = Vec::new();
    for id in params.ids().collect::<Vec<_>>() {
        let n = params.value(id).len();
        let analytic = grads.get(params.id(), id).map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut worst = 0.0f64;
        for i in sample(&mut rng, n, coords.min(n)).into_iter() {
            let orig = params.value(id).data()[i];
            params.param_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(params);
            params.param_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(params);
            params.param_mut(id).value.data_mut()[i] = orig;
            let fd = (plus? - minus?) / (2.0 * step);
            worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
        }
        per_param.push((params.param(id).name.clone(), worst));
    }
    Ok(GradCheckReport { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    #[test]
    fn identity_network_has_zero_error() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::from_fn(vec![4], |i| i as f64 * 0.25));
        let rep = grad_check(&mut s, |g, p| {
            let w = g.param(p, crate::params::ParamId(0));
            Ok(g.sum(w))
        }, 1e-3, 4, 1).unwrap();
        assert!(rep.max_error() < 1e-12);
    }

    #[test]
    fn nondeterministic_build_is_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::full(vec![2], 1.0));
        let calls = Cell::new(0.0);
        let res = grad_check(
            &mut s,
            |g, p| {
                calls.set(calls.get() + 1.0);
                let w = g.param(p, crate::params::ParamId(0));
                let s = g.sum(w);
                Ok(g.scale(s, calls.get()))
            },
            1e-3,
            2,
            1,
        );
        assert!(matches!(res, Err(Error::NondeterministicForward(_))));
    }
}
