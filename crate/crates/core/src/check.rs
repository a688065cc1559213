//! Central finite-difference gradient checking, used as the independent
//! oracle for every differentiable op in the test suites.

use crate::graph::{GradStore, Graph};
use crate::nn::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference gradient of `f` with respect to every value
/// in `params`, using step `h`. `f` must be a pure function of the set.
pub fn finite_diff_grads(
    params: &mut ParamSet,
    h: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> Vec<Tensor> {
    let ids: Vec<ParamId> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let len = params.get(id).len();
        let shape = params.get(id).shape().to_vec();
        let mut grad = vec![0.0; len];
        for i in 0..len {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let plus = f(params);
            params.get_mut(id).data_mut()[i] = orig - h;
            let minus = f(params);
            params.get_mut(id).data_mut()[i] = orig;
            grad[i] = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::new(shape, grad).unwrap());
    }
    out
}

/// Compare autodiff gradients against central finite differences for a
/// scalar loss built by `build`. Panics with a description of the first
/// entry outside `rtol`/`atol`.
pub fn assert_grads_match(
    params: &mut ParamSet,
    rtol: f64,
    atol: f64,
    mut build: impl FnMut(&mut Graph, &ParamSet) -> crate::graph::Var,
) {
    // Autodiff pass.
    let mut g = Graph::new();
    let loss = build(&mut g, params);
    let mut store = GradStore::new(params);
    g.backward(loss, &mut store).expect("backward");

    // Finite-difference pass.
    let fd = finite_diff_grads(params, FD_STEP, |ps| {
        let mut g = Graph::new();
        let loss = build(&mut g, ps);
        g.value(loss).item()
    });

    for (id, fd_grad) in params.ids().zip(&fd) {
        let zero = Tensor::zeros(fd_grad.shape());
        let ad_grad = store.get(id).unwrap_or(&zero);
        for (i, (a, b)) in ad_grad.data().iter().zip(fd_grad.data()).enumerate() {
            let tol = atol + rtol * b.abs().max(a.abs());
            assert!(
                (a - b).abs() <= tol,
                "gradient mismatch for param {} ({}) entry {}: autodiff {} vs finite-diff {}",
                id.index(),
                params.name(id),
                i,
                a,
                b
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_mlp_matches_finite_differences() {
        // Random 3-layer MLP, random input, scalar output.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut ps = ParamSet::new();
        let mlp = Mlp::new(
            &mut ps,
            &mut rng,
            "m",
            &[4, 6, 5, 3],
            Activation::Tanh,
            Activation::Identity,
        );
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        assert_grads_match(&mut ps, 1e-4, 1e-6, |g, ps| {
            let xv = g.constant(x.clone());
            let y = mlp.forward(g, ps, xv);
            let sq = g.mul(y, y);
            g.sum(sq)
        });
    }
}
