use crate::error::{AktError, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Central-difference gradient of a scalar function of the parameters.
pub fn numeric_gradient<S, F>(params: &mut ParamStore<S>, epsilon: S, mut f: F) -> Result<Vec<Tensor<S>>>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>) -> Result<S>,
{
    let two = S::one() + S::one();
    let ids: Vec<ParamId> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mut g = Tensor::zeros(params.get(id).shape());
        for j in 0..g.len() {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + epsilon;
            let up = f(params);
            params.get_mut(id).data_mut()[j] = orig - epsilon;
            let down = f(params);
            params.get_mut(id).data_mut()[j] = orig;
            let (up, down) = (up?, down?);
            if !up.is_finite() || !down.is_finite() {
                return Err(AktError::Numerical(format!("non-finite value while perturbing {}[{j}]", params.name(id))));
            }
            g.data_mut()[j] = (up - down) / (two * epsilon);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest relative disagreement between the tape gradient of `f` and its
/// central-difference estimate, over every scalar in `params`:
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` records its computation on the graph it is handed and returns the
/// scalar output node.
pub fn grad_check<S, F>(params: &mut ParamStore<S>, epsilon: S, mut f: F) -> Result<S>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>, &mut Graph<S>) -> Result<Var>,
{
    let mut graph = Graph::new();
    let out = f(params, &mut graph)?;
    if !graph.value(out).all_finite() {
        return Err(AktError::Numerical("non-finite function value".into()));
    }
    graph.backward(out)?;
    let analytic = graph.param_grads(params.len());

    let numeric = numeric_gradient(params, epsilon, |p| {
        let mut g = Graph::new();
        let v = f(p, &mut g)?;
        Ok(g.value(v).data()[0])
    })?;

    let floor = S::from_f64_lossy(1e-8);
    let mut worst = S::zero();
    for (a, n) in analytic.iter().zip(&numeric) {
        for (j, &nv) in n.data().iter().enumerate() {
            let av = a.as_ref().map_or(S::zero(), |t| t.data()[j]);
            let err = (av - nv).abs() / av.abs().max(nv.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::xavier_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let err = grad_check(&mut store, 1e-5, |p, g| {
            let wv = g.param(p, w);
            let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
            g.matmul(wv, x)
        })
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", xavier_init(&[3, 4], &mut rng));
        let b = store.add("b", xavier_init(&[4, 2], &mut rng));
        let err = grad_check(&mut store, 1e-6, |p, g| {
            let (av, bv) = (g.param(p, a), g.param(p, b));
            let c = g.matmul(av, bv)?;
            let sq = g.mul(c, c)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn softmax_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", xavier_init(&[3, 4], &mut rng));
        let w = store.add("w", xavier_init(&[3, 4], &mut rng));
        let mask = vec![true, false, true, true, true, true, false, false, true, true, true, true];
        let err = grad_check(&mut store, 1e-5, |p, g| {
            let (xv, wv) = (g.param(p, x), g.param(p, w));
            let s = g.masked_softmax(xv, &mask)?;
            let weighted = g.mul(s, wv)?;
            Ok(g.sum(weighted))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(1.0));
        let res = grad_check(&mut store, 1e-5, |p, g| {
            let wv = g.param(p, w);
            Ok(g.scale(wv, f64::INFINITY))
        });
        assert!(matches!(res, Err(AktError::Numerical(_))));
    }
}
