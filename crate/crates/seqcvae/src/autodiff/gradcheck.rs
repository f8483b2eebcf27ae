use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::params::ParameterStore;
use super::tape::{NodeId, Tape};

/// Per-parameter max relative error between analytic and central
/// finite-difference gradients.
#[derive(Debug)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }
}

fn eval_loss<F>(loss_fn: &F, params: &ParameterStore) -> Result<f64>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    Ok(tape.value(loss).item())
}

/// Check analytic gradients of a deterministic loss against central finite
/// differences. Noise sources inside `loss_fn` must be fixed (seeded or
/// precomputed); non-determinism is detected and rejected.
pub fn grad_check<F>(loss_fn: F, params: &ParameterStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<NodeId>,
{
    grad_check_filtered(loss_fn, params, eps, |_| true)
}

/// Like [`grad_check`] but only perturbs parameters accepted by `include`.
/// Frozen parameters still influence the loss value, so they must be
/// excluded here rather than compared against a zero analytic gradient.
pub fn grad_check_filtered<F, P>(
    loss_fn: F,
    params: &ParameterStore,
    eps: f64,
    include: P,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<NodeId>,
    P: Fn(&str) -> bool,
{
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let l0 = tape.value(loss).item();
    if (eval_loss(&loss_fn, params)? - l0).abs() > 0.0 {
        return Err(Error::NonDeterministicLoss);
    }
    let grads = tape.backward(loss)?;

    let mut per_param = BTreeMap::new();
    let mut work = params.clone();
    let names: Vec<String> = params.names().filter(|n| include(n)).map(String::from).collect();
    for name in names {
        let n = params.get(&name).numel();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = params.get(&name).data()[i];
            work.get_mut(&name).data_mut()[i] = orig + eps;
            let lp = eval_loss(&loss_fn, &work)?;
            work.get_mut(&name).data_mut()[i] = orig - eps;
            let lm = eval_loss(&loss_fn, &work)?;
            work.get_mut(&name).data_mut()[i] = orig;

            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            // the denominator floor converts to an absolute tolerance for
            // gradients below 1e-6, where relative comparison would only
            // amplify finite-difference roundoff
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        per_param.insert(name, worst);
    }
    Ok(GradCheckReport { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Init;
    use crate::autodiff::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn linear_regression_gradient_matches_closed_form() {
        // loss = (w·x − y)², dL/dw = 2(w·x − y)x
        let mut params = ParameterStore::new(1);
        params.create("w", vec![1], Init::Constant(0.7));
        let (x, y) = (1.3, 2.0);
        let report = grad_check(
            |p, tape| {
                let w = p.inject(tape, "w", false);
                let xs = tape.constant(Tensor::vector(vec![x]));
                let pred = tape.mul(w, xs)?;
                let yt = tape.constant(Tensor::vector(vec![y]));
                let err = tape.sub(pred, yt)?;
                tape.sq_l2(err)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-7, "{report:?}");
    }

    #[test]
    fn random_op_chain_matches_finite_differences() {
        let mut rng = crate::rng::stream_rng(3, "gradcheck-test");
        for trial in 0..10 {
            let mut params = ParameterStore::new(trial);
            params.create("w", vec![3, 4], Init::FanIn(4));
            params.create("b", vec![3], Init::FanIn(3));
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = grad_check(
                |p, tape| {
                    let w = p.inject(tape, "w", false);
                    let b = p.inject(tape, "b", false);
                    let xs = tape.constant(Tensor::vector(x.clone()));
                    let h = tape.matmul(w, xs)?;
                    let h = tape.add(h, b)?;
                    let h = tape.tanh(h)?;
                    tape.sq_l2(h)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(report.max_relative_error() < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let mut params = ParameterStore::new(0);
        params.create("w", vec![1], Init::Constant(1.0));
        let err = grad_check(
            |p, tape| {
                counter.set(counter.get() + 1.0);
                let w = p.inject(tape, "w", false);
                let c = tape.constant(Tensor::vector(vec![counter.get()]));
                let y = tape.mul(w, c)?;
                tape.sum(y)
            },
            &params,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministicLoss));
    }
}
