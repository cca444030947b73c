//! Central-difference gradient validation for any loss over a `ParamStore`.

use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub at_param: String,
    pub at_index: usize,
}

/// Compare analytic gradients against central differences for every scalar
/// parameter. The closure must zero grads, evaluate the loss, and populate
/// grads as a side effect (extra grad work during perturbed evaluations is
/// ignored). Reports the worst relative error and where it occurred; never
/// fails.
pub fn finite_diff_check<F>(store: &mut ParamStore, mut loss_with_grad: F, eps: f64) -> FdReport
where
    F: FnMut(&mut ParamStore) -> f64,
{
    let _ = loss_with_grad(store);
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();

    let mut report = FdReport { max_rel_err: 0.0, at_param: String::new(), at_index: 0 };
    for (pi, name) in names.iter().enumerate() {
        let n = analytic[pi].len();
        for i in 0..n {
            let orig = store.get(name).unwrap().value.data()[i];
            store.get_mut(name).unwrap().value.data_mut()[i] = orig + eps;
            let lp = loss_with_grad(store);
            store.get_mut(name).unwrap().value.data_mut()[i] = orig - eps;
            let lm = loss_with_grad(store);
            store.get_mut(name).unwrap().value.data_mut()[i] = orig;

            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[pi].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.at_param = name.clone();
                report.at_index = i;
            }
        }
    }
    report
}
