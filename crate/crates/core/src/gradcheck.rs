//! Central finite-difference gradient checking.
//!
//! The relative error of one checked tensor is
//! `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)`,
//! and a report carries the worst tensor.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Name or index of the tensor with the largest relative error.
    pub worst: String,
    pub entries_checked: usize,
}

impl GradCheckReport {
    fn absorb(&mut self, name: String, analytic: &[f64], numeric: &[f64]) {
        let scale = analytic
            .iter()
            .chain(numeric)
            .fold(1e-8f64, |m, v| m.max(v.abs()));
        let abs = analytic
            .iter()
            .zip(numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let rel = abs / scale;
        self.entries_checked += analytic.len();
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = rel.max(self.max_rel_err);
            self.worst = name;
        }
    }
}

/// Checks d f / d inputs for a scalar-valued `f` at `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> GradCheckReport
where
    F: for<'g> Fn(&[Var<'g>]) -> Var<'g>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&vars);
        let grads = g.backward(loss).expect("scalar loss");
        vars.iter().map(|v| grads.get(*v).cloned().unwrap()).collect()
    };
    let eval = |ins: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let v = f(&vars).value().item();
        v
    };
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + step;
            let up = eval(&work);
            work[ti].data_mut()[j] = orig - step;
            let down = eval(&work);
            work[ti].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        report.absorb(format!("input {ti}"), a.data(), &numeric);
    }
    report
}

/// Checks parameter gradients of `loss(graph)` for up to `per_tensor`
/// randomly chosen entries of every parameter tensor.
pub fn check_params<F>(store: &ParamStore, step: f64, per_tensor: usize, seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<'g>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::with_params(store);
        let l = loss(&g)?;
        g.backward(l)?.into_param_grads(store)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::with_params(s);
        let v = loss(&g)?.value().item();
        Ok(v)
    };
    let mut rng = Rng::new(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (id, a) in store.ids().zip(&analytic) {
        let n = a.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.below(n)).collect()
        };
        let mut an = Vec::with_capacity(picks.len());
        let mut nu = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            an.push(a.data()[j]);
            nu.push((up - down) / (2.0 * step));
        }
        report.absorb(store.name(id).to_string(), &an, &nu);
    }
    Ok(report)
}
