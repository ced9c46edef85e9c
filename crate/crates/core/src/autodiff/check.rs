//! Central finite-difference gradient checks.

use super::{Graph, Tensor, Var};
use crate::nn::Module;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

const REL_FLOOR: f64 = 1e-6;

impl GradCheckReport {
    fn new() -> Self {
        Self { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, worst: None }
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some((name.to_string(), idx));
        }
    }
}

fn eval_inputs(inputs: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.scalar_value(out)
}

/// Checks d f / d inputs for a scalar-valued graph builder.
pub fn check_inputs(inputs: &[Tensor], step: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradCheckReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].dim()));
        for (idx, a) in analytic.iter().enumerate() {
            let orig = work[k].as_slice().expect("contiguous")[idx];
            work[k].as_slice_mut().expect("contiguous")[idx] = orig + step;
            let up = eval_inputs(&work, &f);
            work[k].as_slice_mut().expect("contiguous")[idx] = orig - step;
            let down = eval_inputs(&work, &f);
            work[k].as_slice_mut().expect("contiguous")[idx] = orig;
            report.record(&format!("input{k}"), idx, *a, (up - down) / (2.0 * step));
        }
    }
    report
}

fn perturb<M: Module>(module: &mut M, target: usize, idx: usize, delta: f64) {
    let mut k = 0;
    module.visit_mut("", &mut |_, p| {
        if k == target {
            p.value.as_slice_mut().expect("contiguous")[idx] += delta;
        }
        k += 1;
    });
}

fn set_entry<M: Module>(module: &mut M, target: usize, idx: usize, value: f64) {
    let mut k = 0;
    module.visit_mut("", &mut |_, p| {
        if k == target {
            p.value.as_slice_mut().expect("contiguous")[idx] = value;
        }
        k += 1;
    });
}

/// Checks d f / d every parameter of `module`.
pub fn check_module<M: Module>(module: &mut M, step: f64, f: impl Fn(&M, &mut Graph) -> Var) -> GradCheckReport {
    let mut g = Graph::new();
    let out = f(module, &mut g);
    let grads = g.backward(out);

    let mut entries: Vec<(String, Tensor)> = Vec::new();
    module.visit("", &mut |name, p| {
        let a = grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value.dim()));
        entries.push((name, a));
    });

    let eval = |m: &M| {
        let mut g = Graph::inference();
        let out = f(m, &mut g);
        g.scalar_value(out)
    };

    let mut report = GradCheckReport::new();
    for (target, (name, analytic)) in entries.iter().enumerate() {
        for (idx, a) in analytic.iter().enumerate() {
            let mut orig = 0.0;
            let mut k = 0;
            module.visit("", &mut |_, p| {
                if k == target {
                    orig = p.value.as_slice().expect("contiguous")[idx];
                }
                k += 1;
            });
            perturb(module, target, idx, step);
            let up = eval(module);
            set_entry(module, target, idx, orig - step);
            let down = eval(module);
            set_entry(module, target, idx, orig);
            report.record(name, idx, *a, (up - down) / (2.0 * step));
        }
    }
    report
}
