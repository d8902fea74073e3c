//! Central finite-difference gradient checking.

use super::scalar::Scalar;
use super::tensor::{Param, ParamSet, Tensor};
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `loss(model, with_grad)` runs a forward pass and returns the scalar loss;
/// when `with_grad` is true it must zero gradients first and also run the
/// backward pass. At most `max_checks_per_param` evenly-strided elements are
/// probed per parameter to keep cost bounded on larger fragments.
pub fn grad_check<T, M>(
    model: &mut M,
    mut loss: impl FnMut(&mut M, bool) -> f64,
    max_checks_per_param: usize,
) -> GradCheckReport
where
    T: Scalar,
    M: ParamSet<T>,
{
    let _ = loss(model, true);
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.iter().map(|g| g.as_f64()).collect()))
        .collect();

    let eps_base = T::epsilon().as_f64().cbrt();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };

    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let n = grads.len();
        let stride = n.div_ceil(max_checks_per_param).max(1);
        let mut idx = 0;
        while idx < n {
            let original = {
                let mut ps = model.params_mut();
                let slice = ps[pi].value.as_slice_mut().unwrap();
                slice[idx].as_f64()
            };
            let h = eps_base * original.abs().max(1.0);
            let set = |model: &mut M, v: f64| {
                let mut ps = model.params_mut();
                let slice = ps[pi].value.as_slice_mut().unwrap();
                slice[idx] = T::from_f64(v);
            };
            set(model, original + h);
            let f_plus = loss(model, false);
            set(model, original - h);
            let f_minus = loss(model, false);
            set(model, original);

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = grads[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
            idx += stride;
        }
    }
    report
}

/// A network fragment paired with its input held as a checkable parameter,
/// so [`grad_check`] probes gradients with respect to the input too.
pub struct Fragment<T, L> {
    pub layer: L,
    pub input: Param<T>,
}

impl<T: Scalar, L: ParamSet<T>> ParamSet<T> for Fragment<T, L> {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.layer.collect_params(out);
        out.push(&mut self.input);
    }
    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        self.layer.collect_params_ref(out);
        out.push(&self.input);
    }
}

/// Deterministic projection covector: a fixed loss `sum_i c_i * y_i` makes
/// the scalar objective sensitive to every output element.
fn projection_weight(i: usize) -> f64 {
    ((i as f64) * 0.6180339887 + 0.25).sin() + 0.1
}

fn projection_loss<T: Scalar>(y: &ArrayD<T>) -> f64 {
    y.iter().enumerate().map(|(i, v)| projection_weight(i) * v.as_f64()).sum()
}

fn projection_grad<T: Scalar>(y: &ArrayD<T>) -> ArrayD<T> {
    let mut dy = ArrayD::zeros(y.raw_dim());
    for (i, v) in dy.iter_mut().enumerate() {
        *v = T::from_f64(projection_weight(i));
    }
    dy
}

/// Check one layer's analytic gradients (parameters and input) against
/// finite differences, under a fixed linear projection loss.
pub fn grad_check_fragment<T, L>(
    layer: L,
    input: Tensor<T>,
    mut fwd: impl FnMut(&mut L, &Tensor<T>) -> Tensor<T>,
    mut bwd: impl FnMut(&mut L, &Tensor<T>) -> Tensor<T>,
    max_checks_per_param: usize,
) -> GradCheckReport
where
    T: Scalar,
    L: ParamSet<T>,
{
    let mut frag = Fragment { layer, input: Param::new("input", input) };
    grad_check(
        &mut frag,
        move |m, with_grad| {
            if with_grad {
                m.zero_grads();
            }
            let x = m.input.value.clone();
            let y = fwd(&mut m.layer, &x);
            let loss = projection_loss(&y);
            if with_grad {
                let dy = projection_grad(&y);
                let dx = bwd(&mut m.layer, &dy);
                m.input.grad += &dx;
            }
            loss
        },
        max_checks_per_param,
    )
}
