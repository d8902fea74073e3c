//! Bias-corrected Adam.

use super::scalar::Scalar;
use super::tensor::Param;
use crate::error::{Error, Result};
use ndarray::ArrayD;

/// Adam optimizer state over an ordered parameter list. The moment buffers
/// are keyed by position; parameter collection order must not change between
/// steps (it is the layer construction order).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Gradients must be finite; a NaN/Inf
    /// gradient aborts with the offending parameter named.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state holds {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter '{}' at optimizer step {}",
                    p.name, self.step
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = p.value.as_slice_mut().unwrap();
            let grad = p.grad.as_slice().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            for j in 0..value.len() {
                let g = grad[j].as_f64();
                let mj = self.beta1 * ms[j].as_f64() + (1.0 - self.beta1) * g;
                let vj = self.beta2 * vs[j].as_f64() + (1.0 - self.beta2) * g * g;
                ms[j] = T::from_f64(mj);
                vs[j] = T::from_f64(vj);
                let update = self.lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                value[j] = T::from_f64(value[j].as_f64() - update);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn export_state(&self, params: &[&Param<T>]) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::with_capacity(self.m.len() * 2);
        for (i, p) in params.iter().enumerate() {
            if i < self.m.len() {
                out.push((format!("adam.m.{}", p.name), self.m[i].clone()));
                out.push((format!("adam.v.{}", p.name), self.v[i].clone()));
            }
        }
        out
    }

    /// Restore moment buffers; `lookup` resolves a tensor by name.
    pub fn import_state(
        &mut self,
        params: &[&Param<T>],
        step: u64,
        mut lookup: impl FnMut(&str) -> Result<ArrayD<T>>,
    ) -> Result<()> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for p in params {
            let mt = lookup(&format!("adam.m.{}", p.name))?;
            let vt = lookup(&format!("adam.v.{}", p.name))?;
            if mt.shape() != p.value.shape() || vt.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer state shape mismatch for '{}'",
                    p.name
                )));
            }
            m.push(mt);
            v.push(vt);
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn param(vals: &[f64]) -> Param<f64> {
        Param::new("p", ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap())
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = param(&[1.0, -2.0, 0.5]);
        p.grad.as_slice_mut().unwrap().copy_from_slice(&[0.3, -7.0, 1e-3]);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p]).unwrap();
        // Bias-corrected first step is -lr * g/(|g| + eps'), magnitude ~ lr.
        assert!((p.value[[0]] - (1.0 - 1e-3)).abs() < 1e-5);
        assert!((p.value[[1]] - (-2.0 + 1e-3)).abs() < 1e-5);
        assert!((p.value[[2]] - (0.5 - 1e-3)).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = param(&[0.7, -0.1]);
        let mut adam = Adam::new(1e-2);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value[[0]], 0.7);
        assert_eq!(p.value[[1]], -0.1);
    }

    #[test]
    fn two_steps_match_hand_computed_recursion() {
        // Constant gradient g: closed-form m_t = (1 - b1^t) g, v_t = (1 - b2^t) g^2,
        // so the bias-corrected update is exactly lr * g / (|g| + eps) each step.
        let g = 0.25f64;
        let lr = 1e-3;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut expect = 1.0f64;
        let mut m = 0.0;
        let mut v = 0.0;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            expect -= lr * mh / (vh.sqrt() + eps);
        }

        let mut p = param(&[1.0]);
        let mut adam = Adam::new(lr);
        for _ in 0..2 {
            p.grad[[0]] = g;
            adam.step(&mut [&mut p]).unwrap();
        }
        assert!((p.value[[0]] - expect).abs() < 1e-12, "{} vs {}", p.value[[0]], expect);
    }

    #[test]
    fn nan_gradient_aborts_with_diagnostics() {
        let mut p = param(&[1.0]);
        p.grad[[0]] = f64::NAN;
        let mut adam = Adam::new(1e-3);
        let err = adam.step(&mut [&mut p]).unwrap_err();
        assert!(err.to_string().contains("'p'"));
    }
}
