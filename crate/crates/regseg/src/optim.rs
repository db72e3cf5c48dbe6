//! RMSprop and Adam parameter updates.

use crate::error::{Error, Result};
use crate::grid::{Grid, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

/// Optimizer state for one named parameter set.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// RMSprop accumulator decay.
    pub decay: f64,
    /// Adam moment decays.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Squared-gradient accumulator (RMSprop) or first moment (Adam).
    accum_a: BTreeMap<String, Grid<T>>,
    /// Second moment (Adam only).
    accum_b: BTreeMap<String, Grid<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn rmsprop(lr: f64) -> Result<Self> {
        Self::with_kind(OptimizerKind::RmsProp, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::with_kind(OptimizerKind::Adam, lr)
    }

    pub fn with_kind(kind: OptimizerKind, lr: f64) -> Result<Self> {
        // lr = 0 is allowed as a degenerate no-movement step (accumulators
        // still decay); negative or non-finite rates are rejected.
        if !(lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        Ok(OptimizerState {
            kind,
            lr,
            decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            accum_a: BTreeMap::new(),
            accum_b: BTreeMap::new(),
        })
    }

    /// Applies one update to `params` from `grads` (keyed by parameter name).
    ///
    /// All gradients are validated before anything is mutated; a non-finite
    /// gradient aborts the step naming the offending parameter. Parameters
    /// without an entry in `grads` receive a zero gradient.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Grid<T>>,
        grads: &BTreeMap<String, Grid<T>>,
    ) -> Result<()> {
        for (name, param) in params.iter() {
            if let Some(g) = grads.get(name) {
                if !g.same_shape(param) {
                    return Err(Error::shape(
                        "optimizer_step",
                        format!(
                            "gradient shape {:?} does not match parameter '{name}' {:?}",
                            g.shape(),
                            param.shape()
                        ),
                    ));
                }
                if !g.is_all_finite() {
                    return Err(Error::Train(format!(
                        "non-finite gradient for parameter '{name}'; step aborted"
                    )));
                }
            }
        }

        self.step += 1;
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        match self.kind {
            OptimizerKind::RmsProp => {
                let decay = T::from_f64(self.decay);
                let one_minus = T::ONE - decay;
                for (name, param) in params.iter_mut() {
                    let sq = self
                        .accum_a
                        .entry(name.clone())
                        .or_insert_with(|| Grid::zeros(param.shape()));
                    let zero = Grid::zeros(param.shape());
                    let g = grads.get(name).unwrap_or(&zero);
                    let pd = param.data_mut();
                    let sd = sq.data_mut();
                    let gd = g.data();
                    for i in 0..pd.len() {
                        sd[i] = decay * sd[i] + one_minus * gd[i] * gd[i];
                        pd[i] -= lr * gd[i] / (sd[i].sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::from_f64(self.beta1);
                let b2 = T::from_f64(self.beta2);
                let c1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
                let c2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
                for (name, param) in params.iter_mut() {
                    let m = self
                        .accum_a
                        .entry(name.clone())
                        .or_insert_with(|| Grid::zeros(param.shape()));
                    let v = self
                        .accum_b
                        .entry(name.clone())
                        .or_insert_with(|| Grid::zeros(param.shape()));
                    let zero = Grid::zeros(param.shape());
                    let g = grads.get(name).unwrap_or(&zero);
                    let pd = param.data_mut();
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    let gd = g.data();
                    for i in 0..pd.len() {
                        md[i] = b1 * md[i] + (T::ONE - b1) * gd[i];
                        vd[i] = b2 * vd[i] + (T::ONE - b2) * gd[i] * gd[i];
                        let m_hat = md[i] / c1;
                        let v_hat = vd[i] / c2;
                        pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulator tensors for checkpointing, keyed `a.<param>` / `b.<param>`.
    pub fn export_tensors(&self) -> Vec<(String, &Grid<T>)> {
        let mut out = Vec::new();
        for (name, g) in &self.accum_a {
            out.push((format!("a.{name}"), g));
        }
        for (name, g) in &self.accum_b {
            out.push((format!("b.{name}"), g));
        }
        out
    }

    pub fn import_tensor(&mut self, key: &str, grid: Grid<T>) -> Result<()> {
        if let Some(name) = key.strip_prefix("a.") {
            self.accum_a.insert(name.to_string(), grid);
        } else if let Some(name) = key.strip_prefix("b.") {
            self.accum_b.insert(name.to_string(), grid);
        } else {
            return Err(Error::Config(format!("unknown optimizer tensor key '{key}'")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>) -> BTreeMap<String, Grid<f64>> {
        let mut m = BTreeMap::new();
        let n = v.len();
        m.insert("p".to_string(), Grid::new(vec![n], v).unwrap());
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![1.0, -2.0, 3.0]);
        let grads = one_param(vec![0.0, 0.0, 0.0]);
        for kind in [OptimizerKind::RmsProp, OptimizerKind::Adam] {
            let mut opt = OptimizerState::with_kind(kind, 1e-3).unwrap();
            opt.step(&mut params, &grads).unwrap();
            assert_eq!(params.get("p").unwrap().data(), &[1.0, -2.0, 3.0]);
            assert_eq!(opt.step, 1);
        }
    }

    #[test]
    fn rmsprop_accumulator_decays_on_zero_gradient() {
        let mut params = one_param(vec![1.0]);
        let mut opt = OptimizerState::<f64>::rmsprop(1e-3).unwrap();
        let g1 = one_param(vec![2.0]);
        opt.step(&mut params, &g1).unwrap();
        let sq_after_first = opt.accum_a.get("p").unwrap().data()[0];
        assert!((sq_after_first - 0.1 * 4.0).abs() < 1e-12);
        let g0 = one_param(vec![0.0]);
        let p_before = params.get("p").unwrap().data()[0];
        opt.step(&mut params, &g0).unwrap();
        assert_eq!(params.get("p").unwrap().data()[0], p_before);
        let sq_after_second = opt.accum_a.get("p").unwrap().data()[0];
        assert!((sq_after_second - 0.9 * sq_after_first).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // With bias correction, the first Adam update is
        // -lr * g / (|g| + eps') which is ~= -lr * sign(g).
        let lr = 2e-4;
        let mut params = one_param(vec![0.5, -0.25]);
        let grads = one_param(vec![3.0, -0.01]);
        let mut opt = OptimizerState::<f64>::adam(lr).unwrap();
        opt.step(&mut params, &grads).unwrap();
        let p = params.get("p").unwrap().data();
        assert!((p[0] - (0.5 - lr)).abs() < 1e-8, "{}", p[0]);
        assert!((p[1] - (-0.25 + lr)).abs() < 1e-8, "{}", p[1]);
    }

    #[test]
    fn rmsprop_step_magnitude_converges_to_lr() {
        // Iterate the rule 1000 steps with a constant gradient; the step
        // magnitude approaches lr * sign(g) as the accumulator saturates.
        let lr = 1e-3;
        let g = 0.37;
        let mut opt = OptimizerState::<f64>::rmsprop(lr).unwrap();
        let mut params = one_param(vec![0.0]);
        let grads = one_param(vec![g]);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..1000 {
            opt.step(&mut params, &grads).unwrap();
            let cur = params.get("p").unwrap().data()[0];
            last_step = (cur - prev).abs();
            prev = cur;
        }
        assert!((last_step - lr).abs() < lr * 1e-3, "step {last_step}");
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let mut params = one_param(vec![1.0]);
        let grads = one_param(vec![f64::NAN]);
        let mut opt = OptimizerState::<f64>::rmsprop(1e-3).unwrap();
        let before = params.get("p").unwrap().clone();
        let err = opt.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("'p'"), "{err}");
        assert_eq!(params.get("p").unwrap().data(), before.data());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn rejects_negative_lr_allows_zero() {
        assert!(OptimizerState::<f64>::adam(-1.0).is_err());
        assert!(OptimizerState::<f64>::rmsprop(f64::NAN).is_err());
        // Zero rate: a degenerate step that moves nothing.
        let mut opt = OptimizerState::<f64>::rmsprop(0.0).unwrap();
        let mut params = one_param(vec![1.5]);
        let grads = one_param(vec![0.7]);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[1.5]);
    }
}
