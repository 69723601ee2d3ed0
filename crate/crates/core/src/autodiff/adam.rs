//! Adam optimizer with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment buffers plus the step counter.
pub struct OptimState {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    /// Buffers are allocated lazily on the first step so the state can be
    /// created before parameter shapes are known.
    pub fn new(cfg: AdamConfig) -> Self {
        OptimState { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }
}

/// One Adam update over a flat parameter list.
///
/// `params`, `grads`, and `names` must stay index-aligned across calls; a
/// non-finite gradient aborts with a training error naming the parameter.
pub fn adam_step(
    state: &mut OptimState,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != names.len() {
        return Err(Error::Usage(format!(
            "adam_step arity mismatch: {} params, {} grads, {} names",
            params.len(),
            grads.len(),
            names.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        state.v = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
    }
    if state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "optimizer state tracks {} tensors but {} were passed",
            state.m.len(),
            params.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::Training {
                param: name.clone(),
                detail: format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::Training {
                param: name.clone(),
                detail: "non-finite gradient".into(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.cfg;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for i in 0..params.len() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        let p = params[i].data_mut();
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut state = OptimState::new(AdamConfig::default());
        let mut p = one_param(1.5);
        for _ in 0..5 {
            adam_step(
                &mut state,
                &mut [&mut p],
                &[Tensor::scalar(0.0)],
                &["p".to_string()],
            )
            .unwrap();
        }
        assert_eq!(p.item().unwrap(), 1.5);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cfg = AdamConfig { learning_rate: 0.0, ..AdamConfig::default() };
        let mut state = OptimState::new(cfg);
        let mut p = one_param(2.0);
        adam_step(&mut state, &mut [&mut p], &[Tensor::scalar(3.0)], &["p".to_string()]).unwrap();
        assert_eq!(p.item().unwrap(), 2.0);
    }

    #[test]
    fn matches_hand_simulated_updates_on_constant_gradient() {
        // Reference implementation written out longhand in the test.
        let cfg = AdamConfig::default();
        let mut state = OptimState::new(cfg);
        let mut p = one_param(0.7);
        let g = 0.3;

        let (mut m, mut v, mut expected) = (0.0f64, 0.0f64, 0.7f64);
        for t in 1..=7 {
            adam_step(&mut state, &mut [&mut p], &[Tensor::scalar(g)], &["p".to_string()])
                .unwrap();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            expected -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            assert!((p.item().unwrap() - expected).abs() < 1e-15, "step {t}");
        }
        // With a constant gradient the first-step update is close to -lr.
        assert!((0.7 - expected) > 0.9 * 7.0 * cfg.learning_rate);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut state = OptimState::new(AdamConfig::default());
        let mut a = one_param(0.0);
        let mut b = one_param(0.0);
        let err = adam_step(
            &mut state,
            &mut [&mut a, &mut b],
            &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)],
            &["enc.w".to_string(), "enc.b".to_string()],
        )
        .unwrap_err();
        match err {
            Error::Training { param, .. } => assert_eq!(param, "enc.b"),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut state = OptimState::new(AdamConfig::default());
            let mut p = Tensor::row_vector(&[1.0, -2.0, 3.0]);
            for t in 0..50 {
                let g = Tensor::row_vector(&[0.1 * t as f64, -0.2, 0.05]);
                adam_step(&mut state, &mut [&mut p], &[g], &["p".to_string()]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
