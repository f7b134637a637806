use super::weights::{ModelWeights, Params};
use super::{NetError, TrainConfig};

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(weights: &ModelWeights) -> Self {
        let z = Params::zeros_like(&weights.params);
        Self { m: z.clone(), v: z, step: 0 }
    }
}

/// One bias-corrected Adam update followed by max-norm projection.
///
/// Non-finite gradients abort before anything is modified. A zero gradient
/// leaves weights and moments untouched (only the counter advances).
pub fn adam_step(weights: &mut ModelWeights, grads: &Params, state: &mut AdamState, cfg: &TrainConfig) -> Result<(), NetError> {
    let step = state.step + 1;
    for ((name, g), (_, w)) in grads.tensors().into_iter().zip(weights.params.tensors()) {
        if g.len() != w.len() {
            return Err(NetError::Shape { layer: name, detail: format!("gradient has {} values, tensor {}", g.len(), w.len()) });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteGradient { tensor: name, step });
        }
    }
    state.step = step;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let tensors = weights.params.tensors_mut().into_iter().zip(state.m.tensors_mut()).zip(state.v.tensors_mut()).zip(grads.tensors());
    for ((((_, w), (_, m)), (_, v)), (_, g)) in tensors {
        for i in 0..w.len() {
            let gi = g[i];
            if gi == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
                continue;
            }
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    weights.apply_max_norm();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::NetConfig;

    fn tiny() -> ModelWeights {
        let cfg = NetConfig { temporal_kernel: 4, separable_kernel: 2, ..NetConfig::default() };
        ModelWeights::init(&cfg, 2, 64, &mut crate::seeds::rng(3)).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = tiny();
        let before = w.clone();
        let mut g = Params::zeros_like(&w.params);
        g.dense_b[0] = 1.0;
        let mut st = AdamState::new(&w);
        adam_step(&mut w, &g, &mut st, &TrainConfig::default()).unwrap();
        let dw = w.params.dense_b[0] - before.params.dense_b[0];
        assert!((dw + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{dw}");
        assert_eq!(w.params.dense_b[1], before.params.dense_b[1]);
    }

    #[test]
    fn zero_gradient_only_advances_counter() {
        let mut w = tiny();
        let before = w.clone();
        let g = Params::zeros_like(&w.params);
        let mut st = AdamState::new(&w);
        let st0 = st.clone();
        adam_step(&mut w, &g, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(w, before);
        assert_eq!(st.m, st0.m);
        assert_eq!(st.v, st0.v);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut w = tiny();
        let mut g = Params::zeros_like(&w.params);
        g.temporal[1] = f64::NAN;
        let mut st = AdamState::new(&w);
        let err = adam_step(&mut w, &g, &mut st, &TrainConfig::default()).unwrap_err();
        assert_eq!(err, NetError::NonFiniteGradient { tensor: "temporal.kernel", step: 1 });
        assert_eq!(st.step, 0);
    }

    #[test]
    fn update_is_followed_by_projection() {
        let mut w = tiny();
        let flat = w.config.flat_len(w.n_times);
        for v in &mut w.params.dense_w[..flat] {
            *v = 0.5 / (flat as f64).sqrt();
        }
        let g = Params::zeros_like(&w.params);
        let mut st = AdamState::new(&w);
        adam_step(&mut w, &g, &mut st, &TrainConfig::default()).unwrap();
        let norm = w.params.dense_w[..flat].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.25).abs() < 1e-9);
        w.check_max_norm().unwrap();
    }
}
