use super::{Float, Tensor};
use crate::error::{bail, Result};

/// Adam hyperparameters (Transformer-base defaults).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Float = f32> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    /// Clears both moments and the step counter.
    pub fn reset(&mut self) {
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|b| b.fill(T::zero()));
        self.t = 0;
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step<T: Float>(params: &mut [Tensor<T>], grads: &[&[T]], state: &mut AdamState<T>, lr: T) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        bail!(
            Shape,
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        );
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.numel() != g.len() || p.numel() != m.len() {
            bail!(Shape, "parameter {:?} with gradient of length {}", p.shape(), g.len());
        }
    }
    state.t += 1;
    let cfg = state.config;
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.epsilon));
    let bc1 = T::one() - T::lit(cfg.beta1.powi(state.t as i32));
    let bc2 = T::one() - T::lit(cfg.beta2.powi(state.t as i32));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        bail!(Domain, "learning-rate schedule is defined from step 1");
    }
    if warmup == 0 || d_model == 0 {
        bail!(Domain, "warmup and d_model must be positive");
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[&[0.0; 3]], &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[&[1.0]], &mut st, 0.1).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = vec![Tensor::<f32>::scalar(0.3), Tensor::<f32>::scalar(0.3)];
        let mut st = AdamState::new(&p, AdamConfig::default());
        for k in 0..10 {
            let g = [0.1 * k as f32 - 0.4];
            adam_step(&mut p, &[&g, &g], &mut st, 0.01).unwrap();
        }
        assert_eq!(p[0].data()[0].to_bits(), p[1].data()[0].to_bits());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(
            adam_step(&mut p, &[&[1.0]], &mut st, 0.1),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn schedule_values() {
        let at = noam_lr(4000, 512, 4000).unwrap();
        assert!((at - 6.98771242e-4).abs() < 1e-10, "{at}");
        let first = noam_lr(1, 512, 4000).unwrap();
        assert!((first - 1.7469281e-7).abs() < 1e-13, "{first}");
        // Both arms of the min coincide at the crossover.
        let s = 4000f64;
        assert!((s.powf(-0.5) - s * 4000f64.powf(-1.5)).abs() < 1e-15 * s.powf(-0.5));
        assert!(matches!(noam_lr(0, 512, 4000), Err(crate::Error::Domain(_))));
    }
}
