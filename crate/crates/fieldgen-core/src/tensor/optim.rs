//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: per-parameter first/second moments plus the step counter.
/// The counter advances by exactly one per successful `step`; a step that
/// fails validation mutates nothing.
pub struct AdamW<S: Scalar = f32> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, param_shapes: &[Vec<usize>]) -> Self {
        let m = param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let v = param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    /// Restore moments and step counter (checkpoint resume).
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(TensorError::Parameter(format!(
                "optimizer restore: {} moment pairs vs {} parameters",
                m.len(),
                self.m.len()
            )));
        }
        for (cur, new) in self.m.iter().zip(m.iter()).chain(self.v.iter().zip(v.iter())) {
            if cur.shape() != new.shape() {
                return Err(TensorError::Parameter(
                    "optimizer restore: moment shape mismatch".into(),
                ));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update over a parameter set. Rejects non-finite gradients before
    /// any parameter is touched.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::Parameter(format!(
                "adamw_step: {} params, {} grads, {} moment pairs",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(TensorError::Dimension(format!(
                    "adamw_step: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite("adamw_step gradient".into()));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let lr = S::from_f64(self.cfg.lr);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powi(t));
        let wd = S::from_f64(self.cfg.weight_decay);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = gd[i];
                md[i] = b1 * md[i] + one_m_b1 * gi;
                vd[i] = b2 * vd[i] + one_m_b2 * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * pd[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let cfg = AdamWConfig { lr: 0.0, ..Default::default() };
        let mut opt = AdamW::<f32>::new(cfg, &[vec![3]]);
        let mut params = vec![Tensor::from_vec(&[3], vec![1.0f32, -2.0, 0.5]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::from_vec(&[3], vec![0.3f32, 0.1, -0.7]).unwrap()];
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params[0], before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decay_only_scales_params() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::<f32>::new(cfg, &[vec![2]]);
        let mut params = vec![Tensor::from_vec(&[2], vec![2.0f32, -4.0]).unwrap()];
        let grads = vec![Tensor::zeros(&[2])];
        opt.step(&mut params, &grads).unwrap();
        // grad = 0 keeps moments at zero, so update is pure decay: p * (1 - lr*wd).
        let f = 1.0f32 - 0.1 * 0.5;
        assert_eq!(params[0].data(), &[2.0 * f, -4.0 * f]);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // Hand-evaluated update for p=1, g=1 at defaults, in 64-bit.
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::<f64>::new(cfg, &[vec![1]]);
        let mut params = vec![Tensor::scalar(1.0f64)];
        let grads = vec![Tensor::scalar(1.0f64)];
        opt.step(&mut params, &grads).unwrap();

        let m = (1.0 - cfg.beta1) * 1.0;
        let v = (1.0 - cfg.beta2) * 1.0;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        let want = 1.0 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay;
        assert!((params[0].item() - want).abs() <= 1e-10);
    }

    #[test]
    fn nan_grad_aborts_without_mutation() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default(), &[vec![2]]);
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap()];
        let err = opt.step(&mut params, &grads).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
        assert_eq!(params[0], before);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default(), &[vec![1]]);
        let mut params = vec![Tensor::scalar(1.0f32)];
        let grads = vec![Tensor::scalar(0.1f32)];
        for want in 1..=5u64 {
            opt.step(&mut params, &grads).unwrap();
            assert_eq!(opt.step_count(), want);
        }
    }
}
