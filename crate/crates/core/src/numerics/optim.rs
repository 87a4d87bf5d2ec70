use super::tensor::{Scalar, Tensor};
use crate::error::{GidError, Result};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f64` regardless of the parameter
/// precision so the update is identical across runs.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<S: Scalar>(cfg: AdamConfig, params: &[Tensor<S>]) -> Self {
        Adam {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `names` is used to report the parameter carrying a non-finite
    /// gradient; nothing is modified in that case.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut [Tensor<S>],
        grads: &[Tensor<S>],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(GidError::Config(format!(
                "optimizer state for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(GidError::shape("adam", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(GidError::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gf = gv.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gf;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gf * gf;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                let upd = lr * mh / (vh.sqrt() + eps);
                *pv = S::lit(pv.as_f64() - upd);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm && norm > 0.0 {
        let f = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= f;
            }
        }
    }
    norm
}

/// Cosine decay from `base` at step 0 to `floor` at `total`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step.min(total) as f64) / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = vec![Tensor::zeros(&[3])];
        adam.step(&mut p, &g, &names(1), 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::scalar(1.0)], &names(1), 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_square() {
        let mut p = vec![Tensor::<f64>::scalar(3.0)];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.param(p[0].clone());
            let y = g.mul(x, x).unwrap();
            let grads = g.backward(y).unwrap();
            let gx = grads.get(x).unwrap().clone();
            adam.step(&mut p, &[gx], &names(1), 0.1).unwrap();
        }
        assert!(p[0].data()[0].abs() < 0.05, "{:?}", p[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![Tensor::<f32>::scalar(1.0), Tensor::<f32>::scalar(2.0)];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = vec![Tensor::scalar(0.0), Tensor::scalar(f32::NAN)];
        let err = adam.step(&mut p, &g, &names(2), 0.1).unwrap_err();
        assert!(matches!(err, GidError::NonFiniteGradient(ref n) if n == "p1"));
        assert_eq!(p[0].data()[0], 1.0);
    }

    #[test]
    fn clipping_and_schedule() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sum_sq().sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_lr(1e-3, 0.0, 0, 10), 1e-3);
        assert!(cosine_lr(1e-3, 0.0, 10, 10).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 0.0, 5, 10) - 5e-4).abs() < 1e-15);
    }
}
