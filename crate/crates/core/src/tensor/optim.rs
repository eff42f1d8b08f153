use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Parameter update rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimAlgo {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
    RmsProp { alpha: f64, eps: f64 },
}

impl OptimAlgo {
    /// Adam with the momentum settings used for data-path training.
    pub fn adam() -> Self {
        OptimAlgo::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn rmsprop() -> Self {
        OptimAlgo::RmsProp { alpha: 0.99, eps: 1e-8 }
    }
}

/// Optimizer with per-parameter state, indexed by parameter position.
#[derive(Clone, Debug)]
pub struct Optimizer {
    algo: OptimAlgo,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(algo: OptimAlgo, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(Optimizer {
            algo,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn algo(&self) -> OptimAlgo {
        self.algo
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient rejects the whole step and
    /// leaves parameters and state untouched.
    pub fn step<F: Real>(&mut self, params: &mut [&mut Tensor<F>], grads: &[Vec<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidConfig(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(Error::DataLength {
                    expected: p.numel(),
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                log::warn!("optimizer step rejected: non-finite gradient for parameter {i}");
                return Err(Error::NonFinite {
                    what: format!("gradient of parameter {i}"),
                });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let data = p.data_mut();
            match self.algo {
                OptimAlgo::Sgd => {
                    for (w, &gv) in data.iter_mut().zip(g) {
                        *w = F::from_f64_lossy(w.to_f64_lossy() - self.lr * gv.to_f64_lossy());
                    }
                }
                OptimAlgo::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for k in 0..data.len() {
                        let gv = g[k].to_f64_lossy();
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                        let update = self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                        data[k] = F::from_f64_lossy(data[k].to_f64_lossy() - update);
                    }
                }
                OptimAlgo::RmsProp { alpha, eps } => {
                    let v = &mut self.second[idx];
                    for k in 0..data.len() {
                        let gv = g[k].to_f64_lossy();
                        v[k] = alpha * v[k] + (1.0 - alpha) * gv * gv;
                        let update = self.lr * gv / (v[k].sqrt() + eps);
                        data[k] = F::from_f64_lossy(data[k].to_f64_lossy() - update);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Tensor<f32> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn sgd_single_step() {
        let mut opt = Optimizer::new(OptimAlgo::Sgd, 0.1).unwrap();
        let mut p = one(1.0);
        opt.step(&mut [&mut p], &[vec![0.5]]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut opt = Optimizer::new(OptimAlgo::Sgd, 0.1).unwrap();
        let mut p = one(0.3);
        opt.step(&mut [&mut p], &[vec![0.0]]).unwrap();
        assert_eq!(p.data()[0], 0.3);
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        // m = 0.5, v = 0.001; bias-corrected both equal 1 -> step = lr / (1 + eps)
        let lr = 5e-5;
        let mut opt = Optimizer::new(OptimAlgo::adam(), lr).unwrap();
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        opt.step(&mut [&mut p], &[vec![1.0]]).unwrap();
        let expected = 1.0 - lr / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_zero_gradient_is_noop() {
        let mut opt = Optimizer::new(OptimAlgo::rmsprop(), 1e-3).unwrap();
        let mut p = one(2.0);
        opt.step(&mut [&mut p], &[vec![0.0]]).unwrap();
        assert_eq!(p.data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = Optimizer::new(OptimAlgo::Sgd, 0.1).unwrap();
        let mut p = one(1.0);
        let err = opt.step(&mut [&mut p], &[vec![f32::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn bad_learning_rate_rejected() {
        assert!(Optimizer::new(OptimAlgo::Sgd, 0.0).is_err());
    }
}
