use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Sign of an update: `Descend` applies `p − lr·u`, `Ascend` applies `p + lr·u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

/// Plain gradient steps or bias-corrected Adam over an ordered parameter list.
///
/// Adam moments are allocated on the first step and must be fed the same
/// parameter list (same order, same shapes) on every later step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], dir: Direction) -> Result<(), NumericsError> {
        if let Some(pos) = params.iter().position(|p| p.grad().is_none()) {
            return Err(NumericsError::Contract(format!(
                "parameter {pos} has no gradient"
            )));
        }
        let sign = match dir {
            Direction::Descend => -1.0,
            Direction::Ascend => 1.0,
        };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let g = p.grad().expect("checked above").to_vec();
                    p.values_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, g)| *x += sign * self.lr * g);
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.v = self.m.clone();
                }
                if self.m.len() != params.len()
                    || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
                {
                    return Err(NumericsError::Contract(
                        "parameter list changed between Adam steps".into(),
                    ));
                }
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    let g = p.grad().expect("checked above").to_vec();
                    for (((x, g), m), v) in p.values_mut().iter_mut().zip(&g).zip(m).zip(v) {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *x += sign * self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::vector(vec![value]).with_requires_grad(true);
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn sgd_zero_gradient_leaves_params() {
        let mut p = scalar_param(0.3, 0.0);
        Optimizer::sgd(0.5).step(&mut [&mut p], Direction::Descend).unwrap();
        assert_eq!(p.values(), &[0.3]);
    }

    #[test]
    fn sgd_descend_arithmetic() {
        let mut p = scalar_param(1.0, 2.0);
        Optimizer::sgd(0.01).step(&mut [&mut p], Direction::Descend).unwrap();
        assert!((p.values()[0] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        // Two Adam steps on a scalar, recurrence evaluated by hand.
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let grads = [0.5f64, -1.5f64];
        let mut p = Tensor::vector(vec![2.0]).with_requires_grad(true);
        let mut opt = Optimizer::adam(lr);
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            p.zero_grad();
            p.accumulate_grad(&[*g]).unwrap();
            opt.step(&mut [&mut p], Direction::Descend).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let k = (t + 1) as i32;
            x -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
            assert!((p.values()[0] - x).abs() < 1e-12);
            if t == 0 {
                // bias correction makes the first step exactly lr·g/(|g|+eps)
                assert!((p.values()[0] - (2.0 - lr * 0.5 / (0.5 + eps))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = Tensor::vector(vec![1.0]);
        let err = Optimizer::sgd(0.1).step(&mut [&mut p], Direction::Descend);
        assert!(matches!(err, Err(NumericsError::Contract(_))));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut a = scalar_param(0.0, 3.0);
        let mut b = scalar_param(0.0, 4.0);
        let norm = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-15);
    }
}
