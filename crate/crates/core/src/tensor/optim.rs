use super::array::Tensor;
use crate::error::{invalid, DafcError, Result};

/// RMSprop hyperparameters and per-parameter running mean of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    state: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_config(lr, 0.9, 1e-8)
    }

    pub fn with_config(lr: f64, decay: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(invalid(format!("decay must lie in (0, 1), got {decay}")));
        }
        if eps < 0.0 {
            return Err(invalid(format!("eps must be nonnegative, got {eps}")));
        }
        Ok(Self {
            lr,
            decay,
            eps,
            state: Vec::new(),
        })
    }

    /// Running averages, one per parameter in the order they were stepped.
    pub fn square_averages(&self) -> &[Vec<f64>] {
        &self.state
    }

    /// Applies one update to every parameter using its gradient slot.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        for (idx, p) in params.into_iter().enumerate() {
            if self.state.len() <= idx {
                self.state.push(vec![0.0; p.len()]);
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            rmsprop_update(p.data_mut(), &g, &mut self.state[idx], self.lr, self.decay, self.eps)?;
        }
        Ok(())
    }
}

/// `s <- decay*s + (1-decay)*g^2; p <- p - lr*g/(sqrt(s)+eps)`, elementwise.
pub fn rmsprop_update(
    param: &mut [f64],
    grad: &[f64],
    sq_avg: &mut [f64],
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != sq_avg.len() {
        return Err(DafcError::ShapeMismatch {
            op: "rmsprop_step",
            left: vec![param.len()],
            right: vec![grad.len(), sq_avg.len()],
        });
    }
    for ((p, &g), s) in param.iter_mut().zip(grad).zip(sq_avg.iter_mut()) {
        *s = decay * *s + (1.0 - decay) * g * g;
        if g != 0.0 {
            *p -= lr * g / (s.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_hand_value() {
        let mut p = [1.0];
        let mut s = [0.0];
        rmsprop_update(&mut p, &[1.0], &mut s, 0.1, 0.9, 0.0).unwrap();
        assert!((s[0] - 0.1).abs() < 1e-15);
        assert!((p[0] - (1.0 - 0.1 / 0.1f64.sqrt())).abs() < 1e-12);
        assert!((p[0] - 0.6838).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut t = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.0; 3]).unwrap();
        let before = t.data().to_vec();
        let mut opt = RmsProp::new(1e-4).unwrap();
        for _ in 0..5 {
            opt.step([&mut t]).unwrap();
        }
        assert_eq!(t.data(), &before[..]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = [0.0; 2];
        let mut s = [0.0; 2];
        assert!(rmsprop_update(&mut p, &[1.0], &mut s, 0.1, 0.9, 1e-8).is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(RmsProp::new(0.0).is_err());
        assert!(RmsProp::with_config(1e-3, 1.0, 1e-8).is_err());
    }
}
