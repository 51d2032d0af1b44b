use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Moment estimates for bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    /// Zero moments for parameters of the given lengths.
    pub fn new(lengths: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            v: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update of every parameter. Nothing is modified if any gradient
    /// holds a non-finite value.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f32>], ids: &[String], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                actual: grads.len().min(params.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || g.len() != self.m[i].len() {
                return Err(Error::LengthMismatch {
                    expected: self.m[i].len(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                let id = ids.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(id));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.values_mut().iter_mut().enumerate() {
                let g = f64::from(grads[i][j]);
                let mj = b1 * f64::from(m[j]) + (1.0 - b1) * g;
                let vj = b2 * f64::from(v[j]) + (1.0 - b2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *w = (f64::from(*w) - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize) -> AdamState {
        AdamState::new(&[n], 0.9, 0.999, 1e-8)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![0.5f32, -2.0]).unwrap();
        let before = p.clone();
        let mut s = state(2);
        s.step(&mut [&mut p], &[vec![0.0, 0.0]], &["p".into()], 1e-3).unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0f32]).unwrap();
        let mut s = state(1);
        s.step(&mut [&mut p], &[vec![1.0]], &["w".into()], 1e-3).unwrap();
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((f64::from(p.values()[0]) - expected).abs() < 1e-7);
    }

    #[test]
    fn nan_rejected_without_mutation() {
        let mut p = Tensor::vector(vec![1.0f32]).unwrap();
        let mut s = state(1);
        let err = s.step(&mut [&mut p], &[vec![f32::NAN]], &["fc1.weight".into()], 1e-3).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient at fc1.weight");
        assert_eq!(p.values(), &[1.0]);
        assert_eq!(s.t, 0);
    }
}
