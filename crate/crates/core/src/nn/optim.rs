use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Momentum SGD: `v ← momentum·v − lr·g; p ← p + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {learning_rate} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} must be in [0, 1)")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameter blocks but {} gradient blocks",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Dimension("optimizer state belongs to another network".into()));
        }
        let lr = T::from_f64(self.learning_rate);
        let mom = T::from_f64(self.momentum);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::Dimension(format!(
                    "parameter block of {} values with gradient of {} and velocity of {}",
                    p.len(),
                    g.len(),
                    v.len()
                )));
            }
            for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = mom * *vv - lr * gv;
                *pv = *pv + *vv;
            }
        }
        Ok(())
    }
}
