use crate::autodiff::ParamSet;
use crate::tensor::{Result, Tensor, TensorError};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamSet<f32>,
    v: ParamSet<f32>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet<f32>) -> Self {
        let zeros = |p: &ParamSet<f32>| {
            let mut z = ParamSet::new();
            for (id, t) in p.iter() {
                z.insert(id, Tensor::zeros(t.shape()))
                    .expect("ids are unique");
            }
            z
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, p) in params.iter_mut() {
            let g = grads.get(id)?;
            if g.shape() != p.shape() {
                return Err(TensorError::Dimension {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m.get_mut(id)?.data_mut();
            let v = self.v.get_mut(id)?.data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi as f64;
                let mn = self.beta1 * *mi as f64 + (1.0 - self.beta1) * gi;
                let vn = self.beta2 * *vi as f64 + (1.0 - self.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *pi = (*pi as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
