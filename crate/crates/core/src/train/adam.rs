use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::Scalar;

/// Adam with bias-corrected moments. Parameters without a gradient are
/// treated as having a zero gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Tensor::new(p.shape().to_vec(), vec![T::zero(); p.len()]).unwrap()).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &Tensor<T> {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor<T> {
        &self.v[index]
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != self.m[i].shape() {
                    return Err(Error::Dimension(format!(
                        "gradient for parameter {i} has shape {:?}, expected {:?}",
                        g.shape(),
                        self.m[i].shape()
                    )));
                }
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powf(self.t as f64));
        let c2 = T::of(1.0 - self.beta2.powf(self.t as f64));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].as_ref().map(Tensor::data);
            for j in 0..m.len() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                let pj = &mut p.data_mut()[j];
                *pj = *pj - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
