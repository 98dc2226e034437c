//! Adam and global-norm gradient clipping.

use crate::nn::ParamGroup;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamGroup<T>,
    pub v: ParamGroup<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamGroup<T>) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// Applies one update. `grads` must have the same names and shapes as `params`.
    pub fn update(&mut self, params: &mut ParamGroup<T>, grads: &ParamGroup<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name:?}"));
            let m = self.m.get_mut(name).unwrap_or_else(|| panic!("no moment for {name:?}"));
            let v = self.v.get_mut(name).unwrap_or_else(|| panic!("no moment for {name:?}"));
            assert_eq!(p.shape(), g.shape(), "gradient shape for {name:?}");
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients so that their joint L2 norm is at most `max_norm`.
///
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(groups: &mut [&mut ParamGroup<T>], max_norm: f64) -> f64 {
    let total: f64 = groups.iter().flat_map(|g| g.iter()).map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt();
    if total.is_finite() && total > max_norm {
        let k = T::lit(max_norm / (total + 1e-12));
        for g in groups.iter_mut() {
            for (_, t) in g.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    total
}
