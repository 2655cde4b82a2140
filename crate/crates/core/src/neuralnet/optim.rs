use super::real::Real;

/// In-place first-order update of a flat parameter vector.
pub trait Optimizer<T: Real> {
    fn step(&mut self, params: &mut [T], grads: &[T]);
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl<T: Real> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut [T], grads: &[T]) {
        let lr = T::from_f64(self.lr);
        for (p, &g) in params.iter_mut().zip(grads) {
            *p -= lr * g;
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }
}

impl<T: Real> Optimizer<T> for Adam {
    fn step(&mut self, params: &mut [T], grads: &[T]) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.as_f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            *p -= T::from_f64(update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_square() {
        let mut w = vec![1.0f64];
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            let g = vec![2.0 * w[0]];
            opt.step(&mut w, &g);
        }
        assert!(w[0].abs() < 1e-2, "w = {}", w[0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut w = vec![1.0f32, -1.0];
        let mut opt = Adam::new(0.01);
        opt.step(&mut w, &[5.0, -0.001]);
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = vec![0.5f64, -2.0];
        let mut opt = Adam::new(0.1);
        opt.step(&mut w, &[0.0, 0.0]);
        assert_eq!(w, vec![0.5, -2.0]);
    }

    #[test]
    fn sgd_step() {
        let mut w = vec![1.0f64];
        Sgd { lr: 0.5 }.step(&mut w, &[2.0]);
        assert_eq!(w[0], 0.0);
    }
}
