use crate::real::Real;

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize) -> Self {
        Self { beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8), m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t as i32);
        let c2 = one - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut adam = Adam::new(3);
        let mut x = [0.0f64; 3];
        adam.step(&mut x, &[2.5, -0.01, 0.0], 1e-3);
        assert!((x[0] + 1e-3).abs() < 1e-9);
        assert!((x[1] - 1e-3).abs() < 1e-9);
        assert_eq!(x[2], 0.0);
    }

    #[test]
    fn zero_gradients_leave_parameters_alone() {
        let mut adam = Adam::new(2);
        let mut x = [0.3f64, -7.0];
        for _ in 0..50 {
            adam.step(&mut x, &[0.0, 0.0], 0.1);
        }
        assert_eq!(x, [0.3, -7.0]);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut adam = Adam::new(1);
        let mut x = [1.0f64];
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            adam.step(&mut x, &g, 0.1);
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }
}
