use crate::scalar::Real;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One in-place update of `params` along `grads`.
    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: T) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut opt = Adam::<f64>::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [3.0, -1e-3, 250.0];
        opt.update(&mut p, &g, 0.01);
        // at t = 1 the bias-corrected step is lr * g / (|g| + eps)
        for (i, (&pi, &gi)) in p.iter().zip(&g).enumerate() {
            let orig = [1.0, -2.0, 0.5][i];
            let expect = orig - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15);
            assert!(((orig - pi).abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut opt = Adam::<f64>::new(2);
        let mut p = vec![0.3, 0.4];
        for _ in 0..100 {
            opt.update(&mut p, &[0.0, 0.0], 0.1);
        }
        assert_eq!(p, vec![0.3, 0.4]);
        assert_eq!(opt.steps(), 100);
    }

    #[test]
    fn entries_are_independent() {
        let mut joint = Adam::<f64>::new(2);
        let mut a = Adam::<f64>::new(1);
        let mut b = Adam::<f64>::new(1);
        let (mut pj, mut pa, mut pb) = (vec![1.0, 2.0], vec![1.0], vec![2.0]);
        for k in 0..20 {
            let (ga, gb) = ((k as f64).sin(), (k as f64 * 0.3).cos() * 5.0);
            joint.update(&mut pj, &[ga, gb], 0.05);
            a.update(&mut pa, &[ga], 0.05);
            b.update(&mut pb, &[gb], 0.05);
        }
        assert_eq!(pj, vec![pa[0], pb[0]]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::<f64>::new(1);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            opt.update(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
