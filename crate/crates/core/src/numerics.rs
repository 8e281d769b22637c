//! Integration, quadrature, least squares and gradient checking kernels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Relative singular-value cutoff used by [`least_squares_pinv`].
pub const PINV_RCOND: f64 = 1e-10;

/// Order of the composite Newton-Cotes rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum QuadratureOrder {
    /// Left-endpoint rule `[dt, .., dt, 0]`; zeroth-order hold.
    ZeroHold,
    /// Composite trapezoid.
    Trapezoid,
    /// Composite Simpson 3/8.
    Simpson38,
}

impl QuadratureOrder {
    pub fn as_u8(self) -> u8 {
        match self {
            QuadratureOrder::ZeroHold => 0,
            QuadratureOrder::Trapezoid => 1,
            QuadratureOrder::Simpson38 => 3,
        }
    }

    /// Whether a rule of this order can span `intervals` sub-intervals.
    pub fn accepts(self, intervals: usize) -> bool {
        match self {
            QuadratureOrder::ZeroHold | QuadratureOrder::Trapezoid => intervals >= 1,
            QuadratureOrder::Simpson38 => intervals >= 3 && intervals % 3 == 0,
        }
    }

    /// Closest interval count to `intervals` that this order accepts.
    pub fn nearest_valid(self, intervals: usize) -> usize {
        match self {
            QuadratureOrder::Simpson38 => (((intervals + 1) / 3) * 3).max(3),
            _ => intervals.max(1),
        }
    }
}

impl TryFrom<u8> for QuadratureOrder {
    type Error = Error;

    fn try_from(p: u8) -> Result<Self> {
        match p {
            0 => Ok(QuadratureOrder::ZeroHold),
            1 => Ok(QuadratureOrder::Trapezoid),
            3 => Ok(QuadratureOrder::Simpson38),
            other => Err(Error::InvalidRule(format!(
                "order {other} is not supported; use 0 (zeroth-order hold), 1 (trapezoid) or 3 (Simpson 3/8)"
            ))),
        }
    }
}

impl From<QuadratureOrder> for u8 {
    fn from(p: QuadratureOrder) -> u8 {
        p.as_u8()
    }
}

impl std::fmt::Display for QuadratureOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// Composite Newton-Cotes rule over `num_intervals` evenly spaced intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureRule<T> {
    pub order: QuadratureOrder,
    pub dt: T,
    pub num_intervals: usize,
}

impl<T: Real> QuadratureRule<T> {
    pub fn new(order: QuadratureOrder, dt: T, num_intervals: usize) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::InvalidRule(format!(
                "time step must be positive, got {}",
                dt.as_f64()
            )));
        }
        if num_intervals == 0 {
            return Err(Error::InvalidRule("need at least one interval".into()));
        }
        if !order.accepts(num_intervals) {
            return Err(Error::InvalidRule(format!(
                "Simpson 3/8 (order 3) needs the number of intervals to be a multiple of 3, got {num_intervals} (nearest valid: {})",
                order.nearest_valid(num_intervals)
            )));
        }
        Ok(QuadratureRule {
            order,
            dt,
            num_intervals,
        })
    }

    /// The `num_intervals + 1` weights `w_0..w_N`.
    pub fn weights(&self) -> Vec<T> {
        quadrature_weights(self)
    }
}

pub fn quadrature_weights<T: Real>(rule: &QuadratureRule<T>) -> Vec<T> {
    let n = rule.num_intervals;
    let dt = rule.dt;
    let mut w = vec![dt; n + 1];
    match rule.order {
        QuadratureOrder::ZeroHold => w[n] = T::zero(),
        QuadratureOrder::Trapezoid => {
            let half = dt * T::of(0.5);
            w[0] = half;
            w[n] = half;
        }
        QuadratureOrder::Simpson38 => {
            let base = dt * T::of(3.0 / 8.0);
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = if i == 0 || i == n {
                    base
                } else if i % 3 == 0 {
                    base * T::of(2.0)
                } else {
                    base * T::of(3.0)
                };
            }
        }
    }
    w
}

/// One classical Runge-Kutta step with the input held constant over the step.
pub fn rk4_step<T, F>(f: F, x: &DVector<T>, u: &DVector<T>, t: T, dt: T) -> Result<DVector<T>>
where
    T: Real,
    F: Fn(&DVector<T>, &DVector<T>, T) -> DVector<T>,
{
    let half = dt * T::of(0.5);
    let k1 = f(x, u, t);
    let k2 = f(&(x + &k1 * half), u, t + half);
    let k3 = f(&(x + &k2 * half), u, t + half);
    let k4 = f(&(x + &k3 * dt), u, t + dt);
    let next = x + (k1 + (k2 + k3) * T::of(2.0) + k4) * (dt / T::of(6.0));
    if next.iter().all(|v| v.finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationBlowup {
            time: (t + dt).as_f64(),
        })
    }
}

/// Minimum-norm `G` minimising `||Z - G Xi||_F`, via a truncated SVD of `Xi`.
///
/// Singular values below `PINV_RCOND * sigma_max` are discarded.
pub fn least_squares_pinv<T: Real>(z: &DMatrix<T>, xi: &DMatrix<T>) -> Result<DMatrix<T>> {
    if z.ncols() != xi.ncols() {
        return Err(Error::Shape {
            what: "least-squares sample count",
            expected: xi.ncols(),
            got: z.ncols(),
        });
    }
    if xi.ncols() == 0 {
        return Err(Error::InvalidData(
            "least squares needs at least one sample".into(),
        ));
    }
    if z.iter().chain(xi.iter()).any(|v| !v.finite()) {
        return Err(Error::InvalidData(
            "non-finite entry in least-squares data".into(),
        ));
    }
    let (nu, n) = (xi.nrows(), z.nrows());
    let svd = xi.clone().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::InvalidData("SVD did not converge".into())),
    };
    let sigma = svd.singular_values;
    let sigma_max = sigma
        .iter()
        .copied()
        .fold(T::zero(), |a, b| if b > a { b } else { a });
    if sigma_max == T::zero() {
        return Ok(DMatrix::zeros(n, nu));
    }
    let cutoff = sigma_max * T::of(PINV_RCOND);
    // G = Z V S^+ U^T
    let mut zv = z * v_t.transpose();
    for (j, &s) in sigma.iter().enumerate() {
        let inv = if s > cutoff { T::one() / s } else { T::zero() };
        zv.column_mut(j).scale_mut(inv);
    }
    Ok(zv * u.transpose())
}

/// Central-difference gradient of `loss` at `theta`.
pub fn finite_diff_grad<T, F>(mut loss: F, theta: &[T], eps: T) -> Vec<T>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    let mut probe = theta.to_vec();
    let two_eps = eps * T::of(2.0);
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = loss(&probe);
            probe[i] = orig - eps;
            let minus = loss(&probe);
            probe[i] = orig;
            (plus - minus) / two_eps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rule(p: u8, dt: f64, n: usize) -> QuadratureRule<f64> {
        QuadratureRule::new(QuadratureOrder::try_from(p).unwrap(), dt, n).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn trapezoid_weights() {
        let w = rule(1, 0.08, 3).weights();
        assert!(close(&w, &[0.04, 0.08, 0.08, 0.04], 1e-15));
    }

    #[test]
    fn simpson_weights() {
        let w = rule(3, 1.0, 3).weights();
        assert_eq!(w, vec![0.375, 1.125, 1.125, 0.375]);
        let w6 = rule(3, 1.0, 6).weights();
        assert_eq!(w6, vec![0.375, 1.125, 1.125, 0.75, 1.125, 1.125, 0.375]);
    }

    #[test]
    fn zero_hold_weights() {
        assert_eq!(rule(0, 0.08, 1).weights(), vec![0.08, 0.0]);
        assert_eq!(rule(0, 0.5, 3).weights(), vec![0.5, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn simpson_requires_multiple_of_three() {
        let err = QuadratureRule::new(QuadratureOrder::Simpson38, 0.08, 4).unwrap_err();
        assert!(matches!(err, Error::InvalidRule(ref m) if m.contains("multiple of 3")));
        assert!(QuadratureOrder::try_from(2).is_err());
        assert!(QuadratureRule::new(QuadratureOrder::Trapezoid, 0.0, 4).is_err());
        assert_eq!(QuadratureOrder::Simpson38.nearest_valid(5), 6);
        assert_eq!(QuadratureOrder::Simpson38.nearest_valid(4), 3);
    }

    #[test]
    fn weights_sum_to_span() {
        for &(p, n) in &[(0u8, 1usize), (0, 7), (1, 1), (1, 25), (3, 3), (3, 24)] {
            let dt = 0.08;
            let s: f64 = rule(p, dt, n).weights().iter().sum();
            let span = n as f64 * dt;
            assert!((s - span).abs() <= 1e-12 * span, "p={p} n={n}");
            assert!(rule(p, dt, n).weights().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn trapezoid_exact_for_linear_and_simpson_for_cubic() {
        let dt = 0.13;
        let lin = |t: f64| 2.0 - 3.0 * t;
        let cubic = |t: f64| 1.0 + t - 2.0 * t * t + 0.7 * t * t * t;
        let quad = |w: &[f64], f: &dyn Fn(f64) -> f64| -> f64 {
            w.iter()
                .enumerate()
                .map(|(i, wi)| wi * f(i as f64 * dt))
                .sum()
        };
        let n = 6;
        let tn = n as f64 * dt;
        let lin_exact = 2.0 * tn - 1.5 * tn * tn;
        let cubic_exact = tn + tn * tn / 2.0 - 2.0 * tn.powi(3) / 3.0 + 0.7 * tn.powi(4) / 4.0;
        assert!((quad(&rule(1, dt, n).weights(), &lin) - lin_exact).abs() < 1e-12);
        assert!((quad(&rule(3, dt, n).weights(), &cubic) - cubic_exact).abs() < 1e-10);
    }

    fn decay(x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> DVector<f64> {
        x * -3.0
    }

    #[test]
    fn rk4_exponential_decay() {
        let x = rk4_step(decay, &dvector![1.0], &DVector::zeros(0), 0.0, 0.08).unwrap();
        assert!((x[0] - 0.786_628).abs() < 1e-5);
        assert!((x[0] - (-0.24_f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn rk4_constant_field() {
        let zero = |x: &DVector<f64>, _: &DVector<f64>, _: f64| DVector::zeros(x.len());
        let x = rk4_step(zero, &dvector![4.2, -1.0], &DVector::zeros(0), 0.0, 0.37).unwrap();
        assert_eq!(x, dvector![4.2, -1.0]);
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let endpoint_err = |steps: usize| {
            let dt = 0.8 / steps as f64;
            let mut x = dvector![1.0];
            for k in 0..steps {
                x = rk4_step(decay, &x, &DVector::zeros(0), k as f64 * dt, dt).unwrap();
            }
            (x[0] - (-2.4_f64).exp()).abs()
        };
        let ratio = endpoint_err(10) / endpoint_err(20);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rk4_reports_blowup() {
        let explode = |x: &DVector<f64>, _: &DVector<f64>, _: f64| x.map(|v| v * 1e300);
        let err = rk4_step(explode, &dvector![1e10], &DVector::zeros(0), 1.0, 0.5).unwrap_err();
        assert!(matches!(err, Error::IntegrationBlowup { time } if time == 1.5));
    }

    #[test]
    fn pinv_identity_and_scalar() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert!((least_squares_pinv(&i, &i).unwrap() - &i).norm() < 1e-14);
        let xi = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.3, 4.0]);
        let g = least_squares_pinv(&(&xi * 2.0), &xi).unwrap();
        assert!((g - i * 2.0).norm() < 1e-12);
    }

    #[test]
    fn pinv_recovers_known_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xi = DMatrix::from_fn(4, 100, |_, _| rng.random_range(-1.0..1.0));
        let g0 = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let g = least_squares_pinv(&(&g0 * &xi), &xi).unwrap();
        assert!((&g - &g0).norm() / g0.norm() < 1e-8);
    }

    #[test]
    fn pinv_rank_deficient_gives_minimum_norm() {
        // duplicate regressor rows: the minimum-norm solution splits the weight evenly
        let row = [1.0, 2.0, -1.0, 0.5];
        let xi = DMatrix::from_row_slice(2, 4, &[row, row].concat());
        let z = DMatrix::from_row_slice(1, 4, &row.map(|v| 3.0 * v));
        let g: DMatrix<f64> = least_squares_pinv(&z, &xi).unwrap();
        assert!((g[(0, 0)] - 1.5).abs() < 1e-10 && (g[(0, 1)] - 1.5).abs() < 1e-10);
        let zero = least_squares_pinv(&z, &DMatrix::zeros(2, 4)).unwrap();
        assert_eq!(zero, DMatrix::zeros(1, 2));
    }

    #[test]
    fn pinv_rejects_nan() {
        let mut xi = DMatrix::<f64>::identity(2, 2);
        xi[(0, 1)] = f64::NAN;
        assert!(matches!(
            least_squares_pinv(&DMatrix::identity(2, 2), &xi),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn pinv_beats_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xi = DMatrix::from_fn(5, 60, |_, _| rng.random_range(-1.0..1.0));
        let z = DMatrix::from_fn(3, 60, |_, _| rng.random_range(-1.0..1.0));
        let g = least_squares_pinv(&z, &xi).unwrap();
        let best = (&z - &g * &xi).norm();
        for _ in 0..100 {
            let d = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1e-3..1e-3));
            assert!(best <= (&z - (&g + d) * &xi).norm());
        }
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|t: &[f64]| t[0] * t[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_: &[f64]| 4.0, &[1.0, 2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn finite_differences_toy_decoder() {
        // decoder x_hat = a * tanh(b * z) reconstructing x at z; loss = (x - x_hat)^2
        let (x, z) = (0.7, 1.3);
        let loss = |p: &[f64]| (x - p[0] * (p[1] * z).tanh()).powi(2);
        let (a, b) = (0.9, -0.4);
        let r = x - a * (b * z).tanh();
        let sech2 = 1.0 - (b * z).tanh().powi(2);
        let analytic = [-2.0 * r * (b * z).tanh(), -2.0 * r * a * sech2 * z];
        let fd = finite_diff_grad(loss, &[a, b], 1e-6);
        for (f, an) in fd.iter().zip(analytic) {
            assert!((f - an).abs() < 1e-6);
        }
    }
}
