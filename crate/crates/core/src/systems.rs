//! Benchmark control-affine plants `x' = f0(x) + sum_i f_i(x) u_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Standard gravity used by the double pendulum.
pub const GRAVITY: f64 = 9.81;

pub trait ControlAffineSystem<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Drift term `f0(x)`.
    fn drift(&self, x: &DVector<T>) -> DVector<T>;
    /// Input coupling `f_i(x)` for `i` in `0..input_dim`.
    fn coupling(&self, i: usize, x: &DVector<T>) -> DVector<T>;

    /// Full vector field `f0(x) + sum_i f_i(x) u_i`.
    fn eval_field(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        if x.len() != self.state_dim() {
            return Err(Error::Shape {
                what: "state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(Error::Shape {
                what: "input",
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(self.field_unchecked(x, u))
    }

    #[doc(hidden)]
    fn field_unchecked(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let mut dx = self.drift(x);
        for (i, &ui) in u.iter().enumerate() {
            if ui != T::zero() {
                dx.axpy(ui, &self.coupling(i, x), T::one());
            }
        }
        dx
    }
}

/// `x1' = mu x1 + u1 + u3 x1`, `x2' = lambda (x2 - x1^2) + u2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolicSystem<T> {
    pub mu: T,
    pub lambda: T,
}

impl<T: Real> Default for ParabolicSystem<T> {
    fn default() -> Self {
        ParabolicSystem {
            mu: T::of(-3.0),
            lambda: T::of(-2.0),
        }
    }
}

impl<T: Real> ParabolicSystem<T> {
    /// Isolated equilibrium under the constant input `u`.
    pub fn equilibrium(&self, u: &DVector<T>) -> Result<DVector<T>> {
        if u.len() != 3 {
            return Err(Error::Shape {
                what: "input",
                expected: 3,
                got: u.len(),
            });
        }
        let denom = self.mu + u[2];
        if denom == T::zero() {
            return Err(Error::SingularEquilibrium);
        }
        let x1 = -u[0] / denom;
        Ok(DVector::from_vec(vec![x1, x1 * x1 - u[1] / self.lambda]))
    }
}

impl<T: Real> ControlAffineSystem<T> for ParabolicSystem<T> {
    fn name(&self) -> &'static str {
        "parabolic"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &DVector<T>) -> DVector<T> {
        DVector::from_vec(vec![self.mu * x[0], self.lambda * (x[1] - x[0] * x[0])])
    }

    fn coupling(&self, i: usize, x: &DVector<T>) -> DVector<T> {
        match i {
            0 => DVector::from_vec(vec![T::one(), T::zero()]),
            1 => DVector::from_vec(vec![T::zero(), T::one()]),
            2 => DVector::from_vec(vec![x[0], T::zero()]),
            _ => panic!("parabolic system has 3 inputs, asked for coupling {i}"),
        }
    }
}

/// Exact polynomial lift `(x1, x2, x1^2, 1)` of the parabolic system.
pub fn analytic_lift<T: Real>(x: &DVector<T>) -> DVector<T> {
    DVector::from_vec(vec![x[0], x[1], x[0] * x[0], T::one()])
}

/// Exact bilinear matrices `(A, [B1, B2, B3])` of the parabolic system in the
/// [`analytic_lift`] coordinates.
pub fn analytic_kbf_matrices<T: Real>(mu: T, lambda: T) -> (DMatrix<T>, Vec<DMatrix<T>>) {
    let two = T::of(2.0);
    let mut a = DMatrix::zeros(4, 4);
    a[(0, 0)] = mu;
    a[(1, 1)] = lambda;
    a[(1, 2)] = -lambda;
    a[(2, 2)] = two * mu;
    let mut b1 = DMatrix::zeros(4, 4);
    b1[(0, 3)] = T::one();
    b1[(2, 0)] = two;
    let mut b2 = DMatrix::zeros(4, 4);
    b2[(1, 3)] = T::one();
    let mut b3 = DMatrix::zeros(4, 4);
    b3[(0, 0)] = T::one();
    b3[(2, 2)] = two;
    (a, vec![b1, b2, b3])
}

/// Which form of the second pendulum's angular acceleration to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PendulumVariant {
    /// Gravity term `-M g sin(theta1)` in the second equation, as printed.
    #[default]
    Verbatim,
    /// Textbook form with `-M g sin(theta2)`.
    Conventional,
}

/// Damped, controlled double pendulum with state `(theta1, omega1, theta2, omega2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoublePendulumSystem<T> {
    pub m1: T,
    pub m2: T,
    pub l1: T,
    pub l2: T,
    pub g: T,
    pub variant: PendulumVariant,
}

impl<T: Real> Default for DoublePendulumSystem<T> {
    fn default() -> Self {
        DoublePendulumSystem {
            m1: T::one(),
            m2: T::one(),
            l1: T::one(),
            l2: T::one(),
            g: T::of(GRAVITY),
            variant: PendulumVariant::Verbatim,
        }
    }
}

impl<T: Real> DoublePendulumSystem<T> {
    fn rho(&self, delta: T) -> T {
        let c = delta.cos();
        self.m1 + self.m2 - self.m2 * c * c
    }

    /// Total mechanical energy (kinetic plus gravitational potential).
    pub fn energy(&self, x: &DVector<T>) -> T {
        let (th1, w1, th2, w2) = (x[0], x[1], x[2], x[3]);
        let half = T::of(0.5);
        let mbar = self.m1 + self.m2;
        let kinetic = half * mbar * self.l1 * self.l1 * w1 * w1
            + half * self.m2 * self.l2 * self.l2 * w2 * w2
            + self.m2 * self.l1 * self.l2 * w1 * w2 * (th1 - th2).cos();
        let potential =
            -mbar * self.g * self.l1 * th1.cos() - self.m2 * self.g * self.l2 * th2.cos();
        kinetic + potential
    }
}

impl<T: Real> ControlAffineSystem<T> for DoublePendulumSystem<T> {
    fn name(&self) -> &'static str {
        "double-pendulum"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &DVector<T>) -> DVector<T> {
        let (th1, w1, th2, w2) = (x[0], x[1], x[2], x[3]);
        let (m2, l1, l2, g) = (self.m2, self.l1, self.l2, self.g);
        let mbar = self.m1 + m2;
        let delta = th2 - th1;
        let (sd, cd) = (delta.sin(), delta.cos());
        let rho = self.rho(delta);
        let acc1 = (m2 * l1 * w1 * w1 * sd * cd + m2 * g * th2.sin() * cd + m2 * l2 * w2 * w2 * sd
            - mbar * g * th1.sin())
            / (l1 * rho)
            - w1;
        let last = match self.variant {
            PendulumVariant::Verbatim => th1.sin(),
            PendulumVariant::Conventional => th2.sin(),
        };
        let acc2 = (-m2 * l2 * w2 * w2 * sd * cd + mbar * g * th1.sin() * cd
            - mbar * l1 * w1 * w1 * sd
            - mbar * g * last)
            / (l2 * rho)
            - w2;
        DVector::from_vec(vec![w1, acc1, w2, acc2])
    }

    fn coupling(&self, i: usize, x: &DVector<T>) -> DVector<T> {
        let rho = self.rho(x[2] - x[0]);
        let mut f = DVector::zeros(4);
        match i {
            0 => f[1] = T::one() / (self.l1 * rho),
            1 => f[3] = T::one() / (self.l2 * rho),
            _ => panic!("double pendulum has 2 inputs, asked for coupling {i}"),
        }
        f
    }
}

/// Named benchmark system, as selected on the command line or in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum SystemKind {
    Parabolic {
        #[serde(default = "default_mu")]
        mu: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    DoublePendulum {
        #[serde(default)]
        variant: PendulumVariant,
    },
}

fn default_mu() -> f64 {
    -3.0
}

fn default_lambda() -> f64 {
    -2.0
}

impl SystemKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "parabolic" => Ok(SystemKind::Parabolic {
                mu: default_mu(),
                lambda: default_lambda(),
            }),
            "double-pendulum" => Ok(SystemKind::DoublePendulum {
                variant: PendulumVariant::Verbatim,
            }),
            other => Err(Error::Config(format!(
                "unknown system '{other}' (expected 'parabolic' or 'double-pendulum')"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::Parabolic { .. } => "parabolic",
            SystemKind::DoublePendulum { .. } => "double-pendulum",
        }
    }

    pub fn build<T: Real>(&self) -> Box<dyn ControlAffineSystem<T>> {
        match *self {
            SystemKind::Parabolic { mu, lambda } => Box::new(ParabolicSystem {
                mu: T::of(mu),
                lambda: T::of(lambda),
            }),
            SystemKind::DoublePendulum { variant } => Box::new(DoublePendulumSystem {
                variant,
                ..DoublePendulumSystem::default()
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rk4_step;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn para() -> ParabolicSystem<f64> {
        ParabolicSystem::default()
    }

    fn lifted_rhs(
        a: &DMatrix<f64>,
        b: &[DMatrix<f64>],
        z: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        let mut dz = a * z;
        for (bi, &ui) in b.iter().zip(u.iter()) {
            dz += bi * z * ui;
        }
        dz
    }

    #[test]
    fn parabolic_field_examples() {
        let s = para();
        assert_eq!(
            s.eval_field(&dvector![0.0, 0.0], &dvector![0.0, 0.0, 0.0])
                .unwrap(),
            dvector![0.0, 0.0]
        );
        assert_eq!(
            s.eval_field(&dvector![1.0, 1.0], &dvector![0.0, 0.0, 0.0])
                .unwrap(),
            dvector![-3.0, 0.0]
        );
        assert_eq!(
            s.eval_field(&dvector![1.0, 0.0], &dvector![1.0, 0.0, 2.0])
                .unwrap(),
            dvector![0.0, 2.0]
        );
    }

    #[test]
    fn field_shape_errors() {
        let s = para();
        assert!(matches!(
            s.eval_field(&dvector![1.0], &dvector![0.0, 0.0, 0.0]),
            Err(Error::Shape { what: "state", .. })
        ));
        assert!(matches!(
            s.eval_field(&dvector![1.0, 2.0], &dvector![0.0]),
            Err(Error::Shape { what: "input", .. })
        ));
    }

    #[test]
    fn equilibria() {
        let s = para();
        assert_eq!(
            s.equilibrium(&dvector![0.0, 0.0, 0.0]).unwrap(),
            dvector![0.0, 0.0]
        );
        assert_eq!(
            s.equilibrium(&dvector![3.0, 0.0, 0.0]).unwrap(),
            dvector![1.0, 1.0]
        );
        assert_eq!(
            s.equilibrium(&dvector![0.0, 2.0, 0.0]).unwrap(),
            dvector![0.0, 1.0]
        );
        assert!(matches!(
            s.equilibrium(&dvector![1.0, 0.0, 3.0]),
            Err(Error::SingularEquilibrium)
        ));
    }

    #[test]
    fn rk4_stays_at_equilibrium() {
        let s = para();
        let u = dvector![0.7, -1.1, 0.4];
        let xe = s.equilibrium(&u).unwrap();
        let f = |x: &DVector<f64>, u: &DVector<f64>, _t: f64| s.field_unchecked(x, u);
        let mut x = xe.clone();
        for k in 0..25 {
            x = rk4_step(f, &x, &u, k as f64 * 0.08, 0.08).unwrap();
        }
        assert!((x - xe).amax() < 1e-10);
    }

    #[test]
    fn lift_examples() {
        assert_eq!(
            analytic_lift(&dvector![0.0, 0.0]),
            dvector![0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(
            analytic_lift(&dvector![2.0, 1.0]),
            dvector![2.0, 1.0, 4.0, 1.0]
        );
        assert_eq!(
            analytic_lift(&dvector![-1.0, 3.0]),
            dvector![-1.0, 3.0, 1.0, 1.0]
        );
    }

    #[test]
    fn oracle_lifted_derivative_at_one_one() {
        let (a, b) = analytic_kbf_matrices(-3.0, -2.0);
        let dz = lifted_rhs(
            &a,
            &b,
            &analytic_lift(&dvector![1.0, 1.0]),
            &dvector![0.0, 0.0, 0.0],
        );
        assert_eq!(dz, dvector![-3.0, 0.0, -6.0, 0.0]);
        assert!(a.row(3).iter().all(|&v| v == 0.0));
        assert!(b.iter().all(|bi| bi.row(3).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn oracle_matches_chain_rule() {
        let s = para();
        let (a, b) = analytic_kbf_matrices(s.mu, s.lambda);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = dvector![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let u = dvector![
                rng.random_range(-1.8..1.8),
                rng.random_range(-1.8..1.8),
                rng.random_range(-1.8..1.8)
            ];
            let xdot = s.eval_field(&x, &u).unwrap();
            let chain = dvector![xdot[0], xdot[1], 2.0 * x[0] * xdot[0], 0.0];
            let dz = lifted_rhs(&a, &b, &analytic_lift(&x), &u);
            assert!((&dz - &chain).amax() < 1e-12 * (1.0 + chain.amax()));
            assert!((dz.rows(0, 2) - xdot).amax() < 1e-12);
        }
    }

    #[test]
    fn parabolic_decays_without_input() {
        let s = para();
        let f = |x: &DVector<f64>, u: &DVector<f64>, _t: f64| s.field_unchecked(x, u);
        let u = DVector::zeros(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x0 = dvector![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let mut x = x0.clone();
            for k in 0..25 {
                x = rk4_step(f, &x, &u, k as f64 * 0.08, 0.08).unwrap();
            }
            assert!(x.norm() < 0.2 * x0.norm().max(1.0), "x0={x0:?} x={x:?}");
        }
    }

    #[test]
    fn pendulum_rho_positive() {
        let p = DoublePendulumSystem::<f64>::default();
        for k in 0..100 {
            let d = -7.0 + 0.14 * k as f64;
            assert!(p.rho(d) >= p.m1 - 1e-15);
        }
    }

    #[test]
    fn pendulum_rest_is_equilibrium() {
        for variant in [PendulumVariant::Verbatim, PendulumVariant::Conventional] {
            let p = DoublePendulumSystem::<f64> {
                variant,
                ..Default::default()
            };
            let dx = p
                .eval_field(&DVector::zeros(4), &DVector::zeros(2))
                .unwrap();
            assert_eq!(dx, DVector::zeros(4));
        }
    }

    #[test]
    fn pendulum_conventional_energy_decreases() {
        let p = DoublePendulumSystem::<f64> {
            variant: PendulumVariant::Conventional,
            ..Default::default()
        };
        let f = |x: &DVector<f64>, u: &DVector<f64>, _t: f64| p.field_unchecked(x, u);
        let u = DVector::zeros(2);
        let deg = std::f64::consts::PI / 180.0;
        let mut x = dvector![9.0 * deg, 5.0 * deg, -7.0 * deg, -8.0 * deg];
        let mut e = p.energy(&x);
        for k in 0..400 {
            x = rk4_step(f, &x, &u, k as f64 * 0.01, 0.01).unwrap();
            let e_next = p.energy(&x);
            assert!(e_next <= e + 1e-6, "step {k}: {e} -> {e_next}");
            e = e_next;
        }
    }

    #[test]
    fn pendulum_variants_differ_only_in_second_acceleration() {
        let x = dvector![0.1, -0.05, -0.12, 0.2];
        let v = DoublePendulumSystem::<f64>::default().drift(&x);
        let c = DoublePendulumSystem::<f64> {
            variant: PendulumVariant::Conventional,
            ..Default::default()
        }
        .drift(&x);
        assert_eq!(v.rows(0, 3), c.rows(0, 3));
        assert!((v[3] - c[3]).abs() > 1e-3);
    }

    #[test]
    fn system_kind_by_name() {
        assert_eq!(
            SystemKind::from_name("parabolic").unwrap().name(),
            "parabolic"
        );
        assert_eq!(
            SystemKind::from_name("double-pendulum")
                .unwrap()
                .build::<f64>()
                .state_dim(),
            4
        );
        assert!(SystemKind::from_name("lorenz").is_err());
        let json = r#"{"name":"parabolic"}"#;
        let k: SystemKind = serde_json::from_str(json).unwrap();
        assert_eq!(
            k,
            SystemKind::Parabolic {
                mu: -3.0,
                lambda: -2.0
            }
        );
    }
}
