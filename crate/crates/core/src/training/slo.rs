use std::time::Instant;

use nalgebra::{DMatrix, DVector, Dyn, Matrix, Storage, U1};
use serde::{Deserialize, Serialize};

use super::{
    check_batches, diverged, random_stacked, require_normalized, shuffle_rng, shuffled_batches,
    Adam, EpochRecord, LossWeights, Method, TrainConfig, TrainReport, Trained,
};
use crate::autoencoder::AutoencoderParams;
use crate::dataset::{TrajectorySet, WindowBatch};
use crate::error::{Error, Result};
use crate::kbf::{split_stacked, Embedding, KbfModel, ModelMeta, PredictionMode};
use crate::scalar::Real;

/// Which single-level losses to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SloLossKind {
    /// Rollout losses over `i = 0..N`, normalized by `N + 1`.
    MultiStep,
    /// One-step-ahead losses over `k = 1..N`, normalized by `N`.
    SingleStep,
}

/// How the dynamics-loss gradient is carried back through the rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backprop {
    /// Each horizon term is differentiated through its own chain
    /// `A_{i-1} .. A_0`, as an unrolled graph does; quadratic in `N`.
    #[default]
    Nested,
    /// One reverse sweep accumulating all terms; linear in `N`.
    Adjoint,
}

/// Single-level losses and gradients.
#[derive(Debug, Clone)]
pub struct SloEval<T> {
    pub l_e: T,
    pub l_d: T,
    pub l_r: T,
    pub grad_ae: AutoencoderParams<T>,
    pub grad_g: DMatrix<T>,
}

impl<T: Real> SloEval<T> {
    pub fn weighted_total(&self, w: &LossWeights) -> T {
        self.l_e * T::of(w.encoder)
            + self.l_d * T::of(w.decoder)
            + self.l_r * T::of(w.reconstruction)
    }
}

/// `A_k = I + dt (A + sum_i B_i u_{k,i})`.
fn step_matrix<T: Real>(a: &DMatrix<T>, b: &[DMatrix<T>], u: &[T], dt: T) -> DMatrix<T> {
    let mut ak = a * dt;
    for (bi, &ui) in b.iter().zip(u) {
        if ui != T::zero() {
            ak.zip_apply(bi, |x, y| *x += y * ui * dt);
        }
    }
    for d in 0..ak.nrows() {
        ak[(d, d)] += T::one();
    }
    ak
}

/// Single-level objective on `windows` under the zero-order-hold discretization.
///
/// `z_0 = phi(x_0)` and `z_k = A_{k-1} z_{k-1}`. Multi-step losses compare the
/// rollout with `phi(x_i)` and `x_i`; single-step losses restart every step
/// from `phi(x_{k-1})`. The returned losses are unweighted, the gradients
/// are of the weighted sum.
pub fn slo_objective<T: Real>(
    ae: &AutoencoderParams<T>,
    g: &DMatrix<T>,
    windows: &WindowBatch<T>,
    kind: SloLossKind,
    weights: &LossWeights,
    backprop: Backprop,
) -> Result<SloEval<T>> {
    let n = ae.embed_dim();
    let m = windows.input_dim;
    let r = windows.state_dim;
    if g.nrows() != n || g.ncols() != n * (m + 1) {
        return Err(Error::Shape {
            what: "stacked system matrix columns",
            expected: n * (m + 1),
            got: g.ncols(),
        });
    }
    let (a, b) = split_stacked(g);
    let dt = windows.dt;
    let big_n = windows.horizon;
    let s = windows.samples_per_window();
    let k = windows.len();
    let x = windows.state_matrix();
    let (phi, etape) = ae.encode_tape(&x)?;

    // predicted embeddings: rollout (multi-step) or one step from phi (single-step)
    let nested = kind == SloLossKind::MultiStep && backprop == Backprop::Nested;
    let mut zp = phi.clone();
    let mut steps: Vec<DMatrix<T>> = Vec::with_capacity(k * big_n);
    for w in 0..k {
        let base = w * s;
        for i in 0..big_n {
            steps.push(step_matrix(&a, &b, windows.input(w, i), dt));
        }
        let ak = |i: usize| &steps[w * big_n + i];
        for i in 0..big_n {
            let next = match kind {
                SloLossKind::SingleStep => ak(i) * phi.column(base + i),
                // each z_t evaluated through its own chain from z_0
                SloLossKind::MultiStep if nested => {
                    let mut z = phi.column(base).into_owned();
                    for j in 0..=i {
                        z = ak(j) * z;
                    }
                    z
                }
                SloLossKind::MultiStep => ak(i) * zp.column(base + i),
            };
            zp.set_column(base + i + 1, &next);
        }
    }

    // which sample columns carry the dynamics losses
    let first = match kind {
        SloLossKind::MultiStep => 0,
        SloLossKind::SingleStep => 1,
    };
    let terms = T::of_usize(k * (big_n + 1 - first));
    let s_e = T::one() / (terms * T::of_usize(n));
    let s_d = T::one() / (terms * T::of_usize(r));
    let s_r = T::one() / T::of_usize(x.len());
    let (we, wd, wr) = (
        T::of(weights.encoder),
        T::of(weights.decoder),
        T::of(weights.reconstruction),
    );
    let two = T::of(2.0);

    let mut mask = DMatrix::from_element(1, k * s, T::one());
    if first == 1 {
        for w in 0..k {
            mask[(0, w * s)] = T::zero();
        }
    }

    let mut grads = ae.zeros_like();
    let mut e_res = &phi - &zp;
    for (j, mut col) in e_res.column_iter_mut().enumerate() {
        col *= mask[(0, j)];
    }
    let l_e = e_res.norm_squared() * s_e;

    let (xd, dtape) = ae.decode_tape(&zp)?;
    let mut d_res = &xd - &x;
    for (j, mut col) in d_res.column_iter_mut().enumerate() {
        col *= mask[(0, j)];
    }
    let l_d = d_res.norm_squared() * s_d;
    let mut d_zp = ae.decode_backward(&dtape, d_res * (two * s_d * wd), &mut grads);
    d_zp -= &e_res * (two * s_e * we);
    let mut d_phi = &e_res * (two * s_e * we);

    let (xr, rtape) = ae.decode_tape(&phi)?;
    let r_res = &xr - &x;
    let l_r = r_res.norm_squared() * s_r;
    d_phi += ae.decode_backward(&rtape, r_res * (two * s_r * wr), &mut grads);

    // carry d_zp back through the dynamics into G and phi
    let nu = n * (m + 1);
    let mut grad_g = DMatrix::zeros(n, nu);
    let mut lam = DMatrix::zeros(n, k * s);
    for w in 0..k {
        let base = w * s;
        let ak = |i: usize| &steps[w * big_n + i];
        match kind {
            SloLossKind::SingleStep => {
                for i in 1..=big_n {
                    let l = d_zp.column(base + i).into_owned();
                    let back = ak(i - 1).tr_mul(&l);
                    let mut c = d_phi.column_mut(base + i - 1);
                    c += back;
                    lam.set_column(base + i, &l);
                }
            }
            SloLossKind::MultiStep => match backprop {
                Backprop::Adjoint => {
                    let mut l = d_zp.column(base + big_n).into_owned();
                    lam.set_column(base + big_n, &l);
                    for i in (0..big_n).rev() {
                        l = ak(i).tr_mul(&l) + d_zp.column(base + i);
                        lam.set_column(base + i, &l);
                    }
                    let mut c = d_phi.column_mut(base);
                    c += l;
                }
                Backprop::Nested => {
                    let mut acc: DVector<T> = d_zp.column(base).into_owned();
                    for term in 1..=big_n {
                        let mut l = d_zp.column(base + term).into_owned();
                        for i in (0..term).rev() {
                            add_g_grad(
                                &mut grad_g,
                                dt,
                                &l,
                                &zp.column(base + i),
                                windows.input(w, i),
                            );
                            l = ak(i).tr_mul(&l);
                        }
                        acc += l;
                    }
                    let mut c = d_phi.column_mut(base);
                    c += acc;
                }
            },
        }
        if nested {
            continue;
        }
        for i in 0..big_n {
            let z_src = match kind {
                SloLossKind::MultiStep => zp.column(base + i),
                SloLossKind::SingleStep => phi.column(base + i),
            };
            add_g_grad(
                &mut grad_g,
                dt,
                &lam.column(base + i + 1),
                &z_src,
                windows.input(w, i),
            );
        }
    }
    ae.encode_backward(&etape, &d_phi, &mut grads);
    Ok(SloEval {
        l_e,
        l_d,
        l_r,
        grad_ae: grads,
        grad_g,
    })
}

/// `dG += dt * l y^T` with `y = [z; u_1 z; ..; u_m z]`.
fn add_g_grad<T, S1, S2>(
    grad_g: &mut DMatrix<T>,
    dt: T,
    l: &Matrix<T, Dyn, U1, S1>,
    z: &Matrix<T, Dyn, U1, S2>,
    u: &[T],
) where
    T: Real,
    S1: Storage<T, Dyn, U1>,
    S2: Storage<T, Dyn, U1>,
{
    let n = l.len();
    grad_g.columns_mut(0, n).ger(dt, l, z, T::one());
    for (j, &uj) in u.iter().enumerate() {
        if uj != T::zero() {
            grad_g
                .columns_mut((j + 1) * n, n)
                .ger(dt * uj, l, z, T::one());
        }
    }
}

/// Single-level baseline training (`slo-1` or `slo-n`).
pub fn train_slo<T: Real>(data: &TrajectorySet<T>, cfg: &TrainConfig) -> Result<Trained<T>> {
    cfg.validate()?;
    let windows = data.windows(cfg.effective_horizon())?;
    train_slo_windows(data, &windows, cfg)
}

/// As [`train_slo`] on a given set of windows.
pub fn train_slo_windows<T: Real>(
    data: &TrajectorySet<T>,
    windows: &WindowBatch<T>,
    cfg: &TrainConfig,
) -> Result<Trained<T>> {
    train_slo_with(data, windows, cfg, Backprop::default())
}

pub(crate) fn train_slo_with<T: Real>(
    data: &TrajectorySet<T>,
    windows: &WindowBatch<T>,
    cfg: &TrainConfig,
    backprop: Backprop,
) -> Result<Trained<T>> {
    if !cfg.method.is_slo() {
        return Err(Error::Config(format!(
            "{} is not a single-level method",
            cfg.method
        )));
    }
    cfg.validate()?;
    require_normalized(data)?;
    let horizon = cfg.effective_horizon();
    if windows.horizon != horizon {
        return Err(Error::Config(format!(
            "windows have horizon {}, config asks for {horizon}",
            windows.horizon
        )));
    }
    check_batches(windows.len(), cfg.batches)?;
    let kind = if cfg.method == Method::Slo1 {
        SloLossKind::SingleStep
    } else {
        SloLossKind::MultiStep
    };

    let arch = cfg.architecture_for(&data.system);
    let mut ae = AutoencoderParams::<T>::init(&arch, data.state_dim, cfg.seed);
    let n = ae.embed_dim();
    let nu = n * (data.input_dim + 1);
    let mut g = random_stacked(n, nu, cfg.g_init_scale, cfg.seed);
    let lr = T::of(cfg.learning_rate());
    let mut rng = shuffle_rng(cfg.seed);
    let mut adam = Adam::new(ae.num_params());
    let mut adam_g = Adam::new(n * nu);
    let lw = cfg.loss_weights;

    let mut report = TrainReport {
        method: cfg.method,
        horizon,
        windows: windows.len(),
        records: Vec::with_capacity(cfg.epochs + 1),
        model_path: None,
        final_test_error: None,
    };
    let start = slo_objective(&ae, &g, windows, kind, &lw, backprop)?;
    report.records.push(record(
        0,
        start.l_e.as_f64(),
        start.l_d.as_f64(),
        start.l_r.as_f64(),
        &lw,
        0.0,
    ));
    if !start.weighted_total(&lw).finite() {
        return Err(diverged(0, &report));
    }

    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let (mut se, mut sd, mut sr) = (0.0, 0.0, 0.0);
        for idx in shuffled_batches(windows.len(), cfg.batches, &mut rng) {
            let batch = windows.select(&idx);
            let share = idx.len() as f64 / windows.len() as f64;
            let eval = slo_objective(&ae, &g, &batch, kind, &lw, backprop)?;
            se += share * eval.l_e.as_f64();
            sd += share * eval.l_d.as_f64();
            sr += share * eval.l_r.as_f64();
            let mut params = ae.to_vec();
            adam.update(&mut params, &eval.grad_ae.to_vec(), lr);
            ae.assign(&params);
            adam_g.update(g.as_mut_slice(), eval.grad_g.as_slice(), lr);
        }
        let rec = record(epoch, se, sd, sr, &lw, clock.elapsed().as_secs_f64());
        let finite = rec.total.is_finite();
        report.records.push(rec);
        if !finite {
            return Err(diverged(epoch, &report));
        }
        log::debug!(
            "{} epoch {epoch}: L_e {se:.3e} L_d {sd:.3e} L_r {sr:.3e}",
            cfg.method
        );
    }

    let (a, b) = split_stacked(&g);
    let model = KbfModel {
        a,
        b,
        embedding: Embedding::Learned(ae),
        scaler: data.scaler.clone(),
        meta: ModelMeta {
            n,
            m: data.input_dim,
            r: data.state_dim,
            dt_train: windows.dt.as_f64(),
            horizon_train: horizon,
            quadrature_order: None,
            method: cfg.method.as_str().into(),
            system: data.system.clone(),
            default_mode: PredictionMode::Zoh,
        },
    };
    Ok((model, report))
}

fn record(
    epoch: usize,
    l_e: f64,
    l_d: f64,
    l_r: f64,
    w: &LossWeights,
    seconds: f64,
) -> EpochRecord {
    EpochRecord {
        epoch,
        l_e,
        l_d: Some(l_d),
        l_r,
        total: w.encoder * l_e + w.decoder * l_d + w.reconstruction * l_r,
        seconds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::Architecture;
    use crate::numerics::finite_diff_grad;

    fn toy_windows(horizon: usize) -> WindowBatch<f64> {
        let (r, m, k) = (2, 2, 4);
        let s = horizon + 1;
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for w in 0..k {
            for i in 0..s {
                let t = (w * s + i) as f64;
                states.extend([
                    0.5 + 0.4 * (0.3 * t).sin(),
                    0.5 + 0.3 * (0.7 * t + 1.0).cos(),
                ]);
                inputs.extend([(0.2 * t).cos(), -0.5 + 0.1 * t.sin()]);
            }
        }
        WindowBatch {
            horizon,
            dt: 0.1,
            state_dim: r,
            input_dim: m,
            states,
            inputs,
            origins: (0..k).map(|w| (w, 0)).collect(),
        }
    }

    fn setup() -> (AutoencoderParams<f64>, DMatrix<f64>) {
        let arch = Architecture {
            encoder_hidden: vec![5],
            decoder_hidden: vec![4],
            learned_dim: 2,
        };
        let ae = AutoencoderParams::init(&arch, 2, 5);
        let g = DMatrix::from_fn(3, 9, |i, j| 0.3 * ((i * 5 + j * 2) as f64).cos());
        (ae, g)
    }

    fn check_fd(kind: SloLossKind, horizon: usize, backprop: Backprop) {
        let win = toy_windows(horizon);
        let (ae, g) = setup();
        let lw = LossWeights {
            encoder: 1.0,
            decoder: 0.7,
            reconstruction: 1.3,
        };
        let eval = slo_objective(&ae, &g, &win, kind, &lw, backprop).unwrap();
        let fd = finite_diff_grad(
            |p: &[f64]| {
                let mut q = ae.clone();
                q.assign(p);
                slo_objective(&q, &g, &win, kind, &lw, backprop)
                    .unwrap()
                    .weighted_total(&lw)
            },
            &ae.to_vec(),
            1e-6,
        );
        let an = eval.grad_ae.to_vec();
        let err: f64 = an
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            err / scale < 1e-5,
            "autoencoder gradient error {}",
            err / scale
        );

        let fd_g = finite_diff_grad(
            |p: &[f64]| {
                let gm = DMatrix::from_column_slice(3, 9, p);
                slo_objective(&ae, &gm, &win, kind, &lw, backprop)
                    .unwrap()
                    .weighted_total(&lw)
            },
            g.as_slice(),
            1e-6,
        );
        let err: f64 = eval
            .grad_g
            .iter()
            .zip(&fd_g)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = fd_g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / scale < 1e-5, "G gradient error {}", err / scale);
    }

    #[test]
    fn multi_step_gradients_nested() {
        check_fd(SloLossKind::MultiStep, 4, Backprop::Nested);
    }

    #[test]
    fn multi_step_gradients_adjoint() {
        check_fd(SloLossKind::MultiStep, 4, Backprop::Adjoint);
    }

    #[test]
    fn single_step_gradients() {
        check_fd(SloLossKind::SingleStep, 1, Backprop::Nested);
        check_fd(SloLossKind::SingleStep, 3, Backprop::Nested);
    }

    #[test]
    fn nested_equals_adjoint() {
        let win = toy_windows(5);
        let (ae, g) = setup();
        let lw = LossWeights::default();
        let a =
            slo_objective(&ae, &g, &win, SloLossKind::MultiStep, &lw, Backprop::Nested).unwrap();
        let b = slo_objective(
            &ae,
            &g,
            &win,
            SloLossKind::MultiStep,
            &lw,
            Backprop::Adjoint,
        )
        .unwrap();
        assert!((a.grad_g - b.grad_g).norm() < 1e-12);
        let (ga, gb) = (a.grad_ae.to_vec(), b.grad_ae.to_vec());
        assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn one_step_losses_agree_at_horizon_one() {
        // with N = 1 the rollout and the one-step prediction coincide
        let win = toy_windows(1);
        let (ae, g) = setup();
        let lw = LossWeights::default();
        let multi = slo_objective(
            &ae,
            &g,
            &win,
            SloLossKind::MultiStep,
            &lw,
            Backprop::Adjoint,
        )
        .unwrap();
        let single = slo_objective(
            &ae,
            &g,
            &win,
            SloLossKind::SingleStep,
            &lw,
            Backprop::Adjoint,
        )
        .unwrap();
        // multi-step averages over two samples, the first of which has zero encoder error
        assert!((multi.l_e * 2.0 - single.l_e).abs() < 1e-12);
        assert!((multi.l_r - single.l_r).abs() < 1e-15);
    }

    #[test]
    fn perfect_embedding_has_zero_dynamics_loss() {
        let win = toy_windows(3);
        let (ae, _) = setup();
        let g = DMatrix::zeros(3, 9);
        // G = 0 gives A_k = I; the rollout keeps z_0 and L_e measures drift of phi
        let eval = slo_objective(
            &ae,
            &g,
            &win,
            SloLossKind::MultiStep,
            &LossWeights::default(),
            Backprop::Adjoint,
        )
        .unwrap();
        let phi = ae.encode_batch(&win.state_matrix()).unwrap();
        let mut expected = 0.0;
        for w in 0..win.len() {
            for i in 0..4 {
                expected += (phi.column(w * 4 + i) - phi.column(w * 4)).norm_squared();
            }
        }
        expected /= (win.len() * 4 * 3) as f64;
        assert!((eval.l_e - expected).abs() < 1e-14);
    }
}
