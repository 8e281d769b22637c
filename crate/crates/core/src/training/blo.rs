use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{
    check_batches, diverged, random_stacked, require_normalized, shuffle_rng, shuffled_batches,
    Adam, EpochRecord, Method, TrainConfig, TrainReport, Trained,
};
use crate::autoencoder::{AutoencoderParams, EncodeTape};
use crate::dataset::{TrajectorySet, WindowBatch};
use crate::error::{Error, Result};
use crate::kbf::{split_stacked, Embedding, KbfModel, ModelMeta, PredictionMode};
use crate::numerics::{least_squares_pinv, QuadratureRule};
use crate::scalar::Real;

/// Integral-constraint data of a set of windows: column `k` of `z` is
/// `z_N - z_0` and column `k` of `xi` is `sum_i w_i y_i` with
/// `y = [z; u_1 z; ..; u_m z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledBatch<T> {
    pub z: DMatrix<T>,
    pub xi: DMatrix<T>,
    pub horizon: usize,
}

/// Builds `(Z, Xi)` from already-encoded samples, `n x len(N+1)`, window-major.
fn assemble_encoded<T: Real>(
    encoded: &DMatrix<T>,
    windows: &WindowBatch<T>,
    weights: &[T],
) -> AssembledBatch<T> {
    let n = encoded.nrows();
    let m = windows.input_dim;
    let s = windows.samples_per_window();
    let k = windows.len();
    let mut z = DMatrix::zeros(n, k);
    let mut xi = DMatrix::zeros(n * (m + 1), k);
    for w in 0..k {
        let base = w * s;
        let dz = encoded.column(base + windows.horizon) - encoded.column(base);
        z.set_column(w, &dz);
        let mut col = xi.column_mut(w);
        for (i, &wi) in weights.iter().enumerate() {
            if wi == T::zero() {
                continue;
            }
            let zi = encoded.column(base + i);
            col.rows_mut(0, n).axpy(wi, &zi, T::one());
            for (j, &uj) in windows.input(w, i).iter().enumerate() {
                col.rows_mut((j + 1) * n, n).axpy(wi * uj, &zi, T::one());
            }
        }
    }
    AssembledBatch {
        z,
        xi,
        horizon: windows.horizon,
    }
}

/// Encodes every sample of `windows` and assembles `(Z, Xi)`.
pub fn assemble<T: Real>(
    ae: &AutoencoderParams<T>,
    windows: &WindowBatch<T>,
    weights: &[T],
) -> Result<AssembledBatch<T>> {
    check_weights(windows, weights)?;
    let encoded = ae.encode_batch(&windows.state_matrix())?;
    Ok(assemble_encoded(&encoded, windows, weights))
}

/// Closed-form inner problem: `G = Z Xi^+`.
pub fn inner_solve<T: Real>(
    ae: &AutoencoderParams<T>,
    windows: &WindowBatch<T>,
    weights: &[T],
) -> Result<DMatrix<T>> {
    let batch = assemble(ae, windows, weights)?;
    least_squares_pinv(&batch.z, &batch.xi)
}

/// Inner solve under a fixed lift instead of the learned encoder.
pub fn inner_solve_lifted<T, F>(
    lift: F,
    windows: &WindowBatch<T>,
    weights: &[T],
) -> Result<DMatrix<T>>
where
    T: Real,
    F: Fn(&DVector<T>) -> DVector<T>,
{
    check_weights(windows, weights)?;
    let x = windows.state_matrix();
    let cols: Vec<DVector<T>> = x.column_iter().map(|c| lift(&c.into_owned())).collect();
    if cols.is_empty() {
        return Err(Error::InvalidData("no windows".into()));
    }
    let encoded = DMatrix::from_columns(&cols);
    let batch = assemble_encoded(&encoded, windows, weights);
    least_squares_pinv(&batch.z, &batch.xi)
}

fn check_weights<T: Real>(windows: &WindowBatch<T>, weights: &[T]) -> Result<()> {
    if weights.len() != windows.samples_per_window() {
        return Err(Error::Shape {
            what: "quadrature weights",
            expected: windows.samples_per_window(),
            got: weights.len(),
        });
    }
    Ok(())
}

/// Outer objective `L_e^K + L_r^K` and its gradients.
#[derive(Debug, Clone)]
pub struct BloEval<T> {
    pub l_e: T,
    pub l_r: T,
    pub grad_ae: AutoencoderParams<T>,
    /// Present when requested.
    pub grad_g: Option<DMatrix<T>>,
}

impl<T: Real> BloEval<T> {
    pub fn total(&self) -> T {
        self.l_e + self.l_r
    }
}

/// Evaluates `L_e^K = ||Z - G Xi||^2 / (K(N+1)n)` and
/// `L_r^K = sum ||x - psi(phi(x))||^2 / (K(N+1)r)` with `G` held fixed.
///
/// The encoder gradient flows through both `Z` and `Xi`.
pub fn blo_objective<T: Real>(
    ae: &AutoencoderParams<T>,
    g: &DMatrix<T>,
    windows: &WindowBatch<T>,
    weights: &[T],
    want_g_grad: bool,
) -> Result<BloEval<T>> {
    check_weights(windows, weights)?;
    let n = ae.embed_dim();
    let m = windows.input_dim;
    if g.nrows() != n || g.ncols() != n * (m + 1) {
        return Err(Error::Shape {
            what: "stacked system matrix columns",
            expected: n * (m + 1),
            got: g.ncols(),
        });
    }
    let x = windows.state_matrix();
    let samples = x.ncols();
    let (encoded, etape): (DMatrix<T>, EncodeTape<T>) = ae.encode_tape(&x)?;
    let batch = assemble_encoded(&encoded, windows, weights);

    let s_e = T::one() / T::of_usize(samples * n);
    let resid = &batch.z - g * &batch.xi;
    let l_e = resid.norm_squared() * s_e;
    let d_z = resid * (s_e * T::of(2.0));
    let d_xi = -(g.tr_mul(&d_z));

    let mut grads = ae.zeros_like();
    let (xhat, dtape) = ae.decode_tape(&encoded)?;
    let rec = &xhat - &x;
    let s_r = T::one() / T::of_usize(x.len());
    let l_r = rec.norm_squared() * s_r;
    let mut d_enc = ae.decode_backward(&dtape, rec * (s_r * T::of(2.0)), &mut grads);

    let s = windows.samples_per_window();
    for w in 0..windows.len() {
        let base = w * s;
        let dzw = d_z.column(w);
        d_enc
            .column_mut(base + windows.horizon)
            .axpy(T::one(), &dzw, T::one());
        d_enc.column_mut(base).axpy(-T::one(), &dzw, T::one());
        let dxw = d_xi.column(w);
        for (i, &wi) in weights.iter().enumerate() {
            if wi == T::zero() {
                continue;
            }
            let mut col = d_enc.column_mut(base + i);
            col.axpy(wi, &dxw.rows(0, n), T::one());
            for (j, &uj) in windows.input(w, i).iter().enumerate() {
                col.axpy(wi * uj, &dxw.rows((j + 1) * n, n), T::one());
            }
        }
    }
    ae.encode_backward(&etape, &d_enc, &mut grads);

    let grad_g = want_g_grad.then(|| (d_z * batch.xi.transpose()) * (-T::one()));
    Ok(BloEval {
        l_e,
        l_r,
        grad_ae: grads,
        grad_g,
    })
}

/// One Adam step on the autoencoder with `G` fixed; returns the pre-update losses.
pub fn outer_step<T: Real>(
    ae: &mut AutoencoderParams<T>,
    adam: &mut Adam<T>,
    g: &DMatrix<T>,
    windows: &WindowBatch<T>,
    weights: &[T],
    lr: T,
) -> Result<(T, T)> {
    let eval = blo_objective(ae, g, windows, weights, false)?;
    let mut params = ae.to_vec();
    adam.update(&mut params, &eval.grad_ae.to_vec(), lr);
    ae.assign(&params);
    Ok((eval.l_e, eval.l_r))
}

/// Bi-level training (or one of its ablations) on stride-1 windows of `data`.
pub fn train_blo<T: Real>(data: &TrajectorySet<T>, cfg: &TrainConfig) -> Result<Trained<T>> {
    cfg.validate()?;
    let windows = data.windows(cfg.horizon)?;
    train_blo_windows(data, &windows, cfg)
}

/// As [`train_blo`] on a given set of windows; `data` supplies metadata and the scaler.
pub fn train_blo_windows<T: Real>(
    data: &TrajectorySet<T>,
    windows: &WindowBatch<T>,
    cfg: &TrainConfig,
) -> Result<Trained<T>> {
    if cfg.method.is_slo() {
        return Err(Error::Config(format!(
            "{} is not a bi-level method",
            cfg.method
        )));
    }
    cfg.validate()?;
    require_normalized(data)?;
    if windows.horizon != cfg.horizon {
        return Err(Error::Config(format!(
            "windows have horizon {}, config asks for {}",
            windows.horizon, cfg.horizon
        )));
    }
    check_batches(windows.len(), cfg.batches)?;

    let weights = QuadratureRule::new(cfg.quadrature_order, windows.dt, cfg.horizon)?.weights();
    let arch = cfg.architecture_for(&data.system);
    let mut ae = AutoencoderParams::<T>::init(&arch, data.state_dim, cfg.seed);
    let n = ae.embed_dim();
    let nu = n * (data.input_dim + 1);
    let lr = T::of(cfg.learning_rate());
    let mut rng = shuffle_rng(cfg.seed);
    let mut adam = Adam::new(ae.num_params());
    let mut adam_g = Adam::new(n * nu);

    let mut g = match cfg.method {
        Method::BloNone => random_stacked(n, nu, cfg.g_init_scale, cfg.seed),
        _ => inner_solve(&ae, windows, &weights)?,
    };
    let mut report = TrainReport {
        method: cfg.method,
        horizon: cfg.horizon,
        windows: windows.len(),
        records: Vec::with_capacity(cfg.epochs + 1),
        model_path: None,
        final_test_error: None,
    };
    let start = blo_objective(&ae, &g, windows, &weights, false)?;
    report.records.push(record(0, start.l_e, start.l_r, 0.0));
    if !start.total().finite() {
        return Err(diverged(0, &report));
    }

    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        if cfg.method == Method::Blo && epoch > 1 {
            g = inner_solve(&ae, windows, &weights).map_err(|_| diverged(epoch, &report))?;
        }
        let (mut sum_e, mut sum_r) = (0.0, 0.0);
        for idx in shuffled_batches(windows.len(), cfg.batches, &mut rng) {
            let batch = windows.select(&idx);
            let share = idx.len() as f64 / windows.len() as f64;
            if cfg.method == Method::Blo {
                let (l_e, l_r) = outer_step(&mut ae, &mut adam, &g, &batch, &weights, lr)?;
                sum_e += share * l_e.as_f64();
                sum_r += share * l_r.as_f64();
            } else {
                let eval = blo_objective(&ae, &g, &batch, &weights, true)?;
                sum_e += share * eval.l_e.as_f64();
                sum_r += share * eval.l_r.as_f64();
                let mut params = ae.to_vec();
                adam.update(&mut params, &eval.grad_ae.to_vec(), lr);
                ae.assign(&params);
                if let Some(dg) = eval.grad_g {
                    adam_g.update(g.as_mut_slice(), dg.as_slice(), lr);
                }
            }
        }
        report
            .records
            .push(record(epoch, sum_e, sum_r, clock.elapsed().as_secs_f64()));
        if !(sum_e + sum_r).is_finite() {
            return Err(diverged(epoch, &report));
        }
        log::debug!(
            "{} epoch {epoch}: L_e {sum_e:.3e} L_r {sum_r:.3e}",
            cfg.method
        );
    }
    if cfg.method == Method::Blo {
        g = inner_solve(&ae, windows, &weights).map_err(|_| diverged(cfg.epochs, &report))?;
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
            horizon_train: cfg.horizon,
            quadrature_order: Some(cfg.quadrature_order.as_u8()),
            method: cfg.method.as_str().into(),
            system: data.system.clone(),
            default_mode: PredictionMode::Continuous,
        },
    };
    Ok((model, report))
}

fn record<T: Real>(epoch: usize, l_e: T, l_r: T, seconds: f64) -> EpochRecord {
    let (l_e, l_r) = (l_e.as_f64(), l_r.as_f64());
    EpochRecord {
        epoch,
        l_e,
        l_d: None,
        l_r,
        total: l_e + l_r,
        seconds,
    }
}
