//! Prediction error, horizon sweeps, the per-epoch cost benchmark and the
//! inner-solve ablation.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_json, Scaler, TrajectorySet};
use crate::error::{Error, Result};
use crate::kbf::{KbfModel, PredictionMode};
use crate::numerics::{QuadratureOrder, QuadratureRule};
use crate::scalar::Real;
use crate::training::{blo_objective, train, train_windows, EpochRecord, Method, TrainConfig};

/// Relative error assigned to a prediction that blew up (1000%).
pub const DIVERGENCE_CAP: f64 = 10.0;

/// How the error numbers are defined; written into every report.
pub const METRIC: &str = "per-trajectory ||X_pred - X_true||_F / ||X_true||_F in min-max normalized coordinates, \
                          averaged over trajectories, in percent; divergent rollouts capped at 1000%";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub metric: String,
    /// Relative error of each test trajectory (fraction, not percent).
    pub per_trajectory: Vec<f64>,
    /// Indices of trajectories whose rollout diverged.
    pub diverged: Vec<usize>,
    /// Mean relative error in percent.
    pub aggregate_percent: f64,
    /// Prediction steps per trajectory.
    pub horizon_steps: usize,
    /// Prediction sampling interval.
    pub dt: f64,
    pub mode: PredictionMode,
}

impl ErrorReport {
    /// `trajectory,relative_error_percent,diverged`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trajectory,relative_error_percent,diverged\n");
        for (k, e) in self.per_trajectory.iter().enumerate() {
            let flag = self.diverged.binary_search(&k).is_ok();
            let _ = writeln!(out, "{k},{},{}", e * 100.0, u8::from(flag));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        write_text(csv_path, &self.to_csv())?;
        write_json(&csv_path.with_extension("json"), self)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `||pred - truth||_F / ||truth||_F`, both already in normalized coordinates.
pub fn relative_error<T: Real>(pred: &DMatrix<T>, truth: &DMatrix<T>) -> f64 {
    let denom = truth.norm().as_f64();
    let num = (pred - truth).norm().as_f64();
    if denom == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / denom
    }
}

/// Rolls the model over every test trajectory from its first state with the
/// recorded inputs and scores the whole predicted trajectory.
///
/// Errors are measured after min-max normalization with the model's scaler;
/// a model without one (the exact parabolic model) uses the test set's scaler,
/// or one fitted to the test set.
pub fn prediction_error<T: Real>(
    model: &KbfModel<T>,
    test: &TrajectorySet<T>,
    mode: PredictionMode,
) -> Result<ErrorReport> {
    if test.state_dim != model.state_dim() || test.input_dim != model.input_dim() {
        return Err(Error::InvalidData(format!(
            "test data has {} states and {} inputs, model expects {} and {}",
            test.state_dim,
            test.input_dim,
            model.state_dim(),
            model.input_dim()
        )));
    }
    if test.is_empty() {
        return Err(Error::InvalidData("test set is empty".into()));
    }
    let raw = test.denormalize();
    let scaler: Option<Scaler<T>> = match (&model.scaler, &test.scaler) {
        (Some(s), _) | (None, Some(s)) => Some(s.clone()),
        (None, None) => raw.normalize().ok().and_then(|n| n.scaler),
    };
    let to_normalized = |mut x: DMatrix<T>| {
        if let Some(s) = &scaler {
            for mut col in x.column_iter_mut() {
                s.normalize(col.as_mut_slice());
            }
        }
        x
    };

    let mut per_trajectory = Vec::with_capacity(raw.len());
    let mut diverged = Vec::new();
    for k in 0..raw.len() {
        let truth = raw.trajectory_states(k);
        let inputs = raw.trajectory_inputs(k);
        let x0 = truth.column(0).into_owned();
        let err = match model.predict(&x0, &inputs, raw.dt, raw.steps, mode) {
            Ok(pred) => relative_error(&to_normalized(pred), &to_normalized(truth)),
            Err(Error::Divergence { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if !err.is_finite() || err > DIVERGENCE_CAP {
            diverged.push(k);
            per_trajectory.push(DIVERGENCE_CAP);
        } else {
            per_trajectory.push(err);
        }
    }
    let aggregate_percent =
        100.0 * per_trajectory.iter().sum::<f64>() / per_trajectory.len() as f64;
    Ok(ErrorReport {
        metric: METRIC.into(),
        per_trajectory,
        diverged,
        aggregate_percent,
        horizon_steps: raw.steps,
        dt: raw.dt.as_f64(),
        mode,
    })
}

/// Mode the model was trained for.
pub fn default_mode<T>(model: &KbfModel<T>) -> PredictionMode {
    model.meta.default_mode
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub horizon: usize,
    pub final_loss: Option<f64>,
    pub test_error_percent: Option<f64>,
    /// Why the cell has no numbers.
    pub failure: Option<String>,
}

/// Trains one model per horizon from the same template and scores each on `test`.
///
/// Cells run on the current rayon pool; a failed cell is recorded and the
/// sweep continues.
pub fn horizon_sweep<T: Real>(
    train_set: &TrajectorySet<T>,
    test: &TrajectorySet<T>,
    template: &TrainConfig,
    horizons: &[usize],
    mode: Option<PredictionMode>,
) -> Vec<SweepRow> {
    horizons
        .par_iter()
        .map(|&horizon| {
            let cfg = TrainConfig {
                horizon,
                ..template.clone()
            };
            let outcome = train(train_set, &cfg).and_then(|(model, report)| {
                let mode = mode.unwrap_or(model.meta.default_mode);
                let err = prediction_error(&model, test, mode)?;
                Ok((report.last().map(|r| r.total), err.aggregate_percent))
            });
            match outcome {
                Ok((final_loss, err)) => SweepRow {
                    horizon,
                    final_loss,
                    test_error_percent: Some(err),
                    failure: None,
                },
                Err(e) => SweepRow {
                    horizon,
                    final_loss: None,
                    test_error_percent: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("horizon,final_loss,test_error_percent,failure\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.horizon,
            opt(r.final_loss),
            opt(r.test_error_percent),
            r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub horizon: usize,
    pub windows: usize,
    pub t_slo: f64,
    pub t_blo: f64,
    pub ratio: f64,
}

/// Per-epoch wall time of the single- and bi-level methods against horizon.
///
/// Every horizon trains on the same number of windows, spread evenly over
/// the data (`windows`, or the count the longest horizon allows). Each run
/// does one warm-up epoch plus `probe_epochs` timed ones and keeps their
/// median; each cell reports the median over `rounds` repetitions. Horizon 1 pairs `slo-1` with the zero-order-hold bi-level rule;
/// longer horizons pair `slo-n` with the trapezoid rule. Runs on the calling
/// thread; callers wanting clean numbers keep the machine otherwise idle.
pub fn timing_benchmark<T: Real>(
    data: &TrajectorySet<T>,
    template: &TrainConfig,
    horizons: &[usize],
    probe_epochs: usize,
    rounds: usize,
    windows: Option<usize>,
) -> Result<Vec<TimingRow>> {
    let probe_epochs = probe_epochs.max(1);
    let longest = horizons
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Config("no horizons given".into()))?;
    let available = data.windows(longest)?.len();
    let count = windows.map_or(available, |w| w.min(available));
    if count == 0 {
        return Err(Error::Config(format!(
            "horizon {longest} leaves no training windows"
        )));
    }
    let mut cells = Vec::with_capacity(horizons.len());
    for &horizon in horizons {
        let win = data.windows(horizon)?.subsample(count);
        let base = TrainConfig {
            horizon,
            epochs: probe_epochs + 1,
            batches: template.batches.min(count),
            learning_rate: Some(0.0),
            ..template.clone()
        };
        let (slo_method, order) = if horizon == 1 {
            (Method::Slo1, QuadratureOrder::ZeroHold)
        } else {
            (Method::SloN, QuadratureOrder::Trapezoid)
        };
        let blo = TrainConfig {
            method: Method::Blo,
            quadrature_order: order,
            ..base.clone()
        };
        let slo = TrainConfig {
            method: slo_method,
            ..base
        };
        cells.push((horizon, win, blo, slo));
    }
    // rounds sweep every horizon in turn so a slow spell on the machine
    // spreads over all cells instead of skewing one
    let mut t_blo = vec![Vec::with_capacity(rounds); cells.len()];
    let mut t_slo = vec![Vec::with_capacity(rounds); cells.len()];
    for _ in 0..rounds.max(1) {
        for (i, (_, win, blo, slo)) in cells.iter().enumerate() {
            t_blo[i].push(median_seconds(&train_windows(data, win, blo)?.1.records));
            t_slo[i].push(median_seconds(&train_windows(data, win, slo)?.1.records));
        }
    }
    Ok(cells
        .iter()
        .zip(t_blo.iter_mut().zip(&mut t_slo))
        .map(|((horizon, ..), (b, s))| {
            let (t_blo, t_slo) = (median(b), median(s));
            TimingRow {
                horizon: *horizon,
                windows: count,
                t_slo,
                t_blo,
                ratio: t_slo / t_blo,
            }
        })
        .collect())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.get(values.len() / 2).copied().unwrap_or(f64::NAN)
}

fn median_seconds(records: &[EpochRecord]) -> f64 {
    // epoch 0 is the untimed evaluation, epoch 1 the warm-up
    let mut t: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch >= 2)
        .map(|r| r.seconds)
        .collect();
    median(&mut t)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("horizon,windows,t_slo_seconds,t_blo_seconds,ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.horizon, r.windows, r.t_slo, r.t_blo, r.ratio
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `blo-none`, `blo-initial` or `blo`.
    pub strategy: Method,
    pub records: Vec<EpochRecord>,
    pub initial_loss: f64,
    /// Outer loss of the trained model on all windows; infinite if training diverged.
    pub final_loss: f64,
    /// `initial_loss / final_loss`.
    pub reduction: f64,
    pub diverged_at: Option<usize>,
}

/// Trains the three `G` strategies with identical seeds and architecture.
pub fn ablation_study<T: Real>(
    data: &TrajectorySet<T>,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let strategies = [Method::BloNone, Method::BloInitial, Method::Blo];
    let runs: Vec<Result<AblationRow>> = strategies
        .par_iter()
        .map(|&strategy| {
            let cfg = TrainConfig {
                method: strategy,
                ..cfg.clone()
            };
            let (records, diverged_at, final_loss) = match train(data, &cfg) {
                Ok((model, report)) => {
                    let final_loss = outer_loss(&model, data, &cfg)?;
                    (report.records, None, final_loss)
                }
                Err(Error::TrainingDiverged { epoch, partial }) => {
                    (partial.records, Some(epoch), f64::INFINITY)
                }
                Err(e) => return Err(e),
            };
            let initial_loss = records.first().map_or(f64::NAN, |r| r.total);
            Ok(AblationRow {
                strategy,
                reduction: initial_loss / final_loss,
                records,
                initial_loss,
                final_loss,
                diverged_at,
            })
        })
        .collect();
    runs.into_iter().collect()
}

/// `L_e^K + L_r^K` of a trained model over every window of `data`.
pub fn outer_loss<T: Real>(
    model: &KbfModel<T>,
    data: &TrajectorySet<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let ae = model
        .autoencoder()
        .ok_or_else(|| Error::Config("outer loss needs a learned embedding".into()))?;
    let windows = data.windows(cfg.horizon)?;
    let weights = QuadratureRule::new(cfg.quadrature_order, windows.dt, cfg.horizon)?.weights();
    Ok(
        blo_objective(ae, &model.stacked(), &windows, &weights, false)?
            .total()
            .as_f64(),
    )
}

/// Long-format loss curves: `strategy,epoch,L_e,L_r,total,normalized_total`,
/// the last column divided by the strategy's initial loss.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,epoch,L_e,L_r,total,normalized_total\n");
    for row in rows {
        for r in &row.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                row.strategy,
                r.epoch,
                r.l_e,
                r.l_r,
                r.total,
                r.total / row.initial_loss
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SamplingSpec};
    use crate::systems::ParabolicSystem;

    fn parabolic_test(count: usize) -> TrajectorySet<f64> {
        let mut spec = SamplingSpec::parabolic_test(7);
        spec.initial = crate::dataset::InitialStates::Random { count };
        generate(&ParabolicSystem::default(), &spec).unwrap().set
    }

    #[test]
    fn oracle_error_is_tiny() {
        let test = parabolic_test(20);
        let model = KbfModel::parabolic_oracle(-3.0, -2.0);
        let report = prediction_error(&model, &test, PredictionMode::Continuous).unwrap();
        assert!(
            report.aggregate_percent < 0.1,
            "{}",
            report.aggregate_percent
        );
        assert!(report.diverged.is_empty());
        assert_eq!(report.per_trajectory.len(), 20);
    }

    #[test]
    fn metric_edge_cases() {
        let truth = DMatrix::from_row_slice(2, 3, &[0.1, 0.5, 0.9, 0.3, 0.2, 0.7]);
        assert_eq!(relative_error(&truth, &truth), 0.0);
        let zero = DMatrix::zeros(2, 3);
        assert!((relative_error(&zero, &truth) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn error_ignores_trajectory_order() {
        let test = parabolic_test(6);
        let model = KbfModel::parabolic_oracle(-3.0, -2.0);
        let mut shuffled = test.clone();
        let (r, m, s) = (
            test.state_dim,
            test.input_dim,
            test.samples_per_trajectory(),
        );
        let order = [3, 0, 5, 1, 4, 2];
        shuffled.states = order
            .iter()
            .flat_map(|&k| test.states[k * s * r..(k + 1) * s * r].to_vec())
            .collect();
        shuffled.inputs = order
            .iter()
            .flat_map(|&k| test.inputs[k * s * m..(k + 1) * s * m].to_vec())
            .collect();
        let a = prediction_error(&model, &test, PredictionMode::Continuous).unwrap();
        let b = prediction_error(&model, &shuffled, PredictionMode::Continuous).unwrap();
        assert!((a.aggregate_percent - b.aggregate_percent).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_capped_and_flagged() {
        let test = parabolic_test(3);
        let mut model = KbfModel::parabolic_oracle(-3.0, -2.0);
        model.a *= -1e4;
        let report = prediction_error(&model, &test, PredictionMode::Zoh).unwrap();
        assert_eq!(report.diverged, vec![0, 1, 2]);
        assert!((report.aggregate_percent - 1000.0).abs() < 1e-9);
        assert!(report.to_csv().lines().nth(1).unwrap().ends_with(",1"));
    }

    #[test]
    fn rejects_mismatched_test_data() {
        let mut test = parabolic_test(2);
        test.input_dim = 2;
        let model = KbfModel::parabolic_oracle(-3.0, -2.0);
        assert!(prediction_error(&model, &test, PredictionMode::Continuous).is_err());
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let train_set = parabolic_test(4).normalize().unwrap();
        let test = parabolic_test(2);
        let cfg = TrainConfig {
            epochs: 1,
            batches: 2,
            quadrature_order: QuadratureOrder::Simpson38,
            ..TrainConfig::default()
        };
        let rows = horizon_sweep(&train_set, &test, &cfg, &[3, 4], None);
        assert_eq!(rows.len(), 2);
        assert!(rows[0].failure.is_none() && rows[0].test_error_percent.is_some());
        assert!(rows[1]
            .failure
            .as_deref()
            .unwrap()
            .contains("multiple of 3"));
        assert_eq!(sweep_csv(&rows).lines().count(), 3);
    }
}
