//! Learning the bilinear model: the bi-level scheme (closed-form system
//! matrices, gradient steps on the autoencoder), its ablations, and the
//! single-level discrete-time baselines.

mod adam;
mod blo;
mod slo;

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use blo::{
    assemble, blo_objective, inner_solve, inner_solve_lifted, outer_step, train_blo,
    train_blo_windows, AssembledBatch, BloEval,
};
pub use slo::{slo_objective, train_slo, train_slo_windows, Backprop, SloEval, SloLossKind};

use crate::autoencoder::Architecture;
use crate::dataset::{TrajectorySet, WindowBatch};
use crate::error::{Error, Result};
use crate::kbf::KbfModel;
use crate::numerics::QuadratureOrder;
use crate::scalar::Real;

/// Training algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Bi-level: `G` re-solved in closed form every epoch, autoencoder by Adam.
    Blo,
    /// Single-level, single-step discrete-time losses (horizon 1).
    #[serde(rename = "slo-1")]
    Slo1,
    /// Single-level, multi-step discrete-time rollout losses.
    #[serde(rename = "slo-n")]
    SloN,
    /// Bi-level loss, but `G` is trained by Adam from a random start.
    BloNone,
    /// As [`Method::BloNone`], with `G` warm-started by one closed-form solve.
    BloInitial,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Blo => "blo",
            Method::Slo1 => "slo-1",
            Method::SloN => "slo-n",
            Method::BloNone => "blo-none",
            Method::BloInitial => "blo-initial",
        }
    }

    pub fn is_slo(self) -> bool {
        matches!(self, Method::Slo1 | Method::SloN)
    }

    /// 1e-3 for the single-level baselines, 1e-4 for the bi-level family.
    pub fn default_learning_rate(self) -> f64 {
        if self.is_slo() {
            1e-3
        } else {
            1e-4
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blo" => Ok(Method::Blo),
            "slo-1" => Ok(Method::Slo1),
            "slo-n" => Ok(Method::SloN),
            "blo-none" => Ok(Method::BloNone),
            "blo-initial" => Ok(Method::BloInitial),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected blo, slo-1, slo-n, blo-none or blo-initial)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Weights of the single-level loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub encoder: f64,
    pub decoder: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            encoder: 1.0,
            decoder: 1.0,
            reconstruction: 1.0,
        }
    }
}

fn default_g_init_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub horizon: usize,
    pub quadrature_order: QuadratureOrder,
    pub epochs: usize,
    pub batches: usize,
    /// `None` selects [`Method::default_learning_rate`].
    #[serde(default)]
    pub learning_rate: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// `None` selects the per-system default architecture.
    #[serde(default)]
    pub architecture: Option<Architecture>,
    /// Half-width of the uniform random start for `G` where it is trained by gradient.
    #[serde(default = "default_g_init_scale")]
    pub g_init_scale: f64,
}

impl Default for TrainConfig {
    /// Bi-level, horizon 6 with Simpson 3/8, 800 epochs in 16 batches.
    fn default() -> Self {
        TrainConfig {
            method: Method::Blo,
            horizon: 6,
            quadrature_order: QuadratureOrder::Simpson38,
            epochs: 800,
            batches: 16,
            learning_rate: None,
            seed: 0,
            loss_weights: LossWeights::default(),
            architecture: None,
            g_init_scale: default_g_init_scale(),
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| self.method.default_learning_rate())
    }

    /// Horizon actually trained on (`slo-1` always uses 1).
    pub fn effective_horizon(&self) -> usize {
        if self.method == Method::Slo1 {
            1
        } else {
            self.horizon
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.effective_horizon();
        if n == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.batches == 0 {
            return Err(Error::Config("need at least one batch".into()));
        }
        if !self.method.is_slo() && !self.quadrature_order.accepts(n) {
            return Err(Error::InvalidRule(format!(
                "order {} needs the horizon to be a multiple of 3, got {n} (nearest valid horizon: {})",
                self.quadrature_order,
                self.quadrature_order.nearest_valid(n)
            )));
        }
        let lr = self.learning_rate();
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        Ok(())
    }

    pub(crate) fn architecture_for(&self, system: &str) -> Architecture {
        self.architecture
            .clone()
            .unwrap_or_else(|| Architecture::for_system(system))
    }
}

/// Losses of one epoch. Epoch 0 is the full-data evaluation before training;
/// later epochs average the pre-update batch losses, weighted by batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_e: f64,
    /// Decoder (rollout) loss; single-level methods only.
    pub l_d: Option<f64>,
    pub l_r: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub horizon: usize,
    pub windows: usize,
    pub records: Vec<EpochRecord>,
    #[serde(default)]
    pub model_path: Option<String>,
    /// Mean relative test error in percent, filled in by the caller.
    #[serde(default)]
    pub final_test_error: Option<f64>,
}

impl TrainReport {
    pub fn initial(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Median wall time of the epochs after the first `skip` trained ones.
    pub fn median_epoch_seconds(&self, skip: usize) -> Option<f64> {
        let mut t: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch > skip)
            .map(|r| r.seconds)
            .collect();
        if t.is_empty() {
            return None;
        }
        t.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Some(t[t.len() / 2])
    }

    /// `epoch,L_e,L_d,L_r,total,seconds`; `L_d` is blank when not tracked.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,L_e,L_d,L_r,total,seconds\n");
        for r in &self.records {
            let l_d = r.l_d.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.l_e, l_d, r.l_r, r.total, r.seconds
            );
        }
        out
    }

    /// Writes `<stem>.csv` with the curve and `<stem>.json` with the full report.
    pub fn save(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json_path = csv_path.with_extension("json");
        crate::dataset::write_json(&json_path, self)
    }
}

/// Any trained-model outcome.
pub type Trained<T> = (KbfModel<T>, TrainReport);

/// Trains with whichever algorithm `cfg.method` names.
pub fn train<T: Real>(data: &TrajectorySet<T>, cfg: &TrainConfig) -> Result<Trained<T>> {
    if cfg.method.is_slo() {
        train_slo(data, cfg)
    } else {
        train_blo(data, cfg)
    }
}

/// Trains on pre-cut windows (used for fixed-size timing runs).
pub fn train_windows<T: Real>(
    data: &TrajectorySet<T>,
    windows: &WindowBatch<T>,
    cfg: &TrainConfig,
) -> Result<Trained<T>> {
    if cfg.method.is_slo() {
        train_slo_windows(data, windows, cfg)
    } else {
        train_blo_windows(data, windows, cfg)
    }
}

pub(crate) fn require_normalized<T: Real>(data: &TrajectorySet<T>) -> Result<()> {
    if data.scaler.is_none() {
        return Err(Error::InvalidData(
            "training data must be normalized first (TrajectorySet::normalize)".into(),
        ));
    }
    Ok(())
}

pub(crate) fn check_batches(windows: usize, batches: usize) -> Result<()> {
    if windows == 0 {
        return Err(Error::Config(
            "no training windows; is the horizon as long as the trajectories?".into(),
        ));
    }
    if batches > windows {
        return Err(Error::Config(format!(
            "{batches} batches requested but only {windows} windows available"
        )));
    }
    Ok(())
}

/// Shuffles window indices and cuts them into batches of `ceil(len / batches)`;
/// the last batch may be smaller.
pub(crate) fn shuffled_batches(
    len: usize,
    batches: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    let size = len.div_ceil(batches);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Uniform random `n x nu` start for `G`.
pub(crate) fn random_stacked<T: Real>(n: usize, nu: usize, scale: f64, seed: u64) -> DMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    DMatrix::from_fn(n, nu, |_, _| {
        if scale > 0.0 {
            T::of(rng.random_range(-scale..scale))
        } else {
            T::zero()
        }
    })
}

pub(crate) fn diverged(epoch: usize, report: &TrainReport) -> Error {
    Error::TrainingDiverged {
        epoch,
        partial: Box::new(report.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Blo,
            Method::Slo1,
            Method::SloN,
            Method::BloNone,
            Method::BloInitial,
        ] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("slo".parse::<Method>().is_err());
    }

    #[test]
    fn default_learning_rates() {
        assert_eq!(TrainConfig::default().learning_rate(), 1e-4);
        let slo = TrainConfig {
            method: Method::SloN,
            ..TrainConfig::default()
        };
        assert_eq!(slo.learning_rate(), 1e-3);
    }

    #[test]
    fn simpson_horizon_validation() {
        let bad = TrainConfig {
            horizon: 5,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::InvalidRule(msg)) => {
                assert!(msg.contains("multiple of 3") && msg.contains("6"))
            }
            other => panic!("expected invalid rule, got {other:?}"),
        }
        let slo = TrainConfig {
            method: Method::SloN,
            horizon: 5,
            ..TrainConfig::default()
        };
        assert!(slo.validate().is_ok());
        let trap = TrainConfig {
            horizon: 5,
            quadrature_order: QuadratureOrder::Trapezoid,
            ..TrainConfig::default()
        };
        assert!(trap.validate().is_ok());
    }

    #[test]
    fn batches_cover_every_window_once() {
        let mut rng = shuffle_rng(3);
        let b = shuffled_batches(37, 16, &mut rng);
        assert_eq!(b.len(), 13);
        assert!(b[..12].iter().all(|c| c.len() == 3));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn report_csv() {
        let report = TrainReport {
            method: Method::Blo,
            horizon: 6,
            windows: 10,
            records: vec![EpochRecord {
                epoch: 0,
                l_e: 0.5,
                l_d: None,
                l_r: 0.25,
                total: 0.75,
                seconds: 0.0,
            }],
            model_path: None,
            final_test_error: None,
        };
        assert_eq!(
            report.to_csv(),
            "epoch,L_e,L_d,L_r,total,seconds\n0,0.5,,0.25,0.75,0\n"
        );
    }
}
