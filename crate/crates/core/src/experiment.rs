//! End-to-end experiment runs driven by a single JSON config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate, write_json, SamplingSpec, TrajectorySet};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_csv, ablation_study, horizon_sweep, prediction_error, sweep_csv, timing_benchmark,
    timing_csv, write_text, AblationRow, SweepRow, TimingRow, METRIC,
};
use crate::kbf::PredictionMode;
use crate::numerics::QuadratureOrder;
use crate::systems::{PendulumVariant, SystemKind};
use crate::training::{train, Method, TrainConfig};

/// One training run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub method: Method,
    pub horizon: usize,
    /// Overrides the template's quadrature order.
    #[serde(default)]
    pub quadrature_order: Option<QuadratureOrder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub method: Method,
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub quadrature_order: Option<QuadratureOrder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub horizons: Vec<usize>,
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
    /// Interleaved repetitions; each cell reports its median.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Windows per horizon; defaults to what the longest horizon allows.
    #[serde(default)]
    pub windows: Option<usize>,
}

fn default_probe_epochs() -> usize {
    5
}

fn default_rounds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluationSpec {
    /// Prediction mode for every model; `None` uses each model's own default.
    #[serde(default)]
    pub mode: Option<PredictionMode>,
    #[serde(default)]
    pub sweeps: Vec<SweepSpec>,
    #[serde(default)]
    pub bench: Option<BenchSpec>,
    /// Run the three-way `G` strategy comparison with the template config.
    #[serde(default)]
    pub ablation: bool,
}

/// Everything needed to reproduce a study.
///
/// `seed` is the only seed that matters: training data uses `seed`, test
/// data `seed + 1`, and every training run `seed`. The seeds stored inside
/// the sampling specs and the template are overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: SystemKind,
    pub seed: u64,
    pub train_data: SamplingSpec,
    pub test_data: SamplingSpec,
    pub training: TrainConfig,
    pub runs: Vec<RunSpec>,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// 32x32 grid of parabolic trajectories; bi-level vs single- and five-step baselines.
    pub fn parabolic() -> Self {
        ExperimentConfig {
            name: "parabolic".into(),
            system: SystemKind::Parabolic {
                mu: -3.0,
                lambda: -2.0,
            },
            seed: 0,
            train_data: SamplingSpec::parabolic_train(0),
            test_data: SamplingSpec::parabolic_test(1),
            training: TrainConfig::default(),
            runs: standard_runs(),
            evaluation: EvaluationSpec {
                mode: None,
                sweeps: vec![
                    SweepSpec {
                        method: Method::Blo,
                        horizons: vec![3, 6, 9, 12, 15, 18, 21, 24],
                        quadrature_order: Some(QuadratureOrder::Trapezoid),
                    },
                    SweepSpec {
                        method: Method::SloN,
                        horizons: (2..=9).collect(),
                        quadrature_order: None,
                    },
                ],
                bench: Some(BenchSpec {
                    horizons: vec![1, 2, 4, 8, 16],
                    probe_epochs: 5,
                    rounds: 5,
                    windows: Some(2048),
                }),
                ablation: true,
            },
            output_dir: None,
        }
    }

    /// 320 random double-pendulum trajectories at 12.5 Hz, tested at 50 Hz for 4 s.
    pub fn double_pendulum() -> Self {
        ExperimentConfig {
            name: "double-pendulum".into(),
            system: SystemKind::DoublePendulum {
                variant: PendulumVariant::Verbatim,
            },
            seed: 0,
            train_data: SamplingSpec::pendulum_train(0),
            test_data: SamplingSpec::pendulum_test(1),
            training: TrainConfig::default(),
            runs: standard_runs(),
            evaluation: EvaluationSpec::default(),
            output_dir: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
            line: e.line(),
            column: e.column(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    /// Copy with the master seed pushed into every component.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.train_data.seed = self.seed;
        cfg.test_data.seed = self.seed.wrapping_add(1);
        cfg.training.seed = self.seed;
        cfg
    }

    pub fn run_config(&self, run: &RunSpec) -> TrainConfig {
        TrainConfig {
            method: run.method,
            horizon: run.horizon,
            quadrature_order: run
                .quadrature_order
                .unwrap_or(self.training.quadrature_order),
            learning_rate: None,
            seed: self.seed,
            ..self.training.clone()
        }
    }

    /// Checks every run, sweep cell and data spec before anything is computed.
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty()
            && self.evaluation.sweeps.is_empty()
            && self.evaluation.bench.is_none()
        {
            return Err(Error::Config("experiment has nothing to do".into()));
        }
        for run in &self.runs {
            self.run_config(run).validate()?;
        }
        for sweep in &self.evaluation.sweeps {
            for &h in &sweep.horizons {
                self.run_config(&RunSpec {
                    method: sweep.method,
                    horizon: h,
                    quadrature_order: sweep.quadrature_order,
                })
                .validate()?;
            }
        }
        Ok(())
    }
}

fn standard_runs() -> Vec<RunSpec> {
    vec![
        RunSpec {
            method: Method::Blo,
            horizon: 6,
            quadrature_order: Some(QuadratureOrder::Simpson38),
        },
        RunSpec {
            method: Method::Slo1,
            horizon: 1,
            quadrature_order: None,
        },
        RunSpec {
            method: Method::SloN,
            horizon: 5,
            quadrature_order: None,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub horizon: usize,
    pub model_path: Option<PathBuf>,
    pub report_path: PathBuf,
    pub final_loss: Option<f64>,
    pub test_error_percent: Option<f64>,
    pub diverged_trajectories: usize,
    /// Set when training stopped on a non-finite loss.
    pub diverged_at_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub metric: String,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub excluded_trajectories: usize,
    pub runs: Vec<RunSummary>,
    pub sweeps: Vec<(Method, Vec<SweepRow>)>,
    pub bench: Option<Vec<TimingRow>>,
    pub ablation: Option<Vec<AblationRow>>,
}

/// Generated, normalized training data and raw test data for `cfg`.
pub fn experiment_data(
    cfg: &ExperimentConfig,
) -> Result<(TrajectorySet<f64>, TrajectorySet<f64>, usize)> {
    let cfg = cfg.resolved();
    let system = cfg.system.build::<f64>();
    let train_gen = generate(system.as_ref(), &cfg.train_data)?;
    let test_gen = generate(system.as_ref(), &cfg.test_data)?;
    let train_set = train_gen.set.normalize()?;
    Ok((
        train_set,
        test_gen.set,
        train_gen.excluded + test_gen.excluded,
    ))
}

/// Runs the whole study and writes every artifact under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.save(out_dir.join("config.json"))?;

    let (train_set, test, excluded) = experiment_data(&cfg)?;
    train_set.save(out_dir.join("train.json"))?;
    test.save(out_dir.join("test.json"))?;
    log::info!(
        "{}: {} training and {} test trajectories",
        cfg.name,
        train_set.len(),
        test.len()
    );

    let mut runs = Vec::with_capacity(cfg.runs.len());
    for run in &cfg.runs {
        let tc = cfg.run_config(run);
        let stem = format!("{}-h{}", run.method, tc.effective_horizon());
        let report_path = out_dir.join(format!("{stem}.curve.csv"));
        let summary = match train(&train_set, &tc) {
            Ok((model, mut report)) => {
                let model_path = out_dir.join(format!("{stem}.model.json"));
                model.save(&model_path)?;
                let mode = cfg.evaluation.mode.unwrap_or(model.meta.default_mode);
                let err = prediction_error(&model, &test, mode)?;
                err.save(out_dir.join(format!("{stem}.errors.csv")))?;
                report.model_path = Some(model_path.display().to_string());
                report.final_test_error = Some(err.aggregate_percent);
                report.save(&report_path)?;
                log::info!("{stem}: test error {:.3}%", err.aggregate_percent);
                RunSummary {
                    method: run.method,
                    horizon: tc.effective_horizon(),
                    model_path: Some(model_path),
                    report_path,
                    final_loss: report.last().map(|r| r.total),
                    test_error_percent: Some(err.aggregate_percent),
                    diverged_trajectories: err.diverged.len(),
                    diverged_at_epoch: None,
                }
            }
            Err(Error::TrainingDiverged { epoch, partial }) => {
                partial.save(&report_path)?;
                log::warn!("{stem}: training diverged at epoch {epoch}");
                RunSummary {
                    method: run.method,
                    horizon: tc.effective_horizon(),
                    model_path: None,
                    report_path,
                    final_loss: None,
                    test_error_percent: None,
                    diverged_trajectories: 0,
                    diverged_at_epoch: Some(epoch),
                }
            }
            Err(e) => return Err(e),
        };
        runs.push(summary);
    }

    let mut sweeps = Vec::with_capacity(cfg.evaluation.sweeps.len());
    for sweep in &cfg.evaluation.sweeps {
        let template = TrainConfig {
            method: sweep.method,
            quadrature_order: sweep
                .quadrature_order
                .unwrap_or(cfg.training.quadrature_order),
            learning_rate: None,
            ..cfg.training.clone()
        };
        let rows = horizon_sweep(
            &train_set,
            &test,
            &template,
            &sweep.horizons,
            cfg.evaluation.mode,
        );
        write_text(
            &out_dir.join(format!("sweep-{}.csv", sweep.method)),
            &sweep_csv(&rows),
        )?;
        sweeps.push((sweep.method, rows));
    }

    let bench = match &cfg.evaluation.bench {
        Some(b) => {
            let rows = timing_benchmark(
                &train_set,
                &cfg.training,
                &b.horizons,
                b.probe_epochs,
                b.rounds,
                b.windows,
            )?;
            write_text(&out_dir.join("bench.csv"), &timing_csv(&rows))?;
            Some(rows)
        }
        None => None,
    };

    let ablation = if cfg.evaluation.ablation {
        let template = TrainConfig {
            learning_rate: None,
            ..cfg.training.clone()
        };
        let rows = ablation_study(&train_set, &template)?;
        write_text(&out_dir.join("ablation.csv"), &ablation_csv(&rows))?;
        Some(rows)
    } else {
        None
    };

    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        metric: METRIC.into(),
        train_trajectories: train_set.len(),
        test_trajectories: test.len(),
        excluded_trajectories: excluded,
        runs,
        sweeps,
        bench,
        ablation,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
