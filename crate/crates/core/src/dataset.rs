//! Trajectory generation, min-max scaling, sliding windows and dataset files.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rk4_step;
use crate::scalar::Real;
use crate::systems::ControlAffineSystem;

pub const DATASET_VERSION: u64 = 1;

/// Per-dimension min-max scaling `x' = (x - min) / (max - min)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler<T> {
    pub mins: Vec<T>,
    pub maxs: Vec<T>,
}

impl<T: Real> Scaler<T> {
    pub fn new(mins: Vec<T>, maxs: Vec<T>) -> Result<Self> {
        if mins.len() != maxs.len() {
            return Err(Error::Shape {
                what: "scaler maxs",
                expected: mins.len(),
                got: maxs.len(),
            });
        }
        if let Some(dim) = (0..mins.len()).find(|&d| !(maxs[d] > mins[d])) {
            return Err(Error::DegenerateDimension { dim });
        }
        Ok(Scaler { mins, maxs })
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn normalize(&self, x: &mut [T]) {
        for (d, v) in x.iter_mut().enumerate() {
            *v = (*v - self.mins[d]) / (self.maxs[d] - self.mins[d]);
        }
    }

    pub fn denormalize(&self, x: &mut [T]) {
        for (d, v) in x.iter_mut().enumerate() {
            *v = *v * (self.maxs[d] - self.mins[d]) + self.mins[d];
        }
    }

    pub fn to_f64(&self) -> ScalerFile {
        ScalerFile {
            mins: self.mins.iter().map(|v| v.as_f64()).collect(),
            maxs: self.maxs.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn from_f64(file: &ScalerFile) -> Result<Self> {
        Scaler::new(
            file.mins.iter().map(|&v| T::of(v)).collect(),
            file.maxs.iter().map(|&v| T::of(v)).collect(),
        )
    }
}

/// Serialized form of a [`Scaler`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerFile {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

/// A set of sampled trajectories sharing one sampling period.
///
/// Storage is flat and trajectory-major: sample `i` of trajectory `k` starts at
/// `(k * (steps + 1) + i) * state_dim`. When `scaler` is set the states are
/// normalized; inputs are never scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet<T> {
    pub system: String,
    pub dt: T,
    /// Integration steps per trajectory; each trajectory holds `steps + 1` samples.
    pub steps: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub states: Vec<T>,
    pub inputs: Vec<T>,
    pub scaler: Option<Scaler<T>>,
}

impl<T: Real> TrajectorySet<T> {
    pub fn samples_per_trajectory(&self) -> usize {
        self.steps + 1
    }

    pub fn len(&self) -> usize {
        let per = self.samples_per_trajectory() * self.state_dim;
        if per == 0 {
            0
        } else {
            self.states.len() / per
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, traj: usize, sample: usize) -> &[T] {
        let r = self.state_dim;
        let at = (traj * self.samples_per_trajectory() + sample) * r;
        &self.states[at..at + r]
    }

    pub fn input(&self, traj: usize, sample: usize) -> &[T] {
        let m = self.input_dim;
        let at = (traj * self.samples_per_trajectory() + sample) * m;
        &self.inputs[at..at + m]
    }

    /// All samples of one trajectory as an `r x (steps + 1)` matrix.
    pub fn trajectory_states(&self, traj: usize) -> DMatrix<T> {
        let per = self.samples_per_trajectory() * self.state_dim;
        DMatrix::from_column_slice(
            self.state_dim,
            self.samples_per_trajectory(),
            &self.states[traj * per..(traj + 1) * per],
        )
    }

    /// Per-sample input schedule of one trajectory.
    pub fn trajectory_inputs(&self, traj: usize) -> Vec<DVector<T>> {
        (0..self.samples_per_trajectory())
            .map(|i| DVector::from_column_slice(self.input(traj, i)))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let samples = self.samples_per_trajectory();
        let count = self.len();
        if self.states.len() != count * samples * self.state_dim {
            return Err(Error::Validation(
                "state array is not a whole number of trajectories".into(),
            ));
        }
        if self.inputs.len() != count * samples * self.input_dim {
            return Err(Error::Shape {
                what: "input samples",
                expected: count * samples * self.input_dim,
                got: self.inputs.len(),
            });
        }
        if let Some(s) = &self.scaler {
            if s.dim() != self.state_dim {
                return Err(Error::Shape {
                    what: "scaler dimension",
                    expected: self.state_dim,
                    got: s.dim(),
                });
            }
        }
        Ok(())
    }

    /// Min-max normalizes the states to `[0, 1]` using ranges taken from this set.
    pub fn normalize(&self) -> Result<TrajectorySet<T>> {
        if self.scaler.is_some() {
            return Err(Error::InvalidData(
                "trajectory set is already normalized".into(),
            ));
        }
        let r = self.state_dim;
        let mut mins = vec![T::max_value().unwrap_or_else(|| T::of(f64::MAX)); r];
        let mut maxs = vec![T::min_value().unwrap_or_else(|| T::of(f64::MIN)); r];
        for sample in self.states.chunks_exact(r) {
            for d in 0..r {
                if sample[d] < mins[d] {
                    mins[d] = sample[d];
                }
                if sample[d] > maxs[d] {
                    maxs[d] = sample[d];
                }
            }
        }
        let scaler = Scaler::new(mins, maxs)?;
        self.normalize_with(&scaler)
    }

    /// Applies an existing scaler (e.g. the training scaler to test data).
    pub fn normalize_with(&self, scaler: &Scaler<T>) -> Result<TrajectorySet<T>> {
        if self.scaler.is_some() {
            return Err(Error::InvalidData(
                "trajectory set is already normalized".into(),
            ));
        }
        if scaler.dim() != self.state_dim {
            return Err(Error::Shape {
                what: "scaler dimension",
                expected: self.state_dim,
                got: scaler.dim(),
            });
        }
        let mut out = self.clone();
        for sample in out.states.chunks_exact_mut(self.state_dim) {
            scaler.normalize(sample);
        }
        out.scaler = Some(scaler.clone());
        Ok(out)
    }

    /// Undoes [`TrajectorySet::normalize`]; a raw set is returned unchanged.
    pub fn denormalize(&self) -> TrajectorySet<T> {
        let mut out = self.clone();
        if let Some(scaler) = out.scaler.take() {
            for sample in out.states.chunks_exact_mut(self.state_dim) {
                scaler.denormalize(sample);
            }
        }
        out
    }

    /// Stride-1 sliding windows of `horizon + 1` samples, trajectory-major.
    pub fn windows(&self, horizon: usize) -> Result<WindowBatch<T>> {
        if horizon > self.steps {
            return Err(Error::HorizonTooLong {
                horizon,
                steps: self.steps,
            });
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let (r, m, len) = (self.state_dim, self.input_dim, horizon + 1);
        let per_traj = self.steps - horizon;
        let total = per_traj * self.len();
        let mut states = Vec::with_capacity(total * len * r);
        let mut inputs = Vec::with_capacity(total * len * m);
        let mut origins = Vec::with_capacity(total);
        for traj in 0..self.len() {
            for start in 0..per_traj {
                for i in start..start + len {
                    states.extend_from_slice(self.state(traj, i));
                    inputs.extend_from_slice(self.input(traj, i));
                }
                origins.push((traj, start));
            }
        }
        Ok(WindowBatch {
            horizon,
            dt: self.dt,
            state_dim: r,
            input_dim: m,
            states,
            inputs,
            origins,
        })
    }

    pub fn to_file(&self) -> DatasetFile {
        let nested = |flat: &[T], dim: usize| -> Vec<Vec<Vec<f64>>> {
            if dim == 0 {
                return vec![vec![Vec::new(); self.samples_per_trajectory()]; self.len()];
            }
            flat.chunks(self.samples_per_trajectory() * dim)
                .map(|traj| {
                    traj.chunks(dim)
                        .map(|s| s.iter().map(|v| v.as_f64()).collect())
                        .collect()
                })
                .collect()
        };
        DatasetFile {
            version: DATASET_VERSION,
            system: self.system.clone(),
            dt: self.dt.as_f64(),
            steps: self.steps,
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            scaler: self.scaler.as_ref().map(Scaler::to_f64),
            states: nested(&self.states, self.state_dim),
            inputs: nested(&self.inputs, self.input_dim),
        }
    }

    pub fn from_file(file: DatasetFile) -> Result<Self> {
        if file.version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion(file.version));
        }
        if file.states.len() != file.inputs.len() {
            return Err(Error::Validation(format!(
                "{} state trajectories but {} input trajectories",
                file.states.len(),
                file.inputs.len()
            )));
        }
        let samples = file.steps + 1;
        let flatten =
            |nested: &[Vec<Vec<f64>>], dim: usize, what: &'static str| -> Result<Vec<T>> {
                let mut flat = Vec::with_capacity(nested.len() * samples * dim);
                for traj in nested {
                    if traj.len() != samples {
                        return Err(Error::Shape {
                            what: "samples per trajectory",
                            expected: samples,
                            got: traj.len(),
                        });
                    }
                    for s in traj {
                        if s.len() != dim {
                            return Err(Error::Shape {
                                what,
                                expected: dim,
                                got: s.len(),
                            });
                        }
                        flat.extend(s.iter().map(|&v| T::of(v)));
                    }
                }
                Ok(flat)
            };
        let set = TrajectorySet {
            system: file.system,
            dt: T::of(file.dt),
            steps: file.steps,
            state_dim: file.state_dim,
            input_dim: file.input_dim,
            states: flatten(&file.states, file.state_dim, "state dimension")?,
            inputs: flatten(&file.inputs, file.input_dim, "input dimension")?,
            scaler: file.scaler.as_ref().map(Scaler::from_f64).transpose()?,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), &self.to_file())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: DatasetFile = read_versioned_json(path.as_ref(), DATASET_VERSION)?;
        Self::from_file(file)
    }
}

/// On-disk dataset document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub version: u64,
    pub system: String,
    pub dt: f64,
    pub steps: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub scaler: Option<ScalerFile>,
    pub states: Vec<Vec<Vec<f64>>>,
    pub inputs: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string(value).map_err(|e| Error::InvalidData(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a JSON document, checking its `version` field before decoding the rest.
pub(crate) fn read_versioned_json<D: serde::de::DeserializeOwned>(
    path: &Path,
    version: u64,
) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |e: serde_json::Error| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
        line: e.line(),
        column: e.column(),
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse_err)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == version => {}
        Some(v) => return Err(Error::UnsupportedVersion(v)),
        None => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "missing integer field `version`".into(),
                line: 1,
                column: 1,
            })
        }
    }
    serde_json::from_value(value).map_err(parse_err)
}

/// Stride-1 windows of `horizon + 1` consecutive samples.
///
/// `states` is laid out so that `DMatrix::from_column_slice(r, len * (horizon + 1), ..)`
/// gives one column per sample, window-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch<T> {
    pub horizon: usize,
    pub dt: T,
    pub state_dim: usize,
    pub input_dim: usize,
    pub states: Vec<T>,
    pub inputs: Vec<T>,
    /// `(trajectory, start sample)` each window was cut from.
    pub origins: Vec<(usize, usize)>,
}

impl<T: Real> WindowBatch<T> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn samples_per_window(&self) -> usize {
        self.horizon + 1
    }

    pub fn state(&self, window: usize, i: usize) -> &[T] {
        let r = self.state_dim;
        let at = (window * self.samples_per_window() + i) * r;
        &self.states[at..at + r]
    }

    pub fn input(&self, window: usize, i: usize) -> &[T] {
        let m = self.input_dim;
        let at = (window * self.samples_per_window() + i) * m;
        &self.inputs[at..at + m]
    }

    /// `r x (len * (horizon + 1))` matrix of every sample.
    pub fn state_matrix(&self) -> DMatrix<T> {
        DMatrix::from_column_slice(
            self.state_dim,
            self.len() * self.samples_per_window(),
            &self.states,
        )
    }

    /// Copies the listed windows, in the given order.
    pub fn select(&self, indices: &[usize]) -> WindowBatch<T> {
        let (sr, sm) = (
            self.samples_per_window() * self.state_dim,
            self.samples_per_window() * self.input_dim,
        );
        let mut states = Vec::with_capacity(indices.len() * sr);
        let mut inputs = Vec::with_capacity(indices.len() * sm);
        for &w in indices {
            states.extend_from_slice(&self.states[w * sr..(w + 1) * sr]);
            inputs.extend_from_slice(&self.inputs[w * sm..(w + 1) * sm]);
        }
        WindowBatch {
            horizon: self.horizon,
            dt: self.dt,
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            states,
            inputs,
            origins: indices.iter().map(|&w| self.origins[w]).collect(),
        }
    }

    /// `count` windows spread evenly over the batch (all of them if `count >= len`).
    pub fn subsample(&self, count: usize) -> WindowBatch<T> {
        let len = self.len();
        if count >= len {
            return self.clone();
        }
        let idx: Vec<usize> = (0..count).map(|k| k * len / count).collect();
        self.select(&idx)
    }
}

/// How initial conditions are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialStates {
    /// Tensor grid with `per_dim` evenly spaced points (endpoints included) per dimension.
    Grid { per_dim: usize },
    /// `count` points drawn uniformly from the box.
    Random { count: usize },
}

/// Recipe for [`generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub initial: InitialStates,
    /// Per-dimension `[lo, hi]` box for initial states.
    pub x0_range: Vec<[f64; 2]>,
    /// Per-input `[lo, hi]` box for the random step inputs.
    pub u_range: Vec<[f64; 2]>,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    /// Number of times the step input is redrawn mid-trajectory (0 = constant).
    #[serde(default)]
    pub input_switches: usize,
}

impl SamplingSpec {
    pub fn count(&self) -> usize {
        match self.initial {
            InitialStates::Grid { per_dim } => per_dim.pow(self.x0_range.len() as u32),
            InitialStates::Random { count } => count,
        }
    }

    fn check(&self, r: usize, m: usize) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.x0_range.len() != r {
            return Err(Error::Config(format!(
                "x0 range has {} dimensions, system state has {r}",
                self.x0_range.len()
            )));
        }
        if self.u_range.len() != m {
            return Err(Error::Config(format!(
                "u range has {} dimensions, system input has {m}",
                self.u_range.len()
            )));
        }
        for [lo, hi] in self.x0_range.iter().chain(&self.u_range) {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("invalid range [{lo}, {hi}]")));
            }
        }
        if let InitialStates::Grid { per_dim: 0 } = self.initial {
            return Err(Error::Config(
                "grid needs at least one point per dimension".into(),
            ));
        }
        Ok(())
    }

    /// Uniform `[-5, 5]^2` grid of 32x32 initial states, inputs in `[-1.8, 1.8]^3`,
    /// 25 steps of 0.08 s.
    pub fn parabolic_train(seed: u64) -> Self {
        SamplingSpec {
            initial: InitialStates::Grid { per_dim: 32 },
            x0_range: vec![[-5.0, 5.0]; 2],
            u_range: vec![[-1.8, 1.8]; 3],
            dt: 0.08,
            steps: 25,
            seed,
            input_switches: 0,
        }
    }

    pub fn parabolic_test(seed: u64) -> Self {
        SamplingSpec {
            initial: InitialStates::Random { count: 100 },
            ..Self::parabolic_train(seed)
        }
    }

    /// 320 random initial states within +-10 deg and +-10 deg/s, inputs in
    /// `[-0.25, 0.25]`, sampled at 12.5 Hz for 2 s.
    pub fn pendulum_train(seed: u64) -> Self {
        let a = 10f64.to_radians();
        SamplingSpec {
            initial: InitialStates::Random { count: 320 },
            x0_range: vec![[-a, a]; 4],
            u_range: vec![[-0.25, 0.25]; 2],
            dt: 0.08,
            steps: 25,
            seed,
            input_switches: 0,
        }
    }

    /// 100 test trajectories at 50 Hz for 4 s.
    pub fn pendulum_test(seed: u64) -> Self {
        SamplingSpec {
            initial: InitialStates::Random { count: 100 },
            dt: 0.02,
            steps: 200,
            ..Self::pendulum_train(seed)
        }
    }
}

/// Result of [`generate`].
#[derive(Debug, Clone)]
pub struct Generated<T> {
    pub set: TrajectorySet<T>,
    /// Trajectories dropped because integration blew up.
    pub excluded: usize,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn grid_point(index: usize, per_dim: usize, ranges: &[[f64; 2]]) -> Vec<f64> {
    let mut rest = index;
    let mut x = vec![0.0; ranges.len()];
    for d in (0..ranges.len()).rev() {
        let k = rest % per_dim;
        rest /= per_dim;
        let [lo, hi] = ranges[d];
        x[d] = if per_dim == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * k as f64 / (per_dim - 1) as f64
        };
    }
    x
}

/// Rolls out RK4 trajectories of `system` under random step inputs.
///
/// Trajectory `k` draws from its own stream of a ChaCha generator seeded with
/// `spec.seed`, so the result is identical whatever the rayon pool size.
pub fn generate<T: Real>(
    system: &dyn ControlAffineSystem<T>,
    spec: &SamplingSpec,
) -> Result<Generated<T>> {
    let (r, m) = (system.state_dim(), system.input_dim());
    spec.check(r, m)?;
    let count = spec.count();
    let samples = spec.steps + 1;
    let dt = T::of(spec.dt);
    let field = |x: &DVector<T>, u: &DVector<T>, _t: T| system.field_unchecked(x, u);

    let rollouts: Vec<Option<(Vec<T>, Vec<T>)>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            let x0 = match spec.initial {
                InitialStates::Grid { per_dim } => grid_point(k, per_dim, &spec.x0_range),
                InitialStates::Random { .. } => spec
                    .x0_range
                    .iter()
                    .map(|&rg| uniform(&mut rng, rg))
                    .collect(),
            };
            let segments = spec.input_switches + 1;
            let levels: Vec<DVector<T>> = (0..segments)
                .map(|_| {
                    DVector::from_iterator(
                        m,
                        spec.u_range.iter().map(|&rg| T::of(uniform(&mut rng, rg))),
                    )
                })
                .collect();
            let level_at = |i: usize| &levels[(i * segments / samples).min(segments - 1)];

            let mut x = DVector::from_iterator(r, x0.into_iter().map(T::of));
            let mut states = Vec::with_capacity(samples * r);
            let mut inputs = Vec::with_capacity(samples * m);
            states.extend(x.iter().copied());
            inputs.extend(level_at(0).iter().copied());
            for i in 0..spec.steps {
                let t = T::of_usize(i) * dt;
                x = match rk4_step(field, &x, level_at(i), t, dt) {
                    Ok(next) => next,
                    Err(_) => return None,
                };
                states.extend(x.iter().copied());
                inputs.extend(level_at(i + 1).iter().copied());
            }
            Some((states, inputs))
        })
        .collect();

    let excluded = rollouts.iter().filter(|r| r.is_none()).count();
    if excluded > 0 {
        log::warn!(
            "{excluded} of {count} trajectories blew up during integration and were dropped"
        );
    }
    let mut states = Vec::with_capacity(count * samples * r);
    let mut inputs = Vec::with_capacity(count * samples * m);
    for (s, u) in rollouts.into_iter().flatten() {
        states.extend(s);
        inputs.extend(u);
    }
    Ok(Generated {
        set: TrajectorySet {
            system: system.name().to_string(),
            dt,
            steps: spec.steps,
            state_dim: r,
            input_dim: m,
            states,
            inputs,
            scaler: None,
        },
        excluded,
    })
}
