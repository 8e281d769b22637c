//! The Koopman bilinear model `z' = A z + sum_i B_i z u_i` with its embedding.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderParams, LayerFile};
use crate::dataset::{read_versioned_json, write_json, Scaler, ScalerFile};
use crate::error::{Error, Result};
use crate::numerics::rk4_step;
use crate::scalar::Real;
use crate::systems::{analytic_kbf_matrices, analytic_lift};

pub const MODEL_VERSION: u64 = 1;

/// How the lifted dynamics are stepped during prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    /// RK4 on the continuous-time lifted field, input held over each step.
    #[default]
    Continuous,
    /// Forward-Euler zeroth-order hold `z_{k+1} = (I + A dt + sum_i B_i dt u_{k,i}) z_k`.
    Zoh,
}

impl FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(PredictionMode::Continuous),
            "zoh" => Ok(PredictionMode::Zoh),
            other => Err(Error::Config(format!(
                "unknown prediction mode '{other}' (expected 'continuous' or 'zoh')"
            ))),
        }
    }
}

impl std::fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictionMode::Continuous => "continuous",
            PredictionMode::Zoh => "zoh",
        })
    }
}

/// Training provenance stored alongside the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub dt_train: f64,
    pub horizon_train: usize,
    /// Quadrature order of the integral constraint; `None` for discrete-time training.
    pub quadrature_order: Option<u8>,
    pub method: String,
    pub system: String,
    /// Mode used by default when evaluating this model.
    #[serde(default)]
    pub default_mode: PredictionMode,
}

/// Map between states and lifted coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding<T> {
    /// Learned encoder/decoder pair.
    Learned(AutoencoderParams<T>),
    /// Exact dictionary `(x1, x2, x1^2, 1)` of the parabolic system; decoding
    /// reads back the first two coordinates.
    ParabolicLift,
}

impl<T: Real> Embedding<T> {
    pub fn embed_dim(&self) -> usize {
        match self {
            Embedding::Learned(ae) => ae.embed_dim(),
            Embedding::ParabolicLift => 4,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Embedding::Learned(ae) => ae.state_dim,
            Embedding::ParabolicLift => 2,
        }
    }

    pub fn encode(&self, x: &DVector<T>) -> Result<DVector<T>> {
        match self {
            Embedding::Learned(ae) => ae.encode(x),
            Embedding::ParabolicLift => {
                if x.len() != 2 {
                    return Err(Error::Shape {
                        what: "encoder input",
                        expected: 2,
                        got: x.len(),
                    });
                }
                Ok(analytic_lift(x))
            }
        }
    }

    pub fn decode_batch(&self, z: &DMatrix<T>) -> Result<DMatrix<T>> {
        match self {
            Embedding::Learned(ae) => ae.decode_batch(z),
            Embedding::ParabolicLift => {
                if z.nrows() != 4 {
                    return Err(Error::Shape {
                        what: "decoder input",
                        expected: 4,
                        got: z.nrows(),
                    });
                }
                Ok(z.rows(0, 2).into_owned())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbfModel<T> {
    pub a: DMatrix<T>,
    pub b: Vec<DMatrix<T>>,
    pub embedding: Embedding<T>,
    /// State scaler of the training set; predictions are made in normalized
    /// coordinates and mapped back through it.
    pub scaler: Option<Scaler<T>>,
    pub meta: ModelMeta,
}

/// Splits a stacked `n x n(m+1)` matrix `[A, B_1, .., B_m]`.
pub fn split_stacked<T: Real>(g: &DMatrix<T>) -> (DMatrix<T>, Vec<DMatrix<T>>) {
    let n = g.nrows();
    assert!(
        n > 0 && g.ncols() % n == 0,
        "stacked matrix must be n x n(m+1)"
    );
    let blocks = g.ncols() / n;
    let a = g.columns(0, n).into_owned();
    let b = (1..blocks)
        .map(|k| g.columns(k * n, n).into_owned())
        .collect();
    (a, b)
}

/// `A z + sum_i B_i z u_i`.
pub fn bilinear_field<T: Real>(
    a: &DMatrix<T>,
    b: &[DMatrix<T>],
    z: &DVector<T>,
    u: &DVector<T>,
) -> DVector<T> {
    let mut dz = a * z;
    for (bi, &ui) in b.iter().zip(u.iter()) {
        if ui != T::zero() {
            dz.gemv(ui, bi, z, T::one());
        }
    }
    dz
}

impl<T: Real> KbfModel<T> {
    /// Exact bilinear model of the parabolic system in raw coordinates.
    pub fn parabolic_oracle(mu: T, lambda: T) -> Self {
        let (a, b) = analytic_kbf_matrices(mu, lambda);
        KbfModel {
            a,
            b,
            embedding: Embedding::ParabolicLift,
            scaler: None,
            meta: ModelMeta {
                n: 4,
                m: 3,
                r: 2,
                dt_train: 0.0,
                horizon_train: 0,
                quadrature_order: None,
                method: "oracle".into(),
                system: "parabolic".into(),
                default_mode: PredictionMode::Continuous,
            },
        }
    }

    pub fn autoencoder(&self) -> Option<&AutoencoderParams<T>> {
        match &self.embedding {
            Embedding::Learned(ae) => Some(ae),
            Embedding::ParabolicLift => None,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.len()
    }

    pub fn state_dim(&self) -> usize {
        self.embedding.state_dim()
    }

    /// Stacked `G = [A, B_1, .., B_m]`, `n x n(m+1)`.
    pub fn stacked(&self) -> DMatrix<T> {
        let n = self.embed_dim();
        let mut g = DMatrix::zeros(n, n * (self.input_dim() + 1));
        g.columns_mut(0, n).copy_from(&self.a);
        for (k, bk) in self.b.iter().enumerate() {
            g.columns_mut((k + 1) * n, n).copy_from(bk);
        }
        g
    }

    pub fn set_stacked(&mut self, g: &DMatrix<T>) {
        let (a, b) = split_stacked(g);
        self.a = a;
        self.b = b;
    }

    pub fn lifted_field(&self, z: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        if z.len() != self.embed_dim() {
            return Err(Error::Shape {
                what: "embedding",
                expected: self.embed_dim(),
                got: z.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(Error::Shape {
                what: "input",
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(bilinear_field(&self.a, &self.b, z, u))
    }

    /// Advances the lifted state one step of length `dt` under input `u`.
    pub fn step_lifted(
        &self,
        z: &DVector<T>,
        u: &DVector<T>,
        dt: T,
        mode: PredictionMode,
    ) -> DVector<T> {
        match mode {
            PredictionMode::Zoh => z + bilinear_field(&self.a, &self.b, z, u) * dt,
            PredictionMode::Continuous => {
                let field =
                    |z: &DVector<T>, u: &DVector<T>, _t: T| bilinear_field(&self.a, &self.b, z, u);
                // non-finite results are caught by the caller
                rk4_step(field, z, u, T::zero(), dt)
                    .unwrap_or_else(|_| DVector::from_element(z.len(), T::of(f64::NAN)))
            }
        }
    }

    /// Rolls out the lifted dynamics from a normalized state; returns decoded
    /// normalized states, `r x (steps + 1)`.
    pub fn rollout_normalized(
        &self,
        x0: &DVector<T>,
        inputs: &[DVector<T>],
        dt: T,
        steps: usize,
        mode: PredictionMode,
    ) -> Result<DMatrix<T>> {
        if !(dt > T::zero()) {
            return Err(Error::Config("prediction step must be positive".into()));
        }
        if steps > 0 && inputs.is_empty() {
            return Err(Error::Config("input schedule is empty".into()));
        }
        if steps > 0 && inputs.len() != 1 && inputs.len() < steps {
            return Err(Error::Shape {
                what: "input schedule length",
                expected: steps,
                got: inputs.len(),
            });
        }
        if let Some(u) = inputs.iter().find(|u| u.len() != self.input_dim()) {
            return Err(Error::Shape {
                what: "input",
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        let n = self.embed_dim();
        let mut lifted = DMatrix::zeros(n, steps + 1);
        let mut z = self.embedding.encode(x0)?;
        lifted.set_column(0, &z);
        for k in 0..steps {
            let u = if inputs.len() == 1 {
                &inputs[0]
            } else {
                &inputs[k]
            };
            z = self.step_lifted(&z, u, dt, mode);
            if !z.iter().all(|v| v.finite()) {
                return Err(Error::Divergence { step: k + 1 });
            }
            lifted.set_column(k + 1, &z);
        }
        let x = self.embedding.decode_batch(&lifted)?;
        if !x.iter().all(|v| v.finite()) {
            return Err(Error::Divergence { step: steps });
        }
        Ok(x)
    }

    /// Predicts `steps` samples past `x0` (original units) and returns the
    /// trajectory in original units, `r x (steps + 1)`.
    ///
    /// `inputs` holds one input per step, or a single input held throughout.
    pub fn predict(
        &self,
        x0: &DVector<T>,
        inputs: &[DVector<T>],
        dt: T,
        steps: usize,
        mode: PredictionMode,
    ) -> Result<DMatrix<T>> {
        if x0.len() != self.state_dim() {
            return Err(Error::Shape {
                what: "initial state",
                expected: self.state_dim(),
                got: x0.len(),
            });
        }
        let mut x0n = x0.clone();
        if let Some(s) = &self.scaler {
            s.normalize(x0n.as_mut_slice());
        }
        let mut traj = self.rollout_normalized(&x0n, inputs, dt, steps, mode)?;
        if let Some(s) = &self.scaler {
            for mut col in traj.column_iter_mut() {
                s.denormalize(col.as_mut_slice());
            }
        }
        Ok(traj)
    }

    /// Eigenvalues of `A`, sorted by descending real part.
    pub fn eig_diagnostic(&self) -> Vec<Complex<T>> {
        let mut ev: Vec<Complex<T>> = self.a.complex_eigenvalues().iter().copied().collect();
        ev.sort_by(|x, y| y.re.partial_cmp(&x.re).unwrap_or(std::cmp::Ordering::Equal));
        ev
    }

    fn validate(&self) -> Result<()> {
        let (n, m, r) = (self.meta.n, self.meta.m, self.meta.r);
        let shape = |what: &'static str, expected: usize, got: usize| -> Result<()> {
            if expected == got {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "{what}: declared {expected}, found {got}"
                )))
            }
        };
        shape("A rows", n, self.a.nrows())?;
        shape("A columns", n, self.a.ncols())?;
        shape("number of B matrices", m, self.b.len())?;
        for bk in &self.b {
            shape("B rows", n, bk.nrows())?;
            shape("B columns", n, bk.ncols())?;
        }
        shape("embedding dimension", n, self.embedding.embed_dim())?;
        shape("state dimension", r, self.embedding.state_dim())?;
        if let Some(s) = &self.scaler {
            shape("scaler dimension", r, s.dim())?;
        }
        Ok(())
    }

    pub fn to_file(&self) -> ModelFile {
        let rows = |mat: &DMatrix<T>| -> Vec<Vec<f64>> {
            mat.row_iter()
                .map(|row| row.iter().map(|v| v.as_f64()).collect())
                .collect()
        };
        let (kind, encoder, decoder) = match &self.embedding {
            Embedding::Learned(ae) => {
                let (e, d) = ae.to_file();
                (EmbeddingKind::Learned, e, d)
            }
            Embedding::ParabolicLift => (EmbeddingKind::ParabolicLift, Vec::new(), Vec::new()),
        };
        ModelFile {
            version: MODEL_VERSION,
            meta: self.meta.clone(),
            a: rows(&self.a),
            b: self.b.iter().map(rows).collect(),
            embedding: kind,
            encoder,
            decoder,
            scaler: self.scaler.as_ref().map(Scaler::to_f64),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(file.version));
        }
        let matrix = |rows: &[Vec<f64>]| -> Result<DMatrix<T>> {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Validation("ragged matrix".into()));
            }
            Ok(DMatrix::from_fn(rows.len(), cols, |i, j| T::of(rows[i][j])))
        };
        let model = KbfModel {
            a: matrix(&file.a)?,
            b: file
                .b
                .iter()
                .map(|rows| matrix(rows))
                .collect::<Result<_>>()?,
            embedding: match file.embedding {
                EmbeddingKind::Learned => {
                    Embedding::Learned(AutoencoderParams::from_file(&file.encoder, &file.decoder)?)
                }
                EmbeddingKind::ParabolicLift => Embedding::ParabolicLift,
            },
            scaler: file.scaler.as_ref().map(Scaler::from_f64).transpose()?,
            meta: file.meta,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), &self.to_file())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(read_versioned_json(path.as_ref(), MODEL_VERSION)?)
    }
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u64,
    pub meta: ModelMeta,
    /// Row-major `n x n`.
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    /// `m` row-major `n x n` matrices.
    #[serde(rename = "B")]
    pub b: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub embedding: EmbeddingKind,
    #[serde(default)]
    pub encoder: Vec<LayerFile>,
    #[serde(default)]
    pub decoder: Vec<LayerFile>,
    pub scaler: Option<ScalerFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    #[default]
    Learned,
    ParabolicLift,
}

/// Writes a predicted trajectory as CSV with header `t,x_1,..,x_r`.
pub fn trajectory_csv<T: Real>(traj: &DMatrix<T>, dt: T) -> String {
    let mut out = String::from("t");
    for d in 1..=traj.nrows() {
        out.push_str(&format!(",x_{d}"));
    }
    out.push('\n');
    for (k, col) in traj.column_iter().enumerate() {
        out.push_str(&format!("{}", (T::of_usize(k) * dt).as_f64()));
        for v in col.iter() {
            out.push_str(&format!(",{}", v.as_f64()));
        }
        out.push('\n');
    }
    out
}
