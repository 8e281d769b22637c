//! Swish MLP encoder/decoder pair with hand-derived backpropagation.
//!
//! The encoder maps a state `x` (dim `r`) to `n - 1` learned coordinates and a
//! trailing constant 1 is appended to form the embedding `z` (dim `n`). The
//! decoder consumes the full embedding, constant included. Hidden layers use
//! Swish, output layers are affine. Batches are matrices with one sample per
//! column.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{swish, swish_prime, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `out x in`
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
}

impl<T: Real> Layer<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    fn affine(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut a = &self.weight * x;
        for mut col in a.column_iter_mut() {
            col += &self.bias;
        }
        a
    }
}

/// Multilayer perceptron; all but the last layer are followed by Swish.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Layer<T>>,
}

/// Activations recorded by [`Mlp::forward_tape`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape<T> {
    /// Input fed to each layer.
    inputs: Vec<DMatrix<T>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<T>>,
}

impl<T: Real> Mlp<T> {
    /// Glorot-uniform weights, zero biases. `sizes` lists every layer width,
    /// input first.
    pub fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        T::of(rng.random_range(-limit..=limit))
                    }),
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.affine(&h);
            if i < last {
                h.apply(|v| *v = swish(*v));
            }
        }
        h
    }

    pub fn forward_tape(&self, x: &DMatrix<T>) -> (DMatrix<T>, MlpTape<T>) {
        let last = self.layers.len() - 1;
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.affine(&h);
            tape.inputs.push(h);
            if i < last {
                h = a.map(swish);
                tape.pre.push(a);
            } else {
                h = a;
            }
        }
        (h, tape)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward(
        &self,
        tape: &MlpTape<T>,
        grad_out: DMatrix<T>,
        grads: &mut Mlp<T>,
    ) -> DMatrix<T> {
        assert_eq!(
            tape.inputs.len(),
            self.layers.len(),
            "tape does not belong to this network"
        );
        let mut delta = grad_out;
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                delta.zip_apply(&tape.pre[i], |d, a| *d *= swish_prime(a));
            }
            let g = &mut grads.layers[i];
            g.weight += &delta * tape.inputs[i].transpose();
            for col in delta.column_iter() {
                g.bias += col;
            }
            delta = self.layers[i].weight.tr_mul(&delta);
        }
        delta
    }

    fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn write_params(&self, out: &mut Vec<T>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
    }

    fn read_params(&mut self, src: &[T]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&src[at..at + w]);
            at += w;
            let b = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&src[at..at + b]);
            at += b;
        }
        at
    }

    fn to_file(&self) -> Vec<LayerFile> {
        self.layers
            .iter()
            .map(|l| LayerFile {
                weight: l
                    .weight
                    .row_iter()
                    .map(|row| row.iter().map(|v| v.as_f64()).collect())
                    .collect(),
                bias: l.bias.iter().map(|v| v.as_f64()).collect(),
            })
            .collect()
    }

    fn from_file(layers: &[LayerFile]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network has no layers".into()));
        }
        let mut out = Vec::with_capacity(layers.len());
        for (i, lf) in layers.iter().enumerate() {
            let rows = lf.weight.len();
            let cols = lf.weight.first().map_or(0, Vec::len);
            if lf.weight.iter().any(|r| r.len() != cols) {
                return Err(Error::Validation(format!(
                    "layer {i}: ragged weight matrix"
                )));
            }
            if lf.bias.len() != rows {
                return Err(Error::Shape {
                    what: "layer bias",
                    expected: rows,
                    got: lf.bias.len(),
                });
            }
            if let Some(prev) = out.last().map(|l: &Layer<T>| l.weight.nrows()) {
                if prev != cols {
                    return Err(Error::Shape {
                        what: "layer input width",
                        expected: prev,
                        got: cols,
                    });
                }
            }
            out.push(Layer {
                weight: DMatrix::from_fn(rows, cols, |r, c| T::of(lf.weight[r][c])),
                bias: DVector::from_iterator(rows, lf.bias.iter().map(|&v| T::of(v))),
            });
        }
        Ok(Mlp { layers: out })
    }
}

/// Serialized layer: row-major weights plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Hidden widths and learned embedding size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Learned embedding coordinates; the embedding has one more (the constant).
    pub learned_dim: usize,
}

impl Architecture {
    /// (16, 16) hidden layers, 3 learned coordinates.
    pub fn parabolic() -> Self {
        Architecture {
            encoder_hidden: vec![16, 16],
            decoder_hidden: vec![16, 16],
            learned_dim: 3,
        }
    }

    /// (32, 32, 32) hidden layers, 8 learned coordinates.
    pub fn double_pendulum() -> Self {
        Architecture {
            encoder_hidden: vec![32, 32, 32],
            decoder_hidden: vec![32, 32, 32],
            learned_dim: 8,
        }
    }

    pub fn for_system(name: &str) -> Self {
        match name {
            "double-pendulum" => Self::double_pendulum(),
            _ => Self::parabolic(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams<T> {
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub state_dim: usize,
    pub learned_dim: usize,
}

/// Forward record for [`AutoencoderParams::encode_tape`].
#[derive(Debug, Clone)]
pub struct EncodeTape<T>(MlpTape<T>);

impl<T: Real> AutoencoderParams<T> {
    pub fn init(arch: &Architecture, state_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = arch.learned_dim + 1;
        let enc: Vec<usize> = std::iter::once(state_dim)
            .chain(arch.encoder_hidden.iter().copied())
            .chain(std::iter::once(arch.learned_dim))
            .collect();
        let dec: Vec<usize> = std::iter::once(n)
            .chain(arch.decoder_hidden.iter().copied())
            .chain(std::iter::once(state_dim))
            .collect();
        AutoencoderParams {
            encoder: Mlp::init(&enc, &mut rng),
            decoder: Mlp::init(&dec, &mut rng),
            state_dim,
            learned_dim: arch.learned_dim,
        }
    }

    /// Embedding dimension `n` (learned coordinates plus the constant).
    pub fn embed_dim(&self) -> usize {
        self.learned_dim + 1
    }

    pub fn zeros_like(&self) -> Self {
        AutoencoderParams {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            state_dim: self.state_dim,
            learned_dim: self.learned_dim,
        }
    }

    fn check_rows(&self, rows: usize, expected: usize, what: &'static str) -> Result<()> {
        if rows == expected {
            Ok(())
        } else {
            Err(Error::Shape {
                what,
                expected,
                got: rows,
            })
        }
    }

    fn augment(&self, learned: DMatrix<T>) -> DMatrix<T> {
        learned.insert_row(self.learned_dim, T::one())
    }

    /// Embeds a batch of states (`r x B`) into `n x B`; the last row is 1.
    pub fn encode_batch(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.check_rows(x.nrows(), self.state_dim, "encoder input")?;
        Ok(self.augment(self.encoder.forward(x)))
    }

    pub fn encode(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let z = self.encode_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(z.column(0).into_owned())
    }

    pub fn encode_tape(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, EncodeTape<T>)> {
        self.check_rows(x.nrows(), self.state_dim, "encoder input")?;
        let (h, tape) = self.encoder.forward_tape(x);
        Ok((self.augment(h), EncodeTape(tape)))
    }

    /// Backpropagates `dz` (`n x B`) through the encoder. The constant row is
    /// parameter-free and its gradient is dropped.
    pub fn encode_backward(
        &self,
        tape: &EncodeTape<T>,
        dz: &DMatrix<T>,
        grads: &mut AutoencoderParams<T>,
    ) {
        let learned = dz.rows(0, self.learned_dim).into_owned();
        self.encoder.backward(&tape.0, learned, &mut grads.encoder);
    }

    /// Decodes a batch of embeddings (`n x B`) into states (`r x B`).
    pub fn decode_batch(&self, z: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.check_rows(z.nrows(), self.embed_dim(), "decoder input")?;
        Ok(self.decoder.forward(z))
    }

    pub fn decode(&self, z: &DVector<T>) -> Result<DVector<T>> {
        let x = self.decode_batch(&DMatrix::from_column_slice(z.len(), 1, z.as_slice()))?;
        Ok(x.column(0).into_owned())
    }

    pub fn decode_tape(&self, z: &DMatrix<T>) -> Result<(DMatrix<T>, MlpTape<T>)> {
        self.check_rows(z.nrows(), self.embed_dim(), "decoder input")?;
        Ok(self.decoder.forward_tape(z))
    }

    /// Returns the gradient with respect to the decoder input.
    pub fn decode_backward(
        &self,
        tape: &MlpTape<T>,
        dx: DMatrix<T>,
        grads: &mut AutoencoderParams<T>,
    ) -> DMatrix<T> {
        self.decoder.backward(tape, dx, &mut grads.decoder)
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params()
    }

    /// All parameters, encoder first, each weight column-major then its bias.
    pub fn to_vec(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_to(&mut out);
        out
    }

    pub fn write_to(&self, out: &mut Vec<T>) {
        self.encoder.write_params(out);
        self.decoder.write_params(out);
    }

    /// Inverse of [`AutoencoderParams::to_vec`]; returns how many values were read.
    pub fn assign(&mut self, src: &[T]) -> usize {
        let used = self.encoder.read_params(src);
        used + self.decoder.read_params(&src[used..])
    }

    pub fn to_file(&self) -> (Vec<LayerFile>, Vec<LayerFile>) {
        (self.encoder.to_file(), self.decoder.to_file())
    }

    pub fn from_file(encoder: &[LayerFile], decoder: &[LayerFile]) -> Result<Self> {
        let encoder = Mlp::from_file(encoder)?;
        let decoder = Mlp::from_file(decoder)?;
        let learned_dim = encoder.output_dim();
        if decoder.input_dim() != learned_dim + 1 {
            return Err(Error::Shape {
                what: "decoder input width",
                expected: learned_dim + 1,
                got: decoder.input_dim(),
            });
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(Error::Shape {
                what: "decoder output width",
                expected: encoder.input_dim(),
                got: decoder.output_dim(),
            });
        }
        Ok(AutoencoderParams {
            state_dim: encoder.input_dim(),
            encoder,
            decoder,
            learned_dim,
        })
    }
}

/// Mean squared reconstruction error `sum ||x - psi(phi(x))||^2 / (B r)` and,
/// optionally, its gradient.
pub fn reconstruction_loss<T: Real>(
    p: &AutoencoderParams<T>,
    x: &DMatrix<T>,
    grads: Option<&mut AutoencoderParams<T>>,
) -> Result<T> {
    let (z, etape) = p.encode_tape(x)?;
    let (xhat, dtape) = p.decode_tape(&z)?;
    let resid = &xhat - x;
    let scale = T::one() / T::of_usize(x.len());
    let loss = resid.norm_squared() * scale;
    if let Some(g) = grads {
        let dz = p.decode_backward(&dtape, resid * (scale * T::of(2.0)), g);
        p.encode_backward(&etape, &dz, g);
    }
    Ok(loss)
}
