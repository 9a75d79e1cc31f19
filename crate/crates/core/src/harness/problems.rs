//! Benchmark problems: Rosenbrock, noisy quadratic, spiral MLP classifier,
//! and a tiny LSTM language model.
//!
//! The MLP and LSTM bind their weight matrices in augmented form (the last
//! column of each matrix acts on a trailing 1 appended to the layer input),
//! matching the scaling-and-normalization / scaling-and-whitening
//! preconditioners' expectations. Tapes are cached per batch width.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::{Tape, TapeBuilder};
use crate::error::{Error, Result};
use crate::matrix::{max_abs_norm, Matrix, Vector};
use crate::problem::{Batch, Problem};
use crate::rng::SeedStream;

/// Construction recipe for a benchmark problem; regenerates the identical
/// dataset from its seed.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    Rosenbrock,
    NoisyQuadratic { dim: usize, sigma: f64, seed: u64 },
    MlpClassifier { layers: Vec<usize>, n_samples: usize, seed: u64 },
    TinyLstmLm { vocab: usize, hidden: usize, seq_len: usize, seed: u64 },
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Box<dyn Problem>> {
        Ok(match self {
            ProblemSpec::Rosenbrock => Box::new(make_rosenbrock()?),
            ProblemSpec::NoisyQuadratic { dim, sigma, seed } => {
                let mut s = SeedStream::new(*seed, "nq-h");
                let h = crate::matrix::random_spd(*dim, &mut s);
                let b = s.standard_normal_vector(*dim)?;
                Box::new(NoisyQuadratic::new(h, b, *sigma, *seed)?)
            }
            ProblemSpec::MlpClassifier { layers, n_samples, seed } => {
                Box::new(make_mlp_classifier(layers, *n_samples, *seed)?)
            }
            ProblemSpec::TinyLstmLm { vocab, hidden, seq_len, seed } => {
                Box::new(make_tiny_lstm_lm(*vocab, *hidden, *seq_len, *seed)?)
            }
        })
    }
}

/// The two-dimensional Rosenbrock valley, `100(y − x²)² + (1 − x)²`,
/// started from (−1, 1). Deterministic; all derivatives come from the tape.
pub struct Rosenbrock {
    tape: Tape,
    shapes: [(usize, usize); 1],
}

pub fn make_rosenbrock() -> Result<Rosenbrock> {
    let mut b = TapeBuilder::new();
    let theta = b.param(2, 1);
    let x = b.slice_rows(theta, 0, 1)?;
    let y = b.slice_rows(theta, 1, 1)?;
    let x2 = b.square(x);
    let d = b.sub(y, x2)?;
    let d2 = b.square(d);
    let first = b.scale(d2, 100.0);
    let one = b.const_scalar(1.0);
    let e = b.sub(one, x)?;
    let e2 = b.square(e);
    let loss = b.add(first, e2)?;
    Ok(Rosenbrock { tape: b.finish(loss)?, shapes: [(2, 1)] })
}

impl Problem for Rosenbrock {
    fn name(&self) -> &str {
        "rosenbrock"
    }

    fn param_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    fn init_params(&self, _seed: u64) -> Vec<Matrix> {
        vec![Matrix::from_vec_unchecked(2, 1, vec![-1.0, 1.0])]
    }

    fn make_batch(&self, _iteration: u64, _batch_size: usize) -> Batch {
        Vec::new()
    }

    fn loss(&self, params: &[Matrix], batch: &Batch) -> Result<f64> {
        self.tape.evaluate(params, batch)
    }

    fn loss_and_gradient(&self, params: &[Matrix], batch: &Batch) -> Result<(f64, Vec<Matrix>)> {
        self.tape.loss_and_gradient(params, batch)
    }

    fn hvp(&self, params: &[Matrix], batch: &Batch, v: &[Matrix]) -> Result<Vec<Matrix>> {
        self.tape.hvp(params, batch, v)
    }

    fn loss_grad_hvp(
        &self,
        params: &[Matrix],
        batch: &Batch,
        v: &[Matrix],
    ) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
        self.tape.loss_grad_hvp(params, batch, v)
    }

    fn full_loss(&self, params: &[Matrix]) -> Result<f64> {
        self.tape.evaluate(params, &Vec::new())
    }
}

/// Quadratic `0.5·θᵀHθ + bᵀθ` with controllable stochastic-gradient noise:
/// the batch gradient is `Hθ + b + ε_g` and the batch HVP is `Hv + ε_h`,
/// with `ε ~ N(0, σ²I/B)` drawn per iteration (additive Gaussian on the
/// evaluated products).
pub struct NoisyQuadratic {
    h: Matrix,
    b: Vector,
    sigma: f64,
    dataset_seed: u64,
    shapes: [(usize, usize); 1],
}

pub fn make_noisy_quadratic(h: Matrix, b: Vector, sigma: f64, dataset_seed: u64) -> Result<NoisyQuadratic> {
    NoisyQuadratic::new(h, b, sigma, dataset_seed)
}

impl NoisyQuadratic {
    pub fn new(h: Matrix, b: Vector, sigma: f64, dataset_seed: u64) -> Result<Self> {
        let n = h.rows();
        if h.cols() != n || b.len() != n {
            return Err(Error::ShapeMismatch {
                context: format!("quadratic needs square H and matching b, got {}x{} and {}", h.rows(), h.cols(), b.len()),
            });
        }
        if !(sigma >= 0.0) {
            return Err(Error::OutOfRange { what: "noise sigma", value: sigma });
        }
        let scale = max_abs_norm(&h);
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                asym = asym.max((h.get(i, j) - h.get(j, i)).abs());
            }
        }
        if scale > 0.0 && asym > 1e-12 * scale {
            return Err(Error::NotSymmetric { max_asymmetry: asym / scale });
        }
        Ok(NoisyQuadratic { shapes: [(n, 1)], h, b, sigma, dataset_seed })
    }

    pub fn hessian(&self) -> &Matrix {
        &self.h
    }

    fn dim(&self) -> usize {
        self.shapes[0].0
    }
}

impl Problem for NoisyQuadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn param_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix> {
        let mut s = SeedStream::new(seed, "nq-init");
        vec![Matrix::from_fn(self.dim(), 1, |_, _| s.standard_normal())]
    }

    fn make_batch(&self, iteration: u64, batch_size: usize) -> Batch {
        // Two independent draws per iteration: gradient noise and HVP noise.
        let n = self.dim();
        let scale = self.sigma / (batch_size as f64).sqrt();
        let mut s = SeedStream::for_iteration(self.dataset_seed, iteration, "nq-noise");
        let eg = Matrix::from_fn(n, 1, |_, _| scale * s.standard_normal());
        let eh = Matrix::from_fn(n, 1, |_, _| scale * s.standard_normal());
        vec![eg, eh]
    }

    fn loss(&self, params: &[Matrix], batch: &Batch) -> Result<f64> {
        let theta = Vector::from_vec_unchecked(params[0].as_slice().to_vec());
        let quad = 0.5 * theta.dot(&self.h.mul_vec(&theta)) + self.b.dot(&theta);
        let noise = Vector::from_vec_unchecked(batch[0].as_slice().to_vec());
        Ok(quad + noise.dot(&theta))
    }

    fn loss_and_gradient(&self, params: &[Matrix], batch: &Batch) -> Result<(f64, Vec<Matrix>)> {
        let theta = Vector::from_vec_unchecked(params[0].as_slice().to_vec());
        let mut g = self.h.mul_vec(&theta).add(&self.b);
        for (gi, ni) in g.as_mut_slice().iter_mut().zip(batch[0].as_slice()) {
            *gi += ni;
        }
        Ok((self.loss(params, batch)?, vec![g.into_column()]))
    }

    fn hvp(&self, _params: &[Matrix], batch: &Batch, v: &[Matrix]) -> Result<Vec<Matrix>> {
        let vv = Vector::from_vec_unchecked(v[0].as_slice().to_vec());
        let mut hv = self.h.mul_vec(&vv);
        for (hi, ni) in hv.as_mut_slice().iter_mut().zip(batch[1].as_slice()) {
            *hi += ni;
        }
        Ok(vec![hv.into_column()])
    }

    fn full_loss(&self, params: &[Matrix]) -> Result<f64> {
        let theta = Vector::from_vec_unchecked(params[0].as_slice().to_vec());
        Ok(0.5 * theta.dot(&self.h.mul_vec(&theta)) + self.b.dot(&theta))
    }
}

/// Shared per-batch-width tape cache.
struct TapeCache {
    tapes: RefCell<HashMap<usize, Rc<Tape>>>,
}

impl TapeCache {
    fn new() -> Self {
        TapeCache { tapes: RefCell::new(HashMap::new()) }
    }

    fn get(&self, width: usize, build: impl FnOnce(usize) -> Result<Tape>) -> Result<Rc<Tape>> {
        if let Some(t) = self.tapes.borrow().get(&width) {
            return Ok(Rc::clone(t));
        }
        let tape = Rc::new(build(width)?);
        self.tapes.borrow_mut().insert(width, Rc::clone(&tape));
        Ok(tape)
    }
}

/// Two-class spiral classifier with tanh hidden layers and cross-entropy
/// loss. Each layer matrix is `[weights | bias]` applied to the layer input
/// augmented with a trailing 1, and is preconditioned as one tensor.
pub struct MlpClassifier {
    layers: Vec<usize>,
    shapes: Vec<(usize, usize)>,
    /// Augmented inputs, (in+1) × n.
    data_x: Matrix,
    /// One-hot labels, classes × n.
    data_y: Matrix,
    dataset_seed: u64,
    cache: TapeCache,
}

pub fn make_mlp_classifier(layers: &[usize], n_samples: usize, seed: u64) -> Result<MlpClassifier> {
    if layers.len() < 2 || layers.contains(&0) {
        return Err(Error::BadConfig {
            field: "problem.layers",
            message: format!("need at least input and output sizes, got {layers:?}"),
        });
    }
    if layers[0] != 2 || *layers.last().unwrap() != 2 {
        return Err(Error::BadConfig {
            field: "problem.layers",
            message: "the spiral task is 2 features in, 2 classes out".into(),
        });
    }
    if n_samples < 2 {
        return Err(Error::BadConfig { field: "problem.n_samples", message: "need at least 2 samples".into() });
    }

    // Two interleaved spirals, one per class, with angular jitter.
    let mut s = SeedStream::new(seed, "spiral");
    let mut data_x = Matrix::zeros(3, n_samples);
    let mut data_y = Matrix::zeros(2, n_samples);
    for i in 0..n_samples {
        let class = i % 2;
        let t = (i / 2) as f64 / ((n_samples / 2).max(1) as f64);
        let radius = 0.15 + 0.85 * t;
        let angle = t * 3.5 * std::f64::consts::PI + class as f64 * std::f64::consts::PI
            + 0.15 * s.standard_normal();
        data_x.set(0, i, radius * angle.cos());
        data_x.set(1, i, radius * angle.sin());
        data_x.set(2, i, 1.0);
        data_y.set(class, i, 1.0);
    }

    let shapes: Vec<(usize, usize)> =
        layers.windows(2).map(|w| (w[1], w[0] + 1)).collect();
    Ok(MlpClassifier {
        layers: layers.to_vec(),
        shapes,
        data_x,
        data_y,
        dataset_seed: seed,
        cache: TapeCache::new(),
    })
}

impl MlpClassifier {
    fn tape(&self, width: usize) -> Result<Rc<Tape>> {
        let layers = self.layers.clone();
        self.cache.get(width, move |w| build_mlp_tape(&layers, w))
    }

    fn full_batch(&self) -> Batch {
        let n = self.data_x.cols();
        vec![self.data_x.clone(), self.data_y.clone(), Matrix::from_fn(1, n, |_, _| 1.0)]
    }

    /// The generated dataset (augmented inputs, one-hot labels).
    pub fn dataset(&self) -> (&Matrix, &Matrix) {
        (&self.data_x, &self.data_y)
    }
}

fn build_mlp_tape(layers: &[usize], width: usize) -> Result<Tape> {
    let mut b = TapeBuilder::new();
    let thetas: Vec<_> = layers.windows(2).map(|w| b.param(w[1], w[0] + 1)).collect();
    let x = b.input(layers[0] + 1, width);
    let targets = b.input(*layers.last().unwrap(), width);
    let ones = b.input(1, width);
    let mut h = x;
    let last = thetas.len() - 1;
    for (i, &theta) in thetas.iter().enumerate() {
        let z = b.matmul(theta, h)?;
        if i == last {
            let loss = b.softmax_cross_entropy(z, targets)?;
            return b.finish(loss);
        }
        let a = b.tanh(z);
        h = b.concat_rows(a, ones)?;
    }
    unreachable!("layers validated non-empty")
}

fn gather_cols(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), idx.len(), |i, j| m.get(i, idx[j]))
}

/// Glorot-style init with the bias column zeroed.
fn init_weight(rows: usize, cols: usize, s: &mut SeedStream) -> Matrix {
    let scale = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, j| if j + 1 == cols { 0.0 } else { scale * s.standard_normal() })
}

impl Problem for MlpClassifier {
    fn name(&self) -> &str {
        "mlp"
    }

    fn param_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix> {
        let mut s = SeedStream::new(seed, "mlp-init");
        self.shapes.iter().map(|&(r, c)| init_weight(r, c, &mut s)).collect()
    }

    fn make_batch(&self, iteration: u64, batch_size: usize) -> Batch {
        let n = self.data_x.cols();
        let b = batch_size.min(n);
        let mut s = SeedStream::for_iteration(self.dataset_seed, iteration, "mlp-batch");
        let idx: Vec<usize> = (0..b).map(|_| (s.next_u64() % n as u64) as usize).collect();
        vec![
            gather_cols(&self.data_x, &idx),
            gather_cols(&self.data_y, &idx),
            Matrix::from_fn(1, b, |_, _| 1.0),
        ]
    }

    fn loss(&self, params: &[Matrix], batch: &Batch) -> Result<f64> {
        self.tape(batch[0].cols())?.evaluate(params, batch)
    }

    fn loss_and_gradient(&self, params: &[Matrix], batch: &Batch) -> Result<(f64, Vec<Matrix>)> {
        self.tape(batch[0].cols())?.loss_and_gradient(params, batch)
    }

    fn hvp(&self, params: &[Matrix], batch: &Batch, v: &[Matrix]) -> Result<Vec<Matrix>> {
        self.tape(batch[0].cols())?.hvp(params, batch, v)
    }

    fn loss_grad_hvp(
        &self,
        params: &[Matrix],
        batch: &Batch,
        v: &[Matrix],
    ) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
        self.tape(batch[0].cols())?.loss_grad_hvp(params, batch, v)
    }

    fn full_loss(&self, params: &[Matrix]) -> Result<f64> {
        let batch = self.full_batch();
        self.tape(batch[0].cols())?.evaluate(params, &batch)
    }
}

/// One-layer LSTM language model on a synthetic repeating token stream
/// with skewed token frequencies.
///
/// The gate coefficients live in a single matrix applied to `[x; h; 1]`
/// (shape `4·hidden × 2·hidden + 1`), and the decoding matrix is
/// `vocab × hidden + 1` with the encoder tied to the transpose of its
/// weight part. A fixed per-unit scaling sits between the hidden state and
/// the decoder, spreading the conditioning across readout directions the
/// way real token statistics do.
pub struct TinyLstmLm {
    vocab: usize,
    hidden: usize,
    seq_len: usize,
    stream: Vec<usize>,
    /// Fixed per-unit readout scales, log-uniform in [0.05, 1].
    readout_scale: Vec<f64>,
    shapes: Vec<(usize, usize)>,
    dataset_seed: u64,
    cache: TapeCache,
}

pub fn make_tiny_lstm_lm(vocab: usize, hidden: usize, seq_len: usize, seed: u64) -> Result<TinyLstmLm> {
    if vocab < 2 || hidden < 2 {
        return Err(Error::BadConfig {
            field: "problem.lstm",
            message: format!("vocab and hidden must be at least 2, got {vocab} and {hidden}"),
        });
    }
    if seq_len < 1 {
        return Err(Error::BadConfig { field: "problem.seq_len", message: "must be >= 1".into() });
    }
    // A repeating pattern much longer than the context window, so the model
    // has to infer its phase from a partial view; long enough for many
    // distinct windows.
    let mut s = SeedStream::new(seed, "lstm-stream");
    let pattern_len = 2 * vocab;
    // Skewed token frequencies (frequent head, rare tail), as in natural
    // token streams; rare-token rows see small gradients and curvature.
    let pattern: Vec<usize> = (0..pattern_len)
        .map(|_| {
            let u = s.uniform();
            ((vocab as f64 * u * u * u) as usize).min(vocab - 1)
        })
        .collect();
    let total = ((seq_len + 1) * 40).max(4 * pattern_len);
    let stream: Vec<usize> = (0..total).map(|i| pattern[i % pattern_len]).collect();
    let readout_scale: Vec<f64> = (0..hidden).map(|_| 0.05f64.powf(1.0 - s.uniform())).collect();
    let shapes = vec![(4 * hidden, 2 * hidden + 1), (vocab, hidden + 1)];
    Ok(TinyLstmLm {
        vocab,
        hidden,
        seq_len,
        stream,
        readout_scale,
        shapes,
        dataset_seed: seed,
        cache: TapeCache::new(),
    })
}

impl TinyLstmLm {
    fn tape(&self, width: usize) -> Result<Rc<Tape>> {
        let (vocab, hidden, seq_len) = (self.vocab, self.hidden, self.seq_len);
        self.cache.get(width, move |w| build_lstm_tape(vocab, hidden, seq_len, w))
    }

    /// One-hot batches for the windows starting at `offsets`.
    fn batch_at(&self, offsets: &[usize]) -> Batch {
        let b = offsets.len();
        let mut out = Vec::with_capacity(2 * self.seq_len + 1);
        for t in 0..self.seq_len {
            let mut x = Matrix::zeros(self.vocab, b);
            for (j, &off) in offsets.iter().enumerate() {
                x.set(self.stream[off + t], j, 1.0);
            }
            out.push(x);
        }
        for t in 0..self.seq_len {
            let mut y = Matrix::zeros(self.vocab, b);
            for (j, &off) in offsets.iter().enumerate() {
                y.set(self.stream[off + t + 1], j, 1.0);
            }
            out.push(y);
        }
        out.push(Matrix::from_fn(1, b, |_, _| 1.0));
        out.push(Matrix::from_fn(self.hidden, 1, |i, _| self.readout_scale[i]));
        out
    }

    pub fn token_stream(&self) -> &[usize] {
        &self.stream
    }
}

fn build_lstm_tape(vocab: usize, hidden: usize, seq_len: usize, width: usize) -> Result<Tape> {
    let mut b = TapeBuilder::new();
    let gate = b.param(4 * hidden, 2 * hidden + 1);
    let dec = b.param(vocab, hidden + 1);
    let xs: Vec<_> = (0..seq_len).map(|_| b.input(vocab, width)).collect();
    let ys: Vec<_> = (0..seq_len).map(|_| b.input(vocab, width)).collect();
    let ones = b.input(1, width);
    let scales = b.input(hidden, 1);
    let scales_wide = b.broadcast_cols(scales, width)?;

    // Encoder tied to the transpose of the decoder's weight part.
    let dec_t = b.transpose(dec);
    let enc = b.slice_rows(dec_t, 0, hidden)?;

    let mut h = b.const_zeros(hidden, width);
    let mut c = b.const_zeros(hidden, width);
    let mut total: Option<usize> = None;
    for t in 0..seq_len {
        let emb = b.matmul(enc, xs[t])?;
        let cat1 = b.concat_rows(emb, h)?;
        let cat = b.concat_rows(cat1, ones)?;
        let gates = b.matmul(gate, cat)?;
        let i_part = b.slice_rows(gates, 0, hidden)?;
        let f_part = b.slice_rows(gates, hidden, hidden)?;
        let g_part = b.slice_rows(gates, 2 * hidden, hidden)?;
        let o_part = b.slice_rows(gates, 3 * hidden, hidden)?;
        let i_gate = b.sigmoid(i_part);
        let f_gate = b.sigmoid(f_part);
        let g_gate = b.tanh(g_part);
        let o_gate = b.sigmoid(o_part);
        let fc = b.mul(f_gate, c)?;
        let ig = b.mul(i_gate, g_gate)?;
        c = b.add(fc, ig)?;
        let ct = b.tanh(c);
        h = b.mul(o_gate, ct)?;

        let h_scaled = b.mul(h, scales_wide)?;
        let dec_in = b.concat_rows(h_scaled, ones)?;
        let logits = b.matmul(dec, dec_in)?;
        let step_loss = b.softmax_cross_entropy(logits, ys[t])?;
        total = Some(match total {
            None => step_loss,
            Some(acc) => b.add(acc, step_loss)?,
        });
    }
    let loss = b.scale(total.expect("seq_len >= 1"), 1.0 / seq_len as f64);
    b.finish(loss)
}

impl Problem for TinyLstmLm {
    fn name(&self) -> &str {
        "lstm"
    }

    fn param_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix> {
        let mut s = SeedStream::new(seed, "lstm-init");
        self.shapes.iter().map(|&(r, c)| init_weight(r, c, &mut s)).collect()
    }

    fn make_batch(&self, iteration: u64, batch_size: usize) -> Batch {
        let max_off = self.stream.len() - self.seq_len - 1;
        let mut s = SeedStream::for_iteration(self.dataset_seed, iteration, "lstm-batch");
        let offsets: Vec<usize> =
            (0..batch_size).map(|_| (s.next_u64() % max_off as u64) as usize).collect();
        self.batch_at(&offsets)
    }

    fn loss(&self, params: &[Matrix], batch: &Batch) -> Result<f64> {
        self.tape(batch[0].cols())?.evaluate(params, batch)
    }

    fn loss_and_gradient(&self, params: &[Matrix], batch: &Batch) -> Result<(f64, Vec<Matrix>)> {
        self.tape(batch[0].cols())?.loss_and_gradient(params, batch)
    }

    fn hvp(&self, params: &[Matrix], batch: &Batch, v: &[Matrix]) -> Result<Vec<Matrix>> {
        self.tape(batch[0].cols())?.hvp(params, batch, v)
    }

    fn loss_grad_hvp(
        &self,
        params: &[Matrix],
        batch: &Batch,
        v: &[Matrix],
    ) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
        self.tape(batch[0].cols())?.loss_grad_hvp(params, batch, v)
    }

    fn full_loss(&self, params: &[Matrix]) -> Result<f64> {
        // Deterministic evaluation windows tiling the stream.
        let max_off = self.stream.len() - self.seq_len - 1;
        let offsets: Vec<usize> = (0..=max_off).step_by(self.seq_len).collect();
        let batch = self.batch_at(&offsets);
        self.tape(batch[0].cols())?.evaluate(params, &batch)
    }
}
