//! A tiny untrained decoder used to drive the engine end to end.
//!
//! Each layer projects the residual stream to a query, key and value, attends
//! over that layer's cache (not including the current token), adds the
//! projected attention output back to the stream and rescales it to unit RMS.
//! Logits are a scaled linear readout. All weights are Gaussian draws from a
//! seeded generator, so the model is fully determined by `(shape, seed)`.

use crate::attention::{naive_attention, tiled_attention, AttentionRows};
use crate::config::ModelShape;
use crate::error::{Error, Result};
use crate::kv_cache::LayerCache;
use crate::policy::KvPair;
use crate::rng::SeededRng;

/// Default multiplier on the readout, chosen so the untrained model's
/// confidence scores straddle the default threshold.
pub const DEFAULT_LOGIT_SCALE: f64 = 3.0;

/// Which attention implementation the forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPath {
    Tiled(usize),
    Naive,
}

/// Row-major `[rows x cols]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x^T M` for a row vector `x` of length `rows`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub attention: Vec<AttentionRows>,
    pub new_kv: Vec<KvPair>,
}

#[derive(Debug, Clone)]
pub struct ReferenceModel {
    pub shape: ModelShape,
    pub seed: u64,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub readout: Matrix,
    pub logit_scale: f64,
}

fn rms_normalize(x: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-12).sqrt();
    x.iter_mut().for_each(|v| *v *= inv);
}

impl ReferenceModel {
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let d = shape.model_dim();
        let w_std = 1.0 / (d as f64).sqrt();
        let mut rng = SeededRng::derive(seed, 0x4D4F_4445);
        let embedding = Matrix::gaussian(&mut rng, shape.vocab_size, d, 1.0);
        let layers = (0..shape.num_layers)
            .map(|_| LayerWeights {
                wq: Matrix::gaussian(&mut rng, d, d, w_std),
                wk: Matrix::gaussian(&mut rng, d, d, w_std),
                wv: Matrix::gaussian(&mut rng, d, d, w_std),
                wo: Matrix::gaussian(&mut rng, d, d, w_std),
            })
            .collect();
        let readout = Matrix::gaussian(&mut rng, d, shape.vocab_size, w_std);
        Ok(Self {
            shape,
            seed,
            embedding,
            layers,
            readout,
            logit_scale: DEFAULT_LOGIT_SCALE,
        })
    }

    pub fn with_logit_scale(mut self, scale: f64) -> Self {
        self.logit_scale = scale;
        self
    }

    /// One token through every layer, reading (never mutating) `caches`.
    pub fn forward(&self, token: usize, caches: &[LayerCache], path: AttentionPath) -> Result<ForwardOutput> {
        let s = self.shape;
        if token >= s.vocab_size {
            return Err(Error::InvalidInput(format!(
                "token {token} outside vocabulary of {}",
                s.vocab_size
            )));
        }
        if caches.len() != s.num_layers {
            return Err(Error::Shape(format!(
                "{} caches for {} layers",
                caches.len(),
                s.num_layers
            )));
        }
        let mut x = self.embedding.row(token).to_vec();
        rms_normalize(&mut x);
        let mut attention = Vec::with_capacity(s.num_layers);
        let mut new_kv = Vec::with_capacity(s.num_layers);
        for (w, cache) in self.layers.iter().zip(caches) {
            let q = w.wq.left_mul(&x);
            let k = w.wk.left_mul(&x);
            let v = w.wv.left_mul(&x);
            new_kv.push(KvPair {
                k: k.iter().map(|&a| a as f32).collect(),
                v: v.iter().map(|&a| a as f32).collect(),
            });
            if cache.is_empty() {
                attention.push(AttentionRows::uniform(s.num_heads, 0));
                continue;
            }
            let out = match path {
                AttentionPath::Tiled(b) => tiled_attention(&q, cache, b)?,
                AttentionPath::Naive => naive_attention(
                    &q,
                    &cache.dequantized_keys(),
                    &cache.dequantized_values(),
                    s.num_heads,
                    s.head_dim,
                )?,
            };
            let proj = w.wo.left_mul(&out.output);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            rms_normalize(&mut x);
            attention.push(out.rows);
        }
        let logits = self
            .readout
            .left_mul(&x)
            .into_iter()
            .map(|l| l * self.logit_scale)
            .collect();
        Ok(ForwardOutput {
            logits,
            attention,
            new_kv,
        })
    }
}
