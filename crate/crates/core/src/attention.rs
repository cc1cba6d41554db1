//! Transformer-style sublayers: per-head scaled dot-product attention, the
//! multi-head wrapper, the position-wise feed-forward network, and the
//! post-op sequence (dropout, source-side shortcut, layer norm).
//!
//! The shortcut here adds the *source* features to the sublayer output
//! rather than the query, so attention output never mixes in features from
//! the querying modality.

use crate::rng::SplitMix64;
use crate::tensor::{glorot_uniform, Mode, Tape, Tensor, TensorError, TensorId};
use serde::{Deserialize, Serialize};

/// Query/key/value projections for one attention head, each d_h×d_k.
#[derive(Debug, Clone)]
pub struct HeadParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
}

/// k parallel heads plus the d_h×d_h output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub wo: T,
}

/// Two-layer position-wise network: relu(x·w1 + b1)·w2 + b2.
#[derive(Debug, Clone)]
pub struct FcnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Learned layer-norm gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams { wq: f(&self.wq), wk: f(&self.wk), wv: f(&self.wv) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
    }
}

impl<T> MultiHeadParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MultiHeadParams<U> {
        MultiHeadParams {
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
            wo: f(&self.wo),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("{prefix}.head{i}"), f);
        }
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.head{i}"), f);
        }
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

impl<T> FcnParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FcnParams<U> {
        FcnParams { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams { gain: f(&self.gain), bias: f(&self.bias) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl HeadParams<Tensor> {
    pub fn init(d_h: usize, d_k: usize, rng: &mut SplitMix64) -> Self {
        Self {
            wq: glorot_uniform(d_h, d_k, rng),
            wk: glorot_uniform(d_h, d_k, rng),
            wv: glorot_uniform(d_h, d_k, rng),
        }
    }
}

impl MultiHeadParams<Tensor> {
    /// `d_h` must be divisible by `k`; each head projects to d_k = d_h/k.
    pub fn init(d_h: usize, k: usize, rng: &mut SplitMix64) -> Result<Self, TensorError> {
        if k == 0 || d_h % k != 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![d_h, k],
                reason: "head count must divide feature width".into(),
            });
        }
        let d_k = d_h / k;
        Ok(Self {
            heads: (0..k).map(|_| HeadParams::init(d_h, d_k, rng)).collect(),
            wo: glorot_uniform(d_h, d_h, rng),
        })
    }
}

impl FcnParams<Tensor> {
    pub fn init(d_h: usize, d_ff: usize, rng: &mut SplitMix64) -> Self {
        Self {
            w1: glorot_uniform(d_h, d_ff, rng),
            b1: Tensor::vector(vec![0.0; d_ff]),
            w2: glorot_uniform(d_ff, d_h, rng),
            b2: Tensor::vector(vec![0.0; d_h]),
        }
    }
}

impl LayerNormParams<Tensor> {
    pub fn init(d: usize) -> Self {
        Self { gain: Tensor::vector(vec![1.0; d]), bias: Tensor::vector(vec![0.0; d]) }
    }
}

/// Dropout probability, execution mode, and layer-norm epsilon shared by the
/// post-op sequence of every sublayer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SublayerConfig {
    pub dropout_p: f64,
    pub mode: Mode,
    pub ln_eps: f64,
}

impl SublayerConfig {
    pub fn eval() -> Self {
        Self { dropout_p: 0.0, mode: Mode::Eval, ln_eps: 1e-5 }
    }
}

/// One scaled dot-product head: weights = softmax(Q·Wq·(S·Wk)ᵀ/√d_k), output
/// = weights·S·Wv. The weight matrix is returned for tracing.
pub fn attend_head(
    tape: &mut Tape,
    q: TensorId,
    s: TensorId,
    h: &HeadParams<TensorId>,
) -> Result<(TensorId, TensorId), TensorError> {
    let qp = tape.matmul(q, h.wq)?;
    let kp = tape.matmul(s, h.wk)?;
    let vp = tape.matmul(s, h.wv)?;
    let d_k = tape.value(qp).dims2().expect("projection is a matrix").1;
    let logits_raw = tape.matmul_nt(qp, kp)?;
    let logits = tape.scale(logits_raw, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(logits)?;
    let out = tape.matmul(weights, vp)?;
    Ok((out, weights))
}

/// Concatenated head outputs through the output projection. Returns the
/// per-head weight matrices alongside the m×d_h output.
pub fn multi_head(
    tape: &mut Tape,
    q: TensorId,
    s: TensorId,
    p: &MultiHeadParams<TensorId>,
) -> Result<(TensorId, Vec<TensorId>), TensorError> {
    let mut traces = Vec::with_capacity(p.heads.len());
    let mut concat: Option<TensorId> = None;
    for head in &p.heads {
        let (out, weights) = attend_head(tape, q, s, head)?;
        traces.push(weights);
        concat = Some(match concat {
            None => out,
            Some(acc) => tape.concat_cols(acc, out)?,
        });
    }
    let concat = concat.expect("at least one head");
    let out = tape.matmul(concat, p.wo)?;
    Ok((out, traces))
}

/// Position-wise feed-forward network, applied identically to every row.
pub fn fcn(tape: &mut Tape, x: TensorId, p: &FcnParams<TensorId>) -> Result<TensorId, TensorError> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_broadcast_row(h, p.b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, p.w2)?;
    tape.add_broadcast_row(out, p.b2)
}

/// Post-op sequence: layer_norm(dropout(sub_out) + source). The residual
/// partner is the source-side tensor, never the query.
pub fn sublayer_post(
    tape: &mut Tape,
    sub_out: TensorId,
    source: TensorId,
    ln: &LayerNormParams<TensorId>,
    cfg: &SublayerConfig,
    rng: &mut SplitMix64,
) -> Result<TensorId, TensorError> {
    let dropped = tape.dropout(sub_out, cfg.dropout_p, cfg.mode, rng)?;
    let shortcut = tape.add(dropped, source)?;
    tape.layer_norm_rows(shortcut, ln.gain, ln.bias, cfg.ln_eps)
}
