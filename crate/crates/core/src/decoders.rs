//! Baseline captioning decoders.
//!
//! Five LSTM decoders differing in which image representation they consume
//! and how: attention over visual features, attention over textual concepts,
//! condition-style priming with one modality and per-step input of the
//! other, and a two-layer regional-attention stack. Each can run on the
//! original features or on refined replacements via [`integrate_mia`].

use crate::mia::MiaOutput;
use crate::rng::SplitMix64;
use crate::tensor::{glorot_uniform, Tape, Tensor, TensorError, TensorId};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("decoder step for {expected:?} called on a {found:?} model")]
    VariantMismatch { expected: DecoderVariant, found: DecoderVariant },
    #[error("feature source {0:?} requires refined outputs, but none were provided")]
    MissingMiaOutput(FeatureSource),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Token ↔ id bijection with fixed reserved ids 0..=3 for
/// `<pad>`, `<bos>`, `<eos>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.tokens }
    }
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;

    fn try_from(f: VocabFile) -> Result<Self, String> {
        if f.tokens.len() < RESERVED.len() {
            return Err("vocabulary misses reserved tokens".into());
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if f.tokens[i] != *want {
                return Err(format!("reserved token {i} is {:?}, expected {want:?}", f.tokens[i]));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in f.tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Self { tokens: f.tokens, index })
    }
}

impl Vocabulary {
    /// Builds ids from the reserved tokens followed by the given words in
    /// lexicographic order (duplicates collapse).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut sorted: Vec<String> = words.into_iter().map(Into::into).collect();
        sorted.sort();
        sorted.dedup();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(sorted.into_iter().filter(|w| !RESERVED.contains(&w.as_str())));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    VisualAttention,
    ConceptAttention,
    VisualCondition,
    ConceptCondition,
    VisualRegionalAttention,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 5] = [
        DecoderVariant::VisualAttention,
        DecoderVariant::ConceptAttention,
        DecoderVariant::VisualCondition,
        DecoderVariant::ConceptCondition,
        DecoderVariant::VisualRegionalAttention,
    ];
}

/// Which features the decoder consumes: the originals, the fused refined
/// matrix in both roles, or a single refined modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Original,
    MiaFused,
    MiaVisual,
    MiaTextual,
}

impl FeatureSource {
    pub fn uses_mia(self) -> bool {
        self != FeatureSource::Original
    }
}

/// Standard 4-gate LSTM weights: per gate an input projection, a recurrent
/// projection, and a bias.
#[derive(Debug, Clone)]
pub struct LstmParams<T> {
    pub wx_i: T,
    pub wh_i: T,
    pub b_i: T,
    pub wx_f: T,
    pub wh_f: T,
    pub b_f: T,
    pub wx_g: T,
    pub wh_g: T,
    pub b_g: T,
    pub wx_o: T,
    pub wh_o: T,
    pub b_o: T,
}

impl<T> LstmParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LstmParams<U> {
        LstmParams {
            wx_i: f(&self.wx_i),
            wh_i: f(&self.wh_i),
            b_i: f(&self.b_i),
            wx_f: f(&self.wx_f),
            wh_f: f(&self.wh_f),
            b_f: f(&self.b_f),
            wx_g: f(&self.wx_g),
            wh_g: f(&self.wh_g),
            b_g: f(&self.b_g),
            wx_o: f(&self.wx_o),
            wh_o: f(&self.wh_o),
            b_o: f(&self.b_o),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (name, t) in [
            ("wx_i", &self.wx_i),
            ("wh_i", &self.wh_i),
            ("b_i", &self.b_i),
            ("wx_f", &self.wx_f),
            ("wh_f", &self.wh_f),
            ("b_f", &self.b_f),
            ("wx_g", &self.wx_g),
            ("wh_g", &self.wh_g),
            ("b_g", &self.b_g),
            ("wx_o", &self.wx_o),
            ("wh_o", &self.wh_o),
            ("b_o", &self.b_o),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        for (name, t) in [
            ("wx_i", &mut self.wx_i),
            ("wh_i", &mut self.wh_i),
            ("b_i", &mut self.b_i),
            ("wx_f", &mut self.wx_f),
            ("wh_f", &mut self.wh_f),
            ("b_f", &mut self.b_f),
            ("wx_g", &mut self.wx_g),
            ("wh_g", &mut self.wh_g),
            ("b_g", &mut self.b_g),
            ("wx_o", &mut self.wx_o),
            ("wh_o", &mut self.wh_o),
            ("b_o", &mut self.b_o),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }
}

impl LstmParams<Tensor> {
    /// Glorot weights, zero biases except the forget gate at +1.0.
    pub fn init(d_in: usize, d_h: usize, rng: &mut SplitMix64) -> Self {
        Self {
            wx_i: glorot_uniform(d_in, d_h, rng),
            wh_i: glorot_uniform(d_h, d_h, rng),
            b_i: Tensor::vector(vec![0.0; d_h]),
            wx_f: glorot_uniform(d_in, d_h, rng),
            wh_f: glorot_uniform(d_h, d_h, rng),
            b_f: Tensor::vector(vec![1.0; d_h]),
            wx_g: glorot_uniform(d_in, d_h, rng),
            wh_g: glorot_uniform(d_h, d_h, rng),
            b_g: Tensor::vector(vec![0.0; d_h]),
            wx_o: glorot_uniform(d_in, d_h, rng),
            wh_o: glorot_uniform(d_h, d_h, rng),
            b_o: Tensor::vector(vec![0.0; d_h]),
        }
    }
}

/// Hidden and cell state of one LSTM, as [1×d_h] rows on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: TensorId,
    pub c: TensorId,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, d_h: usize) -> Self {
        let h = tape.leaf(Tensor::matrix(1, d_h, vec![0.0; d_h]).unwrap());
        let c = tape.leaf(Tensor::matrix(1, d_h, vec![0.0; d_h]).unwrap());
        Self { h, c }
    }
}

/// One LSTM step for a [1×d_in] input row.
pub fn lstm_step(
    tape: &mut Tape,
    p: &LstmParams<TensorId>,
    state: LstmState,
    x: TensorId,
) -> Result<LstmState, TensorError> {
    let gate = |tape: &mut Tape, wx, wh, b| -> Result<TensorId, TensorError> {
        let xs = tape.matmul(x, wx)?;
        let hs = tape.matmul(state.h, wh)?;
        let sum = tape.add(xs, hs)?;
        tape.add_broadcast_row(sum, b)
    };
    let i_pre = gate(tape, p.wx_i, p.wh_i, p.b_i)?;
    let i = tape.sigmoid(i_pre);
    let f_pre = gate(tape, p.wx_f, p.wh_f, p.b_f)?;
    let f = tape.sigmoid(f_pre);
    let g_pre = gate(tape, p.wx_g, p.wh_g, p.b_g)?;
    let g = tape.tanh(g_pre);
    let o_pre = gate(tape, p.wx_o, p.wh_o, p.b_o)?;
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let ct = tape.tanh(c);
    let h = tape.mul(o, ct)?;
    Ok(LstmState { h, c })
}

/// Additive attention: w_alpha is [1×d_h], w_feat and w_hidden are d_h×d_h.
#[derive(Debug, Clone)]
pub struct AdditiveAttnParams<T> {
    pub w_alpha: T,
    pub w_feat: T,
    pub w_hidden: T,
}

impl<T> AdditiveAttnParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AdditiveAttnParams<U> {
        AdditiveAttnParams {
            w_alpha: f(&self.w_alpha),
            w_feat: f(&self.w_feat),
            w_hidden: f(&self.w_hidden),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w_alpha"), &self.w_alpha);
        f(format!("{prefix}.w_feat"), &self.w_feat);
        f(format!("{prefix}.w_hidden"), &self.w_hidden);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w_alpha"), &mut self.w_alpha);
        f(format!("{prefix}.w_feat"), &mut self.w_feat);
        f(format!("{prefix}.w_hidden"), &mut self.w_hidden);
    }
}

impl AdditiveAttnParams<Tensor> {
    pub fn init(d_h: usize, rng: &mut SplitMix64) -> Self {
        Self {
            w_alpha: glorot_uniform(1, d_h, rng),
            w_feat: glorot_uniform(d_h, d_h, rng),
            w_hidden: glorot_uniform(d_h, d_h, rng),
        }
    }
}

/// alpha = softmax(w_alpha · tanh(W_F·Fᵀ ⊕ W_h·h)), context = alpha·F, where
/// ⊕ adds the vector to each column. Evaluated in row form (F·W_Fᵀ with the
/// projected hidden state broadcast over rows), which is the transposed
/// column form element for element.
pub fn additive_attend(
    tape: &mut Tape,
    h: TensorId,
    feats: TensorId,
    p: &AdditiveAttnParams<TensorId>,
) -> Result<(TensorId, TensorId), TensorError> {
    let f_proj = tape.matmul_nt(feats, p.w_feat)?;
    let h_proj = tape.matmul_nt(h, p.w_hidden)?;
    let pre = tape.add_broadcast_row(f_proj, h_proj)?;
    let act = tape.tanh(pre);
    let logits = tape.matmul_nt(p.w_alpha, act)?;
    let alpha = tape.softmax_rows(logits)?;
    let context = tape.matmul(alpha, feats)?;
    Ok((context, alpha))
}

/// All parameters of one decoder; which optional groups exist is fixed by
/// the variant.
#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub variant: DecoderVariant,
    /// V×d_h caption-word embedding table.
    pub embedding: T,
    pub lstm: LstmParams<T>,
    /// Second stacked LSTM, regional attention only.
    pub lstm2: Option<LstmParams<T>>,
    /// Additive attention, attention variants only.
    pub attn: Option<AdditiveAttnParams<T>>,
    /// d_h×V output projection.
    pub w_p: T,
}

impl<T> DecoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderParams<U> {
        DecoderParams {
            variant: self.variant,
            embedding: f(&self.embedding),
            lstm: self.lstm.map(f),
            lstm2: self.lstm2.as_ref().map(|l| l.map(f)),
            attn: self.attn.as_ref().map(|a| a.map(f)),
            w_p: f(&self.w_p),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.embedding"), &self.embedding);
        self.lstm.visit(&format!("{prefix}.lstm"), f);
        if let Some(l2) = &self.lstm2 {
            l2.visit(&format!("{prefix}.lstm2"), f);
        }
        if let Some(a) = &self.attn {
            a.visit(&format!("{prefix}.attn"), f);
        }
        f(format!("{prefix}.w_p"), &self.w_p);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.embedding"), &mut self.embedding);
        self.lstm.visit_mut(&format!("{prefix}.lstm"), f);
        if let Some(l2) = &mut self.lstm2 {
            l2.visit_mut(&format!("{prefix}.lstm2"), f);
        }
        if let Some(a) = &mut self.attn {
            a.visit_mut(&format!("{prefix}.attn"), f);
        }
        f(format!("{prefix}.w_p"), &mut self.w_p);
    }
}

impl DecoderParams<Tensor> {
    pub fn init(
        variant: DecoderVariant,
        vocab_size: usize,
        d_h: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        use DecoderVariant::*;
        let lstm_in = match variant {
            // First layer takes [w_e ; I_a], twice the width.
            VisualRegionalAttention => 2 * d_h,
            _ => d_h,
        };
        Self {
            variant,
            embedding: glorot_uniform(vocab_size, d_h, rng),
            lstm: LstmParams::init(lstm_in, d_h, rng),
            lstm2: matches!(variant, VisualRegionalAttention)
                .then(|| LstmParams::init(2 * d_h, d_h, rng)),
            attn: matches!(variant, VisualAttention | ConceptAttention | VisualRegionalAttention)
                .then(|| AdditiveAttnParams::init(d_h, rng)),
            w_p: glorot_uniform(d_h, vocab_size, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> DecoderParams<TensorId> {
        self.map(&mut |t| tape.param(t))
    }

    /// Bind without gradient tracking, for decode-only passes.
    pub fn bind_frozen(&self, tape: &mut Tape) -> DecoderParams<TensorId> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

/// The feature tensors a decoding step consumes, after any refinement.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSet {
    pub visual: TensorId,
    pub textual: TensorId,
    pub visual_avg: TensorId,
    pub textual_avg: TensorId,
}

/// Selects the feature tensors for the decoder: the originals, the fused
/// refined matrix in both roles, or one refined modality with the other
/// original. Averages are computed here once per sequence.
pub fn integrate_mia(
    tape: &mut Tape,
    visual: TensorId,
    textual: TensorId,
    mia: Option<&MiaOutput>,
    source: FeatureSource,
) -> Result<FeatureSet, DecoderError> {
    let (vis, txt) = match source {
        FeatureSource::Original => (visual, textual),
        FeatureSource::MiaFused => {
            let out = mia.ok_or(DecoderError::MissingMiaOutput(source))?;
            (out.fused, out.fused)
        }
        FeatureSource::MiaVisual => {
            let out = mia.ok_or(DecoderError::MissingMiaOutput(source))?;
            (out.i_n, textual)
        }
        FeatureSource::MiaTextual => {
            let out = mia.ok_or(DecoderError::MissingMiaOutput(source))?;
            (visual, out.t_n)
        }
    };
    Ok(FeatureSet {
        visual: vis,
        textual: txt,
        visual_avg: tape.mean_rows(vis)?,
        textual_avg: tape.mean_rows(txt)?,
    })
}

/// Decoder state across steps; `step` counts completed steps, so the first
/// call of a sequence sees step == 0.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub l1: LstmState,
    pub l2: Option<LstmState>,
    pub step: usize,
}

impl DecoderState {
    pub fn new(tape: &mut Tape, p: &DecoderParams<TensorId>, d_h: usize) -> Self {
        Self {
            l1: LstmState::zeros(tape, d_h),
            l2: p.lstm2.as_ref().map(|_| LstmState::zeros(tape, d_h)),
            step: 0,
        }
    }
}

fn expect_variant(
    p: &DecoderParams<TensorId>,
    expected: DecoderVariant,
) -> Result<(), DecoderError> {
    if p.variant == expected {
        Ok(())
    } else {
        Err(DecoderError::VariantMismatch { expected, found: p.variant })
    }
}

/// h_t = LSTM(h, w_e + I_a); attention over the visual features; logits from
/// W_p(h_t + c_t). The averaged features are added at every step, including
/// the first.
pub fn step_visual_attention(
    tape: &mut Tape,
    p: &DecoderParams<TensorId>,
    feats: &FeatureSet,
    state: &mut DecoderState,
    prev_token: u32,
) -> Result<TensorId, DecoderError> {
    expect_variant(p, DecoderVariant::VisualAttention)?;
    let w_e = tape.embedding_lookup(p.embedding, prev_token as usize)?;
    let x = tape.add(w_e, feats.visual_avg)?;
    state.l1 = lstm_step(tape, &p.lstm, state.l1, x)?;
    state.step += 1;
    let attn = p.attn.as_ref().expect("attention variant");
    let (ctx, _alpha) = additive_attend(tape, state.l1.h, feats.visual, attn)?;
    let hc = tape.add(state.l1.h, ctx)?;
    Ok(tape.matmul(hc, p.w_p)?)
}

/// First step feeds the averaged visual features; later steps feed
/// w_e + T_a. Attention runs over the textual concepts.
pub fn step_concept_attention(
    tape: &mut Tape,
    p: &DecoderParams<TensorId>,
    feats: &FeatureSet,
    state: &mut DecoderState,
    prev_token: u32,
) -> Result<TensorId, DecoderError> {
    expect_variant(p, DecoderVariant::ConceptAttention)?;
    let x = if state.step == 0 {
        feats.visual_avg
    } else {
        let w_e = tape.embedding_lookup(p.embedding, prev_token as usize)?;
        tape.add(w_e, feats.textual_avg)?
    };
    state.l1 = lstm_step(tape, &p.lstm, state.l1, x)?;
    state.step += 1;
    let attn = p.attn.as_ref().expect("attention variant");
    let (ctx, _alpha) = additive_attend(tape, state.l1.h, feats.textual, attn)?;
    let hc = tape.add(state.l1.h, ctx)?;
    Ok(tape.matmul(hc, p.w_p)?)
}

fn step_condition(
    tape: &mut Tape,
    p: &DecoderParams<TensorId>,
    first_input: TensorId,
    later_avg: TensorId,
    state: &mut DecoderState,
    prev_token: u32,
) -> Result<TensorId, DecoderError> {
    let x = if state.step == 0 {
        first_input
    } else {
        let w_e = tape.embedding_lookup(p.embedding, prev_token as usize)?;
        tape.add(w_e, later_avg)?
    };
    state.l1 = lstm_step(tape, &p.lstm, state.l1, x)?;
    state.step += 1;
    Ok(tape.matmul(state.l1.h, p.w_p)?)
}

/// Primed with T_a at the first step, then w_e + I_a; no attention.
pub fn step_visual_condition(
    tape: &mut Tape,
    p: &DecoderParams<TensorId>,
    feats: &FeatureSet,
    state: &mut DecoderState,
    prev_token: u32,
) -> Result<TensorId, DecoderError> {
    expect_variant(p, DecoderVariant::VisualCondition)?;
    step_condition(tape, p, feats.textual_avg, feats.visual_avg, state, prev_token)
}

/// Primed with I_a at the first step, then w_e + T_a; no attention.
pub fn step_concept_condition(
    tape: &mut Tape,
    p: &DecoderParams<TensorId>,
    feats: &FeatureSet,
    state: &mut DecoderState,
    prev_token: u32,
) -> Result<TensorId, DecoderError> {
    expect_variant(p, DecoderVariant::ConceptCondition)?;
    step_condition(tape, p, feats.visual_avg, feats.textual_avg, state, prev_token)
}

/// Two stacked LSTMs: the first takes [w_e ; I_a], attends over the visual
/// features, and the second takes [h¹ ; c_t]; logits from W_p·h².
pub fn step_visual_regional(
    tape: &mut Tape,
    p: &DecoderParams<TensorId>,
    feats: &FeatureSet,
    state: &mut DecoderState,
    prev_token: u32,
) -> Result<TensorId, DecoderError> {
    expect_variant(p, DecoderVariant::VisualRegionalAttention)?;
    let w_e = tape.embedding_lookup(p.embedding, prev_token as usize)?;
    let x1 = tape.concat_cols(w_e, feats.visual_avg)?;
    state.l1 = lstm_step(tape, &p.lstm, state.l1, x1)?;
    let attn = p.attn.as_ref().expect("attention variant");
    let (ctx, _alpha) = additive_attend(tape, state.l1.h, feats.visual, attn)?;
    let x2 = tape.concat_cols(state.l1.h, ctx)?;
    let lstm2 = p.lstm2.as_ref().expect("regional variant has two layers");
    let l2 = state.l2.expect("regional state has two layers");
    let l2 = lstm_step(tape, lstm2, l2, x2)?;
    state.l2 = Some(l2);
    state.step += 1;
    Ok(tape.matmul(l2.h, p.w_p)?)
}

/// Runs the step matching the model's variant.
pub fn decoder_step(
    tape: &mut Tape,
    p: &DecoderParams<TensorId>,
    feats: &FeatureSet,
    state: &mut DecoderState,
    prev_token: u32,
) -> Result<TensorId, DecoderError> {
    match p.variant {
        DecoderVariant::VisualAttention => step_visual_attention(tape, p, feats, state, prev_token),
        DecoderVariant::ConceptAttention => {
            step_concept_attention(tape, p, feats, state, prev_token)
        }
        DecoderVariant::VisualCondition => step_visual_condition(tape, p, feats, state, prev_token),
        DecoderVariant::ConceptCondition => {
            step_concept_condition(tape, p, feats, state, prev_token)
        }
        DecoderVariant::VisualRegionalAttention => {
            step_visual_regional(tape, p, feats, state, prev_token)
        }
    }
}

/// Argmax decoding from BOS until EOS or `max_len` tokens. The returned
/// sequence excludes BOS and EOS.
pub fn greedy_decode(
    tape: &mut Tape,
    p: &DecoderParams<TensorId>,
    feats: &FeatureSet,
    d_h: usize,
    max_len: usize,
) -> Result<Vec<u32>, DecoderError> {
    let mut state = DecoderState::new(tape, p, d_h);
    let mut prev = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = decoder_step(tape, p, feats, &mut state, prev)?;
        let tok = tape.value(logits).argmax() as u32;
        if tok == EOS {
            break;
        }
        out.push(tok);
        prev = tok;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn rand_mat(r: usize, c: usize, rng: &mut SplitMix64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn original_feats(tape: &mut Tape, vis: Tensor, txt: Tensor) -> FeatureSet {
        let v = tape.leaf(vis);
        let t = tape.leaf(txt);
        integrate_mia(tape, v, t, None, FeatureSource::Original).unwrap()
    }

    #[test]
    fn vocabulary_reserved_ids_and_sorted_words() {
        let v = Vocabulary::from_words(["dog", "cat", "dog"]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("cat"), 4);
        assert_eq!(v.id("dog"), 5);
        assert_eq!(v.id("mouse"), UNK);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn empty_vocabulary_has_reserved_tokens_only() {
        let v = Vocabulary::from_words(Vec::<String>::new());
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn identical_corpora_identical_ids() {
        let a = Vocabulary::from_words(["zebra", "apple", "mid"]);
        let b = Vocabulary::from_words(["mid", "zebra", "apple"]);
        assert_eq!(a, b);
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = Vocabulary::from_words(["dog", "cat"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn vocabulary_rejects_missing_reserved() {
        let bad = r#"{"tokens":["a","b","c","d","e"]}"#;
        assert!(serde_json::from_str::<Vocabulary>(bad).is_err());
    }

    #[test]
    fn additive_attend_single_feature_is_that_row() {
        let mut rng = SplitMix64::new(40);
        let p = AdditiveAttnParams::init(4, &mut rng);
        let mut tape = Tape::new();
        let h = tape.leaf(rand_mat(1, 4, &mut rng));
        let frow = rand_mat(1, 4, &mut rng);
        let f = tape.leaf(frow.clone());
        let pb = p.map(&mut |t| tape.param(t));
        let (ctx, alpha) = additive_attend(&mut tape, h, f, &pb).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        for (a, b) in tape.value(ctx).data().iter().zip(frow.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn additive_attend_duplicate_rows_give_uniform_alpha() {
        let mut rng = SplitMix64::new(41);
        let p = AdditiveAttnParams::init(4, &mut rng);
        let row: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&row);
        }
        let mut tape = Tape::new();
        let h = tape.leaf(rand_mat(1, 4, &mut rng));
        let f = tape.leaf(Tensor::matrix(3, 4, data).unwrap());
        let pb = p.map(&mut |t| tape.param(t));
        let (ctx, alpha) = additive_attend(&mut tape, h, f, &pb).unwrap();
        for &a in tape.value(alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        for (a, b) in tape.value(ctx).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn additive_attend_width_mismatch_errors() {
        let mut rng = SplitMix64::new(42);
        let p = AdditiveAttnParams::init(4, &mut rng);
        let mut tape = Tape::new();
        let h = tape.leaf(rand_mat(1, 6, &mut rng));
        let f = tape.leaf(rand_mat(3, 4, &mut rng));
        let pb = p.map(&mut |t| tape.param(t));
        assert!(additive_attend(&mut tape, h, f, &pb).is_err());
    }

    #[test]
    fn alpha_sums_to_one_every_step() {
        let mut rng = SplitMix64::new(43);
        let p = AdditiveAttnParams::init(8, &mut rng);
        let mut tape = Tape::new();
        let h = tape.leaf(rand_mat(1, 8, &mut rng));
        let f = tape.leaf(rand_mat(5, 8, &mut rng));
        let pb = p.map(&mut |t| tape.param(t));
        let (_, alpha) = additive_attend(&mut tape, h, f, &pb).unwrap();
        let sum: f64 = tape.value(alpha).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn visual_attention_zero_inputs_finite_and_deterministic() {
        let mut rng = SplitMix64::new(44);
        let mut p = DecoderParams::init(DecoderVariant::VisualAttention, 6, 4, &mut rng);
        p.embedding.data_mut().fill(0.0);
        let run = || {
            let mut tape = Tape::new();
            let feats = original_feats(
                &mut tape,
                Tensor::matrix(3, 4, vec![0.0; 12]).unwrap(),
                Tensor::matrix(3, 4, vec![0.0; 12]).unwrap(),
            );
            let pb = p.bind_frozen(&mut tape);
            let mut state = DecoderState::new(&mut tape, &pb, 4);
            let logits = step_visual_attention(&mut tape, &pb, &feats, &mut state, BOS).unwrap();
            tape.value(logits).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.data(), b.data());
        a.validate_finite("logits").unwrap();
        assert_eq!(a.shape(), &[1, 6]);
    }

    #[test]
    fn single_visual_row_context_ignores_hidden_state() {
        let mut rng = SplitMix64::new(45);
        let p = DecoderParams::init(DecoderVariant::VisualAttention, 6, 4, &mut rng);
        let row = rand_mat(1, 4, &mut rng);
        let mut tape = Tape::new();
        let feats = original_feats(&mut tape, row.clone(), rand_mat(1, 4, &mut rng));
        let pb = p.bind_frozen(&mut tape);
        let mut state = DecoderState::new(&mut tape, &pb, 4);
        step_visual_attention(&mut tape, &pb, &feats, &mut state, BOS).unwrap();
        let attn = pb.attn.as_ref().unwrap();
        let (ctx, _) = additive_attend(&mut tape, state.l1.h, feats.visual, attn).unwrap();
        for (a, b) in tape.value(ctx).data().iter().zip(row.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn condition_variants_agree_at_first_step_when_averages_match() {
        let mut rng = SplitMix64::new(46);
        let shared = rand_mat(3, 4, &mut rng);

        let h1_of = |variant: DecoderVariant| {
            let mut rng2 = SplitMix64::new(47);
            let p = DecoderParams::init(variant, 6, 4, &mut rng2);
            let mut tape = Tape::new();
            let feats = original_feats(&mut tape, shared.clone(), shared.clone());
            let pb = p.bind_frozen(&mut tape);
            let mut state = DecoderState::new(&mut tape, &pb, 4);
            decoder_step(&mut tape, &pb, &feats, &mut state, BOS).unwrap();
            tape.value(state.l1.h).clone()
        };
        let vc = h1_of(DecoderVariant::VisualCondition);
        let cc = h1_of(DecoderVariant::ConceptCondition);
        assert_eq!(vc.data(), cc.data());
    }

    #[test]
    fn zero_averages_reduce_to_language_model_step() {
        let mut rng = SplitMix64::new(48);
        let p = DecoderParams::init(DecoderVariant::VisualCondition, 6, 4, &mut rng);
        let mut tape = Tape::new();
        let feats = original_feats(
            &mut tape,
            Tensor::matrix(2, 4, vec![0.0; 8]).unwrap(),
            Tensor::matrix(2, 4, vec![0.0; 8]).unwrap(),
        );
        let pb = p.bind_frozen(&mut tape);
        let mut state = DecoderState::new(&mut tape, &pb, 4);
        // Past the priming step so the input is w_e + 0.
        state.step = 1;
        let before = state.l1;
        let logits = step_visual_condition(&mut tape, &pb, &feats, &mut state, 4).unwrap();

        let w_e = tape.embedding_lookup(pb.embedding, 4).unwrap();
        let manual = lstm_step(&mut tape, &pb.lstm, before, w_e).unwrap();
        let manual_logits = tape.matmul(manual.h, pb.w_p).unwrap();
        assert_eq!(tape.value(logits).data(), tape.value(manual_logits).data());
    }

    #[test]
    fn regional_zero_inputs_give_finite_logits() {
        let mut rng = SplitMix64::new(49);
        let mut p = DecoderParams::init(DecoderVariant::VisualRegionalAttention, 6, 4, &mut rng);
        p.embedding.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let feats = original_feats(
            &mut tape,
            Tensor::matrix(3, 4, vec![0.0; 12]).unwrap(),
            Tensor::matrix(3, 4, vec![0.0; 12]).unwrap(),
        );
        let pb = p.bind_frozen(&mut tape);
        let mut state = DecoderState::new(&mut tape, &pb, 4);
        let logits = step_visual_regional(&mut tape, &pb, &feats, &mut state, BOS).unwrap();
        tape.value(logits).validate_finite("logits").unwrap();
    }

    #[test]
    fn regional_single_region_context_is_that_region() {
        let mut rng = SplitMix64::new(50);
        let p = DecoderParams::init(DecoderVariant::VisualRegionalAttention, 6, 4, &mut rng);
        let row = rand_mat(1, 4, &mut rng);
        let mut tape = Tape::new();
        let feats = original_feats(&mut tape, row.clone(), rand_mat(1, 4, &mut rng));
        let pb = p.bind_frozen(&mut tape);
        let mut state = DecoderState::new(&mut tape, &pb, 4);
        for tok in [BOS, 4, 5] {
            step_visual_regional(&mut tape, &pb, &feats, &mut state, tok).unwrap();
            let attn = pb.attn.as_ref().unwrap();
            let (ctx, _) = additive_attend(&mut tape, state.l1.h, feats.visual, attn).unwrap();
            for (a, b) in tape.value(ctx).data().iter().zip(row.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn variant_mismatch_is_contract_error() {
        let mut rng = SplitMix64::new(51);
        let p = DecoderParams::init(DecoderVariant::VisualCondition, 6, 4, &mut rng);
        let mut tape = Tape::new();
        let feats = original_feats(&mut tape, rand_mat(2, 4, &mut rng), rand_mat(2, 4, &mut rng));
        let pb = p.bind_frozen(&mut tape);
        let mut state = DecoderState::new(&mut tape, &pb, 4);
        let err = step_visual_attention(&mut tape, &pb, &feats, &mut state, BOS).unwrap_err();
        assert!(matches!(err, DecoderError::VariantMismatch { .. }));
    }

    #[test]
    fn integrate_original_is_identity() {
        let mut rng = SplitMix64::new(52);
        let vis = rand_mat(3, 4, &mut rng);
        let txt = rand_mat(3, 4, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(vis.clone());
        let t = tape.leaf(txt.clone());
        let feats = integrate_mia(&mut tape, v, t, None, FeatureSource::Original).unwrap();
        assert_eq!(tape.value(feats.visual).data(), vis.data());
        assert_eq!(tape.value(feats.textual).data(), txt.data());
    }

    #[test]
    fn integrate_mia_modes_require_outputs() {
        let mut rng = SplitMix64::new(53);
        let mut tape = Tape::new();
        let v = tape.leaf(rand_mat(3, 4, &mut rng));
        let t = tape.leaf(rand_mat(3, 4, &mut rng));
        for source in [FeatureSource::MiaFused, FeatureSource::MiaVisual, FeatureSource::MiaTextual]
        {
            let err = integrate_mia(&mut tape, v, t, None, source).unwrap_err();
            assert!(matches!(err, DecoderError::MissingMiaOutput(_)));
        }
    }

    #[test]
    fn integrate_fused_replaces_both_roles() {
        use crate::mia::{mia_refine, MiaConfig, MiaParams};
        let mut rng = SplitMix64::new(54);
        let mut cfg = MiaConfig::new(8);
        cfg.k = 2;
        cfg.d_ff = 16;
        let mp = MiaParams::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(rand_mat(5, 8, &mut rng));
        let t = tape.leaf(rand_mat(5, 8, &mut rng));
        let mb = mp.bind(&mut tape);
        let out = mia_refine(&mut tape, v, t, &mb, &cfg, Mode::Eval, &mut rng).unwrap();
        let feats = integrate_mia(&mut tape, v, t, Some(&out), FeatureSource::MiaFused).unwrap();
        assert_eq!(feats.visual, out.fused);
        assert_eq!(feats.textual, out.fused);
        assert_eq!(tape.value(feats.visual).shape(), &[5, 8]);

        // Single-modality visual replacement keeps the textual side original.
        let feats_v = integrate_mia(&mut tape, v, t, Some(&out), FeatureSource::MiaVisual).unwrap();
        assert_eq!(feats_v.visual, out.i_n);
        assert_eq!(feats_v.textual, t);
    }

    #[test]
    fn greedy_decode_eos_first_gives_empty_caption() {
        let mut rng = SplitMix64::new(55);
        let mut p = DecoderParams::init(DecoderVariant::VisualCondition, 6, 4, &mut rng);
        // Saturate the gates so every h entry is positive, then point the
        // output projection at EOS.
        p.lstm.visit_mut("", &mut |name, t| {
            let v = if name.ends_with(".b_i") || name.ends_with(".b_g") || name.ends_with(".b_o") {
                10.0
            } else {
                0.0
            };
            t.data_mut().fill(v);
        });
        {
            let (d, v) = p.w_p.dims2().unwrap();
            let data = p.w_p.data_mut();
            for r in 0..d {
                for c in 0..v {
                    data[r * v + c] = if c == EOS as usize { 100.0 } else { -100.0 };
                }
            }
        }
        let mut tape = Tape::new();
        let feats = original_feats(&mut tape, rand_mat(2, 4, &mut rng), rand_mat(2, 4, &mut rng));
        let pb = p.bind_frozen(&mut tape);
        let caption = greedy_decode(&mut tape, &pb, &feats, 4, 10).unwrap();
        assert!(caption.is_empty());
    }

    #[test]
    fn greedy_decode_respects_max_len() {
        let mut rng = SplitMix64::new(56);
        let p = DecoderParams::init(DecoderVariant::ConceptCondition, 8, 4, &mut rng);
        let mut tape = Tape::new();
        let feats = original_feats(&mut tape, rand_mat(2, 4, &mut rng), rand_mat(2, 4, &mut rng));
        let pb = p.bind_frozen(&mut tape);
        let caption = greedy_decode(&mut tape, &pb, &feats, 4, 1).unwrap();
        assert!(caption.len() <= 1);
    }

    #[test]
    fn all_variants_produce_finite_vocab_width_logits() {
        let mut rng = SplitMix64::new(57);
        for variant in DecoderVariant::ALL {
            let p = DecoderParams::init(variant, 9, 8, &mut rng);
            let mut tape = Tape::new();
            let feats =
                original_feats(&mut tape, rand_mat(4, 8, &mut rng), rand_mat(4, 8, &mut rng));
            let pb = p.bind_frozen(&mut tape);
            let mut state = DecoderState::new(&mut tape, &pb, 8);
            for tok in [BOS, 5, 6] {
                let logits = decoder_step(&mut tape, &pb, &feats, &mut state, tok).unwrap();
                assert_eq!(tape.value(logits).shape(), &[1, 9]);
                tape.value(logits).validate_finite("logits").unwrap();
            }
        }
    }
}
