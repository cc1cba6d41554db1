//! Mutual iterative attention.
//!
//! One round integrates visual features with textual concepts as queries,
//! then integrates textual concepts with the refined visual features as
//! queries. The round is applied N times with a single shared parameter set;
//! each iteration closes with a per-branch anchor shortcut from the layer
//! input, which keeps repeated integration from smearing every row into the
//! same global summary. The two final stacks are fused by
//! layer_norm(I_N + T_N) so tasks that consume a single feature matrix can
//! use the aligned pair directly.

use crate::attention::{
    fcn, multi_head, sublayer_post, FcnParams, LayerNormParams, MultiHeadParams, SublayerConfig,
};
use crate::rng::SplitMix64;
use crate::tensor::{Mode, Tape, Tensor, TensorError, TensorId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MiaError {
    #[error("alignment error: visual features have {visual_rows} rows, textual concepts {textual_rows}")]
    Alignment { visual_rows: usize, textual_rows: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which modality guides the first integration of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidingOrder {
    /// Textual concepts query the visual features first (default).
    ConceptsFirst,
    /// Visual features query the textual concepts first.
    VisualFirst,
}

/// Cross-modal attention, or the self-attention ablation where each branch
/// queries its own features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Mutual,
    SelfAblation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiaConfig {
    pub d_h: usize,
    /// Head count; must divide d_h.
    pub k: usize,
    /// Iteration count N.
    pub n_iters: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub guiding_order: GuidingOrder,
    pub attention_mode: AttentionMode,
    /// Layer-input shortcut after each iteration.
    pub anchor: bool,
    pub ln_eps: f64,
    /// Keep per-head attention matrices in traces.
    #[serde(default)]
    pub trace_heads: bool,
}

impl MiaConfig {
    /// Defaults: 8 heads, 2 iterations, d_ff = 4·d_h, dropout 0.1.
    pub fn new(d_h: usize) -> Self {
        Self {
            d_h,
            k: 8,
            n_iters: 2,
            d_ff: 4 * d_h,
            dropout_p: 0.1,
            guiding_order: GuidingOrder::ConceptsFirst,
            attention_mode: AttentionMode::Mutual,
            anchor: true,
            ln_eps: 1e-5,
            trace_heads: false,
        }
    }

    pub fn validate(&self) -> Result<(), MiaError> {
        if self.k == 0 || self.d_h % self.k != 0 {
            return Err(MiaError::Config(format!(
                "head count {} must divide feature width {}",
                self.k, self.d_h
            )));
        }
        if self.n_iters == 0 {
            return Err(MiaError::Config("iteration count must be at least 1".into()));
        }
        if self.d_ff == 0 {
            return Err(MiaError::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(MiaError::Config(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    fn sublayer(&self, mode: Mode) -> SublayerConfig {
        SublayerConfig { dropout_p: self.dropout_p, mode, ln_eps: self.ln_eps }
    }
}

/// Attention + feed-forward stack of one modality branch, with the layer
/// norms of both sublayers.
#[derive(Debug, Clone)]
pub struct BranchParams<T> {
    pub mh: MultiHeadParams<T>,
    pub attn_ln: LayerNormParams<T>,
    pub fcn: FcnParams<T>,
    pub fcn_ln: LayerNormParams<T>,
}

/// The complete shared parameter set. Iteration count never changes it: the
/// same tensors are reused every round.
#[derive(Debug, Clone)]
pub struct MiaParams<T> {
    pub visual: BranchParams<T>,
    pub textual: BranchParams<T>,
    /// Anchor layer norms are distinct from the sublayer layer norms; the
    /// two shortcut levels carry separately learned scales.
    pub anchor_visual_ln: LayerNormParams<T>,
    pub anchor_textual_ln: LayerNormParams<T>,
    pub fuse_ln: LayerNormParams<T>,
}

impl<T> BranchParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BranchParams<U> {
        BranchParams {
            mh: self.mh.map(f),
            attn_ln: self.attn_ln.map(f),
            fcn: self.fcn.map(f),
            fcn_ln: self.fcn_ln.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.mh.visit(&format!("{prefix}.mh"), f);
        self.attn_ln.visit(&format!("{prefix}.attn_ln"), f);
        self.fcn.visit(&format!("{prefix}.fcn"), f);
        self.fcn_ln.visit(&format!("{prefix}.fcn_ln"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        self.mh.visit_mut(&format!("{prefix}.mh"), f);
        self.attn_ln.visit_mut(&format!("{prefix}.attn_ln"), f);
        self.fcn.visit_mut(&format!("{prefix}.fcn"), f);
        self.fcn_ln.visit_mut(&format!("{prefix}.fcn_ln"), f);
    }
}

impl<T> MiaParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MiaParams<U> {
        MiaParams {
            visual: self.visual.map(f),
            textual: self.textual.map(f),
            anchor_visual_ln: self.anchor_visual_ln.map(f),
            anchor_textual_ln: self.anchor_textual_ln.map(f),
            fuse_ln: self.fuse_ln.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.visual.visit(&format!("{prefix}.visual"), f);
        self.textual.visit(&format!("{prefix}.textual"), f);
        self.anchor_visual_ln.visit(&format!("{prefix}.anchor_visual_ln"), f);
        self.anchor_textual_ln.visit(&format!("{prefix}.anchor_textual_ln"), f);
        self.fuse_ln.visit(&format!("{prefix}.fuse_ln"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        self.visual.visit_mut(&format!("{prefix}.visual"), f);
        self.textual.visit_mut(&format!("{prefix}.textual"), f);
        self.anchor_visual_ln.visit_mut(&format!("{prefix}.anchor_visual_ln"), f);
        self.anchor_textual_ln.visit_mut(&format!("{prefix}.anchor_textual_ln"), f);
        self.fuse_ln.visit_mut(&format!("{prefix}.fuse_ln"), f);
    }
}

impl BranchParams<Tensor> {
    fn init(cfg: &MiaConfig, rng: &mut SplitMix64) -> Result<Self, MiaError> {
        Ok(Self {
            mh: MultiHeadParams::init(cfg.d_h, cfg.k, rng)?,
            attn_ln: LayerNormParams::init(cfg.d_h),
            fcn: FcnParams::init(cfg.d_h, cfg.d_ff, rng),
            fcn_ln: LayerNormParams::init(cfg.d_h),
        })
    }
}

impl MiaParams<Tensor> {
    pub fn init(cfg: &MiaConfig, rng: &mut SplitMix64) -> Result<Self, MiaError> {
        cfg.validate()?;
        Ok(Self {
            visual: BranchParams::init(cfg, rng)?,
            textual: BranchParams::init(cfg, rng)?,
            anchor_visual_ln: LayerNormParams::init(cfg.d_h),
            anchor_textual_ln: LayerNormParams::init(cfg.d_h),
            fuse_ln: LayerNormParams::init(cfg.d_h),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> MiaParams<TensorId> {
        self.map(&mut |t| tape.param(t))
    }

    /// Total scalar parameter count; a function of (d_h, k, d_ff) only.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit("mia", &mut |_, t| count += t.numel());
        count
    }
}

/// Attention matrices of one iteration, head-averaged; per-head matrices are
/// kept when the config asks for them.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    /// Queries from the textual side onto visual sources (n×n).
    pub visual: Tensor,
    /// Queries from the (refined) visual side onto textual sources (n×n).
    pub textual: Tensor,
    pub visual_heads: Option<Vec<Tensor>>,
    pub textual_heads: Option<Vec<Tensor>>,
}

/// Per-iteration attention matrices for visualization.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub rounds: Vec<RoundTrace>,
}

impl AttentionTrace {
    /// Composes per-iteration maps back onto the original feature indices:
    /// acc_t = A_t · acc_{t-1}, with acc_0 = identity. Products of
    /// row-stochastic matrices stay row-stochastic, so the accumulated maps
    /// remain attention distributions over the original rows.
    pub fn accumulated(&self) -> (Vec<Tensor>, Vec<Tensor>) {
        let visual = accumulate(self.rounds.iter().map(|r| &r.visual));
        let textual = accumulate(self.rounds.iter().map(|r| &r.textual));
        (visual, textual)
    }
}

fn accumulate<'a>(rounds: impl Iterator<Item = &'a Tensor>) -> Vec<Tensor> {
    let mut acc: Option<Tensor> = None;
    let mut out = Vec::new();
    for a in rounds {
        let (m, n) = a.dims2().expect("trace matrices are rank 2");
        let next = match &acc {
            None => a.clone(),
            Some(prev) => {
                let p = prev.dims2().unwrap().1;
                let data = crate::tensor::kernels::matmul_seq(a.data(), prev.data(), m, n, p);
                Tensor::matrix(m, p, data).unwrap()
            }
        };
        out.push(next.clone());
        acc = Some(next);
    }
    out
}

fn head_average(tape: &Tape, heads: &[TensorId]) -> Tensor {
    let (m, n) = tape.value(heads[0]).dims2().expect("weights are matrices");
    let mut data = vec![0.0; m * n];
    for &h in heads {
        for (d, v) in data.iter_mut().zip(tape.value(h).data()) {
            *d += v;
        }
    }
    let k = heads.len() as f64;
    for d in &mut data {
        *d /= k;
    }
    Tensor::matrix(m, n, data).unwrap()
}

/// Attention sublayer then feed-forward sublayer of one branch, each closed
/// by the source-side post-op sequence.
fn branch(
    tape: &mut Tape,
    params: &BranchParams<TensorId>,
    query: TensorId,
    source: TensorId,
    cfg: &SublayerConfig,
    rng: &mut SplitMix64,
) -> Result<(TensorId, Vec<TensorId>), TensorError> {
    let (attn_out, weights) = multi_head(tape, query, source, &params.mh)?;
    let x = sublayer_post(tape, attn_out, source, &params.attn_ln, cfg, rng)?;
    let ff = fcn(tape, x, &params.fcn)?;
    // The feed-forward sublayer's source features are its own input.
    let out = sublayer_post(tape, ff, x, &params.fcn_ln, cfg, rng)?;
    Ok((out, weights))
}

/// One mutual-attention round. Output row counts equal the input row counts,
/// and the head-averaged attention matrices of both branches are returned.
pub fn mutual_round(
    tape: &mut Tape,
    i_prev: TensorId,
    t_prev: TensorId,
    p: &MiaParams<TensorId>,
    cfg: &MiaConfig,
    mode: Mode,
    rng: &mut SplitMix64,
) -> Result<(TensorId, TensorId, RoundTrace), MiaError> {
    let vis_rows = tape.value(i_prev).dims2().map(|d| d.0);
    let txt_rows = tape.value(t_prev).dims2().map(|d| d.0);
    match (vis_rows, txt_rows) {
        (Some(v), Some(t)) if v == t => {}
        _ => {
            return Err(MiaError::Alignment {
                visual_rows: vis_rows.unwrap_or(0),
                textual_rows: txt_rows.unwrap_or(0),
            })
        }
    }

    let sub_cfg = cfg.sublayer(mode);
    let self_attn = cfg.attention_mode == AttentionMode::SelfAblation;

    let (i_t, t_t, vis_w, txt_w) = match cfg.guiding_order {
        GuidingOrder::ConceptsFirst => {
            let vis_query = if self_attn { i_prev } else { t_prev };
            let (i_t, vis_w) = branch(tape, &p.visual, vis_query, i_prev, &sub_cfg, rng)?;
            let txt_query = if self_attn { t_prev } else { i_t };
            let (t_t, txt_w) = branch(tape, &p.textual, txt_query, t_prev, &sub_cfg, rng)?;
            (i_t, t_t, vis_w, txt_w)
        }
        GuidingOrder::VisualFirst => {
            let txt_query = if self_attn { t_prev } else { i_prev };
            let (t_t, txt_w) = branch(tape, &p.textual, txt_query, t_prev, &sub_cfg, rng)?;
            let vis_query = if self_attn { i_prev } else { t_t };
            let (i_t, vis_w) = branch(tape, &p.visual, vis_query, i_prev, &sub_cfg, rng)?;
            (i_t, t_t, vis_w, txt_w)
        }
    };

    let trace = RoundTrace {
        visual: head_average(tape, &vis_w),
        textual: head_average(tape, &txt_w),
        visual_heads: cfg
            .trace_heads
            .then(|| vis_w.iter().map(|&w| tape.value(w).clone()).collect()),
        textual_heads: cfg
            .trace_heads
            .then(|| txt_w.iter().map(|&w| tape.value(w).clone()).collect()),
    };
    Ok((i_t, t_t, trace))
}

/// Outputs of the full stack: both refined modalities and their fusion, all
/// n×d_h so they can replace the original features positionally.
pub struct MiaOutput {
    pub i_n: TensorId,
    pub t_n: TensorId,
    pub fused: TensorId,
    pub trace: AttentionTrace,
}

/// N rounds with the shared parameter set, per-iteration anchors when
/// enabled, and the fused layer_norm(I_N + T_N) output.
pub fn mia_refine(
    tape: &mut Tape,
    i0: TensorId,
    t0: TensorId,
    p: &MiaParams<TensorId>,
    cfg: &MiaConfig,
    mode: Mode,
    rng: &mut SplitMix64,
) -> Result<MiaOutput, MiaError> {
    cfg.validate()?;
    let sub_cfg = cfg.sublayer(mode);
    let mut trace = AttentionTrace::default();
    let (mut i_cur, mut t_cur) = (i0, t0);
    for _ in 0..cfg.n_iters {
        let (i_raw, t_raw, round) = mutual_round(tape, i_cur, t_cur, p, cfg, mode, rng)?;
        trace.rounds.push(round);
        if cfg.anchor {
            // Shortcut from the layer input, not the sublayer input.
            i_cur = sublayer_post(tape, i_raw, i_cur, &p.anchor_visual_ln, &sub_cfg, rng)?;
            t_cur = sublayer_post(tape, t_raw, t_cur, &p.anchor_textual_ln, &sub_cfg, rng)?;
        } else {
            i_cur = i_raw;
            t_cur = t_raw;
        }
    }
    let sum = tape.add(i_cur, t_cur)?;
    let fused = tape.layer_norm_rows(sum, p.fuse_ln.gain, p.fuse_ln.bias, cfg.ln_eps)?;
    Ok(MiaOutput { i_n: i_cur, t_n: t_cur, fused, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(r: usize, c: usize, rng: &mut SplitMix64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn small_cfg() -> MiaConfig {
        let mut cfg = MiaConfig::new(8);
        cfg.k = 2;
        cfg.d_ff = 16;
        cfg
    }

    #[test]
    fn config_defaults_match_reported_settings() {
        let cfg = MiaConfig::new(16);
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.n_iters, 2);
        assert_eq!(cfg.d_ff, 64);
    }

    #[test]
    fn config_rejects_bad_head_count() {
        let mut cfg = MiaConfig::new(8);
        cfg.k = 3;
        assert!(cfg.validate().is_err());
        cfg.k = 2;
        cfg.n_iters = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_source_round_gives_unit_traces() {
        let mut rng = SplitMix64::new(20);
        let cfg = small_cfg();
        let p = MiaParams::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let i0 = tape.leaf(rand_mat(1, 8, &mut rng));
        let t0 = tape.leaf(rand_mat(1, 8, &mut rng));
        let pb = p.bind(&mut tape);
        let (i1, _, trace) =
            mutual_round(&mut tape, i0, t0, &pb, &cfg, Mode::Eval, &mut rng).unwrap();
        assert_eq!(trace.visual.data(), &[1.0]);
        assert_eq!(trace.textual.data(), &[1.0]);
        assert_eq!(tape.value(i1).shape(), &[1, 8]);
    }

    #[test]
    fn zero_projection_round_is_double_layer_norm() {
        let mut rng = SplitMix64::new(21);
        let cfg = small_cfg();
        let mut p = MiaParams::init(&cfg, &mut rng).unwrap();
        // Zero every attention projection and the whole feed-forward nets.
        for branch in [&mut p.visual, &mut p.textual] {
            branch.mh.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
            branch.fcn.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        }
        let i0_val = rand_mat(3, 8, &mut rng);
        let mut tape = Tape::new();
        let i0 = tape.leaf(i0_val.clone());
        let t0 = tape.leaf(rand_mat(3, 8, &mut rng));
        let pb = p.bind(&mut tape);
        let (i1, _, _) = mutual_round(&mut tape, i0, t0, &pb, &cfg, Mode::Eval, &mut rng).unwrap();

        let gain = tape.leaf(Tensor::vector(vec![1.0; 8]));
        let bias = tape.leaf(Tensor::vector(vec![0.0; 8]));
        let ln1 = tape.layer_norm_rows(i0, gain, bias, cfg.ln_eps).unwrap();
        let ln2 = tape.layer_norm_rows(ln1, gain, bias, cfg.ln_eps).unwrap();
        assert_eq!(tape.value(i1).shape(), &[3, 8]);
        for (a, b) in tape.value(i1).data().iter().zip(tape.value(ln2).data()) {
            assert!((a - b).abs() < 1e-12);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn row_count_mismatch_is_alignment_error() {
        let mut rng = SplitMix64::new(22);
        let cfg = small_cfg();
        let p = MiaParams::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let i0 = tape.leaf(rand_mat(3, 8, &mut rng));
        let t0 = tape.leaf(rand_mat(4, 8, &mut rng));
        let pb = p.bind(&mut tape);
        let err = mutual_round(&mut tape, i0, t0, &pb, &cfg, Mode::Eval, &mut rng).unwrap_err();
        assert!(matches!(err, MiaError::Alignment { visual_rows: 3, textual_rows: 4 }));
    }

    #[test]
    fn parameter_count_independent_of_iterations() {
        let mut counts = Vec::new();
        for n in 1..=5 {
            let mut rng = SplitMix64::new(23);
            let mut cfg = small_cfg();
            cfg.n_iters = n;
            counts.push(MiaParams::init(&cfg, &mut rng).unwrap().param_count());
        }
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    #[test]
    fn refine_with_one_iteration_is_round_plus_anchor_plus_fusion() {
        let mut rng_init = SplitMix64::new(24);
        let cfg = {
            let mut c = small_cfg();
            c.n_iters = 1;
            c
        };
        let p = MiaParams::init(&cfg, &mut rng_init).unwrap();
        let i0_val = rand_mat(4, 8, &mut rng_init);
        let t0_val = rand_mat(4, 8, &mut rng_init);

        let mut rng = SplitMix64::new(99);
        let mut tape = Tape::new();
        let i0 = tape.leaf(i0_val.clone());
        let t0 = tape.leaf(t0_val.clone());
        let pb = p.bind(&mut tape);
        let out = mia_refine(&mut tape, i0, t0, &pb, &cfg, Mode::Eval, &mut rng).unwrap();

        let mut rng2 = SplitMix64::new(99);
        let mut tape2 = Tape::new();
        let i0b = tape2.leaf(i0_val);
        let t0b = tape2.leaf(t0_val);
        let pb2 = p.bind(&mut tape2);
        let (i_raw, t_raw, _) =
            mutual_round(&mut tape2, i0b, t0b, &pb2, &cfg, Mode::Eval, &mut rng2).unwrap();
        let sub = cfg.sublayer(Mode::Eval);
        let i1 =
            sublayer_post(&mut tape2, i_raw, i0b, &pb2.anchor_visual_ln, &sub, &mut rng2).unwrap();
        let t1 =
            sublayer_post(&mut tape2, t_raw, t0b, &pb2.anchor_textual_ln, &sub, &mut rng2).unwrap();
        let s = tape2.add(i1, t1).unwrap();
        let fused =
            tape2.layer_norm_rows(s, pb2.fuse_ln.gain, pb2.fuse_ln.bias, cfg.ln_eps).unwrap();

        assert_eq!(tape.value(out.fused).data(), tape2.value(fused).data());
        assert_eq!(tape.value(out.i_n).data(), tape2.value(i1).data());
        assert_eq!(tape.value(out.t_n).data(), tape2.value(t1).data());
    }

    #[test]
    fn shapes_preserved_across_sizes() {
        for n in [1usize, 4, 36, 49] {
            let mut rng = SplitMix64::new(25);
            let cfg = small_cfg();
            let p = MiaParams::init(&cfg, &mut rng).unwrap();
            let mut tape = Tape::new();
            let i0 = tape.leaf(rand_mat(n, 8, &mut rng));
            let t0 = tape.leaf(rand_mat(n, 8, &mut rng));
            let pb = p.bind(&mut tape);
            let out = mia_refine(&mut tape, i0, t0, &pb, &cfg, Mode::Eval, &mut rng).unwrap();
            for id in [out.i_n, out.t_n, out.fused] {
                assert_eq!(tape.value(id).shape(), &[n, 8]);
            }
        }
    }

    #[test]
    fn trace_rows_are_stochastic() {
        let mut rng = SplitMix64::new(26);
        let cfg = {
            let mut c = small_cfg();
            c.n_iters = 3;
            c
        };
        let p = MiaParams::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let i0 = tape.leaf(rand_mat(5, 8, &mut rng));
        let t0 = tape.leaf(rand_mat(5, 8, &mut rng));
        let pb = p.bind(&mut tape);
        let out = mia_refine(&mut tape, i0, t0, &pb, &cfg, Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.trace.rounds.len(), 3);
        let (acc_v, acc_t) = out.trace.accumulated();
        for m in out
            .trace
            .rounds
            .iter()
            .flat_map(|r| [&r.visual, &r.textual])
            .chain(acc_v.iter())
            .chain(acc_t.iter())
        {
            let (rows, _) = m.dims2().unwrap();
            for r in 0..rows {
                let sum: f64 = m.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            }
        }
    }

    #[test]
    fn accumulated_trace_of_identities_is_identity() {
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let trace = AttentionTrace {
            rounds: (0..2)
                .map(|_| RoundTrace {
                    visual: eye.clone(),
                    textual: eye.clone(),
                    visual_heads: None,
                    textual_heads: None,
                })
                .collect(),
        };
        let (acc_v, _) = trace.accumulated();
        assert_eq!(acc_v[1].data(), eye.data());
    }

    #[test]
    fn accumulated_trace_is_matrix_product() {
        let a = Tensor::matrix(3, 3, vec![0.5, 0.25, 0.25, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4]).unwrap();
        let b = Tensor::matrix(3, 3, vec![0.2, 0.5, 0.3, 0.6, 0.2, 0.2, 0.1, 0.1, 0.8]).unwrap();
        let trace = AttentionTrace {
            rounds: vec![
                RoundTrace {
                    visual: a.clone(),
                    textual: a.clone(),
                    visual_heads: None,
                    textual_heads: None,
                },
                RoundTrace {
                    visual: b.clone(),
                    textual: b.clone(),
                    visual_heads: None,
                    textual_heads: None,
                },
            ],
        };
        let (acc, _) = trace.accumulated();
        assert_eq!(acc[0].data(), a.data());
        // acc_2 = B·A, and its rows stay stochastic.
        let expected = crate::tensor::kernels::matmul_seq(b.data(), a.data(), 3, 3, 3);
        for (x, y) in acc[1].data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-15);
        }
        for r in 0..3 {
            let sum: f64 = acc[1].row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_permutation_equivariance() {
        let mut rng = SplitMix64::new(27);
        let cfg = small_cfg();
        let p = MiaParams::init(&cfg, &mut rng).unwrap();
        let i0 = rand_mat(5, 8, &mut rng);
        let t0 = rand_mat(5, 8, &mut rng);
        let perm = [3usize, 1, 4, 0, 2];

        let permute = |t: &Tensor| {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(5, 8, data).unwrap()
        };

        let run = |iv: Tensor, tv: Tensor| {
            let mut rng2 = SplitMix64::new(0);
            let mut tape = Tape::new();
            let i = tape.leaf(iv);
            let t = tape.leaf(tv);
            let pb = p.bind(&mut tape);
            let out = mia_refine(&mut tape, i, t, &pb, &cfg, Mode::Eval, &mut rng2).unwrap();
            (
                tape.value(out.i_n).clone(),
                tape.value(out.t_n).clone(),
                tape.value(out.fused).clone(),
            )
        };

        let (i_n, t_n, fused) = run(i0.clone(), t0.clone());
        let (i_p, t_p, fused_p) = run(permute(&i0), permute(&t0));
        for (base, perm_out) in [(&i_n, &i_p), (&t_n, &t_p), (&fused, &fused_p)] {
            for (r, &src) in perm.iter().enumerate() {
                for (a, b) in perm_out.row(r).iter().zip(base.row(src)) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn train_mode_is_deterministic_under_fixed_seed() {
        let mut rng_init = SplitMix64::new(28);
        let cfg = {
            let mut c = small_cfg();
            c.dropout_p = 0.3;
            c
        };
        let p = MiaParams::init(&cfg, &mut rng_init).unwrap();
        let i0 = rand_mat(4, 8, &mut rng_init);
        let t0 = rand_mat(4, 8, &mut rng_init);

        let run = || {
            let mut rng = SplitMix64::new(1234);
            let mut tape = Tape::new();
            let i = tape.leaf(i0.clone());
            let t = tape.leaf(t0.clone());
            let pb = p.bind(&mut tape);
            let out = mia_refine(&mut tape, i, t, &pb, &cfg, Mode::Train, &mut rng).unwrap();
            tape.value(out.fused).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn every_parameter_reaches_the_fused_loss() {
        let mut rng = SplitMix64::new(29);
        let cfg = small_cfg();
        let p = MiaParams::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let i0 = tape.leaf(rand_mat(4, 8, &mut rng));
        let t0 = tape.leaf(rand_mat(4, 8, &mut rng));
        let pb = p.bind(&mut tape);
        let mut rng2 = SplitMix64::new(0);
        let out = mia_refine(&mut tape, i0, t0, &pb, &cfg, Mode::Eval, &mut rng2).unwrap();
        let sq = tape.mul(out.fused, out.fused).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        pb.visit("mia", &mut |name, id| {
            let g = tape.grad(*id).unwrap();
            assert!(g.iter().any(|&v| v.abs() > 0.0), "parameter {name} received no gradient");
        });
    }

    #[test]
    fn self_ablation_ignores_the_other_modality_for_weights() {
        // With self-attention, the visual trace must not change when the
        // textual inputs change (queries come from the visual side itself).
        let mut rng = SplitMix64::new(30);
        let mut cfg = small_cfg();
        cfg.attention_mode = AttentionMode::SelfAblation;
        let p = MiaParams::init(&cfg, &mut rng).unwrap();
        let i0 = rand_mat(4, 8, &mut rng);
        let t_a = rand_mat(4, 8, &mut rng);
        let t_b = rand_mat(4, 8, &mut rng);

        let run = |tv: &Tensor| {
            let mut rng2 = SplitMix64::new(0);
            let mut tape = Tape::new();
            let i = tape.leaf(i0.clone());
            let t = tape.leaf(tv.clone());
            let pb = p.bind(&mut tape);
            let (_, _, trace) =
                mutual_round(&mut tape, i, t, &pb, &cfg, Mode::Eval, &mut rng2).unwrap();
            trace.visual
        };
        assert_eq!(run(&t_a).data(), run(&t_b).data());
    }

    #[test]
    fn guiding_order_changes_the_result() {
        let mut rng = SplitMix64::new(31);
        let cfg = small_cfg();
        let p = MiaParams::init(&cfg, &mut rng).unwrap();
        let i0 = rand_mat(4, 8, &mut rng);
        let t0 = rand_mat(4, 8, &mut rng);

        let run = |order: GuidingOrder| {
            let mut c = cfg.clone();
            c.guiding_order = order;
            let mut rng2 = SplitMix64::new(0);
            let mut tape = Tape::new();
            let i = tape.leaf(i0.clone());
            let t = tape.leaf(t0.clone());
            let pb = p.bind(&mut tape);
            let out = mia_refine(&mut tape, i, t, &pb, &c, Mode::Eval, &mut rng2).unwrap();
            tape.value(out.fused).clone()
        };
        let a = run(GuidingOrder::ConceptsFirst);
        let b = run(GuidingOrder::VisualFirst);
        assert_ne!(a.data(), b.data());
    }
}
