//! A small trainable transducer: encoder (recurrent or windowed-attention,
//! streaming or non-streaming), prediction network, and joint, with manual
//! backpropagation and an Adam update.
//!
//! The encoder runs at the input frame rate and is decimated afterwards:
//! post-stack frames with global index = factor-1 (mod factor) are kept,
//! and a final partial block is flushed as one extra frame, so a whole
//! utterance yields ceil(T / factor) encodings. Chunked encoding carries
//! recurrent state or trailing attention context and reproduces the
//! whole-utterance outputs exactly at any split point.

use crate::linalg::{matvec_add, matvec_t_add, outer_add};
use crate::nn::{
    attention_backward, attention_forward, linear, linear_backward, rnn_cell, rnn_cell_backward,
    Adam, AttnCache, AttnGrads, AttnParams, Init, ParamLayout,
};
use crate::textio::RichVocab;
use crate::trellis::{
    fixed_alignment_loss_and_grad, marginal_loss_and_grad, AlignmentPath, LogitLattice,
};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("encoder state mismatch: {0}")]
    State(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("vocab error: {0}")]
    Vocab(String),
    #[error("training diverged at batch item {item}: loss {loss}")]
    Diverged { item: usize, loss: f64 },
    #[error("model file error: {0}")]
    Load(String),
    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Trellis(#[from] crate::trellis::TrellisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncKind {
    RecurrentUni,
    RecurrentBi,
    WindowedAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Streaming,
    NonStreaming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Marginal,
    FixedAlignment,
}

/// Everything that determines the parameter count and wiring.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub enc_kind: EncKind,
    pub enc_layers: usize,
    pub enc_dim: usize,
    /// Attention span W (windowed-attention only): streaming sees
    /// [t-W+1, t], non-streaming [t-W+1, t+W-1].
    pub attention_window: usize,
    pub subsample_factor: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    /// Token list in index order, blank last.
    pub vocab: Vec<String>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0
            || self.enc_dim == 0
            || self.pred_dim == 0
            || self.joint_dim == 0
            || self.enc_layers == 0
        {
            return Err(ModelError::Config("all dimensions must be >= 1".into()));
        }
        if self.subsample_factor == 0 {
            return Err(ModelError::Config("subsample_factor must be >= 1".into()));
        }
        if self.enc_kind == EncKind::WindowedAttention && self.attention_window == 0 {
            return Err(ModelError::Config("attention_window must be >= 1".into()));
        }
        if self.vocab.len() < 2 {
            return Err(ModelError::Config("vocab must have >= 2 tokens".into()));
        }
        if self.vocab.last().map(String::as_str) != Some(crate::textio::BLANK_TOKEN) {
            return Err(ModelError::Config("vocab must end with the blank token".into()));
        }
        Ok(())
    }

    /// Vocabulary size including blank.
    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn blank_id(&self) -> usize {
        self.vocab.len() - 1
    }

    pub fn rich_vocab(&self) -> Result<RichVocab, ModelError> {
        RichVocab::from_tokens(self.vocab.clone()).map_err(|e| ModelError::Vocab(e.to_string()))
    }
}

/// Indexes into the parameter layout, resolved once per model.
#[derive(Debug, Clone)]
struct SegIds {
    in_w: usize,
    in_b: usize,
    enc: Vec<EncSegIds>,
    pred_emb: usize,
    pred_wx: usize,
    pred_wh: usize,
    pred_b: usize,
    joint_we: usize,
    joint_wp: usize,
    joint_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
enum EncSegIds {
    Uni {
        wx: usize,
        wh: usize,
        b: usize,
    },
    Bi {
        fwx: usize,
        fwh: usize,
        fb: usize,
        bwx: usize,
        bwh: usize,
        bb: usize,
        pw: usize,
        pb: usize,
    },
    Attn {
        wq: usize,
        wk: usize,
        wv: usize,
        wo: usize,
        bo: usize,
        pos: usize,
    },
}

fn build_layout(cfg: &ModelConfig) -> (ParamLayout, SegIds) {
    let mut l = ParamLayout::new();
    let d = cfg.enc_dim;
    let in_w = l.push("in.w", d, cfg.input_dim, Init::Glorot);
    let in_b = l.push_vec("in.b", d);
    let mut enc = Vec::with_capacity(cfg.enc_layers);
    for i in 0..cfg.enc_layers {
        match cfg.enc_kind {
            EncKind::RecurrentUni => enc.push(EncSegIds::Uni {
                wx: l.push(format!("enc{i}.wx"), d, d, Init::Glorot),
                wh: l.push(format!("enc{i}.wh"), d, d, Init::Glorot),
                b: l.push_vec(format!("enc{i}.b"), d),
            }),
            EncKind::RecurrentBi => enc.push(EncSegIds::Bi {
                fwx: l.push(format!("enc{i}.fwd.wx"), d, d, Init::Glorot),
                fwh: l.push(format!("enc{i}.fwd.wh"), d, d, Init::Glorot),
                fb: l.push_vec(format!("enc{i}.fwd.b"), d),
                bwx: l.push(format!("enc{i}.bwd.wx"), d, d, Init::Glorot),
                bwh: l.push(format!("enc{i}.bwd.wh"), d, d, Init::Glorot),
                bb: l.push_vec(format!("enc{i}.bwd.b"), d),
                pw: l.push(format!("enc{i}.proj.w"), d, 2 * d, Init::Glorot),
                pb: l.push_vec(format!("enc{i}.proj.b"), d),
            }),
            EncKind::WindowedAttention => enc.push(EncSegIds::Attn {
                wq: l.push(format!("enc{i}.wq"), d, d, Init::Glorot),
                wk: l.push(format!("enc{i}.wk"), d, d, Init::Glorot),
                wv: l.push(format!("enc{i}.wv"), d, d, Init::Glorot),
                wo: l.push(format!("enc{i}.wo"), d, d, Init::Glorot),
                bo: l.push_vec(format!("enc{i}.bo"), d),
                pos: l.push_vec(format!("enc{i}.pos"), 2 * cfg.attention_window - 1),
            }),
        }
    }
    let v = cfg.vocab_len();
    let pred_emb = l.push("pred.emb", v, cfg.pred_dim, Init::Glorot);
    let pred_wx = l.push("pred.wx", cfg.pred_dim, cfg.pred_dim, Init::Glorot);
    let pred_wh = l.push("pred.wh", cfg.pred_dim, cfg.pred_dim, Init::Glorot);
    let pred_b = l.push_vec("pred.b", cfg.pred_dim);
    let joint_we = l.push("joint.we", cfg.joint_dim, d, Init::Glorot);
    let joint_wp = l.push("joint.wp", cfg.joint_dim, cfg.pred_dim, Init::Glorot);
    let joint_b = l.push_vec("joint.b", cfg.joint_dim);
    let out_w = l.push("out.w", v, cfg.joint_dim, Init::Glorot);
    let out_b = l.push_vec("out.b", v);
    (
        l,
        SegIds {
            in_w,
            in_b,
            enc,
            pred_emb,
            pred_wx,
            pred_wh,
            pred_b,
            joint_we,
            joint_wp,
            joint_b,
            out_w,
            out_b,
        },
    )
}

/// Carry-over for exact chunked encoding: recurrent hidden vectors or
/// trailing attention context per layer, plus the subsampling phase and
/// the last post-stack frame awaiting a flush.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderState {
    /// Per-layer hidden vector (recurrent-uni).
    uni_h: Vec<Vec<f64>>,
    /// Per-layer trailing inputs, newest last, at most W-1 frames
    /// (windowed-attention).
    attn_tail: Vec<Vec<Vec<f64>>>,
    /// Raw frames consumed so far.
    frames_seen: usize,
    /// Most recent post-stack frame (flush candidate).
    pending: Option<Vec<f64>>,
}

impl EncoderState {
    pub fn initial(cfg: &ModelConfig) -> Self {
        let layers = cfg.enc_layers;
        Self {
            uni_h: match cfg.enc_kind {
                EncKind::RecurrentUni => vec![vec![0.0; cfg.enc_dim]; layers],
                _ => Vec::new(),
            },
            attn_tail: match cfg.enc_kind {
                EncKind::WindowedAttention => vec![Vec::new(); layers],
                _ => Vec::new(),
            },
            frames_seen: 0,
            pending: None,
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let ok = match cfg.enc_kind {
            EncKind::RecurrentUni => {
                self.uni_h.len() == cfg.enc_layers
                    && self.uni_h.iter().all(|h| h.len() == cfg.enc_dim)
            }
            EncKind::WindowedAttention => {
                self.attn_tail.len() == cfg.enc_layers
                    && self
                        .attn_tail
                        .iter()
                        .flatten()
                        .all(|f| f.len() == cfg.enc_dim)
            }
            EncKind::RecurrentBi => false,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::State(format!(
                "state does not fit a {:?} encoder with {} layers of width {}",
                cfg.enc_kind, cfg.enc_layers, cfg.enc_dim
            )))
        }
    }
}

/// Per-layer forward records kept for backpropagation.
enum LayerCache {
    Uni { h: Vec<f64> },
    Bi { hf: Vec<f64>, hb: Vec<f64>, out: Vec<f64> },
    Attn(AttnCache),
}

struct EncCache {
    /// Post-tanh input projection, T x enc_dim.
    x0: Vec<f64>,
    layers: Vec<LayerCache>,
    /// Raw indices kept by decimation (including the flushed tail).
    kept: Vec<usize>,
    t_len: usize,
}

impl EncCache {
    fn output(&self, d: usize) -> Vec<Vec<f64>> {
        let full = self.full_output();
        self.kept
            .iter()
            .map(|&t| full[t * d..(t + 1) * d].to_vec())
            .collect()
    }

    fn full_output(&self) -> &[f64] {
        match self.layers.last().expect("at least one layer") {
            LayerCache::Uni { h } => h,
            LayerCache::Bi { out, .. } => out,
            LayerCache::Attn(c) => &c.out,
        }
    }

    fn layer_input<'a>(&'a self, layer: usize) -> &'a [f64] {
        if layer == 0 {
            return &self.x0;
        }
        match &self.layers[layer - 1] {
            LayerCache::Uni { h } => h,
            LayerCache::Bi { out, .. } => out,
            LayerCache::Attn(c) => &c.out,
        }
    }
}

/// Raw indices kept when decimating `t_len` frames by `factor`: every
/// frame ending a full block, plus a flushed final partial block.
fn decimate_indices(t_len: usize, factor: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = (0..t_len).filter(|t| t % factor == factor - 1).collect();
    if t_len > 0 && t_len % factor != 0 {
        kept.push(t_len - 1);
    }
    kept
}

/// A trained or initialized transducer: config, layout, and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    ids: SegIds,
}

/// Deterministic scaled-uniform initialization from the config seed.
pub fn init_model(config: ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let (layout, ids) = build_layout(&config);
    let params = layout.init(config.seed);
    Ok(Model {
        config,
        layout,
        params,
        ids,
    })
}

impl Model {
    fn seg(&self, idx: usize) -> &[f64] {
        self.layout.slice(&self.params, idx)
    }

    fn attn_window(&self, mode: Mode) -> (usize, usize) {
        let w = self.config.attention_window;
        match mode {
            Mode::Streaming => (w - 1, 0),
            Mode::NonStreaming => (w - 1, w - 1),
        }
    }

    /// tanh input projection for a run of frames, flattened T x enc_dim.
    fn project_input(&self, frames: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        let d = self.config.enc_dim;
        let w = self.seg(self.ids.in_w);
        let b = self.seg(self.ids.in_b);
        let mut out = vec![0.0; frames.len() * d];
        for (t, f) in frames.iter().enumerate() {
            if f.len() != self.config.input_dim {
                return Err(ModelError::Config(format!(
                    "frame {t} has {} features, expected {}",
                    f.len(),
                    self.config.input_dim
                )));
            }
            let row = &mut out[t * d..(t + 1) * d];
            linear(row, w, Some(b), f);
            for v in row.iter_mut() {
                *v = v.tanh();
            }
        }
        Ok(out)
    }

    /// Full-utterance stack forward with caches (training and
    /// non-streaming inference).
    fn forward_train(&self, frames: &[Vec<f64>], mode: Mode) -> Result<EncCache, ModelError> {
        if self.config.enc_kind == EncKind::RecurrentBi && mode == Mode::Streaming {
            return Err(ModelError::Mode(
                "recurrent-bi encoder cannot run in streaming mode".into(),
            ));
        }
        let d = self.config.enc_dim;
        let t_len = frames.len();
        let x0 = self.project_input(frames)?;
        let mut layers = Vec::with_capacity(self.config.enc_layers);
        let mut input = x0.clone();
        for seg in &self.ids.enc {
            let cache = match seg {
                EncSegIds::Uni { wx, wh, b } => {
                    let (wx, wh, b) = (self.seg(*wx), self.seg(*wh), self.seg(*b));
                    let mut h = vec![0.0; t_len * d];
                    let mut prev = vec![0.0; d];
                    for t in 0..t_len {
                        let mut ht = vec![0.0; d];
                        rnn_cell(&mut ht, wx, wh, b, &input[t * d..(t + 1) * d], &prev);
                        h[t * d..(t + 1) * d].copy_from_slice(&ht);
                        prev = ht;
                    }
                    LayerCache::Uni { h }
                }
                EncSegIds::Bi {
                    fwx,
                    fwh,
                    fb,
                    bwx,
                    bwh,
                    bb,
                    pw,
                    pb,
                } => {
                    let mut hf = vec![0.0; t_len * d];
                    let mut prev = vec![0.0; d];
                    for t in 0..t_len {
                        let mut ht = vec![0.0; d];
                        rnn_cell(
                            &mut ht,
                            self.seg(*fwx),
                            self.seg(*fwh),
                            self.seg(*fb),
                            &input[t * d..(t + 1) * d],
                            &prev,
                        );
                        hf[t * d..(t + 1) * d].copy_from_slice(&ht);
                        prev = ht;
                    }
                    let mut hb = vec![0.0; t_len * d];
                    let mut next = vec![0.0; d];
                    for t in (0..t_len).rev() {
                        let mut ht = vec![0.0; d];
                        rnn_cell(
                            &mut ht,
                            self.seg(*bwx),
                            self.seg(*bwh),
                            self.seg(*bb),
                            &input[t * d..(t + 1) * d],
                            &next,
                        );
                        hb[t * d..(t + 1) * d].copy_from_slice(&ht);
                        next = ht;
                    }
                    let mut out = vec![0.0; t_len * d];
                    let mut cat = vec![0.0; 2 * d];
                    for t in 0..t_len {
                        cat[..d].copy_from_slice(&hf[t * d..(t + 1) * d]);
                        cat[d..].copy_from_slice(&hb[t * d..(t + 1) * d]);
                        let row = &mut out[t * d..(t + 1) * d];
                        linear(row, self.seg(*pw), Some(self.seg(*pb)), &cat);
                        for v in row.iter_mut() {
                            *v = v.tanh();
                        }
                    }
                    LayerCache::Bi { hf, hb, out }
                }
                EncSegIds::Attn {
                    wq,
                    wk,
                    wv,
                    wo,
                    bo,
                    pos,
                } => {
                    let (left, right) = self.attn_window(mode);
                    let p = AttnParams {
                        wq: self.seg(*wq),
                        wk: self.seg(*wk),
                        wv: self.seg(*wv),
                        wo: self.seg(*wo),
                        bo: self.seg(*bo),
                        pos: self.seg(*pos),
                        dim: d,
                        left,
                        right,
                    };
                    LayerCache::Attn(attention_forward(&p, &input, t_len))
                }
            };
            input = match &cache {
                LayerCache::Uni { h } => h.clone(),
                LayerCache::Bi { out, .. } => out.clone(),
                LayerCache::Attn(c) => c.out.clone(),
            };
            layers.push(cache);
        }
        Ok(EncCache {
            x0,
            layers,
            kept: decimate_indices(t_len, self.config.subsample_factor),
            t_len,
        })
    }

    /// Encode a whole utterance; output length is ceil(T / factor).
    /// Returns the final state, usable for continuation in streaming mode.
    pub fn encode_full(
        &self,
        frames: &[Vec<f64>],
        mode: Mode,
    ) -> Result<(Vec<Vec<f64>>, EncoderState), ModelError> {
        match mode {
            Mode::Streaming => {
                let state = EncoderState::initial(&self.config);
                let (mut outs, mut state) = self.encode_chunk(frames, &state)?;
                if let Some(tail) = self.encode_finish(&mut state) {
                    outs.push(tail);
                }
                Ok((outs, state))
            }
            Mode::NonStreaming => {
                let cache = self.forward_train(frames, mode)?;
                let outs = cache.output(self.config.enc_dim);
                let mut state = EncoderState::initial(&self.config);
                state.frames_seen = frames.len();
                Ok((outs, state))
            }
        }
    }

    /// Continue a streaming encode over the next run of frames. Emits only
    /// complete subsampling blocks; `encode_finish` flushes the remainder.
    pub fn encode_chunk(
        &self,
        frames: &[Vec<f64>],
        state: &EncoderState,
    ) -> Result<(Vec<Vec<f64>>, EncoderState), ModelError> {
        if self.config.enc_kind == EncKind::RecurrentBi {
            return Err(ModelError::Mode(
                "recurrent-bi encoder cannot run in streaming mode".into(),
            ));
        }
        state.check(&self.config)?;
        let d = self.config.enc_dim;
        let mut st = state.clone();
        let t_new = frames.len();
        if t_new == 0 {
            return Ok((Vec::new(), st));
        }
        let mut input = self.project_input(frames)?;
        for (li, seg) in self.ids.enc.iter().enumerate() {
            match seg {
                EncSegIds::Uni { wx, wh, b } => {
                    let (wx, wh, b) = (self.seg(*wx), self.seg(*wh), self.seg(*b));
                    let mut prev = st.uni_h[li].clone();
                    let mut out = vec![0.0; t_new * d];
                    for t in 0..t_new {
                        let mut ht = vec![0.0; d];
                        rnn_cell(&mut ht, wx, wh, b, &input[t * d..(t + 1) * d], &prev);
                        out[t * d..(t + 1) * d].copy_from_slice(&ht);
                        prev = ht;
                    }
                    st.uni_h[li] = prev;
                    input = out;
                }
                EncSegIds::Attn {
                    wq,
                    wk,
                    wv,
                    wo,
                    bo,
                    pos,
                } => {
                    let w = self.config.attention_window;
                    let tail = &st.attn_tail[li];
                    let ctx = tail.len();
                    let mut xs = vec![0.0; (ctx + t_new) * d];
                    for (i, f) in tail.iter().enumerate() {
                        xs[i * d..(i + 1) * d].copy_from_slice(f);
                    }
                    xs[ctx * d..].copy_from_slice(&input);
                    let p = AttnParams {
                        wq: self.seg(*wq),
                        wk: self.seg(*wk),
                        wv: self.seg(*wv),
                        wo: self.seg(*wo),
                        bo: self.seg(*bo),
                        pos: self.seg(*pos),
                        dim: d,
                        left: w - 1,
                        right: 0,
                    };
                    let cache = attention_forward(&p, &xs, ctx + t_new);
                    let keep = (w - 1).min(ctx + t_new);
                    st.attn_tail[li] = (ctx + t_new - keep..ctx + t_new)
                        .map(|i| xs[i * d..(i + 1) * d].to_vec())
                        .collect();
                    input = cache.out[ctx * d..].to_vec();
                }
                EncSegIds::Bi { .. } => unreachable!("checked above"),
            }
        }
        // decimate by global index
        let s = self.config.subsample_factor;
        let mut outs = Vec::new();
        for t in 0..t_new {
            let g = st.frames_seen + t;
            if g % s == s - 1 {
                outs.push(input[t * d..(t + 1) * d].to_vec());
            }
        }
        st.pending = Some(input[(t_new - 1) * d..].to_vec());
        st.frames_seen += t_new;
        Ok((outs, st))
    }

    /// Flush the partial subsampling block at end of stream, if any.
    pub fn encode_finish(&self, state: &mut EncoderState) -> Option<Vec<f64>> {
        let s = self.config.subsample_factor;
        if state.frames_seen % s != 0 {
            state.pending.take()
        } else {
            None
        }
    }

    /// Prediction-network state after the start-of-sequence blank.
    pub fn pred_init(&self) -> Vec<f64> {
        self.pred_step(&vec![0.0; self.config.pred_dim], self.config.blank_id())
    }

    /// Advance the prediction network by one emitted symbol.
    pub fn pred_step(&self, h: &[f64], symbol: usize) -> Vec<f64> {
        let pd = self.config.pred_dim;
        let emb = self.seg(self.ids.pred_emb);
        let e = &emb[symbol * pd..(symbol + 1) * pd];
        let mut out = vec![0.0; pd];
        rnn_cell(
            &mut out,
            self.seg(self.ids.pred_wx),
            self.seg(self.ids.pred_wh),
            self.seg(self.ids.pred_b),
            e,
            h,
        );
        out
    }

    /// Prediction states p_0..p_U: p_0 conditions on nothing (blank SOS),
    /// p_u on the first u target symbols.
    pub fn pred_states(&self, target: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        for &y in target {
            if y >= self.config.vocab_len() {
                return Err(ModelError::Vocab(format!("symbol id {y} out of vocab")));
            }
        }
        let mut states = Vec::with_capacity(target.len() + 1);
        states.push(self.pred_init());
        for &y in target {
            let next = self.pred_step(states.last().unwrap(), y);
            states.push(next);
        }
        Ok(states)
    }

    /// Joint logits for one (encoder frame, prediction state) node.
    pub fn joint_logits(&self, enc: &[f64], pred: &[f64]) -> Vec<f64> {
        let dj = self.config.joint_dim;
        let mut pre = vec![0.0; dj];
        linear(&mut pre, self.seg(self.ids.joint_we), Some(self.seg(self.ids.joint_b)), enc);
        matvec_add(&mut pre, self.seg(self.ids.joint_wp), pred);
        for v in pre.iter_mut() {
            *v = v.tanh();
        }
        let mut logits = vec![0.0; self.config.vocab_len()];
        linear(
            &mut logits,
            self.seg(self.ids.out_w),
            Some(self.seg(self.ids.out_b)),
            &pre,
        );
        logits
    }

    /// Score the whole trellis: logits for every (t, u, symbol).
    pub fn joint_lattice(
        &self,
        encodings: &[Vec<f64>],
        target: &[usize],
    ) -> Result<LogitLattice, ModelError> {
        let preds = self.pred_states(target)?;
        let (tn, un, vl) = (encodings.len(), target.len() + 1, self.config.vocab_len());
        let dj = self.config.joint_dim;
        // precompute per-frame and per-prefix projections
        let we = self.seg(self.ids.joint_we);
        let wp = self.seg(self.ids.joint_wp);
        let bj = self.seg(self.ids.joint_b);
        let mut a = vec![0.0; tn * dj];
        for (t, e) in encodings.iter().enumerate() {
            matvec_add(&mut a[t * dj..(t + 1) * dj], we, e);
        }
        let mut c = vec![0.0; un * dj];
        for (u, p) in preds.iter().enumerate() {
            let row = &mut c[u * dj..(u + 1) * dj];
            row.copy_from_slice(bj);
            matvec_add(row, wp, p);
        }
        let out_w = self.seg(self.ids.out_w);
        let out_b = self.seg(self.ids.out_b);
        let mut logits = vec![0.0; tn * un * vl];
        let mut z = vec![0.0; dj];
        for t in 0..tn {
            for u in 0..un {
                for j in 0..dj {
                    z[j] = (a[t * dj + j] + c[u * dj + j]).tanh();
                }
                let row = &mut logits[(t * un + u) * vl..(t * un + u + 1) * vl];
                linear(row, out_w, Some(out_b), &z);
            }
        }
        LogitLattice::new(tn, target.to_vec(), vl - 1, logits).map_err(ModelError::from)
    }
}

/// One training example: raw frames, target symbol ids, and (for the
/// fixed-alignment objective) an alignment over the decimated frame axis.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub frames: Vec<Vec<f64>>,
    pub target: Vec<usize>,
    pub path: Option<AlignmentPath>,
}

impl Model {
    /// Loss of one example plus parameter gradient, accumulated into
    /// `grad` (same layout as params). Returns the loss.
    pub fn example_loss_grad(
        &self,
        ex: &TrainExample,
        objective: Objective,
        mode: Mode,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        let d = self.config.enc_dim;
        let dj = self.config.joint_dim;
        let pd = self.config.pred_dim;
        let vl = self.config.vocab_len();
        let cache = self.forward_train(&ex.frames, mode)?;
        let encodings = cache.output(d);
        let preds = self.pred_states(&ex.target)?;
        let lattice = self.joint_lattice(&encodings, &ex.target)?;
        let loss_res = match objective {
            Objective::Marginal => marginal_loss_and_grad(&lattice)?,
            Objective::FixedAlignment => {
                let path = ex.path.as_ref().ok_or_else(|| {
                    ModelError::Config("fixed-alignment objective requires a path".into())
                })?;
                fixed_alignment_loss_and_grad(&lattice, path)?
            }
        };

        let (tn, un) = (encodings.len(), ex.target.len() + 1);
        // recompute the joint projections (cheap) for the backward pass
        let we = self.seg(self.ids.joint_we);
        let wp = self.seg(self.ids.joint_wp);
        let bj = self.seg(self.ids.joint_b);
        let out_w = self.seg(self.ids.out_w);
        let mut a = vec![0.0; tn * dj];
        for (t, e) in encodings.iter().enumerate() {
            matvec_add(&mut a[t * dj..(t + 1) * dj], we, e);
        }
        let mut c = vec![0.0; un * dj];
        for (u, p) in preds.iter().enumerate() {
            let row = &mut c[u * dj..(u + 1) * dj];
            row.copy_from_slice(bj);
            matvec_add(row, wp, p);
        }

        let mut da = vec![0.0; tn * dj];
        let mut dc = vec![0.0; un * dj];
        {
            let [g_out_w, g_out_b] = self
                .layout
                .disjoint_mut(grad, [self.ids.out_w, self.ids.out_b]);
            let mut z = vec![0.0; dj];
            let mut dz = vec![0.0; dj];
            for t in 0..tn {
                for u in 0..un {
                    let row = &loss_res.grad[(t * un + u) * vl..(t * un + u + 1) * vl];
                    if row.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    for j in 0..dj {
                        z[j] = (a[t * dj + j] + c[u * dj + j]).tanh();
                    }
                    outer_add(g_out_w, row, &z);
                    for (gb, g) in g_out_b.iter_mut().zip(row) {
                        *gb += g;
                    }
                    dz.iter_mut().for_each(|v| *v = 0.0);
                    matvec_t_add(&mut dz, out_w, row);
                    for j in 0..dj {
                        let g = dz[j] * (1.0 - z[j] * z[j]);
                        da[t * dj + j] += g;
                        dc[u * dj + j] += g;
                    }
                }
            }
        }
        // joint projections -> encoder and prediction grads
        let mut d_enc = vec![0.0; tn * d];
        let mut d_pred = vec![0.0; un * pd];
        {
            let [g_we, g_wp, g_bj] = self.layout.disjoint_mut(
                grad,
                [self.ids.joint_we, self.ids.joint_wp, self.ids.joint_b],
            );
            for t in 0..tn {
                let dat = &da[t * dj..(t + 1) * dj];
                outer_add(g_we, dat, &encodings[t]);
                matvec_t_add(&mut d_enc[t * d..(t + 1) * d], we, dat);
            }
            for u in 0..un {
                let dcu = &dc[u * dj..(u + 1) * dj];
                outer_add(g_wp, dcu, &preds[u]);
                for (gb, g) in g_bj.iter_mut().zip(dcu) {
                    *gb += g;
                }
                matvec_t_add(&mut d_pred[u * pd..(u + 1) * pd], wp, dcu);
            }
        }

        // prediction network BPTT (h_0 from blank SOS, h_u from target[u-1])
        {
            let emb = self.seg(self.ids.pred_emb);
            let wx = self.seg(self.ids.pred_wx);
            let wh = self.seg(self.ids.pred_wh);
            let [g_emb, g_wx, g_wh, g_b] = self.layout.disjoint_mut(
                grad,
                [
                    self.ids.pred_emb,
                    self.ids.pred_wx,
                    self.ids.pred_wh,
                    self.ids.pred_b,
                ],
            );
            let zero = vec![0.0; pd];
            let mut dh = vec![0.0; pd];
            for u in (0..un).rev() {
                for (acc, g) in dh.iter_mut().zip(&d_pred[u * pd..(u + 1) * pd]) {
                    *acc += g;
                }
                let sym = if u == 0 {
                    self.config.blank_id()
                } else {
                    ex.target[u - 1]
                };
                let x = &emb[sym * pd..(sym + 1) * pd];
                let h_prev = if u == 0 { &zero } else { &preds[u - 1] };
                let mut dx = vec![0.0; pd];
                let mut dh_prev = vec![0.0; pd];
                rnn_cell_backward(
                    &dh,
                    &preds[u],
                    wx,
                    wh,
                    x,
                    h_prev,
                    g_wx,
                    g_wh,
                    g_b,
                    Some(&mut dx),
                    &mut dh_prev,
                );
                for (ge, g) in g_emb[sym * pd..(sym + 1) * pd].iter_mut().zip(&dx) {
                    *ge += g;
                }
                dh = dh_prev;
            }
        }

        // spread decimated grads back over the full frame axis
        let mut d_full = vec![0.0; cache.t_len * d];
        for (i, &t) in cache.kept.iter().enumerate() {
            for (dst, src) in d_full[t * d..(t + 1) * d]
                .iter_mut()
                .zip(&d_enc[i * d..(i + 1) * d])
            {
                *dst += src;
            }
        }

        // encoder stack backward
        let t_len = cache.t_len;
        let mut d_out = d_full;
        for (li, seg) in self.ids.enc.iter().enumerate().rev() {
            let input = cache.layer_input(li);
            let mut d_in = vec![0.0; t_len * d];
            match (seg, &cache.layers[li]) {
                (EncSegIds::Uni { wx, wh, b }, LayerCache::Uni { h }) => {
                    let (wxs, whs) = (self.seg(*wx), self.seg(*wh));
                    let [gwx, gwh, gb] = self.layout.disjoint_mut(grad, [*wx, *wh, *b]);
                    let zero = vec![0.0; d];
                    let mut dh = vec![0.0; d];
                    for t in (0..t_len).rev() {
                        for (acc, g) in dh.iter_mut().zip(&d_out[t * d..(t + 1) * d]) {
                            *acc += g;
                        }
                        let h_prev = if t == 0 { &zero[..] } else { &h[(t - 1) * d..t * d] };
                        let mut dh_prev = vec![0.0; d];
                        rnn_cell_backward(
                            &dh,
                            &h[t * d..(t + 1) * d],
                            wxs,
                            whs,
                            &input[t * d..(t + 1) * d],
                            h_prev,
                            gwx,
                            gwh,
                            gb,
                            Some(&mut d_in[t * d..(t + 1) * d]),
                            &mut dh_prev,
                        );
                        dh = dh_prev;
                    }
                }
                (
                    EncSegIds::Bi {
                        fwx,
                        fwh,
                        fb,
                        bwx,
                        bwh,
                        bb,
                        pw,
                        pb,
                    },
                    LayerCache::Bi { hf, hb, out },
                ) => {
                    let mut dhf = vec![0.0; t_len * d];
                    let mut dhb = vec![0.0; t_len * d];
                    {
                        let pws = self.seg(*pw);
                        let [g_pw, g_pb] = self.layout.disjoint_mut(grad, [*pw, *pb]);
                        let mut cat = vec![0.0; 2 * d];
                        for t in 0..t_len {
                            let o = &out[t * d..(t + 1) * d];
                            let dpre: Vec<f64> = d_out[t * d..(t + 1) * d]
                                .iter()
                                .zip(o)
                                .map(|(g, ov)| g * (1.0 - ov * ov))
                                .collect();
                            cat[..d].copy_from_slice(&hf[t * d..(t + 1) * d]);
                            cat[d..].copy_from_slice(&hb[t * d..(t + 1) * d]);
                            let mut dcat = vec![0.0; 2 * d];
                            linear_backward(
                                &dpre,
                                pws,
                                &cat,
                                g_pw,
                                Some(&mut *g_pb),
                                Some(&mut dcat),
                            );
                            for j in 0..d {
                                dhf[t * d + j] += dcat[j];
                                dhb[t * d + j] += dcat[d + j];
                            }
                        }
                    }
                    // forward chain
                    {
                        let (wxs, whs) = (self.seg(*fwx), self.seg(*fwh));
                        let [gwx, gwh, gb] =
                            self.layout.disjoint_mut(grad, [*fwx, *fwh, *fb]);
                        let zero = vec![0.0; d];
                        let mut dh = vec![0.0; d];
                        for t in (0..t_len).rev() {
                            for (acc, g) in dh.iter_mut().zip(&dhf[t * d..(t + 1) * d]) {
                                *acc += g;
                            }
                            let h_prev =
                                if t == 0 { &zero[..] } else { &hf[(t - 1) * d..t * d] };
                            let mut dh_prev = vec![0.0; d];
                            rnn_cell_backward(
                                &dh,
                                &hf[t * d..(t + 1) * d],
                                wxs,
                                whs,
                                &input[t * d..(t + 1) * d],
                                h_prev,
                                gwx,
                                gwh,
                                gb,
                                Some(&mut d_in[t * d..(t + 1) * d]),
                                &mut dh_prev,
                            );
                            dh = dh_prev;
                        }
                    }
                    // backward chain (recurrence runs right-to-left)
                    {
                        let (wxs, whs) = (self.seg(*bwx), self.seg(*bwh));
                        let [gwx, gwh, gb] =
                            self.layout.disjoint_mut(grad, [*bwx, *bwh, *bb]);
                        let zero = vec![0.0; d];
                        let mut dh = vec![0.0; d];
                        for t in 0..t_len {
                            for (acc, g) in dh.iter_mut().zip(&dhb[t * d..(t + 1) * d]) {
                                *acc += g;
                            }
                            let h_prev = if t + 1 == t_len {
                                &zero[..]
                            } else {
                                &hb[(t + 1) * d..(t + 2) * d]
                            };
                            let mut dh_prev = vec![0.0; d];
                            rnn_cell_backward(
                                &dh,
                                &hb[t * d..(t + 1) * d],
                                wxs,
                                whs,
                                &input[t * d..(t + 1) * d],
                                h_prev,
                                gwx,
                                gwh,
                                gb,
                                Some(&mut d_in[t * d..(t + 1) * d]),
                                &mut dh_prev,
                            );
                            dh = dh_prev;
                        }
                    }
                }
                (
                    EncSegIds::Attn {
                        wq,
                        wk,
                        wv,
                        wo,
                        bo,
                        pos,
                    },
                    LayerCache::Attn(ac),
                ) => {
                    let (left, right) = self.attn_window(mode);
                    let p = AttnParams {
                        wq: self.seg(*wq),
                        wk: self.seg(*wk),
                        wv: self.seg(*wv),
                        wo: self.seg(*wo),
                        bo: self.seg(*bo),
                        pos: self.seg(*pos),
                        dim: d,
                        left,
                        right,
                    };
                    let [gwq, gwk, gwv, gwo, gbo, gpos] = self
                        .layout
                        .disjoint_mut(grad, [*wq, *wk, *wv, *wo, *bo, *pos]);
                    let mut g = AttnGrads {
                        wq: gwq,
                        wk: gwk,
                        wv: gwv,
                        wo: gwo,
                        bo: gbo,
                        pos: gpos,
                    };
                    d_in = attention_backward(&p, input, ac, &d_out, &mut g);
                }
                _ => unreachable!("cache kind matches layer kind"),
            }
            d_out = d_in;
        }

        // input projection backward
        {
            let w = self.seg(self.ids.in_w);
            let [g_in_w, g_in_b] = self
                .layout
                .disjoint_mut(grad, [self.ids.in_w, self.ids.in_b]);
            for (t, f) in ex.frames.iter().enumerate() {
                let x0 = &cache.x0[t * d..(t + 1) * d];
                let dpre: Vec<f64> = d_out[t * d..(t + 1) * d]
                    .iter()
                    .zip(x0)
                    .map(|(g, v)| g * (1.0 - v * v))
                    .collect();
                linear_backward(&dpre, w, f, g_in_w, Some(&mut *g_in_b), None);
            }
        }
        Ok(loss_res.loss)
    }

    /// One optimizer step over a batch; returns the mean loss.
    pub fn train_step(
        &mut self,
        batch: &[TrainExample],
        objective: Objective,
        mode: Mode,
        opt: &mut Adam,
    ) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            let loss = self.example_loss_grad(ex, objective, mode, &mut grad)?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { item: i, loss });
            }
            total += loss;
        }
        let scale = 1.0 / batch.len() as f64;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        opt.step(&mut self.params, &mut grad);
        Ok(total * scale)
    }
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    config: ModelConfig,
}

/// Write the model as a one-line JSON header (format, version, config with
/// vocab) followed by the parameters as little-endian f64 bytes.
pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelError> {
    let header = ModelHeader {
        format: "rnnt-model".into(),
        version: MODEL_FORMAT_VERSION,
        config: model.config.clone(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for v in &model.params {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::Load("missing header line".into()))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| ModelError::Load(format!("bad header: {e}")))?;
    if header.format != "rnnt-model" {
        return Err(ModelError::Load(format!("unknown format {}", header.format)));
    }
    if header.version != MODEL_FORMAT_VERSION {
        return Err(ModelError::Version {
            found: header.version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    header.config.validate()?;
    let (layout, ids) = build_layout(&header.config);
    let body = &bytes[nl + 1..];
    if body.len() != layout.total() * 8 {
        return Err(ModelError::Load(format!(
            "parameter payload is {} bytes, expected {} (truncated or corrupt)",
            body.len(),
            layout.total() * 8
        )));
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !params.iter().all(|v| v.is_finite()) {
        return Err(ModelError::Load("non-finite parameter".into()));
    }
    Ok(Model {
        config: header.config,
        layout,
        params,
        ids,
    })
}
