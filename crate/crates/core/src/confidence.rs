//! Word confidence estimation: per-emission features (stacked encoder
//! context plus a learned symbol embedding), a small two-layer windowed
//! attention head with a sigmoid per unit, word-level aggregation, and the
//! softmax-posterior baseline with temperature scaling.

use crate::decoder::Hypothesis;
use crate::metrics::{wer, EditOp};
use crate::model::Model;
use crate::nn::{
    attention_backward, attention_forward, linear_backward, Adam, AttnCache, AttnGrads,
    AttnParams, Init, ParamLayout,
};
use crate::textio::{symbol_word_attribution, DecoratedTranscript, RichVocab};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Encoder frames stacked on each side of the emission frame.
pub const CONTEXT_RADIUS: usize = 3;
/// Label positions visible to each attention layer (window span).
pub const ATTN_SPAN: usize = 20;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("bad confidence config: {0}")]
    Config(String),
    #[error("feature extraction: {0}")]
    Feature(String),
    #[error("word grouping: {0}")]
    Grouping(String),
    #[error("bad parameter: {0}")]
    Param(String),
    #[error("training diverged (loss {loss})")]
    Diverged { loss: f64 },
    #[error("model load: {0}")]
    Load(String),
    #[error("unsupported confidence format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One scored sub-word unit: the frozen encoder context around its
/// emission frame, the emitted symbol (embedded by the head at forward
/// time, so the embedding stays trainable), the hypothesis word it spells
/// part of, and its correctness label once known.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConfidenceExample {
    /// (2·CONTEXT_RADIUS + 1) · enc_dim values, zero-padded at the edges.
    pub stacked: Vec<f64>,
    pub symbol: usize,
    pub word_index: usize,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConfidenceConfig {
    pub enc_dim: usize,
    /// Embedding rows; symbol ids index into this (model vocab size).
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    /// Left-only attention windows for streaming use; otherwise the two
    /// layers split the span 10-back/9-forward and 9-back/10-forward so
    /// the head's total reach stays strictly inside ATTN_SPAN.
    pub causal: bool,
    pub seed: u64,
}

impl ConfidenceConfig {
    fn validate(&self) -> Result<(), ConfidenceError> {
        for (n, v) in [
            ("enc_dim", self.enc_dim),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
        ] {
            if v == 0 {
                return Err(ConfidenceError::Config(format!("{n} must be positive")));
            }
        }
        Ok(())
    }

    pub fn stacked_len(&self) -> usize {
        (2 * CONTEXT_RADIUS + 1) * self.enc_dim
    }

    /// Full assembled feature length per unit.
    pub fn feature_len(&self) -> usize {
        self.stacked_len() + self.embed_dim
    }

    fn window(&self, layer: usize) -> (usize, usize) {
        if self.causal {
            (ATTN_SPAN - 1, 0)
        } else if layer == 0 {
            (ATTN_SPAN / 2, ATTN_SPAN / 2 - 1)
        } else {
            (ATTN_SPAN / 2 - 1, ATTN_SPAN / 2)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    emb: usize,
    in_w: usize,
    in_b: usize,
    attn: [[usize; 6]; 2],
    out_w: usize,
    out_b: usize,
}

pub struct ConfidenceHead {
    pub config: ConfidenceConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    ids: HeadIds,
}

pub fn init_confidence_head(config: ConfidenceConfig) -> Result<ConfidenceHead, ConfidenceError> {
    config.validate()?;
    let mut layout = ParamLayout::new();
    let d = config.attn_dim;
    let emb = layout.push("emb", config.vocab_size, config.embed_dim, Init::Glorot);
    let in_w = layout.push("in.w", d, config.feature_len(), Init::Glorot);
    let in_b = layout.push_vec("in.b", d);
    let mut attn = [[0usize; 6]; 2];
    for (i, slot) in attn.iter_mut().enumerate() {
        let (left, right) = config.window(i);
        *slot = [
            layout.push(format!("attn{i}.wq"), d, d, Init::Glorot),
            layout.push(format!("attn{i}.wk"), d, d, Init::Glorot),
            layout.push(format!("attn{i}.wv"), d, d, Init::Glorot),
            layout.push(format!("attn{i}.wo"), d, d, Init::Glorot),
            layout.push_vec(format!("attn{i}.bo"), d),
            layout.push_vec(format!("attn{i}.pos"), left + right + 1),
        ];
    }
    let out_w = layout.push("out.w", 1, d, Init::Glorot);
    let out_b = layout.push_vec("out.b", 1);
    let params = layout.init(config.seed);
    Ok(ConfidenceHead {
        config,
        layout,
        params,
        ids: HeadIds {
            emb,
            in_w,
            in_b,
            attn,
            out_w,
            out_b,
        },
    })
}

/// One example per emitted base unit (rich tokens and separators are not
/// scored). Work is linear in the number of emitted symbols: each example
/// only indexes a fixed window of encoder frames.
pub fn extract_features(
    encodings: &[Vec<f64>],
    hyp: &Hypothesis,
    vocab: &RichVocab,
) -> Result<Vec<ConfidenceExample>, ConfidenceError> {
    let attribution = symbol_word_attribution(&hyp.symbols, vocab);
    let enc_dim = encodings.first().map_or(0, |e| e.len());
    let mut out = Vec::new();
    for (i, &sym) in hyp.symbols.iter().enumerate() {
        let Some(word_index) = attribution[i] else {
            continue;
        };
        let t = *hyp.emit_times.get(i).ok_or_else(|| {
            ConfidenceError::Feature(format!("symbol {i} has no emission time"))
        })?;
        if t >= encodings.len() {
            return Err(ConfidenceError::Feature(format!(
                "emission time {t} outside {} encoder frames",
                encodings.len()
            )));
        }
        let mut stacked = vec![0.0; (2 * CONTEXT_RADIUS + 1) * enc_dim];
        for (slot, off) in (-(CONTEXT_RADIUS as isize)..=CONTEXT_RADIUS as isize).enumerate() {
            let src = t as isize + off;
            if src < 0 || src >= encodings.len() as isize {
                continue;
            }
            stacked[slot * enc_dim..(slot + 1) * enc_dim]
                .copy_from_slice(&encodings[src as usize]);
        }
        out.push(ConfidenceExample {
            stacked,
            symbol: sym,
            word_index,
            label: None,
        });
    }
    Ok(out)
}

/// Per-hypothesis-word correctness against a reference: a word is correct
/// iff the minimal word alignment pairs it with an identical reference
/// word. Case and punctuation never enter (word text carries neither).
pub fn make_word_labels(hyp: &DecoratedTranscript, reference: &DecoratedTranscript) -> Vec<bool> {
    let r: Vec<&str> = reference.words.iter().map(|w| w.text.as_str()).collect();
    let h: Vec<&str> = hyp.words.iter().map(|w| w.text.as_str()).collect();
    let res = wer(&r, &h);
    let mut correct = vec![false; hyp.words.len()];
    for op in &res.alignment.ops {
        if let EditOp::Match { hyp_idx, .. } = op {
            correct[*hyp_idx] = true;
        }
    }
    correct
}

/// Stamp word-level correctness onto each unit: all of an incorrect
/// word's units are incorrect, all of a correct word's units correct.
pub fn apply_word_labels(examples: &mut [ConfidenceExample], word_correct: &[bool]) {
    for ex in examples {
        ex.label = Some(word_correct[ex.word_index]);
    }
}

struct ForwardCache {
    feats: Vec<f64>,
    h0: Vec<f64>,
    caches: [AttnCache; 2],
    probs: Vec<f64>,
}

impl ConfidenceHead {
    fn seg(&self, id: usize) -> &[f64] {
        self.layout.slice(&self.params, id)
    }

    fn attn_params(&self, layer: usize) -> AttnParams<'_> {
        let [wq, wk, wv, wo, bo, pos] = self.ids.attn[layer];
        let (left, right) = self.config.window(layer);
        AttnParams {
            wq: self.seg(wq),
            wk: self.seg(wk),
            wv: self.seg(wv),
            wo: self.seg(wo),
            bo: self.seg(bo),
            pos: self.seg(pos),
            dim: self.config.attn_dim,
            left,
            right,
        }
    }

    /// Assembled head input for one unit: stacked context ++ symbol
    /// embedding; length = feature_len().
    pub fn assemble(&self, ex: &ConfidenceExample) -> Vec<f64> {
        let e = self.config.embed_dim;
        let mut f = Vec::with_capacity(self.config.feature_len());
        f.extend_from_slice(&ex.stacked);
        let emb = self.seg(self.ids.emb);
        f.extend_from_slice(&emb[ex.symbol * e..(ex.symbol + 1) * e]);
        f
    }

    fn forward(&self, seq: &[ConfidenceExample]) -> Result<ForwardCache, ConfidenceError> {
        let d = self.config.attn_dim;
        let df = self.config.feature_len();
        let u_len = seq.len();
        let mut feats = vec![0.0; u_len * df];
        let mut h0 = vec![0.0; u_len * d];
        let in_w = self.seg(self.ids.in_w);
        let in_b = self.seg(self.ids.in_b);
        for (u, ex) in seq.iter().enumerate() {
            if ex.stacked.len() != self.config.stacked_len() {
                return Err(ConfidenceError::Feature(format!(
                    "unit {u}: stacked length {} (head expects {})",
                    ex.stacked.len(),
                    self.config.stacked_len()
                )));
            }
            if ex.symbol >= self.config.vocab_size {
                return Err(ConfidenceError::Feature(format!(
                    "unit {u}: symbol {} outside vocab {}",
                    ex.symbol, self.config.vocab_size
                )));
            }
            let f = self.assemble(ex);
            feats[u * df..(u + 1) * df].copy_from_slice(&f);
            let h = &mut h0[u * d..(u + 1) * d];
            crate::nn::linear(h, in_w, Some(in_b), &f);
            for v in h.iter_mut() {
                *v = v.tanh();
            }
        }
        let c1 = attention_forward(&self.attn_params(0), &h0, u_len);
        let c2 = attention_forward(&self.attn_params(1), &c1.out, u_len);
        let out_w = self.seg(self.ids.out_w);
        let out_b = self.seg(self.ids.out_b)[0];
        let probs = (0..u_len)
            .map(|u| {
                let z = &c2.out[u * d..(u + 1) * d];
                let s: f64 = out_w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + out_b;
                1.0 / (1.0 + (-s).exp())
            })
            .collect();
        Ok(ForwardCache {
            feats,
            h0,
            caches: [c1, c2],
            probs,
        })
    }

    /// Per-unit confidence in (0,1) for one hypothesis' units.
    pub fn score_units(&self, seq: &[ConfidenceExample]) -> Result<Vec<f64>, ConfidenceError> {
        Ok(self.forward(seq)?.probs)
    }
}

/// One binary cross-entropy descent step over a batch of unit sequences.
/// Returns the mean per-unit loss at the point of the step.
pub fn train_confidence(
    head: &mut ConfidenceHead,
    batch: &[Vec<ConfidenceExample>],
    opt: &mut Adam,
) -> Result<f64, ConfidenceError> {
    let mut grad = vec![0.0; head.layout.total()];
    let mean = batch_gradient(head, batch, &mut grad)?;
    if !mean.is_finite() {
        return Err(ConfidenceError::Diverged { loss: mean });
    }
    opt.step(&mut head.params, &mut grad);
    Ok(mean)
}

/// Mean BCE over the batch, accumulating dLoss/dparams into `grad`.
fn batch_gradient(
    head: &ConfidenceHead,
    batch: &[Vec<ConfidenceExample>],
    grad: &mut [f64],
) -> Result<f64, ConfidenceError> {
    let total_units: usize = batch.iter().map(|s| s.len()).sum();
    if total_units == 0 {
        return Err(ConfidenceError::Feature("empty training batch".into()));
    }
    let d = head.config.attn_dim;
    let df = head.config.feature_len();
    let e = head.config.embed_dim;
    let mut loss = 0.0;
    for seq in batch {
        if seq.is_empty() {
            continue;
        }
        let u_len = seq.len();
        let cache = head.forward(seq)?;
        let out_w = head.layout.slice(&head.params, head.ids.out_w).to_vec();
        // sigmoid + BCE: ds = (p - y) / N
        let mut d_out2 = vec![0.0; u_len * d];
        {
            let ids = head.ids;
            let [g_out_w, g_out_b] =
                head.layout.disjoint_mut(grad, [ids.out_w, ids.out_b]);
            for (u, ex) in seq.iter().enumerate() {
                let y = f64::from(ex.label.ok_or_else(|| {
                    ConfidenceError::Feature(format!("unit {u} has no label"))
                })?);
                let p = cache.probs[u];
                loss -= y * p.max(1e-300).ln() + (1.0 - y) * (1.0 - p).max(1e-300).ln();
                let ds = (p - y) / total_units as f64;
                let z = &cache.caches[1].out[u * d..(u + 1) * d];
                for j in 0..d {
                    g_out_w[j] += ds * z[j];
                    d_out2[u * d + j] += ds * out_w[j];
                }
                g_out_b[0] += ds;
            }
        }
        // the two attention layers, top down
        let mut d_h0 = {
            let ids = head.ids;
            let p1 = head.attn_params(1);
            let mut d_mid = {
                let [wq, wk, wv, wo, bo, pos] =
                    head.layout.disjoint_mut(grad, ids.attn[1]);
                let mut g = AttnGrads {
                    wq,
                    wk,
                    wv,
                    wo,
                    bo,
                    pos,
                };
                attention_backward(&p1, &cache.caches[0].out, &cache.caches[1], &d_out2, &mut g)
            };
            let p0 = head.attn_params(0);
            let [wq, wk, wv, wo, bo, pos] = head.layout.disjoint_mut(grad, ids.attn[0]);
            let mut g = AttnGrads {
                wq,
                wk,
                wv,
                wo,
                bo,
                pos,
            };
            let d = attention_backward(&p0, &cache.h0, &cache.caches[0], &d_mid, &mut g);
            d_mid.clear();
            d
        };
        // input projection and embedding
        {
            let ids = head.ids;
            let in_w = head.layout.slice(&head.params, ids.in_w).to_vec();
            let [g_in_w, g_in_b, g_emb] =
                head.layout
                    .disjoint_mut(grad, [ids.in_w, ids.in_b, ids.emb]);
            let mut d_feat = vec![0.0; df];
            for (u, ex) in seq.iter().enumerate() {
                let h = &cache.h0[u * d..(u + 1) * d];
                let dpre: Vec<f64> = d_h0[u * d..(u + 1) * d]
                    .iter()
                    .zip(h)
                    .map(|(g, v)| g * (1.0 - v * v))
                    .collect();
                d_feat.iter_mut().for_each(|v| *v = 0.0);
                linear_backward(
                    &dpre,
                    &in_w,
                    &cache.feats[u * df..(u + 1) * df],
                    g_in_w,
                    Some(&mut *g_in_b),
                    Some(&mut d_feat),
                );
                let tail = &d_feat[df - e..];
                for (gv, dv) in g_emb[ex.symbol * e..(ex.symbol + 1) * e]
                    .iter_mut()
                    .zip(tail)
                {
                    *gv += dv;
                }
            }
            d_h0.clear();
        }
    }
    Ok(loss / total_units as f64)
}

/// Word confidences as the arithmetic mean of each word's unit scores.
/// Every word index in 0..max must have at least one unit.
pub fn score_words(
    head: &ConfidenceHead,
    seq: &[ConfidenceExample],
) -> Result<Vec<f64>, ConfidenceError> {
    let probs = head.score_units(seq)?;
    group_mean(seq.iter().map(|e| e.word_index).zip(probs))
}

/// Aggregate per-unit scores into per-word scores by arithmetic mean;
/// order of the unit stream is irrelevant.
pub fn aggregate_words(
    word_indices: &[usize],
    unit_scores: &[f64],
) -> Result<Vec<f64>, ConfidenceError> {
    assert_eq!(word_indices.len(), unit_scores.len());
    group_mean(word_indices.iter().copied().zip(unit_scores.iter().copied()))
}

fn group_mean(pairs: impl Iterator<Item = (usize, f64)>) -> Result<Vec<f64>, ConfidenceError> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count: Vec<usize> = Vec::new();
    for (w, p) in pairs {
        if w >= sum.len() {
            sum.resize(w + 1, 0.0);
            count.resize(w + 1, 0);
        }
        sum[w] += p;
        count[w] += 1;
    }
    sum.iter()
        .zip(&count)
        .enumerate()
        .map(|(w, (s, &c))| {
            if c == 0 {
                Err(ConfidenceError::Grouping(format!("word {w} has no units")))
            } else {
                Ok(s / c as f64)
            }
        })
        .collect()
}

/// Baseline word confidence: mean decoder posterior (probability domain)
/// over each word's units.
pub fn posterior_baseline(
    hyp: &Hypothesis,
    vocab: &RichVocab,
) -> Result<Vec<f64>, ConfidenceError> {
    let attribution = symbol_word_attribution(&hyp.symbols, vocab);
    group_mean(
        attribution
            .iter()
            .zip(&hyp.per_symbol_logprob)
            .filter_map(|(w, lp)| w.map(|w| (w, lp.exp()))),
    )
}

/// Divide logits by a positive temperature; argmax-preserving, identity
/// at one.
pub fn temperature_scale(logits: &[f64], tau: f64) -> Result<Vec<f64>, ConfidenceError> {
    if !(tau > 0.0) {
        return Err(ConfidenceError::Param(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(logits.iter().map(|&v| v / tau).collect())
}

/// Re-run the joint at each emission node, apply temperature, and return
/// the emitted symbol's softmax posterior per unit.
pub fn posterior_with_temperature(
    model: &Model,
    encodings: &[Vec<f64>],
    hyp: &Hypothesis,
    tau: f64,
) -> Result<Vec<f64>, ConfidenceError> {
    let mut out = Vec::with_capacity(hyp.symbols.len());
    let mut state = model.pred_init();
    for (i, &sym) in hyp.symbols.iter().enumerate() {
        let t = hyp.emit_times[i];
        if t >= encodings.len() {
            return Err(ConfidenceError::Feature(format!(
                "emission time {t} outside {} encoder frames",
                encodings.len()
            )));
        }
        let logits = temperature_scale(&model.joint_logits(&encodings[t], &state), tau)?;
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        out.push((logits[sym] - mx).exp() / z);
        state = model.pred_step(&state, sym);
    }
    Ok(out)
}

/// Word-level posteriors under a temperature-scaled joint.
pub fn posterior_baseline_with_temperature(
    model: &Model,
    encodings: &[Vec<f64>],
    hyp: &Hypothesis,
    vocab: &RichVocab,
    tau: f64,
) -> Result<Vec<f64>, ConfidenceError> {
    let unit = posterior_with_temperature(model, encodings, hyp, tau)?;
    let attribution = symbol_word_attribution(&hyp.symbols, vocab);
    group_mean(
        attribution
            .iter()
            .zip(&unit)
            .filter_map(|(w, p)| w.map(|w| (w, *p))),
    )
}

const HEAD_FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct HeadHeader {
    format: String,
    version: u32,
    config: ConfidenceConfig,
}

pub fn save_confidence_head(head: &ConfidenceHead, path: &Path) -> Result<(), ConfidenceError> {
    let header = HeadHeader {
        format: "rnnt-confidence".into(),
        version: HEAD_FORMAT_VERSION,
        config: head.config.clone(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for v in &head.params {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_confidence_head(path: &Path) -> Result<ConfidenceHead, ConfidenceError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ConfidenceError::Load("missing header line".into()))?;
    let header: HeadHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| ConfidenceError::Load(format!("bad header: {e}")))?;
    if header.format != "rnnt-confidence" {
        return Err(ConfidenceError::Load(format!(
            "unknown format {}",
            header.format
        )));
    }
    if header.version != HEAD_FORMAT_VERSION {
        return Err(ConfidenceError::Version {
            found: header.version,
            expected: HEAD_FORMAT_VERSION,
        });
    }
    let mut head = init_confidence_head(header.config)?;
    let body = &bytes[nl + 1..];
    if body.len() != head.params.len() * 8 {
        return Err(ConfidenceError::Load(format!(
            "parameter payload is {} bytes (expected {})",
            body.len(),
            head.params.len() * 8
        )));
    }
    for (i, chunk) in body.chunks_exact(8).enumerate() {
        head.params[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textio::{SpeakerRole, Word};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn micro_config() -> ConfidenceConfig {
        ConfidenceConfig {
            enc_dim: 3,
            vocab_size: 6,
            embed_dim: 2,
            attn_dim: 3,
            causal: false,
            seed: 7,
        }
    }

    fn random_examples(
        cfg: &ConfidenceConfig,
        n: usize,
        rng: &mut StdRng,
    ) -> Vec<ConfidenceExample> {
        (0..n)
            .map(|i| ConfidenceExample {
                stacked: (0..cfg.stacked_len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                symbol: rng.gen_range(0..cfg.vocab_size),
                word_index: i / 3,
                label: Some(rng.gen_bool(0.5)),
            })
            .collect()
    }

    fn test_vocab() -> RichVocab {
        let tokens: Vec<String> = [
            "c", "a", "t", "p", "<spk:dr>", "<spk:pt>", "<cap>", ".", ",", "?", "_", "<blank>",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        RichVocab::from_tokens(tokens).unwrap()
    }

    fn hyp_from(symbols: Vec<usize>, emit_times: Vec<usize>) -> Hypothesis {
        let n = symbols.len();
        Hypothesis {
            symbols,
            score: 0.0,
            path_score: 0.0,
            emit_times,
            per_symbol_logprob: vec![-0.1; n],
        }
    }

    #[test]
    fn extraction_shape_law_and_edge_padding() {
        let vocab = test_vocab();
        let tok = |s: &str| vocab.tokens().iter().position(|t| t == s).unwrap();
        let enc_dim = 3;
        let encodings: Vec<Vec<f64>> = (0..10)
            .map(|t| (0..enc_dim).map(|j| (t * enc_dim + j) as f64 + 1.0).collect())
            .collect();
        // <dr> c a <sep> t — three scored units among five symbols
        let symbols = vec![tok("<spk:dr>"), tok("c"), tok("a"), tok("_"), tok("t")];
        let hyp = hyp_from(symbols, vec![0, 0, 4, 5, 9]);
        let exs = extract_features(&encodings, &hyp, &vocab).unwrap();
        assert_eq!(exs.len(), 3);
        assert!(exs.iter().all(|e| e.stacked.len() == 7 * enc_dim));
        // same symbols against a much longer encoding: same example count
        let long: Vec<Vec<f64>> = (0..500).map(|_| vec![0.0; enc_dim]).collect();
        let hyp2 = hyp_from(hyp.symbols.clone(), vec![0, 0, 4, 5, 9]);
        assert_eq!(extract_features(&long, &hyp2, &vocab).unwrap().len(), 3);
        // emission at frame 0: the three left slots are zero
        assert!(exs[0].stacked[..3 * enc_dim].iter().all(|&v| v == 0.0));
        assert_eq!(&exs[0].stacked[3 * enc_dim..4 * enc_dim], &encodings[0][..]);
        // emission at the last frame: right slots zero
        assert!(exs[2].stacked[4 * enc_dim..].iter().all(|&v| v == 0.0));
        // word attribution: c,a spell word 0, t spells word 1
        assert_eq!(exs.iter().map(|e| e.word_index).collect::<Vec<_>>(), [0, 0, 1]);
        // empty hypothesis
        let empty = hyp_from(vec![], vec![]);
        assert!(extract_features(&encodings, &empty, &vocab).unwrap().is_empty());
        // out-of-range emission time
        let bad = hyp_from(vec![tok("c")], vec![10]);
        assert!(extract_features(&encodings, &bad, &vocab).is_err());
    }

    fn word(text: &str) -> Word {
        Word {
            text: text.into(),
            speaker_role: SpeakerRole::Dr,
            capitalized: false,
            trailing_punct: crate::textio::Punct::None,
        }
    }

    #[test]
    fn word_labels_are_all_or_nothing() {
        let reference = DecoratedTranscript { words: vec![word("cat")] };
        let hyp = DecoratedTranscript { words: vec![word("cap")] };
        // "cap" aligns to "cat" as a substitution: every unit incorrect,
        // even the graphemes that happen to match
        assert_eq!(make_word_labels(&hyp, &reference), [false]);
        assert_eq!(make_word_labels(&reference, &reference), [true]);
        // an inserted hypothesis word is incorrect wholesale
        let hyp2 = DecoratedTranscript { words: vec![word("cat"), word("extra")] };
        assert_eq!(make_word_labels(&hyp2, &reference), [true, false]);

        let vocab = test_vocab();
        let tok = |s: &str| vocab.tokens().iter().position(|t| t == s).unwrap();
        let symbols = vec![tok("c"), tok("a"), tok("p")];
        let hyp_units = hyp_from(symbols, vec![0, 1, 2]);
        let enc: Vec<Vec<f64>> = (0..3).map(|_| vec![0.0; 3]).collect();
        let mut exs = extract_features(&enc, &hyp_units, &vocab).unwrap();
        let labels = make_word_labels(&from_units(&hyp_units, &vocab), &reference);
        apply_word_labels(&mut exs, &labels);
        assert!(exs.iter().all(|e| e.label == Some(false)));
    }

    fn from_units(hyp: &Hypothesis, vocab: &RichVocab) -> DecoratedTranscript {
        crate::textio::from_symbols_lossy(&hyp.symbols, vocab)
    }

    /// Mean BCE over the batch without touching parameters.
    fn batch_loss(head: &ConfidenceHead, batch: &[Vec<ConfidenceExample>]) -> f64 {
        let total: usize = batch.iter().map(|s| s.len()).sum();
        let mut loss = 0.0;
        for seq in batch {
            let probs = head.score_units(seq).unwrap();
            for (ex, p) in seq.iter().zip(probs) {
                let y = f64::from(ex.label.unwrap());
                loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        loss / total as f64
    }

    #[test]
    fn gradcheck_both_window_shapes() {
        for causal in [false, true] {
            let mut cfg = micro_config();
            cfg.causal = causal;
            let mut head = init_confidence_head(cfg.clone()).unwrap();
            let mut rng = StdRng::seed_from_u64(11);
            let batch = vec![
                random_examples(&cfg, 7, &mut rng),
                random_examples(&cfg, 4, &mut rng),
            ];
            let mut grad = vec![0.0; head.layout.total()];
            let loss0 = batch_gradient(&head, &batch, &mut grad).unwrap();
            assert!((loss0 - batch_loss(&head, &batch)).abs() < 1e-12);
            let mut checked = 0;
            for idx in (0..head.layout.total()).step_by(7) {
                let h = 1e-5;
                let orig = head.params[idx];
                head.params[idx] = orig + h;
                let lp = batch_loss(&head, &batch);
                head.params[idx] = orig - h;
                let lm = batch_loss(&head, &batch);
                head.params[idx] = orig;
                let num = (lp - lm) / (2.0 * h);
                let ana = grad[idx];
                if num.abs() > 1e-6 || ana.abs() > 1e-6 {
                    let rel = (num - ana).abs() / num.abs().max(ana.abs());
                    assert!(rel < 1e-4, "causal={causal} param {idx}: {num} vs {ana}");
                    checked += 1;
                }
            }
            assert!(checked > 20, "only {checked} params exercised");
        }
    }

    #[test]
    fn init_loss_near_ln2_and_zero_lr_is_noop() {
        let cfg = micro_config();
        let mut head = init_confidence_head(cfg.clone()).unwrap();
        let mut rng = StdRng::seed_from_u64(13);
        let mut seq = random_examples(&cfg, 40, &mut rng);
        for (i, ex) in seq.iter_mut().enumerate() {
            ex.label = Some(i % 2 == 0);
        }
        let batch = vec![seq];
        let before = head.params.clone();
        let mut opt = Adam::new(head.layout.total(), 0.0);
        let loss = train_confidence(&mut head, &batch, &mut opt).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 0.1, "init loss {loss}");
        assert_eq!(head.params, before);
    }

    #[test]
    fn separable_features_reach_high_accuracy() {
        let cfg = micro_config();
        let mut head = init_confidence_head(cfg.clone()).unwrap();
        let mut rng = StdRng::seed_from_u64(17);
        let mut batch = Vec::new();
        for _ in 0..4 {
            let mut seq = random_examples(&cfg, 12, &mut rng);
            for ex in &mut seq {
                let y = rng.gen_bool(0.5);
                ex.label = Some(y);
                ex.stacked[0] = if y { 2.0 } else { -2.0 };
            }
            batch.push(seq);
        }
        let mut opt = Adam::new(head.layout.total(), 0.01);
        for _ in 0..500 {
            train_confidence(&mut head, &batch, &mut opt).unwrap();
        }
        let mut right = 0;
        let mut total = 0;
        for seq in &batch {
            let probs = head.score_units(seq).unwrap();
            for (ex, p) in seq.iter().zip(probs) {
                right += usize::from((p > 0.5) == ex.label.unwrap());
                total += 1;
            }
        }
        assert!(right as f64 / total as f64 >= 0.99, "{right}/{total}");
    }

    #[test]
    fn attention_locality_matches_window() {
        let cfg = micro_config();
        let head = init_confidence_head(cfg.clone()).unwrap();
        let mut rng = StdRng::seed_from_u64(19);
        let base = random_examples(&cfg, 60, &mut rng);
        let p0 = head.score_units(&base).unwrap();
        let j = 30;
        let mut bumped = base.clone();
        bumped[j].stacked[1] += 0.5;
        let p1 = head.score_units(&bumped).unwrap();
        for i in 0..base.len() {
            let delta = (p1[i] - p0[i]).abs();
            if (i as isize - j as isize).unsigned_abs() >= ATTN_SPAN {
                assert!(delta == 0.0, "position {i} moved by {delta}");
            }
        }
        // and the perturbation is actually visible nearby
        assert!((p1[j] - p0[j]).abs() > 0.0);

        // causal head: nothing before the perturbation moves
        let mut ccfg = micro_config();
        ccfg.causal = true;
        let chead = init_confidence_head(ccfg).unwrap();
        let q0 = chead.score_units(&base).unwrap();
        let q1 = chead.score_units(&bumped).unwrap();
        for i in 0..j {
            assert_eq!(q0[i], q1[i], "causal head leaked backward at {i}");
        }
    }

    #[test]
    fn word_scores_average_units() {
        let cfg = micro_config();
        let head = init_confidence_head(cfg.clone()).unwrap();
        let mut rng = StdRng::seed_from_u64(23);
        let mut seq = random_examples(&cfg, 6, &mut rng);
        for (i, ex) in seq.iter_mut().enumerate() {
            ex.word_index = if i < 5 { 0 } else { 1 };
        }
        let words = score_words(&head, &seq).unwrap();
        let units = head.score_units(&seq).unwrap();
        assert_eq!(words.len(), 2);
        assert!((words[0] - units[..5].iter().sum::<f64>() / 5.0).abs() < 1e-12);
        // single-unit word: score equals the unit score
        assert!((words[1] - units[5]).abs() < 1e-12);
        // aggregation is invariant under within-word unit permutation
        let idx: Vec<usize> = seq.iter().map(|e| e.word_index).collect();
        let direct = aggregate_words(&idx, &units).unwrap();
        let mut shuffled: Vec<(usize, f64)> = idx.iter().copied().zip(units.iter().copied()).collect();
        shuffled.swap(0, 4);
        shuffled.swap(1, 3);
        let (pi, ps): (Vec<usize>, Vec<f64>) = shuffled.into_iter().unzip();
        let perm = aggregate_words(&pi, &ps).unwrap();
        for (a, b) in direct.iter().zip(&perm) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((direct[0] - words[0]).abs() < 1e-12);
    }

    #[test]
    fn posterior_baseline_means_probabilities() {
        let vocab = test_vocab();
        let tok = |s: &str| vocab.tokens().iter().position(|t| t == s).unwrap();
        let symbols = vec![tok("c"), tok("a"), tok("_"), tok("t")];
        let mut hyp = hyp_from(symbols, vec![0, 1, 2, 3]);
        hyp.per_symbol_logprob = vec![0.0, 0.0, -5.0, (0.5f64).ln()];
        let words = posterior_baseline(&hyp, &vocab).unwrap();
        // word 0: mean(1.0, 1.0) = 1.0; word 1: 0.5; separator not scored
        assert_eq!(words.len(), 2);
        assert!((words[0] - 1.0).abs() < 1e-12);
        assert!((words[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn temperature_identity_argmax_and_errors() {
        let logits = vec![1.0, -2.0, 0.5];
        assert_eq!(temperature_scale(&logits, 1.0).unwrap(), logits);
        let halved = temperature_scale(&logits, 2.0).unwrap();
        assert_eq!(halved, vec![0.5, -1.0, 0.25]);
        for tau in [0.1, 1.0, 7.0] {
            let s = temperature_scale(&logits, tau).unwrap();
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&s), argmax(&logits));
        }
        assert!(temperature_scale(&logits, 0.0).is_err());
        assert!(temperature_scale(&logits, -1.0).is_err());
    }

    #[test]
    fn huge_temperature_flattens_posteriors() {
        use crate::model::{init_model, EncKind, Mode, ModelConfig};
        let vocab = RichVocab::graphemes(3).unwrap();
        let cfg = ModelConfig {
            input_dim: 2,
            enc_kind: EncKind::RecurrentUni,
            enc_layers: 1,
            enc_dim: 3,
            attention_window: 2,
            subsample_factor: 1,
            pred_dim: 3,
            joint_dim: 3,
            vocab: vocab.tokens().to_vec(),
            seed: 3,
        };
        let model = init_model(cfg).unwrap();
        let frames: Vec<Vec<f64>> = (0..4).map(|t| vec![t as f64 * 0.1, 0.3]).collect();
        let (enc, _) = model.encode_full(&frames, Mode::NonStreaming).unwrap();
        let hyp = hyp_from(vec![0, 1], vec![0, 2]);
        let probs = posterior_with_temperature(&model, &enc, &hyp, 1e9).unwrap();
        let v = model.config.vocab.len() as f64;
        for p in probs {
            assert!((p - 1.0 / v).abs() < 1e-6);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = micro_config();
        let head = init_confidence_head(cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("conf-head-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("head.bin");
        save_confidence_head(&head, &path).unwrap();
        let loaded = load_confidence_head(&path).unwrap();
        assert_eq!(loaded.params, head.params);
        assert_eq!(loaded.config, head.config);
        std::fs::remove_dir_all(&dir).ok();
    }
}
