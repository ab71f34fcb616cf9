//! Entity span tagging as transduction: the target sequence holds only
//! begin/end markers whose emission steps locate the span boundaries.
//! Sentences become one encoder frame per word (frozen hashed embeddings),
//! so emission time IS the word index.

use crate::decoder::{beam_decode, BeamConfig, DecodeError, Hypothesis};
use crate::metrics::TagSpan;
use crate::model::{Mode, Model, ModelError, Objective, TrainExample};
use crate::nn::Adam;
use crate::trellis::AlignmentPath;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("bad annotation: {0}")]
    Annotation(String),
    #[error("bad tag vocab: {0}")]
    Vocab(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Begin/end token pairs for a label set, blank last. Label i owns token
/// ids 2i (begin) and 2i+1 (end).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TagVocab {
    labels: Vec<String>,
}

impl TagVocab {
    pub fn new(mut labels: Vec<String>) -> Result<Self, TagError> {
        labels.sort();
        labels.dedup();
        if labels.is_empty() {
            return Err(TagError::Vocab("no labels".into()));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn begin_id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label).map(|i| 2 * i)
    }

    pub fn end_id(&self, label: &str) -> Option<usize> {
        self.begin_id(label).map(|i| i + 1)
    }

    /// (label index, is_end) for a non-blank token.
    pub fn split_id(&self, id: usize) -> Option<(usize, bool)> {
        (id < 2 * self.labels.len()).then(|| (id / 2, id % 2 == 1))
    }

    pub fn blank_id(&self) -> usize {
        2 * self.labels.len()
    }

    pub fn len(&self) -> usize {
        2 * self.labels.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token strings in id order, for a model config vocab.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.labels {
            out.push(format!("B:{l}"));
            out.push(format!("END:{l}"));
        }
        out.push(crate::textio::BLANK_TOKEN.to_string());
        out
    }
}

/// One annotated sentence.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TagSentence {
    pub id: String,
    pub words: Vec<String>,
    pub spans: Vec<TagSpan>,
}

fn check_spans(word_count: usize, spans: &[TagSpan]) -> Result<(), TagError> {
    for s in spans {
        if s.start > s.end || s.end >= word_count {
            return Err(TagError::Annotation(format!(
                "span {}..={} ({}) outside {word_count} words",
                s.start, s.end, s.label
            )));
        }
    }
    let mut sorted: Vec<&TagSpan> = spans.iter().collect();
    sorted.sort_by(|a, b| (&a.label, a.start).cmp(&(&b.label, b.start)));
    for w in sorted.windows(2) {
        if w[0].label == w[1].label && w[1].start <= w[0].end {
            return Err(TagError::Annotation(format!(
                "overlapping {} spans at words {} and {}",
                w[0].label, w[0].start, w[1].start
            )));
        }
    }
    Ok(())
}

/// Serialize annotations into target symbols and the alignment that emits
/// each begin tag at its span's first word-step and each end tag at the
/// last. Per step the order is: ends of spans closing here (label order),
/// then single-word spans as begin+end pairs, then opening begins.
pub fn annotation_to_path(
    word_count: usize,
    spans: &[TagSpan],
    vocab: &TagVocab,
) -> Result<(Vec<usize>, AlignmentPath), TagError> {
    check_spans(word_count, spans)?;
    if word_count == 0 {
        return Err(TagError::Annotation("empty sentence".into()));
    }
    let id_of = |label: &str, end: bool| -> Result<usize, TagError> {
        let f = if end { TagVocab::end_id } else { TagVocab::begin_id };
        f(vocab, label).ok_or_else(|| TagError::Vocab(format!("unknown label {label}")))
    };
    let mut symbols = Vec::new();
    let mut emit_frames = Vec::new();
    for t in 0..word_count {
        let mut closing: Vec<&TagSpan> =
            spans.iter().filter(|s| s.end == t && s.start < t).collect();
        closing.sort_by_key(|s| &s.label);
        let mut single: Vec<&TagSpan> =
            spans.iter().filter(|s| s.start == t && s.end == t).collect();
        single.sort_by_key(|s| &s.label);
        let mut opening: Vec<&TagSpan> =
            spans.iter().filter(|s| s.start == t && s.end > t).collect();
        opening.sort_by_key(|s| &s.label);
        for s in closing {
            symbols.push(id_of(&s.label, true)?);
            emit_frames.push(t);
        }
        for s in single {
            symbols.push(id_of(&s.label, false)?);
            symbols.push(id_of(&s.label, true)?);
            emit_frames.push(t);
            emit_frames.push(t);
        }
        for s in opening {
            symbols.push(id_of(&s.label, false)?);
            emit_frames.push(t);
        }
    }
    Ok((symbols, AlignmentPath::from_emit_frames(&emit_frames, word_count)))
}

/// Pair begin/end emissions back into spans: each begin waits for the
/// next matching end (first-in, first-out per label). Unpaired tokens are
/// dropped and counted, never fatal.
pub fn decode_spans(hyp: &Hypothesis, vocab: &TagVocab) -> (Vec<TagSpan>, usize) {
    let mut open: Vec<VecDeque<usize>> = vec![VecDeque::new(); vocab.labels.len()];
    let mut spans = Vec::new();
    let mut dropped = 0usize;
    for (i, &sym) in hyp.symbols.iter().enumerate() {
        let Some((label, is_end)) = vocab.split_id(sym) else {
            dropped += 1; // blank should never be emitted, but stay robust
            continue;
        };
        let t = hyp.emit_times[i];
        if is_end {
            match open[label].pop_front() {
                Some(start) if start <= t => {
                    spans.push(TagSpan::new(vocab.labels[label].clone(), start, t));
                }
                Some(_) | None => dropped += 1,
            }
        } else {
            open[label].push_back(t);
        }
    }
    dropped += open.iter().map(VecDeque::len).sum::<usize>();
    spans.sort_by(|a, b| (a.start, a.end, &a.label).cmp(&(b.start, b.end, &b.label)));
    (spans, dropped)
}

/// Frozen word features: each word's bytes hash (FNV-1a) into a stream
/// seed, and the vector is standard-normal draws from it. Identical words
/// always embed identically; no training touches these.
pub fn word_features(words: &[String], dim: usize, seed: u64) -> Vec<Vec<f64>> {
    words
        .iter()
        .map(|w| {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in w.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
            let mut rng = ChaCha20Rng::seed_from_u64(h ^ seed);
            (0..dim)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect()
        })
        .collect()
}

/// Annotated sentence → training example (features, tag targets, and the
/// annotation-derived alignment for the fixed-alignment objective).
pub fn sentence_example(
    sentence: &TagSentence,
    vocab: &TagVocab,
    model: &Model,
    feature_seed: u64,
) -> Result<TrainExample, TagError> {
    if model.config.subsample_factor != 1 {
        return Err(TagError::Annotation(
            "tagging requires one encoder step per word (subsample_factor 1)".into(),
        ));
    }
    let (target, path) = annotation_to_path(sentence.words.len(), &sentence.spans, vocab)?;
    Ok(TrainExample {
        frames: word_features(&sentence.words, model.config.input_dim, feature_seed),
        target,
        path: Some(path),
    })
}

/// One optimizer step over a batch of sentences.
pub fn train_tagger(
    model: &mut Model,
    batch: &[TagSentence],
    vocab: &TagVocab,
    objective: Objective,
    feature_seed: u64,
    opt: &mut Adam,
) -> Result<f64, TagError> {
    let examples: Vec<TrainExample> = batch
        .iter()
        .map(|s| sentence_example(s, vocab, model, feature_seed))
        .collect::<Result<_, _>>()?;
    Ok(model.train_step(&examples, objective, Mode::NonStreaming, opt)?)
}

/// Decode a sentence's spans with beam search.
pub fn tag_sentence(
    model: &Model,
    words: &[String],
    vocab: &TagVocab,
    feature_seed: u64,
    beam: &BeamConfig,
) -> Result<(Vec<TagSpan>, usize), TagError> {
    let frames = word_features(words, model.config.input_dim, feature_seed);
    let (enc, _) = model.encode_full(&frames, Mode::NonStreaming)?;
    let hyps = beam_decode(model, &enc, beam)?;
    let best = hyps.into_iter().next().ok_or_else(|| {
        TagError::Annotation("decoder returned no hypotheses".into())
    })?;
    Ok(decode_spans(&best, vocab))
}

/// Corpus-pooled exact-match span F1: sentences are concatenated with
/// word offsets so one exact-match count covers the whole corpus.
pub fn corpus_tag_f1(pairs: &[(Vec<TagSpan>, Vec<TagSpan>, usize)]) -> f64 {
    let mut offset = 0usize;
    let mut all_ref = Vec::new();
    let mut all_hyp = Vec::new();
    for (r, h, words) in pairs {
        let shift = |s: &TagSpan| TagSpan::new(s.label.clone(), s.start + offset, s.end + offset);
        all_ref.extend(r.iter().map(shift));
        all_hyp.extend(h.iter().map(shift));
        offset += words;
    }
    crate::metrics::tag_f1(&all_ref, &all_hyp)
}

/// Synthetic tagging corpus: designated marker words deterministically
/// open spans. `ms` tags itself Symptoms; `mc` tags itself and the next
/// word Condition; `mx` is context-dependent — Medication when a Symptoms
/// marker occurred earlier in the sentence, Treatment otherwise.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TagTaskSpec {
    pub sentences: usize,
    pub words_per_sentence: usize,
    pub marker_prob: f64,
    pub filler_vocab: usize,
    pub seed: u64,
}

pub const TAG_TASK_LABELS: [&str; 4] = ["Condition", "Medication", "Symptoms", "Treatment"];

pub fn tag_task_vocab() -> TagVocab {
    TagVocab::new(TAG_TASK_LABELS.iter().map(|s| s.to_string()).collect()).unwrap()
}

pub fn gen_tag_corpus(spec: &TagTaskSpec) -> Vec<TagSentence> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.sentences);
    for si in 0..spec.sentences {
        let n = spec.words_per_sentence;
        let mut words = Vec::with_capacity(n);
        let mut spans = Vec::new();
        let mut seen_symptom = false;
        let mut i = 0usize;
        while i < n {
            if rng.gen_bool(spec.marker_prob) {
                match rng.gen_range(0..3) {
                    0 => {
                        words.push("ms".to_string());
                        spans.push(TagSpan::new("Symptoms", i, i));
                        seen_symptom = true;
                        i += 1;
                    }
                    1 if i + 2 < n => {
                        // two-word span plus a gap so same-label spans
                        // can never touch
                        words.push("mc".to_string());
                        words.push(format!("w{}", rng.gen_range(0..spec.filler_vocab)));
                        spans.push(TagSpan::new("Condition", i, i + 1));
                        i += 2;
                    }
                    _ => {
                        let label = if seen_symptom { "Medication" } else { "Treatment" };
                        words.push("mx".to_string());
                        spans.push(TagSpan::new(label, i, i));
                        i += 1;
                    }
                }
            } else {
                words.push(format!("w{}", rng.gen_range(0..spec.filler_vocab)));
                i += 1;
            }
        }
        out.push(TagSentence {
            id: format!("tag-{si:04}"),
            words,
            spans,
        });
    }
    out
}
