//! Time-synchronous greedy and beam decoding over a transducer scorer,
//! plus segment-streaming decode with optional encoder state carry-over.
//!
//! Beam search walks the encoder frames in order. Within a frame,
//! hypotheses expand by non-blank symbols for up to `max_symbols_per_frame`
//! rounds; taking blank closes the hypothesis for the frame. Hypotheses
//! with identical label sequences are recombined by summing their
//! probabilities; each carries its best single alignment alongside the
//! merged score. Pruning ranks closed and still-expanding hypotheses
//! together, so a width-1 beam commits exactly like the greedy decoder.

use crate::linalg::{log_add, log_softmax_inplace};
use crate::model::{EncoderState, Mode, Model, ModelError};
use crate::textio::{from_symbols_lossy, DecoratedTranscript};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid beam config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that can score "next symbol" distributions: the trained model,
/// or a stub in tests.
pub trait TransducerScorer {
    type State: Clone;
    /// Vocabulary size including blank.
    fn vocab_len(&self) -> usize;
    fn blank_id(&self) -> usize;
    /// Label-history state before anything has been emitted.
    fn init_state(&self) -> Self::State;
    /// Unnormalized logits over the vocabulary for one (frame, state) pair.
    fn step_logits(&self, encoding: &[f64], state: &Self::State) -> Vec<f64>;
    /// State after emitting a non-blank symbol.
    fn advance(&self, state: &Self::State, symbol: usize) -> Self::State;
}

impl TransducerScorer for Model {
    type State = Vec<f64>;

    fn vocab_len(&self) -> usize {
        self.config.vocab_len()
    }

    fn blank_id(&self) -> usize {
        self.config.blank_id()
    }

    fn init_state(&self) -> Vec<f64> {
        self.pred_init()
    }

    fn step_logits(&self, encoding: &[f64], state: &Vec<f64>) -> Vec<f64> {
        self.joint_logits(encoding, state)
    }

    fn advance(&self, state: &Vec<f64>, symbol: usize) -> Vec<f64> {
        self.pred_step(state, symbol)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hypothesis {
    /// Emitted non-blank symbol ids.
    pub symbols: Vec<usize>,
    /// Total log-probability, including mass recombined from alternative
    /// alignments of the same label sequence.
    pub score: f64,
    /// Log-probability of the single best alignment (equals `score` when
    /// nothing was recombined, e.g. in greedy decoding).
    pub path_score: f64,
    /// Encoder frame index at which each symbol was emitted.
    pub emit_times: Vec<usize>,
    /// Emission log-probability of each symbol on the best alignment.
    pub per_symbol_logprob: Vec<f64>,
}

impl Hypothesis {
    fn empty() -> Self {
        Self {
            symbols: Vec::new(),
            score: 0.0,
            path_score: 0.0,
            emit_times: Vec::new(),
            per_symbol_logprob: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Cap on non-blank emissions per encoder frame; guards label loops
    /// on badly trained models.
    pub max_symbols_per_frame: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 4,
            max_symbols_per_frame: 4,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_width == 0 {
            return Err(DecodeError::Config("beam_width must be >= 1".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(DecodeError::Config(
                "max_symbols_per_frame must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

struct BeamItem<S> {
    hyp: Hypothesis,
    state: S,
}

impl<S: Clone> BeamItem<S> {
    fn initial(state: S) -> Self {
        Self {
            hyp: Hypothesis::empty(),
            state,
        }
    }
}

/// Merge items with identical label sequences: probabilities add, the
/// better single alignment becomes the representative.
fn merge_identical<S: Clone>(items: Vec<BeamItem<S>>) -> Vec<BeamItem<S>> {
    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut map: HashMap<Vec<usize>, BeamItem<S>> = HashMap::new();
    for item in items {
        match map.get_mut(&item.hyp.symbols) {
            None => {
                order.push(item.hyp.symbols.clone());
                map.insert(item.hyp.symbols.clone(), item);
            }
            Some(prev) => {
                prev.hyp.score = log_add(prev.hyp.score, item.hyp.score);
                if item.hyp.path_score > prev.hyp.path_score {
                    prev.hyp.path_score = item.hyp.path_score;
                    prev.hyp.emit_times = item.hyp.emit_times;
                    prev.hyp.per_symbol_logprob = item.hyp.per_symbol_logprob;
                    prev.state = item.state;
                }
            }
        }
    }
    order
        .into_iter()
        .map(|k| map.remove(&k).expect("inserted above"))
        .collect()
}

fn better(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .expect("finite scores")
        .then_with(|| a.symbols.cmp(&b.symbols))
}

/// Advance every hypothesis through one encoder frame.
fn advance_frame<S: TransducerScorer>(
    scorer: &S,
    beam: Vec<BeamItem<S::State>>,
    encoding: &[f64],
    frame: usize,
    cfg: &BeamConfig,
) -> Vec<BeamItem<S::State>> {
    let blank = scorer.blank_id();
    let mut closed: Vec<BeamItem<S::State>> = Vec::new();
    let mut active = beam;
    for round in 0..=cfg.max_symbols_per_frame {
        let force = round == cfg.max_symbols_per_frame;
        let mut expansions: Vec<BeamItem<S::State>> = Vec::new();
        for item in active.drain(..) {
            let mut logp = scorer.step_logits(encoding, &item.state);
            log_softmax_inplace(&mut logp);
            if !force {
                for (k, &lp) in logp.iter().enumerate() {
                    if k == blank {
                        continue;
                    }
                    let mut hyp = item.hyp.clone();
                    hyp.symbols.push(k);
                    hyp.score += lp;
                    hyp.path_score += lp;
                    hyp.emit_times.push(frame);
                    hyp.per_symbol_logprob.push(lp);
                    expansions.push(BeamItem {
                        hyp,
                        state: scorer.advance(&item.state, k),
                    });
                }
            }
            let mut done = item;
            done.hyp.score += logp[blank];
            done.hyp.path_score += logp[blank];
            closed.push(done);
        }
        closed = merge_identical(closed);
        if expansions.is_empty() {
            break;
        }
        active = merge_identical(expansions);
        // rank closed and expanding hypotheses together and keep the best
        // beam_width overall; closed outranks active on exact ties
        let mut ranked: Vec<(bool, usize)> = (0..closed.len())
            .map(|i| (false, i))
            .chain((0..active.len()).map(|i| (true, i)))
            .collect();
        ranked.sort_by(|a, b| {
            let ha = if a.0 { &active[a.1].hyp } else { &closed[a.1].hyp };
            let hb = if b.0 { &active[b.1].hyp } else { &closed[b.1].hyp };
            better(ha, hb).then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(cfg.beam_width);
        let keep_closed: Vec<usize> = ranked.iter().filter(|r| !r.0).map(|r| r.1).collect();
        let keep_active: Vec<usize> = ranked.iter().filter(|r| r.0).map(|r| r.1).collect();
        closed = keep_indices(closed, &keep_closed);
        active = keep_indices(active, &keep_active);
        if active.is_empty() {
            break;
        }
    }
    closed.sort_by(|a, b| better(&a.hyp, &b.hyp));
    closed.truncate(cfg.beam_width);
    closed
}

fn keep_indices<T>(items: Vec<T>, keep: &[usize]) -> Vec<T> {
    let mut tagged: Vec<Option<T>> = items.into_iter().map(Some).collect();
    keep.iter()
        .map(|&i| tagged[i].take().expect("indices unique"))
        .collect()
}

/// Beam search over the whole encoding; hypotheses come back sorted by
/// score, best first.
pub fn beam_decode<S: TransducerScorer>(
    scorer: &S,
    encodings: &[Vec<f64>],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    let mut beam = vec![BeamItem::initial(scorer.init_state())];
    for (t, enc) in encodings.iter().enumerate() {
        beam = advance_frame(scorer, beam, enc, t, cfg);
    }
    Ok(beam.into_iter().map(|b| b.hyp).collect())
}

/// Frame-synchronous argmax decoding; emits while a label outscores blank,
/// up to the default per-frame cap.
pub fn greedy_decode<S: TransducerScorer>(
    scorer: &S,
    encodings: &[Vec<f64>],
) -> Result<Hypothesis, DecodeError> {
    let cap = BeamConfig::default().max_symbols_per_frame;
    let blank = scorer.blank_id();
    let mut state = scorer.init_state();
    let mut hyp = Hypothesis::empty();
    for (t, enc) in encodings.iter().enumerate() {
        let mut emitted = 0;
        loop {
            let mut logp = scorer.step_logits(enc, &state);
            log_softmax_inplace(&mut logp);
            let mut best = 0usize;
            for k in 1..logp.len() {
                if k != blank && logp[k] > logp[best] {
                    best = k;
                }
            }
            if emitted >= cap || best == blank || logp[best] <= logp[blank] {
                hyp.score += logp[blank];
                hyp.path_score += logp[blank];
                break;
            }
            hyp.symbols.push(best);
            hyp.score += logp[best];
            hyp.path_score += logp[best];
            hyp.emit_times.push(t);
            hyp.per_symbol_logprob.push(logp[best]);
            state = scorer.advance(&state, best);
            emitted += 1;
        }
    }
    Ok(hyp)
}

/// Everything a segment-streaming decode produces: the rendered
/// transcript, the winning hypothesis with global emission times, and the
/// concatenated encoder outputs those times index into.
#[derive(Debug, Clone)]
pub struct StreamingDecode {
    pub transcript: DecoratedTranscript,
    pub hypothesis: Hypothesis,
    pub encodings: Vec<Vec<f64>>,
}

/// Decode segments in order with a streaming encoder. The decoder beam
/// always flows across segment boundaries; `carry_state` controls whether
/// the encoder state does too (otherwise each segment is encoded from a
/// cold start, as if it were a fresh utterance).
pub fn streaming_decode_full(
    model: &Model,
    segments: &[Vec<Vec<f64>>],
    carry_state: bool,
    cfg: &BeamConfig,
) -> Result<StreamingDecode, DecodeError> {
    cfg.validate()?;
    let mut encodings: Vec<Vec<f64>> = Vec::new();
    let mut beam = vec![BeamItem::initial(model.init_state())];
    let mut enc_state = EncoderState::initial(&model.config);
    let mut decode_upto = 0usize; // encodings fully decoded so far
    for (i, seg) in segments.iter().enumerate() {
        if carry_state {
            let (outs, st) = model.encode_chunk(seg, &enc_state)?;
            enc_state = st;
            encodings.extend(outs);
            if i + 1 == segments.len() {
                if let Some(tail) = model.encode_finish(&mut enc_state) {
                    encodings.push(tail);
                }
            }
        } else {
            let (outs, _) = model.encode_full(seg, Mode::Streaming)?;
            encodings.extend(outs);
        }
        for t in decode_upto..encodings.len() {
            beam = advance_frame(model, beam, &encodings[t], t, cfg);
        }
        decode_upto = encodings.len();
    }
    let hypothesis = beam
        .into_iter()
        .map(|b| b.hyp)
        .next()
        .unwrap_or_else(Hypothesis::empty);
    let vocab = model.config.rich_vocab()?;
    let transcript = from_symbols_lossy(&hypothesis.symbols, &vocab);
    Ok(StreamingDecode {
        transcript,
        hypothesis,
        encodings,
    })
}

/// `streaming_decode_full`, keeping only the rendered transcript.
pub fn streaming_decode(
    model: &Model,
    segments: &[Vec<Vec<f64>>],
    carry_state: bool,
    cfg: &BeamConfig,
) -> Result<DecoratedTranscript, DecodeError> {
    streaming_decode_full(model, segments, carry_state, cfg).map(|d| d.transcript)
}
