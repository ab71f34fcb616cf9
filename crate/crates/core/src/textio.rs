//! Decorated-transcript grammar, rich token inventory, dataset files, and
//! the deterministic synthetic conversation generator.
//!
//! The serialized grammar is whitespace-tokenized: a speaker token opens
//! every turn, `<cap>` immediately precedes a capitalized word, and
//! punctuation follows its word as a standalone token. At the symbol level
//! words are spelled in base units (single graphemes or merged pairs); a
//! separator unit `_` is inserted before a word only when the boundary
//! would otherwise be invisible (previous symbol was a base unit).

use crate::trellis::AlignmentPath;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const CAP_TOKEN: &str = "<cap>";
pub const SEP_TOKEN: &str = "_";
pub const BLANK_TOKEN: &str = "<blank>";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("parse error at token {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("vocab error: {0}")]
    Vocab(String),
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("data error at line {line}: {msg}")]
    DataLine { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The four conversation roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SpeakerRole {
    Dr,
    Pt,
    Cg,
    Other,
}

pub const ALL_ROLES: [SpeakerRole; 4] = [
    SpeakerRole::Dr,
    SpeakerRole::Pt,
    SpeakerRole::Cg,
    SpeakerRole::Other,
];

impl SpeakerRole {
    pub fn token(self) -> &'static str {
        match self {
            SpeakerRole::Dr => "<spk:dr>",
            SpeakerRole::Pt => "<spk:pt>",
            SpeakerRole::Cg => "<spk:cg>",
            SpeakerRole::Other => "<spk:other>",
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        ALL_ROLES.iter().copied().find(|r| r.token() == tok)
    }
}

/// Trailing punctuation attached to a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Punct {
    None,
    Period,
    Comma,
    Question,
}

pub const PUNCT_MARKS: [Punct; 3] = [Punct::Period, Punct::Comma, Punct::Question];

impl Punct {
    pub fn token(self) -> Option<&'static str> {
        match self {
            Punct::None => None,
            Punct::Period => Some("."),
            Punct::Comma => Some(","),
            Punct::Question => Some("?"),
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        match tok {
            "." => Some(Punct::Period),
            "," => Some(Punct::Comma),
            "?" => Some(Punct::Question),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Word {
    pub text: String,
    pub speaker_role: SpeakerRole,
    pub capitalized: bool,
    pub trailing_punct: Punct,
}

/// A transcript decorated with roles, capitalization, and punctuation.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct DecoratedTranscript {
    pub words: Vec<Word>,
}

impl DecoratedTranscript {
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Parse the serialized grammar into a structured transcript.
pub fn parse_decorated(text: &str) -> Result<DecoratedTranscript, TextError> {
    let mut words: Vec<Word> = Vec::new();
    let mut role: Option<SpeakerRole> = None;
    let mut pending_cap = false;
    let mut can_attach_punct = false;
    for (pos, tok) in text.split_whitespace().enumerate() {
        if let Some(r) = SpeakerRole::from_token(tok) {
            if pending_cap {
                return Err(TextError::Parse {
                    pos,
                    msg: format!("dangling {CAP_TOKEN} before speaker token"),
                });
            }
            if role == Some(r) {
                return Err(TextError::Parse {
                    pos,
                    msg: format!("redundant speaker token {tok}"),
                });
            }
            role = Some(r);
            can_attach_punct = false;
        } else if let Some(p) = Punct::from_token(tok) {
            if !can_attach_punct {
                return Err(TextError::Parse {
                    pos,
                    msg: format!("punctuation token {tok} does not follow a word"),
                });
            }
            words.last_mut().unwrap().trailing_punct = p;
            can_attach_punct = false;
        } else if tok == CAP_TOKEN {
            if pending_cap {
                return Err(TextError::Parse {
                    pos,
                    msg: format!("doubled {CAP_TOKEN}"),
                });
            }
            pending_cap = true;
            can_attach_punct = false;
        } else if tok.starts_with('<') {
            return Err(TextError::Parse {
                pos,
                msg: format!("unknown token {tok}"),
            });
        } else {
            let Some(r) = role else {
                return Err(TextError::Parse {
                    pos,
                    msg: format!("word {tok} before any speaker token"),
                });
            };
            words.push(Word {
                text: tok.to_string(),
                speaker_role: r,
                capitalized: pending_cap,
                trailing_punct: Punct::None,
            });
            pending_cap = false;
            can_attach_punct = true;
        }
    }
    if pending_cap {
        return Err(TextError::Parse {
            pos: text.split_whitespace().count(),
            msg: format!("dangling {CAP_TOKEN} at end of input"),
        });
    }
    Ok(DecoratedTranscript { words })
}

/// Canonical single-space serialization; the inverse of `parse_decorated`.
pub fn render_decorated(t: &DecoratedTranscript) -> String {
    let mut toks: Vec<&str> = Vec::new();
    let mut role = None;
    for w in &t.words {
        if role != Some(w.speaker_role) {
            toks.push(w.speaker_role.token());
            role = Some(w.speaker_role);
        }
        if w.capitalized {
            toks.push(CAP_TOKEN);
        }
        toks.push(&w.text);
        if let Some(p) = w.trailing_punct.token() {
            toks.push(p);
        }
    }
    toks.join(" ")
}

/// Symbol inventory: base units first, then the separator, speaker tokens,
/// punctuation tokens, `<cap>`, and blank last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RichVocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    max_unit_chars: usize,
}

impl RichVocab {
    fn is_special_token(tok: &str) -> bool {
        tok == CAP_TOKEN
            || tok == SEP_TOKEN
            || tok == BLANK_TOKEN
            || SpeakerRole::from_token(tok).is_some()
            || Punct::from_token(tok).is_some()
    }

    /// Build from base units; appends separator, rich tokens, and blank.
    pub fn new(base_units: Vec<String>) -> Result<Self, TextError> {
        if let Some(bad) = base_units.iter().find(|u| Self::is_special_token(u)) {
            return Err(TextError::Vocab(format!(
                "base unit {bad} collides with a reserved token"
            )));
        }
        let mut tokens = base_units;
        tokens.push(SEP_TOKEN.to_string());
        for r in ALL_ROLES {
            tokens.push(r.token().to_string());
        }
        for p in PUNCT_MARKS {
            tokens.push(p.token().unwrap().to_string());
        }
        tokens.push(CAP_TOKEN.to_string());
        tokens.push(BLANK_TOKEN.to_string());
        Self::from_tokens(tokens)
    }

    /// Build from a complete token list (e.g. a vocab file), blank last.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.last().map(String::as_str) != Some(BLANK_TOKEN) {
            return Err(TextError::Vocab(format!(
                "vocab must end with the blank token {BLANK_TOKEN}"
            )));
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TextError::Vocab("empty token".into()));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(TextError::Vocab(format!("duplicate token {t}")));
            }
        }
        let max_unit_chars = tokens
            .iter()
            .filter(|t| !Self::is_special_token(t))
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(0);
        Ok(Self {
            tokens,
            ids,
            max_unit_chars,
        })
    }

    /// Singleton graphemes 'a'.. for a synthetic alphabet of n letters.
    pub fn graphemes(n: usize) -> Result<Self, TextError> {
        if !(2..=26).contains(&n) {
            return Err(TextError::Vocab(format!(
                "grapheme alphabet size {n} outside 2..=26"
            )));
        }
        let base = (0..n)
            .map(|i| ((b'a' + i as u8) as char).to_string())
            .collect();
        Self::new(base)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Vocabulary size excluding blank (the lattice's num_labels).
    pub fn num_labels(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn blank_id(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn role_of(&self, id: usize) -> Option<SpeakerRole> {
        SpeakerRole::from_token(&self.tokens[id])
    }

    pub fn punct_of(&self, id: usize) -> Option<Punct> {
        Punct::from_token(&self.tokens[id])
    }

    pub fn is_cap(&self, id: usize) -> bool {
        self.tokens[id] == CAP_TOKEN
    }

    pub fn is_sep(&self, id: usize) -> bool {
        self.tokens[id] == SEP_TOKEN
    }

    /// True for word-spelling units (not separator, not rich, not blank).
    pub fn is_base_unit(&self, id: usize) -> bool {
        !Self::is_special_token(&self.tokens[id])
    }

    /// Greedy longest-match spelling of a word into base-unit ids.
    pub fn spell(&self, word: &str) -> Result<Vec<usize>, TextError> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::with_capacity(chars.len());
        let mut i = 0;
        while i < chars.len() {
            let mut matched = None;
            let max_len = self.max_unit_chars.min(chars.len() - i);
            for l in (1..=max_len).rev() {
                let cand: String = chars[i..i + l].iter().collect();
                if let Some(&id) = self.ids.get(&cand) {
                    if self.is_base_unit(id) {
                        matched = Some((id, l));
                        break;
                    }
                }
            }
            let Some((id, l)) = matched else {
                return Err(TextError::Vocab(format!(
                    "cannot spell {word:?}: no unit covers position {i}"
                )));
            };
            out.push(id);
            i += l;
        }
        Ok(out)
    }
}

/// Serialize a transcript to a symbol-id sequence over `vocab`.
pub fn to_symbols(t: &DecoratedTranscript, vocab: &RichVocab) -> Result<Vec<usize>, TextError> {
    let mut out = Vec::new();
    let mut role = None;
    let mut last_was_base = false;
    for w in &t.words {
        if role != Some(w.speaker_role) {
            out.push(vocab.id(w.speaker_role.token()).unwrap());
            role = Some(w.speaker_role);
            last_was_base = false;
        }
        if w.capitalized {
            out.push(vocab.id(CAP_TOKEN).unwrap());
            last_was_base = false;
        }
        if last_was_base {
            out.push(vocab.id(SEP_TOKEN).unwrap());
        }
        out.extend(vocab.spell(&w.text)?);
        last_was_base = true;
        if let Some(p) = w.trailing_punct.token() {
            out.push(vocab.id(p).unwrap());
            last_was_base = false;
        }
    }
    Ok(out)
}

fn scan_symbols(
    symbols: &[usize],
    vocab: &RichVocab,
    strict: bool,
) -> Result<(DecoratedTranscript, Vec<Option<usize>>), TextError> {
    let mut words: Vec<Word> = Vec::new();
    let mut attribution = vec![None; symbols.len()];
    let mut role: Option<SpeakerRole> = None;
    // text and capitalization of the word being spelled
    let mut cur: Option<(String, bool)> = None;
    let mut pending_cap = false;
    let mut punct_open = false; // last closed word can still take punctuation
    let err = |pos: usize, msg: String| TextError::Parse { pos, msg };

    fn close(cur: &mut Option<(String, bool)>, words: &mut Vec<Word>, role: Option<SpeakerRole>) {
        if let Some((text, capitalized)) = cur.take() {
            words.push(Word {
                text,
                speaker_role: role.unwrap_or(SpeakerRole::Other),
                capitalized,
                trailing_punct: Punct::None,
            });
        }
    }

    for (pos, &id) in symbols.iter().enumerate() {
        if id >= vocab.len() {
            return Err(err(pos, format!("symbol id {id} out of vocab")));
        }
        if id == vocab.blank_id() {
            if strict {
                return Err(err(pos, "blank in serialized text".into()));
            }
            continue;
        }
        if let Some(r) = vocab.role_of(id) {
            if strict && pending_cap {
                return Err(err(pos, format!("dangling {CAP_TOKEN}")));
            }
            if strict && role == Some(r) {
                return Err(err(pos, "redundant speaker token".into()));
            }
            close(&mut cur, &mut words, role);
            role = Some(r);
            pending_cap = false;
            punct_open = false;
        } else if let Some(p) = vocab.punct_of(id) {
            if cur.is_some() {
                close(&mut cur, &mut words, role);
                punct_open = true;
            }
            if strict && (!punct_open || pending_cap) {
                return Err(err(pos, "punctuation does not follow a word".into()));
            }
            if punct_open {
                words.last_mut().unwrap().trailing_punct = p;
            }
            punct_open = false;
            pending_cap = false;
        } else if vocab.is_cap(id) {
            if strict && pending_cap {
                return Err(err(pos, format!("doubled {CAP_TOKEN}")));
            }
            close(&mut cur, &mut words, role);
            pending_cap = true;
            punct_open = false;
        } else if vocab.is_sep(id) {
            if strict && cur.is_none() {
                return Err(err(pos, "separator without a preceding word".into()));
            }
            close(&mut cur, &mut words, role);
            punct_open = false;
        } else {
            // base unit: opens a word if none is in progress
            if cur.is_none() {
                if role.is_none() {
                    if strict {
                        return Err(err(pos, "word before any speaker token".into()));
                    }
                    role = Some(SpeakerRole::Other);
                }
                cur = Some((String::new(), pending_cap));
                pending_cap = false;
            }
            cur.as_mut().unwrap().0.push_str(vocab.token(id));
            attribution[pos] = Some(words.len());
            punct_open = false;
        }
    }
    if strict && pending_cap {
        return Err(err(symbols.len(), format!("dangling {CAP_TOKEN}")));
    }
    close(&mut cur, &mut words, role);
    Ok((DecoratedTranscript { words }, attribution))
}

/// Strict symbol-to-transcript decode; rejects grammar violations.
pub fn from_symbols(symbols: &[usize], vocab: &RichVocab) -> Result<DecoratedTranscript, TextError> {
    scan_symbols(symbols, vocab, true).map(|(t, _)| t)
}

/// Lenient decode for hypotheses: never fails, repairs violations
/// (role carried forward, stray punctuation and separators dropped,
/// default role for words before any speaker token).
pub fn from_symbols_lossy(symbols: &[usize], vocab: &RichVocab) -> DecoratedTranscript {
    scan_symbols(symbols, vocab, false)
        .expect("lenient scan cannot fail")
        .0
}

/// For each symbol, the word index its base unit spells (None for rich
/// tokens, separators, and blanks). Lenient.
pub fn symbol_word_attribution(symbols: &[usize], vocab: &RichVocab) -> Vec<Option<usize>> {
    scan_symbols(symbols, vocab, false)
        .expect("lenient scan cannot fail")
        .1
}

/// The speaker role in effect at each symbol: speaker tokens switch it,
/// spelled units take their word's role, other tokens carry it forward.
pub fn symbol_roles(
    symbols: &[usize],
    reference: &DecoratedTranscript,
    vocab: &RichVocab,
) -> Vec<SpeakerRole> {
    let attribution = symbol_word_attribution(symbols, vocab);
    let mut current = reference.words.first().map(|w| w.speaker_role);
    let mut out = Vec::with_capacity(symbols.len());
    for (i, &id) in symbols.iter().enumerate() {
        if let Some(r) = vocab.role_of(id) {
            current = Some(r);
        }
        if let Some(w) = attribution[i] {
            current = Some(reference.words[w].speaker_role);
        }
        out.push(current.unwrap_or(SpeakerRole::Other));
    }
    out
}

/// One utterance: features, reference transcript, optional segment frame
/// ranges and a grapheme-level emission-frame alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// T rows of feature_dim values.
    pub frames: Vec<Vec<f64>>,
    pub reference: DecoratedTranscript,
    /// Half-open frame ranges partitioning [0, T).
    pub segments: Vec<(usize, usize)>,
    /// Emission frame (last frame of the symbol's span) per symbol of the
    /// grapheme-level serialization of `reference`.
    pub alignment: Option<Vec<usize>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct UtteranceRecord {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<Vec<f32>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth_ref: Option<String>,
    reference: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    segments: Option<Vec<(usize, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alignment: Option<Vec<usize>>,
}

/// Write utterances as JSONL (one record per line, frames as 32-bit reals).
pub fn write_jsonl(path: &Path, utts: &[Utterance]) -> Result<(), TextError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in utts {
        let rec = UtteranceRecord {
            id: u.id.clone(),
            frames: Some(
                u.frames
                    .iter()
                    .map(|row| row.iter().map(|&v| v as f32).collect())
                    .collect(),
            ),
            synth_ref: None,
            reference: render_decorated(&u.reference),
            segments: if u.segments.is_empty() {
                None
            } else {
                Some(u.segments.clone())
            },
            alignment: u.alignment.clone(),
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSONL dataset written by `write_jsonl`.
pub fn read_jsonl(path: &Path) -> Result<Vec<Utterance>, TextError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord =
            serde_json::from_str(&line).map_err(|e| TextError::DataLine {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let Some(frames) = rec.frames else {
            return Err(TextError::DataLine {
                line: i + 1,
                msg: format!(
                    "record {} has no frames (synth_ref-only records must be regenerated)",
                    rec.id
                ),
            });
        };
        let frames: Vec<Vec<f64>> = frames
            .into_iter()
            .map(|row| row.into_iter().map(|v| v as f64).collect())
            .collect();
        let reference = parse_decorated(&rec.reference).map_err(|e| TextError::DataLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let t_len = frames.len();
        let segments = rec.segments.unwrap_or_else(|| {
            if t_len == 0 {
                Vec::new()
            } else {
                vec![(0, t_len)]
            }
        });
        out.push(Utterance {
            id: rec.id,
            frames,
            reference,
            segments,
            alignment: rec.alignment,
        });
    }
    Ok(out)
}

/// Write a vocab file: one token per line, index = line number, blank last.
pub fn write_vocab(path: &Path, vocab: &RichVocab) -> Result<(), TextError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in vocab.tokens() {
        writeln!(f, "{t}")?;
    }
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<RichVocab, TextError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut tokens = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            tokens.push(line.trim().to_string());
        }
    }
    RichVocab::from_tokens(tokens)
}

/// Merge the most frequent within-word grapheme bigrams into two-character
/// units on top of the singleton alphabet.
pub fn build_merged_vocab(
    utts: &[Utterance],
    alphabet: usize,
    n_merges: usize,
) -> Result<RichVocab, TextError> {
    let mut counts: std::collections::BTreeMap<(char, char), u64> = Default::default();
    for u in utts {
        for w in &u.reference.words {
            let cs: Vec<char> = w.text.chars().collect();
            for pair in cs.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += 1;
            }
        }
    }
    let mut pairs: Vec<((char, char), u64)> = counts.into_iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut base: Vec<String> = (0..alphabet)
        .map(|i| ((b'a' + i as u8) as char).to_string())
        .collect();
    for ((a, b), _) in pairs.into_iter().take(n_merges) {
        base.push(format!("{a}{b}"));
    }
    RichVocab::new(base)
}

/// Distribution over trailing punctuation at clause ends; the remainder
/// mass goes to "no punctuation".
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PunctProbs {
    pub period: f64,
    pub comma: f64,
    pub question: f64,
}

impl PunctProbs {
    fn validate(&self) -> Result<(), TextError> {
        let s = self.period + self.comma + self.question;
        if !(0.0..=1.0 + 1e-9).contains(&s)
            || self.period < 0.0
            || self.comma < 0.0
            || self.question < 0.0
        {
            return Err(TextError::Spec(format!(
                "punct_probs must be non-negative and sum to <= 1 (got {s})"
            )));
        }
        Ok(())
    }
}

/// Generator spec for synthetic conversations.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_conversations: usize,
    /// Number of single-grapheme base symbols (2..=26).
    pub vocab_size: usize,
    /// Number of distinct speaker roles in play (1..=4).
    pub speakers: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Words per clause, inclusive.
    pub clause_len_range: (usize, usize),
    pub punct_probs: PunctProbs,
    /// P(turn ends after each clause); turn length is geometric.
    pub turn_len_geometric_p: f64,
    /// Frames emitted per symbol, inclusive.
    pub frames_per_symbol_range: (usize, usize),
    /// Scale of the additive per-role feature offset.
    #[serde(default = "default_role_offset")]
    pub role_offset_scale: f64,
}

fn default_role_offset() -> f64 {
    0.25
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 17,
            n_conversations: 50,
            vocab_size: 12,
            speakers: 2,
            feature_dim: 8,
            noise_sigma: 0.3,
            clause_len_range: (2, 5),
            punct_probs: PunctProbs {
                period: 0.45,
                comma: 0.25,
                question: 0.15,
            },
            turn_len_geometric_p: 0.5,
            frames_per_symbol_range: (2, 4),
            role_offset_scale: 0.25,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), TextError> {
        if self.vocab_size < 2 {
            return Err(TextError::Spec(format!(
                "vocab_size must be >= 2 (got {})",
                self.vocab_size
            )));
        }
        if self.vocab_size > 26 {
            return Err(TextError::Spec("vocab_size must be <= 26".into()));
        }
        if !(1..=4).contains(&self.speakers) {
            return Err(TextError::Spec("speakers must be in 1..=4".into()));
        }
        if self.feature_dim == 0 {
            return Err(TextError::Spec("feature_dim must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(TextError::Spec("noise_sigma must be >= 0".into()));
        }
        let (cl, ch) = self.clause_len_range;
        if cl == 0 || cl > ch {
            return Err(TextError::Spec("bad clause_len_range".into()));
        }
        let (fl, fh) = self.frames_per_symbol_range;
        if fl == 0 || fl > fh {
            return Err(TextError::Spec("bad frames_per_symbol_range".into()));
        }
        if !(0.0..=1.0).contains(&self.turn_len_geometric_p) || self.turn_len_geometric_p <= 0.0 {
            return Err(TextError::Spec("turn_len_geometric_p must be in (0, 1]".into()));
        }
        self.punct_probs.validate()
    }

    /// The grapheme-level vocab the generator serializes against.
    pub fn vocab(&self) -> RichVocab {
        RichVocab::graphemes(self.vocab_size).expect("validated")
    }
}

fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; one value per call keeps the stream simple.
    loop {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let v: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        if z.is_finite() {
            return z;
        }
    }
}

fn as_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Mean vectors per symbol and per role, drawn once from the spec seed.
struct FeatureTables {
    mu: Vec<Vec<f64>>,
    nu: Vec<Vec<f64>>,
}

fn feature_tables(spec: &SynthSpec, vocab: &RichVocab) -> FeatureTables {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let mu = (0..vocab.len())
        .map(|_| (0..spec.feature_dim).map(|_| gauss(&mut rng)).collect())
        .collect();
    let nu = (0..ALL_ROLES.len())
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| spec.role_offset_scale * gauss(&mut rng))
                .collect()
        })
        .collect();
    FeatureTables { mu, nu }
}

/// Deterministic synthetic conversations with exact frame alignments.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<Utterance>, TextError> {
    spec.validate()?;
    let vocab = spec.vocab();
    let tables = feature_tables(spec, &vocab);
    let roles = &ALL_ROLES[..spec.speakers];
    let mut out = Vec::with_capacity(spec.n_conversations);
    for c in 0..spec.n_conversations {
        // one independent stream per conversation: splittable and stable
        // under changes to n_conversations
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64 + 1);

        // conversation plan: turns of clauses of words
        let n_turns = rng.gen_range(2..=5usize);
        let mut words: Vec<Word> = Vec::new();
        let mut clause_ends: Vec<usize> = Vec::new(); // word index of last word per clause
        let mut role = roles[rng.gen_range(0..roles.len())];
        for turn in 0..n_turns {
            if turn > 0 && roles.len() > 1 {
                let mut r = role;
                while r == role {
                    r = roles[rng.gen_range(0..roles.len())];
                }
                role = r;
            }
            let mut clauses = 1usize;
            while clauses < 8 && rng.gen::<f64>() > spec.turn_len_geometric_p {
                clauses += 1;
            }
            for _ in 0..clauses {
                let n_words = rng.gen_range(spec.clause_len_range.0..=spec.clause_len_range.1);
                for _ in 0..n_words {
                    let len = rng.gen_range(2..=5usize);
                    let text: String = (0..len)
                        .map(|_| (b'a' + rng.gen_range(0..spec.vocab_size) as u8) as char)
                        .collect();
                    words.push(Word {
                        text,
                        speaker_role: role,
                        capitalized: false,
                        trailing_punct: Punct::None,
                    });
                }
                let p: f64 = rng.gen();
                let pp = spec.punct_probs;
                let punct = if p < pp.period {
                    Punct::Period
                } else if p < pp.period + pp.comma {
                    Punct::Comma
                } else if p < pp.period + pp.comma + pp.question {
                    Punct::Question
                } else {
                    Punct::None
                };
                words.last_mut().unwrap().trailing_punct = punct;
                clause_ends.push(words.len() - 1);
            }
        }
        // capitalization: conversation start and after sentence-final marks
        let mut cap_next = true;
        for w in &mut words {
            w.capitalized = cap_next;
            cap_next = matches!(w.trailing_punct, Punct::Period | Punct::Question);
        }
        let reference = DecoratedTranscript { words };
        let symbols = to_symbols(&reference, &vocab)?;
        let attribution = symbol_word_attribution(&symbols, &vocab);

        // role per symbol follows the word structure; rich tokens take the
        // role of the turn they open or sit inside
        let sym_roles = symbol_roles(&symbols, &reference, &vocab);

        // emit frames
        let mut frames: Vec<Vec<f64>> = Vec::new();
        let mut alignment = Vec::with_capacity(symbols.len());
        let mut word_last_frame: Vec<usize> = vec![0; reference.words.len()];
        for (i, &id) in symbols.iter().enumerate() {
            let n = rng.gen_range(spec.frames_per_symbol_range.0..=spec.frames_per_symbol_range.1);
            let role_idx = ALL_ROLES.iter().position(|&r| r == sym_roles[i]).unwrap();
            for _ in 0..n {
                let row: Vec<f64> = (0..spec.feature_dim)
                    .map(|d| {
                        as_f32(
                            tables.mu[id][d]
                                + tables.nu[role_idx][d]
                                + spec.noise_sigma * gauss(&mut rng),
                        )
                    })
                    .collect();
                frames.push(row);
            }
            alignment.push(frames.len() - 1);
            if let Some(w) = attribution[i] {
                word_last_frame[w] = frames.len() - 1;
            }
        }

        // segments at clause boundaries: each clause covers through the
        // last frame of its final word's symbols (incl. trailing punct)
        let mut segments = Vec::with_capacity(clause_ends.len());
        let mut start = 0usize;
        for (ci, &we) in clause_ends.iter().enumerate() {
            // the clause ends at the last frame emitted for any symbol
            // attributed to a word <= we, including that word's punct token
            let mut end = word_last_frame[we] + 1;
            for (i, &a) in alignment.iter().enumerate() {
                let after_word = attribution[i].map_or(false, |w| w > we);
                if !after_word && a + 1 > end && attribution[i].is_none() {
                    // rich token between clause-end word and next word:
                    // count it into this clause only if it is punctuation
                    if vocab.punct_of(symbols[i]).is_some()
                        && i > 0
                        && attribution[..i].iter().flatten().next_back() == Some(&we)
                    {
                        end = a + 1;
                    }
                }
            }
            if ci == clause_ends.len() - 1 {
                end = frames.len();
            }
            segments.push((start, end));
            start = end;
        }

        out.push(Utterance {
            id: format!("conv{c:04}"),
            frames,
            reference,
            segments,
            alignment: Some(alignment),
        });
    }
    Ok(out)
}

/// Re-express a grapheme-level alignment for another unit vocab (e.g.
/// merged bigrams): a merged unit's emission frame is its last constituent
/// grapheme's emission frame.
pub fn realign(
    reference: &DecoratedTranscript,
    grapheme_alignment: &[usize],
    grapheme_vocab: &RichVocab,
    target_vocab: &RichVocab,
) -> Result<Vec<usize>, TextError> {
    let sym_g = to_symbols(reference, grapheme_vocab)?;
    if sym_g.len() != grapheme_alignment.len() {
        return Err(TextError::Vocab(format!(
            "alignment length {} does not match grapheme serialization {}",
            grapheme_alignment.len(),
            sym_g.len()
        )));
    }
    let sym_t = to_symbols(reference, target_vocab)?;
    let mut out = Vec::with_capacity(sym_t.len());
    let mut gi = 0usize;
    for &id in &sym_t {
        let tok = target_vocab.token(id);
        if target_vocab.is_base_unit(id) {
            let n = tok.chars().count();
            // consume n grapheme units
            for _ in 0..n {
                if gi >= sym_g.len() || !grapheme_vocab.is_base_unit(sym_g[gi]) {
                    return Err(TextError::Vocab("unit streams out of sync".into()));
                }
                gi += 1;
            }
            out.push(grapheme_alignment[gi - 1]);
        } else {
            if gi >= sym_g.len() || grapheme_vocab.token(sym_g[gi]) != tok {
                return Err(TextError::Vocab("unit streams out of sync".into()));
            }
            out.push(grapheme_alignment[gi]);
            gi += 1;
        }
    }
    Ok(out)
}

/// Map raw-frame emission times to post-subsampling output indices; valid
/// as an `AlignmentPath` over ceil(T/s) frames.
pub fn subsample_alignment(alignment: &[usize], t_raw: usize, factor: usize) -> Vec<usize> {
    if t_raw == 0 {
        return alignment.to_vec();
    }
    let t_out = t_raw.div_ceil(factor);
    alignment
        .iter()
        .map(|&t| (t / factor).min(t_out - 1))
        .collect()
}

/// Build the AlignmentPath for emission frames over `t_len` frames.
pub fn alignment_path(emit_frames: &[usize], t_len: usize) -> AlignmentPath {
    AlignmentPath::from_emit_frames(emit_frames, t_len)
}
