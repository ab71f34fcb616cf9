//! Corpus evaluation: word error rate with full alignments, word-level
//! speaker attribution error, per-mark slot error rates, confidence
//! calibration (NCE, ECE, ROC/PRC and NPV-TNR areas), and span F1.

use crate::textio::{DecoratedTranscript, Punct};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("undefined metric: {0}")]
    Undefined(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EditOp {
    Match { ref_idx: usize, hyp_idx: usize },
    Substitute { ref_idx: usize, hyp_idx: usize },
    Delete { ref_idx: usize },
    Insert { hyp_idx: usize },
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct WordAlignment {
    pub ops: Vec<EditOp>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WerResult {
    pub wer: f64,
    pub matches: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub alignment: WordAlignment,
}

/// Minimal-cost word alignment (unit costs). Ties in the backtrace prefer
/// Match, then Substitute, then Delete, then Insert.
pub fn wer<S: AsRef<str>, T: AsRef<str>>(r: &[S], h: &[T]) -> WerResult {
    let (n, m) = (r.len(), h.len());
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[idx(i, 0)] = i;
    }
    for j in 0..=m {
        d[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = r[i - 1].as_ref() == h[j - 1].as_ref();
            let diag = d[idx(i - 1, j - 1)] + if same { 0 } else { 1 };
            let del = d[idx(i - 1, j)] + 1;
            let ins = d[idx(i, j - 1)] + 1;
            d[idx(i, j)] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[idx(i, j)];
        if i > 0 && j > 0 {
            let same = r[i - 1].as_ref() == h[j - 1].as_ref();
            if same && cur == d[idx(i - 1, j - 1)] {
                ops.push(EditOp::Match { ref_idx: i - 1, hyp_idx: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && cur == d[idx(i - 1, j - 1)] + 1 {
                ops.push(EditOp::Substitute { ref_idx: i - 1, hyp_idx: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cur == d[idx(i - 1, j)] + 1 {
            ops.push(EditOp::Delete { ref_idx: i - 1 });
            i -= 1;
            continue;
        }
        ops.push(EditOp::Insert { hyp_idx: j - 1 });
        j -= 1;
    }
    ops.reverse();
    let mut res = WerResult {
        wer: 0.0,
        matches: 0,
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        ref_len: n,
        alignment: WordAlignment { ops },
    };
    for op in &res.alignment.ops {
        match op {
            EditOp::Match { .. } => res.matches += 1,
            EditOp::Substitute { .. } => res.substitutions += 1,
            EditOp::Delete { .. } => res.deletions += 1,
            EditOp::Insert { .. } => res.insertions += 1,
        }
    }
    let errors = res.substitutions + res.deletions + res.insertions;
    res.wer = if n == 0 {
        if errors == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        errors as f64 / n as f64
    };
    res
}

fn texts(t: &DecoratedTranscript) -> Vec<&str> {
    t.words.iter().map(|w| w.text.as_str()).collect()
}

/// Fraction of aligned (matched or substituted) word pairs whose speaker
/// roles disagree; deletions and insertions are excluded entirely.
pub fn wder(r: &DecoratedTranscript, h: &DecoratedTranscript) -> Result<f64, MetricError> {
    let res = wer(&texts(r), &texts(h));
    let mut pairs = 0usize;
    let mut wrong = 0usize;
    for op in &res.alignment.ops {
        let (ri, hi) = match op {
            EditOp::Match { ref_idx, hyp_idx } | EditOp::Substitute { ref_idx, hyp_idx } => {
                (*ref_idx, *hyp_idx)
            }
            _ => continue,
        };
        pairs += 1;
        if r.words[ri].speaker_role != h.words[hi].speaker_role {
            wrong += 1;
        }
    }
    if pairs == 0 {
        return Err(MetricError::Undefined(
            "speaker attribution needs at least one aligned word pair".into(),
        ));
    }
    Ok(wrong as f64 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SlotKind {
    Period,
    Comma,
    Question,
    Cap,
}

impl SlotKind {
    pub const ALL: [SlotKind; 4] = [
        SlotKind::Period,
        SlotKind::Comma,
        SlotKind::Question,
        SlotKind::Cap,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SlotKind::Period => ".",
            SlotKind::Comma => ",",
            SlotKind::Question => "?",
            SlotKind::Cap => "cap",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SlotCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_slots: usize,
}

impl SlotCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> Result<f64, MetricError> {
        if self.ref_slots == 0 {
            return Err(MetricError::Undefined(
                "no reference slots of this kind".into(),
            ));
        }
        Ok(self.errors() as f64 / self.ref_slots as f64)
    }

    pub fn merge(&mut self, other: &SlotCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_slots += other.ref_slots;
    }
}

fn word_slot(w: &crate::textio::Word, kind: SlotKind) -> bool {
    match kind {
        SlotKind::Period => w.trailing_punct == Punct::Period,
        SlotKind::Comma => w.trailing_punct == Punct::Comma,
        SlotKind::Question => w.trailing_punct == Punct::Question,
        SlotKind::Cap => w.capitalized,
    }
}

fn has_any_punct(w: &crate::textio::Word) -> bool {
    w.trailing_punct != Punct::None
}

/// Slot error counts for one mark family. Slots ride on their word: an
/// aligned pair with the family's mark replaced by a different mark is a
/// substitution (counted in both families), a mark against nothing is a
/// deletion or insertion, and marks on deleted/inserted words follow the
/// word.
pub fn slot_counts(
    r: &DecoratedTranscript,
    h: &DecoratedTranscript,
    kind: SlotKind,
) -> SlotCounts {
    let res = wer(&texts(r), &texts(h));
    slot_counts_aligned(r, h, &res.alignment, kind)
}

/// Same as `slot_counts` with the word alignment precomputed (shared
/// across families).
pub fn slot_counts_aligned(
    r: &DecoratedTranscript,
    h: &DecoratedTranscript,
    alignment: &WordAlignment,
    kind: SlotKind,
) -> SlotCounts {
    let mut c = SlotCounts::default();
    c.ref_slots = r.words.iter().filter(|w| word_slot(w, kind)).count();
    for op in &alignment.ops {
        match op {
            EditOp::Match { ref_idx, hyp_idx } | EditOp::Substitute { ref_idx, hyp_idx } => {
                let rw = &r.words[*ref_idx];
                let hw = &h.words[*hyp_idx];
                let rs = word_slot(rw, kind);
                let hs = word_slot(hw, kind);
                if rs == hs {
                    continue;
                }
                if kind == SlotKind::Cap {
                    // capitalization has no cross-mark confusions
                    if rs {
                        c.deletions += 1;
                    } else {
                        c.insertions += 1;
                    }
                } else if rs {
                    // the family's mark was replaced by another mark, or
                    // dropped entirely
                    if has_any_punct(hw) {
                        c.substitutions += 1;
                    } else {
                        c.deletions += 1;
                    }
                } else {
                    // the hypothesis put this mark where the reference had
                    // a different mark (substitution) or none (insertion)
                    if has_any_punct(rw) {
                        c.substitutions += 1;
                    } else {
                        c.insertions += 1;
                    }
                }
            }
            EditOp::Delete { ref_idx } => {
                if word_slot(&r.words[*ref_idx], kind) {
                    c.deletions += 1;
                }
            }
            EditOp::Insert { hyp_idx } => {
                if word_slot(&h.words[*hyp_idx], kind) {
                    c.insertions += 1;
                }
            }
        }
    }
    c
}

/// Slot error rate for one mark family: (S + D + I) / reference slots.
pub fn ser(
    r: &DecoratedTranscript,
    h: &DecoratedTranscript,
    kind: SlotKind,
) -> Result<f64, MetricError> {
    slot_counts(r, h, kind).rate()
}

const CONF_EPS: f64 = 1e-7;

fn clamp_conf(c: f64) -> f64 {
    c.clamp(CONF_EPS, 1.0 - CONF_EPS)
}

/// Normalized cross-entropy of word confidences against correctness
/// labels: 1 for perfect confidence, 0 for always predicting the base
/// rate, negative when worse than the base rate.
pub fn nce(confidences: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    assert_eq!(confidences.len(), labels.len());
    let n = labels.len();
    let n_c = labels.iter().filter(|&&l| l).count();
    if n == 0 || n_c == 0 || n_c == n {
        return Err(MetricError::Undefined(
            "confidence entropy needs both correct and incorrect words".into(),
        ));
    }
    let p_c = n_c as f64 / n as f64;
    let h_base = -((n_c as f64) * p_c.ln() + (n - n_c) as f64 * (1.0 - p_c).ln());
    let mut h_conf = 0.0;
    for (&c, &l) in confidences.iter().zip(labels) {
        let c = clamp_conf(c);
        h_conf -= if l { c.ln() } else { (1.0 - c).ln() };
    }
    Ok((h_base - h_conf) / h_base)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CalibrationReport {
    pub nce: f64,
    pub ece: f64,
    pub auc_roc: f64,
    pub auc_prc: f64,
    pub auc_npv_tnr: f64,
}

/// Expected calibration error with equal-width confidence bins.
pub fn ece(confidences: &[f64], labels: &[bool], bins: usize) -> f64 {
    assert!(bins >= 1);
    let n = confidences.len();
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    for (&c, &l) in confidences.iter().zip(labels) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        acc_sum[b] += if l { 1.0 } else { 0.0 };
    }
    let mut e = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let k = count[b] as f64;
        e += (acc_sum[b] / k - conf_sum[b] / k).abs() * k / n as f64;
    }
    e
}

/// Sorted distinct thresholds plus cumulative counts per group, shared by
/// the ranking curves. Returns (threshold, positives, negatives) per
/// distinct confidence, sorted descending.
fn grouped_desc(confidences: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut pairs: Vec<(f64, bool)> = confidences.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite confidence"));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (c, l) in pairs {
        match groups.last_mut() {
            Some(g) if g.0 == c => {
                if l {
                    g.1 += 1;
                } else {
                    g.2 += 1;
                }
            }
            _ => groups.push((c, usize::from(l), usize::from(!l))),
        }
    }
    groups
}

/// Receiver operating characteristic area, exact over the step curve
/// (tied scores contribute diagonal segments).
pub fn auc_roc(confidences: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined(
            "ranking curves need both correct and incorrect words".into(),
        ));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut area = 0.0;
    for (_, gp, gn) in grouped_desc(confidences, labels) {
        let (tpr0, fpr0) = (tp as f64 / n_pos as f64, fp as f64 / n_neg as f64);
        tp += gp;
        fp += gn;
        let (tpr1, fpr1) = (tp as f64 / n_pos as f64, fp as f64 / n_neg as f64);
        area += (fpr1 - fpr0) * (tpr0 + tpr1) / 2.0;
    }
    Ok(area)
}

/// Precision-recall area by trapezoid over threshold points, anchored at
/// (recall 0, precision 1).
pub fn auc_prc(confidences: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(MetricError::Undefined(
            "ranking curves need both correct and incorrect words".into(),
        ));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev = (0.0, 1.0); // (recall, precision)
    let mut area = 0.0;
    for (_, gp, gn) in grouped_desc(confidences, labels) {
        tp += gp;
        fp += gn;
        let r = tp as f64 / n_pos as f64;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - prev.0) * (prev.1 + p) / 2.0;
        prev = (r, p);
    }
    Ok(area)
}

/// Area under the negative-predictive-value vs true-negative-rate curve
/// for flagging incorrect words: sweep a threshold t (predict incorrect
/// when confidence < t); TNR is the fraction of actually-incorrect words
/// flagged and NPV the fraction of flagged words actually incorrect. The
/// curve is integrated as a right-continuous step in TNR, anchored at
/// (0, base rate) and closed at TNR=1 by flagging everything.
pub fn auc_npv_tnr(confidences: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let n = labels.len();
    let n_i = labels.iter().filter(|&&l| !l).count();
    if n_i == 0 {
        return Err(MetricError::Undefined(
            "negative-predictive sweep needs at least one incorrect word".into(),
        ));
    }
    let p_i = n_i as f64 / n as f64;
    let mut asc = grouped_desc(confidences, labels);
    asc.reverse();
    let mut points: Vec<(f64, f64)> = vec![(0.0, p_i)];
    let mut flagged = 0usize; // predicted incorrect so far (c < t)
    let mut flagged_inc = 0usize; // of those, actually incorrect
    for (_, gp, gn) in &asc {
        // threshold at this confidence flags everything strictly below it
        let tnr = flagged_inc as f64 / n_i as f64;
        let npv = if flagged == 0 {
            p_i
        } else {
            flagged_inc as f64 / flagged as f64
        };
        points.push((tnr, npv));
        flagged += gp + gn;
        flagged_inc += gn;
    }
    // threshold above every confidence: flag all words
    points.push((1.0, p_i));
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((t0, _), (t1, n1)) = (w[0], w[1]);
        area += (t1 - t0) * n1;
    }
    Ok(area)
}

/// All calibration numbers in one pass.
pub fn calibration_report(
    confidences: &[f64],
    labels: &[bool],
    bins: usize,
) -> Result<CalibrationReport, MetricError> {
    if confidences.is_empty() {
        return Err(MetricError::Undefined("no scored words".into()));
    }
    Ok(CalibrationReport {
        nce: nce(confidences, labels)?,
        ece: ece(confidences, labels, bins),
        auc_roc: auc_roc(confidences, labels)?,
        auc_prc: auc_prc(confidences, labels)?,
        auc_npv_tnr: auc_npv_tnr(confidences, labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TagSpan {
    pub label: String,
    /// First word of the span.
    pub start: usize,
    /// Last word of the span (inclusive).
    pub end: usize,
}

impl TagSpan {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            label: label.into(),
            start,
            end,
        }
    }

    /// Top-level ontology group of a possibly nested label.
    pub fn ontology(&self) -> &str {
        self.label.split('/').next().unwrap_or(&self.label)
    }
}

/// Exact-match span F1: a hypothesis span counts only if label, start,
/// and end all agree. Both sides empty scores 1 by convention.
pub fn tag_f1(ref_spans: &[TagSpan], hyp_spans: &[TagSpan]) -> f64 {
    if ref_spans.is_empty() && hyp_spans.is_empty() {
        return 1.0;
    }
    if ref_spans.is_empty() || hyp_spans.is_empty() {
        return 0.0;
    }
    let mut ref_counts: BTreeMap<(&str, usize, usize), usize> = BTreeMap::new();
    for s in ref_spans {
        *ref_counts.entry((s.label.as_str(), s.start, s.end)).or_insert(0) += 1;
    }
    let mut tp = 0usize;
    for s in hyp_spans {
        if let Some(c) = ref_counts.get_mut(&(s.label.as_str(), s.start, s.end)) {
            if *c > 0 {
                *c -= 1;
                tp += 1;
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / hyp_spans.len() as f64;
    let r = tp as f64 / ref_spans.len() as f64;
    2.0 * p * r / (p + r)
}

/// Span F1 grouped by top-level ontology label.
pub fn tag_f1_per_ontology(
    ref_spans: &[TagSpan],
    hyp_spans: &[TagSpan],
) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, (Vec<TagSpan>, Vec<TagSpan>)> = BTreeMap::new();
    for s in ref_spans {
        groups.entry(s.ontology().to_string()).or_default().0.push(s.clone());
    }
    for s in hyp_spans {
        groups.entry(s.ontology().to_string()).or_default().1.push(s.clone());
    }
    groups
        .into_iter()
        .map(|(k, (r, h))| {
            let f = tag_f1(&r, &h);
            (k, f)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textio::{SpeakerRole, Word};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn words(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn transcript(spec: &[(&str, SpeakerRole, bool, Punct)]) -> DecoratedTranscript {
        DecoratedTranscript {
            words: spec
                .iter()
                .map(|(t, r, c, p)| Word {
                    text: t.to_string(),
                    speaker_role: *r,
                    capitalized: *c,
                    trailing_punct: *p,
                })
                .collect(),
        }
    }

    #[test]
    fn wer_worked_example() {
        let res = wer(&words(&["a", "b", "c", "d"]), &words(&["a", "x", "c"]));
        assert!((res.wer - 0.5).abs() < 1e-12);
        assert_eq!(res.substitutions, 1);
        assert_eq!(res.deletions, 1);
        assert_eq!(res.insertions, 0);
        assert_eq!(res.matches, 2);
    }

    #[test]
    fn wer_identical_and_empty() {
        let res = wer(&words(&["a", "b"]), &words(&["a", "b"]));
        assert_eq!(res.wer, 0.0);
        let res = wer::<String, String>(&[], &[]);
        assert_eq!(res.wer, 0.0);
        let res = wer::<String, _>(&[], &words(&["x", "y"]));
        assert!(res.wer.is_infinite());
        assert_eq!(res.insertions, 2);
    }

    fn brute_cost(r: &[&str], h: &[&str]) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        let sub = brute_cost(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
        let del = brute_cost(&r[1..], h) + 1;
        let ins = brute_cost(r, &h[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn wer_matches_bruteforce_oracle() {
        let mut rng = StdRng::seed_from_u64(31);
        let alpha = ["a", "b", "c"];
        for _ in 0..60 {
            let r: Vec<&str> = (0..rng.gen_range(0..=6))
                .map(|_| alpha[rng.gen_range(0..3)])
                .collect();
            let h: Vec<&str> = (0..rng.gen_range(0..=6))
                .map(|_| alpha[rng.gen_range(0..3)])
                .collect();
            let res = wer(&r, &h);
            let cost = res.substitutions + res.deletions + res.insertions;
            assert_eq!(cost, brute_cost(&r, &h), "r={r:?} h={h:?}");
            // indices strictly increasing per side
            let mut last_r = None;
            let mut last_h = None;
            for op in &res.alignment.ops {
                match op {
                    EditOp::Match { ref_idx, hyp_idx }
                    | EditOp::Substitute { ref_idx, hyp_idx } => {
                        assert!(last_r.map_or(true, |x| *ref_idx > x));
                        assert!(last_h.map_or(true, |x| *hyp_idx > x));
                        last_r = Some(*ref_idx);
                        last_h = Some(*hyp_idx);
                    }
                    EditOp::Delete { ref_idx } => {
                        assert!(last_r.map_or(true, |x| *ref_idx > x));
                        last_r = Some(*ref_idx);
                    }
                    EditOp::Insert { hyp_idx } => {
                        assert!(last_h.map_or(true, |x| *hyp_idx > x));
                        last_h = Some(*hyp_idx);
                    }
                }
            }
        }
    }

    #[test]
    fn wer_cost_is_symmetric_modulo_renaming() {
        let mut rng = StdRng::seed_from_u64(32);
        let alpha = ["a", "b", "c", "d"];
        for _ in 0..30 {
            let r: Vec<&str> = (0..rng.gen_range(0..=6))
                .map(|_| alpha[rng.gen_range(0..4)])
                .collect();
            let h: Vec<&str> = (0..rng.gen_range(0..=6))
                .map(|_| alpha[rng.gen_range(0..4)])
                .collect();
            let fwd = wer(&r, &h);
            let bwd = wer(&h, &r);
            assert_eq!(fwd.substitutions, bwd.substitutions);
            assert_eq!(fwd.deletions, bwd.insertions);
            assert_eq!(fwd.insertions, bwd.deletions);
        }
    }

    #[test]
    fn wder_examples() {
        use Punct::None as PN;
        use SpeakerRole::*;
        let r = transcript(&[("a", Dr, false, PN), ("b", Dr, false, PN), ("c", Pt, false, PN)]);
        let h = transcript(&[("a", Dr, false, PN), ("b", Pt, false, PN), ("c", Pt, false, PN)]);
        assert!((wder(&r, &h).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wder(&r, &r).unwrap(), 0.0);
        let flipped = transcript(&[("a", Pt, false, PN), ("b", Pt, false, PN), ("c", Dr, false, PN)]);
        assert_eq!(wder(&r, &flipped).unwrap(), 1.0);
        // no aligned pairs at all
        let empty = transcript(&[]);
        assert!(wder(&r, &empty).is_err());
    }

    #[test]
    fn ser_worked_example() {
        use Punct::*;
        use SpeakerRole::Dr;
        let r = transcript(&[
            ("a", Dr, false, Period),
            ("b", Dr, false, Period),
            ("c", Dr, false, Comma),
            ("d", Dr, false, None),
        ]);
        let h = transcript(&[
            ("a", Dr, false, Period),
            ("b", Dr, false, None),
            ("c", Dr, false, Period),
            ("d", Dr, false, Question),
        ]);
        // '.' family: the comma position now carries '.', one '.' dropped
        let c = slot_counts(&r, &h, SlotKind::Period);
        assert_eq!((c.substitutions, c.deletions, c.insertions, c.ref_slots), (1, 1, 0, 2));
        assert!((ser(&r, &h, SlotKind::Period).unwrap() - 1.0).abs() < 1e-12);
        // ',' family: its one slot was replaced by '.'
        let c = slot_counts(&r, &h, SlotKind::Comma);
        assert_eq!((c.substitutions, c.deletions, c.insertions, c.ref_slots), (1, 0, 0, 1));
        // '?' family has no reference slots
        assert!(ser(&r, &h, SlotKind::Question).is_err());
        let c = slot_counts(&r, &h, SlotKind::Question);
        assert_eq!(c.insertions, 1);
    }

    #[test]
    fn ser_identical_is_zero_and_insertions_can_exceed_one() {
        use Punct::*;
        use SpeakerRole::Dr;
        let r = transcript(&[
            ("a", Dr, true, Period),
            ("b", Dr, false, Comma),
            ("c", Dr, true, Question),
        ]);
        for kind in SlotKind::ALL {
            assert_eq!(ser(&r, &r, kind).unwrap(), 0.0);
        }
        // one correct period, three spurious ones on inserted words
        let r2 = transcript(&[("a", Dr, false, Period)]);
        let h2 = transcript(&[
            ("a", Dr, false, Period),
            ("x", Dr, false, Period),
            ("y", Dr, false, Period),
            ("z", Dr, false, Period),
        ]);
        assert!((ser(&r2, &h2, SlotKind::Period).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ser_decomposes_over_disjoint_families() {
        use Punct::*;
        use SpeakerRole::Dr;
        // errors constructed so no position confuses two punct families
        let r = transcript(&[
            ("a", Dr, true, Period),
            ("b", Dr, false, Comma),
            ("c", Dr, false, None),
            ("d", Dr, false, Question),
        ]);
        let h = transcript(&[
            ("a", Dr, false, Period), // cap deleted
            ("b", Dr, false, None),   // comma deleted
            ("c", Dr, true, Period),  // period + cap inserted
            ("d", Dr, false, Question),
        ]);
        let total: usize = SlotKind::ALL
            .iter()
            .map(|&k| slot_counts(&r, &h, k).errors())
            .sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn nce_frozen_example_and_properties() {
        // two correct at 0.9, two incorrect at 0.1
        let conf = [0.9, 0.9, 0.1, 0.1];
        let labels = [true, true, false, false];
        let v = nce(&conf, &labels).unwrap();
        let h_base = -4.0 * 0.5f64.ln();
        let h_conf = -4.0 * 0.9f64.ln();
        assert!((v - (h_base - h_conf) / h_base).abs() < 1e-12);
        assert!((v - 0.848).abs() < 1e-3);
        // perfect confidences approach 1
        let v = nce(&[1.0, 1.0, 0.0, 0.0], &labels).unwrap();
        assert!(v > 0.999 && v <= 1.0);
        // predicting the base rate scores exactly 0
        let v = nce(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap();
        assert!(v.abs() < 1e-12);
        // degenerate label sets are undefined
        assert!(nce(&[0.5], &[true]).is_err());
        assert!(nce(&[0.5, 0.5], &[false, false]).is_err());
        // lowering an incorrect word's confidence strictly improves it
        let base = nce(&[0.9, 0.9, 0.4, 0.1], &labels).unwrap();
        let better = nce(&[0.9, 0.9, 0.3, 0.1], &labels).unwrap();
        assert!(better > base);
    }

    #[test]
    fn calibration_separable_and_degenerate_cases() {
        // all incorrect confidences strictly below all correct ones
        let conf = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        let rep = calibration_report(&conf, &labels, 10).unwrap();
        assert!((rep.auc_roc - 1.0).abs() < 1e-12);
        assert!((rep.auc_npv_tnr - 1.0).abs() < 1e-12);
        assert!((rep.auc_prc - 1.0).abs() < 1e-12);
        // overconfident coin flips
        let conf = [1.0, 1.0, 1.0, 1.0];
        let labels = [true, false, true, false];
        assert!((ece(&conf, &labels, 10) - 0.5).abs() < 1e-12);
        // no incorrect labels: the negative-predictive sweep is undefined
        assert!(auc_npv_tnr(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn calibration_four_point_hand_values() {
        let conf = [0.9, 0.8, 0.6, 0.3];
        let labels = [true, false, true, false];
        let rep = calibration_report(&conf, &labels, 4).unwrap();
        // ranked pairs: 3 of 4 concordant
        assert!((rep.auc_roc - 0.75).abs() < 1e-12);
        // PRC points (R,P): anchor (0,1), (0.5,1), (0.5,0.5), (1,2/3), then flat
        let prc = 0.5 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0;
        assert!((rep.auc_prc - prc).abs() < 1e-12);
        // bins [0,.25,.5,.75,1]: |0-.3|/4 + |1-.6|/4 + |.5-.85|*2/4
        assert!((rep.ece - 0.35).abs() < 1e-12);
        // NPV-TNR step points: (0,.5) -> (0.5,1) -> (0.5,.5) -> (1,2/3) -> (1,.5)
        let npv = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert!((rep.auc_npv_tnr - npv).abs() < 1e-12);
    }

    /// Rank-sum oracle: P(correct ranked above incorrect) with ties at half.
    fn mann_whitney(conf: &[f64], labels: &[bool]) -> f64 {
        let pos: Vec<f64> = conf
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l)
            .map(|(&c, _)| c)
            .collect();
        let neg: Vec<f64> = conf
            .iter()
            .zip(labels)
            .filter(|(_, &l)| !l)
            .map(|(&c, _)| c)
            .collect();
        let mut s = 0.0;
        for &p in &pos {
            for &q in &neg {
                s += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn roc_matches_rank_sum_oracle() {
        let mut rng = StdRng::seed_from_u64(33);
        for _ in 0..50 {
            let n = rng.gen_range(4..40);
            // quantized confidences force plenty of ties
            let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auc_roc(&conf, &labels).unwrap();
            let b = mann_whitney(&conf, &labels);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn corpus_pooling_is_order_invariant() {
        let mut rng = StdRng::seed_from_u64(34);
        // three "utterances" of confidences/labels pooled in either order
        let mut all: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
        for _ in 0..3 {
            let n = rng.gen_range(3..8);
            all.push((
                (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
                (0..n).map(|_| rng.gen_bool(0.6)).collect(),
            ));
        }
        let pool = |order: &[usize]| {
            let mut c = Vec::new();
            let mut l = Vec::new();
            for &i in order {
                c.extend(all[i].0.iter());
                l.extend(all[i].1.iter());
            }
            (c, l)
        };
        let (c1, l1) = pool(&[0, 1, 2]);
        let (c2, l2) = pool(&[2, 0, 1]);
        if let (Ok(a), Ok(b)) = (
            calibration_report(&c1, &l1, 8),
            calibration_report(&c2, &l2, 8),
        ) {
            assert!((a.nce - b.nce).abs() < 1e-12);
            assert!((a.ece - b.ece).abs() < 1e-12);
            assert!((a.auc_roc - b.auc_roc).abs() < 1e-12);
            assert!((a.auc_npv_tnr - b.auc_npv_tnr).abs() < 1e-12);
        }
        // slot counts pool additively
        use Punct::Period;
        use SpeakerRole::Dr;
        let r1 = transcript(&[("a", Dr, false, Period)]);
        let h1 = transcript(&[("a", Dr, false, Punct::None)]);
        let r2 = transcript(&[("b", Dr, false, Period)]);
        let h2 = transcript(&[("b", Dr, false, Period)]);
        let mut pooled = SlotCounts::default();
        pooled.merge(&slot_counts(&r1, &h1, SlotKind::Period));
        pooled.merge(&slot_counts(&r2, &h2, SlotKind::Period));
        assert_eq!(pooled.deletions, 1);
        assert_eq!(pooled.ref_slots, 2);
        assert!((pooled.rate().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tag_f1_examples() {
        let r = vec![
            TagSpan::new("Symptoms/cough", 0, 2),
            TagSpan::new("Medication/name", 4, 5),
        ];
        let h = vec![
            TagSpan::new("Symptoms/cough", 0, 2),
            TagSpan::new("Condition/x", 6, 7),
        ];
        assert!((tag_f1(&r, &h) - 0.5).abs() < 1e-12);
        assert_eq!(tag_f1(&r, &r), 1.0);
        // partial overlap is simply wrong under exact matching
        let h2 = vec![
            TagSpan::new("Symptoms/cough", 1, 2),
            TagSpan::new("Medication/name", 4, 5),
        ];
        assert!((tag_f1(&r, &h2) - 0.5).abs() < 1e-12);
        assert_eq!(tag_f1(&[], &[]), 1.0);
        assert_eq!(tag_f1(&r, &[]), 0.0);
        let groups = tag_f1_per_ontology(&r, &h);
        assert_eq!(groups["Symptoms"], 1.0);
        assert_eq!(groups["Medication"], 0.0);
        assert_eq!(groups["Condition"], 0.0);
    }
}
