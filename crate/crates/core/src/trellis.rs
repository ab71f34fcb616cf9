//! Exact log-domain transducer lattice computations.
//!
//! The alignment trellis is the grid of nodes (t, u) with t in 0..T frames
//! and u in 0..=U emitted labels. At each node the model scores V non-blank
//! symbols plus blank (index V). A blank move advances t, a label move
//! advances u, and every complete path ends with a blank taken at (T-1, U).
//!
//! Two losses share the lattice: the marginal loss sums over all valid
//! paths with the forward-backward recursion, and the fixed-alignment loss
//! scores one supplied path. Both return exact gradients with respect to
//! the raw logits (softmax is fused into the loss). `enumerate_oracle`
//! computes the marginal by explicit path enumeration and exists to check
//! the dynamic program on small lattices.

use crate::linalg::{log_add, log_softmax_inplace, log_sum_exp, LOG_ZERO};
use thiserror::Error;

/// Hard cap on T+U for `enumerate_oracle`; beyond this the path count is
/// no longer worth enumerating.
pub const MAX_ENUMERATION: usize = 12;

#[derive(Debug, Error)]
pub enum TrellisError {
    #[error("lattice logits must all be finite")]
    NonFiniteLogits,
    #[error("lattice must have at least one frame")]
    EmptyLattice,
    #[error("lattice shape mismatch: {0}")]
    BadShape(String),
    #[error("invalid alignment path: {0}")]
    InvalidPath(String),
    #[error("refusing to enumerate: T+U = {0} exceeds {MAX_ENUMERATION}")]
    EnumerationTooLarge(usize),
}

/// One emission step of an alignment path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Move {
    /// Consume one encoder frame.
    Blank,
    /// Emit the i-th target label (labels must appear in target order).
    Label(usize),
}

/// Ordered emission sequence from the trellis origin to the terminal blank.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AlignmentPath {
    pub moves: Vec<Move>,
}

impl AlignmentPath {
    pub fn new(moves: Vec<Move>) -> Self {
        Self { moves }
    }

    /// Build a path from the encoder frame at which each label is emitted.
    /// `emit_frames` must be non-decreasing with values < frames.
    pub fn from_emit_frames(emit_frames: &[usize], frames: usize) -> Self {
        let mut moves = Vec::with_capacity(frames + emit_frames.len());
        let mut next = 0usize;
        for t in 0..frames {
            while next < emit_frames.len() && emit_frames[next] == t {
                moves.push(Move::Label(next));
                next += 1;
            }
            moves.push(Move::Blank);
        }
        Self { moves }
    }
}

/// Joint scores over the alignment trellis: logits indexed (t, u, k) with
/// t in 0..frames, u in 0..=target.len(), and k in 0..=num_labels where
/// k == num_labels is blank. Carries the target symbol ids so the label
/// edges of the trellis are fully determined.
#[derive(Debug, Clone)]
pub struct LogitLattice {
    pub frames: usize,
    /// Target symbol ids, each < num_labels.
    pub target: Vec<usize>,
    /// Non-blank vocabulary size V; blank is symbol V.
    pub num_labels: usize,
    /// Row-major [frames, target.len()+1, num_labels+1].
    pub logits: Vec<f64>,
}

impl LogitLattice {
    pub fn new(
        frames: usize,
        target: Vec<usize>,
        num_labels: usize,
        logits: Vec<f64>,
    ) -> Result<Self, TrellisError> {
        if frames == 0 {
            return Err(TrellisError::EmptyLattice);
        }
        if num_labels == 0 {
            return Err(TrellisError::BadShape("num_labels must be >= 1".into()));
        }
        if let Some(&bad) = target.iter().find(|&&y| y >= num_labels) {
            return Err(TrellisError::BadShape(format!(
                "target symbol {bad} out of range (num_labels {num_labels})"
            )));
        }
        let expect = frames * (target.len() + 1) * (num_labels + 1);
        if logits.len() != expect {
            return Err(TrellisError::BadShape(format!(
                "logits len {} != {}x{}x{}",
                logits.len(),
                frames,
                target.len() + 1,
                num_labels + 1
            )));
        }
        Ok(Self {
            frames,
            target,
            num_labels,
            logits,
        })
    }

    #[inline]
    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    #[inline]
    pub fn vocab_len(&self) -> usize {
        self.num_labels + 1
    }

    #[inline]
    pub fn blank_id(&self) -> usize {
        self.num_labels
    }

    #[inline]
    fn node(&self, t: usize, u: usize) -> usize {
        (t * (self.target_len() + 1) + u) * self.vocab_len()
    }

    fn check_finite(&self) -> Result<(), TrellisError> {
        if self.logits.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TrellisError::NonFiniteLogits)
        }
    }

    /// Per-node log-softmax of the logits, same layout.
    fn log_probs(&self) -> Vec<f64> {
        let vl = self.vocab_len();
        let mut lp = self.logits.clone();
        for chunk in lp.chunks_mut(vl) {
            log_softmax_inplace(chunk);
        }
        lp
    }
}

/// Loss value (negative log-probability, nats) plus the gradient with
/// respect to the raw lattice logits.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// True iff `path` satisfies every trellis invariant for (frames, target_len):
/// exactly `frames` blanks and `target_len` labels, labels in order, the
/// cursor never leaving the grid, and the final move being the blank taken
/// at (frames-1, target_len).
pub fn validate_path(path: &AlignmentPath, frames: usize, target_len: usize) -> bool {
    if frames == 0 {
        return false;
    }
    let last = path.moves.len().wrapping_sub(1);
    let (mut t, mut u) = (0usize, 0usize);
    for (idx, mv) in path.moves.iter().enumerate() {
        match *mv {
            Move::Label(i) => {
                if u >= target_len || i != u || t >= frames {
                    return false;
                }
                u += 1;
            }
            Move::Blank => {
                if t >= frames {
                    return false;
                }
                if t == frames - 1 && !(u == target_len && idx == last) {
                    return false;
                }
                t += 1;
            }
        }
    }
    t == frames && u == target_len
}

/// Marginal transducer loss: -log of the path-sum probability, with the
/// exact gradient via forward-backward occupancy posteriors.
pub fn marginal_loss_and_grad(lattice: &LogitLattice) -> Result<LossResult, TrellisError> {
    lattice.check_finite()?;
    let (tn, un, vl) = (
        lattice.frames,
        lattice.target_len() + 1,
        lattice.vocab_len(),
    );
    let blank = lattice.blank_id();
    let lp = lattice.log_probs();

    let at = |t: usize, u: usize| t * un + u;
    // Forward: alpha[t][u] = log P(reach (t,u)).
    let mut alpha = vec![LOG_ZERO; tn * un];
    alpha[0] = 0.0;
    for t in 0..tn {
        for u in 0..un {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = LOG_ZERO;
            if t > 0 {
                a = log_add(a, alpha[at(t - 1, u)] + lp[lattice.node(t - 1, u) + blank]);
            }
            if u > 0 {
                let y = lattice.target[u - 1];
                a = log_add(a, alpha[at(t, u - 1)] + lp[lattice.node(t, u - 1) + y]);
            }
            alpha[at(t, u)] = a;
        }
    }
    // Backward: beta[t][u] = log P((t,u) to termination).
    let mut beta = vec![LOG_ZERO; tn * un];
    beta[at(tn - 1, un - 1)] = lp[lattice.node(tn - 1, un - 1) + blank];
    for t in (0..tn).rev() {
        for u in (0..un).rev() {
            if t == tn - 1 && u == un - 1 {
                continue;
            }
            let mut b = LOG_ZERO;
            if t + 1 < tn {
                b = log_add(b, lp[lattice.node(t, u) + blank] + beta[at(t + 1, u)]);
            }
            if u + 1 < un {
                let y = lattice.target[u];
                b = log_add(b, lp[lattice.node(t, u) + y] + beta[at(t, u + 1)]);
            }
            beta[at(t, u)] = b;
        }
    }
    let log_z = alpha[at(tn - 1, un - 1)] + lp[lattice.node(tn - 1, un - 1) + blank];
    debug_assert!((log_z - beta[at(0, 0)]).abs() < 1e-9 * (1.0 + log_z.abs()));

    // Occupancy posteriors -> gradient of -log Z w.r.t. raw logits:
    //   d loss / d logit(t,u,k) = softmax(t,u,k) * n(t,u) - gamma(t,u,k)
    // where gamma is the posterior of emitting k at (t,u) and n their sum.
    let mut grad = vec![0.0; lattice.logits.len()];
    for t in 0..tn {
        for u in 0..un {
            let base = lattice.node(t, u);
            let a = alpha[at(t, u)];
            if a <= LOG_ZERO / 2.0 {
                continue;
            }
            let mut g_blank = 0.0;
            let mut g_label = 0.0;
            if t + 1 < tn {
                g_blank = (a + lp[base + blank] + beta[at(t + 1, u)] - log_z).exp();
            } else if u == un - 1 {
                g_blank = (a + lp[base + blank] - log_z).exp();
            }
            let mut y = usize::MAX;
            if u + 1 < un {
                y = lattice.target[u];
                g_label = (a + lp[base + y] + beta[at(t, u + 1)] - log_z).exp();
            }
            let occupancy = g_blank + g_label;
            if occupancy == 0.0 {
                continue;
            }
            for k in 0..vl {
                grad[base + k] = lp[base + k].exp() * occupancy;
            }
            grad[base + blank] -= g_blank;
            if y != usize::MAX {
                grad[base + y] -= g_label;
            }
        }
    }
    Ok(LossResult {
        loss: -log_z,
        grad,
    })
}

/// Loss of a single supplied alignment: -log P(Y, A | X), with gradient
/// support only on visited nodes.
pub fn fixed_alignment_loss_and_grad(
    lattice: &LogitLattice,
    path: &AlignmentPath,
) -> Result<LossResult, TrellisError> {
    lattice.check_finite()?;
    if !validate_path(path, lattice.frames, lattice.target_len()) {
        return Err(TrellisError::InvalidPath(format!(
            "path with {} moves does not fit T={} U={}",
            path.moves.len(),
            lattice.frames,
            lattice.target_len()
        )));
    }
    let vl = lattice.vocab_len();
    let lp = lattice.log_probs();
    let mut grad = vec![0.0; lattice.logits.len()];
    let mut loss = 0.0;
    let (mut t, mut u) = (0usize, 0usize);
    for mv in &path.moves {
        let base = lattice.node(t, u);
        let k = match *mv {
            Move::Blank => lattice.blank_id(),
            Move::Label(i) => lattice.target[i],
        };
        loss -= lp[base + k];
        for j in 0..vl {
            grad[base + j] += lp[base + j].exp();
        }
        grad[base + k] -= 1.0;
        match *mv {
            Move::Blank => t += 1,
            Move::Label(_) => u += 1,
        }
    }
    Ok(LossResult { loss, grad })
}

/// Exact -log path-sum by explicit enumeration of all C(T+U-1, U) valid
/// paths. Guarded to small lattices; the test oracle for the dynamic
/// program above.
pub fn enumerate_oracle(lattice: &LogitLattice) -> Result<f64, TrellisError> {
    lattice.check_finite()?;
    let (tn, ul) = (lattice.frames, lattice.target_len());
    if tn + ul > MAX_ENUMERATION {
        return Err(TrellisError::EnumerationTooLarge(tn + ul));
    }
    let lp = lattice.log_probs();
    let blank = lattice.blank_id();
    let mut scores = Vec::new();
    // Depth-first walk over blank/label choices.
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, acc)) = stack.pop() {
        let base = lattice.node(t, u);
        if t == tn - 1 && u == ul {
            scores.push(acc + lp[base + blank]);
            continue;
        }
        if u < ul {
            let y = lattice.target[u];
            stack.push((t, u + 1, acc + lp[base + y]));
        }
        if t + 1 < tn {
            stack.push((t + 1, u, acc + lp[base + blank]));
        }
    }
    Ok(-log_sum_exp(&scores))
}

/// Number of valid paths for a (frames, target_len) trellis: C(T+U-1, U).
pub fn path_count(frames: usize, target_len: usize) -> u64 {
    let n = (frames + target_len - 1) as u64;
    let k = target_len as u64;
    let mut c = 1u64;
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}
