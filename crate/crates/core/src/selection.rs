//! Per-token entropy and KL statistics, batch-global Top-K selection with
//! deterministic tie-breaking, the union mask, and IoU diagnostics.
//!
//! Ranking pools every valid token of a batch. Among equal values the token
//! with the smaller `(sequence_index, token_position)` wins, so exactly
//! `k = ceil(ρ·|T|)` tokens are selected per criterion. Selection is a
//! constant as far as gradients are concerned.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::log_softmax_row;
use crate::numerics::Tensor;
use crate::objective::Targets;

/// Tolerance on `Σ exp(log p) = 1` for a row to count as a distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Position of a supervised token: batch row and index into that row's target
/// sequence. Ordering is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenRef {
    pub sequence_index: usize,
    pub token_position: usize,
}

impl TokenRef {
    pub fn new(sequence_index: usize, token_position: usize) -> Self {
        Self {
            sequence_index,
            token_position,
        }
    }

    /// Key used to break ties between equal scores (smaller wins).
    pub fn flat_rank_key(&self) -> (usize, usize) {
        (self.sequence_index, self.token_position)
    }
}

/// Entropy and KL of the policy at one valid token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenStats {
    pub token: TokenRef,
    /// Nats, in `[0, ln V]`.
    pub entropy: f64,
    /// Nats, `≥ 0`.
    pub kl: f64,
}

/// High-entropy set, high-KL set and their union over one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    pub m_entropy: BTreeSet<TokenRef>,
    pub m_kl: BTreeSet<TokenRef>,
    pub m_union: BTreeSet<TokenRef>,
    /// Tokens selected per criterion.
    pub k: usize,
    /// `|T|`, the number of valid tokens ranked.
    pub total_valid: usize,
}

impl MaskSet {
    /// A mask that excludes nothing.
    pub fn empty(total_valid: usize) -> Self {
        Self {
            total_valid,
            ..Self::default()
        }
    }

    /// IoU between the entropy and KL sets.
    pub fn iou(&self) -> f64 {
        iou(&self.m_entropy, &self.m_kl)
    }

    pub fn contains(&self, token: &TokenRef) -> bool {
        self.m_union.contains(token)
    }
}

fn check_distribution(log_probs: &[f64], what: &str) -> Result<()> {
    if log_probs.len() < 2 {
        return Err(Error::Input(format!("{what}: a distribution needs at least 2 entries")));
    }
    if log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Input(format!("{what}: non-finite log-probability")));
    }
    let total: f64 = log_probs.iter().map(|v| v.exp()).sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::Input(format!("{what}: probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// `−Σ p log p` of a row given as log-probabilities; assumes a valid row.
pub(crate) fn entropy_unchecked(log_probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &lp in log_probs {
        let p = lp.exp();
        if p > 0.0 {
            h -= p * lp;
        }
    }
    h.max(0.0)
}

/// `Σ p (log p − log r)` of two rows of log-probabilities; assumes valid rows.
pub(crate) fn kl_unchecked(policy: &[f64], reference: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&lp, &lr) in policy.iter().zip(reference) {
        let p = lp.exp();
        if p > 0.0 {
            kl += p * (lp - lr);
        }
    }
    if kl < 0.0 && kl > -DISTRIBUTION_TOLERANCE {
        0.0
    } else {
        kl
    }
}

/// Shannon entropy in nats of a next-token distribution given as log-probabilities.
pub fn token_entropy(log_probs: &[f64]) -> Result<f64> {
    check_distribution(log_probs, "token_entropy")?;
    Ok(entropy_unchecked(log_probs))
}

/// `KL(policy ‖ reference)` in nats; tiny negative round-off is clipped to zero.
pub fn token_kl(policy_log_probs: &[f64], reference_log_probs: &[f64]) -> Result<f64> {
    if policy_log_probs.len() != reference_log_probs.len() {
        return Err(Error::Input(format!(
            "token_kl: vocabulary sizes differ ({} vs {})",
            policy_log_probs.len(),
            reference_log_probs.len()
        )));
    }
    check_distribution(policy_log_probs, "token_kl policy")?;
    check_distribution(reference_log_probs, "token_kl reference")?;
    Ok(kl_unchecked(policy_log_probs, reference_log_probs))
}

/// Number of elements of `values` that are `≥ value`.
pub fn rank(value: f64, values: &[f64]) -> usize {
    values.iter().filter(|&&v| v >= value).count()
}

/// `k = ceil(ρ·n)`, with products that land within 1e-9 of an integer
/// (such as `0.1 · 30`) rounded rather than bumped up by float error.
pub fn selection_count(rho: f64, n: usize) -> usize {
    let x = rho * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    (k as usize).min(n)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("ratio ρ = {rho} is outside [0, 1]")));
    }
    Ok(())
}

/// The `ceil(ρ·|T|)` tokens with the largest values, ties to the smaller key.
pub fn topk_select(items: &[(TokenRef, f64)], rho: f64) -> Result<BTreeSet<TokenRef>> {
    check_rho(rho)?;
    let k = selection_count(rho, items.len());
    Ok(top_k(items.iter().copied(), k))
}

fn top_k(items: impl Iterator<Item = (TokenRef, f64)>, k: usize) -> BTreeSet<TokenRef> {
    if k == 0 {
        return BTreeSet::new();
    }
    let mut v: Vec<(TokenRef, f64)> = items.collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(t, _)| t).collect()
}

/// Top-K by entropy, Top-K by KL, and their union over one batch.
pub fn build_mask(stats: &[TokenStats], rho: f64) -> Result<MaskSet> {
    check_rho(rho)?;
    if stats.is_empty() {
        log::warn!("build_mask called with no valid tokens; returning an empty mask");
        return Ok(MaskSet::empty(0));
    }
    let k = selection_count(rho, stats.len());
    let m_entropy = top_k(stats.iter().map(|s| (s.token, s.entropy)), k);
    let m_kl = top_k(stats.iter().map(|s| (s.token, s.kl)), k);
    let m_union = m_entropy.union(&m_kl).copied().collect();
    Ok(MaskSet {
        m_entropy,
        m_kl,
        m_union,
        k,
        total_valid: stats.len(),
    })
}

/// `|a ∩ b| / |a ∪ b|`, defined as 1 when both sets are empty.
pub fn iou<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Entropy and KL at every valid token of a batch.
///
/// `policy_logits` and `reference_logits` are `[B × L × V]`; when the
/// reference is `None` every KL is zero.
pub fn token_stats(
    policy_logits: &Tensor,
    reference_logits: Option<&Tensor>,
    targets: &Targets,
) -> Result<Vec<TokenStats>> {
    targets.check_logits(policy_logits)?;
    if let Some(r) = reference_logits {
        if r.shape() != policy_logits.shape() {
            return Err(Error::Input(format!(
                "reference logits {:?} do not match policy logits {:?}",
                r.shape(),
                policy_logits.shape()
            )));
        }
    }
    let v = policy_logits.last_dim();
    let mut lp = vec![0.0; v];
    let mut lr = vec![0.0; v];
    let mut out = Vec::with_capacity(targets.n_valid());
    for token in targets.valid_refs() {
        let row = targets.row_index(token);
        log_softmax_row(policy_logits.row(row), &mut lp);
        let entropy = entropy_unchecked(&lp);
        let kl = match reference_logits {
            Some(r) => {
                log_softmax_row(r.row(row), &mut lr);
                kl_unchecked(&lp, &lr)
            }
            None => 0.0,
        };
        out.push(TokenStats { token, entropy, kl });
    }
    Ok(out)
}

/// One line of the per-step mask dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MaskDumpRow {
    pub step: usize,
    /// Micro-batch within the optimizer step; ranking is per micro-batch.
    pub micro: usize,
    pub seq: usize,
    pub pos: usize,
    pub entropy: f64,
    pub kl: f64,
    pub in_mH: bool,
    pub in_mKL: bool,
}

/// Appends one JSONL row per valid token of a micro-batch.
///
/// `seq_offset` maps micro-batch rows to their index within the step.
pub fn write_mask_dump<W: Write + ?Sized>(
    out: &mut W,
    step: usize,
    micro: usize,
    seq_offset: usize,
    stats: &[TokenStats],
    mask: &MaskSet,
) -> Result<()> {
    for s in stats {
        let row = MaskDumpRow {
            step,
            micro,
            seq: seq_offset + s.token.sequence_index,
            pos: s.token.token_position,
            entropy: s.entropy,
            kl: s.kl,
            in_mH: mask.m_entropy.contains(&s.token),
            in_mKL: mask.m_kl.contains(&s.token),
        };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n").map_err(|e| Error::io("mask dump", e))?;
    }
    Ok(())
}
