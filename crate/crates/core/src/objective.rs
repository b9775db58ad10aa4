//! Training objectives and their analytic gradients with respect to the logits.
//!
//! Every objective is a per-batch mean over token sets:
//!
//! * cross-entropy over the supervised tokens, logit gradient `(π − e_y)/n`;
//! * entropy over the regularized tokens, `∂H/∂z_j = −π_j (log π_j + H)`;
//! * KL to the reference over the regularized tokens,
//!   `∂KL/∂z_j = π_j (log π_j − log π_ref,j − KL)`.
//!
//! EKSFT supervises the complement of the union mask and regularizes the mask:
//! `total = ce_masked − λ_H · entropy_reg + λ_KL · kl_reg`. The mask, the DFT
//! weights and the reference logits are constants for differentiation. At
//! masked positions the gradient never reads the gold label.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::numerics::ops::log_softmax_row;
use crate::numerics::Tensor;
use crate::selection::{build_mask, entropy_unchecked, kl_unchecked, selection_count, token_stats, MaskSet, TokenRef};

/// Default entropy-regularization weight.
pub const DEFAULT_LAMBDA_H: f64 = 0.05;
/// Default KL-regularization weight.
pub const DEFAULT_LAMBDA_KL: f64 = 0.05;
/// Default Top-K ratio.
pub const DEFAULT_RHO: f64 = 0.2;
/// Fraction of tokens the random-mask baseline drops from supervision.
pub const DEFAULT_DROP_FRACTION: f64 = 0.10;

/// Next-token targets of a padded batch and which of them are supervised.
///
/// Row `b`, position `t` holds the token the logits at `(b, t)` should
/// predict. Only response tokens are valid; prompt and padding positions are not.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    batch: usize,
    len: usize,
    ids: Vec<TokenId>,
    valid: Vec<bool>,
}

impl Targets {
    pub fn new(batch: usize, len: usize, ids: Vec<TokenId>, valid: Vec<bool>) -> Result<Self> {
        if ids.len() != batch * len || valid.len() != batch * len {
            return Err(Error::Dimension(format!(
                "targets of {} ids / {} flags for a {batch}×{len} batch",
                ids.len(),
                valid.len()
            )));
        }
        Ok(Self { batch, len, ids, valid })
    }

    /// Targets for full `prompt ++ response` sequences: the logits at position
    /// `t` predict token `t + 1`, valid when that token belongs to the response.
    pub fn for_responses(sequences: &[Vec<TokenId>], prompt_lens: &[usize]) -> Result<Self> {
        if sequences.len() != prompt_lens.len() {
            return Err(Error::Input("one prompt length per sequence is required".into()));
        }
        let len = sequences.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![0; sequences.len() * len];
        let mut valid = vec![false; sequences.len() * len];
        for (b, (seq, &p)) in sequences.iter().zip(prompt_lens).enumerate() {
            if p == 0 || p > seq.len() {
                return Err(Error::Input(format!(
                    "sequence {b}: prompt length {p} for a sequence of {} tokens",
                    seq.len()
                )));
            }
            for t in p - 1..seq.len() - 1 {
                ids[b * len + t] = seq[t + 1];
                valid[b * len + t] = true;
            }
        }
        Self::new(sequences.len(), len, ids, valid)
    }

    /// `(batch, max_len)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.batch, self.len)
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid tokens in ascending `(sequence, position)` order.
    pub fn valid_refs(&self) -> Vec<TokenRef> {
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| TokenRef::new(i / self.len, i % self.len))
            .collect()
    }

    pub fn is_valid(&self, token: TokenRef) -> bool {
        token.sequence_index < self.batch && token.token_position < self.len && self.valid[self.row_index(token)]
    }

    /// Row of the flattened `[B·L × V]` logits that belongs to `token`.
    pub fn row_index(&self, token: TokenRef) -> usize {
        token.sequence_index * self.len + token.token_position
    }

    pub fn target(&self, token: TokenRef) -> TokenId {
        self.ids[self.row_index(token)]
    }

    /// Replaces the gold label at a valid position.
    pub fn set_target(&mut self, token: TokenRef, id: TokenId) -> Result<()> {
        if !self.is_valid(token) {
            return Err(Error::Input(format!("{token:?} is not a valid token")));
        }
        let i = self.row_index(token);
        self.ids[i] = id;
        Ok(())
    }

    /// Checks that `logits` is `[B × L × V]` for this batch and every valid
    /// target is inside the vocabulary.
    pub fn check_logits(&self, logits: &Tensor) -> Result<()> {
        let s = logits.shape();
        if s.len() != 3 || s[0] != self.batch || s[1] != self.len {
            return Err(Error::Dimension(format!(
                "logits {s:?} do not match targets [{}, {}, V]",
                self.batch, self.len
            )));
        }
        if s[2] < 2 {
            return Err(Error::Dimension("vocabulary of fewer than 2 tokens".into()));
        }
        if let Some(i) = (0..self.ids.len()).find(|&i| self.valid[i] && self.ids[i] as usize >= s[2]) {
            return Err(Error::Input(format!("target id {} out of vocabulary", self.ids[i])));
        }
        logits.check_finite("logits")
    }
}

/// Components of a selective objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean NLL over the supervised tokens (weighted for DFT).
    pub ce_masked: f64,
    /// Mean entropy over the regularized tokens.
    pub entropy_reg: f64,
    /// Mean KL to the reference over the regularized tokens.
    pub kl_reg: f64,
    pub total: f64,
    /// Tokens under cross-entropy supervision.
    pub n_supervised: usize,
    /// Tokens excluded from supervision.
    pub n_masked: usize,
    pub lambda_h: f64,
    pub lambda_kl: f64,
}

/// Loss value, logit gradient and the mask that produced them.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// `∂total/∂logits`, `[B × L × V]`.
    pub dlogits: Tensor,
    pub mask: MaskSet,
}

/// Weights of the EKSFT objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EksftWeights {
    pub rho: f64,
    pub lambda_h: f64,
    pub lambda_kl: f64,
}

impl Default for EksftWeights {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            lambda_h: DEFAULT_LAMBDA_H,
            lambda_kl: DEFAULT_LAMBDA_KL,
        }
    }
}

impl EksftWeights {
    pub fn validate(&self) -> Result<()> {
        check_lambdas(self.lambda_h, self.lambda_kl)?;
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("ratio ρ = {} is outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

fn check_lambdas(lambda_h: f64, lambda_kl: f64) -> Result<()> {
    if !(lambda_h >= 0.0 && lambda_kl >= 0.0 && lambda_h.is_finite() && lambda_kl.is_finite()) {
        return Err(Error::Config(format!(
            "regularization weights must be finite and non-negative (λ_H = {lambda_h}, λ_KL = {lambda_kl})"
        )));
    }
    Ok(())
}

fn check_reference(logits: &Tensor, reference: &Tensor) -> Result<()> {
    if reference.shape() != logits.shape() {
        return Err(Error::Input(format!(
            "reference logits {:?} do not match policy logits {:?}",
            reference.shape(),
            logits.shape()
        )));
    }
    reference.check_finite("reference logits")
}

fn check_mask(targets: &Targets, mask: &BTreeSet<TokenRef>) -> Result<()> {
    match mask.iter().find(|t| !targets.is_valid(**t)) {
        Some(t) => Err(Error::Input(format!("mask contains invalid position {t:?}"))),
        None => Ok(()),
    }
}

/// Token sets and weights that define one evaluation of a composite objective.
struct Terms<'a> {
    supervised: &'a [TokenRef],
    /// Per-supervised-token weights (DFT); `None` means 1.
    ce_weights: Option<&'a [f64]>,
    regularized: &'a [TokenRef],
    lambda_h: f64,
    lambda_kl: f64,
    n_masked: usize,
}

/// Shared arithmetic of every objective. Each row's gradient collects the CE,
/// then entropy, then KL contribution, always in the same order.
fn evaluate(
    logits: &Tensor,
    reference: Option<&Tensor>,
    targets: &Targets,
    terms: &Terms<'_>,
) -> Result<(LossBreakdown, Tensor)> {
    let v = logits.last_dim();
    let mut grad = vec![0.0; logits.len()];
    let mut lp = vec![0.0; v];
    let mut lr = vec![0.0; v];

    let n = terms.supervised.len();
    let mut ce = 0.0;
    if n > 0 {
        let inv = 1.0 / n as f64;
        for (i, &tok) in terms.supervised.iter().enumerate() {
            let row = targets.row_index(tok);
            let y = targets.target(tok) as usize;
            log_softmax_row(logits.row(row), &mut lp);
            let w = terms.ce_weights.map_or(1.0, |ws| ws[i]);
            ce -= w * lp[y];
            let g = &mut grad[row * v..(row + 1) * v];
            for j in 0..v {
                g[j] += w * lp[j].exp() * inv;
            }
            g[y] -= w * inv;
        }
        ce *= inv;
    }

    let m = terms.regularized.len();
    let mut ent = 0.0;
    let mut kl = 0.0;
    if m > 0 {
        let inv = 1.0 / m as f64;
        for &tok in terms.regularized {
            let row = targets.row_index(tok);
            log_softmax_row(logits.row(row), &mut lp);
            let h = entropy_unchecked(&lp);
            ent += h;
            let g = &mut grad[row * v..(row + 1) * v];
            if terms.lambda_h != 0.0 {
                // −λ_H · ∂H/∂z_j / m with ∂H/∂z_j = −π_j (log π_j + H)
                let c = terms.lambda_h * inv;
                for j in 0..v {
                    g[j] += c * lp[j].exp() * (lp[j] + h);
                }
            }
            if let Some(r) = reference {
                log_softmax_row(r.row(row), &mut lr);
                let d = kl_unchecked(&lp, &lr);
                kl += d;
                if terms.lambda_kl != 0.0 {
                    let c = terms.lambda_kl * inv;
                    for j in 0..v {
                        g[j] += c * lp[j].exp() * (lp[j] - lr[j] - d);
                    }
                }
            }
        }
        ent *= inv;
        kl *= inv;
    }

    let total = ce - terms.lambda_h * ent + terms.lambda_kl * kl;
    let breakdown = LossBreakdown {
        ce_masked: ce,
        entropy_reg: ent,
        kl_reg: kl,
        total,
        n_supervised: n,
        n_masked: terms.n_masked,
        lambda_h: terms.lambda_h,
        lambda_kl: terms.lambda_kl,
    };
    let grad = Tensor::new(logits.shape().to_vec(), grad)?;
    Ok((breakdown, grad))
}

fn require_tokens(targets: &Targets) -> Result<()> {
    if targets.n_valid() == 0 {
        return Err(Error::Degenerate("batch has no valid target tokens".into()));
    }
    Ok(())
}

/// Mean NLL over all valid tokens and its logit gradient `(π − e_y)/n`.
pub fn sft_loss(logits: &Tensor, targets: &Targets) -> Result<(f64, Tensor)> {
    let out = masked_objective(logits, None, targets, &MaskSet::empty(targets.n_valid()), 0.0, 0.0)?;
    Ok((out.breakdown.total, out.dlogits))
}

/// Mean NLL over the valid tokens outside `mask.m_union`; 0 (with a warning)
/// when every token is masked.
pub fn masked_ce(logits: &Tensor, targets: &Targets, mask: &MaskSet) -> Result<f64> {
    targets.check_logits(logits)?;
    check_mask(targets, &mask.m_union)?;
    let supervised: Vec<TokenRef> = targets
        .valid_refs()
        .into_iter()
        .filter(|t| !mask.m_union.contains(t))
        .collect();
    if supervised.is_empty() {
        log::warn!("masked cross-entropy has no supervised tokens; returning 0");
    }
    let terms = Terms {
        supervised: &supervised,
        ce_weights: None,
        regularized: &[],
        lambda_h: 0.0,
        lambda_kl: 0.0,
        n_masked: mask.m_union.len(),
    };
    Ok(evaluate(logits, None, targets, &terms)?.0.ce_masked)
}

fn rows_of(logits: &Tensor, mask: &BTreeSet<TokenRef>) -> Result<Targets> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [B × L × V] logits, got {s:?}")));
    }
    let mut valid = vec![false; s[0] * s[1]];
    for t in mask {
        if t.sequence_index >= s[0] || t.token_position >= s[1] {
            return Err(Error::Input(format!("mask position {t:?} outside logits {s:?}")));
        }
        valid[t.sequence_index * s[1] + t.token_position] = true;
    }
    Targets::new(s[0], s[1], vec![0; s[0] * s[1]], valid)
}

/// Mean entropy over the masked rows and its logit gradient; 0 for an empty mask.
pub fn entropy_reg(logits: &Tensor, mask: &BTreeSet<TokenRef>) -> Result<(f64, Tensor)> {
    let targets = rows_of(logits, mask)?;
    logits.check_finite("logits")?;
    let regularized: Vec<TokenRef> = mask.iter().copied().collect();
    // λ_H = −1 turns the objective's `−λ_H·H` term into `+H`.
    let terms = Terms {
        supervised: &[],
        ce_weights: None,
        regularized: &regularized,
        lambda_h: -1.0,
        lambda_kl: 0.0,
        n_masked: regularized.len(),
    };
    let (b, g) = evaluate(logits, None, &targets, &terms)?;
    Ok((b.entropy_reg, g))
}

/// Mean `KL(policy ‖ reference)` over the masked rows and its gradient with
/// respect to the policy logits; the reference receives none.
pub fn kl_reg(policy_logits: &Tensor, reference_logits: &Tensor, mask: &BTreeSet<TokenRef>) -> Result<(f64, Tensor)> {
    let targets = rows_of(policy_logits, mask)?;
    policy_logits.check_finite("logits")?;
    check_reference(policy_logits, reference_logits)?;
    let regularized: Vec<TokenRef> = mask.iter().copied().collect();
    let terms = Terms {
        supervised: &[],
        ce_weights: None,
        regularized: &regularized,
        lambda_h: 0.0,
        lambda_kl: 1.0,
        n_masked: regularized.len(),
    };
    let (b, g) = evaluate(policy_logits, Some(reference_logits), &targets, &terms)?;
    Ok((b.kl_reg, g))
}

/// Cross-entropy on the complement of `mask.m_union`, entropy and KL
/// regularization on `mask.m_union`. The mask is held fixed.
pub fn masked_objective(
    logits: &Tensor,
    reference: Option<&Tensor>,
    targets: &Targets,
    mask: &MaskSet,
    lambda_h: f64,
    lambda_kl: f64,
) -> Result<LossOutput> {
    check_lambdas(lambda_h, lambda_kl)?;
    targets.check_logits(logits)?;
    require_tokens(targets)?;
    check_mask(targets, &mask.m_union)?;
    if let Some(r) = reference {
        check_reference(logits, r)?;
    } else if !mask.m_union.is_empty() && lambda_kl != 0.0 {
        return Err(Error::Input("KL regularization needs reference logits".into()));
    }
    let (supervised, regularized): (Vec<TokenRef>, Vec<TokenRef>) = targets
        .valid_refs()
        .into_iter()
        .partition(|t| !mask.m_union.contains(t));
    if supervised.is_empty() {
        log::warn!("every valid token is masked; cross-entropy term is 0");
    }
    let terms = Terms {
        supervised: &supervised,
        ce_weights: None,
        regularized: &regularized,
        lambda_h,
        lambda_kl,
        n_masked: regularized.len(),
    };
    let (breakdown, dlogits) = evaluate(logits, reference, targets, &terms)?;
    Ok(LossOutput {
        breakdown,
        dlogits,
        mask: mask.clone(),
    })
}

/// Selects the union mask from the batch's entropy and KL statistics.
pub fn eksft_mask(logits: &Tensor, reference: &Tensor, targets: &Targets, rho: f64) -> Result<MaskSet> {
    check_reference(logits, reference)?;
    let stats = token_stats(logits, Some(reference), targets)?;
    build_mask(&stats, rho)
}

/// The EKSFT objective: Top-K entropy ∪ Top-K KL tokens are removed from
/// cross-entropy and regularized instead.
pub fn eksft_loss(
    logits: &Tensor,
    reference: &Tensor,
    targets: &Targets,
    weights: &EksftWeights,
) -> Result<LossOutput> {
    weights.validate()?;
    let mask = eksft_mask(logits, reference, targets, weights.rho)?;
    masked_objective(
        logits,
        Some(reference),
        targets,
        &mask,
        weights.lambda_h,
        weights.lambda_kl,
    )
}

/// Detached probability of each valid target, in [`Targets::valid_refs`] order.
pub fn dft_weights(logits: &Tensor, targets: &Targets) -> Result<Vec<f64>> {
    targets.check_logits(logits)?;
    let v = logits.last_dim();
    let mut lp = vec![0.0; v];
    Ok(targets
        .valid_refs()
        .into_iter()
        .map(|t| {
            log_softmax_row(logits.row(targets.row_index(t)), &mut lp);
            lp[targets.target(t) as usize].exp()
        })
        .collect())
}

/// Probability-reweighted cross-entropy `mean w_t · (−log π(y_t))` with
/// `w_t = π(y_t)` held constant.
pub fn dft_loss(logits: &Tensor, targets: &Targets) -> Result<LossOutput> {
    let w = dft_weights(logits, targets)?;
    dft_loss_with_weights(logits, targets, &w)
}

/// [`dft_loss`] with explicitly frozen weights.
pub fn dft_loss_with_weights(logits: &Tensor, targets: &Targets, weights: &[f64]) -> Result<LossOutput> {
    targets.check_logits(logits)?;
    require_tokens(targets)?;
    let supervised = targets.valid_refs();
    if weights.len() != supervised.len() {
        return Err(Error::Input(format!(
            "{} weights for {} valid tokens",
            weights.len(),
            supervised.len()
        )));
    }
    let terms = Terms {
        supervised: &supervised,
        ce_weights: Some(weights),
        regularized: &[],
        lambda_h: 0.0,
        lambda_kl: 0.0,
        n_masked: 0,
    };
    let (breakdown, dlogits) = evaluate(logits, None, targets, &terms)?;
    Ok(LossOutput {
        breakdown,
        dlogits,
        mask: MaskSet::empty(supervised.len()),
    })
}

/// `ceil(drop_fraction·|T|)` valid tokens drawn uniformly without replacement.
///
/// The drawn set fills all three sets of the returned mask.
pub fn random_mask<R: Rng + ?Sized>(targets: &Targets, drop_fraction: f64, rng: &mut R) -> Result<MaskSet> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!(
            "drop fraction {drop_fraction} is outside [0, 1)"
        )));
    }
    let valid = targets.valid_refs();
    let k = selection_count(drop_fraction, valid.len());
    let chosen: BTreeSet<TokenRef> = rand::seq::index::sample(rng, valid.len(), k)
        .into_iter()
        .map(|i| valid[i])
        .collect();
    Ok(MaskSet {
        m_entropy: chosen.clone(),
        m_kl: chosen.clone(),
        m_union: chosen,
        k,
        total_valid: valid.len(),
    })
}

/// Random-masking baseline: same arithmetic as EKSFT with a uniformly drawn mask.
pub fn random_mask_loss<R: Rng + ?Sized>(
    logits: &Tensor,
    reference: &Tensor,
    targets: &Targets,
    drop_fraction: f64,
    lambda_h: f64,
    lambda_kl: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    check_lambdas(lambda_h, lambda_kl)?;
    targets.check_logits(logits)?;
    let mask = random_mask(targets, drop_fraction, rng)?;
    masked_objective(logits, Some(reference), targets, &mask, lambda_h, lambda_kl)
}

/// Full cross-entropy plus entropy and KL regularization over every valid token.
pub fn global_reg_loss(
    logits: &Tensor,
    reference: &Tensor,
    targets: &Targets,
    lambda_h: f64,
    lambda_kl: f64,
) -> Result<LossOutput> {
    check_lambdas(lambda_h, lambda_kl)?;
    targets.check_logits(logits)?;
    require_tokens(targets)?;
    check_reference(logits, reference)?;
    let all = targets.valid_refs();
    let terms = Terms {
        supervised: &all,
        ce_weights: None,
        regularized: &all,
        lambda_h,
        lambda_kl,
        n_masked: 0,
    };
    let (breakdown, dlogits) = evaluate(logits, Some(reference), targets, &terms)?;
    Ok(LossOutput {
        breakdown,
        dlogits,
        mask: MaskSet::empty(all.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, log_softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_case(seed: u64, b: usize, l: usize, v: usize) -> (Tensor, Tensor, Targets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lg: Vec<f64> = (0..b * l * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rf: Vec<f64> = (0..b * l * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ids: Vec<TokenId> = (0..b * l).map(|_| rng.gen_range(0..v as u32)).collect();
        let valid: Vec<bool> = (0..b * l).map(|i| i % l != 0 || i == 0).collect();
        (
            Tensor::new(vec![b, l, v], lg).unwrap(),
            Tensor::new(vec![b, l, v], rf).unwrap(),
            Targets::new(b, l, ids, valid).unwrap(),
        )
    }

    fn check<F>(point: &Tensor, mut f: F) -> f64
    where
        F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
    {
        grad_check(&mut f, point, 1e-4).unwrap().max_rel_error
    }

    #[test]
    fn targets_for_responses() {
        let t = Targets::for_responses(&[vec![1, 5, 6, 3, 7, 2], vec![1, 8, 3, 2]], &[3, 2]).unwrap();
        assert_eq!(t.shape(), (2, 6));
        let refs = t.valid_refs();
        assert_eq!(refs.len(), 3 + 2);
        assert_eq!(refs[0], TokenRef::new(0, 2));
        assert_eq!(t.target(refs[0]), 3);
        assert_eq!(t.target(TokenRef::new(1, 2)), 2);
        assert!(!t.is_valid(TokenRef::new(1, 3)));
    }

    #[test]
    fn sft_examples() {
        let targets = Targets::new(1, 2, vec![0, 3], vec![true, true]).unwrap();
        let uniform = Tensor::zeros(&[1, 2, 32]);
        let (loss, _) = sft_loss(&uniform, &targets).unwrap();
        assert!((loss - 32f64.ln()).abs() < 1e-12);
        let mut sharp = vec![-800.0; 64];
        sharp[0] = 0.0;
        sharp[32 + 3] = 0.0;
        let (loss, g) = sft_loss(&Tensor::new(vec![1, 2, 32], sharp).unwrap(), &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|x| x.abs() < 1e-300));
        let none = Targets::new(1, 2, vec![0, 0], vec![false, false]).unwrap();
        assert!(matches!(sft_loss(&uniform, &none), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sft_gradient_is_softmax_minus_one_hot() {
        let (lg, _, targets) = random_case(1, 2, 4, 5);
        let (_, g) = sft_loss(&lg, &targets).unwrap();
        let lp = log_softmax(&lg).unwrap();
        let n = targets.n_valid() as f64;
        for t in targets.valid_refs() {
            let r = targets.row_index(t);
            for j in 0..5 {
                let expect = (lp.row(r)[j].exp() - f64::from(j == targets.target(t) as usize)) / n;
                assert!((g.row(r)[j] - expect).abs() < 1e-15);
            }
        }
        let e = check(&lg, |x| sft_loss(x, &targets));
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn masked_ce_examples() {
        // rows with log-probabilities (−1, ·) and (−2, ·) at the targets
        let v = 3;
        let row = |lp_y: f64| {
            let rest = ((1.0 - lp_y.exp()) / 2.0).ln();
            vec![lp_y, rest, rest]
        };
        let data: Vec<f64> = row(-1.0).into_iter().chain(row(-2.0)).collect();
        let lg = Tensor::new(vec![1, 2, v], data).unwrap();
        let targets = Targets::new(1, 2, vec![0, 0], vec![true, true]).unwrap();
        let t2 = TokenRef::new(0, 1);
        let mask = MaskSet {
            m_union: BTreeSet::from([t2]),
            ..MaskSet::empty(2)
        };
        assert!((masked_ce(&lg, &targets, &mask).unwrap() - 1.0).abs() < 1e-12);
        let (sft, _) = sft_loss(&lg, &targets).unwrap();
        assert_eq!(masked_ce(&lg, &targets, &MaskSet::empty(2)).unwrap(), sft);
        let full = MaskSet {
            m_union: BTreeSet::from([TokenRef::new(0, 0), t2]),
            ..MaskSet::empty(2)
        };
        assert_eq!(masked_ce(&lg, &targets, &full).unwrap(), 0.0);
        let bad = MaskSet {
            m_union: BTreeSet::from([TokenRef::new(0, 5)]),
            ..MaskSet::empty(2)
        };
        assert!(matches!(masked_ce(&lg, &targets, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn entropy_reg_values_and_gradient() {
        let mask = BTreeSet::from([TokenRef::new(0, 0), TokenRef::new(0, 1)]);
        let (h, _) = entropy_reg(&Tensor::zeros(&[1, 2, 8]), &mask).unwrap();
        assert!((h - 8f64.ln()).abs() < 1e-12);
        let mut sharp = vec![-60.0; 16];
        sharp[1] = 0.0;
        sharp[9] = 0.0;
        let (h, _) = entropy_reg(&Tensor::new(vec![1, 2, 8], sharp).unwrap(), &mask).unwrap();
        assert!(h < 1e-20);
        let (h, g) = entropy_reg(&Tensor::zeros(&[1, 2, 8]), &BTreeSet::new()).unwrap();
        assert_eq!(h, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
        let (lg, _, _) = random_case(2, 2, 3, 6);
        let mask = BTreeSet::from([TokenRef::new(0, 1), TokenRef::new(1, 2)]);
        let e = check(&lg, |x| entropy_reg(x, &mask));
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn kl_reg_values_and_gradient() {
        let (lg, rf, _) = random_case(3, 2, 3, 6);
        let mask = BTreeSet::from([TokenRef::new(0, 0), TokenRef::new(1, 1), TokenRef::new(1, 2)]);
        let (kl, g) = kl_reg(&lg, &lg, &mask).unwrap();
        assert_eq!(kl, 0.0);
        assert!(g.data().iter().all(|x| x.abs() < 1e-15));
        let e = check(&lg, |x| kl_reg(x, &rf, &mask));
        assert!(e <= 1e-5, "{e}");
        let short = Tensor::zeros(&[1, 3, 6]);
        assert!(matches!(kl_reg(&lg, &short, &mask), Err(Error::Input(_))));
    }

    #[test]
    fn eksft_reduces_to_sft() {
        let (lg, rf, targets) = random_case(4, 3, 5, 7);
        let w = EksftWeights {
            rho: 0.0,
            lambda_h: 0.0,
            lambda_kl: 0.0,
        };
        let out = eksft_loss(&lg, &rf, &targets, &w).unwrap();
        let (sft, g) = sft_loss(&lg, &targets).unwrap();
        assert_eq!(out.breakdown.total, sft);
        assert_eq!(out.dlogits, g);
        assert!(matches!(
            eksft_loss(&lg, &rf, &targets, &EksftWeights { lambda_h: -0.1, ..w }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eksft_breakdown_recomposes_and_gradient_checks() {
        let (lg, rf, targets) = random_case(5, 3, 5, 7);
        let out = eksft_loss(&lg, &rf, &targets, &EksftWeights::default()).unwrap();
        let b = out.breakdown;
        assert!((b.total - (b.ce_masked - b.lambda_h * b.entropy_reg + b.lambda_kl * b.kl_reg)).abs() <= 1e-12);
        assert_eq!(b.n_supervised + b.n_masked, targets.n_valid());
        assert_eq!(out.mask.k, selection_count(0.2, targets.n_valid()));
        let mask = out.mask.clone();
        let e = check(&lg, |x| {
            let o = masked_objective(x, Some(&rf), &targets, &mask, 0.05, 0.05)?;
            Ok((o.breakdown.total, o.dlogits))
        });
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn masked_gradient_is_label_free() {
        let (lg, rf, targets) = random_case(6, 2, 6, 9);
        let out = eksft_loss(&lg, &rf, &targets, &EksftWeights::default()).unwrap();
        let mut permuted = targets.clone();
        for t in &out.mask.m_union {
            let y = permuted.target(*t);
            permuted.set_target(*t, (y + 4) % 9).unwrap();
        }
        let again = masked_objective(&lg, Some(&rf), &permuted, &out.mask, 0.05, 0.05).unwrap();
        assert_eq!(again.dlogits, out.dlogits);
    }

    #[test]
    fn dft_examples() {
        let (lg, _, targets) = random_case(7, 2, 4, 5);
        let w = dft_weights(&lg, &targets).unwrap();
        let e = check(&lg, |x| {
            let o = dft_loss_with_weights(x, &targets, &w)?;
            Ok((o.breakdown.total, o.dlogits))
        });
        assert!(e <= 1e-5, "{e}");
        // a hard token (π(y) = 1e-6) contributes a vanishing gradient
        let mut row = vec![0.0; 4];
        row[0] = (1e-6f64).ln() - ((1.0 - 1e-6) / 3.0f64).ln();
        let hard = Tensor::new(vec![1, 1, 4], row).unwrap();
        let t = Targets::new(1, 1, vec![0], vec![true]).unwrap();
        let out = dft_loss(&hard, &t).unwrap();
        assert!(out.dlogits.norm() < 2e-6);
        let (_, sft_g) = sft_loss(&hard, &t).unwrap();
        assert!(sft_g.norm() > 1.0);
    }

    #[test]
    fn random_mask_counts_and_determinism() {
        let (lg, rf, targets) = random_case(8, 4, 9, 5);
        for seed in 0..20 {
            let m = random_mask(&targets, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(m.m_union.len(), selection_count(0.1, targets.n_valid()));
            let again = random_mask(&targets, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(m, again);
        }
        let out = random_mask_loss(&lg, &rf, &targets, 0.0, 0.05, 0.05, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (sft, _) = sft_loss(&lg, &targets).unwrap();
        assert_eq!(out.breakdown.total, sft);
        assert!(random_mask(&targets, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn global_reg_examples() {
        let (lg, rf, targets) = random_case(9, 2, 5, 6);
        let (sft, _) = sft_loss(&lg, &targets).unwrap();
        assert_eq!(
            global_reg_loss(&lg, &rf, &targets, 0.0, 0.0).unwrap().breakdown.total,
            sft
        );
        assert_eq!(
            global_reg_loss(&lg, &lg, &targets, 0.05, 0.05)
                .unwrap()
                .breakdown
                .kl_reg,
            0.0
        );
        let e = check(&lg, |x| {
            let o = global_reg_loss(x, &rf, &targets, 0.05, 0.05)?;
            Ok((o.breakdown.total, o.dlogits))
        });
        assert!(e <= 1e-5, "{e}");
    }
}
