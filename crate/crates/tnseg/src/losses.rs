//! Training objectives: entropy maps, the discriminator's binary
//! cross-entropy, the supervised segmentation loss, the adversarial term,
//! and the optional entropy-minimization term.
//!
//! Conventions fixed here once:
//! * the discriminator outputs the probability that an entropy map comes
//!   from the **source** domain, so the generator term `-log D(I_t)`
//!   literally pushes target maps to look source-like;
//! * every probability is clamped to `[1e-7, 1 - 1e-7]` before a log;
//! * per-map sums over pixels are realized as means over the
//!   discriminator's downsampled score grid, keeping the loss scale
//!   independent of patch size;
//! * natural logarithms throughout.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp bound applied to probabilities before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Weights of the segmenter objective terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Adversarial weight; 1e-3 unless ablating.
    pub lambda_d: f64,
    /// Entropy-minimization weight; 0 disables the term.
    pub lambda_ent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_d: 1e-3, lambda_ent: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_d < 0.0 || self.lambda_ent < 0.0 {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel normalized entropy of a probability map `[N,C,H,W]`;
/// values lie in `[0, 1]` with 1 at the uniform distribution.
pub fn entropy_map(tape: &mut Tape, p: Var) -> Result<Var> {
    tape.entropy_channels(p)
}

/// Discriminator objective: score source maps as source (1) and target maps
/// as target (0). Means are taken over all score-grid locations per domain.
pub fn discriminator_loss(tape: &mut Tape, score_src: Var, score_tgt: Var) -> Result<Var> {
    let cs = tape.clamp(score_src, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ls = tape.log(cs)?;
    let ms = tape.mean_all(ls)?;

    let ct = tape.clamp(score_tgt, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let one_minus = tape.scalar_sub(1.0, ct);
    let lt = tape.log(one_minus)?;
    let mt = tape.mean_all(lt)?;

    let sum = tape.add(ms, mt)?;
    Ok(tape.neg(sum))
}

/// Supervised cross-entropy on labeled source probabilities: the mean over
/// masked-in pixels of `-ln P[class = y]`.
pub fn supervised_ce(tape: &mut Tape, p_src: Var, y: &Tensor, mask: &Tensor) -> Result<Var> {
    tape.masked_ce(p_src, y, mask, PROB_CLAMP)
}

/// Adversarial term for the segmenter: `-mean(ln D(I_t))` on live target
/// scores. The discriminator must be frozen for this term; gradients reach
/// the segmenter through the entropy maps.
pub fn adversarial_loss(tape: &mut Tape, score_tgt_live: Var) -> Result<Var> {
    let c = tape.clamp(score_tgt_live, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let l = tape.log(c)?;
    let m = tape.mean_all(l)?;
    Ok(tape.neg(m))
}

/// Mean entropy over masked-in pixels of a target entropy map.
pub fn minent_loss(tape: &mut Tape, entropy_tgt: Var, mask: &Tensor) -> Result<Var> {
    tape.masked_mean(entropy_tgt, mask)
}

/// `L_seg = L_sup + lambda_d * L_adv + lambda_ent * L_ent`.
pub fn segmenter_objective(
    tape: &mut Tape,
    l_sup: Var,
    l_adv: Option<Var>,
    l_ent: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total = l_sup;
    if let Some(adv) = l_adv {
        let weighted = tape.mul_scalar(adv, w.lambda_d);
        total = tape.add(total, weighted)?;
    }
    if let Some(ent) = l_ent {
        let weighted = tape.mul_scalar(ent, w.lambda_ent);
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}
