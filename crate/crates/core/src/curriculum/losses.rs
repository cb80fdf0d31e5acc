//! Segmentation, classification and alignment objectives.

use crate::error::{Error, Result};
use crate::numerics::{lit, Float, Tensor, Var};

/// Dice smoothing added to numerator and denominator.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub seg: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { seg: 1.0, cls: 0.5 }
    }
}

impl LossWeights {
    pub const EQUAL: LossWeights = LossWeights { seg: 0.5, cls: 0.5 };

    pub fn validate(&self) -> Result<()> {
        if !(self.seg >= 0.0 && self.cls >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }

    /// Plain-number form of [`total_loss`].
    pub fn combine(&self, bce: f64, dice: f64, ce: f64) -> f64 {
        self.seg * (bce + dice) + self.cls * ce
    }
}

/// Mean binary cross-entropy on logits.
pub fn bce_loss<'g, F: Float>(logits: Var<'g, F>, mask: &Tensor<F>) -> Result<Var<'g, F>> {
    logits.bce_with_logits(mask)
}

/// `1 - (2 Σ p m + ε) / (Σ p + Σ m + ε)` with `p = σ(logits)`, summed over the whole batch.
pub fn dice_loss<'g, F: Float>(logits: Var<'g, F>, mask: &Tensor<F>) -> Result<Var<'g, F>> {
    let shape = logits.shape();
    if shape != mask.shape() {
        return Err(Error::shape("dice_loss", &shape, mask.shape()));
    }
    let g = logits.graph();
    let p = logits.sigmoid();
    let m = g.constant(mask.clone());
    let inter = p.mul(m)?.sum_all();
    let num = inter.scale(lit(2.0)).add_scalar(lit(DICE_EPS));
    let den = p.sum_all().add_scalar(mask.sum() + lit(DICE_EPS));
    Ok(num.div(den)?.neg().add_scalar(F::one()))
}

/// Mean softmax cross-entropy; labels outside the class range are a data error.
pub fn ce_loss<'g, F: Float>(logits: Var<'g, F>, labels: &[usize]) -> Result<Var<'g, F>> {
    logits.cross_entropy(labels)
}

/// `λ_seg (BCE + Dice) + λ_cls CE`; `ce` may be absent for segmentation-only steps.
pub fn total_loss<'g, F: Float>(
    bce: Var<'g, F>,
    dice: Var<'g, F>,
    ce: Option<Var<'g, F>>,
    w: LossWeights,
) -> Result<Var<'g, F>> {
    let seg = bce.add(dice)?.scale(lit(w.seg));
    match ce {
        Some(ce) => seg.add(ce.scale(lit(w.cls))),
        None => Ok(seg),
    }
}

/// Mean squared error between the clip embedding and a fixed target of the same shape.
pub fn align_loss<'g, F: Float>(f_hat: Var<'g, F>, target: &Tensor<F>) -> Result<Var<'g, F>> {
    let s = f_hat.shape();
    if s != target.shape() {
        return Err(Error::shape("align_loss", &s, target.shape()));
    }
    let t = f_hat.graph().constant(target.clone());
    Ok(f_hat.sub(t)?.square().mean_all())
}
