//! Binary cross-entropy plus soft Dice supervision for mask logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskGrid;

/// Dice smoothing term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bce: 1.0, dice: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.bce >= 0.0 && self.dice >= 0.0) || self.bce.is_infinite() || self.dice.is_infinite() {
            return Err(Error::config("loss_weights", "weights must be finite and non-negative"));
        }
        if self.bce == 0.0 && self.dice == 0.0 {
            return Err(Error::config("loss_weights", "bce and dice weights cannot both be zero"));
        }
        Ok(())
    }
}

/// Unweighted components plus the weighted total, with the sums the
/// gradient needs.
#[derive(Clone, Debug, PartialEq)]
pub struct BceDiceParts {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
    intersection: f64,
    denominator: f64,
}

impl BceDiceParts {
    pub(crate) fn from_total(total: f64) -> Self {
        BceDiceParts {
            bce: f64::NAN,
            dice: f64::NAN,
            total,
            intersection: 0.0,
            denominator: 1.0,
        }
    }

    /// d(total)/d(logits).
    pub fn gradient(&self, logits: &[f64], target: &[f64], w: LossWeights) -> Vec<f64> {
        let n = logits.len() as f64;
        let (inter, denom) = (self.intersection, self.denominator);
        logits
            .iter()
            .zip(target)
            .map(|(&z, &t)| {
                let p = sigmoid(z);
                let d_bce = (p - t) / n;
                // coefficient = inter / denom; loss = 1 - coefficient
                let d_coef_dp = (2.0 * t * denom - inter) / (denom * denom);
                let d_dice = -d_coef_dp * p * (1.0 - p);
                w.bce * d_bce + w.dice * d_dice
            })
            .collect()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_dice_forward(logits: &[f64], target: &[f64], w: LossWeights) -> BceDiceParts {
    assert_eq!(logits.len(), target.len());
    let n = logits.len() as f64;
    let (mut bce, mut pg, mut ps, mut gs) = (0.0, 0.0, 0.0, 0.0);
    for (&z, &t) in logits.iter().zip(target) {
        // log(1 + e^z) - t z, evaluated stably
        bce += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let p = sigmoid(z);
        pg += p * t;
        ps += p;
        gs += t;
    }
    let bce = bce / n;
    let intersection = 2.0 * pg + DICE_SMOOTH;
    let denominator = ps + gs + DICE_SMOOTH;
    let dice = 1.0 - intersection / denominator;
    BceDiceParts {
        bce,
        dice,
        total: w.bce * bce + w.dice * dice,
        intersection,
        denominator,
    }
}

/// Weighted BCE + Dice loss of `logits` against the binary mask `gt`.
pub fn bce_dice_loss(logits: &MaskGrid, gt: &MaskGrid, weights: LossWeights) -> Result<BceDiceParts> {
    if !logits.same_shape(gt) {
        return Err(Error::input(format!(
            "loss shape mismatch: logits {}x{} vs target {}x{}",
            logits.height, logits.width, gt.height, gt.width
        )));
    }
    if !gt.is_binary() {
        return Err(Error::input("loss target must be a binary mask"));
    }
    let z: Vec<f64> = logits.values.iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = gt.values.iter().map(|&v| v as f64).collect();
    Ok(bce_dice_forward(&z, &t, weights))
}
