//! Segmentation losses on per-voxel class probabilities, with analytic
//! gradients.
//!
//! * Soft Dice loss on the foreground channel: `1 - 2 Σ p m / (Σ p + Σ m)`.
//! * Weighted cross-entropy: mean over voxels of `-w_c log p_c` for the true
//!   class `c`, with `w_j = w0 / f_j` where `f_j` is the mean voxel count of
//!   class `j` over the training set and `w0 = mean(f_j)`.
//! * Combined loss: the sum of the two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, Grid};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

/// Per-voxel class probabilities; channel 0 is background, 1 foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    classes: Vec<Grid<f64>>,
}

impl ProbabilityField {
    pub fn new(classes: Vec<Grid<f64>>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        for c in &classes[1..] {
            classes[0].ensure_same_dims(c)?;
        }
        Ok(ProbabilityField { classes })
    }

    /// Two-class field from a foreground probability grid.
    pub fn from_foreground(p_fg: &Grid<f64>) -> Self {
        ProbabilityField {
            classes: vec![p_fg.map(|&p| 1.0 - p), p_fg.clone()],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.classes[0].dims()
    }

    pub fn class(&self, c: usize) -> &Grid<f64> {
        &self.classes[c]
    }

    pub fn foreground(&self) -> &Grid<f64> {
        &self.classes[1]
    }

    /// Voxels whose most probable class is the foreground.
    pub fn argmax_mask(&self) -> BinaryMask3D {
        let bg = self.classes[0].data();
        let mut m = self.classes[1].map(|_| false);
        for (i, v) in m.data_mut().iter_mut().enumerate() {
            *v = self.classes[1].data()[i] > bg[i];
        }
        m
    }
}

/// Class frequencies and the derived cross-entropy weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    /// Mean voxel count per class (background, foreground).
    pub f: [f64; 2],
    pub w0: f64,
    pub w: [f64; 2],
}

impl ClassWeights {
    pub fn from_frequencies(f: [f64; 2]) -> Result<Self> {
        if f.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "class frequencies must be positive, got {f:?}"
            )));
        }
        let w0 = (f[0] + f[1]) / 2.0;
        Ok(ClassWeights {
            f,
            w0,
            w: [w0 / f[0], w0 / f[1]],
        })
    }

    /// Equal weights, for when no training statistics are at hand.
    pub fn uniform() -> Self {
        ClassWeights {
            f: [1.0, 1.0],
            w0: 1.0,
            w: [1.0, 1.0],
        }
    }
}

/// Mean per-class voxel counts over the training masks.
pub fn compute_class_weights(training_masks: &[BinaryMask3D]) -> Result<ClassWeights> {
    if training_masks.is_empty() {
        return Err(Error::InvalidArgument("no training masks".into()));
    }
    let n = training_masks.len() as f64;
    let (mut fg, mut bg) = (0.0, 0.0);
    for m in training_masks {
        let c = m.count();
        fg += c as f64;
        bg += (m.len() - c) as f64;
    }
    if fg == 0.0 {
        return Err(Error::InvalidArgument(
            "training masks contain no foreground voxels".into(),
        ));
    }
    ClassWeights::from_frequencies([bg / n, fg / n])
}

fn check(p: &Grid<f64>, m: &BinaryMask3D) -> Result<()> {
    p.ensure_same_dims(m)
}

/// Soft Dice loss and its gradient with respect to `p_fg`.
pub fn dice_loss_with_grad(p_fg: &Grid<f64>, m_true: &BinaryMask3D) -> Result<(f64, Grid<f64>)> {
    check(p_fg, m_true)?;
    let (mut inter, mut sum_p, mut sum_m) = (0.0, 0.0, 0.0);
    for (&p, &m) in p_fg.data().iter().zip(m_true.data()) {
        let m = m as u8 as f64;
        inter += p * m;
        sum_p += p;
        sum_m += m;
    }
    let denom = sum_p + sum_m;
    if denom == 0.0 {
        return Ok((0.0, p_fg.map(|_| 0.0)));
    }
    let loss = 1.0 - 2.0 * inter / denom;
    let mut grad = p_fg.map(|_| 0.0);
    for (g, &m) in grad.data_mut().iter_mut().zip(m_true.data()) {
        let m = m as u8 as f64;
        *g = -2.0 * (m * denom - inter) / (denom * denom);
    }
    Ok((loss, grad))
}

pub fn dice_loss(p_fg: &Grid<f64>, m_true: &BinaryMask3D) -> Result<f64> {
    Ok(dice_loss_with_grad(p_fg, m_true)?.0)
}

/// Weighted cross-entropy and its gradient with respect to each class channel.
pub fn weighted_cross_entropy_with_grad(
    p: &ProbabilityField,
    m_true: &BinaryMask3D,
    weights: &ClassWeights,
) -> Result<(f64, ProbabilityField)> {
    check(p.foreground(), m_true)?;
    let n = m_true.len() as f64;
    let mut grad = ProbabilityField {
        classes: p.classes.iter().map(|c| c.map(|_| 0.0)).collect(),
    };
    let mut total = 0.0;
    for (i, &m) in m_true.data().iter().enumerate() {
        let c = m as usize;
        let pc = p.classes[c].data()[i];
        let w = weights.w[c];
        if pc > PROB_FLOOR {
            total -= w * pc.ln();
            grad.classes[c].data_mut()[i] = -w / (pc * n);
        } else {
            total -= w * PROB_FLOOR.ln();
        }
    }
    Ok((total / n, grad))
}

pub fn weighted_cross_entropy(
    p: &ProbabilityField,
    m_true: &BinaryMask3D,
    weights: &ClassWeights,
) -> Result<f64> {
    Ok(weighted_cross_entropy_with_grad(p, m_true, weights)?.0)
}

/// Dice loss on the foreground plus weighted cross-entropy.
pub fn combined_loss_with_grad(
    p: &ProbabilityField,
    m_true: &BinaryMask3D,
    weights: &ClassWeights,
) -> Result<(f64, ProbabilityField)> {
    let (dice, gd) = dice_loss_with_grad(p.foreground(), m_true)?;
    let (ce, mut g) = weighted_cross_entropy_with_grad(p, m_true, weights)?;
    for (a, b) in g.classes[1].data_mut().iter_mut().zip(gd.data()) {
        *a += b;
    }
    Ok((dice + ce, g))
}

pub fn combined_loss(p: &ProbabilityField, m_true: &BinaryMask3D, weights: &ClassWeights) -> Result<f64> {
    Ok(combined_loss_with_grad(p, m_true, weights)?.0)
}

/// Which objective a network is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Soft Dice only; used for lung segmentation.
    Dice,
    /// Soft Dice plus weighted cross-entropy; used for lesion segmentation.
    DiceWeightedCe,
}

impl LossKind {
    /// Loss and gradient with respect to every probability channel.
    pub fn evaluate(
        self,
        p: &ProbabilityField,
        m_true: &BinaryMask3D,
        weights: &ClassWeights,
    ) -> Result<(f64, ProbabilityField)> {
        match self {
            LossKind::Dice => {
                let (l, gd) = dice_loss_with_grad(p.foreground(), m_true)?;
                let mut classes: Vec<Grid<f64>> = p.classes.iter().map(|c| c.map(|_| 0.0)).collect();
                classes[1] = gd;
                Ok((l, ProbabilityField { classes }))
            }
            LossKind::DiceWeightedCe => combined_loss_with_grad(p, m_true, weights),
        }
    }
}

/// Pulls a gradient with respect to softmax outputs back to the logits:
/// `dz_c = p_c (g_c - Σ_k g_k p_k)`.
pub fn softmax_backward(p: &ProbabilityField, grad_p: &ProbabilityField) -> ProbabilityField {
    let mut out = grad_p.clone();
    let n = p.classes[0].len();
    for i in 0..n {
        let dot: f64 = (0..p.classes.len())
            .map(|c| p.classes[c].data()[i] * grad_p.classes[c].data()[i])
            .sum();
        for c in 0..p.classes.len() {
            let pc = p.classes[c].data()[i];
            out.classes[c].data_mut()[i] = pc * (grad_p.classes[c].data()[i] - dot);
        }
    }
    out
}
