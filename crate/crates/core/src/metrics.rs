use crate::error::Result;
use crate::volume::BinaryMask3D;

/// Dice overlap `2|A ∩ B| / (|A| + |B|)`, taken as 1 when both masks are empty.
pub fn dice_metric(m_true: &BinaryMask3D, m_pred: &BinaryMask3D) -> Result<f64> {
    m_true.ensure_same_dims(m_pred)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&t, &p) in m_true.data().iter().zip(m_pred.data()) {
        a += t as usize;
        b += p as usize;
        inter += (t && p) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}
