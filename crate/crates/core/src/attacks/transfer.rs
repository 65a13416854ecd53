use super::{admitted_labels, pgd, AttackConfig, BlackBox, WhiteBox};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub adversarial: Tensor,
    /// Victim verdict per row: predicted label, or `None` when flagged.
    pub victim_labels: Vec<Option<usize>>,
    /// Victim detection score `q` per row.
    pub victim_scores: Vec<f64>,
}

/// Crafts PGD examples on `surrogate` and only queries `victim` (forward
/// passes) to score them. The victim must be calibrated.
pub fn transfer_attack(
    surrogate: &dyn WhiteBox,
    victim: &dyn BlackBox,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<TransferOutcome> {
    let adversarial = pgd(surrogate, x, labels, cfg)?;
    let victim_labels = admitted_labels(victim, &adversarial)?;
    let z = victim.represent(&adversarial)?;
    let (_, victim_scores) = victim.head().scores(&z)?;
    Ok(TransferOutcome { adversarial, victim_labels, victim_scores })
}
