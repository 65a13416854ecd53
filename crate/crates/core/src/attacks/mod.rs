//! Evasion attacks against a [`DetectorModel`]: l_p projections, FGSM, PGD
//! (targeted, untargeted, adaptive-nearest, with optional momentum), a
//! distance-margin loss, NES gradient estimation, a decision-based boundary
//! attack and transfer from a surrogate.
//!
//! Every attack returns points inside `[0, 1]^n` and inside the configured
//! `eps`-ball around their start.

mod boundary;
mod gradient;
mod nes;
mod projection;
mod transfer;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use boundary::{boundary_attack, BoundaryConfig, BoundaryOutcome};
pub use gradient::{fgsm, margin_loss, pgd, Objective};
pub use nes::{nes_attack, nes_gradient, NesConfig};
pub use projection::{lp_norm, normalize_step, project_lp, sign, Norm};
pub use transfer::{transfer_attack, TransferOutcome};

use crate::error::{Error, Result};
use crate::gmm::{DetectorModel, GaussianMixtureHead};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    Untargeted,
    Targeted(usize),
    /// Target the nearest wrong benign center, re-chosen at every step.
    AdaptiveNearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Cross-entropy of the Gaussian-mode posterior, `softmax(-d^2 / 2)`.
    CrossEntropy,
    /// Distance to the target center.
    Distance,
    /// Hinge on the distance gap, with confidence `kappa`.
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub step: f64,
    pub iterations: usize,
    pub mode: TargetMode,
    pub loss: LossKind,
    pub kappa: f64,
    /// Momentum decay; `0` is plain PGD, anything above turns it into MIM.
    pub decay: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 0.3,
            step: 0.01,
            iterations: 40,
            mode: TargetMode::AdaptiveNearest,
            loss: LossKind::Distance,
            kappa: 0.0,
            decay: 0.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.norm == Norm::L0 && self.epsilon.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "l0 budget must be an integer count, got {}",
                self.epsilon
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step {} must be > 0", self.step)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::InvalidArgument(format!("decay {} outside [0, 1)", self.decay)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::InvalidArgument(format!("kappa {} must be >= 0", self.kappa)));
        }
        Ok(())
    }
}

/// Query access to a detector: representations only, no gradients.
pub trait BlackBox: Sync {
    fn head(&self) -> &GaussianMixtureHead;
    fn represent(&self, batch: &Tensor) -> Result<Tensor>;
}

/// Gradient access. `upstream` maps the representations of `batch` to
/// `dL/dz`; the return value is `dL/dx`.
pub trait WhiteBox: BlackBox {
    fn input_gradient(
        &self,
        batch: &Tensor,
        upstream: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor>;
}

impl BlackBox for DetectorModel {
    fn head(&self) -> &GaussianMixtureHead {
        &self.head
    }

    fn represent(&self, batch: &Tensor) -> Result<Tensor> {
        self.encoder.forward(batch)
    }
}

impl WhiteBox for DetectorModel {
    fn input_gradient(
        &self,
        batch: &Tensor,
        upstream: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let mut s = self.encoder.session();
        let z = s.forward(batch)?;
        let up = upstream(&z)?;
        s.backward_input(&up)
    }
}

/// Wraps a model and counts gradient queries.
#[derive(Debug)]
pub struct GradientCounter<'a, M> {
    inner: &'a M,
    calls: AtomicUsize,
}

impl<'a, M: WhiteBox> GradientCounter<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<M: WhiteBox> BlackBox for GradientCounter<'_, M> {
    fn head(&self) -> &GaussianMixtureHead {
        self.inner.head()
    }

    fn represent(&self, batch: &Tensor) -> Result<Tensor> {
        self.inner.represent(batch)
    }
}

impl<M: WhiteBox> WhiteBox for GradientCounter<'_, M> {
    fn input_gradient(
        &self,
        batch: &Tensor,
        upstream: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.input_gradient(batch, upstream)
    }
}

/// `clamp(x + delta, 0, 1)` where `delta` is `candidate - x` projected onto the
/// `eps`-ball.
pub fn project_into_budget(x: &[f64], candidate: &[f64], p: Norm, eps: f64) -> Result<Vec<f64>> {
    let delta: Vec<f64> = candidate.iter().zip(x).map(|(c, o)| c - o).collect();
    let delta = project_lp(&delta, p, eps)?;
    Ok(x.iter().zip(&delta).map(|(o, d)| (o + d).clamp(0.0, 1.0)).collect())
}

/// Predicted label per row, or `None` when the detector flags the row.
pub fn admitted_labels(model: &dyn BlackBox, batch: &Tensor) -> Result<Vec<Option<usize>>> {
    let z = model.represent(batch)?;
    let head = model.head();
    let tau = head.thresholds().ok_or(Error::Uncalibrated)?;
    let (labels, q) = head.scores(&z)?;
    Ok(labels.iter().zip(&q).map(|(&y, &s)| (s <= tau[y]).then_some(y)).collect())
}
