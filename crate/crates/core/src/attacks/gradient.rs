use super::{project_into_budget, projection, AttackConfig, BlackBox, LossKind, Norm, TargetMode, WhiteBox};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixtureHead;
use crate::loss::{distances, nearest_except, RepresentationLoss};
use crate::tensor::Tensor;

/// What an attack minimises, given the current representations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub loss: LossKind,
    pub mode: TargetMode,
    pub kappa: f64,
}

impl Objective {
    pub fn from_config(cfg: &AttackConfig) -> Self {
        Self { loss: cfg.loss, mode: cfg.mode, kappa: cfg.kappa }
    }

    /// Pins the moving target of adaptive modes to the nearest wrong center
    /// of the single representation `z_row`.
    pub fn resolve(&self, head: &GaussianMixtureHead, z_row: &[f64], y: usize) -> Objective {
        let pinned = matches!(
            (self.loss, self.mode),
            (LossKind::Distance, TargetMode::Untargeted)
                | (LossKind::Distance | LossKind::CrossEntropy, TargetMode::AdaptiveNearest)
        );
        if !pinned {
            return *self;
        }
        let d = distances(z_row, &head.benign_centers());
        Objective { mode: TargetMode::Targeted(nearest_except(&d, y).0), ..*self }
    }

    /// The loss to minimise at `z` and the sign applied to it. Untargeted
    /// cross-entropy is the one objective that is maximised (sign `-1`).
    pub fn build(
        &self,
        head: &GaussianMixtureHead,
        z: &Tensor,
        labels: &[usize],
    ) -> Result<(RepresentationLoss, f64)> {
        let k = head.k();
        if let TargetMode::Targeted(t) = self.mode {
            if t >= k {
                return Err(Error::InvalidArgument(format!("target {t} not below {k}")));
            }
        }
        let centers = head.benign_centers();
        let nearest_wrong = || -> Vec<usize> {
            z.row_iter()
                .zip(labels)
                .map(|(row, &y)| nearest_except(&distances(row, &centers), y).0)
                .collect()
        };
        let out = match (self.loss, self.mode) {
            (LossKind::Distance, TargetMode::Targeted(t)) => {
                let idx = vec![t; labels.len()];
                (RepresentationLoss::Distance { targets: centers.select_rows(&idx) }, 1.0)
            }
            (LossKind::Distance, _) => {
                (RepresentationLoss::Distance { targets: centers.select_rows(&nearest_wrong()) }, 1.0)
            }
            (LossKind::CrossEntropy, TargetMode::Untargeted) => (
                RepresentationLoss::CrossEntropy { centers, labels: labels.to_vec() },
                -1.0,
            ),
            (LossKind::CrossEntropy, TargetMode::Targeted(t)) => (
                RepresentationLoss::CrossEntropy { centers, labels: vec![t; labels.len()] },
                1.0,
            ),
            (LossKind::CrossEntropy, TargetMode::AdaptiveNearest) => {
                let targets = nearest_wrong();
                (RepresentationLoss::CrossEntropy { centers, labels: targets }, 1.0)
            }
            (LossKind::Margin, TargetMode::Targeted(t)) => (
                RepresentationLoss::TargetMargin {
                    centers,
                    targets: vec![t; labels.len()],
                    kappa: self.kappa,
                },
                1.0,
            ),
            (LossKind::Margin, _) => (
                RepresentationLoss::Margin { centers, labels: labels.to_vec(), kappa: self.kappa },
                1.0,
            ),
        };
        Ok(out)
    }
}

/// Gradient of the signed minimisation objective with respect to `x`.
fn objective_gradient(
    model: &dyn WhiteBox,
    x: &Tensor,
    labels: &[usize],
    objective: &Objective,
) -> Result<Tensor> {
    let head = model.head();
    let grad = model.input_gradient(x, &mut |z| {
        let (loss, sgn) = objective.build(head, z, labels)?;
        if !loss.value(z)?.is_finite() {
            return Err(Error::NonFinite("attack loss".into()));
        }
        Ok(loss.gradient(z)?.scale(sgn))
    })?;
    grad.check_finite("attack gradient")?;
    Ok(grad)
}

fn check_batch(x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::Shape(format!("{} inputs, {} labels", x.rows(), labels.len())));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("attack input outside [0, 1]".into()));
    }
    Ok(())
}

/// One signed step of size `eps`: `clamp(x + eps * sign(grad L_u))` with the
/// untargeted distance loss `L_u = -min_{j != y} ||H(x) - mu_j||`.
pub fn fgsm(model: &dyn WhiteBox, x: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} must be >= 0")));
    }
    check_batch(x, labels)?;
    let objective = Objective { loss: LossKind::Distance, mode: TargetMode::Untargeted, kappa: 0.0 };
    // descending the nearest-wrong distance == ascending L_u
    let g = objective_gradient(model, x, labels, &objective)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(xi, gi)| (xi - eps * projection::sign(*gi)).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Projected gradient descent on the configured objective. Each iteration
/// steps `-step * normalize(g)`, projects the accumulated perturbation onto
/// the `eps`-ball and then clamps to the `[0, 1]` box. With `decay > 0` the
/// direction `g` is the momentum accumulator `decay * g + grad / ||grad||_1`.
pub fn pgd(model: &dyn WhiteBox, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(x, labels)?;
    let objective = Objective::from_config(cfg);
    let n = x.cols();
    let mut cur = x.clone();
    let mut momentum = vec![0.0; x.len()];
    for _ in 0..cfg.iterations {
        let grad = objective_gradient(model, &cur, labels, &objective)?;
        let mut next = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let g = grad.row(r);
            let dir = if cfg.decay > 0.0 {
                let acc = &mut momentum[r * n..(r + 1) * n];
                let l1 = projection::lp_norm(g, Norm::L1);
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a = cfg.decay * *a + if l1 > 0.0 { gi / l1 } else { 0.0 };
                }
                projection::normalize_step(acc, cfg.norm)
            } else {
                projection::normalize_step(g, cfg.norm)
            };
            let cand: Vec<f64> =
                cur.row(r).iter().zip(&dir).map(|(c, d)| c - cfg.step * d).collect();
            next.extend(project_into_budget(x.row(r), &cand, cfg.norm, cfg.epsilon)?);
        }
        cur = Tensor::from_parts(x.shape().to_vec(), next);
        cur.check_finite("pgd iterate")?;
    }
    Ok(cur)
}

/// `max(min_{j != y} d_j - d_y + kappa, 0)` per row.
pub fn margin_loss(model: &dyn BlackBox, x: &Tensor, labels: &[usize], kappa: f64) -> Result<Vec<f64>> {
    if !(kappa >= 0.0) {
        return Err(Error::InvalidArgument(format!("kappa {kappa} must be >= 0")));
    }
    let z = model.represent(x)?;
    let loss = RepresentationLoss::Margin {
        centers: model.head().benign_centers(),
        labels: labels.to_vec(),
        kappa,
    };
    loss.row_values(&z)
}
