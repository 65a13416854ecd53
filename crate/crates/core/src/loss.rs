//! Scalar losses over a batch of representations `z` (`b x m`), each with an
//! exact gradient `dL/dz` feeding [`crate::autodiff::Session::backward`].

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum RepresentationLoss {
    Constant(f64),
    /// `sum_r ||z_r - t_r||_2`. The gradient at `z_r == t_r` is taken as 0.
    Distance { targets: Tensor },
    /// `sum_r w_r * 0.5 * ||z_r - t_r||^2`
    HalfSquared { targets: Tensor, weights: Vec<f64> },
    /// `sum_r max(min_{j != y_r} d_j - d_{y_r} + kappa, 0)` with `d_j` the
    /// distance to benign center `j`. Zero once row `r` sits at least `kappa`
    /// closer to some wrong center than to `y_r`.
    Margin { centers: Tensor, labels: Vec<usize>, kappa: f64 },
    /// Targeted hinge: `sum_r max(d_{t_r} - min_{j != t_r} d_j + kappa, 0)`.
    TargetMargin { centers: Tensor, targets: Vec<usize>, kappa: f64 },
    /// `sum_r -log softmax_j(-0.5 * d_j^2)[y_r]`, the cross-entropy of the
    /// Gaussian-mode posterior.
    CrossEntropy { centers: Tensor, labels: Vec<usize> },
}

impl RepresentationLoss {
    pub fn half_squared(targets: Tensor) -> Self {
        let w = vec![1.0; targets.rows()];
        Self::HalfSquared { targets, weights: w }
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        let (rows, width) = match self {
            Self::Constant(_) => return Ok(()),
            Self::Distance { targets } | Self::HalfSquared { targets, .. } => {
                (targets.rows(), targets.cols())
            }
            Self::Margin { centers, labels, .. } | Self::CrossEntropy { centers, labels } => {
                check_labels(labels, centers.rows())?;
                (labels.len(), centers.cols())
            }
            Self::TargetMargin { centers, targets, .. } => {
                check_labels(targets, centers.rows())?;
                (targets.len(), centers.cols())
            }
        };
        if let Self::HalfSquared { weights, .. } = self {
            if weights.len() != rows {
                return Err(Error::Shape("weights length".into()));
            }
        }
        if z.rows() != rows || z.cols() != width {
            return Err(Error::Shape(format!(
                "representations {}x{}, loss expects {rows}x{width}",
                z.rows(),
                z.cols()
            )));
        }
        Ok(())
    }

    /// Per-row loss contributions.
    pub fn row_values(&self, z: &Tensor) -> Result<Vec<f64>> {
        self.check(z)?;
        let out = match self {
            Self::Constant(c) => {
                let mut v = vec![0.0; z.rows()];
                if let Some(first) = v.first_mut() {
                    *first = *c;
                }
                v
            }
            Self::Distance { targets } => {
                z.row_iter().zip(targets.row_iter()).map(|(a, t)| sq_dist(a, t).sqrt()).collect()
            }
            Self::HalfSquared { targets, weights } => z
                .row_iter()
                .zip(targets.row_iter())
                .zip(weights)
                .map(|((a, t), w)| w * 0.5 * sq_dist(a, t))
                .collect(),
            Self::Margin { centers, labels, kappa } => z
                .row_iter()
                .zip(labels)
                .map(|(a, &y)| {
                    let d = distances(a, centers);
                    let (_, d_wrong) = nearest_except(&d, y);
                    (d_wrong - d[y] + kappa).max(0.0)
                })
                .collect(),
            Self::TargetMargin { centers, targets, kappa } => z
                .row_iter()
                .zip(targets)
                .map(|(a, &t)| {
                    let d = distances(a, centers);
                    let (_, d_other) = nearest_except(&d, t);
                    (d[t] - d_other + kappa).max(0.0)
                })
                .collect(),
            Self::CrossEntropy { centers, labels } => z
                .row_iter()
                .zip(labels)
                .map(|(a, &y)| {
                    let logits: Vec<f64> =
                        centers.row_iter().map(|c| -0.5 * sq_dist(a, c)).collect();
                    log_sum_exp(&logits) - logits[y]
                })
                .collect(),
        };
        Ok(out)
    }

    pub fn value(&self, z: &Tensor) -> Result<f64> {
        Ok(self.row_values(z)?.iter().sum())
    }

    /// `dL/dz`, same shape as `z`.
    pub fn gradient(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let m = z.cols();
        let mut g = Tensor::zeros(z.shape().to_vec());
        match self {
            Self::Constant(_) => {}
            Self::Distance { targets } => {
                for r in 0..z.rows() {
                    let (a, t) = (z.row(r), targets.row(r));
                    unit_diff_into(g.row_mut(r), a, t, 1.0);
                }
            }
            Self::HalfSquared { targets, weights } => {
                for r in 0..z.rows() {
                    let (a, t) = (z.row(r), targets.row(r));
                    for ((gi, ai), ti) in g.row_mut(r).iter_mut().zip(a).zip(t) {
                        *gi = weights[r] * (ai - ti);
                    }
                }
            }
            Self::Margin { centers, labels, kappa } => {
                for (r, &y) in labels.iter().enumerate() {
                    let a = z.row(r);
                    let d = distances(a, centers);
                    let (j, d_wrong) = nearest_except(&d, y);
                    if d_wrong - d[y] + kappa > 0.0 {
                        let row = g.row_mut(r);
                        unit_diff_into(row, a, centers.row(j), 1.0);
                        unit_diff_into(row, a, centers.row(y), -1.0);
                    }
                }
            }
            Self::TargetMargin { centers, targets, kappa } => {
                for (r, &t) in targets.iter().enumerate() {
                    let a = z.row(r);
                    let d = distances(a, centers);
                    let (j, d_other) = nearest_except(&d, t);
                    if d[t] - d_other + kappa > 0.0 {
                        let row = g.row_mut(r);
                        unit_diff_into(row, a, centers.row(t), 1.0);
                        unit_diff_into(row, a, centers.row(j), -1.0);
                    }
                }
            }
            Self::CrossEntropy { centers, labels } => {
                // d/dz = sum_j p_j mu_j - mu_y
                for (r, &y) in labels.iter().enumerate() {
                    let a = z.row(r);
                    let logits: Vec<f64> =
                        centers.row_iter().map(|c| -0.5 * sq_dist(a, c)).collect();
                    let lse = log_sum_exp(&logits);
                    let row = g.row_mut(r);
                    for (j, c) in centers.row_iter().enumerate() {
                        let p = (logits[j] - lse).exp() - if j == y { 1.0 } else { 0.0 };
                        for i in 0..m {
                            row[i] += p * c[i];
                        }
                    }
                }
            }
        }
        Ok(g)
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(y) => Err(Error::InvalidArgument(format!("label {y} out of range 0..{classes}"))),
        None => Ok(()),
    }
}

/// Adds `scale * (a - t) / ||a - t||` into `out`; no-op when `a == t`.
fn unit_diff_into(out: &mut [f64], a: &[f64], t: &[f64], scale: f64) {
    let d = sq_dist(a, t).sqrt();
    if d > 0.0 {
        for ((o, ai), ti) in out.iter_mut().zip(a).zip(t) {
            *o += scale * (ai - ti) / d;
        }
    }
}

/// Euclidean distances from `z` to every row of `centers`.
pub fn distances(z: &[f64], centers: &Tensor) -> Vec<f64> {
    centers.row_iter().map(|c| sq_dist(z, c).sqrt()).collect()
}

/// `(argmin, min)` over `d` excluding index `skip`; ties go to the lowest index.
pub fn nearest_except(d: &[f64], skip: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (j, &v) in d.iter().enumerate() {
        if j != skip && v < best.1 {
            best = (j, v);
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(k: usize) -> Tensor {
        let mut d = vec![0.0; k * k];
        (0..k).for_each(|i| d[i * k + i] = 1.0);
        Tensor::matrix(k, k, d).unwrap()
    }

    fn numeric_grad(loss: &RepresentationLoss, z: &Tensor) -> Vec<f64> {
        let h = 1e-6;
        (0..z.len())
            .map(|i| {
                let mut p = z.clone();
                p.data_mut()[i] += h;
                let mut m = z.clone();
                m.data_mut()[i] -= h;
                (loss.value(&p).unwrap() - loss.value(&m).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_differences() {
        let centers = one_hot(3);
        let z = Tensor::from_rows(&[vec![0.3, 0.9, -0.2], vec![1.4, 0.1, 0.5]]).unwrap();
        let targets = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let losses = [
            RepresentationLoss::Distance { targets: targets.clone() },
            RepresentationLoss::HalfSquared { targets, weights: vec![0.5, 2.0] },
            RepresentationLoss::Margin { centers: centers.clone(), labels: vec![1, 0], kappa: 0.3 },
            RepresentationLoss::TargetMargin {
                centers: centers.clone(),
                targets: vec![2, 2],
                kappa: 0.3,
            },
            RepresentationLoss::CrossEntropy { centers, labels: vec![1, 2] },
        ];
        for loss in &losses {
            let g = loss.gradient(&z).unwrap();
            for (a, n) in g.data().iter().zip(numeric_grad(loss, &z)) {
                assert!((a - n).abs() < 1e-6, "{loss:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn margin_hinge_floor() {
        let centers = one_hot(2);
        let at_wrong = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let loss = RepresentationLoss::Margin { centers, labels: vec![0], kappa: 0.0 };
        assert_eq!(loss.value(&at_wrong).unwrap(), 0.0);
        assert!(loss.gradient(&at_wrong).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_has_zero_gradient() {
        let z = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let loss = RepresentationLoss::Constant(4.0);
        assert_eq!(loss.value(&z).unwrap(), 4.0);
        assert!(loss.gradient(&z).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bad_labels_rejected() {
        let loss = RepresentationLoss::CrossEntropy { centers: one_hot(2), labels: vec![2] };
        let z = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(loss.value(&z).is_err());
    }
}
