//! Fixed Gaussian-mixture structure over the representation space.
//!
//! The head holds `k + 1` unit-covariance modes. Mode `i < k` is the block
//! one-hot center `u(i)`: value `M` on coordinates `[i*l, (i+1)*l)` and 0
//! elsewhere. Mode `k` is the origin and collects successful adversarial
//! representations during training. Inference only ever looks at the
//! benign modes: an input is classified to its nearest benign center and
//! flagged when its distance to that center exceeds the class threshold.

use std::f64::consts::PI;

use crate::autodiff::{EncoderNetwork, GradientBundle};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::loss::RepresentationLoss;
use crate::tensor::{sq_dist, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureHead {
    k: usize,
    l: usize,
    magnitude: f64,
    centers: Tensor,
    thresholds: Option<Vec<f64>>,
}

impl GaussianMixtureHead {
    pub fn build(k: usize, l: usize, magnitude: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
        }
        if l == 0 {
            return Err(Error::InvalidArgument("block width must be positive".into()));
        }
        if !(magnitude > 0.0 && magnitude.is_finite()) {
            return Err(Error::InvalidArgument(format!("center magnitude {magnitude}")));
        }
        let m = k * l;
        let mut data = vec![0.0; (k + 1) * m];
        for i in 0..k {
            data[i * m + i * l..i * m + (i + 1) * l].fill(magnitude);
        }
        Ok(Self {
            k,
            l,
            magnitude,
            centers: Tensor::from_parts(vec![k + 1, m], data),
            thresholds: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn block_width(&self) -> usize {
        self.l
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    /// Representation dimension `m = k * l`.
    pub fn dim(&self) -> usize {
        self.k * self.l
    }

    /// All `k + 1` centers; row `k` is the adversarial origin.
    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn center(&self, i: usize) -> &[f64] {
        self.centers.row(i)
    }

    /// The `k` benign centers only.
    pub fn benign_centers(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.k).collect();
        self.centers.select_rows(&idx)
    }

    pub fn thresholds(&self) -> Option<&[f64]> {
        self.thresholds.as_deref()
    }

    pub fn set_thresholds(&mut self, tau: Vec<f64>) -> Result<()> {
        if tau.len() != self.k {
            return Err(Error::Shape(format!("{} thresholds for {} classes", tau.len(), self.k)));
        }
        if tau.iter().any(|t| t.is_nan()) {
            return Err(Error::NonFinite("thresholds".into()));
        }
        self.thresholds = Some(tau);
        Ok(())
    }

    pub fn clear_thresholds(&mut self) {
        self.thresholds = None;
    }

    fn check_z(&self, z: &Tensor) -> Result<()> {
        if z.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "representation width {} vs head dimension {}",
                z.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `b x k` matrix of `||z_r - mu_y||_2` over benign classes.
    pub fn distances(&self, z: &Tensor) -> Result<Tensor> {
        self.check_z(z)?;
        let mut out = Vec::with_capacity(z.rows() * self.k);
        for row in z.row_iter() {
            out.extend((0..self.k).map(|i| sq_dist(row, self.center(i)).sqrt()));
        }
        Ok(Tensor::from_parts(vec![z.rows(), self.k], out))
    }

    /// Nearest benign center per row, ties to the lowest index, with the
    /// distance to it (the detection score `q`).
    pub fn scores(&self, z: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
        let d = self.distances(z)?;
        Ok(d.row_iter().map(argmin_lowest).unzip())
    }

    pub fn classify(&self, z: &Tensor) -> Result<Vec<usize>> {
        Ok(self.scores(z)?.0)
    }

    /// `true` where `q > tau_{y_hat}`.
    pub fn detect(&self, z: &Tensor) -> Result<Vec<bool>> {
        let tau = self.thresholds.as_ref().ok_or(Error::Uncalibrated)?;
        let (labels, q) = self.scores(z)?;
        Ok(labels.iter().zip(&q).map(|(&y, &s)| s > tau[y]).collect())
    }

    /// `(1/k) sum_{i<k} (2 pi)^{-m/2} exp(-0.5 ||z - mu_i||^2)`.
    pub fn likelihood(&self, z: &Tensor) -> Result<Vec<f64>> {
        self.check_z(z)?;
        let norm = (2.0 * PI).powf(-(self.dim() as f64) / 2.0) / self.k as f64;
        Ok(z
            .row_iter()
            .map(|row| {
                norm * (0..self.k).map(|i| (-0.5 * sq_dist(row, self.center(i))).exp()).sum::<f64>()
            })
            .collect())
    }

    /// Per-class log density of the unit-covariance modes (benign classes).
    pub fn log_densities(&self, z: &Tensor) -> Result<Tensor> {
        self.check_z(z)?;
        let c = -(self.dim() as f64) / 2.0 * (2.0 * PI).ln();
        let d = self.distances(z)?;
        Ok(d.map(|v| c - 0.5 * v * v))
    }
}

fn argmin_lowest(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Group-balanced training objective `L_fix`: mean half-squared distance
/// over the success group plus mean half-squared distance over the
/// fail-plus-benign group. Labels index rows of the `(k+1)`-row center
/// matrix.
#[derive(Debug, Clone, Copy)]
pub struct Group<'a> {
    pub inputs: &'a Tensor,
    pub labels: &'a [usize],
    /// Row `r` stands for `counts[r]` identical members (all 1 when absent).
    pub counts: Option<&'a [usize]>,
}

impl<'a> Group<'a> {
    pub fn new(inputs: &'a Tensor, labels: &'a [usize]) -> Self {
        Self { inputs, labels, counts: None }
    }

    pub fn with_counts(inputs: &'a Tensor, labels: &'a [usize], counts: &'a [usize]) -> Self {
        Self { inputs, labels, counts: Some(counts) }
    }

    /// Number of members, counting multiplicities.
    pub fn size(&self) -> usize {
        self.counts.map_or(self.labels.len(), |c| c.iter().sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub encoder: EncoderNetwork,
    pub head: GaussianMixtureHead,
}

impl DetectorModel {
    pub fn new(encoder: EncoderNetwork, head: GaussianMixtureHead) -> Result<Self> {
        if encoder.output_dim() != head.dim() {
            return Err(Error::Shape(format!(
                "encoder emits {} features, head expects {}",
                encoder.output_dim(),
                head.dim()
            )));
        }
        Ok(Self { encoder, head })
    }

    pub fn represent(&self, batch: &Tensor) -> Result<Tensor> {
        self.encoder.forward(batch)
    }

    pub fn class_distances(&self, batch: &Tensor) -> Result<Tensor> {
        self.head.distances(&self.represent(batch)?)
    }

    pub fn classify(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.head.classify(&self.represent(batch)?)
    }

    /// Predicted labels and detection scores `q = ||H(x) - mu_{y_hat}||`.
    pub fn detection_score(&self, batch: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
        self.head.scores(&self.represent(batch)?)
    }

    pub fn detect(&self, batch: &Tensor) -> Result<Vec<bool>> {
        self.head.detect(&self.represent(batch)?)
    }

    pub fn likelihood(&self, batch: &Tensor) -> Result<Vec<f64>> {
        self.head.likelihood(&self.represent(batch)?)
    }

    /// Sets `tau_i` to the smallest benign score of predicted class `i` such
    /// that the fraction of class-`i` scores strictly above it is at most
    /// `fpr_percent / 100`.
    pub fn calibrate_thresholds(&mut self, benign: &LabeledDataset, fpr_percent: f64) -> Result<()> {
        if !(0.0..100.0).contains(&fpr_percent) {
            return Err(Error::InvalidArgument(format!("fpr {fpr_percent}% outside [0, 100)")));
        }
        let (labels, q) = self.detection_score(benign.inputs())?;
        let tau = thresholds_from_scores(self.head.k(), &labels, &q, fpr_percent)?;
        self.head.set_thresholds(tau)
    }

    pub fn group_balanced_loss(
        &self,
        success: Option<Group<'_>>,
        fail_benign: Group<'_>,
    ) -> Result<(f64, GradientBundle)> {
        let success = success.filter(|g| !g.labels.is_empty());
        if fail_benign.labels.is_empty() {
            return Err(Error::Empty("fail+benign group".into()));
        }
        let mut parts = vec![fail_benign];
        parts.extend(success);
        let mut labels = Vec::new();
        let mut weights = Vec::new();
        for g in &parts {
            if g.inputs.rows() != g.labels.len() {
                return Err(Error::Shape("group inputs/labels".into()));
            }
            labels.extend_from_slice(g.labels);
            let size = g.size() as f64;
            match g.counts {
                None => weights.extend(std::iter::repeat_n(1.0 / size, g.labels.len())),
                Some(c) => {
                    if c.len() != g.labels.len() || c.contains(&0) {
                        return Err(Error::Shape("group counts".into()));
                    }
                    weights.extend(c.iter().map(|&n| n as f64 / size));
                }
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > self.head.k()) {
            return Err(Error::InvalidArgument(format!("label {bad} beyond adversarial class")));
        }
        let inputs: Vec<&Tensor> = parts.iter().map(|g| g.inputs).collect();
        let x = Tensor::vstack(&inputs)?;
        let targets = self.head.centers().select_rows(&labels);
        let loss = RepresentationLoss::HalfSquared { targets, weights };
        crate::autodiff::loss_gradients(&self.encoder, &x, &loss)
    }
}

/// Per-class quantile thresholds from `(predicted label, score)` pairs.
pub fn thresholds_from_scores(
    k: usize,
    labels: &[usize],
    scores: &[f64],
    fpr_percent: f64,
) -> Result<Vec<f64>> {
    per_class_scores(k, labels, scores)
        .into_iter()
        .enumerate()
        .map(|(i, s)| quantile_threshold(s, fpr_percent).ok_or(Error::EmptyClass(i)))
        .collect()
}

/// Like [`thresholds_from_scores`], but a class that received no scores gets
/// `fallback` instead of an error.
pub fn thresholds_with_fallback(
    k: usize,
    labels: &[usize],
    scores: &[f64],
    fpr_percent: f64,
    fallback: f64,
) -> Vec<f64> {
    per_class_scores(k, labels, scores)
        .into_iter()
        .map(|s| quantile_threshold(s, fpr_percent).unwrap_or(fallback))
        .collect()
}

fn per_class_scores(k: usize, labels: &[usize], scores: &[f64]) -> Vec<Vec<f64>> {
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (&y, &s) in labels.iter().zip(scores) {
        per_class[y].push(s);
    }
    per_class
}

/// Smallest score whose strictly-greater count fits the `fpr` budget.
fn quantile_threshold(mut s: Vec<f64>, fpr_percent: f64) -> Option<f64> {
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let allowed = fpr_percent / 100.0 * s.len() as f64 + 1e-9;
    let mut j = 0;
    loop {
        let mut end = j;
        while end + 1 < s.len() && s[end + 1] == s[j] {
            end += 1;
        }
        let above = (s.len() - end - 1) as f64;
        if above <= allowed {
            return Some(s[j]);
        }
        j = end + 1;
    }
}
