//! Detector training: adversarial generation against the current model,
//! success/failure partitioning, relabeling and group-balanced updates.

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig};
use crate::autodiff::EncoderNetwork;
use crate::data::{iterate_minibatches, LabeledDataset};
use crate::error::{Error, Result};
use crate::gmm::{thresholds_with_fallback, DetectorModel, Group};
use crate::seed::{self, stage};
use crate::tensor::{sq_dist, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Successful adversarials go to the adversarial cluster, failed ones
    /// keep their labels.
    Ours,
    /// Every adversarial keeps its original label.
    Lben,
    /// Benign data only.
    Vanilla,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Ours => "ours",
            TrainMode::Lben => "lben",
            TrainMode::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub attack: AttackConfig,
    /// Benign false-positive percentage used for the per-epoch thresholds.
    pub fpr_percent: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Ours,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            attack: AttackConfig::default(),
            fpr_percent: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(self.fpr_percent > 0.0 && self.fpr_percent < 100.0) {
            return Err(Error::InvalidArgument(format!(
                "fpr {}% outside (0, 100)",
                self.fpr_percent
            )));
        }
        self.attack.validate()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(&grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Shape("parameter and gradient blocks differ".into()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Adversarial rows with the batch index they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackedSet {
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub source: Vec<usize>,
    /// Original (pre-attack) labels.
    pub labels: Vec<usize>,
}

impl AttackedSet {
    fn empty(dim: usize) -> Self {
        Self { dim, inputs: Vec::new(), source: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.inputs[r * self.dim..(r + 1) * self.dim]
    }

    fn push(&mut self, row: &[f64], source: usize, label: usize) {
        self.inputs.extend_from_slice(row);
        self.source.push(source);
        self.labels.push(label);
    }
}

/// Attacks every row of `batch` and splits the results: `A_S` holds the
/// adversarials that landed within `tau_j` of some center `j` other than
/// their original class, `A_F` the rest.
pub fn generate_adversarial_batch(
    model: &DetectorModel,
    batch: &LabeledDataset,
    atk: &AttackConfig,
) -> Result<(AttackedSet, AttackedSet)> {
    let tau = model.head.thresholds().ok_or(Error::Uncalibrated)?.to_vec();
    let adv = pgd(model, batch.inputs(), batch.labels(), atk)?;
    let z = model.represent(&adv)?;
    let head = &model.head;
    let mut success = AttackedSet::empty(batch.dim());
    let mut fail = AttackedSet::empty(batch.dim());
    for (r, &y) in batch.labels().iter().enumerate() {
        let zr = z.row(r);
        let crossed =
            (0..head.k()).any(|j| j != y && sq_dist(zr, head.center(j)).sqrt() <= tau[j]);
        let set = if crossed { &mut success } else { &mut fail };
        set.push(adv.row(r), r, y);
    }
    Ok((success, fail))
}

/// Training records for one batch. `success` carries label `k`, `fail` the
/// original labels and `benign` the clean batch unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct RelabeledBatch {
    pub success: AttackedSet,
    pub fail: AttackedSet,
    pub benign: LabeledDataset,
}

pub fn relabel_batch(
    success: AttackedSet,
    fail: AttackedSet,
    benign: LabeledDataset,
    k: usize,
) -> RelabeledBatch {
    let mut success = success;
    success.labels.iter_mut().for_each(|y| *y = k);
    RelabeledBatch { success, fail, benign }
}

impl RelabeledBatch {
    /// Loss groups `(D_S, D_F + D)`. A failed adversarial identical to its
    /// clean source is folded into that source row as a second member, so a
    /// zero-budget attack reproduces the benign-only update exactly.
    fn groups(&self) -> Result<(Option<(Tensor, Vec<usize>)>, (Tensor, Vec<usize>, Vec<usize>))> {
        let dim = self.benign.dim();
        let success = (!self.success.is_empty())
            .then(|| {
                Tensor::matrix(self.success.len(), dim, self.success.inputs.clone())
                    .map(|t| (t, self.success.labels.clone()))
            })
            .transpose()?;

        let mut counts = vec![1; self.benign.len()];
        let mut rows = self.benign.inputs().data().to_vec();
        let mut labels = self.benign.labels().to_vec();
        for r in 0..self.fail.len() {
            let src = self.fail.source[r];
            let row = self.fail.row(r);
            if row == self.benign.inputs().row(src) && self.fail.labels[r] == labels[src] {
                counts[src] += 1;
            } else {
                rows.extend_from_slice(row);
                labels.push(self.fail.labels[r]);
                counts.push(1);
            }
        }
        let fb = Tensor::matrix(labels.len(), dim, rows)?;
        Ok((success, (fb, labels, counts)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub success: usize,
    pub fail: usize,
    pub mean_loss: f64,
    pub clean_accuracy: f64,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub stats: Vec<EpochStats>,
}

/// Thresholds at `fpr_percent` on `calib`; classes nothing is predicted as
/// get `0`, so only an exact hit on their center is admitted.
pub fn calibrate_lenient(model: &mut DetectorModel, calib: &LabeledDataset, fpr_percent: f64) -> Result<()> {
    let (labels, q) = model.detection_score(calib.inputs())?;
    let tau = thresholds_with_fallback(model.head.k(), &labels, &q, fpr_percent, 0.0);
    model.head.set_thresholds(tau)
}

/// Trains `model` in place for `cfg.epochs` epochs. Thresholds are refreshed
/// on `calib` at the start of every epoch and once more at the end.
pub fn train_model(
    mut model: DetectorModel,
    train: &LabeledDataset,
    calib: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    if calib.is_empty() {
        return Err(Error::Empty("calibration split".into()));
    }
    let k = model.head.k();
    let mut adam = Adam::new(cfg.learning_rate);
    let shuffle_seed = seed::derive(cfg.seed, stage::SHUFFLE);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        calibrate_lenient(&mut model, calib, cfg.fpr_percent)?;
        let thresholds = model.head.thresholds().unwrap_or_default().to_vec();
        let (mut n_success, mut n_fail, mut loss_sum, mut loss_batches) = (0, 0, 0.0, 0usize);
        let batches = iterate_minibatches(train, cfg.batch_size, seed::derive(shuffle_seed, epoch as u64))?;
        for (b, batch) in batches.into_iter().enumerate() {
            let (loss, grads) = match cfg.mode {
                TrainMode::Vanilla => {
                    model.group_balanced_loss(None, Group::new(batch.inputs(), batch.labels()))
                }
                TrainMode::Ours | TrainMode::Lben => {
                    let (mut s, mut f) = generate_adversarial_batch(&model, &batch, &cfg.attack)?;
                    if cfg.mode == TrainMode::Lben {
                        // every adversarial keeps its label: one merged failure set
                        for r in 0..s.len() {
                            f.push(s.row(r), s.source[r], s.labels[r]);
                        }
                        s = AttackedSet::empty(batch.dim());
                    }
                    n_success += s.len();
                    n_fail += f.len();
                    let relabeled = relabel_batch(s, f, batch, k);
                    let (succ, (fb, fb_labels, counts)) = relabeled.groups()?;
                    let succ_group = succ.as_ref().map(|(t, l)| Group::new(t, l));
                    model.group_balanced_loss(succ_group, Group::with_counts(&fb, &fb_labels, &counts))
                }
            }
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { epoch, batch: b, loss: f64::NAN },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            loss_sum += loss;
            loss_batches += 1;
            adam.step(model.encoder.param_blocks_mut(), grads.param_blocks())?;
            if model.encoder.layers().iter().any(|l| !l.weight.all_finite() || !l.bias.all_finite()) {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
        }
        let pred = model.classify(calib.inputs())?;
        let correct = pred.iter().zip(calib.labels()).filter(|(p, y)| p == y).count();
        let record = EpochStats {
            epoch,
            success: n_success,
            fail: n_fail,
            mean_loss: loss_sum / loss_batches as f64,
            clean_accuracy: correct as f64 / calib.len() as f64,
            thresholds,
        };
        on_epoch(&record);
        stats.push(record);
    }
    calibrate_lenient(&mut model, calib, cfg.fpr_percent)?;
    Ok(TrainOutcome { model, stats })
}

/// Fresh detector with Glorot-uniform encoder weights drawn from
/// `derive(seed, INIT)`.
pub fn init_model(
    sizes: &[usize],
    head: crate::gmm::GaussianMixtureHead,
    seed_value: u64,
) -> Result<DetectorModel> {
    let mut rng = seed::rng(seed::derive(seed_value, stage::INIT));
    DetectorModel::new(EncoderNetwork::init(sizes, &mut rng)?, head)
}
