//! Accuracy, ROC AUC, class-weighted expected ROC AUC (EROC), attack
//! success ratio, and the report that carries them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::gmm::DetectorModel;
use crate::tensor::Tensor;

pub fn accuracy(model: &DetectorModel, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let pred = model.classify(dataset.inputs())?;
    let hits = pred.iter().zip(dataset.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// `P(pos > neg) + P(pos == neg) / 2` over all pairs, computed by sorting.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("roc_auc needs both classes".into()));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("roc_auc score".into()));
    }
    let mut neg = neg.to_vec();
    neg.sort_by(f64::total_cmp);
    // twice the pair count, kept integral so the ratio matches pair counting
    let mut twice: u128 = 0;
    for &p in pos {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

/// Predicted-class detection scores. Kept separate from the model so the
/// metric is a pure function of scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoredSet {
    pub fn from_model(model: &DetectorModel, inputs: &Tensor) -> Result<Self> {
        let (labels, scores) = model.detection_score(inputs)?;
        Ok(Self { labels, scores })
    }
}

/// `sum_i w_i AUC_i` with `w_i` the share of adversarials predicted as `i`
/// and `AUC_i` separating those adversarials from benign examples predicted
/// as `i`. A class with adversarials but no benign negatives scores 0.
pub fn eroc(k: usize, benign: &ScoredSet, adversarial: &ScoredSet) -> Result<f64> {
    let n = adversarial.labels.len();
    if n == 0 {
        return Err(Error::Empty("adversarial set".into()));
    }
    let split = |s: &ScoredSet| {
        let mut out = vec![Vec::new(); k];
        for (&y, &q) in s.labels.iter().zip(&s.scores) {
            out[y].push(q);
        }
        out
    };
    let (neg, pos) = (split(benign), split(adversarial));
    let mut total = 0.0;
    for (p, q) in pos.iter().zip(&neg) {
        if p.is_empty() || q.is_empty() {
            continue;
        }
        total += p.len() as f64 / n as f64 * roc_auc(p, q)?;
    }
    Ok(total)
}

pub fn model_eroc(model: &DetectorModel, benign: &Tensor, adversarial: &Tensor) -> Result<f64> {
    eroc(
        model.head.k(),
        &ScoredSet::from_model(model, benign)?,
        &ScoredSet::from_model(model, adversarial)?,
    )
}

/// Verdict for one input: predicted label and whether it was admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub label: usize,
    pub admitted: bool,
}

pub fn verdicts(model: &DetectorModel, inputs: &Tensor) -> Result<Vec<Verdict>> {
    let tau = model.head.thresholds().ok_or(Error::Uncalibrated)?;
    let (labels, q) = model.detection_score(inputs)?;
    Ok(labels.iter().zip(&q).map(|(&label, &s)| Verdict { label, admitted: s <= tau[label] }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsrCount {
    pub eligible: usize,
    pub successes: usize,
}

impl AsrCount {
    pub fn ratio(&self) -> Result<f64> {
        if self.eligible == 0 {
            return Err(Error::Empty("no eligible examples".into()));
        }
        Ok(self.successes as f64 / self.eligible as f64)
    }
}

/// Eligible: clean input correctly classified and admitted. Success: its
/// attacked counterpart is misclassified and admitted.
pub fn count_successes(labels: &[usize], clean: &[Verdict], attacked: &[Verdict]) -> AsrCount {
    let mut out = AsrCount { eligible: 0, successes: 0 };
    for ((&y, c), a) in labels.iter().zip(clean).zip(attacked) {
        if c.label == y && c.admitted {
            out.eligible += 1;
            if a.label != y && a.admitted {
                out.successes += 1;
            }
        }
    }
    out
}

/// ASR at the model's current thresholds. `attack` maps clean inputs and
/// labels to attacked inputs, row for row.
pub fn attack_success_ratio(
    model: &DetectorModel,
    dataset: &LabeledDataset,
    attack: &mut dyn FnMut(&Tensor, &[usize]) -> Result<Tensor>,
) -> Result<(f64, AsrCount)> {
    let clean = verdicts(model, dataset.inputs())?;
    let adv = attack(dataset.inputs(), dataset.labels())?;
    if adv.rows() != dataset.len() {
        return Err(Error::Shape("attack changed the number of rows".into()));
    }
    let count = count_successes(dataset.labels(), &clean, &verdicts(model, &adv)?);
    Ok((count.ratio()?, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: String,
    pub norm: String,
    pub epsilon: f64,
    pub targeted: bool,
    /// One entry per fpr level; `None` when nothing was eligible.
    pub asr: Vec<Option<f64>>,
    pub eroc: Option<f64>,
    pub accuracy: f64,
    pub eligible: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr_levels: Vec<f64>,
    pub rows: Vec<ReportRow>,
    pub fingerprint: String,
    pub seed: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn level_name(p: f64) -> String {
    p.to_string().replace('.', "_")
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["attack".to_string(), "norm".into(), "epsilon".into(), "targeted".into()];
        cols.extend(self.fpr_levels.iter().map(|p| format!("asr_{}", level_name(*p))));
        cols.extend(["eroc", "accuracy", "eligible", "successes"].map(String::from));
        cols.join(",")
    }

    /// Header plus one line per row; ratios at full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.attack.clone(), r.norm.clone(), r.epsilon.to_string(), r.targeted.to_string()];
            cells.extend(r.asr.iter().map(|a| opt(*a)));
            cells.extend([opt(r.eroc), r.accuracy.to_string(), r.eligible.to_string(), r.successes.to_string()]);
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Fixed-width table with two decimals.
    pub fn to_text(&self) -> String {
        let two = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let mut out = String::new();
        let _ = write!(out, "{:<32} {:>5} {:>7} {:>8}", "attack", "norm", "eps", "targeted");
        for p in &self.fpr_levels {
            let _ = write!(out, " {:>8}", format!("ASR-{p}"));
        }
        let _ = writeln!(out, " {:>6} {:>6} {:>8} {:>9}", "EROC", "ACC", "eligible", "successes");
        for r in &self.rows {
            let _ = write!(out, "{:<32} {:>5} {:>7} {:>8}", r.attack, r.norm, r.epsilon, r.targeted);
            for a in &r.asr {
                let _ = write!(out, " {:>8}", two(*a));
            }
            let _ = writeln!(
                out,
                " {:>6} {:>6} {:>8} {:>9}",
                two(r.eroc),
                two(Some(r.accuracy)),
                r.eligible,
                r.successes
            );
        }
        let _ = writeln!(out, "seed {}  config {}", self.seed, self.fingerprint);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, EncoderNetwork, Layer};
    use crate::gmm::GaussianMixtureHead;
    use proptest::prelude::*;

    fn identity_model() -> DetectorModel {
        let head = GaussianMixtureHead::build(2, 1, 1.0).unwrap();
        let layer = Layer::new(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(vec![2]),
            Activation::Linear,
        )
        .unwrap();
        let mut m = DetectorModel::new(EncoderNetwork::new(vec![layer]).unwrap(), head).unwrap();
        m.head.set_thresholds(vec![0.5, 0.5]).unwrap();
        m
    }

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), brute_auc(&[0.0, 2.0], &[1.0, 3.0]));
        assert!(roc_auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn accuracy_counts() {
        let m = identity_model();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.9, 0.1], vec![0.2, 0.8]])
            .unwrap();
        let d = LabeledDataset::new(x.clone(), vec![0, 1, 0, 0], 2).unwrap();
        assert_eq!(accuracy(&m, &d).unwrap(), 0.75);
        let d = LabeledDataset::new(x.clone(), vec![0, 1, 0, 1], 2).unwrap();
        assert_eq!(accuracy(&m, &d).unwrap(), 1.0);
        let d = LabeledDataset::new(x, vec![1, 0, 1, 0], 2).unwrap();
        assert_eq!(accuracy(&m, &d).unwrap(), 0.0);
    }

    #[test]
    fn eroc_degenerate_cases() {
        let benign = ScoredSet { labels: vec![0, 0, 1, 1], scores: vec![0.1, 0.2, 0.1, 0.3] };
        let adv = ScoredSet { labels: vec![0, 1, 1], scores: vec![0.5, 0.6, 0.9] };
        assert_eq!(eroc(2, &benign, &adv).unwrap(), 1.0);

        let adv = ScoredSet { labels: vec![1, 1], scores: vec![0.2, 0.9] };
        let alone = roc_auc(&[0.2, 0.9], &[0.1, 0.3]).unwrap();
        assert_eq!(eroc(3, &benign, &adv).unwrap(), alone);

        // no benign negatives predicted as class 2
        let adv = ScoredSet { labels: vec![2, 0], scores: vec![1.0, 1.0] };
        assert_eq!(eroc(3, &benign, &adv).unwrap(), 0.5);
        assert!(eroc(2, &benign, &ScoredSet { labels: vec![], scores: vec![] }).is_err());
    }

    #[test]
    fn asr_enumeration() {
        let ok = |label| Verdict { label, admitted: true };
        let flagged = |label| Verdict { label, admitted: false };
        let labels = [0, 1, 0, 1, 1];
        // last example is misclassified before the attack: not eligible
        let clean = [ok(0), ok(1), ok(0), ok(1), ok(0)];
        let attacked = [ok(1), flagged(0), ok(0), ok(1), ok(1)];
        let c = count_successes(&labels, &clean, &attacked);
        assert_eq!((c.eligible, c.successes), (4, 1));
        assert_eq!(c.ratio().unwrap(), 0.25);
    }

    #[test]
    fn asr_zero_budget_and_teleport() {
        let m = identity_model();
        let x = Tensor::from_rows(&[vec![0.9, 0.0], vec![0.0, 0.9]]).unwrap();
        let d = LabeledDataset::new(x, vec![0, 1], 2).unwrap();
        let (r, c) = attack_success_ratio(&m, &d, &mut |x, _| Ok(x.clone())).unwrap();
        assert_eq!((r, c.eligible), (0.0, 2));
        let mut teleport = |_: &Tensor, y: &[usize]| {
            Tensor::from_rows(&y.iter().map(|&y| if y == 0 { vec![0.0, 1.0] } else { vec![1.0, 0.0] }).collect::<Vec<_>>())
        };
        assert_eq!(attack_success_ratio(&m, &d, &mut teleport).unwrap().0, 1.0);
    }

    #[test]
    fn csv_layout() {
        let report = EvalReport {
            fpr_levels: vec![1.0, 5.0],
            rows: vec![ReportRow {
                attack: "clean".into(),
                norm: "-".into(),
                epsilon: 0.0,
                targeted: false,
                asr: vec![None, None],
                eroc: None,
                accuracy: 0.126,
                eligible: 0,
                successes: 0,
            }],
            fingerprint: "x".into(),
            seed: 1,
        };
        let csv = report.to_csv();
        assert_eq!(
            csv,
            "attack,norm,epsilon,targeted,asr_1,asr_5,eroc,accuracy,eligible,successes\n\
             clean,-,0,false,,,,0.126,0,0\n"
        );
        assert_eq!(csv, report.to_csv());
        assert!(report.to_text().contains("0.13"));
    }

    proptest! {
        #[test]
        fn auc_matches_pairs(pos in prop::collection::vec(0u8..8, 1..30), neg in prop::collection::vec(0u8..8, 1..30)) {
            let p: Vec<f64> = pos.iter().map(|&v| v as f64).collect();
            let n: Vec<f64> = neg.iter().map(|&v| v as f64).collect();
            prop_assert_eq!(roc_auc(&p, &n).unwrap(), brute_auc(&p, &n));
        }

        #[test]
        fn auc_complement(pos in prop::collection::hash_set(0u32..10_000, 1..20), neg in prop::collection::hash_set(10_000u32..20_000, 1..20)) {
            let mut p: Vec<f64> = pos.iter().map(|&v| v as f64 * 0.37 % 101.0).collect();
            let n: Vec<f64> = neg.iter().map(|&v| v as f64 * 0.37 % 101.0 + 0.001).collect();
            p.retain(|v| !n.contains(v));
            prop_assume!(!p.is_empty());
            let s = roc_auc(&p, &n).unwrap() + roc_auc(&n, &p).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
