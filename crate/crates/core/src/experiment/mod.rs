//! Config-driven pipeline: data preparation, training (or checkpoint reuse),
//! attack generation, evaluation and report emission.
//!
//! Every random choice derives from the master seed through
//! [`crate::seed::derive`] with a fixed stage counter, and attacks run on
//! fixed-size chunks, so outputs do not depend on the worker count.

pub mod artifacts;
pub mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attacks::{
    admitted_labels, boundary_attack, fgsm, nes_attack, pgd, project_into_budget, Norm,
};
use crate::checkpoint::{load_model, save_model};
use crate::data::{load_mnist, split_dataset, synth_blobs, LabeledDataset};
use crate::error::{Error, Result};
use crate::gmm::{DetectorModel, GaussianMixtureHead};
use crate::metrics::{accuracy, count_successes, eroc, verdicts, EvalReport, ReportRow, ScoredSet};
use crate::seed::{self, stage};
use crate::tensor::Tensor;
use crate::training::{calibrate_lenient, init_model, train_model, EpochStats, TrainMode};

use artifacts::{load_batch, save_batch, AdversarialBatch, Provenance};
use config::{AttackKind, AttackSpec, DataSource, ExperimentConfig};

/// Rows per attack work unit.
pub const ATTACK_CHUNK: usize = 50;

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    /// Per-epoch threshold data, carved out of the training examples.
    pub train_calib: LabeledDataset,
    /// Benign held-out data for evaluation thresholds.
    pub eval_calib: LabeledDataset,
    pub test: LabeledDataset,
}

fn fraction(want: usize, have: usize, what: &str) -> Result<f64> {
    if want > have {
        return Err(Error::Config(format!("{what} = {want} exceeds the {have} examples available")));
    }
    Ok(want as f64 / have as f64)
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    let data_seed = seed::derive(cfg.seed, stage::DATA);
    let (train, eval_calib, test) = match d.source {
        DataSource::Mnist => {
            let dir = d.dir.as_ref().ok_or_else(|| Error::Config("dataset.dir missing".into()))?;
            let full = load_mnist(dir, true)?;
            let test_full = load_mnist(dir, false)?;
            let n = full.len();
            let calib_n = d.eval_calib_size.unwrap_or(10_000);
            let train_n = d.train_size.unwrap_or(n.saturating_sub(calib_n));
            let ft = fraction(train_n, n, "dataset.train_size")?;
            let fc = fraction(calib_n, n, "dataset.eval_calib_size")?;
            if ft + fc > 1.0 {
                return Err(Error::Config("train_size + eval_calib_size exceed the training file".into()));
            }
            let mut parts = split_dataset(&full, &[ft, fc], seed::derive(data_seed, 0))?;
            let eval_calib = parts.pop().expect("two parts");
            let train = parts.pop().expect("two parts");
            let test = match d.test_size {
                Some(t) if t < test_full.len() => {
                    let f = fraction(t, test_full.len(), "dataset.test_size")?;
                    split_dataset(&test_full, &[f], seed::derive(data_seed, 1))?.remove(0)
                }
                Some(t) if t > test_full.len() => {
                    return Err(Error::Config(format!("dataset.test_size {t} exceeds the test file")))
                }
                _ => test_full,
            };
            (train, eval_calib, test)
        }
        DataSource::Synth => {
            let all = synth_blobs(d.classes, d.per_class, d.dim, d.spread, seed::derive(data_seed, 2))?;
            let mut parts = split_dataset(&all, &[0.6, 0.2, 0.2], seed::derive(data_seed, 0))?;
            let test = parts.pop().expect("three parts");
            let eval_calib = parts.pop().expect("three parts");
            (parts.pop().expect("three parts"), eval_calib, test)
        }
    };
    let f = d.train_calib_fraction;
    let mut parts = split_dataset(&train, &[1.0 - f, f], seed::derive(data_seed, 3))?;
    let train_calib = parts.pop().expect("two parts");
    Ok(Splits { train: parts.pop().expect("two parts"), train_calib, eval_calib, test })
}

/// FNV-1a over `bytes`, as 16 hex digits.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

/// Hash of every config section that can change results (not the output
/// location).
pub fn config_fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    let parts = json(&(cfg.seed, &cfg.dataset, &cfg.model, &cfg.train, &cfg.attacks, &cfg.metrics))?;
    Ok(fingerprint(parts.as_bytes()))
}

/// Identifies everything that determines a trained model.
pub fn model_key(cfg: &ExperimentConfig, mode: TrainMode, epochs: usize) -> Result<String> {
    let parts = json(&(&cfg.dataset, &cfg.model, &cfg.train, cfg.seed, mode, epochs))?;
    Ok(fingerprint(parts.as_bytes()))
}

/// Run-time knobs that do not change results.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Print per-epoch and per-attack progress to stderr.
    pub verbose: bool,
}

impl RunOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self { out_dir: cfg.output.dir.clone(), workers: 1, verbose: false }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))
    }
}

fn layer_sizes(cfg: &ExperimentConfig, splits: &Splits) -> Vec<usize> {
    let k = splits.train.classes();
    let mut sizes = vec![splits.train.dim()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(k * cfg.model.block_width);
    sizes
}

/// Trains a model of the given mode, or loads it when a checkpoint with a
/// matching key exists under `out_dir`.
pub fn train_or_load(
    cfg: &ExperimentConfig,
    splits: &Splits,
    opts: &RunOptions,
    mode: TrainMode,
    name: &str,
) -> Result<(DetectorModel, String)> {
    let epochs = if name == "surrogate" { cfg.train.surrogate_epochs } else { cfg.train.epochs };
    let key = model_key(cfg, mode, epochs)?;
    let ckpt = opts.out_dir.join(format!("{name}.gmmd"));
    let key_path = opts.out_dir.join(format!("{name}.key"));
    if fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str()) && ckpt.exists() {
        return Ok((load_model(&ckpt)?, key));
    }
    fs::create_dir_all(&opts.out_dir)?;
    let head = GaussianMixtureHead::build(splits.train.classes(), cfg.model.block_width, cfg.model.magnitude)?;
    let init_seed = if name == "surrogate" { seed::derive(cfg.seed, stage::SURROGATE) } else { cfg.seed };
    let model = init_model(&layer_sizes(cfg, splits), head, init_seed)?;
    let tcfg = crate::training::TrainConfig { mode, epochs, seed: init_seed, ..cfg.train_config() };
    let mut log = fs::File::create(opts.out_dir.join(format!("{name}_log.jsonl")))?;
    let mut log_err = None;
    let outcome = train_model(model, &splits.train, &splits.train_calib, &tcfg, |s: &EpochStats| {
        if opts.verbose {
            eprintln!(
                "[{name}] epoch {} |D_S| {} |D_F| {} loss {:.4} acc {:.4}",
                s.epoch, s.success, s.fail, s.mean_loss, s.clean_accuracy
            );
        }
        let line = serde_json::to_string(s).unwrap_or_default();
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    save_model(&outcome.model, &ckpt)?;
    fs::write(&key_path, &key)?;
    Ok((outcome.model, key))
}

fn attack_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    seed::derive(seed::derive(cfg.seed, stage::EVAL_ATTACK), index as u64)
}

/// Runs one configured attack on `x`, whose rows are rows
/// `offset..offset + x.rows()` of the attacked split (per-row seeds depend on
/// the absolute row). `model` must be calibrated for boundary attacks.
pub fn attack_rows(
    spec: &AttackSpec,
    atk_seed: u64,
    model: &DetectorModel,
    surrogate: Option<&DetectorModel>,
    x: &Tensor,
    labels: &[usize],
    offset: usize,
) -> Result<Tensor> {
    let atk = spec.attack_config(atk_seed);
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, x, labels, spec.epsilon),
        AttackKind::Pgd | AttackKind::Mim => pgd(model, x, labels, &atk),
        AttackKind::Transfer => {
            let s = surrogate.ok_or_else(|| Error::InvalidArgument("transfer needs a surrogate".into()))?;
            pgd(s, x, labels, &atk)
        }
        AttackKind::Nes | AttackKind::Boundary => {
            let mut out = Vec::with_capacity(x.len());
            for (r, &y) in labels.iter().enumerate() {
                let row_seed = seed::derive(atk_seed, (offset + r) as u64);
                let row = x.row(r);
                let adv = if spec.kind == AttackKind::Nes {
                    nes_attack(model, row, y, &atk, &spec.nes_config(row_seed))?
                } else {
                    boundary_row(model, row, y, spec, row_seed)?
                };
                out.extend(adv);
            }
            Tensor::matrix(x.rows(), x.cols(), out)
        }
    }
}

/// Decision-based attack whose oracle is "admitted with a wrong label". The
/// result is pulled back into the budget; with no adversarial start the
/// clean input is returned.
fn boundary_row(model: &DetectorModel, x: &[f64], y: usize, spec: &AttackSpec, row_seed: u64) -> Result<Vec<f64>> {
    let mut oracle = |pts: &Tensor| -> Result<Vec<bool>> {
        Ok(admitted_labels(model, pts)?.into_iter().map(|l| l.is_some_and(|l| l != y)).collect())
    };
    match boundary_attack(&mut oracle, x, &spec.boundary_config(row_seed)) {
        Ok(out) => project_into_budget(x, &out.adversarial, spec.norm, spec.epsilon),
        Err(Error::NoStartingPoint(_)) => Ok(x.to_vec()),
        Err(e) => Err(e),
    }
}

/// Runs every configured attack against `model` (calibrated at the first
/// fpr level) and writes each batch under `out_dir/adv`.
pub fn run_attacks(
    cfg: &ExperimentConfig,
    splits: &Splits,
    model: &DetectorModel,
    model_key: &str,
    surrogate: Option<&DetectorModel>,
    opts: &RunOptions,
) -> Result<Vec<AdversarialBatch>> {
    let mut model = model.clone();
    calibrate_lenient(&mut model, &splits.eval_calib, cfg.metrics.fpr_levels[0])?;
    let adv_dir = opts.out_dir.join("adv");
    fs::create_dir_all(&adv_dir)?;
    let pool = opts.pool()?;
    let mut out = Vec::with_capacity(cfg.attacks.len());
    for (i, spec) in cfg.attacks.iter().enumerate() {
        let n = spec.limit.unwrap_or(splits.test.len()).min(splits.test.len());
        let indices: Vec<usize> = (0..n).collect();
        let subset = splits.test.subset(&indices);
        let atk_seed = attack_seed(cfg, i);
        let starts: Vec<usize> = (0..n).step_by(ATTACK_CHUNK).collect();
        let chunks: Result<Vec<Tensor>> = pool.install(|| {
            starts
                .par_iter()
                .map(|&s| {
                    let idx: Vec<usize> = (s..(s + ATTACK_CHUNK).min(n)).collect();
                    let part = subset.subset(&idx);
                    attack_rows(spec, atk_seed, &model, surrogate, part.inputs(), part.labels(), s)
                })
                .collect()
        });
        let chunks = chunks?;
        let refs: Vec<&Tensor> = chunks.iter().collect();
        let batch = AdversarialBatch {
            provenance: Provenance {
                attack: spec.clone(),
                attack_seed: atk_seed,
                model_key: model_key.to_string(),
                indices,
            },
            inputs: Tensor::vstack(&refs)?,
        };
        save_batch(&batch, &adv_dir.join(format!("{}.gmma", spec.name)))?;
        if opts.verbose {
            eprintln!("[attack] {} done on {n} examples", spec.name);
        }
        out.push(batch);
    }
    Ok(out)
}

pub fn load_attacks(cfg: &ExperimentConfig, opts: &RunOptions, model_key: &str) -> Result<Vec<AdversarialBatch>> {
    cfg.attacks
        .iter()
        .map(|spec| {
            let path = opts.out_dir.join("adv").join(format!("{}.gmma", spec.name));
            let b = load_batch(&path)?;
            if b.provenance.model_key != model_key || &b.provenance.attack != spec {
                return Err(Error::Format(format!(
                    "{} was produced by a different model or attack config",
                    path.display()
                )));
            }
            Ok(b)
        })
        .collect()
}

/// Scores the clean test split and every adversarial batch.
pub fn evaluate(
    cfg: &ExperimentConfig,
    splits: &Splits,
    model: &DetectorModel,
    batches: &[AdversarialBatch],
) -> Result<EvalReport> {
    let mut model = model.clone();
    let levels = &cfg.metrics.fpr_levels;
    let test = &splits.test;
    let acc = accuracy(&model, test)?;
    let k = model.head.k();
    let benign_scores = ScoredSet::from_model(&model, test.inputs())?;

    let mut asr = vec![Vec::new(); batches.len()];
    let mut counts = vec![None; batches.len()];
    let mut clean_eligible = 0;
    for (li, &p) in levels.iter().enumerate() {
        calibrate_lenient(&mut model, &splits.eval_calib, p)?;
        let clean = verdicts(&model, test.inputs())?;
        if li == 0 {
            clean_eligible = clean
                .iter()
                .zip(test.labels())
                .filter(|(v, &y)| v.label == y && v.admitted)
                .count();
        }
        for (bi, b) in batches.iter().enumerate() {
            let idx = &b.provenance.indices;
            if idx.iter().any(|&i| i >= test.len()) {
                return Err(Error::Format(format!("batch {} indexes past the test split", b.provenance.attack.name)));
            }
            let labels: Vec<usize> = idx.iter().map(|&i| test.labels()[i]).collect();
            let clean_sub: Vec<_> = idx.iter().map(|&i| clean[i]).collect();
            let c = count_successes(&labels, &clean_sub, &verdicts(&model, &b.inputs)?);
            asr[bi].push(c.ratio().ok());
            if li == 0 {
                counts[bi] = Some(c);
            }
        }
    }

    calibrate_lenient(&mut model, &splits.eval_calib, levels[0])?;
    let mut rows = vec![ReportRow {
        attack: "clean".into(),
        norm: "-".into(),
        epsilon: 0.0,
        targeted: false,
        asr: vec![None; levels.len()],
        eroc: None,
        accuracy: acc,
        eligible: clean_eligible,
        successes: 0,
    }];
    let clean = verdicts(&model, test.inputs())?;
    for (bi, b) in batches.iter().enumerate() {
        let spec = &b.provenance.attack;
        let idx = &b.provenance.indices;
        let adv_scores = ScoredSet::from_model(&model, &b.inputs)?;
        // adversarial examples: eligible rows whose label the attack changed
        let mut adversarial = ScoredSet { labels: Vec::new(), scores: Vec::new() };
        for (r, &i) in idx.iter().enumerate() {
            let y = test.labels()[i];
            if clean[i].label == y && clean[i].admitted && adv_scores.labels[r] != y {
                adversarial.labels.push(adv_scores.labels[r]);
                adversarial.scores.push(adv_scores.scores[r]);
            }
        }
        let eroc_value = if adversarial.labels.is_empty() { None } else { Some(eroc(k, &benign_scores, &adversarial)?) };
        let c = counts[bi].expect("first level counted");
        rows.push(ReportRow {
            attack: spec.name.clone(),
            norm: if spec.kind == AttackKind::Fgsm { Norm::Linf.to_string() } else { spec.norm.to_string() },
            epsilon: spec.epsilon,
            targeted: spec.targeted(),
            asr: asr[bi].clone(),
            eroc: eroc_value,
            accuracy: acc,
            eligible: c.eligible,
            successes: c.successes,
        });
    }
    Ok(EvalReport {
        fpr_levels: levels.clone(),
        rows,
        fingerprint: config_fingerprint(cfg)?,
        seed: cfg.seed,
    })
}

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("report.txt"), report.to_text())?;
    let js = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("report.json"), js + "\n")?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(dir.join("report.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
}

fn needs_surrogate(cfg: &ExperimentConfig) -> bool {
    cfg.attacks.iter().any(|a| a.kind == AttackKind::Transfer)
}

/// Full pipeline: train or load, attack, evaluate, write reports.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EvalReport> {
    let splits = prepare_data(cfg)?;
    let (model, key) = train_or_load(cfg, &splits, opts, cfg.train.mode, "model")?;
    let surrogate = if needs_surrogate(cfg) {
        Some(train_or_load(cfg, &splits, opts, TrainMode::Vanilla, "surrogate")?.0)
    } else {
        None
    };
    let batches = run_attacks(cfg, &splits, &model, &key, surrogate.as_ref(), opts)?;
    let report = evaluate(cfg, &splits, &model, &batches)?;
    write_report(&report, &opts.out_dir)?;
    Ok(report)
}

/// `train` subcommand.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let splits = prepare_data(cfg)?;
    train_or_load(cfg, &splits, opts, cfg.train.mode, "model")?;
    if needs_surrogate(cfg) {
        train_or_load(cfg, &splits, opts, TrainMode::Vanilla, "surrogate")?;
    }
    Ok(())
}

fn load_trained(cfg: &ExperimentConfig, opts: &RunOptions, name: &str, mode: TrainMode) -> Result<(DetectorModel, String)> {
    let epochs = if name == "surrogate" { cfg.train.surrogate_epochs } else { cfg.train.epochs };
    let key = model_key(cfg, mode, epochs)?;
    let stored = fs::read_to_string(opts.out_dir.join(format!("{name}.key"))).unwrap_or_default();
    if stored != key {
        return Err(Error::Checkpoint(format!(
            "no {name} checkpoint for this config in {}; run `train` first",
            opts.out_dir.display()
        )));
    }
    Ok((load_model(opts.out_dir.join(format!("{name}.gmmd")))?, key))
}

/// `attack` subcommand: needs a trained checkpoint.
pub fn cmd_attack(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let splits = prepare_data(cfg)?;
    let (model, key) = load_trained(cfg, opts, "model", cfg.train.mode)?;
    let surrogate =
        if needs_surrogate(cfg) { Some(load_trained(cfg, opts, "surrogate", TrainMode::Vanilla)?.0) } else { None };
    run_attacks(cfg, &splits, &model, &key, surrogate.as_ref(), opts)?;
    Ok(())
}

/// `eval` subcommand: scores stored adversarial batches.
pub fn cmd_eval(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EvalReport> {
    let splits = prepare_data(cfg)?;
    let (model, key) = load_trained(cfg, opts, "model", cfg.train.mode)?;
    let batches = load_attacks(cfg, opts, &key)?;
    let report = evaluate(cfg, &splits, &model, &batches)?;
    write_report(&report, &opts.out_dir)?;
    Ok(report)
}
