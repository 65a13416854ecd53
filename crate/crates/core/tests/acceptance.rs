//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`harness = false`); `ACCEPTANCE_STRICT=1` makes any failure exit non-zero.
//!
//! The MNIST criteria read the IDX files from `MNIST_DIR` (default
//! `data/mnist` at the workspace root) and fail loudly when they are absent.
//! Set `ACCEPTANCE_OUT` to keep and reuse trained checkpoints between runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gmmdet::attacks::{lp_norm, project_lp, LossKind, Norm, TargetMode};
use gmmdet::autodiff::{finite_diff_check, EncoderNetwork};
use gmmdet::experiment::config::{AttackKind, AttackSpec, ExperimentConfig};
use gmmdet::experiment::{
    attack_rows, cmd_attack, cmd_eval, prepare_data, run_experiment, train_or_load, RunOptions, Splits,
};
use gmmdet::gmm::{DetectorModel, GaussianMixtureHead};
use gmmdet::loss::RepresentationLoss;
use gmmdet::metrics::{attack_success_ratio, count_successes, eroc, roc_auc, EvalReport, ScoredSet, Verdict};
use gmmdet::seed;
use gmmdet::tensor::Tensor;
use gmmdet::data::LabeledDataset;
use rand::Rng;

struct Suite {
    failed: Vec<u32>,
}

impl Suite {
    fn record(&mut self, id: u32, title: &str, start: Instant, outcome: Result<(bool, String), String>) {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {id:>2} {} {title}: {detail} [{secs:.1}s]",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            self.failed.push(id);
        }
    }
}

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let shapes: [&[usize]; 4] = [&[3, 4], &[4, 6, 3], &[5, 4, 6, 4], &[2, 7, 5]];
    let mut worst = 0.0_f64;
    let mut checks = 0;
    for net_seed in 0..5u64 {
        for sizes in shapes {
            let mut rng = seed::rng(1000 + net_seed);
            let net = EncoderNetwork::init(sizes, &mut rng).map_err(err)?;
            let m = *sizes.last().unwrap();
            let rows = 3;
            let mut uniform = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
            let batch = Tensor::matrix(rows, sizes[0], uniform(rows * sizes[0], 0.0, 1.0)).map_err(err)?;
            let targets = Tensor::matrix(rows, m, uniform(rows * m, -1.0, 1.0)).map_err(err)?;
            let centers = Tensor::matrix(4, m, uniform(4 * m, -1.5, 1.5)).map_err(err)?;
            let weights = uniform(rows, 0.2, 2.0);
            let losses = [
                RepresentationLoss::Constant(1.5),
                RepresentationLoss::Distance { targets: targets.clone() },
                RepresentationLoss::HalfSquared { targets, weights },
                RepresentationLoss::Margin { centers: centers.clone(), labels: vec![0, 1, 3], kappa: 0.5 },
                RepresentationLoss::TargetMargin { centers: centers.clone(), targets: vec![2, 0, 1], kappa: 0.5 },
                RepresentationLoss::CrossEntropy { centers, labels: vec![1, 2, 0] },
            ];
            for loss in &losses {
                worst = worst.max(finite_diff_check(&net, &batch, loss).map_err(err)?);
                checks += 1;
            }
        }
    }
    Ok((worst <= 1e-5, format!("max relative error {worst:.2e} over {checks} net/loss pairs (limit 1e-5)")))
}

// ---------------------------------------------------------------- 2

/// l2 projection by bisection on the multiplier of `d = v / (1 + lambda)`.
fn oracle_l2(v: &[f64], eps: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= eps {
        return v.to_vec();
    }
    let (mut lo, mut hi) = (0.0, 1e12);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if norm / (1.0 + mid) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    v.iter().map(|x| x / (1.0 + hi)).collect()
}

/// l1 projection by bisection on the soft threshold.
fn oracle_l1(v: &[f64], eps: f64) -> Vec<f64> {
    let mass = |t: f64| v.iter().map(|x| (x.abs() - t).max(0.0)).sum::<f64>();
    if mass(0.0) <= eps {
        return v.to_vec();
    }
    let (mut lo, mut hi) = (0.0, v.iter().fold(0.0_f64, |m, x| m.max(x.abs())));
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    v.iter().map(|x| x.signum() * (x.abs() - hi).max(0.0)).collect()
}

/// linf projection by golden-section search on each coordinate.
fn oracle_linf(v: &[f64], eps: f64) -> Vec<f64> {
    let g = (5.0_f64.sqrt() - 1.0) / 2.0;
    v.iter()
        .map(|&t| {
            let (mut a, mut b) = (-eps, eps);
            for _ in 0..200 {
                let c = b - g * (b - a);
                let d = a + g * (b - a);
                if (c - t).powi(2) <= (d - t).powi(2) {
                    b = d;
                } else {
                    a = c;
                }
            }
            0.5 * (a + b)
        })
        .collect()
}

/// Best `floor(eps)`-sparse approximation by enumerating every support.
fn oracle_l0(v: &[f64], eps: f64) -> (f64, Vec<Vec<f64>>) {
    let keep = eps.floor() as usize;
    let n = v.len();
    let mut best = f64::INFINITY;
    let mut winners = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > keep {
            continue;
        }
        let cand: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { v[i] } else { 0.0 }).collect();
        let cost: f64 = cand.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        if cost < best {
            best = cost;
            winners = vec![cand];
        } else if cost == best {
            winners.push(cand);
        }
    }
    (best, winners)
}

fn projections() -> Outcome {
    let mut rng = seed::rng(2);
    let mut worst = 0.0_f64;
    let mut l0_mismatch = 0;
    let cases = 1000;
    for _ in 0..cases {
        let dim = rng.random_range(1..=6);
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let eps: f64 = rng.random_range(0.0..3.0);
        for (p, oracle) in [(Norm::L1, oracle_l1 as fn(&[f64], f64) -> Vec<f64>), (Norm::L2, oracle_l2), (Norm::Linf, oracle_linf)] {
            let got = project_lp(&v, p, eps).map_err(err)?;
            let want = oracle(&v, eps);
            let d = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(d);
        }
        let eps0 = rng.random_range(0..=dim) as f64;
        let got = project_lp(&v, Norm::L0, eps0).map_err(err)?;
        let cost: f64 = got.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
        let (best, winners) = oracle_l0(&v, eps0);
        if cost != best || !winners.contains(&got) {
            l0_mismatch += 1;
        }
    }
    Ok((
        worst <= 1e-6 && l0_mismatch == 0,
        format!("max l2 gap {worst:.2e} on {cases} vectors x 3 norms (limit 1e-6); l0 mismatches {l0_mismatch}/{cases}"),
    ))
}

// ---------------------------------------------------------------- 3

fn small_model(seed_value: u64) -> DetectorModel {
    let mut rng = seed::rng(seed_value);
    let head = GaussianMixtureHead::build(3, 2, 10.0).unwrap();
    DetectorModel::new(EncoderNetwork::init(&[5, 8, 6], &mut rng).unwrap(), head).unwrap()
}

fn constraints() -> Outcome {
    let kinds = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Mim, AttackKind::Nes, AttackKind::Boundary, AttackKind::Transfer];
    let mut rng = seed::rng(3);
    let mut cases = 0;
    let mut violations = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    for kind in kinds {
        let norms: &[Norm] = if kind == AttackKind::Fgsm { &[Norm::Linf] } else { &Norm::ALL };
        for &p in norms {
            for case in 0..200u64 {
                let mut model = small_model(case);
                // a benign calibration set from the model itself
                let calib: Vec<f64> = (0..60 * 5).map(|_| rng.random::<f64>()).collect();
                let (labels, q) = model.detection_score(&Tensor::matrix(60, 5, calib).unwrap()).map_err(err)?;
                let tau = gmmdet::gmm::thresholds_with_fallback(3, &labels, &q, 20.0, 0.0);
                model.head.set_thresholds(tau).map_err(err)?;
                let surrogate = small_model(case + 10_000);
                let x = Tensor::matrix(2, 5, (0..10).map(|_| rng.random::<f64>()).collect()).unwrap();
                let ys = [rng.random_range(0..3), rng.random_range(0..3)];
                let eps = if p == Norm::L0 { rng.random_range(0..=5) as f64 } else { rng.random_range(0.0..1.5) };
                let mode = [TargetMode::Untargeted, TargetMode::AdaptiveNearest, TargetMode::Targeted(1)][case as usize % 3];
                let loss = [LossKind::Distance, LossKind::Margin, LossKind::CrossEntropy][case as usize / 3 % 3];
                let spec = AttackSpec {
                    name: "c".into(),
                    kind,
                    norm: p,
                    epsilon: eps,
                    step: rng.random_range(0.01..0.5),
                    iterations: if kind == AttackKind::Boundary { 60 } else { 6 },
                    mode,
                    loss,
                    kappa: 0.2,
                    decay: 0.0,
                    samples: Some(if kind == AttackKind::Boundary { 30 } else { 8 }),
                    sigma: None,
                    limit: None,
                };
                let adv = attack_rows(&spec, case, &model, Some(&surrogate), &x, &ys, 0).map_err(err)?;
                let norm = if kind == AttackKind::Fgsm { Norm::Linf } else { p };
                for r in 0..2 {
                    let d: Vec<f64> = adv.row(r).iter().zip(x.row(r)).map(|(a, b)| a - b).collect();
                    let excess = lp_norm(&d, norm) - eps;
                    worst_excess = worst_excess.max(excess);
                    if excess > 1e-9 || adv.row(r).iter().any(|v| !(0.0..=1.0).contains(v)) {
                        violations += 1;
                    }
                }
                cases += 1;
            }
        }
    }
    Ok((
        violations == 0,
        format!("{violations} violations in {cases} cases (6 attacks, all norms); max ||d||_p - eps = {worst_excess:.2e}"),
    ))
}

// ---------------------------------------------------------------- 4

fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = seed::rng(4);
    let mut auc_mismatch = 0;
    for _ in 0..100 {
        let np = rng.random_range(1..60);
        let nn = rng.random_range(1..60);
        let pos: Vec<f64> = (0..np).map(|_| rng.random_range(0..20) as f64 * 0.5).collect();
        let neg: Vec<f64> = (0..nn).map(|_| rng.random_range(0..20) as f64 * 0.5).collect();
        if roc_auc(&pos, &neg).map_err(err)? != brute_auc(&pos, &neg) {
            auc_mismatch += 1;
        }
    }

    let benign = ScoredSet { labels: vec![0, 1, 2, 2], scores: vec![0.1, 0.2, 0.3, 0.4] };
    let separated = ScoredSet { labels: vec![0, 1, 2], scores: vec![1.0, 2.0, 3.0] };
    let all_above = eroc(3, &benign, &separated).map_err(err)?;
    let only_two = ScoredSet { labels: vec![2, 2, 2], scores: vec![0.35, 0.1, 0.9] };
    let degenerate = eroc(3, &benign, &only_two).map_err(err)? == roc_auc(&[0.35, 0.1, 0.9], &[0.3, 0.4]).map_err(err)?;
    let mut draw = |n: usize| -> ScoredSet {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let scores = (0..n).map(|_| rng.random::<f64>()).collect();
        ScoredSet { labels, scores }
    };
    let same = eroc(2, &draw(1000), &draw(1000)).map_err(err)?;

    let ok = |label| Verdict { label, admitted: true };
    let labels = [0, 1, 2, 0];
    let clean = [ok(0), ok(1), ok(2), ok(0)];
    let attacked = [ok(1), Verdict { label: 0, admitted: false }, ok(2), ok(0)];
    let quarter = count_successes(&labels, &clean, &attacked).ratio().map_err(err)?;

    let identity = identity_model();
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.9, 0.1], vec![0.1, 0.9]]).map_err(err)?;
    let d = LabeledDataset::new(x, vec![0, 1, 0, 1], 2).map_err(err)?;
    let zero = attack_success_ratio(&identity, &d, &mut |x, _| Ok(x.clone())).map_err(err)?.0;
    let mut teleport = |_: &Tensor, y: &[usize]| {
        Tensor::from_rows(&y.iter().map(|&y| if y == 0 { vec![0.0, 1.0] } else { vec![1.0, 0.0] }).collect::<Vec<_>>())
    };
    let one = attack_success_ratio(&identity, &d, &mut teleport).map_err(err)?.0;

    let pass = auc_mismatch == 0
        && all_above == 1.0
        && degenerate
        && (same - 0.5).abs() <= 0.05
        && quarter == 0.25
        && zero == 0.0
        && one == 1.0;
    Ok((
        pass,
        format!(
            "auc mismatches {auc_mismatch}/100; eroc separated {all_above}, single-class match {degenerate}, \
             identical draws {same:.3}; asr fixture {quarter}, zero budget {zero}, teleport {one}"
        ),
    ))
}

fn identity_model() -> DetectorModel {
    use gmmdet::autodiff::{Activation, Layer};
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

// ---------------------------------------------------------------- MNIST

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn pgd_attack(name: &str, norm: &str, eps: f64, step: f64, limit: Option<usize>) -> String {
    let limit = limit.map(|l| format!("limit = {l}\n")).unwrap_or_default();
    format!("[[attacks]]\nname = \"{name}\"\nkind = \"pgd\"\nnorm = \"{norm}\"\nepsilon = {eps}\nstep = {step}\niterations = 100\n{limit}")
}

fn mnist_config(mode: &str, out: &Path, attacks: &str) -> Result<ExperimentConfig, String> {
    let text = format!(
        r#"
seed = 0
[dataset]
source = "mnist"
dir = "{dir}"
train_size = 10000
eval_calib_size = 10000
test_size = 1000
[model]
hidden = [256, 128]
block_width = 8
magnitude = 10.0
[train]
mode = "{mode}"
epochs = 30
batch_size = 32
learning_rate = 0.001
fpr_percent = 1.0
[train.attack]
norm = "linf"
epsilon = 0.3
step = 0.01
iterations = 40
{attacks}
[metrics]
fpr_levels = [1.0]
[output]
dir = "{out}"
"#,
        dir = mnist_dir().display(),
        out = out.join(mode).display(),
    );
    ExperimentConfig::from_toml(&text).map_err(err)
}

struct Trained {
    cfg: ExperimentConfig,
    report: EvalReport,
    model: DetectorModel,
}

fn run_mode(mode: &str, out: &Path, attacks: &str) -> Result<Trained, String> {
    let cfg = mnist_config(mode, out, attacks)?;
    let opts = RunOptions { verbose: true, ..RunOptions::from_config(&cfg) };
    let t = Instant::now();
    let report = run_experiment(&cfg, &opts).map_err(err)?;
    eprintln!("[acceptance] {mode} pipeline finished in {:.0}s", t.elapsed().as_secs_f64());
    let splits = prepare_data(&cfg).map_err(err)?;
    let (model, _) = train_or_load(&cfg, &splits, &opts, cfg.train.mode, "model").map_err(err)?;
    Ok(Trained { cfg, report, model })
}

fn row<'a>(r: &'a EvalReport, name: &str) -> Result<&'a gmmdet::metrics::ReportRow, String> {
    r.rows.iter().find(|x| x.attack == name).ok_or_else(|| format!("missing row {name}"))
}

fn asr1(r: &EvalReport, name: &str) -> Result<f64, String> {
    row(r, name)?.asr[0].ok_or_else(|| format!("{name}: no eligible examples"))
}

fn eroc_of(r: &EvalReport, name: &str) -> Result<f64, String> {
    row(r, name)?.eroc.ok_or_else(|| format!("{name}: no adversarial examples for EROC"))
}

fn calibration(models: &[(&str, &DetectorModel)], splits: &Splits) -> Outcome {
    let mut worst_in = 0.0_f64;
    let mut worst_out = 0.0_f64;
    let n = splits.eval_calib.len();
    for (_, model) in models {
        let mut m = (*model).clone();
        m.calibrate_thresholds(&splits.eval_calib, 1.0).map_err(err)?;
        for (data, worst) in [(&splits.eval_calib, &mut worst_in), (&splits.test, &mut worst_out)] {
            let flags = m.detect(data.inputs()).map_err(err)?;
            let (pred, _) = m.detection_score(data.inputs()).map_err(err)?;
            for c in 0..m.head.k() {
                let total = pred.iter().filter(|&&p| p == c).count();
                let flagged = pred.iter().zip(&flags).filter(|(&p, &f)| p == c && f).count();
                if total > 0 {
                    *worst = worst.max(flagged as f64 / total as f64);
                }
            }
        }
    }
    Ok((
        n >= 2000 && worst_in <= 0.015,
        format!(
            "worst per-class FPR {:.3}% on {n} held-out calibration examples over {} models (limit 1.5%); \
             on the disjoint test split {:.3}% (informational)",
            100.0 * worst_in,
            models.len(),
            100.0 * worst_out
        ),
    ))
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    let total = Instant::now();

    let t = Instant::now();
    suite.record(1, "gradient correctness", t, gradients());
    let t = Instant::now();
    suite.record(2, "projection oracle equivalence", t, projections());
    let t = Instant::now();
    suite.record(3, "attack constraint satisfaction", t, constraints());
    let t = Instant::now();
    suite.record(4, "metric oracles", t, metric_oracles());

    let dir = mnist_dir();
    let have_mnist = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        .iter()
        .all(|f| dir.join(f).exists());
    if !have_mnist {
        for (id, title) in [
            (5, "threshold calibration"),
            (6, "desk-scale MNIST detection gap"),
            (7, "unseen budget and ablation direction"),
            (8, "large-budget sanity"),
            (9, "blackbox no stronger than whitebox"),
            (10, "determinism"),
        ] {
            suite.record(id, title, Instant::now(), Err(format!("MNIST IDX files not found in {}", dir.display())));
        }
        finish(suite, total);
        return;
    }

    let keep = std::env::var_os("ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    fs::create_dir_all(&out).expect("output dir");

    let ours_attacks = [
        pgd_attack("pgd-linf-0.3", "linf", 0.3, 0.01, None),
        pgd_attack("pgd-linf-0.4", "linf", 0.4, 0.01, None),
        pgd_attack("pgd-linf-1.0", "linf", 1.0, 0.025, None),
        pgd_attack("pgd-linf-0.3-sub", "linf", 0.3, 0.01, Some(200)),
        pgd_attack("pgd-l2-2.0-sub", "l2", 2.0, 0.05, Some(200)),
        "[[attacks]]\nname = \"nes-linf-0.3\"\nkind = \"nes\"\nepsilon = 0.3\nstep = 0.01\niterations = 100\nsamples = 100\nsigma = 0.01\nlimit = 200\n".to_string(),
        "[[attacks]]\nname = \"boundary-l2-2.0\"\nkind = \"boundary\"\nnorm = \"l2\"\nepsilon = 2.0\niterations = 1000\nsamples = 100\nlimit = 200\n".to_string(),
    ]
    .join("\n");
    let ours = run_mode("ours", &out, &ours_attacks);
    let vanilla = run_mode("vanilla", &out, &pgd_attack("pgd-linf-0.3", "linf", 0.3, 0.01, None));
    let lben_attacks = [pgd_attack("pgd-linf-0.3", "linf", 0.3, 0.01, None), pgd_attack("pgd-linf-0.4", "linf", 0.4, 0.01, None)].join("\n");
    let lben = run_mode("lben", &out, &lben_attacks);

    for r in [&ours, &vanilla, &lben].into_iter().flatten() {
        eprint!("{}", r.report.to_text());
    }

    let t = Instant::now();
    let c5 = (|| {
        let (o, v, l) = (ours.as_ref()?, vanilla.as_ref()?, lben.as_ref()?);
        let splits = prepare_data(&o.cfg).map_err(err)?;
        calibration(&[("ours", &o.model), ("vanilla", &v.model), ("lben", &l.model)], &splits)
    })();
    suite.record(5, "threshold calibration", t, c5);

    let t = Instant::now();
    let c6 = (|| {
        let (o, v) = (ours.as_ref()?, vanilla.as_ref()?);
        let (oa, va) = (asr1(&o.report, "pgd-linf-0.3")?, asr1(&v.report, "pgd-linf-0.3")?);
        let oe = eroc_of(&o.report, "pgd-linf-0.3")?;
        let acc = row(&o.report, "clean")?.accuracy;
        Ok((
            oa <= 0.30 && va >= 0.60 && oe >= 0.90 && acc >= 0.90,
            format!("ours ASR-1 {oa:.3} (<= 0.30), vanilla ASR-1 {va:.3} (>= 0.60), ours EROC {oe:.3} (>= 0.90), ours accuracy {acc:.3} (>= 0.90)"),
        ))
    })();
    suite.record(6, "desk-scale MNIST detection gap", t, c6);

    let t = Instant::now();
    let c7 = (|| {
        let (o, l) = (ours.as_ref()?, lben.as_ref()?);
        let (oa, la) = (asr1(&o.report, "pgd-linf-0.4")?, asr1(&l.report, "pgd-linf-0.4")?);
        let (oe, le) = (eroc_of(&o.report, "pgd-linf-0.4")?, eroc_of(&l.report, "pgd-linf-0.4")?);
        Ok((
            oa < la && oe >= le - 0.02,
            format!("eps 0.4: ours ASR-1 {oa:.3} < L-Ben {la:.3}; ours EROC {oe:.3} >= L-Ben {le:.3} - 0.02"),
        ))
    })();
    suite.record(7, "unseen budget and ablation direction", t, c7);

    let t = Instant::now();
    let c8 = (|| {
        let a = asr1(&ours.as_ref()?.report, "pgd-linf-1.0")?;
        Ok((a >= 0.95, format!("ours ASR-1 at eps 1.0 = {a:.3} (>= 0.95)")))
    })();
    suite.record(8, "large-budget sanity", t, c8);

    let t = Instant::now();
    let c9 = (|| {
        let r = &ours.as_ref()?.report;
        let (nes, pl) = (asr1(r, "nes-linf-0.3")?, asr1(r, "pgd-linf-0.3-sub")?);
        let (bnd, p2) = (asr1(r, "boundary-l2-2.0")?, asr1(r, "pgd-l2-2.0-sub")?);
        Ok((
            nes <= pl + 0.10 && bnd <= p2 + 0.10,
            format!("NES linf 0.3 {nes:.3} vs PGD {pl:.3}; boundary l2 2.0 {bnd:.3} vs PGD {p2:.3} (slack 0.10, 200 examples)"),
        ))
    })();
    suite.record(9, "blackbox no stronger than whitebox", t, c9);

    let t = Instant::now();
    let c10 = determinism(ours.as_ref().ok(), vanilla.as_ref().ok(), &out);
    suite.record(10, "determinism", t, c10);

    finish(suite, total);
}

/// Full reruns of the vanilla MNIST pipeline (fresh directory, different
/// worker count) and of a synthetic config; attack-plus-eval rerun for the
/// trained Ours checkpoint.
fn determinism(ours: Option<&Trained>, vanilla: Option<&Trained>, out: &Path) -> Outcome {
    let (o, v) = (ours.ok_or("ours run failed")?, vanilla.ok_or("vanilla run failed")?);
    let mut notes = Vec::new();
    let mut same = true;

    let mut again = v.cfg.clone();
    again.output.dir = out.join("vanilla-rerun");
    let _ = fs::remove_dir_all(&again.output.dir);
    let opts = RunOptions { workers: 2, ..RunOptions::from_config(&again) };
    let r = run_experiment(&again, &opts).map_err(err)?;
    let eq = r.to_csv() == fs::read_to_string(v.cfg.output.dir.join("report.csv")).map_err(err)?;
    same &= eq;
    notes.push(format!("vanilla full rerun identical: {eq}"));

    let opts = RunOptions { workers: 2, ..RunOptions::from_config(&o.cfg) };
    let before = fs::read(o.cfg.output.dir.join("report.csv")).map_err(err)?;
    cmd_attack(&o.cfg, &opts).map_err(err)?;
    cmd_eval(&o.cfg, &opts).map_err(err)?;
    let eq = before == fs::read(o.cfg.output.dir.join("report.csv")).map_err(err)?;
    same &= eq;
    notes.push(format!("ours attack+eval rerun identical: {eq}"));

    let synth = |dir: &Path| -> Result<Vec<u8>, String> {
        let text = format!(
            "seed = 5\n[dataset]\nsource = \"synth\"\nper_class = 200\n[model]\nhidden = [16]\nblock_width = 2\n\
             [train]\nepochs = 3\nbatch_size = 32\nlearning_rate = 0.01\n[train.attack]\niterations = 5\nstep = 0.05\n\
             {}\n[[attacks]]\nname = \"nes\"\nkind = \"nes\"\nepsilon = 0.3\niterations = 5\nsamples = 20\nlimit = 20\n\
             [metrics]\nfpr_levels = [1.0, 5.0]\n[output]\ndir = \"{}\"\n",
            pgd_attack("pgd", "linf", 0.3, 0.02, None),
            dir.display()
        );
        let cfg = ExperimentConfig::from_toml(&text).map_err(err)?;
        let _ = fs::remove_dir_all(dir);
        run_experiment(&cfg, &RunOptions::from_config(&cfg)).map_err(err)?;
        fs::read(dir.join("report.csv")).map_err(err)
    };
    let eq = synth(&out.join("synth-a"))? == synth(&out.join("synth-b"))?;
    same &= eq;
    notes.push(format!("synthetic full rerun identical: {eq}"));
    Ok((same, notes.join("; ")))
}

fn finish(suite: Suite, total: Instant) {
    println!("acceptance: {} of 10 criteria passed in {:.0}s", 10 - suite.failed.len(), total.elapsed().as_secs_f64());
    // Report only: a red line is a measured outcome, not a build failure.
    // Set ACCEPTANCE_STRICT=1 to turn any red line into a non-zero exit.
    if !suite.failed.is_empty() {
        println!("failed criteria: {:?}", suite.failed);
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
