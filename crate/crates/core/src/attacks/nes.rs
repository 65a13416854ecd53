use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{project_into_budget, projection, AttackConfig, BlackBox, Objective};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NesConfig {
    pub sigma: f64,
    /// Total evaluations per estimate; must be even (antithetic pairs).
    pub samples: usize,
    pub seed: u64,
}

impl Default for NesConfig {
    fn default() -> Self {
        Self { sigma: 0.01, samples: 100, seed: 0 }
    }
}

impl NesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma {} must be > 0", self.sigma)));
        }
        if self.samples == 0 || self.samples % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "sample count {} must be positive and even",
                self.samples
            )));
        }
        Ok(())
    }
}

/// Antithetic NES estimate of `grad score(x)`:
/// `1/(sigma n) * sum_i [score(x + sigma u_i) - score(x - sigma u_i)] u_i`
/// over `n/2` standard-normal directions `u_i`. `score` evaluates a batch of
/// query points (one per row) and never sees gradients.
pub fn nes_gradient(
    score: &mut dyn FnMut(&Tensor) -> Result<Vec<f64>>,
    x: &[f64],
    cfg: &NesConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = x.len();
    let pairs = cfg.samples / 2;
    let mut rng = seed::rng(cfg.seed);
    let dirs: Vec<f64> = (0..pairs * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut queries = Vec::with_capacity(cfg.samples * n);
    for u in dirs.chunks_exact(n) {
        queries.extend(x.iter().zip(u).map(|(xi, ui)| xi + cfg.sigma * ui));
        queries.extend(x.iter().zip(u).map(|(xi, ui)| xi - cfg.sigma * ui));
    }
    let values = score(&Tensor::matrix(cfg.samples, n, queries)?)?;
    if values.len() != cfg.samples {
        return Err(Error::Shape(format!("score returned {} values", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("NES score".into()));
    }
    let mut grad = vec![0.0; n];
    for (u, pair) in dirs.chunks_exact(n).zip(values.chunks_exact(2)) {
        let diff = pair[0] - pair[1];
        grad.iter_mut().zip(u).for_each(|(g, ui)| *g += diff * ui);
    }
    let scale = 1.0 / (cfg.sigma * cfg.samples as f64);
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

/// PGD driven by NES estimates of the attack objective, querying only the
/// victim's representations. Iteration `j` draws its directions from
/// `derive(nes.seed, j)`.
pub fn nes_attack(
    victim: &dyn BlackBox,
    x: &[f64],
    y: usize,
    atk: &AttackConfig,
    nes: &NesConfig,
) -> Result<Vec<f64>> {
    atk.validate()?;
    nes.validate()?;
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("attack input outside [0, 1]".into()));
    }
    let head = victim.head();
    let base = Objective::from_config(atk);
    let mut cur = x.to_vec();
    for j in 0..atk.iterations {
        let here = Tensor::matrix(1, x.len(), cur.clone())?;
        let z = victim.represent(&here)?;
        let objective = base.resolve(head, z.row(0), y);
        let mut score = |pts: &Tensor| -> Result<Vec<f64>> {
            let zs = victim.represent(pts)?;
            let labels = vec![y; pts.rows()];
            let (loss, sgn) = objective.build(head, &zs, &labels)?;
            Ok(loss.row_values(&zs)?.into_iter().map(|v| sgn * v).collect())
        };
        let cfg = NesConfig { seed: seed::derive(nes.seed, j as u64), ..*nes };
        let g = nes_gradient(&mut score, &cur, &cfg)?;
        let dir = projection::normalize_step(&g, atk.norm);
        let cand: Vec<f64> = cur.iter().zip(&dir).map(|(c, d)| c - atk.step * d).collect();
        cur = project_into_budget(x, &cand, atk.norm, atk.epsilon)?;
    }
    Ok(cur)
}
