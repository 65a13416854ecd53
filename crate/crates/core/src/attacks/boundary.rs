use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{sq_dist, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConfig {
    pub iterations: usize,
    /// Orthogonal (spherical) step, relative to the current distance.
    pub orthogonal_step: f64,
    /// Step toward the original, relative to the current distance.
    pub source_step: f64,
    /// Multiplier applied to both steps when a window accepts >= 50%.
    pub grow: f64,
    /// Multiplier applied otherwise.
    pub shrink: f64,
    pub window: usize,
    /// Uniform draws allowed when looking for an adversarial start.
    pub init_trials: usize,
    /// Bisection steps pulling the start toward the original.
    pub init_bisect: usize,
    pub seed: u64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            orthogonal_step: 0.1,
            source_step: 0.05,
            grow: 1.1,
            shrink: 0.9,
            window: 20,
            init_trials: 100,
            init_bisect: 25,
            seed: 0,
        }
    }
}

impl BoundaryConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.orthogonal_step, self.source_step, self.grow, self.shrink];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("boundary step sizes must be positive".into()));
        }
        if self.source_step >= 1.0 {
            return Err(Error::InvalidArgument("source step must be below 1".into()));
        }
        if self.window == 0 || self.init_trials == 0 {
            return Err(Error::InvalidArgument("window and init_trials must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryOutcome {
    pub adversarial: Vec<f64>,
    /// `||x - x_t||_2` after the start and after every accepted step.
    pub distances: Vec<f64>,
    pub queries: usize,
}

/// Decision-based attack. `is_adversarial` answers one boolean per query
/// row (e.g. "label differs from the original and is admitted") and is the
/// only access to the model. Starts from a uniform sample that is already
/// adversarial, bisects it toward `x`, then alternates spherical and
/// source-directed steps, accepting a candidate only when it stays
/// adversarial and does not move away from `x`.
pub fn boundary_attack(
    is_adversarial: &mut dyn FnMut(&Tensor) -> Result<Vec<bool>>,
    x: &[f64],
    cfg: &BoundaryConfig,
) -> Result<BoundaryOutcome> {
    cfg.validate()?;
    let n = x.len();
    let mut rng = seed::rng(cfg.seed);
    let mut queries = 0;
    let mut query = |pt: &[f64], queries: &mut usize| -> Result<bool> {
        *queries += 1;
        let ans = is_adversarial(&Tensor::matrix(1, n, pt.to_vec())?)?;
        Ok(ans.first().copied().unwrap_or(false))
    };

    let mut start = None;
    for _ in 0..cfg.init_trials {
        let cand: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        if query(&cand, &mut queries)? {
            start = Some(cand);
            break;
        }
    }
    let far = start.ok_or(Error::NoStartingPoint(cfg.init_trials))?;

    // smallest blend toward `far` that stays adversarial
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..cfg.init_bisect {
        let mid = 0.5 * (lo + hi);
        let cand = blend(x, &far, mid);
        if query(&cand, &mut queries)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut cur = blend(x, &far, hi);
    let mut dist = sq_dist(&cur, x).sqrt();
    let mut distances = vec![dist];

    let (mut orth, mut source) = (cfg.orthogonal_step, cfg.source_step);
    let mut accepted_in_window = 0;
    for it in 0..cfg.iterations {
        if dist == 0.0 {
            break;
        }
        let eta: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eta_norm = eta.iter().map(|e| e * e).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        // spherical step: perturb, then rescale back onto the radius-`dist` sphere
        let mut cand: Vec<f64> =
            cur.iter().zip(&eta).map(|(c, e)| c + orth * dist * e / eta_norm).collect();
        let r = sq_dist(&cand, x).sqrt().max(f64::MIN_POSITIVE);
        cand.iter_mut().zip(x).for_each(|(c, o)| *c = o + (*c - o) * dist / r);
        // then contract toward the original
        cand.iter_mut().zip(x).for_each(|(c, o)| *c = (*c + source * (o - *c)).clamp(0.0, 1.0));

        let d_new = sq_dist(&cand, x).sqrt();
        if d_new <= dist && query(&cand, &mut queries)? {
            cur = cand;
            dist = d_new;
            distances.push(dist);
            accepted_in_window += 1;
        }
        if (it + 1) % cfg.window == 0 {
            let factor = if 2 * accepted_in_window >= cfg.window { cfg.grow } else { cfg.shrink };
            orth *= factor;
            source = (source * factor).min(0.5);
            accepted_in_window = 0;
        }
    }
    Ok(BoundaryOutcome { adversarial: cur, distances, queries })
}

fn blend(x: &[f64], far: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(far).map(|(a, b)| a + t * (b - a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn threshold(pts: &Tensor) -> Result<Vec<bool>> {
        Ok(pts.row_iter().map(|r| r[0] > 0.5).collect())
    }

    #[test]
    fn converges_to_one_dimensional_boundary() {
        let out = boundary_attack(&mut threshold, &[0.2], &BoundaryConfig::default()).unwrap();
        assert!(out.adversarial[0] > 0.5);
        assert!((out.adversarial[0] - 0.5).abs() < 0.05, "{:?}", out.adversarial);
    }

    #[test]
    fn accepted_distances_never_increase() {
        let mut in_disc = |pts: &Tensor| -> Result<Vec<bool>> {
            Ok(pts.row_iter().map(|r| (r[0] - 0.8).powi(2) + (r[1] - 0.8).powi(2) < 0.05).collect())
        };
        let x = [0.1, 0.2, 0.5];
        let cfg = BoundaryConfig { init_trials: 500, seed: 3, ..Default::default() };
        let out = boundary_attack(&mut in_disc, &x, &cfg).unwrap();
        assert!(out.distances.windows(2).all(|w| w[1] <= w[0]));
        assert!(in_disc(&Tensor::matrix(1, 3, out.adversarial.clone()).unwrap()).unwrap()[0]);
    }

    #[test]
    fn reports_missing_start() {
        let mut never = |pts: &Tensor| Ok(vec![false; pts.rows()]);
        let cfg = BoundaryConfig { init_trials: 7, ..Default::default() };
        assert!(matches!(
            boundary_attack(&mut never, &[0.3, 0.3], &cfg),
            Err(Error::NoStartingPoint(7))
        ));
    }
}
