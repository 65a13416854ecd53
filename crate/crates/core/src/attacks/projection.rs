use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "l0")]
    L0,
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "linf")]
    Linf,
}

impl Norm {
    pub const ALL: [Norm; 4] = [Norm::L0, Norm::L1, Norm::L2, Norm::Linf];

    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L0 => "l0",
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "0" | "l0" => Ok(Norm::L0),
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "l_inf" => Ok(Norm::Linf),
            other => Err(Error::InvalidArgument(format!("unknown norm {other:?}"))),
        }
    }
}

/// `||v||_p`; for `L0` the number of nonzero entries.
pub fn lp_norm(v: &[f64], p: Norm) -> f64 {
    match p {
        Norm::L0 => v.iter().filter(|x| **x != 0.0).count() as f64,
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
    }
}

/// Euclidean projection of `v` onto `{d : ||d||_p <= eps}`. For `L0` the
/// `floor(eps)` largest-magnitude coordinates are kept (lower index wins a
/// tie) and the rest zeroed.
pub fn project_lp(v: &[f64], p: Norm, eps: f64) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("budget {eps} must be non-negative")));
    }
    let mut out = v.to_vec();
    match p {
        Norm::Linf => out.iter_mut().for_each(|x| *x = x.clamp(-eps, eps)),
        Norm::L2 => {
            let n = lp_norm(v, Norm::L2);
            if n > eps {
                let s = eps / n;
                out.iter_mut().for_each(|x| *x *= s);
            }
        }
        Norm::L1 => project_l1_in_place(&mut out, eps),
        Norm::L0 => {
            let keep = eps.floor() as usize;
            if keep < v.len() {
                let mut order: Vec<usize> = (0..v.len()).collect();
                order.sort_by(|&a, &b| {
                    v[b].abs().partial_cmp(&v[a].abs()).unwrap_or(Ordering::Equal).then(a.cmp(&b))
                });
                for &i in &order[keep..] {
                    out[i] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Soft-thresholding onto the l1 ball via the sorted cumulative-sum rule.
fn project_l1_in_place(v: &mut [f64], eps: f64) {
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm <= eps {
        return;
    }
    if eps == 0.0 {
        v.fill(0.0);
        return;
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - eps) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for x in v.iter_mut() {
        *x = x.signum() * (x.abs() - theta).max(0.0);
    }
}

/// Per-norm normalisation of an ascent direction: sign for `Linf`, unit-l2
/// for `L2`, unit-l1 for `L1`, raw gradient for `L0`. Zero stays zero.
pub fn normalize_step(g: &[f64], p: Norm) -> Vec<f64> {
    match p {
        Norm::Linf => g.iter().map(|&x| sign(x)).collect(),
        Norm::L0 => g.to_vec(),
        Norm::L1 | Norm::L2 => {
            let n = lp_norm(g, p);
            if n > 0.0 {
                g.iter().map(|x| x / n).collect()
            } else {
                vec![0.0; g.len()]
            }
        }
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
