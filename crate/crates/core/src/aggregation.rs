//! Analyst-side debiasing of randomized-response counts.
//!
//! Debiased bins are unbiased estimates of the true counts and may be negative;
//! they are never clamped.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::randomizers::{QuadReport, SignReport};

/// Debiased four-bin histogram for one level. Bins sum to `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadHistogram {
    pub level: i32,
    pub bins: [f64; 4],
    pub k: usize,
}

/// Pairwise sums `bins[a] = quad[a] + quad[(a + 1) mod 4]`. Bins sum to `2k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedHistogram {
    pub level: i32,
    pub bins: [f64; 4],
    pub k: usize,
}

/// Debiased sign histogram. `minus + plus = k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignHistogram {
    pub minus: f64,
    pub plus: f64,
    pub k: usize,
}

impl QuadHistogram {
    /// Index and value of the largest bin; ties go to the smaller index.
    pub fn argmax(&self) -> (usize, f64) {
        argmax_excluding(&self.bins, None)
    }

    pub fn paired(&self) -> PairedHistogram {
        let b = &self.bins;
        PairedHistogram {
            level: self.level,
            bins: [b[0] + b[1], b[1] + b[2], b[2] + b[3], b[3] + b[0]],
            k: self.k,
        }
    }
}

impl PairedHistogram {
    pub fn min_bin(&self) -> f64 {
        self.bins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn argmax_excluding(bins: &[f64; 4], skip: Option<usize>) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (a, &v) in bins.iter().enumerate() {
        if Some(a) == skip {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((a, v)),
        }
    }
    best.expect("at least one bin remains")
}

/// `(e^ε + m - 1) / (e^ε - 1)` and `1 / (e^ε + m - 1)` for an `m`-ary randomized response,
/// rewritten in `e^-ε` so that ε = ∞ gives `(1, 0)`.
fn debias_constants(eps: f64, outcomes: f64) -> (f64, f64) {
    let t = (-eps).exp();
    let scale = (1.0 + (outcomes - 1.0) * t) / (1.0 - t);
    let offset = t / (1.0 + (outcomes - 1.0) * t);
    (scale, offset)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("privacy budget must be positive, got {eps}")))
    }
}

/// Debias a raw count vector of a 4-ary randomized response over `k` users.
pub fn debias_quad(eps: f64, k: usize, counts: [usize; 4]) -> [f64; 4] {
    let (scale, offset) = debias_constants(eps, 4.0);
    let kk = k as f64;
    counts.map(|c| scale * (c as f64 - kk * offset))
}

/// Debias `(count of -1, count of +1)` of a binary randomized response over `k` users.
pub fn debias_sign(eps: f64, k: usize, minus: usize, plus: usize) -> (f64, f64) {
    let (scale, offset) = debias_constants(eps, 2.0);
    let kk = k as f64;
    (scale * (minus as f64 - kk * offset), scale * (plus as f64 - kk * offset))
}

/// Per-level debiased histograms of first-round reports.
///
/// Every level in `levels` must receive exactly `k` reports, and every report
/// must carry one of those levels.
pub fn kv_agg1<'a, I>(eps: f64, k: usize, levels: &[i32], reports: I) -> Result<BTreeMap<i32, QuadHistogram>>
where
    I: IntoIterator<Item = &'a QuadReport>,
{
    check_eps(eps)?;
    if k == 0 {
        return Err(Error::malformed("subgroup size must be positive"));
    }
    let mut counts: BTreeMap<i32, [usize; 4]> = levels.iter().map(|&j| (j, [0; 4])).collect();
    for r in reports {
        let slot = counts
            .get_mut(&r.level)
            .ok_or_else(|| Error::malformed(format!("report from user {} names unknown level {}", r.user_id, r.level)))?;
        if r.value > 3 {
            return Err(Error::malformed(format!("quad value {} out of range", r.value)));
        }
        slot[r.value as usize] += 1;
    }
    counts
        .into_iter()
        .map(|(level, c)| {
            let total: usize = c.iter().sum();
            if total != k {
                return Err(Error::malformed(format!("level {level} has {total} reports, expected {k}")));
            }
            Ok((
                level,
                QuadHistogram {
                    level,
                    bins: debias_quad(eps, k, c),
                    k,
                },
            ))
        })
        .collect()
}

/// [`kv_agg1`] followed by adjacent-pair summation.
pub fn agg1<'a, I>(eps: f64, k: usize, levels: &[i32], reports: I) -> Result<BTreeMap<i32, PairedHistogram>>
where
    I: IntoIterator<Item = &'a QuadReport>,
{
    Ok(kv_agg1(eps, k, levels, reports)?
        .into_iter()
        .map(|(j, h)| (j, h.paired()))
        .collect())
}

/// Debiased sign histogram of exactly `k` reports.
pub fn kv_agg2<'a, I>(eps: f64, k: usize, reports: I) -> Result<SignHistogram>
where
    I: IntoIterator<Item = &'a SignReport>,
{
    check_eps(eps)?;
    let (mut minus, mut plus) = (0usize, 0usize);
    for r in reports {
        match r.value {
            1 => plus += 1,
            -1 => minus += 1,
            v => return Err(Error::malformed(format!("sign value {v} from user {}", r.user_id))),
        }
    }
    if minus + plus != k || k == 0 {
        return Err(Error::malformed(format!("{} sign reports, expected {k}", minus + plus)));
    }
    let (minus, plus) = debias_sign(eps, k, minus, plus);
    Ok(SignHistogram { minus, plus, k })
}
