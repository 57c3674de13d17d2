//! User-side (ε, 0)-local randomizers.
//!
//! Each function consumes one private sample plus public parameters and
//! returns exactly one report. This is the only module that reads raw samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{floor_div_mod4, sample_laplace, RandomStream};

/// First-round report: a randomized value of `⌊x/2^j⌋ mod 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadReport {
    pub user_id: usize,
    pub level: i32,
    pub value: u8,
}

/// A randomized sign in `{-1, +1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignReport {
    pub user_id: usize,
    /// Index into the one-round lattice family, `None` for the two-round protocol.
    pub subgroup: Option<usize>,
    pub value: i8,
}

/// A clipped or centered real value plus Laplace noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealReport {
    pub user_id: usize,
    /// `(level, offset index)` of the one-round lattice, `None` for the two-round protocol.
    pub subgroup: Option<(i32, usize)>,
    pub value: f64,
}

/// The arithmetic progression `{offset + b * spacing : b ∈ ℤ}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub offset: f64,
    pub spacing: f64,
}

impl LatticeSpec {
    pub fn new(offset: f64, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite() && offset.is_finite()) {
            return Err(Error::invalid(format!(
                "lattice needs finite offset and positive spacing, got ({offset}, {spacing})"
            )));
        }
        Ok(LatticeSpec { offset, spacing })
    }

    /// The lattice point `offset + b * spacing`.
    pub fn point(&self, b: i64) -> f64 {
        self.offset + b as f64 * self.spacing
    }

    /// Nearest lattice point to `x`; an exact tie goes to the lower point.
    pub fn nearest(&self, x: f64) -> f64 {
        let b = ((x - self.offset) / self.spacing).floor() as i64;
        // Rounding in the division can misplace b by one, so check neighbours.
        let mut best = self.point(b - 1);
        let mut best_dist = (x - best).abs();
        for cand in [b, b + 1, b + 2] {
            let p = self.point(cand);
            let d = (x - p).abs();
            if d < best_dist {
                best = p;
                best_dist = d;
            }
        }
        best
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("privacy budget must be positive, got {eps}")))
    }
}

/// `e^ε / (e^ε + 3)`, written to stay finite as ε grows.
pub fn quad_truthful_prob(eps: f64) -> f64 {
    1.0 / (1.0 + 3.0 * (-eps).exp())
}

/// `e^ε / (e^ε + 1)`.
pub fn sign_truthful_prob(eps: f64) -> f64 {
    1.0 / (1.0 + (-eps).exp())
}

/// `sgn` with `sgn(0) = +1`.
pub fn sign_of(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// Exact output distribution of [`rr1`] over `{0,1,2,3}`.
pub fn rr1_distribution(eps: f64, x: f64, level: i32) -> [f64; 4] {
    let truth = floor_div_mod4(x, level) as usize;
    let t = (-eps).exp();
    let mut out = [t / (1.0 + 3.0 * t); 4];
    out[truth] = quad_truthful_prob(eps);
    out
}

/// Exact output distribution of a sign randomizer over `[-1, +1]` given the unrandomized sign.
pub fn sign_distribution(eps: f64, truth: i8) -> [f64; 2] {
    let p = sign_truthful_prob(eps);
    let t = (-eps).exp();
    let q = t / (1.0 + t);
    if truth > 0 {
        [q, p]
    } else {
        [p, q]
    }
}

/// Randomized response on `⌊x/2^j⌋ mod 4`.
pub fn rr1(stream: &mut RandomStream, user_id: usize, eps: f64, x: f64, level: i32) -> Result<QuadReport> {
    check_eps(eps)?;
    let truth = floor_div_mod4(x, level);
    let value = if stream.uniform() <= quad_truthful_prob(eps) {
        truth
    } else {
        (truth + 1 + stream.below(3) as u8) % 4
    };
    Ok(QuadReport {
        user_id,
        level,
        value,
    })
}

fn randomized_sign(stream: &mut RandomStream, eps: f64, truth: i8) -> i8 {
    if stream.uniform() <= sign_truthful_prob(eps) {
        truth
    } else {
        -truth
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("sigma must be positive, got {sigma}")))
    }
}

/// Randomized sign of `(x - mu_hat1) / sigma`.
pub fn kv_rr2(
    stream: &mut RandomStream,
    user_id: usize,
    eps: f64,
    x: f64,
    mu_hat1: f64,
    sigma: f64,
) -> Result<SignReport> {
    check_eps(eps)?;
    check_sigma(sigma)?;
    let truth = sign_of((x - mu_hat1) / sigma);
    Ok(SignReport {
        user_id,
        subgroup: None,
        value: randomized_sign(stream, eps, truth),
    })
}

/// Unrandomized sign used by [`one_round_kv_rr2`]: centered on the nearest lattice point.
pub fn lattice_sign(x: f64, lattice: &LatticeSpec, sigma: f64) -> i8 {
    sign_of((x - lattice.nearest(x)) / sigma)
}

/// Sign randomizer centered on the nearest point of the user's subgroup lattice.
pub fn one_round_kv_rr2(
    stream: &mut RandomStream,
    user_id: usize,
    subgroup: usize,
    eps: f64,
    x: f64,
    lattice: &LatticeSpec,
    sigma: f64,
) -> Result<SignReport> {
    check_eps(eps)?;
    check_sigma(sigma)?;
    let truth = lattice_sign(x, lattice, sigma);
    Ok(SignReport {
        user_id,
        subgroup: Some(subgroup),
        value: randomized_sign(stream, eps, truth),
    })
}

fn laplace_noise(stream: &mut RandomStream, scale: f64) -> Result<f64> {
    // ε = ∞ turns the mechanism off.
    if scale == 0.0 {
        Ok(0.0)
    } else {
        sample_laplace(stream, scale)
    }
}

/// Clip to `[lo, hi]` and add `Lap((hi - lo) / ε)`.
pub fn uv_rr2(stream: &mut RandomStream, user_id: usize, eps: f64, x: f64, lo: f64, hi: f64) -> Result<RealReport> {
    check_eps(eps)?;
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid(format!("interval [{lo}, {hi}] is empty or unbounded")));
    }
    let clipped = x.clamp(lo, hi);
    let noise = laplace_noise(stream, (hi - lo) / eps)?;
    Ok(RealReport {
        user_id,
        subgroup: None,
        value: clipped + noise,
    })
}

/// Pre-noise residual of [`one_round_uv_rr2`]: `x` minus its nearest lattice point.
pub fn lattice_residual(x: f64, lattice: &LatticeSpec) -> f64 {
    x - lattice.nearest(x)
}

/// Residual to the nearest lattice point plus `Lap(noise_numerator / ε)`.
///
/// The protocol layer supplies `noise_numerator = 2ρ·2^j` for the subgroup's level `j`.
pub fn one_round_uv_rr2(
    stream: &mut RandomStream,
    user_id: usize,
    subgroup: (i32, usize),
    eps: f64,
    x: f64,
    lattice: &LatticeSpec,
    noise_numerator: f64,
) -> Result<RealReport> {
    check_eps(eps)?;
    if !(noise_numerator > 0.0 && noise_numerator.is_finite()) {
        return Err(Error::invalid(format!("noise numerator must be positive, got {noise_numerator}")));
    }
    let residual = lattice_residual(x, lattice);
    let noise = laplace_noise(stream, noise_numerator / eps)?;
    Ok(RealReport {
        user_id,
        subgroup: Some(subgroup),
        value: residual + noise,
    })
}
