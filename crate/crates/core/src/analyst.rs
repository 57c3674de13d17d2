//! Analyst-side estimation: modular binary search for the mean, variance
//! bracketing, the sign-skew refinement and one-round subgroup selection.
//!
//! Everything here consumes debiased histograms or public parameters only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::{argmax_excluding, PairedHistogram, QuadHistogram, SignHistogram};
use crate::error::{Error, Result};
use crate::numerics::{erf_inv, exact_log2, pow2};
use crate::randomizers::LatticeSpec;

/// Contiguous level range `[l_min, l_max]` with one subgroup of size `k` per level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPlan {
    pub l_min: i32,
    pub l_max: i32,
    pub k: usize,
    pub beta: f64,
    pub eps: f64,
}

impl LevelPlan {
    pub fn new(l_min: i32, count: usize, k: usize, beta: f64, eps: f64) -> Result<Self> {
        if count == 0 || k == 0 {
            return Err(Error::config(format!("level plan needs at least one level and k >= 1, got {count} levels of size {k}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(format!("failure probability must lie in (0, 1), got {beta}")));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("privacy budget must be positive, got {eps}")));
        }
        Ok(LevelPlan {
            l_min,
            l_max: l_min + count as i32 - 1,
            k,
            beta,
            eps,
        })
    }

    /// Number of levels `L`.
    pub fn count(&self) -> usize {
        (self.l_max - self.l_min + 1) as usize
    }

    pub fn levels(&self) -> Vec<i32> {
        (self.l_min..=self.l_max).collect()
    }

    pub fn contains(&self, j: i32) -> bool {
        (self.l_min..=self.l_max).contains(&j)
    }
}

/// Which concentration slack the variance test uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdProfile {
    /// `(1 + 4/ε)·√(2k ln(8L/β))` for the histogram deviation, as in the analysis.
    Paper,
    /// The debias factor times a Hoeffding deviation, `((e^ε+3)/(e^ε−1))·√(k ln(8L/β)/2)`.
    #[default]
    Desk,
}

/// Slack `ψ` of the mean search.
pub fn psi(plan: &LevelPlan) -> f64 {
    let k = plan.k as f64;
    let l = plan.count() as f64;
    (1.0 + 4.0 / plan.eps) / std::f64::consts::SQRT_2 * (k * (8.0 * l / plan.beta).ln()).sqrt()
}

/// Slack `τ` of the variance test.
pub fn tau(plan: &LevelPlan, profile: ThresholdProfile) -> f64 {
    let k = plan.k as f64;
    let l = plan.count() as f64;
    let sampling = (2.0 * k * (2.0 * l / plan.beta).ln()).sqrt();
    let log8 = (8.0 * l / plan.beta).ln();
    let response = match profile {
        ThresholdProfile::Paper => (1.0 + 4.0 / plan.eps) * (2.0 * k * log8).sqrt(),
        ThresholdProfile::Desk => {
            let t = (-plan.eps).exp();
            (1.0 + 3.0 * t) / (1.0 - t) * (k * log8 / 2.0).sqrt()
        }
    };
    sampling + response
}

/// Final state of the mean search.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanSearchState {
    /// Level where the descent stopped.
    pub level: i32,
    /// `I_j = [lo, hi]`, both multiples of `2^j`.
    pub lo: f64,
    pub hi: f64,
    pub psi: f64,
    pub mu_hat1: f64,
}

fn lookup<H>(hists: &BTreeMap<i32, H>, j: i32) -> Result<&H> {
    hists
        .get(&j)
        .ok_or_else(|| Error::malformed(format!("no histogram for level {j}")))
}

/// Integer range of `c` with `c·step ∈ [lo, hi]`.
fn multiples_in(lo: f64, hi: f64, step: f64) -> (i64, i64) {
    ((lo / step).ceil() as i64, (hi / step).floor() as i64)
}

/// Binary search for the mean, returning the full stopping state.
pub fn est_mean_search(hists: &BTreeMap<i32, QuadHistogram>, plan: &LevelPlan) -> Result<MeanSearchState> {
    for j in plan.l_min..=plan.l_max {
        lookup(hists, j)?;
    }
    let psi = psi(plan);
    let threshold = 0.52 * plan.k as f64 + psi;
    let mut j = plan.l_max;
    let mut lo = 0.0;
    let mut hi = pow2(plan.l_max);
    while j > plan.l_min {
        let (m1, top) = lookup(hists, j)?.argmax();
        if top < threshold {
            break;
        }
        let step = pow2(j);
        let (c_lo, c_hi) = multiples_in(lo, hi, step);
        let Some(c) = (c_lo..=c_hi).find(|c| c.rem_euclid(4) == m1 as i64) else {
            break;
        };
        lo = c as f64 * step;
        hi = (c + 1) as f64 * step;
        j -= 1;
    }

    let h = lookup(hists, j)?;
    let (m1, _) = h.argmax();
    let (m2, _) = argmax_excluding(&h.bins, Some(m1));
    let step = pow2(j);
    let (c_lo, c_hi) = multiples_in(lo, hi, step);
    let matching = (c_lo..=c_hi)
        .rev()
        .find(|c| [m1 as i64, m2 as i64].contains(&c.rem_euclid(4)));
    let mu_hat1 = match matching {
        Some(c) => c as f64 * step,
        // Only the initial interval can miss both residues.
        None => ((lo + hi) / 2.0 / step).floor() * step,
    };
    Ok(MeanSearchState {
        level: j,
        lo,
        hi,
        psi,
        mu_hat1,
    })
}

/// Coarse mean estimate `μ̂₁`.
pub fn est_mean(hists: &BTreeMap<i32, QuadHistogram>, plan: &LevelPlan) -> Result<f64> {
    Ok(est_mean_search(hists, plan)?.mu_hat1)
}

/// Outcome of the variance test.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceDecision {
    pub tau: f64,
    /// `(level, concentrated)` from `l_min` up to `l_max`.
    pub concentrated: Vec<(i32, bool)>,
    pub sigma_hat: f64,
}

pub fn est_var_decision(
    hists: &BTreeMap<i32, PairedHistogram>,
    plan: &LevelPlan,
    profile: ThresholdProfile,
) -> Result<VarianceDecision> {
    let tau = tau(plan, profile);
    let threshold = 0.03 * plan.k as f64 + tau;
    let concentrated = (plan.l_min..=plan.l_max)
        .map(|j| Ok((j, lookup(hists, j)?.min_bin() <= threshold)))
        .collect::<Result<Vec<_>>>()?;
    let mut chosen = None;
    for &(j, ok) in concentrated.iter().rev() {
        if !ok {
            break;
        }
        chosen = Some(j);
    }
    let sigma_hat = pow2(chosen.unwrap_or(plan.l_max));
    Ok(VarianceDecision {
        tau,
        concentrated,
        sigma_hat,
    })
}

/// Power-of-two scale estimate `σ̂`.
pub fn est_var(hists: &BTreeMap<i32, PairedHistogram>, plan: &LevelPlan, profile: ThresholdProfile) -> Result<f64> {
    Ok(est_var_decision(hists, plan, profile)?.sigma_hat)
}

/// `σ·√2·erf⁻¹((Ĥ(+1) − Ĥ(−1)) / count) + center`.
pub fn refine_known_sigma(hist: &SignHistogram, count: usize, center: f64, sigma: f64) -> Result<f64> {
    if count == 0 {
        return Err(Error::malformed("refinement needs a positive report count"));
    }
    let skew = (hist.plus - hist.minus) / count as f64;
    Ok(sigma * std::f64::consts::SQRT_2 * erf_inv(skew) + center)
}

/// Index of the lattice holding the point nearest `mu_hat1`, and that point.
/// Ties go to the lower index.
pub fn select_subgroup_kv(mu_hat1: f64, lattices: &[LatticeSpec]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (idx, lattice) in lattices.iter().enumerate() {
        let s = lattice.nearest(mu_hat1);
        let d = (s - mu_hat1).abs();
        if best.is_none_or(|(_, _, bd)| d < bd) {
            best = Some((idx, s, d));
        }
    }
    best.map(|(idx, s, _)| (idx, s))
        .ok_or_else(|| Error::malformed("no lattices to select from"))
}

/// One-round known-variance lattices: offsets `m·σ/5` for `m = 1..=5ρ`, spacing `ρσ`.
pub fn kv_lattices(sigma: f64, rho: usize) -> Result<Vec<LatticeSpec>> {
    (1..=5 * rho)
        .map(|m| LatticeSpec::new(m as f64 * sigma / 5.0, rho as f64 * sigma))
        .collect()
}

/// One-round unknown-variance lattice family over levels `[l_min, l_max]`:
/// for level `j` and `m = 1..=ρ`, offset `m·2^j` and spacing `ρ·2^j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UvLatticeFamily {
    pub l_min: i32,
    pub l_max: i32,
    pub rho: usize,
}

impl UvLatticeFamily {
    pub fn group_count(&self) -> usize {
        (self.l_max - self.l_min + 1) as usize * self.rho
    }

    /// `(level, m)` of group `g`, with `m` in `1..=ρ`.
    pub fn group(&self, g: usize) -> (i32, usize) {
        (self.l_min + (g / self.rho) as i32, g % self.rho + 1)
    }

    pub fn group_index(&self, level: i32, m: usize) -> Option<usize> {
        if level < self.l_min || level > self.l_max || m == 0 || m > self.rho {
            return None;
        }
        Some((level - self.l_min) as usize * self.rho + m - 1)
    }

    pub fn lattice(&self, level: i32, m: usize) -> LatticeSpec {
        let unit = pow2(level);
        LatticeSpec {
            offset: m as f64 * unit,
            spacing: self.rho as f64 * unit,
        }
    }

    /// Laplace scale numerator `2ρ·2^j` for level `j`.
    pub fn noise_numerator(&self, level: i32) -> f64 {
        2.0 * self.rho as f64 * pow2(level)
    }
}

/// `(j₁, m, s*)` with `j₁ = log₂ σ̂` and `m` the offset whose lattice holds the point nearest `mu_hat1`.
pub fn select_subgroup_uv(sigma_hat: f64, mu_hat1: f64, family: &UvLatticeFamily) -> Result<(i32, usize, f64)> {
    let j1 = exact_log2(sigma_hat)
        .ok_or_else(|| Error::invalid(format!("scale estimate {sigma_hat} is not a power of two")))?;
    if j1 < family.l_min || j1 > family.l_max {
        return Err(Error::invalid(format!(
            "scale estimate 2^{j1} outside levels [{}, {}]",
            family.l_min, family.l_max
        )));
    }
    let lattices: Vec<LatticeSpec> = (1..=family.rho).map(|m| family.lattice(j1, m)).collect();
    let (idx, s) = select_subgroup_kv(mu_hat1, &lattices)?;
    Ok((j1, idx + 1, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{erf, floor_div_mod4, RandomStream};

    fn plan(l_min: i32, count: usize, k: usize) -> LevelPlan {
        LevelPlan::new(l_min, count, k, 0.05, 1.0).unwrap()
    }

    fn quad(level: i32, bins: [f64; 4], k: usize) -> QuadHistogram {
        QuadHistogram { level, bins, k }
    }

    /// Exact per-level histograms of `⌊x/2^j⌋ mod 4` for a fixed sample set.
    fn exact_quads(samples: &[f64], plan: &LevelPlan) -> BTreeMap<i32, QuadHistogram> {
        plan.levels()
            .into_iter()
            .map(|j| {
                let mut bins = [0.0; 4];
                for &x in samples {
                    bins[floor_div_mod4(x, j) as usize] += 1.0;
                }
                (j, quad(j, bins, samples.len()))
            })
            .collect()
    }

    /// Gaussian quantile grid `μ + σ·√2·erf⁻¹(2(i+½)/k − 1)`: a noiseless stand-in for a sample.
    fn quantile_grid(mu: f64, sigma: f64, k: usize) -> Vec<f64> {
        (0..k)
            .map(|i| mu + sigma * std::f64::consts::SQRT_2 * erf_inv(2.0 * (i as f64 + 0.5) / k as f64 - 1.0))
            .collect()
    }

    #[test]
    fn single_level_trace() {
        let p = plan(0, 1, 10);
        let hists = BTreeMap::from([(0, quad(0, [10.0, 0.0, 0.0, 0.0], 10))]);
        let s = est_mean_search(&hists, &p).unwrap();
        assert_eq!((s.lo, s.hi), (0.0, 1.0));
        assert_eq!(s.mu_hat1, 1.0);
    }

    #[test]
    fn est_mean_missing_level() {
        let p = plan(0, 2, 10);
        let hists = BTreeMap::from([(0, quad(0, [10.0, 0.0, 0.0, 0.0], 10))]);
        assert!(matches!(est_mean(&hists, &p), Err(Error::MalformedInput(_))));
    }

    #[test]
    fn est_mean_at_zero_noiseless() {
        let k = 4000;
        let p = plan(0, 12, k);
        let hists = exact_quads(&quantile_grid(0.0, 1.0, k), &p);
        let s = est_mean_search(&hists, &p).unwrap();
        assert!(s.mu_hat1.abs() <= 2.0, "{s:?}");
    }

    #[test]
    fn est_mean_noiseless_lemma_bound() {
        let k = 4000;
        for (mu, sigma, l_min) in [(37.25, 1.0, 0), (1000.3, 3.0, 1), (5.5, 0.25, -2), (123456.7, 10.0, 3)] {
            let p = plan(l_min, 24, k);
            let hists = exact_quads(&quantile_grid(mu, sigma, k), &p);
            let s = est_mean_search(&hists, &p).unwrap();
            assert!((s.mu_hat1 - mu).abs() <= 2.0 * sigma, "mu {mu}: {s:?}");
            let step = pow2(s.level);
            assert_eq!((s.mu_hat1 / step).fract(), 0.0);
            assert!(s.lo <= s.mu_hat1 && s.mu_hat1 <= s.hi);
        }
    }

    #[test]
    fn est_mean_fallback_when_residues_miss() {
        // top level concentrated in bins 2 and 3, which [0, 2^0] cannot reach
        let p = plan(0, 1, 10);
        let hists = BTreeMap::from([(0, quad(0, [0.0, 0.0, 6.0, 4.0], 10))]);
        let s = est_mean_search(&hists, &p).unwrap();
        assert_eq!(s.mu_hat1, 0.0);
    }

    #[test]
    fn est_var_extremes() {
        let p = plan(-2, 4, 100);
        let concentrated: BTreeMap<i32, PairedHistogram> = p
            .levels()
            .into_iter()
            .map(|j| (j, PairedHistogram { level: j, bins: [200.0, 0.0, 0.0, 0.0], k: 100 }))
            .collect();
        assert_eq!(est_var(&concentrated, &p, ThresholdProfile::Desk).unwrap(), 0.25);
        let mut spread = concentrated.clone();
        spread.insert(1, PairedHistogram { level: 1, bins: [50.0; 4], k: 100 });
        let mut spread_p = p;
        spread_p.k = 100_000;
        for h in spread.values_mut() {
            h.k = 100_000;
            h.bins = [50_000.0; 4];
        }
        spread.get_mut(&0).unwrap().bins = [200_000.0, 0.0, 0.0, 0.0];
        // top level unconcentrated
        assert_eq!(est_var(&spread, &spread_p, ThresholdProfile::Paper).unwrap(), 2.0);
        let mut partial = spread.clone();
        partial.get_mut(&1).unwrap().bins = [200_000.0, 0.0, 0.0, 0.0];
        let d = est_var_decision(&partial, &spread_p, ThresholdProfile::Desk).unwrap();
        assert_eq!(d.sigma_hat, 1.0);
        assert_eq!(d.concentrated, vec![(-2, false), (-1, false), (0, true), (1, true)]);
    }

    #[test]
    fn est_var_noiseless_lemma_bound() {
        // the bound needs 0.13k - tau > 0.03k + tau
        for (profile, k) in [(ThresholdProfile::Desk, 50_000), (ThresholdProfile::Paper, 250_000)] {
            let p = plan(-4, 16, k);
            assert!(0.1 * k as f64 > 2.0 * tau(&p, profile), "{profile:?}");
            for sigma in [0.1, 0.7, 1.0, 3.0, 17.0, 300.0] {
                let paired: BTreeMap<i32, PairedHistogram> = exact_quads(&quantile_grid(41.3, sigma, k), &p)
                    .into_iter()
                    .map(|(j, h)| (j, h.paired()))
                    .collect();
                let s = est_var(&paired, &p, profile).unwrap();
                assert!(s >= sigma && s <= 8.0 * sigma, "sigma {sigma} {profile:?}: {s}");
            }
        }
    }

    #[test]
    fn thresholds() {
        let p = LevelPlan::new(0, 16, 4000, 0.05, 1.0).unwrap();
        let expected_psi = 5.0 / 2f64.sqrt() * (4000.0 * (128.0f64 / 0.05).ln()).sqrt();
        assert!((psi(&p) - expected_psi).abs() < 1e-9);
        let e = std::f64::consts::E;
        let sampling = (8000.0 * (32.0f64 / 0.05).ln()).sqrt();
        let desk = sampling + (e + 3.0) / (e - 1.0) * (4000.0 * (128.0f64 / 0.05).ln() / 2.0).sqrt();
        let paper = sampling + 5.0 * (8000.0 * (128.0f64 / 0.05).ln()).sqrt();
        assert!((tau(&p, ThresholdProfile::Desk) - desk).abs() < 1e-9);
        assert!((tau(&p, ThresholdProfile::Paper) - paper).abs() < 1e-9);
    }

    #[test]
    fn refine_examples() {
        let balanced = SignHistogram { minus: 50.0, plus: 50.0, k: 100 };
        assert_eq!(refine_known_sigma(&balanced, 100, 3.5, 2.0).unwrap(), 3.5);
        let e1 = erf(1.0);
        let skewed = SignHistogram { minus: (1.0 - e1) * 50.0, plus: (1.0 + e1) * 50.0, k: 100 };
        let r = refine_known_sigma(&skewed, 100, 0.0, 1.0).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-10);
        assert!(refine_known_sigma(&balanced, 0, 0.0, 1.0).is_err());
        let saturated = SignHistogram { minus: -10.0, plus: 110.0, k: 100 };
        assert!(refine_known_sigma(&saturated, 100, 0.0, 1.0).unwrap().is_finite());
    }

    fn brute_force(mu: f64, lattices: &[LatticeSpec], range: i64) -> (usize, f64) {
        let mut best = (0, lattices[0].point(-range), f64::INFINITY);
        for (idx, l) in lattices.iter().enumerate() {
            for b in -range..=range {
                let p = l.point(b);
                let d = (p - mu).abs();
                if d < best.2 {
                    best = (idx, p, d);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn select_kv_examples() {
        let rho = 4;
        let lattices = kv_lattices(1.0, rho).unwrap();
        assert_eq!(lattices.len(), 20);
        // only the last offset ρσ has 0 on its lattice
        let (idx, s) = select_subgroup_kv(0.0, &lattices).unwrap();
        assert_eq!((idx, s), (19, 0.0));
        assert_eq!(brute_force(0.0, &lattices, 2 * rho as i64), (19, 0.0));
        let (idx, s) = select_subgroup_kv(lattices[6].point(3), &lattices).unwrap();
        assert_eq!(idx, 6);
        assert_eq!(s, lattices[6].point(3));
        // equal distance to two lattices: lower index wins
        let tie = [LatticeSpec::new(0.0, 10.0).unwrap(), LatticeSpec::new(2.0, 10.0).unwrap()];
        assert_eq!(select_subgroup_kv(1.0, &tie).unwrap(), (0, 0.0));
        assert!(select_subgroup_kv(0.0, &[]).is_err());
    }

    #[test]
    fn select_kv_matches_brute_force() {
        let mut s = RandomStream::new(11, 0);
        let lattices = kv_lattices(1.0, 8).unwrap();
        for _ in 0..2_000 {
            let mu = s.uniform() * 200.0 - 100.0;
            let (idx, p) = select_subgroup_kv(mu, &lattices).unwrap();
            assert!((p - mu).abs() <= 0.1 + 1e-12);
            let (bi, bp) = brute_force(mu, &lattices, 40);
            assert_eq!((p - mu).abs(), (bp - mu).abs());
            assert_eq!(idx, bi);
        }
    }

    #[test]
    fn select_uv_examples() {
        let fam = UvLatticeFamily { l_min: -2, l_max: 5, rho: 9 };
        assert_eq!(fam.group_count(), 72);
        assert_eq!(fam.group(0), (-2, 1));
        assert_eq!(fam.group(10), (-1, 2));
        assert_eq!(fam.group_index(-1, 2), Some(10));
        let (j1, _, s) = select_subgroup_uv(4.0, 0.0, &fam).unwrap();
        assert_eq!(j1, 2);
        assert!(s.abs() <= 2.0);
        let (_, m, s) = select_subgroup_uv(4.0, 12.0, &fam).unwrap();
        assert_eq!((m, s), (3, 12.0));
        assert!(select_subgroup_uv(3.0, 0.0, &fam).is_err());
        assert!(select_subgroup_uv(1024.0, 0.0, &fam).is_err());
    }
}
