use std::ops::Range;

use serde::Serialize;

use super::config::{ConstantsProfile, ProtocolConfig, ProtocolId, VarianceMode};
use crate::analyst::{kv_lattices, LevelPlan, ThresholdProfile, UvLatticeFamily};
use crate::error::{Error, Result};
use crate::numerics::pow2;
use crate::randomizers::LatticeSpec;

/// Highest level ever planned; keeps `2^j` finite.
pub const MAX_LEVEL: i32 = 1000;

/// Second-half structure of a plan.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundTwo {
    /// Every user of the second half answers the broadcast `μ̂₁`.
    KvTwo,
    /// `5ρ` lattice groups of `k2` users each.
    KvOne { rho: usize, k2: usize, lattices: Vec<LatticeSpec> },
    /// Every user of the second half answers with the broadcast interval.
    UvTwo,
    /// `L₁·ρ` lattice groups of `k2` users each.
    UvOne { k2: usize, family: UvLatticeFamily },
}

/// Where a user sits in the plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// First-round subgroup for level `j`.
    Level(i32),
    /// Second half of a two-round protocol.
    Second,
    /// One-round lattice group.
    Group(usize),
    /// Leftover user, never queried.
    Discard,
}

/// Deterministic assignment of users to subgroups, plus every derived constant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionPlan {
    pub protocol: ProtocolId,
    pub n: usize,
    pub levels: LevelPlan,
    /// Known scale, for the known-variance protocols.
    pub sigma: Option<f64>,
    pub threshold: ThresholdProfile,
    pub round_two: RoundTwo,
    /// Non-fatal remarks about the configuration.
    pub warnings: Vec<String>,
}

fn too_small(config: &ProtocolConfig, detail: &str) -> Error {
    Error::config(format!(
        "n = {} is too small for eps = {}, beta = {}: {detail}; the protocols need n/log n to grow like log(1/beta)/eps^2",
        config.n, config.eps, config.beta
    ))
}

/// Sufficient first-round subgroup size from the accuracy analysis, for `l` levels.
fn proof_k(protocol: ProtocolId, eps: f64, beta: f64, l: usize) -> f64 {
    let l = l as f64;
    let a = (1.0 + 4.0 / eps) / std::f64::consts::SQRT_2;
    let mut k = (5000.0 * (5.0 * l / beta).ln())
        .max(625.0 * a * a * (4.0 * l / beta).ln())
        .max(40.0 * a * a * (8.0 * l / beta).ln());
    if !protocol.known_variance() {
        k = k.max(800.0 * (2.0 + 4.0 / eps).powi(2) * (8.0 * l / beta).ln());
    }
    k
}

/// First-round `(k, L)` before the level cap.
fn first_round_sizing(config: &ProtocolConfig) -> Result<(usize, usize)> {
    let half = config.n / 2;
    if let Some(k) = config.sizes.k {
        if k == 0 {
            return Err(Error::config("subgroup size k must be positive"));
        }
        return Ok((k, half / k));
    }
    if let Some(l) = config.sizes.levels {
        if l == 0 {
            return Err(Error::config("level count must be positive"));
        }
        return Ok((half / l, l));
    }
    match config.profile {
        ConstantsProfile::Desk => {
            let nn = config.n.max(2) as f64;
            let k = (config.c_k * (8.0 * nn / config.beta).ln() / (config.eps * config.eps)).ceil();
            let k = if k.is_finite() { (k as usize).max(1) } else { usize::MAX };
            Ok((k, half / k))
        }
        ConstantsProfile::Paper => {
            let fits = |l: usize| (l as f64) * proof_k(config.protocol, config.eps, config.beta, l).ceil() <= half as f64;
            if !fits(1) {
                return Ok((proof_k(config.protocol, config.eps, config.beta, 1).ceil() as usize, 0));
            }
            let mut l = 1;
            while fits(l + 1) && (l as i32) < 2 * MAX_LEVEL {
                l += 1;
            }
            Ok((proof_k(config.protocol, config.eps, config.beta, l).ceil() as usize, l))
        }
    }
}

pub fn plan_partition(config: &ProtocolConfig) -> Result<PartitionPlan> {
    config.validate()?;
    let half = config.n / 2;
    let (k, mut l) = first_round_sizing(config)?;
    if k == 0 || l == 0 {
        return Err(too_small(config, &format!("first-round subgroups of size {k} leave no complete level")));
    }
    let mut warnings = Vec::new();
    let (l_min, sigma) = match config.variance {
        VarianceMode::KnownSigma { sigma } => (sigma.log2().floor() as i32, Some(sigma)),
        VarianceMode::BoundedSigma { sigma_min, .. } => (sigma_min.log2().floor() as i32, None),
    };
    let cap = (MAX_LEVEL - l_min + 1).max(1) as usize;
    if l > cap {
        warnings.push(format!("level count {l} capped at {cap}; surplus users are discarded"));
        l = cap;
    }
    if let VarianceMode::BoundedSigma { sigma_max, .. } = config.variance {
        let needed = sigma_max.log2().ceil() as i32;
        let top = l_min + l as i32 - 1;
        if top < needed {
            return Err(too_small(
                config,
                &format!("{l} levels of size {k} reach 2^{top} but the sigma range needs 2^{needed}"),
            ));
        }
    }
    let levels = LevelPlan::new(l_min, l, k, config.beta, config.eps)?;

    let ln4n = (4.0 * config.n as f64).ln();
    let group_size = |groups: usize| -> Result<usize> {
        let k2 = match config.sizes.k2 {
            Some(k2) if k2 * groups > half => {
                return Err(Error::config(format!("{groups} groups of size {k2} exceed the {half} users available")));
            }
            Some(k2) => k2,
            None => half / groups,
        };
        if k2 == 0 {
            return Err(too_small(config, &format!("{groups} second-half groups get no users")));
        }
        Ok(k2)
    };
    let round_two = match config.protocol {
        ProtocolId::Kv2 => RoundTwo::KvTwo,
        ProtocolId::Uv2 => RoundTwo::UvTwo,
        ProtocolId::Kv1 => {
            let rho = (2.0 * ln4n.sqrt()).ceil() as usize;
            let lattices = kv_lattices(sigma.expect("known sigma"), rho)?;
            let k2 = group_size(lattices.len())?;
            RoundTwo::KvOne { rho, k2, lattices }
        }
        ProtocolId::Uv1 => {
            let rho = (ln4n.sqrt() + 6.0).ceil() as usize;
            let family = UvLatticeFamily {
                l_min: levels.l_min,
                l_max: levels.l_max,
                rho,
            };
            let k2 = group_size(family.group_count())?;
            RoundTwo::UvOne { k2, family }
        }
    };

    let threshold = match config.profile {
        ConstantsProfile::Desk => ThresholdProfile::Desk,
        ConstantsProfile::Paper => ThresholdProfile::Paper,
    };
    if config.profile == ConstantsProfile::Paper {
        let e = config.eps;
        let second = 20000.0 * ((e + 2.0) / e).powi(2) * (4.0 / config.beta).ln();
        let second_size = match &round_two {
            RoundTwo::KvOne { k2, .. } | RoundTwo::UvOne { k2, .. } => *k2,
            _ => half,
        };
        if (second_size as f64) <= second && config.protocol.known_variance() {
            warnings.push(format!(
                "second-round group of {second_size} users is below the analysed size {}",
                second.ceil()
            ));
        }
    }

    Ok(PartitionPlan {
        protocol: config.protocol,
        n: config.n,
        levels,
        sigma,
        threshold,
        round_two,
        warnings,
    })
}

impl PartitionPlan {
    pub fn u1(&self) -> Range<usize> {
        0..self.n / 2
    }

    pub fn u2(&self) -> Range<usize> {
        self.n / 2..self.n
    }

    /// Users of the first-round subgroup for level `j`.
    pub fn level_users(&self, j: i32) -> Range<usize> {
        let start = (j - self.levels.l_min) as usize * self.levels.k;
        start..start + self.levels.k
    }

    pub fn group_count(&self) -> usize {
        match &self.round_two {
            RoundTwo::KvOne { lattices, .. } => lattices.len(),
            RoundTwo::UvOne { family, .. } => family.group_count(),
            RoundTwo::KvTwo | RoundTwo::UvTwo => 0,
        }
    }

    pub fn k2(&self) -> Option<usize> {
        match &self.round_two {
            RoundTwo::KvOne { k2, .. } | RoundTwo::UvOne { k2, .. } => Some(*k2),
            RoundTwo::KvTwo | RoundTwo::UvTwo => None,
        }
    }

    /// Users of one-round group `g`.
    pub fn group_users(&self, g: usize) -> Range<usize> {
        let k2 = self.k2().unwrap_or(0);
        let start = self.n / 2 + g * k2;
        start..start + k2
    }

    pub fn assignment(&self, user: usize) -> Assignment {
        if user >= self.n {
            return Assignment::Discard;
        }
        let half = self.n / 2;
        if user < half {
            let idx = user / self.levels.k;
            return if idx < self.levels.count() {
                Assignment::Level(self.levels.l_min + idx as i32)
            } else {
                Assignment::Discard
            };
        }
        match self.k2() {
            None => Assignment::Second,
            Some(k2) => {
                let g = (user - half) / k2;
                if g < self.group_count() {
                    Assignment::Group(g)
                } else {
                    Assignment::Discard
                }
            }
        }
    }

    /// Number of users that are never queried.
    pub fn discarded(&self) -> usize {
        let first = self.n / 2 - self.levels.count() * self.levels.k;
        let second = match self.k2() {
            Some(k2) => self.n / 2 - self.group_count() * k2,
            None => 0,
        };
        first + second
    }

    /// Warning when a simulated mean falls outside `[0, 2^{L_max}]`, the range the mean search covers.
    pub fn range_warning(&self, mu: f64) -> Option<String> {
        let top = pow2(self.levels.l_max);
        (!(0.0..=top).contains(&mu)).then(|| format!("mean {mu} lies outside the searchable range [0, {top}]"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::config::SubgroupSizes;

    fn kv(protocol: ProtocolId, n: usize) -> ProtocolConfig {
        ProtocolConfig::new(protocol, n, 1.0, 0.05, VarianceMode::KnownSigma { sigma: 1.0 }, 1)
    }

    #[test]
    fn kv_levels_from_override() {
        let mut c = kv(ProtocolId::Kv2, 2000);
        c.sizes.k = Some(100);
        let p = plan_partition(&c).unwrap();
        assert_eq!(p.levels.count(), 10);
        assert_eq!((p.levels.l_min, p.levels.l_max), (0, 9));
        assert_eq!(p.discarded(), 0);
        assert_eq!(p.assignment(0), Assignment::Level(0));
        assert_eq!(p.assignment(999), Assignment::Level(9));
        assert_eq!(p.assignment(1000), Assignment::Second);
    }

    #[test]
    fn kv_one_round_rho() {
        let c = kv(ProtocolId::Kv1, 1_000_000);
        let p = plan_partition(&c).unwrap();
        let RoundTwo::KvOne { rho, k2, lattices } = &p.round_two else {
            panic!("wrong shape")
        };
        assert_eq!(*rho, 8);
        assert_eq!(lattices.len(), 40);
        assert_eq!(*k2, 500_000 / 40);
        assert_eq!(lattices[0].offset, 0.2);
        assert_eq!(lattices[39].offset, 8.0);
        assert_eq!(lattices[39].spacing, 8.0);
    }

    #[test]
    fn levels_override_sets_k() {
        let mut c = kv(ProtocolId::Kv2, 1 << 14);
        c.sizes = SubgroupSizes {
            levels: Some(8),
            ..Default::default()
        };
        let p = plan_partition(&c).unwrap();
        assert_eq!(p.levels.k, 1024);
        assert_eq!(p.levels.count(), 8);
    }

    #[test]
    fn uv_coverage_check() {
        let mut c = ProtocolConfig::new(
            ProtocolId::Uv2,
            1 << 12,
            1.0,
            0.05,
            VarianceMode::BoundedSigma { sigma_min: 1.0, sigma_max: 1024.0 },
            1,
        );
        c.sizes.k = Some(256);
        // 8 levels from 0 reach 2^7 < 2^10
        assert!(matches!(plan_partition(&c), Err(Error::Configuration(_))));
        c.sizes.k = Some(128);
        let p = plan_partition(&c).unwrap();
        assert_eq!((p.levels.l_min, p.levels.l_max), (0, 15));
    }

    #[test]
    fn uv_one_round_groups() {
        let mut c = ProtocolConfig::new(
            ProtocolId::Uv1,
            1 << 16,
            1.0,
            0.05,
            VarianceMode::BoundedSigma { sigma_min: 2.0, sigma_max: 16.0 },
            1,
        );
        c.sizes.levels = Some(4);
        let p = plan_partition(&c).unwrap();
        let RoundTwo::UvOne { k2, family } = &p.round_two else {
            panic!("wrong shape")
        };
        let rho = ((4.0 * 65536f64).ln().sqrt() + 6.0).ceil() as usize;
        assert_eq!(family.rho, rho);
        assert_eq!(family.group_count(), 4 * rho);
        assert_eq!(*k2, 32768 / (4 * rho));
    }

    #[test]
    fn too_small_is_config_error() {
        let c = kv(ProtocolId::Kv2, 100);
        let err = plan_partition(&c).unwrap_err();
        assert!(matches!(err, Error::Configuration(ref m) if m.contains("too small")), "{err}");
        let mut c = kv(ProtocolId::Kv2, 101);
        c.sizes.k = Some(1);
        assert!(plan_partition(&c).is_err());
    }

    #[test]
    fn mode_mismatch() {
        let mut c = kv(ProtocolId::Uv2, 1000);
        assert!(plan_partition(&c).is_err());
        c.protocol = ProtocolId::Kv2;
        c.variance = VarianceMode::BoundedSigma { sigma_min: 1.0, sigma_max: 2.0 };
        assert!(plan_partition(&c).is_err());
    }

    #[test]
    fn paper_profile_sizes() {
        let mut c = kv(ProtocolId::Kv2, 1 << 22);
        c.profile = ConstantsProfile::Paper;
        let p = plan_partition(&c).unwrap();
        let l = p.levels.count();
        assert!(l >= 1);
        assert!(p.levels.k as f64 >= proof_k(ProtocolId::Kv2, 1.0, 0.05, l));
        assert!(l * p.levels.k <= 1 << 21);
        assert!(!fits_more(&c, l));
        c.n = 1 << 14;
        assert!(plan_partition(&c).is_err());
    }

    fn fits_more(c: &ProtocolConfig, l: usize) -> bool {
        ((l + 1) as f64) * proof_k(c.protocol, c.eps, c.beta, l + 1).ceil() <= (c.n / 2) as f64
    }

    #[test]
    fn infinite_budget_caps_levels() {
        let mut c = kv(ProtocolId::Kv2, 1 << 10);
        c.eps = f64::INFINITY;
        let p = plan_partition(&c).unwrap();
        assert_eq!(p.levels.k, 1);
        assert_eq!(p.levels.count(), 1 << 9);
        c.n = 1 << 14;
        let p = plan_partition(&c).unwrap();
        assert_eq!(p.levels.l_max, MAX_LEVEL);
        assert!(!p.warnings.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn every_user_assigned_once(
                half in 500usize..20_000,
                eps in 0.5f64..4.0,
                protocol in 0usize..4,
                k in proptest::option::of(20usize..400),
            ) {
                let protocol = ProtocolId::ALL[protocol];
                let variance = if protocol.known_variance() {
                    VarianceMode::KnownSigma { sigma: 1.5 }
                } else {
                    VarianceMode::BoundedSigma { sigma_min: 0.5, sigma_max: 4.0 }
                };
                let mut c = ProtocolConfig::new(protocol, 2 * half, eps, 0.05, variance, 3);
                c.sizes.k = k;
                c.c_k = 4.0;
                let Ok(p) = plan_partition(&c) else { return Ok(()); };
                let mut level_sizes = std::collections::BTreeMap::new();
                let mut group_sizes = std::collections::BTreeMap::new();
                let mut discarded = 0;
                for u in 0..c.n {
                    match p.assignment(u) {
                        Assignment::Level(j) => *level_sizes.entry(j).or_insert(0) += 1,
                        Assignment::Group(g) => *group_sizes.entry(g).or_insert(0) += 1,
                        Assignment::Second => prop_assert!(u >= half),
                        Assignment::Discard => discarded += 1,
                    }
                }
                prop_assert_eq!(discarded, p.discarded());
                prop_assert_eq!(level_sizes.len(), p.levels.count());
                prop_assert!(level_sizes.values().all(|&s| s == p.levels.k));
                for j in p.levels.levels() {
                    prop_assert!(p.level_users(j).all(|u| p.assignment(u) == Assignment::Level(j)));
                }
                prop_assert_eq!(group_sizes.len(), p.group_count());
                if let Some(k2) = p.k2() {
                    prop_assert!(group_sizes.values().all(|&s| s == k2));
                }
            }
        }
    }
}
