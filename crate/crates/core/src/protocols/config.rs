use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolId {
    /// Known variance, two rounds.
    Kv2,
    /// Known variance, one round.
    Kv1,
    /// Unknown bounded variance, two rounds.
    Uv2,
    /// Unknown bounded variance, one round.
    Uv1,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 4] = [ProtocolId::Kv2, ProtocolId::Kv1, ProtocolId::Uv2, ProtocolId::Uv1];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolId::Kv2 => "kv2",
            ProtocolId::Kv1 => "kv1",
            ProtocolId::Uv2 => "uv2",
            ProtocolId::Uv1 => "uv1",
        }
    }

    pub fn known_variance(self) -> bool {
        matches!(self, ProtocolId::Kv2 | ProtocolId::Kv1)
    }

    pub fn rounds(self) -> u8 {
        match self {
            ProtocolId::Kv2 | ProtocolId::Uv2 => 2,
            ProtocolId::Kv1 | ProtocolId::Uv1 => 1,
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown protocol {s:?}, expected kv2, kv1, uv2 or uv1")))
    }
}

/// What the analyst knows about the scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    KnownSigma { sigma: f64 },
    BoundedSigma { sigma_min: f64, sigma_max: f64 },
}

/// Which sizing and threshold constants to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstantsProfile {
    /// `k = ⌈c_k·ln(8n/β)/ε²⌉` and the desk variance threshold.
    #[default]
    Desk,
    /// The sufficient sizes from the accuracy proofs and their thresholds.
    Paper,
}

/// Optional overrides of the subgroup sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupSizes {
    /// First-round subgroup size (`k` or `k₁`).
    pub k: Option<usize>,
    /// Number of first-round levels `L`; implies `k = ⌊(n/2)/L⌋`. Ignored when `k` is set.
    pub levels: Option<usize>,
    /// One-round second-half subgroup size `k₂`.
    pub k2: Option<usize>,
}

pub const DEFAULT_C_K: f64 = 160.0;

/// Public protocol parameters. Everything here is known to users and analyst alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: ProtocolId,
    pub eps: f64,
    pub beta: f64,
    pub n: usize,
    pub variance: VarianceMode,
    #[serde(default)]
    pub sizes: SubgroupSizes,
    #[serde(default)]
    pub profile: ConstantsProfile,
    #[serde(default = "default_c_k")]
    pub c_k: f64,
    pub master_seed: u64,
}

fn default_c_k() -> f64 {
    DEFAULT_C_K
}

impl ProtocolConfig {
    pub fn new(protocol: ProtocolId, n: usize, eps: f64, beta: f64, variance: VarianceMode, master_seed: u64) -> Self {
        ProtocolConfig {
            protocol,
            eps,
            beta,
            n,
            variance,
            sizes: SubgroupSizes::default(),
            profile: ConstantsProfile::default(),
            c_k: DEFAULT_C_K,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if self.n < 2 || self.n % 2 != 0 {
            return Err(Error::config(format!("n must be even and at least 2, got {}", self.n)));
        }
        if !(self.c_k > 0.0 && self.c_k.is_finite()) {
            return Err(Error::config(format!("c_k must be positive, got {}", self.c_k)));
        }
        match (self.protocol.known_variance(), self.variance) {
            (true, VarianceMode::KnownSigma { sigma }) => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::config(format!("sigma must be positive, got {sigma}")));
                }
            }
            (false, VarianceMode::BoundedSigma { sigma_min, sigma_max }) => {
                if !(sigma_min > 0.0 && sigma_max.is_finite() && sigma_min <= sigma_max) {
                    return Err(Error::config(format!(
                        "need 0 < sigma_min <= sigma_max, got [{sigma_min}, {sigma_max}]"
                    )));
                }
            }
            (true, VarianceMode::BoundedSigma { .. }) => {
                return Err(Error::config(format!("{} needs a known sigma, not a sigma range", self.protocol)));
            }
            (false, VarianceMode::KnownSigma { .. }) => {
                return Err(Error::config(format!("{} needs a sigma range, not a known sigma", self.protocol)));
            }
        }
        Ok(())
    }
}

/// Ground truth of a simulated population. Only the sampling side reads it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub mu: f64,
    pub sigma: f64,
}
