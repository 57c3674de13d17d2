use super::config::SimulationTruth;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, sample_gaussian, RandomStream};

pub(crate) const DATA_LABEL: u64 = 0;
pub(crate) const RESPONSE_LABEL: u64 = 1;

/// Private user samples. Only the user side of the protocol engine reads them.
#[derive(Clone, Debug)]
pub struct Population {
    samples: Vec<f64>,
}

impl Population {
    /// `n` i.i.d. draws from `N(μ, σ²)` on the data stream of `trial`.
    pub fn gaussian(truth: &SimulationTruth, n: usize, master_seed: u64, trial: u64) -> Result<Self> {
        let mut stream = RandomStream::new(derive_seed(master_seed, DATA_LABEL), trial);
        let samples = (0..n)
            .map(|_| sample_gaussian(&mut stream, truth.mu, truth.sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(Population { samples })
    }

    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("sample {x} is not finite")));
        }
        Ok(Population { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub(super) fn sample(&self, user: usize) -> f64 {
        self.samples[user]
    }
}

/// Randomness of one user's randomizer in one trial.
pub(crate) fn user_stream(master_seed: u64, trial: u64, user: usize) -> RandomStream {
    RandomStream::new(
        derive_seed(master_seed, RESPONSE_LABEL),
        crate::numerics::user_stream_id(trial, user as u64),
    )
}
