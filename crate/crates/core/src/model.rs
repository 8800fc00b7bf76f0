//! Synthetic per-model service-time profiles.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::time::nanos;

/// Multiplicative noise applied to the linear service-time model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Jitter {
    #[default]
    None,
    /// Factor drawn from lognormal(0, sigma): median 1, always positive.
    LogNormal { sigma: f64 },
}

/// GPU execution cost of one model: `base_time + batch * per_item_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub base_time: Duration,
    pub per_item_time: Duration,
    pub jitter: Jitter,
}

impl ModelProfile {
    pub fn new(name: impl Into<String>, base_time: Duration, per_item_time: Duration, jitter: Jitter) -> Result<Self> {
        if let Jitter::LogNormal { sigma } = jitter {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(CoreError::InvalidArgument(format!("jitter sigma must be >= 0, got {sigma}")));
            }
        }
        Ok(ModelProfile { name: name.into(), base_time, per_item_time, jitter })
    }

    pub fn deterministic(name: impl Into<String>, base_time: Duration, per_item_time: Duration) -> Self {
        ModelProfile { name: name.into(), base_time, per_item_time, jitter: Jitter::None }
    }

    /// Noise-free service time for a batch.
    pub fn nominal_service_time(&self, batch_size: u32) -> Result<Duration> {
        if batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(self.base_time + self.per_item_time * batch_size)
    }

    /// Draws one service time. Deterministic for a given generator state;
    /// no randomness is consumed when jitter is disabled.
    pub fn sample_service_time<R: Rng + ?Sized>(&self, batch_size: u32, rng: &mut R) -> Result<Duration> {
        let nominal = self.nominal_service_time(batch_size)?;
        match self.jitter {
            Jitter::None => Ok(nominal),
            Jitter::LogNormal { sigma: 0.0 } => Ok(nominal),
            Jitter::LogNormal { sigma } => {
                let dist = LogNormal::new(0.0, sigma).map_err(|e| CoreError::InvalidArgument(e.to_string()))?;
                let factor: f64 = dist.sample(rng);
                Ok(Duration::from_nanos((nanos(nominal) as f64 * factor).round() as u64))
            }
        }
    }
}

/// Static set of models the fleet can serve, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    profiles: BTreeMap<String, ModelProfile>,
}

impl ModelRegistry {
    pub fn new(profiles: impl IntoIterator<Item = ModelProfile>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for p in profiles {
            if map.contains_key(&p.name) {
                return Err(CoreError::InvalidArgument(format!("duplicate model `{}`", p.name)));
            }
            map.insert(p.name.clone(), p);
        }
        Ok(ModelRegistry { profiles: map })
    }

    pub fn get(&self, name: &str) -> Option<&ModelProfile> {
        self.profiles.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModelProfile> {
        self.profiles.values()
    }
}
