use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::JitterConfig;
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Federated,
    Centralized,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "fed" | "federated" => Ok(Mode::Federated),
            "central" | "centralized" => Ok(Mode::Centralized),
            _ => Err(Error::Config(format!("unknown mode `{s}` (fed|central)"))),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Federated => "federated",
            Mode::Centralized => "centralized",
        }
    }
}

/// Which checkpoint the final test evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCheckpoint {
    Best,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub mu: f32,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
    pub mode: Mode,
    pub mixup_alpha: f64,
    pub balanced_sampling: bool,
    pub jitter: JitterConfig,
    /// Extra attempts for a failed client within the same round.
    pub client_retries: usize,
    pub eval_checkpoint: EvalCheckpoint,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 4,
            rounds: 10,
            local_epochs: 3,
            mu: 0.01,
            lr: 3e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            dirichlet_alpha: 0.5,
            seed: 42,
            mode: Mode::Federated,
            mixup_alpha: 0.2,
            balanced_sampling: true,
            jitter: JitterConfig::default(),
            client_retries: 0,
            eval_checkpoint: EvalCheckpoint::Best,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("federation: {m}")));
        if self.n_clients == 0 {
            return bad("n_clients must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be a finite value >= 0");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be > 0 and weight_decay >= 0");
        }
        if !(self.dirichlet_alpha > 0.0) {
            return bad("dirichlet_alpha must be > 0");
        }
        if !(self.mixup_alpha >= 0.0) {
            return bad("mixup_alpha must be >= 0 (0 disables MixUp)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of a client's stream in one round: `seed ⊕ splitmix64(client_id, round)`.
pub fn client_seed(seed: u64, client_id: usize, round: usize, attempt: usize) -> u64 {
    let key = splitmix64(((client_id as u64) << 32) ^ round as u64);
    let key = if attempt == 0 {
        key
    } else {
        splitmix64(key ^ attempt as u64)
    };
    seed ^ key
}
