//! JSON checkpoints of a posterior/prior pair.
//!
//! `serde_json` writes the shortest decimal that round-trips, so vectors
//! reload bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::{read_json, write_json};
use crate::error::{Error, Result};
use crate::network::{Architecture, PosteriorParams, PriorParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub mu_q: Vec<f64>,
    pub log_sigma2_q: Vec<f64>,
    pub mu_p: Vec<f64>,
    pub sigma2_p: f64,
    pub seed: u64,
    pub epoch: usize,
    /// Echo of the configuration that produced this checkpoint.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(
        arch: Architecture,
        post: &PosteriorParams,
        prior: &PriorParams,
        seed: u64,
        epoch: usize,
        config: serde_json::Value,
    ) -> Self {
        Self {
            arch,
            mu_q: post.mu_q.clone(),
            log_sigma2_q: post.log_sigma2_q.clone(),
            mu_p: prior.mu_p.clone(),
            sigma2_p: prior.sigma2_p,
            seed,
            epoch,
            config,
        }
    }

    pub fn posterior(&self) -> PosteriorParams {
        PosteriorParams {
            mu_q: self.mu_q.clone(),
            log_sigma2_q: self.log_sigma2_q.clone(),
        }
    }

    pub fn prior(&self) -> PriorParams {
        PriorParams {
            mu_p: self.mu_p.clone(),
            sigma2_p: self.sigma2_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.arch.num_params();
        for (name, len) in [
            ("mu_q", self.mu_q.len()),
            ("log_sigma2_q", self.log_sigma2_q.len()),
            ("mu_p", self.mu_p.len()),
        ] {
            if len != n {
                return Err(Error::config(format!(
                    "checkpoint field {name} has {len} entries, architecture needs {n}"
                )));
            }
        }
        if !(self.sigma2_p > 0.0) {
            return Err(Error::config("checkpoint field sigma2_p must be > 0"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_network, InitSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Architecture::new(vec![3, 4, 2]).unwrap();
        let (mut post, prior) = init_network(&arch, &InitSpec::fan_in(&arch, 1e-3), 5).unwrap();
        post.mu_q[0] = 0.1 + 0.2;
        post.log_sigma2_q[1] = -1e-310;
        let ckpt = Checkpoint::new(arch, &post, &prior, 5, 7, serde_json::json!({"lr": 0.001}));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        ckpt.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.mu_q.iter().zip(&ckpt.mu_q) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn inconsistent_lengths_are_rejected() {
        let arch = Architecture::new(vec![2, 1]).unwrap();
        let (post, prior) = init_network(&arch, &InitSpec::fan_in(&arch, 1e-3), 0).unwrap();
        let mut c = Checkpoint::new(arch, &post, &prior, 0, 0, serde_json::Value::Null);
        c.mu_p.pop();
        assert!(c.validate().is_err());
    }
}
