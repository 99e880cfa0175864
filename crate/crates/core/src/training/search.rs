//! Random search over discrete hyperparameter grids.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Named dimensions, each a list of admissible values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: BTreeMap<String, Vec<f64>>,
}

fn space(dims: &[(&str, &[f64])]) -> SearchSpace {
    SearchSpace {
        dims: dims.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect(),
    }
}

const LAMBDAS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

impl SearchSpace {
    pub fn student() -> Self {
        space(&[
            ("lr", &[1e-4, 1e-3, 5e-4]),
            ("weight_decay", &[1e-4, 1e-5, 0.0]),
            ("batch_size", &[50.0, 128.0, 256.0, 512.0, 1024.0, 2048.0]),
            ("lambda1", &LAMBDAS),
            ("lambda2", &LAMBDAS),
        ])
    }

    pub fn fewshot() -> Self {
        space(&[
            ("lr", &[1e-3, 1e-2, 1e-4, 5e-4, 5e-3, 8e-4]),
            ("weight_decay", &[0.0, 1e-4, 1e-5, 1e-6]),
        ])
    }

    pub fn simclr() -> Self {
        space(&[
            ("lr", &[1e-4, 1e-3, 5e-4]),
            ("weight_decay", &[1e-4, 1e-5, 0.0]),
            ("batch_size", &[1024.0, 2048.0, 4096.0]),
        ])
    }

    pub fn cpc() -> Self {
        space(&[
            ("lr", &[1e-4, 1e-3, 5e-4]),
            ("weight_decay", &[1e-4, 1e-5, 0.0]),
            ("batch_size", &[32.0, 64.0, 128.0]),
            ("prediction_steps", &[20.0, 24.0, 28.0, 32.0]),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("empty search space".into()));
        }
        if let Some((k, _)) = self.dims.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("search dimension `{k}` has no values")));
        }
        Ok(())
    }

    /// `budget` independent uniform draws, deterministic in `seed`.
    pub fn sample(&self, budget: usize, seed: u64) -> Result<Vec<Candidate>> {
        self.validate()?;
        let mut rng = rng_for(seed, "search", 0);
        Ok((0..budget)
            .map(|_| Candidate {
                values: self
                    .dims
                    .iter()
                    .map(|(k, vals)| (k.clone(), vals[rng.random_range(0..vals.len())]))
                    .collect(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub values: BTreeMap<String, f64>,
}

impl Candidate {
    pub fn get(&self, key: &str) -> Result<f64> {
        self.values
            .get(key)
            .copied()
            .ok_or_else(|| Error::Config(format!("candidate lacks `{key}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub best_score: f64,
    pub trials: Vec<(Candidate, f64)>,
}

/// Scores `budget` sampled candidates with `evaluate` (higher is better);
/// ties keep the earlier candidate.
pub fn hyperparameter_search(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    mut evaluate: impl FnMut(&Candidate) -> Result<f64>,
) -> Result<SearchOutcome> {
    if budget == 0 {
        return Err(Error::Config("search budget must be positive".into()));
    }
    let mut trials = Vec::with_capacity(budget);
    for c in space.sample(budget, seed)? {
        let score = evaluate(&c)?;
        trials.push((c, score));
    }
    let (best, best_score) = trials
        .iter()
        .fold(None::<(&Candidate, f64)>, |acc, (c, s)| match acc {
            Some((_, b)) if *s <= b => acc,
            _ => Some((c, *s)),
        })
        .map(|(c, s)| (c.clone(), s))
        .expect("budget > 0");
    Ok(SearchOutcome {
        best,
        best_score,
        trials,
    })
}
