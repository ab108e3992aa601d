use std::ops::Range;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{generate_scene, ScenarioKind, Scene};

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("empty dataset")]
    Empty,
    #[error("invalid scenario mix: {0}")]
    Mix(String),
    #[error("split fractions must be non-negative and sum to 1")]
    Split,
}

/// Every family with equal weight.
pub fn default_mix() -> Vec<(ScenarioKind, f64)> {
    ScenarioKind::ALL.iter().map(|&k| (k, 1.0)).collect()
}

/// Generates one scene per seed, drawing its family from `mix`, and splits
/// by position: the first `round(n * train_fraction)` seeds go to train,
/// the rest to val. Zero-shot families always go to val.
pub fn build_dataset(
    seeds: Range<u64>,
    mix: &[(ScenarioKind, f64)],
    split: (f64, f64),
) -> Result<(Vec<Scene>, Vec<Scene>), DatasetError> {
    if seeds.is_empty() {
        return Err(DatasetError::Empty);
    }
    if mix.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
        return Err(DatasetError::Mix("weights must be finite and non-negative".into()));
    }
    let dist = WeightedIndex::new(mix.iter().map(|(_, w)| *w))
        .map_err(|e| DatasetError::Mix(e.to_string()))?;
    let (ft, fv) = split;
    if ft < 0.0 || fv < 0.0 || ((ft + fv) - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Split);
    }
    let n = (seeds.end - seeds.start) as f64;
    let n_train = (n * ft).round() as u64;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, seed) in seeds.enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = mix[dist.sample(&mut rng)].0;
        let scene = generate_scene(seed, kind);
        if (i as u64) < n_train && !kind.is_zero_shot() {
            train.push(scene);
        } else {
            val.push(scene);
        }
    }
    Ok((train, val))
}
