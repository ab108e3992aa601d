use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Model, Prediction, SceneInput};
use crate::planner::{argmax, PlanOutput};
use crate::scene::{Scene, Trajectory};
use crate::tensor::{softmax_slice, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Highest-confidence intent and mode.
    Deterministic,
    /// Sampled intent, best mode.
    IntentSample,
    /// Best intent, sampled mode.
    TrajSample,
    /// Both sampled.
    DualSample,
}

impl Sampling {
    pub const ALL: [Sampling; 4] = [
        Sampling::Deterministic,
        Sampling::IntentSample,
        Sampling::TrajSample,
        Sampling::DualSample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sampling::Deterministic => "deterministic",
            Sampling::IntentSample => "intent_sample",
            Sampling::TrajSample => "traj_sample",
            Sampling::DualSample => "dual_sample",
        }
    }

    fn samples_intent(self) -> bool {
        matches!(self, Sampling::IntentSample | Sampling::DualSample)
    }

    fn samples_mode(self) -> bool {
        matches!(self, Sampling::TrajSample | Sampling::DualSample)
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sampling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Sampling::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown inference mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceMode {
    pub sampling: Sampling,
    pub temperature: f64,
    pub seed: u64,
}

impl InferenceMode {
    pub fn deterministic() -> Self {
        InferenceMode {
            sampling: Sampling::Deterministic,
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn new(sampling: Sampling, temperature: f64, seed: u64) -> Self {
        InferenceMode {
            sampling,
            temperature,
            seed,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// `softmax(logits / temperature)`.
pub fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    softmax_slice(&scaled)
}

/// Draws an index from `softmax(logits / temperature)`.
pub fn sample_index(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let probs = tempered_probs(logits, temperature);
    match WeightedIndex::new(&probs) {
        Ok(d) => d.sample(rng),
        Err(_) => argmax(logits),
    }
}

/// Picks `(intent, mode)` from a plan according to `sampling`.
pub fn select(plan: &PlanOutput, sampling: Sampling, temperature: f64, rng: &mut impl Rng) -> (usize, usize) {
    let intent = if sampling.samples_intent() {
        sample_index(&plan.intent_logits, temperature, rng)
    } else {
        argmax(&plan.intent_logits)
    };
    let logits = &plan.mode_logits[intent];
    let mode = if sampling.samples_mode() {
        sample_index(logits, temperature, rng)
    } else {
        argmax(logits)
    };
    (intent, mode)
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub prediction: Prediction,
    pub intent: usize,
    pub mode: usize,
    pub trajectory: Trajectory,
}

pub fn infer_input(model: &Model, input: &SceneInput, mode: &InferenceMode, rng: &mut impl Rng) -> Result<Inference> {
    let prediction = model.predict_input(input)?;
    let (intent, m) = select(&prediction.plan, mode.sampling, mode.temperature, rng);
    let trajectory = prediction.plan.trajectories[intent][m].clone();
    Ok(Inference {
        prediction,
        intent,
        mode: m,
        trajectory,
    })
}

/// Plans for `scene` with a fresh generator seeded from `mode.seed`.
pub fn infer(model: &Model, scene: &Scene, mode: &InferenceMode) -> Result<Inference> {
    infer_input(model, &model.input(scene), mode, &mut mode.rng())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;

    fn plan(intent: Vec<f64>, modes: Vec<Vec<f64>>) -> PlanOutput {
        let k = intent.len();
        let m = modes[0].len();
        PlanOutput {
            intent_logits: intent,
            trajectories: (0..k)
                .map(|i| (0..m).map(|j| vec![Vec2::new(i as f64, j as f64); 6]).collect())
                .collect(),
            mode_logits: modes,
        }
    }

    #[test]
    fn deterministic_ignores_logit_scale() {
        let p = plan(vec![0.1, 2.0, 1.9], vec![vec![0.0, 1.0], vec![3.0, -1.0], vec![0.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = select(&p, Sampling::Deterministic, 1.0, &mut rng);
        assert_eq!(base, (1, 0));
        for s in [0.01, 3.0, 1e4] {
            let q = plan(
                p.intent_logits.iter().map(|x| x * s).collect(),
                p.mode_logits.iter().map(|r| r.iter().map(|x| x * s).collect()).collect(),
            );
            assert_eq!(select(&q, Sampling::Deterministic, 1.0, &mut rng), base);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let p = plan(vec![1.0, 1.0], vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select(&p, Sampling::Deterministic, 1.0, &mut rng), (0, 0));
    }

    #[test]
    fn cold_sampling_is_deterministic() {
        let p = plan(vec![0.3, -0.2, 0.29], vec![vec![0.0, 0.01]; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            assert_eq!(select(&p, Sampling::DualSample, 1e-6, &mut rng), (0, 1));
        }
    }

    #[test]
    fn sampling_is_reproducible_from_seed() {
        let p = plan(vec![0.0; 5], vec![vec![0.0; 4]; 5]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| select(&p, Sampling::DualSample, 1.0, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn parse_names() {
        for s in Sampling::ALL {
            assert_eq!(s.name().parse::<Sampling>().unwrap(), s);
        }
        assert!("greedy".parse::<Sampling>().unwrap_err().contains("greedy"));
    }
}
