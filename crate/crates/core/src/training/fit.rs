use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::losses::{scene_loss, total_loss, ConstraintMargins, LossWeights, TERM_NAMES};
use crate::model::{Model, ModelConfig, SceneInput};
use crate::planner::{kmeans_update, quantization_loss, IntentAnchorSet, KMEANS_MOMENTUM};
use crate::scene::{Scene, Trajectory, T_FUTURE};
use crate::tensor::{AdamW, AdamWConfig, Checkpoint, CosineSchedule, Grads, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite `{term}` loss at epoch {epoch}, scene {scene}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        scene: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    pub d_model: usize,
    pub t_future: usize,
    pub kmeans_momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Detection matching radius during training; absent means unbounded.
    pub match_gate: Option<f64>,
    pub weights: LossWeights,
    pub margins: ConstraintMargins,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            lr0: 2e-3,
            lr_min: 2e-5,
            weight_decay: 0.01,
            seed: 0,
            k: 8,
            m: 4,
            d_model: 64,
            t_future: T_FUTURE,
            kmeans_momentum: KMEANS_MOMENTUM,
            grad_clip: 0.0,
            match_gate: None,
            weights: LossWeights::default(),
            margins: ConstraintMargins::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("m", self.m),
            ("d_model", self.d_model),
        ] {
            if v == 0 {
                return bad(format!("`{name}` must be positive"));
            }
        }
        if self.t_future != T_FUTURE {
            return bad(format!("`t_future` must be {T_FUTURE} to match the scene format"));
        }
        if self.d_model % ModelConfig::default().heads != 0 {
            return bad(format!("`d_model` must be divisible by {}", ModelConfig::default().heads));
        }
        for (name, v) in [("lr0", self.lr0), ("lr_min", self.lr_min)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`{name}` must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("`weight_decay` and `grad_clip` must be >= 0".into());
        }
        if !(self.kmeans_momentum > 0.0 && self.kmeans_momentum < 1.0) {
            return bad("`kmeans_momentum` must lie in (0, 1)".into());
        }
        let mg = &self.margins;
        if [mg.longitudinal, mg.lateral, mg.heading].iter().any(|&v| !(v > 0.0)) {
            return bad("constraint margins must be positive".into());
        }
        self.weights.validate().map_err(TrainError::Config)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            k: self.k,
            m: self.m,
            t_future: self.t_future,
            ..ModelConfig::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Flat `train.*` entries for checkpoint metadata.
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        let value = toml::Value::try_from(self).expect("train config serializes");
        flatten_toml("train", &value, &mut out);
        out
    }
}

fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten_toml(&format!("{prefix}.{k}"), v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Per-term values in weight order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValues {
    pub map: f64,
    pub det: f64,
    pub mot: f64,
    pub plan_intent: f64,
    pub plan_wta: f64,
    pub plan_constr: f64,
    pub kmeans: f64,
}

impl TermValues {
    pub fn from_array(a: [f64; 7]) -> Self {
        TermValues {
            map: a[0],
            det: a[1],
            mot: a[2],
            plan_intent: a[3],
            plan_wta: a[4],
            plan_constr: a[5],
            kmeans: a[6],
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.map,
            self.det,
            self.mot,
            self.plan_intent,
            self.plan_wta,
            self.plan_constr,
            self.kmeans,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(flatten)]
    pub terms: TermValues,
    pub total: f64,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
}

pub struct Trained {
    pub model: Model,
    pub optimizer: AdamW,
    pub metrics: Vec<EpochMetrics>,
}

impl Trained {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        self.model.to_checkpoint(cfg.to_meta(), Some(&self.optimizer))
    }
}

/// The model `fit` starts from: anchors seeded from the training experts,
/// weights from `cfg.seed`.
pub fn initial_model(train: &[Scene], cfg: &TrainConfig) -> Model {
    let anchors = IntentAnchorSet::from_experts(train, cfg.k);
    Model::new(cfg.model_config(), anchors, cfg.seed)
}

/// Trains from [`initial_model`]. `on_epoch` sees each epoch's mean terms.
pub fn fit(train: &[Scene], cfg: &TrainConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    fit_from(initial_model(train, cfg), train, cfg, on_epoch)
}

pub fn fit_from(
    mut model: Model,
    train: &[Scene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let inputs: Vec<SceneInput> = train.iter().map(|s| model.input(s)).collect();
    let mut optimizer = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        lr0: cfg.lr0,
        lr_min: cfg.lr_min,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 7];
        let epoch_lr = schedule.lr(step);
        for batch in order.chunks(cfg.batch_size) {
            let gts: Vec<Trajectory> = batch.iter().map(|&i| train[i].ego_gt.clone()).collect();
            let kmeans = quantization_loss(&gts, &model.anchors);
            let mut grads = Grads::zeros_like(&model.store);
            for &i in batch {
                let scene = &train[i];
                let mut tape = Tape::new(&model.store);
                let f = model.forward(&mut tape, &inputs[i])?;
                let sl = scene_loss(
                    &mut tape,
                    &model,
                    &f,
                    scene,
                    &cfg.weights,
                    &cfg.margins,
                    cfg.match_gate,
                    kmeans,
                )?;
                for (j, (t, name)) in sl.terms.iter().zip(TERM_NAMES).enumerate() {
                    let v = tape.value(*t).data()[0];
                    if !v.is_finite() {
                        return Err(TrainError::NonFinite {
                            term: name,
                            epoch,
                            scene: scene.id.clone(),
                        });
                    }
                    sums[j] += v;
                }
                let back = tape.backward(sl.total)?;
                grads.add_scaled(back.param_grads(), 1.0 / batch.len() as f64);
            }
            kmeans_update(&mut model.anchors, &gts, cfg.kmeans_momentum);
            if cfg.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            optimizer.step(&mut model.store, &grads, schedule.lr(step))?;
            step += 1;
        }
        let n = train.len() as f64;
        let means = sums.map(|s| s / n);
        let m = EpochMetrics {
            epoch,
            terms: TermValues::from_array(means),
            total: total_loss(&means, &cfg.weights),
            lr: epoch_lr,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(Trained {
        model,
        optimizer,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, ScenarioKind};

    fn scenes(n: u64) -> Vec<Scene> {
        (0..n).map(|s| generate_scene(s, ScenarioKind::ALL[(s % 6) as usize])).collect()
    }

    fn small() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            d_model: 16,
            k: 4,
            m: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_smoke_and_checkpoint() {
        let train = scenes(8);
        let cfg = small();
        let mut seen = Vec::new();
        let t = fit(&train, &cfg, |m| seen.push(*m)).unwrap();
        assert_eq!(seen.len(), 1);
        assert!(seen[0].total.is_finite() && seen[0].total > 0.0);
        let bytes = t.checkpoint(&cfg).to_bytes();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.store.entries(), t.model.store.entries());
        assert_eq!(back.anchors, t.model.anchors);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let train = scenes(10);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..small()
        };
        let a = fit(&train, &cfg, |_| {}).unwrap().checkpoint(&cfg).to_bytes();
        let b = fit(&train, &cfg, |_| {}).unwrap().checkpoint(&cfg).to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_train_set_is_rejected() {
        assert!(matches!(fit(&[], &small(), |_| {}), Err(TrainError::EmptyTrainSet)));
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let mut train = scenes(2);
        let model = initial_model(&train, &small());
        train[1].ego_gt[2].x = f64::NAN;
        let cfg = TrainConfig {
            batch_size: 1,
            ..small()
        };
        let err = fit_from(model, &train, &cfg, |_| {}).err().unwrap();
        let msg = err.to_string();
        assert!(matches!(err, TrainError::NonFinite { term: "plan_wta", .. }), "{msg}");
        assert!(msg.contains(&train[1].id), "{msg}");
    }

    #[test]
    fn config_toml_round_trip_and_strictness() {
        let cfg = TrainConfig {
            match_gate: Some(3.0),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("epochs = 3\n[weights]\nmot = 0.5\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.weights.mot, 0.5);
        assert_eq!(partial.weights.map, 2.0);
        let err = TrainConfig::from_toml("epoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoch"));
        let meta = cfg.to_meta();
        assert_eq!(meta["train.weights.mot"], "0.2");
        assert_eq!(meta["train.epochs"], "60");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("batch_size"));
        let cfg = TrainConfig {
            lr0: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
