//! Objective terms, matching and the epoch loop.

mod fit;
pub mod losses;

pub use fit::{fit, fit_from, initial_model, EpochMetrics, TermValues, TrainConfig, TrainError, Trained};
pub use losses::{
    constraint_terms, greedy_match, intent_grounding_loss, scene_loss, total_loss, wta_loss, ConstraintMargins,
    ConstraintTerms, LossWeights, SceneLoss, WtaLoss, TERM_NAMES,
};
