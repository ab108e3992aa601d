//! Open-loop metrics, inference modes, closed-loop rollouts and the
//! long-tail suite.
//!
//! Collisions are oriented-box overlaps: open-loop against agents' recorded
//! futures, closed-loop against live agent states. The ego box is
//! 4.1 m x 1.8 m.

mod closed_loop;
mod inference;
mod metrics;
pub mod plot;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use closed_loop::{closed_loop_rollout, rollout_world, sampled_rollouts, ClosedLoopReport, Control, Rollout, SUBSTEPS};
pub use inference::{infer, infer_input, sample_index, select, tempered_probs, Inference, InferenceMode, Sampling};
pub use metrics::{collision_metric, ego_boxes, horizon_indices, l2_metric, static_plan, L2Errors, HORIZONS};

use crate::model::Model;
use crate::scene::{generate_scene, ScenarioKind, Scene, Trajectory};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("plan has {plan} waypoints but ground truth has {gt}")]
    LengthMismatch { plan: usize, gt: usize },
    #[error("no scenes to evaluate")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub l2: [f64; 3],
    pub l2_avg: f64,
    pub collision: [bool; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopReport {
    pub scenes: usize,
    /// L2 at 1 s / 2 s / 3 s (m).
    pub l2: [f64; 3],
    pub l2_avg: f64,
    /// Collision rate at 1 s / 2 s / 3 s.
    pub collision: [f64; 3],
    pub collision_avg: f64,
}

impl OpenLoopReport {
    pub fn aggregate(records: &[SceneRecord]) -> Result<Self, EvalError> {
        if records.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = records.len() as f64;
        let mut l2 = [0.0; 3];
        let mut col = [0.0; 3];
        for r in records {
            for h in 0..3 {
                l2[h] += r.l2[h] / n;
                col[h] += if r.collision[h] { 1.0 / n } else { 0.0 };
            }
        }
        Ok(OpenLoopReport {
            scenes: records.len(),
            l2,
            l2_avg: l2.iter().sum::<f64>() / 3.0,
            collision: col,
            collision_avg: col.iter().sum::<f64>() / 3.0,
        })
    }
}

pub fn score_plan(scene: &Scene, plan: &[crate::geom::Vec2]) -> Result<SceneRecord, EvalError> {
    let l2 = l2_metric(plan, &scene.ego_gt)?;
    Ok(SceneRecord {
        id: scene.id.clone(),
        l2: l2.at,
        l2_avg: l2.avg,
        collision: collision_metric(plan, scene),
    })
}

/// Scores the plans produced by `planner` on every scene.
pub fn evaluate_plans(
    scenes: &[Scene],
    mut planner: impl FnMut(&Scene) -> Result<Trajectory, EvalError>,
) -> Result<(Vec<SceneRecord>, OpenLoopReport), EvalError> {
    let records = scenes
        .iter()
        .map(|s| score_plan(s, &planner(s)?))
        .collect::<Result<Vec<_>, _>>()?;
    let report = OpenLoopReport::aggregate(&records)?;
    Ok((records, report))
}

/// Open-loop evaluation of `model` under `mode`; every scene plans with a
/// generator seeded from `mode.seed`.
pub fn open_loop(model: &Model, scenes: &[Scene], mode: &InferenceMode) -> Result<(Vec<SceneRecord>, OpenLoopReport), EvalError> {
    evaluate_plans(scenes, |s| Ok(infer(model, s, mode)?.trajectory))
}

/// The stand-still plan.
pub fn static_baseline(scenes: &[Scene]) -> Result<(Vec<SceneRecord>, OpenLoopReport), EvalError> {
    evaluate_plans(scenes, |s| Ok(static_plan(s.ego_gt.len())))
}

pub const LONG_TAIL_FAMILIES: [ScenarioKind; 3] =
    [ScenarioKind::ThreePointTurn, ScenarioKind::StopResume, ScenarioKind::Overtake];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: ScenarioKind,
    pub zero_shot: bool,
    pub model: OpenLoopReport,
    pub static_baseline: OpenLoopReport,
}

/// Open-loop reports for each long-tail family over scenes generated from
/// `seeds`.
pub fn long_tail_eval(
    model: &Model,
    seeds: std::ops::Range<u64>,
    mode: &InferenceMode,
) -> Result<Vec<FamilyReport>, EvalError> {
    LONG_TAIL_FAMILIES
        .iter()
        .map(|&family| {
            let scenes: Vec<Scene> = seeds.clone().map(|s| generate_scene(s, family)).collect();
            Ok(FamilyReport {
                family,
                zero_shot: family.is_zero_shot(),
                model: open_loop(model, &scenes, mode)?.1,
                static_baseline: static_baseline(&scenes)?.1,
            })
        })
        .collect()
}

/// Writes one JSON object per record, then `aggregate` as the last line
/// tagged `"aggregate": true`.
pub fn write_report<R: Serialize, A: Serialize>(path: &Path, records: &[R], aggregate: &A) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    let mut agg = serde_json::to_value(aggregate).expect("aggregate serializes");
    if let serde_json::Value::Object(m) = &mut agg {
        m.insert("aggregate".into(), serde_json::Value::Bool(true));
    }
    serde_json::to_writer(&mut out, &agg).expect("aggregate serializes");
    out.push(b'\n');
    std::fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io)
}
