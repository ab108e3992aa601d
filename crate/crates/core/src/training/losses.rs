use serde::{Deserialize, Serialize};

use crate::geom::{nearest_on_polyline, resample, wrap_angle, Vec2};
use crate::model::{sigmoid, ForwardVars, Model};
use crate::perception::{det_cols, AGENT_CLASSES};
use crate::planner::{ade, argmax, kmeans_assign, IntentAnchorSet};
use crate::scene::{PolylineKind, Scene, Trajectory};
use crate::tensor::{Result, Tape, Tensor, Var};

/// Names of the seven objective terms, in weight order.
pub const TERM_NAMES: [&str; 7] = ["map", "det", "mot", "plan_intent", "plan_wta", "plan_constr", "kmeans"];

/// Class index used for map queries with no ground-truth polyline.
pub const MAP_NONE: usize = 2;

pub fn map_class(kind: PolylineKind) -> usize {
    match kind {
        PolylineKind::LaneCenter => 0,
        PolylineKind::Boundary => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub map: f64,
    pub det: f64,
    pub mot: f64,
    pub plan_intent: f64,
    pub plan_wta: f64,
    pub plan_constr: f64,
    pub kmeans: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            map: 2.0,
            det: 2.0,
            mot: 0.2,
            plan_intent: 1.0,
            plan_wta: 1.0,
            plan_constr: 1.0,
            kmeans: 1.0,
        }
    }
}

impl LossWeights {
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

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(format!("weight `{name}` must be finite and >= 0, got {w}"));
            }
        }
        Ok(())
    }
}

/// Weighted sum of the seven term values.
pub fn total_loss(terms: &[f64; 7], w: &LossWeights) -> f64 {
    terms.iter().zip(w.as_array()).map(|(t, w)| t * w).sum()
}

/// Hinge margins of the planning constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintMargins {
    /// Along the ego x axis (m).
    pub longitudinal: f64,
    /// Along the ego y axis (m).
    pub lateral: f64,
    /// Required clearance inside the road boundary (m).
    pub boundary: f64,
    /// Allowed heading deviation from the lane tangent (rad).
    pub heading: f64,
    /// Detections below this objectness are ignored by the collision term.
    pub objectness: f64,
}

impl Default for ConstraintMargins {
    fn default() -> Self {
        ConstraintMargins {
            longitudinal: 3.0,
            lateral: 1.0,
            boundary: 1.0,
            heading: std::f64::consts::FRAC_PI_4,
            objectness: 0.5,
        }
    }
}

pub fn flatten(traj: &[Vec2]) -> Vec<f64> {
    traj.iter().flat_map(|p| [p.x, p.y]).collect()
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

#[derive(Debug, Clone, Copy)]
pub struct WtaLoss {
    pub loss: Var,
    pub regression: Var,
    pub classification: Var,
    pub winner: usize,
}

/// Winner-takes-all over `preds` (`[M, T*2]`) and `logits` (M values):
/// smooth-L1 on the mode with the lowest ADE (per waypoint, summed over
/// x and y) plus cross-entropy toward that mode.
pub fn wta_loss(tape: &mut Tape, preds: Var, logits: Var, gt: &[Vec2]) -> Result<WtaLoss> {
    let pv = tape.value(preds);
    let modes = pv.shape()[0];
    let mut winner = (0, f64::INFINITY);
    for m in 0..modes {
        let d = ade(&to_points(pv.row(m)), gt);
        if d < winner.1 {
            winner = (m, d);
        }
    }
    let winner = winner.0;
    let row = tape.rows(preds, &[winner])?;
    let sum = tape.smooth_l1(row, &flatten(gt), 1.0)?;
    let regression = tape.scale(sum, 1.0 / gt.len() as f64);
    let classification = tape.cross_entropy(logits, winner)?;
    let loss = tape.add(regression, classification)?;
    Ok(WtaLoss {
        loss,
        regression,
        classification,
        winner,
    })
}

fn to_points(row: &[f64]) -> Vec<Vec2> {
    row.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect()
}

/// Cross-entropy of the intent logits toward the nearest anchor.
pub fn intent_grounding_loss(tape: &mut Tape, intent_logits: Var, gt: &[Vec2], anchors: &IntentAnchorSet) -> Result<(Var, usize)> {
    let label = kmeans_assign(gt, anchors);
    Ok((tape.cross_entropy(intent_logits, label)?, label))
}

/// Greedy nearest-center matching: repeatedly pairs the closest unmatched
/// prediction and ground truth. Pairs farther than `gate` are never made.
/// Returns `(pred, gt)` pairs in the order they were made.
pub fn greedy_match(preds: &[Vec2], gts: &[Vec2], gate: Option<f64>) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(preds.len() * gts.len());
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d = p.dist(*g);
            if gate.is_none_or(|r| d <= r) {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; gts.len()];
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub fn detected_centers(tape: &Tape, det: Var) -> Vec<Vec2> {
    let v = tape.value(det);
    (0..v.shape()[0])
        .map(|r| {
            let row = v.row(r);
            Vec2::new(row[det_cols::CENTER], row[det_cols::CENTER + 1])
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct PerceptionLosses {
    pub det: Var,
    pub map: Var,
}

/// Detection and map losses. `gate` limits detection matching distance.
/// Returns the losses and the detection pairs `(query, agent)`.
pub fn detection_and_map_losses(
    tape: &mut Tape,
    f: &ForwardVars,
    scene: &Scene,
    gate: Option<f64>,
) -> Result<(PerceptionLosses, Vec<(usize, usize)>)> {
    let preds = detected_centers(tape, f.det);
    let gts: Vec<Vec2> = scene.agents.iter().map(|a| a.current().position).collect();
    let pairs = greedy_match(&preds, &gts, gate);

    let dv = tape.value(f.det).clone();
    let mut reg_terms = Vec::new();
    let mut cls_terms = Vec::new();
    for &(i, j) in &pairs {
        let a = &scene.agents[j];
        let s = a.current();
        let row = tape.rows(f.det, &[i])?;
        let c = tape.slice_cols(row, det_cols::CENTER, det_cols::CENTER + 2)?;
        let lc = tape.l1(c, &[s.position.x, s.position.y])?;
        let ph = dv.row(i)[det_cols::HEADING];
        let h = tape.slice_cols(row, det_cols::HEADING, det_cols::HEADING + 1)?;
        let lh = tape.l1(h, &[ph + wrap_angle(s.heading - ph)])?;
        let e = tape.slice_cols(row, det_cols::EXTENT, det_cols::EXTENT + 2)?;
        let le = tape.l1(e, &[a.extent.length, a.extent.width])?;
        let r = tape.weighted_sum(&[(lc, 1.0), (lh, 1.0), (le, 1.0)])?;
        reg_terms.push((r, 1.0 / pairs.len() as f64));
        let logits = tape.slice_cols(row, det_cols::CLASS, det_cols::CLASS + AGENT_CLASSES)?;
        let ce = tape.cross_entropy(logits, a.class.index())?;
        cls_terms.push((ce, 1.0 / pairs.len() as f64));
    }
    let na = dv.shape()[0];
    let mut targets = vec![0.0; na];
    for &(i, _) in &pairs {
        targets[i] = 1.0;
    }
    let obj = tape.slice_cols(f.det, det_cols::OBJECTNESS, det_cols::OBJECTNESS + 1)?;
    let bce = tape.bce_with_logits(obj, &targets)?;
    let mut det_terms = vec![(bce, 1.0 / na as f64)];
    det_terms.extend(reg_terms);
    det_terms.extend(cls_terms);
    let det = tape.weighted_sum(&det_terms)?;

    let nm = tape.shape(f.map_points)[0];
    let np = tape.shape(f.map_points)[1] / 2;
    let n_gt = scene.polylines.len().min(nm);
    let mut map_terms = Vec::new();
    for q in 0..nm {
        let logits = tape.rows(f.map_logits, &[q])?;
        let label = if q < n_gt {
            let gt = &scene.polylines[q];
            let pts = tape.rows(f.map_points, &[q])?;
            let l = tape.l1(pts, &flatten(&resample(&gt.points, np)))?;
            map_terms.push((l, 1.0 / (np * n_gt) as f64));
            map_class(gt.kind)
        } else {
            MAP_NONE
        };
        let ce = tape.cross_entropy(logits, label)?;
        map_terms.push((ce, 1.0 / nm as f64));
    }
    let map = if map_terms.is_empty() { zero(tape) } else { tape.weighted_sum(&map_terms)? };
    Ok((PerceptionLosses { det, map }, pairs))
}

/// Per-agent winner-takes-all over the motion modes of matched detections,
/// averaged over matched agents.
pub fn motion_loss(tape: &mut Tape, f: &ForwardVars, scene: &Scene, pairs: &[(usize, usize)], modes: usize) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(zero(tape));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let gt: Trajectory = scene.agents[j].future().iter().map(|s| s.position).collect();
        let idx: Vec<usize> = (i * modes..(i + 1) * modes).collect();
        let preds = tape.rows(f.motion, &idx)?;
        let logits = tape.rows(f.motion_logits, &[i])?;
        let w = wta_loss(tape, preds, logits, &gt)?;
        terms.push((w.loss, 1.0 / pairs.len() as f64));
    }
    tape.weighted_sum(&terms)
}

/// Per-term hinge values of one plan, with the gradient of their sum
/// w.r.t. the flattened waypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintTerms {
    pub collision: f64,
    pub boundary: f64,
    pub direction: f64,
    pub grad: Vec<f64>,
}

impl ConstraintTerms {
    pub fn total(&self) -> f64 {
        self.collision + self.boundary + self.direction
    }
}

/// Segments shorter than this carry no heading.
const MIN_SEGMENT: f64 = 0.1;

/// Planning constraints on `plan` (waypoints in the ego frame, the ego at the
/// origin before the first one):
/// - collision: `max(0, 1-|dx|/lon) * max(0, 1-|dy|/lat)` against each
///   agent's waypoint at the same step;
/// - boundary: `max(0, margin - signed distance)` to the nearest boundary,
///   positive on the side of the nearest lane center;
/// - direction: `max(0, |heading error| - margin)` of each segment against
///   the tangent of the nearest lane center at its end point.
pub fn constraint_terms(
    plan: &[Vec2],
    agents: &[Trajectory],
    lanes: &[&[Vec2]],
    boundaries: &[&[Vec2]],
    margins: &ConstraintMargins,
) -> ConstraintTerms {
    let mut out = ConstraintTerms {
        collision: 0.0,
        boundary: 0.0,
        direction: 0.0,
        grad: vec![0.0; plan.len() * 2],
    };
    for (t, &p) in plan.iter().enumerate() {
        for agent in agents {
            let Some(&q) = agent.get(t) else { continue };
            let d = p - q;
            let hx = 1.0 - d.x.abs() / margins.longitudinal;
            let hy = 1.0 - d.y.abs() / margins.lateral;
            if hx > 0.0 && hy > 0.0 {
                out.collision += hx * hy;
                out.grad[2 * t] += -d.x.signum() / margins.longitudinal * hy;
                out.grad[2 * t + 1] += -d.y.signum() / margins.lateral * hx;
            }
        }

        let nearest_lane = nearest(p, lanes);
        if let (Some((db, b, _)), Some((_, c, _))) = (nearest(p, boundaries), nearest_lane) {
            let inward = c - b;
            let sign = if inward.dot(p - b) >= 0.0 { 1.0 } else { -1.0 };
            let h = margins.boundary - sign * db;
            if h > 0.0 {
                out.boundary += h;
                let dir = if db > 1e-12 { (p - b) * (1.0 / db) } else { unit(inward) };
                out.grad[2 * t] -= sign * dir.x;
                out.grad[2 * t + 1] -= sign * dir.y;
            }
        }

        let prev = if t == 0 { Vec2::ZERO } else { plan[t - 1] };
        let seg = p - prev;
        let len2 = seg.dot(seg);
        if let Some((_, _, tangent)) = nearest_lane {
            if len2.sqrt() >= MIN_SEGMENT {
                let err = wrap_angle(seg.angle() - tangent.angle());
                let h = err.abs() - margins.heading;
                if h > 0.0 {
                    out.direction += h;
                    // d angle / d seg = (-y, x) / |seg|^2
                    let g = Vec2::new(-seg.y, seg.x) * (err.signum() / len2);
                    out.grad[2 * t] += g.x;
                    out.grad[2 * t + 1] += g.y;
                    if t > 0 {
                        out.grad[2 * (t - 1)] -= g.x;
                        out.grad[2 * (t - 1) + 1] -= g.y;
                    }
                }
            }
        }
    }
    out
}

fn unit(v: Vec2) -> Vec2 {
    let n = v.norm();
    if n > 0.0 {
        v * (1.0 / n)
    } else {
        Vec2::ZERO
    }
}

/// Nearest point over several polylines: (distance, point, segment direction).
fn nearest(p: Vec2, lines: &[&[Vec2]]) -> Option<(f64, Vec2, Vec2)> {
    let mut best: Option<(f64, Vec2, Vec2)> = None;
    for pts in lines {
        if pts.len() < 2 {
            continue;
        }
        if let Some((d, seg, _, c)) = nearest_on_polyline(p, pts) {
            if best.is_none_or(|b| d < b.0) {
                best = Some((d, c, pts[seg + 1] - pts[seg]));
            }
        }
    }
    best
}

/// Most likely predicted trajectory of every detection whose objectness
/// clears `threshold`.
pub fn confident_agent_plans(tape: &Tape, f: &ForwardVars, modes: usize, threshold: f64) -> Vec<Trajectory> {
    let det = tape.value(f.det);
    let motion = tape.value(f.motion);
    let logits = tape.value(f.motion_logits);
    (0..det.shape()[0])
        .filter(|&i| sigmoid(det.row(i)[det_cols::OBJECTNESS]) > threshold)
        .map(|i| to_points(motion.row(i * modes + argmax(logits.row(i)))))
        .collect()
}

/// Constraint loss over the plans in `plans` (`[M, T*2]`), averaged over
/// rows. Agent predictions enter as constants.
pub fn constraint_loss(
    tape: &mut Tape,
    plans: Var,
    agents: &[Trajectory],
    scene: &Scene,
    margins: &ConstraintMargins,
) -> Result<Var> {
    let lanes: Vec<&[Vec2]> = scene.lane_centers().map(|p| p.points.as_slice()).collect();
    let bounds: Vec<&[Vec2]> = scene.boundaries().map(|p| p.points.as_slice()).collect();
    let pv = tape.value(plans).clone();
    let rows = pv.shape()[0];
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pv.len());
    for r in 0..rows {
        let c = constraint_terms(&to_points(pv.row(r)), agents, &lanes, &bounds, margins);
        value += c.total() / rows as f64;
        grad.extend(c.grad.iter().map(|g| g / rows as f64));
    }
    tape.external(plans, value, grad)
}

/// All seven terms of one scene plus their weighted total, on `tape`.
#[derive(Debug, Clone, Copy)]
pub struct SceneLoss {
    pub terms: [Var; 7],
    pub total: Var,
    pub label: usize,
}

/// Records every objective term for `scene`. `gate` bounds detection
/// matching distance; `kmeans` is the batch quantization loss, which enters
/// as a constant.
pub fn scene_loss(
    tape: &mut Tape,
    model: &Model,
    f: &ForwardVars,
    scene: &Scene,
    weights: &LossWeights,
    margins: &ConstraintMargins,
    gate: Option<f64>,
    kmeans: f64,
) -> Result<SceneLoss> {
    let m = model.config.m;
    let (perc, pairs) = detection_and_map_losses(tape, f, scene, gate)?;
    let mot = motion_loss(tape, f, scene, &pairs, m)?;
    let (intent, label) = intent_grounding_loss(tape, f.intent_logits, &scene.ego_gt, &model.anchors)?;
    let idx: Vec<usize> = (label * m..(label + 1) * m).collect();
    let plans = tape.rows(f.trajectories, &idx)?;
    let logits = tape.rows(f.mode_logits, &[label])?;
    let wta = wta_loss(tape, plans, logits, &scene.ego_gt)?.loss;
    let agents = confident_agent_plans(tape, f, m, margins.objectness);
    let constr = constraint_loss(tape, plans, &agents, scene, margins)?;
    let km = tape.constant(Tensor::scalar(kmeans));
    let terms = [perc.map, perc.det, mot, intent, wta, constr, km];
    let w = weights.as_array();
    let weighted: Vec<(Var, f64)> = terms.iter().copied().zip(w).collect();
    let total = tape.weighted_sum(&weighted)?;
    Ok(SceneLoss { terms, total, label })
}
