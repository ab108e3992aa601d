use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{OrientedBox, Pose, Vec2};
use crate::model::Model;
use crate::scene::{ScenarioKind, World, AGENT_HISTORY, EGO_LENGTH, EGO_WIDTH, MAX_ACCEL, MAX_CURVATURE};
use crate::tensor::Result;

use super::inference::{infer_input, InferenceMode};

/// Simulation substeps per planning step.
pub const SUBSTEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub scenario: ScenarioKind,
    pub seed: u64,
    /// Fraction of the route (road arc length from start to goal) covered.
    pub completion: f64,
    /// Agents hit before the rollout stopped.
    pub collisions: usize,
    pub success: bool,
    pub steps: usize,
}

/// One executed control, held for a substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control {
    pub accel: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub report: ClosedLoopReport,
    /// Ego poses at every substep, starting with the initial pose.
    pub poses: Vec<Pose>,
    pub controls: Vec<Control>,
}

/// Unicycle ego with speed and the clamps applied to every command.
#[derive(Debug, Clone, Copy)]
struct Ego {
    pose: Pose,
    speed: f64,
}

impl Ego {
    fn advance(&mut self, accel: f64, curvature: f64, dt: f64) -> Control {
        let a = accel.clamp(-MAX_ACCEL, MAX_ACCEL);
        let k = curvature.clamp(-MAX_CURVATURE, MAX_CURVATURE);
        // a braking command never reverses the car
        let a = a.max(-self.speed / dt);
        let v0 = self.speed;
        let v1 = v0 + a * dt;
        let ds = 0.5 * (v0 + v1) * dt;
        let h0 = self.pose.heading;
        let h1 = h0 + k * ds;
        let mid = 0.5 * (h0 + h1);
        self.pose = Pose::new(self.pose.position + Vec2::from_angle(mid) * ds, h1);
        self.speed = v1;
        Control { accel: a, curvature: k }
    }

    fn footprint(&self) -> OrientedBox {
        OrientedBox::new(self.pose.position, self.pose.heading, EGO_LENGTH, EGO_WIDTH)
    }
}

/// Acceleration that covers `dist` in `horizon` seconds from `speed`.
fn accel_to_reach(dist: f64, speed: f64, horizon: f64) -> f64 {
    2.0 * (dist - speed * horizon) / (horizon * horizon)
}

/// Pure-pursuit curvature toward a point in the ego frame.
fn pursuit_curvature(target: Vec2) -> f64 {
    let d2 = target.dot(target);
    if d2 < 1e-6 {
        0.0
    } else {
        2.0 * target.y / d2
    }
}

pub fn closed_loop_rollout(
    model: &Model,
    scenario: ScenarioKind,
    seed: u64,
    mode: &InferenceMode,
    budget_steps: usize,
) -> Result<ClosedLoopReport> {
    let world = World::new(seed, scenario);
    Ok(rollout_world(model, &world, mode, budget_steps)?.report)
}

/// Drives the ego through `world` from its start at 2 Hz: plan from the
/// rebuilt scene, then track the first waypoint for one planning step
/// under the kinematic clamps. Stops at the goal, a collision or the
/// budget.
pub fn rollout_world(model: &Model, world: &World, mode: &InferenceMode, budget_steps: usize) -> Result<Rollout> {
    let dt = world.dt;
    let sub = dt / SUBSTEPS as f64;
    let start = world.ego.state(0.0);
    let mut ego = Ego {
        pose: world.expert_pose(0.0),
        speed: start.speed,
    };
    let mut history: Vec<Pose> = (1..=AGENT_HISTORY)
        .rev()
        .map(|k| world.expert_pose(-(k as f64) * dt))
        .collect();
    let s0 = world.progress(ego.pose.position);
    let route = world.goal_s - s0;
    let completion = |p: Vec2| ((world.progress(p) - s0) / route).clamp(0.0, 1.0);
    let mut rng = mode.rng();
    let mut poses = vec![ego.pose];
    let mut controls = Vec::new();
    let mut collisions = 0;
    let mut steps = 0;
    let mut t = 0.0;
    while steps < budget_steps && collisions == 0 && completion(ego.pose.position) < 1.0 {
        let scene = world.observe(t, ego.pose, &history);
        let plan = infer_input(model, &model.input(&scene), mode, &mut rng)?;
        let target_local = plan.trajectory[0];
        let target = ego.pose.to_world(target_local);
        let dist = if target_local.x > 0.0 { target_local.norm() } else { 0.0 };
        let accel = accel_to_reach(dist, ego.speed, dt);
        for _ in 0..SUBSTEPS {
            let rel = ego.pose.to_local(target);
            controls.push(ego.advance(accel, pursuit_curvature(rel), sub));
            poses.push(ego.pose);
            t += sub;
            let me = ego.footprint();
            collisions = world.agent_footprints(t).iter().filter(|b| me.overlaps(b)).count();
            if collisions > 0 {
                break;
            }
        }
        history.remove(0);
        history.push(ego.pose);
        steps += 1;
    }
    let completion = completion(ego.pose.position);
    Ok(Rollout {
        report: ClosedLoopReport {
            scenario: world.kind,
            seed: world.seed,
            completion,
            collisions,
            success: completion >= 1.0 && collisions == 0,
            steps,
        },
        poses,
        controls,
    })
}

/// `n` rollouts of `world`, each with a fresh seed drawn from `rng`.
pub fn sampled_rollouts(
    model: &Model,
    world: &World,
    mode: &InferenceMode,
    n: usize,
    budget_steps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ClosedLoopReport>> {
    (0..n)
        .map(|_| {
            let m = InferenceMode { seed: rng.gen(), ..*mode };
            Ok(rollout_world(model, world, &m, budget_steps)?.report)
        })
        .collect()
}
