use serde::{Deserialize, Serialize};

use crate::geom::{menger_curvature, OrientedBox, Pose, Vec2};

/// Planning horizon in waypoints.
pub const T_FUTURE: usize = 6;
/// Past agent states carried by every track.
pub const AGENT_HISTORY: usize = 4;
/// Waypoint spacing in seconds.
pub const DEFAULT_DT: f64 = 0.5;

/// Feasibility bounds for expert and executed ego motion.
pub const MAX_CURVATURE: f64 = 0.3;
pub const MAX_ACCEL: f64 = 4.0;

pub type Trajectory = Vec<Vec2>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    LaneKeep,
    TurnLeft,
    TurnRight,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::LaneKeep, Command::TurnLeft, Command::TurnRight];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    LaneKeep,
    TurnLeft,
    TurnRight,
    LaneChange,
    StopResume,
    Overtake,
    ThreePointTurn,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::LaneKeep,
        ScenarioKind::TurnLeft,
        ScenarioKind::TurnRight,
        ScenarioKind::LaneChange,
        ScenarioKind::StopResume,
        ScenarioKind::Overtake,
        ScenarioKind::ThreePointTurn,
    ];

    /// Families never seen during training.
    pub fn is_zero_shot(self) -> bool {
        self == ScenarioKind::ThreePointTurn
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::LaneKeep => "lane_keep",
            ScenarioKind::TurnLeft => "turn_left",
            ScenarioKind::TurnRight => "turn_right",
            ScenarioKind::LaneChange => "lane_change",
            ScenarioKind::StopResume => "stop_resume",
            ScenarioKind::Overtake => "overtake",
            ScenarioKind::ThreePointTurn => "three_point_turn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    LaneCenter,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapPolyline {
    pub points: Vec<Vec2>,
    pub kind: PolylineKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
}

impl AgentClass {
    pub const ALL: [AgentClass; 2] = [AgentClass::Vehicle, AgentClass::Pedestrian];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extent {
    pub length: f64,
    pub width: f64,
}

/// One agent's states at `dt` spacing: `history_len` past states, the
/// current state, then `future_len` future states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTrack {
    pub states: Vec<AgentState>,
    pub extent: Extent,
    pub class: AgentClass,
    pub history_len: usize,
    pub future_len: usize,
}

impl AgentTrack {
    pub fn current(&self) -> &AgentState {
        &self.states[self.history_len]
    }

    /// State `k` steps from now (negative = past).
    pub fn at(&self, k: isize) -> Option<&AgentState> {
        let i = self.history_len as isize + k;
        (i >= 0).then(|| self.states.get(i as usize)).flatten()
    }

    pub fn future(&self) -> &[AgentState] {
        &self.states[self.history_len + 1..]
    }

    pub fn footprint(&self, state: &AgentState) -> OrientedBox {
        OrientedBox::new(state.position, state.heading, self.extent.length, self.extent.width)
    }
}

/// A driving snapshot in the ego frame at t = 0 (ego at origin, heading +x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: String,
    pub polylines: Vec<MapPolyline>,
    pub agents: Vec<AgentTrack>,
    pub ego_gt: Trajectory,
    /// Past ego poses in the scene frame. Only the world uses these.
    pub ego_history_world: Vec<Pose>,
    pub command: Command,
    pub dt: f64,
}

impl Scene {
    /// Scenario family, recovered from the `<kind>-<seed>` id.
    pub fn kind(&self) -> Option<ScenarioKind> {
        let (kind, _) = self.id.rsplit_once('-')?;
        ScenarioKind::parse(kind)
    }

    pub fn lane_centers(&self) -> impl Iterator<Item = &MapPolyline> {
        self.polylines.iter().filter(|p| p.kind == PolylineKind::LaneCenter)
    }

    pub fn boundaries(&self) -> impl Iterator<Item = &MapPolyline> {
        self.polylines.iter().filter(|p| p.kind == PolylineKind::Boundary)
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<(), String> {
        if self.ego_gt.len() != T_FUTURE {
            return Err(format!("ego_gt has {} waypoints, expected {T_FUTURE}", self.ego_gt.len()));
        }
        if !(self.dt > 0.0) {
            return Err("dt must be positive".into());
        }
        for (i, p) in self.polylines.iter().enumerate() {
            if p.points.len() < 2 {
                return Err(format!("polyline {i} has fewer than 2 points"));
            }
            if p.points.windows(2).any(|w| w[0] == w[1]) {
                return Err(format!("polyline {i} repeats a point"));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.future_len != T_FUTURE || a.states.len() != a.history_len + 1 + a.future_len {
                return Err(format!("agent {i} has inconsistent track length"));
            }
            if a.states.iter().any(|s| s.heading.abs() > std::f64::consts::PI || s.speed < 0.0) {
                return Err(format!("agent {i} has an out-of-range state"));
            }
        }
        Ok(())
    }
}

/// Checks curvature and acceleration of a trajectory that starts at the
/// origin. Returns the worst (curvature, |accel|) seen.
pub fn trajectory_feasibility(traj: &[Vec2], dt: f64) -> (f64, f64) {
    let pts: Vec<Vec2> = std::iter::once(Vec2::ZERO).chain(traj.iter().copied()).collect();
    let mut worst_k: f64 = 0.0;
    for w in pts.windows(3) {
        // curvature is undefined while (nearly) stationary
        if w[0].dist(w[1]) > 0.05 && w[1].dist(w[2]) > 0.05 {
            worst_k = worst_k.max(menger_curvature(w[0], w[1], w[2]));
        }
    }
    let speeds: Vec<f64> = pts.windows(2).map(|w| w[0].dist(w[1]) / dt).collect();
    let worst_a = speeds
        .windows(2)
        .map(|w| ((w[1] - w[0]) / dt).abs())
        .fold(0.0, f64::max);
    (worst_k, worst_a)
}
