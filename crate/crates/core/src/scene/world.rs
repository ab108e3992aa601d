//! Scripted driving worlds. A `World` owns a road, an ego script and agent
//! scripts, and can be observed from any ego pose at any time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::path::{LateralProfile, Path, PathMotion, Phase, SpeedProfile};
use super::types::*;
use crate::geom::{wrap_angle, OrientedBox, Pose, Rect, Vec2};

pub const LANE_WIDTH: f64 = 3.5;
/// Ego arc length along the road at world time 0.
pub const EGO_START_S: f64 = 40.0;
/// Ego footprint used by metrics and the closed loop.
pub const EGO_LENGTH: f64 = 4.1;
pub const EGO_WIDTH: f64 = 1.8;

const SIDEWALK_OFFSET: f64 = 3.25;
const MAP_SPACING: f64 = 1.0;

/// Region around the ego that scenes describe (ego frame).
pub fn view_rect() -> Rect {
    Rect {
        min: Vec2::new(-30.0, -15.0),
        max: Vec2::new(30.0, 15.0),
    }
}

/// Something that moves along a reference path.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub path: Path,
    pub motion: PathMotion,
    pub extent: Extent,
    pub class: AgentClass,
}

impl Actor {
    pub fn state(&self, t: f64) -> AgentState {
        let (pose, speed) = self.motion.pose(&self.path, t);
        AgentState {
            position: pose.position,
            heading: pose.heading,
            speed,
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.motion.pose(&self.path, t).0
    }

    pub fn footprint(&self, t: f64) -> OrientedBox {
        let p = self.pose(t);
        OrientedBox::new(p.position, p.heading, self.extent.length, self.extent.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub kind: ScenarioKind,
    /// Centre line of the rightmost lane; the second lane lies one lane
    /// width to its left.
    pub road: Path,
    pub ego: Actor,
    pub agents: Vec<Actor>,
    pub command: Command,
    /// Snapshot time of the expert scene.
    pub t0: f64,
    /// Road arc length the closed loop must reach.
    pub goal_s: f64,
    pub dt: f64,
}

fn vehicle_extent(rng: &mut ChaCha8Rng) -> Extent {
    Extent {
        length: rng.gen_range(4.2..4.8),
        width: rng.gen_range(1.8..2.0),
    }
}

const PEDESTRIAN: Extent = Extent {
    length: 0.6,
    width: 0.6,
};

fn on_road(road: &Path, s: f64, v: f64, d: f64, extent: Extent) -> Actor {
    Actor {
        path: road.clone(),
        motion: PathMotion {
            profile: SpeedProfile::constant(s, v),
            lateral: LateralProfile {
                shifts: vec![(0.0, 1.0, d, d)],
            },
            direction: 1.0,
        },
        extent,
        class: AgentClass::Vehicle,
    }
}

fn pedestrian(road: &Path, rng: &mut ChaCha8Rng, s: f64) -> Actor {
    let d = if rng.gen_bool(0.5) {
        -SIDEWALK_OFFSET
    } else {
        LANE_WIDTH + SIDEWALK_OFFSET
    };
    let v = rng.gen_range(0.9..1.5);
    Actor {
        path: road.clone(),
        motion: PathMotion {
            profile: SpeedProfile::constant(s, v),
            lateral: LateralProfile {
                shifts: vec![(0.0, 1.0, d, d)],
            },
            direction: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        },
        extent: PEDESTRIAN,
        class: AgentClass::Pedestrian,
    }
}

/// Gently curving road: straights and arcs with |curvature| <= `kmax`.
fn gentle_road(rng: &mut ChaCha8Rng, kmax: f64) -> Path {
    let mut b = Path::builder(Pose::default()).straight(rng.gen_range(50.0..70.0));
    let mut len = 0.0;
    while len < 260.0 {
        let l = rng.gen_range(40.0..80.0);
        b = b.arc(rng.gen_range(-kmax..kmax), l);
        len += l;
        let l = rng.gen_range(10.0..40.0);
        b = b.straight(l);
        len += l;
    }
    b.build()
}

fn ego_on_road(road: &Path, v: f64, lateral: LateralProfile) -> Actor {
    Actor {
        path: road.clone(),
        motion: PathMotion {
            profile: SpeedProfile::constant(EGO_START_S, v),
            lateral,
            direction: 1.0,
        },
        extent: Extent {
            length: EGO_LENGTH,
            width: EGO_WIDTH,
        },
        class: AgentClass::Vehicle,
    }
}

fn shift(s0: f64, len: f64, from: f64, to: f64) -> (f64, f64, f64, f64) {
    (s0, len, from, to)
}

impl World {
    pub fn new(seed: u64, kind: ScenarioKind) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(kind as u64 + 1);
        let w = LANE_WIDTH;
        let mut agents = Vec::new();
        let mut command = Command::LaneKeep;
        let mut t0 = 0.0;
        let (road, ego, goal_s) = match kind {
            ScenarioKind::LaneKeep => {
                let road = gentle_road(&mut rng, 0.015);
                let v = rng.gen_range(7.0..9.0);
                let ego = ego_on_road(&road, v, LateralProfile::none());
                if rng.gen_bool(0.8) {
                    let gap = rng.gen_range(15.0..28.0);
                    let dv = rng.gen_range(0.5..2.0);
                    agents.push(on_road(&road, EGO_START_S + gap, v + dv, 0.0, vehicle_extent(&mut rng)));
                }
                if rng.gen_bool(0.5) {
                    let gap = rng.gen_range(10.0..20.0);
                    let dv = rng.gen_range(0.5..2.0);
                    agents.push(on_road(&road, EGO_START_S - gap, v - dv, 0.0, vehicle_extent(&mut rng)));
                }
                for _ in 0..rng.gen_range(0..=2) {
                    let s = EGO_START_S + rng.gen_range(-22.0..26.0);
                    let v2 = rng.gen_range(5.0..10.0);
                    agents.push(on_road(&road, s, v2, w, vehicle_extent(&mut rng)));
                }
                if rng.gen_bool(0.4) {
                    let s = EGO_START_S + rng.gen_range(-20.0..25.0);
                    agents.push(pedestrian(&road, &mut rng, s));
                }
                (road, ego, EGO_START_S + 8.0 * 12.0)
            }
            ScenarioKind::TurnLeft | ScenarioKind::TurnRight => {
                let sign: f64 = if kind == ScenarioKind::TurnLeft { 1.0 } else { -1.0 };
                let k = sign * rng.gen_range(1.0 / 14.0..1.0 / 9.0);
                let arc_start = EGO_START_S + rng.gen_range(12.0..24.0);
                let arc_len = std::f64::consts::FRAC_PI_2 / k.abs();
                let road = Path::builder(Pose::default())
                    .straight(arc_start)
                    .arc(k, arc_len)
                    .straight(150.0)
                    .build();
                let v = rng.gen_range(4.5..5.5);
                let ego = ego_on_road(&road, v, LateralProfile::none());
                let s_snap = arc_start + rng.gen_range(-12.0..0.3 * arc_len);
                t0 = (s_snap - EGO_START_S) / v;
                command = if sign > 0.0 {
                    Command::TurnLeft
                } else {
                    Command::TurnRight
                };
                if rng.gen_bool(0.6) {
                    // oncoming traffic in the other lane
                    let s = s_snap + rng.gen_range(8.0..30.0);
                    let mut a = on_road(&road, s, rng.gen_range(3.0..5.0), w, vehicle_extent(&mut rng));
                    a.motion.profile = SpeedProfile {
                        t_start: t0,
                        ..a.motion.profile
                    };
                    a.motion.direction = -1.0;
                    agents.push(a);
                }
                if rng.gen_bool(0.5) {
                    let s = s_snap + rng.gen_range(-15.0..15.0);
                    let mut p = pedestrian(&road, &mut rng, s);
                    p.motion.profile.t_start = t0;
                    agents.push(p);
                }
                (road, ego, arc_start + arc_len + 30.0)
            }
            ScenarioKind::LaneChange => {
                let road = gentle_road(&mut rng, 0.01);
                let v = rng.gen_range(7.0..9.0);
                let s_shift = EGO_START_S + rng.gen_range(0.0..5.0);
                let lateral = LateralProfile {
                    shifts: vec![shift(s_shift, v * 3.5, 0.0, w)],
                };
                let ego = ego_on_road(&road, v, lateral);
                let lead_v = rng.gen_range(2.5..4.0);
                agents.push(on_road(&road, EGO_START_S + 25.0, lead_v, 0.0, vehicle_extent(&mut rng)));
                if rng.gen_bool(0.5) {
                    let s = EGO_START_S + rng.gen_range(35.0..45.0);
                    agents.push(on_road(&road, s, v + rng.gen_range(1.0..2.0), w, vehicle_extent(&mut rng)));
                }
                if rng.gen_bool(0.4) {
                    let s = EGO_START_S + rng.gen_range(-20.0..25.0);
                    agents.push(pedestrian(&road, &mut rng, s));
                }
                (road, ego, EGO_START_S + 100.0)
            }
            ScenarioKind::StopResume => {
                let road = gentle_road(&mut rng, 0.01);
                let lead_extent = vehicle_extent(&mut rng);
                let bumper_gap = rng.gen_range(7.0..9.0);
                let lead_s = EGO_START_S + bumper_gap + 0.5 * (lead_extent.length + EGO_LENGTH);
                let t_go = rng.gen_range(1.0..3.0);
                let lead = Actor {
                    path: road.clone(),
                    motion: PathMotion {
                        profile: SpeedProfile {
                            t_start: t_go,
                            s_start: lead_s,
                            v_start: 0.0,
                            phases: vec![Phase {
                                duration: f64::INFINITY,
                                accel: 2.0,
                                target: 8.0,
                            }],
                        },
                        lateral: LateralProfile::none(),
                        direction: 1.0,
                    },
                    extent: lead_extent,
                    class: AgentClass::Vehicle,
                };
                agents.push(lead);
                let reaction = rng.gen_range(0.8..1.2);
                let mut ego = ego_on_road(&road, 0.0, LateralProfile::none());
                ego.motion.profile = SpeedProfile {
                    t_start: t_go + reaction,
                    s_start: EGO_START_S,
                    v_start: 0.0,
                    phases: vec![Phase {
                        duration: f64::INFINITY,
                        accel: rng.gen_range(1.8..2.5),
                        target: 7.0,
                    }],
                };
                t0 = t_go + rng.gen_range(0.0..0.3);
                if rng.gen_bool(0.5) {
                    let s = EGO_START_S + rng.gen_range(-15.0..25.0);
                    agents.push(on_road(&road, s, 0.0, w, vehicle_extent(&mut rng)));
                }
                (road, ego, EGO_START_S + 60.0)
            }
            ScenarioKind::Overtake => {
                let road = gentle_road(&mut rng, 0.008);
                let v = rng.gen_range(5.5..7.0);
                let s1 = EGO_START_S + rng.gen_range(15.0..25.0);
                let s_parked = s1 + rng.gen_range(28.0..32.0);
                let s2 = s_parked + rng.gen_range(8.0..12.0);
                let lateral = LateralProfile {
                    shifts: vec![shift(s1, 20.0, 0.0, w), shift(s2, 20.0, w, 0.0)],
                };
                let ego = ego_on_road(&road, v, lateral);
                agents.push(on_road(&road, s_parked, 0.0, 0.0, vehicle_extent(&mut rng)));
                if rng.gen_bool(0.4) {
                    let s = s_parked + rng.gen_range(-15.0..15.0);
                    agents.push(pedestrian(&road, &mut rng, s));
                }
                let s_snap = rng.gen_range(s1 - 12.0..s2);
                t0 = (s_snap - EGO_START_S) / v;
                (road, ego, s_parked + 25.0)
            }
            ScenarioKind::ThreePointTurn => {
                let road = gentle_road(&mut rng, 0.005);
                let v0 = rng.gen_range(2.0..3.0);
                let k = rng.gen_range(0.25..0.29);
                let start = road.pose_at(EGO_START_S);
                let ego = Actor {
                    path: Path::builder(start).arc(k, 20.0).build(),
                    motion: PathMotion {
                        profile: SpeedProfile {
                            t_start: 0.0,
                            s_start: 0.0,
                            v_start: v0,
                            phases: vec![Phase {
                                duration: 3.0,
                                accel: -v0 / 3.0,
                                target: 0.0,
                            }],
                        },
                        lateral: LateralProfile::none(),
                        direction: 1.0,
                    },
                    extent: Extent {
                        length: EGO_LENGTH,
                        width: EGO_WIDTH,
                    },
                    class: AgentClass::Vehicle,
                };
                command = Command::TurnLeft;
                if rng.gen_bool(0.4) {
                    let s = EGO_START_S + rng.gen_range(-20.0..25.0);
                    agents.push(pedestrian(&road, &mut rng, s));
                }
                (road, ego, EGO_START_S + 10.0)
            }
        };
        World {
            seed,
            kind,
            road,
            ego,
            agents,
            command,
            t0,
            goal_s,
            dt: DEFAULT_DT,
        }
    }

    /// The scripted-agent-free variant of this world.
    pub fn without_agents(mut self) -> World {
        self.agents.clear();
        self
    }

    pub fn scene_id(&self) -> String {
        format!("{}-{:06}", self.kind.name(), self.seed)
    }

    /// Expert ego pose in world coordinates.
    pub fn expert_pose(&self, t: f64) -> Pose {
        self.ego.pose(t)
    }

    pub fn agent_footprints(&self, t: f64) -> Vec<OrientedBox> {
        self.agents.iter().map(|a| a.footprint(t)).collect()
    }

    /// Road arc length of a world point.
    pub fn progress(&self, p: Vec2) -> f64 {
        self.road.project(p).0
    }

    /// The expert snapshot at `t0`.
    pub fn expert_scene(&self) -> Scene {
        let t = self.t0;
        let history: Vec<Pose> = (1..=AGENT_HISTORY)
            .rev()
            .map(|k| self.expert_pose(t - k as f64 * self.dt))
            .collect();
        self.observe(t, self.expert_pose(t), &history)
    }

    /// Scene seen from an arbitrary ego pose at time `t`. `ego_history`
    /// holds past world poses, oldest first. `ego_gt` is the expert's plan
    /// expressed relative to `ego`.
    pub fn observe(&self, t: f64, ego: Pose, ego_history: &[Pose]) -> Scene {
        let rect = view_rect();
        let to_state = |s: AgentState| {
            let p = ego.pose_to_local(&Pose::new(s.position, s.heading));
            AgentState {
                position: p.position,
                heading: wrap_angle(p.heading),
                speed: s.speed,
            }
        };

        let (s_ego, _) = self.road.project(ego.position);
        let offsets = [
            (0.0, PolylineKind::LaneCenter),
            (LANE_WIDTH, PolylineKind::LaneCenter),
            (-0.5 * LANE_WIDTH, PolylineKind::Boundary),
            (1.5 * LANE_WIDTH, PolylineKind::Boundary),
        ];
        let polylines = offsets
            .iter()
            .filter_map(|&(d, kind)| {
                let pts: Vec<Vec2> = self
                    .road
                    .sample_offset(s_ego - 50.0, s_ego + 50.0, d, MAP_SPACING)
                    .into_iter()
                    .map(|p| ego.to_local(p))
                    .collect();
                let points = rect.clip_polyline(&pts)?;
                Some(MapPolyline { points, kind })
            })
            .collect();

        let agents = self
            .agents
            .iter()
            .filter(|a| rect.contains(ego.to_local(a.pose(t).position)))
            .map(|a| AgentTrack {
                states: (-(AGENT_HISTORY as isize)..=T_FUTURE as isize)
                    .map(|k| to_state(a.state(t + k as f64 * self.dt)))
                    .collect(),
                extent: a.extent,
                class: a.class,
                history_len: AGENT_HISTORY,
                future_len: T_FUTURE,
            })
            .collect();

        let ego_gt = (1..=T_FUTURE)
            .map(|k| ego.to_local(self.expert_pose(t + k as f64 * self.dt).position))
            .collect();

        Scene {
            id: self.scene_id(),
            polylines,
            agents,
            ego_gt,
            ego_history_world: ego_history.iter().map(|p| ego.pose_to_local(p)).collect(),
            command: self.command,
            dt: self.dt,
        }
    }
}
