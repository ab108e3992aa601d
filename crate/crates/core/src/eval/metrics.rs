use serde::{Deserialize, Serialize};

use crate::geom::{OrientedBox, Vec2};
use crate::scene::{Scene, EGO_LENGTH, EGO_WIDTH};

use super::EvalError;

/// Reporting horizons in seconds.
pub const HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];

/// Waypoint index of each horizon at `dt` spacing (1, 3, 5 at 2 Hz).
pub fn horizon_indices(dt: f64) -> [usize; 3] {
    HORIZONS.map(|h| ((h / dt).round() as usize).saturating_sub(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Errors {
    pub at: [f64; 3],
    pub avg: f64,
}

/// Euclidean error at the 1 s / 2 s / 3 s waypoints of 2 Hz trajectories.
pub fn l2_metric(plan: &[Vec2], gt: &[Vec2]) -> Result<L2Errors, EvalError> {
    if plan.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            plan: plan.len(),
            gt: gt.len(),
        });
    }
    let idx = horizon_indices(0.5);
    if gt.len() <= idx[2] {
        return Err(EvalError::LengthMismatch {
            plan: plan.len(),
            gt: idx[2] + 1,
        });
    }
    let at = idx.map(|i| plan[i].dist(gt[i]));
    Ok(L2Errors {
        at,
        avg: at.iter().sum::<f64>() / 3.0,
    })
}

/// Ego footprints along a plan that starts at the origin heading +x. Each
/// box takes its heading from the segment ending at its waypoint; a
/// near-zero segment keeps the previous heading.
pub fn ego_boxes(plan: &[Vec2]) -> Vec<OrientedBox> {
    let mut heading = 0.0;
    let mut prev = Vec2::ZERO;
    plan.iter()
        .map(|&p| {
            let d = p - prev;
            if d.norm() > 1e-3 {
                heading = d.angle();
            }
            prev = p;
            OrientedBox::new(p, heading, EGO_LENGTH, EGO_WIDTH)
        })
        .collect()
}

/// Cumulative collision flags at the three horizons.
pub fn collision_metric(plan: &[Vec2], scene: &Scene) -> [bool; 3] {
    let boxes = ego_boxes(plan);
    let mut hit = Vec::with_capacity(boxes.len());
    let mut any = false;
    for (t, ego) in boxes.iter().enumerate() {
        any = any
            || scene.agents.iter().any(|a| {
                a.future()
                    .get(t)
                    .is_some_and(|s| ego.overlaps(&a.footprint(s)))
            });
        hit.push(any);
    }
    horizon_indices(scene.dt).map(|i| hit.get(i).copied().unwrap_or(any))
}

pub fn static_plan(len: usize) -> Vec<Vec2> {
    vec![Vec2::ZERO; len]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, AgentClass, AgentState, AgentTrack, Extent, ScenarioKind};
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec2> {
        v.iter().map(|&(x, y)| Vec2::new(x, y)).collect()
    }

    #[test]
    fn l2_identity_and_offset() {
        let gt = pts(&[(1.0, 0.0), (2.0, 0.1), (3.0, 0.3), (4.0, 0.2), (5.0, 0.0), (6.0, -0.1)]);
        let e = l2_metric(&gt, &gt).unwrap();
        assert_eq!(e.at, [0.0; 3]);
        let shifted: Vec<Vec2> = gt.iter().map(|p| *p + Vec2::new(0.3, 0.4)).collect();
        let e = l2_metric(&shifted, &gt).unwrap();
        for v in e.at.iter().chain([&e.avg]) {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_rejects_length_mismatch() {
        let a = static_plan(6);
        let b = static_plan(5);
        assert!(matches!(l2_metric(&a, &b), Err(EvalError::LengthMismatch { plan: 6, gt: 5 })));
    }

    #[test]
    fn horizons_at_two_hertz() {
        assert_eq!(horizon_indices(0.5), [1, 3, 5]);
        assert_eq!(horizon_indices(0.25), [3, 7, 11]);
    }

    proptest! {
        #[test]
        fn l2_matches_direct_arithmetic(a in proptest::collection::vec((-30.0..30.0f64, -30.0..30.0f64), 6),
                                        b in proptest::collection::vec((-30.0..30.0f64, -30.0..30.0f64), 6)) {
            let (pa, pb) = (pts(&a), pts(&b));
            let e = l2_metric(&pa, &pb).unwrap();
            for (k, i) in [1usize, 3, 5].iter().enumerate() {
                let d = ((a[*i].0 - b[*i].0).powi(2) + (a[*i].1 - b[*i].1).powi(2)).sqrt();
                prop_assert!((e.at[k] - d).abs() < 1e-12);
            }
            prop_assert_eq!(e, l2_metric(&pb, &pa).unwrap());
        }
    }

    fn parked(at: Vec2) -> AgentTrack {
        let s = AgentState {
            position: at,
            heading: 0.0,
            speed: 0.0,
        };
        AgentTrack {
            states: vec![s; 11],
            extent: Extent {
                length: 4.5,
                width: 1.9,
            },
            class: AgentClass::Vehicle,
            history_len: 4,
            future_len: 6,
        }
    }

    #[test]
    fn no_agents_no_collision() {
        let mut scene = generate_scene(0, ScenarioKind::LaneKeep);
        scene.agents.clear();
        assert_eq!(collision_metric(&scene.ego_gt, &scene), [false; 3]);
    }

    #[test]
    fn concentric_box_collides_and_flags_are_cumulative() {
        let mut scene = generate_scene(0, ScenarioKind::LaneKeep);
        let plan = pts(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0), (4.0, 0.0), (5.0, 0.0), (6.0, 0.0)]);
        scene.agents = vec![parked(Vec2::new(4.0, 0.0))];
        // overlaps from the first waypoint on
        assert_eq!(collision_metric(&plan, &scene), [true; 3]);
        scene.agents = vec![parked(Vec2::new(10.0, 0.0))];
        assert_eq!(collision_metric(&plan, &scene), [false, false, true]);
    }

    #[test]
    fn expert_plans_do_not_collide() {
        for kind in ScenarioKind::ALL {
            for seed in 0..10 {
                let s = generate_scene(seed, kind);
                assert_eq!(collision_metric(&s.ego_gt, &s), [false; 3], "{}", s.id);
            }
        }
    }
}
