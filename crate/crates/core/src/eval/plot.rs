//! Static SVG top-down views of a scene and its plan.
//!
//! The ego frame's +x points up the page and +y to the left. Ground truth
//! is a solid black line with dots; the best mode of each of the top-k
//! intents is a solid colored line; the top-m modes of the chosen intent are
//! dashed.

use std::fmt::Write;

use crate::geom::Vec2;
use crate::planner::PlanOutput;
use crate::scene::{view_rect, AgentClass, PolylineKind, Scene};
use crate::tensor::softmax_slice;

const PX_PER_M: f64 = 10.0;
const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Canvas {
    min: Vec2,
    max: Vec2,
    body: String,
}

impl Canvas {
    fn px(&self, p: Vec2) -> (f64, f64) {
        ((self.max.y - p.y) * PX_PER_M, (self.max.x - p.x) * PX_PER_M)
    }

    fn polyline(&mut self, pts: &[Vec2], style: &str) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = self.px(p);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(self.body, r#"<polyline points="{}" fill="none" {style}/>"#, coords.join(" "));
    }

    fn polygon(&mut self, pts: &[Vec2], style: &str) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = self.px(p);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(self.body, r#"<polygon points="{}" {style}/>"#, coords.join(" "));
    }

    fn dot(&mut self, p: Vec2, r: f64, fill: &str) {
        let (x, y) = self.px(p);
        let _ = writeln!(self.body, r#"<circle cx="{x:.1}" cy="{y:.1}" r="{r}" fill="{fill}"/>"#);
    }

    fn finish(self, title: &str) -> String {
        let w = (self.max.y - self.min.y) * PX_PER_M;
        let h = (self.max.x - self.min.x) * PX_PER_M;
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             <title>{title}</title>\n{}</svg>\n",
            self.body
        )
    }
}

fn with_origin(traj: &[Vec2]) -> Vec<Vec2> {
    std::iter::once(Vec2::ZERO).chain(traj.iter().copied()).collect()
}

/// Indices of the `n` largest values, largest first, ties to the lower index.
fn top(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Renders `scene` with `plan`: the top `k` intents and the top `m` modes
/// of the most likely intent.
pub fn plan_svg(scene: &Scene, plan: &PlanOutput, k: usize, m: usize) -> String {
    let r = view_rect();
    let mut c = Canvas {
        min: r.min,
        max: r.max,
        body: String::new(),
    };
    for pl in &scene.polylines {
        let style = match pl.kind {
            PolylineKind::LaneCenter => r##"stroke="#999" stroke-width="1" stroke-dasharray="6 4""##,
            PolylineKind::Boundary => r##"stroke="#333" stroke-width="2""##,
        };
        c.polyline(&pl.points, style);
    }
    for a in &scene.agents {
        let fill = match a.class {
            AgentClass::Vehicle => r##"fill="#bbbbbb" stroke="#555""##,
            AgentClass::Pedestrian => r##"fill="#f2c14e" stroke="#555""##,
        };
        c.polygon(&a.footprint(a.current()).corners(), fill);
    }
    c.polygon(
        &crate::geom::OrientedBox::new(Vec2::ZERO, 0.0, crate::scene::EGO_LENGTH, crate::scene::EGO_WIDTH).corners(),
        r##"fill="#4a90d9" stroke="#1f4e79""##,
    );

    let intents = top(&softmax_slice(&plan.intent_logits), k);
    for (rank, &i) in intents.iter().enumerate() {
        let j = top(&plan.mode_logits[i], 1)[0];
        let color = PALETTE[rank % PALETTE.len()];
        c.polyline(
            &with_origin(&plan.trajectories[i][j]),
            &format!(r#"stroke="{color}" stroke-width="2.5" stroke-opacity="0.8""#),
        );
    }
    if let Some(&best) = intents.first() {
        for (rank, &j) in top(&plan.mode_logits[best], m).iter().enumerate() {
            let color = PALETTE[(rank + 2) % PALETTE.len()];
            c.polyline(
                &with_origin(&plan.trajectories[best][j]),
                &format!(r#"stroke="{color}" stroke-width="1.5" stroke-dasharray="4 3""#),
            );
        }
    }
    c.polyline(&with_origin(&scene.ego_gt), r#"stroke="black" stroke-width="2""#);
    for &p in &scene.ego_gt {
        c.dot(p, 2.5, "black");
    }
    c.finish(&scene.id)
}
