//! Ground-truth BEV rasterizer and the per-task BEV adapters.
//!
//! Channel order of a [`BevGrid`]:
//!
//! | index | content |
//! |-------|---------|
//! | 0 | vehicle occupancy |
//! | 1 | pedestrian occupancy |
//! | 2 | agent velocity x / 10 (m/s, ego frame) |
//! | 3 | agent velocity y / 10 |
//! | 4 | agent occupancy one step ago |
//! | 5 | agent occupancy two steps ago |
//! | 6 | lane-center raster, `max(0, 1 - d / cell)` |
//! | 7 | lane tangent cos, where the lane raster is non-zero |
//! | 8 | lane tangent sin |
//! | 9 | boundary raster |
//!
//! Rows run along x (longitudinal), columns along y (lateral). Cell `(r, c)`
//! covers `x in [x0 + r*cell_x, x0 + (r+1)*cell_x)` and likewise for y.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::geom::{nearest_on_polyline, OrientedBox, Vec2};
use crate::scene::{AgentClass, AgentTrack, MapPolyline, PolylineKind, Scene};
use crate::tensor::nn::Builder;
use crate::tensor::{ParamId, Result, Tape, Tensor, TensorError, Var};

pub const CHANNELS: usize = 10;
const VELOCITY_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevConfig {
    /// Cells along x.
    pub height: usize,
    /// Cells along y.
    pub width: usize,
    pub extent_x: f64,
    pub extent_y: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            height: 40,
            width: 20,
            extent_x: 60.0,
            extent_y: 30.0,
        }
    }
}

impl BevConfig {
    pub fn cell_x(&self) -> f64 {
        self.extent_x / self.height as f64
    }

    pub fn cell_y(&self) -> f64 {
        self.extent_y / self.width as f64
    }

    pub fn origin(&self) -> Vec2 {
        Vec2::new(-0.5 * self.extent_x, -0.5 * self.extent_y)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Cell containing `p`, if inside the extent.
    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let o = self.origin();
        let r = ((p.x - o.x) / self.cell_x()).floor();
        let c = ((p.y - o.y) / self.cell_y()).floor();
        let inside = p.x >= o.x && p.x <= -o.x && p.y >= o.y && p.y <= -o.y;
        // the far edges belong to the last cell
        inside.then(|| {
            (
                (r as usize).min(self.height - 1),
                (c as usize).min(self.width - 1),
            )
        })
    }

    pub fn cell_center(&self, r: usize, c: usize) -> Vec2 {
        let o = self.origin();
        Vec2::new(
            o.x + (r as f64 + 0.5) * self.cell_x(),
            o.y + (c as f64 + 0.5) * self.cell_y(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub config: BevConfig,
    /// `CHANNELS x height x width`.
    pub values: Tensor,
}

impl BevGrid {
    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn get(&self, ch: usize, r: usize, c: usize) -> f64 {
        let cfg = &self.config;
        self.values.data()[(ch * cfg.height + r) * cfg.width + c]
    }

    fn set(&mut self, ch: usize, r: usize, c: usize, v: f64) {
        let (h, w) = (self.config.height, self.config.width);
        self.values.data_mut()[(ch * h + r) * w + c] = v;
    }

    /// Cells in row-major order, one row per cell: `(H*W) x C`.
    pub fn cell_features(&self) -> Tensor {
        let n = self.config.cells();
        let src = self.values.data();
        let mut out = vec![0.0; n * CHANNELS];
        for ch in 0..CHANNELS {
            for i in 0..n {
                out[i * CHANNELS + ch] = src[ch * n + i];
            }
        }
        Tensor::new(&[n, CHANNELS], out).expect("shape matches")
    }
}

fn fill_box(grid: &mut BevGrid, b: &OrientedBox, center: Vec2, mut mark: impl FnMut(&mut BevGrid, usize, usize)) {
    let cfg = grid.config;
    let corners = b.corners();
    let lo = corners.iter().fold(Vec2::new(f64::INFINITY, f64::INFINITY), |m, p| {
        Vec2::new(m.x.min(p.x), m.y.min(p.y))
    });
    let hi = corners.iter().fold(Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |m, p| {
        Vec2::new(m.x.max(p.x), m.y.max(p.y))
    });
    let o = cfg.origin();
    let index = |v: f64, o: f64, cell: f64| ((v - o) / cell).floor() as isize;
    let r0 = index(lo.x, o.x, cfg.cell_x()).max(0);
    let r1 = index(hi.x, o.x, cfg.cell_x()).min(cfg.height as isize - 1);
    let c0 = index(lo.y, o.y, cfg.cell_y()).max(0);
    let c1 = index(hi.y, o.y, cfg.cell_y()).min(cfg.width as isize - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (r, c) = (r as usize, c as usize);
            if b.contains(cfg.cell_center(r, c)) {
                mark(grid, r, c);
            }
        }
    }
    if let Some((r, c)) = cfg.cell_of(center) {
        mark(grid, r, c);
    }
}

fn splat_agent(grid: &mut BevGrid, a: &AgentTrack) {
    let cur = a.current();
    let class_ch = match a.class {
        AgentClass::Vehicle => 0,
        AgentClass::Pedestrian => 1,
    };
    let vx = cur.speed * cur.heading.cos() / VELOCITY_SCALE;
    let vy = cur.speed * cur.heading.sin() / VELOCITY_SCALE;
    fill_box(grid, &a.footprint(cur), cur.position, |g, r, c| {
        g.set(class_ch, r, c, 1.0);
        g.set(2, r, c, vx);
        g.set(3, r, c, vy);
    });
    for (lag, ch) in [(1isize, 4usize), (2, 5)] {
        if let Some(s) = a.at(-lag) {
            fill_box(grid, &a.footprint(s), s.position, |g, r, c| g.set(ch, r, c, 1.0));
        }
    }
}

fn splat_lines(grid: &mut BevGrid, lines: &[&MapPolyline], raster_ch: usize, tangent: Option<(usize, usize)>) {
    let cfg = grid.config;
    let cell = cfg.cell_x().min(cfg.cell_y());
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let p = cfg.cell_center(r, c);
            let best = lines
                .iter()
                .filter_map(|l| nearest_on_polyline(p, &l.points).map(|n| (n, &l.points)))
                .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0));
            let Some(((d, seg, _, _), pts)) = best else {
                continue;
            };
            let v = (1.0 - d / cell).max(0.0);
            if v <= 0.0 {
                continue;
            }
            grid.set(raster_ch, r, c, v);
            if let Some((cc, cs)) = tangent {
                let dir = pts[seg + 1] - pts[seg];
                let n = dir.norm();
                if n > 0.0 {
                    grid.set(cc, r, c, dir.x / n);
                    grid.set(cs, r, c, dir.y / n);
                }
            }
        }
    }
}

/// Rasterizes the map and agents of a scene. The ego trajectory and ego
/// history are not read.
pub fn rasterize(scene: &Scene, config: &BevConfig) -> BevGrid {
    let mut grid = BevGrid {
        config: *config,
        values: Tensor::zeros(&[CHANNELS, config.height, config.width]),
    };
    let lanes: Vec<&MapPolyline> = scene.polylines.iter().filter(|p| p.kind == PolylineKind::LaneCenter).collect();
    let bounds: Vec<&MapPolyline> = scene.polylines.iter().filter(|p| p.kind == PolylineKind::Boundary).collect();
    splat_lines(&mut grid, &lanes, 6, Some((7, 8)));
    splat_lines(&mut grid, &bounds, 9, None);
    for a in &scene.agents {
        if config.cell_of(a.current().position).is_some() {
            splat_agent(&mut grid, a);
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Ego,
    Map,
    Agent,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Ego, Task::Map, Task::Agent];

    pub fn name(self) -> &'static str {
        match self {
            Task::Ego => "ego",
            Task::Map => "map",
            Task::Agent => "agent",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| TensorError::Invalid(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct Adapter {
    pub key_weight: ParamId,
    pub key_bias: ParamId,
    pub value_weight: ParamId,
    pub value_bias: ParamId,
}

/// Per-task raster-to-feature projections plus one learned positional table
/// shared by all tasks.
#[derive(Debug, Clone)]
pub struct AdapterBank {
    pub positional: ParamId,
    pub adapters: [Adapter; 3],
    pub d_model: usize,
}

/// 2D sinusoidal table: the first half of the features encodes the row,
/// the second half the column.
pub fn sinusoidal_table(height: usize, width: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = vec![0.0; height * width * d];
    let enc = |pos: f64, i: usize, dims: usize| {
        let freq = 1.0 / 100f64.powf((2 * (i / 2)) as f64 / dims.max(1) as f64);
        if i % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    };
    for r in 0..height {
        for c in 0..width {
            let row = &mut out[(r * width + c) * d..(r * width + c + 1) * d];
            for (i, v) in row.iter_mut().enumerate() {
                *v = if i < half {
                    enc(r as f64, i, half)
                } else {
                    enc(c as f64, i - half, d - half)
                };
            }
        }
    }
    Tensor::new(&[height * width, d], out).expect("shape matches")
}

impl AdapterBank {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: &BevConfig, d: usize) -> Self {
        b.scoped("bev", |b| {
            let positional = b.add("pos", sinusoidal_table(config.height, config.width, d));
            let adapters = Task::ALL.map(|t| {
                b.scoped(t.name(), |b| {
                    let kw = Tensor::xavier(b.rng, CHANNELS, d, 1.0);
                    let vw = Tensor::xavier(b.rng, CHANNELS, d, 1.0);
                    Adapter {
                        key_weight: b.add("key.weight", kw),
                        key_bias: b.add("key.bias", Tensor::zeros(&[d])),
                        value_weight: b.add("value.weight", vw),
                        value_bias: b.add("value.bias", Tensor::zeros(&[d])),
                    }
                })
            });
            AdapterBank {
                positional,
                adapters,
                d_model: d,
            }
        })
    }

    pub fn adapter(&self, task: Task) -> &Adapter {
        &self.adapters[task as usize]
    }

    /// Keys and values for `task` from cell features `(H*W) x C`. The
    /// positional table is added to both.
    pub fn adapt(&self, tape: &mut Tape, cells: Var, task: Task) -> Result<(Var, Var)> {
        let (n, c) = tape.value(cells).dims2()?;
        let pos = tape.param(self.positional);
        if c != CHANNELS || tape.shape(pos)[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "adapt",
                lhs: vec![n, c],
                rhs: tape.shape(pos).to_vec(),
            });
        }
        let a = self.adapter(task);
        let mut project = |w: ParamId, b: ParamId| -> Result<Var> {
            let w = tape.param(w);
            let b = tape.param(b);
            let y = tape.matmul(cells, w)?;
            let y = tape.add_row(y, b)?;
            tape.add(y, pos)
        };
        let k = project(a.key_weight, a.key_bias)?;
        let v = project(a.value_weight, a.value_bias)?;
        Ok((k, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, AgentState, Command, Extent, ScenarioKind, T_FUTURE};
    use crate::tensor::ParamStore;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_scene() -> Scene {
        Scene {
            id: "lane_keep-000000".into(),
            polylines: vec![],
            agents: vec![],
            ego_gt: vec![Vec2::ZERO; T_FUTURE],
            ego_history_world: vec![],
            command: Command::LaneKeep,
            dt: 0.5,
        }
    }

    fn vehicle_at(p: Vec2, heading: f64) -> AgentTrack {
        let s = AgentState {
            position: p,
            heading,
            speed: 0.0,
        };
        AgentTrack {
            states: vec![s; 11],
            extent: Extent {
                length: 0.5,
                width: 0.5,
            },
            class: AgentClass::Vehicle,
            history_len: 4,
            future_len: T_FUTURE,
        }
    }

    fn occupied(g: &BevGrid, ch: usize) -> Vec<(usize, usize)> {
        let cfg = g.config;
        let mut out = Vec::new();
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                if g.get(ch, r, c) != 0.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    #[test]
    fn empty_scene_has_no_occupancy() {
        let g = rasterize(&empty_scene(), &BevConfig::default());
        assert!(g.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_vehicle_marks_its_cell() {
        let cfg = BevConfig::default();
        let mut s = empty_scene();
        s.agents.push(vehicle_at(Vec2::new(10.0, 0.0), 0.0));
        let g = rasterize(&s, &cfg);
        // floor((10 + 30) / 1.5) = 26, floor((0 + 15) / 1.5) = 10
        assert_eq!(occupied(&g, 0), vec![(26, 10)]);
        assert_eq!(g.get(0, 26, 10), 1.0);
    }

    #[test]
    fn agents_outside_extent_are_dropped() {
        let mut s = empty_scene();
        s.agents.push(vehicle_at(Vec2::new(31.0, 0.0), 0.0));
        let g = rasterize(&s, &BevConfig::default());
        assert!(g.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ego_fields_do_not_leak() {
        let cfg = BevConfig::default();
        let mut s = generate_scene(4, ScenarioKind::LaneKeep);
        let a = rasterize(&s, &cfg);
        s.ego_gt = vec![Vec2::new(3.0, -1.0); T_FUTURE];
        s.ego_history_world.clear();
        assert_eq!(rasterize(&s, &cfg), a);
    }

    #[test]
    fn lane_channels_follow_the_map() {
        let cfg = BevConfig::default();
        let s = generate_scene(0, ScenarioKind::LaneKeep);
        let g = rasterize(&s, &cfg);
        let (r, c) = cfg.cell_of(Vec2::new(0.7, 0.7)).unwrap();
        assert!(g.get(6, r, c) > 0.0);
        assert!(g.get(7, r, c) > 0.9);
        assert!(!occupied(&g, 9).is_empty());
    }

    proptest! {
        #[test]
        fn one_cell_shift_moves_occupancy_by_one_cell(
            x in -20.0f64..20.0, y in -10.0f64..10.0, heading in -3.0f64..3.0,
        ) {
            let cfg = BevConfig::default();
            let mut a = empty_scene();
            a.agents.push(vehicle_at(Vec2::new(x, y), heading));
            a.agents[0].extent = Extent { length: 4.5, width: 1.9 };
            let mut b = a.clone();
            for st in &mut b.agents[0].states {
                st.position.x += cfg.cell_x();
            }
            let oa = occupied(&rasterize(&a, &cfg), 0);
            let ob = occupied(&rasterize(&b, &cfg), 0);
            let interior = |&(r, c): &(usize, usize)| r >= 2 && r + 3 < cfg.height && c >= 1 && c + 1 < cfg.width;
            let shifted: Vec<_> = oa.iter().filter(|p| interior(p)).map(|&(r, c)| (r + 1, c)).collect();
            let ob: Vec<_> = ob.into_iter().filter(|&(r, c)| r >= 1 && interior(&(r - 1, c))).collect();
            prop_assert_eq!(shifted, ob);
        }
    }

    fn bank() -> (ParamStore, AdapterBank) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = AdapterBank::new(&mut Builder::new(&mut store, &mut rng), &BevConfig::default(), 64);
        (store, bank)
    }

    #[test]
    fn zero_grid_keys_equal_positional_table() {
        let (store, bank) = bank();
        let grid = rasterize(&empty_scene(), &BevConfig::default());
        let mut tape = Tape::new(&store);
        let cells = tape.constant(grid.cell_features());
        let (k, _) = bank.adapt(&mut tape, cells, Task::Map).unwrap();
        assert_eq!(tape.shape(k), &[800, 64]);
        assert_eq!(tape.value(k), store.get(bank.positional));
    }

    #[test]
    fn tasks_use_disjoint_parameters() {
        let (store, bank) = bank();
        let grid = rasterize(&generate_scene(2, ScenarioKind::LaneKeep), &BevConfig::default());
        let mut tape = Tape::new(&store);
        let cells = tape.constant(grid.cell_features());
        let (ke, _) = bank.adapt(&mut tape, cells, Task::Ego).unwrap();
        let (km, _) = bank.adapt(&mut tape, cells, Task::Map).unwrap();
        assert_ne!(tape.value(ke), tape.value(km));
        assert_eq!("agent".parse::<Task>().unwrap(), Task::Agent);
        assert!("lidar".parse::<Task>().is_err());
    }
}
