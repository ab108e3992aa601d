//! Query initialisation, BEV interaction, cross-task instance interaction
//! and the map, detection and motion decoders.

use rand::Rng;

use crate::scene::Command;
use crate::tensor::nn::{Builder, FeedForward, Linear, TransformerLayer};
use crate::tensor::{ParamId, Result, Tape, Tensor, Var};

/// Meters per unit of detection-center and map-point output.
pub const POSITION_SCALE: f64 = 10.0;
/// Meters per unit of detected box extent.
pub const EXTENT_SCALE: f64 = 2.0;
/// Meters per unit of per-step motion offset.
pub const STEP_SCALE: f64 = 2.0;
/// Map element classes: lane center, boundary, no element.
pub const MAP_CLASSES: usize = 3;
pub const AGENT_CLASSES: usize = 2;
/// center (2), heading, extent (2), class logits, objectness logit.
pub const DET_WIDTH: usize = 5 + AGENT_CLASSES + 1;

#[derive(Debug, Clone)]
pub struct EmbeddingBank {
    pub ego: ParamId,
    pub command: ParamId,
    /// Shared by ego planning and agent motion.
    pub mode: ParamId,
    pub intent_encoder: FeedForward,
}

impl EmbeddingBank {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, d: usize, modes: usize, t_future: usize) -> Self {
        b.scoped("embed", |b| {
            let ego = Tensor::normal(b.rng, &[1, d], 0.5);
            let cmd = Tensor::normal(b.rng, &[Command::ALL.len(), d], 0.5);
            let mode = Tensor::normal(b.rng, &[modes, d], 0.5);
            EmbeddingBank {
                ego: b.add("ego", ego),
                command: b.add("command", cmd),
                mode: b.add("mode", mode),
                intent_encoder: FeedForward::new(b, "intent", t_future * 2, d, d, 1.0),
            }
        })
    }
}

/// `E_ego + E_cmd[command] + intent_encoder(anchor_i)` per anchor row.
/// `anchors` is `[K, T*2]`, already scaled for the encoder.
pub fn init_ego_queries(tape: &mut Tape, bank: &EmbeddingBank, command: Command, anchors: Var) -> Result<Var> {
    let k = tape.shape(anchors)[0];
    let ego = tape.param(bank.ego);
    let ego = tape.rows(ego, &vec![0; k])?;
    let cmd = tape.param(bank.command);
    let cmd = tape.rows(cmd, &vec![command.index(); k])?;
    let intent = bank.intent_encoder.forward(tape, anchors)?;
    let q = tape.add(ego, cmd)?;
    tape.add(q, intent)
}

/// Cross-attention of `queries` over adapted BEV keys/values.
pub fn bev_interact(tape: &mut Tape, layers: &[TransformerLayer], queries: Var, keys: Var, values: Var) -> Result<Var> {
    let mut x = queries;
    for l in layers {
        x = l.forward(tape, x, keys, values)?;
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct InteractionLayers {
    /// Joint ego/motion self-attention.
    pub joint: Vec<TransformerLayer>,
    /// Cross-attention onto map instances.
    pub map_cross: Vec<TransformerLayer>,
    /// Self-attention after the map cross-attention.
    pub map_self: Vec<TransformerLayer>,
}

impl InteractionLayers {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, d: usize, heads: usize, blocks: usize) -> Self {
        let stack = |b: &mut Builder<'_, R>, name: &str| {
            (0..blocks)
                .map(|i| TransformerLayer::new(b, &format!("{name}{i}"), d, heads, 2 * d, true))
                .collect()
        };
        b.scoped("interact", |b| InteractionLayers {
            joint: stack(b, "joint"),
            map_cross: stack(b, "map_cross"),
            map_self: stack(b, "map_self"),
        })
    }
}

/// Stage outputs `[I, I', I'']` for the ego and motion token sets.
#[derive(Debug, Clone, Copy)]
pub struct Stages {
    pub ego: [Var; 3],
    pub motion: [Var; 3],
}

fn expand(tape: &mut Tape, x: Var, mode: Var, modes: usize) -> Result<Var> {
    let n = tape.shape(x)[0];
    let rep: Vec<usize> = (0..n * modes).map(|r| r / modes).collect();
    let mode_idx: Vec<usize> = (0..n * modes).map(|r| r % modes).collect();
    let x = tape.rows(x, &rep)?;
    let m = tape.rows(mode, &mode_idx)?;
    tape.add(x, m)
}

/// Mode expansion, joint ego/motion self-attention, then map distillation.
/// Ego tokens are anchor-major (`k * M + m`), motion tokens agent-major.
pub fn cross_task_interact(
    tape: &mut Tape,
    layers: &InteractionLayers,
    ego: Var,
    agents: Var,
    map: Var,
    bank: &EmbeddingBank,
    modes: usize,
) -> Result<Stages> {
    let mode = tape.param(bank.mode);
    let ego_i = expand(tape, ego, mode, modes)?;
    let n_ego = tape.shape(ego_i)[0];
    let n_agents = tape.shape(agents)[0];
    let mot_i = if n_agents > 0 {
        Some(expand(tape, agents, mode, modes)?)
    } else {
        None
    };
    let mut x = match mot_i {
        Some(m) => tape.concat(&[ego_i, m], 0)?,
        None => ego_i,
    };
    for l in &layers.joint {
        x = l.self_attend(tape, x)?;
    }
    let x1 = x;
    for (c, s) in layers.map_cross.iter().zip(&layers.map_self) {
        let h = c.forward(tape, x, map, map)?;
        x = s.self_attend(tape, h)?;
    }
    let x2 = x;
    let total = n_ego + n_agents * modes;
    let ego_rows: Vec<usize> = (0..n_ego).collect();
    let mot_rows: Vec<usize> = (n_ego..total).collect();
    let ego1 = tape.rows(x1, &ego_rows)?;
    let ego2 = tape.rows(x2, &ego_rows)?;
    let (mot0, mot1, mot2) = match mot_i {
        Some(m) => (m, tape.rows(x1, &mot_rows)?, tape.rows(x2, &mot_rows)?),
        None => {
            let d = tape.shape(ego)[1];
            let e = tape.constant(Tensor::zeros(&[0, d]));
            (e, e, e)
        }
    };
    Ok(Stages {
        ego: [ego_i, ego1, ego2],
        motion: [mot0, mot1, mot2],
    })
}

/// Concatenates the stage tensors feature-wise and projects back to `D`.
/// Disabled stages are replaced by zeros.
pub fn skip_merge(tape: &mut Tape, proj: &Linear, stages: [Var; 3], enabled: [bool; 3]) -> Result<Var> {
    let parts: Vec<Var> = stages
        .iter()
        .zip(enabled)
        .map(|(&s, on)| if on { s } else { tape.constant(Tensor::zeros(tape.shape(s))) })
        .collect();
    let cat = tape.concat(&parts, 1)?;
    proj.forward(tape, cat)
}

#[derive(Debug, Clone)]
pub struct MapHead {
    pub mlp: FeedForward,
    pub points: usize,
}

impl MapHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, d: usize, points: usize) -> Self {
        MapHead {
            mlp: FeedForward::new(b, "map_head", d, d, points * 2 + MAP_CLASSES, 0.5),
            points,
        }
    }

    /// Returns points `[Nm, Np*2]` (meters) and class logits `[Nm, 3]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let out = self.mlp.forward(tape, x)?;
        let pts = tape.slice_cols(out, 0, self.points * 2)?;
        let pts = tape.scale(pts, POSITION_SCALE);
        let logits = tape.slice_cols(out, self.points * 2, self.points * 2 + MAP_CLASSES)?;
        Ok((pts, logits))
    }
}

#[derive(Debug, Clone)]
pub struct DetHead {
    pub mlp: FeedForward,
}

/// Column layout of the scaled detection output.
pub mod det_cols {
    pub const CENTER: usize = 0;
    pub const HEADING: usize = 2;
    pub const EXTENT: usize = 3;
    pub const CLASS: usize = 5;
    pub const OBJECTNESS: usize = 7;
}

impl DetHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, d: usize) -> Self {
        DetHead {
            mlp: FeedForward::new(b, "det_head", d, d, DET_WIDTH, 0.5),
        }
    }

    /// `[Na, DET_WIDTH]`: centers in meters, heading in radians, extent in
    /// meters, class logits, objectness logit.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let out = self.mlp.forward(tape, x)?;
        let center = tape.slice_cols(out, 0, 2)?;
        let center = tape.scale(center, POSITION_SCALE);
        let heading = tape.slice_cols(out, 2, 3)?;
        let extent = tape.slice_cols(out, 3, 5)?;
        let extent = tape.scale(extent, EXTENT_SCALE);
        let rest = tape.slice_cols(out, 5, DET_WIDTH)?;
        tape.concat(&[center, heading, extent, rest], 1)
    }
}

#[derive(Debug, Clone)]
pub struct MotionHead {
    pub mlp: FeedForward,
    pub mode_logit: Linear,
    pub steps: usize,
}

/// `[T*2, T*2]` matrix turning per-step offsets into cumulative positions
/// when right-multiplied.
pub fn cumsum_matrix(t_future: usize) -> Tensor {
    let n = t_future * 2;
    let mut m = vec![0.0; n * n];
    for j in 0..t_future {
        for t in j..t_future {
            for c in 0..2 {
                m[(j * 2 + c) * n + t * 2 + c] = 1.0;
            }
        }
    }
    Tensor::new(&[n, n], m).expect("square")
}

impl MotionHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, d: usize, t_future: usize) -> Self {
        b.scoped("motion_head", |b| MotionHead {
            mlp: FeedForward::new(b, "offsets", d, d, t_future * 2, 0.5),
            mode_logit: Linear::new(b, "mode_logit", d, 1, 0.5),
            steps: t_future,
        })
    }

    /// `x: [Na*M, D]`, `origins: [Na, 2]` (the detected centers). Returns
    /// trajectories `[Na*M, T*2]` and logits `[Na, M]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, origins: Var, modes: usize) -> Result<(Var, Var)> {
        let rows = tape.shape(x)[0];
        let na = rows / modes.max(1);
        let steps = self.steps;
        let off = self.mlp.forward(tape, x)?;
        let off = tape.scale(off, STEP_SCALE);
        let cs = tape.constant(cumsum_matrix(steps));
        let rel = tape.matmul(off, cs)?;
        let per_row: Vec<usize> = (0..rows).map(|r| r / modes).collect();
        let o = tape.rows(origins, &per_row)?;
        let base = tape.concat(&vec![o; steps], 1)?;
        let trajs = tape.add(base, rel)?;
        let logits = self.mode_logit.forward(tape, x)?;
        let logits = tape.reshape(logits, &[na, modes])?;
        Ok((trajs, logits))
    }
}
