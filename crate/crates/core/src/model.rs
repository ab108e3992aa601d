//! The full network: BEV adapters, perception pipeline and planner heads,
//! plus checkpoint conversion.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bev::{rasterize, AdapterBank, BevConfig, Task};
use crate::geom::Vec2;
use crate::perception::*;
use crate::planner::*;
use crate::scene::{Command, Extent, Scene, Trajectory};
use crate::tensor::nn::{Builder, Linear, TransformerLayer};
use crate::tensor::{AdamW, Checkpoint, CheckpointError, NamedTensor, ParamId, ParamStore, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Intent anchors.
    pub k: usize,
    /// Trajectory modes, shared by planning and motion.
    pub m: usize,
    pub agent_queries: usize,
    pub map_queries: usize,
    pub map_points: usize,
    /// Transformer layers per interaction stage.
    pub blocks: usize,
    pub t_future: usize,
    pub bev: BevConfig,
    /// Which of the stages `[I, I', I'']` reach the heads.
    pub skip_stages: [bool; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            k: 8,
            m: 4,
            agent_queries: 6,
            map_queries: 4,
            map_points: 10,
            blocks: 1,
            t_future: crate::scene::T_FUTURE,
            bev: BevConfig::default(),
            skip_stages: [true; 3],
        }
    }
}

impl ModelConfig {
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("model.{k}"), v);
        };
        put("d_model", self.d_model.to_string());
        put("heads", self.heads.to_string());
        put("k", self.k.to_string());
        put("m", self.m.to_string());
        put("agent_queries", self.agent_queries.to_string());
        put("map_queries", self.map_queries.to_string());
        put("map_points", self.map_points.to_string());
        put("blocks", self.blocks.to_string());
        put("t_future", self.t_future.to_string());
        put("bev_height", self.bev.height.to_string());
        put("bev_width", self.bev.width.to_string());
        put("bev_extent_x", self.bev.extent_x.to_string());
        put("bev_extent_y", self.bev.extent_y.to_string());
        put(
            "skip_stages",
            self.skip_stages.iter().map(|b| if *b { '1' } else { '0' }).collect(),
        );
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> std::result::Result<Self, CheckpointError> {
        fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, k: &str) -> std::result::Result<T, CheckpointError> {
            let key = format!("model.{k}");
            meta.get(&key)
                .ok_or_else(|| CheckpointError::Invalid(format!("missing metadata `{key}`")))?
                .parse()
                .map_err(|_| CheckpointError::Invalid(format!("bad metadata `{key}`")))
        }
        let skip: String = get(meta, "skip_stages")?;
        let bits: Vec<bool> = skip.chars().map(|c| c == '1').collect();
        let skip_stages: [bool; 3] = bits
            .try_into()
            .map_err(|_| CheckpointError::Invalid("bad metadata `model.skip_stages`".into()))?;
        Ok(ModelConfig {
            d_model: get(meta, "d_model")?,
            heads: get(meta, "heads")?,
            k: get(meta, "k")?,
            m: get(meta, "m")?,
            agent_queries: get(meta, "agent_queries")?,
            map_queries: get(meta, "map_queries")?,
            map_points: get(meta, "map_points")?,
            blocks: get(meta, "blocks")?,
            t_future: get(meta, "t_future")?,
            bev: BevConfig {
                height: get(meta, "bev_height")?,
                width: get(meta, "bev_width")?,
                extent_x: get(meta, "bev_extent_x")?,
                extent_y: get(meta, "bev_extent_y")?,
            },
            skip_stages,
        })
    }
}

/// Parameter ids of every submodule.
#[derive(Debug, Clone)]
pub struct Layout {
    pub adapters: AdapterBank,
    pub embed: EmbeddingBank,
    pub agent_queries: ParamId,
    pub map_queries: ParamId,
    /// Indexed by [`Task`].
    pub bev_layers: [Vec<TransformerLayer>; 3],
    pub interact: InteractionLayers,
    pub skip_ego: Linear,
    pub skip_motion: Linear,
    pub skip_agent: Linear,
    pub map_head: MapHead,
    pub det_head: DetHead,
    pub motion_head: MotionHead,
    pub intent_head: IntentHead,
    pub traj_head: TrajectoryHead,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
    pub anchors: IntentAnchorSet,
}

/// What the network sees of a scene: the raster and the command.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    /// `(H*W) x C` cell features.
    pub cells: Tensor,
    pub command: Command,
}

impl SceneInput {
    pub fn new(scene: &Scene, bev: &BevConfig) -> Self {
        SceneInput {
            cells: rasterize(scene, bev).cell_features(),
            command: scene.command,
        }
    }
}

/// The tensors each head consumed, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct HeadInputs {
    pub ego: Var,
    pub motion: Var,
    pub agent: Var,
    pub map: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[Nm, Np*2]`
    pub map_points: Var,
    /// `[Nm, 3]`
    pub map_logits: Var,
    /// `[Na, DET_WIDTH]`
    pub det: Var,
    /// `[Na*M, T*2]`
    pub motion: Var,
    /// `[Na, M]`
    pub motion_logits: Var,
    /// `[K]`
    pub intent_logits: Var,
    /// `[K*M, T*2]`
    pub trajectories: Var,
    /// `[K, M]`
    pub mode_logits: Var,
    pub head_inputs: HeadInputs,
    pub stages: Stages,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub center: Vec2,
    pub heading: f64,
    pub extent: Extent,
    pub class_logits: Vec<f64>,
    /// Probability in (0, 1).
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapElement {
    pub points: Vec<Vec2>,
    pub class_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentMotion {
    pub trajectories: Vec<Trajectory>,
    pub mode_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    pub map: Vec<MapElement>,
    pub motion: Vec<AgentMotion>,
    pub plan: PlanOutput,
}

fn to_points(row: &[f64]) -> Vec<Vec2> {
    row.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const ANCHORS_NAME: &str = "planner.anchors";
const COUNTS_NAME: &str = "planner.anchor_counts";

impl Model {
    pub fn new(config: ModelConfig, anchors: IntentAnchorSet, seed: u64) -> Model {
        assert_eq!(anchors.k(), config.k, "anchor count must equal K");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let layout = {
            let mut b = Builder::new(&mut store, &mut rng);
            let adapters = AdapterBank::new(&mut b, &config.bev, d);
            let embed = EmbeddingBank::new(&mut b, d, config.m, config.t_future);
            let aq = Tensor::normal(b.rng, &[config.agent_queries, d], 0.5);
            let mq = Tensor::normal(b.rng, &[config.map_queries, d], 0.5);
            let agent_queries = b.add("queries.agent", aq);
            let map_queries = b.add("queries.map", mq);
            let bev_layers = Task::ALL.map(|t| {
                (0..config.blocks)
                    .map(|i| TransformerLayer::new(&mut b, &format!("bev_attn.{t}{i}"), d, config.heads, 2 * d, false))
                    .collect()
            });
            let interact = InteractionLayers::new(&mut b, d, config.heads, config.blocks);
            Layout {
                adapters,
                embed,
                agent_queries,
                map_queries,
                bev_layers,
                interact,
                skip_ego: Linear::new(&mut b, "skip.ego", 3 * d, d, 1.0),
                skip_motion: Linear::new(&mut b, "skip.motion", 3 * d, d, 1.0),
                skip_agent: Linear::new(&mut b, "skip.agent", 3 * d, d, 1.0),
                map_head: MapHead::new(&mut b, d, config.map_points),
                det_head: DetHead::new(&mut b, d),
                motion_head: MotionHead::new(&mut b, d, config.t_future),
                intent_head: IntentHead::new(&mut b, d),
                traj_head: TrajectoryHead::new(&mut b, d, config.t_future),
            }
        };
        Model {
            config,
            store,
            layout,
            anchors,
        }
    }

    pub fn input(&self, scene: &Scene) -> SceneInput {
        SceneInput::new(scene, &self.config.bev)
    }

    /// Records the full forward pass on `tape`, which must borrow
    /// `self.store`.
    pub fn forward(&self, tape: &mut Tape, input: &SceneInput) -> Result<ForwardVars> {
        let l = &self.layout;
        let m = self.config.m;
        let cells = tape.constant(input.cells.clone());
        let mut kv = Vec::with_capacity(3);
        for task in Task::ALL {
            kv.push(l.adapters.adapt(tape, cells, task)?);
        }
        let anchors_in = tape.constant(self.anchors.to_tensor(1.0 / ANCHOR_INPUT_SCALE));
        let anchors_m = tape.constant(self.anchors.to_tensor(1.0));

        let q_ego = init_ego_queries(tape, &l.embed, input.command, anchors_in)?;
        let q_agent = tape.param(l.agent_queries);
        let q_map = tape.param(l.map_queries);
        let (ke, ve) = kv[Task::Ego as usize];
        let (km, vm) = kv[Task::Map as usize];
        let (ka, va) = kv[Task::Agent as usize];
        let i_ego = bev_interact(tape, &l.bev_layers[Task::Ego as usize], q_ego, ke, ve)?;
        let i_map = bev_interact(tape, &l.bev_layers[Task::Map as usize], q_map, km, vm)?;
        let i_agent = bev_interact(tape, &l.bev_layers[Task::Agent as usize], q_agent, ka, va)?;

        let stages = cross_task_interact(tape, &l.interact, i_ego, i_agent, i_map, &l.embed, m)?;
        let skip = self.config.skip_stages;
        let ego_feat = skip_merge(tape, &l.skip_ego, stages.ego, skip)?;
        let mot_feat = skip_merge(tape, &l.skip_motion, stages.motion, skip)?;
        let mot1 = tape.mean_groups(stages.motion[1], m)?;
        let mot2 = tape.mean_groups(stages.motion[2], m)?;
        let agent_feat = skip_merge(tape, &l.skip_agent, [i_agent, mot1, mot2], skip)?;

        let (map_points, map_logits) = l.map_head.forward(tape, i_map)?;
        let det = l.det_head.forward(tape, agent_feat)?;
        let origins = tape.slice_cols(det, det_cols::CENTER, det_cols::CENTER + 2)?;
        let (motion, motion_logits) = l.motion_head.forward(tape, mot_feat, origins, m)?;
        let intent_logits = l.intent_head.forward(tape, ego_feat, m)?;
        let (trajectories, mode_logits) = l.traj_head.forward(tape, ego_feat, anchors_m, m)?;
        Ok(ForwardVars {
            map_points,
            map_logits,
            det,
            motion,
            motion_logits,
            intent_logits,
            trajectories,
            mode_logits,
            head_inputs: HeadInputs {
                ego: ego_feat,
                motion: mot_feat,
                agent: agent_feat,
                map: i_map,
            },
            stages,
        })
    }

    /// Reads numeric outputs off a recorded forward pass.
    pub fn read(&self, tape: &Tape, f: &ForwardVars) -> Prediction {
        let (k, m, t) = (self.config.k, self.config.m, self.config.t_future);
        let det = tape.value(f.det);
        let detections = (0..det.shape()[0])
            .map(|r| {
                let row = det.row(r);
                Detection {
                    center: Vec2::new(row[det_cols::CENTER], row[det_cols::CENTER + 1]),
                    heading: row[det_cols::HEADING],
                    extent: Extent {
                        length: row[det_cols::EXTENT],
                        width: row[det_cols::EXTENT + 1],
                    },
                    class_logits: row[det_cols::CLASS..det_cols::OBJECTNESS].to_vec(),
                    objectness: sigmoid(row[det_cols::OBJECTNESS]),
                }
            })
            .collect();
        let pts = tape.value(f.map_points);
        let ml = tape.value(f.map_logits);
        let map = (0..pts.shape()[0])
            .map(|r| MapElement {
                points: to_points(pts.row(r)),
                class_logits: ml.row(r).to_vec(),
            })
            .collect();
        let mo = tape.value(f.motion);
        let mol = tape.value(f.motion_logits);
        let motion = (0..mol.shape()[0])
            .map(|a| AgentMotion {
                trajectories: (0..m).map(|j| to_points(mo.row(a * m + j))).collect(),
                mode_logits: mol.row(a).to_vec(),
            })
            .collect();
        let tr = tape.value(f.trajectories);
        let mdl = tape.value(f.mode_logits);
        debug_assert_eq!(tr.shape(), &[k * m, t * 2]);
        let plan = PlanOutput {
            intent_logits: tape.value(f.intent_logits).data().to_vec(),
            trajectories: (0..k)
                .map(|i| (0..m).map(|j| to_points(tr.row(i * m + j))).collect())
                .collect(),
            mode_logits: (0..k).map(|i| mdl.row(i).to_vec()).collect(),
        };
        Prediction {
            detections,
            map,
            motion,
            plan,
        }
    }

    pub fn predict_input(&self, input: &SceneInput) -> Result<Prediction> {
        let mut tape = Tape::new(&self.store);
        let f = self.forward(&mut tape, input)?;
        Ok(self.read(&tape, &f))
    }

    pub fn predict(&self, scene: &Scene) -> Result<Prediction> {
        self.predict_input(&self.input(scene))
    }

    /// Zeroes the trajectory-head residual so plans equal their anchors.
    pub fn zero_trajectory_residual(&mut self) {
        for id in self.layout.traj_head.mlp.down.params() {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>, optimizer: Option<&AdamW>) -> Checkpoint {
        let mut all = self.config.to_meta();
        all.extend(meta);
        let mut tensors: Vec<NamedTensor> = self
            .store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                tensor: e.value.clone(),
            })
            .collect();
        tensors.push(NamedTensor {
            name: ANCHORS_NAME.into(),
            tensor: self.anchors.to_tensor(1.0),
        });
        tensors.push(NamedTensor {
            name: COUNTS_NAME.into(),
            tensor: Tensor::new(&[self.anchors.k()], self.anchors.counts.clone()).expect("k counts"),
        });
        let optimizer = optimizer
            .map(|o| {
                let mut v = vec![NamedTensor {
                    name: "adamw.step".into(),
                    tensor: Tensor::scalar(o.step as f64),
                }];
                for (e, (m, s)) in self.store.entries().iter().zip(o.m.iter().zip(&o.v)) {
                    v.push(NamedTensor {
                        name: format!("adamw.m.{}", e.name),
                        tensor: m.clone(),
                    });
                    v.push(NamedTensor {
                        name: format!("adamw.v.{}", e.name),
                        tensor: s.clone(),
                    });
                }
                v
            })
            .unwrap_or_default();
        Checkpoint {
            meta: all,
            tensors,
            optimizer,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> std::result::Result<Model, CheckpointError> {
        let config = ModelConfig::from_meta(&ckpt.meta)?;
        let anchors = IntentAnchorSet::from_tensor(ckpt.tensor(ANCHORS_NAME)?, ckpt.tensor(COUNTS_NAME)?)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        if anchors.k() != config.k {
            return Err(CheckpointError::Invalid("anchor count does not match K".into()));
        }
        let mut model = Model::new(config, anchors, 0);
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let t = ckpt.tensor(&name)?;
            if t.shape() != model.store.get(id).shape() {
                return Err(CheckpointError::Invalid(format!("tensor `{name}` has shape {:?}", t.shape())));
            }
            *model.store.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// Restores optimizer moments saved by [`Model::to_checkpoint`].
    pub fn optimizer_from_checkpoint(&self, ckpt: &Checkpoint, opt: &mut AdamW) -> std::result::Result<(), CheckpointError> {
        let find = |name: &str| {
            ckpt.optimizer
                .iter()
                .find(|t| t.name == name)
                .map(|t| &t.tensor)
                .ok_or_else(|| CheckpointError::Missing(name.to_string()))
        };
        opt.step = find("adamw.step")?.data()[0] as u64;
        for (i, e) in self.store.entries().iter().enumerate() {
            opt.m[i] = find(&format!("adamw.m.{}", e.name))?.clone();
            opt.v[i] = find(&format!("adamw.v.{}", e.name))?.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, ScenarioKind};
    use crate::tensor::softmax_slice;

    fn small() -> (Model, Vec<Scene>) {
        let scenes: Vec<Scene> = ScenarioKind::ALL.iter().map(|&k| generate_scene(1, k)).collect();
        let config = ModelConfig {
            d_model: 16,
            heads: 2,
            k: 3,
            m: 2,
            ..ModelConfig::default()
        };
        let anchors = IntentAnchorSet::from_experts(&scenes, 3);
        (Model::new(config, anchors, 7), scenes)
    }

    #[test]
    fn prediction_shapes() {
        let (model, scenes) = small();
        let p = model.predict(&scenes[0]).unwrap();
        assert_eq!(p.detections.len(), 6);
        assert_eq!(p.map.len(), 4);
        assert!(p.map.iter().all(|e| e.points.len() == 10));
        assert_eq!(p.motion.len(), 6);
        assert!(p.motion.iter().all(|a| a.trajectories.len() == 2 && a.trajectories[0].len() == 6));
        assert_eq!(p.plan.k(), 3);
        assert_eq!(p.plan.m(), 2);
        let s: f64 = softmax_slice(&p.plan.intent_logits).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zeroed_residual_returns_anchors() {
        let (mut model, scenes) = small();
        model.zero_trajectory_residual();
        let p = model.predict(&scenes[2]).unwrap();
        for (k, modes) in p.plan.trajectories.iter().enumerate() {
            for t in modes {
                assert_eq!(t, &model.anchors.anchors[k]);
            }
        }
    }

    #[test]
    fn mode_embedding_is_shared() {
        let (model, scenes) = small();
        let mut tape = Tape::new(&model.store);
        let input = model.input(&scenes[0]);
        model.forward(&mut tape, &input).unwrap();
        let names: Vec<&str> = tape.loaded_params().map(|id| model.store.name(id)).collect();
        assert_eq!(names.iter().filter(|n| n.contains("mode")).filter(|n| n.starts_with("embed")).count(), 1);
        assert_eq!(model.layout.embed.mode, model.store.find("embed.mode").unwrap());
    }

    #[test]
    fn disabling_a_stage_changes_head_inputs() {
        let (mut model, scenes) = small();
        let input = model.input(&scenes[0]);
        let full = {
            let mut tape = Tape::new(&model.store);
            let f = model.forward(&mut tape, &input).unwrap();
            tape.value(f.head_inputs.ego).clone()
        };
        for stage in 0..3 {
            model.config.skip_stages = [true; 3];
            model.config.skip_stages[stage] = false;
            let mut tape = Tape::new(&model.store);
            let f = model.forward(&mut tape, &input).unwrap();
            assert_ne!(tape.value(f.head_inputs.ego), &full, "stage {stage}");
        }
    }

    #[test]
    fn permuting_agent_queries_permutes_motion() {
        let (mut model, scenes) = small();
        let base = model.predict(&scenes[0]).unwrap();
        let id = model.layout.agent_queries;
        let q = model.store.get(id).clone();
        let perm = [2usize, 0, 1, 5, 3, 4];
        let d = q.shape()[1];
        let data: Vec<f64> = perm.iter().flat_map(|&p| q.row(p).to_vec()).collect();
        *model.store.get_mut(id) = Tensor::new(&[6, d], data).unwrap();
        let p = model.predict(&scenes[0]).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in p.motion[i].trajectories.iter().zip(&base.motion[src].trajectories) {
                for (x, y) in a.iter().zip(b) {
                    assert!(x.dist(*y) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let (model, scenes) = small();
        let opt = AdamW::new(&model.store, Default::default());
        let ckpt = model.to_checkpoint(BTreeMap::new(), Some(&opt));
        let bytes = ckpt.to_bytes();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.predict(&scenes[3]).unwrap(), model.predict(&scenes[3]).unwrap());
        assert_eq!(back.config, model.config);
        let mut opt2 = AdamW::new(&back.store, Default::default());
        back.optimizer_from_checkpoint(&ckpt, &mut opt2).unwrap();
        assert_eq!(opt2, opt);
    }
}
