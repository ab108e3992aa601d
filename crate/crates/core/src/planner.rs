//! Intent anchors (online K-means), the intent head and the anchor-residual
//! trajectory head.

use rand::Rng;

use crate::geom::Vec2;
use crate::scene::{ScenarioKind, Scene, Trajectory};
use crate::tensor::nn::{Builder, FeedForward, Linear};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Meters per unit of trajectory-head output.
pub const RESIDUAL_SCALE: f64 = 2.0;
/// Anchors are divided by this before entering the intent encoder.
pub const ANCHOR_INPUT_SCALE: f64 = 10.0;
pub const KMEANS_MOMENTUM: f64 = 0.99;

/// Mean point-wise Euclidean distance.
pub fn ade(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p.dist(*q)).sum::<f64>() / a.len().max(1) as f64
}

fn mean_sq(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let d = *p - *q;
            d.dot(d)
        })
        .sum::<f64>()
        / a.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentAnchorSet {
    pub anchors: Vec<Trajectory>,
    /// Samples assigned to each anchor so far.
    pub counts: Vec<f64>,
}

impl IntentAnchorSet {
    pub fn new(anchors: Vec<Trajectory>) -> Self {
        let counts = vec![0.0; anchors.len()];
        IntentAnchorSet { anchors, counts }
    }

    pub fn k(&self) -> usize {
        self.anchors.len()
    }

    /// `k` expert trajectories, taken round-robin over the scenario
    /// families present in `scenes` so the set starts diverse. Each anchor
    /// counts as one observed sample.
    pub fn from_experts(scenes: &[Scene], k: usize) -> Self {
        let mut by_kind: Vec<(ScenarioKind, Vec<&Scene>)> = Vec::new();
        for s in scenes {
            let kind = s.kind().unwrap_or(ScenarioKind::LaneKeep);
            match by_kind.iter_mut().find(|(k2, _)| *k2 == kind) {
                Some((_, v)) => v.push(s),
                None => by_kind.push((kind, vec![s])),
            }
        }
        by_kind.sort_by_key(|(k, _)| *k);
        let mut anchors = Vec::with_capacity(k);
        let mut round = 0;
        while anchors.len() < k && !by_kind.is_empty() {
            for (_, list) in &by_kind {
                if anchors.len() == k {
                    break;
                }
                if let Some(s) = list.get(round % list.len()) {
                    anchors.push(s.ego_gt.clone());
                }
            }
            round += 1;
        }
        let counts = vec![1.0; anchors.len()];
        IntentAnchorSet { anchors, counts }
    }

    /// Anchors as a `K x (T*2)` tensor, optionally scaled.
    pub fn to_tensor(&self, scale: f64) -> Tensor {
        let t = self.anchors.first().map_or(0, |a| a.len());
        let data = self
            .anchors
            .iter()
            .flat_map(|a| a.iter().flat_map(|p| [p.x * scale, p.y * scale]))
            .collect();
        Tensor::new(&[self.k(), t * 2], data).expect("anchors share a length")
    }

    pub fn from_tensor(t: &Tensor, counts: &Tensor) -> Result<Self> {
        let (k, w) = t.dims2()?;
        if w % 2 != 0 || counts.len() != k {
            return Err(TensorError::Invalid("malformed anchor tensors".into()));
        }
        let anchors = (0..k)
            .map(|i| t.row(i).chunks(2).map(|c| Vec2::new(c[0], c[1])).collect())
            .collect();
        Ok(IntentAnchorSet {
            anchors,
            counts: counts.data().to_vec(),
        })
    }
}

/// Index of the anchor with the smallest mean point-wise L2 to `gt`;
/// ties go to the lowest index.
pub fn kmeans_assign(gt: &[Vec2], anchors: &IntentAnchorSet) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, a) in anchors.anchors.iter().enumerate() {
        let d = ade(gt, a);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Mean squared point deviation of each sample to its assigned anchor.
pub fn quantization_loss(samples: &[Trajectory], anchors: &IntentAnchorSet) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| mean_sq(s, &anchors.anchors[kmeans_assign(s, anchors)]))
        .sum::<f64>()
        / samples.len() as f64
}

/// One online K-means step. Returns the quantization loss of `batch`
/// against the anchors before the update.
///
/// Anchors with assignments move toward their batch mean by EMA with
/// `momentum`. Anchors that have never received a sample are reseeded with
/// the batch samples farthest from their assigned anchors.
pub fn kmeans_update(anchors: &mut IntentAnchorSet, batch: &[Trajectory], momentum: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let k = anchors.k();
    let labels: Vec<usize> = batch.iter().map(|s| kmeans_assign(s, anchors)).collect();
    let dev: Vec<f64> = batch
        .iter()
        .zip(&labels)
        .map(|(s, &l)| mean_sq(s, &anchors.anchors[l]))
        .collect();
    let loss = dev.iter().sum::<f64>() / batch.len() as f64;

    let t = batch[0].len();
    let mut sums = vec![vec![Vec2::ZERO; t]; k];
    let mut n = vec![0usize; k];
    for (s, &l) in batch.iter().zip(&labels) {
        n[l] += 1;
        for (acc, p) in sums[l].iter_mut().zip(s) {
            *acc = *acc + *p;
        }
    }
    for j in 0..k {
        if n[j] == 0 {
            continue;
        }
        let inv = 1.0 / n[j] as f64;
        for (a, s) in anchors.anchors[j].iter_mut().zip(&sums[j]) {
            *a = *a * momentum + *s * ((1.0 - momentum) * inv);
        }
        anchors.counts[j] += n[j] as f64;
    }

    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| dev[b].total_cmp(&dev[a]).then(a.cmp(&b)));
    let mut next = order.into_iter();
    for j in 0..k {
        if anchors.counts[j] == 0.0 {
            match next.next() {
                Some(i) => {
                    anchors.anchors[j] = batch[i].clone();
                    anchors.counts[j] = 1.0;
                }
                None => break,
            }
        }
    }
    loss
}

/// Offline Lloyd iterations from the given init, with the same reseeding
/// rule for empty clusters. Runs until assignments stop changing.
pub fn lloyd(samples: &[Trajectory], init: &IntentAnchorSet, max_iter: usize) -> IntentAnchorSet {
    let mut a = init.clone();
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..max_iter {
        let labels: Vec<usize> = samples.iter().map(|s| kmeans_assign(s, &a)).collect();
        if prev.as_ref() == Some(&labels) {
            break;
        }
        let t = samples[0].len();
        let mut sums = vec![vec![Vec2::ZERO; t]; a.k()];
        let mut n = vec![0usize; a.k()];
        for (s, &l) in samples.iter().zip(&labels) {
            n[l] += 1;
            for (acc, p) in sums[l].iter_mut().zip(s) {
                *acc = *acc + *p;
            }
        }
        let mut dev: Vec<(usize, f64)> = samples
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (s, &l))| (i, mean_sq(s, &a.anchors[l])))
            .collect();
        dev.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let mut far = dev.into_iter().map(|(i, _)| i);
        for j in 0..a.k() {
            if n[j] > 0 {
                a.anchors[j] = sums[j].iter().map(|s| *s * (1.0 / n[j] as f64)).collect();
                a.counts[j] = n[j] as f64;
            } else if let Some(i) = far.next() {
                a.anchors[j] = samples[i].clone();
            }
        }
        prev = Some(labels);
    }
    a
}

/// Mode-pooled features to one logit per anchor.
#[derive(Debug, Clone)]
pub struct IntentHead {
    pub mlp: FeedForward,
}

impl IntentHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, d: usize) -> Self {
        IntentHead {
            mlp: FeedForward::new(b, "intent_head", d, d, 1, 0.5),
        }
    }

    /// `ego: [K*M, D]` to logits `[K]`.
    pub fn forward(&self, tape: &mut Tape, ego: Var, modes: usize) -> Result<Var> {
        let pooled = tape.mean_groups(ego, modes)?;
        let k = tape.shape(pooled)[0];
        let logits = self.mlp.forward(tape, pooled)?;
        tape.reshape(logits, &[k])
    }
}

/// Per-(anchor, mode) residuals around the anchor plus a mode logit.
#[derive(Debug, Clone)]
pub struct TrajectoryHead {
    pub mlp: FeedForward,
    pub mode_logit: Linear,
}

impl TrajectoryHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, d: usize, t_future: usize) -> Self {
        b.scoped("traj_head", |b| TrajectoryHead {
            mlp: FeedForward::new(b, "residual", d, d, t_future * 2, 0.5),
            mode_logit: Linear::new(b, "mode_logit", d, 1, 0.5),
        })
    }

    /// `ego: [K*M, D]`, `anchors: [K, T*2]` (meters). Returns trajectories
    /// `[K*M, T*2]` and mode logits `[K, M]`.
    pub fn forward(&self, tape: &mut Tape, ego: Var, anchors: Var, modes: usize) -> Result<(Var, Var)> {
        let rows = tape.shape(ego)[0];
        let k = rows / modes.max(1);
        let res = self.mlp.forward(tape, ego)?;
        let res = tape.scale(res, RESIDUAL_SCALE);
        let idx: Vec<usize> = (0..rows).map(|r| r / modes).collect();
        let base = tape.rows(anchors, &idx)?;
        let trajs = tape.add(base, res)?;
        let logits = self.mode_logit.forward(tape, ego)?;
        let logits = tape.reshape(logits, &[k, modes])?;
        Ok((trajs, logits))
    }
}

/// Full planner hypothesis set for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    pub intent_logits: Vec<f64>,
    /// `K x M` trajectories.
    pub trajectories: Vec<Vec<Trajectory>>,
    /// `K x M`.
    pub mode_logits: Vec<Vec<f64>>,
}

impl PlanOutput {
    pub fn k(&self) -> usize {
        self.intent_logits.len()
    }

    pub fn m(&self) -> usize {
        self.mode_logits.first().map_or(0, |m| m.len())
    }
}

/// Lowest index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng) -> Trajectory {
        (0..6)
            .map(|_| Vec2::new(rng.gen_range(-5.0..25.0), rng.gen_range(-8.0..8.0)))
            .collect()
    }

    fn set(rng: &mut ChaCha8Rng, k: usize) -> IntentAnchorSet {
        IntentAnchorSet::new((0..k).map(|_| random_traj(rng)).collect())
    }

    #[test]
    fn assign_exact_match_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = set(&mut rng, 8);
        assert_eq!(kmeans_assign(&a.anchors[3], &a), 3);
        let mut b = a.clone();
        b.anchors[4] = b.anchors[1].clone();
        assert_eq!(kmeans_assign(&b.anchors[1], &b), 1);
    }

    proptest! {
        #[test]
        fn assign_matches_exhaustive_scan(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = set(&mut rng, 8);
            let gt = random_traj(&mut rng);
            let d: Vec<f64> = a.anchors.iter().map(|x| {
                (0..6).map(|i| ((gt[i].x - x[i].x).powi(2) + (gt[i].y - x[i].y).powi(2)).sqrt()).sum::<f64>() / 6.0
            }).collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let oracle = d.iter().position(|&v| v == min).unwrap();
            prop_assert_eq!(kmeans_assign(&gt, &a), oracle);
        }
    }

    #[test]
    fn update_with_copies_of_anchor_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = set(&mut rng, 4);
        a.counts = vec![1.0; 4];
        let before = a.anchors.clone();
        let batch = vec![before[0].clone(); 5];
        let loss = kmeans_update(&mut a, &batch, KMEANS_MOMENTUM);
        assert_eq!(loss, 0.0);
        assert_eq!(a.anchors, before);
        assert_eq!(a.counts[0], 6.0);
    }

    #[test]
    fn single_cluster_converges_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<Trajectory> = (0..10).map(|_| random_traj(&mut rng)).collect();
        let mean: Trajectory = (0..6)
            .map(|i| batch.iter().fold(Vec2::ZERO, |a, t| a + t[i]) * 0.1)
            .collect();
        let mut a = IntentAnchorSet::new(vec![random_traj(&mut rng)]);
        a.counts[0] = 1.0;
        let mut last = ade(&a.anchors[0], &mean);
        for _ in 0..50 {
            kmeans_update(&mut a, &batch, 0.9);
            let d = ade(&a.anchors[0], &mean);
            assert!(d <= last + 1e-12);
            last = d;
        }
        assert!(last < 0.05);
    }

    #[test]
    fn never_used_anchor_is_reseeded_from_farthest_sample() {
        let far = vec![Vec2::new(100.0, 100.0); 6];
        let near = vec![Vec2::ZERO; 6];
        let mut a = IntentAnchorSet::new(vec![near.clone(), vec![Vec2::new(-50.0, 0.0); 6]]);
        kmeans_update(&mut a, &[near.clone(), far.clone()], 0.5);
        // both samples go to anchor 0; anchor 1 was never used
        assert_eq!(a.anchors[1], far);
        assert_eq!(a.counts, vec![2.0, 1.0]);
    }

    #[test]
    fn lloyd_reaches_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Trajectory> = (0..200).map(|_| random_traj(&mut rng)).collect();
        let init = IntentAnchorSet::new(samples[..5].to_vec());
        let out = lloyd(&samples, &init, 500);
        let again = lloyd(&samples, &out, 1);
        assert_eq!(out.anchors, again.anchors);
        assert!(quantization_loss(&samples, &out) <= quantization_loss(&samples, &init));
    }

    #[test]
    fn heads_have_documented_shapes_and_residual_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ih, th) = {
            let mut b = Builder::new(&mut store, &mut rng);
            (IntentHead::new(&mut b, 8), TrajectoryHead::new(&mut b, 8, 6))
        };
        for id in th.mlp.down.params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let anchors = set(&mut rng, 3);
        let mut tape = Tape::new(&store);
        let feat = tape.constant(Tensor::normal(&mut rng, &[6, 8], 1.0));
        let av = tape.constant(anchors.to_tensor(1.0));
        let logits = ih.forward(&mut tape, feat, 2).unwrap();
        assert_eq!(tape.shape(logits), &[3]);
        let (tr, ml) = th.forward(&mut tape, feat, av, 2).unwrap();
        assert_eq!(tape.shape(tr), &[6, 12]);
        assert_eq!(tape.shape(ml), &[3, 2]);
        for r in 0..6 {
            assert_eq!(tape.value(tr).row(r), anchors.to_tensor(1.0).row(r / 2));
        }
        // identical pooled features give identical logits
        let same = tape.constant(Tensor::full(&[6, 8], 0.3));
        let l = ih.forward(&mut tape, same, 2).unwrap();
        let v = tape.value(l).data();
        assert!(v.iter().all(|x| *x == v[0]));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
