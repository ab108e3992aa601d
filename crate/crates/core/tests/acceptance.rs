//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance -- 1 4 9` runs a subset. The
//! process exits non-zero on a FAIL only when `HIERDRIVE_STRICT=1`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command as Proc;
use std::time::Instant;

use hierdrive::eval::{self, long_tail_eval, open_loop, rollout_world, select, InferenceMode, Sampling};
use hierdrive::geom::{OrientedBox, Vec2};
use hierdrive::model::{Model, ModelConfig};
use hierdrive::planner::{argmax, kmeans_assign, kmeans_update, lloyd, quantization_loss, IntentAnchorSet, PlanOutput};
use hierdrive::scene::{build_dataset, default_mix, generate_scene, PolylineKind, ScenarioKind, Scene, Trajectory, World};
use hierdrive::tensor::{ParamStore, Tape, Tensor};
use hierdrive::training::{fit, initial_model, scene_loss, wta_loss, ConstraintMargins, LossWeights, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Res<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn random_traj(rng: &mut ChaCha8Rng, t: usize, r: f64) -> Trajectory {
    (0..t).map(|_| Vec2::new(rng.gen_range(-r..r), rng.gen_range(-r..r))).collect()
}

fn mean_dist(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt())
        .sum::<f64>()
        / a.len() as f64
}

// 1 -------------------------------------------------------------------------

fn gradient_check() -> Res<Outcome> {
    let start = Instant::now();
    let scene = (0..)
        .map(|s| generate_scene(s, ScenarioKind::LaneKeep))
        .find(|s| !s.agents.is_empty())
        .unwrap();
    let mut scene = scene;
    scene.agents.truncate(1);
    let lane = scene
        .polylines
        .iter()
        .position(|p| p.kind == PolylineKind::LaneCenter)
        .unwrap();
    scene.polylines = vec![scene.polylines[lane].clone()];

    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        k: 2,
        m: 2,
        ..ModelConfig::default()
    };
    let pool: Vec<Scene> = (0..4).map(|s| generate_scene(s, ScenarioKind::TurnLeft)).collect();
    let mut model = Model::new(cfg, IntentAnchorSet::from_experts(&[pool, vec![scene.clone()]].concat(), 2), 11);
    let input = model.input(&scene);
    let weights = LossWeights::default();
    let margins = ConstraintMargins::default();

    let loss_of = |m: &Model| -> Res<f64> {
        let mut tape = Tape::new(&m.store);
        let f = m.forward(&mut tape, &input)?;
        let l = scene_loss(&mut tape, m, &f, &scene, &weights, &margins, None, 0.0)?;
        Ok(tape.value(l.total).data()[0])
    };
    let (grads, used) = {
        let mut tape = Tape::new(&model.store);
        let f = model.forward(&mut tape, &input)?;
        let l = scene_loss(&mut tape, &model, &f, &scene, &weights, &margins, None, 0.0)?;
        let used: Vec<_> = tape.loaded_params().collect();
        (tape.backward(l.total)?.into_param_grads(), used)
    };

    let coords: Vec<(usize, usize)> = used
        .iter()
        .enumerate()
        .flat_map(|(u, &id)| (0..model.store.get(id).len()).map(move |j| (u, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let picks: Vec<(usize, usize)> = coords.choose_multiple(&mut rng, 200).copied().collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut bad = 0;
    let mut nonzero = 0;
    for &(u, j) in &picks {
        let id = used[u];
        let orig = model.store.get(id).data()[j];
        model.store.get_mut(id).data_mut()[j] = orig + h;
        let up = loss_of(&model)?;
        model.store.get_mut(id).data_mut()[j] = orig - h;
        let down = loss_of(&model)?;
        model.store.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id)[j];
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-6 {
            nonzero += 1;
            let rel = (analytic - numeric).abs() / scale;
            worst = worst.max(rel);
            if rel > 1e-3 {
                bad += 1;
            }
        } else if (analytic - numeric).abs() > 1e-8 {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad == 0 && picks.len() >= 200 && secs < 60.0,
        format!(
            "{} coordinates ({nonzero} non-negligible), {bad} outside 1e-3, worst rel err {worst:.2e}, {secs:.1}s",
            picks.len()
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn wta_oracle() -> Res<Outcome> {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = 6;
    let (mut idx_bad, mut val_bad, mut ties) = (0, 0, 0);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let m = rng.gen_range(1..=6);
        let gt = random_traj(&mut rng, t, 20.0);
        let mut preds: Vec<Trajectory> = (0..m).map(|_| random_traj(&mut rng, t, 20.0)).collect();
        if case % 7 == 0 && m > 1 {
            preds[m - 1] = preds[0].clone();
            ties += 1;
        }
        let logits: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();

        let mut tape = Tape::new(&store);
        let flat: Vec<f64> = preds.iter().flatten().flat_map(|p| [p.x, p.y]).collect();
        let pv = tape.constant(Tensor::new(&[m, 2 * t], flat)?);
        let lv = tape.constant(Tensor::new(&[m], logits.clone())?);
        let w = wta_loss(&mut tape, pv, lv, &gt)?;
        let got = tape.value(w.loss).data()[0];

        let ades: Vec<f64> = preds.iter().map(|p| mean_dist(p, &gt)).collect();
        let mut winner = 0;
        for i in 1..m {
            if ades[i] < ades[winner] {
                winner = i;
            }
        }
        let reg: f64 = preds[winner]
            .iter()
            .zip(&gt)
            .flat_map(|(p, g)| [p.x - g.x, p.y - g.y])
            .map(|d| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 })
            .sum::<f64>()
            / t as f64;
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        let expect = reg + lse - logits[winner];

        if w.winner != winner {
            idx_bad += 1;
        }
        let err = (got - expect).abs() / expect.abs().max(1.0);
        worst = worst.max(err);
        if err > 1e-12 {
            val_bad += 1;
        }
    }
    outcome(
        idx_bad == 0 && val_bad == 0,
        format!("1000 cases ({ties} with duplicated modes): {idx_bad} winner mismatches, {val_bad} loss mismatches, worst rel diff {worst:.1e}"),
    )
}

// 3 -------------------------------------------------------------------------

fn intent_label_oracle() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = 6;
    let (mut bad, mut ties) = (0, 0);
    for case in 0..1000 {
        let k = rng.gen_range(1..=10);
        let mut anchors: Vec<Trajectory> = (0..k).map(|_| random_traj(&mut rng, t, 25.0)).collect();
        let mut gt = random_traj(&mut rng, t, 25.0);
        if k >= 2 && case % 3 == 0 {
            let i = rng.gen_range(0..k - 1);
            let j = rng.gen_range(i + 1..k);
            if case % 2 == 0 {
                // duplicated anchor nearest to gt
                anchors[j] = anchors[i].clone();
                gt = anchors[i].iter().map(|p| *p + Vec2::new(rng.gen_range(-0.1..0.1), 0.05)).collect();
            } else {
                // mirror images about the x axis, gt on the axis
                anchors[j] = anchors[i].iter().map(|p| Vec2::new(p.x, -p.y)).collect();
                gt = anchors[i].iter().map(|p| Vec2::new(p.x + 0.01, 0.0)).collect();
            }
            ties += 1;
        }
        let ds: Vec<f64> = anchors.iter().map(|a| mean_dist(&gt, a)).collect();
        let best = ds.iter().cloned().fold(f64::INFINITY, f64::min);
        let expect = ds.iter().position(|d| *d == best).unwrap();
        if kmeans_assign(&gt, &IntentAnchorSet::new(anchors)) != expect {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("1000 cases ({ties} forced ties): {bad} mismatches"))
}

// 4 -------------------------------------------------------------------------

fn online_kmeans() -> Res<Outcome> {
    let mix = training_mix();
    let scenes: Vec<Scene> = (0..500u64).map(|s| generate_scene(s, mix[(s as usize) % mix.len()].0)).collect();
    let samples: Vec<Trajectory> = scenes.iter().map(|s| s.ego_gt.clone()).collect();
    let init = IntentAnchorSet::from_experts(&scenes, 8);
    let offline = quantization_loss(&samples, &lloyd(&samples, &init, 200));

    let mut online = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = vec![quantization_loss(&samples, &online)];
    for _ in 0..60 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(8) {
            let batch: Vec<Trajectory> = chunk.iter().map(|&i| samples[i].clone()).collect();
            kmeans_update(&mut online, &batch, 0.99);
        }
        curve.push(quantization_loss(&samples, &online));
    }
    let last = *curve.last().unwrap();
    let (rise_epoch, worst_rise) = curve
        .windows(2)
        .map(|w| w[1] - w[0])
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, r)| if r > b.1 { (i + 1, r) } else { b });
    let ratio = last / offline;
    outcome(
        ratio <= 1.10 && worst_rise <= 1e-3,
        format!(
            "batch 8, momentum 0.99, 60 epochs: online {last:.4} vs offline {offline:.4} (ratio {ratio:.3}), start {:.4}, largest per-epoch rise {worst_rise:.2e} (epoch {rise_epoch})",
            curve[0]
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn training_mix() -> Vec<(ScenarioKind, f64)> {
    default_mix().into_iter().filter(|(k, _)| !k.is_zero_shot()).collect()
}

struct Desk {
    train: Vec<Scene>,
    val: Vec<Scene>,
    untrained: Model,
    model: Model,
    secs: f64,
}

fn desk() -> Res<Desk> {
    let mix = training_mix();
    let (train, _) = build_dataset(0..200, &mix, (1.0, 0.0))?;
    let (val, _) = build_dataset(10_000..10_200, &mix, (1.0, 0.0))?;
    let cfg = TrainConfig::default();
    let untrained = initial_model(&train, &cfg);
    let start = Instant::now();
    let trained = fit(&train, &cfg, |m| {
        eprintln!("  epoch {:>2} total {:.3}", m.epoch, m.total);
    })?;
    Ok(Desk {
        train,
        val,
        untrained,
        model: trained.model,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn l2_3s(model: &Model, scenes: &[Scene]) -> Res<f64> {
    Ok(open_loop(model, scenes, &InferenceMode::deterministic())?.1.l2[2])
}

fn training_efficacy(d: &Desk) -> Res<Outcome> {
    let untrained = l2_3s(&d.untrained, &d.val)?;
    let trained = l2_3s(&d.model, &d.val)?;
    let mut anchor_only = d.model.clone();
    anchor_only.zero_trajectory_residual();
    let anchors = l2_3s(&anchor_only, &d.val)?;
    let gain = 1.0 - trained / untrained;
    let clean = d.train.iter().all(|s| !s.kind().unwrap().is_zero_shot());
    outcome(
        d.secs < 1800.0 && gain >= 0.5 && trained < anchors && d.train.len() == 200 && clean,
        format!(
            "{} scenes x {} epochs in {:.0}s; val L2@3s untrained {untrained:.3} m, trained {trained:.3} m ({:.0}% better), anchor-only {anchors:.3} m",
            d.train.len(),
            TrainConfig::default().epochs,
            d.secs,
            100.0 * gain
        ),
    )
}

// 6 -------------------------------------------------------------------------

/// Full model (K=8, M=4) against K=1 and M=1, all at desk defaults. The
/// seed-0 full model is the one from criterion 5.
fn hierarchy_ablation(d: &Desk) -> Res<Outcome> {
    let variants = [("full", 8, 4), ("K=1", 1, 4), ("M=1", 8, 1)];
    let mut rates: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        for &(name, k, m) in &variants {
            let cfg = TrainConfig {
                seed,
                k,
                m,
                ..TrainConfig::default()
            };
            let model = if seed == 0 && name == "full" {
                d.model.clone()
            } else {
                fit(&d.train, &cfg, |_| {})?.model
            };
            let r = open_loop(&model, &d.val, &InferenceMode::deterministic())?.1;
            eprintln!("  {name} seed {seed}: collision {:?}", r.collision);
            rates.entry(name).or_default().push(r.collision_avg);
        }
    }
    let mean = |n: &str| rates[n].iter().sum::<f64>() / rates[n].len() as f64;
    let (full, k1, m1) = (mean("full"), mean("K=1"), mean("M=1"));
    let fmt = |n: &str| rates[n].iter().map(|r| format!("{:.4}", r)).collect::<Vec<_>>().join("/");
    outcome(
        k1 >= full && m1 >= full,
        format!(
            "{} val scenes, {} epochs, avg collision rate per seed: full {} (mean {full:.4}), K=1 {} (mean {k1:.4}), M=1 {} (mean {m1:.4})",
            d.val.len(),
            TrainConfig::default().epochs,
            fmt("full"),
            fmt("K=1"),
            fmt("M=1")
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn mode_diversity(d: &Desk) -> Res<Outcome> {
    let mut total = 0.0;
    for s in &d.val {
        let plan = d.model.predict(s)?.plan;
        let modes = &plan.trajectories[argmax(&plan.intent_logits)];
        let mut best = f64::INFINITY;
        for i in 0..modes.len() {
            for j in i + 1..modes.len() {
                best = best.min(modes[i].last().unwrap().dist(*modes[j].last().unwrap()));
            }
        }
        total += best;
    }
    let mean = total / d.val.len() as f64;
    outcome(
        mean > 0.3,
        format!("mean min pairwise final-waypoint distance {mean:.3} m over {} scenes", d.val.len()),
    )
}

// 8 -------------------------------------------------------------------------

fn sampling_correctness() -> Res<Outcome> {
    let plan = PlanOutput {
        intent_logits: vec![1.0, 0.2, -0.5, 2.0, 0.0],
        trajectories: vec![vec![vec![Vec2::ZERO; 6]; 3]; 5],
        mode_logits: vec![
            vec![0.0, 1.0, -1.0],
            vec![0.5, 0.5, 0.5],
            vec![2.0, -2.0, 0.0],
            vec![-0.3, 0.8, 0.1],
            vec![1.5, 0.0, 0.7],
        ],
    };
    let n = 100_000usize;
    let mut bad = Vec::new();
    for temp in [1.0, 0.5] {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut intents = [0usize; 5];
        let mut modes = [[0usize; 3]; 5];
        for _ in 0..n {
            let (i, m) = select(&plan, Sampling::DualSample, temp, &mut rng);
            intents[i] += 1;
            modes[i][m] += 1;
        }
        let p = softmax(&plan.intent_logits, temp);
        for (i, &c) in intents.iter().enumerate() {
            if !within_3_sigma(c, n, p[i]) {
                bad.push(format!("T={temp} intent {i}: {c} vs {:.0}", n as f64 * p[i]));
            }
            let q = softmax(&plan.mode_logits[i], temp);
            for (j, &cm) in modes[i].iter().enumerate() {
                if !within_3_sigma(cm, c, q[j]) {
                    bad.push(format!("T={temp} intent {i} mode {j}: {cm} vs {:.0}", c as f64 * q[j]));
                }
            }
        }
    }

    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        ..ModelConfig::default()
    };
    let scenes: Vec<Scene> = (0..100u64)
        .map(|s| generate_scene(s, ScenarioKind::ALL[(s as usize) % ScenarioKind::ALL.len()]))
        .collect();
    let model = Model::new(cfg, IntentAnchorSet::from_experts(&scenes, cfg.k), 3);
    let mut cold_bad = 0;
    for s in &scenes {
        let det = eval::infer(&model, s, &InferenceMode::deterministic())?;
        for sampling in [Sampling::IntentSample, Sampling::TrajSample, Sampling::DualSample] {
            let cold = eval::infer(&model, s, &InferenceMode::new(sampling, 1e-9, 17))?;
            if (cold.intent, cold.mode) != (det.intent, det.mode) || cold.trajectory != det.trajectory {
                cold_bad += 1;
            }
        }
    }
    outcome(
        bad.is_empty() && cold_bad == 0,
        format!(
            "2 temperatures x 1e5 draws, {} cells outside 3 sigma{}; temperature 1e-9 vs deterministic on 100 scenes: {cold_bad} mismatches",
            bad.len(),
            if bad.is_empty() { String::new() } else { format!(" ({})", bad.join(", ")) }
        ),
    )
}

fn softmax(logits: &[f64], temp: f64) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - mx) / temp).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

// 9 -------------------------------------------------------------------------

fn corners(center: Vec2, heading: f64, l: f64, w: f64) -> [Vec2; 4] {
    let (c, s) = (heading.cos(), heading.sin());
    let local = [(l / 2.0, w / 2.0), (-l / 2.0, w / 2.0), (-l / 2.0, -w / 2.0), (l / 2.0, -w / 2.0)];
    local.map(|(x, y)| Vec2::new(center.x + c * x - s * y, center.y + s * x + c * y))
}

fn inside(p: Vec2, center: Vec2, heading: f64, l: f64, w: f64) -> bool {
    let d = Vec2::new(p.x - center.x, p.y - center.y);
    let (c, s) = (heading.cos(), heading.sin());
    (c * d.x + s * d.y).abs() <= l / 2.0 && (-s * d.x + c * d.y).abs() <= w / 2.0
}

fn seg_dist(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = Vec2::new(b.x - a.x, b.y - a.y);
    let t = (((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / (ab.x * ab.x + ab.y * ab.y)).clamp(0.0, 1.0);
    ((p.x - a.x - t * ab.x).powi(2) + (p.y - a.y - t * ab.y).powi(2)).sqrt()
}

fn collision_oracle() -> Res<Outcome> {
    type BoxSpec = (Vec2, f64, f64, f64);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let random_box = |rng: &mut ChaCha8Rng| -> BoxSpec {
        (
            Vec2::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.gen_range(1.0..5.0),
            rng.gen_range(0.5..2.5),
        )
    };
    // random points on the perimeter and in the interior of `a`, tested
    // for containment in `b`
    let hits = |rng: &mut ChaCha8Rng, a: &BoxSpec, b: &BoxSpec| -> bool {
        let cs = corners(a.0, a.1, a.2, a.3);
        (0..20_000).any(|i| {
            let p = if i % 2 == 0 {
                let e = rng.gen_range(0..4);
                let t: f64 = rng.gen();
                cs[e].lerp(cs[(e + 1) % 4], t)
            } else {
                let (u, v): (f64, f64) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                let (c, s) = (a.1.cos(), a.1.sin());
                Vec2::new(a.0.x + c * u * a.2 - s * v * a.3, a.0.y + s * u * a.2 + c * v * a.3)
            };
            inside(p, b.0, b.1, b.2, b.3)
        })
    };
    let (mut checked, mut excluded, mut bad, mut overlaps) = (0, 0, 0, 0);
    while checked < 200 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let ca = corners(a.0, a.1, a.2, a.3);
        let cb = corners(b.0, b.1, b.2, b.3);
        let mut gap = f64::INFINITY;
        for (pts, other) in [(&ca, &cb), (&cb, &ca)] {
            for p in pts.iter() {
                for e in 0..4 {
                    gap = gap.min(seg_dist(*p, other[e], other[(e + 1) % 4]));
                }
            }
        }
        if gap < 0.01 {
            excluded += 1;
            continue;
        }
        let oracle = hits(&mut rng, &a, &b) || hits(&mut rng, &b, &a);
        let got = OrientedBox::new(a.0, a.1, a.2, a.3).overlaps(&OrientedBox::new(b.0, b.1, b.2, b.3));
        overlaps += oracle as usize;
        bad += (oracle != got) as usize;
        checked += 1;
    }
    outcome(
        bad == 0,
        format!("200 pairs ({overlaps} overlapping, {excluded} near-tangent skipped): {bad} disagreements"),
    )
}

// 10 ------------------------------------------------------------------------

fn closed_loop_liveness(model: &Model) -> Res<Outcome> {
    let mut per_seed = Vec::new();
    let mut all = true;
    for seed in 0..5u64 {
        let world = World::new(seed, ScenarioKind::Overtake);
        let det = rollout_world(model, &world, &InferenceMode::deterministic(), 60)?.report;
        let mut good = 0;
        let mut best = 0.0f64;
        for r in 0..8u64 {
            let rep = rollout_world(model, &world, &InferenceMode::new(Sampling::DualSample, 1.0, r), 60)?.report;
            best = best.max(if rep.collisions == 0 { rep.completion } else { 0.0 });
            if rep.completion >= 0.9 && rep.collisions == 0 {
                good += 1;
            }
        }
        all &= good > 0;
        per_seed.push(format!(
            "seed {seed}: {good}/8 ok (best {best:.2}, deterministic {:.2}{})",
            det.completion,
            if det.collisions > 0 { " collided" } else { "" }
        ));
    }
    outcome(all, per_seed.join("; "))
}

// 11 ------------------------------------------------------------------------

fn zero_shot_long_tail(d: &Desk) -> Res<Outcome> {
    let held_out = d.train.iter().all(|s| s.kind() != Some(ScenarioKind::ThreePointTurn));
    let families = long_tail_eval(&d.model, 20_000..20_100, &InferenceMode::deterministic())?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("long-tail.jsonl");
    eval::write_report(&path, &families, &serde_json::json!({ "families": families.len() }))?;
    let written = std::fs::read_to_string(&path)?.lines().count();
    let mut lines = Vec::new();
    let mut stop_ok = false;
    for f in &families {
        let gain = 1.0 - f.model.l2_avg / f.static_baseline.l2_avg;
        if f.family == ScenarioKind::StopResume {
            stop_ok = gain >= 0.4;
        }
        lines.push(format!(
            "{} {:.3} vs static {:.3} ({:+.0}%)",
            f.family.name(),
            f.model.l2_avg,
            f.static_baseline.l2_avg,
            100.0 * gain
        ));
    }
    outcome(
        held_out && families.len() == 3 && written == 4 && stop_ok,
        format!("avg L2 on 100 scenes each: {}", lines.join(", ")),
    )
}

// 12 ------------------------------------------------------------------------

fn cli_run(root: &Path, args: &[&str]) -> Res<()> {
    let out = Proc::new(env!("CARGO_BIN_EXE_hierdrive"))
        .arg("--out-dir")
        .arg(root)
        .args(args)
        .current_dir(root)
        .output()?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok(())
}

fn determinism() -> Res<Outcome> {
    let mut bytes: Vec<[Vec<u8>; 3]> = Vec::new();
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for d in &dirs {
        let root = d.path();
        cli_run(root, &["gen-data", "--seeds", "0..24", "--out", "data.scenes"])?;
        cli_run(
            root,
            &["train", "--data", "data.scenes", "--epochs", "2", "--d-model", "16", "--batch-size", "4"],
        )?;
        cli_run(
            root,
            &["infer", "--ckpt", "checkpoints/model.ckpt", "--data", "data.scenes", "--output", "plans.jsonl"],
        )?;
        bytes.push([
            std::fs::read(root.join("data.scenes"))?,
            std::fs::read(root.join("checkpoints/model.ckpt"))?,
            std::fs::read(root.join("plans.jsonl"))?,
        ]);
    }
    let names = ["dataset", "checkpoint", "inference"];
    let same: Vec<String> = names
        .iter()
        .zip(bytes[0].iter().zip(&bytes[1]))
        .map(|(n, (a, b))| format!("{n} {} ({} bytes)", if a == b { "identical" } else { "DIFFERS" }, a.len()))
        .collect();
    let pass = bytes[0] == bytes[1] && bytes[0].iter().all(|b| !b.is_empty());
    outcome(pass, format!("two separate runs: {}", same.join(", ")))
}

// ---------------------------------------------------------------------------

fn report(n: usize, name: &str, r: Res<Outcome>, failed: &mut usize) {
    let (pass, detail) = match r {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if !pass {
        *failed += 1;
    }
    println!("{} {n:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failed = 0;

    if on(1) {
        report(1, "gradient correctness", gradient_check(), &mut failed);
    }
    if on(2) {
        report(2, "WTA oracle", wta_oracle(), &mut failed);
    }
    if on(3) {
        report(3, "intent label oracle", intent_label_oracle(), &mut failed);
    }
    if on(4) {
        report(4, "online k-means quality", online_kmeans(), &mut failed);
    }
    if on(8) {
        report(8, "sampling correctness", sampling_correctness(), &mut failed);
    }
    if on(9) {
        report(9, "collision oracle", collision_oracle(), &mut failed);
    }
    if on(12) {
        report(12, "determinism", determinism(), &mut failed);
    }
    if [5, 6, 7, 10, 11].iter().any(|&n| on(n)) {
        match desk() {
            Ok(d) => {
                if on(5) {
                    report(5, "training efficacy", training_efficacy(&d), &mut failed);
                }
                if on(7) {
                    report(7, "mode diversity", mode_diversity(&d), &mut failed);
                }
                if on(10) {
                    report(10, "closed-loop liveness", closed_loop_liveness(&d.model), &mut failed);
                }
                if on(11) {
                    report(11, "zero-shot long tail", zero_shot_long_tail(&d), &mut failed);
                }
                if on(6) {
                    report(6, "hierarchy ablation", hierarchy_ablation(&d), &mut failed);
                }
            }
            Err(e) => {
                for n in [5, 6, 7, 10, 11].into_iter().filter(|&n| on(n)) {
                    report(n, "needs the desk model", Err(format!("training failed: {e}").into()), &mut failed);
                }
            }
        }
    }
    println!("acceptance: {failed} failed");
    if failed > 0 && std::env::var("HIERDRIVE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
