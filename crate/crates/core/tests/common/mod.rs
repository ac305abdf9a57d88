//! Oracles and fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taskgrasp::data::{self, DatasetSplit, SplitMode, SyntheticWorld, TripletSet, WorldSpec};
use taskgrasp::learn::{gradient, total_loss, train, LossWeights, TrainConfig, TrainOutcome};
use taskgrasp::model::{ActionId, EmbeddingModel, ModelHeader, Observation};
use taskgrasp::{GraspRect, TaskTriplet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inside test for a rotated rectangle, written independently of the
/// library: project the offset onto the rectangle's own axes.
fn inside(r: &GraspRect, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - r.x(), py - r.y());
    let ax = (r.theta().cos(), r.theta().sin());
    let along = dx * ax.0 + dy * ax.1;
    let across = dy * ax.0 - dx * ax.1;
    2.0 * along.abs() <= r.w() && 2.0 * across.abs() <= r.h()
}

fn bbox(r: &GraspRect) -> (f64, f64, f64, f64) {
    let half = 0.5 * (r.w().hypot(r.h()));
    (r.x() - half, r.y() - half, r.x() + half, r.y() + half)
}

/// Intersection over union estimated on a `step`-pixel sample grid.
pub fn raster_jaccard(a: &GraspRect, b: &GraspRect, step: f64) -> f64 {
    let (a0, a1, a2, a3) = bbox(a);
    let (b0, b1, b2, b3) = bbox(b);
    let (x0, y0) = (a0.min(b0), a1.min(b1));
    let (x1, y1) = (a2.max(b2), a3.max(b3));
    let nx = ((x1 - x0) / step).ceil() as usize;
    let ny = ((y1 - y0) / step).ceil() as usize;
    let (mut both, mut either) = (0u64, 0u64);
    for j in 0..ny {
        let py = y0 + (j as f64 + 0.5) * step;
        for i in 0..nx {
            let px = x0 + (i as f64 + 0.5) * step;
            let (ia, ib) = (inside(a, px, py), inside(b, px, py));
            both += u64::from(ia && ib);
            either += u64::from(ia || ib);
        }
    }
    both as f64 / either as f64
}

pub fn random_rect(rng: &mut impl Rng, span: f64, min_side: f64, max_side: f64) -> GraspRect {
    GraspRect::new(
        rng.random_range(0.0..span),
        rng.random_range(0.0..span),
        rng.random_range(-FRAC_PI_2..FRAC_PI_2),
        rng.random_range(min_side..max_side),
        rng.random_range(min_side..max_side),
        rng.random_range(0.0..1.0),
    )
    .unwrap()
}

/// World used by every trained-model test: the default spec.
pub fn default_world() -> SyntheticWorld {
    data::generate_world(&WorldSpec::default()).unwrap()
}

pub fn default_triplets() -> TripletSet {
    data::enumerate_triplets(&default_world()).unwrap()
}

pub fn default_split(mode: SplitMode) -> DatasetSplit {
    let spec = WorldSpec::default();
    data::split(&default_triplets(), mode, data::DEFAULT_TRAIN_FRACTION, spec.seed).unwrap()
}

/// The image-wise model trained once per test binary with default settings.
pub fn trained_image_wise() -> &'static (DatasetSplit, TrainOutcome) {
    static CELL: OnceLock<(DatasetSplit, TrainOutcome)> = OnceLock::new();
    CELL.get_or_init(|| {
        let split = default_split(SplitMode::ImageWise);
        let outcome = train(&split.train_set(), &TrainConfig::default()).unwrap();
        (split, outcome)
    })
}

pub fn obs(entity: &str, class: Option<usize>, region: Option<usize>, f: &[f64]) -> Observation {
    Observation {
        features: f.to_vec(),
        entity_id: entity.into(),
        class_id: class,
        grasp_region_id: region,
    }
}

/// A randomly initialized F=4, H=5, D=3 model with two actions.
pub fn small_model(seed: u64) -> EmbeddingModel {
    EmbeddingModel::init(ModelHeader {
        feature_len: 4,
        hidden: 5,
        dim: 3,
        num_actions: 2,
        action_names: vec!["a0".into(), "a1".into()],
        object_classes: 3,
        region_classes: 2,
        target_classes: 2,
        seed,
    })
    .unwrap()
}

pub fn random_features(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random positive/negative pairs for `small_model`. Negatives swap in a
/// fresh head or tail; about a third of the targets are null.
pub fn small_batch(rng: &mut impl Rng, n: usize) -> (Vec<TaskTriplet>, Vec<TaskTriplet>) {
    let rect = GraspRect::new(5.0, 5.0, 0.2, 6.0, 3.0, 0.8).unwrap();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        let tool = obs(
            &format!("tool{i}"),
            Some(rng.random_range(0..3)),
            Some(rng.random_range(0..2)),
            &random_features(rng, 4),
        );
        let target = if rng.random_bool(1.0 / 3.0) {
            Observation::null(4)
        } else {
            obs(
                &format!("target{i}"),
                Some(rng.random_range(0..2)),
                None,
                &random_features(rng, 4),
            )
        };
        let a = rng.random_range(0..2);
        let p = TaskTriplet {
            scene: 0,
            tool,
            grasp: rect,
            action: ActionId::new(a, format!("a{a}")),
            target,
            positive: true,
        };
        let mut q = p.clone();
        q.positive = false;
        if rng.random_bool(0.5) {
            q.tool = obs(
                &format!("other{i}"),
                Some(rng.random_range(0..3)),
                Some(rng.random_range(0..2)),
                &random_features(rng, 4),
            );
        } else {
            q.target = obs(
                &format!("othertarget{i}"),
                Some(rng.random_range(0..2)),
                None,
                &random_features(rng, 4),
            );
        }
        pos.push(p);
        neg.push(q);
    }
    (pos, neg)
}

pub const KINK_MARGIN: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Exact-zero gradients (e.g. cancelling hinge signs) leave only rounding
/// noise of order ulp(L) / step in the difference quotient.
pub const FD_ABS_FLOOR: f64 = 1e-8;

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
}

/// Smallest distance to any non-differentiable point: ReLU inputs, the
/// components of `h + r - t`, and the hinge argument.
pub fn kink_distance(m: &EmbeddingModel, pos: &[TaskTriplet], neg: &[TaskTriplet], gamma: f64) -> f64 {
    let p = &m.params;
    let mut closest = f64::INFINITY;
    let mut distance = |t: &TaskTriplet| {
        let n = m.header().num_actions;
        for z in p.head.first.forward(&t.tool.features)
            .into_iter()
            .chain(p.tail.first.forward(&t.target.features))
            .chain(p.relation.first.forward(&one_hot(t.action.index, n)))
        {
            closest = closest.min(z.abs());
        }
        let h = m.encode_head(&t.tool).unwrap();
        let r = m.encode_relation(&t.action).unwrap();
        let tl = m.encode_tail(&t.target).unwrap();
        let mut d = 0.0;
        for i in 0..h.len() {
            let c = h[i] + r[i] - tl[i];
            closest = closest.min(c.abs());
            d += c.abs();
        }
        d
    };
    let hinges: Vec<f64> = pos
        .iter()
        .zip(neg)
        .map(|(a, b)| gamma + distance(a) - distance(b))
        .collect();
    hinges.iter().fold(closest, |c, v| c.min(v.abs()))
}

#[derive(Debug, Default)]
pub struct FdCheck {
    /// Largest relative error among entries with a gradient above 1e-6.
    pub worst_rel: f64,
    /// Sampled entries with an analytic gradient above 1e-6.
    pub nonzero: usize,
    /// `(tensor, index, analytic, numeric)` for every failed entry.
    pub violations: Vec<(String, usize, f64, f64)>,
}

/// Compares the analytic gradient of the total loss with central
/// differences on `samples` random parameters of a small model, resampling
/// model and batch until every kink is at least `KINK_MARGIN` away.
pub fn fd_gradient_check(seed: u64, samples: usize) -> FdCheck {
    let config = TrainConfig {
        gamma: 1.0,
        loss_weights: LossWeights {
            aff: 1.0,
            head_cls: 0.7,
            tail_cls: 0.4,
        },
        ..TrainConfig::default()
    };
    let mut r = rng(seed);
    let (model, pos, neg) = loop {
        let m = small_model(r.random());
        let (p, n) = small_batch(&mut r, 8);
        if kink_distance(&m, &p, &n, config.gamma) > KINK_MARGIN {
            break (m, p, n);
        }
    };
    let (_, grad) = gradient(&model, &pos, &neg, &config).unwrap();
    let names: Vec<String> = grad.tensors().iter().map(|(n, _)| n.to_string()).collect();
    let grads: Vec<Vec<f64>> = grad.tensors().iter().map(|(_, g)| g.to_vec()).collect();
    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    assert_eq!(total, model.params.len());

    let mut out = FdCheck::default();
    for flat in sample(&mut r, total, samples) {
        let (mut tensor, mut idx) = (0, flat);
        while idx >= sizes[tensor] {
            idx -= sizes[tensor];
            tensor += 1;
        }
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params.tensors_mut()[tensor].1[idx] += delta;
            total_loss(&m, &pos, &neg, &config).unwrap()
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        let analytic = grads[tensor][idx];
        if analytic.abs() > 1e-6 {
            out.nonzero += 1;
        }
        let diff = (analytic - numeric).abs();
        let rel = diff / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        let ok = if analytic.abs().max(numeric.abs()) > 1e-6 {
            out.worst_rel = out.worst_rel.max(rel);
            rel < FD_REL_TOL
        } else {
            diff < FD_ABS_FLOOR
        };
        if !ok {
            out.violations.push((names[tensor].clone(), idx, analytic, numeric));
        }
    }
    out
}
