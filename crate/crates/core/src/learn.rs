//! Margin ranking loss with negative sampling, the auxiliary classification
//! losses, their exact gradient, and the SGD training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TaskTriplet, TripletSet};
use crate::error::{Error, Result};
use crate::geometry::GraspRect;
use crate::model::{EmbeddingModel, EntityTrace, Head, Linear, Observation, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub aff: f64,
    pub head_cls: f64,
    pub tail_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            aff: 1.0,
            head_cls: 1.0,
            tail_cls: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Ranking margin.
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub hidden: usize,
    pub dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 1.0,
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 200,
            seed: 42,
            loss_weights: LossWeights::default(),
            hidden: 64,
            dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma: must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate: must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size: must be positive"));
        }
        let w = &self.loss_weights;
        for (name, v) in [("aff", w.aff), ("head_cls", w.head_cls), ("tail_cls", w.tail_cls)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss_weights.{name}: must be >= 0")));
            }
        }
        if self.hidden == 0 || self.dim == 0 {
            return Err(Error::config("hidden/dim: must be positive"));
        }
        Ok(())
    }

    /// Reads a TOML file when the extension is `.toml`, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::config(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }
}

/// Distinct heads and tails that corruptions are drawn from.
#[derive(Debug, Clone)]
pub struct CorruptionPool {
    heads: Vec<(Observation, GraspRect)>,
    tails: Vec<Observation>,
    corrupt_tails: bool,
}

fn head_identity(o: &Observation) -> (&str, Option<usize>) {
    (&o.entity_id, o.grasp_region_id)
}

impl CorruptionPool {
    pub fn from_triplets(triplets: &[TaskTriplet]) -> Result<Self> {
        Self::build(triplets, true)
    }

    /// Pool that only ever corrupts heads, for data where every target is
    /// the null observation and there is no other tail to swap in.
    pub fn head_only(triplets: &[TaskTriplet]) -> Result<Self> {
        Self::build(triplets, false)
    }

    fn build(triplets: &[TaskTriplet], corrupt_tails: bool) -> Result<Self> {
        let mut heads = BTreeMap::new();
        let mut tails = BTreeMap::new();
        for t in triplets {
            heads
                .entry((t.scene, t.tool.entity_id.clone(), t.tool.grasp_region_id))
                .or_insert_with(|| (t.tool.clone(), t.grasp));
            let scene = if t.target.is_null() { 0 } else { t.scene };
            tails
                .entry((scene, t.target.entity_id.clone()))
                .or_insert_with(|| t.target.clone());
        }
        let pool = CorruptionPool {
            heads: heads.into_values().collect(),
            tails: tails.into_values().collect(),
            corrupt_tails,
        };
        let head_ids: std::collections::BTreeSet<_> =
            pool.heads.iter().map(|(o, _)| head_identity(o)).collect();
        let tail_ids: std::collections::BTreeSet<_> =
            pool.tails.iter().map(|o| o.entity_id.as_str()).collect();
        if head_ids.len() < 2 || (corrupt_tails && tail_ids.len() < 2) {
            return Err(Error::config(format!(
                "corruption pool needs >= 2 distinct heads and tails, got {} and {}",
                head_ids.len(),
                tail_ids.len()
            )));
        }
        Ok(pool)
    }

    /// Replaces the head or the tail (probability 1/2 each) with a
    /// different entity drawn uniformly from the pool. Head-only pools always
    /// replace the head.
    pub fn corrupt(&self, triplet: &TaskTriplet, rng: &mut impl Rng) -> TaskTriplet {
        let mut out = triplet.clone();
        if !self.corrupt_tails || rng.random_bool(0.5) {
            let own = head_identity(&triplet.tool);
            loop {
                let (obs, grasp) = &self.heads[rng.random_range(0..self.heads.len())];
                if head_identity(obs) != own {
                    out.tool = obs.clone();
                    out.grasp = *grasp;
                    break;
                }
            }
        } else {
            loop {
                let obs = &self.tails[rng.random_range(0..self.tails.len())];
                if obs.entity_id != triplet.target.entity_id {
                    out.target = obs.clone();
                    break;
                }
            }
        }
        out.positive = false;
        out
    }
}

fn check_aligned(batch: &[TaskTriplet], negatives: &[TaskTriplet]) -> Result<()> {
    if batch.len() != negatives.len() {
        return Err(Error::invalid(format!(
            "{} positives but {} negatives",
            batch.len(),
            negatives.len()
        )));
    }
    Ok(())
}

fn triplet_distance(model: &EmbeddingModel, t: &TaskTriplet) -> Result<f64> {
    crate::model::score(
        &model.encode_head(&t.tool)?,
        &model.encode_relation(&t.action)?,
        &model.encode_tail(&t.target)?,
    )
}

/// `sum [gamma + d(h + r, t) - d(h' + r, t')]_+` over aligned pairs.
pub fn loss_aff(
    model: &EmbeddingModel,
    batch: &[TaskTriplet],
    negatives: &[TaskTriplet],
    gamma: f64,
) -> Result<f64> {
    check_aligned(batch, negatives)?;
    let mut total = 0.0;
    for (p, n) in batch.iter().zip(negatives) {
        let hinge = gamma + triplet_distance(model, p)? - triplet_distance(model, n)?;
        total += hinge.max(0.0);
    }
    Ok(total)
}

fn cross_entropy(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = max + sum.ln() - scores[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn label(value: Option<usize>, classes: usize, what: &str, o: &Observation) -> Result<usize> {
    match value {
        Some(v) if v < classes => Ok(v),
        Some(v) => Err(Error::Data(format!(
            "{what} label {v} of '{}' exceeds {classes} classes",
            o.entity_id
        ))),
        None => Err(Error::Data(format!("'{}' has no {what} label", o.entity_id))),
    }
}

struct ToolLabels {
    object: usize,
    region: usize,
}

fn tool_labels(model: &EmbeddingModel, o: &Observation) -> Result<ToolLabels> {
    let h = model.header();
    Ok(ToolLabels {
        object: label(o.class_id, h.object_classes, "object class", o)?,
        region: label(o.grasp_region_id, h.region_classes, "grasp region", o)?,
    })
}

/// Mean cross-entropy of the tool head (object + grasp region) and of the
/// target head; null targets are left out of the latter.
pub fn loss_cls(model: &EmbeddingModel, batch: &[TaskTriplet]) -> Result<(f64, f64)> {
    let h = model.header();
    let (mut head, mut tail, mut tails) = (0.0, 0.0, 0usize);
    for t in batch {
        let labels = tool_labels(model, &t.tool)?;
        let scores = model.classify(&model.encode_head(&t.tool)?, crate::model::Head::Tool)?;
        head += cross_entropy(&scores.object, labels.object).0
            + cross_entropy(&scores.region, labels.region).0;
        if !t.target.is_null() {
            let y = label(t.target.class_id, h.target_classes, "target class", &t.target)?;
            let scores =
                model.classify(&model.encode_tail(&t.target)?, crate::model::Head::Target)?;
            tail += cross_entropy(&scores.object, y).0;
            tails += 1;
        }
    }
    let head = if batch.is_empty() { 0.0 } else { head / batch.len() as f64 };
    let tail = if tails == 0 { 0.0 } else { tail / tails as f64 };
    Ok((head, tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub aff: f64,
    pub head_cls: f64,
    pub tail_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(aff: f64, head_cls: f64, tail_cls: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            aff,
            head_cls,
            tail_cls,
            total: w.aff * aff + w.head_cls * head_cls + w.tail_cls * tail_cls,
        }
    }
}

/// Weighted sum of the ranking loss and both classification losses.
///
/// The classifiers see the observations of the corrupted triplets as well
/// as the positives. Class labels do not depend on whether a triplet holds,
/// and tool images that never take part in a correct triplet would
/// otherwise get no class supervision at all.
pub fn total_loss(
    model: &EmbeddingModel,
    batch: &[TaskTriplet],
    negatives: &[TaskTriplet],
    config: &TrainConfig,
) -> Result<f64> {
    let aff = loss_aff(model, batch, negatives, config.gamma)?;
    let observed: Vec<TaskTriplet> = batch.iter().chain(negatives).cloned().collect();
    let (head, tail) = loss_cls(model, &observed)?;
    Ok(LossBreakdown::weighted(aff, head, tail, &config.loss_weights).total)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of a unit-normalized output back to the raw encoder output.
fn unnormalize_grad(trace: &EntityTrace, d_embedding: &[f64]) -> Vec<f64> {
    let dot: f64 = trace
        .embedding
        .iter()
        .zip(d_embedding)
        .map(|(e, d)| e * d)
        .sum();
    trace
        .embedding
        .iter()
        .zip(d_embedding)
        .map(|(e, d)| (d - e * dot) / trace.norm)
        .collect()
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

struct TripletTrace {
    head: EntityTrace,
    relation: crate::model::MlpTrace,
    tail: EntityTrace,
    d_head: Vec<f64>,
    d_relation: Vec<f64>,
    d_tail: Vec<f64>,
}

impl TripletTrace {
    fn new(model: &EmbeddingModel, t: &TaskTriplet) -> Result<Self> {
        let p = &model.params;
        let head = model.trace_entity(Head::Tool, &t.tool)?;
        let relation = p.relation.trace(&model.one_hot(&t.action)?);
        let tail = model.trace_entity(Head::Target, &t.target)?;
        let d = model.dim();
        Ok(TripletTrace {
            head,
            relation,
            tail,
            d_head: vec![0.0; d],
            d_relation: vec![0.0; d],
            d_tail: vec![0.0; d],
        })
    }

    fn residual(&self) -> Vec<f64> {
        self.head
            .embedding
            .iter()
            .zip(&self.relation.output)
            .zip(&self.tail.embedding)
            .map(|((h, r), t)| h + r - t)
            .collect()
    }

    /// Adds `scale * d/d(h, r, t) of sum |h + r - t|`.
    fn push_distance_grad(&mut self, residual: &[f64], scale: f64) {
        for (i, &v) in residual.iter().enumerate() {
            let s = scale * sign(v);
            self.d_head[i] += s;
            self.d_relation[i] += s;
            self.d_tail[i] -= s;
        }
    }

    fn backward(&self, model: &EmbeddingModel, grad: &mut Parameters) {
        let p = &model.params;
        p.head.backward(
            &self.head.mlp,
            &unnormalize_grad(&self.head, &self.d_head),
            &mut grad.head,
        );
        p.relation
            .backward(&self.relation, &self.d_relation, &mut grad.relation);
        p.tail.backward(
            &self.tail.mlp,
            &unnormalize_grad(&self.tail, &self.d_tail),
            &mut grad.tail,
        );
    }
}

fn classifier_grad(
    layer: &Linear,
    input: &[f64],
    d_scores: &[f64],
    grad: &mut Linear,
    d_input: &mut [f64],
) {
    let d = layer.backward(input, d_scores, grad);
    add_scaled(d_input, &d, 1.0);
}

/// Cross-entropy of both classifiers on one triplet's observations, with
/// their gradients scaled and pushed into `trace`. Returns the unscaled
/// (tool, target) losses; the target term is zero for the null target.
fn classification_step(
    model: &EmbeddingModel,
    t: &TaskTriplet,
    trace: &mut TripletTrace,
    grad: &mut Parameters,
    head_scale: f64,
    tail_scale: f64,
) -> Result<(f64, f64)> {
    let header = model.header();
    let p = &model.params;
    let labels = tool_labels(model, &t.tool)?;
    let mut scores = p.head_cls.forward(&trace.head.embedding);
    let region_scores = scores.split_off(header.object_classes);
    let (lo, mut go) = cross_entropy(&scores, labels.object);
    let (lr, gr) = cross_entropy(&region_scores, labels.region);
    go.extend(gr);
    go.iter_mut().for_each(|g| *g *= head_scale);
    classifier_grad(&p.head_cls, &trace.head.embedding, &go, &mut grad.head_cls, &mut trace.d_head);

    if t.target.is_null() {
        return Ok((lo + lr, 0.0));
    }
    let y = label(t.target.class_id, header.target_classes, "target class", &t.target)?;
    let scores = p.tail_cls.forward(&trace.tail.embedding);
    let (lt, mut gt) = cross_entropy(&scores, y);
    gt.iter_mut().for_each(|g| *g *= tail_scale);
    classifier_grad(&p.tail_cls, &trace.tail.embedding, &gt, &mut grad.tail_cls, &mut trace.d_tail);
    Ok((lo + lr, lt))
}

/// Exact reverse-mode gradient of [`total_loss`] with respect to every
/// parameter. Subgradients at the hinge and L1 kinks are taken as zero.
pub fn gradient(
    model: &EmbeddingModel,
    batch: &[TaskTriplet],
    negatives: &[TaskTriplet],
    config: &TrainConfig,
) -> Result<(LossBreakdown, Parameters)> {
    check_aligned(batch, negatives)?;
    let w = config.loss_weights;
    let p = &model.params;
    let mut grad = p.zeros_like();
    let observed = 2 * batch.len();
    let non_null = batch
        .iter()
        .chain(negatives)
        .filter(|t| !t.target.is_null())
        .count();
    let head_scale = w.head_cls / observed as f64;
    let tail_scale = if non_null == 0 { 0.0 } else { w.tail_cls / non_null as f64 };
    let (mut aff, mut head_cls, mut tail_cls) = (0.0, 0.0, 0.0);

    for (pos, neg) in batch.iter().zip(negatives) {
        let mut tp = TripletTrace::new(model, pos)?;
        let mut tn = TripletTrace::new(model, neg)?;
        let (rp, rn) = (tp.residual(), tn.residual());
        let d_pos: f64 = rp.iter().map(|v| v.abs()).sum();
        let d_neg: f64 = rn.iter().map(|v| v.abs()).sum();
        let hinge = config.gamma + d_pos - d_neg;
        if hinge > 0.0 {
            aff += hinge;
            tp.push_distance_grad(&rp, w.aff);
            tn.push_distance_grad(&rn, -w.aff);
        }

        for (t, trace) in [(pos, &mut tp), (neg, &mut tn)] {
            let (h, tl) = classification_step(model, t, trace, &mut grad, head_scale, tail_scale)?;
            head_cls += h;
            tail_cls += tl;
        }

        tp.backward(model, &mut grad);
        tn.backward(model, &mut grad);
    }

    let head_cls = if batch.is_empty() { 0.0 } else { head_cls / observed as f64 };
    let tail_cls = if non_null == 0 { 0.0 } else { tail_cls / non_null as f64 };
    let loss = LossBreakdown::weighted(aff, head_cls, tail_cls, &w);
    if !loss.total.is_finite() {
        let at = p.first_non_finite().unwrap_or("loss");
        return Err(Error::Numeric(format!("non-finite loss {} (at {at})", loss.total)));
    }
    if let Some(name) = grad.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite gradient in '{name}'")));
    }
    Ok((loss, grad))
}

/// Losses of one epoch: the ranking loss per positive triplet, the
/// classification losses per classified observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub aff: f64,
    pub head_cls: f64,
    pub tail_cls: f64,
    pub total: f64,
}

pub fn loss_trace_csv(trace: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,l_aff,l_hcls,l_tcls,total\n");
    for e in trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch, e.aff, e.head_cls, e.tail_cls, e.total
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub trace: Vec<EpochLoss>,
}

/// Minibatch SGD over the positive triplets, with one fresh corruption per
/// positive per epoch. `progress` is called after every epoch.
pub fn train_with_progress(
    set: &TripletSet,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    config.validate()?;
    let positives: Vec<&TaskTriplet> = set.positives().collect();
    if positives.is_empty() {
        return Err(Error::Data("training set has no positive triplets".into()));
    }
    let pool = if set.triplets.iter().all(|t| t.target.is_null()) {
        CorruptionPool::head_only(&set.triplets)?
    } else {
        CorruptionPool::from_triplets(&set.triplets)?
    };
    let mut model = EmbeddingModel::init(set.header.model_header(
        config.hidden,
        config.dim,
        config.seed,
    ))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let n = positives.len() as f64;
    let mut order: Vec<usize> = (0..positives.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TaskTriplet> = chunk.iter().map(|&i| positives[i].clone()).collect();
            let negatives: Vec<TaskTriplet> =
                batch.iter().map(|t| pool.corrupt(t, &mut rng)).collect();
            let (loss, grad) = gradient(&model, &batch, &negatives, config).map_err(|e| {
                Error::Numeric(format!("training diverged at epoch {epoch}, batch {b}: {e}"))
            })?;
            let size = batch.len() as f64;
            sums.aff += loss.aff;
            sums.head_cls += loss.head_cls * size;
            sums.tail_cls += loss.tail_cls * size;
            model.params.sgd_step(&grad, config.learning_rate);
            if let Some(name) = model.params.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}, batch {b}: '{name}' is non-finite"
                )));
            }
        }
        let mean = LossBreakdown::weighted(
            sums.aff / n,
            sums.head_cls / n,
            sums.tail_cls / n,
            &config.loss_weights,
        );
        let row = EpochLoss {
            epoch,
            aff: mean.aff,
            head_cls: mean.head_cls,
            tail_cls: mean.tail_cls,
            total: mean.total,
        };
        progress(&row);
        trace.push(row);
    }
    Ok(TrainOutcome { model, trace })
}

pub fn train(set: &TripletSet, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(set, config, |_| {})
}
