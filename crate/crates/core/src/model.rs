//! Embedding encoders for tools-with-grasp, actions and targets.
//!
//! Each entity encoder is a two-layer affine map with a ReLU in between. Tool
//! and target embeddings are projected onto the unit sphere; action
//! embeddings are not, since they carry the translation between the two.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entity id of the reserved blank target used by binary actions.
pub const NULL_ENTITY: &str = "none";

/// Added to the distance before inverting it into a suitability score.
pub const SUITABILITY_EPS: f64 = 1e-9;

pub const CHECKPOINT_FORMAT: &str = "taskgrasp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    pub entity_id: String,
    /// Object category; `None` for the null target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    /// Grasped part; only tool observations carry one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_region_id: Option<usize>,
}

impl Observation {
    pub fn null(feature_len: usize) -> Self {
        Observation {
            features: vec![0.0; feature_len],
            entity_id: NULL_ENTITY.to_string(),
            class_id: None,
            grasp_region_id: None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.entity_id == NULL_ENTITY
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionId {
    pub index: usize,
    pub name: String,
}

impl ActionId {
    pub fn new(index: usize, name: impl Into<String>) -> Self {
        ActionId {
            index,
            name: name.into(),
        }
    }
}

/// Dense affine layer, `out = weight * input + bias`, weight row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        Linear {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: (0..outputs).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub(crate) fn backward(&self, x: &[f64], d_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut d_in = vec![0.0; self.inputs];
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                d_in[i] += g * row[i];
            }
        }
        d_in
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

/// Intermediate values of one [`Mlp`] pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct MlpTrace {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    fn glorot(inputs: usize, hidden: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            first: Linear::glorot(inputs, hidden, rng),
            second: Linear::glorot(hidden, outputs, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            first: Linear::zeros(self.first.inputs, self.first.outputs),
            second: Linear::zeros(self.second.inputs, self.second.outputs),
        }
    }

    pub(crate) fn trace(&self, x: &[f64]) -> MlpTrace {
        let hidden: Vec<f64> = self.first.forward(x).into_iter().map(|v| v.max(0.0)).collect();
        let output = self.second.forward(&hidden);
        MlpTrace {
            input: x.to_vec(),
            hidden,
            output,
        }
    }

    pub(crate) fn backward(&self, trace: &MlpTrace, d_out: &[f64], grad: &mut Mlp) {
        let mut d_hidden = self.second.backward(&trace.hidden, d_out, &mut grad.second);
        for (d, &h) in d_hidden.iter_mut().zip(&trace.hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        self.first.backward(&trace.input, &d_hidden, &mut grad.first);
    }
}

/// Shapes, vocabulary and initialization seed of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub feature_len: usize,
    pub hidden: usize,
    pub dim: usize,
    pub num_actions: usize,
    pub action_names: Vec<String>,
    pub object_classes: usize,
    pub region_classes: usize,
    pub target_classes: usize,
    pub seed: u64,
}

/// Every trainable tensor of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub head: Mlp,
    pub relation: Mlp,
    pub tail: Mlp,
    pub head_cls: Linear,
    pub tail_cls: Linear,
}

impl Parameters {
    pub fn zeros_like(&self) -> Self {
        Parameters {
            head: self.head.zeros_like(),
            relation: self.relation.zeros_like(),
            tail: self.tail.zeros_like(),
            head_cls: Linear::zeros(self.head_cls.inputs, self.head_cls.outputs),
            tail_cls: Linear::zeros(self.tail_cls.inputs, self.tail_cls.outputs),
        }
    }

    /// Named flat views over all tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("head.first.weight", &self.head.first.weight),
            ("head.first.bias", &self.head.first.bias),
            ("head.second.weight", &self.head.second.weight),
            ("head.second.bias", &self.head.second.bias),
            ("relation.first.weight", &self.relation.first.weight),
            ("relation.first.bias", &self.relation.first.bias),
            ("relation.second.weight", &self.relation.second.weight),
            ("relation.second.bias", &self.relation.second.bias),
            ("tail.first.weight", &self.tail.first.weight),
            ("tail.first.bias", &self.tail.first.bias),
            ("tail.second.weight", &self.tail.second.weight),
            ("tail.second.bias", &self.tail.second.bias),
            ("head_cls.weight", &self.head_cls.weight),
            ("head_cls.bias", &self.head_cls.bias),
            ("tail_cls.weight", &self.tail_cls.weight),
            ("tail_cls.bias", &self.tail_cls.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("head.first.weight", &mut self.head.first.weight),
            ("head.first.bias", &mut self.head.first.bias),
            ("head.second.weight", &mut self.head.second.weight),
            ("head.second.bias", &mut self.head.second.bias),
            ("relation.first.weight", &mut self.relation.first.weight),
            ("relation.first.bias", &mut self.relation.first.bias),
            ("relation.second.weight", &mut self.relation.second.weight),
            ("relation.second.bias", &mut self.relation.second.bias),
            ("tail.first.weight", &mut self.tail.first.weight),
            ("tail.first.bias", &mut self.tail.first.bias),
            ("tail.second.weight", &mut self.tail.second.weight),
            ("tail.second.bias", &mut self.tail.second.bias),
            ("head_cls.weight", &mut self.head_cls.weight),
            ("head_cls.bias", &mut self.head_cls.bias),
            ("tail_cls.weight", &mut self.tail_cls.weight),
            ("tail_cls.bias", &mut self.tail_cls.bias),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self -= step * grad`.
    pub fn sgd_step(&mut self, grad: &Parameters, step: f64) {
        for ((_, p), (_, g)) in self.tensors_mut().into_iter().zip(grad.tensors()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= step * gv;
            }
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

/// Which classification head to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Tool,
    Target,
}

/// Raw (pre-softmax) classifier outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub object: Vec<f64>,
    /// Grasp-region scores; empty for the target head.
    pub region: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    header: ModelHeader,
    pub params: Parameters,
}

pub(crate) struct EntityTrace {
    pub mlp: MlpTrace,
    pub norm: f64,
    pub embedding: Vec<f64>,
}

impl EmbeddingModel {
    /// Glorot-uniform weights and biases drawn from `header.seed`. Random
    /// biases keep the all-zero null target from encoding to the zero vector.
    pub fn init(header: ModelHeader) -> Result<Self> {
        validate_header(&header)?;
        let mut rng = ChaCha8Rng::seed_from_u64(header.seed);
        let (f, hd, d) = (header.feature_len, header.hidden, header.dim);
        let head = Mlp::glorot(f, hd, d, &mut rng);
        let relation = Mlp::glorot(header.num_actions, hd, d, &mut rng);
        let tail = Mlp::glorot(f, hd, d, &mut rng);
        let head_cls = Linear::glorot(d, header.object_classes + header.region_classes, &mut rng);
        let tail_cls = Linear::glorot(d, header.target_classes, &mut rng);
        Ok(EmbeddingModel {
            header,
            params: Parameters {
                head,
                relation,
                tail,
                head_cls,
                tail_cls,
            },
        })
    }

    pub fn header(&self) -> &ModelHeader {
        &self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn actions(&self) -> Vec<ActionId> {
        self.header
            .action_names
            .iter()
            .enumerate()
            .map(|(i, n)| ActionId::new(i, n.clone()))
            .collect()
    }

    pub fn action_by_name(&self, name: &str) -> Option<ActionId> {
        self.header
            .action_names
            .iter()
            .position(|n| n == name)
            .map(|i| ActionId::new(i, name))
    }

    fn check_features(&self, o: &Observation) -> Result<()> {
        if o.features.len() != self.header.feature_len {
            return Err(Error::config(format!(
                "observation '{}' has {} features, model expects {}",
                o.entity_id,
                o.features.len(),
                self.header.feature_len
            )));
        }
        if o.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "observation '{}' has non-finite features",
                o.entity_id
            )));
        }
        Ok(())
    }

    pub(crate) fn trace_entity(&self, which: Head, o: &Observation) -> Result<EntityTrace> {
        self.check_features(o)?;
        let mlp = match which {
            Head::Tool => &self.params.head,
            Head::Target => &self.params.tail,
        };
        let trace = mlp.trace(&o.features);
        let norm = trace.output.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!(
                "embedding of '{}' has norm {norm}",
                o.entity_id
            )));
        }
        let embedding = trace.output.iter().map(|v| v / norm).collect();
        Ok(EntityTrace {
            mlp: trace,
            norm,
            embedding,
        })
    }

    pub(crate) fn one_hot(&self, a: &ActionId) -> Result<Vec<f64>> {
        if a.index >= self.header.num_actions {
            return Err(Error::invalid(format!(
                "action index {} out of range (vocabulary has {})",
                a.index, self.header.num_actions
            )));
        }
        let mut x = vec![0.0; self.header.num_actions];
        x[a.index] = 1.0;
        Ok(x)
    }

    /// Unit-norm embedding of a tool observation with its grasp.
    pub fn encode_head(&self, o_g: &Observation) -> Result<Vec<f64>> {
        Ok(self.trace_entity(Head::Tool, o_g)?.embedding)
    }

    /// Unit-norm embedding of a target observation.
    pub fn encode_tail(&self, o_t: &Observation) -> Result<Vec<f64>> {
        Ok(self.trace_entity(Head::Target, o_t)?.embedding)
    }

    /// Translation vector of an action (not normalized).
    pub fn encode_relation(&self, a: &ActionId) -> Result<Vec<f64>> {
        let x = self.one_hot(a)?;
        Ok(self.params.relation.trace(&x).output)
    }

    pub fn classify(&self, embedding: &[f64], which: Head) -> Result<ClassScores> {
        if embedding.len() != self.header.dim {
            return Err(Error::invalid(format!(
                "embedding has length {}, expected {}",
                embedding.len(),
                self.header.dim
            )));
        }
        Ok(match which {
            Head::Tool => {
                let mut all = self.params.head_cls.forward(embedding);
                let region = all.split_off(self.header.object_classes);
                ClassScores {
                    object: all,
                    region,
                }
            }
            Head::Target => ClassScores {
                object: self.params.tail_cls.forward(embedding),
                region: Vec::new(),
            },
        })
    }

    pub fn save_json(&self) -> Result<String> {
        let params = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.to_vec()))
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            header: self.header.clone(),
            params,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn load_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!(
                "not a checkpoint file (format '{}')",
                file.format
            )));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        let mut model = EmbeddingModel::init(file.header)?;
        let mut params = file.params;
        for (name, tensor) in model.params.tensors_mut() {
            let stored = params
                .remove(name)
                .ok_or_else(|| Error::Schema(format!("checkpoint is missing '{name}'")))?;
            if stored.len() != tensor.len() {
                return Err(Error::Schema(format!(
                    "'{name}' has {} values, expected {}",
                    stored.len(),
                    tensor.len()
                )));
            }
            *tensor = stored;
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Schema(format!("unknown tensor '{extra}'")));
        }
        if let Some(bad) = model.params.first_non_finite() {
            return Err(Error::Schema(format!("'{bad}' holds non-finite values")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.save_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::load_json(&text)
    }
}

fn validate_header(h: &ModelHeader) -> Result<()> {
    let positive = [
        ("feature_len", h.feature_len),
        ("hidden", h.hidden),
        ("dim", h.dim),
        ("num_actions", h.num_actions),
        ("object_classes", h.object_classes),
        ("region_classes", h.region_classes),
        ("target_classes", h.target_classes),
    ];
    for (name, v) in positive {
        if v == 0 {
            return Err(Error::config(format!("{name} must be positive")));
        }
    }
    if h.action_names.len() != h.num_actions {
        return Err(Error::config(format!(
            "{} action names for {} actions",
            h.action_names.len(),
            h.num_actions
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    header: ModelHeader,
    params: BTreeMap<String, Vec<f64>>,
}

/// Translational L1 distance `sum |h + r - t|`.
pub fn score(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    if h.len() != r.len() || r.len() != t.len() {
        return Err(Error::invalid(format!(
            "score dimensions differ: {} / {} / {}",
            h.len(),
            r.len(),
            t.len()
        )));
    }
    Ok(h.iter()
        .zip(r)
        .zip(t)
        .map(|((h, r), t)| (h + r - t).abs())
        .sum())
}

/// Grasp suitability `1 / (d + eps)`.
pub fn suitability(d: f64) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::invalid(format!("distance must be non-negative, got {d}")));
    }
    Ok(1.0 / (d + SUITABILITY_EPS))
}

/// Anything that can score a (tool, action, target) triplet by distance;
/// lower is more plausible.
pub trait TripletScorer {
    fn head_distances(
        &self,
        heads: &[&Observation],
        action: &ActionId,
        target: &Observation,
    ) -> Result<Vec<f64>>;

    fn relation_distances(
        &self,
        head: &Observation,
        actions: &[ActionId],
        target: &Observation,
    ) -> Result<Vec<f64>>;

    fn tail_distances(
        &self,
        head: &Observation,
        action: &ActionId,
        tails: &[&Observation],
    ) -> Result<Vec<f64>>;
}

impl TripletScorer for EmbeddingModel {
    fn head_distances(
        &self,
        heads: &[&Observation],
        action: &ActionId,
        target: &Observation,
    ) -> Result<Vec<f64>> {
        let r = self.encode_relation(action)?;
        let t = self.encode_tail(target)?;
        heads
            .iter()
            .map(|o| score(&self.encode_head(o)?, &r, &t))
            .collect()
    }

    fn relation_distances(
        &self,
        head: &Observation,
        actions: &[ActionId],
        target: &Observation,
    ) -> Result<Vec<f64>> {
        let h = self.encode_head(head)?;
        let t = self.encode_tail(target)?;
        actions
            .iter()
            .map(|a| score(&h, &self.encode_relation(a)?, &t))
            .collect()
    }

    fn tail_distances(
        &self,
        head: &Observation,
        action: &ActionId,
        tails: &[&Observation],
    ) -> Result<Vec<f64>> {
        let h = self.encode_head(head)?;
        let r = self.encode_relation(action)?;
        tails
            .iter()
            .map(|o| score(&h, &r, &self.encode_tail(o)?))
            .collect()
    }
}
