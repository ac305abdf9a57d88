//! Triplet datasets and the synthetic world that generates them.
//!
//! A world is a set of tools (each split into graspable parts), target
//! objects and actions. Every action carries a predicate over the grasped
//! part's attributes and the target's attributes; enumerating all
//! combinations against these predicates gives the ground-truth labels.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GraspRect;
use crate::model::{ActionId, ModelHeader, Observation};

pub const ATTRIBUTE_COUNT: usize = 6;
/// Irrelevant per-image features appended to every observation.
pub const CLUTTER_COUNT: usize = 4;
/// Observation layout: object attributes, grasped-part attributes, clutter.
pub const FEATURE_LEN: usize = 2 * ATTRIBUTE_COUNT + CLUTTER_COUNT;
pub const PART_OFFSET: usize = ATTRIBUTE_COUNT;
pub const CLUTTER_OFFSET: usize = 2 * ATTRIBUTE_COUNT;

pub const TRIPLETS_FORMAT: &str = "taskgrasp-triplets";
pub const TRIPLETS_VERSION: u32 = 1;

const CELL_W: f64 = 160.0;
const CELL_H: f64 = 240.0;
const PART_SPACING: f64 = 45.0;
const GRASP_W: f64 = 30.0;
const GRASP_H: f64 = 16.0;
const MAX_WORLD_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Hardness,
    HandleLength,
    ContactArea,
    Absorbency,
    Sharpness,
    Containment,
}

impl Attribute {
    pub const ALL: [Attribute; ATTRIBUTE_COUNT] = [
        Attribute::Hardness,
        Attribute::HandleLength,
        Attribute::ContactArea,
        Attribute::Absorbency,
        Attribute::Sharpness,
        Attribute::Containment,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub type Attributes = [f64; ATTRIBUTE_COUNT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cmp {
    Gt,
    Lt,
}

impl Cmp {
    fn test(self, v: f64, threshold: f64) -> bool {
        match self {
            Cmp::Gt => v > threshold,
            Cmp::Lt => v < threshold,
        }
    }
}

/// One threshold test of an action predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "on", rename_all = "snake_case")]
pub enum Term {
    Part { attr: Attribute, cmp: Cmp, value: f64 },
    Target { attr: Attribute, cmp: Cmp, value: f64 },
    /// `|part.attr - target.attr| < tolerance`
    Compatible { attr: Attribute, tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDef {
    pub name: String,
    /// Binary actions take no target; they pair with the null observation.
    pub binary: bool,
    pub predicate: Vec<Term>,
}

impl ActionDef {
    /// Evaluates the predicate; `target` is `None` for the null target.
    pub fn holds(&self, part: &Attributes, target: Option<&Attributes>) -> bool {
        match (self.binary, target) {
            (true, Some(_)) | (false, None) => return false,
            _ => {}
        }
        self.predicate.iter().all(|term| match *term {
            Term::Part { attr, cmp, value } => cmp.test(part[attr.index()], value),
            Term::Target { attr, cmp, value } => {
                target.is_some_and(|t| cmp.test(t[attr.index()], value))
            }
            Term::Compatible { attr, tolerance } => {
                target.is_some_and(|t| (part[attr.index()] - t[attr.index()]).abs() < tolerance)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolPart {
    pub grasp_region_id: usize,
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub entity_id: String,
    pub parts: Vec<ToolPart>,
}

impl Tool {
    /// Object-level attributes: the mean over parts.
    pub fn attributes(&self) -> Attributes {
        let mut acc = [0.0; ATTRIBUTE_COUNT];
        for p in &self.parts {
            for (a, v) in acc.iter_mut().zip(p.attributes) {
                *a += v;
            }
        }
        acc.map(|a| a / self.parts.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub entity_id: String,
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub tools: Vec<Tool>,
    pub targets: Vec<Target>,
    pub actions: Vec<ActionDef>,
    pub noise_sigma: f64,
    /// Number of scenes (images of the full tool set) to enumerate.
    pub scenes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub tools: usize,
    pub parts_per_tool: usize,
    pub actions: usize,
    pub targets: usize,
    pub scenes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            tools: 8,
            parts_per_tool: 3,
            actions: 4,
            targets: 6,
            scenes: 50,
            noise_sigma: 0.05,
            seed: 42,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tools < 2 {
            return Err(Error::config("tools: need at least 2 tools"));
        }
        if self.actions < 2 {
            return Err(Error::config("actions: need at least 2 actions"));
        }
        if self.targets < 1 {
            return Err(Error::config("targets: need at least 1 target"));
        }
        if self.parts_per_tool < 1 {
            return Err(Error::config("parts_per_tool: need at least 1 part"));
        }
        if self.scenes < 1 {
            return Err(Error::config("scenes: need at least 1 scene"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma: must be a finite value >= 0"));
        }
        Ok(())
    }
}

use Attribute::*;

type PartTemplate = [f64; ATTRIBUTE_COUNT];

// Part 0 is the far end of the handle, part 2 the working end. Part
// attributes describe what the tool offers when held at that part.
const TOOL_TEMPLATES: [(&str, [PartTemplate; 3]); 8] = [
    (
        "hammer",
        [
            [0.90, 0.90, 0.80, 0.00, 0.10, 0.00],
            [0.90, 0.50, 0.80, 0.00, 0.10, 0.00],
            [0.90, 0.10, 0.20, 0.00, 0.10, 0.00],
        ],
    ),
    (
        "mallet",
        [
            [0.78, 0.80, 0.90, 0.00, 0.05, 0.00],
            [0.78, 0.45, 0.90, 0.00, 0.05, 0.00],
            [0.78, 0.10, 0.30, 0.00, 0.05, 0.00],
        ],
    ),
    (
        "wrench",
        [
            [0.85, 0.70, 0.35, 0.00, 0.10, 0.00],
            [0.85, 0.40, 0.35, 0.00, 0.10, 0.00],
            [0.85, 0.10, 0.20, 0.00, 0.10, 0.00],
        ],
    ),
    (
        "pliers",
        [
            [0.80, 0.50, 0.25, 0.00, 0.80, 0.00],
            [0.80, 0.25, 0.20, 0.00, 0.40, 0.00],
            [0.80, 0.10, 0.15, 0.00, 0.20, 0.00],
        ],
    ),
    (
        "knife",
        [
            [0.70, 0.60, 0.30, 0.00, 0.95, 0.00],
            [0.70, 0.40, 0.20, 0.00, 0.90, 0.00],
            [0.70, 0.10, 0.20, 0.00, 0.30, 0.00],
        ],
    ),
    (
        "sponge",
        [
            [0.05, 0.10, 0.80, 0.85, 0.00, 0.10],
            [0.05, 0.10, 0.70, 0.85, 0.00, 0.10],
            [0.05, 0.10, 0.60, 0.85, 0.00, 0.10],
        ],
    ),
    (
        "steel_wool",
        [
            [0.50, 0.10, 0.80, 0.25, 0.10, 0.00],
            [0.50, 0.10, 0.70, 0.25, 0.10, 0.00],
            [0.50, 0.10, 0.60, 0.25, 0.10, 0.00],
        ],
    ),
    (
        "brush",
        [
            [0.60, 0.50, 0.70, 0.55, 0.05, 0.00],
            [0.60, 0.35, 0.60, 0.55, 0.05, 0.00],
            [0.60, 0.10, 0.20, 0.55, 0.05, 0.00],
        ],
    ),
];

const TARGET_TEMPLATES: [(&str, [f64; ATTRIBUTE_COUNT]); 6] = [
    ("nail", [0.90, 0.00, 0.10, 0.00, 0.60, 0.00]),
    ("mug", [0.60, 0.00, 0.40, 0.85, 0.00, 0.90]),
    ("plate", [0.70, 0.00, 0.60, 0.25, 0.00, 0.30]),
    ("shoes", [0.50, 0.00, 0.50, 0.55, 0.00, 0.50]),
    ("bread", [0.20, 0.00, 0.40, 0.60, 0.00, 0.00]),
    ("cardboard", [0.30, 0.00, 0.80, 0.40, 0.00, 0.10]),
];

const TEMPLATE_JITTER: f64 = 0.04;

fn action_library() -> Vec<ActionDef> {
    let part = |attr, cmp, value| Term::Part { attr, cmp, value };
    let target = |attr, cmp, value| Term::Target { attr, cmp, value };
    vec![
        ActionDef {
            name: "hand-over".into(),
            binary: true,
            predicate: vec![
                part(HandleLength, Cmp::Lt, 0.3),
                part(Sharpness, Cmp::Lt, 0.5),
                part(Hardness, Cmp::Gt, 0.75),
                part(ContactArea, Cmp::Lt, 0.25),
            ],
        },
        ActionDef {
            name: "knock".into(),
            binary: false,
            predicate: vec![
                part(Hardness, Cmp::Gt, 0.7),
                part(HandleLength, Cmp::Gt, 0.6),
                part(ContactArea, Cmp::Gt, 0.5),
                target(Hardness, Cmp::Gt, 0.8),
            ],
        },
        ActionDef {
            name: "clean".into(),
            binary: false,
            predicate: vec![
                part(ContactArea, Cmp::Gt, 0.4),
                Term::Compatible {
                    attr: Absorbency,
                    tolerance: 0.15,
                },
                target(Absorbency, Cmp::Gt, 0.1),
                target(Containment, Cmp::Gt, 0.25),
            ],
        },
        ActionDef {
            name: "cut".into(),
            binary: false,
            predicate: vec![
                part(Sharpness, Cmp::Gt, 0.7),
                part(HandleLength, Cmp::Gt, 0.3),
                target(Hardness, Cmp::Lt, 0.25),
            ],
        },
        ActionDef {
            name: "pull".into(),
            binary: false,
            predicate: vec![
                part(Hardness, Cmp::Gt, 0.6),
                part(HandleLength, Cmp::Gt, 0.6),
                target(Hardness, Cmp::Gt, 0.8),
            ],
        },
    ]
}

fn jittered(base: &[f64; ATTRIBUTE_COUNT], rng: &mut ChaCha8Rng) -> Attributes {
    let j = Uniform::new_inclusive(-TEMPLATE_JITTER, TEMPLATE_JITTER).expect("valid range");
    base.map(|v| (v + j.sample(rng)).clamp(0.0, 1.0))
}

fn random_attributes(rng: &mut ChaCha8Rng) -> Attributes {
    std::array::from_fn(|_| rng.random::<f64>())
}

fn random_action(i: usize, rng: &mut ChaCha8Rng) -> ActionDef {
    let a = Attribute::ALL[rng.random_range(0..ATTRIBUTE_COUNT)];
    let mut b = Attribute::ALL[rng.random_range(0..ATTRIBUTE_COUNT)];
    if b == a {
        b = Attribute::ALL[(a.index() + 1) % ATTRIBUTE_COUNT];
    }
    ActionDef {
        name: format!("action{i}"),
        binary: false,
        predicate: vec![
            Term::Part {
                attr: a,
                cmp: Cmp::Gt,
                value: rng.random_range(0.3..0.6),
            },
            Term::Part {
                attr: b,
                cmp: Cmp::Gt,
                value: rng.random_range(0.3..0.6),
            },
        ],
    }
}

impl SyntheticWorld {
    /// True when every action holds for at least one (part, target) pair.
    pub fn all_actions_satisfiable(&self) -> bool {
        self.actions
            .iter()
            .all(|a| self.unsatisfiable_reason(a).is_none())
    }

    fn unsatisfiable_reason(&self, a: &ActionDef) -> Option<String> {
        let parts = self.tools.iter().flat_map(|t| &t.parts);
        let ok = if a.binary {
            parts.clone().any(|p| a.holds(&p.attributes, None))
        } else {
            parts
                .clone()
                .any(|p| self.targets.iter().any(|t| a.holds(&p.attributes, Some(&t.attributes))))
        };
        (!ok).then(|| format!("action '{}' is unsatisfiable", a.name))
    }

    pub fn action(&self, index: usize) -> Option<&ActionDef> {
        self.actions.get(index)
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format: TRIPLETS_FORMAT.to_string(),
            version: TRIPLETS_VERSION,
            feature_len: FEATURE_LEN,
            actions: self
                .actions
                .iter()
                .map(|a| ActionInfo {
                    name: a.name.clone(),
                    binary: a.binary,
                })
                .collect(),
            object_classes: self.tools.iter().map(|t| t.entity_id.clone()).collect(),
            region_classes: self.tools.iter().map(|t| t.parts.len()).max().unwrap_or(0),
            target_classes: self.targets.iter().map(|t| t.entity_id.clone()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: SyntheticWorld = serde_json::from_str(text)?;
        if w.tools.is_empty() || w.actions.is_empty() {
            return Err(Error::config("world needs tools and actions"));
        }
        Ok(w)
    }
}

/// Builds a world from counts and a seed. The first tools, targets and
/// actions come from fixed templates (with small attribute jitter); any
/// beyond those are random.
pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let library = action_library();
    let mut last_reason = String::new();
    for _ in 0..MAX_WORLD_ATTEMPTS {
        let tools: Vec<Tool> = (0..spec.tools)
            .map(|i| {
                let template = TOOL_TEMPLATES.get(i);
                let parts = (0..spec.parts_per_tool)
                    .map(|p| ToolPart {
                        grasp_region_id: p,
                        attributes: match template.and_then(|(_, parts)| parts.get(p)) {
                            Some(base) => jittered(base, &mut rng),
                            None => random_attributes(&mut rng),
                        },
                    })
                    .collect();
                Tool {
                    entity_id: template
                        .map(|(n, _)| n.to_string())
                        .unwrap_or_else(|| format!("tool{i}")),
                    parts,
                }
            })
            .collect();
        let targets = (0..spec.targets)
            .map(|i| match TARGET_TEMPLATES.get(i) {
                Some((name, base)) => Target {
                    entity_id: name.to_string(),
                    attributes: jittered(base, &mut rng),
                },
                None => Target {
                    entity_id: format!("target{i}"),
                    attributes: random_attributes(&mut rng),
                },
            })
            .collect();
        let actions = (0..spec.actions)
            .map(|i| {
                library
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| random_action(i, &mut rng))
            })
            .collect();
        let world = SyntheticWorld {
            tools,
            targets,
            actions,
            noise_sigma: spec.noise_sigma,
            scenes: spec.scenes,
            seed: spec.seed,
        };
        match world.actions.iter().find_map(|a| world.unsatisfiable_reason(a)) {
            None => return Ok(world),
            Some(reason) => last_reason = reason,
        }
    }
    Err(Error::config(format!(
        "{last_reason} after {MAX_WORLD_ATTEMPTS} attempts"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionInfo {
    pub name: String,
    pub binary: bool,
}

/// First line of a triplet file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub feature_len: usize,
    pub actions: Vec<ActionInfo>,
    pub object_classes: Vec<String>,
    pub region_classes: usize,
    pub target_classes: Vec<String>,
}

impl DatasetHeader {
    pub fn action_ids(&self) -> Vec<ActionId> {
        self.actions
            .iter()
            .enumerate()
            .map(|(i, a)| ActionId::new(i, a.name.clone()))
            .collect()
    }

    pub fn model_header(&self, hidden: usize, dim: usize, seed: u64) -> ModelHeader {
        ModelHeader {
            feature_len: self.feature_len,
            hidden,
            dim,
            num_actions: self.actions.len(),
            action_names: self.actions.iter().map(|a| a.name.clone()).collect(),
            object_classes: self.object_classes.len(),
            region_classes: self.region_classes,
            target_classes: self.target_classes.len(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTriplet {
    /// Scene (image set) the observations were taken from.
    pub scene: usize,
    pub tool: Observation,
    pub grasp: GraspRect,
    pub action: ActionId,
    pub target: Observation,
    pub positive: bool,
}

impl TaskTriplet {
    /// Identity of the tool image: scene, tool and grasped part.
    pub fn tool_image(&self) -> (usize, &str, Option<usize>) {
        (self.scene, &self.tool.entity_id, self.tool.grasp_region_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub header: DatasetHeader,
    pub triplets: Vec<TaskTriplet>,
}

impl TripletSet {
    pub fn positives(&self) -> impl Iterator<Item = &TaskTriplet> {
        self.triplets.iter().filter(|t| t.positive)
    }

    /// Copy with every target replaced by the null observation.
    pub fn target_blind(&self) -> TripletSet {
        let null = Observation::null(self.header.feature_len);
        TripletSet {
            header: self.header.clone(),
            triplets: self
                .triplets
                .iter()
                .map(|t| TaskTriplet {
                    target: null.clone(),
                    ..t.clone()
                })
                .collect(),
        }
    }
}

struct SceneLayout {
    cols: usize,
}

impl SceneLayout {
    fn new(tools: usize) -> Self {
        let cols = ((2 * tools) as f64).sqrt().ceil().max(1.0) as usize;
        SceneLayout { cols }
    }

    fn cell_center(&self, i: usize) -> (f64, f64) {
        let (col, row) = (i % self.cols, i / self.cols);
        ((col as f64 + 0.5) * CELL_W, (row as f64 + 0.5) * CELL_H)
    }
}

fn noisy(values: &[f64], noise: &Normal<f64>, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    out.extend(values.iter().map(|v| v + noise.sample(rng)));
}

/// Enumerates every (tool part, action, target) combination in every scene.
///
/// Tool observations are `[object attributes, part attributes, clutter]`
/// plus Gaussian noise on the attribute blocks; target observations use the
/// same layout with a zero part block. Binary actions are paired only with
/// the null target.
pub fn enumerate_triplets(world: &SyntheticWorld) -> Result<TripletSet> {
    let sigma = world.noise_sigma;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config("noise_sigma: must be a finite value >= 0"));
    }
    let header = world.header();
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let layout = SceneLayout::new(world.tools.len());
    let null = Observation::null(FEATURE_LEN);
    let actions = header.action_ids();
    let mut triplets = Vec::new();

    for scene in 0..world.scenes {
        let targets: Vec<Observation> = world
            .targets
            .iter()
            .enumerate()
            .map(|(class, t)| {
                let mut features = Vec::with_capacity(FEATURE_LEN);
                noisy(&t.attributes, &noise, &mut rng, &mut features);
                features.extend([0.0; ATTRIBUTE_COUNT]);
                features.extend((0..CLUTTER_COUNT).map(|_| rng.random::<f64>()));
                Observation {
                    features,
                    entity_id: t.entity_id.clone(),
                    class_id: Some(class),
                    grasp_region_id: None,
                }
            })
            .collect();

        for (class, tool) in world.tools.iter().enumerate() {
            let (cx, cy) = layout.cell_center(class);
            let cx = cx + rng.random_range(-10.0..10.0);
            let cy = cy + rng.random_range(-10.0..10.0);
            let axis = rng.random_range(0.0..PI);
            let object_attrs = tool.attributes();
            let n_parts = tool.parts.len() as f64;
            for part in &tool.parts {
                let offset = (part.grasp_region_id as f64 - (n_parts - 1.0) / 2.0) * PART_SPACING;
                let grasp = GraspRect::new(
                    cx + offset * axis.cos() + 20.0 * noise.sample(&mut rng),
                    cy + offset * axis.sin() + 20.0 * noise.sample(&mut rng),
                    axis + FRAC_PI_2 + noise.sample(&mut rng),
                    GRASP_W,
                    GRASP_H,
                    rng.random_range(0.6..=1.0),
                )?;
                let mut features = Vec::with_capacity(FEATURE_LEN);
                noisy(&object_attrs, &noise, &mut rng, &mut features);
                noisy(&part.attributes, &noise, &mut rng, &mut features);
                features.extend((0..CLUTTER_COUNT).map(|_| rng.random::<f64>()));
                let tool_obs = Observation {
                    features,
                    entity_id: tool.entity_id.clone(),
                    class_id: Some(class),
                    grasp_region_id: Some(part.grasp_region_id),
                };
                for (def, action) in world.actions.iter().zip(&actions) {
                    if def.binary {
                        triplets.push(TaskTriplet {
                            scene,
                            tool: tool_obs.clone(),
                            grasp,
                            action: action.clone(),
                            target: null.clone(),
                            positive: def.holds(&part.attributes, None),
                        });
                        continue;
                    }
                    for (target, target_obs) in world.targets.iter().zip(&targets) {
                        triplets.push(TaskTriplet {
                            scene,
                            tool: tool_obs.clone(),
                            grasp,
                            action: action.clone(),
                            target: target_obs.clone(),
                            positive: def.holds(&part.attributes, Some(&target.attributes)),
                        });
                    }
                }
            }
        }
    }
    Ok(TripletSet { header, triplets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Random over tool images; the same tool may appear on both sides.
    ImageWise,
    /// Whole tools are held out.
    ObjectWise,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image-wise" | "image" => Ok(SplitMode::ImageWise),
            "object-wise" | "object" => Ok(SplitMode::ObjectWise),
            other => Err(Error::invalid(format!(
                "unknown split mode '{other}' (expected image-wise or object-wise)"
            ))),
        }
    }
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub header: DatasetHeader,
    pub train: Vec<TaskTriplet>,
    pub test: Vec<TaskTriplet>,
    pub mode: SplitMode,
}

impl DatasetSplit {
    pub fn train_set(&self) -> TripletSet {
        TripletSet {
            header: self.header.clone(),
            triplets: self.train.clone(),
        }
    }

    pub fn test_set(&self) -> TripletSet {
        TripletSet {
            header: self.header.clone(),
            triplets: self.test.clone(),
        }
    }
}

/// Splits triplets into train and test; `fraction` is the share of units
/// (tool images or tool entities) assigned to training.
pub fn split(set: &TripletSet, mode: SplitMode, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let key = |t: &TaskTriplet| -> String {
        match mode {
            SplitMode::ImageWise => format!(
                "{}\u{1f}{}\u{1f}{:?}",
                t.scene, t.tool.entity_id, t.tool.grasp_region_id
            ),
            SplitMode::ObjectWise => t.tool.entity_id.clone(),
        }
    };
    let units: BTreeSet<String> = set.triplets.iter().map(key).collect();
    let mut units: Vec<String> = units.into_iter().collect();
    if mode == SplitMode::ObjectWise && units.len() < 2 {
        return Err(Error::config(
            "object-wise split needs at least 2 tool entities",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);
    let mut n_train = (fraction * units.len() as f64).round() as usize;
    if mode == SplitMode::ObjectWise {
        n_train = n_train.clamp(1, units.len() - 1);
    }
    let train_units: std::collections::HashSet<&String> = units[..n_train].iter().collect();
    let (train, test) = set
        .triplets
        .iter()
        .cloned()
        .partition(|t| train_units.contains(&key(t)));
    Ok(DatasetSplit {
        header: set.header.clone(),
        train,
        test,
        mode,
    })
}

pub fn triplets_to_string(set: &TripletSet) -> Result<String> {
    let mut out = serde_json::to_string(&set.header)?;
    out.push('\n');
    for t in &set.triplets {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_triplets(set: &TripletSet, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, triplets_to_string(set)?.as_bytes())
}

pub fn parse_triplets(reader: impl BufRead) -> Result<TripletSet> {
    let mut lines = reader.lines().enumerate();
    let header: DatasetHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::Line {
                line: 1,
                msg: e.to_string(),
            })?;
            serde_json::from_str(&line).map_err(|e| Error::Line {
                line: 1,
                msg: format!("bad header: {e}"),
            })?
        }
        None => return Err(Error::Data("missing header line".into())),
    };
    if header.format != TRIPLETS_FORMAT || header.version != TRIPLETS_VERSION {
        return Err(Error::Schema(format!(
            "unsupported triplet file '{}' v{}",
            header.format, header.version
        )));
    }
    let mut triplets = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let line = line.map_err(|e| Error::Line {
            line: n,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TaskTriplet = serde_json::from_str(&line).map_err(|e| Error::Line {
            line: n,
            msg: e.to_string(),
        })?;
        for (role, o) in [("tool", &t.tool), ("target", &t.target)] {
            if o.features.len() != header.feature_len {
                return Err(Error::Schema(format!(
                    "line {n}: {role} has {} features, header declares {}",
                    o.features.len(),
                    header.feature_len
                )));
            }
        }
        if t.tool.grasp_region_id.is_none() {
            return Err(Error::Line {
                line: n,
                msg: "tool observation has no grasp_region_id".into(),
            });
        }
        if t.action.index >= header.actions.len() || header.actions[t.action.index].name != t.action.name
        {
            return Err(Error::Line {
                line: n,
                msg: format!("action '{}' is not in the vocabulary", t.action.name),
            });
        }
        triplets.push(t);
    }
    Ok(TripletSet { header, triplets })
}

pub fn load_triplets(path: &Path) -> Result<TripletSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(BufReader::new(file))
}

/// Human-readable count summary.
pub fn summarize(set: &TripletSet) -> String {
    let mut per_action: HashMap<&str, (usize, usize)> = HashMap::new();
    for t in &set.triplets {
        let e = per_action.entry(&t.action.name).or_default();
        e.0 += 1;
        e.1 += t.positive as usize;
    }
    let mut s = format!(
        "{} triplets, {} positive\n",
        set.triplets.len(),
        set.positives().count()
    );
    for a in &set.header.actions {
        let (n, p) = per_action.get(a.name.as_str()).copied().unwrap_or((0, 0));
        let _ = writeln!(s, "  {:<12} {n:>6} triplets {p:>5} positive", a.name);
    }
    s
}
