//! Grasp metrics and link-prediction ranking metrics.
//!
//! A test scene is every held-out triplet sharing a scene, an action and a
//! target; its tool images are the grasp candidates. Only scenes with at
//! least one correct grasp are scored.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{
    DatasetSplit, SplitMode, SyntheticWorld, TaskTriplet, ATTRIBUTE_COUNT, CLUTTER_OFFSET,
    PART_OFFSET,
};
use crate::error::{Error, Result};
use crate::geometry::{self, is_match, GraspRect};
use crate::infer::{predict_grasp, Candidate, PredictOptions, Prediction};
use crate::model::{ActionId, Observation, TripletScorer};

pub const REPORT_VERSION: u32 = 1;

/// The prediction matches some ground-truth grasp, whatever its task label.
pub fn task_agnostic_correct(pred: &GraspRect, ground_truths: &[GraspRect]) -> Result<bool> {
    if ground_truths.is_empty() {
        return Err(Error::invalid("no ground-truth grasps"));
    }
    Ok(ground_truths.iter().any(|g| is_match(pred, g)))
}

/// The prediction matches a ground-truth grasp labeled correct for the task.
pub fn task_specific_correct(pred: &GraspRect, labeled: &[(GraspRect, bool)]) -> Result<bool> {
    if labeled.is_empty() {
        return Err(Error::invalid("no labeled grasps"));
    }
    Ok(labeled.iter().any(|(g, ok)| *ok && is_match(pred, g)))
}

/// 1-based rank of `true_item` in `ranked` (best first) once the items in
/// `also_true` other than `true_item` itself are removed.
pub fn filtered_rank<T: PartialEq>(ranked: &[T], true_item: &T, also_true: &[T]) -> Result<usize> {
    let mut rank = 1;
    for item in ranked {
        if item == true_item {
            return Ok(rank);
        }
        if !also_true.contains(item) {
            rank += 1;
        }
    }
    Err(Error::invalid("true item is not in the ranking"))
}

pub fn hits_at_k<T: PartialEq>(ranked: &[T], true_item: &T, also_true: &[T], k: usize) -> Result<bool> {
    Ok(filtered_rank(ranked, true_item, also_true)? <= k)
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::invalid("mean rank of no queries"));
    }
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

/// Scores triplets by evaluating the world's planted predicates directly on
/// the observed attributes: 0 when the predicate holds, 1 otherwise.
/// Exact on noiseless worlds.
#[derive(Debug, Clone)]
pub struct PredicateOracle {
    world: SyntheticWorld,
}

impl PredicateOracle {
    pub fn new(world: SyntheticWorld) -> Self {
        PredicateOracle { world }
    }

    fn attrs(o: &Observation, offset: usize) -> Result<[f64; ATTRIBUTE_COUNT]> {
        o.features
            .get(offset..offset + ATTRIBUTE_COUNT)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::config(format!("observation '{}' is too short", o.entity_id)))
    }

    fn distance(&self, head: &Observation, action: &ActionId, target: &Observation) -> Result<f64> {
        let def = self
            .world
            .action(action.index)
            .ok_or_else(|| Error::invalid(format!("unknown action index {}", action.index)))?;
        let part = Self::attrs(head, PART_OFFSET)?;
        debug_assert!(head.features.len() >= CLUTTER_OFFSET);
        let tgt = if target.is_null() {
            None
        } else {
            Some(Self::attrs(target, 0)?)
        };
        Ok(if def.holds(&part, tgt.as_ref()) { 0.0 } else { 1.0 })
    }
}

impl TripletScorer for PredicateOracle {
    fn head_distances(
        &self,
        heads: &[&Observation],
        action: &ActionId,
        target: &Observation,
    ) -> Result<Vec<f64>> {
        heads.iter().map(|h| self.distance(h, action, target)).collect()
    }

    fn relation_distances(
        &self,
        head: &Observation,
        actions: &[ActionId],
        target: &Observation,
    ) -> Result<Vec<f64>> {
        actions.iter().map(|a| self.distance(head, a, target)).collect()
    }

    fn tail_distances(
        &self,
        head: &Observation,
        action: &ActionId,
        tails: &[&Observation],
    ) -> Result<Vec<f64>> {
        tails.iter().map(|t| self.distance(head, action, t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub nms_threshold: f64,
    /// Query with the null target everywhere (the target-blind ablation).
    pub target_blind: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 0.5,
            nms_threshold: geometry::DEFAULT_NMS_THRESHOLD,
            target_blind: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMetrics {
    pub action: String,
    pub scenes: usize,
    pub task_agnostic_correct: usize,
    pub task_specific_correct: usize,
    pub task_agnostic_accuracy: f64,
    pub task_specific_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub queries: usize,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub mean_rank: f64,
}

impl DirectionMetrics {
    fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return DirectionMetrics {
                queries: 0,
                hits_at_1: 0.0,
                hits_at_3: 0.0,
                mean_rank: 0.0,
            };
        }
        let n = ranks.len() as f64;
        DirectionMetrics {
            queries: ranks.len(),
            hits_at_1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
            hits_at_3: ranks.iter().filter(|&&r| r <= 3).count() as f64 / n,
            mean_rank: mean_rank(ranks).unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    /// Missing tool-with-grasp, ranked among the scene's candidates.
    pub head: DirectionMetrics,
    /// Missing action, ranked over the whole action vocabulary.
    pub relation: DirectionMetrics,
    /// Missing target, ranked over the scene's targets plus the null target.
    pub tail: DirectionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub mode: SplitMode,
    pub target_blind: bool,
    pub scenes: usize,
    pub no_viable_grasp: usize,
    pub task_agnostic_accuracy: f64,
    pub task_specific_accuracy: f64,
    /// Expected task-specific accuracy of a uniformly random pick.
    pub chance_task_specific: f64,
    pub per_action: Vec<ActionMetrics>,
    pub link_prediction: LinkMetrics,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mode = match self.mode {
            SplitMode::ImageWise => "image-wise",
            SplitMode::ObjectWise => "object-wise",
        };
        let _ = writeln!(s, "mode,{mode}");
        let _ = writeln!(s, "target_blind,{}", self.target_blind);
        let _ = writeln!(s, "scenes,{}", self.scenes);
        let _ = writeln!(s, "no_viable_grasp,{}", self.no_viable_grasp);
        let _ = writeln!(s, "task_agnostic_accuracy,{}", self.task_agnostic_accuracy);
        let _ = writeln!(s, "task_specific_accuracy,{}", self.task_specific_accuracy);
        let _ = writeln!(s, "chance_task_specific,{}", self.chance_task_specific);
        for a in &self.per_action {
            let _ = writeln!(s, "per_action.{}.scenes,{}", a.action, a.scenes);
            let _ = writeln!(
                s,
                "per_action.{}.task_agnostic_accuracy,{}",
                a.action, a.task_agnostic_accuracy
            );
            let _ = writeln!(
                s,
                "per_action.{}.task_specific_accuracy,{}",
                a.action, a.task_specific_accuracy
            );
        }
        let l = &self.link_prediction;
        for (name, d) in [("head", &l.head), ("relation", &l.relation), ("tail", &l.tail)] {
            let _ = writeln!(s, "link.{name}.queries,{}", d.queries);
            let _ = writeln!(s, "link.{name}.hits_at_1,{}", d.hits_at_1);
            let _ = writeln!(s, "link.{name}.hits_at_3,{}", d.hits_at_3);
            let _ = writeln!(s, "link.{name}.mean_rank,{}", d.mean_rank);
        }
        s
    }
}

type TruthKey = (String, Option<usize>, usize, String);

fn truth_key(t: &TaskTriplet) -> TruthKey {
    (
        t.tool.entity_id.clone(),
        t.tool.grasp_region_id,
        t.action.index,
        t.target.entity_id.clone(),
    )
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores a model (or any other scorer) on the held-out side of a split.
pub fn evaluate<S: TripletScorer + ?Sized>(
    scorer: &S,
    split: &DatasetSplit,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    if split.test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let actions = split.header.action_ids();
    let null = Observation::null(split.header.feature_len);
    let truth: HashSet<TruthKey> = split
        .train
        .iter()
        .chain(&split.test)
        .filter(|t| t.positive)
        .map(truth_key)
        .collect();
    let mut scene_targets: BTreeMap<(usize, &str), &Observation> = BTreeMap::new();
    for t in split.train.iter().chain(&split.test) {
        if !t.target.is_null() {
            scene_targets
                .entry((t.scene, t.target.entity_id.as_str()))
                .or_insert(&t.target);
        }
    }

    let mut groups: BTreeMap<(usize, usize, &str), Vec<&TaskTriplet>> = BTreeMap::new();
    for t in &split.test {
        groups
            .entry((t.scene, t.action.index, t.target.entity_id.as_str()))
            .or_default()
            .push(t);
    }

    let options = PredictOptions {
        alpha: config.alpha,
        nms_threshold: config.nms_threshold,
        camera: None,
        depth: None,
    };
    let query_target = |t: &TaskTriplet| -> Observation {
        if config.target_blind {
            null.clone()
        } else {
            t.target.clone()
        }
    };

    let mut per_action: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let (mut scenes, mut agnostic, mut specific, mut no_viable) = (0, 0, 0, 0);
    let mut chance = 0.0;
    let mut head_ranks = Vec::new();

    for ((_, action_index, _), rows) in &groups {
        let positives = rows.iter().filter(|t| t.positive).count();
        if positives == 0 {
            continue;
        }
        scenes += 1;
        chance += positives as f64 / rows.len() as f64;
        let action = &rows[0].action;
        let target = query_target(rows[0]);
        let candidates: Vec<Candidate> = rows
            .iter()
            .map(|t| Candidate {
                grasp: t.grasp,
                tool: t.tool.clone(),
            })
            .collect();
        let entry = per_action.entry(*action_index).or_default();
        entry.0 += 1;
        match predict_grasp(scorer, &candidates, action, &target, &options)? {
            Prediction::NoViableGrasp => no_viable += 1,
            Prediction::Found { best, .. } => {
                let ground: Vec<GraspRect> = rows.iter().map(|t| t.grasp).collect();
                let labeled: Vec<(GraspRect, bool)> =
                    rows.iter().map(|t| (t.grasp, t.positive)).collect();
                let ta = task_agnostic_correct(&best.grasp, &ground)?;
                let ts = task_specific_correct(&best.grasp, &labeled)?;
                assert!(!ts || ta, "task-specific match without a task-agnostic match");
                agnostic += ta as usize;
                specific += ts as usize;
                entry.1 += ta as usize;
                entry.2 += ts as usize;
            }
        }

        let heads: Vec<&Observation> = rows.iter().map(|t| &t.tool).collect();
        let distances = scorer.head_distances(&heads, action, &target)?;
        let order = crate::infer::ascending(&distances);
        let positive_idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].positive).collect();
        for &i in &positive_idx {
            head_ranks.push(filtered_rank(&order, &i, &positive_idx)?);
        }
    }
    if scenes == 0 {
        return Err(Error::Data(
            "no test scene contains a correct grasp".into(),
        ));
    }

    let mut relation_ranks = Vec::new();
    let mut tail_ranks = Vec::new();
    for t in split.test.iter().filter(|t| t.positive) {
        let target = query_target(t);
        let distances = scorer.relation_distances(&t.tool, &actions, &target)?;
        let order = crate::infer::ascending(&distances);
        let also: Vec<usize> = actions
            .iter()
            .filter(|a| {
                truth.contains(&(
                    t.tool.entity_id.clone(),
                    t.tool.grasp_region_id,
                    a.index,
                    t.target.entity_id.clone(),
                ))
            })
            .map(|a| a.index)
            .collect();
        relation_ranks.push(filtered_rank(&order, &t.action.index, &also)?);

        let mut tails: Vec<&Observation> = scene_targets
            .range((t.scene, "")..)
            .take_while(|((s, _), _)| *s == t.scene)
            .map(|(_, o)| *o)
            .collect();
        tails.push(&null);
        let names: Vec<&str> = tails.iter().map(|o| o.entity_id.as_str()).collect();
        let Some(true_pos) = names.iter().position(|n| *n == t.target.entity_id) else {
            continue;
        };
        let distances = scorer.tail_distances(&t.tool, &t.action, &tails)?;
        let order = crate::infer::ascending(&distances);
        let also: Vec<usize> = (0..names.len())
            .filter(|&i| {
                truth.contains(&(
                    t.tool.entity_id.clone(),
                    t.tool.grasp_region_id,
                    t.action.index,
                    names[i].to_string(),
                ))
            })
            .collect();
        tail_ranks.push(filtered_rank(&order, &true_pos, &also)?);
    }

    let per_action = per_action
        .into_iter()
        .map(|(i, (n, ta, ts))| ActionMetrics {
            action: actions[i].name.clone(),
            scenes: n,
            task_agnostic_correct: ta,
            task_specific_correct: ts,
            task_agnostic_accuracy: ratio(ta, n),
            task_specific_accuracy: ratio(ts, n),
        })
        .collect();

    Ok(MetricsReport {
        version: REPORT_VERSION,
        mode: split.mode,
        target_blind: config.target_blind,
        scenes,
        no_viable_grasp: no_viable,
        task_agnostic_accuracy: ratio(agnostic, scenes),
        task_specific_accuracy: ratio(specific, scenes),
        chance_task_specific: chance / scenes as f64,
        per_action,
        link_prediction: LinkMetrics {
            head: DirectionMetrics::from_ranks(&head_ranks),
            relation: DirectionMetrics::from_ranks(&relation_ranks),
            tail: DirectionMetrics::from_ranks(&tail_ranks),
        },
    })
}
