//! Grasp ranking for a task and missing-element inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, CameraModel, GraspRect, RobotPose};
use crate::model::{suitability, ActionId, Observation, TripletScorer};

/// A grasp candidate with the observation of its tool grasped there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub grasp: GraspRect,
    pub tool: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedGrasp {
    /// Position of the candidate in the caller's input list.
    pub index: usize,
    pub grasp: GraspRect,
    pub tool_entity_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_region_id: Option<usize>,
    pub distance: f64,
    pub suitability: f64,
    pub rank: usize,
}

/// Indices of `distances` in ascending order, ties by index.
pub(crate) fn ascending(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

fn rank_subset<S: TripletScorer + ?Sized>(
    scorer: &S,
    candidates: &[Candidate],
    subset: &[usize],
    action: &ActionId,
    target: &Observation,
) -> Result<Vec<RankedGrasp>> {
    if subset.is_empty() {
        return Err(Error::invalid("no grasp candidates to rank"));
    }
    let heads: Vec<&Observation> = subset.iter().map(|&i| &candidates[i].tool).collect();
    let distances = scorer.head_distances(&heads, action, target)?;
    ascending(&distances)
        .into_iter()
        .enumerate()
        .map(|(pos, k)| {
            let c = &candidates[subset[k]];
            Ok(RankedGrasp {
                index: subset[k],
                grasp: c.grasp,
                tool_entity_id: c.tool.entity_id.clone(),
                grasp_region_id: c.tool.grasp_region_id,
                distance: distances[k],
                suitability: suitability(distances[k])?,
                rank: pos + 1,
            })
        })
        .collect()
}

/// Scores every candidate against one action and target and sorts by
/// ascending distance (descending suitability).
pub fn rank_candidates<S: TripletScorer + ?Sized>(
    scorer: &S,
    candidates: &[Candidate],
    action: &ActionId,
    target: &Observation,
) -> Result<Vec<RankedGrasp>> {
    let all: Vec<usize> = (0..candidates.len()).collect();
    rank_subset(scorer, candidates, &all, action, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Candidates need quality strictly above this.
    pub alpha: f64,
    pub nms_threshold: f64,
    #[serde(default)]
    pub camera: Option<CameraModel>,
    /// Depth (meters) at the chosen grasp center; required with `camera`.
    #[serde(default)]
    pub depth: Option<f64>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            alpha: 0.5,
            nms_threshold: geometry::DEFAULT_NMS_THRESHOLD,
            camera: None,
            depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Prediction {
    Found {
        best: RankedGrasp,
        ranked: Vec<RankedGrasp>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        robot_pose: Option<RobotPose>,
    },
    /// Every candidate was filtered out; callers may lower `alpha` and retry.
    NoViableGrasp,
}

impl Prediction {
    pub fn best(&self) -> Option<&RankedGrasp> {
        match self {
            Prediction::Found { best, .. } => Some(best),
            Prediction::NoViableGrasp => None,
        }
    }
}

/// Quality filter, non-maximum suppression, ranking, then the optional
/// image-to-robot transform of the winner.
pub fn predict_grasp<S: TripletScorer + ?Sized>(
    scorer: &S,
    candidates: &[Candidate],
    action: &ActionId,
    target: &Observation,
    options: &PredictOptions,
) -> Result<Prediction> {
    if !(0.0..=1.0).contains(&options.alpha) {
        return Err(Error::invalid(format!(
            "alpha must lie in [0, 1], got {}",
            options.alpha
        )));
    }
    if options.camera.is_some() && options.depth.is_none() {
        return Err(Error::invalid("a camera model needs a depth value"));
    }
    let viable: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].grasp.quality() > options.alpha)
        .collect();
    let rects: Vec<GraspRect> = viable.iter().map(|&i| candidates[i].grasp).collect();
    let kept: Vec<usize> = geometry::nms_indices(&rects, options.nms_threshold)?
        .into_iter()
        .map(|k| viable[k])
        .collect();
    if kept.is_empty() {
        return Ok(Prediction::NoViableGrasp);
    }
    let ranked = rank_subset(scorer, candidates, &kept, action, target)?;
    let best = ranked[0].clone();
    let robot_pose = match (&options.camera, options.depth) {
        (Some(cam), Some(depth)) => Some(geometry::image_to_robot(&best.grasp, depth, cam)?),
        _ => None,
    };
    Ok(Prediction::Found {
        best,
        ranked,
        robot_pose,
    })
}

/// A triplet with exactly one element left out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialTriplet {
    #[serde(default)]
    pub head: Option<Observation>,
    #[serde(default)]
    pub action: Option<ActionId>,
    #[serde(default)]
    pub target: Option<Observation>,
}

/// Candidates for the missing slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "slot", content = "items", rename_all = "snake_case")]
pub enum Vocabulary {
    Heads(Vec<Observation>),
    Actions(Vec<ActionId>),
    Tails(Vec<Observation>),
}

impl Vocabulary {
    fn len(&self) -> usize {
        match self {
            Vocabulary::Heads(v) | Vocabulary::Tails(v) => v.len(),
            Vocabulary::Actions(v) => v.len(),
        }
    }

    fn label(&self, i: usize) -> String {
        match self {
            Vocabulary::Heads(v) => match v[i].grasp_region_id {
                Some(r) => format!("{}#{r}", v[i].entity_id),
                None => v[i].entity_id.clone(),
            },
            Vocabulary::Tails(v) => v[i].entity_id.clone(),
            Vocabulary::Actions(v) => v[i].name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub index: usize,
    pub label: String,
    pub distance: f64,
    pub rank: usize,
}

/// Ranks the vocabulary for whichever of head, action or target is missing.
pub fn infer_missing<S: TripletScorer + ?Sized>(
    scorer: &S,
    known: &PartialTriplet,
    vocabulary: &Vocabulary,
) -> Result<Vec<RankedItem>> {
    let missing = [
        known.head.is_none(),
        known.action.is_none(),
        known.target.is_none(),
    ]
    .iter()
    .filter(|&&m| m)
    .count();
    if missing != 1 {
        return Err(Error::invalid(format!(
            "exactly one triplet element must be missing, found {missing}"
        )));
    }
    if vocabulary.len() == 0 {
        return Err(Error::invalid("vocabulary is empty"));
    }
    let distances = match (known, vocabulary) {
        (
            PartialTriplet {
                head: None,
                action: Some(a),
                target: Some(t),
            },
            Vocabulary::Heads(items),
        ) => scorer.head_distances(&items.iter().collect::<Vec<_>>(), a, t)?,
        (
            PartialTriplet {
                head: Some(h),
                action: None,
                target: Some(t),
            },
            Vocabulary::Actions(items),
        ) => scorer.relation_distances(h, items, t)?,
        (
            PartialTriplet {
                head: Some(h),
                action: Some(a),
                target: None,
            },
            Vocabulary::Tails(items),
        ) => scorer.tail_distances(h, a, &items.iter().collect::<Vec<_>>())?,
        _ => {
            return Err(Error::invalid(
                "vocabulary does not match the missing element",
            ))
        }
    };
    Ok(ascending(&distances)
        .into_iter()
        .enumerate()
        .map(|(pos, i)| RankedItem {
            index: i,
            label: vocabulary.label(i),
            distance: distances[i],
            rank: pos + 1,
        })
        .collect())
}
