//! Properties of a model trained on the default synthetic world. The model
//! is trained once per test binary and shared.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use taskgrasp::data::{SplitMode, CLUTTER_COUNT, CLUTTER_OFFSET, PART_OFFSET};
use taskgrasp::embed::{best_actions, cluster_separation, dump_embeddings, EntityKind};
use taskgrasp::eval::{evaluate, EvalConfig};
use taskgrasp::infer::{infer_missing, rank_candidates, Candidate, PartialTriplet, Vocabulary};
use taskgrasp::learn::{train, LossWeights, TrainConfig};
use taskgrasp::model::{Head, Observation};
use taskgrasp::TaskTriplet;

use common::{default_split, rng, trained_image_wise};

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Distinct tool images of the test split, keyed by (scene, tool, part).
fn test_heads(test: &[TaskTriplet]) -> BTreeMap<(usize, String, usize), &TaskTriplet> {
    let mut out = BTreeMap::new();
    for t in test {
        out.entry((t.scene, t.tool.entity_id.clone(), t.tool.grasp_region_id.unwrap()))
            .or_insert(t);
    }
    out
}

#[test]
fn ranking_loss_drops_below_a_tenth() {
    let (_, outcome) = trained_image_wise();
    let first = outcome.trace.first().unwrap().aff;
    let last = outcome.trace.last().unwrap().aff;
    eprintln!("l_aff {first} -> {last} (ratio {})", last / first);
    assert_eq!(outcome.trace.len(), TrainConfig::default().epochs);
    assert!(last < 0.1 * first);
}

#[test]
fn untrained_model_scores_near_chance() {
    let split = default_split(SplitMode::ImageWise);
    let config = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let untrained = train(&split.train_set(), &config).unwrap().model;
    let r = evaluate(&untrained, &split, &EvalConfig::default()).unwrap();
    eprintln!(
        "untrained task-specific {} vs chance {}",
        r.task_specific_accuracy, r.chance_task_specific
    );
    assert!((r.task_specific_accuracy - r.chance_task_specific).abs() <= 0.1);
}

/// Resampling the four clutter features must move a tool embedding far
/// less than resampling four part attributes the same way.
#[test]
fn clutter_features_barely_move_embeddings() {
    let (split, outcome) = trained_image_wise();
    let model = &outcome.model;
    let heads = test_heads(&split.test);
    let mut r = rng(99);
    let (mut clutter, mut relevant) = (0.0, 0.0);
    for t in heads.values() {
        let base = model.encode_head(&t.tool).unwrap();
        let resampled = |offset: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let mut o = t.tool.clone();
            for v in &mut o.features[offset..offset + CLUTTER_COUNT] {
                *v = r.random();
            }
            l2(&base, &model.encode_head(&o).unwrap())
        };
        clutter += resampled(CLUTTER_OFFSET, &mut r);
        relevant += resampled(PART_OFFSET, &mut r);
    }
    eprintln!("mean shift: clutter {}, part attributes {}", clutter / heads.len() as f64, relevant / heads.len() as f64);
    assert!(clutter < 0.25 * relevant);
}

#[test]
fn target_classes_form_separate_clusters() {
    let (split, outcome) = trained_image_wise();
    let mut seen = BTreeSet::new();
    let (mut points, mut labels) = (Vec::new(), Vec::new());
    for t in &split.test {
        if !t.target.is_null() && seen.insert((t.scene, t.target.entity_id.clone())) {
            points.push(outcome.model.encode_tail(&t.target).unwrap());
            labels.push(t.target.class_id.unwrap());
        }
    }
    let (intra, inter) = cluster_separation(&points, &labels).unwrap();
    eprintln!("target embeddings: intra {intra}, inter {inter}");
    assert!(inter > intra);
}

/// The ranking loss is summed over a batch while the cross-entropies are
/// means, so this model weights the tool classifier by the batch size to
/// put the two on the same scale.
#[test]
fn tool_classifier_is_accurate_on_held_out_images() {
    let split = default_split(SplitMode::ImageWise);
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        loss_weights: LossWeights {
            head_cls: defaults.batch_size as f64,
            ..defaults.loss_weights
        },
        ..defaults
    };
    let model = train(&split.train_set(), &config).unwrap().model;
    let heads = test_heads(&split.test);
    let (mut object, mut region) = (0, 0);
    for t in heads.values() {
        let s = model.classify(&model.encode_head(&t.tool).unwrap(), Head::Tool).unwrap();
        object += usize::from(argmax(&s.object) == t.tool.class_id.unwrap());
        region += usize::from(argmax(&s.region) == t.tool.grasp_region_id.unwrap());
    }
    let n = heads.len() as f64;
    eprintln!("tool class accuracy {}, grasp region accuracy {}", object as f64 / n, region as f64 / n);
    assert!(object as f64 / n >= 0.95);
}

#[test]
fn relation_vectors_are_pairwise_distinct() {
    let (_, outcome) = trained_image_wise();
    let model = &outcome.model;
    let rels: Vec<Vec<f64>> = model
        .actions()
        .iter()
        .map(|a| model.encode_relation(a).unwrap())
        .collect();
    assert_eq!(rels.len(), model.header().num_actions);
    let mut min = f64::INFINITY;
    for i in 0..rels.len() {
        for j in i + 1..rels.len() {
            min = min.min(rels[i].iter().zip(&rels[j]).map(|(a, b)| (a - b).abs()).sum());
        }
    }
    eprintln!("min pairwise relation L1 {min}");
    assert!(min > 0.0);
}

#[test]
fn head_embeddings_cluster_by_best_action() {
    let (split, outcome) = trained_image_wise();
    let test = split.test_set();
    let rows = dump_embeddings(&outcome.model, &test).unwrap();
    let heads: Vec<Vec<f64>> = rows
        .iter()
        .filter(|r| r.kind == EntityKind::Head)
        .map(|r| r.vector.clone())
        .collect();
    let labels = best_actions(&outcome.model, &test).unwrap();
    assert_eq!(heads.len(), labels.len());
    let (intra, inter) = cluster_separation(&heads, &labels).unwrap();
    eprintln!("head embeddings by best action: intra {intra}, inter {inter}");
    assert!(intra < inter);
}

/// Test-split observation of `tool` at `part` in `scene`, if that image was held out.
fn held_out<'a>(split: &'a [TaskTriplet], scene: usize, tool: &str, part: usize) -> Option<&'a TaskTriplet> {
    split
        .iter()
        .find(|t| t.scene == scene && t.tool.entity_id == tool && t.tool.grasp_region_id == Some(part))
}

fn target_in(split: &[TaskTriplet], scene: usize, name: &str) -> Option<Observation> {
    split
        .iter()
        .find(|t| t.scene == scene && t.target.entity_id == name)
        .map(|t| t.target.clone())
}

#[test]
fn hammer_handle_wins_knocking_a_nail() {
    let (split, outcome) = trained_image_wise();
    let model = &outcome.model;
    let knock = model.action_by_name("knock").unwrap();
    let scenes: BTreeSet<usize> = split.test.iter().map(|t| t.scene).collect();
    let (mut queries, mut wins) = (0, 0);
    for scene in scenes {
        let Some(handle) = held_out(&split.test, scene, "hammer", 0) else { continue };
        let Some(nail) = target_in(&split.test, scene, "nail") else { continue };
        let mut candidates = vec![Candidate {
            grasp: handle.grasp,
            tool: handle.tool.clone(),
        }];
        for tool in ["wrench", "pliers"] {
            for part in 0..3 {
                if let Some(t) = held_out(&split.test, scene, tool, part) {
                    candidates.push(Candidate {
                        grasp: t.grasp,
                        tool: t.tool.clone(),
                    });
                }
            }
        }
        let ranked = rank_candidates(model, &candidates, &knock, &nail).unwrap();
        queries += 1;
        wins += usize::from(ranked[0].index == 0);
    }
    eprintln!("hammer handle ranked first in {wins}/{queries} scenes");
    assert!(queries >= 5);
    assert_eq!(wins, queries);
}

#[test]
fn knock_is_the_relation_between_hammer_and_nail() {
    let (split, outcome) = trained_image_wise();
    let model = &outcome.model;
    let scenes: BTreeSet<usize> = split.test.iter().map(|t| t.scene).collect();
    let (mut queries, mut wins) = (0, 0);
    for scene in scenes {
        let Some(handle) = held_out(&split.test, scene, "hammer", 0) else { continue };
        let Some(nail) = target_in(&split.test, scene, "nail") else { continue };
        let known = PartialTriplet {
            head: Some(handle.tool.clone()),
            action: None,
            target: Some(nail),
        };
        let ranked = infer_missing(model, &known, &Vocabulary::Actions(model.actions())).unwrap();
        queries += 1;
        wins += usize::from(ranked[0].label == "knock");
    }
    eprintln!("knock ranked first in {wins}/{queries} scenes");
    assert!(queries >= 5);
    assert_eq!(wins, queries);
}

#[test]
fn binary_actions_point_to_the_null_target() {
    let (split, outcome) = trained_image_wise();
    let model = &outcome.model;
    let hand_over = model.action_by_name("hand-over").unwrap();
    let (mut queries, mut wins) = (0, 0);
    for t in split.test.iter().filter(|t| t.positive && t.action == hand_over) {
        let mut tails: Vec<Observation> = split
            .test
            .iter()
            .filter(|u| u.scene == t.scene && !u.target.is_null())
            .map(|u| u.target.clone())
            .collect();
        tails.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
        tails.dedup_by(|a, b| a.entity_id == b.entity_id);
        tails.push(Observation::null(model.header().feature_len));
        let known = PartialTriplet {
            head: Some(t.tool.clone()),
            action: Some(hand_over.clone()),
            target: None,
        };
        let ranked = infer_missing(model, &known, &Vocabulary::Tails(tails)).unwrap();
        queries += 1;
        wins += usize::from(ranked[0].label == taskgrasp::model::NULL_ENTITY);
    }
    eprintln!("null target ranked first in {wins}/{queries} hand-over queries");
    assert!(queries >= 5);
    assert_eq!(wins, queries);
}
