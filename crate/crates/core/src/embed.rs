//! Raw embedding dumps and a deterministic 2-D linear projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::TripletSet;
use crate::error::{Error, Result};
use crate::model::{score, EmbeddingModel, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntityKind {
    Head,
    Tail,
    Relation,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Head => "head",
            EntityKind::Tail => "tail",
            EntityKind::Relation => "relation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub kind: EntityKind,
    /// Entity id, `entity#region` for heads, or the action name.
    pub label: String,
    pub scene: Option<usize>,
    pub vector: Vec<f64>,
}

/// Distinct head observations `(scene, entity, region)` in first-seen order.
pub fn distinct_heads(set: &TripletSet) -> Vec<(usize, &Observation)> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for t in &set.triplets {
        let key = (t.scene, t.tool.entity_id.as_str(), t.tool.grasp_region_id);
        if seen.insert(key, ()).is_none() {
            out.push((t.scene, &t.tool));
        }
    }
    out
}

/// Distinct targets `(scene, entity)`; the null target appears once.
pub fn distinct_tails(set: &TripletSet) -> Vec<(Option<usize>, &Observation)> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for t in &set.triplets {
        let scene = (!t.target.is_null()).then_some(t.scene);
        if seen.insert((scene, t.target.entity_id.as_str()), ()).is_none() {
            out.push((scene, &t.target));
        }
    }
    out
}

/// One row per distinct observation plus one per action.
pub fn dump_embeddings(model: &EmbeddingModel, set: &TripletSet) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for (scene, o) in distinct_heads(set) {
        let label = match o.grasp_region_id {
            Some(r) => format!("{}#{r}", o.entity_id),
            None => o.entity_id.clone(),
        };
        rows.push(EmbeddingRow {
            kind: EntityKind::Head,
            label,
            scene: Some(scene),
            vector: model.encode_head(o)?,
        });
    }
    for (scene, o) in distinct_tails(set) {
        rows.push(EmbeddingRow {
            kind: EntityKind::Tail,
            label: o.entity_id.clone(),
            scene,
            vector: model.encode_tail(o)?,
        });
    }
    for a in model.actions() {
        rows.push(EmbeddingRow {
            kind: EntityKind::Relation,
            label: a.name.clone(),
            scene: None,
            vector: model.encode_relation(&a)?,
        });
    }
    Ok(rows)
}

/// For each distinct head, the action index whose best-matching target in
/// the same scene (or the null target) gives the smallest distance.
pub fn best_actions(model: &EmbeddingModel, set: &TripletSet) -> Result<Vec<usize>> {
    let tails = distinct_tails(set);
    let null = Observation::null(set.header.feature_len);
    let tail_vecs: Vec<(Option<usize>, Vec<f64>)> = tails
        .iter()
        .map(|(s, o)| Ok((*s, model.encode_tail(o)?)))
        .collect::<Result<_>>()?;
    let null_vec = model.encode_tail(&null)?;
    let relations: Vec<Vec<f64>> = model
        .actions()
        .iter()
        .map(|a| model.encode_relation(a))
        .collect::<Result<_>>()?;
    distinct_heads(set)
        .into_iter()
        .map(|(scene, o)| {
            let h = model.encode_head(o)?;
            let mut best = (f64::INFINITY, 0);
            for (ai, r) in relations.iter().enumerate() {
                let candidates = tail_vecs
                    .iter()
                    .filter(|(s, _)| *s == Some(scene))
                    .map(|(_, t)| t)
                    .chain(std::iter::once(&null_vec));
                for t in candidates {
                    let d = score(&h, r, t)?;
                    if d < best.0 {
                        best = (d, ai);
                    }
                }
            }
            Ok(best.1)
        })
        .collect()
}

/// Projects rows onto their top-`k` principal components. Each component's
/// sign is fixed so that its largest-magnitude loading is positive.
pub fn principal_components(rows: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::invalid("no rows to project"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("rows have different lengths"));
    }
    if k > d {
        return Err(Error::invalid(format!("cannot take {k} components of {d}-dim rows")));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut basis = DMatrix::zeros(d, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let pivot = v.iter().copied().fold(0.0_f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if pivot < 0.0 {
            v.neg_mut();
        }
        basis.set_column(c, &v);
    }
    let proj = x * basis;
    Ok((0..n).map(|i| proj.row(i).iter().copied().collect()).collect())
}

/// Mean pairwise Euclidean distance within clusters and across clusters.
pub fn cluster_separation(points: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64)> {
    if points.len() != labels.len() {
        return Err(Error::invalid("points and labels differ in length"));
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dist = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if labels[i] == labels[j] {
                intra += dist;
                n_intra += 1;
            } else {
                inter += dist;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::invalid("need at least two clusters and one non-singleton cluster"));
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

fn row_prefix(s: &mut String, r: &EmbeddingRow) {
    let scene = r.scene.map(|s| s.to_string()).unwrap_or_default();
    let _ = write!(s, "{},{},{}", r.kind.as_str(), r.label, scene);
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut s = String::from("kind,label,scene");
    for i in 0..dim {
        let _ = write!(s, ",e{i}");
    }
    s.push('\n');
    for r in rows {
        row_prefix(&mut s, r);
        for v in &r.vector {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn projection_csv(rows: &[EmbeddingRow], projected: &[Vec<f64>]) -> String {
    let mut s = String::from("kind,label,scene,pc1,pc2\n");
    for (r, p) in rows.iter().zip(projected) {
        row_prefix(&mut s, r);
        for v in p {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}
