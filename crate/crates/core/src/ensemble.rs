//! Score averaging over several trained models, with greedy forward model
//! selection shared across classes or run per class.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::{average_precision, Detection, GroundTruthSet};
use crate::network::StagedNetwork;
use crate::par::Exec;
use crate::pipeline::context::{context_scores, ContextFusion};
use crate::pipeline::nms::nms;
use crate::pipeline::{BoundingBox, ImageScores};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One model's scores on every box of the selection split.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolMember {
    pub id: String,
    /// `scores[i]` has `K` entries for box `i`.
    pub scores: Vec<Vec<f64>>,
    pub fingerprint: String,
}

/// Models scored on one shared box set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPool {
    pub boxes: Vec<(u64, BoundingBox)>,
    pub members: Vec<PoolMember>,
}

impl ModelPool {
    pub fn validate(&self) -> Result<usize> {
        let first = self.members.first().ok_or_else(|| Error::invalid("model pool is empty"))?;
        let k = first.scores.first().map_or(0, Vec::len);
        let mut ids = std::collections::BTreeSet::new();
        for m in &self.members {
            if !ids.insert(&m.id) {
                return Err(Error::invalid(format!("model id '{}' appears twice", m.id)));
            }
            if m.scores.len() != self.boxes.len() {
                return Err(Error::invalid(format!(
                    "model '{}' scored {} boxes, pool has {}",
                    m.id,
                    m.scores.len(),
                    self.boxes.len()
                )));
            }
            if m.scores.iter().any(|s| s.len() != k) {
                return Err(Error::invalid(format!("model '{}' has ragged class scores", m.id)));
            }
            if m.scores.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("scores of model '{}'", m.id)));
            }
        }
        Ok(k)
    }

    pub fn num_classes(&self) -> usize {
        self.members.first().and_then(|m| m.scores.first()).map_or(0, Vec::len)
    }

    fn index_of(&self, id: &str) -> Result<usize> {
        self.members
            .iter()
            .position(|m| m.id == id)
            .ok_or_else(|| Error::invalid(format!("no model '{id}' in the pool")))
    }
}

/// Ground truth and matching rules of the split used to score an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub gts: GroundTruthSet,
    pub iou: f64,
    /// Per-class NMS applied to averaged scores before AP.
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    #[serde(rename = "all-cls")]
    AllClass,
    #[serde(rename = "per-cls")]
    PerClass,
}

/// Which models are averaged for each class. In all-class mode `subsets`
/// has the single key `"all"`; in per-class mode one key per class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub mode: SelectionMode,
    pub subsets: BTreeMap<String, Vec<String>>,
    /// mAP of this spec on the split it was selected on.
    pub selection_map: f64,
}

impl EnsembleSpec {
    pub fn all_class(ids: Vec<String>) -> Self {
        EnsembleSpec {
            mode: SelectionMode::AllClass,
            subsets: BTreeMap::from([("all".to_string(), ids)]),
            selection_map: f64::NAN,
        }
    }

    pub fn per_class(subsets: Vec<Vec<String>>) -> Self {
        EnsembleSpec {
            mode: SelectionMode::PerClass,
            subsets: subsets.into_iter().enumerate().map(|(k, s)| (k.to_string(), s)).collect(),
            selection_map: f64::NAN,
        }
    }

    pub fn subset_for(&self, class_id: usize) -> Result<&[String]> {
        let key = match self.mode {
            SelectionMode::AllClass => "all".to_string(),
            SelectionMode::PerClass => class_id.to_string(),
        };
        let s = self
            .subsets
            .get(&key)
            .ok_or_else(|| Error::invalid(format!("ensemble spec has no subset for class {class_id}")))?;
        if s.is_empty() {
            return Err(Error::invalid(format!("ensemble subset for class {class_id} is empty")));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subsets.is_empty() || self.subsets.values().any(Vec::is_empty) {
            return Err(Error::Validation("every ensemble subset must be non-empty".into()));
        }
        if self.mode == SelectionMode::AllClass && !self.subsets.contains_key("all") {
            return Err(Error::Validation("all-class spec needs an 'all' subset".into()));
        }
        if self.mode == SelectionMode::PerClass && self.subsets.keys().any(|k| k.parse::<usize>().is_err()) {
            return Err(Error::Validation("per-class spec keys must be class ids".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::malformed(path.display().to_string(), e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: EnsembleSpec = serde_json::from_str(&text).map_err(|e| Error::malformed(path.display().to_string(), e))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-class mean over the members assigned to each class.
pub fn average_scores(members: &[(&str, &[f64])], spec: &EnsembleSpec) -> Result<Tensor> {
    let k = members
        .first()
        .map(|m| m.1.len())
        .ok_or_else(|| Error::invalid("no members to average"))?;
    if members.iter().any(|m| m.1.len() != k) {
        return Err(Error::invalid("members disagree on the number of classes"));
    }
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let subset = spec.subset_for(c)?;
        let mut sum = 0.0;
        for id in subset {
            let m = members
                .iter()
                .find(|m| m.0 == id)
                .ok_or_else(|| Error::invalid(format!("ensemble member '{id}' not provided")))?;
            sum += m.1[c];
        }
        out.push(sum / subset.len() as f64);
    }
    Ok(Tensor::from_vec(out))
}

/// AP of class `k` when averaging the members in `subset`.
pub fn subset_class_ap(pool: &ModelPool, subset: &[usize], k: usize, split: &EvalSplit) -> f64 {
    let dets: Vec<Detection> = pool
        .boxes
        .iter()
        .enumerate()
        .map(|(i, &(image_id, bbox))| Detection {
            image_id,
            bbox,
            class_id: k,
            confidence: subset.iter().map(|&m| pool.members[m].scores[i][k]).sum::<f64>() / subset.len() as f64,
        })
        .collect();
    let dets = match split.nms_iou {
        Some(t) => nms(&dets, t),
        None => dets,
    };
    average_precision(&dets, &split.gts, k, split.iou).ap
}

fn eval_classes(pool: &ModelPool, split: &EvalSplit) -> Vec<usize> {
    split.gts.classes().into_iter().filter(|&k| k < pool.num_classes()).collect()
}

fn subset_map(pool: &ModelPool, subset: &[usize], split: &EvalSplit) -> f64 {
    let classes = eval_classes(pool, split);
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|&k| subset_class_ap(pool, subset, k, split)).sum::<f64>() / classes.len() as f64
}

/// Per-class AP and mAP of a spec on a split.
pub fn spec_report(pool: &ModelPool, spec: &EnsembleSpec, split: &EvalSplit) -> Result<crate::eval::MapReport> {
    pool.validate()?;
    let mut per_class = Vec::new();
    for k in eval_classes(pool, split) {
        let subset: Vec<usize> = spec.subset_for(k)?.iter().map(|id| pool.index_of(id)).collect::<Result<_>>()?;
        per_class.push((k, subset_class_ap(pool, &subset, k, split)));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64
    };
    Ok(crate::eval::MapReport { map, per_class })
}

/// Forward greedy search: repeatedly add the candidate that maximises
/// `objective`, lowest member index on ties; stop when nothing improves.
/// Returns the chosen indices and the objective after each addition.
fn greedy<F>(n: usize, objective: F, exec: Exec) -> (Vec<usize>, Vec<f64>)
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    let mut chosen: Vec<usize> = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    loop {
        let candidates: Vec<usize> = (0..n).filter(|c| !chosen.contains(c)).collect();
        if candidates.is_empty() {
            break;
        }
        let values = exec.map(&candidates, |&c| {
            let mut s = chosen.clone();
            s.push(c);
            objective(&s)
        });
        let (best_c, best_v) = candidates.iter().zip(&values).fold(
            (usize::MAX, f64::NEG_INFINITY),
            |acc, (&c, &v)| if v > acc.1 { (c, v) } else { acc },
        );
        if let Some(&cur) = trace.last() {
            if !(best_v > cur) {
                break;
            }
        }
        chosen.push(best_c);
        trace.push(best_v);
    }
    (chosen, trace)
}

fn ids(pool: &ModelPool, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| pool.members[i].id.clone()).collect()
}

/// One shared subset chosen to maximise mAP. Returns the spec and the mAP
/// after each addition.
pub fn greedy_select_all_class(pool: &ModelPool, split: &EvalSplit, exec: Exec) -> Result<(EnsembleSpec, Vec<f64>)> {
    pool.validate()?;
    let (chosen, trace) = greedy(pool.members.len(), |s| subset_map(pool, s, split), exec);
    let mut spec = EnsembleSpec::all_class(ids(pool, &chosen));
    spec.selection_map = *trace.last().expect("pool is non-empty");
    Ok((spec, trace))
}

/// An independent greedy search per class maximising that class's AP. A
/// class keeps the all-class subset when that subset scores higher, so each
/// class's AP is at least its all-class AP on the selection split.
pub fn greedy_select_per_class(pool: &ModelPool, split: &EvalSplit, exec: Exec) -> Result<EnsembleSpec> {
    let k = pool.validate()?;
    let (all, _) = greedy_select_all_class(pool, split, exec)?;
    let shared: Vec<usize> = all.subsets["all"].iter().map(|id| pool.index_of(id)).collect::<Result<_>>()?;
    let mut subsets = Vec::with_capacity(k);
    for c in 0..k {
        let (chosen, trace) = greedy(pool.members.len(), |s| subset_class_ap(pool, s, c, split), exec);
        let own = *trace.last().expect("pool is non-empty");
        let shared_ap = subset_class_ap(pool, &shared, c, split);
        subsets.push(if shared_ap > own { ids(pool, &shared) } else { ids(pool, &chosen) });
    }
    let mut spec = EnsembleSpec::per_class(subsets);
    spec.selection_map = spec_report(pool, &spec, split)?.map;
    Ok(spec)
}

pub const EXHAUSTIVE_LIMIT: usize = 5;

fn all_subsets(n: usize) -> Result<Vec<Vec<usize>>> {
    if n > EXHAUSTIVE_LIMIT {
        return Err(Error::invalid(format!("exhaustive search is limited to {EXHAUSTIVE_LIMIT} models")));
    }
    Ok((1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect())
}

/// Best mAP over every non-empty subset.
pub fn exhaustive_all_class(pool: &ModelPool, split: &EvalSplit) -> Result<(Vec<usize>, f64)> {
    pool.validate()?;
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for s in all_subsets(pool.members.len())? {
        let v = subset_map(pool, &s, split);
        if v > best.1 {
            best = (s, v);
        }
    }
    Ok(best)
}

/// Best AP of each class over every non-empty subset.
pub fn exhaustive_per_class(pool: &ModelPool, split: &EvalSplit) -> Result<Vec<f64>> {
    let k = pool.validate()?;
    let subsets = all_subsets(pool.members.len())?;
    Ok((0..k)
        .map(|c| {
            subsets
                .iter()
                .map(|s| subset_class_ap(pool, s, c, split))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Where context fusion happens relative to score averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextOrder {
    /// Each member's scores are fused before averaging.
    #[default]
    PerModel,
    /// Averaged scores are fused once.
    AfterAverage,
}

/// Averages several members' scores for one image. All members must have
/// scored the same kept boxes.
pub fn average_image_scores(members: &[(&str, &ImageScores)], spec: &EnsembleSpec) -> Result<ImageScores> {
    let (_, first) = members.first().ok_or_else(|| Error::invalid("no members to average"))?;
    if members.iter().any(|(_, m)| m.proposal_ids != first.proposal_ids) {
        return Err(Error::invalid("ensemble members scored different boxes"));
    }
    let mut out = (*first).clone();
    for (i, s) in out.scores.iter_mut().enumerate() {
        let per: Vec<(&str, &[f64])> = members.iter().map(|(id, m)| (*id, m.scores[i].as_slice())).collect();
        *s = average_scores(&per, spec)?.into_data();
    }
    Ok(out)
}

/// Applies context fusion to already averaged scores.
pub fn fuse_after_average(scores: &mut ImageScores, image: &Tensor, net: &StagedNetwork, fusion: &ContextFusion) -> Result<()> {
    let ctx = context_scores(net, image)?;
    for s in scores.scores.iter_mut() {
        *s = fusion.fuse(s, &ctx)?;
    }
    scores.context = Some(ctx);
    Ok(())
}
