use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::eval::{iou, GroundTruthSet};
use crate::pipeline::BoundingBox;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_REJECTION_THRESHOLD: f64 = -1.1;

/// A proposal scored by the first-pass model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredProposal {
    pub bbox: BoundingBox,
    pub scores: Tensor,
    pub source_id: usize,
}

impl ScoredProposal {
    pub fn new(bbox: BoundingBox, scores: Tensor, source_id: usize) -> Result<Self> {
        scores.check_finite(&format!("scores of proposal {source_id}"))?;
        Ok(ScoredProposal { bbox, scores, source_id })
    }

    pub fn max_score(&self) -> f64 {
        max_score(self.scores.data())
    }
}

fn max_score(s: &[f64]) -> f64 {
    s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// A proposal is rejected iff its highest class score is below `t`.
pub fn is_rejected(scores: &[f64], t: f64) -> bool {
    max_score(scores) < t
}

/// Splits into `(kept, rejected)`, each in input order.
pub fn reject_proposals(proposals: Vec<ScoredProposal>, t: f64) -> (Vec<ScoredProposal>, Vec<ScoredProposal>) {
    proposals.into_iter().partition(|p| !is_rejected(p.scores.data(), t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub rejection_rate: f64,
    /// Recall of the kept proposals at the sweep's IoU threshold.
    pub recall: f64,
}

/// Rejection rate and kept-proposal recall for each threshold, sorted by
/// threshold. Kept sets shrink as the threshold grows, so both columns are
/// monotone.
pub fn threshold_sweep(
    scored: &BTreeMap<u64, Vec<ScoredProposal>>,
    gts: &GroundTruthSet,
    thresholds: &[f64],
    iou_thr: f64,
) -> Result<Vec<SweepRow>> {
    if thresholds.iter().any(|t| t.is_nan()) {
        return Err(Error::invalid("NaN rejection threshold"));
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    let total: usize = scored.values().map(Vec::len).sum();
    let num_gt = gts.num_objects();
    // Best score among proposals covering each GT: the GT stays recalled
    // while the threshold is at or below it. Uncovered GTs are never recalled,
    // even at a threshold of minus infinity.
    let mut cover: Vec<f64> = Vec::with_capacity(num_gt);
    for (id, objs) in &gts.images {
        let props = scored.get(id).map(Vec::as_slice).unwrap_or(&[]);
        for o in objs {
            let best = props
                .iter()
                .filter(|p| iou(&p.bbox, &o.bbox) >= iou_thr)
                .map(ScoredProposal::max_score)
                .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
            if let Some(best) = best {
                cover.push(best);
            }
        }
    }
    let maxes: Vec<f64> = scored.values().flatten().map(ScoredProposal::max_score).collect();
    Ok(ts
        .into_iter()
        .map(|t| {
            let rejected = maxes.iter().filter(|&&m| m < t).count();
            let recalled = cover.iter().filter(|&&m| m >= t).count();
            SweepRow {
                threshold: t,
                rejection_rate: if total == 0 { 0.0 } else { rejected as f64 / total as f64 },
                recall: if num_gt == 0 { 1.0 } else { recalled as f64 / num_gt as f64 },
            }
        })
        .collect())
}

/// Largest swept threshold whose recall stays within `max_drop` of the
/// recall without rejection.
pub fn calibrate_threshold(
    scored: &BTreeMap<u64, Vec<ScoredProposal>>,
    gts: &GroundTruthSet,
    thresholds: &[f64],
    iou_thr: f64,
    max_drop: f64,
) -> Result<(f64, Vec<SweepRow>)> {
    let sweep = threshold_sweep(scored, gts, thresholds, iou_thr)?;
    let base = threshold_sweep(scored, gts, &[f64::NEG_INFINITY], iou_thr)?[0].recall;
    let t = sweep
        .iter()
        .filter(|r| r.recall >= base - max_drop)
        .map(|r| r.threshold)
        .fold(f64::NEG_INFINITY, f64::max);
    if t == f64::NEG_INFINITY {
        return Err(Error::invalid("no swept threshold keeps recall within the allowed drop"));
    }
    Ok((t, sweep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::GtObject;
    use proptest::prelude::*;

    fn sp(scores: Vec<f64>, id: usize) -> ScoredProposal {
        ScoredProposal::new(BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), Tensor::from_vec(scores), id).unwrap()
    }

    #[test]
    fn threshold_examples() {
        assert!(is_rejected(&[-1.2, -1.5], DEFAULT_REJECTION_THRESHOLD));
        assert!(!is_rejected(&[-1.0, -3.0], DEFAULT_REJECTION_THRESHOLD));
        assert!(!is_rejected(&[-1.1, -3.0], DEFAULT_REJECTION_THRESHOLD));
    }

    #[test]
    fn non_finite_scores_refused() {
        assert!(ScoredProposal::new(BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), Tensor::from_vec(vec![f64::NAN]), 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_exact(scores in prop::collection::vec(prop::collection::vec(-3.0f64..1.0, 1..4), 0..30), t in -2.0f64..0.0) {
            let props: Vec<ScoredProposal> = scores.iter().enumerate().map(|(i, s)| sp(s.clone(), i)).collect();
            let (kept, rejected) = reject_proposals(props, t);
            prop_assert_eq!(kept.len() + rejected.len(), scores.len());
            let mut ids: Vec<usize> = kept.iter().chain(&rejected).map(|p| p.source_id).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..scores.len()).collect::<Vec<_>>());
            for p in &kept {
                prop_assert!(scores[p.source_id].iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= t);
            }
            for p in &rejected {
                prop_assert!(scores[p.source_id].iter().cloned().fold(f64::NEG_INFINITY, f64::max) < t);
            }
        }
    }

    #[test]
    fn sweep_is_monotone() {
        let mut scored = BTreeMap::new();
        let mut gts = GroundTruthSet::default();
        let gt = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        for img in 0..5u64 {
            let props: Vec<ScoredProposal> = (0..8)
                .map(|i| {
                    let b = BoundingBox::new(i as f64, 0.0, 10.0 + i as f64, 10.0).unwrap();
                    ScoredProposal::new(b, Tensor::from_vec(vec![-2.0 + 0.3 * i as f64 - 0.1 * img as f64]), i).unwrap()
                })
                .collect();
            scored.insert(img, props);
            gts.insert(img, vec![GtObject { bbox: gt, class_id: 0 }]);
        }
        let ts: Vec<f64> = (0..30).map(|i| -2.5 + 0.1 * i as f64).collect();
        let rows = threshold_sweep(&scored, &gts, &ts, 0.5).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].rejection_rate >= w[0].rejection_rate);
            assert!(w[1].recall <= w[0].recall);
        }
        assert_eq!(rows[0].recall, 1.0);
        let (t, _) = calibrate_threshold(&scored, &gts, &ts, 0.5, 0.0).unwrap();
        let r = threshold_sweep(&scored, &gts, &[t], 0.5).unwrap()[0];
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn uncovered_objects_are_never_recalled() {
        let gt = |x: f64| GtObject {
            bbox: BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            class_id: 0,
        };
        let mut gts = GroundTruthSet::default();
        gts.insert(0, vec![gt(0.0), gt(50.0)]);
        let covering = ScoredProposal::new(gt(0.0).bbox, Tensor::from_vec(vec![-9.0]), 0).unwrap();
        let scored = BTreeMap::from([(0u64, vec![covering])]);
        let rows = threshold_sweep(&scored, &gts, &[f64::NEG_INFINITY, -10.0], 0.5).unwrap();
        assert_eq!(rows[0].recall, 0.5);
        assert_eq!(rows[1].recall, 0.5);
    }
}
