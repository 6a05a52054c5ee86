//! Detection metrics: IoU, proposal recall, average precision and mAP.
//!
//! Conventions: box areas use continuous coordinates (no `+1`); a detection
//! is a true positive when it reaches the IoU threshold with a
//! not-yet-matched ground truth of its class in the same image (the best
//! such ground truth is consumed, lowest index on ties); detections are
//! visited by descending confidence with ties broken by their position in
//! the input; AP is the all-points interpolated area under the
//! precision-recall curve.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::pipeline::BoundingBox;
use crate::Result;

pub const DEFAULT_IOU: f64 = 0.5;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Ground truth keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub images: BTreeMap<u64, Vec<GtObject>>,
}

impl GroundTruthSet {
    pub fn insert(&mut self, image_id: u64, objects: Vec<GtObject>) {
        self.images.insert(image_id, objects);
    }

    pub fn num_objects(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    /// Sorted class ids that occur at least once.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.images.values().flatten().map(|o| o.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn count_class(&self, class_id: usize) -> usize {
        self.images.values().flatten().filter(|o| o.class_id == class_id).count()
    }
}

/// A scored, classified box on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
}

/// Fraction of ground-truth boxes covered by at least one proposal with
/// IoU at or above `iou_thr`. With no ground truth the recall is 1.
pub fn proposal_recall(proposals: &BTreeMap<u64, Vec<BoundingBox>>, gts: &GroundTruthSet, iou_thr: f64) -> f64 {
    let total = gts.num_objects();
    if total == 0 {
        log::warn!("proposal_recall called without ground truth; reporting 1.0");
        return 1.0;
    }
    let empty = Vec::new();
    let hit = gts
        .images
        .iter()
        .map(|(id, objs)| {
            let props = proposals.get(id).unwrap_or(&empty);
            objs.iter().filter(|o| props.iter().any(|p| iou(p, &o.bbox) >= iou_thr)).count()
        })
        .sum::<usize>();
    hit as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection in ranked order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
    pub num_gt: usize,
}

/// Indices of `dets` in ranking order: descending confidence, then input order.
pub fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// True-positive flag per detection, in ranking order.
pub fn match_detections(dets: &[Detection], order: &[usize], gts: &GroundTruthSet, class_id: usize, iou_thr: f64) -> Vec<bool> {
    let mut used: BTreeMap<u64, Vec<bool>> = gts.images.iter().map(|(id, objs)| (*id, vec![false; objs.len()])).collect();
    order
        .iter()
        .map(|&k| {
            let d = &dets[k];
            let Some(objs) = gts.images.get(&d.image_id) else {
                return false;
            };
            let used = used.get_mut(&d.image_id).expect("image present");
            let mut best: Option<(usize, f64)> = None;
            for (g, o) in objs.iter().enumerate() {
                if o.class_id != class_id || used[g] {
                    continue;
                }
                let v = iou(&d.bbox, &o.bbox);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision of `dets` for `class_id`. Detections of other classes
/// are ignored.
pub fn average_precision(dets: &[Detection], gts: &GroundTruthSet, class_id: usize, iou_thr: f64) -> PrCurve {
    let dets: Vec<Detection> = dets.iter().copied().filter(|d| d.class_id == class_id).collect();
    let npos = gts.count_class(class_id);
    let order = ranking(&dets);
    let tp = match_detections(&dets, &order, gts, class_id, iou_thr);
    let mut points = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &t in &tp {
        if t {
            ntp += 1;
        } else {
            nfp += 1;
        }
        let recall = if npos > 0 { ntp as f64 / npos as f64 } else { 0.0 };
        points.push((recall, ntp as f64 / (ntp + nfp) as f64));
    }
    let ap = if npos == 0 { 0.0 } else { interpolated_area(&points) };
    PrCurve { points, ap, num_gt: npos }
}

/// All-points interpolation: area under the monotone precision envelope.
fn interpolated_area(points: &[(f64, f64)]) -> f64 {
    let mut env: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        area += (r - prev_recall) * env[i];
        prev_recall = r;
    }
    area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// `(class_id, ap)` for every class present in the ground truth.
    pub per_class: Vec<(usize, f64)>,
}

impl MapReport {
    pub fn ap(&self, class_id: usize) -> Option<f64> {
        self.per_class.iter().find(|(c, _)| *c == class_id).map(|p| p.1)
    }

    /// `class_id, ap` rows followed by a `mAP, value` summary line.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "class_id,ap")?;
        for (c, ap) in &self.per_class {
            writeln!(w, "{c},{ap}")?;
        }
        writeln!(w, "mAP,{}", self.map)
    }
}

/// Unweighted mean of per-class AP over the classes present in `gts`.
pub fn mean_ap(dets: &[Detection], gts: &GroundTruthSet, iou_thr: f64) -> MapReport {
    let classes = gts.classes();
    let mut by_class: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_class.entry(d.class_id).or_default().push(*d);
    }
    let per_class: Vec<(usize, f64)> = classes
        .iter()
        .map(|&c| {
            let ds = by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            (c, average_precision(ds, gts, c, iou_thr).ap)
        })
        .collect();
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64
    };
    MapReport { map, per_class }
}

/// Writes `recall,precision` rows for one class.
pub fn write_pr_csv(curve: &PrCurve, mut w: impl Write) -> Result<()> {
    let io = |e| crate::Error::io("pr curve", e);
    writeln!(w, "recall,precision").map_err(io)?;
    for (r, p) in &curve.points {
        writeln!(w, "{r},{p}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(image_id: u64, b: BoundingBox, class_id: usize, confidence: f64) -> Detection {
        Detection {
            image_id,
            bbox: b,
            class_id,
            confidence,
        }
    }

    fn gt_one(b: BoundingBox, class_id: usize) -> GroundTruthSet {
        let mut g = GroundTruthSet::default();
        g.insert(0, vec![GtObject { bbox: b, class_id }]);
        g
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &bb(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        // touching edges do not overlap
        assert_eq!(iou(&a, &bb(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn recall_examples() {
        let g = gt_one(bb(0.0, 0.0, 10.0, 10.0), 0);
        let mut props = BTreeMap::new();
        assert_eq!(proposal_recall(&props, &g, 0.5), 0.0);
        props.insert(0, vec![bb(0.0, 0.0, 10.0, 10.0)]);
        assert_eq!(proposal_recall(&props, &g, 0.5), 1.0);
        assert_eq!(proposal_recall(&props, &GroundTruthSet::default(), 0.5), 1.0);
    }

    #[test]
    fn ap_single_hit_and_miss() {
        let g = gt_one(bb(0.0, 0.0, 10.0, 10.0), 0);
        let hit = average_precision(&[det(0, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9)], &g, 0, 0.5);
        assert_eq!(hit.ap, 1.0);
        let miss = average_precision(&[det(0, bb(50.0, 50.0, 60.0, 60.0), 0, 0.9)], &g, 0, 0.5);
        assert_eq!(miss.ap, 0.0);
    }

    #[test]
    fn duplicate_counts_as_false_positive() {
        let g = gt_one(bb(0.0, 0.0, 10.0, 10.0), 0);
        let ds = [det(0, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9), det(0, bb(0.0, 0.0, 10.0, 10.0), 0, 0.8)];
        let c = average_precision(&ds, &g, 0, 0.5);
        assert_eq!(c.points, vec![(1.0, 1.0), (1.0, 0.5)]);
        assert_eq!(c.ap, 1.0);
    }

    #[test]
    fn map_examples() {
        let mut g = GroundTruthSet::default();
        g.insert(
            0,
            vec![
                GtObject {
                    bbox: bb(0.0, 0.0, 10.0, 10.0),
                    class_id: 0,
                },
                GtObject {
                    bbox: bb(20.0, 20.0, 30.0, 30.0),
                    class_id: 1,
                },
            ],
        );
        let ds = [det(0, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9), det(0, bb(0.0, 0.0, 10.0, 10.0), 1, 0.9)];
        let r = mean_ap(&ds, &g, 0.5);
        assert_eq!(r.per_class, vec![(0, 1.0), (1, 0.0)]);
        assert_eq!(r.map, 0.5);
        let one = mean_ap(&ds[..1], &gt_one(bb(0.0, 0.0, 10.0, 10.0), 0), 0.5);
        assert_eq!(one.map, 1.0);
    }

    #[test]
    fn map_csv_layout() {
        let r = MapReport {
            map: 0.5,
            per_class: vec![(0, 1.0), (3, 0.0)],
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "class_id,ap\n0,1\n3,0\nmAP,0.5\n");
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in (0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0),
                                        b in (0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0)) {
            let x = bb(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let y = bb(b.0, b.1, b.0 + b.2, b.1 + b.3);
            let v = iou(&x, &y);
            prop_assert_eq!(v, iou(&y, &x));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&x, &x), 1.0);
        }
    }
}
