use crate::eval::{iou, ranking, Detection};

pub const DEFAULT_NMS_IOU: f64 = 0.3;

/// Greedy non-maximum suppression: visiting detections by descending
/// confidence, keep one unless a kept detection of the same class and image
/// overlaps it with IoU above `iou_threshold`. Output is in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in ranking(dets) {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.image_id == d.image_id && k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::BoundingBox;
    use proptest::prelude::*;

    fn det(x: f64, conf: f64, class_id: usize) -> Detection {
        Detection {
            image_id: 0,
            bbox: BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            class_id,
            confidence: conf,
        }
    }

    #[test]
    fn identical_boxes_keep_the_higher() {
        let out = nms(&[det(0.0, 0.8, 0), det(0.0, 0.9, 0)], DEFAULT_NMS_IOU);
        assert_eq!(out, vec![det(0.0, 0.9, 0)]);
    }

    #[test]
    fn disjoint_or_other_class_survive() {
        assert_eq!(nms(&[det(0.0, 0.8, 0), det(50.0, 0.9, 0)], 0.3).len(), 2);
        assert_eq!(nms(&[det(0.0, 0.8, 0), det(0.0, 0.9, 1)], 0.3).len(), 2);
    }

    /// Suppression by brute force over the fixed visiting order.
    fn oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let order = ranking(dets);
        let mut alive = vec![true; dets.len()];
        for (a, &i) in order.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            for &j in &order[a + 1..] {
                if dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) > thr {
                    alive[j] = false;
                }
            }
        }
        order.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
    }

    #[test]
    fn chain_of_five_matches_oracle() {
        let chain: Vec<Detection> = (0..5).map(|i| det(4.0 * i as f64, 0.5 + 0.1 * ((i * 3) % 5) as f64, 0)).collect();
        assert_eq!(nms(&chain, 0.3), oracle(&chain, 0.3));
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_antichain(xs in prop::collection::vec((0.0f64..40.0, 0.0f64..1.0, 0usize..2), 0..12)) {
            let dets: Vec<Detection> = xs.iter().map(|&(x, c, k)| det(x, c, k)).collect();
            let out = nms(&dets, 0.3);
            prop_assert_eq!(&out, &oracle(&dets, 0.3));
            for (i, a) in out.iter().enumerate() {
                for b in &out[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= 0.3);
                }
            }
        }
    }
}
