use std::collections::BTreeMap;

use crate::eval::iou;
use crate::network::StagedNetwork;
use crate::pipeline::{crop_warp, BoundingBox};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Penultimate activations of one scored box.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub box_id: usize,
    pub feature: Tensor,
}

/// Crops `b`, warps it to the network's input size and runs the network.
pub fn score_box(net: &StagedNetwork, image: &Tensor, b: &BoundingBox) -> Result<(Tensor, Tensor)> {
    let shape = &net.config.input;
    if image.shape().first() != Some(&shape.channels) {
        return Err(Error::ShapeMismatch {
            expected: vec![shape.channels],
            actual: image.shape().to_vec(),
        });
    }
    let crop = crop_warp(image, b, shape.height, shape.width)?;
    let (scores, feature) = net.predict(&crop)?;
    Ok((scores, Tensor::from_vec(feature)))
}

/// Features keyed by box id; each id is written once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    records: BTreeMap<usize, FeatureRecord>,
}

impl FeatureStore {
    pub fn insert(&mut self, record: FeatureRecord) -> Result<()> {
        if let Some(prev) = self.records.get(&record.box_id) {
            if prev.feature.len() != record.feature.len() {
                return Err(Error::invalid("feature length differs within one store"));
            }
            return Err(Error::invalid(format!("feature for box {} already stored", record.box_id)));
        }
        if let Some(first) = self.records.values().next() {
            if first.feature.len() != record.feature.len() {
                return Err(Error::invalid("feature length differs within one store"));
            }
        }
        self.records.insert(record.box_id, record);
        Ok(())
    }

    pub fn get(&self, box_id: usize) -> Option<&FeatureRecord> {
        self.records.get(&box_id)
    }

    pub fn contains(&self, box_id: usize) -> bool {
        self.records.contains_key(&box_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Half-size sub-boxes anchored at the root's corners: top-left, top-right,
/// bottom-left, bottom-right.
pub fn subbox_geometry(root: &BoundingBox) -> [BoundingBox; 4] {
    let (w, h) = (root.width() / 2.0, root.height() / 2.0);
    let at = |x1: f64, y1: f64| BoundingBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    };
    [
        at(root.x1, root.y1),
        BoundingBox {
            x1: root.x2 - w,
            y1: root.y1,
            x2: root.x2,
            y2: root.y1 + h,
        },
        BoundingBox {
            x1: root.x1,
            y1: root.y2 - h,
            x2: root.x1 + w,
            y2: root.y2,
        },
        BoundingBox {
            x1: root.x2 - w,
            y1: root.y2 - h,
            x2: root.x2,
            y2: root.y2,
        },
    ]
}

/// For each sub-box of `root`, the id of the proposal with the largest IoU
/// (lowest id on ties).
pub fn select_subbox_proposals(root: &BoundingBox, proposals: &[(usize, BoundingBox)]) -> Result<[usize; 4]> {
    if proposals.is_empty() {
        return Err(Error::invalid("sub-box selection needs a non-empty proposal set"));
    }
    let subs = subbox_geometry(root);
    let mut out = [0usize; 4];
    for (slot, sb) in out.iter_mut().zip(&subs) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &(id, b) in proposals {
            let v = iou(sb, &b);
            if v > best.0 || (v == best.0 && id < best.1) {
                best = (v, id);
            }
        }
        *slot = best.1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubboxFeature {
    /// `[f_0, f_max, f_avg]`, length `3F`.
    pub combined: Vec<f64>,
    pub selected: [usize; 4],
}

/// Root feature concatenated with the elementwise max and mean of the four
/// selected sub-box features.
pub fn subbox_features(
    root_id: usize,
    root: &BoundingBox,
    proposals: &[(usize, BoundingBox)],
    store: &FeatureStore,
) -> Result<SubboxFeature> {
    let selected = select_subbox_proposals(root, proposals)?;
    let f0 = store
        .get(root_id)
        .ok_or_else(|| Error::invalid(format!("no stored feature for root box {root_id}")))?;
    let parts: Vec<&Tensor> = selected
        .iter()
        .map(|id| {
            store
                .get(*id)
                .map(|r| &r.feature)
                .ok_or_else(|| Error::invalid(format!("no stored feature for proposal {id}")))
        })
        .collect::<Result<_>>()?;
    let f = f0.feature.len();
    let mut combined = Vec::with_capacity(3 * f);
    combined.extend_from_slice(f0.feature.data());
    combined.extend((0..f).map(|i| parts.iter().map(|p| p.data()[i]).fold(f64::NEG_INFINITY, f64::max)));
    combined.extend((0..f).map(|i| parts.iter().map(|p| p.data()[i]).sum::<f64>() / 4.0));
    Ok(SubboxFeature { combined, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn store_of(features: &[Vec<f64>]) -> FeatureStore {
        let mut s = FeatureStore::default();
        for (i, f) in features.iter().enumerate() {
            s.insert(FeatureRecord {
                box_id: i,
                feature: Tensor::from_vec(f.clone()),
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn exact_sub_boxes_are_selected() {
        let root = BoundingBox::new(2.0, 4.0, 22.0, 16.0).unwrap();
        let subs = subbox_geometry(&root);
        let mut props = vec![(0, root)];
        props.extend(subs.iter().enumerate().map(|(i, b)| (i + 1, *b)));
        let feats = vec![vec![0.0, 0.0], vec![1.0, 5.0], vec![2.0, 6.0], vec![3.0, 7.0], vec![4.0, 8.0]];
        let r = subbox_features(0, &root, &props, &store_of(&feats)).unwrap();
        assert_eq!(r.selected, [1, 2, 3, 4]);
        assert_eq!(r.combined, vec![0.0, 0.0, 4.0, 8.0, 2.5, 6.5]);
    }

    #[test]
    fn same_selection_gives_identical_max_and_mean() {
        let root = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let props = vec![(7, BoundingBox::new(40.0, 40.0, 50.0, 50.0).unwrap())];
        let mut s = FeatureStore::default();
        s.insert(FeatureRecord {
            box_id: 0,
            feature: Tensor::from_vec(vec![1.0, 2.0]),
        })
        .unwrap();
        s.insert(FeatureRecord {
            box_id: 7,
            feature: Tensor::from_vec(vec![-0.5, 3.0]),
        })
        .unwrap();
        let r = subbox_features(0, &root, &props, &s).unwrap();
        assert_eq!(r.selected, [7; 4]);
        assert_eq!(&r.combined[2..4], &r.combined[4..6]);
        assert_eq!(&r.combined[2..4], &[-0.5, 3.0]);
    }

    #[test]
    fn empty_proposals_error() {
        let root = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert!(subbox_features(0, &root, &[], &store_of(&[vec![1.0]])).is_err());
    }

    #[test]
    fn ties_pick_lowest_id() {
        let root = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = subbox_geometry(&root)[0];
        let r = select_subbox_proposals(&root, &[(9, b), (3, b), (5, b)]).unwrap();
        assert_eq!(r[0], 3);
    }

    #[test]
    fn store_is_write_once() {
        let mut s = store_of(&[vec![1.0]]);
        assert!(s
            .insert(FeatureRecord {
                box_id: 0,
                feature: Tensor::from_vec(vec![2.0])
            })
            .is_err());
        assert!(s
            .insert(FeatureRecord {
                box_id: 1,
                feature: Tensor::from_vec(vec![2.0, 1.0])
            })
            .is_err());
    }

    #[test]
    fn random_store_mean_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let feats: Vec<Vec<f64>> = (0..12).map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let props: Vec<(usize, BoundingBox)> = (1..12)
            .map(|i| {
                let x = rng.gen_range(0.0..30.0);
                let y = rng.gen_range(0.0..30.0);
                (
                    i,
                    BoundingBox::new(x, y, x + rng.gen_range(2.0..20.0), y + rng.gen_range(2.0..20.0)).unwrap(),
                )
            })
            .collect();
        let root = BoundingBox::new(5.0, 5.0, 35.0, 29.0).unwrap();
        let r = subbox_features(0, &root, &props, &store_of(&feats)).unwrap();
        for i in 0..5 {
            let sel: Vec<f64> = r.selected.iter().map(|&id| feats[id][i]).collect();
            let mean = (sel[0] + sel[1] + sel[2] + sel[3]) / 4.0;
            assert!((r.combined[10 + i] - mean).abs() <= 1e-12);
            let min = sel.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min <= r.combined[10 + i] && r.combined[10 + i] <= r.combined[5 + i]);
        }
    }

    #[test]
    fn geometry_is_half_size_and_corner_anchored() {
        let root = BoundingBox::new(1.5, 2.0, 9.0, 14.0).unwrap();
        let s = subbox_geometry(&root);
        for b in &s {
            assert_eq!(b.width(), root.width() / 2.0);
            assert_eq!(b.height(), root.height() / 2.0);
        }
        assert_eq!((s[0].x1, s[0].y1), (root.x1, root.y1));
        assert_eq!((s[1].x2, s[1].y1), (root.x2, root.y1));
        assert_eq!((s[2].x1, s[2].y2), (root.x1, root.y2));
        assert_eq!((s[3].x2, s[3].y2), (root.x2, root.y2));
    }
}
