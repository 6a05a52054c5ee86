//! Training-set construction for the detector network and the fitted
//! post-network stages.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::eval::{iou, GtObject};
use crate::layers::LossTarget;
use crate::network::{InputShape, StagedNetwork};
use crate::par::Exec;
use crate::pipeline::context::{context_fuse_train, context_scores, ContextFusion};
use crate::pipeline::detect::{score_image, DetectOptions, DetectorModels, ImageInput};
use crate::pipeline::linear::{train_linear_ova, LinearOva, LinearTrainConfig};
use crate::pipeline::refine::{box_deltas, train_box_regressor, BoxRegressor};
use crate::pipeline::{crop_warp, resize, BoundingBox};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::Sample;
use crate::{Error, Result};

/// A training image with its ground truth and proposals.
#[derive(Debug, Clone, Copy)]
pub struct LabeledImage<'a> {
    pub image_id: u64,
    pub image: &'a Tensor,
    pub gts: &'a [GtObject],
    pub proposals: &'a [BoundingBox],
}

impl<'a> LabeledImage<'a> {
    fn input(&self) -> ImageInput<'a> {
        ImageInput {
            image_id: self.image_id,
            image: self.image,
            proposals: self.proposals,
        }
    }
}

/// Best IoU with any ground truth and the index of that ground truth
/// (lowest index on ties).
pub fn match_box(b: &BoundingBox, gts: &[GtObject]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (i, g) in gts.iter().enumerate() {
        let v = iou(b, &g.bbox);
        if v > best.0 {
            best = (v, Some(i));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropLabels {
    /// `K` one-vs-all labels; background is all `-1`.
    OneVsAll,
    /// `K + 1` classes with background last.
    WithBackground,
}

pub fn object_target(class: Option<usize>, num_classes: usize, labels: CropLabels) -> LossTarget {
    match labels {
        CropLabels::OneVsAll => LossTarget::OneVsAll((0..num_classes).map(|k| if Some(k) == class { 1.0 } else { -1.0 }).collect()),
        CropLabels::WithBackground => LossTarget::Index(class.unwrap_or(num_classes)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropPolicy {
    /// Proposals at or above this IoU take the matched object's class.
    pub pos_iou: f64,
    /// Proposals below this IoU are background.
    pub neg_iou: f64,
    pub max_pos_per_image: usize,
    pub max_neg_per_image: usize,
    /// Adds every ground-truth box as a positive.
    pub include_gt: bool,
}

impl Default for CropPolicy {
    fn default() -> Self {
        CropPolicy {
            pos_iou: 0.5,
            neg_iou: 0.3,
            max_pos_per_image: 8,
            max_neg_per_image: 6,
            include_gt: true,
        }
    }
}

/// Warped crops with object or background labels. Sampling per image is
/// seeded by `(seed, image id)`.
pub fn crop_samples(
    images: &[LabeledImage<'_>],
    input: &InputShape,
    policy: &CropPolicy,
    labels: CropLabels,
    num_classes: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Sample>> {
    if !(policy.neg_iou <= policy.pos_iou) {
        return Err(Error::invalid("negative IoU bound must not exceed the positive bound"));
    }
    let per = exec.try_map(images, |img| -> Result<Vec<Sample>> {
        let mut rng = rng::rng_indexed(seed, "crops", img.image_id);
        let mut pos: Vec<(BoundingBox, usize)> = Vec::new();
        let mut neg: Vec<BoundingBox> = Vec::new();
        for b in img.proposals {
            match match_box(b, img.gts) {
                (v, Some(g)) if v >= policy.pos_iou => pos.push((*b, img.gts[g].class_id)),
                (v, _) if v < policy.neg_iou => neg.push(*b),
                _ => {}
            }
        }
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        pos.truncate(policy.max_pos_per_image);
        neg.truncate(policy.max_neg_per_image);
        if policy.include_gt {
            pos.extend(img.gts.iter().map(|g| (g.bbox, g.class_id)));
        }
        let mut out = Vec::with_capacity(pos.len() + neg.len());
        for (b, c) in pos {
            if c >= num_classes {
                return Err(Error::invalid(format!("class {c} out of range for {num_classes} classes")));
            }
            out.push(Sample {
                input: crop_warp(img.image, &b, input.height, input.width)?,
                target: object_target(Some(c), num_classes, labels),
            });
        }
        for b in neg {
            out.push(Sample {
                input: crop_warp(img.image, &b, input.height, input.width)?,
                target: object_target(None, num_classes, labels),
            });
        }
        Ok(out)
    })?;
    Ok(per.into_iter().flatten().collect())
}

/// Whole images resized to the network input, labelled with an image-level
/// class.
pub fn whole_image_samples(images: &[(&Tensor, usize)], input: &InputShape, exec: Exec) -> Result<Vec<Sample>> {
    exec.try_map(images, |(img, label)| {
        Ok(Sample {
            input: resize(img, input.height, input.width)?,
            target: LossTarget::Index(*label),
        })
    })
}

/// One scored training proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRow {
    pub image_id: u64,
    pub bbox: BoundingBox,
    /// Scores after the enabled rescoring stages (sub-box only).
    pub scores: Vec<f64>,
    pub feature: Vec<f64>,
    pub subbox: Option<Vec<f64>>,
    pub context: Option<Vec<f64>>,
    pub best_iou: f64,
    pub gt: Option<GtObject>,
}

impl BoxRow {
    /// One-vs-all labels, or `None` for boxes between the IoU bounds.
    pub fn ova_labels(&self, num_classes: usize, pos_iou: f64, neg_iou: f64) -> Option<Vec<f64>> {
        let class = match self.gt {
            Some(g) if self.best_iou >= pos_iou => Some(g.class_id),
            _ if self.best_iou < neg_iou => None,
            _ => return None,
        };
        match object_target(class, num_classes, CropLabels::OneVsAll) {
            LossTarget::OneVsAll(y) => Some(y),
            LossTarget::Index(_) => unreachable!(),
        }
    }
}

/// Scores every proposal of every image with `models.net` (and the sub-box
/// classifier when `apply_subbox`), recording features and labels.
pub fn collect_boxes(
    images: &[LabeledImage<'_>],
    models: &DetectorModels<'_>,
    apply_subbox: bool,
    with_subbox_features: bool,
    context_net: Option<&StagedNetwork>,
    exec: Exec,
) -> Result<Vec<BoxRow>> {
    let opts = DetectOptions {
        rejection: false,
        subbox: apply_subbox,
        context: false,
        refine: false,
        ..DetectOptions::default()
    };
    let per = exec.try_map(images, |img| -> Result<Vec<BoxRow>> {
        let s = score_image(img.input(), models, &opts, with_subbox_features)?;
        let ctx = context_net.map(|c| context_scores(c, img.image)).transpose()?;
        Ok(s.boxes
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let (v, g) = match_box(b, img.gts);
                BoxRow {
                    image_id: img.image_id,
                    bbox: *b,
                    scores: s.scores[j].clone(),
                    feature: s.features[j].clone(),
                    subbox: s.subbox_features.as_ref().map(|f| f[j].clone()),
                    context: ctx.clone(),
                    best_iou: v,
                    gt: g.map(|i| img.gts[i]),
                }
            })
            .collect())
    })?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFitConfig {
    pub linear: LinearTrainConfig,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub ridge_lambda: f64,
    /// Minimum IoU of a proposal used to fit the box regressor.
    pub regress_min_iou: f64,
}

impl Default for StageFitConfig {
    fn default() -> Self {
        StageFitConfig {
            linear: LinearTrainConfig::default(),
            pos_iou: 0.5,
            neg_iou: 0.3,
            ridge_lambda: 10.0,
            regress_min_iou: 0.5,
        }
    }
}

fn labelled<'r>(rows: &'r [BoxRow], k: usize, cfg: &StageFitConfig) -> Vec<(&'r BoxRow, Vec<f64>)> {
    rows.iter()
        .filter_map(|r| r.ova_labels(k, cfg.pos_iou, cfg.neg_iou).map(|y| (r, y)))
        .collect()
}

pub fn fit_subbox_classifier(rows: &[BoxRow], num_classes: usize, cfg: &StageFitConfig) -> Result<LinearOva> {
    let data = labelled(rows, num_classes, cfg);
    let xs: Vec<Vec<f64>> = data
        .iter()
        .map(|(r, _)| r.subbox.clone().ok_or_else(|| Error::invalid("rows lack sub-box features")))
        .collect::<Result<_>>()?;
    let ys: Vec<Vec<f64>> = data.into_iter().map(|(_, y)| y).collect();
    Ok(train_linear_ova(&xs, &ys, &cfg.linear)?.0)
}

pub fn fit_context_fusion(rows: &[BoxRow], num_classes: usize, cfg: &StageFitConfig) -> Result<ContextFusion> {
    let data = labelled(rows, num_classes, cfg);
    let det: Vec<Vec<f64>> = data.iter().map(|(r, _)| r.scores.clone()).collect();
    let ctx: Vec<Vec<f64>> = data
        .iter()
        .map(|(r, _)| r.context.clone().ok_or_else(|| Error::invalid("rows lack context scores")))
        .collect::<Result<_>>()?;
    let ys: Vec<Vec<f64>> = data.into_iter().map(|(_, y)| y).collect();
    Ok(context_fuse_train(&det, &ctx, &ys, &cfg.linear)?.0)
}

pub fn fit_box_regressor(rows: &[BoxRow], cfg: &StageFitConfig) -> Result<BoxRegressor> {
    let (mut xs, mut ts) = (Vec::new(), Vec::new());
    for r in rows {
        if let Some(g) = r.gt {
            if r.best_iou >= cfg.regress_min_iou {
                xs.push(r.feature.clone());
                ts.push(box_deltas(&r.bbox, &g.bbox));
            }
        }
    }
    if xs.is_empty() {
        return Err(Error::invalid(
            "no proposal overlaps a ground truth enough to fit the box regressor",
        ));
    }
    train_box_regressor(&xs, &ts, cfg.ridge_lambda)
}

/// The fitted post-network stages of one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedStages {
    pub subbox: LinearOva,
    pub fusion: ContextFusion,
    pub refiner: BoxRegressor,
}

impl FittedStages {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::malformed("stage file", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(format!("stage file {}", path.display()), e))
    }
}

/// Fits the sub-box classifier, then context fusion on the sub-box scores,
/// then the box regressor on every proposal of `images`.
///
/// The sub-box classifier sees only even-position images and fusion only
/// odd-position ones. Fitting fusion on in-sample sub-box scores would hand it
/// nearly separable rows, leaving the context weights close to zero.
pub fn fit_stages(
    images: &[LabeledImage<'_>],
    net: &StagedNetwork,
    context_net: &StagedNetwork,
    cfg: &StageFitConfig,
    exec: Exec,
) -> Result<FittedStages> {
    if images.len() < 2 {
        return Err(Error::invalid("stage fitting needs at least two images"));
    }
    let k = net.num_classes();
    let rows = collect_boxes(images, &DetectorModels::scoring(net), false, true, Some(context_net), exec)?;
    let second: BTreeSet<u64> = images.iter().skip(1).step_by(2).map(|i| i.image_id).collect();
    let (mut held_out, first): (Vec<BoxRow>, Vec<BoxRow>) = rows.iter().cloned().partition(|r| second.contains(&r.image_id));
    let subbox = fit_subbox_classifier(&first, k, cfg)?;
    // Same override rule as the detection pass.
    for r in &mut held_out {
        let x = r.subbox.as_ref().ok_or_else(|| Error::invalid("rows lack sub-box features"))?;
        for (v, new) in r.scores.iter_mut().zip(subbox.scores(x)?) {
            if let Some(new) = new {
                *v = new;
            }
        }
    }
    let fusion = fit_context_fusion(&held_out, k, cfg)?;
    let refiner = fit_box_regressor(&rows, cfg)?;
    Ok(FittedStages { subbox, fusion, refiner })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_labels_follow_iou_bounds() {
        let img = Tensor::zeros(&[3, 32, 32]);
        let gt = GtObject {
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            class_id: 2,
        };
        let props = vec![
            BoundingBox::new(0.0, 0.0, 10.0, 9.0).unwrap(),
            BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap(),
            BoundingBox::new(5.0, 0.0, 15.0, 10.0).unwrap(),
        ];
        let gts = [gt];
        let images = [LabeledImage {
            image_id: 0,
            image: &img,
            gts: &gts,
            proposals: &props,
        }];
        let input = InputShape {
            channels: 3,
            height: 8,
            width: 8,
        };
        let s = crop_samples(
            &images,
            &input,
            &CropPolicy::default(),
            CropLabels::WithBackground,
            4,
            0,
            Exec::default(),
        )
        .unwrap();
        let mut targets: Vec<LossTarget> = s.into_iter().map(|x| x.target).collect();
        targets.sort_by_key(|t| format!("{t:?}"));
        assert_eq!(targets, vec![LossTarget::Index(2), LossTarget::Index(2), LossTarget::Index(4)]);
    }

    #[test]
    fn between_bounds_is_ignored() {
        let row = BoxRow {
            image_id: 0,
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            scores: vec![],
            feature: vec![],
            subbox: None,
            context: None,
            best_iou: 0.4,
            gt: Some(GtObject {
                bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                class_id: 0,
            }),
        };
        assert_eq!(row.ova_labels(2, 0.5, 0.3), None);
        let pos = BoxRow {
            best_iou: 0.6,
            ..row.clone()
        };
        assert_eq!(pos.ova_labels(2, 0.5, 0.3), Some(vec![1.0, -1.0]));
        let neg = BoxRow { best_iou: 0.1, ..row };
        assert_eq!(neg.ova_labels(2, 0.5, 0.3), Some(vec![-1.0, -1.0]));
    }
}
