use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::Detection;
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::network::StagedNetwork;
use crate::par::Exec;
use crate::pipeline::context::{context_scores, ContextFusion};
use crate::pipeline::features::{score_box, subbox_features, FeatureRecord, FeatureStore};
use crate::pipeline::linear::LinearOva;
use crate::pipeline::nms::{nms, DEFAULT_NMS_IOU};
use crate::pipeline::refine::{refine_box, BoxRegressor};
use crate::pipeline::rejection::{is_rejected, DEFAULT_REJECTION_THRESHOLD};
use crate::pipeline::BoundingBox;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitMode {
    /// One detection per box and class.
    #[default]
    AllClasses,
    /// One detection per box, for its best class.
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub rejection: bool,
    pub rejection_threshold: f64,
    pub subbox: bool,
    pub context: bool,
    pub refine: bool,
    pub nms: bool,
    pub nms_iou: f64,
    pub emit: EmitMode,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            rejection: true,
            rejection_threshold: DEFAULT_REJECTION_THRESHOLD,
            subbox: true,
            context: true,
            refine: true,
            nms: true,
            nms_iou: DEFAULT_NMS_IOU,
            emit: EmitMode::AllClasses,
        }
    }
}

impl DetectOptions {
    /// Every optional stage off except NMS.
    pub fn scoring_only() -> Self {
        DetectOptions {
            rejection: false,
            subbox: false,
            context: false,
            refine: false,
            ..DetectOptions::default()
        }
    }
}

/// Models used by one detection pass. A stage enabled in [`DetectOptions`]
/// must have its model here.
#[derive(Debug, Clone, Copy)]
pub struct DetectorModels<'a> {
    pub net: &'a StagedNetwork,
    pub first_pass: Option<&'a StagedNetwork>,
    pub subbox: Option<&'a LinearOva>,
    pub context: Option<(&'a StagedNetwork, &'a ContextFusion)>,
    pub refiner: Option<&'a BoxRegressor>,
}

impl<'a> DetectorModels<'a> {
    pub fn scoring(net: &'a StagedNetwork) -> Self {
        DetectorModels {
            net,
            first_pass: None,
            subbox: None,
            context: None,
            refiner: None,
        }
    }

    fn check(&self, opts: &DetectOptions) -> Result<()> {
        let missing = [
            (opts.rejection && self.first_pass.is_none(), "rejection"),
            (opts.subbox && self.subbox.is_none(), "sub-box"),
            (opts.context && self.context.is_none(), "context"),
            (opts.refine && self.refiner.is_none(), "refinement"),
        ];
        match missing.iter().find(|m| m.0) {
            Some((_, name)) => Err(Error::invalid(format!("{name} stage enabled without its model"))),
            None => Ok(()),
        }
    }
}

/// One image's proposals.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub image_id: u64,
    pub image: &'a Tensor,
    pub proposals: &'a [BoundingBox],
}

/// Scores of the proposals that survived rejection, in proposal order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub proposal_ids: Vec<usize>,
    pub boxes: Vec<BoundingBox>,
    /// Per-box class scores after every enabled scoring stage.
    pub scores: Vec<Vec<f64>>,
    /// Per-box network scores before sub-box and context rescoring.
    pub net_scores: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    /// Per-box `[f_0, f_max, f_avg]` when sub-box features were computed.
    pub subbox_features: Option<Vec<Vec<f64>>>,
    pub context: Option<Vec<f64>>,
    pub num_proposals: usize,
    /// Boxes that passed rejection and went through the main network.
    pub num_kept: usize,
}

fn image_dims(image: &Tensor) -> Result<(f64, f64)> {
    match *image.shape() {
        [_, h, w] => Ok((w as f64, h as f64)),
        _ => Err(Error::invalid(format!("image must be [C,H,W], got {:?}", image.shape()))),
    }
}

/// Rejection, network scoring, sub-box rescoring and context fusion.
/// `with_subbox_features` computes the `3F` vectors even when the sub-box
/// stage is off.
pub fn score_image(
    input: ImageInput<'_>,
    models: &DetectorModels<'_>,
    opts: &DetectOptions,
    with_subbox_features: bool,
) -> Result<ImageScores> {
    models.check(opts)?;
    let (width, height) = image_dims(input.image)?;
    let n = input.proposals.len();
    let kept: Vec<usize> = match (opts.rejection, models.first_pass) {
        (true, Some(fp)) => {
            let mut kept = Vec::new();
            for (i, b) in input.proposals.iter().enumerate() {
                let (s, _) = score_box(fp, input.image, b)?;
                if !is_rejected(s.data(), opts.rejection_threshold) {
                    kept.push(i);
                }
            }
            kept
        }
        _ => (0..n).collect(),
    };
    let mut store = FeatureStore::default();
    let mut net_scores = Vec::with_capacity(kept.len());
    for &i in &kept {
        let (s, f) = score_box(models.net, input.image, &input.proposals[i])?;
        net_scores.push(s.into_data());
        store.insert(FeatureRecord { box_id: i, feature: f })?;
    }
    let mut scores = net_scores.clone();
    let mut combined = None;
    if (opts.subbox || with_subbox_features) && !kept.is_empty() {
        // Selection runs over every proposal so that rejection never changes
        // the features of a surviving box.
        let pool: Vec<(usize, BoundingBox)> = input.proposals.iter().copied().enumerate().collect();
        let mut all = Vec::with_capacity(kept.len());
        for &i in &kept {
            let sel = crate::pipeline::features::select_subbox_proposals(&input.proposals[i], &pool)?;
            for id in sel {
                if !store.contains(id) {
                    let (_, f) = score_box(models.net, input.image, &input.proposals[id])?;
                    store.insert(FeatureRecord { box_id: id, feature: f })?;
                }
            }
            all.push(subbox_features(i, &input.proposals[i], &pool, &store)?.combined);
        }
        if opts.subbox {
            let clf = models.subbox.expect("checked");
            for (s, x) in scores.iter_mut().zip(&all) {
                for (v, new) in s.iter_mut().zip(clf.scores(x)?) {
                    if let Some(new) = new {
                        *v = new;
                    }
                }
            }
        }
        combined = Some(all);
    }
    let mut context = None;
    if opts.context {
        let (cnet, fusion) = models.context.expect("checked");
        let ctx = context_scores(cnet, input.image)?;
        for s in scores.iter_mut() {
            *s = fusion.fuse(s, &ctx)?;
        }
        context = Some(ctx);
    }
    let features = kept
        .iter()
        .map(|i| store.get(*i).expect("stored").feature.data().to_vec())
        .collect();
    Ok(ImageScores {
        image_id: input.image_id,
        width,
        height,
        boxes: kept.iter().map(|&i| input.proposals[i]).collect(),
        proposal_ids: kept.clone(),
        scores,
        net_scores,
        features,
        subbox_features: combined,
        context,
        num_proposals: n,
        num_kept: kept.len(),
    })
}

/// Box refinement, emission and NMS.
pub fn finalize_image(scored: &ImageScores, refiner: Option<&BoxRegressor>, opts: &DetectOptions) -> Result<Vec<Detection>> {
    if opts.refine && refiner.is_none() {
        return Err(Error::invalid("refinement stage enabled without its model"));
    }
    let mut dets = Vec::new();
    for ((b, s), f) in scored.boxes.iter().zip(&scored.scores).zip(&scored.features) {
        let bbox = match (opts.refine, refiner) {
            (true, Some(r)) => refine_box(f, b, r, scored.width, scored.height),
            _ => *b,
        };
        match opts.emit {
            EmitMode::AllClasses => dets.extend(s.iter().enumerate().map(|(k, &c)| Detection {
                image_id: scored.image_id,
                bbox,
                class_id: k,
                confidence: c,
            })),
            EmitMode::Argmax => {
                let (k, &c) = s
                    .iter()
                    .enumerate()
                    .fold((0, &f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                dets.push(Detection {
                    image_id: scored.image_id,
                    bbox,
                    class_id: k,
                    confidence: c,
                });
            }
        }
    }
    Ok(if opts.nms { nms(&dets, opts.nms_iou) } else { dets })
}

pub fn detect(input: ImageInput<'_>, models: &DetectorModels<'_>, opts: &DetectOptions) -> Result<Vec<Detection>> {
    let s = score_image(input, models, opts, false)?;
    finalize_image(&s, models.refiner, opts)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectStats {
    pub proposals: usize,
    pub kept: usize,
}

impl DetectStats {
    pub fn rejection_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            1.0 - self.kept as f64 / self.proposals as f64
        }
    }
}

/// Detection over many images, parallel across images. Output follows input
/// order.
pub fn detect_batch(
    inputs: &[ImageInput<'_>],
    models: &DetectorModels<'_>,
    opts: &DetectOptions,
    exec: Exec,
) -> Result<(Vec<Detection>, DetectStats)> {
    let per = exec.try_map(inputs, |inp| -> Result<(Vec<Detection>, usize, usize)> {
        let s = score_image(*inp, models, opts, false)?;
        let d = finalize_image(&s, models.refiner, opts)?;
        Ok((d, s.num_proposals, s.num_kept))
    })?;
    let mut stats = DetectStats::default();
    let mut all = Vec::new();
    for (d, p, k) in per {
        all.extend(d);
        stats.proposals += p;
        stats.kept += k;
    }
    Ok((all, stats))
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_jsonl(path, dets)
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = read_jsonl(path)?;
    if let Some(d) = dets.iter().find(|d| !d.confidence.is_finite()) {
        return Err(Error::NonFinite(format!("confidence of detection on image {}", d.image_id)));
    }
    Ok(dets)
}
