//! Step-by-step component benchmark. Each row adds one stage to the row
//! before it and reports validation mAP on a freshly generated synthetic
//! set.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, generate_proposals, group_proposals, GeneratorConfig, ProposalPolicy, SceneSpec, SplitData};
use crate::eval::{mean_ap, GroundTruthSet};
use crate::layers::LossKind;
use crate::network::{NetworkConfig, StagedNetwork};
use crate::par::Exec;
use crate::pipeline::fit::{
    crop_samples, fit_stages, whole_image_samples, CropLabels, CropPolicy, FittedStages, LabeledImage, StageFitConfig,
};
use crate::pipeline::rejection::{calibrate_threshold, threshold_sweep, SweepRow};
use crate::pipeline::{detect_batch, score_box, BoundingBox, DetectOptions, DetectorModels, ImageInput, ScoredProposal};
use crate::rng::sub_seed;
use crate::tensor::Tensor;
use crate::trainer::{multistage_train, train_phase, FreezeMask, LossTrace, MultiStageConfig, SgdConfig, TrainEvent};
use crate::{Error, Result};

/// Row labels in evaluation order.
pub const ROWS: [&str; 7] = [
    "scoring-only",
    "+rejection",
    "+def-pool",
    "+multi-stage",
    "+sub-box",
    "+context",
    "+bbox-refine",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub scene: SceneSpec,
    pub train_images: usize,
    pub val_images: usize,
    pub proposals: ProposalPolicy,
    /// Detector network with the part branch; the baseline is its
    /// [`NetworkConfig::plain`] form.
    pub network: NetworkConfig,
    pub stages: usize,
    pub training: MultiStageConfig,
    pub crops: CropPolicy,
    /// Whole-image scene classifier feeding context fusion.
    pub context_network: NetworkConfig,
    pub context_training: SgdConfig,
    pub fit: StageFitConfig,
    /// Leading training images used to fit the post-network stages and to
    /// calibrate the rejection threshold.
    pub fit_images: usize,
    pub thresholds: Vec<f64>,
    pub max_recall_drop: f64,
    pub recall_iou: f64,
    pub eval_iou: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let mut network = NetworkConfig {
            num_classes: scene.num_classes(),
            ..NetworkConfig::default()
        };
        network.def_branch.part_filter_sizes = vec![3, 5];
        network.def_branch.part_channels = 8;
        let context_network = NetworkConfig {
            num_classes: scene.scene_types,
            loss: LossKind::SoftmaxCrossEntropy,
            ..NetworkConfig::default().plain()
        };
        BenchmarkConfig {
            train_images: 2000,
            val_images: 500,
            proposals: ProposalPolicy::default(),
            network,
            stages: 2,
            training: MultiStageConfig::default(),
            crops: CropPolicy {
                max_pos_per_image: 3,
                max_neg_per_image: 3,
                ..CropPolicy::default()
            },
            context_network,
            context_training: SgdConfig {
                epochs: 6,
                ..SgdConfig::default()
            },
            fit: StageFitConfig::default(),
            fit_images: 400,
            thresholds: (0..=110).map(|i| -4.0 + 0.05 * i as f64).collect(),
            max_recall_drop: 0.05,
            recall_iou: 0.5,
            eval_iou: 0.5,
            scene,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.train_images == 0 || self.val_images == 0 || self.fit_images == 0 {
            return Err(Error::invalid("benchmark splits must be non-empty"));
        }
        if self.network.num_classes != self.scene.num_classes() {
            return Err(Error::invalid(format!(
                "network has {} classes but the scene has {}",
                self.network.num_classes,
                self.scene.num_classes()
            )));
        }
        if self.context_network.num_classes != self.scene.scene_types {
            return Err(Error::invalid("context network must have one output per scene type"));
        }
        if !self.network.def_branch.enabled {
            return Err(Error::invalid("benchmark network needs the part branch"));
        }
        if self.thresholds.is_empty() {
            return Err(Error::invalid("rejection threshold sweep is empty"));
        }
        self.network.validate()?;
        self.context_network.validate()?;
        self.training.sgd.validate()?;
        self.context_training.validate()
    }

    /// The (scene, class) pair with the smallest co-occurrence weight, lowest
    /// indices on ties.
    pub fn anti_correlated_pair(&self) -> (usize, usize) {
        let mut best = (f64::INFINITY, (0, 0));
        for (s, row) in self.scene.cooccurrence.iter().enumerate() {
            for (k, &w) in row.iter().enumerate() {
                if w < best.0 {
                    best = (w, (s, k));
                }
            }
        }
        best.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub map: f64,
}

/// Rejection on the validation split at the calibrated threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub threshold: f64,
    pub proposals: usize,
    /// Proposals that reached the main network.
    pub kept: usize,
    pub recall_all: f64,
    pub recall_kept: f64,
}

impl RejectionReport {
    pub fn reduction(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            1.0 - self.kept as f64 / self.proposals as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    pub rejection: RejectionReport,
    /// Calibration sweep on the fit images.
    pub sweep: Vec<SweepRow>,
    /// Fusion weight from the anti-correlated scene score to its class.
    pub context_weight: f64,
    #[serde(skip)]
    pub seconds: f64,
}

impl SeedReport {
    pub fn map(&self, config: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.config == config).map(|r| r.map)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<SeedReport>,
}

impl AblationReport {
    /// Per-row mean over seeds, in [`ROWS`] order.
    pub fn mean_rows(&self) -> Vec<AblationRow> {
        ROWS.iter()
            .map(|&name| {
                let v: Vec<f64> = self.seeds.iter().filter_map(|s| s.map(name)).collect();
                AblationRow {
                    config: name.to_string(),
                    map: if v.is_empty() {
                        0.0
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    },
                }
            })
            .collect()
    }

    pub fn mean_map(&self, config: &str) -> Option<f64> {
        self.mean_rows().into_iter().find(|r| r.config == config).map(|r| r.map)
    }

    /// `config,mAP`, one row per configuration.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "config,mAP")?;
        for r in self.mean_rows() {
            writeln!(w, "{},{:.6}", r.config, r.map)?;
        }
        Ok(())
    }

    pub fn write_seed_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "seed,config,mAP")?;
        for s in &self.seeds {
            for r in &s.rows {
                writeln!(w, "{},{},{:.6}", s.seed, r.config, r.map)?;
            }
        }
        Ok(())
    }

    pub fn write_rejection_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "seed,threshold,proposals,kept,reduction,recall_all,recall_kept,context_weight")?;
        for s in &self.seeds {
            let r = &s.rejection;
            writeln!(
                w,
                "{},{:.4},{},{},{:.6},{:.6},{:.6},{:.6}",
                s.seed,
                r.threshold,
                r.proposals,
                r.kept,
                r.reduction(),
                r.recall_all,
                r.recall_kept,
                s.context_weight
            )?;
        }
        Ok(())
    }
}

struct Split<'d> {
    data: &'d SplitData,
    tensors: Vec<Tensor>,
    proposals: BTreeMap<u64, Vec<BoundingBox>>,
    gts: GroundTruthSet,
}

impl<'d> Split<'d> {
    fn new(data: &'d SplitData, policy: &ProposalPolicy, seed: u64, exec: Exec) -> Result<Self> {
        let records = generate_proposals(&data.manifest, policy, seed)?;
        Ok(Split {
            tensors: exec.map(&data.images, |im| im.to_tensor()),
            proposals: group_proposals(&records),
            gts: data.manifest.ground_truth(),
            data,
        })
    }

    fn labeled(&self, n: usize) -> Vec<LabeledImage<'_>> {
        self.data
            .images
            .iter()
            .zip(&self.tensors)
            .take(n)
            .map(|(im, t)| LabeledImage {
                image_id: im.id,
                image: t,
                gts: self.gts.images.get(&im.id).map(Vec::as_slice).unwrap_or(&[]),
                proposals: self.proposals.get(&im.id).map(Vec::as_slice).unwrap_or(&[]),
            })
            .collect()
    }

    fn inputs(&self) -> Vec<ImageInput<'_>> {
        self.labeled(usize::MAX)
            .into_iter()
            .map(|l| ImageInput {
                image_id: l.image_id,
                image: l.image,
                proposals: l.proposals,
            })
            .collect()
    }
}

fn first_pass_scores(net: &StagedNetwork, images: &[LabeledImage<'_>], exec: Exec) -> Result<BTreeMap<u64, Vec<ScoredProposal>>> {
    let per = exec.try_map(images, |img| -> Result<(u64, Vec<ScoredProposal>)> {
        let mut v = Vec::with_capacity(img.proposals.len());
        for (i, b) in img.proposals.iter().enumerate() {
            let (s, _) = score_box(net, img.image, b)?;
            v.push(ScoredProposal::new(*b, s, i)?);
        }
        Ok((img.image_id, v))
    })?;
    Ok(per.into_iter().collect())
}

/// Whole-image scene classifier used as the context source.
pub fn train_context_network(
    images: &[(&Tensor, usize)],
    config: &NetworkConfig,
    sgd: &SgdConfig,
    seed: u64,
    trace: &mut LossTrace,
    exec: Exec,
) -> Result<StagedNetwork> {
    let samples = whole_image_samples(images, &config.input, exec)?;
    let mut net = StagedNetwork::build(config, sub_seed(seed, "net.context"))?;
    let sgd = SgdConfig {
        seed: sub_seed(seed, "sgd.context"),
        ..sgd.clone()
    };
    let mask = FreezeMask::all_trainable(&net);
    train_phase(
        &mut net,
        &samples,
        config.loss,
        &sgd,
        &mask,
        "context",
        trace,
        &mut no_observer,
        exec,
    )?;
    Ok(net)
}

fn no_observer(_: TrainEvent<'_>, _: &StagedNetwork) {}

/// One seed of the benchmark: data, three detector networks, the context
/// network, fitted stages, then one validation pass per row.
pub fn run_seed(cfg: &BenchmarkConfig, seed: u64, exec: Exec) -> Result<SeedReport> {
    cfg.validate()?;
    let start = Instant::now();
    let lap = |what: &str| log::info!("seed {seed}: {what} done at {:.1}s", start.elapsed().as_secs_f64());

    let dataset = generate_dataset(
        &GeneratorConfig::train_val(cfg.scene.clone(), cfg.train_images, cfg.val_images, seed),
        exec,
    )?;
    let train = Split::new(dataset.split("train")?, &cfg.proposals, sub_seed(seed, "proposals.train"), exec)?;
    let val = Split::new(dataset.split("val")?, &cfg.proposals, sub_seed(seed, "proposals.val"), exec)?;
    lap("data");

    let k = cfg.scene.num_classes();
    let samples = crop_samples(
        &train.labeled(usize::MAX),
        &cfg.network.input,
        &cfg.crops,
        CropLabels::OneVsAll,
        k,
        sub_seed(seed, "crops"),
        exec,
    )?;
    let training = MultiStageConfig {
        sgd: SgdConfig {
            seed: sub_seed(seed, "sgd"),
            ..cfg.training.sgd.clone()
        },
        ..cfg.training.clone()
    };
    let mut trace = LossTrace::default();

    let mut baseline = StagedNetwork::build(&cfg.network.clone().plain(), sub_seed(seed, "net.baseline"))?;
    let base_sgd = SgdConfig {
        epochs: training.base_epochs,
        ..training.sgd.clone()
    };
    let mask = FreezeMask::all_trainable(&baseline);
    let loss = baseline.config.loss;
    train_phase(
        &mut baseline,
        &samples,
        loss,
        &base_sgd,
        &mask,
        "base",
        &mut trace,
        &mut no_observer,
        exec,
    )?;
    lap("baseline training");

    // The def-pool row is the staged network at the end of its base phase,
    // where every stage branch is still zero.
    let staged_cfg = NetworkConfig {
        stages: cfg.stages,
        ..cfg.network.clone()
    };
    let mut staged = StagedNetwork::build(&staged_cfg, sub_seed(seed, "net.defpool"))?;
    let mut defpool: Option<StagedNetwork> = None;
    multistage_train(
        &mut staged,
        &samples,
        cfg.stages,
        &training,
        &mut trace,
        &mut |ev, net| {
            if matches!(ev, TrainEvent::BeforeStageInit(1)) {
                defpool = Some(net.clone());
            }
        },
        exec,
    )?;
    let defpool = defpool.unwrap_or_else(|| staged.clone());
    lap("multi-stage training");

    let scene_labels: Vec<(&Tensor, usize)> = train
        .tensors
        .iter()
        .zip(&train.data.images)
        .map(|(t, im)| (t, im.scene_type))
        .collect();
    let context_net = train_context_network(&scene_labels, &cfg.context_network, &cfg.context_training, seed, &mut trace, exec)?;
    lap("context training");

    let fit_set = train.labeled(cfg.fit_images);
    let fit_scores = first_pass_scores(&baseline, &fit_set, exec)?;
    let mut fit_gts = GroundTruthSet::default();
    for img in &fit_set {
        fit_gts.insert(img.image_id, img.gts.to_vec());
    }
    let (threshold, sweep) = calibrate_threshold(&fit_scores, &fit_gts, &cfg.thresholds, cfg.recall_iou, cfg.max_recall_drop)?;

    let fit_cfg = StageFitConfig {
        linear: crate::pipeline::LinearTrainConfig {
            seed: sub_seed(seed, "fit"),
            ..cfg.fit.linear.clone()
        },
        ..cfg.fit.clone()
    };
    let FittedStages { subbox, fusion, refiner } = fit_stages(&fit_set, &staged, &context_net, &fit_cfg, exec)?;
    let (anti_scene, anti_class) = cfg.anti_correlated_pair();
    let context_weight = fusion.context_weight(anti_class, anti_scene);
    lap("stage fitting");

    let val_scores = first_pass_scores(&baseline, &val.labeled(usize::MAX), exec)?;
    let [all, at_t] = match threshold_sweep(&val_scores, &val.gts, &[f64::NEG_INFINITY, threshold], cfg.recall_iou)?[..] {
        [a, b] => [a, b],
        _ => unreachable!("two thresholds in, two rows out"),
    };

    let inputs = val.inputs();
    let with = |rejection, subbox, context, refine| DetectOptions {
        rejection,
        rejection_threshold: threshold,
        subbox,
        context,
        refine,
        ..DetectOptions::default()
    };
    let full = DetectorModels {
        net: &staged,
        first_pass: Some(&baseline),
        subbox: Some(&subbox),
        context: Some((&context_net, &fusion)),
        refiner: Some(&refiner),
    };
    let plans: [(DetectorModels<'_>, DetectOptions); 7] = [
        (DetectorModels::scoring(&baseline), DetectOptions::scoring_only()),
        (DetectorModels { net: &baseline, ..full }, with(true, false, false, false)),
        (DetectorModels { net: &defpool, ..full }, with(true, false, false, false)),
        (full, with(true, false, false, false)),
        (full, with(true, true, false, false)),
        (full, with(true, true, true, false)),
        (full, with(true, true, true, true)),
    ];
    let mut out = Vec::with_capacity(ROWS.len());
    let mut kept = None;
    for (name, (models, opts)) in ROWS.iter().zip(plans) {
        let (dets, stats) = detect_batch(&inputs, &models, &opts, exec)?;
        if opts.rejection {
            kept.get_or_insert(stats);
        }
        let map = mean_ap(&dets, &val.gts, cfg.eval_iou).map;
        log::info!("seed {seed}: {name} mAP {map:.4}");
        out.push(AblationRow {
            config: name.to_string(),
            map,
        });
    }
    let stats = kept.expect("rows with rejection ran");
    lap("evaluation");
    Ok(SeedReport {
        seed,
        rows: out,
        rejection: RejectionReport {
            threshold,
            proposals: stats.proposals,
            kept: stats.kept,
            recall_all: all.recall,
            recall_kept: at_t.recall,
        },
        sweep,
        context_weight,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_benchmark(cfg: &BenchmarkConfig, seeds: &[u64], exec: Exec) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &s in seeds {
        report.seeds.push(run_seed(cfg, s, exec)?);
    }
    Ok(report)
}
