use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use defnet::ablation::{run_benchmark, train_context_network, BenchmarkConfig};
use defnet::checks::{dpm_oracle_max_error, gradient_suite};
use defnet::data::{
    generate_dataset, generate_proposals, group_proposals, load_image, load_manifest, load_proposals, manifest_path, save_proposals,
    DatasetManifest, GeneratorConfig, ProposalRecord,
};
use defnet::ensemble::{average_scores, greedy_select_all_class, greedy_select_per_class, spec_report, EvalSplit, ModelPool, PoolMember};
use defnet::eval::{mean_ap, Detection, GroundTruthSet, MapReport};
use defnet::layers::LossKind;
use defnet::network::StagedNetwork;
use defnet::par::Exec;
use defnet::pipeline::detect::{load_detections, save_detections};
use defnet::pipeline::fit::{crop_samples, fit_stages, whole_image_samples, CropLabels, FittedStages, LabeledImage};
use defnet::pipeline::{
    finalize_image, nms, score_image, BoundingBox, DetectOptions, DetectorModels, ImageInput, LinearTrainConfig, DEFAULT_NMS_IOU,
    DEFAULT_REJECTION_THRESHOLD,
};
use defnet::rng::sub_seed;
use defnet::trainer::{run_schedule, LabeledSet, LossTrace, MultiStageConfig, ScheduleData, SgdConfig, TrainingSchedule};
use defnet::{Error, Tensor};

use crate::failure::Failure;
use crate::{Command, Common, EnsembleMode, ScheduleArg, Toggles};

type Res<T = ()> = Result<T, Failure>;

const MODEL_FILE: &str = "model.json";
const CONTEXT_FILE: &str = "context.json";
const STAGES_FILE: &str = "stages.json";

pub fn dispatch(cmd: Command) -> Res {
    match cmd {
        Command::GenData {
            common,
            train_images,
            val_images,
        } => gen_data(&common, train_images, val_images),
        Command::Train {
            common,
            data,
            schedule,
            stages,
            epochs,
            no_fit_stages,
        } => train(&common, &data, schedule, stages, epochs, !no_fit_stages),
        Command::Detect {
            common,
            data,
            split,
            model,
            first_pass,
            threshold,
            toggles,
        } => detect(&common, &data, &split, &model, first_pass.as_deref(), threshold, &toggles),
        Command::Eval {
            common,
            data,
            split,
            detections,
            iou,
        } => eval(&common, &data, &split, &detections, iou),
        Command::Ensemble {
            common,
            mode,
            data,
            split,
            members,
            iou,
        } => ensemble(&common, mode, &data, &split, &members, iou),
        Command::GradCheck { seed, seeds } => grad_check(seed, seeds),
        Command::OracleCheck { seed, cases } => oracle_check(seed, cases),
        Command::Ablate {
            common,
            seeds,
            train_images,
            val_images,
        } => ablate(&common, seeds, train_images, val_images),
    }
}

fn load_config(path: Option<&Path>) -> Res<BenchmarkConfig> {
    let cfg = match path {
        None => BenchmarkConfig::default(),
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingFile(p.to_path_buf()).into());
            }
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Malformed {
                what: format!("config {}", p.display()),
                reason: e.to_string(),
            })?
        }
    };
    Ok(cfg)
}

fn require_seed(common: &Common, command: &str) -> Res<u64> {
    common.seed.ok_or_else(|| Failure::usage(format!("{command} needs --seed")))
}

fn create_out(dir: &Path) -> Res {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Res {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Res {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Malformed {
        what: path.display().to_string(),
        reason: e.to_string(),
    })?;
    write_file(path, text + "\n")
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn proposals_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("proposals_{split}.jsonl"))
}

/// One split read back from a gen-data directory.
struct LoadedSplit {
    manifest: DatasetManifest,
    tensors: Vec<Tensor>,
    proposals: BTreeMap<u64, Vec<BoundingBox>>,
    gts: GroundTruthSet,
}

impl LoadedSplit {
    fn load(dir: &Path, split: &str, exec: Exec) -> Res<Self> {
        let manifest = load_manifest(&manifest_path(dir, split))?;
        let channels = manifest.generator.scene.channels;
        let tensors = exec.try_map(&manifest.records, |r| load_image(&dir.join(&r.path), channels))?;
        let proposals = group_proposals(&load_proposals(&proposals_path(dir, split))?);
        let gts = manifest.ground_truth();
        Ok(LoadedSplit {
            manifest,
            tensors,
            proposals,
            gts,
        })
    }

    fn labeled(&self, n: usize) -> Vec<LabeledImage<'_>> {
        self.manifest
            .records
            .iter()
            .zip(&self.tensors)
            .take(n)
            .map(|(r, t)| LabeledImage {
                image_id: r.id,
                image: t,
                gts: self.gts.images.get(&r.id).map(Vec::as_slice).unwrap_or(&[]),
                proposals: self.proposals.get(&r.id).map(Vec::as_slice).unwrap_or(&[]),
            })
            .collect()
    }
}

fn gen_data(common: &Common, train_images: Option<usize>, val_images: Option<usize>) -> Res {
    let mut cfg = load_config(common.config.as_deref())?;
    let seed = require_seed(common, "gen-data")?;
    cfg.train_images = train_images.unwrap_or(cfg.train_images);
    cfg.val_images = val_images.unwrap_or(cfg.val_images);
    cfg.validate()?;
    let exec = Exec::default();
    let dataset = generate_dataset(
        &GeneratorConfig::train_val(cfg.scene.clone(), cfg.train_images, cfg.val_images, seed),
        exec,
    )?;
    create_out(&common.out)?;
    dataset.write(&common.out)?;
    for s in &dataset.splits {
        let name = &s.manifest.split;
        let props = generate_proposals(&s.manifest, &cfg.proposals, sub_seed(seed, &format!("proposals.{name}")))?;
        save_proposals(&proposals_path(&common.out, name), &props)?;
    }
    write_json(&common.out.join("config.json"), &cfg)?;
    println!(
        "wrote {} train and {} val images to {}",
        cfg.train_images,
        cfg.val_images,
        common.out.display()
    );
    Ok(())
}

fn train(common: &Common, data: &Path, schedule: ScheduleArg, stages: Option<usize>, epochs: Option<usize>, fit: bool) -> Res {
    let mut cfg = load_config(common.config.as_deref())?;
    let seed = require_seed(common, "train")?;
    if let Some(e) = epochs {
        cfg.training.base_epochs = e;
        cfg.context_training.epochs = e;
    }
    cfg.validate()?;
    let exec = Exec::default();
    let train = LoadedSplit::load(data, "train", exec)?;
    let scene = &train.manifest.generator.scene;
    let k = scene.num_classes();
    if k != cfg.network.num_classes {
        return Err(Error::Validation(format!("dataset has {k} classes, config network has {}", cfg.network.num_classes)).into());
    }
    let images = train.labeled(usize::MAX);
    let crops = |labels, s: &str| crop_samples(&images, &cfg.network.input, &cfg.crops, labels, k, sub_seed(seed, s), exec);
    let mut sets = ScheduleData {
        target_objects: Some(LabeledSet {
            label_set: "target".into(),
            num_classes: k,
            loss: cfg.network.loss,
            samples: crops(CropLabels::OneVsAll, "crops")?,
        }),
        ..ScheduleData::default()
    };
    let schedule = match schedule {
        ScheduleArg::Plain => TrainingSchedule::PlainFineTune,
        ScheduleArg::Multistage => TrainingSchedule::MultiStage(stages.unwrap_or(cfg.stages)),
        ScheduleArg::Scheme1 => TrainingSchedule::SchemeOne,
        ScheduleArg::Scheme2 => TrainingSchedule::SchemeTwo,
    };
    if matches!(schedule, TrainingSchedule::SchemeOne | TrainingSchedule::SchemeTwo) {
        sets.source_objects = Some(LabeledSet {
            label_set: "source".into(),
            num_classes: k + 1,
            loss: LossKind::SoftmaxCrossEntropy,
            samples: crops(CropLabels::WithBackground, "crops.source")?,
        });
    }
    let scene_labels: Vec<(&Tensor, usize)> = train
        .tensors
        .iter()
        .zip(&train.manifest.records)
        .map(|(t, r)| (t, r.scene_type))
        .collect();
    if schedule == TrainingSchedule::SchemeOne {
        sets.whole_image = Some(LabeledSet {
            label_set: "scene".into(),
            num_classes: scene.scene_types,
            loss: LossKind::SoftmaxCrossEntropy,
            samples: whole_image_samples(&scene_labels, &cfg.network.input, exec)?,
        });
    }
    let ms = MultiStageConfig {
        sgd: SgdConfig {
            seed: sub_seed(seed, "sgd"),
            ..cfg.training.sgd.clone()
        },
        ..cfg.training.clone()
    };
    let (mut net, report) = run_schedule(schedule, &sets, &cfg.network, &ms, exec)?;
    net.metadata.seed = seed;
    create_out(&common.out)?;
    net.save(&common.out.join(MODEL_FILE))?;
    write_file(&common.out.join("trace.csv"), csv_bytes(|w| report.trace.write_csv(w)))?;
    let mut phases = String::from("phase,label_set,steps,first_loss,last_loss\n");
    for p in &report.phases {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        phases += &format!("{},{},{},{},{}\n", p.name, p.label_set, p.steps, f(p.first_loss), f(p.last_loss));
    }
    write_file(&common.out.join("phases.csv"), phases)?;
    if fit {
        let mut trace = LossTrace::default();
        let context = train_context_network(&scene_labels, &cfg.context_network, &cfg.context_training, seed, &mut trace, exec)?;
        context.save(&common.out.join(CONTEXT_FILE))?;
        let fit_cfg = defnet::pipeline::fit::StageFitConfig {
            linear: LinearTrainConfig {
                seed: sub_seed(seed, "fit"),
                ..cfg.fit.linear.clone()
            },
            ..cfg.fit.clone()
        };
        let stages = fit_stages(&train.labeled(cfg.fit_images), &net, &context, &fit_cfg, exec)?;
        stages.save(&common.out.join(STAGES_FILE))?;
    }
    for p in &report.phases {
        println!("{}: {} steps, loss {:?} -> {:?}", p.name, p.steps, p.first_loss, p.last_loss);
    }
    Ok(())
}

fn detect(
    common: &Common,
    data: &Path,
    split: &str,
    model_dir: &Path,
    first_pass: Option<&Path>,
    threshold: Option<f64>,
    toggles: &Toggles,
) -> Res {
    let exec = Exec::default();
    let net = StagedNetwork::load(&model_dir.join(MODEL_FILE))?;
    let first = first_pass.map(StagedNetwork::load).transpose()?;
    let opts = DetectOptions {
        rejection: !toggles.no_rejection,
        rejection_threshold: threshold.unwrap_or(DEFAULT_REJECTION_THRESHOLD),
        subbox: !toggles.no_subbox,
        context: !toggles.no_context,
        refine: !toggles.no_refine,
        nms: !toggles.no_nms,
        nms_iou: DEFAULT_NMS_IOU,
        ..DetectOptions::default()
    };
    let needs_stages = opts.subbox || opts.context || opts.refine;
    let stages = needs_stages.then(|| FittedStages::load(&model_dir.join(STAGES_FILE))).transpose()?;
    let context = opts
        .context
        .then(|| StagedNetwork::load(&model_dir.join(CONTEXT_FILE)))
        .transpose()?;
    let models = DetectorModels {
        net: &net,
        first_pass: Some(first.as_ref().unwrap_or(&net)),
        subbox: stages.as_ref().map(|s| &s.subbox),
        context: context.as_ref().zip(stages.as_ref()).map(|(c, s)| (c, &s.fusion)),
        refiner: stages.as_ref().map(|s| &s.refiner),
    };
    let loaded = LoadedSplit::load(data, split, exec)?;
    let inputs: Vec<ImageInput<'_>> = loaded
        .labeled(usize::MAX)
        .into_iter()
        .map(|l| ImageInput {
            image_id: l.image_id,
            image: l.image,
            proposals: l.proposals,
        })
        .collect();
    let per = exec.try_map(&inputs, |inp| -> defnet::Result<_> {
        let s = score_image(*inp, &models, &opts, false)?;
        let d = finalize_image(&s, models.refiner, &opts)?;
        Ok((s, d))
    })?;
    let (mut proposals, mut kept) = (0, 0);
    let mut dets = Vec::new();
    let mut scores = Vec::new();
    for (s, d) in per {
        proposals += s.num_proposals;
        kept += s.num_kept;
        dets.extend(d);
        scores.extend(s.boxes.iter().zip(&s.scores).map(|(b, v)| ProposalRecord {
            image_id: s.image_id,
            bbox: *b,
            scores: Some(v.clone()),
        }));
    }
    create_out(&common.out)?;
    save_detections(&common.out.join("detections.jsonl"), &dets)?;
    save_proposals(&common.out.join("scores.jsonl"), &scores)?;
    let stats = serde_json::json!({
        "proposals": proposals,
        "kept": kept,
        "rejection_threshold": opts.rejection.then_some(opts.rejection_threshold),
    });
    write_json(&common.out.join("stats.json"), &stats)?;
    println!("{} detections; {kept} of {proposals} proposals scored", dets.len());
    Ok(())
}

fn split_gts(data: &Path, split: &str) -> Res<GroundTruthSet> {
    Ok(load_manifest(&manifest_path(data, split))?.ground_truth())
}

fn write_map(out: &Path, report: &MapReport) -> Res {
    write_file(&out.join("map.csv"), csv_bytes(|w| report.write_csv(w)))
}

fn eval(common: &Common, data: &Path, split: &str, detections: &Path, iou: f64) -> Res {
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(Failure::usage(format!("--iou must lie in (0, 1], got {iou}")));
    }
    let gts = split_gts(data, split)?;
    let dets = load_detections(detections)?;
    let report = mean_ap(&dets, &gts, iou);
    create_out(&common.out)?;
    write_map(&common.out, &report)?;
    println!("mAP {:.6}", report.map);
    Ok(())
}

fn ensemble(common: &Common, mode: EnsembleMode, data: &Path, split: &str, members: &[String], iou: f64) -> Res {
    let mut boxes: Option<Vec<(u64, BoundingBox)>> = None;
    let mut pool_members = Vec::with_capacity(members.len());
    for m in members {
        let (id, path) = m
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--member expects NAME=PATH, got '{m}'")))?;
        let records = load_proposals(Path::new(path))?;
        let these: Vec<(u64, BoundingBox)> = records.iter().map(|r| (r.image_id, r.bbox)).collect();
        match &boxes {
            None => boxes = Some(these),
            Some(b) if *b != these => {
                return Err(Error::Validation(format!("member '{id}' scored a different box set; run detect with --no-rejection")).into())
            }
            Some(_) => {}
        }
        let scores = records
            .into_iter()
            .map(|r| {
                r.scores
                    .ok_or_else(|| Error::Validation(format!("member '{id}' has a box without scores")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        pool_members.push(PoolMember {
            id: id.to_string(),
            scores,
            fingerprint: path.to_string(),
        });
    }
    let pool = ModelPool {
        boxes: boxes.unwrap_or_default(),
        members: pool_members,
    };
    pool.validate()?;
    let eval_split = EvalSplit {
        gts: split_gts(data, split)?,
        iou,
        nms_iou: Some(DEFAULT_NMS_IOU),
    };
    let exec = Exec::default();
    let spec = match mode {
        EnsembleMode::AllCls => greedy_select_all_class(&pool, &eval_split, exec)?.0,
        EnsembleMode::PerCls => greedy_select_per_class(&pool, &eval_split, exec)?,
    };
    let report = spec_report(&pool, &spec, &eval_split)?;
    let mut dets = Vec::new();
    for (i, (image_id, bbox)) in pool.boxes.iter().enumerate() {
        let member_scores: Vec<(&str, &[f64])> = pool.members.iter().map(|m| (m.id.as_str(), m.scores[i].as_slice())).collect();
        let avg = average_scores(&member_scores, &spec)?;
        dets.extend(avg.data().iter().enumerate().map(|(k, &c)| Detection {
            image_id: *image_id,
            bbox: *bbox,
            class_id: k,
            confidence: c,
        }));
    }
    create_out(&common.out)?;
    spec.save(&common.out.join("spec.json"))?;
    write_map(&common.out, &report)?;
    save_detections(&common.out.join("detections.jsonl"), &nms(&dets, DEFAULT_NMS_IOU))?;
    println!("mAP {:.6}", report.map);
    Ok(())
}

fn grad_check(seed: u64, seeds: usize) -> Res {
    let list: Vec<u64> = (0..seeds as u64).map(|i| seed + i).collect();
    let report = gradient_suite(&list)?;
    let mut out = std::io::stdout().lock();
    let mut failed = Vec::new();
    for o in &report {
        let status = if o.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{} max_rel_err={:.3e} max_abs_err={:.3e} seeds={} {status}",
            o.op, o.max_rel_err, o.max_abs_err, o.seeds
        );
        if !o.passed {
            failed.push(o.op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn oracle_check(seed: u64, cases: usize) -> Res {
    let err = dpm_oracle_max_error(cases, seed)?;
    println!("max_abs_err={err:.3e} cases={cases}");
    if err <= 1e-9 {
        Ok(())
    } else {
        Err(Failure::Check(format!("def-pooling differs from the placement oracle by {err:e}")))
    }
}

fn ablate(common: &Common, seeds: usize, train_images: Option<usize>, val_images: Option<usize>) -> Res {
    let mut cfg = load_config(common.config.as_deref())?;
    cfg.train_images = train_images.unwrap_or(cfg.train_images);
    cfg.val_images = val_images.unwrap_or(cfg.val_images);
    let first = common.seed.unwrap_or(0);
    let list: Vec<u64> = (0..seeds as u64).map(|i| first + i).collect();
    if list.is_empty() {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let report = run_benchmark(&cfg, &list, Exec::default())?;
    create_out(&common.out)?;
    let table = csv_bytes(|w| report.write_csv(w));
    write_file(&common.out.join("ablation.csv"), &table)?;
    write_file(&common.out.join("ablation_seeds.csv"), csv_bytes(|w| report.write_seed_csv(w)))?;
    write_file(&common.out.join("rejection.csv"), csv_bytes(|w| report.write_rejection_csv(w)))?;
    let timing: String = report
        .seeds
        .iter()
        .map(|s| format!("seed {} took {:.1}s\n", s.seed, s.seconds))
        .collect();
    write_file(&common.out.join("ablate.log"), timing)?;
    print!("{}", String::from_utf8_lossy(&table));
    Ok(())
}
