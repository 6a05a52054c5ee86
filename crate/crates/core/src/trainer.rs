//! Momentum SGD with freeze masks, stage-by-stage training and multi-phase
//! schedules.
//!
//! Stage-by-stage training of a network with `T` stage branches:
//!
//! 1. train the base parameters with every stage tensor pinned at zero;
//! 2. for `t = 1..=T`:
//!    - randomise `W6_t`, `W7_t` (the output weights `W8_t` stay zero);
//!    - train only stage `t`, everything else frozen;
//!    - jointly train the base and stages `1..=t`.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::layers::{loss_forward_backward, LossKind, LossTarget};
use crate::network::{NetworkConfig, ParamGroup, StagedNetwork};
use crate::par::Exec;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 4,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: LossTarget,
}

/// Per-parameter update policy, aligned with [`StagedNetwork::param_infos`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    /// `true` = left unchanged by updates.
    pub frozen: Vec<bool>,
    /// `true` = must stay exactly zero (implies frozen).
    pub zero_pinned: Vec<bool>,
}

impl FreezeMask {
    /// Everything trainable except fixed tensors (a frozen def-pool basis).
    pub fn all_trainable(net: &StagedNetwork) -> Self {
        let infos = net.param_infos();
        FreezeMask {
            frozen: infos.iter().map(|i| i.fixed).collect(),
            zero_pinned: vec![false; infos.len()],
        }
    }

    pub fn all_frozen(net: &StagedNetwork) -> Self {
        let n = net.param_infos().len();
        FreezeMask {
            frozen: vec![true; n],
            zero_pinned: vec![false; n],
        }
    }

    /// Base trainable when `base`; stage `t` trainable when `stage_trainable(t)`;
    /// stages with `t > active` pinned at zero.
    fn staged(net: &StagedNetwork, base: bool, active: usize, stage_trainable: impl Fn(usize) -> bool) -> Self {
        let infos = net.param_infos();
        let mut frozen = Vec::with_capacity(infos.len());
        let mut pinned = Vec::with_capacity(infos.len());
        for i in &infos {
            let (f, p) = match i.group {
                ParamGroup::Base => (!base, false),
                ParamGroup::Stage(t) if t > active => (true, true),
                ParamGroup::Stage(t) => (!stage_trainable(t), false),
            };
            frozen.push(f || i.fixed);
            pinned.push(p);
        }
        FreezeMask {
            frozen,
            zero_pinned: pinned,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.frozen.len() != n || self.zero_pinned.len() != n {
            return Err(Error::invalid(format!(
                "freeze mask covers {} / {} parameters, network has {n}",
                self.frozen.len(),
                self.zero_pinned.len()
            )));
        }
        if self.zero_pinned.iter().zip(&self.frozen).any(|(&p, &f)| p && !f) {
            return Err(Error::invalid("zero-pinned parameters must also be frozen"));
        }
        Ok(())
    }

    fn any_trainable(&self) -> bool {
        self.frozen.iter().any(|f| !f)
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(net: &StagedNetwork) -> Self {
        SgdState {
            velocity: net.params().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// Mean loss and summed gradients over `batch`, computed per sample with
/// `exec` and reduced in batch order.
pub fn batch_gradients(net: &StagedNetwork, batch: &[&Sample], loss: LossKind, exec: Exec) -> Result<(f64, Vec<Tensor>)> {
    let per_sample = exec.try_map(batch, |s| -> Result<(f64, Vec<Tensor>)> {
        let (scores, cache) = net.forward(&s.input)?;
        let (l, g) = loss_forward_backward(scores.data(), &s.target, loss)?;
        Ok((l, net.backward(&cache, &g)?))
    })?;
    let mut iter = per_sample.into_iter();
    let (mut total, mut grads) = iter.next().ok_or_else(|| Error::invalid("empty batch"))?;
    for (l, g) in iter {
        total += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            a.add_assign(b)?;
        }
    }
    Ok((total / batch.len() as f64, grads))
}

/// One momentum-SGD update on `batch`. Returns the batch's mean loss
/// (evaluated before the update).
#[allow(clippy::too_many_arguments)]
pub fn sgd_step(
    net: &mut StagedNetwork,
    state: &mut SgdState,
    batch: &[&Sample],
    batch_ids: &[usize],
    loss: LossKind,
    cfg: &SgdConfig,
    mask: &FreezeMask,
    exec: Exec,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("sgd_step needs a non-empty batch"));
    }
    let infos = net.param_infos();
    mask.validate(infos.len())?;
    let (mean_loss, grads) = batch_gradients(net, batch, loss, exec)?;
    if !mean_loss.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss {mean_loss} at lr {} on samples {batch_ids:?}",
            cfg.learning_rate
        )));
    }
    let inv = 1.0 / batch.len() as f64;
    for (((p, g), v), (info, &frozen)) in net
        .params_mut()
        .into_iter()
        .zip(&grads)
        .zip(state.velocity.iter_mut())
        .zip(infos.iter().zip(&mask.frozen))
    {
        if frozen {
            continue;
        }
        let decay = if info.decay { cfg.weight_decay } else { 0.0 };
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let step = gi * inv + decay * *w;
            *vi = cfg.momentum * *vi + step;
            *w -= cfg.learning_rate * *vi;
        }
    }
    Ok(mean_loss)
}

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "phase,step,loss")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.phase, r.step, r.loss)?;
        }
        Ok(())
    }

    pub fn phase_losses(&self, phase: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.phase == phase).map(|r| r.loss).collect()
    }
}

/// Checkpoints reported to a training observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainEvent<'a> {
    PhaseStart(&'a str),
    /// After update `step` of the named phase.
    Step(&'a str, usize),
    PhaseEnd(&'a str),
    BeforeStageInit(usize),
    AfterStageInit(usize),
}

pub type Observer<'o> = dyn FnMut(TrainEvent<'_>, &StagedNetwork) + 'o;

/// Runs `epochs` passes over `data` with a shuffled order derived from
/// `cfg.seed` and `phase`, appending one trace row per update.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    net: &mut StagedNetwork,
    data: &[Sample],
    loss: LossKind,
    cfg: &SgdConfig,
    mask: &FreezeMask,
    phase: &str,
    trace: &mut LossTrace,
    observer: &mut Observer<'_>,
    exec: Exec,
) -> Result<()> {
    cfg.validate()?;
    observer(TrainEvent::PhaseStart(phase), net);
    if data.is_empty() || !mask.any_trainable() || cfg.epochs == 0 {
        observer(TrainEvent::PhaseEnd(phase), net);
        return Ok(());
    }
    let mut state = SgdState::new(net);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::rng_indexed(cfg.seed, &format!("shuffle.{phase}"), epoch as u64));
        for ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = ids.iter().map(|&i| &data[i]).collect();
            let l = sgd_step(net, &mut state, &batch, ids, loss, cfg, mask, exec)?;
            trace.rows.push(TraceRow {
                phase: phase.to_string(),
                step,
                loss: l,
            });
            observer(TrainEvent::Step(phase, step), net);
            step += 1;
        }
    }
    observer(TrainEvent::PhaseEnd(phase), net);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStageConfig {
    pub sgd: SgdConfig,
    /// Epochs of the base-only phase.
    pub base_epochs: usize,
    /// Epochs training only the new stage branch.
    pub new_stage_epochs: usize,
    /// Epochs of the joint phase after each new stage.
    pub joint_epochs: usize,
    /// Learning-rate multiplier of the new-stage-only phase.
    pub new_stage_lr_scale: f64,
}

impl Default for MultiStageConfig {
    fn default() -> Self {
        MultiStageConfig {
            sgd: SgdConfig::default(),
            base_epochs: 4,
            new_stage_epochs: 1,
            joint_epochs: 1,
            new_stage_lr_scale: 0.1,
        }
    }
}

/// Stage-by-stage training of the first `stages` stage branches.
pub fn multistage_train(
    net: &mut StagedNetwork,
    data: &[Sample],
    stages: usize,
    cfg: &MultiStageConfig,
    trace: &mut LossTrace,
    observer: &mut Observer<'_>,
    exec: Exec,
) -> Result<()> {
    if stages > net.stages.len() {
        return Err(Error::invalid(format!(
            "requested {stages} stages but the network was built with {}",
            net.stages.len()
        )));
    }
    let loss = net.config.loss;
    let base_cfg = SgdConfig {
        epochs: cfg.base_epochs,
        ..cfg.sgd.clone()
    };
    let base_mask = FreezeMask::staged(net, true, 0, |_| false);
    train_phase(net, data, loss, &base_cfg, &base_mask, "base", trace, observer, exec)?;
    for t in 1..=stages {
        observer(TrainEvent::BeforeStageInit(t), net);
        net.randomize_stage(t, cfg.sgd.seed)?;
        observer(TrainEvent::AfterStageInit(t), net);
        let new_cfg = SgdConfig {
            epochs: cfg.new_stage_epochs,
            learning_rate: cfg.sgd.learning_rate * cfg.new_stage_lr_scale,
            ..cfg.sgd.clone()
        };
        let new_mask = FreezeMask::staged(net, false, t, |s| s == t);
        train_phase(
            net,
            data,
            loss,
            &new_cfg,
            &new_mask,
            &format!("stage{t}.new"),
            trace,
            observer,
            exec,
        )?;
        let joint_cfg = SgdConfig {
            epochs: cfg.joint_epochs,
            ..cfg.sgd.clone()
        };
        let joint_mask = FreezeMask::staged(net, true, t, |_| true);
        train_phase(
            net,
            data,
            loss,
            &joint_cfg,
            &joint_mask,
            &format!("stage{t}.joint"),
            trace,
            observer,
            exec,
        )?;
    }
    Ok(())
}

/// Which dataset a schedule phase reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseData {
    /// Whole images labelled with a coarse image-level class.
    WholeImage,
    /// Cropped objects in the source label set.
    SourceObjects,
    /// Cropped objects in the target (detection) label set.
    TargetObjects,
}

/// Samples and label space of one phase dataset.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub label_set: String,
    pub num_classes: usize,
    pub loss: LossKind,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Default)]
pub struct ScheduleData {
    pub whole_image: Option<LabeledSet>,
    pub source_objects: Option<LabeledSet>,
    pub target_objects: Option<LabeledSet>,
}

impl ScheduleData {
    fn get(&self, which: PhaseData) -> Option<&LabeledSet> {
        match which {
            PhaseData::WholeImage => self.whole_image.as_ref(),
            PhaseData::SourceObjects => self.source_objects.as_ref(),
            PhaseData::TargetObjects => self.target_objects.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSchedule {
    PlainFineTune,
    MultiStage(usize),
    /// Whole-image classification, then source-label objects, then target objects.
    SchemeOne,
    /// Source-label objects, then target objects.
    SchemeTwo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSpec {
    pub name: String,
    pub data: PhaseData,
    /// Stage branches trained in this phase (0 = plain training).
    pub stages: usize,
    /// Declares a label-set boundary: the final classifier is reinitialised
    /// before this phase.
    pub reinit_head: bool,
}

impl TrainingSchedule {
    pub fn name(&self) -> String {
        match self {
            TrainingSchedule::PlainFineTune => "plain".into(),
            TrainingSchedule::MultiStage(t) => format!("multistage{t}"),
            TrainingSchedule::SchemeOne => "scheme1".into(),
            TrainingSchedule::SchemeTwo => "scheme2".into(),
        }
    }

    pub fn phases(&self) -> Vec<PhaseSpec> {
        let phase = |name: &str, data, stages, reinit_head| PhaseSpec {
            name: name.into(),
            data,
            stages,
            reinit_head,
        };
        match *self {
            TrainingSchedule::PlainFineTune => vec![phase("finetune", PhaseData::TargetObjects, 0, false)],
            TrainingSchedule::MultiStage(t) => vec![phase("finetune", PhaseData::TargetObjects, t, false)],
            TrainingSchedule::SchemeOne => vec![
                phase("pretrain.image", PhaseData::WholeImage, 0, false),
                phase("pretrain.object", PhaseData::SourceObjects, 0, true),
                phase("finetune", PhaseData::TargetObjects, 0, true),
            ],
            TrainingSchedule::SchemeTwo => vec![
                phase("pretrain.object", PhaseData::SourceObjects, 0, false),
                phase("finetune", PhaseData::TargetObjects, 0, true),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub name: String,
    pub label_set: String,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub phases: Vec<PhaseSummary>,
    pub trace: LossTrace,
}

/// Builds a network for the first phase and runs `phases` in order. Each
/// phase starts from the previous phase's parameters; the final classifier
/// is reinitialised at declared label-set boundaries.
pub fn run_phases(
    phases: &[PhaseSpec],
    data: &ScheduleData,
    net_config: &NetworkConfig,
    cfg: &MultiStageConfig,
    exec: Exec,
) -> Result<(StagedNetwork, ScheduleReport)> {
    let first = phases.first().ok_or_else(|| Error::invalid("schedule has no phases"))?;
    let sets: Vec<&LabeledSet> = phases
        .iter()
        .map(|p| {
            data.get(p.data)
                .ok_or_else(|| Error::invalid(format!("phase '{}' needs {:?} data", p.name, p.data)))
        })
        .collect::<Result<_>>()?;
    for w in 1..phases.len() {
        if sets[w].label_set != sets[w - 1].label_set && !phases[w].reinit_head {
            return Err(Error::Validation(format!(
                "label set changes from '{}' to '{}' at phase '{}' without a declared boundary",
                sets[w - 1].label_set,
                sets[w].label_set,
                phases[w].name
            )));
        }
    }
    let mut cfg_net = net_config.clone();
    cfg_net.num_classes = sets[0].num_classes;
    cfg_net.loss = sets[0].loss;
    cfg_net.stages = cfg_net.stages.max(phases.iter().map(|p| p.stages).max().unwrap_or(0));
    let mut net = StagedNetwork::build(&cfg_net, cfg.sgd.seed)?;
    let mut report = ScheduleReport {
        phases: Vec::new(),
        trace: LossTrace::default(),
    };
    for (i, (p, set)) in phases.iter().zip(&sets).enumerate() {
        if p.reinit_head || set.num_classes != net.num_classes() {
            if !p.reinit_head {
                return Err(Error::Validation(format!(
                    "class count changes at phase '{}' without a declared boundary",
                    p.name
                )));
            }
            net.reset_head(set.num_classes, rng::indexed_seed(cfg.sgd.seed, "schedule.head", i as u64))?;
        }
        net.config.loss = set.loss;
        let before = report.trace.rows.len();
        let mut phase_cfg = cfg.clone();
        phase_cfg.sgd.seed = rng::indexed_seed(cfg.sgd.seed, &p.name, i as u64);
        if i == 0 && p.name == first.name {
            phase_cfg.sgd.seed = cfg.sgd.seed;
        }
        let mut trace = LossTrace::default();
        if p.stages > 0 {
            multistage_train(&mut net, &set.samples, p.stages, &phase_cfg, &mut trace, &mut |_, _| {}, exec)?;
        } else {
            let sgd = SgdConfig {
                epochs: cfg.base_epochs,
                ..phase_cfg.sgd.clone()
            };
            let mask = FreezeMask::staged(&net, true, 0, |_| false);
            train_phase(
                &mut net,
                &set.samples,
                set.loss,
                &sgd,
                &mask,
                "base",
                &mut trace,
                &mut |_, _| {},
                exec,
            )?;
        }
        for mut row in trace.rows {
            row.phase = format!("{}/{}", p.name, row.phase);
            report.trace.rows.push(row);
        }
        let rows = &report.trace.rows[before..];
        report.phases.push(PhaseSummary {
            name: p.name.clone(),
            label_set: set.label_set.clone(),
            steps: rows.len(),
            first_loss: rows.first().map(|r| r.loss),
            last_loss: rows.last().map(|r| r.loss),
        });
    }
    Ok((net, report))
}

pub fn run_schedule(
    schedule: TrainingSchedule,
    data: &ScheduleData,
    net_config: &NetworkConfig,
    cfg: &MultiStageConfig,
    exec: Exec,
) -> Result<(StagedNetwork, ScheduleReport)> {
    let (mut net, report) = run_phases(&schedule.phases(), data, net_config, cfg, exec)?;
    net.metadata.schedule = schedule.name();
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::FcLayer;
    use crate::network::{DefBranchConfig, InputShape, TrunkLayerSpec};
    use crate::tensor::uniform;
    use rand::{Rng, SeedableRng};

    pub(crate) fn tiny_config(stages: usize) -> NetworkConfig {
        NetworkConfig {
            input: InputShape {
                channels: 1,
                height: 6,
                width: 6,
            },
            trunk: vec![
                TrunkLayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                TrunkLayerSpec::Relu,
                TrunkLayerSpec::MaxPool { kernel: 2, stride: 2 },
            ],
            fc_width: 6,
            num_classes: 2,
            def_branch: DefBranchConfig {
                part_filter_sizes: vec![3],
                part_channels: 2,
                out_channels: 2,
                ..DefBranchConfig::default()
            },
            stages,
            loss: LossKind::hinge(),
        }
    }

    /// Class 0: bright top half; class 1: bright bottom half.
    pub(crate) fn toy_samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut x = uniform(&[1, 6, 6], &mut rng, 0.2);
                for r in 0..3 {
                    for c in 0..6 {
                        let row = if label == 0 { r } else { r + 3 };
                        x.data_mut()[row * 6 + c] += 1.0;
                    }
                }
                Sample {
                    input: x,
                    target: LossTarget::Index(label),
                }
            })
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut net = StagedNetwork::build(&tiny_config(1), 0).unwrap();
        let before = net.clone();
        let data = toy_samples(4, 0);
        let batch: Vec<&Sample> = data.iter().collect();
        let cfg = SgdConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut st = SgdState::new(&net);
        let mask = FreezeMask::all_trainable(&net);
        let l = sgd_step(
            &mut net,
            &mut st,
            &batch,
            &[0, 1, 2, 3],
            LossKind::hinge(),
            &cfg,
            &mask,
            Exec::Sequential,
        )
        .unwrap();
        assert!(l > 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn frozen_everything_is_bit_unchanged() {
        let mut net = StagedNetwork::build(&tiny_config(1), 0).unwrap();
        let before = net.clone();
        let data = toy_samples(4, 0);
        let batch: Vec<&Sample> = data.iter().collect();
        let mut st = SgdState::new(&net);
        let mask = FreezeMask::all_frozen(&net);
        sgd_step(
            &mut net,
            &mut st,
            &batch,
            &[0],
            LossKind::hinge(),
            &SgdConfig::default(),
            &mask,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn mask_must_cover_params() {
        let mut net = StagedNetwork::build(&tiny_config(0), 0).unwrap();
        let data = toy_samples(2, 0);
        let batch: Vec<&Sample> = data.iter().collect();
        let mut st = SgdState::new(&net);
        let mask = FreezeMask {
            frozen: vec![false],
            zero_pinned: vec![false],
        };
        assert!(sgd_step(
            &mut net,
            &mut st,
            &batch,
            &[0],
            LossKind::hinge(),
            &SgdConfig::default(),
            &mask,
            Exec::Sequential
        )
        .is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = StagedNetwork::build(&tiny_config(0), 0).unwrap();
        net.head.weights.fill(f64::MAX);
        let data = toy_samples(2, 0);
        let batch: Vec<&Sample> = data.iter().collect();
        let mut st = SgdState::new(&net);
        let mask = FreezeMask::all_trainable(&net);
        let err = sgd_step(
            &mut net,
            &mut st,
            &batch,
            &[0, 1],
            LossKind::hinge(),
            &SgdConfig::default(),
            &mask,
            Exec::Sequential,
        );
        assert!(err.is_err());
    }

    /// Squared loss on a single linear layer, driven through the same update
    /// rule as the network (momentum 0, no decay).
    #[test]
    fn linear_least_squares_loss_decreases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let truth = uniform(&[1, 3], &mut rng, 1.0);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| truth.data().iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let mut layer = FcLayer::zeros(3, 1);
        let lr = 0.01;
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let mut loss = 0.0;
            let mut gw = Tensor::zeros(&[1, 3]);
            let mut gb = Tensor::zeros(&[1]);
            for (x, &y) in xs.iter().zip(&ys) {
                let p = layer.forward(x).unwrap()[0];
                loss += 0.5 * (p - y) * (p - y);
                let g = layer.backward(x, &[p - y]).unwrap();
                gw.add_assign(&g.weights).unwrap();
                gb.add_assign(&g.bias).unwrap();
            }
            loss /= xs.len() as f64;
            assert!(loss < prev, "loss went from {prev} to {loss}");
            prev = loss;
            for (w, g) in layer.weights.data_mut().iter_mut().zip(gw.data()) {
                *w -= lr * g / xs.len() as f64;
            }
            layer.bias.data_mut()[0] -= lr * gb.data()[0] / xs.len() as f64;
        }
    }

    #[test]
    fn training_reduces_loss_on_toy_task() {
        let mut net = StagedNetwork::build(&tiny_config(0), 3).unwrap();
        let data = toy_samples(32, 1);
        let cfg = SgdConfig {
            learning_rate: 0.05,
            epochs: 8,
            batch_size: 8,
            ..SgdConfig::default()
        };
        let mut trace = LossTrace::default();
        let mask = FreezeMask::all_trainable(&net);
        train_phase(
            &mut net,
            &data,
            LossKind::hinge(),
            &cfg,
            &mask,
            "p",
            &mut trace,
            &mut |_, _| {},
            Exec::default(),
        )
        .unwrap();
        let l = trace.phase_losses("p");
        let head: f64 = l[..4].iter().sum::<f64>() / 4.0;
        let tail: f64 = l[l.len() - 4..].iter().sum::<f64>() / 4.0;
        assert!(tail < head * 0.5, "{head} -> {tail}");
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let data = toy_samples(16, 2);
        let cfg = MultiStageConfig {
            sgd: SgdConfig {
                epochs: 1,
                batch_size: 4,
                ..SgdConfig::default()
            },
            base_epochs: 1,
            ..MultiStageConfig::default()
        };
        let mut a = StagedNetwork::build(&tiny_config(1), 5).unwrap();
        let mut b = a.clone();
        multistage_train(&mut a, &data, 1, &cfg, &mut LossTrace::default(), &mut |_, _| {}, Exec::Sequential).unwrap();
        multistage_train(&mut b, &data, 1, &cfg, &mut LossTrace::default(), &mut |_, _| {}, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_stages_equals_plain_fine_tune() {
        let data = toy_samples(16, 2);
        let cfg = MultiStageConfig {
            base_epochs: 2,
            ..MultiStageConfig::default()
        };
        let mut a = StagedNetwork::build(&tiny_config(2), 5).unwrap();
        let mut b = a.clone();
        multistage_train(&mut a, &data, 0, &cfg, &mut LossTrace::default(), &mut |_, _| {}, Exec::default()).unwrap();
        let sgd = SgdConfig {
            epochs: 2,
            ..cfg.sgd.clone()
        };
        let mask = FreezeMask::staged(&b, true, 0, |_| false);
        train_phase(
            &mut b,
            &data,
            LossKind::hinge(),
            &sgd,
            &mask,
            "base",
            &mut LossTrace::default(),
            &mut |_, _| {},
            Exec::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_stages_is_an_error() {
        let mut net = StagedNetwork::build(&tiny_config(1), 0).unwrap();
        let r = multistage_train(
            &mut net,
            &toy_samples(2, 0),
            2,
            &MultiStageConfig::default(),
            &mut LossTrace::default(),
            &mut |_, _| {},
            Exec::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn scheme_two_drops_only_the_image_phase() {
        let one = TrainingSchedule::SchemeOne.phases();
        let two = TrainingSchedule::SchemeTwo.phases();
        assert_eq!(one.len(), two.len() + 1);
        assert_eq!(one[0].data, PhaseData::WholeImage);
        assert_eq!(
            one[1..].iter().map(|p| (&p.name, p.data)).collect::<Vec<_>>(),
            two.iter().map(|p| (&p.name, p.data)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn undeclared_label_change_is_rejected() {
        let set = |name: &str| LabeledSet {
            label_set: name.into(),
            num_classes: 2,
            loss: LossKind::hinge(),
            samples: toy_samples(4, 0),
        };
        let data = ScheduleData {
            whole_image: None,
            source_objects: Some(set("a")),
            target_objects: Some(set("b")),
        };
        let phases = vec![
            PhaseSpec {
                name: "x".into(),
                data: PhaseData::SourceObjects,
                stages: 0,
                reinit_head: false,
            },
            PhaseSpec {
                name: "y".into(),
                data: PhaseData::TargetObjects,
                stages: 0,
                reinit_head: false,
            },
        ];
        let r = run_phases(&phases, &data, &tiny_config(0), &MultiStageConfig::default(), Exec::default());
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn single_phase_schedule_equals_plain_training() {
        let data = ScheduleData {
            target_objects: Some(LabeledSet {
                label_set: "t".into(),
                num_classes: 2,
                loss: LossKind::hinge(),
                samples: toy_samples(8, 0),
            }),
            ..ScheduleData::default()
        };
        let cfg = MultiStageConfig {
            base_epochs: 1,
            ..MultiStageConfig::default()
        };
        let (a, _) = run_schedule(TrainingSchedule::PlainFineTune, &data, &tiny_config(0), &cfg, Exec::default()).unwrap();
        let mut b = StagedNetwork::build(&tiny_config(0), cfg.sgd.seed).unwrap();
        let sgd = SgdConfig {
            epochs: 1,
            ..cfg.sgd.clone()
        };
        let mask = FreezeMask::all_trainable(&b);
        train_phase(
            &mut b,
            &data.target_objects.as_ref().unwrap().samples,
            LossKind::hinge(),
            &sgd,
            &mask,
            "base",
            &mut LossTrace::default(),
            &mut |_, _| {},
            Exec::default(),
        )
        .unwrap();
        assert_eq!(a.params(), b.params());
    }
}
