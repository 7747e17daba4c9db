//! Sequential baselines the joint procedure is compared against: source-only
//! training, plain UDA, and the two decoupled orderings of adaptation and
//! distillation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{batches, BatchPlan, DomainDataset, PairedBatches};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, source_kd, target_kd, teacher_tap_features, DistillContext, KdMode, MarginState,
};
use crate::nets::{forward, init_network, NetworkSpec, NetworkState, RegressorState};
use crate::tensor::Tape;

use super::joint::{apply_grads, new_teacher_slot, teacher_uda_step, TeacherSlot};
use super::{derive_seed, evaluate, streams, MetricRecord, Sgd, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineOrdering {
    /// Supervised training on the source domain only.
    SourceOnly,
    /// UDA applied directly to the compact model; no distillation.
    UdaOnly,
    /// Adapt the teacher first, then distill to the student on the target.
    UdaThenKd,
    /// Distill on the source first, then adapt the student.
    KdThenUda,
}

/// The trained compact model, the teacher when the ordering uses one, and the
/// metric log across all phases (epoch numbering runs through the phases).
#[derive(Debug)]
pub struct BaselineOutput {
    pub model: NetworkState,
    pub teacher: Option<NetworkState>,
    pub metrics: Vec<MetricRecord>,
}

#[allow(clippy::too_many_arguments)]
fn record_eval(
    metrics: &mut Vec<MetricRecord>,
    epoch: usize,
    model: &str,
    state: &NetworkState,
    spec: &NetworkSpec,
    source_eval: &DomainDataset,
    target_eval: &DomainDataset,
    loss_name: &str,
    loss_mean: f64,
) -> Result<()> {
    metrics.push(MetricRecord {
        epoch,
        model: model.to_string(),
        domain: source_eval.domain_id.clone(),
        accuracy: Some(evaluate(state, spec, source_eval)?),
        losses: BTreeMap::from([(loss_name.to_string(), loss_mean)]),
    });
    metrics.push(MetricRecord {
        epoch,
        model: model.to_string(),
        domain: target_eval.domain_id.clone(),
        accuracy: if target_eval.is_labeled() {
            Some(evaluate(state, spec, target_eval)?)
        } else {
            None
        },
        losses: BTreeMap::new(),
    });
    Ok(())
}

/// Supervised cross-entropy epochs on the source training split.
#[allow(clippy::too_many_arguments)]
fn ce_phase(
    state: &mut NetworkState,
    spec: &NetworkSpec,
    opt: &mut Sgd,
    train: &DomainDataset,
    source_eval: &DomainDataset,
    target_eval: &DomainDataset,
    cfg: &TrainConfig,
    model: &str,
    epoch_offset: usize,
    metrics: &mut Vec<MetricRecord>,
) -> Result<()> {
    for epoch in 0..cfg.epochs {
        let plan = BatchPlan {
            batch_size: cfg.batch_size,
            seed: derive_seed(cfg.seed, streams::BATCHES),
            epoch: epoch_offset + epoch,
        };
        let mut loss_sum = 0.0;
        let batch_list = batches(train.len(), plan)?;
        let steps = batch_list.len();
        for indices in batch_list {
            let batch = train.train_view().gather(&indices);
            let labels = train.gather_labels(&indices)?;
            let mut tape = Tape::new();
            let bv = tape.constant(batch.shape.clone(), batch.data.clone())?;
            let (logits, _) = forward(state, spec, &mut tape, bv)?;
            let loss = cross_entropy(&mut tape, logits, &labels)?;
            let value = tape.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "cross-entropy became {value} at epoch {}",
                    epoch_offset + epoch
                )));
            }
            loss_sum += value;
            let grads = tape.backward(loss)?;
            apply_grads(&tape, &grads, state.params_mut(), opt, 0);
        }
        record_eval(
            metrics,
            epoch_offset + epoch,
            model,
            state,
            spec,
            source_eval,
            target_eval,
            "ce",
            loss_sum / steps as f64,
        )?;
    }
    Ok(())
}

/// Unscaled UDA epochs for whatever model sits in `slot`.
#[allow(clippy::too_many_arguments)]
fn uda_phase(
    slot: &mut TeacherSlot,
    spec: &NetworkSpec,
    source_train: &DomainDataset,
    target_train: &DomainDataset,
    source_eval: &DomainDataset,
    target_eval: &DomainDataset,
    cfg: &TrainConfig,
    model: &str,
    epoch_offset: usize,
    metrics: &mut Vec<MetricRecord>,
) -> Result<()> {
    for epoch in 0..cfg.epochs {
        let plan = BatchPlan {
            batch_size: cfg.batch_size,
            seed: derive_seed(cfg.seed, streams::BATCHES),
            epoch: epoch_offset + epoch,
        };
        let pairing = PairedBatches::new(source_train.len(), &[target_train.len()], plan)?;
        let steps = pairing.steps();
        let mut loss_sum = 0.0;
        for batch in pairing {
            let source_batch = source_train.train_view().gather(&batch.source);
            let labels = source_train.gather_labels(&batch.source)?;
            let target_batch = target_train.train_view().gather(&batch.targets[0]);
            let value =
                teacher_uda_step(slot, spec, cfg, &source_batch, &labels, &target_batch, 1.0)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "adaptation loss became {value} at epoch {}",
                    epoch_offset + epoch
                )));
            }
            loss_sum += value;
        }
        record_eval(
            metrics,
            epoch_offset + epoch,
            model,
            &slot.state,
            spec,
            source_eval,
            target_eval,
            "tda",
            loss_sum / steps as f64,
        )?;
    }
    Ok(())
}

/// Distillation epochs from a frozen teacher: target-side, source-side, or
/// both, at full weight (no beta schedule in the sequential orderings).
#[allow(clippy::too_many_arguments)]
fn kd_phase(
    student: &mut NetworkState,
    student_spec: &NetworkSpec,
    opt: &mut Sgd,
    teacher: &NetworkState,
    teacher_spec: &NetworkSpec,
    margins: &mut Option<MarginState>,
    regressor: &mut Option<RegressorState>,
    source_train: &DomainDataset,
    target_train: &DomainDataset,
    source_eval: &DomainDataset,
    target_eval: &DomainDataset,
    cfg: &TrainConfig,
    use_tkd: bool,
    use_skd: bool,
    epoch_offset: usize,
    metrics: &mut Vec<MetricRecord>,
) -> Result<()> {
    let student_count = student.params_mut().len();
    for epoch in 0..cfg.epochs {
        let plan = BatchPlan {
            batch_size: cfg.batch_size,
            seed: derive_seed(cfg.seed, streams::BATCHES),
            epoch: epoch_offset + epoch,
        };
        let pairing = PairedBatches::new(source_train.len(), &[target_train.len()], plan)?;
        let steps = pairing.steps();
        let mut loss_sum = 0.0;
        for batch in pairing {
            let source_batch = source_train.train_view().gather(&batch.source);
            let labels = source_train.gather_labels(&batch.source)?;
            let target_batch = target_train.train_view().gather(&batch.targets[0]);
            if let Some(m) = margins.as_mut() {
                m.update(&teacher_tap_features(teacher, teacher_spec, &source_batch)?)?;
                m.update(&teacher_tap_features(teacher, teacher_spec, &target_batch)?)?;
            }
            let mut tape = Tape::new();
            let ctx = DistillContext {
                teacher: (teacher, teacher_spec),
                mode: cfg.kd_mode,
                convention: cfg.softmax_convention,
                margins: margins.as_ref(),
                regressor: regressor.as_ref(),
            };
            let mut loss = None;
            if use_tkd {
                let tkd = target_kd(
                    &mut tape,
                    &ctx,
                    (&*student, student_spec),
                    &target_batch,
                    &cfg.weights,
                )?;
                loss = Some(tkd);
            }
            if use_skd {
                let skd = source_kd(
                    &mut tape,
                    &ctx,
                    (&*student, student_spec),
                    &source_batch,
                    &labels,
                    &cfg.weights,
                )?;
                loss = Some(match loss {
                    Some(l) => tape.add(l, skd)?,
                    None => skd,
                });
            }
            let loss = loss.expect("at least one distillation term");
            let value = tape.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "distillation loss became {value} at epoch {}",
                    epoch_offset + epoch
                )));
            }
            loss_sum += value;
            let grads = tape.backward(loss)?;
            apply_grads(&tape, &grads, student.params_mut(), opt, 0);
            if let Some(reg) = regressor.as_mut() {
                apply_grads(&tape, &grads, reg.params_mut(), opt, student_count);
            }
        }
        record_eval(
            metrics,
            epoch_offset + epoch,
            "student",
            student,
            student_spec,
            source_eval,
            target_eval,
            "kd",
            loss_sum / steps as f64,
        )?;
    }
    Ok(())
}

fn kd_extras(
    teacher_spec: &NetworkSpec,
    student_spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(Option<MarginState>, Option<RegressorState>)> {
    if cfg.kd_mode != KdMode::Feature {
        return Ok((None, None));
    }
    let teacher_dim = teacher_spec
        .feature_dim()
        .ok_or_else(|| Error::Config("teacher network needs a feature tap".into()))?;
    let student_dim = student_spec
        .feature_dim()
        .ok_or_else(|| Error::Config("student network needs a feature tap".into()))?;
    Ok((
        Some(MarginState::new(teacher_dim, cfg.margin_mode)),
        Some(RegressorState::init(
            student_dim,
            teacher_dim,
            derive_seed(cfg.seed, streams::REGRESSOR_INIT),
        )),
    ))
}

/// Train one of the sequential baselines. Each phase runs `cfg.epochs`
/// epochs; metric epoch numbers continue across phases.
pub fn train_baseline(
    ordering: BaselineOrdering,
    teacher_spec: &NetworkSpec,
    student_spec: &NetworkSpec,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<BaselineOutput> {
    cfg.validate()?;
    if !source.is_labeled() {
        return Err(Error::Data("source domain must be labeled".into()));
    }
    let split_seed = derive_seed(cfg.seed, streams::SPLIT);
    let (source_train, source_eval) = source.split(1.0 - cfg.eval_frac, split_seed);
    let (target_train, target_eval) = target.split(1.0 - cfg.eval_frac, split_seed.wrapping_add(1));
    let mut metrics = Vec::new();

    match ordering {
        BaselineOrdering::SourceOnly => {
            let mut student =
                init_network(student_spec, derive_seed(cfg.seed, streams::STUDENT_INIT))?;
            let sizes: Vec<usize> = student.params().iter().map(|p| p.data.len()).collect();
            let mut opt = Sgd::new(cfg.kd_optimizer, &sizes);
            ce_phase(
                &mut student,
                student_spec,
                &mut opt,
                &source_train,
                &source_eval,
                &target_eval,
                cfg,
                "student",
                0,
                &mut metrics,
            )?;
            Ok(BaselineOutput {
                model: student,
                teacher: None,
                metrics,
            })
        }
        BaselineOrdering::UdaOnly => {
            // The compact model is adapted directly; it occupies the student
            // seed stream so the comparison starts from the same weights.
            let mut slot = new_teacher_slot(0, student_spec, student_spec, cfg)?;
            slot.state =
                init_network(student_spec, derive_seed(cfg.seed, streams::STUDENT_INIT))?;
            uda_phase(
                &mut slot,
                student_spec,
                &source_train,
                &target_train,
                &source_eval,
                &target_eval,
                cfg,
                "student",
                0,
                &mut metrics,
            )?;
            Ok(BaselineOutput {
                model: slot.state,
                teacher: None,
                metrics,
            })
        }
        BaselineOrdering::UdaThenKd => {
            let mut slot = new_teacher_slot(0, teacher_spec, student_spec, cfg)?;
            uda_phase(
                &mut slot,
                teacher_spec,
                &source_train,
                &target_train,
                &source_eval,
                &target_eval,
                cfg,
                "teacher_0",
                0,
                &mut metrics,
            )?;
            let mut student =
                init_network(student_spec, derive_seed(cfg.seed, streams::STUDENT_INIT))?;
            let (mut margins, mut regressor) = kd_extras(teacher_spec, student_spec, cfg)?;
            let mut sizes: Vec<usize> = student.params().iter().map(|p| p.data.len()).collect();
            if let Some(reg) = &regressor {
                sizes.push(reg.weight.data.len());
                sizes.push(reg.bias.data.len());
            }
            let mut opt = Sgd::new(cfg.kd_optimizer, &sizes);
            kd_phase(
                &mut student,
                student_spec,
                &mut opt,
                &slot.state,
                teacher_spec,
                &mut margins,
                &mut regressor,
                &source_train,
                &target_train,
                &source_eval,
                &target_eval,
                cfg,
                true,
                false,
                cfg.epochs,
                &mut metrics,
            )?;
            Ok(BaselineOutput {
                model: student,
                teacher: Some(slot.state),
                metrics,
            })
        }
        BaselineOrdering::KdThenUda => {
            let mut teacher =
                init_network(teacher_spec, derive_seed(cfg.seed, streams::TEACHER_INIT))?;
            let sizes: Vec<usize> = teacher.params().iter().map(|p| p.data.len()).collect();
            let mut teacher_opt = Sgd::new(cfg.uda_optimizer, &sizes);
            ce_phase(
                &mut teacher,
                teacher_spec,
                &mut teacher_opt,
                &source_train,
                &source_eval,
                &target_eval,
                cfg,
                "teacher_0",
                0,
                &mut metrics,
            )?;
            let mut student =
                init_network(student_spec, derive_seed(cfg.seed, streams::STUDENT_INIT))?;
            let (mut margins, mut regressor) = kd_extras(teacher_spec, student_spec, cfg)?;
            let mut sizes: Vec<usize> = student.params().iter().map(|p| p.data.len()).collect();
            if let Some(reg) = &regressor {
                sizes.push(reg.weight.data.len());
                sizes.push(reg.bias.data.len());
            }
            let mut opt = Sgd::new(cfg.kd_optimizer, &sizes);
            kd_phase(
                &mut student,
                student_spec,
                &mut opt,
                &teacher,
                teacher_spec,
                &mut margins,
                &mut regressor,
                &source_train,
                &target_train,
                &source_eval,
                &target_eval,
                cfg,
                false,
                true,
                cfg.epochs,
                &mut metrics,
            )?;
            let mut slot = new_teacher_slot(0, student_spec, student_spec, cfg)?;
            slot.state = student;
            uda_phase(
                &mut slot,
                student_spec,
                &source_train,
                &target_train,
                &source_eval,
                &target_eval,
                cfg,
                "student",
                2 * cfg.epochs,
                &mut metrics,
            )?;
            Ok(BaselineOutput {
                model: slot.state,
                teacher: Some(teacher),
                metrics,
            })
        }
    }
}
