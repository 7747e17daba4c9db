//! The joint training engine: teachers adapt to their targets while the
//! student distills from them, with the balance shifted by the beta schedule.
//! The single-target and multi-target procedures share this code; the
//! single-target case is the one-teacher instance.

use std::collections::BTreeMap;

use crate::data::{BatchPlan, DomainDataset, PairedBatches};
use crate::error::{Error, Result};
use crate::losses::{
    source_kd, target_kd, teacher_uda_mmd, teacher_uda_revgrad, teacher_tap_features,
    DistillContext, KdMode, MarginState,
};
use crate::nets::{init_network, DomainClassifierSpec, NetworkSpec, NetworkState, RegressorState};
use crate::schedule::{BetaSchedule, BetaUpdate};
use crate::tensor::{Gradients, Tape, Tensor};

use super::{derive_seed, evaluate, streams, MetricRecord, Sgd, TrainConfig, UdaMethod};

/// Trained states and the per-epoch metric log.
#[derive(Debug)]
pub struct JointOutput {
    pub teachers: Vec<NetworkState>,
    pub student: NetworkState,
    pub regressors: Vec<Option<RegressorState>>,
    pub metrics: Vec<MetricRecord>,
}

/// One teacher and everything attached to it: the optional domain classifier
/// (adversarial UDA), its UDA optimizer, and the feature-distillation state
/// (margins plus the student-side regressor trained by the student optimizer).
pub(crate) struct TeacherSlot {
    pub state: NetworkState,
    pub dc: Option<(NetworkState, NetworkSpec)>,
    pub opt: Sgd,
    pub margins: Option<MarginState>,
    pub regressor: Option<RegressorState>,
}

pub(crate) fn apply_grads(
    tape: &Tape,
    grads: &Gradients,
    params: Vec<&mut Tensor>,
    opt: &mut Sgd,
    offset: usize,
) {
    for (j, p) in params.into_iter().enumerate() {
        let Some(v) = tape.leaf_of(p) else { continue };
        let Some(g) = grads.wrt(v) else { continue };
        let g = g.to_vec();
        opt.step(offset + j, p, &g);
    }
}

fn check_finite(value: f64, term: &str, epoch: usize, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!(
            "{term} loss became {value} at epoch {epoch}, step {step}"
        )))
    }
}

pub(crate) fn new_teacher_slot(
    index: usize,
    teacher_spec: &NetworkSpec,
    student_spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<TeacherSlot> {
    let i = index as u64;
    let state = init_network(teacher_spec, derive_seed(cfg.seed, streams::TEACHER_INIT + i))?;
    let feature_dim = teacher_spec
        .feature_dim()
        .ok_or_else(|| Error::Config("teacher network needs a feature tap".into()))?;
    let dc = if cfg.uda_method == UdaMethod::Revgrad {
        let spec = DomainClassifierSpec::new(feature_dim, &cfg.domain_classifier_hidden);
        spec.validate(feature_dim)?;
        let state = init_network(&spec.net, derive_seed(cfg.seed, streams::DC_INIT + i))?;
        Some((state, spec.net))
    } else {
        None
    };
    let mut sizes: Vec<usize> = state.params().iter().map(|p| p.data.len()).collect();
    if let Some((dc_state, _)) = &dc {
        sizes.extend(dc_state.params().iter().map(|p| p.data.len()));
    }
    let opt = Sgd::new(cfg.uda_optimizer, &sizes);
    let (margins, regressor) = if cfg.kd_mode == KdMode::Feature {
        let student_dim = student_spec
            .feature_dim()
            .ok_or_else(|| Error::Config("student network needs a feature tap".into()))?;
        (
            Some(MarginState::new(feature_dim, cfg.margin_mode)),
            Some(RegressorState::init(
                student_dim,
                feature_dim,
                derive_seed(cfg.seed, streams::REGRESSOR_INIT + i),
            )),
        )
    } else {
        (None, None)
    };
    Ok(TeacherSlot {
        state,
        dc,
        opt,
        margins,
        regressor,
    })
}

/// One teacher UDA update on a `(source, target)` batch pair, with the loss
/// scaled by `scale` before the gradient step. Returns the unscaled value.
pub(crate) fn teacher_uda_step(
    slot: &mut TeacherSlot,
    teacher_spec: &NetworkSpec,
    cfg: &TrainConfig,
    source_batch: &Tensor,
    source_labels: &[usize],
    target_batch: &Tensor,
    scale: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = match cfg.uda_method {
        UdaMethod::Mmd => teacher_uda_mmd(
            &mut tape,
            (&slot.state, teacher_spec),
            source_batch,
            source_labels,
            target_batch,
            &cfg.weights,
            &cfg.kernel,
        )?,
        UdaMethod::Revgrad => {
            let (dc_state, dc_spec) = slot
                .dc
                .as_ref()
                .expect("revgrad slot carries a domain classifier");
            teacher_uda_revgrad(
                &mut tape,
                (&slot.state, teacher_spec),
                (dc_state, dc_spec),
                source_batch,
                source_labels,
                target_batch,
                &cfg.weights,
                cfg.grl_lambda,
            )?
        }
    };
    let value = tape.data(loss)[0];
    let scaled = tape.scalar_mul(loss, scale);
    let grads = tape.backward(scaled)?;
    let teacher_count = slot.state.params_mut().len();
    apply_grads(&tape, &grads, slot.state.params_mut(), &mut slot.opt, 0);
    if let Some((dc_state, _)) = &mut slot.dc {
        apply_grads(
            &tape,
            &grads,
            dc_state.params_mut(),
            &mut slot.opt,
            teacher_count,
        );
    }
    Ok(value)
}

/// One student distillation update against teacher `slot` on a batch pair:
/// loss `beta * (L_TKD + L_SKD)`, stepping the student and (in feature mode)
/// this teacher's regressor. Returns the unscaled `(tkd, skd)` values.
pub(crate) fn student_kd_step(
    student: &mut NetworkState,
    student_spec: &NetworkSpec,
    student_opt: &mut Sgd,
    regressor_offset: usize,
    slot: &mut TeacherSlot,
    teacher_spec: &NetworkSpec,
    cfg: &TrainConfig,
    source_batch: &Tensor,
    source_labels: &[usize],
    target_batch: &Tensor,
    beta: f64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let ctx = DistillContext {
        teacher: (&slot.state, teacher_spec),
        mode: cfg.kd_mode,
        convention: cfg.softmax_convention,
        margins: slot.margins.as_ref(),
        regressor: slot.regressor.as_ref(),
    };
    let tkd = target_kd(&mut tape, &ctx, (&*student, student_spec), target_batch, &cfg.weights)?;
    let skd = source_kd(
        &mut tape,
        &ctx,
        (&*student, student_spec),
        source_batch,
        source_labels,
        &cfg.weights,
    )?;
    let tkd_value = tape.data(tkd)[0];
    let skd_value = tape.data(skd)[0];
    let sum = tape.add(tkd, skd)?;
    let scaled = tape.scalar_mul(sum, beta);
    let grads = tape.backward(scaled)?;
    let student_count = student.params_mut().len();
    apply_grads(&tape, &grads, student.params_mut(), student_opt, 0);
    if let Some(reg) = &mut slot.regressor {
        apply_grads(
            &tape,
            &grads,
            reg.params_mut(),
            student_opt,
            student_count + regressor_offset,
        );
    }
    Ok((tkd_value, skd_value))
}

fn validate_inputs(
    teacher_spec: &NetworkSpec,
    student_spec: &NetworkSpec,
    source: &DomainDataset,
    targets: &[&DomainDataset],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    teacher_spec.validate()?;
    student_spec.validate()?;
    if targets.is_empty() {
        return Err(Error::Config("at least one target domain is required".into()));
    }
    if !source.is_labeled() {
        return Err(Error::Data("source domain must be labeled".into()));
    }
    if let Some(k) = source.class_count() {
        if k > teacher_spec.class_count || k > student_spec.class_count {
            return Err(Error::Data(format!(
                "source has {k} classes but the networks output {} / {}",
                teacher_spec.class_count, student_spec.class_count
            )));
        }
    }
    if source.dim() != teacher_spec.input_dim() || source.dim() != student_spec.input_dim() {
        return Err(Error::Data(format!(
            "source feature dim {} does not match network inputs",
            source.dim()
        )));
    }
    for t in targets {
        if t.dim() != source.dim() {
            return Err(Error::Data(format!(
                "target domain {} has dim {}, source has {}",
                t.domain_id,
                t.dim(),
                source.dim()
            )));
        }
    }
    if teacher_spec.class_count != student_spec.class_count {
        return Err(Error::Config(
            "teacher and student must share a class count".into(),
        ));
    }
    Ok(())
}

/// The shared progressive joint procedure. Per batch, each teacher takes a
/// `(1 - beta) * L_TDA` step on its own target, then the student takes a
/// `beta * (L_TKD + L_SKD)` step against that teacher.
pub(crate) fn run_joint(
    teacher_spec: &NetworkSpec,
    student_spec: &NetworkSpec,
    source: &DomainDataset,
    targets: &[&DomainDataset],
    cfg: &TrainConfig,
) -> Result<JointOutput> {
    validate_inputs(teacher_spec, student_spec, source, targets, cfg)?;

    let split_seed = derive_seed(cfg.seed, streams::SPLIT);
    let (source_train, source_eval) = source.split(1.0 - cfg.eval_frac, split_seed);
    let target_splits: Vec<(DomainDataset, DomainDataset)> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| t.split(1.0 - cfg.eval_frac, split_seed.wrapping_add(1 + i as u64)))
        .collect();

    let mut slots: Vec<TeacherSlot> = (0..targets.len())
        .map(|i| new_teacher_slot(i, teacher_spec, student_spec, cfg))
        .collect::<Result<_>>()?;
    let mut student = init_network(student_spec, derive_seed(cfg.seed, streams::STUDENT_INIT))?;
    let mut student_sizes: Vec<usize> = student.params().iter().map(|p| p.data.len()).collect();
    for slot in &slots {
        if let Some(reg) = &slot.regressor {
            student_sizes.push(reg.weight.data.len());
            student_sizes.push(reg.bias.data.len());
        }
    }
    let mut student_opt = Sgd::new(cfg.kd_optimizer, &student_sizes);

    let mut metrics = Vec::new();
    let schedule = if cfg.epochs > 0 {
        Some(BetaSchedule::new(cfg.beta_start, cfg.beta_end, cfg.epochs)?)
    } else {
        None
    };

    for epoch in 0..cfg.epochs {
        let schedule = schedule.as_ref().expect("schedule exists when epochs > 0");
        let plan = BatchPlan {
            batch_size: cfg.batch_size,
            seed: derive_seed(cfg.seed, streams::BATCHES),
            epoch,
        };
        let target_lens: Vec<usize> = target_splits.iter().map(|(tr, _)| tr.len()).collect();
        let pairing = PairedBatches::new(source_train.len(), &target_lens, plan)?;
        let steps = pairing.steps();

        let mut tda_sums = vec![0.0; slots.len()];
        let mut tkd_sums = vec![0.0; slots.len()];
        let mut skd_sums = vec![0.0; slots.len()];
        let mut beta_sum = 0.0;

        for (step, batch) in pairing.enumerate() {
            let beta = match cfg.beta_update {
                BetaUpdate::PerEpoch => schedule.beta_at(epoch as f64)?,
                BetaUpdate::PerBatch => {
                    schedule.beta_at(epoch as f64 + step as f64 / steps as f64)?
                }
            };
            beta_sum += beta;
            let source_batch = source_train.train_view().gather(&batch.source);
            let source_labels = source_train.gather_labels(&batch.source)?;
            for (i, slot) in slots.iter_mut().enumerate() {
                let target_batch = target_splits[i].0.train_view().gather(&batch.targets[i]);
                let tda = teacher_uda_step(
                    slot,
                    teacher_spec,
                    cfg,
                    &source_batch,
                    &source_labels,
                    &target_batch,
                    1.0 - beta,
                )?;
                tda_sums[i] += check_finite(tda, "teacher adaptation", epoch, step)?;
                if let Some(margins) = &mut slot.margins {
                    let src_feats =
                        teacher_tap_features(&slot.state, teacher_spec, &source_batch)?;
                    let tgt_feats =
                        teacher_tap_features(&slot.state, teacher_spec, &target_batch)?;
                    margins.update(&src_feats)?;
                    margins.update(&tgt_feats)?;
                }
                let (tkd, skd) = student_kd_step(
                    &mut student,
                    student_spec,
                    &mut student_opt,
                    i * 2,
                    slot,
                    teacher_spec,
                    cfg,
                    &source_batch,
                    &source_labels,
                    &target_batch,
                    beta,
                )?;
                tkd_sums[i] += check_finite(tkd, "target distillation", epoch, step)?;
                skd_sums[i] += check_finite(skd, "source distillation", epoch, step)?;
            }
        }

        let last = epoch + 1 == cfg.epochs;
        if epoch % cfg.eval_every == 0 || last {
            let denom = steps as f64;
            for (i, slot) in slots.iter().enumerate() {
                let (_, target_eval) = &target_splits[i];
                let accuracy = if target_eval.is_labeled() {
                    Some(evaluate(&slot.state, teacher_spec, target_eval)?)
                } else {
                    None
                };
                metrics.push(MetricRecord {
                    epoch,
                    model: format!("teacher_{i}"),
                    domain: target_eval.domain_id.clone(),
                    accuracy,
                    losses: BTreeMap::from([("tda".to_string(), tda_sums[i] / denom)]),
                });
            }
            metrics.push(MetricRecord {
                epoch,
                model: "student".to_string(),
                domain: source_eval.domain_id.clone(),
                accuracy: Some(evaluate(&student, student_spec, &source_eval)?),
                losses: BTreeMap::from([
                    ("beta".to_string(), beta_sum / denom),
                    (
                        "skd".to_string(),
                        skd_sums.iter().sum::<f64>() / (denom * slots.len() as f64),
                    ),
                ]),
            });
            let mut labeled_accs = Vec::new();
            for (i, (_, target_eval)) in target_splits.iter().enumerate() {
                let accuracy = if target_eval.is_labeled() {
                    let a = evaluate(&student, student_spec, target_eval)?;
                    labeled_accs.push(a);
                    Some(a)
                } else {
                    None
                };
                metrics.push(MetricRecord {
                    epoch,
                    model: "student".to_string(),
                    domain: target_eval.domain_id.clone(),
                    accuracy,
                    losses: BTreeMap::from([("tkd".to_string(), tkd_sums[i] / denom)]),
                });
            }
            if labeled_accs.len() == target_splits.len() && target_splits.len() > 1 {
                metrics.push(MetricRecord {
                    epoch,
                    model: "student".to_string(),
                    domain: "avg_target".to_string(),
                    accuracy: Some(labeled_accs.iter().sum::<f64>() / labeled_accs.len() as f64),
                    losses: BTreeMap::new(),
                });
            }
        }
    }

    let mut teachers = Vec::with_capacity(slots.len());
    let mut regressors = Vec::with_capacity(slots.len());
    for slot in slots {
        teachers.push(slot.state);
        regressors.push(slot.regressor);
    }
    Ok(JointOutput {
        teachers,
        student,
        regressors,
        metrics,
    })
}

/// Single-target joint distillation and adaptation: one teacher adapts to the
/// target while the student distills from it.
pub fn train_stda(
    teacher_spec: &NetworkSpec,
    student_spec: &NetworkSpec,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<JointOutput> {
    run_joint(teacher_spec, student_spec, source, &[target], cfg)
}

/// Multi-target joint distillation: one teacher per target domain, one
/// student distilling from all of them. With a single target this is
/// bit-identical to [`train_stda`].
pub fn train_mtda(
    teacher_spec: &NetworkSpec,
    student_spec: &NetworkSpec,
    source: &DomainDataset,
    targets: &[&DomainDataset],
    cfg: &TrainConfig,
) -> Result<JointOutput> {
    run_joint(teacher_spec, student_spec, source, targets, cfg)
}
