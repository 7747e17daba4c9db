//! Differentiable losses: UDA losses for the teachers (MMD, adversarial
//! domain confusion), distillation losses for the student (softened logits,
//! margin-rectified feature matching), and their compositions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{self, NetworkSpec, NetworkState, RegressorState};
use crate::tensor::{softmax_temperature, SoftmaxConvention, Tape, Tensor, Var};

/// Gaussian-kernel bandwidth selection for the MMD estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidths {
    /// Fixed list of `sigma^2` values.
    Fixed(Vec<f64>),
    /// Median of pairwise squared distances over the joint batch, scaled by
    /// each multiplier.
    MedianHeuristic { multipliers: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub bandwidths: Bandwidths,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidths: Bandwidths::MedianHeuristic {
                multipliers: vec![0.5, 1.0, 2.0],
            },
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let list = match &self.bandwidths {
            Bandwidths::Fixed(v) => v,
            Bandwidths::MedianHeuristic { multipliers } => multipliers,
        };
        if list.is_empty() || list.iter().any(|&b| b <= 0.0) {
            return Err(Error::Config(
                "kernel bandwidths must be nonempty and positive".into(),
            ));
        }
        Ok(())
    }

    /// Concrete `sigma^2` list for a pair of feature batches. The median
    /// heuristic is computed from the data and treated as a constant.
    pub fn resolve(&self, source: &[f64], target: &[f64], dim: usize) -> Result<Vec<f64>> {
        self.validate()?;
        match &self.bandwidths {
            Bandwidths::Fixed(v) => Ok(v.clone()),
            Bandwidths::MedianHeuristic { multipliers } => {
                let mut rows: Vec<&[f64]> = source.chunks(dim).collect();
                rows.extend(target.chunks(dim));
                let mut d2s = Vec::new();
                for i in 0..rows.len() {
                    for j in (i + 1)..rows.len() {
                        let d2: f64 = rows[i]
                            .iter()
                            .zip(rows[j])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        d2s.push(d2);
                    }
                }
                d2s.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
                let median = if d2s.is_empty() {
                    1.0
                } else {
                    d2s[d2s.len() / 2]
                };
                let base = if median > 0.0 { median } else { 1.0 };
                Ok(multipliers.iter().map(|m| m * base).collect())
            }
        }
    }
}

/// Loss-weight bundle: `gamma` weights the teacher's source CE in the MMD
/// objective, `alpha_dc` the domain-confusion term, `alpha_ce` the student's
/// source CE, `tau` the distillation temperature, `beta` the current KD/DA
/// balance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha_dc: f64,
    pub alpha_ce: f64,
    pub tau: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // desk-scale defaults; the supplementary alpha binds to both alpha_dc
        // and alpha_ce since the source does not distinguish them
        LossWeights {
            gamma: 0.5,
            alpha_dc: 0.5,
            alpha_ce: 0.5,
            tau: 2.0,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.alpha_dc < 0.0 || self.alpha_ce < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("beta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which distillation path the student trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KdMode {
    #[default]
    Logits,
    Feature,
}

/// Biased (V-statistic) squared MMD between two feature batches, summed over
/// the configured bandwidths.
pub fn mmd_gaussian(tape: &mut Tape, source: Var, target: Var, cfg: &KernelConfig) -> Result<Var> {
    let dim = {
        let s = tape.shape(source);
        if s.len() != 2 {
            return Err(Error::BadShape {
                op: "mmd_gaussian",
                expected: "rank-2 features".into(),
                got: s.to_vec(),
            });
        }
        s[1]
    };
    let bandwidths = cfg.resolve(tape.data(source), tape.data(target), dim)?;
    tape.mmd_gaussian(source, target, &bandwidths)
}

/// Mean cross-entropy of logits against class labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::BadShape {
            op: "cross_entropy",
            expected: format!("[{}, K] logits", labels.len()),
            got: shape,
        });
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArg {
            op: "cross_entropy",
            msg: format!("label {bad} out of class range 0..{k}"),
        });
    }
    let ls = tape.log_softmax(logits)?;
    let mut onehot = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let mask = tape.constant(vec![n, k], onehot)?;
    let picked = tape.mul(ls, mask)?;
    let total = tape.reduce_sum(picked);
    Ok(tape.scalar_mul(total, -1.0 / n as f64))
}

/// Batch-averaged `KL(teacher_softened || student_softened)` at temperature
/// `tau`. The teacher side is detached: it enters as plain probabilities.
pub fn logits_distill(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    tau: f64,
    convention: SoftmaxConvention,
) -> Result<Var> {
    let shape = tape.shape(student_logits).to_vec();
    if shape != teacher_logits.shape {
        return Err(Error::ShapeMismatch {
            op: "logits_distill",
            lhs: teacher_logits.shape.clone(),
            rhs: shape,
        });
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArg {
            op: "logits_distill",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    let (n, k) = (shape[0], shape[1]);
    let mut teacher_probs = Vec::with_capacity(n * k);
    let mut entropy_sum = 0.0;
    for i in 0..n {
        let row = softmax_temperature(&teacher_logits.data[i * k..(i + 1) * k], tau, convention)?;
        for &p in &row {
            entropy_sum += p * p.ln();
        }
        teacher_probs.extend(row);
    }
    let scaled = tape.scalar_mul(student_logits, convention.scale(tau));
    let student_ls = tape.log_softmax(scaled)?;
    let pt = tape.constant(vec![n, k], teacher_probs)?;
    let cross = tape.mul(student_ls, pt)?;
    let cross_sum = tape.reduce_sum(cross);
    let neg_cross = tape.scalar_mul(cross_sum, -1.0 / n as f64);
    let entropy = tape.scalar_const(entropy_sum / n as f64);
    tape.add(neg_cross, entropy)
}

/// Domain-confusion loss: mean cross-entropy of the domain classifier over
/// the concatenated batch (source label 0, target label 1), with a gradient
/// reversal of strength `lambda` between the features and the classifier.
pub fn domain_confusion(
    tape: &mut Tape,
    features_source: Var,
    features_target: Var,
    classifier: (&NetworkState, &NetworkSpec),
    lambda: f64,
) -> Result<Var> {
    let ns = tape.shape(features_source)[0];
    let nt = tape.shape(features_target)[0];
    let all = tape.concat_rows(features_source, features_target)?;
    let reversed = tape.grad_reverse(all, lambda)?;
    let (logits, _) = nets::forward(classifier.0, classifier.1, tape, reversed)?;
    let labels: Vec<usize> = std::iter::repeat(0)
        .take(ns)
        .chain(std::iter::repeat(1).take(nt))
        .collect();
    cross_entropy(tape, logits, &labels)
}

/// Per-channel running estimate of the conditional mean of negative teacher
/// activations (the margin of the margin-ReLU).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginMode {
    /// Exact count-weighted mean over all negatives seen so far.
    CountWeighted,
    /// Exponential moving average of per-batch negative means.
    Ema { momentum: f64 },
}

impl Default for MarginMode {
    fn default() -> Self {
        MarginMode::CountWeighted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginState {
    margins: Vec<f64>,
    neg_counts: Vec<f64>,
    mode: MarginMode,
}

impl MarginState {
    pub fn new(channels: usize, mode: MarginMode) -> Self {
        MarginState {
            margins: vec![0.0; channels],
            neg_counts: vec![0.0; channels],
            mode,
        }
    }

    /// Channels with no observed negatives keep margin 0.
    pub fn margins(&self) -> &[f64] {
        &self.margins
    }

    /// Fold a batch of teacher features `[n, c]` into the running margins.
    pub fn update(&mut self, teacher_features: &Tensor) -> Result<()> {
        let c = self.margins.len();
        if teacher_features.shape.len() != 2 || teacher_features.shape[1] != c {
            return Err(Error::ShapeMismatch {
                op: "update_margins",
                lhs: vec![c],
                rhs: teacher_features.shape.clone(),
            });
        }
        let n = teacher_features.shape[0];
        for j in 0..c {
            let mut sum = 0.0;
            let mut count = 0.0;
            for i in 0..n {
                let v = teacher_features.data[i * c + j];
                if v < 0.0 {
                    sum += v;
                    count += 1.0;
                }
            }
            if count == 0.0 {
                continue;
            }
            let batch_mean = sum / count;
            match self.mode {
                MarginMode::CountWeighted => {
                    let total = self.neg_counts[j] + count;
                    self.margins[j] =
                        (self.margins[j] * self.neg_counts[j] + sum) / total;
                    self.neg_counts[j] = total;
                }
                MarginMode::Ema { momentum } => {
                    if self.neg_counts[j] == 0.0 {
                        self.margins[j] = batch_mean;
                    } else {
                        self.margins[j] =
                            momentum * self.margins[j] + (1.0 - momentum) * batch_mean;
                    }
                    self.neg_counts[j] += count;
                }
            }
        }
        Ok(())
    }
}

/// Margin ReLU `max(x, m_c)` with the current per-channel margins.
pub fn margin_relu(tape: &mut Tape, x: Var, margins: &MarginState) -> Result<Var> {
    tape.margin_max(x, margins.margins())
}

/// Feature distillation: partial L2 between margin-rectified teacher features
/// (detached) and the regressed student features. Regressor parameters train
/// with the student.
pub fn feature_distill(
    tape: &mut Tape,
    teacher_features: &Tensor,
    student_features: Var,
    margins: &MarginState,
    regressor: &RegressorState,
) -> Result<Var> {
    let c = margins.margins().len();
    if teacher_features.shape.len() != 2 || teacher_features.shape[1] != c {
        return Err(Error::ShapeMismatch {
            op: "feature_distill",
            lhs: vec![c],
            rhs: teacher_features.shape.clone(),
        });
    }
    let n = teacher_features.shape[0];
    let mut rectified = Vec::with_capacity(n * c);
    for i in 0..n {
        for j in 0..c {
            rectified.push(teacher_features.data[i * c + j].max(margins.margins()[j]));
        }
    }
    let rect = Tensor::new(vec![n, c], rectified)?;
    let regressed = regressor.apply(tape, student_features)?;
    let total = tape.partial_l2(&rect, regressed)?;
    Ok(tape.scalar_mul(total, 1.0 / (n * c) as f64))
}

fn last_tap_feature(
    taps: &std::collections::BTreeMap<usize, Var>,
    spec: &NetworkSpec,
) -> Result<Var> {
    let idx = spec.tap_layers.last().ok_or_else(|| {
        Error::Config("network spec has no feature tap; UDA and feature KD need one".into())
    })?;
    Ok(taps[idx])
}

/// MMD-based teacher UDA loss: `L_MMD` on tapped features plus `gamma` times
/// the teacher's source cross-entropy (temperature 1).
pub fn teacher_uda_mmd(
    tape: &mut Tape,
    teacher: (&NetworkState, &NetworkSpec),
    source_batch: &Tensor,
    source_labels: &[usize],
    target_batch: &Tensor,
    weights: &LossWeights,
    kernel: &KernelConfig,
) -> Result<Var> {
    let sb = tape.constant(source_batch.shape.clone(), source_batch.data.clone())?;
    let tb = tape.constant(target_batch.shape.clone(), target_batch.data.clone())?;
    let (src_logits, src_taps) = nets::forward(teacher.0, teacher.1, tape, sb)?;
    let (_, tgt_taps) = nets::forward(teacher.0, teacher.1, tape, tb)?;
    let feat_s = last_tap_feature(&src_taps, teacher.1)?;
    let feat_t = last_tap_feature(&tgt_taps, teacher.1)?;
    let mmd = mmd_gaussian(tape, feat_s, feat_t, kernel)?;
    let ce = cross_entropy(tape, src_logits, source_labels)?;
    let weighted_ce = tape.scalar_mul(ce, weights.gamma);
    tape.add(mmd, weighted_ce)
}

/// Adversarial teacher UDA loss: source cross-entropy plus `alpha_dc` times
/// the reversed-gradient domain-confusion loss.
pub fn teacher_uda_revgrad(
    tape: &mut Tape,
    teacher: (&NetworkState, &NetworkSpec),
    classifier: (&NetworkState, &NetworkSpec),
    source_batch: &Tensor,
    source_labels: &[usize],
    target_batch: &Tensor,
    weights: &LossWeights,
    grl_lambda: f64,
) -> Result<Var> {
    let sb = tape.constant(source_batch.shape.clone(), source_batch.data.clone())?;
    let tb = tape.constant(target_batch.shape.clone(), target_batch.data.clone())?;
    let (src_logits, src_taps) = nets::forward(teacher.0, teacher.1, tape, sb)?;
    let (_, tgt_taps) = nets::forward(teacher.0, teacher.1, tape, tb)?;
    let feat_s = last_tap_feature(&src_taps, teacher.1)?;
    let feat_t = last_tap_feature(&tgt_taps, teacher.1)?;
    let ce = cross_entropy(tape, src_logits, source_labels)?;
    let dc = domain_confusion(tape, feat_s, feat_t, classifier, grl_lambda)?;
    let weighted_dc = tape.scalar_mul(dc, weights.alpha_dc);
    tape.add(ce, weighted_dc)
}

/// Everything the student-side distillation losses need besides the student
/// itself. The teacher is evaluated detached.
pub struct DistillContext<'a> {
    pub teacher: (&'a NetworkState, &'a NetworkSpec),
    pub mode: KdMode,
    pub convention: SoftmaxConvention,
    pub margins: Option<&'a MarginState>,
    pub regressor: Option<&'a RegressorState>,
}

impl<'a> DistillContext<'a> {
    fn distill_on_batch(
        &self,
        tape: &mut Tape,
        student: (&NetworkState, &NetworkSpec),
        batch: &Tensor,
        weights: &LossWeights,
    ) -> Result<(Var, Var)> {
        let teacher_logits =
            nets::forward_logits(self.teacher.0, self.teacher.1, batch)?;
        let bv = tape.constant(batch.shape.clone(), batch.data.clone())?;
        let (student_logits, student_taps) = nets::forward(student.0, student.1, tape, bv)?;
        let loss = match self.mode {
            KdMode::Logits => logits_distill(
                tape,
                student_logits,
                &teacher_logits,
                weights.tau,
                self.convention,
            )?,
            KdMode::Feature => {
                let margins = self.margins.ok_or_else(|| {
                    Error::Config("feature distillation requires margin state".into())
                })?;
                let regressor = self.regressor.ok_or_else(|| {
                    Error::Config("feature distillation requires a regressor".into())
                })?;
                let teacher_feats =
                    teacher_tap_features(self.teacher.0, self.teacher.1, batch)?;
                let student_feat = last_tap_feature(&student_taps, student.1)?;
                feature_distill(tape, &teacher_feats, student_feat, margins, regressor)?
            }
        };
        Ok((loss, student_logits))
    }
}

/// Teacher features at the last tap, evaluated without gradient recording.
pub fn teacher_tap_features(
    state: &NetworkState,
    spec: &NetworkSpec,
    batch: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bv = tape.constant(batch.shape.clone(), batch.data.clone())?;
    let mut detached = state.clone();
    for (w, b) in &mut detached.layers {
        w.requires_grad = false;
        b.requires_grad = false;
    }
    let (_, taps) = nets::forward(&detached, spec, &mut tape, bv)?;
    let feat = last_tap_feature(&taps, spec)?;
    Ok(tape.tensor(feat))
}

/// Target distillation `L_TKD`: the selected distillation loss on the
/// unlabeled target batch.
pub fn target_kd(
    tape: &mut Tape,
    ctx: &DistillContext<'_>,
    student: (&NetworkState, &NetworkSpec),
    target_batch: &Tensor,
    weights: &LossWeights,
) -> Result<Var> {
    let (loss, _) = ctx.distill_on_batch(tape, student, target_batch, weights)?;
    Ok(loss)
}

/// Source-consistency distillation `L_SKD`: distillation on the source batch
/// plus `alpha_ce` times the student's supervised source cross-entropy.
pub fn source_kd(
    tape: &mut Tape,
    ctx: &DistillContext<'_>,
    student: (&NetworkState, &NetworkSpec),
    source_batch: &Tensor,
    source_labels: &[usize],
    weights: &LossWeights,
) -> Result<Var> {
    let (distill, student_logits) =
        ctx.distill_on_batch(tape, student, source_batch, weights)?;
    let ce = cross_entropy(tape, student_logits, source_labels)?;
    let weighted_ce = tape.scalar_mul(ce, weights.alpha_ce);
    tape.add(distill, weighted_ce)
}

/// The pair of objectives actually optimized per batch step:
/// `(1 - beta) * L_TDA` for the teacher, `beta * (L_TKD + L_SKD)` for the
/// student.
pub fn total_stda_loss(beta: f64, l_tda: f64, l_tkd: f64, l_skd: f64) -> (f64, f64) {
    ((1.0 - beta) * l_tda, beta * (l_tkd + l_skd))
}

/// Per-teacher variant for the multi-target setting; identical arithmetic
/// with teacher `i`'s DA loss and its two distillation terms.
pub fn total_mtda_loss(beta: f64, l_tda_i: f64, l_tkd_i: f64, l_skd_i: f64) -> (f64, f64) {
    total_stda_loss(beta, l_tda_i, l_tkd_i, l_skd_i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_network;

    fn tensor2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn mmd_identical_batches_vanishes() {
        let cfg = KernelConfig::default();
        let data = vec![0.2, -0.5, 1.1, 0.7, -0.9, 0.3];
        let mut tape = Tape::new();
        let a = tape.constant(vec![3, 2], data.clone()).unwrap();
        let b = tape.constant(vec![3, 2], data).unwrap();
        let m = mmd_gaussian(&mut tape, a, b, &cfg).unwrap();
        assert!(tape.data(m)[0].abs() < 1e-12);
    }

    #[test]
    fn mmd_two_point_fixed_bandwidth() {
        let cfg = KernelConfig {
            bandwidths: Bandwidths::Fixed(vec![0.5]),
        };
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        let b = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let m = mmd_gaussian(&mut tape, a, b, &cfg).unwrap();
        assert!((tape.data(m)[0] - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_uniform_and_range_check() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[0, 1]).unwrap();
        assert!((tape.data(ce)[0] - 2.0f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&mut tape, logits, &[0, 2]).is_err());
    }

    #[test]
    fn logits_distill_identical_is_zero() {
        let logits = tensor2(3, 4, vec![0.3, -0.1, 0.8, 0.0, 1.0, 2.0, -1.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let sl = tape
            .constant(logits.shape.clone(), logits.data.clone())
            .unwrap();
        for conv in [SoftmaxConvention::StandardDivide, SoftmaxConvention::PaperMultiply] {
            let l = logits_distill(&mut tape, sl, &logits, 3.0, conv).unwrap();
            assert!(tape.data(l)[0].abs() < 1e-12);
        }
    }

    #[test]
    fn logits_distill_hand_fixture() {
        // teacher [ln 2, 0], student [0, 0], tau=1 divide:
        // KL([2/3,1/3] || [1/2,1/2]) = (2/3)ln(4/3) + (1/3)ln(2/3)
        let teacher = tensor2(1, 2, vec![2.0f64.ln(), 0.0]);
        let mut tape = Tape::new();
        let sl = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let l = logits_distill(
            &mut tape,
            sl,
            &teacher,
            1.0,
            SoftmaxConvention::StandardDivide,
        )
        .unwrap();
        let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((tape.data(l)[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn logits_distill_nonnegative_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let t: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let teacher = tensor2(2, 3, t);
            let mut tape = Tape::new();
            let sl = tape.constant(vec![2, 3], s).unwrap();
            let l = logits_distill(
                &mut tape,
                sl,
                &teacher,
                2.0,
                SoftmaxConvention::StandardDivide,
            )
            .unwrap();
            assert!(tape.data(l)[0] >= -1e-12);
        }
    }

    #[test]
    fn domain_confusion_uniform_classifier_gives_ln2() {
        let spec = NetworkSpec::mlp(3, &[4], 2);
        let mut state = init_network(&spec, 0).unwrap();
        // zero weights everywhere -> uniform logits
        for (w, b) in &mut state.layers {
            w.data.iter_mut().for_each(|v| *v = 0.0);
            b.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let fs = tape.constant(vec![2, 3], vec![0.5; 6]).unwrap();
        let ft = tape.constant(vec![2, 3], vec![-0.5; 6]).unwrap();
        let l = domain_confusion(&mut tape, fs, ft, (&state, &spec), 1.0).unwrap();
        assert!((tape.data(l)[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn margins_conditional_mean_fixture() {
        // one channel, values [-1, 2, -3, 4] -> mean of negatives = -2
        let mut m = MarginState::new(1, MarginMode::CountWeighted);
        let feats = tensor2(4, 1, vec![-1.0, 2.0, -3.0, 4.0]);
        m.update(&feats).unwrap();
        assert_eq!(m.margins(), &[-2.0]);

        // all-positive channel keeps margin 0
        let mut m = MarginState::new(1, MarginMode::CountWeighted);
        m.update(&tensor2(2, 1, vec![1.0, 2.0])).unwrap();
        assert_eq!(m.margins(), &[0.0]);
    }

    #[test]
    fn margins_sequential_equals_concatenated() {
        let a = tensor2(3, 2, vec![-1.0, 0.5, -2.0, -0.3, 4.0, -0.9]);
        let b = tensor2(2, 2, vec![-5.0, 1.0, 0.2, -0.1]);
        let mut seq = MarginState::new(2, MarginMode::CountWeighted);
        seq.update(&a).unwrap();
        seq.update(&b).unwrap();
        let mut cat = MarginState::new(2, MarginMode::CountWeighted);
        let mut joined = a.data.clone();
        joined.extend_from_slice(&b.data);
        cat.update(&tensor2(5, 2, joined)).unwrap();
        for (x, y) in seq.margins().iter().zip(cat.margins()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(seq.margins().iter().all(|&m| m <= 0.0));
    }

    #[test]
    fn feature_distill_margin_masking() {
        // identity regressor, teacher [-1], student [-2], margin -0.5:
        // rectified teacher = -0.5, and -2 <= -0.5 <= 0 so loss is 0
        let mut margins = MarginState::new(1, MarginMode::CountWeighted);
        margins.update(&tensor2(1, 1, vec![-0.5])).unwrap();
        let mut reg = RegressorState::init(1, 1, 0);
        reg.weight.data = vec![1.0];
        reg.bias.data = vec![0.0];
        let teacher_feats = tensor2(1, 1, vec![-1.0]);
        let mut tape = Tape::new();
        let sf = tape.constant(vec![1, 1], vec![-2.0]).unwrap();
        let l = feature_distill(&mut tape, &teacher_feats, sf, &margins, &reg).unwrap();
        assert_eq!(tape.data(l)[0], 0.0);
    }

    #[test]
    fn teacher_uda_mmd_compositional() {
        // gamma=0 and identical source/target -> 0
        let spec = NetworkSpec::mlp(2, &[5], 2);
        let state = init_network(&spec, 3).unwrap();
        let batch = tensor2(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let mut w = LossWeights::default();
        w.gamma = 0.0;
        let kernel = KernelConfig::default();
        let mut tape = Tape::new();
        let l = teacher_uda_mmd(
            &mut tape,
            (&state, &spec),
            &batch,
            &[0, 1, 0],
            &batch,
            &w,
            &kernel,
        )
        .unwrap();
        assert!(tape.data(l)[0].abs() < 1e-12);

        // random instance equals separately computed MMD + gamma * CE
        let target = tensor2(2, 2, vec![1.0, -0.5, 0.3, 0.9]);
        w.gamma = 0.7;
        let mut tape = Tape::new();
        let combined = teacher_uda_mmd(
            &mut tape,
            (&state, &spec),
            &batch,
            &[0, 1, 0],
            &target,
            &w,
            &kernel,
        )
        .unwrap();
        let combined = tape.data(combined)[0];

        let feat_s = teacher_tap_features(&state, &spec, &batch).unwrap();
        let feat_t = teacher_tap_features(&state, &spec, &target).unwrap();
        let mut tape = Tape::new();
        let fs = tape.constant(feat_s.shape.clone(), feat_s.data).unwrap();
        let ft = tape.constant(feat_t.shape.clone(), feat_t.data).unwrap();
        let mmd = mmd_gaussian(&mut tape, fs, ft, &kernel).unwrap();
        let logits = nets::forward_logits(&state, &spec, &batch).unwrap();
        let lv = tape.constant(logits.shape.clone(), logits.data).unwrap();
        let ce = cross_entropy(&mut tape, lv, &[0, 1, 0]).unwrap();
        let expected = tape.data(mmd)[0] + 0.7 * tape.data(ce)[0];
        assert!((combined - expected).abs() < 1e-12);
    }

    #[test]
    fn teacher_uda_revgrad_compositional() {
        let spec = NetworkSpec::mlp(2, &[4], 2);
        let state = init_network(&spec, 1).unwrap();
        let dc_spec = DomainClassifierSpecHelper(4);
        let (clf_state, clf_net) = dc_spec.build(2);
        let src = tensor2(2, 2, vec![0.5, -0.1, 0.2, 0.8]);
        let tgt = tensor2(2, 2, vec![-0.4, 0.3, 0.7, -0.9]);
        let mut w = LossWeights::default();

        // alpha_dc = 0 reduces to plain source CE
        w.alpha_dc = 0.0;
        let mut tape = Tape::new();
        let l = teacher_uda_revgrad(
            &mut tape,
            (&state, &spec),
            (&clf_state, &clf_net),
            &src,
            &[0, 1],
            &tgt,
            &w,
            1.0,
        )
        .unwrap();
        let got = tape.data(l)[0];
        let logits = nets::forward_logits(&state, &spec, &src).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(logits.shape.clone(), logits.data).unwrap();
        let ce = cross_entropy(&mut tape, lv, &[0, 1]).unwrap();
        assert!((got - tape.data(ce)[0]).abs() < 1e-12);
    }

    struct DomainClassifierSpecHelper(usize);

    impl DomainClassifierSpecHelper {
        fn build(&self, seed: u64) -> (NetworkState, NetworkSpec) {
            let spec = NetworkSpec::mlp(self.0, &[6], 2);
            let state = init_network(&spec, seed).unwrap();
            (state, spec)
        }
    }

    #[test]
    fn target_kd_matches_direct_logits_distill() {
        let tspec = NetworkSpec::mlp(2, &[6], 2);
        let sspec = NetworkSpec::mlp(2, &[3], 2);
        let teacher = init_network(&tspec, 10).unwrap();
        let student = init_network(&sspec, 20).unwrap();
        let batch = tensor2(3, 2, vec![0.1, -0.2, 0.4, 0.6, -0.5, 0.3]);
        let w = LossWeights::default();
        let ctx = DistillContext {
            teacher: (&teacher, &tspec),
            mode: KdMode::Logits,
            convention: SoftmaxConvention::StandardDivide,
            margins: None,
            regressor: None,
        };
        let mut tape = Tape::new();
        let got = target_kd(&mut tape, &ctx, (&student, &sspec), &batch, &w).unwrap();
        let got = tape.data(got)[0];

        let t_logits = nets::forward_logits(&teacher, &tspec, &batch).unwrap();
        let s_logits = nets::forward_logits(&student, &sspec, &batch).unwrap();
        let mut tape = Tape::new();
        let sv = tape
            .constant(s_logits.shape.clone(), s_logits.data)
            .unwrap();
        let direct = logits_distill(
            &mut tape,
            sv,
            &t_logits,
            w.tau,
            SoftmaxConvention::StandardDivide,
        )
        .unwrap();
        assert!((got - tape.data(direct)[0]).abs() < 1e-12);
    }

    #[test]
    fn identical_networks_give_zero_target_kd() {
        let spec = NetworkSpec::mlp(2, &[5], 3);
        let net = init_network(&spec, 4).unwrap();
        let batch = tensor2(2, 2, vec![0.3, 0.1, -0.7, 0.9]);
        let w = LossWeights::default();
        let ctx = DistillContext {
            teacher: (&net, &spec),
            mode: KdMode::Logits,
            convention: SoftmaxConvention::StandardDivide,
            margins: None,
            regressor: None,
        };
        let mut tape = Tape::new();
        let l = target_kd(&mut tape, &ctx, (&net, &spec), &batch, &w).unwrap();
        assert!(tape.data(l)[0].abs() < 1e-12);
    }

    #[test]
    fn source_kd_is_sum_of_parts() {
        let tspec = NetworkSpec::mlp(2, &[6], 2);
        let sspec = NetworkSpec::mlp(2, &[3], 2);
        let teacher = init_network(&tspec, 30).unwrap();
        let student = init_network(&sspec, 40).unwrap();
        let batch = tensor2(2, 2, vec![0.2, -0.4, 0.8, 0.1]);
        let labels = [1usize, 0];
        let mut w = LossWeights::default();
        w.alpha_ce = 0.9;
        let ctx = DistillContext {
            teacher: (&teacher, &tspec),
            mode: KdMode::Logits,
            convention: SoftmaxConvention::StandardDivide,
            margins: None,
            regressor: None,
        };
        let mut tape = Tape::new();
        let combined = source_kd(&mut tape, &ctx, (&student, &sspec), &batch, &labels, &w).unwrap();
        let combined = tape.data(combined)[0];

        let mut tape = Tape::new();
        let distill = target_kd(&mut tape, &ctx, (&student, &sspec), &batch, &w).unwrap();
        let distill = tape.data(distill)[0];
        let s_logits = nets::forward_logits(&student, &sspec, &batch).unwrap();
        let mut tape = Tape::new();
        let sv = tape
            .constant(s_logits.shape.clone(), s_logits.data)
            .unwrap();
        let ce = cross_entropy(&mut tape, sv, &labels).unwrap();
        let expected = distill + 0.9 * tape.data(ce)[0];
        assert!((combined - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_endpoints_and_arithmetic() {
        assert_eq!(total_stda_loss(0.0, 2.0, 1.0, 3.0), (2.0, 0.0));
        assert_eq!(total_stda_loss(1.0, 2.0, 1.0, 3.0), (0.0, 4.0));
        assert_eq!(total_stda_loss(0.25, 2.0, 1.0, 3.0), (1.5, 1.0));
        assert_eq!(total_mtda_loss(0.25, 2.0, 1.0, 3.0), (1.5, 1.0));
    }
}
