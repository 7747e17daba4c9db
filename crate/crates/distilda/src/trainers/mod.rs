//! Optimizers and training procedures: joint KD-STDA and KD-MTDA, plus the
//! sequential baseline orderings used for comparison.

mod baselines;
mod joint;
mod metrics;
mod sgd;

pub use baselines::{train_baseline, BaselineOrdering, BaselineOutput};
pub use joint::{train_mtda, train_stda, JointOutput};
pub use metrics::{final_accuracies, metrics_to_csv, MetricRecord};
pub use sgd::{sgd_step, Sgd, SgdConfig};

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::losses::{KdMode, KernelConfig, LossWeights, MarginMode};
use crate::nets::{forward_logits, NetworkSpec, NetworkState};
use crate::schedule::BetaUpdate;
use crate::tensor::SoftmaxConvention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UdaMethod {
    #[default]
    Mmd,
    Revgrad,
}

/// All hyper-parameters of one training run. One optimizer config drives the
/// per-teacher UDA updates, another the student's distillation updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_update: BetaUpdate,
    pub uda_method: UdaMethod,
    pub kd_mode: KdMode,
    pub softmax_convention: SoftmaxConvention,
    pub uda_optimizer: SgdConfig,
    pub kd_optimizer: SgdConfig,
    pub kernel: KernelConfig,
    pub margin_mode: MarginMode,
    pub grl_lambda: f64,
    /// Hidden sizes of the per-teacher domain classifier head.
    pub domain_classifier_hidden: Vec<usize>,
    pub seed: u64,
    pub eval_every: usize,
    /// Held-out fraction per domain for evaluation.
    pub eval_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            weights: LossWeights::default(),
            beta_start: 0.1,
            beta_end: 0.8,
            beta_update: BetaUpdate::PerEpoch,
            uda_method: UdaMethod::Mmd,
            kd_mode: KdMode::Logits,
            softmax_convention: SoftmaxConvention::StandardDivide,
            uda_optimizer: SgdConfig::default(),
            kd_optimizer: SgdConfig::default(),
            kernel: KernelConfig::default(),
            margin_mode: MarginMode::CountWeighted,
            grl_lambda: 1.0,
            domain_classifier_hidden: vec![16, 16],
            seed: 0,
            eval_every: 1,
            eval_frac: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.weights.validate()?;
        if self.epochs > 0 {
            crate::schedule::BetaSchedule::new(self.beta_start, self.beta_end, self.epochs)?;
        }
        self.uda_optimizer.validate()?;
        self.kd_optimizer.validate()?;
        self.kernel.validate()?;
        if self.grl_lambda < 0.0 {
            return Err(Error::Config("grl_lambda must be nonnegative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(0.0 < self.eval_frac && self.eval_frac < 1.0) {
            return Err(Error::Config("eval_frac must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Fixed seed streams so that every random draw in a run is a pure function
/// of the run seed and its role.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    base ^ stream
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
}

pub(crate) mod streams {
    pub const SPLIT: u64 = 1;
    pub const TEACHER_INIT: u64 = 100; // + teacher index
    pub const STUDENT_INIT: u64 = 200;
    pub const DC_INIT: u64 = 300; // + teacher index
    pub const REGRESSOR_INIT: u64 = 400; // + teacher index
    pub const BATCHES: u64 = 500;
}

/// Argmax accuracy of a network on a labeled dataset.
pub fn evaluate(state: &NetworkState, spec: &NetworkSpec, dataset: &DomainDataset) -> Result<f64> {
    let labels = dataset
        .eval_labels()
        .ok_or_else(|| Error::Data(format!("domain {} has no labels to evaluate", dataset.domain_id)))?;
    let logits = forward_logits(state, spec, dataset.features())?;
    let k = spec.class_count;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data[i * k..(i + 1) * k];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::nets::init_network;
    use crate::tensor::Tensor;

    #[test]
    fn evaluate_counts_argmax_matches_hand_tally() {
        // 1-layer net that copies feature 0 and 1 into the two logits
        let spec = NetworkSpec {
            layers: vec![crate::nets::LayerSpec {
                in_dim: 2,
                out_dim: 2,
                activation: crate::nets::Activation::None,
            }],
            tap_layers: vec![],
            class_count: 2,
        };
        let mut state = init_network(&spec, 0).unwrap();
        state.layers[0].0.data = vec![1.0, 0.0, 0.0, 1.0];
        state.layers[0].1.data = vec![0.0, 0.0];
        // 10 points: logit argmax vs label, 7 correct by construction
        let feats = vec![
            1.0, 0.0, 0.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 0.0, // rows 0-4
            0.0, 3.0, 5.0, 1.0, 1.0, 5.0, 2.0, 0.0, 0.0, 2.0, // rows 5-9
        ];
        let labels = vec![0, 1, 0, 1, 0, 1, 1, 1, 0, 0];
        // hand tally: rows where argmax==label: 0,1,2,3,4,5,7,9 -> but rows
        // 6 (argmax 0, label 1) and 8 (argmax 0, label 0 -> correct)...
        // direct count below keeps the fixture honest
        let mut expected = 0;
        for i in 0..10 {
            let pred = if feats[i * 2] >= feats[i * 2 + 1] { 0 } else { 1 };
            if pred == labels[i] {
                expected += 1;
            }
        }
        let ds = DomainDataset::new(
            Tensor::new(vec![10, 2], feats).unwrap(),
            Some(labels),
            "d",
            "fixture",
        )
        .unwrap();
        let acc = evaluate(&state, &spec, &ds).unwrap();
        assert!((acc - expected as f64 / 10.0).abs() < 1e-15);
    }

    #[test]
    fn constant_logits_on_balanced_data_give_half() {
        let spec = NetworkSpec::mlp(2, &[], 2);
        let mut state = init_network(&spec, 0).unwrap();
        state.layers[0].0.data.iter_mut().for_each(|v| *v = 0.0);
        let ds = gen_blobs(100, &[vec![0.0, 0.0], vec![1.0, 1.0]], 0.1, 3, "d").unwrap();
        let acc = evaluate(&state, &spec, &ds).unwrap();
        // ties resolve to class 0, data is balanced
        assert!((acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_unlabeled() {
        let spec = NetworkSpec::mlp(2, &[], 2);
        let state = init_network(&spec, 0).unwrap();
        let ds = gen_blobs(10, &[vec![0.0, 0.0]], 0.1, 3, "d")
            .unwrap()
            .without_labels();
        assert!(evaluate(&state, &spec, &ds).is_err());
    }

    #[test]
    fn config_validation_names_first_violation() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.beta_start = 0.9;
        cfg.beta_end = 0.1;
        assert!(cfg.validate().is_err());
    }
}
