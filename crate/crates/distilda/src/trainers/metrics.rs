//! Per-epoch measurements keyed by model and domain, plus CSV/JSON export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation record: accuracy (when the domain is labeled) and any loss
/// components accumulated over the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub model: String,
    pub domain: String,
    pub accuracy: Option<f64>,
    pub losses: BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("accuracy {a} out of [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Flatten records to CSV rows `run,epoch,model,domain,metric,value`.
pub fn metrics_to_csv(run: &str, records: &[MetricRecord]) -> String {
    let mut out = String::from("run,epoch,model,domain,metric,value\n");
    for r in records {
        if let Some(a) = r.accuracy {
            let _ = writeln!(
                out,
                "{run},{},{},{},accuracy,{}",
                r.epoch, r.model, r.domain, a
            );
        }
        for (k, v) in &r.losses {
            let _ = writeln!(out, "{run},{},{},{},{k},{v}", r.epoch, r.model, r.domain);
        }
    }
    out
}

/// Final per-(model, domain) accuracies, taken from the last epoch that
/// reported each pair.
pub fn final_accuracies(records: &[MetricRecord]) -> BTreeMap<(String, String), f64> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(a) = r.accuracy {
            out.insert((r.model.clone(), r.domain.clone()), a);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rec = MetricRecord {
            epoch: 3,
            model: "student".into(),
            domain: "target".into(),
            accuracy: Some(0.75),
            losses: BTreeMap::from([("tkd".to_string(), 0.5)]),
        };
        let csv = metrics_to_csv("r1", &[rec]);
        assert_eq!(
            csv,
            "run,epoch,model,domain,metric,value\nr1,3,student,target,accuracy,0.75\nr1,3,student,target,tkd,0.5\n"
        );
    }

    #[test]
    fn final_accuracy_picks_last() {
        let mk = |epoch, acc| MetricRecord {
            epoch,
            model: "student".into(),
            domain: "t".into(),
            accuracy: Some(acc),
            losses: BTreeMap::new(),
        };
        let out = final_accuracies(&[mk(0, 0.4), mk(1, 0.9)]);
        assert_eq!(out[&("student".to_string(), "t".to_string())], 0.9);
    }
}
