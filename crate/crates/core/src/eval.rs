//! Evaluation: deterministic inference, confusion matrices, per-class
//! metrics, and the train-on-X / test-on-Y cross-domain matrix.
//!
//! The stochastic update mask makes inference random by nature; evaluation
//! draws masks from a fixed seed for reproducibility, optionally averaging
//! logits over several mask draws per sample.

use rayon::prelude::*;

use crate::error::Result;
use crate::model::{classify, rollout, MaskSource, NcaConfig, NcaParams};
use crate::rng::stream;
use crate::train::Sample;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub trained_on: String,
    pub tested_on: String,
    pub samples: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Builds a confusion matrix from (truth, predicted) pairs.
pub fn confusion_matrix(pairs: &[(usize, usize)], num_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for &(truth, pred) in pairs {
        m[truth][pred] += 1;
    }
    m
}

/// Derives accuracy and per-class precision/recall/F1 from a confusion
/// matrix. Accuracy is exactly trace / total.
pub fn report_from_confusion(
    confusion: Vec<Vec<u64>>,
    trained_on: &str,
    tested_on: &str,
) -> EvalReport {
    let num_classes = confusion.len();
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let row: u64 = confusion[c].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[c]).sum();
            let recall = if row > 0 { tp / row as f64 } else { 0.0 };
            let precision = if col > 0 { tp / col as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    EvalReport {
        trained_on: trained_on.to_string(),
        tested_on: tested_on.to_string(),
        samples: total as usize,
        accuracy: if total > 0 { trace as f64 / total as f64 } else { 0.0 },
        per_class,
        confusion,
    }
}

/// Predicts one sample, averaging logits over `mc` mask draws.
pub fn predict(
    sample: &Sample,
    params: &NcaParams<f32>,
    config: &NcaConfig,
    rng_seed: u64,
    mc: usize,
) -> Result<usize> {
    let mut mean_logits = vec![0.0f32; config.num_classes];
    for draw in 0..mc.max(1) {
        let mut rng = stream(rng_seed, &[draw as u64]);
        let r = rollout(&sample.image, params, config, MaskSource::Sample(&mut rng))?;
        let trace = classify(&r.features, params)?;
        for (m, z) in mean_logits.iter_mut().zip(&trace.logits) {
            *m += z / mc.max(1) as f32;
        }
    }
    Ok(crate::model::argmax(&mean_logits))
}

/// Deterministic evaluation over a sample set.
pub fn evaluate(
    samples: &[Sample],
    params: &NcaParams<f32>,
    config: &NcaConfig,
    eval_seed: u64,
    mc: usize,
    trained_on: &str,
    tested_on: &str,
) -> Result<EvalReport> {
    let pairs: Result<Vec<(usize, usize)>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let pred = predict(s, params, config, crate::rng::derive_seed(eval_seed, &[6, i as u64]), mc)?;
            Ok((s.class_id, pred))
        })
        .collect();
    Ok(report_from_confusion(confusion_matrix(&pairs?, config.num_classes), trained_on, tested_on))
}

impl EvalReport {
    /// Machine-readable line-delimited form.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("trained_on={}\n", self.trained_on));
        out.push_str(&format!("tested_on={}\n", self.tested_on));
        out.push_str(&format!("samples={}\n", self.samples));
        out.push_str(&format!("accuracy={:.6}\n", self.accuracy));
        for (c, m) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "class={c} precision={:.6} recall={:.6} f1={:.6}\n",
                m.precision, m.recall, m.f1
            ));
        }
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("confusion={}\n", cells.join(",")));
        }
        out
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "trained on {} / tested on {}: accuracy {:.4} ({} samples)\n",
            self.trained_on, self.tested_on, self.accuracy, self.samples
        ));
        out.push_str("class  precision  recall     f1\n");
        for (c, m) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "{c:>5}  {:>9.4}  {:>6.4}  {:>6.4}\n",
                m.precision, m.recall, m.f1
            ));
        }
        out
    }
}

/// One cell of the cross-domain matrix: accuracies of each checkpoint
/// evaluated on the target domain, with mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl CellStats {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len();
        let mean = accuracies.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        CellStats { accuracies, mean, std }
    }
}

#[derive(Debug, Clone)]
pub struct CrossDomainMatrix {
    pub domains: Vec<String>,
    /// `cells[trained][tested]`; `None` when inputs for the cell were missing.
    pub cells: Vec<Vec<Option<CellStats>>>,
}

impl CrossDomainMatrix {
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (ti, trained) in self.domains.iter().enumerate() {
            for (si, tested) in self.domains.iter().enumerate() {
                match &self.cells[ti][si] {
                    Some(cell) => out.push_str(&format!(
                        "trained={trained} tested={tested} mean={:.6} std={:.6} runs={}\n",
                        cell.mean,
                        cell.std,
                        cell.accuracies.len()
                    )),
                    None => out.push_str(&format!("trained={trained} tested={tested} missing\n")),
                }
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("trained \\ tested");
        for d in &self.domains {
            out.push_str(&format!("  {d:>16}"));
        }
        out.push('\n');
        for (ti, trained) in self.domains.iter().enumerate() {
            out.push_str(&format!("{trained:>16}"));
            for cell in &self.cells[ti] {
                match cell {
                    Some(c) => out.push_str(&format!("  {:>8.4}+-{:<6.4}", c.mean, c.std)),
                    None => out.push_str(&format!("  {:>16}", "missing")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every checkpoint of every source domain on every target
/// domain's samples. The diagonal uses the same code path as `evaluate`.
pub fn cross_domain(
    checkpoints: &[(String, Vec<(NcaParams<f32>, NcaConfig)>)],
    test_sets: &[(String, Vec<Sample>)],
    eval_seed: u64,
    mc: usize,
) -> Result<CrossDomainMatrix> {
    let domains: Vec<String> = checkpoints.iter().map(|(d, _)| d.clone()).collect();
    let mut cells = Vec::with_capacity(domains.len());
    for (trained, models) in checkpoints {
        let mut row = Vec::with_capacity(domains.len());
        for tested in &domains {
            let Some((_, samples)) = test_sets.iter().find(|(d, _)| d == tested) else {
                row.push(None);
                continue;
            };
            if models.is_empty() || samples.is_empty() {
                row.push(None);
                continue;
            }
            let mut accs = Vec::with_capacity(models.len());
            for (params, config) in models {
                let report =
                    evaluate(samples, params, config, eval_seed, mc, trained, tested)?;
                accs.push(report.accuracy);
            }
            row.push(Some(CellStats::from_accuracies(accs)));
        }
        cells.push(row);
    }
    Ok(CrossDomainMatrix { domains, cells })
}
