//! Selection metrics and evaluation reports.
//!
//! Token-level precision/recall/F1 are micro-averaged over all tokens
//! as the primary contract; macro averages over examples are reported
//! alongside. The bias-selection rate is the fraction of examples whose
//! predicted rationale touches any designated bias position. The
//! invariance gap is the difference of the two predictor losses
//! measured on held-out data using the hidden environment ids.

mod report;

pub use report::render_report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Corpus, Example, Split};
use crate::game::{self, Batch, GameConfig, GameError, GameModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask alignment: {what}")]
    Misaligned { what: String },
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization: {0}")]
    Serialize(String),
}

/// Micro- and macro-averaged token selection scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    /// Micro average (token-level counts pooled over all examples);
    /// the primary figures.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Macro average (per-example scores averaged).
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Number of examples with an empty predicted selection (their
    /// precision counts as 0).
    pub empty_predictions: usize,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Token-level precision/recall/F1 of predicted masks against ground
/// truth. Micro counts pool every token; empty predictions score zero
/// precision and are flagged.
pub fn score_selection(
    predicted: &[Vec<bool>],
    truth: &[Vec<bool>],
) -> Result<SelectionScore, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Misaligned {
            what: format!("{} predictions for {} truths", predicted.len(), truth.len()),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::Misaligned {
            what: "no examples to score".into(),
        });
    }
    let mut overlap = 0usize;
    let mut n_pred = 0usize;
    let mut n_truth = 0usize;
    let mut macro_p = 0.0;
    let mut macro_r = 0.0;
    let mut macro_f1 = 0.0;
    let mut empty = 0usize;
    for (i, (pred, gold)) in predicted.iter().zip(truth).enumerate() {
        if pred.len() != gold.len() {
            return Err(EvalError::Misaligned {
                what: format!(
                    "example {i}: prediction length {} vs truth {}",
                    pred.len(),
                    gold.len()
                ),
            });
        }
        let o = pred.iter().zip(gold).filter(|(p, g)| **p && **g).count();
        let np = pred.iter().filter(|p| **p).count();
        let ng = gold.iter().filter(|g| **g).count();
        overlap += o;
        n_pred += np;
        n_truth += ng;
        if np == 0 {
            empty += 1;
        }
        let p = if np > 0 { o as f64 / np as f64 } else { 0.0 };
        let r = if ng > 0 { o as f64 / ng as f64 } else { 0.0 };
        macro_p += p;
        macro_r += r;
        macro_f1 += f1_of(p, r);
    }
    let n = predicted.len() as f64;
    let precision = if n_pred > 0 {
        overlap as f64 / n_pred as f64
    } else {
        0.0
    };
    let recall = if n_truth > 0 {
        overlap as f64 / n_truth as f64
    } else {
        0.0
    };
    Ok(SelectionScore {
        precision,
        recall,
        f1: f1_of(precision, recall),
        macro_precision: macro_p / n,
        macro_recall: macro_r / n,
        macro_f1: macro_f1 / n,
        empty_predictions: empty,
    })
}

/// Fraction of examples whose predicted mask selects any designated
/// bias position.
pub fn bias_rate(
    predicted: &[Vec<bool>],
    corpus: &Corpus,
    examples: &[&Example],
) -> Result<f64, EvalError> {
    if predicted.len() != examples.len() {
        return Err(EvalError::Misaligned {
            what: format!(
                "{} predictions for {} examples",
                predicted.len(),
                examples.len()
            ),
        });
    }
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (pred, ex) in predicted.iter().zip(examples) {
        let bias_positions = corpus.bias_positions(ex);
        if bias_positions.iter().any(|p| pred[*p]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predicted.len() as f64)
}

/// One rendered example of the highlight report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HighlightRecord {
    pub tokens: Vec<String>,
    pub selected: Vec<bool>,
    pub truth: Vec<bool>,
    pub label: u8,
    pub predicted_label: u8,
}

/// Full evaluation of a model on one corpus split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub examples: usize,
    pub accuracy: f64,
    pub dev_accuracy: f64,
    pub selection: SelectionScore,
    /// Fraction of examples with any bias position selected; absent for
    /// corpora without a designated bias channel.
    pub bias_highlighted: Option<f64>,
    /// `L_i - L_e` on the evaluated split, measured with the hidden
    /// environment ids; absent when the split carries none.
    pub invariance_gap: Option<f64>,
    pub highlights: Vec<HighlightRecord>,
}

/// Maximum per-example highlight records embedded in a report.
const MAX_HIGHLIGHTS: usize = 40;

/// Evaluates a trained model on `split`, producing metrics and
/// per-example highlight records. Deterministic for fixed inputs.
pub fn build_report(
    model: &GameModel,
    corpus: &Corpus,
    split: Split,
    config: &GameConfig,
) -> Result<EvalReport, EvalError> {
    let rows: Vec<&Example> = corpus.split_examples(split).collect();
    let dev_rows: Vec<&Example> = corpus.split_examples(Split::Val).collect();
    if rows.is_empty() {
        return Ok(EvalReport {
            split: split.to_string(),
            examples: 0,
            accuracy: f64::NAN,
            dev_accuracy: f64::NAN,
            selection: SelectionScore {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                macro_precision: 0.0,
                macro_recall: 0.0,
                macro_f1: 0.0,
                empty_predictions: 0,
            },
            bias_highlighted: None,
            invariance_gap: None,
            highlights: Vec::new(),
        });
    }

    let mut predicted_masks: Vec<Vec<bool>> = Vec::with_capacity(rows.len());
    let mut predicted_labels: Vec<u8> = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(256) {
        let batch = Batch::from_examples(chunk, false);
        let pred = game::predict(model, &batch, config)?;
        predicted_masks.extend(pred.masks);
        predicted_labels.extend(pred.labels);
    }
    let correct = predicted_labels
        .iter()
        .zip(&rows)
        .filter(|(p, ex)| **p == ex.label)
        .count();
    let accuracy = correct as f64 / rows.len() as f64;
    let dev_accuracy = if dev_rows.is_empty() {
        f64::NAN
    } else {
        game::accuracy(model, &dev_rows, config)?
    };

    let truth: Vec<Vec<bool>> = rows.iter().map(|ex| ex.truth_mask.clone()).collect();
    let selection = score_selection(&predicted_masks, &truth)?;

    let bias_highlighted = if corpus.bias_token_ids.is_empty() {
        None
    } else {
        Some(bias_rate(&predicted_masks, corpus, &rows)?)
    };

    let invariance_gap = if rows.iter().all(|ex| ex.env_for_eval().is_some()) {
        let (li, le) = game::evaluate_losses(model, &rows, config)?;
        Some(li - le)
    } else {
        None
    };

    let highlights = rows
        .iter()
        .take(MAX_HIGHLIGHTS)
        .enumerate()
        .map(|(i, ex)| HighlightRecord {
            tokens: ex
                .tokens
                .iter()
                .map(|t| corpus.vocab[*t as usize].clone())
                .collect(),
            selected: predicted_masks[i].clone(),
            truth: ex.truth_mask.clone(),
            label: ex.label,
            predicted_label: predicted_labels[i],
        })
        .collect();

    Ok(EvalReport {
        split: split.to_string(),
        examples: rows.len(),
        accuracy,
        dev_accuracy,
        selection,
        bias_highlighted,
        invariance_gap,
        highlights,
    })
}

/// The report's metrics as a structured-text (TOML) dump for scripting;
/// highlight records are omitted.
pub fn report_to_toml(report: &EvalReport) -> Result<String, EvalError> {
    #[derive(Serialize)]
    struct Metrics<'a> {
        split: &'a str,
        examples: usize,
        accuracy: f64,
        dev_accuracy: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        bias_highlighted: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        invariance_gap: Option<f64>,
        selection: &'a SelectionScore,
    }
    toml::to_string(&Metrics {
        split: &report.split,
        examples: report.examples,
        accuracy: report.accuracy,
        dev_accuracy: report.dev_accuracy,
        bias_highlighted: report.bias_highlighted,
        invariance_gap: report.invariance_gap,
        selection: &report.selection,
    })
    .map_err(|e| EvalError::Serialize(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masks(spec: &[&[usize]], n: usize) -> Vec<Vec<bool>> {
        spec.iter()
            .map(|on| {
                let mut m = vec![false; n];
                for i in *on {
                    m[*i] = true;
                }
                m
            })
            .collect()
    }

    #[test]
    fn perfect_selection_scores_one() {
        let pred = masks(&[&[1, 2], &[0]], 4);
        let s = score_selection(&pred, &pred.clone()).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert_eq!((s.macro_precision, s.macro_recall, s.macro_f1), (1.0, 1.0, 1.0));
        assert_eq!(s.empty_predictions, 0);
    }

    #[test]
    fn disjoint_selection_scores_zero() {
        let pred = masks(&[&[0, 1]], 4);
        let truth = masks(&[&[2, 3]], 4);
        let s = score_selection(&pred, &truth).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn partial_overlap_matches_hand_arithmetic() {
        // 10 predicted, 20 true, 5 overlap: P=0.5, R=0.25, F1=1/3.
        let pred = masks(&[&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]], 30);
        let truth = masks(&[&(5..25).collect::<Vec<_>>()], 30);
        let s = score_selection(&pred, &truth).unwrap();
        assert!((s.precision - 0.5).abs() < 1e-12);
        assert!((s.recall - 0.25).abs() < 1e-12);
        assert!((s.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_is_flagged_and_scores_zero_precision() {
        let pred = masks(&[&[]], 4);
        let truth = masks(&[&[1]], 4);
        let s = score_selection(&pred, &truth).unwrap();
        assert_eq!(s.empty_predictions, 1);
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn micro_metrics_match_brute_force_confusion_matrix() {
        // Random masks checked against a direct per-token count.
        use rand::Rng;
        let mut rng = crate::tape::rng_for(8, &["eval-prop"]);
        for _ in 0..50 {
            let n = 1 + rng.random_range(0..12);
            let b = 1 + rng.random_range(0..6);
            let pred: Vec<Vec<bool>> = (0..b)
                .map(|_| (0..n).map(|_| rng.random::<f64>() < 0.4).collect())
                .collect();
            let truth: Vec<Vec<bool>> = (0..b)
                .map(|_| (0..n).map(|_| rng.random::<f64>() < 0.4).collect())
                .collect();
            let s = score_selection(&pred, &truth).unwrap();
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (p_row, t_row) in pred.iter().zip(&truth) {
                for (p, t) in p_row.iter().zip(t_row) {
                    match (p, t) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
            }
            let p = if tp + fp > 0 {
                tp as f64 / (tp + fp) as f64
            } else {
                0.0
            };
            let r = if tp + fn_ > 0 {
                tp as f64 / (tp + fn_) as f64
            } else {
                0.0
            };
            assert!((s.precision - p).abs() < 1e-12);
            assert!((s.recall - r).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_rate_definition() {
        use crate::datagen::Example;
        let corpus = Corpus {
            examples: Vec::new(),
            vocab: vec![",".into(), ".".into(), "x".into()],
            n_train_envs: 2,
            bias_token_ids: vec![0, 1],
            seq_len: 3,
        };
        let make = |tokens: Vec<u32>| Example {
            tokens,
            label: 0,
            env: None,
            env_hidden: Some(0),
            truth_mask: vec![false, true, false],
            split: Split::Test,
        };
        let examples = vec![make(vec![0, 2, 2]), make(vec![1, 2, 2]), make(vec![2, 2, 2])];
        let refs: Vec<&Example> = examples.iter().collect();
        // select position 0 in the first two, nothing biasy in the third
        let pred = vec![
            vec![true, false, false],
            vec![false, true, false],
            vec![true, true, true],
        ];
        let rate = bias_rate(&pred, &corpus, &refs).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bias_rate_fraction_check() {
        // 7824 positives out of 10000 is 0.7824 by definition.
        let corpus = Corpus {
            examples: Vec::new(),
            vocab: vec![",".into(), "x".into()],
            n_train_envs: 2,
            bias_token_ids: vec![0],
            seq_len: 2,
        };
        let examples: Vec<crate::datagen::Example> = (0..10000)
            .map(|_| crate::datagen::Example {
                tokens: vec![0, 1],
                label: 0,
                env: None,
                env_hidden: Some(0),
                truth_mask: vec![false, true],
                split: Split::Test,
            })
            .collect();
        let refs: Vec<&crate::datagen::Example> = examples.iter().collect();
        let pred: Vec<Vec<bool>> = (0..10000)
            .map(|i| vec![i < 7824, false])
            .collect();
        let rate = bias_rate(&pred, &corpus, &refs).unwrap();
        assert!((rate - 0.7824).abs() < 1e-12);
    }
}
