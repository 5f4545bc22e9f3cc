//! Alternating descent/ascent training, inference, and checkpointing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forward::{ForwardPass, Player};
use super::{Batch, ConstraintMode, GameConfig, GameError, GameModel};
use crate::datagen::{Corpus, Example, Split};
use crate::tape::{
    read_checkpoint, rng_for, write_checkpoint, AdamState, Array, ParamStore,
};

/// One per-step metrics record of the training trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub l_i: f64,
    pub l_e: f64,
    pub gap: f64,
    pub dev_acc: f64,
    pub sparsity: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
}

/// Upper bound on validation rows scanned for the per-step dev probe.
const DEV_PROBE_ROWS: usize = 256;

/// Trains all three players by alternating one step each of the
/// environment-agnostic predictor, the environment-aware predictor, and
/// the generator per minibatch. Deterministic under a fixed seed: batch
/// order, mask sampling, and initialization all derive from
/// `config.seed` through independent tagged streams.
pub fn train(
    model: &mut GameModel,
    corpus: &Corpus,
    config: &GameConfig,
) -> Result<TrainOutcome, GameError> {
    config.validate(corpus.seq_len)?;
    if corpus.n_train_envs < 2 {
        return Err(GameError::BadConfig {
            what: format!(
                "training needs at least two environments, corpus has {}",
                corpus.n_train_envs
            ),
        });
    }
    let train_rows: Vec<&Example> = corpus.split_examples(Split::Train).collect();
    if train_rows.is_empty() {
        return Err(GameError::BadConfig {
            what: "corpus has no training rows".into(),
        });
    }
    // Per-step dev accuracy is a probe on a bounded prefix of the
    // validation split; full-split metrics belong to evaluation.
    let dev_rows: Vec<&Example> = corpus
        .split_examples(Split::Val)
        .take(DEV_PROBE_ROWS)
        .collect();

    let mut adam_gen = AdamState::new(
        &model.generator,
        config.learning_rate * config.generator_lr_scale,
    );
    let mut adam_fi = AdamState::new(&model.f_i, config.learning_rate);
    let mut adam_fe = AdamState::new(&model.f_e, config.learning_rate);

    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let mut cursor = train_rows.len(); // force a shuffle at step 0
    let mut epoch = 0u64;

    let mut trace = Vec::with_capacity(config.steps);
    let mut last_li = f64::NAN;
    let mut last_le = f64::NAN;

    for step in 0..config.steps as u64 {
        // Epoch-shuffled sequential batches.
        let bs = config.batch_size.min(train_rows.len());
        if cursor + bs > train_rows.len() {
            shuffle(&mut order, config.seed, epoch);
            epoch += 1;
            cursor = 0;
        }
        let batch_rows: Vec<&Example> = order[cursor..cursor + bs]
            .iter()
            .map(|i| train_rows[*i])
            .collect();
        cursor += bs;
        let batch = Batch::from_examples(&batch_rows, true);
        let step_tag = step.to_string();

        // Phase 1: environment-agnostic predictor descends L_i.
        let li_val = {
            let mut fp = ForwardPass::new(model);
            let mut rng = rng_for(config.seed, &["mask", &step_tag, "fi"]);
            let mask = fp.generate_mask(&batch, config, &mut rng)?;
            let li = fp.fi_loss(&batch, mask.node)?;
            let v = fp.tape.value(li).item();
            fp.tape.backward(li)?;
            let grads = fp.grads_for(Player::EnvAgnostic);
            debug_assert_eq!(
                (model.generator.checksum(), model.f_e.checksum()),
                (model.generator.checksum(), model.f_e.checksum())
            );
            adam_fi.step(&mut model.f_i, &grads)?;
            v
        };

        // Phase 2: environment-aware predictor descends L_e (the max
        // player of the minimax, updated by ascending its negation).
        let le_val = {
            let mut fp = ForwardPass::new(model);
            let mut rng = rng_for(config.seed, &["mask", &step_tag, "fe"]);
            let mask = fp.generate_mask(&batch, config, &mut rng)?;
            let le = fp.fe_loss(&batch, mask.node)?;
            let v = fp.tape.value(le).item();
            fp.tape.backward(le)?;
            let grads = fp.grads_for(Player::EnvAware);
            adam_fe.step(&mut model.f_e, &grads)?;
            v
        };

        if !li_val.is_finite() || !le_val.is_finite() {
            return Err(GameError::Diverged {
                step,
                last_li,
                last_le,
            });
        }

        // Phase 3: generator descends its objective with both predictors
        // frozen. With lambda = 0 the environment-aware path is not even
        // built, so the update direction cannot depend on it.
        let (li3, le3, sparsity) = {
            let gen_before = model.generator.checksum();
            let fi_before = model.f_i.checksum();
            let fe_before = model.f_e.checksum();

            let mut fp = ForwardPass::new(model);
            let mut rng = rng_for(config.seed, &["mask", &step_tag, "gen"]);
            let mask = fp.generate_mask(&batch, config, &mut rng)?;
            let li = fp.fi_loss(&batch, mask.node)?;
            let le = if config.lambda_inv > 0.0 {
                Some(fp.fe_loss(&batch, mask.node)?)
            } else {
                None
            };
            let obj = fp.generator_objective(li, le, mask.node, config)?;
            let obj_val = fp.tape.value(obj).item();
            if !obj_val.is_finite() {
                return Err(GameError::Diverged {
                    step,
                    last_li,
                    last_le,
                });
            }
            fp.tape.backward(obj)?;
            let grads = fp.grads_for(Player::Generator);
            let li_v = fp.tape.value(li).item();
            let le_v = le.map_or(le_val, |n| fp.tape.value(n).item());
            let sp = mask.mean_sparsity;
            drop(fp);

            // Alternation safety: the generator phase must not have
            // touched the predictors, nor earlier phases the generator.
            debug_assert_eq!(model.generator.checksum(), gen_before);
            debug_assert_eq!(model.f_i.checksum(), fi_before);
            debug_assert_eq!(model.f_e.checksum(), fe_before);

            adam_gen.step(&mut model.generator, &grads)?;
            (li_v, le_v, sp)
        };

        last_li = li3;
        last_le = le3;

        let dev_acc = if dev_rows.is_empty() {
            f64::NAN
        } else {
            accuracy_on(model, &dev_rows, config)?
        };

        trace.push(TraceRecord {
            step,
            l_i: li3,
            l_e: le3,
            gap: li3 - le3,
            dev_acc,
            sparsity,
        });
    }
    Ok(TrainOutcome { trace })
}

fn shuffle(order: &mut [usize], seed: u64, epoch: u64) {
    use rand::seq::SliceRandom;
    let mut rng = rng_for(seed, &["shuffle", &epoch.to_string()]);
    order.shuffle(&mut rng);
}

/// Inference output: predicted labels and the deterministic rationale
/// masks (hard windows, or soft probabilities thresholded at 0.5).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub labels: Vec<u8>,
    pub masks: Vec<Vec<bool>>,
}

/// Environment-free inference with the environment-agnostic predictor.
pub fn predict(
    model: &GameModel,
    batch: &Batch,
    config: &GameConfig,
) -> Result<Prediction, GameError> {
    let mut fp = ForwardPass::new(model);
    let scores = fp.scores(batch)?;
    let mask = deterministic_mask(&mut fp, scores, batch, config)?;
    let mask_node = fp.tape.leaf(mask.clone());
    let probs = fp.fi_probs(batch, mask_node)?;
    let pv = fp.tape.value(probs).data();
    let labels = (0..batch.b)
        .map(|bi| u8::from(pv[bi * 2 + 1] > pv[bi * 2]))
        .collect();
    let masks = mask
        .data()
        .chunks(batch.n)
        .map(|row| row.iter().map(|v| *v == 1.0).collect())
        .collect();
    Ok(Prediction { labels, masks })
}

fn deterministic_mask(
    fp: &mut ForwardPass,
    scores: crate::tape::NodeId,
    batch: &Batch,
    config: &GameConfig,
) -> Result<Array, GameError> {
    let sv = fp.tape.value(scores).data().to_vec();
    let mut hard = vec![0.0; batch.b * batch.n];
    match config.constraint_mode {
        ConstraintMode::Hard => {
            let l = config.rationale_len.min(batch.n);
            for bi in 0..batch.b {
                let row = &sv[bi * batch.n..(bi + 1) * batch.n];
                let mut best = 0usize;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                let start = best.min(batch.n - l);
                for k in start..start + l {
                    hard[bi * batch.n + k] = 1.0;
                }
            }
        }
        ConstraintMode::Soft => {
            for (slot, s) in hard.iter_mut().zip(&sv) {
                *slot = f64::from(*s >= 0.0); // sigmoid(s) >= 0.5
            }
        }
    }
    Ok(Array::from_vec(&[batch.b, batch.n], hard)?)
}

/// Classification accuracy of [`predict`] over examples, evaluated in
/// bounded batches.
pub fn accuracy(model: &GameModel, examples: &[&Example], config: &GameConfig) -> Result<f64, GameError> {
    accuracy_on(model, examples, config)
}

fn accuracy_on(
    model: &GameModel,
    examples: &[&Example],
    config: &GameConfig,
) -> Result<f64, GameError> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(256) {
        let batch = Batch::from_examples(chunk, false);
        let pred = predict(model, &batch, config)?;
        correct += pred
            .labels
            .iter()
            .zip(chunk)
            .filter(|(p, ex)| **p == ex.label)
            .count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Expected losses of both predictors on held-out examples under the
/// regime's mask distribution (sampled soft masks use a fixed derived
/// stream, so the measurement is deterministic). Environment ids come
/// from the evaluation fallback (hidden ids on val/test rows).
pub fn evaluate_losses(
    model: &GameModel,
    examples: &[&Example],
    config: &GameConfig,
) -> Result<(f64, f64), GameError> {
    if examples.is_empty() {
        return Err(GameError::BadConfig {
            what: "evaluate_losses on an empty slice".into(),
        });
    }
    let mut li_sum = 0.0;
    let mut le_sum = 0.0;
    let mut total = 0usize;
    let mut rng = rng_for(config.seed, &["eval-mask"]);
    for chunk in examples.chunks(256) {
        let batch = Batch::from_examples(chunk, false);
        let mut fp = ForwardPass::new(model);
        let mask = fp.generate_mask(&batch, config, &mut rng)?;
        let li = fp.fi_loss(&batch, mask.node)?;
        let le = fp.fe_loss(&batch, mask.node)?;
        li_sum += fp.tape.value(li).item() * chunk.len() as f64;
        le_sum += fp.tape.value(le).item() * chunk.len() as f64;
        total += chunk.len();
    }
    Ok((li_sum / total as f64, le_sum / total as f64))
}

/// Mean per-token selection probability in soft mode (the mask's
/// expected density); in hard mode this is structurally `l / N`.
pub fn mean_selection_probability(
    model: &GameModel,
    examples: &[&Example],
    config: &GameConfig,
) -> Result<f64, GameError> {
    if examples.is_empty() {
        return Err(GameError::BadConfig {
            what: "mean_selection_probability on an empty slice".into(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(256) {
        let batch = Batch::from_examples(chunk, false);
        let mut fp = ForwardPass::new(model);
        let scores = fp.scores(&batch)?;
        match config.constraint_mode {
            ConstraintMode::Soft => {
                let probs = fp.tape.sigmoid(scores);
                sum += fp.tape.value(probs).data().iter().sum::<f64>();
                count += batch.b * batch.n;
            }
            ConstraintMode::Hard => {
                sum += (config.rationale_len as f64 / batch.n as f64) * batch.b as f64;
                count += batch.b;
            }
        }
    }
    Ok(sum / count as f64)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    vocab_size: usize,
    n_envs: usize,
    embed_dim: usize,
    hidden_dim: usize,
    config: GameConfig,
}

/// Saves the three players into one checkpoint with the configuration
/// embedded as a structured-text snapshot.
pub fn save_model(path: &Path, model: &GameModel, config: &GameConfig) -> Result<(), GameError> {
    let meta = CheckpointMeta {
        vocab_size: model.vocab_size,
        n_envs: model.n_envs,
        embed_dim: model.embed_dim,
        hidden_dim: model.hidden_dim,
        config: config.clone(),
    };
    let meta_text =
        toml::to_string(&meta).map_err(|e| GameError::Checkpoint(e.to_string()))?;
    let mut entries = Vec::new();
    for (prefix, store) in [
        ("gen", &model.generator),
        ("fi", &model.f_i),
        ("fe", &model.f_e),
    ] {
        for (name, value) in store.iter() {
            entries.push((format!("{prefix}.{name}"), value));
        }
    }
    let borrowed: Vec<(String, &Array)> =
        entries.iter().map(|(n, v)| (n.clone(), *v)).collect();
    write_checkpoint(path, &meta_text, &borrowed)
        .map_err(|e| GameError::Checkpoint(e.to_string()))
}

/// Loads a model and its configuration snapshot.
pub fn load_model(path: &Path) -> Result<(GameModel, GameConfig), GameError> {
    let (meta_text, entries) =
        read_checkpoint(path).map_err(|e| GameError::Checkpoint(e.to_string()))?;
    let meta: CheckpointMeta =
        toml::from_str(&meta_text).map_err(|e| GameError::Checkpoint(e.to_string()))?;
    let mut generator = ParamStore::new();
    let mut f_i = ParamStore::new();
    let mut f_e = ParamStore::new();
    for (name, value) in entries {
        let (prefix, param) = name.split_once('.').ok_or_else(|| {
            GameError::Checkpoint(format!("unprefixed parameter name {name}"))
        })?;
        match prefix {
            "gen" => generator.add(param, value),
            "fi" => f_i.add(param, value),
            "fe" => f_e.add(param, value),
            other => {
                return Err(GameError::Checkpoint(format!(
                    "unknown player prefix {other}"
                )))
            }
        };
    }
    let model = GameModel {
        vocab_size: meta.vocab_size,
        n_envs: meta.n_envs,
        embed_dim: meta.embed_dim,
        hidden_dim: meta.hidden_dim,
        generator,
        f_i,
        f_e,
    };
    Ok((model, meta.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_bias_corpus, BiasInjectionConfig};

    fn tiny_corpus(seed: u64) -> Corpus {
        gen_bias_corpus(&BiasInjectionConfig {
            examples_per_env: 120,
            val_examples: 60,
            test_examples: 60,
            seq_len: 8,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_config(steps: usize) -> GameConfig {
        GameConfig {
            steps,
            batch_size: 32,
            embed_dim: 6,
            hidden_dim: 8,
            learning_rate: 0.01,
            alpha_sparsity: 0.25,
            ..Default::default()
        }
    }

    #[test]
    fn training_runs_and_emits_one_record_per_step() {
        let corpus = tiny_corpus(1);
        let config = tiny_config(5);
        let mut model = GameModel::for_corpus(&corpus, &config);
        let outcome = train(&mut model, &corpus, &config).unwrap();
        assert_eq!(outcome.trace.len(), 5);
        for (i, rec) in outcome.trace.iter().enumerate() {
            assert_eq!(rec.step, i as u64);
            assert!(rec.l_i.is_finite() && rec.l_e.is_finite());
            assert!(rec.dev_acc.is_finite());
            assert!((rec.gap - (rec.l_i - rec.l_e)).abs() < 1e-15);
        }
    }

    #[test]
    fn same_seed_training_is_bit_identical() {
        let corpus = tiny_corpus(2);
        let config = tiny_config(6);
        let mut a = GameModel::for_corpus(&corpus, &config);
        let mut b = GameModel::for_corpus(&corpus, &config);
        let ta = train(&mut a, &corpus, &config).unwrap();
        let tb = train(&mut b, &corpus, &config).unwrap();
        assert_eq!(a.generator.checksum(), b.generator.checksum());
        assert_eq!(a.f_i.checksum(), b.f_i.checksum());
        assert_eq!(a.f_e.checksum(), b.f_e.checksum());
        for (ra, rb) in ta.trace.iter().zip(&tb.trace) {
            assert_eq!(ra.l_i.to_bits(), rb.l_i.to_bits());
            assert_eq!(ra.dev_acc.to_bits(), rb.dev_acc.to_bits());
        }
    }

    #[test]
    fn lambda_zero_generator_ignores_env_predictor_bitwise() {
        // Re-seeding the environment-aware player must leave the lambda=0
        // generator and agnostic-predictor trajectories untouched; this
        // is the two-player degeneration sharing the same code path.
        let corpus = tiny_corpus(3);
        let config = GameConfig {
            lambda_inv: 0.0,
            ..tiny_config(6)
        };
        let mut a = GameModel::init_with_player_seeds(
            corpus.vocab.len(),
            corpus.n_train_envs,
            &config,
            10,
            11,
            12,
        );
        let mut b = GameModel::init_with_player_seeds(
            corpus.vocab.len(),
            corpus.n_train_envs,
            &config,
            10,
            11,
            777,
        );
        let ta = train(&mut a, &corpus, &config).unwrap();
        let tb = train(&mut b, &corpus, &config).unwrap();
        assert_eq!(a.generator.checksum(), b.generator.checksum());
        assert_eq!(a.f_i.checksum(), b.f_i.checksum());
        assert_ne!(a.f_e.checksum(), b.f_e.checksum());
        for (ra, rb) in ta.trace.iter().zip(&tb.trace) {
            assert_eq!(ra.l_i.to_bits(), rb.l_i.to_bits());
        }
    }

    #[test]
    fn single_env_corpus_is_rejected() {
        let mut corpus = tiny_corpus(4);
        corpus.n_train_envs = 1;
        for ex in &mut corpus.examples {
            if ex.env.is_some() {
                ex.env = Some(0);
            }
        }
        let config = tiny_config(2);
        let mut model = GameModel::for_corpus(&corpus, &config);
        assert!(matches!(
            train(&mut model, &corpus, &config),
            Err(GameError::BadConfig { .. })
        ));
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let corpus = tiny_corpus(5);
        let config = tiny_config(0);
        let model = GameModel::for_corpus(&corpus, &config);
        let rows: Vec<&Example> = corpus.split_examples(Split::Test).collect();
        let acc = accuracy(&model, &rows, &config).unwrap();
        // binomial 3-sigma band around 0.5 on 60 rows is ~0.19 wide
        assert!((acc - 0.5).abs() < 0.25, "untrained accuracy {acc}");
    }

    #[test]
    fn predict_hard_mode_masks_have_exactly_l_ones() {
        let corpus = tiny_corpus(6);
        let config = GameConfig {
            constraint_mode: ConstraintMode::Hard,
            rationale_len: 3,
            ..tiny_config(0)
        };
        let model = GameModel::for_corpus(&corpus, &config);
        let rows: Vec<&Example> = corpus.split_examples(Split::Val).collect();
        let batch = Batch::from_examples(&rows, false);
        let pred = predict(&model, &batch, &config).unwrap();
        for mask in &pred.masks {
            assert_eq!(mask.iter().filter(|m| **m).count(), 3);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_all_players_bitwise() {
        let corpus = tiny_corpus(7);
        let config = tiny_config(3);
        let mut model = GameModel::for_corpus(&corpus, &config);
        train(&mut model, &corpus, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &model, &config).unwrap();
        let (loaded, loaded_config) = load_model(&path).unwrap();
        assert_eq!(model.generator.checksum(), loaded.generator.checksum());
        assert_eq!(model.f_i.checksum(), loaded.f_i.checksum());
        assert_eq!(model.f_e.checksum(), loaded.f_e.checksum());
        assert_eq!(loaded_config.steps, config.steps);
        // and the loaded model predicts identically
        let rows: Vec<&Example> = corpus.split_examples(Split::Test).collect();
        let batch = Batch::from_examples(&rows, false);
        let a = predict(&model, &batch, &config).unwrap();
        let b = predict(&loaded, &batch, &config).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.masks, b.masks);
    }
}
