//! The three-player rationale game.
//!
//! A generator scores token positions and emits a binary mask; an
//! environment-agnostic predictor and an environment-aware predictor
//! both classify the masked input, the latter with the environment id
//! appended. Training alternates one descent step per player per
//! minibatch. The generator minimizes its predictor's loss plus a
//! weighted penalty on the loss gap between the two predictors; with
//! the gap weight at zero the system degenerates to the plain
//! maximum-mutual-information baseline.
//!
//! Mask discreteness is handled with straight-through estimation: hard
//! masks on the forward pass, a soft surrogate (sigmoid probabilities,
//! or softmax scores spread by a causal convolution) on the backward
//! pass.

mod forward;
mod train;

pub use forward::{generator_objective_value, predictor_losses, ForwardPass, MaskSample};
pub use train::{
    accuracy, evaluate_losses, load_model, mean_selection_probability, predict, save_model,
    train, Prediction, TraceRecord, TrainOutcome,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Corpus, Example};
use crate::tape::{rng_for, Array, ParamStore, TapeError};

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid game configuration: {what}")]
    BadConfig { what: String },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("training diverged at step {step}: last finite losses L_i={last_li:.4}, L_e={last_le:.4}")]
    Diverged {
        step: u64,
        last_li: f64,
        last_le: f64,
    },
    #[error("batch rows are missing environment ids")]
    MissingEnv,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Shape of the gap penalty `h` in the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HKind {
    Identity,
    Relu,
}

impl HKind {
    pub fn apply(&self, t: f64) -> f64 {
        match self {
            HKind::Identity => t,
            HKind::Relu => t.max(0.0),
        }
    }
}

/// How the selection constraint is enforced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Per-token Bernoulli selection with Lagrange penalties on the
    /// selection rate and on fragmentation.
    Soft,
    /// One contiguous window of fixed length starting at the argmax
    /// position score.
    Hard,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GameConfig {
    /// Weight on the invariance gap in the generator objective.
    pub lambda_inv: f64,
    pub h_kind: HKind,
    pub constraint_mode: ConstraintMode,
    /// Soft mode: weight on |mean selection - alpha_sparsity|.
    pub mu1: f64,
    /// Soft mode: weight on the mean total variation of the mask.
    pub mu2: f64,
    /// Soft mode: target fraction of selected tokens.
    pub alpha_sparsity: f64,
    /// Hard mode: window length.
    pub rationale_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The generator's learning rate as a fraction of `learning_rate`.
    /// The alternating minimax needs the outer player to move slower
    /// than the predictors tracking it, or the mask orbits instead of
    /// converging.
    pub generator_lr_scale: f64,
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            lambda_inv: 1.0,
            h_kind: HKind::Relu,
            constraint_mode: ConstraintMode::Soft,
            mu1: 1.0,
            mu2: 0.1,
            alpha_sparsity: 0.1,
            rationale_len: 1,
            embed_dim: 16,
            hidden_dim: 32,
            steps: 500,
            batch_size: 64,
            learning_rate: 0.001,
            generator_lr_scale: 0.2,
            seed: 0,
        }
    }
}

impl GameConfig {
    /// Validates the fields that are active under the configured
    /// constraint mode against a corpus sequence length.
    pub fn validate(&self, seq_len: usize) -> Result<(), GameError> {
        let bad = |what: String| Err(GameError::BadConfig { what });
        if self.lambda_inv < 0.0 || self.lambda_inv.is_nan() {
            return bad(format!("lambda_inv {} must be >= 0", self.lambda_inv));
        }
        match self.constraint_mode {
            ConstraintMode::Soft => {
                if self.mu1 < 0.0 || self.mu2 < 0.0 {
                    return bad("soft-constraint weights must be >= 0".into());
                }
                if !(0.0..=1.0).contains(&self.alpha_sparsity) {
                    return bad(format!(
                        "alpha_sparsity {} outside [0, 1]",
                        self.alpha_sparsity
                    ));
                }
            }
            ConstraintMode::Hard => {
                if self.rationale_len == 0 {
                    return bad("rationale_len must be >= 1".into());
                }
                if self.rationale_len > seq_len {
                    return bad(format!(
                        "rationale_len {} exceeds sequence length {seq_len}",
                        self.rationale_len
                    ));
                }
            }
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed_dim and hidden_dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive".into());
        }
        if self.generator_lr_scale <= 0.0 {
            return bad("generator_lr_scale must be positive".into());
        }
        Ok(())
    }
}

/// A minibatch of token rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub b: usize,
    pub n: usize,
    /// Row-major `b x n` token ids.
    pub tokens: Vec<u32>,
    pub labels: Vec<usize>,
    /// Environment per row where known.
    pub envs: Vec<Option<u32>>,
    /// `b x n` padding mask, 1.0 on real tokens.
    pub pad: Vec<f64>,
}

impl Batch {
    /// Assembles a batch from examples. `visible_env_only` restricts the
    /// environment column to ids the training loop may see; otherwise
    /// the hidden evaluation ids are used as fallback.
    pub fn from_examples(examples: &[&Example], visible_env_only: bool) -> Self {
        let b = examples.len();
        let n = examples.first().map_or(0, |e| e.tokens.len());
        let mut tokens = Vec::with_capacity(b * n);
        let mut labels = Vec::with_capacity(b);
        let mut envs = Vec::with_capacity(b);
        for ex in examples {
            tokens.extend_from_slice(&ex.tokens);
            labels.push(ex.label as usize);
            envs.push(if visible_env_only {
                ex.env
            } else {
                ex.env_for_eval()
            });
        }
        Batch {
            b,
            n,
            tokens,
            labels,
            envs,
            pad: vec![1.0; b * n],
        }
    }
}

/// Parameters of the three players. The environment-agnostic predictor
/// has no environment input anywhere in its parameterization, and no
/// parameters are shared between players.
#[derive(Clone, Debug)]
pub struct GameModel {
    pub vocab_size: usize,
    pub n_envs: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub generator: ParamStore,
    pub f_i: ParamStore,
    pub f_e: ParamStore,
}

impl GameModel {
    /// Initializes all players with independent derived seeds, so any
    /// single player can be re-seeded without disturbing the others.
    pub fn init(vocab_size: usize, n_envs: usize, config: &GameConfig) -> Self {
        Self::init_with_player_seeds(
            vocab_size,
            n_envs,
            config,
            config.seed,
            config.seed,
            config.seed,
        )
    }

    /// Initialization with per-player base seeds; used by tests that
    /// perturb one player while holding the rest fixed.
    pub fn init_with_player_seeds(
        vocab_size: usize,
        n_envs: usize,
        config: &GameConfig,
        gen_seed: u64,
        fi_seed: u64,
        fe_seed: u64,
    ) -> Self {
        let d = config.embed_dim;
        let h = config.hidden_dim;
        let generator = build_store(
            gen_seed,
            "gen",
            &[
                ("embed", vec![vocab_size, d]),
                ("w1", vec![3 * d, h]),
                ("b1", vec![h]),
                ("w2", vec![h, 1]),
                ("b2", vec![1]),
            ],
        );
        let f_i = build_store(
            fi_seed,
            "f_i",
            &[
                ("embed", vec![vocab_size, d]),
                ("w1", vec![d, h]),
                ("b1", vec![h]),
                ("w2", vec![h, 2]),
                ("b2", vec![2]),
            ],
        );
        let f_e = build_store(
            fe_seed,
            "f_e",
            &[
                ("embed", vec![vocab_size, d]),
                ("w1", vec![d + n_envs, h]),
                ("b1", vec![h]),
                ("w2", vec![h, 2]),
                ("b2", vec![2]),
            ],
        );
        GameModel {
            vocab_size,
            n_envs,
            embed_dim: d,
            hidden_dim: h,
            generator,
            f_i,
            f_e,
        }
    }

    /// Initializes the model sized for a corpus.
    pub fn for_corpus(corpus: &Corpus, config: &GameConfig) -> Self {
        Self::init(corpus.vocab.len(), corpus.n_train_envs, config)
    }
}

fn build_store(seed: u64, player: &str, layout: &[(&str, Vec<usize>)]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in layout {
        let mut rng = rng_for(seed, &["init", player, name]);
        let len: usize = shape.iter().product();
        let value = if name.starts_with('b') {
            Array::zeros(shape)
        } else {
            // Uniform fan-in scaling; embeddings use their row width.
            let fan_in = shape[0].max(1) as f64;
            let scale = 1.0 / fan_in.sqrt();
            let data: Vec<f64> = (0..len)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                .collect();
            Array::from_vec(shape, data).expect("init shape")
        };
        store.add(name, value);
    }
    store
}
