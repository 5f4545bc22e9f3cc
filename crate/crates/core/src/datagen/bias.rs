//! Bias-token injection corpus.
//!
//! Every sequence starts with one of two bias tokens. On training
//! environment `i`, the first bias token co-occurs with the positive
//! label at rate `alpha_i` (mirrored for the negative label), so the
//! bias channel's predictive direction and strength vary with the
//! environment. One body position carries a polarity token that matches
//! the label with a fixed environment-independent probability — the
//! stationary causal channel and the only ground-truth rationale. All
//! other positions are filler noise.

use rand::Rng;

use super::{Corpus, DatagenError, Example, Split};
use crate::tape::rng_for;

#[derive(Clone, Debug)]
pub struct BiasInjectionConfig {
    /// Bias-label co-occurrence rate per training environment.
    pub alpha_per_env: Vec<f64>,
    /// Rates for the two hidden halves of the validation split.
    pub alpha_val: [f64; 2],
    /// Rates for the two hidden halves of the test split.
    pub alpha_test: [f64; 2],
    /// Vocabulary ids of the two distinguished bias tokens.
    pub bias_tokens: [u32; 2],
    /// Probability that the planted polarity token matches the label.
    pub causal_token_strength: f64,
    /// Fixed sequence length.
    pub seq_len: usize,
    /// Training examples per environment.
    pub examples_per_env: usize,
    /// Total validation examples (split evenly across the two halves).
    pub val_examples: usize,
    /// Total test examples (split evenly across the two halves).
    pub test_examples: usize,
    pub seed: u64,
}

impl Default for BiasInjectionConfig {
    fn default() -> Self {
        BiasInjectionConfig {
            alpha_per_env: vec![0.9, 0.7],
            alpha_val: [0.5, 0.5],
            alpha_test: [0.1, 0.3],
            bias_tokens: [0, 1],
            causal_token_strength: 0.75,
            seq_len: 20,
            examples_per_env: 2000,
            val_examples: 1000,
            test_examples: 2000,
            seed: 0,
        }
    }
}

// Fixed vocabulary layout: two bias tokens, two polarity tokens, fillers.
const POS_TOKEN: u32 = 2;
const NEG_TOKEN: u32 = 3;
const N_FILLERS: u32 = 12;

impl BiasInjectionConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |what: String| Err(DatagenError::BadConfig { what });
        if self.alpha_per_env.is_empty() {
            return bad("alpha_per_env must name at least one environment".into());
        }
        for (i, a) in self
            .alpha_per_env
            .iter()
            .chain(&self.alpha_val)
            .chain(&self.alpha_test)
            .enumerate()
        {
            if !(0.0..=1.0).contains(a) || a.is_nan() {
                return bad(format!("alpha #{i} = {a} outside [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.causal_token_strength) {
            return bad(format!(
                "causal_token_strength {} outside [0, 1]",
                self.causal_token_strength
            ));
        }
        if self.bias_tokens[0] == self.bias_tokens[1] {
            return bad("the two bias tokens must be distinct".into());
        }
        if self.bias_tokens.iter().any(|t| *t > 1) {
            return bad("bias tokens must use vocabulary slots 0 and 1".into());
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2 (bias slot + body)".into());
        }
        if self.examples_per_env == 0 {
            return bad("examples_per_env must be positive".into());
        }
        Ok(())
    }

    fn vocab(&self) -> Vec<String> {
        let mut v = vec![",".to_string(), ".".to_string(), "good".to_string(), "bad".to_string()];
        for i in 0..N_FILLERS {
            v.push(format!("w{i:02}"));
        }
        v
    }
}

/// Generates the bias-injection corpus. Training rows carry environment
/// ids; validation and test rows record their injection half only as
/// hidden evaluation metadata.
pub fn gen_bias_corpus(config: &BiasInjectionConfig) -> Result<Corpus, DatagenError> {
    config.validate()?;
    let vocab = config.vocab();
    let mut examples = Vec::new();

    for (env, &alpha) in config.alpha_per_env.iter().enumerate() {
        let mut rng = rng_for(config.seed, &["bias", "train", &env.to_string()]);
        for _ in 0..config.examples_per_env {
            let ex = gen_example(config, alpha, &mut rng);
            examples.push(Example {
                env: Some(env as u32),
                env_hidden: None,
                split: Split::Train,
                ..ex
            });
        }
    }
    for (split, alphas, count) in [
        (Split::Val, config.alpha_val, config.val_examples),
        (Split::Test, config.alpha_test, config.test_examples),
    ] {
        let mut rng = rng_for(config.seed, &["bias", &split.to_string()]);
        for i in 0..count {
            let half = (i % 2) as u32;
            let ex = gen_example(config, alphas[half as usize], &mut rng);
            examples.push(Example {
                env: None,
                env_hidden: Some(half),
                split,
                ..ex
            });
        }
    }

    let corpus = Corpus {
        examples,
        vocab,
        n_train_envs: config.alpha_per_env.len(),
        bias_token_ids: config.bias_tokens.to_vec(),
        seq_len: config.seq_len,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn gen_example(
    config: &BiasInjectionConfig,
    alpha: f64,
    rng: &mut impl Rng,
) -> Example {
    let n = config.seq_len;
    let label: u8 = u8::from(rng.random::<f64>() < 0.5);

    // Leading bias token: token 0 tracks the positive label at rate
    // alpha, token 1 mirrors it for the negative label.
    let aligned = rng.random::<f64>() < alpha;
    let bias = if (label == 1) == aligned {
        config.bias_tokens[0]
    } else {
        config.bias_tokens[1]
    };

    let causal_pos = 1 + rng.random_range(0..n - 1);
    let matches_label = rng.random::<f64>() < config.causal_token_strength;
    let polarity = if (label == 1) == matches_label {
        POS_TOKEN
    } else {
        NEG_TOKEN
    };

    let mut tokens = Vec::with_capacity(n);
    tokens.push(bias);
    for pos in 1..n {
        if pos == causal_pos {
            tokens.push(polarity);
        } else {
            tokens.push(4 + rng.random_range(0..N_FILLERS));
        }
    }
    let mut truth_mask = vec![false; n];
    truth_mask[causal_pos] = true;

    Example {
        tokens,
        label,
        env: None,
        env_hidden: None,
        truth_mask,
        split: Split::Train,
    }
}
