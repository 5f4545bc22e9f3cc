//! Correlated multi-aspect review corpus.
//!
//! Each example has one latent score per aspect; scores share a common
//! factor so they are pairwise correlated at a configured level. Tokens
//! come in per-aspect segments whose sentiment-token rate tracks the
//! aspect score. The label is the binarized target-aspect score (scores
//! in the middle band are dropped and regenerated). Training
//! environments are the lowest residual-percentile buckets of a linear
//! regression predicting the target score from the other aspects, so
//! environment 0 holds the most strongly confounded examples.

use rand::Rng;

use super::{
    assign_environments, normal_cdf, ols_fit, standard_normal, Corpus, DatagenError, Example,
    Split,
};
use crate::tape::rng_for;

#[derive(Clone, Debug)]
pub struct AspectConfig {
    /// Number of aspects; the sequence is one segment per aspect.
    pub n_aspects: usize,
    /// Which aspect's score defines the label and the ground truth.
    pub target_aspect: usize,
    /// Pairwise correlation of the latent aspect scores, in `[0, 1)`.
    pub correlation: f64,
    /// Tokens per aspect segment.
    pub segment_len: usize,
    /// Probability that a segment position carries a sentiment token
    /// (rather than the aspect's neutral token), per aspect. A noisier
    /// target channel makes the confound genuinely attractive.
    pub sentiment_density: Vec<f64>,
    /// Pool size generated before environment assignment and balancing.
    pub examples: usize,
    /// Kept label-balanced examples per training environment.
    pub train_per_env: usize,
    /// Kept label-balanced validation / test examples.
    pub val_examples: usize,
    pub test_examples: usize,
    /// Residual percentiles separating env 0, env 1, and the held-out
    /// pool.
    pub percentile_boundaries: [f64; 2],
    pub seed: u64,
}

impl Default for AspectConfig {
    fn default() -> Self {
        AspectConfig {
            n_aspects: 3,
            target_aspect: 0,
            correlation: 0.9,
            segment_len: 8,
            sentiment_density: vec![0.5, 0.9, 0.9],
            examples: 8000,
            train_per_env: 900,
            val_examples: 700,
            test_examples: 700,
            percentile_boundaries: [25.0, 50.0],
            seed: 0,
        }
    }
}

impl AspectConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |what: String| Err(DatagenError::BadConfig { what });
        if self.n_aspects < 2 {
            return bad("need at least two aspects".into());
        }
        if self.target_aspect >= self.n_aspects {
            return bad(format!(
                "target aspect {} out of range for {} aspects",
                self.target_aspect, self.n_aspects
            ));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return bad(format!(
                "correlation level {} outside the achievable range [0, 1)",
                self.correlation
            ));
        }
        if self.segment_len == 0 {
            return bad("segment_len must be positive".into());
        }
        if self.sentiment_density.len() != self.n_aspects
            || self
                .sentiment_density
                .iter()
                .any(|d| !(0.0..=1.0).contains(d))
        {
            return bad(format!(
                "sentiment_density must hold {} values in [0, 1]",
                self.n_aspects
            ));
        }
        if self.examples < 8 {
            return bad("examples must be at least 8".into());
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.n_aspects * self.segment_len
    }

    fn vocab(&self) -> Vec<String> {
        let mut v = Vec::with_capacity(self.n_aspects * 3);
        for k in 0..self.n_aspects {
            v.push(format!("good{k}"));
            v.push(format!("bad{k}"));
            v.push(format!("neu{k}"));
        }
        v
    }

    fn good(&self, aspect: usize) -> u32 {
        (aspect * 3) as u32
    }

    fn bad_tok(&self, aspect: usize) -> u32 {
        (aspect * 3 + 1) as u32
    }

    fn neutral(&self, aspect: usize) -> u32 {
        (aspect * 3 + 2) as u32
    }
}

/// Generation byproducts kept out of the corpus: latent scores, the
/// regression fit, and the residual bucketing, for diagnostics.
#[derive(Clone, Debug)]
pub struct AspectDiagnostics {
    /// Latent score vector per generated pool example.
    pub scores: Vec<Vec<f64>>,
    /// Residual-percentile bucket per pool example (0, 1 = train envs;
    /// 2 = held-out pool).
    pub buckets: Vec<usize>,
    pub residuals: Vec<f64>,
    pub ridge_applied: bool,
    pub boundary_ties: bool,
}

pub fn gen_aspect_corpus(config: &AspectConfig) -> Result<Corpus, DatagenError> {
    gen_aspect_corpus_with_diagnostics(config).map(|(corpus, _)| corpus)
}

pub fn gen_aspect_corpus_with_diagnostics(
    config: &AspectConfig,
) -> Result<(Corpus, AspectDiagnostics), DatagenError> {
    config.validate()?;
    let k = config.n_aspects;
    let mut rng = rng_for(config.seed, &["aspect", "pool"]);

    // Latent scores through a Gaussian copula: pairwise correlation of
    // the raw normals is `correlation`, marginals are uniform on (0, 1).
    let shared_w = config.correlation.sqrt();
    let noise_w = (1.0 - config.correlation).sqrt();
    let mut scores = Vec::with_capacity(config.examples);
    let mut labels = Vec::with_capacity(config.examples);
    while scores.len() < config.examples {
        let f = standard_normal(&mut rng);
        let raw: Vec<f64> = (0..k)
            .map(|_| shared_w * f + noise_w * standard_normal(&mut rng))
            .collect();
        let s: Vec<f64> = raw.iter().map(|r| normal_cdf(*r)).collect();
        let target = s[config.target_aspect];
        // Middle-band scores are dropped and redrawn.
        let label = if target <= 0.4 {
            0u8
        } else if target >= 0.6 {
            1u8
        } else {
            continue;
        };
        scores.push(s);
        labels.push(label);
    }

    // Environments from the residuals of predicting the target score
    // out of the other aspects.
    let features: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| {
            s.iter()
                .enumerate()
                .filter(|(i, _)| *i != config.target_aspect)
                .map(|(_, v)| *v)
                .collect()
        })
        .collect();
    let targets: Vec<f64> = scores.iter().map(|s| s[config.target_aspect]).collect();
    let fit = ols_fit(&features, &targets)?;
    let assignment = assign_environments(
        &fit.residuals,
        &[
            config.percentile_boundaries[0],
            config.percentile_boundaries[1],
        ],
    )?;

    // The held-out pool gets hidden two-way environment ids from its own
    // median residual, mirroring the train buckets at weaker confounding.
    let pool_residuals: Vec<f64> = assignment
        .buckets
        .iter()
        .zip(&fit.residuals)
        .filter(|(b, _)| **b == 2)
        .map(|(_, r)| *r)
        .collect();
    let pool_median = if pool_residuals.is_empty() {
        0.0
    } else {
        let mut sorted = pool_residuals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[(sorted.len() - 1) / 2]
    };

    // Label-balanced subsampling per bucket, stable by original index.
    let balanced_env0 = balanced_indices(&assignment.buckets, &labels, 0, config.train_per_env);
    let balanced_env1 = balanced_indices(&assignment.buckets, &labels, 1, config.train_per_env);
    let pool = balanced_indices(
        &assignment.buckets,
        &labels,
        2,
        config.val_examples + config.test_examples,
    );
    if balanced_env0.len() < config.train_per_env || balanced_env1.len() < config.train_per_env {
        return Err(DatagenError::BadConfig {
            what: format!(
                "pool of {} examples left only {}/{} balanced rows per training environment; raise `examples`",
                config.examples,
                balanced_env0.len(),
                balanced_env1.len()
            ),
        });
    }
    if pool.len() < config.val_examples + config.test_examples {
        return Err(DatagenError::BadConfig {
            what: format!(
                "held-out pool has only {} balanced rows for val {} + test {}; raise `examples`",
                pool.len(),
                config.val_examples,
                config.test_examples
            ),
        });
    }

    let mut examples = Vec::new();
    let mut tok_rng = rng_for(config.seed, &["aspect", "tokens"]);
    let mut emit = |idx: usize, env: Option<u32>, env_hidden: Option<u32>, split: Split,
                    rng: &mut rand_chacha::ChaCha8Rng| {
        let (tokens, truth_mask) = render_tokens(config, &scores[idx], rng);
        examples.push(Example {
            tokens,
            label: labels[idx],
            env,
            env_hidden,
            truth_mask,
            split,
        });
    };
    for &idx in &balanced_env0 {
        emit(idx, Some(0), None, Split::Train, &mut tok_rng);
    }
    for &idx in &balanced_env1 {
        emit(idx, Some(1), None, Split::Train, &mut tok_rng);
    }
    for (i, &idx) in pool.iter().enumerate() {
        let split = if i < config.val_examples {
            Split::Val
        } else {
            Split::Test
        };
        let half = u32::from(fit.residuals[idx] > pool_median);
        emit(idx, None, Some(half), split, &mut tok_rng);
    }

    let corpus = Corpus {
        examples,
        vocab: config.vocab(),
        n_train_envs: 2,
        bias_token_ids: Vec::new(),
        seq_len: config.seq_len(),
    };
    corpus.validate()?;
    Ok((
        corpus,
        AspectDiagnostics {
            scores,
            buckets: assignment.buckets,
            residuals: fit.residuals,
            ridge_applied: fit.ridge_applied,
            boundary_ties: assignment.boundary_ties,
        },
    ))
}

/// Indices of bucket members subsampled to an even label split, capped
/// at `cap`, preserving original order.
fn balanced_indices(buckets: &[usize], labels: &[u8], bucket: usize, cap: usize) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len())
        .filter(|i| buckets[*i] == bucket && labels[*i] == 1)
        .collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|i| buckets[*i] == bucket && labels[*i] == 0)
        .collect();
    let per_label = pos.len().min(neg.len()).min(cap / 2);
    let mut keep: Vec<usize> = pos[..per_label]
        .iter()
        .chain(&neg[..per_label])
        .copied()
        .collect();
    keep.sort_unstable();
    keep
}

fn render_tokens(
    config: &AspectConfig,
    scores: &[f64],
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<bool>) {
    let n = config.seq_len();
    let mut tokens = Vec::with_capacity(n);
    let mut truth = vec![false; n];
    for aspect in 0..config.n_aspects {
        for pos in 0..config.segment_len {
            let global = aspect * config.segment_len + pos;
            if aspect == config.target_aspect {
                truth[global] = true;
            }
            if rng.random::<f64>() < config.sentiment_density[aspect] {
                if rng.random::<f64>() < scores[aspect] {
                    tokens.push(config.good(aspect));
                } else {
                    tokens.push(config.bad_tok(aspect));
                }
            } else {
                tokens.push(config.neutral(aspect));
            }
        }
    }
    (tokens, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>();
        let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>();
        cov / (vx * vy).sqrt()
    }

    /// Sign of the sentiment-count difference over non-target segments;
    /// a training-free probe of how predictive the confound channel is.
    fn confound_probe_accuracy(corpus: &Corpus, config: &AspectConfig) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for ex in corpus.split_examples(Split::Train) {
            let mut score = 0i64;
            for aspect in 0..config.n_aspects {
                if aspect == config.target_aspect {
                    continue;
                }
                for pos in 0..config.segment_len {
                    let t = ex.tokens[aspect * config.segment_len + pos];
                    if t == config.good(aspect) {
                        score += 1;
                    } else if t == config.bad_tok(aspect) {
                        score -= 1;
                    }
                }
            }
            if score != 0 {
                total += 1;
                if (score > 0) == (ex.label == 1) {
                    correct += 1;
                }
            }
        }
        correct as f64 / total as f64
    }

    fn small_config(correlation: f64, seed: u64) -> AspectConfig {
        AspectConfig {
            correlation,
            examples: 4000,
            train_per_env: 300,
            val_examples: 200,
            test_examples: 200,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn high_correlation_makes_confound_predictive() {
        let config = small_config(0.9, 31);
        let corpus = gen_aspect_corpus(&config).unwrap();
        let acc = confound_probe_accuracy(&corpus, &config);
        assert!(acc > 0.7, "confound probe accuracy {acc}");
    }

    #[test]
    fn zero_correlation_leaves_confound_uninformative() {
        let config = small_config(0.0, 37);
        let corpus = gen_aspect_corpus(&config).unwrap();
        let acc = confound_probe_accuracy(&corpus, &config);
        // binomial 3-sigma band around chance on ~600 probed rows
        assert!((acc - 0.5).abs() < 0.07, "confound probe accuracy {acc}");
    }

    #[test]
    fn env0_is_more_confounded_than_the_pool() {
        let config = small_config(0.8, 41);
        let (_, diag) = gen_aspect_corpus_with_diagnostics(&config).unwrap();
        let corr_of = |bucket: usize| {
            let xs: Vec<f64> = diag
                .scores
                .iter()
                .zip(&diag.buckets)
                .filter(|(_, b)| **b == bucket)
                .map(|(s, _)| s[config.target_aspect])
                .collect();
            let ys: Vec<f64> = diag
                .scores
                .iter()
                .zip(&diag.buckets)
                .filter(|(_, b)| **b == bucket)
                .map(|(s, _)| {
                    s.iter()
                        .enumerate()
                        .filter(|(i, _)| *i != config.target_aspect)
                        .map(|(_, v)| *v)
                        .sum::<f64>()
                        / (config.n_aspects - 1) as f64
                })
                .collect();
            pearson(&xs, &ys)
        };
        let env0 = corr_of(0);
        let pool = corr_of(2);
        assert!(env0 > pool, "env0 correlation {env0} vs pool {pool}");
    }

    #[test]
    fn labels_are_balanced_per_environment() {
        let config = small_config(0.85, 43);
        let corpus = gen_aspect_corpus(&config).unwrap();
        for env in [0u32, 1] {
            let (mut pos, mut total) = (0usize, 0usize);
            for ex in corpus.split_examples(Split::Train) {
                if ex.env == Some(env) {
                    total += 1;
                    pos += usize::from(ex.label == 1);
                }
            }
            assert_eq!(total, config.train_per_env);
            // balancing is exact by construction
            assert_eq!(pos * 2, total, "env {env}: {pos}/{total}");
        }
    }

    #[test]
    fn truth_mask_is_exactly_the_target_segment() {
        let config = small_config(0.7, 47);
        let corpus = gen_aspect_corpus(&config).unwrap();
        let lo = config.target_aspect * config.segment_len;
        let hi = lo + config.segment_len;
        for ex in &corpus.examples {
            for (pos, &m) in ex.truth_mask.iter().enumerate() {
                assert_eq!(m, (lo..hi).contains(&pos));
            }
        }
    }

    #[test]
    fn middle_band_scores_never_survive() {
        let config = small_config(0.6, 53);
        let (_, diag) = gen_aspect_corpus_with_diagnostics(&config).unwrap();
        for s in &diag.scores {
            let t = s[config.target_aspect];
            assert!(t <= 0.4 || t >= 0.6, "middle-band score {t} kept");
        }
    }

    #[test]
    fn out_of_range_correlation_rejected() {
        for c in [-0.2, 1.0, 1.5] {
            let config = AspectConfig {
                correlation: c,
                ..Default::default()
            };
            assert!(gen_aspect_corpus(&config).is_err(), "correlation {c}");
        }
    }
}
