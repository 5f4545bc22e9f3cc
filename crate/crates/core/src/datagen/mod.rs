//! Synthetic corpora with known causal and spurious channels.
//!
//! Two generators are provided. [`gen_bias_corpus`] injects a leading
//! bias token whose correlation with the label varies across training
//! environments and flips sign at test time, while a body token carries
//! the stationary causal signal. [`gen_aspect_corpus`] builds
//! multi-aspect reviews whose aspect scores share a latent factor;
//! training environments are carved out of the most correlated examples
//! by linear-regression residual percentiles.
//!
//! Both produce a [`Corpus`]: token-id sequences with labels,
//! environment ids on the training split only, and ground-truth
//! rationale masks marking the causal positions.

mod aspect;
mod bias;
mod ols;

pub use aspect::{
    gen_aspect_corpus, gen_aspect_corpus_with_diagnostics, AspectConfig, AspectDiagnostics,
};
pub use bias::{gen_bias_corpus, BiasInjectionConfig};
pub use ols::{
    assign_environments, normal_cdf, ols_fit, standard_normal, EnvAssignment, OlsFit,
};

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid configuration: {what}")]
    BadConfig { what: String },
    #[error("corpus invariant violated: {what}")]
    BadCorpus { what: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed corpus record: {what}")]
    BadRecord {
        path: String,
        line: usize,
        what: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One token sequence with its label and annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u8,
    /// Environment id, present on training rows only; this is the only
    /// environment information the training loop may read.
    pub env: Option<u32>,
    /// The environment the injection schedule actually used for val and
    /// test rows. Hidden from training; evaluation may use it to measure
    /// the invariance gap on held-out data.
    pub env_hidden: Option<u32>,
    /// True at the causal positions the generator planted.
    pub truth_mask: Vec<bool>,
    pub split: Split,
}

impl Example {
    /// The environment to use when evaluating environment-aware losses:
    /// the visible id on train rows, the hidden one elsewhere.
    pub fn env_for_eval(&self) -> Option<u32> {
        self.env.or(self.env_hidden)
    }
}

/// A generated dataset plus its vocabulary and channel metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    /// Token id -> display string.
    pub vocab: Vec<String>,
    /// Number of distinct training environments.
    pub n_train_envs: usize,
    /// Token ids of the injected bias channel; empty when the corpus has
    /// no designated bias tokens.
    pub bias_token_ids: Vec<u32>,
    /// Fixed sequence length shared by every example.
    pub seq_len: usize,
}

impl Corpus {
    pub fn split_examples(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let fail = |what: String| Err(DatagenError::BadCorpus { what });
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.tokens.len() != self.seq_len {
                return fail(format!(
                    "example {i}: length {} != {}",
                    ex.tokens.len(),
                    self.seq_len
                ));
            }
            if ex.truth_mask.len() != self.seq_len {
                return fail(format!("example {i}: truth mask length mismatch"));
            }
            if !ex.truth_mask.iter().any(|&m| m) {
                return fail(format!("example {i}: empty ground-truth mask"));
            }
            if ex.label > 1 {
                return fail(format!("example {i}: label {} is not binary", ex.label));
            }
            if let Some(&bad) = ex.tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
                return fail(format!("example {i}: token {bad} outside vocabulary"));
            }
            match ex.split {
                Split::Train => {
                    let Some(env) = ex.env else {
                        return fail(format!("example {i}: training row without env id"));
                    };
                    if env as usize >= self.n_train_envs {
                        return fail(format!("example {i}: env {env} out of range"));
                    }
                }
                Split::Val | Split::Test => {
                    if ex.env.is_some() {
                        return fail(format!(
                            "example {i}: {} row carries a visible env id",
                            ex.split
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Positions of designated bias tokens in one example.
    pub fn bias_positions(&self, ex: &Example) -> Vec<usize> {
        ex.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| self.bias_token_ids.contains(t))
            .map(|(p, _)| p)
            .collect()
    }
}

const CORPUS_FORMAT: &str = "invrat-corpus";
const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    n_train_envs: usize,
    seq_len: usize,
    bias_token_ids: Vec<u32>,
    vocab_file: String,
    examples: usize,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    tokens: Vec<u32>,
    label: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    env: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    env_hidden: Option<u32>,
    /// Indices of true positions in the ground-truth mask.
    truth: Vec<u32>,
    split: Split,
}

fn vocab_sidecar(corpus_path: &Path) -> PathBuf {
    let stem = corpus_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "corpus".to_string());
    corpus_path.with_file_name(format!("{stem}.vocab.json"))
}

/// Writes a corpus as line-delimited records (header line first) plus a
/// vocabulary sidecar next to it.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), DatagenError> {
    corpus.validate()?;
    let wrap = |source| DatagenError::Io {
        path: path.display().to_string(),
        source,
    };
    let sidecar = vocab_sidecar(path);
    let header = CorpusHeader {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        n_train_envs: corpus.n_train_envs,
        seq_len: corpus.seq_len,
        bias_token_ids: corpus.bias_token_ids.clone(),
        vocab_file: sidecar
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default(),
        examples: corpus.examples.len(),
    };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
    let mut emit = |value: String| -> std::io::Result<()> {
        w.write_all(value.as_bytes())?;
        w.write_all(b"\n")
    };
    emit(serde_json::to_string(&header).expect("header serializes")).map_err(wrap)?;
    for ex in &corpus.examples {
        let rec = ExampleRecord {
            tokens: ex.tokens.clone(),
            label: ex.label,
            env: ex.env,
            env_hidden: ex.env_hidden,
            truth: ex
                .truth_mask
                .iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .map(|(i, _)| i as u32)
                .collect(),
            split: ex.split,
        };
        emit(serde_json::to_string(&rec).expect("record serializes")).map_err(wrap)?;
    }
    w.flush().map_err(wrap)?;
    std::fs::write(
        &sidecar,
        serde_json::to_string_pretty(&corpus.vocab).expect("vocab serializes"),
    )
    .map_err(|source| DatagenError::Io {
        path: sidecar.display().to_string(),
        source,
    })
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(path: &Path) -> Result<Corpus, DatagenError> {
    let pstr = path.display().to_string();
    let wrap = |source| DatagenError::Io {
        path: pstr.clone(),
        source,
    };
    let file = std::fs::File::open(path).map_err(wrap)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DatagenError::BadRecord {
            path: pstr.clone(),
            line: 1,
            what: "missing header".into(),
        })?
        .map_err(wrap)?;
    let header: CorpusHeader =
        serde_json::from_str(&header_line).map_err(|e| DatagenError::BadRecord {
            path: pstr.clone(),
            line: 1,
            what: e.to_string(),
        })?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(DatagenError::BadRecord {
            path: pstr.clone(),
            line: 1,
            what: format!(
                "unsupported corpus format {}/{}",
                header.format, header.version
            ),
        });
    }
    let sidecar = path.with_file_name(&header.vocab_file);
    let vocab_text = std::fs::read_to_string(&sidecar).map_err(|source| DatagenError::Io {
        path: sidecar.display().to_string(),
        source,
    })?;
    let vocab: Vec<String> =
        serde_json::from_str(&vocab_text).map_err(|e| DatagenError::BadRecord {
            path: sidecar.display().to_string(),
            line: 1,
            what: e.to_string(),
        })?;

    let mut examples = Vec::with_capacity(header.examples);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(wrap)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| DatagenError::BadRecord {
                path: pstr.clone(),
                line: i + 2,
                what: e.to_string(),
            })?;
        let mut truth_mask = vec![false; header.seq_len];
        for t in &rec.truth {
            let t = *t as usize;
            if t >= header.seq_len {
                return Err(DatagenError::BadRecord {
                    path: pstr.clone(),
                    line: i + 2,
                    what: format!("truth position {t} out of range"),
                });
            }
            truth_mask[t] = true;
        }
        examples.push(Example {
            tokens: rec.tokens,
            label: rec.label,
            env: rec.env,
            env_hidden: rec.env_hidden,
            truth_mask,
            split: rec.split,
        });
    }
    let corpus = Corpus {
        examples,
        vocab,
        n_train_envs: header.n_train_envs,
        bias_token_ids: header.bias_token_ids,
        seq_len: header.seq_len,
    };
    corpus.validate()?;
    Ok(corpus)
}
