//! Forward-only online scoring with stored meta embeddings.
//!
//! The scorer holds the global block and an embedding snapshot. It reaches
//! the network only through [`BundleArch::global_probabilities`], which is
//! built on tensor kernels with no graph or gradient support.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tensor};
use crate::store::EmbeddingSnapshot;
use crate::training::{map_ordered, BundleArch, ModelBundle};

/// Lines handled per parallel chunk in [`GlobalScorer::batch_score`].
const CHUNK_LINES: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    #[default]
    Zero,
    Mean,
}

impl FromStr for Fallback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Fallback::Zero),
            "mean" => Ok(Fallback::Mean),
            other => Err(Error::Config(format!(
                "unknown fallback `{other}` (expected zero or mean)"
            ))),
        }
    }
}

impl fmt::Display for Fallback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fallback::Zero => "zero",
            Fallback::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub task_key: String,
    #[serde(default)]
    pub meta_features: Option<Vec<f64>>,
    pub other_features: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Stored,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    pub embedding_source: EmbeddingSource,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
    pub line: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub requests: usize,
    pub errors: usize,
    pub fallbacks: usize,
}

/// The global block plus an embedding snapshot, immutable after load.
#[derive(Clone, Debug)]
pub struct GlobalScorer {
    arch: BundleArch,
    global: ParamSet,
    snapshot: EmbeddingSnapshot,
    fallback: Fallback,
    fallback_vector: Vec<f64>,
}

impl GlobalScorer {
    /// Keeps only the global half of `bundle`.
    pub fn new(bundle: &ModelBundle, snapshot: EmbeddingSnapshot, fallback: Fallback) -> Result<Self> {
        bundle.arch.validate()?;
        bundle.arch.global.check_params(&bundle.global)?;
        if snapshot.dim() != bundle.arch.embedding_dim {
            return Err(Error::Architecture(format!(
                "snapshot dim {} != bundle embedding dim {}",
                snapshot.dim(),
                bundle.arch.embedding_dim
            )));
        }
        let fallback_vector = match fallback {
            Fallback::Zero => vec![0.0; snapshot.dim()],
            Fallback::Mean => snapshot.mean_vector(),
        };
        Ok(Self {
            arch: bundle.arch.clone(),
            global: bundle.global.clone(),
            snapshot,
            fallback,
            fallback_vector,
        })
    }

    pub fn version(&self) -> &str {
        self.snapshot.version()
    }

    pub fn fallback(&self) -> Fallback {
        self.fallback
    }

    pub fn fallback_vector(&self) -> &[f64] {
        &self.fallback_vector
    }

    /// Embedding for `key` as used by scoring, with its source.
    pub fn embedding(&self, key: &str) -> (Vec<f64>, EmbeddingSource) {
        match self.snapshot.lookup(key) {
            Some(v) => (v.iter().map(|x| f64::from(*x)).collect(), EmbeddingSource::Stored),
            None => (self.fallback_vector.clone(), EmbeddingSource::Fallback),
        }
    }

    pub fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        if req.other_features.len() != self.arch.other_dim {
            return Err(Error::LengthMismatch {
                expected: self.arch.other_dim,
                got: req.other_features.len(),
            });
        }
        let meta = match &req.meta_features {
            Some(m) if m.len() != self.arch.meta_dim => {
                return Err(Error::LengthMismatch {
                    expected: self.arch.meta_dim,
                    got: m.len(),
                })
            }
            Some(m) => m.clone(),
            None if self.arch.wiring.meta_to_global => {
                return Err(Error::Data("meta_features required by this model".into()))
            }
            None => vec![0.0; self.arch.meta_dim],
        };
        if meta.iter().chain(&req.other_features).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("request features".into()));
        }
        let (emb, source) = self.embedding(&req.task_key);
        let p = self.arch.global_probabilities(
            &self.global,
            &Tensor::row(emb),
            &Tensor::row(meta),
            &Tensor::row(req.other_features.clone()),
        )?[0];
        if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
            return Err(Error::NonFinite("score".into()));
        }
        Ok(ScoreResponse {
            score: p,
            embedding_source: source,
            version: self.snapshot.version().to_string(),
        })
    }

    /// Scores one JSON request line and renders the JSON response line
    /// (without newline). Failures become error objects.
    pub fn handle_line(&self, line: &str, line_no: usize) -> (String, std::result::Result<EmbeddingSource, ()>) {
        let outcome = serde_json::from_str::<ScoreRequest>(line)
            .map_err(Error::from)
            .and_then(|r| self.score(&r));
        match outcome {
            Ok(resp) => (
                serde_json::to_string(&resp).expect("serializable"),
                Ok(resp.embedding_source),
            ),
            Err(e) => (
                serde_json::to_string(&ErrorResponse {
                    error: e.to_string(),
                    line: line_no,
                })
                .expect("serializable"),
                Err(()),
            ),
        }
    }

    /// One response line per input line, in input order.
    pub fn batch_score(&self, input: impl BufRead, mut output: impl Write, workers: usize) -> Result<BatchStats> {
        let mut stats = BatchStats::default();
        let mut lines = input.lines();
        let mut line_no = 0usize;
        loop {
            let mut chunk = Vec::with_capacity(CHUNK_LINES);
            for line in lines.by_ref().take(CHUNK_LINES) {
                line_no += 1;
                chunk.push((line_no, line?));
            }
            if chunk.is_empty() {
                break;
            }
            let results = map_ordered(&chunk, workers, |(n, l)| Ok(self.handle_line(l, *n)));
            for r in results {
                let (text, outcome) = r?;
                stats.requests += 1;
                match outcome {
                    Ok(EmbeddingSource::Fallback) => stats.fallbacks += 1,
                    Ok(EmbeddingSource::Stored) => {}
                    Err(()) => stats.errors += 1,
                }
                output.write_all(text.as_bytes())?;
                output.write_all(b"\n")?;
            }
            output.flush()?;
        }
        Ok(stats)
    }

    /// Line protocol over TCP: each connection is a request stream answered
    /// exactly as [`Self::batch_score`] would. Stops after `max_connections`
    /// connections when given.
    pub fn serve_listener(&self, listener: &TcpListener, max_connections: Option<usize>) -> Result<()> {
        thread::scope(|scope| -> Result<()> {
            let mut served = 0usize;
            for stream in listener.incoming() {
                let stream = stream?;
                scope.spawn(move || {
                    let reader = match stream.try_clone() {
                        Ok(s) => BufReader::new(s),
                        Err(e) => {
                            log::warn!("connection dropped: {e}");
                            return;
                        }
                    };
                    if let Err(e) = self.batch_score(reader, &stream, 1) {
                        log::warn!("connection ended with error: {e}");
                    }
                });
                served += 1;
                if max_connections.is_some_and(|m| served >= m) {
                    break;
                }
            }
            Ok(())
        })
    }
}
