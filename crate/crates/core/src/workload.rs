//! Workload description: which components a RAG pipeline has, how large they
//! are, and how many tokens flow through each stage.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Component sizes and retrieval configuration of a RAG workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RagSchema {
    /// Database encoder; present only when the database is built online from the context.
    pub encoder_params: Option<u64>,
    pub vector_dim: u32,
    pub n_db_vectors: u64,
    /// Bytes per PQ-compressed database vector.
    pub bytes_per_vector: u32,
    /// Retrievals per generated sequence; values above 1 trigger retrievals during decode.
    pub retrieval_frequency: u32,
    pub queries_per_retrieval: u32,
    pub rewriter_params: Option<u64>,
    pub reranker_params: Option<u64>,
    pub generative_params: u64,
    pub rerank_candidates: u32,
    pub neighbors_used: u32,
}

impl RagSchema {
    pub fn validate(&self) -> Result<()> {
        let counts: [(&str, u64); 7] = [
            ("workload.vector_dim", self.vector_dim as u64),
            ("workload.n_db_vectors", self.n_db_vectors),
            ("workload.bytes_per_vector", self.bytes_per_vector as u64),
            ("workload.retrieval_frequency", self.retrieval_frequency as u64),
            ("workload.queries_per_retrieval", self.queries_per_retrieval as u64),
            ("workload.generative_params", self.generative_params),
            ("workload.neighbors_used", self.neighbors_used as u64),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::invalid(key, "must be >= 1"));
            }
        }
        for (key, v) in [
            ("workload.encoder_params", self.encoder_params),
            ("workload.rewriter_params", self.rewriter_params),
            ("workload.reranker_params", self.reranker_params),
        ] {
            if v == Some(0) {
                return Err(Error::invalid(key, "must be >= 1 when present"));
            }
        }
        if self.rerank_candidates == 0 {
            return Err(Error::invalid("workload.rerank_candidates", "must be >= 1"));
        }
        if self.reranker_params.is_some() && self.neighbors_used > self.rerank_candidates {
            return Err(Error::invalid(
                "workload.neighbors_used",
                "cannot exceed rerank_candidates when a reranker is present",
            ));
        }
        Ok(())
    }

    /// Parameter count of the model serving `stage`, or `None` for CPU or absent stages.
    pub fn params_for(&self, stage: Stage) -> Option<u64> {
        match stage {
            Stage::Encode => self.encoder_params,
            Stage::RewritePrefix | Stage::RewriteDecode => self.rewriter_params,
            Stage::Rerank => self.reranker_params,
            Stage::Prefix | Stage::Decode => Some(self.generative_params),
            Stage::Retrieve => None,
        }
    }

    /// Passages returned by one retrieval query.
    pub fn passages_retrieved(&self) -> u32 {
        if self.reranker_params.is_some() {
            self.rerank_candidates
        } else {
            self.neighbors_used
        }
    }
}

/// Sequence lengths in tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceProfile {
    pub question_tokens: u32,
    pub chunk_tokens: u32,
    /// Prefix input length.
    pub prompt_tokens: u32,
    pub decode_tokens: u32,
    /// Length of the user-supplied context that is chunked into the database.
    pub context_tokens: Option<u64>,
    pub chunk_stride_tokens: u32,
    /// Length of the rewritten question emitted by the rewriter.
    pub rewrite_output_tokens: u32,
}

impl SequenceProfile {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("sequence.question_tokens", self.question_tokens),
            ("sequence.chunk_tokens", self.chunk_tokens),
            ("sequence.decode_tokens", self.decode_tokens),
            ("sequence.chunk_stride_tokens", self.chunk_stride_tokens),
            ("sequence.rewrite_output_tokens", self.rewrite_output_tokens),
        ] {
            if v == 0 {
                return Err(Error::invalid(key, "must be >= 1"));
            }
        }
        if self.prompt_tokens < self.question_tokens {
            return Err(Error::invalid("sequence.prompt_tokens", "must be >= question_tokens"));
        }
        if self.chunk_stride_tokens > self.chunk_tokens {
            return Err(Error::invalid("sequence.chunk_stride_tokens", "must be <= chunk_tokens"));
        }
        if self.context_tokens == Some(0) {
            return Err(Error::invalid("sequence.context_tokens", "must be >= 1 when present"));
        }
        Ok(())
    }

    /// Database vectors produced by chunking the context, if there is one.
    pub fn context_vectors(&self) -> Option<u64> {
        self.context_tokens
            .map(|c| c.div_ceil(self.chunk_stride_tokens as u64))
    }
}

/// A stage of the serving pipeline. The declaration order is the pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encode,
    RewritePrefix,
    RewriteDecode,
    Retrieve,
    Rerank,
    Prefix,
    Decode,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Encode,
        Stage::RewritePrefix,
        Stage::RewriteDecode,
        Stage::Retrieve,
        Stage::Rerank,
        Stage::Prefix,
        Stage::Decode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Encode => "encode",
            Stage::RewritePrefix => "rewrite_prefix",
            Stage::RewriteDecode => "rewrite_decode",
            Stage::Retrieve => "retrieve",
            Stage::Rerank => "rerank",
            Stage::Prefix => "prefix",
            Stage::Decode => "decode",
        }
    }

    /// Autoregressive stages, costed per generated token.
    pub fn is_decode_like(self) -> bool {
        matches!(self, Stage::RewriteDecode | Stage::Decode)
    }

    /// Encoder-only models keep no KV cache after the forward pass.
    pub fn keeps_kv(self) -> bool {
        !matches!(self, Stage::Encode | Stage::Rerank)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown stage `{s}`")))
    }
}

/// Ordered stages of one workload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub stages: Vec<Stage>,
    /// Retrieve and Prefix are re-entered from Decode.
    pub iterative: bool,
}

impl PipelineSpec {
    pub fn from_schema(schema: &RagSchema) -> Self {
        let mut stages = Vec::with_capacity(7);
        if schema.encoder_params.is_some() {
            stages.push(Stage::Encode);
        }
        if schema.rewriter_params.is_some() {
            stages.push(Stage::RewritePrefix);
            stages.push(Stage::RewriteDecode);
        }
        stages.push(Stage::Retrieve);
        if schema.reranker_params.is_some() {
            stages.push(Stage::Rerank);
        }
        stages.push(Stage::Prefix);
        stages.push(Stage::Decode);
        PipelineSpec {
            stages,
            iterative: schema.retrieval_frequency > 1,
        }
    }

    /// Plain LLM serving without retrieval, used as a reference point.
    pub fn llm_only() -> Self {
        PipelineSpec {
            stages: vec![Stage::Prefix, Stage::Decode],
            iterative: false,
        }
    }

    pub fn is_llm_only(&self) -> bool {
        !self.has(Stage::Retrieve)
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// XPU stages before Decode, in pipeline order.
    pub fn xpu_pre_decode(&self) -> Vec<Stage> {
        self.stages
            .iter()
            .copied()
            .filter(|s| !matches!(s, Stage::Retrieve | Stage::Decode))
            .collect()
    }

    /// Checks the ordering rules of a retrieval pipeline.
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::InvalidValue { key: "pipeline".into(), reason: why.into() });
        if self.stages.is_empty() {
            return Err(Error::EmptyPipeline);
        }
        let n = self.stages.len();
        if n < 2 || self.stages[n - 2] != Stage::Prefix || self.stages[n - 1] != Stage::Decode {
            return bad("prefix and decode must close the pipeline");
        }
        let pos = |s: Stage| self.stages.iter().position(|&x| x == s);
        let mut sorted = self.stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.stages {
            return bad("stages out of order or repeated");
        }
        let Some(r) = pos(Stage::Retrieve) else {
            return bad("retrieve is required");
        };
        if pos(Stage::RewritePrefix).is_some() != pos(Stage::RewriteDecode).is_some() {
            return bad("rewrite stages must appear together");
        }
        if let Some(k) = pos(Stage::Rerank) {
            if k != r + 1 {
                return bad("rerank must follow retrieve");
            }
        }
        Ok(())
    }
}

/// Tokens handled by one stage for one request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTokens {
    /// Independent sequences (or queries) the stage processes per request.
    pub sequences: u64,
    /// Input length of each sequence; for decode stages, the starting context.
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl StageTokens {
    pub fn total_input_tokens(&self) -> u64 {
        self.sequences * self.input_tokens
    }
}

/// Per-stage token counts of one request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFlow {
    pub stages: BTreeMap<Stage, StageTokens>,
}

impl TokenFlow {
    pub fn get(&self, stage: Stage) -> Option<&StageTokens> {
        self.stages.get(&stage)
    }
}

/// Per-stage token counts for a validated schema and profile.
///
/// ```
/// use ragsched::workload::{token_flow, Stage};
/// let (schema, profile) = ragsched::cases::load("case1.8b").unwrap().workload_parts();
/// let flow = token_flow(&schema, &profile).unwrap();
/// assert_eq!(flow.get(Stage::Prefix).unwrap().input_tokens, 512);
/// assert_eq!(flow.get(Stage::Decode).unwrap().output_tokens, 256);
/// ```
pub fn token_flow(schema: &RagSchema, profile: &SequenceProfile) -> Result<TokenFlow> {
    let pipeline = PipelineSpec::from_schema(schema);
    let q = profile.question_tokens as u64;
    let chunk = profile.chunk_tokens as u64;
    let mut stages = BTreeMap::new();
    for &stage in &pipeline.stages {
        let t = match stage {
            Stage::Encode => {
                let n = profile.context_vectors().ok_or_else(|| {
                    Error::MissingField("sequence.context_tokens".into())
                })?;
                StageTokens { sequences: n, input_tokens: chunk, output_tokens: 0 }
            }
            Stage::RewritePrefix => StageTokens { sequences: 1, input_tokens: q, output_tokens: 0 },
            Stage::RewriteDecode => StageTokens {
                sequences: 1,
                input_tokens: q,
                output_tokens: profile.rewrite_output_tokens as u64,
            },
            Stage::Retrieve => StageTokens {
                sequences: schema.queries_per_retrieval as u64,
                input_tokens: q,
                output_tokens: schema.passages_retrieved() as u64 * chunk,
            },
            Stage::Rerank => StageTokens {
                sequences: 1,
                input_tokens: schema.rerank_candidates as u64 * chunk,
                output_tokens: 0,
            },
            Stage::Prefix => StageTokens {
                sequences: 1,
                input_tokens: profile.prompt_tokens as u64,
                output_tokens: 1,
            },
            Stage::Decode => StageTokens {
                sequences: 1,
                input_tokens: profile.prompt_tokens as u64,
                output_tokens: profile.decode_tokens as u64,
            },
        };
        stages.insert(stage, t);
    }
    Ok(TokenFlow { stages })
}

/// Everything the cost models need to know about a workload.
#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub schema: RagSchema,
    pub profile: SequenceProfile,
    pub pipeline: PipelineSpec,
    pub flow: TokenFlow,
}

impl Workload {
    pub fn new(schema: RagSchema, profile: SequenceProfile) -> Result<Self> {
        schema.validate()?;
        profile.validate()?;
        let pipeline = PipelineSpec::from_schema(&schema);
        pipeline.validate()?;
        let flow = token_flow(&schema, &profile)?;
        Ok(Workload { schema, profile, pipeline, flow })
    }

    /// The same generative model serving the bare question, without retrieval.
    pub fn llm_only(schema: RagSchema, profile: SequenceProfile) -> Result<Self> {
        schema.validate()?;
        profile.validate()?;
        let q = profile.question_tokens as u64;
        let mut stages = BTreeMap::new();
        stages.insert(Stage::Prefix, StageTokens { sequences: 1, input_tokens: q, output_tokens: 1 });
        stages.insert(
            Stage::Decode,
            StageTokens { sequences: 1, input_tokens: q, output_tokens: profile.decode_tokens as u64 },
        );
        let schema = RagSchema {
            encoder_params: None,
            rewriter_params: None,
            reranker_params: None,
            retrieval_frequency: 1,
            ..schema
        };
        Ok(Workload {
            schema,
            profile,
            pipeline: PipelineSpec::llm_only(),
            flow: TokenFlow { stages },
        })
    }

    pub fn tokens(&self, stage: Stage) -> Result<&StageTokens> {
        self.flow
            .get(stage)
            .ok_or_else(|| Error::InvalidSchedule(format!("stage {stage} is not part of this workload")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn case1() -> (RagSchema, SequenceProfile) {
        (
            RagSchema {
                encoder_params: None,
                vector_dim: 768,
                n_db_vectors: 64_000_000_000,
                bytes_per_vector: 96,
                retrieval_frequency: 1,
                queries_per_retrieval: 1,
                rewriter_params: None,
                reranker_params: None,
                generative_params: 8_000_000_000,
                rerank_candidates: 5,
                neighbors_used: 5,
            },
            SequenceProfile {
                question_tokens: 32,
                chunk_tokens: 100,
                prompt_tokens: 512,
                decode_tokens: 256,
                context_tokens: None,
                chunk_stride_tokens: 100,
                rewrite_output_tokens: 32,
            },
        )
    }

    #[test]
    fn case1_flow() {
        let (s, p) = case1();
        let f = token_flow(&s, &p).unwrap();
        assert_eq!(f.get(Stage::Prefix).unwrap().input_tokens, 512);
        assert_eq!(f.get(Stage::Decode).unwrap().output_tokens, 256);
        assert_eq!(f.stages.len(), 3);
    }

    #[test]
    fn case2_encode_tokens() {
        let (mut s, mut p) = case1();
        s.encoder_params = Some(120_000_000);
        p.context_tokens = Some(1_000_000);
        p.chunk_tokens = 128;
        p.chunk_stride_tokens = 100;
        let f = token_flow(&s, &p).unwrap();
        let e = f.get(Stage::Encode).unwrap();
        assert_eq!(e.sequences, 10_000);
        assert_eq!(e.total_input_tokens(), 1_280_000);
    }

    #[test]
    fn encode_without_context_errors() {
        let (mut s, p) = case1();
        s.encoder_params = Some(120_000_000);
        assert!(matches!(token_flow(&s, &p), Err(Error::MissingField(_))));
    }

    #[test]
    fn rewrite_same_length() {
        let (mut s, p) = case1();
        s.rewriter_params = Some(8_000_000_000);
        let f = token_flow(&s, &p).unwrap();
        let r = f.get(Stage::RewriteDecode).unwrap();
        assert_eq!((r.input_tokens, r.output_tokens), (32, 32));
    }

    #[test]
    fn pipeline_order_case4() {
        let (mut s, _) = case1();
        s.rewriter_params = Some(8_000_000_000);
        s.reranker_params = Some(120_000_000);
        s.rerank_candidates = 16;
        let p = PipelineSpec::from_schema(&s);
        assert_eq!(
            p.stages,
            vec![
                Stage::RewritePrefix,
                Stage::RewriteDecode,
                Stage::Retrieve,
                Stage::Rerank,
                Stage::Prefix,
                Stage::Decode
            ]
        );
        p.validate().unwrap();
        assert_eq!(p.xpu_pre_decode().len(), 4);
    }

    #[test]
    fn pipeline_rejects_misordered() {
        let p = PipelineSpec {
            stages: vec![Stage::Retrieve, Stage::Prefix, Stage::Rerank, Stage::Decode],
            iterative: false,
        };
        assert!(p.validate().is_err());
        let p = PipelineSpec { stages: vec![], iterative: false };
        assert!(matches!(p.validate(), Err(Error::EmptyPipeline)));
        assert!(PipelineSpec::llm_only().validate().is_err());
    }

    #[test]
    fn neighbors_bounded_by_candidates() {
        let (mut s, _) = case1();
        s.reranker_params = Some(120_000_000);
        s.rerank_candidates = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
    }
}
