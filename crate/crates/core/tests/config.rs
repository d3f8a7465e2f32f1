use proptest::prelude::*;
use ragsched::cases;
use ragsched::config::{parse_workload, Config};
use ragsched::workload::{token_flow, PipelineSpec, Stage};
use ragsched::Error;

fn doc(
    neighbors: u32,
    question: u32,
    chunk: u32,
    decode: u32,
    freq: u32,
    rewriter: bool,
    reranker: bool,
) -> String {
    let mut w = format!(
        "[workload]\nvector_dim = 768\nn_db_vectors = 1e9\nbytes_per_vector = 64\n\
         generative_params = 8e9\nneighbors_used = {neighbors}\nretrieval_frequency = {freq}\n"
    );
    if rewriter {
        w.push_str("rewriter_params = 1e9\n");
    }
    if reranker {
        w.push_str(&format!("reranker_params = 120e6\nrerank_candidates = {}\n", neighbors * 2));
    }
    format!(
        "{w}\n[sequence]\nquestion_tokens = {question}\nchunk_tokens = {chunk}\ndecode_tokens = {decode}\n\n\
         [hardware]\nxpu = \"xpu-c\"\nn_xpus = 16\nn_cpu_servers = 4\n"
    )
}

proptest! {
    #[test]
    fn round_trip(
        n in 1u32..20, q in 1u32..200, c in 1u32..300, d in 8u32..512,
        f in 1u32..4, rw in any::<bool>(), rr in any::<bool>(),
    ) {
        let cfg = Config::parse(&doc(n, q, c, d, f, rw, rr)).unwrap();
        let again = Config::parse(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(&cfg, &again);
        let w = cfg.workload().unwrap();
        prop_assert!(w.pipeline.validate().is_ok());
        prop_assert_eq!(w.pipeline, PipelineSpec::from_schema(&cfg.schema));
    }

    #[test]
    fn more_neighbors_longer_prompt(n in 1u32..20, q in 1u32..200, c in 1u32..300) {
        let (s1, p1) = parse_workload(&doc(n, q, c, 64, 1, false, false)).unwrap();
        let (s2, p2) = parse_workload(&doc(n + 1, q, c, 64, 1, false, false)).unwrap();
        let a = token_flow(&s1, &p1).unwrap().get(Stage::Prefix).unwrap().input_tokens;
        let b = token_flow(&s2, &p2).unwrap().get(Stage::Prefix).unwrap().input_tokens;
        prop_assert!(b >= a);
    }
}

#[test]
fn case4_schema() {
    let c = cases::load("case4").unwrap();
    assert_eq!(c.schema.rewriter_params, Some(8_000_000_000));
    assert_eq!(c.schema.reranker_params, Some(120_000_000));
    assert_eq!(c.schema.rerank_candidates, 16);
    let w = c.workload().unwrap();
    let rewrite = w.tokens(Stage::RewriteDecode).unwrap();
    assert_eq!((rewrite.input_tokens, rewrite.output_tokens), (32, 32));
    assert_eq!(w.tokens(Stage::Rerank).unwrap().input_tokens, 16 * 100);
}

#[test]
fn long_context_encoder_tokens() {
    let w = cases::load("case2.1m").unwrap().workload().unwrap();
    let enc = w.tokens(Stage::Encode).unwrap();
    assert_eq!(enc.sequences, 10_000);
    assert_eq!(enc.total_input_tokens(), 1_280_000);
}

#[test]
fn malformed_documents() {
    assert!(matches!(Config::parse("[workload"), Err(Error::Parse(_))));
    let text = cases::source("case1.8b").unwrap().replace("n_xpus = 64", "n_xpus = \"many\"");
    assert!(matches!(Config::parse(&text), Err(Error::InvalidValue { .. })));
    let text = cases::source("case1.8b").unwrap().replace("xpu = \"xpu-c\"", "xpu = \"xpu-z\"");
    assert!(matches!(Config::parse(&text), Err(Error::UnknownSpec(_))));
}
