//! TOML configuration.
//!
//! The document has the sections `[workload]`, `[sequence]`, `[hardware]`,
//! `[retrieval]`, `[model_arch.<params>]` and `[search]`. Unknown keys are
//! rejected. Counts may be written as integers or as integral floats
//! (`n_db_vectors = 64e9`). See the guide's CLI chapter for every key.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::hardware::{builtin_cpu, builtin_xpu, ClusterBudget, CpuServerSpec, XpuSpec};
use crate::inference::{ArchTable, ModelArch};
use crate::retrieval::{RetrievalConfig, Routing};
use crate::scheduler::{Metric, SearchOptions};
use crate::workload::{RagSchema, SequenceProfile, Workload};

/// A fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub schema: RagSchema,
    pub profile: SequenceProfile,
    pub budget: ClusterBudget,
    pub retrieval: RetrievalConfig,
    pub archs: ArchTable,
    pub search: SearchOptions,
}

const SECTIONS: [&str; 6] = ["workload", "sequence", "hardware", "retrieval", "model_arch", "search"];

/// Key lookups on one table that remember which keys were read.
struct Section<'a> {
    path: String,
    table: Option<&'a Table>,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> Section<'a> {
    fn new(path: &str, table: Option<&'a Table>) -> Self {
        Section { path: path.to_string(), table, used: RefCell::new(BTreeSet::new()) }
    }

    fn of(root: &'a Table, name: &str) -> Result<Self> {
        match root.get(name) {
            None => Ok(Section::new(name, None)),
            Some(Value::Table(t)) => Ok(Section::new(name, Some(t))),
            Some(_) => Err(Error::Parse(format!("`{name}` must be a table"))),
        }
    }

    fn key(&self, key: &str) -> String {
        format!("{}.{key}", self.path)
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key.to_string());
        self.table.and_then(|t| t.get(key))
    }

    fn count(&self, key: &str) -> Result<Option<u64>> {
        self.get(key).map(|v| as_count(&self.key(key), v)).transpose()
    }

    fn req_count(&self, key: &str) -> Result<u64> {
        self.count(key)?.ok_or_else(|| Error::MissingField(self.key(key)))
    }

    fn count32(&self, key: &str) -> Result<Option<u32>> {
        self.count(key)?
            .map(|v| u32::try_from(v).map_err(|_| Error::invalid(self.key(key), "too large")))
            .transpose()
    }

    fn req_count32(&self, key: &str) -> Result<u32> {
        self.count32(key)?.ok_or_else(|| Error::MissingField(self.key(key)))
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(_) => Err(Error::invalid(self.key(key), "expected a number")),
        }
    }

    fn req_float(&self, key: &str) -> Result<f64> {
        self.float(key)?.ok_or_else(|| Error::MissingField(self.key(key)))
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(_) => Err(Error::invalid(self.key(key), "expected true or false")),
        }
    }

    fn string(&self, key: &str) -> Result<Option<&'a str>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(Error::invalid(self.key(key), "expected a string")),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(t) = self.table {
            let used = self.used.borrow();
            if let Some(k) = t.keys().find(|k| !used.contains(k.as_str())) {
                return Err(Error::UnknownKey(format!("{}.{k}", self.path)));
            }
        }
        Ok(())
    }
}

fn as_count(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::Float(f) if *f >= 0.0 && f.fract() == 0.0 && *f < 1.8e19 => Ok(*f as u64),
        Value::Integer(_) | Value::Float(_) => Err(Error::invalid(key, "expected a non-negative whole number")),
        _ => Err(Error::invalid(key, "expected a number")),
    }
}

fn parse_schema(s: &Section, profile_context: Option<u64>, stride: u32) -> Result<RagSchema> {
    let neighbors_used = s.req_count32("neighbors_used")?;
    let encoder_params = s.count("encoder_params")?;
    let n_db_vectors = match (s.count("n_db_vectors")?, encoder_params, profile_context) {
        (Some(n), _, _) => n,
        (None, Some(_), Some(ctx)) => ctx.div_ceil(stride.max(1) as u64),
        (None, _, _) => return Err(Error::MissingField("workload.n_db_vectors".into())),
    };
    let schema = RagSchema {
        encoder_params,
        vector_dim: s.req_count32("vector_dim")?,
        n_db_vectors,
        bytes_per_vector: s.req_count32("bytes_per_vector")?,
        retrieval_frequency: s.count32("retrieval_frequency")?.unwrap_or(1),
        queries_per_retrieval: s.count32("queries_per_retrieval")?.unwrap_or(1),
        rewriter_params: s.count("rewriter_params")?,
        reranker_params: s.count("reranker_params")?,
        generative_params: s.req_count("generative_params")?,
        rerank_candidates: s.count32("rerank_candidates")?.unwrap_or(neighbors_used),
        neighbors_used,
    };
    schema.validate()?;
    Ok(schema)
}

struct RawProfile {
    question: u32,
    chunk: u32,
    stride: u32,
    prompt: Option<u32>,
    decode: u32,
    context: Option<u64>,
    rewrite_out: Option<u32>,
}

fn parse_raw_profile(s: &Section) -> Result<RawProfile> {
    let chunk = s.req_count32("chunk_tokens")?;
    Ok(RawProfile {
        question: s.req_count32("question_tokens")?,
        chunk,
        stride: s.count32("chunk_stride_tokens")?.unwrap_or(chunk),
        prompt: s.count32("prompt_tokens")?,
        decode: s.req_count32("decode_tokens")?,
        context: s.count("context_tokens")?,
        rewrite_out: s.count32("rewrite_output_tokens")?,
    })
}

fn finish_profile(raw: RawProfile, schema: &RagSchema) -> Result<SequenceProfile> {
    let p = SequenceProfile {
        question_tokens: raw.question,
        chunk_tokens: raw.chunk,
        prompt_tokens: raw
            .prompt
            .unwrap_or(raw.question + schema.neighbors_used * raw.chunk),
        decode_tokens: raw.decode,
        context_tokens: raw.context,
        chunk_stride_tokens: raw.stride,
        rewrite_output_tokens: raw.rewrite_out.unwrap_or(raw.question),
    };
    p.validate()?;
    if schema.encoder_params.is_some() != p.context_tokens.is_some() {
        return Err(Error::invalid(
            "workload.encoder_params",
            "an encoder is present exactly when sequence.context_tokens is given",
        ));
    }
    if let (Some(_), Some(n)) = (schema.encoder_params, p.context_vectors()) {
        if n != schema.n_db_vectors {
            return Err(Error::invalid(
                "workload.n_db_vectors",
                format!("context chunks into {n} vectors"),
            ));
        }
    }
    Ok(p)
}

fn parse_root(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| Error::Parse(e.to_string()))
}

/// Parse and validate the workload part of a config document.
pub fn parse_workload(text: &str) -> Result<(RagSchema, SequenceProfile)> {
    let root = parse_root(text)?;
    workload_from_table(&root)
}

fn workload_from_table(root: &Table) -> Result<(RagSchema, SequenceProfile)> {
    if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(Error::UnknownKey(k.clone()));
    }
    if !root.contains_key("workload") {
        return Err(Error::MissingField("workload".into()));
    }
    if !root.contains_key("sequence") {
        return Err(Error::MissingField("sequence".into()));
    }
    let ws = Section::of(root, "workload")?;
    let ss = Section::of(root, "sequence")?;
    let raw = parse_raw_profile(&ss)?;
    ss.finish()?;
    let schema = parse_schema(&ws, raw.context, raw.stride)?;
    ws.finish()?;
    let profile = finish_profile(raw, &schema)?;
    Ok((schema, profile))
}

fn parse_xpu(v: &Value) -> Result<XpuSpec> {
    match v {
        Value::String(name) => builtin_xpu(name),
        Value::Table(t) => {
            let s = Section::new("hardware.xpu", Some(t));
            let x = XpuSpec {
                peak_compute: s.req_float("peak_compute")?,
                hbm_capacity: s.req_float("hbm_capacity")?,
                hbm_bandwidth: s.req_float("hbm_bandwidth")?,
                ici_bandwidth: s.req_float("ici_bandwidth")?,
                ici_hop_latency: s.float("ici_hop_latency")?.unwrap_or(1e-6),
                compute_efficiency: s.float("compute_efficiency")?.unwrap_or(1.0),
                memory_efficiency: s.float("memory_efficiency")?.unwrap_or(1.0),
            };
            s.finish()?;
            Ok(x)
        }
        _ => Err(Error::invalid("hardware.xpu", "expected a builtin name or a table")),
    }
}

fn parse_cpu(v: &Value) -> Result<CpuServerSpec> {
    match v {
        Value::String(name) => builtin_cpu(name),
        Value::Table(t) => {
            let s = Section::new("hardware.cpu", Some(t));
            let c = CpuServerSpec {
                cores: s.req_count32("cores")?,
                memory_capacity: s.req_float("memory_capacity")?,
                memory_bandwidth: s.req_float("memory_bandwidth")?,
                per_core_scan_throughput: s.req_float("per_core_scan_throughput")?,
                memory_bw_utilization: s.float("memory_bw_utilization")?.unwrap_or(0.8),
            };
            s.finish()?;
            Ok(c)
        }
        _ => Err(Error::invalid("hardware.cpu", "expected a builtin name or a table")),
    }
}

fn parse_budget(s: &Section) -> Result<ClusterBudget> {
    let xpu = match s.get("xpu") {
        Some(v) => parse_xpu(v)?,
        None => builtin_xpu("xpu-c")?,
    };
    let cpu = match s.get("cpu") {
        Some(v) => parse_cpu(v)?,
        None => builtin_cpu("epyc-milan")?,
    };
    let b = ClusterBudget {
        n_xpus: s.req_count32("n_xpus")?,
        xpu,
        n_cpu_servers: s.req_count32("n_cpu_servers")?,
        cpu,
        xpus_per_host: s.count32("xpus_per_host")?.unwrap_or(4),
        host_link_bandwidth: s.float("host_link_bandwidth")?.unwrap_or(32e9),
    };
    b.validate()?;
    Ok(b)
}

fn parse_retrieval(s: &Section) -> Result<RetrievalConfig> {
    let d = RetrievalConfig::default();
    let routing = match s.string("routing")? {
        None | Some("pq") => Routing::Pq,
        Some("float") => Routing::Float,
        Some(o) => return Err(Error::invalid("retrieval.routing", format!("`{o}` is not pq or float"))),
    };
    let r = RetrievalConfig {
        scan_fraction: s.float("scan_fraction")?.unwrap_or(d.scan_fraction),
        fanout: s.count("fanout")?.unwrap_or(d.fanout),
        brute_force: s.boolean("brute_force")?.unwrap_or(d.brute_force),
        bytes_per_token: s.float("bytes_per_token")?.unwrap_or(d.bytes_per_token),
        routing,
    };
    r.validate()?;
    Ok(r)
}

fn parse_archs(root: &Table) -> Result<ArchTable> {
    let mut archs = ArchTable::default();
    let Some(v) = root.get("model_arch") else {
        return Ok(archs);
    };
    let Value::Table(t) = v else {
        return Err(Error::Parse("`model_arch` must be a table".into()));
    };
    for (k, v) in t {
        let path = format!("model_arch.{k}");
        let params = k
            .parse::<f64>()
            .ok()
            .filter(|p| *p >= 1.0 && p.fract() == 0.0)
            .ok_or_else(|| Error::invalid(&path, "key must be a parameter count"))? as u64;
        let Value::Table(body) = v else {
            return Err(Error::Parse(format!("`{path}` must be a table")));
        };
        let s = Section::new(&path, Some(body));
        let base = ModelArch::new(
            params,
            s.req_count32("n_layers")?,
            s.req_count32("d_model")?,
            s.req_count32("gqa_factor")?,
        );
        let arch = ModelArch {
            bytes_per_weight: s.float("bytes_per_weight")?.unwrap_or(base.bytes_per_weight),
            bytes_per_kv: s.float("bytes_per_kv")?.unwrap_or(base.bytes_per_kv),
            attn_fraction: s.float("attn_fraction")?.unwrap_or(base.attn_fraction),
            global_attention_every: s.count32("global_attention_every")?.unwrap_or(1),
            local_window: s.count32("local_window")?.unwrap_or(0),
            ..base
        };
        s.finish()?;
        arch.validate()?;
        archs.overrides.insert(params, arch);
    }
    Ok(archs)
}

fn parse_metric(key: &str, name: &str) -> Result<Metric> {
    name.parse::<Metric>().map_err(|_| Error::invalid(key, format!("unknown metric `{name}`")))
}

fn parse_search(s: &Section) -> Result<SearchOptions> {
    let d = SearchOptions::default();
    let objectives = match s.get("objectives") {
        None => d.objectives,
        Some(Value::Array(a)) if a.len() == 2 => {
            let name = |v: &Value| match v {
                Value::String(x) => parse_metric("search.objectives", x),
                _ => Err(Error::invalid("search.objectives", "expected metric names")),
            };
            (name(&a[0])?, name(&a[1])?)
        }
        Some(_) => return Err(Error::invalid("search.objectives", "expected two metric names")),
    };
    let burst_sizes = match s.get("burst_sizes") {
        None => Vec::new(),
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| {
                as_count("search.burst_sizes", v)
                    .and_then(|x| u32::try_from(x).map_err(|_| Error::invalid("search.burst_sizes", "too large")))
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::invalid("search.burst_sizes", "expected a list")),
    };
    let order = match s.string("order")? {
        None => d.order,
        Some(o) => o.parse()?,
    };
    let opts = SearchOptions {
        max_batch: s.count32("max_batch_pow2")?.unwrap_or(d.max_batch),
        objectives,
        max_tpot: s.float("max_tpot")?.map(|ms| ms / 1e3),
        burst_sizes,
        seed: s.count("seed")?.unwrap_or(d.seed),
        trials: s.count32("trials")?.unwrap_or(d.trials),
        prune: s.boolean("prune")?.unwrap_or(d.prune),
        order,
    };
    opts.validate()?;
    Ok(opts)
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        Config::from_table(&parse_root(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_table(root: &Table) -> Result<Config> {
        let (schema, profile) = workload_from_table(root)?;
        if !root.contains_key("hardware") {
            return Err(Error::MissingField("hardware".into()));
        }
        let hs = Section::of(root, "hardware")?;
        let budget = parse_budget(&hs)?;
        hs.finish()?;
        let rs = Section::of(root, "retrieval")?;
        let retrieval = parse_retrieval(&rs)?;
        rs.finish()?;
        let archs = parse_archs(root)?;
        let ss = Section::of(root, "search")?;
        let search = parse_search(&ss)?;
        ss.finish()?;
        Ok(Config { schema, profile, budget, retrieval, archs, search })
    }

    pub fn workload(&self) -> Result<Workload> {
        Workload::new(self.schema.clone(), self.profile.clone())
    }

    /// The generative model alone, serving the bare question.
    pub fn llm_only_workload(&self) -> Result<Workload> {
        Workload::llm_only(self.schema.clone(), self.profile.clone())
    }

    pub fn workload_parts(&self) -> (RagSchema, SequenceProfile) {
        (self.schema.clone(), self.profile.clone())
    }

    /// Canonical document: every resolved value written out explicitly.
    pub fn to_table(&self) -> Table {
        let mut root = Table::new();
        let int = |v: u64| Value::Integer(v as i64);
        let s = &self.schema;
        let mut w = Table::new();
        if let Some(p) = s.encoder_params {
            w.insert("encoder_params".into(), int(p));
        }
        w.insert("vector_dim".into(), int(s.vector_dim as u64));
        let derived = s.encoder_params.and(self.profile.context_vectors());
        if derived != Some(s.n_db_vectors) {
            w.insert("n_db_vectors".into(), int(s.n_db_vectors));
        }
        w.insert("bytes_per_vector".into(), int(s.bytes_per_vector as u64));
        w.insert("retrieval_frequency".into(), int(s.retrieval_frequency as u64));
        w.insert("queries_per_retrieval".into(), int(s.queries_per_retrieval as u64));
        if let Some(p) = s.rewriter_params {
            w.insert("rewriter_params".into(), int(p));
        }
        if let Some(p) = s.reranker_params {
            w.insert("reranker_params".into(), int(p));
        }
        w.insert("generative_params".into(), int(s.generative_params));
        w.insert("rerank_candidates".into(), int(s.rerank_candidates as u64));
        w.insert("neighbors_used".into(), int(s.neighbors_used as u64));
        root.insert("workload".into(), Value::Table(w));

        let p = &self.profile;
        let mut q = Table::new();
        q.insert("question_tokens".into(), int(p.question_tokens as u64));
        q.insert("chunk_tokens".into(), int(p.chunk_tokens as u64));
        q.insert("chunk_stride_tokens".into(), int(p.chunk_stride_tokens as u64));
        q.insert("prompt_tokens".into(), int(p.prompt_tokens as u64));
        q.insert("decode_tokens".into(), int(p.decode_tokens as u64));
        if let Some(c) = p.context_tokens {
            q.insert("context_tokens".into(), int(c));
        }
        q.insert("rewrite_output_tokens".into(), int(p.rewrite_output_tokens as u64));
        root.insert("sequence".into(), Value::Table(q));

        let b = &self.budget;
        let mut h = Table::new();
        let mut x = Table::new();
        x.insert("peak_compute".into(), Value::Float(b.xpu.peak_compute));
        x.insert("hbm_capacity".into(), Value::Float(b.xpu.hbm_capacity));
        x.insert("hbm_bandwidth".into(), Value::Float(b.xpu.hbm_bandwidth));
        x.insert("ici_bandwidth".into(), Value::Float(b.xpu.ici_bandwidth));
        x.insert("ici_hop_latency".into(), Value::Float(b.xpu.ici_hop_latency));
        x.insert("compute_efficiency".into(), Value::Float(b.xpu.compute_efficiency));
        x.insert("memory_efficiency".into(), Value::Float(b.xpu.memory_efficiency));
        h.insert("xpu".into(), Value::Table(x));
        h.insert("n_xpus".into(), int(b.n_xpus as u64));
        let mut c = Table::new();
        c.insert("cores".into(), int(b.cpu.cores as u64));
        c.insert("memory_capacity".into(), Value::Float(b.cpu.memory_capacity));
        c.insert("memory_bandwidth".into(), Value::Float(b.cpu.memory_bandwidth));
        c.insert("per_core_scan_throughput".into(), Value::Float(b.cpu.per_core_scan_throughput));
        c.insert("memory_bw_utilization".into(), Value::Float(b.cpu.memory_bw_utilization));
        h.insert("cpu".into(), Value::Table(c));
        h.insert("n_cpu_servers".into(), int(b.n_cpu_servers as u64));
        h.insert("xpus_per_host".into(), int(b.xpus_per_host as u64));
        h.insert("host_link_bandwidth".into(), Value::Float(b.host_link_bandwidth));
        root.insert("hardware".into(), Value::Table(h));

        let r = &self.retrieval;
        let mut rt = Table::new();
        rt.insert("scan_fraction".into(), Value::Float(r.scan_fraction));
        rt.insert("fanout".into(), int(r.fanout));
        rt.insert("brute_force".into(), Value::Boolean(r.brute_force));
        rt.insert("bytes_per_token".into(), Value::Float(r.bytes_per_token));
        let routing = match r.routing {
            Routing::Pq => "pq",
            Routing::Float => "float",
        };
        rt.insert("routing".into(), Value::String(routing.into()));
        root.insert("retrieval".into(), Value::Table(rt));

        if !self.archs.overrides.is_empty() {
            let mut m = Table::new();
            for (params, a) in &self.archs.overrides {
                let mut e = Table::new();
                e.insert("n_layers".into(), int(a.n_layers as u64));
                e.insert("d_model".into(), int(a.d_model as u64));
                e.insert("gqa_factor".into(), int(a.gqa_factor as u64));
                e.insert("bytes_per_weight".into(), Value::Float(a.bytes_per_weight));
                e.insert("bytes_per_kv".into(), Value::Float(a.bytes_per_kv));
                e.insert("attn_fraction".into(), Value::Float(a.attn_fraction));
                e.insert("global_attention_every".into(), int(a.global_attention_every as u64));
                e.insert("local_window".into(), int(a.local_window as u64));
                m.insert(params.to_string(), Value::Table(e));
            }
            root.insert("model_arch".into(), Value::Table(m));
        }

        let o = &self.search;
        let mut st = Table::new();
        st.insert("max_batch_pow2".into(), int(o.max_batch as u64));
        st.insert(
            "objectives".into(),
            Value::Array(vec![
                Value::String(o.objectives.0.name().into()),
                Value::String(o.objectives.1.name().into()),
            ]),
        );
        if let Some(t) = o.max_tpot {
            st.insert("max_tpot".into(), Value::Float(t * 1e3));
        }
        st.insert(
            "burst_sizes".into(),
            Value::Array(o.burst_sizes.iter().map(|&b| int(b as u64)).collect()),
        );
        st.insert("seed".into(), int(o.seed));
        st.insert("trials".into(), int(o.trials as u64));
        st.insert("prune".into(), Value::Boolean(o.prune));
        st.insert("order".into(), Value::String(o.order.name().into()));
        root.insert("search".into(), Value::Table(st));
        root
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_table()).expect("config tables always serialize")
    }
}

/// Overwrite the value at a dotted key path, e.g. `workload.queries_per_retrieval`.
/// The value is read as a TOML literal; anything that does not parse is taken as a string.
pub fn set_key(root: &mut Table, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(path, "expected section.key"));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::invalid(path, format!("`{part}` is not a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parse a document into a raw table, for editing with [`set_key`].
pub fn parse_table(text: &str) -> Result<Table> {
    parse_root(text)
}
