//! End-to-end metrics of a schedule.
//!
//! A [`Schedule`] places the XPU stages before decode into groups of
//! consecutive stages, gives each group and the decode pool a power-of-two
//! number of chips, picks the retrieval server count, and fixes a batch size
//! per stage. A group with more than one stage time-multiplexes its chips.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::hardware::ClusterBudget;
use crate::inference::{stage_perf, ArchTable, ModelArch};
use crate::iterative::{simulate, IterConfig, SimResult};
use crate::retrieval::{min_servers, retrieval_perf, DatabaseSpec, RetrievalConfig};
use crate::workload::{Stage, Workload};

/// Which ready micro-batch a collocated group runs next.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecOrder {
    /// The stage closest to the end of the pipeline goes first.
    #[default]
    LatestStageFirst,
    /// First come, first served.
    EarliestReadyFirst,
}

impl ExecOrder {
    pub fn name(self) -> &'static str {
        match self {
            ExecOrder::LatestStageFirst => "latest_stage_first",
            ExecOrder::EarliestReadyFirst => "earliest_ready_first",
        }
    }
}

impl FromStr for ExecOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latest_stage_first" => Ok(ExecOrder::LatestStageFirst),
            "earliest_ready_first" => Ok(ExecOrder::EarliestReadyFirst),
            o => Err(Error::invalid("search.order", format!("unknown order `{o}`"))),
        }
    }
}

/// Stages sharing one pool of chips.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct XpuGroup {
    pub stages: Vec<Stage>,
    pub chips: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schedule {
    /// Groups of pre-decode XPU stages, in pipeline order.
    pub groups: Vec<XpuGroup>,
    pub decode_chips: u32,
    /// Zero for pipelines without retrieval.
    pub retrieval_servers: u32,
    /// Batch size of every stage, in requests.
    pub batches: BTreeMap<Stage, u32>,
    /// Retrieval (and re-prefix) batch for retrievals issued during decode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterative_batch: Option<u32>,
    /// Requests that arrive together when measuring TTFT.
    pub burst: u32,
}

impl Schedule {
    pub fn xpu_chips(&self) -> u32 {
        self.groups.iter().map(|g| g.chips).sum::<u32>() + self.decode_chips
    }

    /// XPUs the schedule occupies. Retrieval hosts carry `xpus_per_host`
    /// accelerators each, so the server count sets a floor.
    pub fn provisioned_xpus(&self, xpus_per_host: u32) -> u32 {
        self.xpu_chips().max(self.retrieval_servers * xpus_per_host)
    }

    pub fn group_of(&self, stage: Stage) -> Option<usize> {
        self.groups.iter().position(|g| g.stages.contains(&stage))
    }

    pub fn batch(&self, stage: Stage) -> Result<u32> {
        self.batches
            .get(&stage)
            .copied()
            .ok_or_else(|| Error::InvalidSchedule(format!("no batch size for {stage}")))
    }

    pub fn placement_label(&self) -> String {
        let groups: Vec<String> = self
            .groups
            .iter()
            .map(|g| g.stages.iter().map(|s| s.name()).collect::<Vec<_>>().join("+"))
            .collect();
        groups.join("|")
    }

    pub fn alloc_label(&self) -> String {
        let chips: Vec<String> = self.groups.iter().map(|g| g.chips.to_string()).collect();
        format!("{};decode:{};servers:{}", chips.join("|"), self.decode_chips, self.retrieval_servers)
    }

    pub fn batches_label(&self) -> String {
        let mut parts: Vec<String> = self.batches.iter().map(|(s, b)| format!("{s}:{b}")).collect();
        if let Some(b) = self.iterative_batch {
            parts.push(format!("iterative:{b}"));
        }
        parts.join(";")
    }

    /// Rebuild a schedule from its CSV labels.
    pub fn from_labels(placement: &str, alloc: &str, batches: &str, burst: u32) -> Result<Schedule> {
        let bad = |what: &str| Error::Parse(format!("malformed {what} label"));
        let mut alloc_parts = alloc.split(';');
        let chips: Vec<u32> = match alloc_parts.next() {
            Some("") | None => Vec::new(),
            Some(s) => s.split('|').map(|c| c.parse().map_err(|_| bad("alloc"))).collect::<Result<_>>()?,
        };
        let mut decode_chips = None;
        let mut servers = None;
        for part in alloc_parts {
            match part.split_once(':') {
                Some(("decode", v)) => decode_chips = Some(v.parse().map_err(|_| bad("alloc"))?),
                Some(("servers", v)) => servers = Some(v.parse().map_err(|_| bad("alloc"))?),
                _ => return Err(bad("alloc")),
            }
        }
        let stage_groups: Vec<Vec<Stage>> = if placement.is_empty() {
            Vec::new()
        } else {
            placement
                .split('|')
                .map(|g| g.split('+').map(Stage::from_str).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?
        };
        if stage_groups.len() != chips.len() {
            return Err(bad("placement/alloc"));
        }
        let groups = stage_groups
            .into_iter()
            .zip(chips)
            .map(|(stages, chips)| XpuGroup { stages, chips })
            .collect();
        let mut map = BTreeMap::new();
        let mut iterative_batch = None;
        for part in batches.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once(':').ok_or_else(|| bad("batches"))?;
            let v: u32 = v.parse().map_err(|_| bad("batches"))?;
            if k == "iterative" {
                iterative_batch = Some(v);
            } else {
                map.insert(k.parse()?, v);
            }
        }
        Ok(Schedule {
            groups,
            decode_chips: decode_chips.ok_or_else(|| bad("alloc"))?,
            retrieval_servers: servers.ok_or_else(|| bad("alloc"))?,
            batches: map,
            iterative_batch,
            burst,
        })
    }

    /// Check the structural rules against a workload and budget.
    pub fn validate(&self, workload: &Workload, budget: &ClusterBudget, min_servers: u32) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSchedule(m));
        let xpu_stages = workload.pipeline.xpu_pre_decode();
        let placed: Vec<Stage> = self.groups.iter().flat_map(|g| g.stages.iter().copied()).collect();
        if placed != xpu_stages {
            return bad(format!(
                "groups must partition the pre-decode XPU stages {xpu_stages:?} in order"
            ));
        }
        for g in &self.groups {
            if g.stages.is_empty() {
                return bad("empty group".into());
            }
            if !g.chips.is_power_of_two() {
                return bad(format!("group chips {} is not a power of two", g.chips));
            }
        }
        if !self.decode_chips.is_power_of_two() {
            return bad("decode chips must be a power of two".into());
        }
        if self.xpu_chips() > budget.n_xpus {
            return bad(format!("uses {} XPUs, budget is {}", self.xpu_chips(), budget.n_xpus));
        }
        if workload.pipeline.is_llm_only() {
            if self.retrieval_servers != 0 {
                return bad("pipeline has no retrieval stage".into());
            }
        } else if self.retrieval_servers < min_servers || self.retrieval_servers > budget.n_cpu_servers {
            return bad(format!(
                "retrieval servers must lie in [{min_servers}, {}]",
                budget.n_cpu_servers
            ));
        }
        if self.burst == 0 {
            return bad("burst must be >= 1".into());
        }
        let expected: Vec<Stage> = workload.pipeline.stages.clone();
        let have: Vec<Stage> = self.batches.keys().copied().collect();
        if have != expected {
            return bad(format!("batch sizes required for exactly {expected:?}"));
        }
        for (&s, &b) in &self.batches {
            if b == 0 {
                return bad(format!("batch of {s} is zero"));
            }
            if s != Stage::Decode && b > self.burst {
                return bad(format!("batch of {s} ({b}) exceeds burst {}", self.burst));
            }
        }
        match (workload.pipeline.iterative, self.iterative_batch) {
            (true, Some(b)) if b >= 1 && b <= self.batch(Stage::Decode)? => Ok(()),
            (true, _) => bad("iterative pipelines need an iterative batch in [1, decode batch]".into()),
            (false, None) => Ok(()),
            (false, Some(_)) => bad("iterative batch given for a non-iterative pipeline".into()),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} burst:{}",
            self.placement_label(),
            self.alloc_label(),
            self.batches_label(),
            self.burst
        )
    }
}

/// Latency and throughput of one stage at one (resources, batch) point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    /// Seconds per batch.
    pub latency: f64,
    /// Requests per second.
    pub throughput: f64,
    /// Seconds per output token; zero for stages that emit no tokens.
    pub tpot: f64,
}

/// Key of an iterative simulation: decode batch, iterative batch, servers,
/// prefix chips, decode chips.
pub type SimKey = (u32, u32, u32, u32, u32);

/// Lookup table of profiled points. Resources are chips for XPU stages and
/// servers for Retrieve.
#[derive(Clone, Debug, Default)]
pub struct StageProfiles {
    pub points: HashMap<(Stage, u32, u32), ProfilePoint>,
    pub sims: HashMap<SimKey, SimResult>,
}

impl StageProfiles {
    pub fn get(&self, stage: Stage, units: u32, batch: u32) -> Result<ProfilePoint> {
        self.points.get(&(stage, units, batch)).copied().ok_or(Error::MissingProfile {
            stage: stage.to_string(),
            chips: units,
            batch,
        })
    }
}

/// End-to-end metrics of one schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEndPerf {
    /// Mean time to first token over the burst.
    pub ttft: f64,
    /// Worst-case time per output token.
    pub tpot: f64,
    pub qps: f64,
    pub qps_per_chip: f64,
    /// Provisioned XPUs, the denominator of `qps_per_chip`.
    pub total_xpus: u32,
    /// XPUs assigned to inference groups.
    pub xpu_chips: u32,
    pub n_servers: u32,
}

/// Everything needed to cost stages for one workload on one cluster.
#[derive(Clone, Debug)]
pub struct CostModel {
    pub workload: Workload,
    pub budget: ClusterBudget,
    pub archs: ArchTable,
    pub retrieval: RetrievalConfig,
    pub db: DatabaseSpec,
    pub sim_seed: u64,
    pub sim_trials: u32,
    pub order: ExecOrder,
}

impl CostModel {
    pub fn new(workload: Workload, cfg: &Config) -> Result<Self> {
        let db = DatabaseSpec::new(&workload.schema, &cfg.retrieval);
        Ok(CostModel {
            workload,
            budget: cfg.budget.clone(),
            archs: cfg.archs.clone(),
            retrieval: cfg.retrieval.clone(),
            db,
            sim_seed: cfg.search.seed,
            sim_trials: cfg.search.trials,
            order: cfg.search.order,
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        CostModel::new(cfg.workload()?, cfg)
    }

    pub fn llm_only_from_config(cfg: &Config) -> Result<Self> {
        CostModel::new(cfg.llm_only_workload()?, cfg)
    }

    pub fn has_retrieval(&self) -> bool {
        !self.workload.pipeline.is_llm_only()
    }

    /// Fewest retrieval servers that hold the database; zero without retrieval.
    pub fn min_servers(&self) -> Result<u32> {
        if self.has_retrieval() {
            min_servers(&self.db, &self.budget.cpu)
        } else {
            Ok(0)
        }
    }

    pub fn arch(&self, stage: Stage) -> Result<ModelArch> {
        let params = self
            .workload
            .schema
            .params_for(stage)
            .ok_or_else(|| Error::InvalidSchedule(format!("{stage} has no model")))?;
        Ok(self.archs.get(params))
    }

    /// Profile an XPU stage.
    pub fn xpu_point(&self, stage: Stage, chips: u32, batch: u32) -> Result<ProfilePoint> {
        let arch = self.arch(stage)?;
        let p = stage_perf(stage, &arch, &self.budget.xpu, chips, batch, self.workload.tokens(stage)?)?;
        Ok(ProfilePoint { latency: p.latency, throughput: p.throughput, tpot: p.tpot.unwrap_or(0.0) })
    }

    /// Profile retrieval of `batch` requests on `servers` servers.
    pub fn retrieval_point(&self, servers: u32, batch: u32) -> Result<ProfilePoint> {
        let q = self.workload.schema.queries_per_retrieval;
        let p = retrieval_perf(&self.db, &self.budget.cpu, servers, batch * q)?;
        Ok(ProfilePoint { latency: p.latency, throughput: batch as f64 / p.latency, tpot: 0.0 })
    }

    pub fn point(&self, stage: Stage, units: u32, batch: u32) -> Result<ProfilePoint> {
        if stage == Stage::Retrieve {
            self.retrieval_point(units, batch)
        } else {
            self.xpu_point(stage, units, batch)
        }
    }

    /// Seconds to ship one request's retrieved passages to the accelerators.
    pub fn comm_per_request(&self) -> f64 {
        if !self.has_retrieval() {
            return 0.0;
        }
        let s = &self.workload.schema;
        let bytes = crate::retrieval::retrieval_comm_bytes(
            s.passages_retrieved() * s.queries_per_retrieval,
            self.workload.profile.chunk_tokens,
            self.retrieval.bytes_per_token,
        );
        bytes / self.budget.host_link_bandwidth
    }

    /// Simulation input for retrievals during decode.
    pub fn iter_config(&self, decode_batch: u32, iterative_batch: u32, servers: u32, prefix_chips: u32) -> Result<IterConfig> {
        let mut retrieval_latency = Vec::with_capacity(iterative_batch as usize);
        let mut prefix_latency = Vec::with_capacity(iterative_batch as usize);
        let comm = self.comm_per_request();
        for k in 1..=iterative_batch {
            retrieval_latency.push(self.retrieval_point(servers, k)?.latency + k as f64 * comm);
            prefix_latency.push(self.xpu_point(Stage::Prefix, prefix_chips, k)?.latency);
        }
        Ok(IterConfig {
            decode_batch,
            retrieval_batch: iterative_batch,
            retrievals_per_seq: self.workload.schema.retrieval_frequency,
            decode_tokens: self.workload.profile.decode_tokens,
            step_latency: 0.0,
            retrieval_latency,
            prefix_latency,
            seed: self.sim_seed,
            n_trials: self.sim_trials,
        })
    }

    /// Run the decode-stall simulation for a schedule's batches.
    pub fn simulate_for(&self, key: SimKey, step: f64) -> Result<SimResult> {
        let (d, br, servers, prefix_chips, _) = key;
        let mut cfg = self.iter_config(d, br, servers, prefix_chips)?;
        cfg.step_latency = step;
        simulate(&cfg)
    }

    /// Profile exactly the points a schedule needs.
    pub fn profile_schedule(&self, sched: &Schedule) -> Result<StageProfiles> {
        let mut prof = StageProfiles::default();
        let add = |stage: Stage, units: u32, batch: u32, prof: &mut StageProfiles| -> Result<()> {
            if !prof.points.contains_key(&(stage, units, batch)) {
                prof.points.insert((stage, units, batch), self.point(stage, units, batch)?);
            }
            Ok(())
        };
        for &stage in &self.workload.pipeline.stages {
            let units = units_for(sched, stage)?;
            let b = sched.batch(stage)?;
            add(stage, units, b, &mut prof)?;
            if stage != Stage::Decode && sched.burst % b != 0 {
                add(stage, units, sched.burst % b, &mut prof)?;
            }
        }
        if self.workload.pipeline.iterative {
            let br = sched.iterative_batch.ok_or(Error::MissingSimulation {
                decode_batch: sched.batch(Stage::Decode)?,
                retrieval_batch: 0,
            })?;
            let prefix_chips = units_for(sched, Stage::Prefix)?;
            add(Stage::Retrieve, sched.retrieval_servers, br, &mut prof)?;
            add(Stage::Prefix, prefix_chips, br, &mut prof)?;
            let d = sched.batch(Stage::Decode)?;
            let step = prof.get(Stage::Decode, sched.decode_chips, d)?.tpot;
            let key = (d, br, sched.retrieval_servers, prefix_chips, sched.decode_chips);
            prof.sims.insert(key, self.simulate_for(key, step)?);
        }
        Ok(prof)
    }

    /// Validate, profile and score one schedule.
    pub fn evaluate(&self, sched: &Schedule) -> Result<EndToEndPerf> {
        sched.validate(&self.workload, &self.budget, self.min_servers()?)?;
        let prof = self.profile_schedule(sched)?;
        let qps = e2e_qps(sched, &self.workload, &prof)?;
        let ttft = e2e_ttft(sched, &self.workload, &prof, self.comm_per_request(), self.order)?;
        let tpot = e2e_tpot(sched, &self.workload, &prof)?;
        Ok(finish_perf(ttft, tpot, qps, sched, self.budget.xpus_per_host))
    }
}

/// Chips (or servers, for Retrieve) a stage runs on.
pub fn units_for(sched: &Schedule, stage: Stage) -> Result<u32> {
    match stage {
        Stage::Retrieve => Ok(sched.retrieval_servers),
        Stage::Decode => Ok(sched.decode_chips),
        s => sched
            .group_of(s)
            .map(|g| sched.groups[g].chips)
            .ok_or_else(|| Error::InvalidSchedule(format!("{s} is not placed"))),
    }
}

pub(crate) fn finish_perf(ttft: f64, tpot: f64, qps: f64, sched: &Schedule, xpus_per_host: u32) -> EndToEndPerf {
    let total = sched.provisioned_xpus(xpus_per_host);
    EndToEndPerf {
        ttft,
        tpot,
        qps,
        qps_per_chip: qps / total as f64,
        total_xpus: total,
        xpu_chips: sched.xpu_chips(),
        n_servers: sched.retrieval_servers,
    }
}

/// Seconds of a time-multiplexed resource spent per request.
pub(crate) fn time_per_request(terms: &[(f64, u32)]) -> f64 {
    terms.iter().fold(0.0, |acc, &(lat, b)| acc + lat / b as f64)
}

/// Throughput of every resource: one entry per XPU group, then retrieval
/// (if present), then decode.
pub fn group_throughputs(sched: &Schedule, workload: &Workload, prof: &StageProfiles) -> Result<Vec<f64>> {
    let iter = iterative_terms(sched, workload, prof)?;
    let mut out = Vec::with_capacity(sched.groups.len() + 2);
    for g in &sched.groups {
        let mut terms = Vec::with_capacity(g.stages.len() + 1);
        for &s in &g.stages {
            let b = sched.batch(s)?;
            terms.push((prof.get(s, g.chips, b)?.latency, b));
        }
        if let (Some(it), true) = (&iter, g.stages.contains(&Stage::Prefix)) {
            terms.push(it.prefix);
        }
        out.push(1.0 / time_per_request(&terms));
    }
    if !workload.pipeline.is_llm_only() {
        let b = sched.batch(Stage::Retrieve)?;
        let mut terms = vec![(prof.get(Stage::Retrieve, sched.retrieval_servers, b)?.latency, b)];
        if let Some(it) = &iter {
            terms.push(it.retrieval);
        }
        out.push(1.0 / time_per_request(&terms));
    }
    let d = sched.batch(Stage::Decode)?;
    let dp = prof.get(Stage::Decode, sched.decode_chips, d)?;
    let slow = iter.as_ref().map_or(1.0, |it| it.sim.normalized_decode_latency);
    out.push(decode_throughput(dp.latency, d, slow));
    Ok(out)
}

pub(crate) fn decode_throughput(latency: f64, batch: u32, slowdown: f64) -> f64 {
    batch as f64 / (latency * slowdown)
}

struct IterTerms {
    prefix: (f64, u32),
    retrieval: (f64, u32),
    sim: SimResult,
}

fn iterative_terms(sched: &Schedule, workload: &Workload, prof: &StageProfiles) -> Result<Option<IterTerms>> {
    if !workload.pipeline.iterative {
        return Ok(None);
    }
    let d = sched.batch(Stage::Decode)?;
    let missing = |br| Error::MissingSimulation { decode_batch: d, retrieval_batch: br };
    let br = sched.iterative_batch.ok_or_else(|| missing(0))?;
    let prefix_chips = units_for(sched, Stage::Prefix)?;
    let sim = *prof
        .sims
        .get(&(d, br, sched.retrieval_servers, prefix_chips, sched.decode_chips))
        .ok_or_else(|| missing(br))?;
    let r = workload.schema.retrieval_frequency;
    let pre = prof.get(Stage::Prefix, prefix_chips, br)?.latency;
    let ret = prof.get(Stage::Retrieve, sched.retrieval_servers, br)?.latency;
    // r iterative passes per request, each amortized over a batch of br
    Ok(Some(IterTerms {
        prefix: (pre * r as f64, br),
        retrieval: (ret * r as f64, br),
        sim,
    }))
}

/// Requests per second: the slowest resource bounds the pipeline.
pub fn e2e_qps(sched: &Schedule, workload: &Workload, prof: &StageProfiles) -> Result<f64> {
    let t = group_throughputs(sched, workload, prof)?;
    Ok(t.into_iter().fold(f64::INFINITY, f64::min))
}

/// Worst-case time per output token, including retrieval stalls when decode is iterative.
pub fn e2e_tpot(sched: &Schedule, workload: &Workload, prof: &StageProfiles) -> Result<f64> {
    let d = sched.batch(Stage::Decode)?;
    let step = prof.get(Stage::Decode, sched.decode_chips, d)?.tpot;
    match iterative_terms(sched, workload, prof)? {
        None => Ok(step),
        Some(it) => Ok(step * it.sim.normalized_decode_latency),
    }
}

/// One stage of the burst timeline.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChainStage {
    pub resource: usize,
    pub batch: u32,
    pub latency_full: f64,
    /// Latency of the trailing partial micro-batch, if the burst leaves one.
    pub latency_partial: f64,
    /// Transfer time added per request after the stage completes.
    pub comm_per_request: f64,
}

/// Mean time to first token of a burst.
pub fn e2e_ttft(
    sched: &Schedule,
    workload: &Workload,
    prof: &StageProfiles,
    comm_per_request: f64,
    order: ExecOrder,
) -> Result<f64> {
    let chain = build_chain(sched, workload, |s, units, b| Ok(prof.get(s, units, b)?.latency), comm_per_request)?;
    Ok(timeline_ttft(&chain, sched.groups.len() + 1, sched.burst, order))
}

pub(crate) fn build_chain(
    sched: &Schedule,
    workload: &Workload,
    mut latency: impl FnMut(Stage, u32, u32) -> Result<f64>,
    comm_per_request: f64,
) -> Result<Vec<ChainStage>> {
    let stages: Vec<Stage> = workload
        .pipeline
        .stages
        .iter()
        .copied()
        .filter(|&s| s != Stage::Decode)
        .collect();
    if stages.is_empty() {
        return Err(Error::EmptyPipeline);
    }
    let mut chain = Vec::with_capacity(stages.len());
    for s in stages {
        let b = sched.batch(s)?.min(sched.burst);
        let units = units_for(sched, s)?;
        let resource = match s {
            Stage::Retrieve => sched.groups.len(),
            _ => sched.group_of(s).expect("units_for checked placement"),
        };
        let rem = sched.burst % b;
        chain.push(ChainStage {
            resource,
            batch: b,
            latency_full: latency(s, units, b)?,
            latency_partial: if rem == 0 { 0.0 } else { latency(s, units, rem)? },
            comm_per_request: if s == Stage::Retrieve { comm_per_request } else { 0.0 },
        });
    }
    Ok(chain)
}

/// Simulate a burst of `burst` requests flowing through `chain`; returns the
/// mean completion time of the last stage.
pub(crate) fn timeline_ttft(chain: &[ChainStage], n_resources: usize, burst: u32, order: ExecOrder) -> f64 {
    let burst = burst as usize;
    let n = chain.len();
    let sizes: Vec<usize> = chain.iter().map(|c| c.batch as usize).collect();
    let n_batches: Vec<usize> = sizes.iter().map(|&b| burst.div_ceil(b)).collect();
    let size_of = |s: usize, m: usize| sizes[s].min(burst - m * sizes[s]);
    let mut remaining: Vec<Vec<usize>> = (0..n)
        .map(|s| (0..n_batches[s]).map(|m| size_of(s, m)).collect())
        .collect();
    let mut ready: Vec<Vec<f64>> = n_batches.iter().map(|&k| vec![0.0; k]).collect();

    type Key = (u64, u64, u64, usize, usize);
    let mut free_at = vec![0.0f64; n_resources];
    let mut pending: Vec<BinaryHeap<Reverse<(u64, usize, usize)>>> = vec![BinaryHeap::new(); n_resources];
    let mut avail: Vec<BinaryHeap<Key>> = vec![BinaryHeap::new(); n_resources];
    for m in 0..n_batches[0] {
        pending[chain[0].resource].push(Reverse((0f64.to_bits(), 0, m)));
    }
    let key = |ready_t: f64, s: usize, m: usize| -> Key {
        match order {
            ExecOrder::LatestStageFirst => (s as u64, u64::MAX - m as u64, 0, s, m),
            ExecOrder::EarliestReadyFirst => (
                u64::MAX - ready_t.to_bits(),
                u64::MAX - s as u64,
                u64::MAX - m as u64,
                s,
                m,
            ),
        }
    };

    let mut ttft_sum = 0.0;
    loop {
        let mut pick: Option<(f64, usize)> = None;
        for r in 0..n_resources {
            let t = if !avail[r].is_empty() {
                free_at[r]
            } else if let Some(Reverse((bits, _, _))) = pending[r].peek() {
                free_at[r].max(f64::from_bits(*bits))
            } else {
                continue;
            };
            if pick.is_none_or(|(bt, _)| t < bt) {
                pick = Some((t, r));
            }
        }
        let Some((t, r)) = pick else { break };
        while let Some(&Reverse((bits, s, m))) = pending[r].peek() {
            if f64::from_bits(bits) > t {
                break;
            }
            pending[r].pop();
            avail[r].push(key(f64::from_bits(bits), s, m));
        }
        let (_, _, _, s, m) = avail[r].pop().expect("a ready batch exists at the decision time");
        let size = size_of(s, m);
        let lat = if size == sizes[s] { chain[s].latency_full } else { chain[s].latency_partial };
        let end = t + lat;
        free_at[r] = end;
        let done = end + size as f64 * chain[s].comm_per_request;
        if s + 1 == n {
            ttft_sum += done * size as f64;
            continue;
        }
        // hand the finished requests to the next stage's micro-batches
        let (lo, hi) = (m * sizes[s], m * sizes[s] + size);
        let nb = sizes[s + 1];
        let mut j = lo / nb;
        while j * nb < hi {
            let overlap = hi.min((j + 1) * nb) - lo.max(j * nb);
            remaining[s + 1][j] -= overlap;
            if done > ready[s + 1][j] {
                ready[s + 1][j] = done;
            }
            if remaining[s + 1][j] == 0 {
                pending[chain[s + 1].resource].push(Reverse((ready[s + 1][j].to_bits(), s + 1, j)));
            }
            j += 1;
        }
    }
    ttft_sum / burst as f64
}

/// The reference schedule that treats every pre-decode stage as part of the
/// LLM prefix: one collocated group, chips split evenly with decode.
pub fn make_llm_extension_baseline(workload: &Workload, budget: &ClusterBudget, min_servers: u32) -> Result<Schedule> {
    if budget.n_xpus < 2 {
        return Err(Error::InfeasibleBudget(format!("{} XPUs cannot be split in two", budget.n_xpus)));
    }
    if budget.n_cpu_servers < min_servers {
        return Err(Error::InfeasibleBudget(format!(
            "{} servers cannot hold the database (needs {min_servers})",
            budget.n_cpu_servers
        )));
    }
    let half = budget.n_xpus / 2;
    let chips = 1u32 << (31 - half.leading_zeros());
    if chips * 2 != budget.n_xpus {
        log::warn!(
            "{} XPUs do not split into equal powers of two; using {chips} + {chips}",
            budget.n_xpus
        );
    }
    let stages = workload.pipeline.xpu_pre_decode();
    let batches = workload.pipeline.stages.iter().map(|&s| (s, 1)).collect();
    Ok(Schedule {
        groups: vec![XpuGroup { stages, chips }],
        decode_chips: chips,
        retrieval_servers: if workload.pipeline.is_llm_only() { 0 } else { min_servers },
        batches,
        iterative_batch: workload.pipeline.iterative.then_some(1),
        burst: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(latencies: &[(usize, u32, f64)]) -> Vec<ChainStage> {
        latencies
            .iter()
            .map(|&(resource, batch, l)| ChainStage {
                resource,
                batch,
                latency_full: l,
                latency_partial: l,
                comm_per_request: 0.0,
            })
            .collect()
    }

    #[test]
    fn burst_one_is_a_sum() {
        let c = chain(&[(0, 1, 0.5), (1, 1, 0.25), (0, 1, 1.0)]);
        assert_eq!(timeline_ttft(&c, 2, 1, ExecOrder::LatestStageFirst), 1.75);
    }

    #[test]
    fn micro_batches_pipeline_through() {
        // two disaggregated stages, 4 requests in micro-batches of 1, 1 s each
        let c = chain(&[(0, 1, 1.0), (1, 1, 1.0)]);
        // completions at 2, 3, 4, 5
        assert_eq!(timeline_ttft(&c, 2, 4, ExecOrder::LatestStageFirst), 3.5);
    }

    #[test]
    fn latest_stage_first_on_shared_resource() {
        // both stages on one resource: LSF finishes request 0 first
        let c = chain(&[(0, 1, 1.0), (0, 1, 1.0)]);
        let lsf = timeline_ttft(&c, 1, 2, ExecOrder::LatestStageFirst);
        let fifo = timeline_ttft(&c, 1, 2, ExecOrder::EarliestReadyFirst);
        // LSF: a0 (0-1), b0 (1-2), a1 (2-3), b1 (3-4) -> mean 3
        assert_eq!(lsf, 3.0);
        // FIFO: a0, a1 ready at 0; a1 runs before b0 -> b0 at 2-3, b1 3-4 -> mean 3.5
        assert_eq!(fifo, 3.5);
    }

    #[test]
    fn partial_last_batch_uses_its_own_latency() {
        let c = vec![ChainStage {
            resource: 0,
            batch: 2,
            latency_full: 2.0,
            latency_partial: 1.0,
            comm_per_request: 0.0,
        }];
        // batches {2, 1}: done at 2 and 3
        assert_eq!(timeline_ttft(&c, 1, 3, ExecOrder::LatestStageFirst), (2.0 * 2.0 + 3.0) / 3.0);
    }

    #[test]
    fn labels_round_trip() {
        let mut batches = BTreeMap::new();
        batches.insert(Stage::Encode, 2);
        batches.insert(Stage::Retrieve, 2);
        batches.insert(Stage::Prefix, 128);
        batches.insert(Stage::Decode, 1024);
        let s = Schedule {
            groups: vec![
                XpuGroup { stages: vec![Stage::Encode], chips: 64 },
                XpuGroup { stages: vec![Stage::Prefix], chips: 16 },
            ],
            decode_chips: 16,
            retrieval_servers: 1,
            batches,
            iterative_batch: None,
            burst: 128,
        };
        let back = Schedule::from_labels(&s.placement_label(), &s.alloc_label(), &s.batches_label(), 128).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.placement_label(), "encode|prefix");
        assert_eq!(s.alloc_label(), "64|16;decode:16;servers:1");
    }
}
