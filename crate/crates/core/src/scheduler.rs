//! Exhaustive schedule search.
//!
//! Step 1 profiles every (stage, resources, batch) point and drops batch sizes
//! that are dominated on (latency, throughput) for their stage and resource
//! count. Step 2 walks placements, allocations and batchings. Step 3 scores
//! each schedule and keeps the Pareto frontier.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iterative::SimResult;
use crate::pipeline::{
    decode_throughput, finish_perf, make_llm_extension_baseline, time_per_request, timeline_ttft, ChainStage,
    CostModel, EndToEndPerf, ExecOrder, ProfilePoint, Schedule, SimKey, XpuGroup,
};
use crate::workload::{PipelineSpec, Stage};

/// A metric that can serve as a search objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ttft,
    Tpot,
    Qps,
    QpsPerChip,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Ttft => "ttft",
            Metric::Tpot => "tpot",
            Metric::Qps => "qps",
            Metric::QpsPerChip => "qps_per_chip",
        }
    }

    pub fn minimize(self) -> bool {
        matches!(self, Metric::Ttft | Metric::Tpot)
    }

    pub fn value(self, p: &EndToEndPerf) -> f64 {
        match self {
            Metric::Ttft => p.ttft,
            Metric::Tpot => p.tpot,
            Metric::Qps => p.qps,
            Metric::QpsPerChip => p.qps_per_chip,
        }
    }

    /// The value oriented so that lower is better.
    fn cost(self, p: &EndToEndPerf) -> f64 {
        if self.minimize() {
            self.value(p)
        } else {
            -self.value(p)
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ttft" => Ok(Metric::Ttft),
            "tpot" => Ok(Metric::Tpot),
            "qps" => Ok(Metric::Qps),
            "qps_per_chip" => Ok(Metric::QpsPerChip),
            o => Err(Error::invalid("search.objectives", format!("unknown metric `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Largest batch size tried; a power of two.
    pub max_batch: u32,
    /// A latency metric (ttft or tpot) and a throughput metric (qps or qps_per_chip).
    pub objectives: (Metric, Metric),
    /// Upper bound on TPOT in seconds.
    pub max_tpot: Option<f64>,
    /// Bursts to evaluate TTFT at. Empty means every power of two up to `max_batch`.
    pub burst_sizes: Vec<u32>,
    pub seed: u64,
    /// Trials per iterative-retrieval simulation.
    pub trials: u32,
    /// Drop dominated batch sizes per stage before enumerating.
    pub prune: bool,
    pub order: ExecOrder,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            max_batch: 1024,
            objectives: (Metric::Ttft, Metric::QpsPerChip),
            max_tpot: None,
            burst_sizes: Vec::new(),
            seed: 0,
            trials: 50,
            prune: true,
            order: ExecOrder::LatestStageFirst,
        }
    }
}

impl SearchOptions {
    /// Bursts the search tries, ascending.
    pub fn bursts(&self) -> Vec<u32> {
        let mut v = if self.burst_sizes.is_empty() {
            pow2_upto(self.max_batch)
        } else {
            self.burst_sizes.clone()
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        if !self.max_batch.is_power_of_two() {
            return Err(Error::invalid("search.max_batch_pow2", "must be a power of two"));
        }
        let (a, b) = self.objectives;
        if !matches!(a, Metric::Ttft | Metric::Tpot) || !matches!(b, Metric::Qps | Metric::QpsPerChip) {
            return Err(Error::invalid(
                "search.objectives",
                "expected a latency metric (ttft|tpot) followed by a throughput metric (qps|qps_per_chip)",
            ));
        }
        if self.burst_sizes.contains(&0) {
            return Err(Error::invalid("search.burst_sizes", "bursts must be >= 1"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("search.trials", "must be >= 1"));
        }
        if let Some(t) = self.max_tpot {
            if !(t > 0.0) {
                return Err(Error::invalid("search.max_tpot", "must be positive"));
            }
        }
        Ok(())
    }
}

/// One frontier entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub perf: EndToEndPerf,
    pub schedule: Schedule,
}

fn tie_key(p: &ParetoPoint) -> (u32, String, String) {
    (p.perf.total_xpus, p.schedule.placement_label(), p.schedule.to_string())
}

/// Indices of the non-dominated pairs, where lower is better in both
/// coordinates. Exact duplicates are all kept.
pub fn pareto_indices(costs: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&i, &j| {
        costs[i]
            .0
            .total_cmp(&costs[j].0)
            .then(costs[i].1.total_cmp(&costs[j].1))
            .then(i.cmp(&j))
    });
    let mut keep = Vec::new();
    let mut best_before = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        let a = costs[order[k]].0;
        let group_min = costs[order[k]].1;
        let mut end = k;
        while end < order.len() && costs[order[end]].0 == a {
            end += 1;
        }
        if group_min < best_before {
            keep.extend(order[k..end].iter().copied().filter(|&i| costs[i].1 == group_min));
            best_before = group_min;
        }
        k = end;
    }
    keep
}

/// Non-dominated points, sorted by the first objective then the second.
pub fn pareto_filter(points: Vec<ParetoPoint>, objectives: (Metric, Metric)) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let costs: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (objectives.0.cost(&p.perf), objectives.1.cost(&p.perf)))
        .collect();
    let keep: BTreeSet<usize> = pareto_indices(&costs).into_iter().collect();
    let mut out: Vec<(usize, ParetoPoint)> = points
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .collect();
    out.sort_by(|(i, a), (j, b)| {
        costs[*i]
            .0
            .total_cmp(&costs[*j].0)
            .then(costs[*i].1.total_cmp(&costs[*j].1))
            .then_with(|| tie_key(a).cmp(&tie_key(b)))
    });
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

/// Keep one schedule per distinct objective pair: fewest XPUs, then placement label.
fn dedupe_ties(frontier: Vec<ParetoPoint>, objectives: (Metric, Metric)) -> Vec<ParetoPoint> {
    let mut out: Vec<ParetoPoint> = Vec::with_capacity(frontier.len());
    for p in frontier {
        if let Some(last) = out.last() {
            let same = objectives.0.value(&last.perf) == objectives.0.value(&p.perf)
                && objectives.1.value(&last.perf) == objectives.1.value(&p.perf);
            if same {
                continue;
            }
        }
        out.push(p);
    }
    out
}

/// All ways to split the pre-decode XPU stages into groups of consecutive stages.
///
/// ```
/// use ragsched::workload::{PipelineSpec, Stage};
/// let p = PipelineSpec {
///     stages: vec![Stage::Encode, Stage::Retrieve, Stage::Prefix, Stage::Decode],
///     iterative: false,
/// };
/// assert_eq!(ragsched::scheduler::enumerate_placements(&p).len(), 2);
/// ```
pub fn enumerate_placements(pipeline: &PipelineSpec) -> Vec<Vec<Vec<Stage>>> {
    let stages = pipeline.xpu_pre_decode();
    let k = stages.len();
    if k == 0 {
        return vec![Vec::new()];
    }
    (0u32..1 << (k - 1))
        .map(|cuts| {
            let mut groups = vec![vec![stages[0]]];
            for i in 1..k {
                if cuts & (1 << (i - 1)) != 0 {
                    groups.push(Vec::new());
                }
                groups.last_mut().expect("non-empty").push(stages[i]);
            }
            groups
        })
        .collect()
}

fn pow2_upto(n: u32) -> Vec<u32> {
    (0..32).map(|i| 1u32 << i).take_while(|&v| v <= n).collect()
}

/// Server counts tried: the minimum, powers of two above it, and the budget.
pub fn server_options(min: u32, budget: u32) -> Vec<u32> {
    if min == 0 {
        return vec![0];
    }
    let mut v: BTreeSet<u32> = pow2_upto(budget).into_iter().filter(|&s| s > min).collect();
    v.insert(min);
    v.insert(budget);
    v.into_iter().filter(|&s| s >= min && s <= budget).collect()
}

/// Keep the entries not dominated on the two costs (lower is better); ties are kept.
fn prune_points(points: Vec<(u32, ProfilePoint)>, key: impl Fn(&ProfilePoint) -> (f64, f64)) -> Vec<(u32, ProfilePoint)> {
    let costs: Vec<(f64, f64)> = points.iter().map(|(_, p)| key(p)).collect();
    let keep: BTreeSet<usize> = pareto_indices(&costs).into_iter().collect();
    points
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, p)| p)
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub frontier: Vec<ParetoPoint>,
    /// Complete schedules scored.
    pub evaluated: u64,
    /// (stage, resources, batch) points profiled in step 1.
    pub profiled_points: usize,
}

/// Limits the space to one placement and a fixed allocation.
struct Restriction {
    groups: Vec<Vec<Stage>>,
    chips: Vec<u32>,
    decode_chips: u32,
}

struct Tables {
    /// Candidate pre-decode batches per (stage, resources, burst), ascending.
    pre: HashMap<(Stage, u32, u32), Vec<(u32, ProfilePoint)>>,
    /// Candidate decode batches per chip count, ascending.
    decode: HashMap<u32, Vec<(u32, ProfilePoint)>>,
    /// Every feasible grid point.
    all: HashMap<(Stage, u32, u32), ProfilePoint>,
}

impl Tables {
    fn feasible(&self, stage: Stage, units: u32) -> bool {
        if stage == Stage::Decode {
            return self.decode.get(&units).is_some_and(|l| !l.is_empty());
        }
        self.pre.iter().any(|((s, u, _), l)| *s == stage && *u == units && !l.is_empty())
    }
}

struct Ctx<'a> {
    model: &'a CostModel,
    opts: &'a SearchOptions,
    tables: Tables,
    batch_opts: Vec<u32>,
    chip_opts: Vec<u32>,
    bursts: Vec<u32>,
    sims: Mutex<HashMap<SimKey, SimResult>>,
}

impl Ctx<'_> {
    fn point(&self, stage: Stage, units: u32, batch: u32) -> Result<ProfilePoint> {
        match self.tables.all.get(&(stage, units, batch)) {
            Some(p) => Ok(*p),
            None => self.model.point(stage, units, batch),
        }
    }

    fn sim(&self, key: SimKey, step: f64) -> Result<SimResult> {
        if let Some(r) = self.sims.lock().expect("sim cache poisoned").get(&key) {
            return Ok(*r);
        }
        let r = self.model.simulate_for(key, step)?;
        self.sims.lock().expect("sim cache poisoned").insert(key, r);
        Ok(r)
    }
}

/// Profile every grid point (Step 1). Pre-decode batches are pruned per
/// burst among the batches that fit in it, since the burst bounds them.
fn build_tables(
    model: &CostModel,
    opts: &SearchOptions,
    chip_opts: &[u32],
    servers: &[u32],
    batch_opts: &[u32],
    bursts: &[u32],
) -> Result<Tables> {
    let mut pre = HashMap::new();
    let mut decode = HashMap::new();
    let mut all = HashMap::new();
    let iterative = model.workload.pipeline.iterative;
    for &stage in &model.workload.pipeline.stages {
        let units: &[u32] = if stage == Stage::Retrieve { servers } else { chip_opts };
        for &u in units {
            let mut pts = Vec::new();
            for &b in batch_opts {
                match model.point(stage, u, b) {
                    Ok(p) => {
                        all.insert((stage, u, b), p);
                        pts.push((b, p));
                    }
                    Err(Error::Infeasible(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if stage == Stage::Decode {
                if opts.prune && !iterative {
                    pts = prune_points(pts, |p| (p.tpot, -p.throughput));
                }
                decode.insert(u, pts);
                continue;
            }
            for &burst in bursts {
                let mut fit: Vec<(u32, ProfilePoint)> = pts.iter().copied().filter(|(b, _)| *b <= burst).collect();
                if opts.prune {
                    fit = prune_points(fit, |p| (p.latency, -p.throughput));
                }
                pre.insert((stage, u, burst), fit);
            }
        }
    }
    Ok(Tables { pre, decode, all })
}

/// Pre-decode part of a candidate: everything except the decode pool.
struct PreResult {
    ttft: f64,
    group_tpr: Vec<f64>,
    retrieval_tpr: Option<f64>,
    batches: Vec<u32>,
    burst: u32,
}

impl PreResult {
    fn qps(&self) -> f64 {
        let mut q = f64::INFINITY;
        for &t in &self.group_tpr {
            q = q.min(1.0 / t);
        }
        if let Some(t) = self.retrieval_tpr {
            q = q.min(1.0 / t);
        }
        q
    }
}

struct Candidate {
    qps: f64,
    bound: f64,
    chain: Vec<ChainStage>,
    pre: PreResult,
}

/// A lower bound on the mean TTFT of `chain` for a burst. Each stage runs its
/// micro-batches one after another and cannot start before the shortest
/// possible trip through the stages ahead of it; the stages after it add at
/// least their shortest trip too.
pub(crate) fn ttft_lower_bound(chain: &[ChainStage], burst: u32) -> f64 {
    let shortest: Vec<f64> = chain
        .iter()
        .map(|c| {
            let b = c.batch.min(burst);
            let rem = burst % b;
            let full = c.latency_full + b as f64 * c.comm_per_request;
            if rem == 0 {
                full
            } else {
                full.min(c.latency_partial + rem as f64 * c.comm_per_request)
            }
        })
        .collect();
    let total: f64 = shortest.iter().sum();
    let mut bound = total;
    let mut before = 0.0;
    for (k, c) in chain.iter().enumerate() {
        let after = total - before - shortest[k];
        let b = c.batch.min(burst) as f64;
        let n = (burst as f64 / b).floor();
        let r = burst as f64 - n * b;
        let l = c.latency_full;
        // weighted completions of n identical full batches starting at `start`
        let fulls = |start: f64| b * (n * start + l * n * (n + 1.0) / 2.0);
        let comm = c.comm_per_request * (n * b * b + r * r);
        let weighted = if r == 0.0 {
            fulls(before)
        } else {
            let lp = c.latency_partial;
            let partial_last = fulls(before) + r * (before + n * l + lp);
            let partial_first = r * (before + lp) + fulls(before + lp);
            partial_last.min(partial_first)
        };
        bound = bound.max((weighted + comm) / burst as f64 + after);
        before += shortest[k];
    }
    bound
}

fn chip_tuples(ctx: &Ctx, groups: &[Vec<Stage>], limit: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(groups.len());
    fn rec(ctx: &Ctx, groups: &[Vec<Stage>], left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        let g = cur.len();
        if g == groups.len() {
            out.push(cur.clone());
            return;
        }
        for &c in ctx.chip_opts.iter().filter(|&&c| c <= left) {
            let fits = groups[g].iter().all(|s| ctx.tables.feasible(*s, c));
            if fits {
                cur.push(c);
                rec(ctx, groups, left - c, cur, out);
                cur.pop();
            }
        }
    }
    rec(ctx, groups, limit, &mut cur, &mut out);
    out
}

/// Score all candidates of one (placement, servers, chips) item.
fn process_item(ctx: &Ctx, groups: &[Vec<Stage>], servers: u32, chips: &[u32], decode_fixed: Option<u32>) -> Result<(Vec<ParetoPoint>, u64)> {
    let model = ctx.model;
    let wl = &model.workload;
    let opts = ctx.opts;
    let chain_stages: Vec<Stage> = wl.pipeline.stages.iter().copied().filter(|&s| s != Stage::Decode).collect();
    let group_of = |s: Stage| groups.iter().position(|g| g.contains(&s));
    let units_of = |s: Stage| match s {
        Stage::Retrieve => servers,
        _ => chips[group_of(s).expect("placed")],
    };
    let resource_of = |s: Stage| match s {
        Stage::Retrieve => groups.len(),
        _ => group_of(s).expect("placed"),
    };
    let comm = model.comm_per_request();
    let mut partial_cache: HashMap<(Stage, u32), f64> = HashMap::new();
    let mut cands: Vec<Candidate> = Vec::new();
    for &burst in &ctx.bursts {
        let lists: Vec<&[(u32, ProfilePoint)]> = chain_stages
            .iter()
            .map(|&s| ctx.tables.pre.get(&(s, units_of(s), burst)).map_or(&[][..], |l| l.as_slice()))
            .collect();
        if lists.iter().any(|l| l.is_empty()) {
            continue;
        }
        let mut idx = vec![0usize; chain_stages.len()];
        loop {
            let batches: Vec<u32> = idx.iter().zip(&lists).map(|(&i, l)| l[i].0).collect();
            let mut group_tpr = Vec::with_capacity(groups.len());
            for g in groups {
                let terms: Vec<(f64, u32)> = g
                    .iter()
                    .map(|s| {
                        let k = chain_stages.iter().position(|x| x == s).expect("stage in chain");
                        (lists[k][idx[k]].1.latency, batches[k])
                    })
                    .collect();
                group_tpr.push(time_per_request(&terms));
            }
            let retrieval_tpr = chain_stages
                .iter()
                .position(|&s| s == Stage::Retrieve)
                .map(|k| time_per_request(&[(lists[k][idx[k]].1.latency, batches[k])]));
            let mut chain = Vec::with_capacity(chain_stages.len());
            for (k, &s) in chain_stages.iter().enumerate() {
                let b = batches[k];
                let rem = burst % b;
                let latency_partial = if rem == 0 {
                    0.0
                } else if let Some(&l) = partial_cache.get(&(s, rem)) {
                    l
                } else {
                    let l = ctx.point(s, units_of(s), rem)?.latency;
                    partial_cache.insert((s, rem), l);
                    l
                };
                chain.push(ChainStage {
                    resource: resource_of(s),
                    batch: b,
                    latency_full: lists[k][idx[k]].1.latency,
                    latency_partial,
                    comm_per_request: if s == Stage::Retrieve { comm } else { 0.0 },
                });
            }
            let pre = PreResult { ttft: f64::NAN, group_tpr, retrieval_tpr, batches, burst };
            cands.push(Candidate { qps: pre.qps(), bound: ttft_lower_bound(&chain, burst), chain, pre });
            // advance the odometer
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] < lists[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
    }

    let iterative = wl.pipeline.iterative;
    let simulate_all = iterative || opts.objectives.0 != Metric::Ttft;
    let mut pre_results: Vec<PreResult> = Vec::with_capacity(cands.len());
    if simulate_all {
        for mut c in cands {
            c.pre.ttft = timeline_ttft(&c.chain, groups.len() + 1, c.pre.burst, opts.order);
            pre_results.push(c.pre);
        }
    } else {
        // Highest throughput first: a candidate whose bound already exceeds
        // the best TTFT seen so far is strictly dominated.
        cands.sort_by(|a, b| {
            b.qps
                .total_cmp(&a.qps)
                .then(a.bound.total_cmp(&b.bound))
                .then(a.pre.burst.cmp(&b.pre.burst))
        });
        let mut best = f64::INFINITY;
        for mut c in cands {
            // slack keeps exact ties, whose bound may round above their TTFT
            if c.bound > best + best * 1e-9 {
                continue;
            }
            c.pre.ttft = timeline_ttft(&c.chain, groups.len() + 1, c.pre.burst, opts.order);
            best = best.min(c.pre.ttft);
            pre_results.push(c.pre);
        }
    }

    if !iterative {
        let costs: Vec<(f64, f64)> = pre_results
            .iter()
            .map(|p| {
                let lat = if opts.objectives.0 == Metric::Ttft { p.ttft } else { 0.0 };
                (lat, -p.qps())
            })
            .collect();
        let keep: BTreeSet<usize> = pareto_indices(&costs).into_iter().collect();
        pre_results = pre_results
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, p)| p)
            .collect();
    }

    let pre_chips: u32 = chips.iter().sum();
    let decode_opts: Vec<u32> = match decode_fixed {
        Some(d) => vec![d],
        None => ctx.chip_opts.iter().copied().filter(|&d| pre_chips + d <= model.budget.n_xpus).collect(),
    };
    let prefix_group = group_of(Stage::Prefix).expect("prefix is always placed");
    let r = wl.schema.retrieval_frequency as f64;
    let mut out = Vec::new();
    let mut evaluated = 0u64;
    for &d in &decode_opts {
        let Some(dlist) = ctx.tables.decode.get(&d) else { continue };
        for &(db, dp) in dlist {
            let brs: Vec<Option<u32>> = if iterative {
                ctx.batch_opts.iter().copied().filter(|&b| b <= db).map(Some).collect()
            } else {
                vec![None]
            };
            for br in brs {
                let mut iter_adj = None;
                let (qd, tpot) = match br {
                    None => (decode_throughput(dp.latency, db, 1.0), dp.tpot),
                    Some(br) => {
                        let pc = chips[prefix_group];
                        let (Ok(pre), Ok(ret)) = (
                            ctx.point(Stage::Prefix, pc, br),
                            ctx.point(Stage::Retrieve, servers, br),
                        ) else {
                            continue;
                        };
                        let sim = ctx.sim((db, br, servers, pc, d), dp.tpot)?;
                        iter_adj = Some(((pre.latency * r) / br as f64, (ret.latency * r) / br as f64));
                        (decode_throughput(dp.latency, db, sim.normalized_decode_latency), dp.tpot * sim.normalized_decode_latency)
                    }
                };
                if opts.max_tpot.is_some_and(|m| tpot > m) {
                    continue;
                }
                for pr in &pre_results {
                    evaluated += 1;
                    let mut qps = qd;
                    for (g, &t) in pr.group_tpr.iter().enumerate() {
                        let t = match iter_adj {
                            Some((pa, _)) if g == prefix_group => t + pa,
                            _ => t,
                        };
                        qps = qps.min(1.0 / t);
                    }
                    if let Some(t) = pr.retrieval_tpr {
                        let t = match iter_adj {
                            Some((_, ra)) => t + ra,
                            None => t,
                        };
                        qps = qps.min(1.0 / t);
                    }
                    let mut batch_map: std::collections::BTreeMap<Stage, u32> =
                        chain_stages.iter().copied().zip(pr.batches.iter().copied()).collect();
                    batch_map.insert(Stage::Decode, db);
                    let schedule = Schedule {
                        groups: groups
                            .iter()
                            .zip(chips)
                            .map(|(g, &c)| XpuGroup { stages: g.clone(), chips: c })
                            .collect(),
                        decode_chips: d,
                        retrieval_servers: servers,
                        batches: batch_map,
                        iterative_batch: br,
                        burst: pr.burst,
                    };
                    let perf = finish_perf(pr.ttft, tpot, qps, &schedule, model.budget.xpus_per_host);
                    out.push(ParetoPoint { perf, schedule });
                }
            }
        }
    }
    let out = if out.is_empty() { out } else { pareto_filter(out, opts.objectives)? };
    Ok((out, evaluated))
}

fn run(model: &CostModel, opts: &SearchOptions, restriction: Option<Restriction>) -> Result<SearchResult> {
    opts.validate()?;
    let budget = &model.budget;
    if budget.n_xpus == 0 {
        return Err(Error::InfeasibleBudget("no XPUs".into()));
    }
    let min_s = model.min_servers()?;
    if budget.n_cpu_servers < min_s {
        return Err(Error::InfeasibleBudget(format!(
            "database needs {min_s} servers, budget has {}",
            budget.n_cpu_servers
        )));
    }
    let servers = server_options(min_s, budget.n_cpu_servers);
    let chip_opts = pow2_upto(budget.n_xpus);
    let batch_opts = pow2_upto(opts.max_batch);
    let bursts = opts.bursts();
    let tables = build_tables(model, opts, &chip_opts, &servers, &batch_opts, &bursts)?;
    for &s in &model.workload.pipeline.stages {
        let units: &[u32] = if s == Stage::Retrieve { &servers } else { &chip_opts };
        if !units.iter().any(|&u| tables.feasible(s, u)) {
            return Err(Error::InfeasibleBudget(format!("{s} does not fit on {} XPUs", budget.n_xpus)));
        }
    }
    let profiled_points = tables.all.len();
    let ctx = Ctx {
        model,
        opts,
        tables,
        batch_opts,
        chip_opts,
        bursts,
        sims: Mutex::new(HashMap::new()),
    };

    let mut items: Vec<(Vec<Vec<Stage>>, u32, Vec<u32>, Option<u32>)> = Vec::new();
    match &restriction {
        Some(r) => {
            for &s in &servers {
                items.push((r.groups.clone(), s, r.chips.clone(), Some(r.decode_chips)));
            }
        }
        None => {
            for placement in enumerate_placements(&model.workload.pipeline) {
                for &s in &servers {
                    for chips in chip_tuples(&ctx, &placement, budget.n_xpus.saturating_sub(1)) {
                        items.push((placement.clone(), s, chips, None));
                    }
                }
            }
        }
    }
    let results: Vec<Result<(Vec<ParetoPoint>, u64)>> = items
        .par_iter()
        .map(|(g, s, c, d)| process_item(&ctx, g, *s, c, *d))
        .collect();
    let mut all = Vec::new();
    let mut evaluated = 0;
    for r in results {
        let (pts, n) = r?;
        evaluated += n;
        all.extend(pts);
    }
    if all.is_empty() {
        return Err(Error::EmptySpace);
    }
    let frontier = dedupe_ties(pareto_filter(all, opts.objectives)?, opts.objectives);
    Ok(SearchResult { frontier, evaluated, profiled_points })
}

/// Exhaustive search over placements, allocations and batch sizes.
pub fn search(model: &CostModel, opts: &SearchOptions) -> Result<SearchResult> {
    run(model, opts, None)
}

/// Search restricted to the LLM-extension baseline: every pre-decode stage
/// collocated with prefix, chips split evenly with decode; batches and server
/// counts are still swept.
pub fn search_baseline(model: &CostModel, opts: &SearchOptions) -> Result<SearchResult> {
    let base = make_llm_extension_baseline(&model.workload, &model.budget, model.min_servers()?)?;
    let r = Restriction {
        groups: base.groups.iter().map(|g| g.stages.clone()).collect(),
        chips: base.groups.iter().map(|g| g.chips).collect(),
        decode_chips: base.decode_chips,
    };
    run(model, opts, Some(r))
}

/// Resources each stage needs per request at its most efficient operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceBreakdown {
    /// XPU-seconds per request for each inference stage.
    pub xpu_seconds: Vec<(Stage, f64)>,
    /// Server-seconds per request for retrieval.
    pub server_seconds: f64,
    /// Retrieval's share of the total, counting a server as `xpus_per_host` XPUs.
    pub retrieval_share: f64,
}

/// Cost of each stage at its best (resources, batch) point, and the fraction
/// attributable to retrieval.
pub fn resource_breakdown(model: &CostModel, opts: &SearchOptions) -> Result<ResourceBreakdown> {
    let chip_opts = pow2_upto(model.budget.n_xpus);
    let batch_opts = pow2_upto(opts.max_batch);
    let min_s = model.min_servers()?;
    let mut xpu_seconds = Vec::new();
    let mut server_seconds = 0.0;
    for &stage in &model.workload.pipeline.stages {
        let units = if stage == Stage::Retrieve {
            server_options(min_s, model.budget.n_cpu_servers)
        } else {
            chip_opts.clone()
        };
        let mut best = f64::INFINITY;
        for &u in &units {
            for &b in &batch_opts {
                match model.point(stage, u, b) {
                    Ok(p) => best = best.min(u as f64 / p.throughput),
                    Err(Error::Infeasible(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        if !best.is_finite() {
            return Err(Error::InfeasibleBudget(format!("{stage} has no feasible operating point")));
        }
        if stage == Stage::Retrieve {
            server_seconds = best;
        } else {
            xpu_seconds.push((stage, best));
        }
    }
    let xpu_total: f64 = xpu_seconds.iter().map(|(_, v)| v).sum();
    let host_eq = server_seconds * model.budget.xpus_per_host as f64;
    Ok(ResourceBreakdown {
        xpu_seconds,
        server_seconds,
        retrieval_share: host_eq / (host_eq + xpu_total),
    })
}
