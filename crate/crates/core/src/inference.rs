//! Roofline cost model for transformer inference stages on sharded XPUs.
//!
//! A prefix-like stage (encode, rewrite prefix, rerank, prefix) is one forward
//! pass over its input tokens. A decode-like stage is costed per generated
//! token at the worst-case context length reached at the end of generation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::XpuSpec;
use crate::workload::{Stage, StageTokens};

/// Transformer shape used by the cost model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub params: u64,
    pub n_layers: u32,
    pub d_model: u32,
    /// Query heads per KV head.
    pub gqa_factor: u32,
    pub bytes_per_weight: f64,
    pub bytes_per_kv: f64,
    /// Scale on the attention FLOPs term; 0 disables it.
    pub attn_fraction: f64,
    /// Every n-th layer attends globally; the rest use `local_window`. 1 means all layers are global.
    pub global_attention_every: u32,
    /// Attention window of non-global layers, in tokens.
    pub local_window: u32,
}

/// Default shapes, keyed by parameter count. These are public model families
/// of matching size, not measured values.
const ARCH_TABLE: [(u64, u32, u32, u32); 5] = [
    (120_000_000, 12, 768, 1),
    (1_000_000_000, 16, 2048, 4),
    (8_000_000_000, 32, 4096, 4),
    (70_000_000_000, 80, 8192, 8),
    (405_000_000_000, 126, 16384, 16),
];

impl ModelArch {
    pub fn new(params: u64, n_layers: u32, d_model: u32, gqa_factor: u32) -> Self {
        ModelArch {
            params,
            n_layers,
            d_model,
            gqa_factor,
            bytes_per_weight: 1.0,
            bytes_per_kv: 2.0,
            attn_fraction: 1.0,
            global_attention_every: 1,
            local_window: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params == 0 || self.n_layers == 0 || self.d_model == 0 || self.gqa_factor == 0 {
            return Err(Error::invalid("model_arch", "params, n_layers, d_model and gqa_factor must be >= 1"));
        }
        if self.global_attention_every == 0 {
            return Err(Error::invalid("model_arch.global_attention_every", "must be >= 1"));
        }
        if !(self.bytes_per_weight > 0.0 && self.bytes_per_kv > 0.0 && self.attn_fraction >= 0.0) {
            return Err(Error::invalid("model_arch", "byte widths must be positive, attn_fraction >= 0"));
        }
        Ok(())
    }

    pub fn weight_bytes(&self) -> f64 {
        self.params as f64 * self.bytes_per_weight
    }

    fn global_layers(&self) -> u32 {
        self.n_layers.div_ceil(self.global_attention_every)
    }

    fn local_layers(&self) -> u32 {
        self.n_layers - self.global_layers()
    }

    /// Tokens a local layer attends to (and caches) at context length `ctx`.
    fn local_span(&self, ctx: f64) -> f64 {
        if self.local_window == 0 {
            ctx
        } else {
            ctx.min(self.local_window as f64)
        }
    }

    /// KV bytes of one layer for one token.
    pub fn kv_bytes_per_token_layer(&self) -> f64 {
        2.0 * self.d_model as f64 * self.bytes_per_kv / self.gqa_factor as f64
    }

    /// KV bytes of one token across all layers, when every layer is global.
    pub fn kv_bytes_per_token(&self) -> f64 {
        self.n_layers as f64 * self.kv_bytes_per_token_layer()
    }

    /// KV cache of one sequence at context length `ctx`.
    pub fn kv_bytes(&self, ctx: f64) -> f64 {
        let per = self.kv_bytes_per_token_layer();
        per * (self.global_layers() as f64 * ctx + self.local_layers() as f64 * self.local_span(ctx))
    }

    /// Forward-pass FLOPs of one sequence of `len` tokens.
    pub fn prefix_flops(&self, len: f64) -> f64 {
        let d = self.d_model as f64;
        let attn = 4.0
            * d
            * len
            * (self.global_layers() as f64 * len + self.local_layers() as f64 * self.local_span(len));
        2.0 * self.params as f64 * len + attn * self.attn_fraction
    }
}

/// Default shape for a parameter count; unknown sizes fall back to the
/// nearest entry on a log scale, with a warning.
///
/// ```
/// let a = ragsched::inference::arch_for_params(8_000_000_000);
/// assert_eq!((a.n_layers, a.d_model, a.gqa_factor), (32, 4096, 4));
/// ```
pub fn arch_for_params(params: u64) -> ModelArch {
    let target = (params.max(1) as f64).ln();
    let &(p, l, d, g) = ARCH_TABLE
        .iter()
        .min_by(|a, b| {
            let da = ((a.0 as f64).ln() - target).abs();
            let db = ((b.0 as f64).ln() - target).abs();
            da.total_cmp(&db)
        })
        .expect("table is non-empty");
    if p != params {
        log::warn!("no architecture for {params} parameters; using the {p}-parameter shape");
    }
    ModelArch::new(params, l, d, g)
}

/// Architecture lookup with per-size overrides from the config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchTable {
    pub overrides: BTreeMap<u64, ModelArch>,
}

impl ArchTable {
    pub fn get(&self, params: u64) -> ModelArch {
        self.overrides
            .get(&params)
            .cloned()
            .unwrap_or_else(|| arch_for_params(params))
    }
}

/// Total work of one batch of a stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageWork {
    pub flops: f64,
    pub mem_bytes: f64,
    pub kv_bytes: f64,
}

/// Work of `batch` requests through `stage`. Decode-like stages report one
/// step at the worst-case context.
pub fn stage_workload(stage: Stage, arch: &ModelArch, tokens: &StageTokens, batch: u32) -> StageWork {
    let nseq = batch as f64 * tokens.sequences as f64;
    work_for(stage, arch, tokens, nseq)
}

fn work_for(stage: Stage, arch: &ModelArch, tokens: &StageTokens, nseq: f64) -> StageWork {
    if stage.is_decode_like() {
        let ctx = (tokens.input_tokens + tokens.output_tokens) as f64;
        let kv = nseq * arch.kv_bytes(ctx);
        StageWork {
            flops: nseq * 2.0 * arch.params as f64,
            mem_bytes: arch.weight_bytes() + kv,
            kv_bytes: kv,
        }
    } else {
        let len = tokens.input_tokens as f64;
        let kv = if stage.keeps_kv() { nseq * arch.kv_bytes(len) } else { 0.0 };
        StageWork {
            flops: nseq * arch.prefix_flops(len),
            mem_bytes: arch.weight_bytes() + kv,
            kv_bytes: kv,
        }
    }
}

/// Time of a kernel bounded by either compute or memory traffic.
///
/// ```
/// let c = ragsched::hardware::builtin_xpu("xpu-c").unwrap();
/// let t = ragsched::inference::roofline_latency(8.19e12, 8e9, &c);
/// assert!((t - 8.19e12 / 459e12).abs() < 1e-12);
/// ```
pub fn roofline_latency(flops: f64, mem_bytes: f64, xpu: &XpuSpec) -> f64 {
    (flops / xpu.effective_compute()).max(mem_bytes / xpu.effective_bandwidth())
}

/// One way to spread a stage over chips: `dp` replicas, each split `tp` ways
/// within a layer and `pp` ways across layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub n_chips: u32,
    pub data_parallel_degree: u32,
    pub tensor_parallel_degree: u32,
    pub pipeline_parallel_degree: u32,
    pub per_chip_flops: f64,
    pub per_chip_bytes: f64,
    /// Bytes moved between chips of one replica during one pass.
    pub comm_bytes_per_pass: f64,
    /// Time of one pass (a forward pass, or one decode step).
    pub latency: f64,
    /// HBM occupied across all chips.
    pub hbm_used: f64,
}

fn divisors(n: u32) -> impl Iterator<Item = u32> {
    (1..=n).filter(move |d| n % d == 0)
}

fn evaluate_plan(
    stage: Stage,
    arch: &ModelArch,
    xpu: &XpuSpec,
    tokens: &StageTokens,
    nseq: u64,
    dp: u32,
    tp: u32,
    pp: u32,
) -> Option<ShardPlan> {
    let s = nseq.div_ceil(dp as u64) as f64;
    let work = work_for(stage, arch, tokens, s);
    let split = (tp * pp) as f64;
    let per_chip_bytes = work.mem_bytes / split;
    if per_chip_bytes > xpu.hbm_capacity {
        return None;
    }
    let per_chip_flops = work.flops / split;
    let step_tokens = if stage.is_decode_like() { 1.0 } else { tokens.input_tokens as f64 };
    let act_bytes = s * step_tokens * arch.d_model as f64 * arch.bytes_per_kv;
    let layers_per_stage = arch.n_layers as f64 / pp as f64;
    let compute = roofline_latency(per_chip_flops, per_chip_bytes, xpu);
    let (tp_time, tp_bytes) = if tp > 1 {
        // two all-reduces per layer
        let bytes = 2.0 * 2.0 * act_bytes * layers_per_stage;
        let hops = 2.0 * layers_per_stage * 2.0 * (tp - 1) as f64;
        (bytes / xpu.ici_bandwidth + hops * xpu.ici_hop_latency, bytes)
    } else {
        (0.0, 0.0)
    };
    let handoffs = (pp - 1) as f64;
    let handoff_time = act_bytes / xpu.ici_bandwidth;
    let latency = pp as f64 * (compute + tp_time) + handoffs * handoff_time;
    Some(ShardPlan {
        n_chips: dp * tp * pp,
        data_parallel_degree: dp,
        tensor_parallel_degree: tp,
        pipeline_parallel_degree: pp,
        per_chip_flops,
        per_chip_bytes,
        comm_bytes_per_pass: tp_bytes * pp as f64 + handoffs * act_bytes,
        latency,
        hbm_used: work.mem_bytes * dp as f64,
    })
}

/// The lowest-latency (dp, tp, pp) factorization of `n_chips` that fits in HBM.
pub fn shard(
    stage: Stage,
    arch: &ModelArch,
    xpu: &XpuSpec,
    n_chips: u32,
    tokens: &StageTokens,
    batch: u32,
) -> Result<ShardPlan> {
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if n_chips == 0 {
        return Err(Error::Infeasible("zero chips".into()));
    }
    let nseq = batch as u64 * tokens.sequences.max(1);
    let mut best: Option<ShardPlan> = None;
    for tp in divisors(n_chips) {
        for pp in divisors(n_chips / tp).filter(|&pp| pp <= arch.n_layers) {
            let dp = n_chips / (tp * pp);
            if let Some(plan) = evaluate_plan(stage, arch, xpu, tokens, nseq, dp, tp, pp) {
                if best.is_none_or(|b| plan.latency < b.latency) {
                    best = Some(plan);
                }
            }
        }
    }
    best.ok_or_else(|| {
        Error::Infeasible(format!(
            "{stage} with {} parameters at batch {batch} does not fit on {n_chips} chips",
            arch.params
        ))
    })
}

/// Latency and throughput of one stage at a (chips, batch) point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePerf {
    pub batch: u32,
    pub n_chips: u32,
    /// Time to process one batch; for decode-like stages, the whole generation.
    pub latency: f64,
    /// Requests per second.
    pub throughput: f64,
    pub hbm_used: f64,
    /// Worst-case time per output token, for decode-like stages.
    pub tpot: Option<f64>,
    pub plan: ShardPlan,
}

/// Profile one stage.
///
/// ```
/// use ragsched::inference::{arch_for_params, stage_perf};
/// use ragsched::workload::{Stage, StageTokens};
/// let xpu = ragsched::hardware::builtin_xpu("xpu-c").unwrap();
/// let arch = arch_for_params(8_000_000_000);
/// let prompt = StageTokens { sequences: 1, input_tokens: 512, output_tokens: 1 };
/// let p = stage_perf(Stage::Prefix, &arch, &xpu, 1, 1, &prompt).unwrap();
/// assert!((p.latency - 0.0179).abs() < 3e-4);
/// ```
pub fn stage_perf(
    stage: Stage,
    arch: &ModelArch,
    xpu: &XpuSpec,
    n_chips: u32,
    batch: u32,
    tokens: &StageTokens,
) -> Result<StagePerf> {
    let plan = shard(stage, arch, xpu, n_chips, tokens, batch)?;
    let (latency, tpot) = if stage.is_decode_like() {
        (tokens.output_tokens as f64 * plan.latency, Some(plan.latency))
    } else {
        (plan.latency, None)
    };
    Ok(StagePerf {
        batch,
        n_chips,
        latency,
        throughput: batch as f64 / latency,
        hbm_used: plan.hbm_used,
        tpot,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware::builtin_xpu;

    fn toks(input: u64, output: u64) -> StageTokens {
        StageTokens { sequences: 1, input_tokens: input, output_tokens: output }
    }

    #[test]
    fn arch_table_shapes() {
        let a = arch_for_params(70_000_000_000);
        assert_eq!((a.n_layers, a.d_model, a.gqa_factor), (80, 8192, 8));
        let e = arch_for_params(120_000_000);
        assert_eq!((e.n_layers, e.d_model, e.gqa_factor), (12, 768, 1));
        // 9B falls back to the 8B shape but keeps its own parameter count
        let f = arch_for_params(9_000_000_000);
        assert_eq!((f.params, f.n_layers), (9_000_000_000, 32));
    }

    #[test]
    fn kv_per_token_8b() {
        assert_eq!(arch_for_params(8_000_000_000).kv_bytes_per_token(), 131072.0);
    }

    #[test]
    fn kv_8b_batch_256() {
        let a = arch_for_params(8_000_000_000);
        let w = stage_workload(Stage::Decode, &a, &toks(512, 256), 256);
        assert_eq!(w.kv_bytes, 256.0 * 768.0 * 131072.0);
    }

    #[test]
    fn prefix_flops_8b() {
        let mut a = arch_for_params(8_000_000_000);
        a.attn_fraction = 0.0;
        let w = stage_workload(Stage::Prefix, &a, &toks(512, 1), 1);
        assert_eq!(w.flops, 2.0 * 8e9 * 512.0);
    }

    #[test]
    fn roofline_is_max() {
        let c = builtin_xpu("xpu-c").unwrap();
        let t = roofline_latency(8.19e12, 8e9, &c);
        assert!((t - 0.017843).abs() < 1e-5);
        assert_eq!(roofline_latency(0.0, 2765e9, &c), 1.0);
    }

    #[test]
    fn single_chip_identity_plan() {
        let c = builtin_xpu("xpu-c").unwrap();
        let a = arch_for_params(8_000_000_000);
        let p = shard(Stage::Prefix, &a, &c, 1, &toks(512, 1), 1).unwrap();
        assert_eq!((p.data_parallel_degree, p.tensor_parallel_degree, p.pipeline_parallel_degree), (1, 1, 1));
        assert_eq!(p.comm_bytes_per_pass, 0.0);
    }

    #[test]
    fn seventy_b_large_batch_infeasible_on_one_chip() {
        let c = builtin_xpu("xpu-c").unwrap();
        let a = arch_for_params(70_000_000_000);
        assert!(shard(Stage::Decode, &a, &c, 1, &toks(512, 256), 1).is_ok());
        assert!(matches!(
            shard(Stage::Decode, &a, &c, 1, &toks(512, 256), 1024),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn seventy_b_prefers_tensor_parallel_at_batch_one() {
        let c = builtin_xpu("xpu-c").unwrap();
        let a = arch_for_params(70_000_000_000);
        let p = shard(Stage::Prefix, &a, &c, 8, &toks(512, 1), 1).unwrap();
        assert_eq!(p.tensor_parallel_degree, 8);
        assert_eq!(p.pipeline_parallel_degree, 1);
    }

    #[test]
    fn decode_step_8b() {
        let c = builtin_xpu("xpu-c").unwrap();
        let a = arch_for_params(8_000_000_000);
        let p = stage_perf(Stage::Decode, &a, &c, 1, 256, &toks(512, 256)).unwrap();
        let kv = 256.0 * 768.0 * 131072.0;
        let oracle = f64::max(256.0 * 16e9 / 459e12, (8e9 + kv) / 2765e9);
        assert!((p.tpot.unwrap() - oracle).abs() < 1e-12);
        assert!((p.tpot.unwrap() - 0.0122).abs() < 2e-4);
        assert!(p.hbm_used < 96e9);
        assert!((p.latency - 256.0 * oracle).abs() < 1e-9);
    }

    #[test]
    fn empty_batch() {
        let c = builtin_xpu("xpu-c").unwrap();
        let a = arch_for_params(8_000_000_000);
        assert!(matches!(stage_perf(Stage::Decode, &a, &c, 1, 0, &toks(512, 256)), Err(Error::EmptyBatch)));
    }

    #[test]
    fn encoder_keeps_no_kv() {
        let a = arch_for_params(120_000_000);
        let w = stage_workload(Stage::Encode, &a, &toks(128, 0), 4);
        assert_eq!(w.kv_bytes, 0.0);
        assert_eq!(w.mem_bytes, a.weight_bytes());
    }

    #[test]
    fn local_attention_reduces_flops() {
        let mut a = arch_for_params(70_000_000_000);
        let full = a.prefix_flops(100_000.0);
        a.global_attention_every = 4;
        a.local_window = 128;
        let sparse = a.prefix_flops(100_000.0);
        let dense = 2.0 * 70e9 * 100_000.0;
        // one layer in four attends globally
        assert!(sparse - dense < (full - dense) / 3.9);
        assert_eq!(a.kv_bytes(100.0), arch_for_params(70_000_000_000).kv_bytes(100.0));
    }
}
