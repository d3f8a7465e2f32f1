//! Monte-Carlo simulation of decode batches that pause for retrievals.
//!
//! `D` sequences decode together. Each one stalls `R` times at uniformly drawn
//! token positions and waits until its retrieval is dispatched in a batch of
//! `B_r` stalled sequences, served, and prefixed back into the cache. Time is
//! counted in decode steps.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterConfig {
    pub decode_batch: u32,
    pub retrieval_batch: u32,
    pub retrievals_per_seq: u32,
    pub decode_tokens: u32,
    /// Seconds per decode step.
    pub step_latency: f64,
    /// Retrieval latency indexed by batch size minus one; empty means zero latency.
    pub retrieval_latency: Vec<f64>,
    /// Prefix latency for re-ingesting retrieved passages, indexed like `retrieval_latency`.
    pub prefix_latency: Vec<f64>,
    pub seed: u64,
    pub n_trials: u32,
}

impl IterConfig {
    /// Retrievals and prefixes take no time; only batching delay remains.
    pub fn zero_latency(decode_batch: u32, retrieval_batch: u32, retrievals: u32, decode_tokens: u32) -> Self {
        IterConfig {
            decode_batch,
            retrieval_batch,
            retrievals_per_seq: retrievals,
            decode_tokens,
            step_latency: 1.0,
            retrieval_latency: Vec::new(),
            prefix_latency: Vec::new(),
            seed: 0,
            n_trials: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidIterConfig(m.into()));
        if self.decode_batch == 0 {
            return bad("decode batch must be >= 1");
        }
        if self.retrieval_batch == 0 || self.retrieval_batch > self.decode_batch {
            return bad("retrieval batch must lie in [1, decode batch]");
        }
        if self.decode_tokens == 0 || self.decode_tokens < self.retrievals_per_seq {
            return bad("decode tokens must be >= max(1, retrievals per sequence)");
        }
        if !(self.step_latency > 0.0 && self.step_latency.is_finite()) {
            return bad("step latency must be positive");
        }
        if self.n_trials == 0 {
            return bad("at least one trial is required");
        }
        for table in [&self.retrieval_latency, &self.prefix_latency] {
            if !table.is_empty() && table.len() < self.retrieval_batch as usize {
                return bad("latency tables must cover every batch size up to the retrieval batch");
            }
            if table.iter().any(|v| !(*v >= 0.0)) {
                return bad("latencies must be >= 0");
            }
        }
        Ok(())
    }

    fn service_ticks(&self, batch: usize) -> u64 {
        let at = |t: &Vec<f64>| t.get(batch - 1).copied().unwrap_or(0.0);
        let secs = at(&self.retrieval_latency) + at(&self.prefix_latency);
        if secs <= 0.0 {
            0
        } else {
            (secs / self.step_latency - 1e-9).ceil().max(0.0) as u64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Mean sequence completion time over `decode_tokens` steps.
    pub normalized_decode_latency: f64,
    /// Effective time per output token in seconds.
    pub effective_tpot: f64,
    /// 95% confidence half-width of `normalized_decode_latency`.
    pub ci_halfwidth: f64,
    /// Completion of the last sequence over `decode_tokens` steps.
    pub normalized_makespan: f64,
    pub makespan_ci_halfwidth: f64,
    pub n_trials: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Rejoin,
    Stall,
    Finish,
}

struct Trial {
    mean_completion: f64,
    makespan: f64,
}

fn run_trial(cfg: &IterConfig, trial: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial);
    let d = cfg.decode_batch as usize;
    let t_len = cfg.decode_tokens as u64;
    let r = cfg.retrievals_per_seq as usize;
    let br = cfg.retrieval_batch as usize;

    // triggers[i][k]: the token position whose generation waits for retrieval k
    let triggers: Vec<Vec<u64>> = (0..d)
        .map(|_| {
            let mut v: Vec<u64> = rand::seq::index::sample(&mut rng, t_len as usize, r)
                .into_iter()
                .map(|x| x as u64 + 1)
                .collect();
            v.sort_unstable();
            v
        })
        .collect();

    let mut done = vec![0usize; d];
    let mut heap: BinaryHeap<Reverse<(u64, Event, usize)>> = BinaryHeap::with_capacity(2 * d);
    let schedule_next = |heap: &mut BinaryHeap<Reverse<(u64, Event, usize)>>, i: usize, k: usize, now: u64| {
        // k retrievals already served; generation resumes at token triggers[i][k-1]
        let resume_at = if k == 0 { 1 } else { triggers[i][k - 1] };
        if k < r {
            heap.push(Reverse((now + triggers[i][k] - resume_at, Event::Stall, i)));
        } else {
            heap.push(Reverse((now + t_len + 1 - resume_at, Event::Finish, i)));
        }
    };
    for i in 0..d {
        schedule_next(&mut heap, i, 0, 0);
    }

    let mut active = d;
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut completion_sum = 0u64;
    let mut makespan = 0u64;
    while let Some(&Reverse((now, _, _))) = heap.peek() {
        while let Some(&Reverse((t, ev, i))) = heap.peek() {
            if t != now {
                break;
            }
            heap.pop();
            match ev {
                Event::Rejoin => {
                    active += 1;
                    done[i] += 1;
                    schedule_next(&mut heap, i, done[i], now);
                }
                Event::Stall => {
                    active -= 1;
                    queue.push_back(i);
                }
                Event::Finish => {
                    active -= 1;
                    completion_sum += now;
                    makespan = makespan.max(now);
                }
            }
        }
        while queue.len() >= br || (!queue.is_empty() && active == 0) {
            let n = queue.len().min(br);
            let back = now + cfg.service_ticks(n);
            for i in queue.drain(..n) {
                heap.push(Reverse((back, Event::Rejoin, i)));
            }
            if back == now {
                // rejoins at `now` are handled on the next pass
                break;
            }
        }
    }
    Trial {
        mean_completion: completion_sum as f64 / d as f64 / t_len as f64,
        makespan: makespan as f64 / t_len as f64,
    }
}

fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Run `n_trials` independent trials. Trials run in parallel; the result
/// depends only on the config.
///
/// ```
/// use ragsched::iterative::{simulate, IterConfig};
/// let r = simulate(&IterConfig::zero_latency(64, 1, 4, 256)).unwrap();
/// assert_eq!(r.normalized_decode_latency, 1.0);
/// ```
pub fn simulate(cfg: &IterConfig) -> Result<SimResult> {
    cfg.validate()?;
    let trials: Vec<Trial> = (0..cfg.n_trials as u64)
        .into_par_iter()
        .map(|k| run_trial(cfg, k))
        .collect();
    let completions: Vec<f64> = trials.iter().map(|t| t.mean_completion).collect();
    let makespans: Vec<f64> = trials.iter().map(|t| t.makespan).collect();
    let (norm, ci) = mean_ci(&completions);
    let (mk, mk_ci) = mean_ci(&makespans);
    Ok(SimResult {
        normalized_decode_latency: norm,
        effective_tpot: norm * cfg.step_latency,
        ci_halfwidth: ci,
        normalized_makespan: mk,
        makespan_ci_halfwidth: mk_ci,
        n_trials: cfg.n_trials,
    })
}
