//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragsched::cases;
use ragsched::config::{parse_table, set_key, Config};
use ragsched::inference::{arch_for_params, stage_workload};
use ragsched::iterative::{simulate, IterConfig};
use ragsched::pipeline::{CostModel, EndToEndPerf, Schedule, XpuGroup};
use ragsched::report::{frontier_rows, write_csv};
use ragsched::retrieval::{bytes_scanned_per_query, DatabaseSpec, RetrievalConfig};
use ragsched::scheduler::{pareto_filter, resource_breakdown, search, search_baseline, Metric, ParetoPoint, SearchOptions};
use ragsched::workload::{Stage, Workload};
use ragsched::Error;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_qpc(points: &[ParetoPoint]) -> &ParetoPoint {
    points
        .iter()
        .max_by(|a, b| a.perf.qps_per_chip.total_cmp(&b.perf.qps_per_chip))
        .expect("non-empty frontier")
}

fn min_ttft(points: &[ParetoPoint]) -> f64 {
    points.iter().map(|p| p.perf.ttft).fold(f64::INFINITY, f64::min)
}

fn retrieval_bytes() -> Check {
    let cfg = cases::load("case1.8b").map_err(|e| e.to_string())?;
    let db = DatabaseSpec::new(&cfg.schema, &RetrievalConfig::default());
    let leaf = bytes_scanned_per_query(&db).leaf;
    ensure(leaf == 6.144e9, format!("leaf bytes {leaf:e}"))
}

fn request_flops(w: &Workload, params: u64) -> f64 {
    let mut arch = arch_for_params(params);
    arch.attn_fraction = 0.0;
    let pre = w.tokens(Stage::Prefix).unwrap();
    let dec = w.tokens(Stage::Decode).unwrap();
    stage_workload(Stage::Prefix, &arch, pre, 1).flops
        + stage_workload(Stage::Decode, &arch, dec, 1).flops * dec.output_tokens as f64
}

fn flops_ratio() -> Check {
    let rag = cases::load("case1.8b").unwrap();
    let llm = cases::load("case1.70b").unwrap();
    let r = request_flops(&rag.workload().unwrap(), 8_000_000_000)
        / request_flops(&llm.llm_only_workload().unwrap(), 70_000_000_000);
    let ratio = 1.0 / r;
    // 70e9·(32+256) / (8e9·(512+256))
    let oracle = (70.0 * 288.0) / (8.0 * 768.0);
    ensure((ratio - 3.28).abs() <= 0.01 && (ratio - oracle).abs() < 1e-9, format!("ratio {ratio:.4}"))
}

fn retrieval_share() -> Check {
    let mut shares = Vec::new();
    for name in ["case1.8b", "case1.1b"] {
        let cfg = cases::load(name).unwrap();
        let m = CostModel::from_config(&cfg).map_err(|e| e.to_string())?;
        shares.push(resource_breakdown(&m, &cfg.search).map_err(|e| e.to_string())?.retrieval_share);
    }
    ensure(
        shares[0] > 0.5 && shares[1] > 0.75,
        format!("8B {:.1}%, 1B {:.1}%", shares[0] * 100.0, shares[1] * 100.0),
    )
}

fn rag_vs_llm() -> Check {
    let rag = cases::load("case1.8b").unwrap();
    let llm = cases::load("case1.70b").unwrap();
    let q_rag = max_qpc(&search(&CostModel::from_config(&rag).unwrap(), &rag.search).map_err(|e| e.to_string())?.frontier)
        .perf
        .qps_per_chip;
    let q_llm = max_qpc(
        &search(&CostModel::llm_only_from_config(&llm).unwrap(), &llm.search).map_err(|e| e.to_string())?.frontier,
    )
    .perf
    .qps_per_chip;
    let ratio = q_rag / q_llm;
    ensure(ratio >= 1.2 && ratio <= 1.95, format!("ratio {ratio:.3} (RAG-8B {q_rag:.3}, LLM-70B {q_llm:.3} QPS/chip)"))
}

fn iterative_idleness() -> Check {
    let run = |br: u32| simulate(&IterConfig::zero_latency(64, br, 4, 256)).unwrap();
    let brs = [1u32, 2, 4, 8, 16, 32, 64];
    let res: Vec<_> = brs.iter().map(|&b| run(b)).collect();
    let at = |b: u32| res[brs.iter().position(|&x| x == b).unwrap()];
    let (r64, r16, r1) = (at(64), at(16), at(1));
    let monotone = res
        .windows(2)
        .all(|w| w[1].normalized_decode_latency + w[0].ci_halfwidth + w[1].ci_halfwidth >= w[0].normalized_decode_latency);
    ensure(
        (2.08..=3.46).contains(&r64.normalized_decode_latency)
            && (0.95..=1.43).contains(&r16.normalized_decode_latency)
            && r1.normalized_decode_latency == 1.0
            && monotone,
        format!(
            "Br=64 {:.3}, Br=16 {:.3}, Br=1 {}, monotone {monotone}",
            r64.normalized_decode_latency, r16.normalized_decode_latency, r1.normalized_decode_latency
        ),
    )
}

fn scheduler_vs_baseline() -> Check {
    let cfg = cases::load("case2.1m").unwrap();
    let m = CostModel::from_config(&cfg).unwrap();
    let best = search(&m, &cfg.search).map_err(|e| e.to_string())?;
    let base = search_baseline(&m, &cfg.search).map_err(|e| e.to_string())?;
    let top = max_qpc(&best.frontier);
    let q_base = max_qpc(&base.frontier).perf.qps_per_chip;
    let ratio = top.perf.qps_per_chip / q_base;
    let enc = top
        .schedule
        .groups
        .iter()
        .find(|g| g.stages.contains(&Stage::Encode))
        .map(|g| g.chips)
        .unwrap_or(0);
    let share = enc as f64 / top.perf.total_xpus as f64;
    ensure(
        ratio >= 1.4 && share >= 0.5,
        format!("ratio {ratio:.3}, encode holds {enc} of {} XPUs", top.perf.total_xpus),
    )
}

fn rewriter_cost() -> Check {
    let with = cases::load("case4").unwrap();
    let mut t = parse_table(cases::source("case4").unwrap()).unwrap();
    t["workload"].as_table_mut().unwrap().remove("rewriter_params");
    let without = Config::from_table(&t).map_err(|e| e.to_string())?;
    let a = search(&CostModel::from_config(&with).unwrap(), &with.search).map_err(|e| e.to_string())?;
    let b = search(&CostModel::from_config(&without).unwrap(), &without.search).map_err(|e| e.to_string())?;
    let ttft_ratio = min_ttft(&a.frontier) / min_ttft(&b.frontier);
    let qa = max_qpc(&a.frontier).perf.qps_per_chip;
    let qb = max_qpc(&b.frontier).perf.qps_per_chip;
    let change = (qa - qb).abs() / qb;
    ensure(
        (1.7..=3.1).contains(&ttft_ratio) && change < 0.15,
        format!("TTFT x{ttft_ratio:.3}, QPS/chip change {:.1}%", change * 100.0),
    )
}

/// Every schedule of a small space, built without the search code.
fn brute_force(m: &CostModel, opts: &SearchOptions) -> Vec<ParetoPoint> {
    let n = m.budget.n_xpus;
    let pow2: Vec<u32> = (0..8).map(|i| 1u32 << i).filter(|&c| c <= n).collect();
    let batches: Vec<u32> = (0..8).map(|i| 1u32 << i).filter(|&b| b <= opts.max_batch).collect();
    let min_s = m.min_servers().unwrap();
    let mut out = Vec::new();
    for &pc in &pow2 {
        for &dc in &pow2 {
            if pc + dc > n {
                continue;
            }
            for &rb in &batches {
                for &pb in &batches {
                    for &db in &batches {
                        let top = rb.max(pb);
                        let bursts: Vec<u32> = if opts.burst_sizes.is_empty() {
                            batches.iter().copied().filter(|&b| b >= top).collect()
                        } else {
                            opts.burst_sizes.iter().copied().filter(|&b| b >= top).collect()
                        };
                        for burst in bursts {
                            let s = Schedule {
                                groups: vec![XpuGroup { stages: vec![Stage::Prefix], chips: pc }],
                                decode_chips: dc,
                                retrieval_servers: min_s,
                                batches: [(Stage::Retrieve, rb), (Stage::Prefix, pb), (Stage::Decode, db)].into(),
                                iterative_batch: None,
                                burst,
                            };
                            match m.evaluate(&s) {
                                Ok(perf) => out.push(ParetoPoint { perf, schedule: s }),
                                Err(Error::Infeasible(_)) => {}
                                Err(e) => panic!("{e}"),
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn dominates(a: &EndToEndPerf, b: &EndToEndPerf, obj: (Metric, Metric)) -> bool {
    let c = |m: Metric, p: &EndToEndPerf| if m.minimize() { m.value(p) } else { -m.value(p) };
    let (a0, a1, b0, b1) = (c(obj.0, a), c(obj.1, a), c(obj.0, b), c(obj.1, b));
    a0 <= b0 && a1 <= b1 && (a0 < b0 || a1 < b1)
}

fn quadratic_front(points: &[ParetoPoint], obj: (Metric, Metric)) -> BTreeSet<(u64, u64)> {
    points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(&q.perf, &p.perf, obj)))
        .map(|p| (obj.0.value(&p.perf).to_bits(), obj.1.value(&p.perf).to_bits()))
        .collect()
}

fn search_correctness() -> Check {
    let obj = (Metric::Ttft, Metric::QpsPerChip);
    let mut sizes = Vec::new();
    for (bursts, prune) in [(vec![], false), (vec![], true), (vec![3u32, 8], true)] {
        let mut t = parse_table(cases::source("case1.8b").unwrap()).unwrap();
        set_key(&mut t, "hardware.n_xpus", "4").unwrap();
        let cfg = Config::from_table(&t).unwrap();
        let m = CostModel::from_config(&cfg).unwrap();
        let opts = SearchOptions { max_batch: 4, burst_sizes: bursts, prune, ..cfg.search.clone() };
        let all = brute_force(&m, &opts);
        sizes.push(all.len());
        if all.len() > 512 {
            return Err(format!("toy space has {} schedules", all.len()));
        }
        let oracle = quadratic_front(&all, obj);
        let got = search(&m, &opts).map_err(|e| e.to_string())?;
        let got_set: BTreeSet<(u64, u64)> = got
            .frontier
            .iter()
            .map(|p| (p.perf.ttft.to_bits(), p.perf.qps_per_chip.to_bits()))
            .collect();
        if got_set != oracle || got_set.len() != got.frontier.len() {
            return Err(format!(
                "frontier mismatch: search {:?}, oracle {:?}",
                got.frontier.iter().map(|p| (p.perf.ttft, p.perf.qps_per_chip, p.schedule.to_string())).collect::<Vec<_>>(),
                oracle.iter().map(|&(a, b)| (f64::from_bits(a), f64::from_bits(b))).collect::<Vec<_>>()
            ));
        }
        for p in &got.frontier {
            if m.evaluate(&p.schedule).map_err(|e| e.to_string())? != p.perf {
                return Err(format!("re-evaluation differs for {}", p.schedule));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let template = ParetoPoint {
        perf: EndToEndPerf { ttft: 0.0, tpot: 0.0, qps: 0.0, qps_per_chip: 0.0, total_xpus: 1, xpu_chips: 1, n_servers: 0 },
        schedule: Schedule {
            groups: vec![],
            decode_chips: 1,
            retrieval_servers: 0,
            batches: Default::default(),
            iterative_batch: None,
            burst: 1,
        },
    };
    let pts: Vec<ParetoPoint> = (0..1000)
        .map(|_| {
            let mut p = template.clone();
            // coarse grid so that ties occur
            p.perf.ttft = rng.random_range(0..200) as f64 / 10.0;
            p.perf.qps_per_chip = rng.random_range(0..200) as f64 / 10.0;
            p
        })
        .collect();
    let oracle = quadratic_front(&pts, obj);
    let oracle_count = pts.iter().filter(|p| !pts.iter().any(|q| dominates(&q.perf, &p.perf, obj))).count();
    let got = pareto_filter(pts, obj).map_err(|e| e.to_string())?;
    let got_set: BTreeSet<(u64, u64)> = got.iter().map(|p| (p.perf.ttft.to_bits(), p.perf.qps_per_chip.to_bits())).collect();
    ensure(
        got_set == oracle && got.len() == oracle_count,
        format!("toy spaces {sizes:?} match brute force; random frontier {} points", got.len()),
    )
}

fn micro_batching() -> Check {
    let cfg = cases::load("case2.1m").unwrap();
    let m = CostModel::from_config(&cfg).unwrap();
    let ttft = |b: u32| -> Result<f64, String> {
        let batches = format!("encode:{b};retrieve:{b};prefix:{b};decode:16");
        let s = Schedule::from_labels("encode|prefix", "64|16;decode:16;servers:32", &batches, 32).map_err(|e| e.to_string())?;
        Ok(m.evaluate(&s).map_err(|e| e.to_string())?.ttft)
    };
    let whole = ttft(32)?;
    let by2 = 1.0 - ttft(2)? / whole;
    let mut best = 0.0f64;
    for b in [1, 2, 4, 8, 16] {
        best = best.max(1.0 - ttft(b)? / whole);
    }
    ensure(
        by2 >= 0.15 && best >= 0.40,
        format!("micro-batch 2: -{:.1}%, best split: -{:.1}%", by2 * 100.0, best * 100.0),
    )
}

fn determinism_and_scale() -> Check {
    let cfg = cases::load("case1.8b").unwrap();
    let m = CostModel::from_config(&cfg).unwrap();
    let a = write_csv(&frontier_rows(&search(&m, &cfg.search).unwrap().frontier)).unwrap();
    let b = write_csv(&frontier_rows(&search(&m, &cfg.search).unwrap().frontier)).unwrap();
    let c4 = cases::load("case4").unwrap();
    let m4 = CostModel::from_config(&c4).unwrap();
    let t = Instant::now();
    let r = search(&m4, &c4.search).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    ensure(
        a == b && secs < 300.0,
        format!("identical CSV {}, Case IV: {} schedules in {secs:.1} s", a == b, r.evaluated),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("retrieval bytes per query", retrieval_bytes),
        ("FLOPs ratio LLM-70B / RAG-8B", flops_ratio),
        ("retrieval share of resources", retrieval_share),
        ("RAG-8B vs LLM-70B QPS/chip", rag_vs_llm),
        ("iterative retrieval idleness", iterative_idleness),
        ("search vs llm-extension baseline", scheduler_vs_baseline),
        ("rewriter TTFT cost", rewriter_cost),
        ("search and Pareto correctness", search_correctness),
        ("micro-batching TTFT", micro_batching),
        ("determinism and scale", determinism_and_scale),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
