use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ragsched::config::{parse_table, set_key, Config};
use ragsched::iterative::{simulate, IterConfig, SimResult};
use ragsched::pipeline::CostModel;
use ragsched::report::{frontier_rows, parse_csv, write_csv, CsvRow, RunReport, ScheduleFile};
use ragsched::scheduler::{search, search_baseline, Metric, ParetoPoint, SearchResult};
use ragsched::{cases, Error, Result};

#[derive(Parser)]
#[command(name = "ragsched", version, about = "Explore serving schedules for retrieval-augmented generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search all schedules and write the Pareto frontier.
    Search(SearchArgs),
    /// Frontier of the baseline that treats every pre-decode stage as part of prefix.
    Baseline(SearchArgs),
    /// Score one schedule.
    Eval(EvalArgs),
    /// Vary one config key and report a frontier per value.
    Sweep(SweepArgs),
    /// Simulate decode stalls caused by retrievals during generation.
    SimulateIterative(SimArgs),
    /// List the bundled example configs.
    ListCases {
        /// Print the TOML of one case instead.
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Clone)]
struct RunOpts {
    /// Bundled case name or path to a TOML config.
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Trials per iterative-retrieval simulation.
    #[arg(long)]
    trials: Option<u32>,
    /// Objective pair, e.g. `ttft,qps_per_chip`.
    #[arg(long)]
    objective: Option<String>,
    /// Drop schedules whose TPOT exceeds this many milliseconds.
    #[arg(long)]
    max_tpot: Option<f64>,
    /// Largest batch size tried (power of two).
    #[arg(long)]
    max_batch: Option<u32>,
    /// Comma-separated burst sizes for TTFT.
    #[arg(long, value_delimiter = ',')]
    burst: Option<Vec<u32>>,
    /// Disable per-stage pruning of dominated batch sizes.
    #[arg(long)]
    no_prune: bool,
    /// Serve the generative model alone, without retrieval or auxiliary models.
    #[arg(long)]
    llm_only: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    run: RunOpts,
    /// Directory for frontier, report and best-schedule files; stdout if absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct EvalArgs {
    /// Schedule file (as written to frontier_best.json).
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Config to evaluate under; overrides the one embedded in the schedule file.
    #[arg(long)]
    config: Option<String>,
    /// Frontier CSV whose rows are re-evaluated (requires --config).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Only this schedule_id from --csv.
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    llm_only: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunOpts,
    /// Dotted config key, e.g. `workload.queries_per_retrieval`.
    #[arg(long)]
    key: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Directory for one frontier CSV per value.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    decode_batch: Vec<u32>,
    #[arg(long, value_delimiter = ',', required = true)]
    retrieval_batch: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    retrievals: Vec<u32>,
    #[arg(long, default_value_t = 256)]
    decode_tokens: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    trials: u32,
    /// Retrieval and prefix take no time.
    #[arg(long)]
    zero_latency: bool,
    /// Config that supplies real latencies when not --zero-latency.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    servers: Option<u32>,
    #[arg(long)]
    prefix_chips: Option<u32>,
    #[arg(long)]
    decode_chips: Option<u32>,
}

fn load_config(name: &str, run: Option<&RunOpts>) -> Result<Config> {
    let mut cfg = cases::resolve(name)?;
    if let Some(r) = run {
        apply_overrides(&mut cfg, r)?;
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut Config, r: &RunOpts) -> Result<()> {
    let s = &mut cfg.search;
    if let Some(v) = r.seed {
        s.seed = v;
    }
    if let Some(v) = r.trials {
        s.trials = v;
    }
    if let Some(obj) = &r.objective {
        let parts: Vec<&str> = obj.split(',').map(str::trim).collect();
        let [a, b] = parts[..] else {
            return Err(Error::InvalidValue { key: "--objective".into(), reason: "expected two metrics".into() });
        };
        s.objectives = (a.parse::<Metric>()?, b.parse::<Metric>()?);
    }
    if let Some(ms) = r.max_tpot {
        s.max_tpot = Some(ms / 1e3);
    }
    if let Some(b) = r.max_batch {
        s.max_batch = b;
    }
    if let Some(b) = &r.burst {
        s.burst_sizes = b.clone();
    }
    if r.no_prune {
        s.prune = false;
    }
    s.validate()
}

fn model_for(cfg: &Config, llm_only: bool) -> Result<CostModel> {
    if llm_only {
        CostModel::llm_only_from_config(cfg)
    } else {
        CostModel::from_config(cfg)
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn run_search(args: &SearchArgs, baseline: bool) -> Result<()> {
    let cfg = load_config(&args.run.config, Some(&args.run))?;
    let model = model_for(&cfg, args.run.llm_only)?;
    let started = Instant::now();
    let result: SearchResult = if baseline {
        search_baseline(&model, &cfg.search)?
    } else {
        search(&model, &cfg.search)?
    };
    let secs = started.elapsed().as_secs_f64();
    log::info!(
        "profiled {} points, scored {} schedules, {} on the frontier, {secs:.2} s",
        result.profiled_points,
        result.evaluated,
        result.frontier.len()
    );
    let command = if baseline { "baseline" } else { "search" };
    let mut report = RunReport::new(command, &cfg, &result.frontier, secs);
    report.evaluated = Some(result.evaluated);
    let table = match args.format {
        Format::Csv => write_csv(&frontier_rows(&result.frontier))?,
        Format::Json => serde_json::to_string_pretty(&report.rows)? + "\n",
    };
    match &args.output {
        None => print!("{table}"),
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let name = match args.format {
                Format::Csv => "frontier.csv",
                Format::Json => "frontier.json",
            };
            write_file(dir, name, &table)?;
            write_file(dir, "report.json", &(report.to_json() + "\n"))?;
            // sorted by the latency objective, so the last point has the best throughput
            if let Some(best) = result.frontier.last() {
                let file = ScheduleFile::new(&cfg, best, args.run.llm_only);
                write_file(dir, "frontier_best.json", &(serde_json::to_string_pretty(&file)? + "\n"))?;
            }
            eprintln!("wrote {} frontier points to {}", result.frontier.len(), dir.display());
        }
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let mut rows = Vec::new();
    if let Some(path) = &args.schedule {
        let file = ScheduleFile::parse(&fs::read_to_string(path)?)?;
        let cfg = match &args.config {
            Some(c) => load_config(c, None)?,
            None => Config::parse(&file.config)?,
        };
        let model = model_for(&cfg, file.llm_only || args.llm_only)?;
        let perf = model.evaluate(&file.schedule)?;
        rows.push(CsvRow::new(0, &perf, &file.schedule));
    } else if let Some(path) = &args.csv {
        let name = args.config.as_deref().ok_or_else(|| Error::MissingField("--config".into()))?;
        let cfg = load_config(name, None)?;
        let model = model_for(&cfg, args.llm_only)?;
        for row in parse_csv(&fs::read_to_string(path)?)? {
            if args.row.is_some_and(|r| r != row.schedule_id) {
                continue;
            }
            let sched = row.schedule()?;
            let perf = model.evaluate(&sched)?;
            rows.push(CsvRow::new(row.schedule_id, &perf, &sched));
        }
    } else {
        return Err(Error::MissingField("--schedule or --csv".into()));
    }
    match args.format {
        Format::Csv => print!("{}", write_csv(&rows)?),
        Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
    }
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let text = cases::resolve_text(&args.run.config)?;
    let base = parse_table(&text)?;
    if let Some(dir) = &args.output {
        fs::create_dir_all(dir)?;
    }
    println!("value,frontier_points,max_qps,max_qps_per_chip,min_ttft_ms,min_tpot_ms");
    for value in &args.values {
        let mut table = base.clone();
        set_key(&mut table, &args.key, value)?;
        let mut cfg = Config::from_table(&table)?;
        apply_overrides(&mut cfg, &args.run)?;
        let model = model_for(&cfg, args.run.llm_only)?;
        let result = search(&model, &cfg.search)?;
        let f = &result.frontier;
        let max = |g: fn(&ParetoPoint) -> f64| f.iter().map(g).fold(f64::NEG_INFINITY, f64::max);
        let min = |g: fn(&ParetoPoint) -> f64| f.iter().map(g).fold(f64::INFINITY, f64::min);
        println!(
            "{value},{},{},{},{},{}",
            f.len(),
            max(|p| p.perf.qps),
            max(|p| p.perf.qps_per_chip),
            min(|p| p.perf.ttft) * 1e3,
            min(|p| p.perf.tpot) * 1e3,
        );
        if let Some(dir) = &args.output {
            let name = format!("frontier_{}={value}.csv", args.key);
            write_file(dir, &name, &write_csv(&frontier_rows(f))?)?;
        }
    }
    Ok(())
}

fn sim_row(d: u32, br: u32, r: u32, t: u32, res: &SimResult) -> String {
    format!(
        "{d},{br},{r},{t},{},{},{},{},{}",
        res.normalized_decode_latency,
        res.ci_halfwidth,
        res.normalized_makespan,
        res.makespan_ci_halfwidth,
        res.effective_tpot * 1e3
    )
}

fn run_simulate(args: &SimArgs) -> Result<()> {
    let model = match (&args.config, args.zero_latency) {
        (_, true) => None,
        (Some(c), false) => Some(CostModel::from_config(&load_config(c, None)?)?),
        (None, false) => return Err(Error::MissingField("--config (or --zero-latency)".into())),
    };
    println!("decode_batch,retrieval_batch,retrievals,decode_tokens,normalized_decode_latency,ci_halfwidth,normalized_makespan,makespan_ci_halfwidth,effective_tpot_ms");
    for &d in &args.decode_batch {
        for &br in &args.retrieval_batch {
            for &r in &args.retrievals {
                let res = match &model {
                    None => {
                        let mut cfg = IterConfig::zero_latency(d, br, r, args.decode_tokens);
                        cfg.seed = args.seed;
                        cfg.n_trials = args.trials;
                        simulate(&cfg)?
                    }
                    Some(m) => {
                        let half = m.budget.n_xpus / 2;
                        let pow2_half = if half == 0 { 1 } else { 1 << (31 - half.leading_zeros()) };
                        let servers = args.servers.unwrap_or(m.budget.n_cpu_servers);
                        let pc = args.prefix_chips.unwrap_or(pow2_half);
                        let dc = args.decode_chips.unwrap_or(pow2_half);
                        let mut cfg = m.iter_config(d, br, servers, pc)?;
                        cfg.retrievals_per_seq = r;
                        cfg.decode_tokens = args.decode_tokens;
                        cfg.seed = args.seed;
                        cfg.n_trials = args.trials;
                        cfg.step_latency = m.point(ragsched::workload::Stage::Decode, dc, d)?.tpot;
                        simulate(&cfg)?
                    }
                };
                println!("{}", sim_row(d, br, r, args.decode_tokens, &res));
            }
        }
    }
    Ok(())
}

fn list_cases(show: Option<&str>) -> Result<()> {
    if let Some(name) = show {
        let text = cases::source(name).ok_or_else(|| Error::UnknownSpec(name.to_string()))?;
        print!("{text}");
        return Ok(());
    }
    for name in cases::names() {
        let text = cases::source(name).expect("bundled");
        let summary = text.lines().next().unwrap_or("").trim_start_matches('#').trim();
        println!("{name:<12} {summary}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Search(a) => run_search(a, false),
        Command::Baseline(a) => run_search(a, true),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::SimulateIterative(a) => run_simulate(a),
        Command::ListCases { show } => list_cases(show.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{body}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
