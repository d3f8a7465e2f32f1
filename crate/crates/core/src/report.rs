//! Frontier tables and run reports.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::{EndToEndPerf, Schedule};
use crate::scheduler::ParetoPoint;

/// One line of a frontier CSV. Column order is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub schedule_id: usize,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub qps: f64,
    pub qps_per_chip: f64,
    pub n_xpus: u32,
    pub n_cpu_servers: u32,
    pub placement: String,
    pub alloc: String,
    pub batches: String,
    pub burst: u32,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "schedule_id",
    "ttft_ms",
    "tpot_ms",
    "qps",
    "qps_per_chip",
    "n_xpus",
    "n_cpu_servers",
    "placement",
    "alloc",
    "batches",
    "burst",
];

impl CsvRow {
    pub fn new(schedule_id: usize, perf: &EndToEndPerf, schedule: &Schedule) -> Self {
        CsvRow {
            schedule_id,
            ttft_ms: perf.ttft * 1e3,
            tpot_ms: perf.tpot * 1e3,
            qps: perf.qps,
            qps_per_chip: perf.qps_per_chip,
            n_xpus: perf.total_xpus,
            n_cpu_servers: perf.n_servers,
            placement: schedule.placement_label(),
            alloc: schedule.alloc_label(),
            batches: schedule.batches_label(),
            burst: schedule.burst,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::from_labels(&self.placement, &self.alloc, &self.batches, self.burst)
    }
}

pub fn frontier_rows(points: &[ParetoPoint]) -> Vec<CsvRow> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| CsvRow::new(i, &p.perf, &p.schedule))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

pub fn write_csv(rows: &[CsvRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(csv_err)?;
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Parse(format!("unexpected csv header {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// A schedule together with the config it was scored under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    /// Config document (TOML).
    pub config: String,
    pub schedule: Schedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perf: Option<EndToEndPerf>,
    #[serde(default)]
    pub llm_only: bool,
}

impl ScheduleFile {
    pub fn new(cfg: &Config, point: &ParetoPoint, llm_only: bool) -> Self {
        ScheduleFile {
            config: cfg.to_toml_string(),
            schedule: point.schedule.clone(),
            perf: Some(point.perf),
            llm_only,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub schedule_id: usize,
    pub perf: EndToEndPerf,
    pub schedule: Schedule,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Resolved config document (TOML).
    pub config: String,
    pub wall_clock_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluated: Option<u64>,
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn new(command: &str, cfg: &Config, points: &[ParetoPoint], wall_clock_secs: f64) -> Self {
        RunReport {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: cfg.search.seed,
            config: cfg.to_toml_string(),
            wall_clock_secs,
            evaluated: None,
            rows: points
                .iter()
                .enumerate()
                .map(|(i, p)| ReportRow { schedule_id: i, perf: p.perf, schedule: p.schedule.clone() })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
