//! Cost model for multi-level IVF-PQ search sharded across CPU servers.
//!
//! Each server holds an equal shard and scans its part of every query with one
//! thread per query. A batch runs in waves of `cores` queries; the scan is
//! bounded by either per-core scan speed or the server's memory bandwidth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::CpuServerSpec;
use crate::workload::RagSchema;

/// How routing levels of the tree are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Centroids are PQ codes of `bytes_per_vector` bytes.
    Pq,
    /// Centroids are full-precision f32 vectors.
    Float,
}

/// Retrieval knobs that are not part of the workload schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub scan_fraction: f64,
    pub fanout: u64,
    pub brute_force: bool,
    /// Bytes per token when shipping retrieved passages to the XPUs.
    pub bytes_per_token: f64,
    pub routing: Routing,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            scan_fraction: 0.001,
            fanout: 4096,
            brute_force: false,
            bytes_per_token: 2.0,
            routing: Routing::Pq,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scan_fraction > 0.0 && self.scan_fraction <= 1.0) {
            return Err(Error::invalid("retrieval.scan_fraction", "must lie in (0, 1]"));
        }
        if !self.brute_force && self.fanout < 2 {
            return Err(Error::invalid("retrieval.fanout", "must be >= 2"));
        }
        if !(self.bytes_per_token > 0.0) {
            return Err(Error::invalid("retrieval.bytes_per_token", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatabaseSpec {
    pub n_vectors: u64,
    pub bytes_per_vector: u32,
    pub vector_dim: u32,
    pub scan_fraction: f64,
    pub fanout: u64,
    pub brute_force: bool,
    pub routing: Routing,
}

impl DatabaseSpec {
    pub fn new(schema: &RagSchema, cfg: &RetrievalConfig) -> Self {
        DatabaseSpec {
            n_vectors: schema.n_db_vectors,
            bytes_per_vector: schema.bytes_per_vector,
            vector_dim: schema.vector_dim,
            scan_fraction: cfg.scan_fraction,
            fanout: cfg.fanout,
            brute_force: cfg.brute_force,
            routing: cfg.routing,
        }
    }

    /// Bytes resident in memory across all servers.
    pub fn stored_bytes(&self) -> f64 {
        if self.brute_force {
            self.n_vectors as f64 * self.vector_dim as f64 * 4.0
        } else {
            self.n_vectors as f64 * self.bytes_per_vector as f64
        }
    }

    /// Routing levels above the leaves: one less than the depth of a balanced
    /// tree with `fanout` children per node.
    pub fn routing_levels(&self) -> u32 {
        if self.brute_force {
            return 0;
        }
        let mut depth = 0u32;
        let mut reach: u128 = 1;
        while reach < self.n_vectors as u128 {
            reach = reach.saturating_mul(self.fanout as u128);
            depth += 1;
        }
        depth.saturating_sub(1)
    }
}

/// Bytes one query reads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanBytes {
    pub leaf: f64,
    pub routing: f64,
}

impl ScanBytes {
    pub fn total(&self) -> f64 {
        self.leaf + self.routing
    }
}

/// Leaf and routing bytes scanned by one query.
///
/// ```
/// use ragsched::retrieval::{bytes_scanned_per_query, DatabaseSpec, Routing};
/// let db = DatabaseSpec {
///     n_vectors: 64_000_000_000, bytes_per_vector: 96, vector_dim: 768,
///     scan_fraction: 0.001, fanout: 4096, brute_force: false, routing: Routing::Pq,
/// };
/// assert_eq!(bytes_scanned_per_query(&db).leaf, 6.144e9);
/// ```
pub fn bytes_scanned_per_query(db: &DatabaseSpec) -> ScanBytes {
    if db.brute_force {
        return ScanBytes { leaf: db.stored_bytes(), routing: 0.0 };
    }
    let leaf = db.n_vectors as f64 * db.bytes_per_vector as f64 * db.scan_fraction;
    let levels = db.routing_levels();
    let centroid_bytes = match db.routing {
        Routing::Pq => db.bytes_per_vector as f64,
        Routing::Float => db.vector_dim as f64 * 4.0,
    };
    let mut routing = 0.0;
    if levels > 0 {
        let f = db.scan_fraction.powf(1.0 / levels as f64);
        let fanout = db.fanout as f64;
        let mut probed = 1.0;
        for level in 1..=levels {
            routing += probed * fanout.powi(level as i32) * centroid_bytes;
            probed *= f;
        }
    }
    ScanBytes { leaf, routing }
}

/// Servers needed to hold the database in memory.
pub fn min_servers(db: &DatabaseSpec, cpu: &CpuServerSpec) -> Result<u32> {
    if db.n_vectors == 0 || (db.bytes_per_vector == 0 && !db.brute_force) || db.vector_dim == 0 {
        return Err(Error::InvalidDatabase("database has zero bytes".into()));
    }
    let n = (db.stored_bytes() / cpu.memory_capacity).ceil();
    Ok((n as u32).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPerf {
    /// Queries in the batch.
    pub batch: u32,
    pub n_servers: u32,
    pub latency: f64,
    /// Queries per second.
    pub throughput: f64,
}

/// Latency of a batch of queries on `n_servers` shards.
///
/// ```
/// # use ragsched::retrieval::*;
/// let cpu = ragsched::hardware::builtin_cpu("epyc-milan").unwrap();
/// let db = DatabaseSpec {
///     n_vectors: 64_000_000_000, bytes_per_vector: 96, vector_dim: 768,
///     scan_fraction: 0.001, fanout: 4096, brute_force: false, routing: Routing::Pq,
/// };
/// let one = retrieval_perf(&db, &cpu, 16, 1).unwrap();
/// let eight = retrieval_perf(&db, &cpu, 16, 8).unwrap();
/// assert_eq!(one.latency, eight.latency);
/// ```
pub fn retrieval_perf(db: &DatabaseSpec, cpu: &CpuServerSpec, n_servers: u32, batch: u32) -> Result<RetrievalPerf> {
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let need = min_servers(db, cpu)?;
    if n_servers < need {
        return Err(Error::Infeasible(format!(
            "database needs at least {need} servers, got {n_servers}"
        )));
    }
    let dq = bytes_scanned_per_query(db).total() / n_servers as f64;
    let waves = batch.div_ceil(cpu.cores) as f64;
    let compute = waves * dq / cpu.per_core_scan_throughput;
    let memory = batch as f64 * dq / cpu.effective_bandwidth();
    let latency = compute.max(memory);
    Ok(RetrievalPerf {
        batch,
        n_servers,
        latency,
        throughput: batch as f64 / latency,
    })
}

/// Bytes of retrieved passages shipped to the accelerators.
pub fn retrieval_comm_bytes(neighbors: u32, chunk_tokens: u32, bytes_per_token: f64) -> f64 {
    neighbors as f64 * chunk_tokens as f64 * bytes_per_token
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware::builtin_cpu;

    fn big() -> DatabaseSpec {
        DatabaseSpec {
            n_vectors: 64_000_000_000,
            bytes_per_vector: 96,
            vector_dim: 768,
            scan_fraction: 0.001,
            fanout: 4096,
            brute_force: false,
            routing: Routing::Pq,
        }
    }

    #[test]
    fn leaf_bytes() {
        assert_eq!(bytes_scanned_per_query(&big()).leaf, 6.144e9);
        let mut db = big();
        db.scan_fraction = 0.01;
        assert_eq!(bytes_scanned_per_query(&db).leaf, 6.144e10);
    }

    #[test]
    fn routing_levels_and_golden() {
        let db = big();
        assert_eq!(db.routing_levels(), 2);
        let s = bytes_scanned_per_query(&db);
        // level 1: 4096 centroids; level 2: sqrt(1e-3) * 4096^2 centroids
        let oracle = 4096.0 * 96.0 + 0.001f64.sqrt() * 4096.0 * 4096.0 * 96.0;
        assert!((s.routing - oracle).abs() < 1e-3);
        assert!(s.routing < 0.05 * s.leaf);
    }

    #[test]
    fn min_servers_values() {
        let cpu = builtin_cpu("epyc-milan").unwrap();
        assert_eq!(min_servers(&big(), &cpu).unwrap(), 16);
        let mut small = big();
        small.n_vectors = 1_000_000;
        assert_eq!(min_servers(&small, &cpu).unwrap(), 1);
        small.n_vectors = 0;
        assert!(matches!(min_servers(&small, &cpu), Err(Error::InvalidDatabase(_))));
    }

    #[test]
    fn batch_one_on_16_servers() {
        let cpu = builtin_cpu("epyc-milan").unwrap();
        let db = big();
        let p = retrieval_perf(&db, &cpu, 16, 1).unwrap();
        let dq = bytes_scanned_per_query(&db).total() / 16.0;
        assert!((p.latency - dq / 18e9).abs() < 1e-15);
        assert!((p.latency - 0.0213).abs() < 5e-4);
    }

    #[test]
    fn memory_bound_ceiling() {
        let cpu = builtin_cpu("epyc-milan").unwrap();
        let db = big();
        let dq = bytes_scanned_per_query(&db).total() / 16.0;
        let p = retrieval_perf(&db, &cpu, 16, 1 << 20).unwrap();
        assert!((p.throughput - 368e9 / dq).abs() < 1e-6);
        assert!((p.throughput - 958.0).abs() < 10.0);
    }

    #[test]
    fn too_few_servers() {
        let cpu = builtin_cpu("epyc-milan").unwrap();
        assert!(matches!(retrieval_perf(&big(), &cpu, 8, 1), Err(Error::Infeasible(_))));
    }

    #[test]
    fn comm_bytes() {
        assert_eq!(retrieval_comm_bytes(5, 100, 2.0), 1000.0);
        assert_eq!(retrieval_comm_bytes(0, 100, 2.0), 0.0);
        assert_eq!(retrieval_comm_bytes(16, 100, 2.0), 3200.0);
    }

    #[test]
    fn brute_force_case2() {
        let db = DatabaseSpec {
            n_vectors: 10_000,
            bytes_per_vector: 96,
            vector_dim: 768,
            scan_fraction: 1.0,
            fanout: 4096,
            brute_force: true,
            routing: Routing::Pq,
        };
        let s = bytes_scanned_per_query(&db);
        assert_eq!(s.leaf, 10_000.0 * 768.0 * 4.0);
        assert_eq!(s.routing, 0.0);
    }
}
