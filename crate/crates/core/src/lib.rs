//! Performance models and schedule search for retrieval-augmented generation
//! serving on accelerator clusters with CPU retrieval servers.
//!
//! A workload ([`workload`]) expands into a pipeline of stages. Inference
//! stages are costed with a roofline model ([`inference`]), retrieval with a
//! scan-bytes model ([`retrieval`]). A [`pipeline::Schedule`] fixes placement,
//! allocation and batching; [`pipeline::CostModel::evaluate`] turns it into
//! TTFT, TPOT and throughput, and [`scheduler::search`] finds the Pareto
//! frontier over all schedules.
//!
//! ```
//! use ragsched::{cases, pipeline::CostModel, scheduler};
//! let cfg = cases::load("case1.8b").unwrap();
//! let model = CostModel::from_config(&cfg).unwrap();
//! let opts = scheduler::SearchOptions { max_batch: 64, ..cfg.search.clone() };
//! let result = scheduler::search(&model, &opts).unwrap();
//! assert!(!result.frontier.is_empty());
//! ```

pub mod cases;
pub mod config;
pub mod error;
pub mod hardware;
pub mod inference;
pub mod iterative;
pub mod pipeline;
pub mod report;
pub mod retrieval;
pub mod scheduler;
pub mod workload;

pub use error::{Error, Result};
