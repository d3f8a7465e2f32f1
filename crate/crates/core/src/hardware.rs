//! Accelerator and CPU-server capability parameters.
//!
//! All quantities are SI: FLOP/s, bytes, bytes/s, seconds. `GB` is 1e9 bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GB: f64 = 1e9;
pub const TFLOPS: f64 = 1e12;

/// A systolic-array accelerator seen through the roofline abstraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XpuSpec {
    /// Peak FLOP/s.
    pub peak_compute: f64,
    pub hbm_capacity: f64,
    pub hbm_bandwidth: f64,
    /// Effective bandwidth of the inter-chip interconnect, used for all collectives.
    pub ici_bandwidth: f64,
    /// Fixed cost of one ring hop in a collective (seconds).
    #[serde(default = "default_hop_latency")]
    pub ici_hop_latency: f64,
    #[serde(default = "one")]
    pub compute_efficiency: f64,
    #[serde(default = "one")]
    pub memory_efficiency: f64,
}

fn one() -> f64 {
    1.0
}

fn default_hop_latency() -> f64 {
    1e-6
}

impl XpuSpec {
    pub fn effective_compute(&self) -> f64 {
        self.peak_compute * self.compute_efficiency
    }

    pub fn effective_bandwidth(&self) -> f64 {
        self.hbm_bandwidth * self.memory_efficiency
    }

    pub fn validate(&self) -> Result<()> {
        positive("hardware.xpu.peak_compute", self.peak_compute)?;
        positive("hardware.xpu.hbm_capacity", self.hbm_capacity)?;
        positive("hardware.xpu.hbm_bandwidth", self.hbm_bandwidth)?;
        positive("hardware.xpu.ici_bandwidth", self.ici_bandwidth)?;
        if !(self.ici_hop_latency >= 0.0 && self.ici_hop_latency.is_finite()) {
            return Err(Error::invalid("hardware.xpu.ici_hop_latency", "must be >= 0"));
        }
        fraction("hardware.xpu.compute_efficiency", self.compute_efficiency)?;
        fraction("hardware.xpu.memory_efficiency", self.memory_efficiency)
    }
}

/// A retrieval host scanning PQ codes with one thread per query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpuServerSpec {
    pub cores: u32,
    pub memory_capacity: f64,
    pub memory_bandwidth: f64,
    /// PQ scan rate of a single core (bytes/s).
    pub per_core_scan_throughput: f64,
    /// Achievable fraction of `memory_bandwidth` during scans.
    #[serde(default = "default_bw_util")]
    pub memory_bw_utilization: f64,
}

fn default_bw_util() -> f64 {
    0.8
}

impl CpuServerSpec {
    pub fn effective_bandwidth(&self) -> f64 {
        self.memory_bandwidth * self.memory_bw_utilization
    }

    pub fn validate(&self) -> Result<()> {
        if self.cores == 0 {
            return Err(Error::invalid("hardware.cpu.cores", "must be >= 1"));
        }
        positive("hardware.cpu.memory_capacity", self.memory_capacity)?;
        positive("hardware.cpu.memory_bandwidth", self.memory_bandwidth)?;
        positive("hardware.cpu.per_core_scan_throughput", self.per_core_scan_throughput)?;
        fraction("hardware.cpu.memory_bw_utilization", self.memory_bw_utilization)
    }
}

/// Resources a schedule may draw from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterBudget {
    pub n_xpus: u32,
    pub xpu: XpuSpec,
    pub n_cpu_servers: u32,
    pub cpu: CpuServerSpec,
    /// XPUs attached to each host; retrieval hosts carry this many XPUs each.
    pub xpus_per_host: u32,
    /// Host-to-XPU link used to ship retrieved passages (bytes/s).
    pub host_link_bandwidth: f64,
}

impl ClusterBudget {
    pub fn validate(&self) -> Result<()> {
        self.xpu.validate()?;
        self.cpu.validate()?;
        if self.xpus_per_host == 0 {
            return Err(Error::invalid("hardware.xpus_per_host", "must be >= 1"));
        }
        positive("hardware.host_link_bandwidth", self.host_link_bandwidth)
    }
}

/// Either kind of catalog entry.
#[derive(Clone, Debug, PartialEq)]
pub enum HardwareSpec {
    Xpu(XpuSpec),
    Cpu(CpuServerSpec),
}

pub const BUILTIN_NAMES: [&str; 4] = ["xpu-a", "xpu-b", "xpu-c", "epyc-milan"];

/// Look up a catalog entry by name.
///
/// ```
/// use ragsched::hardware::{builtin_specs, HardwareSpec};
/// let HardwareSpec::Xpu(c) = builtin_specs("xpu-c").unwrap() else { panic!() };
/// assert_eq!(c.peak_compute, 459e12);
/// ```
pub fn builtin_specs(name: &str) -> Result<HardwareSpec> {
    let xpu = |tflops: f64, hbm_gb: f64, bw_gbs: f64, ici_gbs: f64| {
        HardwareSpec::Xpu(XpuSpec {
            peak_compute: tflops * TFLOPS,
            hbm_capacity: hbm_gb * GB,
            hbm_bandwidth: bw_gbs * GB,
            ici_bandwidth: ici_gbs * GB,
            ici_hop_latency: default_hop_latency(),
            compute_efficiency: 1.0,
            memory_efficiency: 1.0,
        })
    };
    match name {
        "xpu-a" => Ok(xpu(197.0, 16.0, 819.0, 200.0)),
        "xpu-b" => Ok(xpu(275.0, 32.0, 1200.0, 300.0)),
        "xpu-c" => Ok(xpu(459.0, 96.0, 2765.0, 600.0)),
        "epyc-milan" => Ok(HardwareSpec::Cpu(CpuServerSpec {
            cores: 96,
            memory_capacity: 384.0 * GB,
            memory_bandwidth: 460.0 * GB,
            per_core_scan_throughput: 18.0 * GB,
            memory_bw_utilization: 0.8,
        })),
        other => Err(Error::UnknownSpec(other.to_string())),
    }
}

pub fn builtin_xpu(name: &str) -> Result<XpuSpec> {
    match builtin_specs(name)? {
        HardwareSpec::Xpu(x) => Ok(x),
        HardwareSpec::Cpu(_) => Err(Error::invalid("hardware.xpu", format!("`{name}` is a CPU server"))),
    }
}

pub fn builtin_cpu(name: &str) -> Result<CpuServerSpec> {
    match builtin_specs(name)? {
        HardwareSpec::Cpu(c) => Ok(c),
        HardwareSpec::Xpu(_) => Err(Error::invalid("hardware.cpu", format!("`{name}` is an accelerator"))),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(key, "must be a positive number"))
    }
}

fn fraction(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(key, "must lie in (0, 1]"))
    }
}
