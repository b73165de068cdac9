//! Named calibration profiles and model profiles.
//!
//! The `paper-h100` profile describes a dual-H100 box: one compute GPU, one
//! peer GPU of the same size and a large host DRAM pool. It carries two link
//! pairs. Expert-weight traffic moves multi-megabyte tensors that saturate
//! the links, while KV reloads move many small per-layer slices with more
//! per-transfer overhead, so one affine pair cannot describe both.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interconnect::{LinkKind, LinkParams, LinkSpec, Topology, TopologyError};
use crate::kv_sim::KvModelSpec;
use crate::memalloc::{DeviceId, DeviceSpec, Tier};
use crate::moe_sim::MoEModelSpec;
use crate::GIB;

pub const PAPER_H100: &str = "paper-h100";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("unknown calibration profile '{0}'")]
    UnknownProfile(String),
    #[error("unknown model profile '{0}'")]
    UnknownModel(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Peer and host link parameters for one traffic class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkPair {
    pub peer: LinkParams,
    pub host: LinkParams,
}

impl LinkPair {
    /// Reload speedup of the peer path over the host path for `bytes`.
    pub fn speedup(&self, bytes: u64) -> f64 {
        self.host.transfer_time(bytes) / self.peer.transfer_time(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub name: String,
    pub local_capacity: u64,
    pub peer_capacity: u64,
    pub host_capacity: u64,
    /// Links used for expert weights.
    pub expert_links: LinkPair,
    /// Links used for KV blocks.
    pub kv_links: LinkPair,
}

impl CalibrationProfile {
    pub fn paper_h100() -> Self {
        Self {
            name: PAPER_H100.into(),
            local_capacity: 80 * GIB,
            peer_capacity: 80 * GIB,
            host_capacity: 640 * GIB,
            expert_links: LinkPair {
                peer: LinkParams::new(19e-6, 300e9),
                host: LinkParams::new(38e-6, 31.25e9),
            },
            kv_links: LinkPair {
                peer: LinkParams::new(42e-6, 250e9),
                host: LinkParams::new(50e-6, 44e9),
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self, ProfileError> {
        match name {
            PAPER_H100 => Ok(Self::paper_h100()),
            other => Err(ProfileError::UnknownProfile(other.into())),
        }
    }

    /// Device 0 local HBM, device 1 peer HBM, device 2 host DRAM; links
    /// 0-1 (peer), 0-2 and 1-2 (host).
    pub fn topology(&self, links: &LinkPair) -> Result<Topology, TopologyError> {
        three_device_topology(
            self.local_capacity,
            self.peer_capacity,
            self.host_capacity,
            links,
        )
    }

    pub fn expert_topology(&self) -> Result<Topology, TopologyError> {
        self.topology(&self.expert_links)
    }

    pub fn kv_topology(&self) -> Result<Topology, TopologyError> {
        self.topology(&self.kv_links)
    }
}

pub fn three_device_topology(
    local: u64,
    peer: u64,
    host: u64,
    links: &LinkPair,
) -> Result<Topology, TopologyError> {
    let (l, p, h) = (DeviceId(0), DeviceId(1), DeviceId(2));
    Topology::new(
        vec![
            DeviceSpec::new(0, Tier::LocalHbm, local),
            DeviceSpec::new(1, Tier::PeerHbm, peer),
            DeviceSpec::new(2, Tier::HostDram, host),
        ],
        vec![
            LinkSpec::new(LinkKind::PeerLink, links.peer, l, p),
            LinkSpec::new(LinkKind::HostLink, links.host, l, h),
            LinkSpec::new(LinkKind::HostLink, links.host, p, h),
        ],
    )
}

/// Bytes of one expert in one layer: total parameters split evenly over
/// layers and experts, two bytes each. Attention and embedding weights are
/// ignored, so this overstates expert size slightly.
pub fn expert_bytes(total_params: f64, layers: u32, experts: u32) -> u64 {
    (total_params / (layers as f64 * experts as f64) * 2.0).round() as u64
}

pub const MOE_MODELS: [&str; 4] = ["mixtral-8x7b", "phi-3.5-moe", "phi-tiny-moe", "qwen2-moe"];

/// The four evaluated MoE models. Compute times per layer per micro-batch
/// are set so that the host-offload baseline lands in the observed speedup
/// band; they are not kernel measurements.
pub fn moe_model(name: &str) -> Result<MoEModelSpec, ProfileError> {
    let (layers, experts, top_k, params, compute) = match name {
        "mixtral-8x7b" => (32, 8, 2, 47.0e9, 24.8e-3),
        "phi-3.5-moe" => (32, 16, 2, 60.8e9, 29.1e-3),
        "phi-tiny-moe" => (32, 16, 2, 3.8e9, 2.74e-3),
        "qwen2-moe" => (24, 64, 4, 14.3e9, 12.1e-3),
        other => return Err(ProfileError::UnknownModel(other.into())),
    };
    Ok(MoEModelSpec {
        name: name.into(),
        num_layers: layers,
        num_experts: experts,
        top_k,
        expert_size: expert_bytes(params, layers, experts),
        compute_time_per_microbatch: compute,
    })
}

pub const KV_MODELS: [&str; 3] = ["kimi-k2", "deepseek-v3", "mistral-large-3"];

/// Default recompute cost per entry; large enough that fetching always wins
/// under `paper-h100`.
pub const DEFAULT_RECOMPUTE_PER_ENTRY: f64 = 1e-3;

/// KV models with FP16 entries.
///
/// * Kimi-K2: 61 layers, 64 heads, K and V head dims 192 and 128, stored
///   expanded per head.
/// * DeepSeek-V3: the same layout with 128 heads.
/// * Mistral-Large-3: 61 layers storing the 576-wide compressed latent.
pub fn kv_model(name: &str) -> Result<KvModelSpec, ProfileError> {
    let bytes_per_entry = match name {
        "kimi-k2" => 61 * 64 * (192 + 128) * 2,
        "deepseek-v3" => 61 * 128 * (192 + 128) * 2,
        "mistral-large-3" => 61 * 576 * 2,
        other => return Err(ProfileError::UnknownModel(other.into())),
    };
    Ok(KvModelSpec {
        name: name.into(),
        bytes_per_entry,
        recompute_time_per_entry: DEFAULT_RECOMPUTE_PER_ENTRY,
    })
}
