//! Discrete-event model of opportunistic peer-GPU memory caching.
//!
//! Three memory tiers are modeled: the compute GPU's local HBM, spare HBM on
//! peer GPUs reached over a fast peer link, and host DRAM reached over the
//! host link. Peer memory is harvested best-effort through [`runtime::Runtime`]
//! and may be revoked at any time; the two workloads in [`moe_sim`] and
//! [`kv_sim`] show how applications stay correct while profiting from it.

pub mod content;
pub mod interconnect;
pub mod kv_sim;
pub mod memalloc;
pub mod moe_sim;
pub mod profiles;
pub mod runtime;
pub mod sim;
pub mod traces;

pub use memalloc::{DeviceId, DeviceSpec, DeviceState, Segment, Tier};
pub use sim::SimTime;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
