//! Scenario files: TOML documents describing topology, workloads and seeds.
//!
//! Every section except `name` and one workload (`[moe]` or `[kv]`) is
//! optional. Unknown keys are rejected so typos surface as errors naming the
//! offending field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use harvest_sim::interconnect::LinkParams;
use harvest_sim::kv_sim::{EvictionOrder, KvModelSpec, STANDARD_ENTRY_COUNTS};
use harvest_sim::moe_sim::{MoEModelSpec, PipelineConfig, RoutingShape};
use harvest_sim::profiles::{kv_model, moe_model, CalibrationProfile, LinkPair};
use harvest_sim::runtime::Durability;
use harvest_sim::{Tier, GIB};
use serde::Deserialize;

use crate::CliError;

pub const LINK_NAMES: [&str; 4] = ["expert_peer", "expert_host", "kv_peer", "kv_host"];

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_profile")]
    pub profile: String,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub capacity: CapacitySection,
    /// Link overrides keyed by one of [`LINK_NAMES`].
    #[serde(default)]
    pub links: BTreeMap<String, LinkSection>,
    pub moe: Option<MoeSection>,
    pub kv: Option<KvSection>,
    pub chaos: Option<ChaosSection>,
    pub availability: Option<AvailabilitySection>,
}

fn default_profile() -> String {
    harvest_sim::profiles::PAPER_H100.to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySection {
    pub local_gib: Option<f64>,
    pub peer_gib: Option<f64>,
    pub host_gib: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub fixed_cost_s: f64,
    pub bandwidth_bytes_per_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierName {
    Peer,
    Host,
}

impl TierName {
    pub fn tier(self) -> Tier {
        match self {
            TierName::Peer => Tier::PeerHbm,
            TierName::Host => Tier::HostDram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSection {
    pub models: Vec<String>,
    #[serde(default = "default_fractions")]
    pub fractions_pct: Vec<f64>,
    #[serde(default = "default_tiers")]
    pub tiers: Vec<TierName>,
    #[serde(default = "default_skew")]
    pub skew: f64,
    #[serde(default)]
    pub drift_period: u32,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

fn default_fractions() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 10.0).collect()
}

fn default_tiers() -> Vec<TierName> {
    vec![TierName::Peer, TierName::Host]
}

fn default_skew() -> f64 {
    RoutingShape::default().skew
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub microbatch_tokens: u32,
    pub num_microbatches: u32,
    pub local_cache_experts: u32,
    pub decode_steps: u32,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            microbatch_tokens: 324,
            num_microbatches: 14,
            local_cache_experts: 0,
            decode_steps: 1,
        }
    }
}

impl PipelineSection {
    pub fn config(&self) -> PipelineConfig {
        let mut p = PipelineConfig::new(self.microbatch_tokens, self.num_microbatches);
        p.local_cache_experts = self.local_cache_experts;
        p.decode_steps = self.decode_steps;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvSection {
    pub models: Vec<String>,
    #[serde(default = "default_entries")]
    pub entry_counts: Vec<u64>,
    pub workload: Option<KvWorkloadSection>,
}

fn default_entries() -> Vec<u64> {
    STANDARD_ENTRY_COUNTS.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurabilityName {
    Backed,
    Lossy,
}

impl DurabilityName {
    pub fn durability(self) -> Durability {
        match self {
            DurabilityName::Backed => Durability::Backed,
            DurabilityName::Lossy => Durability::Lossy,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DurabilityName::Backed => "backed",
            DurabilityName::Lossy => "lossy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KvWorkloadSection {
    pub sequences: u32,
    pub steps: u32,
    pub tokens_per_step: u32,
    pub step_time_s: f64,
    pub durability: Vec<DurabilityName>,
    pub block_size: u32,
    pub order: EvictionOrder,
    pub watermark: f64,
    /// Local HBM budget for KV blocks, in blocks.
    pub local_blocks: u64,
    /// Host DRAM budget for KV blocks, in blocks.
    pub host_blocks: u64,
}

impl Default for KvWorkloadSection {
    fn default() -> Self {
        Self {
            sequences: 4,
            steps: 32,
            tokens_per_step: 4,
            step_time_s: 1e-3,
            durability: vec![DurabilityName::Backed, DurabilityName::Lossy],
            block_size: 16,
            order: EvictionOrder::Lru,
            watermark: 1.0,
            local_blocks: 8,
            host_blocks: 4096,
        }
    }
}

/// Revokes every peer allocation after an exponential delay.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosSection {
    pub mean_delay_s: f64,
    #[serde(default = "one")]
    pub coverage: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AvailabilitySection {
    /// Peer capacity never changes.
    Static,
    Markov {
        levels_gib: Vec<f64>,
        mean_sojourns_s: Vec<f64>,
        horizon_s: f64,
    },
    Trace {
        path: PathBuf,
        machine: Option<String>,
        #[serde(default = "one")]
        time_scale: f64,
    },
}

/// A scenario with every reference resolved.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: Scenario,
    pub profile: CalibrationProfile,
    pub moe_models: Vec<MoEModelSpec>,
    pub kv_models: Vec<KvModelSpec>,
    pub seeds: Vec<u64>,
    /// Directory relative paths inside the scenario resolve against.
    pub base_dir: PathBuf,
}

fn invalid(field: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {message}"))
}

fn gib(field: &str, value: f64) -> Result<u64, CliError> {
    if !(value.is_finite() && value >= 0.0) {
        return Err(invalid(field, format!("{value} must be a non-negative number")));
    }
    Ok((value * GIB as f64).round() as u64)
}

fn positive(field: &str, value: f64) -> Result<(), CliError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("{value} must be positive")))
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().trim_end();
            if path == "." || path.is_empty() {
                CliError::Config(format!("scenario: {message}"))
            } else {
                CliError::Config(format!("{path}: {message}"))
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks every field and resolves profile and model names.
    /// `seed_override` and `profile_override` come from the command line.
    pub fn resolve(
        self,
        seed_override: &[u64],
        profile_override: Option<&str>,
        base_dir: &Path,
    ) -> Result<Resolved, CliError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        let seeds = if seed_override.is_empty() {
            self.seeds.clone()
        } else {
            seed_override.to_vec()
        };
        if seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let profile_name = profile_override.unwrap_or(&self.profile);
        let mut profile = CalibrationProfile::by_name(profile_name)
            .map_err(|e| invalid("profile", e))?;

        if let Some(v) = self.capacity.local_gib {
            profile.local_capacity = gib("capacity.local_gib", v)?;
        }
        if let Some(v) = self.capacity.peer_gib {
            profile.peer_capacity = gib("capacity.peer_gib", v)?;
        }
        if let Some(v) = self.capacity.host_gib {
            profile.host_capacity = gib("capacity.host_gib", v)?;
        }
        for (name, link) in &self.links {
            let params = LinkParams::new(link.fixed_cost_s, link.bandwidth_bytes_per_s);
            params
                .validate()
                .map_err(|e| invalid(&format!("links.{name}"), e))?;
            let slot: &mut LinkPair = match name.as_str() {
                "expert_peer" | "expert_host" => &mut profile.expert_links,
                "kv_peer" | "kv_host" => &mut profile.kv_links,
                other => {
                    return Err(invalid(
                        &format!("links.{other}"),
                        format!("unknown link, expected one of {}", LINK_NAMES.join(", ")),
                    ))
                }
            };
            if name.ends_with("peer") {
                slot.peer = params;
            } else {
                slot.host = params;
            }
        }
        for (field, links) in [("expert", profile.expert_links), ("kv", profile.kv_links)] {
            profile
                .topology(&links)
                .map_err(|e| invalid(&format!("topology ({field} links)"), e))?;
        }

        if self.moe.is_none() && self.kv.is_none() {
            return Err(invalid("moe/kv", "a scenario needs at least one workload section"));
        }

        let mut moe_models = Vec::new();
        if let Some(moe) = &self.moe {
            if moe.models.is_empty() {
                return Err(invalid("moe.models", "must list at least one model"));
            }
            for name in &moe.models {
                moe_models.push(moe_model(name).map_err(|e| invalid("moe.models", e))?);
            }
            if moe.fractions_pct.is_empty() {
                return Err(invalid("moe.fractions_pct", "must not be empty"));
            }
            if let Some(f) = moe.fractions_pct.iter().find(|f| !(0.0..=100.0).contains(*f)) {
                return Err(invalid("moe.fractions_pct", format!("{f} is outside [0, 100]")));
            }
            if moe.tiers.is_empty() {
                return Err(invalid("moe.tiers", "must not be empty"));
            }
            if !(moe.skew.is_finite() && moe.skew >= 0.0) {
                return Err(invalid("moe.skew", format!("{} must be non-negative", moe.skew)));
            }
            let pipeline = moe.pipeline.config();
            pipeline
                .validate()
                .map_err(|e| invalid("moe.pipeline", e))?;
            for m in &moe_models {
                if moe.pipeline.local_cache_experts > m.num_experts {
                    return Err(invalid(
                        "moe.pipeline.local_cache_experts",
                        format!("{} exceeds the {} experts of {}", moe.pipeline.local_cache_experts, m.num_experts, m.name),
                    ));
                }
            }
        }

        let mut kv_models = Vec::new();
        if let Some(kv) = &self.kv {
            if kv.models.is_empty() {
                return Err(invalid("kv.models", "must list at least one model"));
            }
            for name in &kv.models {
                kv_models.push(kv_model(name).map_err(|e| invalid("kv.models", e))?);
            }
            if kv.entry_counts.is_empty() || kv.entry_counts.contains(&0) {
                return Err(invalid("kv.entry_counts", "must be non-empty and positive"));
            }
            if let Some(w) = &kv.workload {
                let fields = [
                    ("kv.workload.sequences", w.sequences as u64),
                    ("kv.workload.steps", w.steps as u64),
                    ("kv.workload.tokens_per_step", w.tokens_per_step as u64),
                    ("kv.workload.block_size", w.block_size as u64),
                    ("kv.workload.local_blocks", w.local_blocks),
                ];
                for (field, value) in fields {
                    if value == 0 {
                        return Err(invalid(field, "must be positive"));
                    }
                }
                positive("kv.workload.step_time_s", w.step_time_s)?;
                if !(w.watermark > 0.0 && w.watermark <= 1.0) {
                    return Err(invalid("kv.workload.watermark", format!("{} is outside (0, 1]", w.watermark)));
                }
                if w.durability.is_empty() {
                    return Err(invalid("kv.workload.durability", "must not be empty"));
                }
            }
        }

        if let Some(c) = &self.chaos {
            if !(c.mean_delay_s.is_finite() && c.mean_delay_s >= 0.0) {
                return Err(invalid("chaos.mean_delay_s", format!("{} must be non-negative", c.mean_delay_s)));
            }
            if !(0.0..=1.0).contains(&c.coverage) {
                return Err(invalid("chaos.coverage", format!("{} is outside [0, 1]", c.coverage)));
            }
        }

        match &self.availability {
            Some(AvailabilitySection::Markov {
                levels_gib,
                mean_sojourns_s,
                horizon_s,
            }) => {
                if levels_gib.is_empty() || levels_gib.len() != mean_sojourns_s.len() {
                    return Err(invalid(
                        "availability.levels_gib",
                        "needs one mean sojourn per level and at least one level",
                    ));
                }
                for v in levels_gib {
                    gib("availability.levels_gib", *v)?;
                }
                for s in mean_sojourns_s {
                    positive("availability.mean_sojourns_s", *s)?;
                }
                positive("availability.horizon_s", *horizon_s)?;
            }
            Some(AvailabilitySection::Trace { time_scale, .. }) => {
                positive("availability.time_scale", *time_scale)?;
            }
            Some(AvailabilitySection::Static) | None => {}
        }

        Ok(Resolved {
            scenario: self,
            profile,
            moe_models,
            kv_models,
            seeds,
            base_dir: base_dir.to_path_buf(),
        })
    }
}
