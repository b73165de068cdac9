//! Transfer-cost model, calibration and per-link FIFO scheduling.
//!
//! Every link is affine: moving `n` bytes costs `fixed_cost + n / bandwidth`
//! seconds. A link carries one transfer at a time; later requests queue
//! behind earlier ones in issue order.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memalloc::{DeviceId, DeviceSpec, Segment, Tier};
use crate::sim::{EventQueue, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinkKind {
    PeerLink,
    HostLink,
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkKind::PeerLink => "peer",
            LinkKind::HostLink => "host",
        })
    }
}

/// Affine cost parameters of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// Seconds paid by every transfer regardless of size.
    pub fixed_cost: f64,
    /// Bytes per second.
    pub bandwidth: f64,
}

impl LinkParams {
    pub fn new(fixed_cost: f64, bandwidth: f64) -> Self {
        Self {
            fixed_cost,
            bandwidth,
        }
    }

    pub fn transfer_time(&self, size: u64) -> f64 {
        self.fixed_cost + size as f64 / self.bandwidth
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if !(self.fixed_cost >= 0.0 && self.fixed_cost.is_finite()) {
            return Err(TopologyError::InvalidLink(format!(
                "fixed cost {} must be finite and non-negative",
                self.fixed_cost
            )));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(TopologyError::InvalidLink(format!(
                "bandwidth {} must be finite and positive",
                self.bandwidth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub kind: LinkKind,
    pub params: LinkParams,
    pub endpoints: (DeviceId, DeviceId),
    pub hops: u32,
}

impl LinkSpec {
    pub fn new(kind: LinkKind, params: LinkParams, a: DeviceId, b: DeviceId) -> Self {
        Self {
            kind,
            params,
            endpoints: (a, b),
            hops: 1,
        }
    }

    pub fn with_hops(mut self, hops: u32) -> Self {
        self.hops = hops;
        self
    }

    pub fn connects(&self, a: DeviceId, b: DeviceId) -> bool {
        self.endpoints == (a, b) || self.endpoints == (b, a)
    }

    pub fn transfer_time(&self, size: u64) -> f64 {
        self.params.transfer_time(size)
    }
}

/// Free-function form of [`LinkSpec::transfer_time`].
pub fn transfer_time(link: &LinkSpec, size: u64) -> f64 {
    link.transfer_time(size)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("invalid device: {0}")]
    InvalidDevice(String),
    #[error("topology needs exactly one local HBM device, found {0}")]
    LocalDeviceCount(usize),
    #[error("{0} cannot reach the local device")]
    Unreachable(DeviceId),
    #[error("more than one link between {0} and {1}")]
    DuplicateLink(DeviceId, DeviceId),
    #[error("no route from {0} to {1}")]
    NoRoute(DeviceId, DeviceId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub usize);

/// Devices plus the links between them. Exactly one device is the compute
/// GPU (LocalHbm); every peer and host device must link to it directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub devices: Vec<DeviceSpec>,
    pub links: Vec<LinkSpec>,
    /// Route transfers without a direct link through host DRAM.
    #[serde(default)]
    pub host_staging: bool,
}

impl Topology {
    pub fn new(devices: Vec<DeviceSpec>, links: Vec<LinkSpec>) -> Result<Self, TopologyError> {
        let topo = Self {
            devices,
            links,
            host_staging: false,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut ids = BTreeMap::new();
        for d in &self.devices {
            d.validate()
                .map_err(|e| TopologyError::InvalidDevice(e.to_string()))?;
            if ids.insert(d.device_id, d.tier).is_some() {
                return Err(TopologyError::InvalidDevice(format!(
                    "duplicate device id {}",
                    d.device_id
                )));
            }
        }
        let locals: Vec<_> = self
            .devices
            .iter()
            .filter(|d| d.tier == Tier::LocalHbm)
            .collect();
        if locals.len() != 1 {
            return Err(TopologyError::LocalDeviceCount(locals.len()));
        }
        let local = locals[0].device_id;
        for (i, l) in self.links.iter().enumerate() {
            l.params.validate()?;
            if l.hops == 0 {
                return Err(TopologyError::InvalidLink("hops must be >= 1".into()));
            }
            let (a, b) = l.endpoints;
            if a == b || !ids.contains_key(&a) || !ids.contains_key(&b) {
                return Err(TopologyError::InvalidLink(format!(
                    "link {a}-{b} must join two distinct known devices"
                )));
            }
            if self.links[..i].iter().any(|o| o.connects(a, b)) {
                return Err(TopologyError::DuplicateLink(a, b));
            }
        }
        for d in &self.devices {
            if d.tier != Tier::LocalHbm && self.link_between(d.device_id, local).is_none() {
                return Err(TopologyError::Unreachable(d.device_id));
            }
        }
        Ok(())
    }

    pub fn device(&self, id: DeviceId) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.device_id == id)
    }

    pub fn local_device(&self) -> DeviceId {
        self.devices
            .iter()
            .find(|d| d.tier == Tier::LocalHbm)
            .map(|d| d.device_id)
            .expect("validated topology has a local device")
    }

    pub fn host_device(&self) -> Option<DeviceId> {
        self.devices_in(Tier::HostDram).next()
    }

    pub fn devices_in(&self, tier: Tier) -> impl Iterator<Item = DeviceId> + '_ {
        self.devices
            .iter()
            .filter(move |d| d.tier == tier)
            .map(|d| d.device_id)
    }

    pub fn link_between(&self, a: DeviceId, b: DeviceId) -> Option<(LinkId, &LinkSpec)> {
        self.links
            .iter()
            .enumerate()
            .find(|(_, l)| l.connects(a, b))
            .map(|(i, l)| (LinkId(i), l))
    }

    /// Hop distance from `device` to the compute GPU.
    pub fn hops_to_local(&self, device: DeviceId) -> Option<u32> {
        self.link_between(device, self.local_device())
            .map(|(_, l)| l.hops)
    }

    /// Links a transfer from `src` to `dst` traverses, in order.
    pub fn route(&self, src: DeviceId, dst: DeviceId) -> Result<Vec<LinkId>, TopologyError> {
        if let Some((id, _)) = self.link_between(src, dst) {
            return Ok(vec![id]);
        }
        if self.host_staging {
            if let Some(host) = self.host_device() {
                if let (Some((a, _)), Some((b, _))) =
                    (self.link_between(src, host), self.link_between(host, dst))
                {
                    return Ok(vec![a, b]);
                }
            }
        }
        Err(TopologyError::NoRoute(src, dst))
    }

    pub fn link(&self, id: LinkId) -> &LinkSpec {
        &self.links[id.0]
    }
}

/// One side of a transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub device: DeviceId,
    pub segment: Segment,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferRequest {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub size: u64,
    pub issue_time: SimTime,
    pub tag: u64,
}

/// Where and when a transfer runs once the link queue is accounted for.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledTransfer {
    pub tag: u64,
    pub route: Vec<LinkId>,
    pub size: u64,
    pub issue_time: SimTime,
    pub start_time: SimTime,
    pub completion_time: SimTime,
}

impl ScheduledTransfer {
    pub fn queuing_delay(&self) -> f64 {
        self.start_time - self.issue_time
    }
}

/// Per-link busy horizon; each link serializes its transfers FIFO.
#[derive(Debug, Clone, Default)]
pub struct LinkScheduler {
    busy_until: BTreeMap<LinkId, SimTime>,
}

impl LinkScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn busy_until(&self, link: LinkId) -> SimTime {
        self.busy_until.get(&link).copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Reserves the route for `size` bytes issued at `issue_time`. Staged
    /// routes are store-and-forward: each hop starts once the previous hop
    /// finished and its own link is free.
    pub fn reserve(
        &mut self,
        topology: &Topology,
        src: DeviceId,
        dst: DeviceId,
        size: u64,
        issue_time: SimTime,
        tag: u64,
    ) -> Result<ScheduledTransfer, TopologyError> {
        let route = topology.route(src, dst)?;
        let mut ready = issue_time;
        let mut start_time = None;
        for &link in &route {
            let start = ready.max(self.busy_until(link));
            start_time.get_or_insert(start);
            let done = start + topology.link(link).transfer_time(size);
            self.busy_until.insert(link, done);
            ready = done;
        }
        Ok(ScheduledTransfer {
            tag,
            route,
            size,
            issue_time,
            start_time: start_time.unwrap_or(issue_time),
            completion_time: ready,
        })
    }
}

/// Schedules `req` and enqueues its completion as an event built by `wrap`.
pub fn schedule_transfer<E>(
    req: &TransferRequest,
    topology: &Topology,
    links: &mut LinkScheduler,
    queue: &mut EventQueue<E>,
    wrap: impl FnOnce(&ScheduledTransfer) -> E,
) -> Result<ScheduledTransfer, TopologyError> {
    let scheduled = links.reserve(
        topology,
        req.src.device,
        req.dst.device,
        req.size,
        req.issue_time,
        req.tag,
    )?;
    queue.push(scheduled.completion_time, wrap(&scheduled));
    Ok(scheduled)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("all points share the same size; bandwidth is unidentifiable")]
    DegenerateSizes,
    #[error("point {index}: {reason}")]
    InvalidPoint { index: usize, reason: String },
    #[error("fitted slope is not positive; latency does not grow with size")]
    NonPositiveSlope,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub params: LinkParams,
    /// Root-mean-square of `(predicted - measured) / measured` over the input.
    pub rms_relative_error: f64,
    /// Whether the raw fit produced a negative fixed cost that was clamped.
    pub clamped: bool,
}

/// Fits `latency = fixed_cost + size / bandwidth` to measured points.
///
/// Residuals are weighted by `1 / latency^2`, i.e. the fit minimizes squared
/// relative error, so small transfers (which pin the fixed cost) are not
/// drowned out by large ones.
pub fn calibrate(points: &[(f64, f64)]) -> Result<Calibration, CalibrationError> {
    if points.len() < 2 {
        return Err(CalibrationError::TooFewPoints(points.len()));
    }
    for (index, &(size, latency)) in points.iter().enumerate() {
        if !(size.is_finite() && size >= 0.0) {
            return Err(CalibrationError::InvalidPoint {
                index,
                reason: format!("size {size} must be finite and non-negative"),
            });
        }
        if !(latency.is_finite() && latency > 0.0) {
            return Err(CalibrationError::InvalidPoint {
                index,
                reason: format!("latency {latency} must be finite and positive"),
            });
        }
    }
    let first = points[0].0;
    if points.iter().all(|p| p.0 == first) {
        return Err(CalibrationError::DegenerateSizes);
    }

    let weights: Vec<f64> = points.iter().map(|&(_, y)| 1.0 / (y * y)).collect();
    let sw: f64 = weights.iter().sum();
    let xbar = points.iter().zip(&weights).map(|(p, w)| w * p.0).sum::<f64>() / sw;
    let ybar = points.iter().zip(&weights).map(|(p, w)| w * p.1).sum::<f64>() / sw;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (&(x, y), w) in points.iter().zip(&weights) {
        sxy += w * (x - xbar) * (y - ybar);
        sxx += w * (x - xbar) * (x - xbar);
    }
    let mut slope = sxy / sxx;
    let mut intercept = ybar - slope * xbar;
    let mut clamped = false;
    if intercept < 0.0 {
        clamped = true;
        intercept = 0.0;
        let num: f64 = points.iter().zip(&weights).map(|(p, w)| w * p.0 * p.1).sum();
        let den: f64 = points.iter().zip(&weights).map(|(p, w)| w * p.0 * p.0).sum();
        slope = num / den;
    }
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(CalibrationError::NonPositiveSlope);
    }
    let params = LinkParams::new(intercept, 1.0 / slope);
    Ok(Calibration {
        params,
        rms_relative_error: rms_relative_error(&params, points),
        clamped,
    })
}

pub fn rms_relative_error(params: &LinkParams, points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let sum: f64 = points
        .iter()
        .map(|&(x, y)| {
            let predicted = params.fixed_cost + x / params.bandwidth;
            ((predicted - y) / y).powi(2)
        })
        .sum();
    (sum / points.len() as f64).sqrt()
}

/// Parses `size_bytes,latency_seconds` lines. Blank lines and anything after
/// `#` are ignored.
pub fn parse_points(text: &str) -> Result<Vec<(f64, f64)>, CalibrationError> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |reason: String| CalibrationError::Parse { line: i + 1, reason };
        if fields.len() != 2 {
            return Err(err(format!("expected 2 fields, found {}", fields.len())));
        }
        let size: f64 = fields[0]
            .parse()
            .map_err(|_| err(format!("size {:?} is not a number", fields[0])))?;
        let latency: f64 = fields[1]
            .parse()
            .map_err(|_| err(format!("latency {:?} is not a number", fields[1])))?;
        points.push((size, latency));
    }
    Ok(points)
}
