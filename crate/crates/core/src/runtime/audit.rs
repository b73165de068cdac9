//! Post-hoc ordering checks over a runtime event log.

use std::collections::BTreeMap;
use std::fmt;

use super::{LogKind, LogRecord, Origin};
use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// A transfer touching the region completed after the region was freed.
    CompletionAfterFree { generation: u64, completed: SimTime, freed: SimTime },
    /// A transfer touching a revoked region completed at or after invalidation.
    CompletionAfterInvalidate { generation: u64, completed: SimTime, invalidated: SimTime },
    /// The callback did not strictly follow invalidation.
    NotifyBeforeInvalidate { generation: u64, notified: SimTime },
    /// The segment was freed before (or without) invalidation.
    FreeBeforeInvalidate { generation: u64, freed: SimTime },
    /// A revoked region was freed before its callback ran.
    FreeBeforeNotify { generation: u64, freed: SimTime },
    /// A transfer was issued against an invalidated handle.
    StaleTransfer { generation: u64, issued: SimTime },
    /// More than one callback for one allocation.
    DuplicateNotify { generation: u64 },
    /// The runtime moved data on its own.
    RuntimeTransfer { issued: SimTime },
    /// Log timestamps went backwards.
    TimeReversal { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Default)]
struct Life {
    revoked: bool,
    invalidated: Option<SimTime>,
    notified: Option<SimTime>,
    freed: Option<SimTime>,
    completions: Vec<SimTime>,
}

/// Returns every ordering violation found in `log`.
pub fn check_log(log: &[LogRecord]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut lives: BTreeMap<u64, Life> = BTreeMap::new();
    let mut last = f64::NEG_INFINITY;
    for (index, rec) in log.iter().enumerate() {
        if rec.time < last {
            out.push(Violation::TimeReversal { index });
        }
        last = rec.time;
        match &rec.kind {
            LogKind::TransferIssued {
                src_generation,
                dst_generation,
                origin,
                ..
            } => {
                if *origin == Origin::Runtime {
                    out.push(Violation::RuntimeTransfer { issued: rec.time });
                }
                for g in [src_generation, dst_generation].into_iter().flatten() {
                    if lives.get(g).is_some_and(|l| l.invalidated.is_some()) {
                        out.push(Violation::StaleTransfer {
                            generation: *g,
                            issued: rec.time,
                        });
                    }
                }
            }
            LogKind::TransferCompleted { generations, .. } => {
                for g in generations {
                    let life = lives.entry(*g).or_default();
                    life.completions.push(rec.time);
                    if let Some(freed) = life.freed {
                        out.push(Violation::CompletionAfterFree {
                            generation: *g,
                            completed: rec.time,
                            freed,
                        });
                    }
                    if let (true, Some(inv)) = (life.revoked, life.invalidated) {
                        out.push(Violation::CompletionAfterInvalidate {
                            generation: *g,
                            completed: rec.time,
                            invalidated: inv,
                        });
                    }
                }
            }
            LogKind::RevokeRequested { handle, .. } => {
                lives.entry(handle.generation).or_default().revoked = true;
            }
            LogKind::Invalidated { handle, .. } => {
                let life = lives.entry(handle.generation).or_default();
                life.invalidated = Some(rec.time);
                if life.revoked {
                    for &c in &life.completions {
                        if c >= rec.time {
                            out.push(Violation::CompletionAfterInvalidate {
                                generation: handle.generation,
                                completed: c,
                                invalidated: rec.time,
                            });
                        }
                    }
                }
            }
            LogKind::CallbackFired { handle, .. } | LogKind::CallbackAbsent { handle } => {
                let life = lives.entry(handle.generation).or_default();
                if life.notified.is_some() {
                    out.push(Violation::DuplicateNotify {
                        generation: handle.generation,
                    });
                }
                life.notified = Some(rec.time);
                if !life.invalidated.is_some_and(|inv| inv < rec.time) {
                    out.push(Violation::NotifyBeforeInvalidate {
                        generation: handle.generation,
                        notified: rec.time,
                    });
                }
            }
            LogKind::Freed { handle } => {
                let life = lives.entry(handle.generation).or_default();
                life.freed = Some(rec.time);
                if life.invalidated.is_none() {
                    out.push(Violation::FreeBeforeInvalidate {
                        generation: handle.generation,
                        freed: rec.time,
                    });
                }
                if life.revoked && !life.notified.is_some_and(|n| n < rec.time) {
                    out.push(Violation::FreeBeforeNotify {
                        generation: handle.generation,
                        freed: rec.time,
                    });
                }
                if life.completions.iter().any(|&c| c > rec.time) {
                    out.push(Violation::CompletionAfterFree {
                        generation: handle.generation,
                        completed: rec.time,
                        freed: rec.time,
                    });
                }
            }
            LogKind::Allocated { .. } | LogKind::AllocRejected { .. } | LogKind::LimitChanged { .. } => {}
        }
    }
    out
}
