//! Timeline event vocabulary and CSV export.

use std::io::Write;

use crate::{RankId, Seconds};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Attention,
    Dispatch,
    MoeCompute,
    Combine,
    Predict,
    Plan,
    PrefetchPart1,
    PrefetchPart2,
    Update,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Attention => "attention",
            Phase::Dispatch => "dispatch",
            Phase::MoeCompute => "moe_compute",
            Phase::Combine => "combine",
            Phase::Predict => "predict",
            Phase::Plan => "plan",
            Phase::PrefetchPart1 => "prefetch_part1",
            Phase::PrefetchPart2 => "prefetch_part2",
            Phase::Update => "update",
        }
    }

    pub fn resource(self) -> Resource {
        match self {
            Phase::Attention | Phase::MoeCompute => Resource::Compute,
            Phase::Dispatch | Phase::Combine | Phase::PrefetchPart1 | Phase::PrefetchPart2 => {
                Resource::Network
            }
            Phase::Predict | Phase::Plan | Phase::Update => Resource::Control,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resource {
    Compute,
    Network,
    Control,
}

impl Resource {
    pub fn name(self) -> &'static str {
        match self {
            Resource::Compute => "compute",
            Resource::Network => "network",
            Resource::Control => "control",
        }
    }
}

/// One scheduled interval on a rank's compute, network, or control
/// resource. Intervals on the same (rank, resource) never overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseEvent {
    pub rank: RankId,
    pub layer: usize,
    pub phase: Phase,
    pub start: Seconds,
    pub end: Seconds,
}

impl PhaseEvent {
    pub fn resource(&self) -> Resource {
        self.phase.resource()
    }
}

pub fn write_events_csv<W: Write>(out: &mut W, events: &[PhaseEvent]) -> std::io::Result<()> {
    writeln!(out, "rank,layer,phase,start_s,end_s,resource")?;
    for ev in events {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            ev.rank,
            ev.layer,
            ev.phase.name(),
            ev.start,
            ev.end,
            ev.resource().name()
        )?;
    }
    Ok(())
}
