//! The planner's output: replica deltas, the token assignment, and per-rank
//! feasibility certificates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Assignment, Placement};
use crate::{ExpertId, RankId, Seconds, TokenCount};

/// Per-rank transfer-vs-window certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankFeasibility {
    pub transfer_seconds: Seconds,
    pub window_seconds: Seconds,
}

impl RankFeasibility {
    pub fn fits(&self) -> bool {
        self.transfer_seconds <= self.window_seconds
    }
}

/// A replication + assignment decision for one layer.
///
/// `delta_in[r]` are the experts whose weights rank `r` receives before the
/// layer runs; `delta_out[r]` are the experts rank `r` transmits (it is the
/// weight source for replicas admitted elsewhere — the base copy keeps
/// serving locally, so eviction is plain slot bookkeeping with no traffic).
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub placement: Placement,
    pub assignment: Assignment,
    pub delta_in: Vec<Vec<ExpertId>>,
    pub delta_out: Vec<Vec<ExpertId>>,
    pub iterations_used: usize,
    pub feasibility: Vec<RankFeasibility>,
    pub degraded: bool,
    pub violating_ranks: Vec<RankId>,
}

impl Plan {
    pub fn ep(&self) -> usize {
        self.placement.ep()
    }

    pub fn total_replicas(&self) -> usize {
        self.delta_in.iter().map(|d| d.len()).sum()
    }

    pub fn is_feasible(&self) -> bool {
        !self.degraded && self.feasibility.iter().all(|f| f.fits())
    }

    /// Cross-check internal consistency: deltas match the placement replicas
    /// against the base placement, the assignment is valid, and the
    /// degraded flag agrees with the certificates.
    pub fn validate(&self, base: &Placement) -> Result<()> {
        let ep = self.ep();
        if self.delta_in.len() != ep
            || self.delta_out.len() != ep
            || self.feasibility.len() != ep
        {
            return Err(Error::InvalidPlan("per-rank vectors have wrong length".into()));
        }
        for r in 0..ep {
            if self.placement.replicas()[r] != self.delta_in[r] {
                return Err(Error::InvalidPlan(format!(
                    "delta_in on rank {r} disagrees with placement replicas"
                )));
            }
            for &e in &self.delta_in[r] {
                if base.base_host(e) == r {
                    return Err(Error::InvalidPlan(format!(
                        "expert {e} replicated onto its own base host {r}"
                    )));
                }
            }
            for &e in &self.delta_out[r] {
                if base.base_host(e) != r {
                    return Err(Error::InvalidPlan(format!(
                        "delta_out on rank {r} lists expert {e} whose base host is {}",
                        base.base_host(e)
                    )));
                }
            }
        }
        if self.placement.base() != base.base() {
            return Err(Error::InvalidPlan(
                "plan placement rewrote the base partition".into(),
            ));
        }
        self.assignment.validate_against(&self.placement)?;
        let violating: Vec<RankId> = self
            .feasibility
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.fits())
            .map(|(r, _)| r)
            .collect();
        if violating.is_empty() != !self.degraded || violating != self.violating_ranks {
            return Err(Error::InvalidPlan(
                "degraded flag disagrees with feasibility certificates".into(),
            ));
        }
        Ok(())
    }

    pub fn to_file(&self) -> PlanFile {
        PlanFile {
            placement: self.placement.clone(),
            assignment: self.assignment.to_triplets(),
            delta_in: self.delta_in.clone(),
            delta_out: self.delta_out.clone(),
            iterations_used: self.iterations_used,
            feasibility: self.feasibility.clone(),
            degraded: self.degraded,
            violating_ranks: self.violating_ranks.clone(),
        }
    }
}

/// On-disk form of a [`Plan`]: the assignment flattened to sorted
/// `(source, expert, target, tokens)` triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub placement: Placement,
    pub assignment: Vec<(RankId, ExpertId, RankId, TokenCount)>,
    pub delta_in: Vec<Vec<ExpertId>>,
    pub delta_out: Vec<Vec<ExpertId>>,
    pub iterations_used: usize,
    pub feasibility: Vec<RankFeasibility>,
    pub degraded: bool,
    pub violating_ranks: Vec<RankId>,
}
