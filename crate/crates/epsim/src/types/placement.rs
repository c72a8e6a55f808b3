//! Physical expert placement: the even base partition plus per-rank replica
//! sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ExpertId, RankId};

/// Which ranks host which experts.
///
/// `base` is an exact partition (every expert lives on exactly one rank);
/// `replicas` lists the redundant experts resident on each rank, in the
/// order they were admitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    base: Vec<Vec<bool>>,
    replicas: Vec<Vec<ExpertId>>,
}

impl Placement {
    /// The standard sharded layout: rank `r` hosts the contiguous block of
    /// `num_experts / ep` experts starting at `r * num_experts / ep`.
    pub fn sharded(ep: usize, num_experts: usize) -> Result<Self> {
        if ep == 0 || num_experts < ep || num_experts % ep != 0 {
            return Err(Error::InvalidPlacement(format!(
                "cannot shard {num_experts} experts evenly over {ep} ranks"
            )));
        }
        let per_rank = num_experts / ep;
        let base = (0..ep)
            .map(|r| {
                (0..num_experts)
                    .map(|e| e / per_rank == r)
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(Self {
            base,
            replicas: vec![Vec::new(); ep],
        })
    }

    pub fn from_parts(base: Vec<Vec<bool>>, replicas: Vec<Vec<ExpertId>>) -> Result<Self> {
        let p = Self { base, replicas };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.is_empty() {
            return Err(Error::InvalidPlacement("no ranks".into()));
        }
        let num_experts = self.base[0].len();
        if num_experts == 0 {
            return Err(Error::InvalidPlacement("no experts".into()));
        }
        for row in &self.base {
            if row.len() != num_experts {
                return Err(Error::InvalidPlacement("ragged base matrix".into()));
            }
        }
        for e in 0..num_experts {
            let hosts = self.base.iter().filter(|row| row[e]).count();
            if hosts != 1 {
                return Err(Error::InvalidPlacement(format!(
                    "base not a partition: expert {e} hosted on {hosts} ranks"
                )));
            }
        }
        if self.replicas.len() != self.base.len() {
            return Err(Error::InvalidPlacement(
                "replica list length does not match rank count".into(),
            ));
        }
        for (r, reps) in self.replicas.iter().enumerate() {
            let mut seen = vec![false; num_experts];
            for &e in reps {
                if e >= num_experts {
                    return Err(Error::InvalidPlacement(format!(
                        "replica expert {e} out of range on rank {r}"
                    )));
                }
                if self.base[r][e] || seen[e] {
                    return Err(Error::InvalidPlacement(format!(
                        "expert {e} appears twice on rank {r}"
                    )));
                }
                seen[e] = true;
            }
        }
        Ok(())
    }

    pub fn ep(&self) -> usize {
        self.base.len()
    }

    pub fn num_experts(&self) -> usize {
        self.base[0].len()
    }

    /// The unique base host of an expert.
    pub fn base_host(&self, expert: ExpertId) -> RankId {
        self.base
            .iter()
            .position(|row| row[expert])
            .expect("validated placement partitions all experts")
    }

    /// True when `rank` serves `expert` (base or replica).
    pub fn is_hosted(&self, rank: RankId, expert: ExpertId) -> bool {
        self.base[rank][expert] || self.replicas[rank].contains(&expert)
    }

    /// All experts served by a rank, base partition first, then replicas in
    /// admission order.
    pub fn hosted_experts(&self, rank: RankId) -> Vec<ExpertId> {
        let mut out: Vec<ExpertId> = (0..self.num_experts())
            .filter(|&e| self.base[rank][e])
            .collect();
        out.extend(self.replicas[rank].iter().copied());
        out
    }

    /// Ranks serving an expert: base host first, then replica holders by
    /// rank id.
    pub fn hosts_of(&self, expert: ExpertId) -> Vec<RankId> {
        let base = self.base_host(expert);
        let mut out = vec![base];
        for r in 0..self.ep() {
            if r != base && self.replicas[r].contains(&expert) {
                out.push(r);
            }
        }
        out
    }

    pub fn replicas(&self) -> &[Vec<ExpertId>] {
        &self.replicas
    }

    pub fn base(&self) -> &[Vec<bool>] {
        &self.base
    }

    pub fn total_replicas(&self) -> usize {
        self.replicas.iter().map(|r| r.len()).sum()
    }

    /// Copy of this placement with one more replica admitted.
    pub fn with_replica(&self, rank: RankId, expert: ExpertId) -> Result<Self> {
        if self.is_hosted(rank, expert) {
            return Err(Error::InvalidPlacement(format!(
                "expert {expert} already hosted on rank {rank}"
            )));
        }
        let mut next = self.clone();
        next.replicas[rank].push(expert);
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharded_blocks() {
        let p = Placement::sharded(2, 4).unwrap();
        assert_eq!(p.base_host(0), 0);
        assert_eq!(p.base_host(1), 0);
        assert_eq!(p.base_host(2), 1);
        assert_eq!(p.base_host(3), 1);
        assert_eq!(p.hosted_experts(0), vec![0, 1]);
    }

    #[test]
    fn replica_extends_hosting() {
        let p = Placement::sharded(2, 4).unwrap().with_replica(1, 0).unwrap();
        assert!(p.is_hosted(1, 0));
        assert_eq!(p.hosts_of(0), vec![0, 1]);
        assert_eq!(p.hosted_experts(1), vec![2, 3, 0]);
        assert_eq!(p.total_replicas(), 1);
    }

    #[test]
    fn double_hosting_rejected() {
        let base = vec![vec![true, true], vec![true, false]];
        assert!(Placement::from_parts(base, vec![vec![], vec![]]).is_err());
        let p = Placement::sharded(2, 4).unwrap();
        assert!(p.with_replica(0, 0).is_err());
    }
}
