//! Token assignment: the per-(source, expert, target) split of routed
//! tokens across the ranks that host each expert.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{Placement, SourceRouting, TokenGroup};
use crate::{ExpertId, RankId, TokenCount};

/// Sparse map `(source, expert, target) -> tokens`, with cached marginals.
///
/// Conservation against the originating routing and validity against a
/// placement are checked by [`Assignment::validate_against`]; the cached
/// per-(expert, target) marginals and per-rank loads always equal a
/// from-scratch recomputation (the solver mutates only through
/// [`Assignment::move_tokens`], which keeps them in sync).
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    ep: usize,
    num_experts: usize,
    split: BTreeMap<(RankId, ExpertId, RankId), TokenCount>,
    /// Copy of the routing counts this assignment distributes.
    source_counts: Vec<Vec<TokenCount>>,
    /// Dedup metadata carried over from the routing, when present.
    groups: Option<Vec<TokenGroup>>,
    /// `[expert][target rank] -> tokens processed there`.
    tokens_expert_rank: Vec<Vec<TokenCount>>,
    rank_loads: Vec<TokenCount>,
}

impl Assignment {
    /// Build from explicit flows. Every `(source, expert)` cell of the
    /// routing must be fully distributed; targets are unrestricted here
    /// (validity against a placement is a separate check).
    pub fn from_flows(
        routing: &SourceRouting,
        flows: impl IntoIterator<Item = ((RankId, ExpertId, RankId), TokenCount)>,
    ) -> Result<Self> {
        let ep = routing.ep();
        let num_experts = routing.num_experts();
        let mut split = BTreeMap::new();
        let mut cell_totals = vec![vec![0u64; num_experts]; ep];
        let mut tokens_expert_rank = vec![vec![0u64; ep]; num_experts];
        let mut rank_loads = vec![0u64; ep];
        for ((rs, e, rt), n) in flows {
            if rs >= ep || rt >= ep || e >= num_experts {
                return Err(Error::InvalidAssignment(format!(
                    "flow ({rs}, {e}, {rt}) out of range"
                )));
            }
            if n == 0 {
                continue;
            }
            *split.entry((rs, e, rt)).or_insert(0) += n;
            cell_totals[rs][e] += n;
            tokens_expert_rank[e][rt] += n;
            rank_loads[rt] += n;
        }
        for rs in 0..ep {
            for e in 0..num_experts {
                if cell_totals[rs][e] != routing.count(rs, e) {
                    return Err(Error::InvalidAssignment(format!(
                        "conservation violated at source {rs}, expert {e}: assigned {} of {}",
                        cell_totals[rs][e],
                        routing.count(rs, e)
                    )));
                }
            }
        }
        Ok(Self {
            ep,
            num_experts,
            split,
            source_counts: routing.counts().to_vec(),
            groups: routing.groups().map(|g| g.to_vec()),
            tokens_expert_rank,
            rank_loads,
        })
    }

    pub fn ep(&self) -> usize {
        self.ep
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn get(&self, source: RankId, expert: ExpertId, target: RankId) -> TokenCount {
        self.split.get(&(source, expert, target)).copied().unwrap_or(0)
    }

    /// Flows in deterministic `(source, expert, target)` order.
    pub fn iter(&self) -> impl Iterator<Item = (RankId, ExpertId, RankId, TokenCount)> + '_ {
        self.split.iter().map(|(&(rs, e, rt), &n)| (rs, e, rt, n))
    }

    /// Tokens of `expert` processed on `rank` (marginal over sources).
    pub fn tokens_on(&self, expert: ExpertId, rank: RankId) -> TokenCount {
        self.tokens_expert_rank[expert][rank]
    }

    pub fn rank_loads(&self) -> &[TokenCount] {
        &self.rank_loads
    }

    pub fn source_counts(&self) -> &[Vec<TokenCount>] {
        &self.source_counts
    }

    pub fn groups(&self) -> Option<&[TokenGroup]> {
        self.groups.as_deref()
    }

    pub fn total_tokens(&self) -> TokenCount {
        self.rank_loads.iter().sum()
    }

    /// Validity: every positive flow must target a rank hosting the expert.
    /// (Conservation is structural — see [`Assignment::from_flows`] — and
    /// re-checked here against the stored source counts.)
    pub fn validate_against(&self, placement: &Placement) -> Result<()> {
        if placement.ep() != self.ep || placement.num_experts() != self.num_experts {
            return Err(Error::InvalidAssignment(
                "placement shape does not match assignment".into(),
            ));
        }
        for (&(rs, e, rt), &n) in &self.split {
            if n > 0 && !placement.is_hosted(rt, e) {
                return Err(Error::InvalidAssignment(format!(
                    "routing validity violated: {n} tokens from rank {rs} assigned to expert {e} on rank {rt}, which does not host it"
                )));
            }
        }
        let mut cell_totals = vec![vec![0u64; self.num_experts]; self.ep];
        for (&(rs, e, _), &n) in &self.split {
            cell_totals[rs][e] += n;
        }
        if cell_totals != self.source_counts {
            return Err(Error::InvalidAssignment(
                "conservation violated against source counts".into(),
            ));
        }
        Ok(())
    }

    /// Recompute marginals from the sparse map (used by tests to confirm the
    /// caches never drift).
    pub fn recompute_marginals(&self) -> (Vec<Vec<TokenCount>>, Vec<TokenCount>) {
        let mut tokens_expert_rank = vec![vec![0u64; self.ep]; self.num_experts];
        let mut rank_loads = vec![0u64; self.ep];
        for (&(_, e, rt), &n) in &self.split {
            tokens_expert_rank[e][rt] += n;
            rank_loads[rt] += n;
        }
        (tokens_expert_rank, rank_loads)
    }

    #[cfg(debug_assertions)]
    fn debug_check_marginals(&self) {
        let (te, rl) = self.recompute_marginals();
        debug_assert_eq!(te, self.tokens_expert_rank, "marginal cache drifted");
        debug_assert_eq!(rl, self.rank_loads, "rank load cache drifted");
    }

    /// Move `amount` tokens of `(source, expert)` from one target to
    /// another, keeping the caches in sync. Solver-internal.
    pub(crate) fn move_tokens(
        &mut self,
        source: RankId,
        expert: ExpertId,
        from: RankId,
        to: RankId,
        amount: TokenCount,
    ) -> Result<()> {
        if amount == 0 || from == to {
            return Ok(());
        }
        let have = self.get(source, expert, from);
        if have < amount {
            return Err(Error::InvalidAssignment(format!(
                "cannot move {amount} tokens of expert {expert} from rank {from}: only {have} present"
            )));
        }
        if have == amount {
            self.split.remove(&(source, expert, from));
        } else {
            self.split.insert((source, expert, from), have - amount);
        }
        *self.split.entry((source, expert, to)).or_insert(0) += amount;
        self.tokens_expert_rank[expert][from] -= amount;
        self.tokens_expert_rank[expert][to] += amount;
        self.rank_loads[from] -= amount;
        self.rank_loads[to] += amount;
        #[cfg(debug_assertions)]
        self.debug_check_marginals();
        Ok(())
    }

    /// Export as sorted `(source, expert, target, tokens)` triplets.
    pub fn to_triplets(&self) -> Vec<(RankId, ExpertId, RankId, TokenCount)> {
        self.iter().collect()
    }
}
