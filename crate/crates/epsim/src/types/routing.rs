//! Per-layer routing ground truth (or prediction): how many tokens each
//! source rank sends to each expert.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ExpertId, RankId, TokenCount};

/// Tokens sharing a source rank and an identical ordered expert list.
///
/// The expert list is ordered by routing affinity (strongest first), which
/// is what prediction-fidelity metrics and the noisy oracle consume. The
/// group form also carries enough structure to estimate deduplication
/// factors: tokens inside a group hit the same experts, so hits landing on
/// one rank collapse into a single shipped copy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGroup {
    pub source: RankId,
    pub count: TokenCount,
    pub experts: Vec<ExpertId>,
}

/// `ep x num_experts` matrix of expert-hit counts, optionally with the
/// token-group metadata that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRouting {
    counts: Vec<Vec<TokenCount>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<Vec<TokenGroup>>,
}

impl SourceRouting {
    pub fn new(counts: Vec<Vec<TokenCount>>) -> Result<Self> {
        Self::check_counts(&counts)?;
        Ok(Self {
            counts,
            groups: None,
        })
    }

    /// Build from token groups; the count matrix is derived, so the two can
    /// never disagree.
    pub fn from_groups(ep: usize, num_experts: usize, groups: Vec<TokenGroup>) -> Result<Self> {
        let mut counts = vec![vec![0u64; num_experts]; ep];
        for g in &groups {
            if g.source >= ep {
                return Err(Error::InvalidRouting(format!(
                    "group source rank {} out of range (ep = {ep})",
                    g.source
                )));
            }
            if g.count == 0 {
                return Err(Error::InvalidRouting("empty token group".into()));
            }
            let mut seen = vec![false; num_experts];
            for &e in &g.experts {
                if e >= num_experts {
                    return Err(Error::InvalidRouting(format!(
                        "group expert {e} out of range (num_experts = {num_experts})"
                    )));
                }
                if seen[e] {
                    return Err(Error::InvalidRouting(format!(
                        "expert {e} repeated within one token's expert list"
                    )));
                }
                seen[e] = true;
                counts[g.source][e] += g.count;
            }
        }
        Ok(Self {
            counts,
            groups: Some(groups),
        })
    }

    fn check_counts(counts: &[Vec<TokenCount>]) -> Result<()> {
        if counts.is_empty() {
            return Err(Error::InvalidRouting("no source ranks".into()));
        }
        let width = counts[0].len();
        if width == 0 {
            return Err(Error::InvalidRouting("no experts".into()));
        }
        for row in counts {
            if row.len() != width {
                return Err(Error::InvalidRouting("ragged count matrix".into()));
            }
        }
        Ok(())
    }

    /// Validate internal consistency (shape, and group/count agreement when
    /// groups are present). Deserialized values should be run through this.
    pub fn validate(&self) -> Result<()> {
        Self::check_counts(&self.counts)?;
        if let Some(groups) = &self.groups {
            let rebuilt =
                Self::from_groups(self.ep(), self.num_experts(), groups.clone())?;
            if rebuilt.counts != self.counts {
                return Err(Error::InvalidRouting(
                    "token groups do not reproduce the count matrix".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn ep(&self) -> usize {
        self.counts.len()
    }

    pub fn num_experts(&self) -> usize {
        self.counts[0].len()
    }

    pub fn counts(&self) -> &[Vec<TokenCount>] {
        &self.counts
    }

    pub fn count(&self, source: RankId, expert: ExpertId) -> TokenCount {
        self.counts[source][expert]
    }

    pub fn groups(&self) -> Option<&[TokenGroup]> {
        self.groups.as_deref()
    }

    /// Global hits routed to one expert (column sum).
    pub fn expert_load(&self, expert: ExpertId) -> TokenCount {
        self.counts.iter().map(|row| row[expert]).sum()
    }

    pub fn expert_loads(&self) -> Vec<TokenCount> {
        (0..self.num_experts()).map(|e| self.expert_load(e)).collect()
    }

    /// Total expert hits; equals `B * k` for a batch of `B` tokens.
    pub fn total_hits(&self) -> TokenCount {
        self.counts.iter().flatten().sum()
    }

    /// Hits originated on one source rank (row sum).
    pub fn source_hits(&self, source: RankId) -> TokenCount {
        self.counts[source].iter().sum()
    }

    /// Derive the global token count for a given `top_k`; errors when the
    /// hit total is not a multiple of `k`.
    pub fn batch_tokens(&self, top_k: usize) -> Result<TokenCount> {
        let total = self.total_hits();
        if top_k == 0 || total % top_k as u64 != 0 {
            return Err(Error::InvalidRouting(format!(
                "token conservation: total hits {total} not divisible by top_k {top_k}"
            )));
        }
        Ok(total / top_k as u64)
    }

    /// Iterate tokens in stable order as `(source, expert list)`, expanding
    /// group counts. Only available when groups are present.
    pub fn iter_tokens(&self) -> Option<impl Iterator<Item = (RankId, &[ExpertId])>> {
        self.groups.as_ref().map(|groups| {
            groups.iter().flat_map(|g| {
                std::iter::repeat((g.source, g.experts.as_slice())).take(g.count as usize)
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_sums_are_expert_loads() {
        let r = SourceRouting::new(vec![vec![5, 1], vec![5, 1]]).unwrap();
        assert_eq!(r.expert_load(0), 10);
        assert_eq!(r.expert_load(1), 2);
        assert_eq!(r.total_hits(), 12);
        assert_eq!(r.batch_tokens(2).unwrap(), 6);
    }

    #[test]
    fn batch_tokens_detects_conservation_mismatch() {
        let r = SourceRouting::new(vec![vec![5, 1], vec![5, 2]]).unwrap();
        assert!(r.batch_tokens(2).is_err());
    }

    #[test]
    fn groups_rebuild_counts() {
        let groups = vec![
            TokenGroup {
                source: 0,
                count: 3,
                experts: vec![0, 2],
            },
            TokenGroup {
                source: 1,
                count: 1,
                experts: vec![1, 2],
            },
        ];
        let r = SourceRouting::from_groups(2, 3, groups).unwrap();
        assert_eq!(r.counts(), &[vec![3, 0, 3], vec![0, 1, 1]]);
        r.validate().unwrap();
        let tokens: Vec<_> = r.iter_tokens().unwrap().collect();
        assert_eq!(tokens.len(), 4);
        assert_eq!(tokens[0], (0, &[0usize, 2][..]));
    }

    #[test]
    fn duplicate_expert_in_group_rejected() {
        let groups = vec![TokenGroup {
            source: 0,
            count: 1,
            experts: vec![1, 1],
        }];
        assert!(SourceRouting::from_groups(1, 2, groups).is_err());
    }
}
