//! Topology choice by training-set size and task granularity.

use std::fmt;

use serde::Serialize;

use crate::topology::TopologyId;

/// Sample-size regime; boundaries are `N < 1000`, `1000 ≤ N ≤ 50000`,
/// `N > 50000`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Small,
    Medium,
    Large,
}

impl Regime {
    pub const SMALL_BELOW: u64 = 1_000;
    pub const LARGE_ABOVE: u64 = 50_000;

    pub fn of(n_samples: u64) -> Regime {
        if n_samples < Self::SMALL_BELOW {
            Regime::Small
        } else if n_samples <= Self::LARGE_ABOVE {
            Regime::Medium
        } else {
            Regime::Large
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Regime::Small => "N < 1000",
            Regime::Medium => "1000 <= N <= 50000",
            Regime::Large => "N > 50000",
        }
    }
}

const SMALL_RULE: &str = "N < 1000: cascade channel attention into multi-scale spatial attention; \
pruning channels first keeps the spatial stages cheap and limits overfitting";
const MEDIUM_RULE: &str =
    "1000 <= N <= 50000: parallel channel and spatial branches with learnable \
fusion weights; enough data to learn the mix, branches complement each other";
const LARGE_RULE: &str = "N > 50000: parallel branches with input-driven dynamic gating; \
abundant data supports per-sample attention strength";
const ORDER_RULE: &str =
    "fine-grained: spatial-then-channel order, more stable for detail-sensitive \
tasks at any data scale";
const RESIDUAL_RULE: &str =
    "fine-grained: add a plain residual connection to keep gradients flowing \
when attention weights are small";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Recommendation {
    pub n_samples: u64,
    pub fine_grained: bool,
    pub regime: Regime,
    /// Best first.
    pub ranked: Vec<TopologyId>,
    /// `rationale[i]` is the rule behind `ranked[i]`.
    pub rationale: Vec<String>,
}

pub fn recommend(n_samples: u64, fine_grained: bool) -> Recommendation {
    let regime = Regime::of(n_samples);
    let mut picks: Vec<(TopologyId, &str)> = match regime {
        Regime::Small => vec![(TopologyId::CCmssa, SMALL_RULE)],
        Regime::Medium => vec![
            (TopologyId::CSafa, MEDIUM_RULE),
            (TopologyId::BiCsafa, MEDIUM_RULE),
        ],
        Regime::Large => vec![(TopologyId::GcSa2, LARGE_RULE)],
    };
    if fine_grained {
        picks.push((TopologyId::Sca, ORDER_RULE));
        picks.push((TopologyId::Rcsa, RESIDUAL_RULE));
    }
    Recommendation {
        n_samples,
        fine_grained,
        regime,
        ranked: picks.iter().map(|p| p.0).collect(),
        rationale: picks.iter().map(|p| p.1.to_string()).collect(),
    }
}

impl fmt::Display for Recommendation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "N = {} ({}), fine-grained: {}",
            self.n_samples,
            self.regime.describe(),
            if self.fine_grained { "yes" } else { "no" }
        )?;
        for (i, (id, why)) in self.ranked.iter().zip(&self.rationale).enumerate() {
            write!(f, "{}. {:<9} {why}", i + 1, id.name())?;
            if i + 1 < self.ranked.len() {
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_sized_examples() {
        assert_eq!(recommend(780, false).ranked[0], TopologyId::CCmssa);
        assert_eq!(
            recommend(10_015, false).ranked,
            vec![TopologyId::CSafa, TopologyId::BiCsafa]
        );
        assert_eq!(recommend(107_180, false).ranked[0], TopologyId::GcSa2);
    }

    #[test]
    fn literal_boundaries() {
        assert_eq!(Regime::of(999), Regime::Small);
        assert_eq!(Regime::of(1_000), Regime::Medium);
        assert_eq!(Regime::of(50_000), Regime::Medium);
        assert_eq!(Regime::of(50_001), Regime::Large);
        assert_eq!(Regime::of(1), Regime::Small);
    }

    #[test]
    fn fine_grained_appends_guidance() {
        for n in [10, 5_000, 1_000_000] {
            let plain = recommend(n, false);
            let fine = recommend(n, true);
            assert_eq!(fine.ranked[..plain.ranked.len()], plain.ranked[..]);
            assert_eq!(
                fine.ranked[plain.ranked.len()..],
                [TopologyId::Sca, TopologyId::Rcsa]
            );
            assert_eq!(fine.ranked.len(), fine.rationale.len());
        }
    }
}
