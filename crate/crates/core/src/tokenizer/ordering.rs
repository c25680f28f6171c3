use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::Site;

/// How the unordered set of sites is linearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "seed", rename_all = "snake_case")]
pub enum OrderingStrategy {
    /// Ascending atomic number, then x, y, z.
    LowFirst,
    /// Descending atomic number, then ascending x, y, z.
    HighFirst,
    /// Ascending x, y, z, then atomic number.
    Xyz,
    /// Seeded permutation.
    Random(u64),
}

impl OrderingStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" | "low_first" | "lowfirst" => Some(Self::LowFirst),
            "high" | "high_first" | "highfirst" => Some(Self::HighFirst),
            "xyz" => Some(Self::Xyz),
            other => {
                let seed = other.strip_prefix("random")?.trim_start_matches([':', '_', '=']);
                if seed.is_empty() {
                    Some(Self::Random(0))
                } else {
                    seed.parse().ok().map(Self::Random)
                }
            }
        }
    }

    /// The strategy for the `index`-th material: `Random` derives a fixed
    /// per-material seed, the deterministic strategies are unchanged.
    pub fn for_material(self, index: u64) -> Self {
        match self {
            Self::Random(seed) => Self::Random(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            s => s,
        }
    }
}

fn xyz(a: &Site, b: &Site) -> Ordering {
    a.frac[0]
        .total_cmp(&b.frac[0])
        .then(a.frac[1].total_cmp(&b.frac[1]))
        .then(a.frac[2].total_cmp(&b.frac[2]))
}

pub fn order_sites(sites: &[Site], strategy: OrderingStrategy) -> Vec<Site> {
    let mut out = sites.to_vec();
    match strategy {
        OrderingStrategy::LowFirst => out.sort_by(|a, b| {
            a.element.cmp(&b.element).then_with(|| xyz(a, b)).then(a.oxidation_state.cmp(&b.oxidation_state))
        }),
        OrderingStrategy::HighFirst => out.sort_by(|a, b| {
            b.element.cmp(&a.element).then_with(|| xyz(a, b)).then(a.oxidation_state.cmp(&b.oxidation_state))
        }),
        OrderingStrategy::Xyz => out.sort_by(|a, b| {
            xyz(a, b).then(a.element.cmp(&b.element)).then(a.oxidation_state.cmp(&b.oxidation_state))
        }),
        OrderingStrategy::Random(seed) => out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    out
}
