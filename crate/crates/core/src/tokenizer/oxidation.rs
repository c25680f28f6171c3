//! Charge-balancing guess for structures that arrive without oxidation states.

use std::collections::BTreeMap;

use crate::elements::ElementTables;

/// Caps the number of per-element state combinations examined.
const MAX_COMBINATIONS: usize = 200_000;

/// Assigns one oxidation state per distinct element so the net charge is
/// zero. Among neutral assignments the one using the most common states
/// (lowest summed rank in the table's state lists) wins. If no combination
/// is neutral, every site gets state 0.
pub fn assign_oxidation_states(elements: &[u8], tables: &ElementTables) -> Vec<i8> {
    let mut counts: BTreeMap<u8, i64> = BTreeMap::new();
    for &z in elements {
        *counts.entry(z).or_default() += 1;
    }
    let species: Vec<(u8, i64, Vec<i8>)> = counts
        .iter()
        .map(|(&z, &n)| {
            let states = tables.get(z).map(|e| e.oxidation_states.clone()).unwrap_or_default();
            (z, n, states)
        })
        .collect();
    if species.iter().any(|(_, _, s)| s.is_empty()) {
        return vec![0; elements.len()];
    }
    let total: usize = species.iter().map(|(_, _, s)| s.len()).product();
    if total > MAX_COMBINATIONS {
        return vec![0; elements.len()];
    }

    let mut best: Option<(usize, Vec<i8>)> = None;
    let mut choice = vec![0usize; species.len()];
    for _ in 0..total {
        let charge: i64 = species.iter().zip(&choice).map(|((_, n, s), &c)| n * s[c] as i64).sum();
        if charge == 0 {
            let rank: usize = choice.iter().sum();
            if best.as_ref().is_none_or(|(r, _)| rank < *r) {
                best = Some((rank, species.iter().zip(&choice).map(|((_, _, s), &c)| s[c]).collect()));
            }
        }
        // odometer increment
        for (k, (_, _, s)) in species.iter().enumerate() {
            choice[k] += 1;
            if choice[k] < s.len() {
                break;
            }
            choice[k] = 0;
        }
    }
    match best {
        Some((_, states)) => {
            let by_z: BTreeMap<u8, i8> = species.iter().map(|(z, _, _)| *z).zip(states).collect();
            elements.iter().map(|z| by_z[z]).collect()
        }
        None => vec![0; elements.len()],
    }
}
