//! Metrics over generated sets. Every aggregate over an empty set is
//! reported as absent (`None`), never as zero.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{density, fingerprint, reduced_formula, Crystal, CrystalError, Formula};
use crate::elements::ElementTables;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least {need} values, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("element {0} has no HHI value in the table")]
    UnknownElement(u8),
    #[error(transparent)]
    Crystal(#[from] CrystalError),
}

/// Fraction of distinct canonical fingerprints.
pub fn uniqueness(crystals: &[Crystal]) -> Result<Option<f64>, EvalError> {
    if crystals.is_empty() {
        return Ok(None);
    }
    let set = fingerprint_set(crystals)?;
    Ok(Some(set.len() as f64 / crystals.len() as f64))
}

pub fn fingerprint_set(crystals: &[Crystal]) -> Result<HashSet<String>, EvalError> {
    Ok(crystals.iter().map(fingerprint).collect::<Result<_, _>>()?)
}

/// Fraction of crystals whose fingerprint is absent from `training`.
pub fn novelty(crystals: &[Crystal], training: &HashSet<String>) -> Result<Option<f64>, EvalError> {
    if crystals.is_empty() {
        return Ok(None);
    }
    let mut novel = 0;
    for c in crystals {
        if !training.contains(&fingerprint(c)?) {
            novel += 1;
        }
    }
    Ok(Some(novel as f64 / crystals.len() as f64))
}

/// Distribution of achieved values for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceSummary {
    pub target: f64,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub mae: f64,
    /// 5th, 25th, 50th, 75th and 95th percentiles.
    pub quantiles: [f64; 5],
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Groups (achieved, target) pairs by target and summarizes each group.
pub fn adherence(pairs: &[(f64, f64)]) -> Vec<AdherenceSummary> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for &(v, t) in pairs {
        // order-preserving key for finite floats
        let bits = t.to_bits();
        let key = if t.is_sign_negative() { !bits } else { bits | (1 << 63) };
        groups.entry(key).or_insert_with(|| (t, Vec::new())).1.push(v);
    }
    groups
        .into_values()
        .map(|(target, mut vals)| {
            vals.sort_by(f64::total_cmp);
            let n = vals.len();
            AdherenceSummary {
                target,
                n,
                mean: vals.iter().sum::<f64>() / n as f64,
                median: quantile(&vals, 0.5),
                mae: vals.iter().map(|v| (v - target).abs()).sum::<f64>() / n as f64,
                quantiles: [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| quantile(&vals, q)),
            }
        })
        .collect()
}

/// Per-target density summary (g/cm³).
pub fn density_adherence(
    items: &[(&Crystal, f64)],
    tables: &ElementTables,
) -> Result<Vec<AdherenceSummary>, EvalError> {
    let pairs = items.iter().map(|(c, t)| Ok((density(c, tables)?, *t))).collect::<Result<Vec<_>, EvalError>>()?;
    Ok(adherence(&pairs))
}

/// Fraction of crystals whose reduced formula equals the (reduced) target.
pub fn formula_match_rate(items: &[(&Crystal, &Formula)], tables: &ElementTables) -> Result<Option<f64>, EvalError> {
    if items.is_empty() {
        return Ok(None);
    }
    let mut hits = 0;
    for (c, target) in items {
        if reduced_formula(c, tables)? == target.reduced() {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / items.len() as f64))
}

/// How per-element HHI values combine into a compound score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HhiWeighting {
    /// Σ (count_e / N)·HHI_e
    #[default]
    AtomFraction,
    /// Largest HHI among the elements present.
    MaxElement,
}

pub fn hhi_of_crystal(c: &Crystal, tables: &ElementTables) -> Result<f64, EvalError> {
    hhi_of_crystal_with(c, tables, HhiWeighting::AtomFraction)
}

pub fn hhi_of_crystal_with(c: &Crystal, tables: &ElementTables, w: HhiWeighting) -> Result<f64, EvalError> {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for s in &c.sites {
        *counts.entry(s.element).or_default() += 1;
    }
    let n = c.sites.len() as f64;
    let mut acc = match w {
        HhiWeighting::AtomFraction => 0.0,
        HhiWeighting::MaxElement => f64::NEG_INFINITY,
    };
    for (&z, &k) in &counts {
        let h = tables.hhi(z).ok_or(EvalError::UnknownElement(z))?;
        match w {
            HhiWeighting::AtomFraction => acc += k as f64 / n * h,
            HhiWeighting::MaxElement => acc = acc.max(h),
        }
    }
    Ok(acc)
}

/// Reference value separating unimodal from bimodal samples.
pub const BIMODALITY_THRESHOLD: f64 = 5.0 / 9.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bimodality {
    /// (left bin edge, count) pairs; the last bin is closed on the right.
    pub histogram: Vec<(f64, usize)>,
    pub bin_width: f64,
    /// (skewness² + 1) / kurtosis; absent for constant data.
    pub coefficient: Option<f64>,
    pub bimodal: bool,
}

pub fn bimodality_summary(values: &[f64], n_bins: usize) -> Result<Bimodality, EvalError> {
    if values.len() < 10 {
        return Err(EvalError::TooFewSamples { need: 10, got: values.len() });
    }
    let n_bins = n_bins.max(1);
    let n = values.len() as f64;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let histogram = counts.into_iter().enumerate().map(|(i, c)| (lo + i as f64 * width, c)).collect();
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let coefficient = if m2 <= f64::EPSILON * mean.abs().max(1.0) {
        None
    } else {
        let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let skew = m3 / m2.powf(1.5);
        let kurt = m4 / (m2 * m2);
        Some((skew * skew + 1.0) / kurt)
    };
    let bimodal = coefficient.is_some_and(|b| b > BIMODALITY_THRESHOLD);
    Ok(Bimodality { histogram, bin_width: width, coefficient, bimodal })
}

/// Targets a generated sample was conditioned on, in raw units.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Targets {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnetic_density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_group: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hhi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
}

/// One generated sample as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub crystal: Option<Crystal>,
    pub charge_neutral: bool,
    pub targets: Targets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub wall_time_s: f64,
    pub seconds_per_sample: f64,
}

/// Aggregate metrics. Fields needing external relaxation or DFT are kept
/// as named placeholders so outside results can be merged in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_total: usize,
    pub n_grammar_valid: usize,
    pub n_charge_neutral: usize,
    pub frac_valid: Option<f64>,
    pub frac_charge_neutral: Option<f64>,
    pub frac_unique: Option<f64>,
    pub frac_novel: Option<f64>,
    pub density: Vec<AdherenceSummary>,
    /// Compound HHI divided by 1000, the conditioning scale.
    pub hhi: Vec<AdherenceSummary>,
    pub hhi_weighting: HhiWeighting,
    pub hhi_distribution: Option<Bimodality>,
    pub formula_match_rate: Option<f64>,
    /// Space groups requested, echoed with counts; detection is not performed.
    pub space_group_targets: BTreeMap<u32, usize>,
    pub timing: Option<TimingStats>,
    pub stability_e_above_hull: Option<f64>,
    pub sun_rate: Option<f64>,
    pub rmsd_to_relaxed: Option<f64>,
}

/// Builds a report. `training` enables novelty; crystals with elements
/// missing from the tables are skipped for the affected metric.
pub fn evaluate_set(
    items: &[EvalItem],
    training: Option<&HashSet<String>>,
    tables: &ElementTables,
    weighting: HhiWeighting,
    hist_bins: usize,
) -> Result<EvalReport, EvalError> {
    let valid: Vec<(&Crystal, &Targets)> = items.iter().filter_map(|i| i.crystal.as_ref().map(|c| (c, &i.targets))).collect();
    let crystals: Vec<Crystal> = valid.iter().map(|(c, _)| (*c).clone()).collect();
    let n_total = items.len();
    let frac = |k: usize, n: usize| (n > 0).then(|| k as f64 / n as f64);
    let n_valid = valid.len();
    let n_neutral = items.iter().filter(|i| i.crystal.is_some() && i.charge_neutral).count();

    let density_items: Vec<(&Crystal, f64)> = valid.iter().filter_map(|(c, t)| t.density.map(|d| (*c, d))).collect();
    let mut hhi_pairs = Vec::new();
    let mut hhi_values = Vec::new();
    for (c, t) in &valid {
        if let Ok(h) = hhi_of_crystal_with(c, tables, weighting) {
            hhi_values.push(h / 1000.0);
            if let Some(target) = t.hhi {
                hhi_pairs.push((h / 1000.0, target / 1000.0));
            }
        }
    }
    let mut formula_items = Vec::new();
    let parsed: Vec<(&Crystal, Formula)> = valid
        .iter()
        .filter_map(|(c, t)| t.formula.as_deref().and_then(|f| Formula::parse(f, tables).ok()).map(|f| (*c, f)))
        .collect();
    for (c, f) in &parsed {
        formula_items.push((*c, f));
    }
    let mut sg = BTreeMap::new();
    for i in items {
        if let Some(s) = i.targets.space_group {
            *sg.entry(s).or_default() += 1;
        }
    }
    Ok(EvalReport {
        n_total,
        n_grammar_valid: n_valid,
        n_charge_neutral: n_neutral,
        frac_valid: frac(n_valid, n_total),
        frac_charge_neutral: frac(n_neutral, n_valid),
        frac_unique: uniqueness(&crystals)?,
        frac_novel: match training {
            Some(t) => novelty(&crystals, t)?,
            None => None,
        },
        density: density_adherence(&density_items, tables)?,
        hhi: adherence(&hhi_pairs),
        hhi_weighting: weighting,
        hhi_distribution: bimodality_summary(&hhi_values, hist_bins).ok(),
        formula_match_rate: formula_match_rate(&formula_items, tables)?,
        space_group_targets: sg,
        timing: None,
        stability_e_above_hull: None,
        sun_rate: None,
        rmsd_to_relaxed: None,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One `metric,value` row per scalar metric; absent values are `NA`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x}"));
        let mut rows = vec![
            ("n_total".to_string(), self.n_total.to_string()),
            ("n_grammar_valid".into(), self.n_grammar_valid.to_string()),
            ("n_charge_neutral".into(), self.n_charge_neutral.to_string()),
            ("frac_valid".into(), opt(self.frac_valid)),
            ("frac_charge_neutral".into(), opt(self.frac_charge_neutral)),
            ("frac_unique".into(), opt(self.frac_unique)),
            ("frac_novel".into(), opt(self.frac_novel)),
            ("formula_match_rate".into(), opt(self.formula_match_rate)),
            ("hhi_bimodality".into(), opt(self.hhi_distribution.as_ref().and_then(|b| b.coefficient))),
            ("stability_e_above_hull".into(), opt(self.stability_e_above_hull)),
            ("sun_rate".into(), opt(self.sun_rate)),
            ("rmsd_to_relaxed".into(), opt(self.rmsd_to_relaxed)),
        ];
        for (name, list) in [("density", &self.density), ("hhi", &self.hhi)] {
            for s in list {
                let t = s.target;
                rows.push((format!("{name}[{t}].n"), s.n.to_string()));
                rows.push((format!("{name}[{t}].mean"), format!("{}", s.mean)));
                rows.push((format!("{name}[{t}].median"), format!("{}", s.median)));
                rows.push((format!("{name}[{t}].mae"), format!("{}", s.mae)));
            }
        }
        if let Some(t) = &self.timing {
            rows.push(("wall_time_s".into(), format!("{}", t.wall_time_s)));
            rows.push(("seconds_per_sample".into(), format!("{}", t.seconds_per_sample)));
        }
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    /// HHI histogram as `bin_edge,count` rows.
    pub fn histogram_csv(&self) -> Option<String> {
        let b = self.hhi_distribution.as_ref()?;
        let mut out = String::from("bin_edge,count\n");
        for (e, c) in &b.histogram {
            out.push_str(&format!("{e},{c}\n"));
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{LatticeParams, Site};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rock(a: f64, cation: u8, anion: u8) -> Crystal {
        Crystal::new(
            LatticeParams::cubic(a),
            vec![Site::new(cation, 0, [0.0; 3]), Site::new(anion, 0, [0.5; 3])],
        )
        .unwrap()
    }

    #[test]
    fn uniqueness_and_novelty() {
        let c = rock(4.0, 11, 17);
        assert_eq!(uniqueness(&vec![c.clone(); 4]).unwrap(), Some(0.25));
        let distinct = vec![rock(4.0, 11, 17), rock(4.0, 19, 17), rock(4.0, 11, 9)];
        assert_eq!(uniqueness(&distinct).unwrap(), Some(1.0));
        let swapped = Crystal::new(c.lattice, vec![c.sites[1], c.sites[0]]).unwrap();
        assert_eq!(uniqueness(&[c.clone(), swapped]).unwrap(), Some(0.5));
        let train = fingerprint_set(&distinct[..2]).unwrap();
        assert_eq!(novelty(&distinct[..2], &train).unwrap(), Some(0.0));
        assert_eq!(novelty(&distinct[2..], &train).unwrap(), Some(1.0));
        assert_eq!(novelty(&distinct, &HashSet::new()).unwrap(), Some(1.0));
        assert_eq!(uniqueness(&[]).unwrap(), None);
    }

    #[test]
    fn density_summary_matches_direct_computation() {
        let t = ElementTables::bundled();
        let a = rock(4.0, 11, 17);
        let b = rock(5.0, 11, 17);
        // independent path: mass / (a³) in g/cm³
        let mass = t.mass(11).unwrap() + t.mass(17).unwrap();
        let direct = |edge: f64| mass * 1.660_539_066_60e-24 / (edge.powi(3) * 1e-24);
        let s = density_adherence(&[(&a, 2.0), (&b, 2.0)], &t).unwrap();
        assert_eq!(s.len(), 1);
        let want_mean = (direct(4.0) + direct(5.0)) / 2.0;
        assert!((s[0].mean - want_mean).abs() < 1e-9);
        let exact = density_adherence(&[(&a, direct(4.0))], &t).unwrap();
        assert!(exact[0].mae < 1e-12);
    }

    #[test]
    fn formula_rates() {
        let t = ElementTables::bundled();
        let target = Formula::parse("Ba2Cu3O7Y", &t).unwrap();
        let hit = Crystal::new(
            LatticeParams::cubic(6.0),
            [(56, 2), (29, 3), (8, 7), (39, 1)]
                .iter()
                .flat_map(|&(z, n)| std::iter::repeat_n(z, n))
                .enumerate()
                .map(|(i, z)| Site::new(z, 0, [i as f64 / 13.0, 0.0, 0.0]))
                .collect(),
        )
        .unwrap();
        let miss = rock(4.0, 11, 17);
        let items = [(&hit, &target), (&miss, &target), (&miss, &target), (&miss, &target), (&miss, &target)];
        assert_eq!(formula_match_rate(&items, &t).unwrap(), Some(0.2));
        let permuted = Formula::parse("YBa2Cu3O7", &t).unwrap();
        assert_eq!(formula_match_rate(&[(&hit, &permuted)], &t).unwrap(), Some(1.0));
    }

    #[test]
    fn hhi_weighting() {
        let t = ElementTables::bundled();
        let fe = Crystal::new(LatticeParams::cubic(3.0), vec![Site::new(26, 0, [0.0; 3])]).unwrap();
        assert_eq!(hhi_of_crystal(&fe, &t).unwrap(), t.hhi(26).unwrap());
        let nacl = rock(4.0, 11, 17);
        let want = (t.hhi(11).unwrap() + t.hhi(17).unwrap()) / 2.0;
        assert!((hhi_of_crystal(&nacl, &t).unwrap() - want).abs() < 1e-9);
        let doubled = Crystal::new(
            nacl.lattice,
            vec![nacl.sites[0], nacl.sites[1], Site::new(11, 0, [0.25; 3]), Site::new(17, 0, [0.75; 3])],
        )
        .unwrap();
        assert!((hhi_of_crystal(&doubled, &t).unwrap() - want).abs() < 1e-9);
        assert_eq!(
            hhi_of_crystal_with(&nacl, &t, HhiWeighting::MaxElement).unwrap(),
            t.hhi(11).unwrap().max(t.hhi(17).unwrap())
        );
        // iron-rich vs gadolinium-rich compositions
        let gd = Crystal::new(LatticeParams::cubic(3.0), vec![Site::new(64, 0, [0.0; 3]), Site::new(8, 0, [0.5; 3])]).unwrap();
        let feo = Crystal::new(LatticeParams::cubic(3.0), vec![Site::new(26, 0, [0.0; 3]), Site::new(8, 0, [0.5; 3])]).unwrap();
        assert!(hhi_of_crystal(&feo, &t).unwrap() < 2000.0);
        assert!(hhi_of_crystal(&gd, &t).unwrap() > 4000.0);
    }

    #[test]
    fn bimodality_detects_two_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = Normal::new(0.0, 1.0).unwrap();
        let uni: Vec<f64> = (0..5000).map(|_| n.sample(&mut rng)).collect();
        let b = bimodality_summary(&uni, 30).unwrap();
        assert!(b.coefficient.unwrap() < BIMODALITY_THRESHOLD && !b.bimodal);
        let two: Vec<f64> = (0..5000).map(|i| n.sample(&mut rng) + if i % 2 == 0 { -6.0 } else { 6.0 }).collect();
        let b = bimodality_summary(&two, 30).unwrap();
        assert!(b.bimodal);
        assert_eq!(b.histogram.iter().map(|h| h.1).sum::<usize>(), 5000);
        let flat = bimodality_summary(&[2.0; 12], 5).unwrap();
        assert_eq!(flat.coefficient, None);
        assert!(!flat.bimodal);
        assert!(matches!(bimodality_summary(&[1.0; 3], 5), Err(EvalError::TooFewSamples { .. })));
    }

    #[test]
    fn report_absent_fields() {
        let t = ElementTables::bundled();
        let items = vec![EvalItem { crystal: None, charge_neutral: false, targets: Targets::default() }];
        let r = evaluate_set(&items, None, &t, HhiWeighting::AtomFraction, 20).unwrap();
        assert_eq!(r.frac_valid, Some(0.0));
        assert_eq!(r.frac_unique, None);
        assert_eq!(r.formula_match_rate, None);
        let csv = r.to_csv();
        assert!(csv.contains("frac_unique,NA"));
        assert!(r.to_json().contains("\"sun_rate\": null"));
        let empty = evaluate_set(&[], None, &t, HhiWeighting::AtomFraction, 20).unwrap();
        assert_eq!(empty.frac_valid, None);
    }
}
