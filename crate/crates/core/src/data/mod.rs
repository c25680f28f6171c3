//! Corpus ingestion: the crystal JSONL format, property transforms,
//! train/validation split and a synthetic toy corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{density, net_charge, reduced_formula, wrap_frac, Crystal, CrystalError, LatticeParams, Site};
use crate::elements::{ElementTables, TableError};
use crate::evaluator::{hhi_of_crystal, EvalItem, Targets};
use crate::fsutil::atomic_write;
use crate::model::{Condition, ConditionSet, ModelError};
use crate::tokenizer::{assign_oxidation_states, sequence_len, OrderingStrategy, TokenId, Tokenizer, TokenizerError};
use crate::sampler::Sample;
use crate::trainer::Example;

/// Offset inside the logarithm of the log-transformed properties.
pub const LOG_OFFSET: f64 = 1e-3;
/// Divisor applied to raw HHI scores.
pub const HHI_SCALE: f64 = 1000.0;

/// A malformed corpus line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

fn summarize(errors: &[LineError]) -> String {
    let mut s = errors.iter().take(5).map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
    if errors.len() > 5 {
        s.push_str(&format!("; and {} more", errors.len() - 5));
    }
    s
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{} malformed line(s): {}", .0.len(), summarize(.0))]
    Parse(Vec<LineError>),
    #[error("corpus contains no records")]
    EmptyCorpus,
    #[error("{name} must be non-negative, got {value}")]
    NegativeValue { name: &'static str, value: f64 },
    #[error("{name} value {value} is not finite")]
    NonFinite { name: &'static str, value: f64 },
    #[error("{0} is not a scalar property")]
    NotScalar(Condition),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("{n} records split at {train_frac} leaves one side empty")]
    TooSmall { n: usize, train_frac: f64 },
    #[error("record {id}: {reason}")]
    Record { id: String, reason: String },
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    /// Element symbol.
    pub element: String,
    /// Assigned by charge balancing when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oxidation_state: Option<i8>,
    pub frac: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Properties {
    /// eV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_gap: Option<f64>,
    /// Å⁻³.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnetic_density: Option<f64>,
    /// g/cm³.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_group: Option<u32>,
    /// Raw score, before division by 1000.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hhi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduced_formula: Option<String>,
}

impl Properties {
    pub fn is_empty(&self) -> bool {
        *self == Properties::default()
    }

    pub fn raw(&self, c: Condition) -> Option<f64> {
        match c {
            Condition::BandGap => self.band_gap,
            Condition::MagneticDensity => self.magnetic_density,
            Condition::Density => self.density,
            Condition::SpaceGroup => self.space_group.map(f64::from),
            Condition::Hhi => self.hhi,
            Condition::Formula => None,
        }
    }

    fn validate(&self) -> Result<(), String> {
        for c in Condition::SCALARS {
            if let Some(v) = self.raw(c) {
                if !v.is_finite() {
                    return Err(format!("property {c} is not finite"));
                }
            }
        }
        if let Some(sg) = self.space_group {
            if !(1..=230).contains(&sg) {
                return Err(format!("space_group {sg} outside 1..=230"));
            }
        }
        Ok(())
    }
}

/// One corpus line. Fields not named here are kept in `extra` and written back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalRecord {
    pub id: String,
    /// a, b, c in Å; α, β, γ in degrees.
    pub lattice: [f64; 6],
    pub sites: Vec<SiteRecord>,
    #[serde(default, skip_serializing_if = "Properties::is_empty")]
    pub properties: Properties,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CrystalRecord {
    /// Builds the crystal, assigning missing oxidation states by charge
    /// balancing and checking every state against the table.
    pub fn to_crystal(&self, tables: &ElementTables) -> Result<Crystal, DataError> {
        let lattice = LatticeParams::from_array(self.lattice)?;
        let mut elements = Vec::with_capacity(self.sites.len());
        for s in &self.sites {
            elements.push(tables.atomic_number(&s.element)?);
        }
        let guessed = if self.sites.iter().any(|s| s.oxidation_state.is_none()) {
            assign_oxidation_states(&elements, tables)
        } else {
            Vec::new()
        };
        let sites = self
            .sites
            .iter()
            .zip(&elements)
            .enumerate()
            .map(|(i, (s, &z))| Site::new(z, s.oxidation_state.unwrap_or_else(|| guessed[i]), s.frac))
            .collect();
        let c = Crystal::new(lattice, sites)?;
        c.check_oxidation_states(tables)?;
        Ok(c)
    }

    pub fn from_crystal(id: impl Into<String>, c: &Crystal, tables: &ElementTables) -> Result<Self, DataError> {
        let sites = c
            .sites
            .iter()
            .map(|s| {
                let symbol = tables.symbol(s.element).ok_or(CrystalError::UnknownElement(s.element))?;
                Ok(SiteRecord { element: symbol.to_string(), oxidation_state: Some(s.oxidation_state), frac: s.frac })
            })
            .collect::<Result<_, DataError>>()?;
        Ok(Self {
            id: id.into(),
            lattice: c.lattice.to_array(),
            sites,
            properties: Properties::default(),
            extra: BTreeMap::new(),
        })
    }

    /// Strict validation of one parsed line; wraps coordinates in place.
    fn check(&mut self, tables: &ElementTables, line: usize) -> Result<(), String> {
        self.properties.validate()?;
        for s in &mut self.sites {
            for f in &mut s.frac {
                if f.is_finite() && !(0.0..1.0).contains(f) {
                    let w = wrap_frac(*f);
                    log::warn!("line {line}: record {} coordinate {f} wrapped to {w}", self.id);
                    *f = w;
                }
            }
        }
        self.to_crystal(tables).map(|_| ()).map_err(|e| e.to_string())
    }
}

/// Parses JSONL text. Blank lines are skipped; every malformed line is
/// reported, not just the first.
pub fn parse_corpus(text: &str, tables: &ElementTables) -> Result<Vec<CrystalRecord>, DataError> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        match serde_json::from_str::<CrystalRecord>(line) {
            Ok(mut r) => match r.check(tables, n) {
                Ok(()) => records.push(r),
                Err(reason) => errors.push(LineError { line: n, reason }),
            },
            Err(e) => errors.push(LineError { line: n, reason: e.to_string() }),
        }
    }
    if !errors.is_empty() {
        return Err(DataError::Parse(errors));
    }
    if records.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(records)
}

pub fn load_corpus(path: impl AsRef<Path>, tables: &ElementTables) -> Result<Vec<CrystalRecord>, DataError> {
    parse_corpus(&std::fs::read_to_string(path)?, tables)
}

pub fn corpus_to_string(records: &[CrystalRecord]) -> Result<String, DataError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, records: &[CrystalRecord]) -> Result<(), DataError> {
    atomic_write(path.as_ref(), corpus_to_string(records)?.as_bytes())?;
    Ok(())
}

/// Maps a raw property value onto the scale the model is conditioned on.
pub fn transform_condition(c: Condition, raw: f64) -> Result<f64, DataError> {
    let name = c.name();
    if !raw.is_finite() {
        return Err(DataError::NonFinite { name, value: raw });
    }
    match c {
        Condition::BandGap | Condition::MagneticDensity => {
            if raw < 0.0 {
                return Err(DataError::NegativeValue { name, value: raw });
            }
            Ok((raw + LOG_OFFSET).ln())
        }
        Condition::Hhi => Ok(raw / HHI_SCALE),
        Condition::Density | Condition::SpaceGroup => Ok(raw),
        Condition::Formula => Err(DataError::NotScalar(c)),
    }
}

pub fn inverse_transform_condition(c: Condition, value: f64) -> Result<f64, DataError> {
    match c {
        Condition::BandGap | Condition::MagneticDensity => Ok(value.exp() - LOG_OFFSET),
        Condition::Hhi => Ok(value * HHI_SCALE),
        Condition::Density | Condition::SpaceGroup => Ok(value),
        Condition::Formula => Err(DataError::NotScalar(c)),
    }
}

/// Transformed conditions for a record; the formula is the crystal's reduced composition.
pub fn record_conditions(record: &CrystalRecord, crystal: &Crystal, tables: &ElementTables) -> Result<ConditionSet, DataError> {
    let mut cs = ConditionSet::new();
    for c in Condition::SCALARS {
        if let Some(v) = record.properties.raw(c) {
            cs.set(c, transform_condition(c, v)?)?;
        }
    }
    cs.set_formula(&reduced_formula(crystal, tables)?.pairs())?;
    Ok(cs)
}

/// Seeded shuffle, then the first round(n·train_frac) records go to training.
pub fn split_corpus<T: Clone>(records: &[T], train_frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DataError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::BadFraction(train_frac));
    }
    let n = records.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(DataError::TooSmall { n, train_frac });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = idx[..n_train].iter().map(|&i| records[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, val))
}

/// Per-corpus tokenization summary.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EncodeStats {
    pub n_records: usize,
    /// Sequence length → record count.
    pub length_histogram: BTreeMap<usize, usize>,
    /// Clamped values per lattice parameter (a, b, c, α, β, γ).
    pub clamp_counts: [usize; 6],
    pub n_records_clamped: usize,
    pub distinct_tokens: usize,
    pub vocab_size: usize,
}

/// Encodes every record, with the `i`-th record using `strategy.for_material(i)`.
pub fn encode_records(
    records: &[CrystalRecord],
    tokenizer: &Tokenizer,
    strategy: OrderingStrategy,
    tables: &ElementTables,
) -> Result<(Vec<Example>, EncodeStats), DataError> {
    let mut stats = EncodeStats { vocab_size: tokenizer.vocab.len(), ..Default::default() };
    let mut seen = vec![false; tokenizer.vocab.len()];
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let ctx = |e: DataError| DataError::Record { id: r.id.clone(), reason: e.to_string() };
        let crystal = r.to_crystal(tables).map_err(ctx)?;
        let enc = tokenizer
            .encode_detailed(&crystal, strategy.for_material(i as u64))
            .map_err(|e| ctx(e.into()))?;
        let conditions = record_conditions(r, &crystal, tables).map_err(ctx)?;
        let tokens: Vec<TokenId> = enc.tokens.ids;
        debug_assert_eq!(tokens.len(), sequence_len(crystal.num_sites()));
        *stats.length_histogram.entry(tokens.len()).or_default() += 1;
        for (k, &c) in enc.clamped.iter().enumerate() {
            stats.clamp_counts[k] += c as usize;
        }
        stats.n_records_clamped += enc.clamped.iter().any(|&c| c) as usize;
        for &t in &tokens {
            seen[t as usize] = true;
        }
        out.push(Example { tokens, conditions });
    }
    stats.n_records = out.len();
    stats.distinct_tokens = seen.iter().filter(|&&s| s).count();
    Ok((out, stats))
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n: usize,
    pub seed: u64,
    pub max_sites: usize,
    /// Uniform range of target densities in g/cm³.
    pub density_range: (f64, f64),
}

impl ToySpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, max_sites: 8, density_range: (1.0, 8.0) }
    }
}

/// (symbol, oxidation state) palettes for the toy generator.
const CATIONS: &[(&str, i8)] = &[
    ("Li", 1),
    ("Na", 1),
    ("K", 1),
    ("Mg", 2),
    ("Ca", 2),
    ("Sr", 2),
    ("Ba", 2),
    ("Zn", 2),
    ("Cu", 2),
    ("Fe", 2),
    ("Fe", 3),
    ("Al", 3),
    ("Y", 3),
    ("La", 3),
    ("Gd", 3),
    ("Ti", 4),
];
const ANIONS: &[(&str, i8)] = &[("O", -2), ("S", -2), ("F", -1), ("Cl", -1), ("N", -3)];

/// Bounds a toy cell must satisfy after reduction.
const TOY_LATTICE: [(f64, f64); 6] = [(2.0, 10.0), (2.0, 12.5), (2.0, 20.0), (60.0, 120.0), (60.0, 120.0), (60.0, 120.0)];

fn neutral_counts(charges: &[i8], max_sites: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut counts = vec![1usize; charges.len()];
    loop {
        let total: usize = counts.iter().sum();
        let q: i64 = counts.iter().zip(charges).map(|(&n, &c)| n as i64 * c as i64).sum();
        if total <= max_sites && q == 0 {
            out.push(counts.clone());
        }
        let mut k = 0;
        loop {
            if k == counts.len() {
                return out;
            }
            counts[k] += 1;
            if counts[k] <= max_sites {
                break;
            }
            counts[k] = 1;
            k += 1;
        }
    }
}

fn toy_crystal(rng: &mut ChaCha8Rng, spec: &ToySpec, tables: &ElementTables) -> Crystal {
    loop {
        let n_cations = rng.random_range(1..=2usize);
        let mut species: Vec<(u8, i8)> = Vec::new();
        while species.len() < n_cations {
            let (sym, q) = CATIONS[rng.random_range(0..CATIONS.len())];
            let z = tables.atomic_number(sym).expect("palette element in table");
            if species.iter().all(|&(e, _)| e != z) {
                species.push((z, q));
            }
        }
        let (sym, q) = ANIONS[rng.random_range(0..ANIONS.len())];
        species.push((tables.atomic_number(sym).expect("palette element in table"), q));

        let charges: Vec<i8> = species.iter().map(|s| s.1).collect();
        let options = neutral_counts(&charges, spec.max_sites);
        if options.is_empty() {
            continue;
        }
        let counts = &options[rng.random_range(0..options.len())];
        let mut sites = Vec::new();
        for (&(z, q), &n) in species.iter().zip(counts) {
            for _ in 0..n {
                sites.push(Site::new(z, q, [rng.random(), rng.random(), rng.random()]));
            }
        }
        let mass: f64 = sites.iter().map(|s| tables.mass(s.element).expect("palette mass")).sum();
        let target = rng.random_range(spec.density_range.0..=spec.density_range.1);
        let angles = [0; 3].map(|_| rng.random_range(70.0..110.0));
        let (rb, rc) = (rng.random_range(0.8..1.5), rng.random_range(0.8..2.0));
        let Ok(unit) = LatticeParams::new(1.0, rb, rc, angles[0], angles[1], angles[2]) else { continue };
        let volume = mass * crate::crystal::AMU_GRAMS / (target * crate::crystal::CUBIC_ANGSTROM_CM3);
        let scale = (volume / unit.volume()).cbrt();
        let Ok(lattice) = LatticeParams::new(scale, rb * scale, rc * scale, angles[0], angles[1], angles[2]) else {
            continue;
        };
        let Ok(c) = Crystal::new(lattice, sites).and_then(|c| c.niggli_reduced()) else { continue };
        let p = c.lattice.to_array();
        if p.iter().zip(TOY_LATTICE).all(|(v, (lo, hi))| (lo..=hi).contains(v)) {
            return c;
        }
    }
}

/// Random charge-neutral crystals with computed density and HHI, deterministic per seed.
pub fn synth_toy_corpus(spec: &ToySpec, tables: &ElementTables) -> Vec<CrystalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n)
        .map(|i| {
            let c = toy_crystal(&mut rng, spec, tables);
            debug_assert_eq!(net_charge(&c), 0);
            let mut r = CrystalRecord::from_crystal(format!("synth-{}-{i}", spec.seed), &c, tables)
                .expect("palette elements have symbols");
            r.properties = Properties {
                density: Some(density(&c, tables).expect("palette masses")),
                hhi: Some(hhi_of_crystal(&c, tables).expect("palette hhi")),
                // random coordinates carry no symmetry beyond translation
                space_group: Some(1),
                reduced_formula: Some(reduced_formula(&c, tables).expect("palette").to_string()),
                ..Default::default()
            };
            r
        })
        .collect()
}

/// One line of a tokenized corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: String,
    #[serde(flatten)]
    pub example: Example,
}

/// Parses a tokenized corpus written as [`TokenRecord`] lines.
pub fn parse_token_corpus(text: &str) -> Result<Vec<TokenRecord>, DataError> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TokenRecord>(line) {
            Ok(r) => out.push(r),
            Err(e) => errors.push(LineError { line: i + 1, reason: e.to_string() }),
        }
    }
    if !errors.is_empty() {
        return Err(DataError::Parse(errors));
    }
    if out.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(out)
}

/// Serializes a generated sample. Valid samples are ordinary corpus records
/// with computed properties; grammar failures keep only the annotations and
/// their tokens. Every line carries `targets`, `seed`, `valid` and `charge_neutral`.
pub fn generated_record(
    id: &str,
    sample: &Sample,
    targets: &Targets,
    tables: &ElementTables,
) -> Result<serde_json::Value, DataError> {
    let mut v = match &sample.crystal {
        Some(c) => {
            let mut r = CrystalRecord::from_crystal(id, c, tables)?;
            r.properties = Properties {
                density: density(c, tables).ok(),
                hhi: hhi_of_crystal(c, tables).ok(),
                reduced_formula: reduced_formula(c, tables).ok().map(|f| f.to_string()),
                ..Default::default()
            };
            serde_json::to_value(r)?
        }
        None => {
            let mut m = serde_json::Map::new();
            m.insert("id".into(), id.into());
            m.insert("tokens".into(), serde_json::to_value(&sample.tokens)?);
            if let Some(e) = &sample.error {
                m.insert("error".into(), e.to_string().into());
            }
            serde_json::Value::Object(m)
        }
    };
    let m = v.as_object_mut().expect("record is an object");
    m.insert("targets".into(), serde_json::to_value(targets)?);
    m.insert("seed".into(), sample.seed.into());
    m.insert("valid".into(), sample.crystal.is_some().into());
    m.insert("charge_neutral".into(), sample.charge_neutral.into());
    Ok(v)
}

/// Reads a generated set back for evaluation. Lines without `"valid": false`
/// must be complete corpus records.
pub fn parse_generated(text: &str, tables: &ElementTables) -> Result<Vec<EvalItem>, DataError> {
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = (|| -> Result<EvalItem, DataError> {
            let v: serde_json::Value = serde_json::from_str(line)?;
            let targets: Targets = match v.get("targets") {
                Some(t) => serde_json::from_value(t.clone())?,
                None => Targets::default(),
            };
            if v.get("valid") == Some(&serde_json::Value::Bool(false)) {
                return Ok(EvalItem { crystal: None, charge_neutral: false, targets });
            }
            let r: CrystalRecord = serde_json::from_value(v)?;
            let c = r.to_crystal(tables)?;
            Ok(EvalItem { charge_neutral: net_charge(&c) == 0, crystal: Some(c), targets })
        })();
        match item {
            Ok(it) => items.push(it),
            Err(e) => errors.push(LineError { line: i + 1, reason: e.to_string() }),
        }
    }
    if !errors.is_empty() {
        return Err(DataError::Parse(errors));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(extra: &str) -> String {
        format!(
            r#"{{"id":"x","lattice":[4,4,4,90,90,90],"sites":[{{"element":"Na","oxidation_state":1,"frac":[0,0,0]}},{{"element":"Cl","frac":[0.5,0.5,0.5]}}]{extra}}}"#
        )
    }

    #[test]
    fn parses_wraps_and_reports() {
        let t = ElementTables::bundled();
        let text = [line(""), line(r#","properties":{"density":2.1}"#), line(r#","source":"mp-1""#)].join("\n");
        let recs = parse_corpus(&text, &t).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].extra["source"], "mp-1");
        let c = recs[0].to_crystal(&t).unwrap();
        assert_eq!(c.sites[1].oxidation_state, -1);

        let wrapped = line("").replace("[0,0,0]", "[1.0,0,0]");
        let recs = parse_corpus(&wrapped, &t).unwrap();
        assert_eq!(recs[0].sites[0].frac[0], 0.0);

        let missing = r#"{"id":"y","sites":[]}"#;
        let bad = format!("{}\n{missing}\n\nnot json", line(""));
        match parse_corpus(&bad, &t) {
            Err(DataError::Parse(errs)) => {
                assert_eq!(errs.len(), 2);
                assert_eq!(errs[0].line, 2);
                assert!(errs[0].reason.contains("lattice"), "{}", errs[0].reason);
                assert_eq!(errs[1].line, 4);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_corpus("\n\n", &t), Err(DataError::EmptyCorpus)));
        let bad_sg = line(r#","properties":{"space_group":231}"#);
        assert!(matches!(parse_corpus(&bad_sg, &t), Err(DataError::Parse(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let t = ElementTables::bundled();
        let mut recs = synth_toy_corpus(&ToySpec::new(20, 3), &t);
        recs[0].extra.insert("note".into(), serde_json::json!({"k": [1, 2]}));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&p, &recs).unwrap();
        assert_eq!(load_corpus(&p, &t).unwrap(), recs);
    }

    #[test]
    fn transforms() {
        assert!((transform_condition(Condition::BandGap, 0.0).unwrap() - (-6.907_755_278_982_137)).abs() < 1e-12);
        assert_eq!(transform_condition(Condition::Hhi, 3000.0).unwrap(), 3.0);
        assert_eq!(transform_condition(Condition::Density, 5.2).unwrap(), 5.2);
        assert!(matches!(transform_condition(Condition::MagneticDensity, -0.1), Err(DataError::NegativeValue { .. })));
        assert!(transform_condition(Condition::Density, f64::NAN).is_err());
        assert!(transform_condition(Condition::Formula, 1.0).is_err());
    }

    #[test]
    fn split_sizes() {
        let v: Vec<u32> = (0..10).collect();
        let (a, b) = split_corpus(&v, 0.9, 1).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
        assert_eq!(split_corpus(&v, 0.9, 1).unwrap(), (a, b));
        assert!(matches!(split_corpus(&v[..1], 0.9, 0), Err(DataError::TooSmall { .. })));
        assert!(matches!(split_corpus(&v, 1.0, 0), Err(DataError::BadFraction(_))));
    }

    #[test]
    fn toy_corpus_is_valid_and_neutral() {
        let t = ElementTables::bundled();
        let spec = ToySpec::new(200, 11);
        let recs = synth_toy_corpus(&spec, &t);
        assert_eq!(recs, synth_toy_corpus(&spec, &t));
        let tok = Tokenizer::new(crate::tokenizer::Vocabulary::build(&t).unwrap(), Default::default());
        for r in &recs {
            let c = r.to_crystal(&t).unwrap();
            assert_eq!(net_charge(&c), 0);
            assert!((1..=8).contains(&c.num_sites()));
            assert_eq!(r.properties.density, Some(density(&c, &t).unwrap()));
            let d = r.properties.density.unwrap();
            assert!((1.0 - 1e-9..=8.0 + 1e-9).contains(&d), "{d}");
            assert!(!tok.encode_detailed(&c, OrderingStrategy::LowFirst).unwrap().any_clamped());
        }
        let (ex, stats) = encode_records(&recs, &tok, OrderingStrategy::Random(5), &t).unwrap();
        assert_eq!(ex.len(), 200);
        assert_eq!(stats.n_records_clamped, 0);
        assert_eq!(stats.length_histogram.values().sum::<usize>(), 200);
        assert!(ex.iter().all(|e| e.conditions.formula().is_some() && e.conditions.get(Condition::Density).is_some()));
    }

    #[test]
    fn generated_lines_round_trip() {
        let t = ElementTables::bundled();
        let recs = synth_toy_corpus(&ToySpec::new(2, 1), &t);
        let c = recs[0].to_crystal(&t).unwrap();
        let ok = Sample {
            index: 0,
            seed: 5,
            conditions: ConditionSet::new(),
            tokens: vec![],
            crystal: Some(c.clone()),
            error: None,
            charge_neutral: true,
        };
        let bad = Sample { crystal: None, tokens: vec![0, 2, 3], charge_neutral: false, ..ok.clone() };
        let targets = Targets { density: Some(5.0), formula: Some("Fe1O1".into()), ..Default::default() };
        let lines = [&ok, &bad]
            .iter()
            .enumerate()
            .map(|(i, s)| generated_record(&format!("g{i}"), s, &targets, &t).unwrap().to_string())
            .collect::<Vec<_>>()
            .join("\n");
        assert!(lines.contains("\"seed\":5") && lines.contains("\"valid\":false"));
        let items = parse_generated(&lines, &t).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].crystal.as_ref(), Some(&c));
        assert_eq!(items[0].targets, targets);
        assert!(items[1].crystal.is_none());
        // valid lines also load as a plain corpus
        assert_eq!(parse_corpus(lines.lines().next().unwrap(), &t).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn transforms_are_strictly_monotone(x in 0.0f64..1e4, dx in 1e-6f64..1e3) {
            for c in Condition::SCALARS {
                let lo = transform_condition(c, x).unwrap();
                let hi = transform_condition(c, x + dx).unwrap();
                prop_assert!(hi > lo);
                let back = inverse_transform_condition(c, lo).unwrap();
                prop_assert!((back - x).abs() <= 1e-9 * x.max(1.0));
            }
        }

        #[test]
        fn split_is_disjoint_and_exhaustive(n in 2usize..200, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let v: Vec<usize> = (0..n).collect();
            match split_corpus(&v, frac, seed) {
                Ok((a, b)) => {
                    prop_assert_eq!(split_corpus(&v, frac, seed).unwrap(), (a.clone(), b.clone()));
                    let mut all: Vec<usize> = a.into_iter().chain(b).collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, v);
                }
                Err(DataError::TooSmall { .. }) => {
                    let k = (n as f64 * frac).round() as usize;
                    prop_assert!(k == 0 || k == n);
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
