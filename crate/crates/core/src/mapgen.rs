//! Random string mappings with an exact branching-factor topology.
//!
//! A [`PairSet`] with branching factor `K` holds `n_pairs` pairs `(A, B)` in
//! which every `A` is globally unique and every distinct `B` occurs exactly `K`
//! times. The forward task `A -> B` is therefore a function, while the inverse
//! task `B -> A` has `K` equally likely answers per query.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, PortableRng};

pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";
pub const DEFAULT_LENGTH: usize = 8;

/// Rejection sampling gives up after this many attempts per requested string.
const RETRY_FACTOR: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStringSpec", into = "RawStringSpec")]
pub struct StringSpec {
    alphabet: Vec<char>,
    length: usize,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawStringSpec {
    alphabet: String,
    length: usize,
}

impl TryFrom<RawStringSpec> for StringSpec {
    type Error = Error;

    fn try_from(raw: RawStringSpec) -> Result<Self> {
        StringSpec::new(&raw.alphabet, raw.length)
    }
}

impl From<StringSpec> for RawStringSpec {
    fn from(spec: StringSpec) -> Self {
        RawStringSpec {
            alphabet: spec.alphabet.iter().collect(),
            length: spec.length,
        }
    }
}

impl StringSpec {
    pub fn new(alphabet: &str, length: usize) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        if chars.is_empty() {
            return Err(Error::config("alphabet is empty"));
        }
        if length == 0 {
            return Err(Error::config("string length must be at least 1"));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if c.is_whitespace() || c == ':' || c == '\t' {
                return Err(Error::config(format!(
                    "alphabet character {c:?} collides with the prompt template"
                )));
            }
            if index.insert(c, i).is_some() {
                return Err(Error::config(format!("alphabet repeats character {c:?}")));
            }
        }
        Ok(StringSpec {
            alphabet: chars,
            length,
            index,
        })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.len()
    }

    /// Number of distinct strings, saturating at `u128::MAX`.
    pub fn space_size(&self) -> u128 {
        let base = self.alphabet.len() as u128;
        let mut total: u128 = 1;
        for _ in 0..self.length {
            total = total.saturating_mul(base);
        }
        total
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Alphabet indices of every character of `s`.
    pub fn char_ids(&self, s: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = s
            .chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Encoding(format!("{c:?} is not in the alphabet")))
            })
            .collect::<Result<_>>()?;
        if ids.len() != self.length {
            return Err(Error::Encoding(format!(
                "{s:?} has length {}, expected {}",
                ids.len(),
                self.length
            )));
        }
        Ok(ids)
    }

    pub fn is_valid(&self, s: &str) -> bool {
        s.chars().count() == self.length && s.chars().all(|c| self.index.contains_key(&c))
    }

    fn sample(&self, rng: &mut PortableRng) -> String {
        (0..self.length)
            .map(|_| self.alphabet[rng.gen_range(0..self.alphabet.len())])
            .collect()
    }
}

impl Default for StringSpec {
    fn default() -> Self {
        StringSpec::new(DEFAULT_ALPHABET, DEFAULT_LENGTH).expect("default alphabet is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingConfig {
    pub spec: StringSpec,
    pub branching: usize,
    pub n_pairs: usize,
    pub seed: u64,
}

impl MappingConfig {
    pub fn new(spec: StringSpec, branching: usize, n_pairs: usize, seed: u64) -> Self {
        MappingConfig {
            spec,
            branching,
            n_pairs,
            seed,
        }
    }

    pub fn n_targets(&self) -> usize {
        self.n_pairs / self.branching.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching == 0 {
            return Err(Error::config("branching factor must be at least 1"));
        }
        if self.n_pairs == 0 {
            return Err(Error::config("n_pairs must be at least 1"));
        }
        if !self.n_pairs.is_multiple_of(self.branching) {
            return Err(Error::config(format!(
                "branching factor {} does not divide n_pairs {}",
                self.branching, self.n_pairs
            )));
        }
        // A and B are drawn from the same space but are not required to be
        // disjoint, so each side only needs to fit on its own.
        let space = self.spec.space_size();
        if self.n_pairs as u128 > space {
            return Err(Error::config(format!(
                "{} distinct strings requested but only {space} exist",
                self.n_pairs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<(String, String)>,
    pub config: MappingConfig,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn branching(&self) -> usize {
        self.config.branching
    }

    /// SHA-256 over the config header and every pair, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (a, b) in &self.pairs {
            hasher.update(a.as_bytes());
            hasher.update(b"\t");
            hasher.update(b.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Writes the TSV form: a JSON header line followed by one `A<TAB>B` line per pair.
    pub fn write_tsv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        serde_json::to_writer(&mut w, &self.config)?;
        w.write_all(b"\n")?;
        for (a, b) in &self.pairs {
            writeln!(w, "{a}\t{b}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Decode("pair file is empty".into()))??;
        let config: MappingConfig = serde_json::from_str(&header)?;
        let mut pairs = Vec::with_capacity(config.n_pairs);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (a, b) = line.split_once('\t').ok_or_else(|| {
                Error::Decode(format!("line {}: expected A<TAB>B", lineno + 2))
            })?;
            pairs.push((a.to_string(), b.to_string()));
        }
        Ok(PairSet { pairs, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_tsv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_tsv(std::fs::File::open(path)?)
    }
}

/// Draws `count` distinct strings, rejecting any already in `taken`.
fn sample_distinct(
    spec: &StringSpec,
    count: usize,
    taken: &mut HashSet<String>,
    rng: &mut PortableRng,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(count);
    let budget = RETRY_FACTOR.saturating_mul(count.max(1));
    let mut attempts = 0usize;
    while out.len() < count {
        if attempts >= budget {
            return Err(Error::config(format!(
                "sampling exhausted after {attempts} attempts ({} of {count} distinct strings found)",
                out.len()
            )));
        }
        attempts += 1;
        let s = spec.sample(rng);
        if taken.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// `K = 1`: sample `n` distinct A and `n` distinct B, shuffle B and zip.
pub fn generate_bijective(config: &MappingConfig) -> Result<PairSet> {
    if config.branching != 1 {
        return Err(Error::config(format!(
            "bijective generation needs K = 1, got K = {}",
            config.branching
        )));
    }
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let n = config.n_pairs;
    let a_side = sample_distinct(&config.spec, n, &mut HashSet::with_capacity(n), &mut rng)?;
    let mut b_side = sample_distinct(&config.spec, n, &mut HashSet::with_capacity(n), &mut rng)?;
    b_side.shuffle(&mut rng);
    Ok(PairSet {
        pairs: a_side.into_iter().zip(b_side).collect(),
        config: config.clone(),
    })
}

/// `K > 1`: sample `n/K` distinct targets, give each `K` globally unique
/// pre-images, then shuffle the pair list.
pub fn generate_many_to_one(config: &MappingConfig) -> Result<PairSet> {
    if config.branching < 2 {
        return Err(Error::config(format!(
            "many-to-one generation needs K > 1, got K = {}",
            config.branching
        )));
    }
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let k = config.branching;
    let targets = sample_distinct(
        &config.spec,
        config.n_targets(),
        &mut HashSet::with_capacity(config.n_targets()),
        &mut rng,
    )?;
    let mut sources = HashSet::with_capacity(config.n_pairs);
    let mut pairs = Vec::with_capacity(config.n_pairs);
    for b in &targets {
        for a in sample_distinct(&config.spec, k, &mut sources, &mut rng)? {
            pairs.push((a, b.clone()));
        }
    }
    pairs.shuffle(&mut rng);
    Ok(PairSet {
        pairs,
        config: config.clone(),
    })
}

pub fn generate(config: &MappingConfig) -> Result<PairSet> {
    if config.branching == 1 {
        generate_bijective(config)
    } else {
        generate_many_to_one(config)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    PairCount { expected: usize, found: usize },
    DuplicateSource { source: String, occurrences: usize },
    TargetMultiplicity { target: String, expected: usize, found: usize },
    TargetCount { expected: usize, found: usize },
    MalformedString { value: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PairCount { expected, found } => {
                write!(f, "pair count: expected {expected}, found {found}")
            }
            Violation::DuplicateSource { source, occurrences } => {
                write!(f, "source uniqueness: {source:?} appears {occurrences} times")
            }
            Violation::TargetMultiplicity {
                target,
                expected,
                found,
            } => write!(
                f,
                "target support: {target:?} appears {found} times, expected {expected}"
            ),
            Violation::TargetCount { expected, found } => {
                write!(f, "distinct targets: expected {expected}, found {found}")
            }
            Violation::MalformedString { value } => {
                write!(f, "string format: {value:?} is not a valid string")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub n_pairs: usize,
    pub distinct_a: usize,
    pub distinct_b: usize,
    /// multiplicity -> number of distinct B with that many pre-images
    pub multiplicity: BTreeMap<usize, usize>,
    /// strings that occur on both the A side and the B side
    pub ab_overlap: usize,
    pub violations: Vec<Violation>,
}

impl TopologyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every PairSet invariant. Failures are collected, never raised.
pub fn validate_topology(ps: &PairSet) -> TopologyReport {
    let cfg = &ps.config;
    let mut violations = Vec::new();
    if ps.pairs.len() != cfg.n_pairs {
        violations.push(Violation::PairCount {
            expected: cfg.n_pairs,
            found: ps.pairs.len(),
        });
    }

    let mut a_counts: HashMap<&str, usize> = HashMap::with_capacity(ps.pairs.len());
    let mut b_counts: HashMap<&str, usize> = HashMap::new();
    for (a, b) in &ps.pairs {
        *a_counts.entry(a).or_default() += 1;
        *b_counts.entry(b).or_default() += 1;
        for s in [a, b] {
            if !cfg.spec.is_valid(s) {
                violations.push(Violation::MalformedString { value: s.clone() });
            }
        }
    }

    let mut dup_a: Vec<_> = a_counts.iter().filter(|(_, &c)| c > 1).collect();
    dup_a.sort();
    for (a, &c) in dup_a {
        violations.push(Violation::DuplicateSource {
            source: a.to_string(),
            occurrences: c,
        });
    }

    let k = cfg.branching;
    let mut multiplicity = BTreeMap::new();
    let mut bad_b: Vec<_> = Vec::new();
    for (b, &c) in &b_counts {
        *multiplicity.entry(c).or_insert(0) += 1;
        if c != k {
            bad_b.push((*b, c));
        }
    }
    bad_b.sort();
    for (b, c) in bad_b {
        violations.push(Violation::TargetMultiplicity {
            target: b.to_string(),
            expected: k,
            found: c,
        });
    }
    if k > 0 && b_counts.len() != cfg.n_pairs / k {
        violations.push(Violation::TargetCount {
            expected: cfg.n_pairs / k,
            found: b_counts.len(),
        });
    }

    let ab_overlap = b_counts.keys().filter(|b| a_counts.contains_key(*b)).count();
    TopologyReport {
        n_pairs: ps.pairs.len(),
        distinct_a: a_counts.len(),
        distinct_b: b_counts.len(),
        multiplicity,
        ab_overlap,
        violations,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformityReport {
    /// largest |count - mean| / sd over characters of the A side
    pub max_z_sources: f64,
    /// same over the distinct targets
    pub max_z_targets: f64,
    pub threshold: f64,
}

impl UniformityReport {
    pub fn passed(&self) -> bool {
        self.max_z_sources <= self.threshold && self.max_z_targets <= self.threshold
    }
}

fn max_binomial_z<'a>(strings: impl Iterator<Item = &'a str>, spec: &StringSpec) -> f64 {
    let mut counts = vec![0usize; spec.alphabet_size()];
    let mut total = 0usize;
    for s in strings {
        for c in s.chars() {
            if let Some(i) = spec.index_of(c) {
                counts[i] += 1;
                total += 1;
            }
        }
    }
    let p = 1.0 / spec.alphabet_size() as f64;
    let mean = total as f64 * p;
    let sd = (total as f64 * p * (1.0 - p)).sqrt();
    if sd == 0.0 {
        return 0.0;
    }
    counts
        .iter()
        .map(|&c| (c as f64 - mean).abs() / sd)
        .fold(0.0, f64::max)
}

/// Character-frequency sanity check on both sides of the mapping.
///
/// Targets are counted once per distinct string: repeating each B `K` times
/// would inflate the variance by `K` and break the binomial reference.
pub fn check_uniformity(ps: &PairSet, threshold_sd: f64) -> UniformityReport {
    let spec = &ps.config.spec;
    let max_z_sources = max_binomial_z(ps.pairs.iter().map(|(a, _)| a.as_str()), spec);
    let mut seen = HashSet::new();
    let distinct_b = ps
        .pairs
        .iter()
        .map(|(_, b)| b.as_str())
        .filter(|b| seen.insert(*b));
    let max_z_targets = max_binomial_z(distinct_b, spec);
    UniformityReport {
        max_z_sources,
        max_z_targets,
        threshold: threshold_sd,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(alphabet: &str, len: usize, k: usize, n: usize, seed: u64) -> MappingConfig {
        MappingConfig::new(StringSpec::new(alphabet, len).unwrap(), k, n, seed)
    }

    #[test]
    fn string_spec_rejects_bad_alphabets() {
        assert!(StringSpec::new("aa", 3).is_err());
        assert!(StringSpec::new("ab", 0).is_err());
        assert!(StringSpec::new("", 2).is_err());
        assert!(StringSpec::new("a b", 2).is_err());
        assert_eq!(StringSpec::default().alphabet_size(), 36);
        assert_eq!(StringSpec::default().space_size(), 36u128.pow(8));
    }

    #[test]
    fn bijective_full_size() {
        let c = MappingConfig::new(StringSpec::default(), 1, 40_000, 11);
        let ps = generate_bijective(&c).unwrap();
        let report = validate_topology(&ps);
        assert!(report.passed(), "{:?}", report.violations);
        assert_eq!(report.distinct_a, 40_000);
        assert_eq!(report.distinct_b, 40_000);
        assert_eq!(report.multiplicity, BTreeMap::from([(1, 40_000)]));
    }

    #[test]
    fn bijective_exhaustive_tiny_case() {
        for seed in 0..20 {
            let ps = generate_bijective(&cfg("ab", 1, 1, 2, seed)).unwrap();
            let mut a: Vec<_> = ps.pairs.iter().map(|p| p.0.clone()).collect();
            let mut b: Vec<_> = ps.pairs.iter().map(|p| p.1.clone()).collect();
            a.sort();
            b.sort();
            assert_eq!(a, vec!["a", "b"]);
            assert_eq!(b, vec!["a", "b"]);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = cfg(DEFAULT_ALPHABET, 8, 5, 1000, 42);
        let mut x = Vec::new();
        let mut y = Vec::new();
        generate(&c).unwrap().write_tsv(&mut x).unwrap();
        generate(&c).unwrap().write_tsv(&mut y).unwrap();
        assert_eq!(x, y);
        let other = generate(&MappingConfig { seed: 43, ..c }).unwrap();
        let mut z = Vec::new();
        other.write_tsv(&mut z).unwrap();
        assert_ne!(x, z);
    }

    #[test]
    fn many_to_one_target_counts() {
        for (k, targets) in [(5, 8000), (8, 5000)] {
            let ps = generate(&MappingConfig::new(StringSpec::default(), k, 40_000, 3)).unwrap();
            let r = validate_topology(&ps);
            assert!(r.passed());
            assert_eq!(r.distinct_b, targets);
            assert_eq!(r.multiplicity, BTreeMap::from([(k, targets)]));
        }
    }

    #[test]
    fn many_to_one_tiny_enumerated() {
        // Brute-force check of the invariants over the emitted set.
        let ps = generate_many_to_one(&cfg("abc", 2, 2, 4, 9)).unwrap();
        assert_eq!(ps.pairs.len(), 4);
        let a: HashSet<_> = ps.pairs.iter().map(|p| &p.0).collect();
        assert_eq!(a.len(), 4);
        let mut by_b: HashMap<&String, Vec<&String>> = HashMap::new();
        for (x, y) in &ps.pairs {
            by_b.entry(y).or_default().push(x);
        }
        assert_eq!(by_b.len(), 2);
        for pre in by_b.values() {
            assert_eq!(pre.len(), 2);
            assert_ne!(pre[0], pre[1]);
        }
        for (x, y) in &ps.pairs {
            assert!(ps.config.spec.is_valid(x) && ps.config.spec.is_valid(y));
        }
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            generate(&cfg("ab", 3, 3, 4, 0)),
            Err(Error::Config(_))
        ));
        assert!(generate(&cfg("ab", 1, 1, 3, 0)).is_err());
        assert!(generate_bijective(&cfg("ab", 3, 2, 4, 0)).is_err());
        assert!(generate_many_to_one(&cfg("ab", 3, 1, 4, 0)).is_err());
        // Only 8 strings exist, 8 distinct A are needed: feasible in principle.
        assert!(generate(&cfg("ab", 3, 2, 8, 0)).is_ok());
    }

    #[test]
    fn validator_catches_injected_duplicate() {
        let mut ps = generate(&cfg(DEFAULT_ALPHABET, 8, 5, 100, 1)).unwrap();
        ps.pairs[1].0 = ps.pairs[0].0.clone();
        let r = validate_topology(&ps);
        assert!(!r.passed());
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DuplicateSource { occurrences: 2, .. })));
        assert!(r.violations[0].to_string().contains("source uniqueness"));
    }

    #[test]
    fn validator_catches_broken_support_and_format() {
        let mut ps = generate(&cfg(DEFAULT_ALPHABET, 8, 5, 100, 1)).unwrap();
        ps.pairs[0].1 = "zzzzzzzz".into();
        let r = validate_topology(&ps);
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::TargetMultiplicity { found: 4, .. })));

        let mut ps = generate(&cfg(DEFAULT_ALPHABET, 8, 1, 10, 1)).unwrap();
        ps.pairs[3].0 = "ABC".into();
        assert!(validate_topology(&ps)
            .violations
            .iter()
            .any(|v| matches!(v, Violation::MalformedString { .. })));

        let mut ps = generate(&cfg(DEFAULT_ALPHABET, 8, 1, 10, 1)).unwrap();
        ps.pairs.pop();
        assert!(!validate_topology(&ps).passed());
    }

    #[test]
    fn overlap_is_reported_not_rejected() {
        // With a two-letter alphabet of length-1 strings both sides must overlap.
        let ps = generate_bijective(&cfg("ab", 1, 1, 2, 5)).unwrap();
        let r = validate_topology(&ps);
        assert!(r.passed());
        assert_eq!(r.ab_overlap, 2);
    }

    #[test]
    fn tsv_round_trip() {
        let ps = generate(&cfg(DEFAULT_ALPHABET, 8, 5, 50, 77)).unwrap();
        let mut buf = Vec::new();
        ps.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 51);
        assert!(text.lines().nth(1).unwrap().contains('\t'));
        assert_eq!(PairSet::read_tsv(&buf[..]).unwrap(), ps);
    }

    #[test]
    fn uniformity_holds_on_generated_data() {
        for k in [1, 5, 8] {
            let ps = generate(&MappingConfig::new(StringSpec::default(), k, 4000, 21)).unwrap();
            let u = check_uniformity(&ps, 5.0);
            assert!(u.passed(), "K={k}: {u:?}");
        }
        let skewed = PairSet {
            pairs: (0..200).map(|i| ("aaaaaaaa".to_string(), format!("{:08}", i))).collect(),
            config: cfg(DEFAULT_ALPHABET, 8, 1, 200, 0),
        };
        assert!(!check_uniformity(&skewed, 5.0).passed());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generated_sets_always_validate(seed in any::<u64>(), k in 1usize..9, m in 1usize..40) {
            let c = MappingConfig::new(StringSpec::new("abcdef", 4).unwrap(), k, k * m, seed);
            let ps = generate(&c).unwrap();
            prop_assert!(validate_topology(&ps).passed());
            prop_assert_eq!(ps, generate(&c).unwrap());
        }
    }
}
