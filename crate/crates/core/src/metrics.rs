//! Entropy floors, excess loss and the counting oracle that attains the floor.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapgen::PairSet;
use crate::textcodec::Direction;

/// Slack allowed below the floor before an observed loss is flagged.
pub const EXCESS_TOL: f64 = 0.02;

/// `0` for the deterministic forward map, `ln K` for the inverse.
pub fn floor(direction: Direction, k: usize) -> f64 {
    match direction {
        Direction::Forward => 0.0,
        Direction::Inverse => (k as f64).ln(),
    }
}

pub fn excess(observed: f64, floor: f64) -> f64 {
    observed - floor
}

pub fn directional_gap(excess_inverse: f64, excess_forward: f64) -> f64 {
    excess_inverse - excess_forward
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorSpec {
    pub direction: Direction,
    pub k: usize,
    pub floor_nats: f64,
}

impl FloorSpec {
    pub fn new(direction: Direction, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("branching factor must be at least 1"));
        }
        Ok(FloorSpec {
            direction,
            k,
            floor_nats: floor(direction, k),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub observed_nats: f64,
    pub floor_nats: f64,
    pub excess_nats: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_nats: Option<f64>,
}

impl MetricsRecord {
    pub fn new(observed: f64, floor: &FloorSpec) -> Self {
        MetricsRecord {
            observed_nats: observed,
            floor_nats: floor.floor_nats,
            excess_nats: excess(observed, floor.floor_nats),
            gap_nats: None,
        }
    }

    /// Excess more negative than the tolerance.
    pub fn below_floor(&self, tol: f64) -> bool {
        self.excess_nats < -tol
    }

    /// Attaches the gap of an inverse record against its forward partner.
    pub fn with_gap(mut self, forward: &MetricsRecord) -> Self {
        self.gap_nats = Some(directional_gap(self.excess_nats, forward.excess_nats));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleLoss {
    /// Mean of `-ln p*(target | source)` over pairs.
    pub per_sequence: f64,
    /// Mean over all target characters of the prefix-conditional cross-entropy.
    pub per_token: f64,
}

/// Loss of the lookup table that assigns each observed target of a source
/// probability `1 / multiplicity`, scored character by character through the
/// induced prefix-conditional distribution.
pub fn tabular_oracle_loss(ps: &PairSet, direction: Direction) -> Result<OracleLoss> {
    if ps.pairs.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let mut table: HashMap<&str, Vec<&str>> = HashMap::new();
    for (a, b) in &ps.pairs {
        let (src, tgt) = direction.orient(a, b);
        table.entry(src).or_default().push(tgt);
    }
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for (a, b) in &ps.pairs {
        let (src, tgt) = direction.orient(a, b);
        let cands = &table[src];
        let target: Vec<char> = tgt.chars().collect();
        let mut matching: Vec<Vec<char>> = cands.iter().map(|c| c.chars().collect()).collect();
        for (j, &ch) in target.iter().enumerate() {
            let before = matching.len();
            matching.retain(|c| c.get(j) == Some(&ch));
            total -= (matching.len() as f64 / before as f64).ln();
            tokens += 1;
        }
    }
    Ok(OracleLoss {
        per_sequence: total / ps.pairs.len() as f64,
        per_token: total / tokens as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapgen::{generate, MappingConfig, StringSpec};
    use approx::assert_relative_eq;

    #[test]
    fn floor_values() {
        assert_eq!(floor(Direction::Forward, 8), 0.0);
        assert_eq!(floor(Direction::Inverse, 1), 0.0);
        assert_eq!(format!("{:.2}", floor(Direction::Inverse, 5)), "1.61");
        assert_eq!(format!("{:.2}", floor(Direction::Inverse, 8)), "2.08");
        assert_relative_eq!(floor(Direction::Inverse, 5), 1.6094379124341003, max_relative = 1e-15);
        assert!(FloorSpec::new(Direction::Inverse, 0).is_err());
    }

    #[test]
    fn excess_and_gap_arithmetic() {
        assert_relative_eq!(excess(3.08, 1.61), 1.47, epsilon = 1e-12);
        assert_relative_eq!(directional_gap(2.07, 0.91), 1.16, epsilon = 1e-12);
        assert_eq!(directional_gap(0.4, 0.4), 0.0);
        let f = MetricsRecord::new(0.5, &FloorSpec::new(Direction::Forward, 5).unwrap());
        let i = MetricsRecord::new(2.0, &FloorSpec::new(Direction::Inverse, 5).unwrap()).with_gap(&f);
        assert_relative_eq!(i.gap_nats.unwrap(), 2.0 - 5f64.ln() - 0.5, epsilon = 1e-15);
        let low = MetricsRecord::new(1.5, &FloorSpec::new(Direction::Inverse, 5).unwrap());
        assert!(low.below_floor(EXCESS_TOL));
        assert!(!i.below_floor(EXCESS_TOL));
    }

    #[test]
    fn oracle_matches_floors() {
        for k in [1usize, 5, 8] {
            let ps = generate(&MappingConfig::new(StringSpec::default(), k, 1000, 21)).unwrap();
            let fwd = tabular_oracle_loss(&ps, Direction::Forward).unwrap();
            assert_eq!(fwd.per_sequence, 0.0);
            assert_eq!(fwd.per_token, 0.0);
            let inv = tabular_oracle_loss(&ps, Direction::Inverse).unwrap();
            assert!((inv.per_sequence - floor(Direction::Inverse, k)).abs() <= 1e-9);
            assert!((inv.per_token - floor(Direction::Inverse, k) / 8.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn oracle_handles_shared_prefixes() {
        // Pre-images "aa" and "ab" share their first character.
        let spec = StringSpec::new("abc", 2).unwrap();
        let cfg = MappingConfig::new(spec, 2, 2, 0);
        let ps = PairSet {
            pairs: vec![("aa".into(), "cc".into()), ("ab".into(), "cc".into())],
            config: cfg,
        };
        let inv = tabular_oracle_loss(&ps, Direction::Inverse).unwrap();
        assert_relative_eq!(inv.per_sequence, 2f64.ln(), epsilon = 1e-15);
        // first character is certain, second carries ln 2
        assert_relative_eq!(inv.per_token, 2f64.ln() / 2.0, epsilon = 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn excess_and_gap_are_differences(obs_f in 0.0f64..10.0, obs_i in 0.0f64..10.0, k in 1usize..64) {
            let f = MetricsRecord::new(obs_f, &FloorSpec::new(Direction::Forward, k).unwrap());
            let i = MetricsRecord::new(obs_i, &FloorSpec::new(Direction::Inverse, k).unwrap()).with_gap(&f);
            proptest::prop_assert_eq!(f.excess_nats, obs_f);
            proptest::prop_assert_eq!(i.excess_nats, obs_i - (k as f64).ln());
            proptest::prop_assert_eq!(i.gap_nats, Some(i.excess_nats - f.excess_nats));
        }

        #[test]
        fn oracle_attains_floor(k in 1usize..9, m in 1usize..40, seed in 0u64..1000) {
            let ps = generate(&MappingConfig::new(StringSpec::default(), k, k * m, seed)).unwrap();
            let inv = tabular_oracle_loss(&ps, Direction::Inverse).unwrap();
            proptest::prop_assert!((inv.per_sequence - floor(Direction::Inverse, k)).abs() < 1e-9);
            proptest::prop_assert_eq!(tabular_oracle_loss(&ps, Direction::Forward).unwrap().per_sequence, 0.0);
        }
    }
}
