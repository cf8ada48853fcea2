//! Ground-truth stability checks for assignments and an exhaustive
//! enumerator of stable assignments on small instances.
//!
//! Classical stability: no node strictly prefers some relay whose occupant
//! values that relay no more than the node does. Ambiguous stability treats
//! differences within a tolerance `c` as indistinguishable.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{relay_label, resolve_collisions, Assignment, RelayId, RewardMatrix, SnId};

/// Largest dimension accepted by [`enumerate_stable`].
pub const ENUMERATION_LIMIT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arrangement {
    /// Classical stable arrangement.
    Csa,
    /// Ambiguous stable arrangement.
    Asa,
}

impl FromStr for Arrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CSA" => Ok(Arrangement::Csa),
            "ASA" => Ok(Arrangement::Asa),
            _ => Err(Error::argument(format!(
                "unknown arrangement `{s}`, expected CSA or ASA"
            ))),
        }
    }
}

impl fmt::Display for Arrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arrangement::Csa => "CSA",
            Arrangement::Asa => "ASA",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixUsed {
    TrueMu,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WitnessReason {
    /// The node shares its relay with another node.
    Collision,
    /// The desired relay has no occupant.
    Unoccupied,
    /// No occupant of the desired relay can turn the node away.
    Occupant(SnId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Witness {
    pub sn: SnId,
    pub relay: RelayId,
    pub reason: WitnessReason,
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (sn, relay) = (self.sn + 1, relay_label(self.relay));
        match self.reason {
            WitnessReason::Collision => write!(f, "SN {sn} collides on relay {relay}"),
            WitnessReason::Unoccupied => write!(f, "SN {sn} prefers unoccupied relay {relay}"),
            WitnessReason::Occupant(o) => write!(
                f,
                "SN {sn} prefers relay {relay}, occupant SN {} cannot block",
                o + 1
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub stable: bool,
    pub witnesses: Vec<Witness>,
    pub definition: Arrangement,
    pub c: Option<f64>,
    pub matrix_used: MatrixUsed,
}

impl StabilityReport {
    fn new(definition: Arrangement, c: Option<f64>, witnesses: Vec<Witness>) -> Self {
        StabilityReport {
            stable: witnesses.is_empty(),
            witnesses,
            definition,
            c,
            matrix_used: MatrixUsed::TrueMu,
        }
    }

    pub fn with_matrix(mut self, used: MatrixUsed) -> Self {
        self.matrix_used = used;
        self
    }
}

impl fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "definition = {}", self.definition)?;
        if let Some(c) = self.c {
            writeln!(f, "c = {c}")?;
        }
        writeln!(
            f,
            "matrix = {}",
            match self.matrix_used {
                MatrixUsed::TrueMu => "true-mu",
                MatrixUsed::Estimated => "estimated",
            }
        )?;
        writeln!(f, "stable = {}", self.stable)?;
        write!(f, "witnesses = {}", self.witnesses.len())?;
        for w in &self.witnesses {
            write!(f, "\nwitness = {w}")?;
        }
        Ok(())
    }
}

fn collision_witnesses(assignment: &Assignment) -> Vec<Witness> {
    resolve_collisions(assignment)
        .into_iter()
        .map(|sn| Witness {
            sn,
            relay: assignment
                .relay_of(sn)
                .expect("colliding nodes hold a relay"),
            reason: WitnessReason::Collision,
        })
        .collect()
}

/// Classical stability against `mu`. Unassigned nodes value their current
/// position at minus infinity.
pub fn check_csa(assignment: &Assignment, mu: &RewardMatrix) -> Result<StabilityReport> {
    assignment.validate_for(mu)?;
    let mut witnesses = collision_witnesses(assignment);
    for s in 0..mu.num_sns() {
        let current = assignment
            .relay_of(s)
            .map_or(f64::NEG_INFINITY, |r| mu.get(s, r));
        for r in 0..mu.num_relays() {
            if Some(r) == assignment.relay_of(s) || mu.get(s, r) <= current {
                continue;
            }
            let mut holders = assignment.holders(r).filter(|&o| o != s).peekable();
            let Some(&first) = holders.peek() else {
                witnesses.push(Witness {
                    sn: s,
                    relay: r,
                    reason: WitnessReason::Unoccupied,
                });
                continue;
            };
            if !holders.any(|o| mu.get(o, r) > mu.get(s, r)) {
                witnesses.push(Witness {
                    sn: s,
                    relay: r,
                    reason: WitnessReason::Occupant(first),
                });
            }
        }
    }
    Ok(StabilityReport::new(Arrangement::Csa, None, witnesses))
}

/// Ambiguous stability against `mu` with tolerance `c`. All differences are
/// absolute. An unassigned node is in the ambiguity zone for every relay and
/// can only be blocked by an occupant that values the relay more than `c`
/// apart from it.
pub fn check_asa(assignment: &Assignment, mu: &RewardMatrix, c: f64) -> Result<StabilityReport> {
    if !(c >= 0.0) {
        return Err(Error::argument(format!(
            "ambiguity tolerance c = {c} must be >= 0"
        )));
    }
    assignment.validate_for(mu)?;
    let mut witnesses = collision_witnesses(assignment);
    for s in 0..mu.num_sns() {
        let own = assignment.relay_of(s);
        for r in 0..mu.num_relays() {
            if Some(r) == own {
                continue;
            }
            let ambiguous = match own {
                Some(g) => (mu.get(s, r) - mu.get(s, g)).abs() < c,
                None => true,
            };
            if !ambiguous {
                continue;
            }
            let mut holders = assignment.holders(r).filter(|&o| o != s).peekable();
            let Some(&first) = holders.peek() else {
                witnesses.push(Witness {
                    sn: s,
                    relay: r,
                    reason: WitnessReason::Unoccupied,
                });
                continue;
            };
            let blocks = |o: SnId| {
                let indifferent_holder =
                    own.is_some_and(|g| (mu.get(o, g) - mu.get(o, r)).abs() > c);
                indifferent_holder || (mu.get(o, r) - mu.get(s, r)).abs() > c
            };
            if !holders.any(blocks) {
                witnesses.push(Witness {
                    sn: s,
                    relay: r,
                    reason: WitnessReason::Occupant(first),
                });
            }
        }
    }
    Ok(StabilityReport::new(Arrangement::Asa, Some(c), witnesses))
}

pub fn check(
    assignment: &Assignment,
    mu: &RewardMatrix,
    definition: Arrangement,
    c: f64,
) -> Result<StabilityReport> {
    match definition {
        Arrangement::Csa => check_csa(assignment, mu),
        Arrangement::Asa => check_asa(assignment, mu, c),
    }
}

/// Every collision-free assignment that places `min(K, M)` nodes, in
/// lexicographic order of the relay vector.
pub fn maximal_assignments(num_sns: usize, num_relays: usize) -> Vec<Assignment> {
    let target = num_sns.min(num_relays);
    let mut out = Vec::new();
    let mut current = vec![None; num_sns];
    let mut used = vec![false; num_relays];
    fn recurse(
        s: usize,
        placed: usize,
        target: usize,
        current: &mut Vec<Option<RelayId>>,
        used: &mut Vec<bool>,
        out: &mut Vec<Assignment>,
    ) {
        let n = current.len();
        if s == n {
            if placed == target {
                out.push(Assignment::from_relays(current.clone()));
            }
            return;
        }
        if placed + (n - s) > target {
            recurse(s + 1, placed, target, current, used, out);
        }
        if placed < target {
            for r in 0..used.len() {
                if !used[r] {
                    used[r] = true;
                    current[s] = Some(r);
                    recurse(s + 1, placed + 1, target, current, used, out);
                    current[s] = None;
                    used[r] = false;
                }
            }
        }
    }
    recurse(0, 0, target, &mut current, &mut used, &mut out);
    out
}

/// All maximal collision-free assignments passing the requested check.
pub fn enumerate_stable(
    mu: &RewardMatrix,
    definition: Arrangement,
    c: f64,
) -> Result<Vec<Assignment>> {
    if mu.num_sns() > ENUMERATION_LIMIT || mu.num_relays() > ENUMERATION_LIMIT {
        return Err(Error::SizeGuard(format!(
            "{}x{} exceeds the {ENUMERATION_LIMIT}x{ENUMERATION_LIMIT} limit",
            mu.num_sns(),
            mu.num_relays()
        )));
    }
    let mut stable = Vec::new();
    for f in maximal_assignments(mu.num_sns(), mu.num_relays()) {
        if check(&f, mu, definition, c)?.stable {
            stable.push(f);
        }
    }
    Ok(stable)
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    /// Matrices whose entries are pairwise distinct.
    fn distinct_matrix(k: usize, m: usize) -> impl Strategy<Value = RewardMatrix> {
        Just((0..k * m).collect::<Vec<usize>>())
            .prop_shuffle()
            .prop_flat_map(move |ranks| {
                proptest::collection::vec(0.0f64..1.0, k * m).prop_map(move |jitter| {
                    let n = (k * m) as f64;
                    let data = ranks
                        .iter()
                        .zip(&jitter)
                        .map(|(&rank, j)| (rank as f64 + 0.5 + 0.4 * (j - 0.5)) / n)
                        .collect();
                    RewardMatrix::from_flat(k, m, data).unwrap()
                })
            })
    }

    fn sized() -> impl Strategy<Value = RewardMatrix> {
        (1usize..5, 1usize..5).prop_flat_map(|(k, m)| distinct_matrix(k, m))
    }

    proptest! {
        #[test]
        fn classical_stable_assignment_exists(mu in sized()) {
            prop_assert!(!enumerate_stable(&mu, Arrangement::Csa, 0.0).unwrap().is_empty());
        }

        #[test]
        fn csa_depends_only_on_order(mu in sized()) {
            let cubed = RewardMatrix::from_flat(
                mu.num_sns(),
                mu.num_relays(),
                (0..mu.num_sns())
                    .flat_map(|s| mu.row(s).iter().map(|p| p.powi(3)).collect::<Vec<_>>())
                    .collect(),
            ).unwrap();
            for f in maximal_assignments(mu.num_sns(), mu.num_relays()) {
                prop_assert_eq!(
                    check_csa(&f, &mu).unwrap().stable,
                    check_csa(&f, &cubed).unwrap().stable
                );
            }
        }

        #[test]
        fn csa_witnesses_are_strict_improvements(mu in sized()) {
            for f in maximal_assignments(mu.num_sns(), mu.num_relays()) {
                for w in check_csa(&f, &mu).unwrap().witnesses {
                    let now = f.relay_of(w.sn).map_or(f64::NEG_INFINITY, |g| mu.get(w.sn, g));
                    prop_assert!(mu.get(w.sn, w.relay) > now);
                    let mut moved = f.clone();
                    moved.set(w.sn, Some(w.relay));
                    let after = mu.get(w.sn, moved.relay_of(w.sn).unwrap());
                    prop_assert!(after > now);
                }
            }
        }

        #[test]
        fn report_is_stable_iff_no_witnesses(mu in sized(), c in 0.0f64..0.5) {
            for f in maximal_assignments(mu.num_sns(), mu.num_relays()) {
                for report in [check_csa(&f, &mu).unwrap(), check_asa(&f, &mu, c).unwrap()] {
                    prop_assert_eq!(report.stable, report.witnesses.is_empty());
                }
            }
        }
    }
}
