//! Source nodes, relays, ground-truth success probabilities and the
//! collision-aware throughput functional.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Index of a source node (0-based).
pub type SnId = usize;
/// Index of a relay (0-based). Codes at or beyond the real relay count are
/// virtual relays.
pub type RelayId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub num_sns: usize,
    pub num_relays: usize,
    pub seed: u64,
    /// Accept more relays than source nodes. Outside the modelled regime.
    pub allow_more_relays: bool,
}

impl NetworkConfig {
    pub fn new(num_sns: usize, num_relays: usize, seed: u64) -> Self {
        NetworkConfig {
            num_sns,
            num_relays,
            seed,
            allow_more_relays: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sns == 0 {
            return Err(Error::config("network.num_sns must be at least 1"));
        }
        if self.num_relays == 0 {
            return Err(Error::config("network.num_relays must be at least 1"));
        }
        if self.num_relays > self.num_sns {
            if !self.allow_more_relays {
                return Err(Error::config(format!(
                    "network.num_relays ({}) exceeds network.num_sns ({}); set allow_more_relays to run out of model",
                    self.num_relays, self.num_sns
                )));
            }
            log::warn!(
                "running out of model: {} relays for {} source nodes",
                self.num_relays,
                self.num_sns
            );
        }
        Ok(())
    }
}

/// Bernoulli success probabilities for every source node / relay pair,
/// stored row-major (one row per source node).
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMatrix {
    num_sns: usize,
    num_relays: usize,
    data: Vec<f64>,
}

impl RewardMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_sns = rows.len();
        if num_sns == 0 {
            return Err(Error::config("reward matrix needs at least one row"));
        }
        let num_relays = rows[0].len();
        if num_relays == 0 {
            return Err(Error::config("reward matrix needs at least one column"));
        }
        let mut data = Vec::with_capacity(num_sns * num_relays);
        for (s, row) in rows.into_iter().enumerate() {
            if row.len() != num_relays {
                return Err(Error::config(format!(
                    "reward matrix row {} has {} entries, expected {}",
                    s,
                    row.len(),
                    num_relays
                )));
            }
            data.extend(row);
        }
        Self::from_flat(num_sns, num_relays, data)
    }

    pub fn from_flat(num_sns: usize, num_relays: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_sns * num_relays {
            return Err(Error::config(format!(
                "reward matrix data has {} entries, expected {}x{}",
                data.len(),
                num_sns,
                num_relays
            )));
        }
        if let Some(bad) = data.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config(format!(
                "reward matrix entry ({}, {}) = {} is not a probability",
                bad / num_relays,
                bad % num_relays,
                data[bad]
            )));
        }
        Ok(RewardMatrix {
            num_sns,
            num_relays,
            data,
        })
    }

    /// Entries i.i.d. uniform on `[lo, hi]`.
    pub fn uniform_random<R: Rng + ?Sized>(
        num_sns: usize,
        num_relays: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_interval(lo, hi)?;
        let data = (0..num_sns * num_relays)
            .map(|_| rng.random_range(lo..=hi))
            .collect();
        Self::from_flat(num_sns, num_relays, data)
    }

    /// Rows whose sorted entries are at least `gap` apart, each row
    /// independently shuffled across relays.
    pub fn separated_random<R: Rng + ?Sized>(
        num_sns: usize,
        num_relays: usize,
        gap: f64,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_interval(lo, hi)?;
        let slack = (hi - lo) - gap * (num_relays.saturating_sub(1)) as f64;
        if gap < 0.0 || slack < 0.0 {
            return Err(Error::config(format!(
                "cannot fit {num_relays} entries with gap {gap} into [{lo}, {hi}]"
            )));
        }
        let mut data = Vec::with_capacity(num_sns * num_relays);
        for _ in 0..num_sns {
            let mut offsets: Vec<f64> = (0..num_relays)
                .map(|_| rng.random_range(0.0..=slack))
                .collect();
            offsets.sort_by(f64::total_cmp);
            let mut row: Vec<f64> = offsets
                .iter()
                .enumerate()
                .map(|(i, o)| (lo + o + gap * i as f64).min(hi))
                .collect();
            row.shuffle(rng);
            data.extend(row);
        }
        Self::from_flat(num_sns, num_relays, data)
    }

    pub fn num_sns(&self) -> usize {
        self.num_sns
    }

    pub fn num_relays(&self) -> usize {
        self.num_relays
    }

    #[inline]
    pub fn get(&self, sn: SnId, relay: RelayId) -> f64 {
        assert!(sn < self.num_sns && relay < self.num_relays);
        self.data[sn * self.num_relays + relay]
    }

    pub fn set(&mut self, sn: SnId, relay: RelayId, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::argument(format!("{value} is not a probability")));
        }
        self.check_index(sn, relay)?;
        self.data[sn * self.num_relays + relay] = value;
        Ok(())
    }

    pub fn row(&self, sn: SnId) -> &[f64] {
        &self.data[sn * self.num_relays..(sn + 1) * self.num_relays]
    }

    /// Largest entry of each row summed over rows.
    pub fn row_max_sum(&self) -> f64 {
        (0..self.num_sns)
            .map(|s| self.row(s).iter().cloned().fold(f64::MIN, f64::max))
            .sum()
    }

    /// New matrix whose column `perm[r]` holds the old column `r`.
    pub fn permute_relays(&self, perm: &[RelayId]) -> Result<Self> {
        check_permutation(perm, self.num_relays)?;
        let mut data = vec![0.0; self.data.len()];
        for s in 0..self.num_sns {
            for (r, &to) in perm.iter().enumerate() {
                data[s * self.num_relays + to] = self.get(s, r);
            }
        }
        Self::from_flat(self.num_sns, self.num_relays, data)
    }

    fn check_index(&self, sn: SnId, relay: RelayId) -> Result<()> {
        if sn >= self.num_sns || relay >= self.num_relays {
            return Err(Error::argument(format!(
                "index (sn {sn}, relay {relay}) outside {}x{} matrix",
                self.num_sns, self.num_relays
            )));
        }
        Ok(())
    }

    /// Parses the plain-text grid format: a `K M` header line followed by
    /// `K` lines of `M` reals. Blank lines and `#` comment lines are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::format(origin, 1, "missing `K M` header"))?;
        let dims: Vec<&str> = header.split_whitespace().collect();
        if dims.len() != 2 {
            return Err(Error::format(origin, hline, "header must be `K M`"));
        }
        let parse_dim = |tok: &str| -> Result<usize> {
            match tok.parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(Error::format(
                    origin,
                    hline,
                    format!("`{tok}` is not a positive dimension"),
                )),
            }
        };
        let (num_sns, num_relays) = (parse_dim(dims[0])?, parse_dim(dims[1])?);

        let mut data = Vec::with_capacity(num_sns * num_relays);
        let mut last_line = hline;
        for _ in 0..num_sns {
            let (lineno, line) = lines.next().ok_or_else(|| {
                Error::format(origin, last_line + 1, format!("expected {num_sns} rows"))
            })?;
            last_line = lineno;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::format(origin, lineno, format!("`{tok}` is not a number"))
                    })
                })
                .collect::<Result<_>>()?;
            if row.len() != num_relays {
                return Err(Error::format(
                    origin,
                    lineno,
                    format!("expected {num_relays} values, found {}", row.len()),
                ));
            }
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::format(
                    origin,
                    lineno,
                    format!("{p} is not a probability"),
                ));
            }
            data.extend(row);
        }
        if let Some((lineno, _)) = lines.next() {
            return Err(Error::format(origin, lineno, "unexpected trailing row"));
        }
        Self::from_flat(num_sns, num_relays, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for RewardMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", self.num_sns, self.num_relays)?;
        for s in 0..self.num_sns {
            let row: Vec<String> = self.row(s).iter().map(|p| p.to_string()).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::config(format!(
            "probability interval [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
        )));
    }
    Ok(())
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::argument(format!(
            "permutation of length {} for {n} relays",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::argument(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

/// Partial map from source nodes to relays. Several nodes may share a relay;
/// that is a collision, not an invalid state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment {
    relay_of: Vec<Option<RelayId>>,
}

impl Assignment {
    pub fn empty(num_sns: usize) -> Self {
        Assignment {
            relay_of: vec![None; num_sns],
        }
    }

    pub fn from_relays(relay_of: Vec<Option<RelayId>>) -> Self {
        Assignment { relay_of }
    }

    pub fn num_sns(&self) -> usize {
        self.relay_of.len()
    }

    pub fn relay_of(&self, sn: SnId) -> Option<RelayId> {
        self.relay_of[sn]
    }

    pub fn set(&mut self, sn: SnId, relay: Option<RelayId>) {
        self.relay_of[sn] = relay;
    }

    pub fn as_slice(&self) -> &[Option<RelayId>] {
        &self.relay_of
    }

    /// Source nodes holding `relay`, ascending.
    pub fn holders(&self, relay: RelayId) -> impl Iterator<Item = SnId> + '_ {
        self.relay_of
            .iter()
            .enumerate()
            .filter(move |(_, r)| **r == Some(relay))
            .map(|(s, _)| s)
    }

    pub fn is_collision_free(&self) -> bool {
        resolve_collisions(self).is_empty()
    }

    pub fn assigned_count(&self) -> usize {
        self.relay_of.iter().filter(|r| r.is_some()).count()
    }

    pub fn validate_for(&self, mu: &RewardMatrix) -> Result<()> {
        if self.num_sns() != mu.num_sns() {
            return Err(Error::config(format!(
                "assignment covers {} source nodes but the matrix has {}",
                self.num_sns(),
                mu.num_sns()
            )));
        }
        if let Some((s, r)) = self
            .relay_of
            .iter()
            .enumerate()
            .find_map(|(s, r)| r.filter(|&r| r >= mu.num_relays()).map(|r| (s, r)))
        {
            return Err(Error::config(format!(
                "source node {} is assigned to relay {} but the matrix has {} relays",
                s + 1,
                relay_label(r),
                mu.num_relays()
            )));
        }
        Ok(())
    }

    /// Parses literals such as `1:A,2:B`. Source nodes are 1-based; relays
    /// are letters (`A` is the first relay) or 1-based integers. Nodes not
    /// mentioned stay unassigned.
    pub fn parse_literal(literal: &str, num_sns: usize) -> Result<Self> {
        let mut assignment = Assignment::empty(num_sns);
        let mut seen = BTreeSet::new();
        for pair in literal.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (sn, relay) = pair
                .split_once(':')
                .ok_or_else(|| Error::argument(format!("`{pair}` is not of the form SN:RELAY")))?;
            let sn: usize = sn
                .trim()
                .parse()
                .ok()
                .filter(|&s| s >= 1 && s <= num_sns)
                .ok_or_else(|| {
                    Error::argument(format!("`{sn}` is not a source node in 1..={num_sns}"))
                })?;
            if !seen.insert(sn) {
                return Err(Error::argument(format!("source node {sn} assigned twice")));
            }
            let relay = parse_relay_label(relay.trim())
                .ok_or_else(|| Error::argument(format!("`{relay}` is not a relay label")))?;
            assignment.set(sn - 1, Some(relay));
        }
        Ok(assignment)
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pairs: Vec<String> = self
            .relay_of
            .iter()
            .enumerate()
            .filter_map(|(s, r)| r.map(|r| format!("{}:{}", s + 1, relay_label(r))))
            .collect();
        if pairs.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&pairs.join(","))
        }
    }
}

/// Spreadsheet-style relay label: 0 → `A`, 25 → `Z`, 26 → `AA`.
pub fn relay_label(relay: RelayId) -> String {
    let mut n = relay + 1;
    let mut out = Vec::new();
    while n > 0 {
        let rem = (n - 1) % 26;
        out.push(b'A' + rem as u8);
        n = (n - 1) / 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

pub fn parse_relay_label(label: &str) -> Option<RelayId> {
    if label.is_empty() {
        return None;
    }
    if let Ok(n) = label.parse::<usize>() {
        return n.checked_sub(1);
    }
    let mut n = 0usize;
    for c in label.chars() {
        if !c.is_ascii_alphabetic() {
            return None;
        }
        n = n
            .checked_mul(26)?
            .checked_add((c.to_ascii_uppercase() as u8 - b'A') as usize + 1)?;
    }
    Some(n - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransmissionOutcome {
    pub sn: SnId,
    pub relay: RelayId,
    pub success: bool,
    pub slot: u64,
}

/// Total expected throughput: each assigned source node contributes its
/// success probability unless another node shares its relay.
pub fn expected_throughput(assignment: &Assignment, mu: &RewardMatrix) -> Result<f64> {
    assignment.validate_for(mu)?;
    let mut load: BTreeMap<RelayId, usize> = BTreeMap::new();
    for r in assignment.as_slice().iter().flatten() {
        *load.entry(*r).or_default() += 1;
    }
    Ok(assignment
        .as_slice()
        .iter()
        .enumerate()
        .filter_map(|(s, r)| r.map(|r| (s, r)))
        .filter(|(_, r)| load[r] == 1)
        .map(|(s, r)| mu.get(s, r))
        .sum())
}

/// One Bernoulli draw for `sn` over `relay`. Consumes exactly one value from
/// `rng` regardless of the outcome.
pub fn sample_transmission<R: Rng + ?Sized>(
    sn: SnId,
    relay: RelayId,
    mu: &RewardMatrix,
    slot: u64,
    rng: &mut R,
) -> Result<TransmissionOutcome> {
    mu.check_index(sn, relay)?;
    let u: f64 = rng.random();
    Ok(TransmissionOutcome {
        sn,
        relay,
        success: u < mu.get(sn, relay),
        slot,
    })
}

/// Source nodes whose transmissions are lost because they share a relay.
pub fn resolve_collisions(assignment: &Assignment) -> BTreeSet<SnId> {
    let mut by_relay: BTreeMap<RelayId, Vec<SnId>> = BTreeMap::new();
    for (s, r) in assignment.as_slice().iter().enumerate() {
        if let Some(r) = r {
            by_relay.entry(*r).or_default().push(s);
        }
    }
    by_relay
        .into_values()
        .filter(|holders| holders.len() > 1)
        .flatten()
        .collect()
}
