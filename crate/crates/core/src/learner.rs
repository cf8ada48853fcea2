//! Per-source-node bandit learner. Relays are addressed by binary codes;
//! each bit is decided by comparing one signal level against a threshold
//! stored in a complete binary tree, and every observed transmission nudges
//! the thresholds on the selected path toward or away from that choice.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{sample_transmission, RelayId, RewardMatrix, SnId, TransmissionOutcome};
use crate::signal::SignalSource;

/// A relay code `B1 B2 ... Bm`, with `B1` the most significant bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelayCode(pub u32);

impl RelayCode {
    /// Bit `B_{depth+1}` of an `bits`-wide code.
    pub fn bit(self, depth: u32, bits: u32) -> u8 {
        ((self.0 >> (bits - 1 - depth)) & 1) as u8
    }

    /// The `depth` leading bits, as an integer.
    pub fn prefix(self, depth: u32, bits: u32) -> u32 {
        if depth == 0 {
            0
        } else {
            self.0 >> (bits - depth)
        }
    }

    pub fn to_bit_string(self, bits: u32) -> String {
        (0..bits)
            .map(|d| if self.bit(d, bits) == 1 { '1' } else { '0' })
            .collect()
    }
}

/// Binary coding of `M` real relays into `2^m` codes; codes `M..2^m` are
/// virtual relays that never deliver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayCoding {
    bits: u32,
    num_real: usize,
}

impl RelayCoding {
    pub fn new(num_real: usize) -> Result<Self> {
        if num_real == 0 {
            return Err(Error::config("relay coding needs at least one relay"));
        }
        if num_real > 1 << 20 {
            return Err(Error::config(format!(
                "{num_real} relays is too many to code"
            )));
        }
        let bits = (usize::BITS - (num_real - 1).leading_zeros()).max(1);
        Ok(RelayCoding { bits, num_real })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn num_real(&self) -> usize {
        self.num_real
    }

    pub fn num_codes(&self) -> usize {
        1 << self.bits
    }

    pub fn num_virtual(&self) -> usize {
        self.num_codes() - self.num_real
    }

    pub fn code_of_relay(&self, relay: RelayId) -> RelayCode {
        assert!(relay < self.num_real, "relay {relay} is not real");
        RelayCode(relay as u32)
    }

    /// `None` for virtual relays.
    pub fn relay_of_code(&self, code: RelayCode) -> Option<RelayId> {
        let r = code.0 as usize;
        (r < self.num_real).then_some(r)
    }
}

/// Index of the tree node deciding bit `depth` after `prefix`.
#[inline]
pub fn node_index(depth: u32, prefix: u32) -> usize {
    (1usize << depth) - 1 + prefix as usize
}

/// Decision thresholds for every bit position and prefix, laid out
/// breadth-first: `2^m - 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTree {
    bits: u32,
    thresholds: Vec<f64>,
}

impl ThresholdTree {
    pub fn new(bits: u32) -> Self {
        Self::filled(bits, 0.0)
    }

    pub fn filled(bits: u32, value: f64) -> Self {
        assert!(bits >= 1);
        ThresholdTree {
            bits,
            thresholds: vec![value; (1 << bits) - 1],
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn node_count(&self) -> usize {
        self.thresholds.len()
    }

    pub fn threshold(&self, depth: u32, prefix: u32) -> f64 {
        self.thresholds[node_index(depth, prefix)]
    }

    pub fn set_threshold(&mut self, depth: u32, prefix: u32, value: f64) {
        self.thresholds[node_index(depth, prefix)] = value;
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// `(node, bit)` pairs from the root to the leaf selecting `code`.
    pub fn path(&self, code: RelayCode) -> impl Iterator<Item = (usize, u8)> + '_ {
        let bits = self.bits;
        (0..bits).map(move |d| (node_index(d, code.prefix(d, bits)), code.bit(d, bits)))
    }
}

/// Draws one level per bit; a bit is 1 when the level strictly exceeds the
/// threshold on the current path.
pub fn select_relay(tree: &ThresholdTree, source: &mut SignalSource) -> Result<RelayCode> {
    let mut prefix = 0u32;
    for depth in 0..tree.bits {
        let level = source.next_level()?;
        let bit = (level > tree.threshold(depth, prefix)) as u32;
        prefix = (prefix << 1) | bit;
    }
    Ok(RelayCode(prefix))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoMode {
    Fixed,
    Flexible,
}

impl FromStr for RhoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(RhoMode::Fixed),
            "flexible" => Ok(RhoMode::Flexible),
            _ => Err(Error::argument(format!("unknown rho mode `{s}`"))),
        }
    }
}

impl fmt::Display for RhoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RhoMode::Fixed => "fixed",
            RhoMode::Flexible => "flexible",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnerParams {
    /// Forgetting factor applied to a threshold before each step.
    pub alpha: f64,
    /// Step after a success.
    pub rho1: f64,
    /// Step after a failure in fixed mode.
    pub rho2: f64,
    pub rho_mode: RhoMode,
    /// Cap on the flexible failure step.
    pub rho2_max: f64,
}

impl Default for LearnerParams {
    fn default() -> Self {
        LearnerParams {
            alpha: 0.99,
            rho1: 1.0,
            rho2: 1.0,
            rho_mode: RhoMode::Fixed,
            rho2_max: 1e3,
        }
    }
}

impl LearnerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!(
                "learner.alpha = {} must lie in [0, 1)",
                self.alpha
            )));
        }
        for (key, v) in [
            ("learner.rho1", self.rho1),
            ("learner.rho2", self.rho2),
            ("learner.rho2_max", self.rho2_max),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{key} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Largest step magnitude this configuration can apply.
    pub fn max_step(&self) -> f64 {
        match self.rho_mode {
            RhoMode::Fixed => self.rho1.max(self.rho2),
            RhoMode::Flexible => self.rho1.max(self.rho2_max),
        }
    }
}

/// Selection and success counts per code, plus per-node branch counts for
/// the flexible failure step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimateTable {
    bits: u32,
    trials: Vec<u64>,
    successes: Vec<u64>,
    /// Visits to each branch of each node.
    branch_visits: Vec<[u64; 2]>,
    /// Successes observed after taking each branch of each node.
    branch_successes: Vec<[u64; 2]>,
}

impl EstimateTable {
    pub fn new(bits: u32) -> Self {
        EstimateTable {
            bits,
            trials: vec![0; 1 << bits],
            successes: vec![0; 1 << bits],
            branch_visits: vec![[0; 2]; (1 << bits) - 1],
            branch_successes: vec![[0; 2]; (1 << bits) - 1],
        }
    }

    pub fn trials(&self, code: RelayCode) -> u64 {
        self.trials[code.0 as usize]
    }

    pub fn successes(&self, code: RelayCode) -> u64 {
        self.successes[code.0 as usize]
    }

    /// Success-rate estimate `S / T`, or 0 for a code never tried.
    pub fn estimate(&self, code: RelayCode) -> f64 {
        let t = self.trials(code);
        if t == 0 {
            0.0
        } else {
            self.successes(code) as f64 / t as f64
        }
    }

    pub fn branch_visits(&self, node: usize) -> [u64; 2] {
        self.branch_visits[node]
    }

    pub fn branch_successes(&self, node: usize) -> [u64; 2] {
        self.branch_successes[node]
    }

    pub fn total_trials(&self) -> u64 {
        self.trials.iter().sum()
    }

    pub fn record_outcome(&mut self, code: RelayCode, success: bool) {
        let c = code.0 as usize;
        self.trials[c] += 1;
        self.successes[c] += success as u64;
        for depth in 0..self.bits {
            let node = node_index(depth, code.prefix(depth, self.bits));
            let b = code.bit(depth, self.bits) as usize;
            self.branch_visits[node][b] += 1;
            self.branch_successes[node][b] += success as u64;
        }
    }

    /// Branch success ratios `(q0, q1)` of a node, 0 for an unvisited branch.
    pub fn branch_ratios(&self, node: usize) -> (f64, f64) {
        let q = |j: usize| {
            let visits = self.branch_visits[node][j];
            if visits == 0 {
                0.0
            } else {
                self.branch_successes[node][j] as f64 / visits as f64
            }
        };
        (q(0), q(1))
    }
}

/// Below this the flexible failure step is treated as singular.
const RHO2_SINGULAR_EPS: f64 = 1e-12;

/// Flexible failure step `(q0 + q1) / (2 - (q0 + q1))` for one node, capped
/// at `max`.
pub fn flexible_rho2(estimates: &EstimateTable, node: usize, max: f64) -> f64 {
    let (q0, q1) = estimates.branch_ratios(node);
    let sum = q0 + q1;
    let denom = 2.0 - sum;
    if denom <= RHO2_SINGULAR_EPS {
        log::debug!("flexible rho2 singular at node {node} (q0 + q1 = {sum}); using {max}");
        return max;
    }
    (sum / denom).min(max)
}

/// Moves every threshold on the path of `code`. Success pulls each node
/// toward the chosen bit, failure pushes it away. `rho2[d]` is the failure
/// step for the node at depth `d`.
pub fn update_thresholds(
    tree: &mut ThresholdTree,
    code: RelayCode,
    success: bool,
    alpha: f64,
    rho1: f64,
    rho2: &[f64],
) {
    let bits = tree.bits;
    for depth in 0..bits {
        let node = node_index(depth, code.prefix(depth, bits));
        let chosen_one = code.bit(depth, bits) == 1;
        let step = if success {
            if chosen_one {
                -rho1
            } else {
                rho1
            }
        } else if chosen_one {
            rho2[depth as usize]
        } else {
            -rho2[depth as usize]
        };
        tree.thresholds[node] = alpha * tree.thresholds[node] + step;
    }
}

/// Real relays ordered by estimate, highest first; ties go to the lower index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceList(pub Vec<RelayId>);

impl PreferenceList {
    pub fn from_estimates(row: &[f64]) -> Self {
        let mut order: Vec<RelayId> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        PreferenceList(order)
    }

    pub fn as_slice(&self) -> &[RelayId] {
        &self.0
    }
}

/// Learning state of a single source node.
#[derive(Debug, Clone)]
pub struct SnLearner {
    sn: SnId,
    coding: RelayCoding,
    params: LearnerParams,
    tree: ThresholdTree,
    estimates: EstimateTable,
    rho2_scratch: Vec<f64>,
}

impl PartialEq for SnLearner {
    fn eq(&self, other: &Self) -> bool {
        self.sn == other.sn
            && self.coding == other.coding
            && self.params == other.params
            && self.tree == other.tree
            && self.estimates == other.estimates
    }
}

impl SnLearner {
    pub fn new(sn: SnId, num_relays: usize, params: LearnerParams) -> Result<Self> {
        params.validate()?;
        let coding = RelayCoding::new(num_relays)?;
        Ok(SnLearner {
            sn,
            coding,
            params,
            tree: ThresholdTree::new(coding.bits()),
            estimates: EstimateTable::new(coding.bits()),
            rho2_scratch: vec![0.0; coding.bits() as usize],
        })
    }

    pub fn sn(&self) -> SnId {
        self.sn
    }

    pub fn coding(&self) -> &RelayCoding {
        &self.coding
    }

    pub fn params(&self) -> &LearnerParams {
        &self.params
    }

    pub fn tree(&self) -> &ThresholdTree {
        &self.tree
    }

    pub fn tree_mut(&mut self) -> &mut ThresholdTree {
        &mut self.tree
    }

    pub fn estimates(&self) -> &EstimateTable {
        &self.estimates
    }

    /// Failure steps for the path of `code` from the counters as they stand.
    fn failure_steps(&mut self, code: RelayCode) {
        let bits = self.coding.bits();
        for depth in 0..bits {
            self.rho2_scratch[depth as usize] = match self.params.rho_mode {
                RhoMode::Fixed => self.params.rho2,
                RhoMode::Flexible => {
                    let node = node_index(depth, code.prefix(depth, bits));
                    flexible_rho2(&self.estimates, node, self.params.rho2_max)
                }
            };
        }
    }

    /// Applies an observed outcome for `code`: failure steps are taken from
    /// the counters before this outcome is recorded.
    pub fn observe(&mut self, code: RelayCode, success: bool) {
        self.failure_steps(code);
        self.estimates.record_outcome(code, success);
        update_thresholds(
            &mut self.tree,
            code,
            success,
            self.params.alpha,
            self.params.rho1,
            &self.rho2_scratch,
        );
    }

    /// Selects a relay from the signal, transmits over it and learns from the
    /// result. A virtual relay always fails. Exactly one value is drawn from
    /// `rng` per slot.
    pub fn learning_slot<R: Rng + ?Sized>(
        &mut self,
        source: &mut SignalSource,
        mu: &RewardMatrix,
        slot: u64,
        rng: &mut R,
    ) -> Result<TransmissionOutcome> {
        let code = select_relay(&self.tree, source)?;
        let outcome = match self.coding.relay_of_code(code) {
            Some(relay) => sample_transmission(self.sn, relay, mu, slot, rng)?,
            None => {
                let _: f64 = rng.random();
                TransmissionOutcome {
                    sn: self.sn,
                    relay: code.0 as RelayId,
                    success: false,
                    slot,
                }
            }
        };
        self.observe(code, outcome.success);
        Ok(outcome)
    }

    /// Clears the success and trial counters; thresholds are kept.
    pub fn reset_estimates(&mut self) {
        self.estimates = EstimateTable::new(self.coding.bits());
    }

    /// Estimates for the real relays.
    pub fn estimate_row(&self) -> Vec<f64> {
        (0..self.coding.num_real())
            .map(|r| self.estimates.estimate(RelayCode(r as u32)))
            .collect()
    }

    pub fn preference_list(&self) -> PreferenceList {
        PreferenceList::from_estimates(&self.estimate_row())
    }

    pub fn to_snapshot(&self) -> String {
        let mut out = String::new();
        let p = &self.params;
        let _ = writeln!(out, "{SNAPSHOT_MAGIC}");
        let _ = writeln!(out, "sn = {}", self.sn);
        let _ = writeln!(out, "relays = {}", self.coding.num_real());
        let _ = writeln!(out, "alpha = {}", p.alpha);
        let _ = writeln!(out, "rho1 = {}", p.rho1);
        let _ = writeln!(out, "rho2 = {}", p.rho2);
        let _ = writeln!(out, "rho_mode = {}", p.rho_mode);
        let _ = writeln!(out, "rho2_max = {}", p.rho2_max);
        for (node, c) in self.tree.thresholds.iter().enumerate() {
            let _ = writeln!(out, "threshold.{node} = {c}");
        }
        for code in 0..self.coding.num_codes() {
            let _ = writeln!(
                out,
                "counts.{code} = {} {}",
                self.estimates.trials[code], self.estimates.successes[code]
            );
        }
        for node in 0..self.tree.node_count() {
            let [v0, v1] = self.estimates.branch_visits[node];
            let [s0, s1] = self.estimates.branch_successes[node];
            let _ = writeln!(out, "branch.{node} = {v0} {s0} {v1} {s1}");
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        const ORIGIN: &str = "learner snapshot";
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, SNAPSHOT_MAGIC)) => {}
            Some((n, other)) => {
                return Err(Error::format(
                    ORIGIN,
                    n,
                    format!("unsupported header `{other}`"),
                ))
            }
            None => return Err(Error::format(ORIGIN, 1, "empty snapshot")),
        }
        let mut fields = std::collections::BTreeMap::new();
        for (n, line) in lines.filter(|(_, l)| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(ORIGIN, n, "expected `key = value`"))?;
            if fields
                .insert(k.trim().to_owned(), (n, v.trim().to_owned()))
                .is_some()
            {
                return Err(Error::format(
                    ORIGIN,
                    n,
                    format!("duplicate key `{}`", k.trim()),
                ));
            }
        }
        let mut take = |key: &str| {
            fields
                .remove(key)
                .ok_or_else(|| Error::format(ORIGIN, 0, format!("missing key `{key}`")))
        };
        fn num<T: FromStr>(line: usize, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::format("learner snapshot", line, format!("bad value `{v}`")))
        }
        let (n, v) = take("sn")?;
        let sn: usize = num(n, &v)?;
        let (n, v) = take("relays")?;
        let relays: usize = num(n, &v)?;
        let mut params = LearnerParams::default();
        for (key, slot) in [
            ("alpha", &mut params.alpha),
            ("rho1", &mut params.rho1),
            ("rho2", &mut params.rho2),
            ("rho2_max", &mut params.rho2_max),
        ] {
            let (n, v) = take(key)?;
            *slot = num(n, &v)?;
        }
        let (n, v) = take("rho_mode")?;
        params.rho_mode = v
            .parse()
            .map_err(|_| Error::format(ORIGIN, n, "bad rho_mode"))?;

        let mut learner = SnLearner::new(sn, relays, params)?;
        for node in 0..learner.tree.node_count() {
            let (n, v) = take(&format!("threshold.{node}"))?;
            learner.tree.thresholds[node] = num(n, &v)?;
        }
        for code in 0..learner.coding.num_codes() {
            let (n, v) = take(&format!("counts.{code}"))?;
            let parts: Vec<u64> = v
                .split_whitespace()
                .map(|t| num(n, t))
                .collect::<Result<_>>()?;
            let [t, s] = parts[..] else {
                return Err(Error::format(ORIGIN, n, "counts need `trials successes`"));
            };
            if s > t {
                return Err(Error::format(ORIGIN, n, "more successes than trials"));
            }
            learner.estimates.trials[code] = t;
            learner.estimates.successes[code] = s;
        }
        for node in 0..learner.tree.node_count() {
            let (n, v) = take(&format!("branch.{node}"))?;
            let parts: Vec<u64> = v
                .split_whitespace()
                .map(|t| num(n, t))
                .collect::<Result<_>>()?;
            let [v0, s0, v1, s1] = parts[..] else {
                return Err(Error::format(ORIGIN, n, "branch needs four counters"));
            };
            if s0 > v0 || s1 > v1 {
                return Err(Error::format(ORIGIN, n, "more successes than visits"));
            }
            learner.estimates.branch_visits[node] = [v0, v1];
            learner.estimates.branch_successes[node] = [s0, s1];
        }
        if let Some((key, (n, _))) = fields.into_iter().next() {
            return Err(Error::format(ORIGIN, n, format!("unknown key `{key}`")));
        }
        Ok(learner)
    }
}

pub const SNAPSHOT_MAGIC: &str = "lcml-learner-snapshot v1";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{SourceKind, SourceSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixed_levels(levels: &[f64]) -> SignalSource {
        SignalSource::from_samples(levels.to_vec(), false, false).unwrap()
    }

    #[test]
    fn coding_sizes() {
        let c = RelayCoding::new(1).unwrap();
        assert_eq!((c.bits(), c.num_virtual()), (1, 1));
        let c = RelayCoding::new(4).unwrap();
        assert_eq!((c.bits(), c.num_virtual()), (2, 0));
        let c = RelayCoding::new(5).unwrap();
        assert_eq!((c.bits(), c.num_virtual()), (3, 3));
        assert_eq!(c.relay_of_code(RelayCode(4)), Some(4));
        assert_eq!(c.relay_of_code(RelayCode(5)), None);
        assert_eq!(c.code_of_relay(3).to_bit_string(3), "011");
        assert!(RelayCoding::new(0).is_err());
        assert_eq!(ThresholdTree::new(3).node_count(), 7);
    }

    #[test]
    fn select_compares_against_path_thresholds() {
        let tree = ThresholdTree::new(2);
        let code = select_relay(&tree, &mut fixed_levels(&[0.3, -0.5])).unwrap();
        assert_eq!(code.to_bit_string(2), "10");
        assert_eq!(RelayCoding::new(4).unwrap().relay_of_code(code), Some(2));
    }

    #[test]
    fn select_uses_strict_inequality() {
        let tree = ThresholdTree::filled(1, 5.0);
        assert_eq!(
            select_relay(&tree, &mut fixed_levels(&[4.9])).unwrap(),
            RelayCode(0)
        );
        assert_eq!(
            select_relay(&tree, &mut fixed_levels(&[5.0])).unwrap(),
            RelayCode(0)
        );
    }

    #[test]
    fn very_low_thresholds_select_all_ones() {
        let tree = ThresholdTree::filled(3, -1e9);
        let mut src = SourceSpec::new(SourceKind::Gaussian {
            mean: 0.0,
            std_dev: 1.0,
        })
        .build(1)
        .unwrap();
        for _ in 0..100 {
            assert_eq!(
                select_relay(&tree, &mut src).unwrap().to_bit_string(3),
                "111"
            );
        }
    }

    #[test]
    fn selection_propagates_exhaustion() {
        let tree = ThresholdTree::new(2);
        assert!(matches!(
            select_relay(&tree, &mut fixed_levels(&[1.0])),
            Err(Error::ExhaustedSource(1))
        ));
    }

    fn one_node_update(c: f64, bit: u32, success: bool) -> f64 {
        let mut tree = ThresholdTree::filled(1, c);
        update_thresholds(&mut tree, RelayCode(bit), success, 0.99, 1.0, &[1.0]);
        tree.threshold(0, 0)
    }

    #[test]
    fn threshold_update_substitutions() {
        assert_eq!(one_node_update(0.5, 1, true), 0.99 * 0.5 - 1.0);
        assert!((one_node_update(0.5, 1, true) - -0.505).abs() < 1e-15);
        assert_eq!(one_node_update(0.0, 1, false), 1.0);
        assert_eq!(one_node_update(0.0, 0, true), 1.0);
        assert_eq!(one_node_update(0.0, 0, false), -1.0);
    }

    #[test]
    fn update_touches_only_the_path() {
        let mut tree = ThresholdTree::new(3);
        update_thresholds(&mut tree, RelayCode(0b101), true, 0.9, 1.0, &[1.0; 3]);
        let touched: Vec<usize> = tree.path(RelayCode(0b101)).map(|(n, _)| n).collect();
        assert_eq!(touched, vec![0, 2, 5]);
        for (node, c) in tree.thresholds().iter().enumerate() {
            assert_eq!(*c != 0.0, touched.contains(&node), "node {node}");
        }
        assert_eq!(tree.threshold(0, 0), -1.0);
        assert_eq!(tree.threshold(1, 1), 1.0);
        assert_eq!(tree.threshold(2, 0b10), -1.0);
    }

    fn table_with_ratios(q0: (u64, u64), q1: (u64, u64)) -> EstimateTable {
        let mut t = EstimateTable::new(1);
        t.branch_successes[0] = [q0.0, q1.0];
        t.branch_visits[0] = [q0.1, q1.1];
        t
    }

    #[test]
    fn flexible_rho2_substitutions() {
        let t = table_with_ratios((1, 5), (2, 5));
        assert!((flexible_rho2(&t, 0, 1e3) - 0.6 / 1.4).abs() < 1e-15);
        assert_eq!(flexible_rho2(&EstimateTable::new(1), 0, 1e3), 0.0);
        let t = table_with_ratios((3, 3), (7, 7));
        assert_eq!(flexible_rho2(&t, 0, 1e3), 1e3);
        assert_eq!(flexible_rho2(&t, 0, 42.0), 42.0);
    }

    #[test]
    fn record_outcome_counters() {
        let mut t = EstimateTable::new(2);
        let code = RelayCode(1);
        t.trials[1] = 3;
        t.successes[1] = 2;
        t.record_outcome(code, true);
        assert_eq!((t.trials(code), t.successes(code)), (4, 3));
        assert_eq!(t.estimate(code), 0.75);

        let fresh = RelayCode(2);
        t.record_outcome(fresh, false);
        assert_eq!((t.trials(fresh), t.successes(fresh)), (1, 0));
        assert_eq!(t.estimate(fresh), 0.0);

        let mut t = EstimateTable::new(2);
        for slot in 0..100 {
            t.record_outcome(RelayCode(3), slot % 2 == 0);
        }
        assert_eq!(t.estimate(RelayCode(3)), 0.5);
        assert_eq!(t.branch_visits(0), [0, 100]);
        assert_eq!(t.branch_successes(node_index(1, 1)), [0, 50]);
    }

    #[test]
    fn preference_order_and_ties() {
        assert_eq!(
            PreferenceList::from_estimates(&[0.2, 0.9, 0.5]).0,
            vec![1, 2, 0]
        );
        assert_eq!(
            PreferenceList::from_estimates(&[0.0; 4]).0,
            vec![0, 1, 2, 3]
        );
        assert_eq!(
            PreferenceList::from_estimates(&[0.5, 0.5, 0.9]).0,
            vec![2, 0, 1]
        );
    }

    #[test]
    fn preference_list_excludes_virtual_relays() {
        let mut l = SnLearner::new(0, 3, LearnerParams::default()).unwrap();
        l.observe(RelayCode(3), false);
        l.observe(RelayCode(2), true);
        assert_eq!(l.preference_list().0, vec![2, 0, 1]);
    }

    #[test]
    fn one_slot_composes_the_component_steps() {
        // Two relays, levels (0.3) picks code 1; mu = 1 forces success.
        let mu = RewardMatrix::from_rows(vec![vec![0.0, 1.0]]).unwrap();
        let mut l = SnLearner::new(0, 2, LearnerParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = l
            .learning_slot(&mut fixed_levels(&[0.3]), &mu, 0, &mut rng)
            .unwrap();
        assert_eq!((out.relay, out.success), (1, true));
        assert_eq!(l.tree().threshold(0, 0), -1.0);
        assert_eq!(l.estimates().trials(RelayCode(1)), 1);
        assert_eq!(l.estimates().estimate(RelayCode(1)), 1.0);
        assert_eq!(l.estimates().branch_visits(0), [0, 1]);

        // Four relays, levels (0.3, -0.5) pick "10"; mu = 0 forces failure.
        let mu = RewardMatrix::from_rows(vec![vec![0.5, 0.5, 0.0, 0.5]]).unwrap();
        let mut l = SnLearner::new(0, 4, LearnerParams::default()).unwrap();
        let out = l
            .learning_slot(&mut fixed_levels(&[0.3, -0.5]), &mu, 0, &mut rng)
            .unwrap();
        assert_eq!((out.relay, out.success), (2, false));
        assert_eq!(l.tree().threshold(0, 0), 1.0);
        assert_eq!(l.tree().threshold(1, 1), -1.0);
        assert_eq!(l.tree().threshold(1, 0), 0.0);
        assert_eq!(l.estimate_row(), vec![0.0; 4]);
        assert_eq!(l.estimates().trials(RelayCode(2)), 1);
    }

    #[test]
    fn virtual_relays_always_fail() {
        let mu = RewardMatrix::from_rows(vec![vec![1.0, 1.0, 1.0]]).unwrap();
        let mut l = SnLearner::new(0, 3, LearnerParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for slot in 0..20 {
            let out = l
                .learning_slot(&mut fixed_levels(&[1e9, 1e9]), &mu, slot, &mut rng)
                .unwrap();
            assert_eq!(out.relay, 3);
            assert!(!out.success);
            l.tree_mut().set_threshold(0, 0, 0.0);
            l.tree_mut().set_threshold(1, 1, 0.0);
        }
    }

    #[test]
    fn learner_converges_on_a_sure_relay() {
        let mu = RewardMatrix::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        let mut l = SnLearner::new(0, 2, LearnerParams::default()).unwrap();
        let mut src = SourceSpec::new(SourceKind::Logistic { r: 4.0, x0: None })
            .build(21)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut late_hits = 0;
        for slot in 0..2000 {
            let out = l.learning_slot(&mut src, &mu, slot, &mut rng).unwrap();
            if slot >= 1500 && out.relay == 0 {
                late_hits += 1;
            }
        }
        assert_eq!(l.preference_list().0[0], 0);
        assert!(late_hits as f64 / 500.0 > 0.9);
    }

    #[test]
    fn zero_thresholds_explore_uniformly() {
        let tree = ThresholdTree::new(2);
        let mut src = SourceSpec::new(SourceKind::Uniform { lo: -1.0, hi: 1.0 })
            .build(8)
            .unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_relay(&tree, &mut src).unwrap().0 as usize] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!(
                (c as f64 - n as f64 / 4.0).abs() <= 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn snapshot_restores_state() {
        let mu = RewardMatrix::from_rows(vec![vec![0.3, 0.8, 0.5]; 3]).unwrap();
        let params = LearnerParams {
            rho_mode: RhoMode::Flexible,
            ..Default::default()
        };
        let mut l = SnLearner::new(2, 3, params).unwrap();
        let mut src = SourceSpec::new(SourceKind::Tent { mu: 1.99, x0: None })
            .build(4)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for slot in 0..500 {
            l.learning_slot(&mut src, &mu, slot, &mut rng).unwrap();
        }
        let text = l.to_snapshot();
        assert_eq!(SnLearner::from_snapshot(&text).unwrap(), l);
        assert!(SnLearner::from_snapshot(&text.replace("v1", "v9")).is_err());
        assert!(SnLearner::from_snapshot(&format!("{text}extra = 1\n")).is_err());
        let broken = text.replace("counts.0 = ", "counts.0 = 1 ");
        assert!(SnLearner::from_snapshot(&broken).is_err());
    }
}
