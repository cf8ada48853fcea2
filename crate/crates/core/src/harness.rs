//! Full learning-and-exchange runs: every iteration each source node runs
//! one learning slot, the exchange engine periodically rearranges the
//! assignment, and traffic over the current assignment is tallied.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exchange::{run_exchange, ExchangePolicy};
use crate::learner::{LearnerParams, SnLearner};
use crate::network::{
    expected_throughput, resolve_collisions, Assignment, NetworkConfig, RewardMatrix,
};
use crate::oracle::{check_asa, check_csa, Arrangement, ENUMERATION_LIMIT};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::signal::{SignalSource, SourceKind, SourceSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixSource {
    /// Entries i.i.d. uniform on `[lo, hi]`.
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Rows with sorted entries at least `gap` apart inside `[lo, hi]`.
    Separated {
        gap: f64,
        lo: f64,
        hi: f64,
    },
    Explicit(RewardMatrix),
}

impl Default for MatrixSource {
    fn default() -> Self {
        MatrixSource::Uniform { lo: 0.1, hi: 0.9 }
    }
}

impl MatrixSource {
    pub fn generate(
        &self,
        num_sns: usize,
        num_relays: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<RewardMatrix> {
        match self {
            MatrixSource::Uniform { lo, hi } => {
                RewardMatrix::uniform_random(num_sns, num_relays, *lo, *hi, rng)
            }
            MatrixSource::Separated { gap, lo, hi } => {
                RewardMatrix::separated_random(num_sns, num_relays, *gap, *lo, *hi, rng)
            }
            MatrixSource::Explicit(mu) => {
                if mu.num_sns() != num_sns || mu.num_relays() != num_relays {
                    return Err(Error::config(format!(
                        "explicit matrix is {}x{} but the network is {num_sns}x{num_relays}",
                        mu.num_sns(),
                        mu.num_relays()
                    )));
                }
                Ok(mu.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvMatrix {
    /// Fresh draw from the experiment's matrix generator, per replication.
    Regenerate,
    /// Draw from the experiment's generator with a fixed seed.
    Seeded(u64),
    Explicit(RewardMatrix),
    /// Relay columns moved by a random permutation with no fixed point.
    PermuteRelays,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvChange {
    pub iteration: u64,
    pub matrix: EnvMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    /// `network.seed` is the seed of replication 0; replication `i` uses
    /// `seed + i`.
    pub network: NetworkConfig,
    pub matrix: MatrixSource,
    pub source: SourceSpec,
    /// All nodes draw from one stream instead of one stream each.
    pub shared_stream: bool,
    pub learner: LearnerParams,
    pub policy: ExchangePolicy,
    pub iterations: u64,
    /// One exchange round every this many iterations.
    pub exchange_period: u64,
    /// Iterations covered by the windowed success ratio.
    pub window: usize,
    pub env_changes: Vec<EnvChange>,
    pub replications: usize,
    /// Collided transmissions count as failed trials; otherwise they are
    /// not counted at all.
    pub collisions_count_as_trials: bool,
    /// Evaluate the stability oracles each iteration (small instances only).
    pub oracle: bool,
    /// Exchange on the true probabilities instead of the estimates.
    pub perfect_knowledge: bool,
    /// Clear all estimate counters when the windowed ratio falls by more
    /// than this fraction below its running peak.
    pub restart_drop: Option<f64>,
    /// First iteration of the volatility measurement in the summary;
    /// `None` means half-way through the run.
    pub volatility_from: Option<u64>,
}

impl ExperimentSpec {
    pub fn new(num_sns: usize, num_relays: usize, seed: u64) -> Self {
        ExperimentSpec {
            network: NetworkConfig::new(num_sns, num_relays, seed),
            matrix: MatrixSource::default(),
            source: SourceSpec::new(SourceKind::Logistic { r: 4.0, x0: None }),
            shared_stream: false,
            learner: LearnerParams::default(),
            policy: ExchangePolicy::new(Arrangement::Csa, num_sns),
            iterations: 5000,
            exchange_period: 1,
            window: 100,
            env_changes: Vec::new(),
            replications: 1,
            collisions_count_as_trials: true,
            oracle: true,
            perfect_knowledge: false,
            restart_drop: None,
            volatility_from: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.learner.validate()?;
        self.policy
            .validate(self.network.num_sns)
            .map_err(|e| Error::config(e.to_string().replace("invalid argument: ", "")))?;
        self.source.validate()?;
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.exchange_period == 0 {
            return Err(Error::config("exchange_period must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::config("window must be at least 1"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        let mut last = None;
        for change in &self.env_changes {
            if change.iteration >= self.iterations {
                return Err(Error::config(format!(
                    "env_changes iteration {} is not before the end of the run ({})",
                    change.iteration, self.iterations
                )));
            }
            if last.is_some_and(|l| change.iteration <= l) {
                return Err(Error::config(
                    "env_changes iterations must be strictly increasing",
                ));
            }
            last = Some(change.iteration);
        }
        if self.network.num_relays < 2
            && self
                .env_changes
                .iter()
                .any(|c| c.matrix == EnvMatrix::PermuteRelays)
        {
            return Err(Error::config("relay permutation needs at least two relays"));
        }
        if let Some(d) = self.restart_drop {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config(format!(
                    "restart_drop = {d} must lie in (0, 1)"
                )));
            }
        }
        if let Some(v) = self.volatility_from {
            if v >= self.iterations {
                return Err(Error::config(
                    "volatility_from must be before the end of the run",
                ));
            }
        }
        if let MatrixSource::Explicit(mu) = &self.matrix {
            if mu.num_sns() != self.network.num_sns || mu.num_relays() != self.network.num_relays {
                return Err(Error::config(
                    "explicit matrix does not match the network size",
                ));
            }
        }
        Ok(())
    }

    pub fn replication_seed(&self, replication: usize) -> u64 {
        self.network.seed.wrapping_add(replication as u64)
    }

    fn oracle_enabled(&self) -> bool {
        self.oracle
            && self.network.num_sns <= ENUMERATION_LIMIT
            && self.network.num_relays <= ENUMERATION_LIMIT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: u64,
    /// Environment epoch; increments at every environment change.
    pub epoch: u32,
    /// Successful transmissions since the start of the epoch.
    pub successes: u64,
    pub trials: u64,
    pub cumulative_ratio: f64,
    pub window_ratio: f64,
    /// Expected throughput of the current assignment under the true matrix.
    pub expected_throughput: f64,
    /// Occupancy changes since the start of the run.
    pub exchanges: u64,
    pub round_exchanges: u64,
    pub csa_stable: Option<bool>,
    pub asa_stable: Option<bool>,
}

/// One running simulation instance.
pub struct Simulation {
    spec: ExperimentSpec,
    seed: u64,
    mu: RewardMatrix,
    learners: Vec<SnLearner>,
    sources: Vec<SignalSource>,
    learning_rngs: Vec<ChaCha8Rng>,
    requester_rng: ChaCha8Rng,
    traffic_rng: ChaCha8Rng,
    assignment: Assignment,
    iteration: u64,
    epoch: u32,
    successes: u64,
    trials: u64,
    exchanges: u64,
    livelocks: u64,
    window: VecDeque<(u64, u64)>,
    window_sums: (u64, u64),
    peak: f64,
    restarts: u64,
    next_change: usize,
}

impl Simulation {
    pub fn new(spec: &ExperimentSpec, replication: usize) -> Result<Self> {
        spec.validate()?;
        let mut spec = spec.clone();
        spec.source = spec.source.resolved()?;
        let seed = spec.replication_seed(replication);
        let (k, m) = (spec.network.num_sns, spec.network.num_relays);
        let mu = spec
            .matrix
            .generate(k, m, &mut stream_rng(seed, Stream::Matrix))?;
        let learners = (0..k)
            .map(|s| SnLearner::new(s, m, spec.learner))
            .collect::<Result<Vec<_>>>()?;
        let source_count = if spec.shared_stream { 1 } else { k };
        let sources = (0..source_count)
            .map(|s| {
                spec.source
                    .build_for(s, source_count, derive_seed(seed, Stream::Signal(s)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Simulation {
            learning_rngs: (0..k)
                .map(|s| stream_rng(seed, Stream::Learning(s)))
                .collect(),
            requester_rng: stream_rng(seed, Stream::Requesters),
            traffic_rng: stream_rng(seed, Stream::Traffic),
            assignment: Assignment::empty(k),
            spec,
            seed,
            mu,
            learners,
            sources,
            iteration: 0,
            epoch: 0,
            successes: 0,
            trials: 0,
            exchanges: 0,
            livelocks: 0,
            window: VecDeque::new(),
            window_sums: (0, 0),
            peak: 0.0,
            restarts: 0,
            next_change: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn reward_matrix(&self) -> &RewardMatrix {
        &self.mu
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn learners(&self) -> &[SnLearner] {
        &self.learners
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.spec.iterations
    }

    /// Current estimate matrix over the real relays.
    pub fn estimate_matrix(&self) -> RewardMatrix {
        let (k, m) = (self.spec.network.num_sns, self.spec.network.num_relays);
        let data = self
            .learners
            .iter()
            .flat_map(|l| l.estimate_row())
            .collect();
        RewardMatrix::from_flat(k, m, data).expect("estimates are probabilities")
    }

    fn apply_env_change(&mut self) -> Result<()> {
        let Some(change) = self.spec.env_changes.get(self.next_change) else {
            return Ok(());
        };
        if change.iteration != self.iteration {
            return Ok(());
        }
        let (k, m) = (self.spec.network.num_sns, self.spec.network.num_relays);
        self.mu = match &change.matrix {
            EnvMatrix::Regenerate => self.spec.matrix.generate(
                k,
                m,
                &mut stream_rng(self.seed, Stream::EnvChange(self.next_change)),
            )?,
            EnvMatrix::Seeded(s) => {
                self.spec
                    .matrix
                    .generate(k, m, &mut stream_rng(*s, Stream::Matrix))?
            }
            EnvMatrix::Explicit(mu) => MatrixSource::Explicit(mu.clone()).generate(
                k,
                m,
                &mut stream_rng(0, Stream::Matrix),
            )?,
            EnvMatrix::PermuteRelays => {
                let mut rng = stream_rng(self.seed, Stream::EnvChange(self.next_change));
                self.mu.permute_relays(&derangement(m, &mut rng))?
            }
        };
        log::info!("environment change at iteration {}", self.iteration);
        self.next_change += 1;
        self.epoch += 1;
        self.successes = 0;
        self.trials = 0;
        Ok(())
    }

    pub fn step(&mut self) -> Result<MetricsRow> {
        if self.is_finished() {
            return Err(Error::argument("simulation already finished"));
        }
        let t = self.iteration;
        self.apply_env_change()?;

        let shared = self.spec.shared_stream;
        for (s, learner) in self.learners.iter_mut().enumerate() {
            let source = &mut self.sources[if shared { 0 } else { s }];
            learner.learning_slot(source, &self.mu, t, &mut self.learning_rngs[s])?;
        }

        let mut round_exchanges = 0;
        if t.is_multiple_of(self.spec.exchange_period) {
            let estimates = if self.spec.perfect_knowledge {
                self.mu.clone()
            } else {
                self.estimate_matrix()
            };
            let round = run_exchange(
                &self.assignment,
                &estimates,
                &self.spec.policy,
                &mut self.requester_rng,
            )?;
            round_exchanges = round.exchange_count as u64;
            self.livelocks += round.livelock as u64;
            self.assignment = round.assignment;
        }
        self.exchanges += round_exchanges;

        let collided = resolve_collisions(&self.assignment);
        let (mut ok, mut tried) = (0u64, 0u64);
        for s in 0..self.spec.network.num_sns {
            let u: f64 = rand::Rng::random(&mut self.traffic_rng);
            let lost = collided.contains(&s);
            if lost && !self.spec.collisions_count_as_trials {
                continue;
            }
            tried += 1;
            if let (Some(r), false) = (self.assignment.relay_of(s), lost) {
                ok += (u < self.mu.get(s, r)) as u64;
            }
        }
        self.successes += ok;
        self.trials += tried;
        self.window.push_back((ok, tried));
        self.window_sums.0 += ok;
        self.window_sums.1 += tried;
        if self.window.len() > self.spec.window {
            let (o, n) = self.window.pop_front().expect("nonempty window");
            self.window_sums.0 -= o;
            self.window_sums.1 -= n;
        }
        let window_ratio = ratio(self.window_sums.0, self.window_sums.1);

        if let Some(drop) = self.spec.restart_drop {
            if self.window.len() == self.spec.window {
                self.peak = self.peak.max(window_ratio);
                if window_ratio < (1.0 - drop) * self.peak {
                    log::info!("restarting estimates at iteration {t}");
                    for l in &mut self.learners {
                        l.reset_estimates();
                    }
                    self.peak = 0.0;
                    self.restarts += 1;
                }
            }
        }

        let (csa_stable, asa_stable) = if self.spec.oracle_enabled() {
            (
                Some(check_csa(&self.assignment, &self.mu)?.stable),
                Some(check_asa(&self.assignment, &self.mu, self.spec.policy.c)?.stable),
            )
        } else {
            (None, None)
        };

        self.iteration += 1;
        Ok(MetricsRow {
            iteration: t,
            epoch: self.epoch,
            successes: self.successes,
            trials: self.trials,
            cumulative_ratio: ratio(self.successes, self.trials),
            window_ratio,
            expected_throughput: expected_throughput(&self.assignment, &self.mu)?,
            exchanges: self.exchanges,
            round_exchanges,
            csa_stable,
            asa_stable,
        })
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Volatility {
    /// Population standard deviation of the windowed success ratio.
    pub std_dev: f64,
    /// Occupancy changes within the measured range.
    pub exchanges: u64,
}

/// Fluctuation of the windowed success ratio from `from_iteration` onward.
pub fn volatility(rows: &[MetricsRow], from_iteration: u64) -> Result<Volatility> {
    let tail: Vec<&MetricsRow> = rows
        .iter()
        .filter(|r| r.iteration >= from_iteration)
        .collect();
    let (Some(first), Some(last)) = (tail.first(), tail.last()) else {
        return Err(Error::argument(format!(
            "no metrics at or after iteration {from_iteration}"
        )));
    };
    let n = tail.len() as f64;
    let mean = tail.iter().map(|r| r.window_ratio).sum::<f64>() / n;
    let var = tail
        .iter()
        .map(|r| (r.window_ratio - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(Volatility {
        std_dev: var.sqrt(),
        exchanges: last.exchanges - first.exchanges + first.round_exchanges,
    })
}

/// First iteration from which `flag` holds through the last row.
pub fn stable_since(
    rows: &[MetricsRow],
    flag: impl Fn(&MetricsRow) -> Option<bool>,
) -> Option<u64> {
    let mut since = None;
    for r in rows {
        match flag(r) {
            Some(true) => {
                since.get_or_insert(r.iteration);
            }
            _ => since = None,
        }
    }
    since
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub seed: u64,
    pub iterations: u64,
    pub mode: Arrangement,
    pub c: f64,
    pub num_requesters: usize,
    pub source: String,
    pub final_cumulative_ratio: f64,
    pub final_window_ratio: f64,
    pub final_expected_throughput: f64,
    pub total_exchanges: u64,
    pub livelocks: u64,
    pub restarts: u64,
    pub csa_stable_since: Option<u64>,
    pub asa_stable_since: Option<u64>,
    pub volatility_from: u64,
    pub volatility: Volatility,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<u64>| v.map_or_else(|| "never".to_owned(), |i| i.to_string());
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "iterations = {}", self.iterations)?;
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "c = {}", self.c)?;
        writeln!(f, "num_requesters = {}", self.num_requesters)?;
        writeln!(f, "source = {}", self.source)?;
        writeln!(
            f,
            "final_cumulative_ratio = {:.6}",
            self.final_cumulative_ratio
        )?;
        writeln!(f, "final_window_ratio = {:.6}", self.final_window_ratio)?;
        writeln!(
            f,
            "final_expected_throughput = {:.6}",
            self.final_expected_throughput
        )?;
        writeln!(f, "total_exchanges = {}", self.total_exchanges)?;
        writeln!(f, "livelocks = {}", self.livelocks)?;
        writeln!(f, "restarts = {}", self.restarts)?;
        writeln!(f, "csa_stable_since = {}", opt(self.csa_stable_since))?;
        writeln!(f, "asa_stable_since = {}", opt(self.asa_stable_since))?;
        writeln!(f, "volatility_from = {}", self.volatility_from)?;
        writeln!(f, "volatility = {:.6}", self.volatility.std_dev)?;
        write!(f, "volatility_exchanges = {}", self.volatility.exchanges)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
}

/// Runs one replication, handing every row to `sink` as it is produced. On
/// failure the rows already handed over remain with the sink.
pub fn run_with_sink(
    spec: &ExperimentSpec,
    replication: usize,
    mut sink: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<Summary> {
    Ok(run_inner(spec, replication, &mut sink, false)?.summary)
}

pub fn run_experiment(spec: &ExperimentSpec, replication: usize) -> Result<RunOutput> {
    run_inner(spec, replication, &mut |_| Ok(()), true)
}

fn run_inner(
    spec: &ExperimentSpec,
    replication: usize,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
    keep_rows: bool,
) -> Result<RunOutput> {
    let mut sim = Simulation::new(spec, replication)?;
    let volatility_from = spec.volatility_from.unwrap_or(spec.iterations / 2);
    let mut rows = Vec::with_capacity(spec.iterations as usize);
    while !sim.is_finished() {
        let row = sim.step()?;
        sink(&row)?;
        rows.push(row);
    }
    let last = rows.last().expect("at least one iteration");
    let summary = Summary {
        seed: sim.seed,
        iterations: spec.iterations,
        mode: spec.policy.mode,
        c: spec.policy.c,
        num_requesters: spec.policy.num_requesters,
        source: spec.source.to_string(),
        final_cumulative_ratio: last.cumulative_ratio,
        final_window_ratio: last.window_ratio,
        final_expected_throughput: last.expected_throughput,
        total_exchanges: last.exchanges,
        livelocks: sim.livelocks,
        restarts: sim.restarts,
        csa_stable_since: stable_since(&rows, |r| r.csa_stable),
        asa_stable_since: stable_since(&rows, |r| r.asa_stable),
        volatility_from,
        volatility: volatility(&rows, volatility_from)?,
    };
    if !keep_rows {
        rows = Vec::new();
    }
    Ok(RunOutput { rows, summary })
}

/// Runs every replication of `spec` on up to `jobs` threads, in
/// replication order.
pub fn run_replications(spec: &ExperimentSpec, jobs: usize) -> Result<Vec<RunOutput>> {
    spec.validate()?;
    let resolved = ExperimentSpec {
        source: spec.source.resolved()?,
        ..spec.clone()
    };
    parallel_map(jobs, resolved.replications, |rep| {
        run_experiment(&resolved, rep)
    })
}

/// Maps `f` over `0..count` on up to `jobs` threads, keeping index order.
pub fn parallel_map<T: Send>(
    jobs: usize,
    count: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if jobs <= 1 {
        return (0..count).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(&f).collect())
}

/// Writes rows as CSV with a header line.
pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn csv_file_name(run_id: &str, seed: u64) -> String {
    format!("{run_id}_{seed}.csv")
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepValues {
    NumRequesters(Vec<usize>),
    Source(Vec<SourceSpec>),
    Ambiguity(Vec<f64>),
    ExchangePeriod(Vec<u64>),
}

impl SweepValues {
    /// Parses a parameter name and its textual values. Source values use the
    /// `kind[:params]` syntax and inherit standardization from `base`.
    pub fn parse(parameter: &str, values: &[&str], base: &SourceSpec) -> Result<Self> {
        fn nums<T: std::str::FromStr>(parameter: &str, values: &[&str]) -> Result<Vec<T>> {
            values
                .iter()
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        Error::argument(format!("`{v}` is not a valid value for {parameter}"))
                    })
                })
                .collect()
        }
        if values.is_empty() {
            return Err(Error::argument("a sweep needs at least one value"));
        }
        Ok(match parameter {
            "num_requesters" | "policy.num_requesters" => {
                SweepValues::NumRequesters(nums(parameter, values)?)
            }
            "c" | "policy.c" => SweepValues::Ambiguity(nums(parameter, values)?),
            "exchange_period" => SweepValues::ExchangePeriod(nums(parameter, values)?),
            "source" | "source.kind" => SweepValues::Source(
                values
                    .iter()
                    .map(|v| {
                        Ok(SourceSpec {
                            kind: v.parse::<SourceKind>()?,
                            ..base.clone()
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            other => {
                return Err(Error::argument(format!(
                    "unknown sweep parameter `{other}`; expected num_requesters, source, c or exchange_period"
                )))
            }
        })
    }

    pub fn parameter(&self) -> &'static str {
        match self {
            SweepValues::NumRequesters(_) => "num_requesters",
            SweepValues::Source(_) => "source",
            SweepValues::Ambiguity(_) => "c",
            SweepValues::ExchangePeriod(_) => "exchange_period",
        }
    }

    fn specs(&self, base: &ExperimentSpec) -> Vec<(String, ExperimentSpec)> {
        let with = |label: String, f: &dyn Fn(&mut ExperimentSpec)| {
            let mut s = base.clone();
            f(&mut s);
            (label, s)
        };
        match self {
            SweepValues::NumRequesters(v) => v
                .iter()
                .map(|&n| with(n.to_string(), &|s| s.policy.num_requesters = n))
                .collect(),
            SweepValues::Source(v) => v
                .iter()
                .map(|src| with(src.to_string(), &|s| s.source = src.clone()))
                .collect(),
            SweepValues::Ambiguity(v) => v
                .iter()
                .map(|&c| with(c.to_string(), &|s| s.policy.c = c))
                .collect(),
            SweepValues::ExchangePeriod(v) => v
                .iter()
                .map(|&p| with(p.to_string(), &|s| s.exchange_period = p))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub spec: ExperimentSpec,
    pub runs: Vec<RunOutput>,
}

impl SweepPoint {
    fn mean(&self, f: impl Fn(&Summary) -> f64) -> f64 {
        self.runs.iter().map(|r| f(&r.summary)).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_final_window_ratio(&self) -> f64 {
        self.mean(|s| s.final_window_ratio)
    }

    pub fn mean_final_cumulative_ratio(&self) -> f64 {
        self.mean(|s| s.final_cumulative_ratio)
    }

    pub fn mean_volatility(&self) -> f64 {
        self.mean(|s| s.volatility.std_dev)
    }

    pub fn csa_stable_fraction(&self) -> f64 {
        self.mean(|s| s.csa_stable_since.is_some() as u8 as f64)
    }
}

/// Runs every value of the swept parameter with the same replication seeds.
pub fn sweep(spec: &ExperimentSpec, values: &SweepValues, jobs: usize) -> Result<Vec<SweepPoint>> {
    let points = values.specs(spec);
    for (_, s) in &points {
        s.validate()?;
    }
    let resolved: Vec<(String, ExperimentSpec)> = points
        .into_iter()
        .map(|(l, s)| {
            let source = s.source.resolved()?;
            Ok((l, ExperimentSpec { source, ..s }))
        })
        .collect::<Result<_>>()?;
    let reps = spec.replications;
    let flat = parallel_map(jobs, resolved.len() * reps, |i| {
        run_experiment(&resolved[i / reps].1, i % reps)
    })?;
    let mut flat = flat.into_iter();
    Ok(resolved
        .into_iter()
        .map(|(label, spec)| SweepPoint {
            label,
            spec,
            runs: flat.by_ref().take(reps).collect(),
        })
        .collect())
}

/// Comparison table for a sweep as CSV, one line per value.
pub fn sweep_table(parameter: &str, points: &[SweepPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        parameter,
        "replications",
        "mean_final_window_ratio",
        "mean_final_cumulative_ratio",
        "mean_volatility",
        "csa_stable_fraction",
    ];
    w.write_record(header).expect("in-memory write");
    for p in points {
        w.write_record([
            p.label.clone(),
            p.runs.len().to_string(),
            format!("{:.6}", p.mean_final_window_ratio()),
            format!("{:.6}", p.mean_final_cumulative_ratio()),
            format!("{:.6}", p.mean_volatility()),
            format!("{:.4}", p.csa_stable_fraction()),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Uniformly random permutation of `0..n` without fixed points (`n >= 2`).
pub fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}
