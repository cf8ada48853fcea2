//! Relay selection for source nodes driven by chaotic signals, with a
//! stability-aware exchange of relay holdings.

// Negated comparisons below deliberately reject NaN parameters.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exchange;
pub mod harness;
pub mod learner;
pub mod network;
pub mod oracle;
pub mod rng;
pub mod signal;

pub use error::{Error, Result};
pub use exchange::{
    exchange_round_asa, exchange_round_csa, run_exchange, select_requesters, ExchangePolicy,
    ExchangeRound, TraceEvent,
};
pub use harness::{
    csv_file_name, derangement, parallel_map, run_experiment, run_replications, run_with_sink,
    stable_since, sweep, sweep_table, volatility, write_csv, EnvChange, EnvMatrix, ExperimentSpec,
    MatrixSource, MetricsRow, RunOutput, Simulation, Summary, SweepPoint, SweepValues, Volatility,
};
pub use learner::{
    flexible_rho2, node_index, select_relay, update_thresholds, EstimateTable, LearnerParams,
    PreferenceList, RelayCode, RelayCoding, RhoMode, SnLearner, ThresholdTree,
};
pub use network::{
    expected_throughput, parse_relay_label, relay_label, resolve_collisions, sample_transmission,
    Assignment, NetworkConfig, RelayId, RewardMatrix, SnId, TransmissionOutcome,
};
pub use oracle::{
    check, check_asa, check_csa, enumerate_stable, maximal_assignments, Arrangement, MatrixUsed,
    StabilityReport, Witness, WitnessReason, ENUMERATION_LIMIT,
};
pub use rng::{derive_seed, stream_rng, Stream};
pub use signal::{
    compute_stats, load_chaos_file, read_chaos_samples, stats_of, SignalSource, SourceKind,
    SourceSpec, SourceStats, MAP_BURN_IN,
};
