use std::time::{Duration, Instant};

use lcml_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORACLE_INSTANCES: usize = 200;
const CONVERGENCE_SEEDS: usize = 100;
const COMPARISON_SEEDS: usize = 50;
const ADAPTATION_SEEDS: usize = 100;
const BASE_SEED: u64 = 1000;
/// Signal levels in threshold units: the saturation bound rho1 / (1 - alpha).
const AMPLITUDE: f64 = 100.0;

struct Verdict {
    criterion: u32,
    pass: bool,
    detail: String,
}

fn report(criterion: u32, pass: bool, detail: String) -> Verdict {
    println!(
        "criterion {criterion}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    Verdict {
        criterion,
        pass,
        detail,
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn distinct_matrix(k: usize, m: usize, rng: &mut ChaCha8Rng) -> RewardMatrix {
    loop {
        let mu = RewardMatrix::uniform_random(k, m, 0.0, 1.0, rng).unwrap();
        let mut bits: Vec<u64> = (0..k)
            .flat_map(|s| mu.row(s).iter().map(|p| p.to_bits()).collect::<Vec<_>>())
            .collect();
        bits.sort_unstable();
        if bits.windows(2).all(|w| w[0] != w[1]) {
            return mu;
        }
    }
}

/// Repeated full-requester rounds on the true matrix until a round is quiet.
fn perfect_knowledge_fixed_point(mu: &RewardMatrix) -> Option<Assignment> {
    let k = mu.num_sns();
    let policy = ExchangePolicy::new(Arrangement::Csa, k);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut f = Assignment::empty(k);
    for _ in 0..100 {
        let round = run_exchange(&f, mu, &policy, &mut rng).unwrap();
        f = round.assignment;
        if round.exchange_count == 0 {
            return Some(f);
        }
    }
    None
}

fn oracle_criteria() -> Vec<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(BASE_SEED);
    let (mut violations, mut empty) = (0, 0);
    for _ in 0..ORACLE_INSTANCES {
        let mu = distinct_matrix(4, 4, &mut rng);
        let stable = enumerate_stable(&mu, Arrangement::Csa, 0.0).unwrap();
        empty += stable.is_empty() as usize;
        match perfect_knowledge_fixed_point(&mu) {
            Some(f) if stable.contains(&f) => {}
            _ => violations += 1,
        }
    }
    let elapsed = start.elapsed();
    vec![
        report(
            1,
            violations == 0 && elapsed < Duration::from_secs(60),
            format!("violations={violations}/{ORACLE_INSTANCES} (need 0) runtime={elapsed:.1?} (need <60s)"),
        ),
        report(
            2,
            empty == 0,
            format!("empty_enumerations={empty}/{ORACLE_INSTANCES} (need 0)"),
        ),
    ]
}

/// K = M = 4, rows with gaps of at least 0.2, logistic chaos, CSA, n = 4.
fn convergence_spec(replications: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(4, 4, BASE_SEED);
    spec.matrix = MatrixSource::Separated {
        gap: 0.2,
        lo: 0.05,
        hi: 0.95,
    };
    spec.source =
        SourceSpec::new(SourceKind::Logistic { r: 4.0, x0: None }).with_amplitude(AMPLITUDE);
    spec.learner = LearnerParams::default();
    spec.policy = ExchangePolicy::new(Arrangement::Csa, 4);
    spec.iterations = 5000;
    spec.replications = replications;
    spec
}

fn held_stable_over_tail(rows: &[MetricsRow], tail: u64) -> bool {
    let from = rows.len() as u64 - tail;
    rows.iter()
        .filter(|r| r.iteration >= from)
        .all(|r| r.csa_stable == Some(true))
}

fn convergence_criterion() -> Verdict {
    let start = Instant::now();
    let runs = run_replications(&convergence_spec(CONVERGENCE_SEEDS), jobs()).unwrap();
    let held = runs
        .iter()
        .filter(|r| held_stable_over_tail(&r.rows, 500))
        .count();
    let elapsed = start.elapsed();
    report(
        3,
        held >= 90 && elapsed < Duration::from_secs(300),
        format!("stable_over_final_500={held}/{CONVERGENCE_SEEDS} (need >=90) runtime={elapsed:.1?} (need <300s)"),
    )
}

fn mean_final_window(spec: &ExperimentSpec) -> f64 {
    let runs = run_replications(spec, jobs()).unwrap();
    runs.iter()
        .map(|r| r.summary.final_window_ratio)
        .sum::<f64>()
        / runs.len() as f64
}

fn source_ordering_criterion() -> Verdict {
    let with_source = |kind: SourceKind| ExperimentSpec {
        source: SourceSpec::new(kind).with_amplitude(AMPLITUDE),
        ..convergence_spec(COMPARISON_SEEDS)
    };
    let chaos = mean_final_window(&with_source(SourceKind::Logistic { r: 4.0, x0: None }));
    let uniform = mean_final_window(&with_source(SourceKind::Uniform { lo: 0.0, hi: 1.0 }));
    let g01 = mean_final_window(&with_source(SourceKind::Gaussian {
        mean: 0.0,
        std_dev: 1.0,
    }));
    let g12 = mean_final_window(&with_source(SourceKind::Gaussian {
        mean: 1.0,
        std_dev: 2.0,
    }));
    let worst_gaussian = g01.max(g12);
    let pass = chaos >= uniform - 0.02 && chaos.min(uniform) - worst_gaussian >= 0.05;
    report(
        4,
        pass,
        format!(
            "chaos={chaos:.4} uniform={uniform:.4} gaussian(0,1)={g01:.4} gaussian(1,2)={g12:.4} \
             (need chaos>=uniform-0.02 and min(chaos,uniform)-max(gaussian)>=0.05)"
        ),
    )
}

fn requester_criterion() -> Verdict {
    let with_n = |n: usize| ExperimentSpec {
        policy: ExchangePolicy::new(Arrangement::Csa, n),
        ..convergence_spec(COMPARISON_SEEDS)
    };
    let one = mean_final_window(&with_n(1));
    let all = mean_final_window(&with_n(4));
    report(
        5,
        all > one,
        format!("n=K:{all:.4} n=1:{one:.4} (need n=K > n=1)"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn volatility_criterion() -> Verdict {
    let vol = |mode: Arrangement| {
        let spec = ExperimentSpec {
            policy: ExchangePolicy {
                c: 0.1,
                ..ExchangePolicy::new(mode, 4)
            },
            ..convergence_spec(COMPARISON_SEEDS)
        };
        let runs = run_replications(&spec, jobs()).unwrap();
        median(
            runs.iter()
                .map(|r| volatility(&r.rows, spec.iterations / 2).unwrap().std_dev)
                .collect(),
        )
    };
    let csa = vol(Arrangement::Csa);
    let asa = vol(Arrangement::Asa);
    report(
        6,
        asa < csa,
        format!("median_volatility asa={asa:.5} csa={csa:.5} (need asa < csa)"),
    )
}

/// Six thousand iterations with the relay columns permuted at 3000.
fn adaptation_spec(restart_drop: Option<f64>, replications: usize) -> ExperimentSpec {
    ExperimentSpec {
        iterations: 6000,
        env_changes: vec![EnvChange {
            iteration: ADAPTATION_CHANGE,
            matrix: EnvMatrix::PermuteRelays,
        }],
        restart_drop,
        ..convergence_spec(replications)
    }
}

const ADAPTATION_CHANGE: u64 = 3000;

/// Seeds whose windowed ratio falls by 10% within 200 iterations of the
/// change and ends at 90% or more of the pre-change plateau.
fn adapted_seeds(spec: &ExperimentSpec) -> usize {
    let runs = run_replications(
        &ExperimentSpec {
            oracle: false,
            ..spec.clone()
        },
        jobs(),
    )
    .unwrap();
    let change = ADAPTATION_CHANGE as usize;
    runs.iter()
        .filter(|run| {
            let rows = &run.rows;
            let plateau_rows = &rows[change - 5 * spec.window..change];
            let plateau = plateau_rows.iter().map(|r| r.window_ratio).sum::<f64>()
                / plateau_rows.len() as f64;
            let dip = rows[change..change + 200]
                .iter()
                .map(|r| r.window_ratio)
                .fold(f64::INFINITY, f64::min);
            let recovered = rows.last().unwrap().window_ratio;
            dip <= 0.9 * plateau && recovered >= 0.9 * plateau
        })
        .count()
}

fn adaptation_criterion() -> Verdict {
    let restarted = adapted_seeds(&adaptation_spec(Some(0.3), ADAPTATION_SEEDS));
    let never_reset = adapted_seeds(&adaptation_spec(None, ADAPTATION_SEEDS));
    report(
        7,
        restarted * 100 >= 80 * ADAPTATION_SEEDS,
        format!(
            "drop>=10%_and_recovery>=90%={restarted}/{ADAPTATION_SEEDS} with restart at 30% drop \
             (need >=80); without restart {never_reset}/{ADAPTATION_SEEDS}"
        ),
    )
}

fn exactness_criterion() -> Verdict {
    const TOL: f64 = 1e-12;
    let mut failures = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_owned());
        }
    };

    let update = |c: f64, bit_one: bool, success: bool| {
        let mut tree = ThresholdTree::filled(1, c);
        update_thresholds(
            &mut tree,
            RelayCode(bit_one as u32),
            success,
            0.99,
            1.0,
            &[1.0],
        );
        tree.threshold(0, 0)
    };
    expect(
        "success with B=1",
        (update(0.5, true, true) + 0.505).abs() < TOL,
    );
    expect(
        "failure with B=1",
        (update(0.0, true, false) - 1.0).abs() < TOL,
    );
    expect(
        "success with B=0",
        (update(0.0, false, true) - 1.0).abs() < TOL,
    );

    let mut table = EstimateTable::new(1);
    for s in [true, true, false] {
        table.record_outcome(RelayCode(0), s);
    }
    table.record_outcome(RelayCode(0), true);
    expect(
        "estimate 3/4",
        table.estimate(RelayCode(0)) == 0.75 && table.trials(RelayCode(0)) == 4,
    );
    let mut empty = EstimateTable::new(1);
    empty.record_outcome(RelayCode(1), false);
    expect("estimate 0/1", empty.estimate(RelayCode(1)) == 0.0);

    let mut flex = EstimateTable::new(1);
    for (code, n, ok) in [(0u32, 5, 1), (1, 5, 2)] {
        for i in 0..n {
            flex.record_outcome(RelayCode(code), i < ok);
        }
    }
    expect(
        "flexible step",
        (flexible_rho2(&flex, 0, 1e3) - 0.6 / 1.4).abs() < TOL,
    );
    expect(
        "flexible step without data",
        flexible_rho2(&EstimateTable::new(1), 0, 1e3) == 0.0,
    );

    let mu = RewardMatrix::from_rows(vec![vec![0.9, 0.0], vec![0.8, 0.0], vec![0.0, 0.5]]).unwrap();
    let collided = Assignment::parse_literal("1:A,2:A,3:B", 3).unwrap();
    expect(
        "throughput with collision",
        (expected_throughput(&collided, &mu).unwrap() - 0.5).abs() < TOL,
    );
    expect(
        "collision set",
        resolve_collisions(&collided)
            .into_iter()
            .collect::<Vec<_>>()
            == vec![0, 1],
    );
    let mu2 = RewardMatrix::from_rows(vec![vec![0.7, 0.0], vec![0.0, 0.6]]).unwrap();
    let free = Assignment::parse_literal("1:A,2:B", 2).unwrap();
    expect(
        "throughput collision-free",
        (expected_throughput(&free, &mu2).unwrap() - 1.3).abs() < TOL,
    );

    let alternating: Vec<f64> = (0..1000)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    expect(
        "alternating lag-1",
        (stats_of(&alternating).lag1_autocorrelation + 1.0).abs() < TOL,
    );
    let constant = stats_of(&[2.0; 10]);
    expect(
        "constant stream",
        constant.variance == 0.0 && constant.lag1_autocorrelation == 0.0,
    );
    expect(
        "preference order",
        PreferenceList::from_estimates(&[0.5, 0.5, 0.9]).0 == vec![2, 0, 1],
    );

    // Threshold-bound fuzz over random steps, signs and outcomes.
    let mut rng = ChaCha8Rng::seed_from_u64(BASE_SEED);
    let (alpha, rho_max) = (0.99, 3.0);
    let bound = rho_max / (1.0 - alpha);
    let mut tree = ThresholdTree::new(3);
    let mut worst = 0.0f64;
    for _ in 0..1_000_000 {
        let code = RelayCode(rand::Rng::random_range(&mut rng, 0..8));
        let success = rand::Rng::random(&mut rng);
        let rho1 = rand::Rng::random_range(&mut rng, 0.0..=rho_max);
        let rho2: Vec<f64> = (0..3)
            .map(|_| rand::Rng::random_range(&mut rng, 0.0..=rho_max))
            .collect();
        update_thresholds(&mut tree, code, success, alpha, rho1, &rho2);
        worst = tree.thresholds().iter().fold(worst, |w, c| w.max(c.abs()));
    }
    expect("threshold bound", worst <= bound + 1e-9);

    report(
        8,
        failures.is_empty(),
        format!(
            "failed_checks=[{}] max|C|={worst:.4} bound={bound:.4}",
            failures.join("; ")
        ),
    )
}

fn determinism_criterion() -> Verdict {
    let csv_of = |spec: &ExperimentSpec| {
        let mut buf = Vec::new();
        write_csv(&run_experiment(spec, 0).unwrap().rows, &mut buf).unwrap();
        buf
    };
    let scenarios = [
        convergence_spec(1),
        ExperimentSpec {
            policy: ExchangePolicy {
                c: 0.1,
                ..ExchangePolicy::new(Arrangement::Asa, 4)
            },
            ..convergence_spec(1)
        },
        adaptation_spec(Some(0.3), 1),
    ];
    let identical = scenarios.iter().filter(|s| csv_of(s) == csv_of(s)).count();
    report(
        9,
        identical == scenarios.len(),
        format!("byte_identical={identical}/{} scenarios", scenarios.len()),
    )
}

#[test]
fn acceptance() {
    let mut verdicts = oracle_criteria();
    verdicts.push(convergence_criterion());
    verdicts.push(source_ordering_criterion());
    verdicts.push(requester_criterion());
    verdicts.push(volatility_criterion());
    verdicts.push(adaptation_criterion());
    verdicts.push(exactness_criterion());
    verdicts.push(determinism_criterion());
    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| format!("{}: {}", v.criterion, v.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
