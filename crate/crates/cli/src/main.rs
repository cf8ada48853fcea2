mod config;

use std::fs::File;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{usage, RunConfig, UsageError};
use lcml_core::{
    check, compute_stats, csv_file_name, enumerate_stable, parallel_map, run_with_sink, sweep,
    sweep_table, write_csv, Arrangement, Assignment, ExperimentSpec, MatrixUsed, RewardMatrix,
    SourceKind, SourceSpec, SweepValues,
};

const OUT_DIR_ENV: &str = "LCML_OUT_DIR";
const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_UNSTABLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "lcml",
    version,
    about = "Chaos-driven relay learning with stable exchange"
)]
struct Cli {
    /// More log output (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write one CSV and summary per replication.
    Run(RunArgs),
    /// Run an experiment once per value of one parameter.
    Sweep(SweepArgs),
    /// Check an assignment against a reward matrix.
    Oracle(OracleArgs),
    /// Print mean, variance and lag-1 autocorrelation of a signal source.
    SourceStats(SourceStatsArgs),
    /// Print the default configuration.
    Defaults,
}

#[derive(Args)]
struct CommonRunArgs {
    /// TOML configuration; defaults apply to missing keys.
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set policy.mode=ASA`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for replications.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory [env: LCML_OUT_DIR].
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// num_requesters, source, c or exchange_period.
    #[arg(long)]
    param: String,
    /// Values to run; sources use the `kind[:params]` syntax.
    #[arg(long = "value", required = true)]
    values: Vec<String>,
}

#[derive(Args)]
struct OracleArgs {
    /// Matrix file: a `K M` header line followed by K rows.
    matrix: PathBuf,
    /// Assignment literal such as `1:A,2:B`.
    assignment: Option<String>,
    #[arg(long, default_value = "CSA")]
    mode: String,
    /// Ambiguity tolerance for ASA.
    #[arg(long, default_value_t = 0.1)]
    c: f64,
    /// List every stable assignment of the matrix.
    #[arg(long)]
    enumerate: bool,
}

#[derive(Args)]
struct SourceStatsArgs {
    /// `logistic[:r[,x0]]`, `tent[:mu[,x0]]`, `uniform[:lo,hi]`,
    /// `gaussian[:mean,std]` or `file:PATH`.
    source: String,
    /// Number of samples.
    #[arg(short, default_value_t = 100_000)]
    n: usize,
    /// Skip standardization.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(core) = cause.downcast_ref::<lcml_core::Error>() {
            return match core {
                lcml_core::Error::Config(_)
                | lcml_core::Error::Argument(_)
                | lcml_core::Error::Format { .. }
                | lcml_core::Error::SizeGuard(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

fn init_logging(verbose: u8, configured: log::LevelFilter) {
    let level = match verbose {
        0 => configured,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Run(args) => cmd_run(cli.verbose, args),
        Command::Sweep(args) => cmd_sweep(cli.verbose, args),
        Command::Oracle(args) => {
            init_logging(cli.verbose, log::LevelFilter::Warn);
            cmd_oracle(args)
        }
        Command::SourceStats(args) => {
            init_logging(cli.verbose, log::LevelFilter::Warn);
            cmd_source_stats(args)
        }
        Command::Defaults => {
            print!("{}", config::defaults_toml());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn prepare(verbose: u8, args: &CommonRunArgs) -> Result<(RunConfig, ExperimentSpec, PathBuf)> {
    let config = config::load(args.config.as_deref(), &args.set)?;
    init_logging(verbose, config.log_level().map_err(usage)?);
    let spec = config.to_spec().map_err(usage)?;
    // Read recordings once and surface missing files before any output.
    let spec = ExperimentSpec {
        source: spec.source.resolved().map_err(|e| usage(e.into()))?,
        ..spec
    };
    if args.jobs == 0 {
        return Err(usage(anyhow!("--jobs must be at least 1")));
    }
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("lcml-out"));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    Ok((config, spec, out_dir))
}

fn cmd_run(verbose: u8, args: &RunArgs) -> Result<ExitCode> {
    let (config, spec, out_dir) = prepare(verbose, &args.common)?;
    let outputs = parallel_map(args.common.jobs, spec.replications, |rep| {
        let seed = spec.replication_seed(rep);
        let csv_path = out_dir.join(csv_file_name(&config.run_id, seed));
        let mut writer = csv::Writer::from_path(&csv_path)?;
        let result = run_with_sink(&spec, rep, |row| Ok(writer.serialize(row)?));
        writer.flush().map_err(|e| lcml_core::Error::Io {
            path: csv_path.clone(),
            source: e,
        })?;
        let summary = result?;
        let summary_path = csv_path.with_extension("summary.txt");
        std::fs::write(&summary_path, format!("{summary}\n")).map_err(|e| {
            lcml_core::Error::Io {
                path: summary_path,
                source: e,
            }
        })?;
        Ok((csv_path, summary))
    })
    .context("run failed; rows produced before the failure were written")?;
    let mut out = std::io::stdout().lock();
    for (i, (path, summary)) in outputs.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        writeln!(out, "csv = {}", path.display())?;
        writeln!(out, "{summary}")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn cmd_sweep(verbose: u8, args: &SweepArgs) -> Result<ExitCode> {
    let (config, spec, out_dir) = prepare(verbose, &args.common)?;
    let values: Vec<&str> = args.values.iter().map(String::as_str).collect();
    let values = SweepValues::parse(&args.param, &values, &spec.source)?;
    let points = sweep(&spec, &values, args.common.jobs)?;
    for point in &points {
        let run_id = format!(
            "{}_{}-{}",
            config.run_id,
            values.parameter(),
            file_label(&point.label)
        );
        for run in &point.runs {
            let path = out_dir.join(csv_file_name(&run_id, run.summary.seed));
            let file =
                File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
            write_csv(&run.rows, file)?;
        }
    }
    let table = sweep_table(values.parameter(), &points);
    let table_path = out_dir.join(format!("{}_sweep.csv", config.run_id));
    std::fs::write(&table_path, &table)
        .with_context(|| format!("cannot write {}", table_path.display()))?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(args: &OracleArgs) -> Result<ExitCode> {
    let mu = RewardMatrix::load(&args.matrix).map_err(|e| usage(e.into()))?;
    let mode: Arrangement = args
        .mode
        .parse()
        .map_err(|e: lcml_core::Error| usage(e.into()))?;
    let mut stable = true;
    match &args.assignment {
        Some(literal) => {
            let f =
                Assignment::parse_literal(literal, mu.num_sns()).map_err(|e| usage(e.into()))?;
            let report = check(&f, &mu, mode, args.c)
                .map_err(|e| usage(e.into()))?
                .with_matrix(MatrixUsed::TrueMu);
            println!("assignment = {f}");
            println!("{report}");
            stable = report.stable;
        }
        None if !args.enumerate => {
            return Err(usage(anyhow!("give an assignment literal or --enumerate")));
        }
        None => {}
    }
    if args.enumerate {
        let all = enumerate_stable(&mu, mode, args.c)?;
        println!("stable_assignments = {}", all.len());
        for f in &all {
            println!("stable = {f}");
        }
        if args.assignment.is_none() {
            stable = !all.is_empty();
        }
    }
    Ok(if stable {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_UNSTABLE)
    })
}

fn cmd_source_stats(args: &SourceStatsArgs) -> Result<ExitCode> {
    let kind: SourceKind = args
        .source
        .parse()
        .map_err(|e: lcml_core::Error| usage(e.into()))?;
    let spec = SourceSpec {
        kind,
        standardize: !args.raw,
        ..SourceSpec::new(SourceKind::Uniform { lo: 0.0, hi: 1.0 })
    }
    .with_amplitude(args.amplitude);
    let spec = spec.resolved().map_err(|e| usage(e.into()))?;
    let mut source = spec.build(args.seed).map_err(|e| usage(e.into()))?;
    let stats = compute_stats(&mut source, args.n)?;
    println!("source = {spec}");
    println!("{stats}");
    Ok(ExitCode::SUCCESS)
}
