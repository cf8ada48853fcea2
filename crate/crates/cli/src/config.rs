//! TOML run configuration. Every key has a default, unknown keys are
//! rejected, and `--set section.key=value` overrides are applied to the
//! parsed table before it is checked.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use lcml_core::{
    Arrangement, EnvChange, EnvMatrix, ExchangePolicy, ExperimentSpec, LearnerParams, MatrixSource,
    NetworkConfig, RewardMatrix, RhoMode, SourceKind, SourceSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub iterations: u64,
    pub exchange_period: u64,
    pub window: usize,
    pub replications: usize,
    pub collisions_count_as_trials: bool,
    pub oracle: bool,
    pub perfect_knowledge: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restart_drop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volatility_from: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub verbosity: String,
    pub network: NetworkSection,
    pub matrix: MatrixSection,
    pub source: SourceSection,
    pub learner: LearnerSection,
    pub policy: PolicySection,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub env_changes: Vec<EnvChangeSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub num_sns: usize,
    pub num_relays: usize,
    pub seed: u64,
    pub allow_more_relays: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    /// `uniform`, `separated` or `file`.
    pub kind: String,
    pub lo: f64,
    pub hi: f64,
    pub gap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    /// `logistic[:r[,x0]]`, `tent[:mu[,x0]]`, `uniform[:lo,hi]`,
    /// `gaussian[:mean,std]` or `file:PATH`.
    pub kind: String,
    pub standardize: bool,
    pub wraparound: bool,
    pub amplitude: f64,
    pub shared_stream: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSection {
    pub alpha: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub rho_mode: String,
    pub rho2_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub mode: String,
    pub c: f64,
    /// Defaults to every source node.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_requesters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_loop_rounds: Option<usize>,
    pub record_trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvChangeSection {
    pub iteration: u64,
    /// `permute`, `regenerate`, `seed:N` or `file:PATH`.
    pub matrix: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ExperimentSpec::new(4, 4, 1);
        RunConfig {
            run_id: "run".into(),
            iterations: spec.iterations,
            exchange_period: spec.exchange_period,
            window: spec.window,
            replications: spec.replications,
            collisions_count_as_trials: spec.collisions_count_as_trials,
            oracle: spec.oracle,
            perfect_knowledge: spec.perfect_knowledge,
            restart_drop: None,
            volatility_from: None,
            out_dir: None,
            verbosity: "warn".into(),
            network: NetworkSection::default(),
            matrix: MatrixSection::default(),
            source: SourceSection::default(),
            learner: LearnerSection::default(),
            policy: PolicySection::default(),
            env_changes: Vec::new(),
        }
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            num_sns: 4,
            num_relays: 4,
            seed: 1,
            allow_more_relays: false,
        }
    }
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            kind: "uniform".into(),
            lo: 0.1,
            hi: 0.9,
            gap: 0.2,
            path: None,
        }
    }
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            kind: "logistic:4".into(),
            standardize: true,
            wraparound: true,
            amplitude: 1.0,
            shared_stream: false,
        }
    }
}

impl Default for LearnerSection {
    fn default() -> Self {
        let p = LearnerParams::default();
        LearnerSection {
            alpha: p.alpha,
            rho1: p.rho1,
            rho2: p.rho2,
            rho_mode: p.rho_mode.to_string(),
            rho2_max: p.rho2_max,
        }
    }
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            mode: "CSA".into(),
            c: 0.1,
            num_requesters: None,
            max_loop_rounds: None,
            record_trace: false,
        }
    }
}

const DEFAULTS_HEADER: &str = "\
# Default run configuration. Optional keys, unset by default:
#   restart_drop = 0.3        clear estimates after a 30% fall from the peak
#   volatility_from = 2500    first iteration of the volatility summary
#   out_dir = \"out\"           output directory (LCML_OUT_DIR, --out-dir)
#   matrix.path = \"mu.txt\"    matrix file when matrix.kind = \"file\"
#   policy.num_requesters = 4 defaults to network.num_sns
#   policy.max_loop_rounds    defaults to 4 * num_sns * num_relays
#   [[env_changes]] iteration = 3000, matrix = \"permute\" | \"regenerate\" | \"seed:N\" | \"file:PATH\"
";

pub fn defaults_toml() -> String {
    let body = toml::to_string(&RunConfig::default()).expect("defaults serialize");
    format!("{DEFAULTS_HEADER}\n{body}")
}

/// A parse or validation failure in user input (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(UsageError(e))
}

/// Reads `path` (if any), applies `overrides` and deserializes strictly.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let (text, origin) = match path {
        Some(p) => (
            std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))
                .map_err(usage)?,
            p.display().to_string(),
        ),
        None => (String::new(), "<defaults>".to_owned()),
    };
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| usage(anyhow!("{origin}: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o).map_err(usage)?;
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| usage(anyhow!("{origin}: {e}")))?;
    Ok(config)
}

/// Applies `a.b.c=value`. The value is read as TOML, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override key `{key}`: `{p}` is not a section"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

impl RunConfig {
    pub fn to_spec(&self) -> Result<ExperimentSpec> {
        let k = self.network.num_sns;
        let matrix = match self.matrix.kind.as_str() {
            "uniform" => MatrixSource::Uniform {
                lo: self.matrix.lo,
                hi: self.matrix.hi,
            },
            "separated" => MatrixSource::Separated {
                gap: self.matrix.gap,
                lo: self.matrix.lo,
                hi: self.matrix.hi,
            },
            "file" => {
                let path = self.matrix.path.as_ref().ok_or_else(|| {
                    anyhow!("matrix.path is required when matrix.kind = \"file\"")
                })?;
                MatrixSource::Explicit(RewardMatrix::load(path)?)
            }
            other => bail!("matrix.kind = \"{other}\": expected uniform, separated or file"),
        };
        let kind: SourceKind = self
            .source
            .kind
            .parse()
            .with_context(|| "source.kind".to_owned())?;
        let rho_mode: RhoMode = self
            .learner
            .rho_mode
            .parse()
            .with_context(|| "learner.rho_mode".to_owned())?;
        let mode: Arrangement = self
            .policy
            .mode
            .parse()
            .with_context(|| "policy.mode".to_owned())?;
        let env_changes = self
            .env_changes
            .iter()
            .map(|c| {
                Ok(EnvChange {
                    iteration: c.iteration,
                    matrix: parse_env_matrix(&c.matrix)
                        .with_context(|| format!("env_changes at iteration {}", c.iteration))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ExperimentSpec {
            network: NetworkConfig {
                num_sns: k,
                num_relays: self.network.num_relays,
                seed: self.network.seed,
                allow_more_relays: self.network.allow_more_relays,
            },
            matrix,
            source: SourceSpec {
                kind,
                standardize: self.source.standardize,
                wraparound: self.source.wraparound,
                amplitude: self.source.amplitude,
            },
            shared_stream: self.source.shared_stream,
            learner: LearnerParams {
                alpha: self.learner.alpha,
                rho1: self.learner.rho1,
                rho2: self.learner.rho2,
                rho_mode,
                rho2_max: self.learner.rho2_max,
            },
            policy: ExchangePolicy {
                mode,
                c: self.policy.c,
                num_requesters: self.policy.num_requesters.unwrap_or(k),
                max_loop_rounds: self.policy.max_loop_rounds,
                record_trace: self.policy.record_trace,
            },
            iterations: self.iterations,
            exchange_period: self.exchange_period,
            window: self.window,
            env_changes,
            replications: self.replications,
            collisions_count_as_trials: self.collisions_count_as_trials,
            oracle: self.oracle,
            perfect_knowledge: self.perfect_knowledge,
            restart_drop: self.restart_drop,
            volatility_from: self.volatility_from,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn log_level(&self) -> Result<log::LevelFilter> {
        self.verbosity.parse().map_err(|_| {
            anyhow!(
                "verbosity = \"{}\": expected off, error, warn, info, debug or trace",
                self.verbosity
            )
        })
    }
}

fn parse_env_matrix(s: &str) -> Result<EnvMatrix> {
    Ok(match s.split_once(':') {
        None if s == "permute" => EnvMatrix::PermuteRelays,
        None if s == "regenerate" => EnvMatrix::Regenerate,
        Some(("seed", n)) => {
            EnvMatrix::Seeded(n.trim().parse().map_err(|_| anyhow!("bad seed `{n}`"))?)
        }
        Some(("file", p)) => EnvMatrix::Explicit(RewardMatrix::load(Path::new(p.trim()))?),
        _ => bail!("matrix = \"{s}\": expected permute, regenerate, seed:N or file:PATH"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = defaults_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert!(parsed.to_spec().is_ok());
    }

    #[test]
    fn defaults_match_the_library() {
        let spec = RunConfig::default().to_spec().unwrap();
        let mut expected = ExperimentSpec::new(4, 4, 1);
        expected.source = SourceSpec::new(SourceKind::Logistic { r: 4.0, x0: None });
        expected.matrix = MatrixSource::Uniform { lo: 0.1, hi: 0.9 };
        assert_eq!(spec, expected);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("iteration = 5").unwrap_err();
        assert!(err.to_string().contains("iteration"), "{err}");
        let err = toml::from_str::<RunConfig>("[policy]\nmod = \"ASA\"").unwrap_err();
        assert!(err.to_string().contains("mod"), "{err}");
    }

    #[test]
    fn overrides_take_precedence() {
        let mut table: toml::Table = "[policy]\nmode = \"CSA\"".parse().unwrap();
        apply_override(&mut table, "policy.mode=ASA").unwrap();
        apply_override(&mut table, "policy.c=0.25").unwrap();
        apply_override(&mut table, "iterations=7").unwrap();
        let config: RunConfig = toml::Value::Table(table).try_into().unwrap();
        assert_eq!(config.policy.mode, "ASA");
        assert_eq!(config.policy.c, 0.25);
        assert_eq!(config.iterations, 7);
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
        let mut t: toml::Table = "iterations = 3".parse().unwrap();
        assert!(apply_override(&mut t, "iterations.x=1").is_err());
    }

    #[test]
    fn env_changes_parse() {
        assert_eq!(
            parse_env_matrix("permute").unwrap(),
            EnvMatrix::PermuteRelays
        );
        assert_eq!(parse_env_matrix("seed:9").unwrap(), EnvMatrix::Seeded(9));
        assert!(parse_env_matrix("shuffle").is_err());
    }

    #[test]
    fn invalid_values_name_their_key() {
        let config = RunConfig {
            iterations: 0,
            ..Default::default()
        };
        let err = config.to_spec().unwrap_err();
        assert!(err.to_string().contains("iterations"), "{err}");
        let mut config = RunConfig::default();
        config.policy.mode = "XSA".into();
        let err = format!("{:#}", config.to_spec().unwrap_err());
        assert!(err.contains("policy.mode"), "{err}");
    }
}
