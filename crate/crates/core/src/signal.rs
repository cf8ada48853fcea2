//! Streams of real-valued signal levels consumed by the threshold
//! comparisons: replayed chaos recordings, surrogate chaotic maps and
//! computer-generated distributions.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Samples used to estimate the long-run moments of a chaotic map.
pub const MAP_BURN_IN: usize = 1_000_000;

const DEFAULT_LOGISTIC_R: f64 = 4.0;
const DEFAULT_TENT_MU: f64 = 1.99;

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    /// Recording on disk: text with one level per line, or raw little-endian
    /// `f64` when the extension is `.f64`.
    ChaosFile {
        path: PathBuf,
    },
    /// Recording already in memory.
    Recorded(Arc<[f64]>),
    /// `x <- r x (1 - x)`. `x0` defaults to a seed-derived point.
    Logistic {
        r: f64,
        x0: Option<f64>,
    },
    /// `x <- mu min(x, 1 - x)`.
    Tent {
        mu: f64,
        x0: Option<f64>,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Gaussian {
        mean: f64,
        std_dev: f64,
    },
}

impl SourceKind {
    pub fn name(&self) -> &'static str {
        match self {
            SourceKind::ChaosFile { .. } => "chaos-file",
            SourceKind::Recorded(_) => "recorded",
            SourceKind::Logistic { .. } => "logistic",
            SourceKind::Tent { .. } => "tent",
            SourceKind::Uniform { .. } => "uniform",
            SourceKind::Gaussian { .. } => "gaussian",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceKind::ChaosFile { path } => write!(f, "file:{}", path.display()),
            SourceKind::Recorded(data) => write!(f, "recorded[{}]", data.len()),
            SourceKind::Logistic { r, x0: None } => write!(f, "logistic:{r}"),
            SourceKind::Logistic { r, x0: Some(x0) } => write!(f, "logistic:{r},{x0}"),
            SourceKind::Tent { mu, x0: None } => write!(f, "tent:{mu}"),
            SourceKind::Tent { mu, x0: Some(x0) } => write!(f, "tent:{mu},{x0}"),
            SourceKind::Uniform { lo, hi } => write!(f, "uniform:{lo},{hi}"),
            SourceKind::Gaussian { mean, std_dev } => write!(f, "gaussian:{mean},{std_dev}"),
        }
    }
}

/// Accepts `logistic[:r[,x0]]`, `tent[:mu[,x0]]`, `uniform[:lo,hi]`,
/// `gaussian[:mean,std]` and `file:PATH`.
impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        if name == "file" || name == "chaos-file" {
            let path = args
                .filter(|a| !a.is_empty())
                .ok_or_else(|| Error::argument("file source needs a path: file:PATH"))?;
            return Ok(SourceKind::ChaosFile { path: path.into() });
        }
        let nums: Vec<f64> = match args {
            None => Vec::new(),
            Some(a) => a
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::argument(format!("`{t}` is not a number in `{s}`")))
                })
                .collect::<Result<_>>()?,
        };
        let arity = |range: std::ops::RangeInclusive<usize>| {
            if range.contains(&nums.len()) {
                Ok(())
            } else {
                Err(Error::argument(format!(
                    "wrong number of parameters in `{s}`"
                )))
            }
        };
        let kind = match name {
            "logistic" => {
                arity(0..=2)?;
                SourceKind::Logistic {
                    r: nums.first().copied().unwrap_or(DEFAULT_LOGISTIC_R),
                    x0: nums.get(1).copied(),
                }
            }
            "tent" => {
                arity(0..=2)?;
                SourceKind::Tent {
                    mu: nums.first().copied().unwrap_or(DEFAULT_TENT_MU),
                    x0: nums.get(1).copied(),
                }
            }
            "uniform" => {
                if nums.len() == 1 {
                    arity(2..=2)?;
                }
                arity(0..=2)?;
                SourceKind::Uniform {
                    lo: nums.first().copied().unwrap_or(0.0),
                    hi: nums.get(1).copied().unwrap_or(1.0),
                }
            }
            "gaussian" | "normal" => {
                if nums.len() == 1 {
                    arity(2..=2)?;
                }
                arity(0..=2)?;
                SourceKind::Gaussian {
                    mean: nums.first().copied().unwrap_or(0.0),
                    std_dev: nums.get(1).copied().unwrap_or(1.0),
                }
            }
            other => return Err(Error::argument(format!("unknown source kind `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl SourceKind {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        match *self {
            SourceKind::Logistic { r, x0 } => {
                if !(r > 0.0 && r <= 4.0) {
                    return bad(format!("logistic parameter {r} outside (0, 4]"));
                }
                if let Some(x) = x0.filter(|x| !(*x > 0.0 && *x < 1.0)) {
                    return bad(format!("logistic initial condition {x} outside (0, 1)"));
                }
            }
            SourceKind::Tent { mu, x0 } => {
                if !(mu > 0.0 && mu <= 2.0) {
                    return bad(format!("tent parameter {mu} outside (0, 2]"));
                }
                if let Some(x) = x0.filter(|x| !(*x > 0.0 && *x < 1.0)) {
                    return bad(format!("tent initial condition {x} outside (0, 1)"));
                }
            }
            SourceKind::Uniform { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return bad(format!("uniform bounds [{lo}, {hi}] are empty"));
                }
            }
            SourceKind::Gaussian { mean, std_dev } => {
                if !(std_dev > 0.0) || !mean.is_finite() || !std_dev.is_finite() {
                    return bad(format!("gaussian needs a positive std, got {std_dev}"));
                }
            }
            SourceKind::Recorded(ref data) => {
                if data.is_empty() {
                    return bad("recorded source is empty".into());
                }
            }
            SourceKind::ChaosFile { .. } => {}
        }
        Ok(())
    }
}

/// How to build a signal source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// Affinely map the stream to zero mean and unit variance.
    pub standardize: bool,
    /// Replay recordings cyclically once exhausted.
    pub wraparound: bool,
    /// Multiplier applied to every emitted level, after standardization.
    pub amplitude: f64,
}

impl SourceSpec {
    pub fn new(kind: SourceKind) -> Self {
        SourceSpec {
            kind,
            standardize: true,
            wraparound: true,
            amplitude: 1.0,
        }
    }

    pub fn with_amplitude(self, amplitude: f64) -> Self {
        SourceSpec { amplitude, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::config(format!(
                "amplitude = {} must be finite and > 0",
                self.amplitude
            )));
        }
        self.kind.validate()
    }

    pub fn raw(kind: SourceKind) -> Self {
        SourceSpec {
            standardize: false,
            ..Self::new(kind)
        }
    }

    /// Loads a file-backed kind into memory so that many instances can share
    /// one copy.
    pub fn resolved(&self) -> Result<SourceSpec> {
        match &self.kind {
            SourceKind::ChaosFile { path } => Ok(SourceSpec {
                kind: SourceKind::Recorded(read_chaos_samples(path)?.into()),
                ..self.clone()
            }),
            _ => Ok(self.clone()),
        }
    }

    pub fn build(&self, seed: u64) -> Result<SignalSource> {
        self.build_at(seed, 0)
    }

    /// Builds the stream for one of `count` independent users. Recordings
    /// start at evenly spaced offsets; generators differ through `seed`.
    pub fn build_for(&self, index: usize, count: usize, seed: u64) -> Result<SignalSource> {
        let len = match &self.kind {
            SourceKind::Recorded(data) => data.len(),
            SourceKind::ChaosFile { .. } => return self.resolved()?.build_for(index, count, seed),
            _ => 0,
        };
        let offset = (index * len).checked_div(count).unwrap_or(0);
        self.build_at(seed, offset)
    }

    fn build_at(&self, seed: u64, offset: usize) -> Result<SignalSource> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (generator, moments) = match &self.kind {
            SourceKind::ChaosFile { .. } => {
                return self.resolved()?.build_at(seed, offset);
            }
            SourceKind::Recorded(data) => {
                let stats = population_moments(data);
                (
                    Generator::Recorded {
                        data: data.clone(),
                        pos: offset % data.len(),
                        consumed: 0,
                        wraparound: self.wraparound,
                        warned: false,
                    },
                    stats,
                )
            }
            SourceKind::Logistic { r, x0 } => {
                let x = x0.unwrap_or_else(|| rng.random_range(0.05..0.95));
                let g = Generator::Logistic { r: *r, x };
                let m = if self.standardize {
                    map_moments(&self.kind)
                } else {
                    (0.0, 1.0)
                };
                (g, m)
            }
            SourceKind::Tent { mu, x0 } => {
                let x = x0.unwrap_or_else(|| rng.random_range(0.05..0.95));
                let g = Generator::Tent { mu: *mu, x };
                let m = if self.standardize {
                    map_moments(&self.kind)
                } else {
                    (0.0, 1.0)
                };
                (g, m)
            }
            SourceKind::Uniform { lo, hi } => (
                Generator::Uniform {
                    lo: *lo,
                    hi: *hi,
                    rng,
                },
                ((lo + hi) / 2.0, (hi - lo) / 12f64.sqrt()),
            ),
            SourceKind::Gaussian { mean, std_dev } => (
                Generator::Gaussian {
                    normal: Normal::new(*mean, *std_dev)
                        .map_err(|e| Error::config(e.to_string()))?,
                    rng,
                },
                (*mean, *std_dev),
            ),
        };
        let (shift, scale) = if self.standardize {
            let (mean, std) = moments;
            (mean, if std > 0.0 { 1.0 / std } else { 1.0 })
        } else {
            (0.0, 1.0)
        };
        let scale = scale * self.amplitude;
        Ok(SignalSource {
            generator,
            shift,
            scale,
            label: self.kind.to_string(),
        })
    }
}

impl fmt::Display for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if !self.standardize {
            f.write_str(" (raw)")?;
        }
        if self.amplitude != 1.0 {
            write!(f, " x{}", self.amplitude)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Generator {
    Recorded {
        data: Arc<[f64]>,
        pos: usize,
        consumed: usize,
        wraparound: bool,
        warned: bool,
    },
    Logistic {
        r: f64,
        x: f64,
    },
    Tent {
        mu: f64,
        x: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
        rng: ChaCha8Rng,
    },
    Gaussian {
        normal: Normal<f64>,
        rng: ChaCha8Rng,
    },
}

impl Generator {
    fn next_raw(&mut self) -> Result<f64> {
        match self {
            Generator::Recorded {
                data,
                pos,
                consumed,
                wraparound,
                warned,
            } => {
                if *consumed >= data.len() {
                    if !*wraparound {
                        return Err(Error::ExhaustedSource(*consumed));
                    }
                    if !*warned {
                        log::warn!("recording of {} samples wrapped around", data.len());
                        *warned = true;
                    }
                }
                let v = data[*pos];
                *pos = (*pos + 1) % data.len();
                *consumed += 1;
                Ok(v)
            }
            Generator::Logistic { r, x } => {
                *x = keep_in_unit(*x, *r * *x * (1.0 - *x));
                Ok(*x)
            }
            Generator::Tent { mu, x } => {
                *x = keep_in_unit(*x, *mu * x.min(1.0 - *x));
                Ok(*x)
            }
            Generator::Uniform { lo, hi, rng } => Ok(*lo + (*hi - *lo) * rng.random::<f64>()),
            Generator::Gaussian { normal, rng } => Ok(normal.sample(rng)),
        }
    }
}

/// Finite precision can land an orbit on 0, 1 or a fixed point; push it back
/// onto a generic point of the open interval.
fn keep_in_unit(prev: f64, next: f64) -> f64 {
    if next > 0.0 && next < 1.0 && next != prev {
        return next;
    }
    let nudged = (prev + 0.381_966_011_250_105_1).fract();
    if nudged > 0.0 && nudged < 1.0 {
        nudged
    } else {
        0.5
    }
}

/// A deterministic, single-owner stream of signal levels.
#[derive(Debug, Clone)]
pub struct SignalSource {
    generator: Generator,
    shift: f64,
    scale: f64,
    label: String,
}

impl SignalSource {
    /// In-memory replay of `samples`.
    pub fn from_samples(samples: Vec<f64>, standardize: bool, wraparound: bool) -> Result<Self> {
        SourceSpec {
            kind: SourceKind::Recorded(samples.into()),
            standardize,
            wraparound,
            amplitude: 1.0,
        }
        .build(0)
    }

    pub fn next_level(&mut self) -> Result<f64> {
        Ok((self.generator.next_raw()? - self.shift) * self.scale)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// Replays the recording at `path`.
pub fn load_chaos_file(path: &Path, standardize: bool, wraparound: bool) -> Result<SignalSource> {
    SourceSpec {
        kind: SourceKind::ChaosFile {
            path: path.to_owned(),
        },
        standardize,
        wraparound,
        amplitude: 1.0,
    }
    .build(0)
}

pub fn read_chaos_samples(path: &Path) -> Result<Vec<f64>> {
    let origin = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let samples = if path.extension().is_some_and(|e| e == "f64") {
        if bytes.len() % 8 != 0 {
            return Err(Error::format(
                origin,
                0,
                format!("{} bytes is not a whole number of f64 samples", bytes.len()),
            ));
        }
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::format(origin.clone(), 0, "file is not UTF-8 text"))?;
        parse_chaos_text(&text, &origin)?
    };
    if samples.is_empty() {
        return Err(Error::format(origin, 0, "recording contains no samples"));
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(origin, i + 1, "non-finite sample"));
    }
    Ok(samples)
}

fn parse_chaos_text(text: &str, origin: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = line
            .parse::<f64>()
            .map_err(|_| Error::format(origin, i + 1, format!("`{line}` is not a number")))?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::format(origin, 0, "recording contains no samples"));
    }
    Ok(out)
}

fn population_moments(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Long-run mean and standard deviation of a chaotic map, estimated once per
/// parameter from a fixed reference orbit.
fn map_moments(kind: &SourceKind) -> (f64, f64) {
    type Moments = HashMap<(u8, u64), (f64, f64)>;
    static CACHE: OnceLock<Mutex<Moments>> = OnceLock::new();
    let key = match *kind {
        SourceKind::Logistic { r, .. } => (0, r.to_bits()),
        SourceKind::Tent { mu, .. } => (1, mu.to_bits()),
        _ => unreachable!("only maps need a burn-in estimate"),
    };
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().expect("moment cache").get(&key) {
        return *m;
    }
    let mut g = match *kind {
        SourceKind::Logistic { r, .. } => Generator::Logistic {
            r,
            x: 0.123_456_789,
        },
        SourceKind::Tent { mu, .. } => Generator::Tent {
            mu,
            x: 0.123_456_789,
        },
        _ => unreachable!(),
    };
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..MAP_BURN_IN {
        let x = g.next_raw().expect("maps never exhaust");
        sum += x;
        sum_sq += x * x;
    }
    let n = MAP_BURN_IN as f64;
    let mean = sum / n;
    let moments = (mean, (sum_sq / n - mean * mean).max(0.0).sqrt());
    cache.lock().expect("moment cache").insert(key, moments);
    moments
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceStats {
    pub mean: f64,
    pub variance: f64,
    pub lag1_autocorrelation: f64,
    pub sample_count: usize,
}

impl fmt::Display for SourceStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sample_count = {}", self.sample_count)?;
        writeln!(f, "mean = {}", self.mean)?;
        writeln!(f, "variance = {}", self.variance)?;
        write!(f, "lag1_autocorrelation = {}", self.lag1_autocorrelation)
    }
}

/// Mean, population variance and lag-1 autocorrelation of the next `n`
/// levels. The autocorrelation is the Pearson correlation of consecutive
/// pairs and is reported as 0 for a constant stream.
pub fn compute_stats(source: &mut SignalSource, n: usize) -> Result<SourceStats> {
    if n < 2 {
        return Err(Error::argument(format!("need at least 2 samples, got {n}")));
    }
    let samples = (0..n)
        .map(|_| source.next_level())
        .collect::<Result<Vec<_>>>()?;
    Ok(stats_of(&samples))
}

pub fn stats_of(samples: &[f64]) -> SourceStats {
    let n = samples.len();
    assert!(n >= 2, "stats need at least two samples");
    let (mean, std) = population_moments(samples);

    let (head, tail) = (&samples[..n - 1], &samples[1..]);
    let (mh, _) = population_moments(head);
    let (mt, _) = population_moments(tail);
    let (mut cov, mut vh, mut vt) = (0.0, 0.0, 0.0);
    for (a, b) in head.iter().zip(tail) {
        cov += (a - mh) * (b - mt);
        vh += (a - mh).powi(2);
        vt += (b - mt).powi(2);
    }
    let lag1 = if vh > 0.0 && vt > 0.0 {
        (cov / (vh * vt).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    SourceStats {
        mean,
        variance: std * std,
        lag1_autocorrelation: lag1,
        sample_count: n,
    }
}
