//! Scenario files are TOML. Uncoded example:
//!
//! ```toml
//! K = 4
//! Us = 0.0
//! mu = 1.0
//! gamma = "inf"
//! horizon = 500.0
//! replications = 4
//! seed = 7
//!
//! [[arrivals]]
//! pieces = [1, 2]
//! rate = 1.0
//!
//! [[arrivals]]
//! pieces = [3, 4]
//! rate = 1.0
//!
//! [sweep]
//! param = "lambda[1,2]"
//! values = [1.0, 2.0, 3.0]
//! ```
//!
//! Coded scenarios set `coded = true` and `q`, and declare arrivals by
//! `vectors = [[...], ...]` (generator rows; empty list = blank peers) or
//! `uniform = true` (one uniformly random vector each). Semantic errors are
//! anchored to the line of the offending key.

use std::ops::Range;
use std::path::Path;

use serde::Deserialize;
use toml::Spanned;

use pieceswarm::coding::{CodedArrival, CodedParams};
use pieceswarm::model::{Departure, PieceSet, SwarmParams};
use pieceswarm::policy::Policy;
use pieceswarm::simulate::Setting;

/// Configuration failure, anchored to a source line when one is known.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.path, line, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// A fully resolved experiment. Together with the seed this determines every
/// output byte.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub setting: Setting,
    pub horizon: f64,
    pub replications: u32,
    pub seed: u64,
    pub designated: u32,
    pub sample_grid: f64,
    pub sample_stride: u64,
    pub sweep: Option<Sweep>,
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// The single scalar a sweep varies. The `Rate` suffix is deliberate:
/// `Seed` alone would read as the RNG seed.
#[allow(clippy::enum_variant_names)]
#[derive(Clone, Debug, PartialEq)]
pub enum SweepParam {
    /// Arrival rate of one declared class.
    ClassRate(PieceSet),
    SeedRate,
    ContactRate,
    DepartureRate,
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParam::ClassRate(set) => {
                let pieces: Vec<String> = set.pieces().map(|p| p.to_string()).collect();
                write!(f, "lambda[{}]", pieces.join(","))
            }
            SweepParam::SeedRate => f.write_str("Us"),
            SweepParam::ContactRate => f.write_str("mu"),
            SweepParam::DepartureRate => f.write_str("gamma"),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(rename = "K")]
    k: u32,
    #[serde(rename = "Us", default)]
    us: f64,
    mu: f64,
    gamma: Spanned<GammaValue>,
    #[serde(default)]
    coded: Option<Spanned<bool>>,
    #[serde(default)]
    q: Option<Spanned<u16>>,
    #[serde(default)]
    policy: Option<Spanned<String>>,
    #[serde(default)]
    arrivals: Vec<ArrivalEntry>,
    #[serde(default)]
    horizon: Option<f64>,
    #[serde(default)]
    replications: Option<u32>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    designated_piece: Option<Spanned<u32>>,
    #[serde(default)]
    sample_grid: Option<f64>,
    #[serde(default)]
    sample_stride: Option<u64>,
    #[serde(default)]
    sweep: Option<SweepEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GammaValue {
    Rate(f64),
    Word(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrivalEntry {
    #[serde(default)]
    pieces: Option<Spanned<Vec<u32>>>,
    #[serde(default)]
    vectors: Option<Spanned<Vec<Vec<u16>>>>,
    #[serde(default)]
    uniform: Option<Spanned<bool>>,
    rate: Spanned<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepEntry {
    param: Spanned<String>,
    values: Vec<f64>,
}

fn line_of(src: &str, byte: usize) -> usize {
    src[..byte.min(src.len())]
        .bytes()
        .filter(|&b| b == b'\n')
        .count()
        + 1
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let shown = path.display().to_string();
    let plain = |message: String| ConfigError {
        path: shown.clone(),
        line: None,
        message,
    };
    let src =
        std::fs::read_to_string(path).map_err(|e| plain(format!("cannot read config: {e}")))?;
    // Syntax and unknown-key errors come out of the TOML layer already
    // annotated with line and column.
    let file: ScenarioFile = toml::from_str(&src).map_err(|e| plain(e.to_string()))?;
    resolve(&shown, &src, file)
}

fn resolve(path: &str, src: &str, file: ScenarioFile) -> Result<Scenario, ConfigError> {
    let at = |span: Range<usize>, message: String| ConfigError {
        path: path.to_string(),
        line: Some(line_of(src, span.start)),
        message,
    };
    let plain = |message: String| ConfigError {
        path: path.to_string(),
        line: None,
        message,
    };

    let k = file.k;
    let departure = match file.gamma.get_ref() {
        GammaValue::Rate(g) if *g > 0.0 && g.is_finite() => Departure::Finite(*g),
        GammaValue::Rate(_) => {
            return Err(at(
                file.gamma.span(),
                "gamma must be a positive rate or the literal \"inf\"".into(),
            ))
        }
        GammaValue::Word(w) if w == "inf" => Departure::Infinite,
        GammaValue::Word(w) => {
            return Err(at(
                file.gamma.span(),
                format!("unrecognized gamma value {w:?}; use a positive rate or \"inf\""),
            ))
        }
    };
    let coded = file.coded.as_ref().map(|s| *s.get_ref()).unwrap_or(false);

    if file.arrivals.is_empty() {
        return Err(plain(
            "no arrival classes declared; at least one [[arrivals]] entry is required".into(),
        ));
    }

    let policy = match &file.policy {
        None => Policy::RandomUseful,
        Some(name) if coded => {
            return Err(at(
                name.span(),
                "piece-selection policy applies only to uncoded scenarios".into(),
            ))
        }
        Some(name) => match name.get_ref().as_str() {
            "random-useful" => Policy::RandomUseful,
            "rarest-first" => Policy::RarestFirst,
            "sequential" => Policy::Sequential,
            other => {
                return Err(at(
                    name.span(),
                    format!(
                        "unknown policy {other:?}; expected random-useful, rarest-first, or \
                         sequential"
                    ),
                ))
            }
        },
    };

    let setting = if coded {
        let q = match &file.q {
            Some(q) => *q.get_ref(),
            None => {
                let span = file.coded.as_ref().unwrap().span();
                return Err(at(
                    span,
                    "coded scenarios must declare the field size q".into(),
                ));
            }
        };
        let mut arrivals = Vec::new();
        for entry in &file.arrivals {
            if let Some(p) = &entry.pieces {
                return Err(at(
                    p.span(),
                    "pieces applies only to uncoded scenarios; use vectors or uniform".into(),
                ));
            }
            let rate = *entry.rate.get_ref();
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(at(
                    entry.rate.span(),
                    "arrival rate must be positive".into(),
                ));
            }
            let arrival = match (&entry.vectors, &entry.uniform) {
                (Some(v), Some(_)) => {
                    return Err(at(
                        v.span(),
                        "declare either vectors or uniform for a coded class, not both".into(),
                    ))
                }
                (Some(v), None) => CodedArrival::Explicit(v.get_ref().clone()),
                (None, Some(u)) if *u.get_ref() => CodedArrival::UniformVector,
                (None, Some(u)) => {
                    return Err(at(
                        u.span(),
                        "uniform = false is meaningless; omit the key instead".into(),
                    ))
                }
                (None, None) => {
                    return Err(at(
                        entry.rate.span(),
                        "coded arrival class needs vectors = [...] or uniform = true".into(),
                    ))
                }
            };
            arrivals.push((arrival, rate));
        }
        let params = CodedParams {
            k,
            q,
            seed_rate: file.us,
            contact_rate: file.mu,
            departure,
            arrivals,
        };
        params.validate().map_err(|e| plain(e.to_string()))?;
        Setting::Coded(params)
    } else {
        if let Some(q) = &file.q {
            return Err(at(q.span(), "q applies only to coded scenarios".into()));
        }
        let mut arrivals: Vec<(PieceSet, f64)> = Vec::new();
        for entry in &file.arrivals {
            let rate = *entry.rate.get_ref();
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(at(
                    entry.rate.span(),
                    "arrival rate must be positive".into(),
                ));
            }
            if let Some(v) = &entry.vectors {
                return Err(at(
                    v.span(),
                    "coded arrival fields require coded = true".into(),
                ));
            }
            if let Some(u) = &entry.uniform {
                return Err(at(
                    u.span(),
                    "coded arrival fields require coded = true".into(),
                ));
            }
            let pieces = entry.pieces.as_ref().ok_or_else(|| {
                at(
                    entry.rate.span(),
                    "arrival class needs a pieces list in uncoded mode".into(),
                )
            })?;
            let set = PieceSet::from_pieces(pieces.get_ref().iter().copied(), k)
                .map_err(|e| at(pieces.span(), e.to_string()))?;
            if departure == Departure::Infinite && set.is_full(k) {
                return Err(at(
                    pieces.span(),
                    "peers holding all K pieces depart immediately when gamma = \"inf\"; this \
                     arrival class is forbidden"
                        .into(),
                ));
            }
            if arrivals.iter().any(|(s, _)| *s == set) {
                return Err(at(
                    pieces.span(),
                    "duplicate arrival class; merge the rates into one entry".into(),
                ));
            }
            arrivals.push((set, rate));
        }
        let params = SwarmParams {
            k,
            seed_rate: file.us,
            contact_rate: file.mu,
            departure,
            arrivals,
        };
        params.validate().map_err(|e| plain(e.to_string()))?;
        Setting::Uncoded { params, policy }
    };

    let horizon = file.horizon.unwrap_or(1000.0);
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(plain("horizon must be positive and finite".into()));
    }
    let replications = file.replications.unwrap_or(1);
    if replications == 0 {
        return Err(plain("replications must be at least 1".into()));
    }
    let designated = match &file.designated_piece {
        None => 1,
        Some(d) => {
            let d_val = *d.get_ref();
            if !(1..=k).contains(&d_val) {
                return Err(at(
                    d.span(),
                    format!("designated_piece must lie in 1..={k}"),
                ));
            }
            d_val
        }
    };
    let sample_grid = file.sample_grid.unwrap_or(horizon / 100.0);
    if !(sample_grid >= 0.0 && sample_grid.is_finite()) {
        return Err(plain("sample_grid must be nonnegative and finite".into()));
    }

    let sweep = match &file.sweep {
        None => None,
        Some(entry) => {
            let Setting::Uncoded { params, .. } = &setting else {
                return Err(at(
                    entry.param.span(),
                    "sweeps support uncoded scenarios only".into(),
                ));
            };
            let raw = entry.param.get_ref().as_str();
            let param = match raw {
                "Us" => SweepParam::SeedRate,
                "mu" => SweepParam::ContactRate,
                "gamma" => SweepParam::DepartureRate,
                _ => {
                    let inner = raw
                        .strip_prefix("lambda[")
                        .and_then(|r| r.strip_suffix(']'))
                        .ok_or_else(|| {
                            at(
                                entry.param.span(),
                                format!(
                                    "unknown sweep parameter {raw:?}; expected Us, mu, gamma, \
                                     or lambda[p1,p2,...]"
                                ),
                            )
                        })?;
                    let pieces: Vec<u32> = inner
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse::<u32>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| {
                            at(
                                entry.param.span(),
                                format!("bad piece list in {raw:?}: {e}"),
                            )
                        })?;
                    let set = PieceSet::from_pieces(pieces, k)
                        .map_err(|e| at(entry.param.span(), e.to_string()))?;
                    if !params.arrivals.iter().any(|(s, _)| *s == set) {
                        return Err(at(
                            entry.param.span(),
                            format!(
                                "sweep parameter {raw} does not match any declared arrival class"
                            ),
                        ));
                    }
                    SweepParam::ClassRate(set)
                }
            };
            if entry.values.is_empty() {
                return Err(at(
                    entry.param.span(),
                    "sweep values must be non-empty".into(),
                ));
            }
            for &v in &entry.values {
                let ok = match param {
                    SweepParam::SeedRate => v >= 0.0 && v.is_finite(),
                    _ => v > 0.0 && v.is_finite(),
                };
                if !ok {
                    return Err(at(
                        entry.param.span(),
                        format!("sweep value {v} is out of range for {param}"),
                    ));
                }
            }
            Some(Sweep {
                param,
                values: entry.values.clone(),
            })
        }
    };

    Ok(Scenario {
        setting,
        horizon,
        replications,
        seed: file.seed.unwrap_or(0),
        designated,
        sample_grid,
        sample_stride: file.sample_stride.unwrap_or(0),
        sweep,
    })
}
