//! Per-head slope schedules.
//!
//! The default schedule is geometric: head `n` (1-based) of `H` receives
//! `2^(-8n/H)`. Ablations either give every head the same exponent or replace
//! the exponent of selected heads.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rule producing one slope per attention head. Exponents are powers of two:
/// an exponent `h` means slope `2^(-h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SlopeSchedule {
    Geometric {
        heads: usize,
    },
    #[serde(rename = "uniform")]
    UniformExponent {
        h: f64,
        heads: usize,
    },
    Replaced {
        base: Box<SlopeSchedule>,
        /// 0-based head index to exponent.
        #[serde(with = "head_keys")]
        overrides: BTreeMap<usize, f64>,
    },
}

impl SlopeSchedule {
    pub fn heads(&self) -> usize {
        match self {
            SlopeSchedule::Geometric { heads } | SlopeSchedule::UniformExponent { heads, .. } => {
                *heads
            }
            SlopeSchedule::Replaced { base, .. } => base.heads(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SlopeSchedule::Geometric { heads } => {
                if *heads == 0 {
                    return Err(Error::config("slope schedule needs at least one head"));
                }
            }
            SlopeSchedule::UniformExponent { h, heads } => {
                if *heads == 0 {
                    return Err(Error::config("slope schedule needs at least one head"));
                }
                check_exponent(*h)?;
            }
            SlopeSchedule::Replaced { base, overrides } => {
                base.validate()?;
                let heads = base.heads();
                for (&head, &exp) in overrides {
                    if head >= heads {
                        return Err(Error::config(format!(
                            "slope override for head index {head} is out of range for {heads} heads"
                        )));
                    }
                    check_exponent(exp)?;
                }
            }
        }
        Ok(())
    }

    /// Same schedule with a different head count (overrides are kept as-is).
    pub fn with_heads(&self, new_heads: usize) -> SlopeSchedule {
        match self {
            SlopeSchedule::Geometric { .. } => SlopeSchedule::Geometric { heads: new_heads },
            SlopeSchedule::UniformExponent { h, .. } => SlopeSchedule::UniformExponent {
                h: *h,
                heads: new_heads,
            },
            SlopeSchedule::Replaced { base, overrides } => SlopeSchedule::Replaced {
                base: Box::new(base.with_heads(new_heads)),
                overrides: overrides.clone(),
            },
        }
    }

    /// Parses the command-line schedule grammar for `heads` heads:
    ///
    /// * `default` or `geometric`: the geometric schedule
    /// * `h=<exp>`: every head gets slope `2^(-exp)`
    /// * `<from>t<to>[,<from>t<to>...]`: geometric base where the head whose
    ///   default exponent is `from` gets exponent `to` (e.g. `8t2`, `6t9`)
    pub fn parse(text: &str, heads: usize) -> Result<SlopeSchedule> {
        let text = text.trim();
        let schedule = if text == "default" || text == "geometric" {
            SlopeSchedule::Geometric { heads }
        } else if let Some(rest) = text.strip_prefix("h=") {
            let h: f64 = rest
                .parse()
                .map_err(|_| Error::config(format!("bad exponent in '{text}'; {GRAMMAR}")))?;
            SlopeSchedule::UniformExponent { h, heads }
        } else {
            let mut overrides = BTreeMap::new();
            for token in text.split(',') {
                let (head, to) = parse_replacement(token.trim(), heads)?;
                overrides.insert(head, to);
            }
            SlopeSchedule::Replaced {
                base: Box::new(SlopeSchedule::Geometric { heads }),
                overrides,
            }
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Accepted `--schedule` grammar, shared with the CLI help text.
pub const GRAMMAR: &str =
    "schedule grammar: 'default' | 'h=<exp>' | '<from>t<to>' (comma-separable, e.g. 8t2,6t9)";

fn check_exponent(exp: f64) -> Result<()> {
    if exp.is_finite() && exp > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("slope exponent must be > 0, got {exp}")))
    }
}

fn parse_replacement(token: &str, heads: usize) -> Result<(usize, f64)> {
    let bad = || Error::config(format!("malformed replacement '{token}'; {GRAMMAR}"));
    let (from, to) = token.split_once('t').ok_or_else(bad)?;
    let from: u32 = from.parse().map_err(|_| bad())?;
    let to: f64 = to.parse().map_err(|_| bad())?;
    // head n (1-based) has default exponent 8n/H, so from = 8n/H
    let scaled = from as usize * heads;
    if from == 0 || !scaled.is_multiple_of(8) || scaled / 8 > heads {
        return Err(Error::config(format!(
            "no head of a {heads}-head geometric schedule has exponent {from}"
        )));
    }
    Ok((scaled / 8 - 1, to))
}

impl fmt::Display for SlopeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlopeSchedule::Geometric { heads } => write!(f, "geometric(H={heads})"),
            SlopeSchedule::UniformExponent { h, heads } => write!(f, "h={h}(H={heads})"),
            SlopeSchedule::Replaced { base, overrides } => {
                write!(f, "{base}")?;
                for (head, exp) in overrides {
                    write!(f, "[head={}->2^-{exp}]", head + 1)?;
                }
                Ok(())
            }
        }
    }
}

/// JSON object keys are strings; head indices are parsed from them.
mod head_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        let as_str: BTreeMap<String, f64> = map.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        as_str.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("head index '{k}' is not an integer")))
            })
            .collect()
    }
}

/// One positive slope per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SlopeVector(Vec<f64>);

impl SlopeVector {
    pub fn new(slopes: Vec<f64>) -> Result<Self> {
        if slopes.is_empty() {
            return Err(Error::config("slope vector must not be empty"));
        }
        if let Some(bad) = slopes.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::config(format!("slopes must be positive, got {bad}")));
        }
        Ok(SlopeVector(slopes))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, head: usize) -> Option<f64> {
        self.0.get(head).copied()
    }
}

impl TryFrom<Vec<f64>> for SlopeVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SlopeVector::new(v)
    }
}

impl From<SlopeVector> for Vec<f64> {
    fn from(v: SlopeVector) -> Self {
        v.0
    }
}

/// `2^(-exp)`, exact when `exp` is an integer.
fn pow2_neg(exp: f64) -> f64 {
    if exp.fract() == 0.0 && exp.abs() < 1000.0 {
        2.0_f64.powi(-(exp as i32))
    } else {
        2.0_f64.powf(-exp)
    }
}

pub fn slopes_for_heads(schedule: &SlopeSchedule) -> Result<SlopeVector> {
    schedule.validate()?;
    let slopes = match schedule {
        SlopeSchedule::Geometric { heads } => (1..=*heads)
            .map(|n| pow2_neg(8.0 * n as f64 / *heads as f64))
            .collect(),
        SlopeSchedule::UniformExponent { h, heads } => vec![pow2_neg(*h); *heads],
        SlopeSchedule::Replaced { base, overrides } => {
            let mut slopes = slopes_for_heads(base)?.0;
            for (&head, &exp) in overrides {
                slopes[head] = pow2_neg(exp);
            }
            slopes
        }
    };
    SlopeVector::new(slopes)
}

pub fn scale_slopes(v: &SlopeVector, factor: f64) -> Result<SlopeVector> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::config(format!("slope factor must be > 0, got {factor}")));
    }
    SlopeVector::new(v.0.iter().map(|s| s * factor).collect())
}
