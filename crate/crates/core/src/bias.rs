//! Per-head causal bias matrices.
//!
//! Every distance bias is Toeplitz, so a [`BiasPack`] stores one vector of
//! `L` distance values per head and expands `(i, j)` lookups on demand.
//! Positions above the diagonal (`j > i`) are masked and hold no value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fused_log_series, make_preset, FusionPreset, FusionSpec};
use crate::io_util::{fmt_sig9, write_atomic};

/// Default cap on `H * L * L` for [`build_bias`].
pub const DEFAULT_CELL_CAP: u128 = 16 * 8192 * 8192;

const CACHE_MAGIC: &[u8; 4] = b"MEPB";
const CACHE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BiasMeta {
    pub preset: String,
    pub schedule: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasPack {
    heads: usize,
    len: usize,
    /// `distances[h][d]` is the additive bias of head `h` at distance `d`.
    distances: Vec<Vec<f64>>,
    specs: Vec<FusionSpec>,
    pub meta: BiasMeta,
}

/// Which form of the bias to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasForm {
    Additive,
    Multiplicative,
}

impl BiasPack {
    /// Builds a pack from one fusion spec per head.
    pub fn from_specs(specs: Vec<FusionSpec>, len: usize, meta: BiasMeta) -> Result<Self> {
        if specs.is_empty() || len == 0 {
            return Err(Error::config("bias pack needs at least one head and length >= 1"));
        }
        let distances: Vec<Vec<f64>> = specs.iter().map(|s| fused_log_series(s, len)).collect();
        for (h, row) in distances.iter().enumerate() {
            if let Some(d) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric { head: h, row: d });
            }
        }
        Ok(BiasPack {
            heads: specs.len(),
            len,
            distances,
            specs,
            meta,
        })
    }

    /// Wraps raw per-head distance vectors (no fusion provenance).
    pub fn from_distances(distances: Vec<Vec<f64>>, meta: BiasMeta) -> Result<Self> {
        let len = distances.first().map_or(0, Vec::len);
        if len == 0 || distances.iter().any(|d| d.len() != len) {
            return Err(Error::Shape("distance vectors must share a non-zero length".into()));
        }
        Ok(BiasPack {
            heads: distances.len(),
            len,
            distances,
            specs: Vec::new(),
            meta,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Fusion specs the pack was built from; empty when loaded from a cache.
    pub fn specs(&self) -> &[FusionSpec] {
        &self.specs
    }

    /// Additive bias of `head` at distance `d`.
    pub fn at_distance(&self, head: usize, d: usize) -> f64 {
        self.distances[head][d]
    }

    pub fn distance_values(&self, head: usize) -> &[f64] {
        &self.distances[head]
    }

    /// `additive[head][i][j]`, `None` for masked cells.
    pub fn entry(&self, head: usize, i: usize, j: usize) -> Option<f64> {
        (j <= i && i < self.len).then(|| self.distances[head][i - j])
    }

    /// Dense `L × L` additive matrix of one head; masked cells are `-inf`.
    pub fn dense_additive(&self, head: usize) -> Array2<f64> {
        let row = &self.distances[head];
        Array2::from_shape_fn((self.len, self.len), |(i, j)| {
            if j <= i {
                row[i - j]
            } else {
                f64::NEG_INFINITY
            }
        })
    }
}

/// Materializes the bias of every head of `preset` up to length `len`.
pub fn build_bias(preset: &FusionPreset, heads: usize, len: usize) -> Result<BiasPack> {
    build_bias_capped(preset, heads, len, DEFAULT_CELL_CAP)
}

pub fn build_bias_capped(
    preset: &FusionPreset,
    heads: usize,
    len: usize,
    cap: u128,
) -> Result<BiasPack> {
    if heads == 0 || len == 0 {
        return Err(Error::config("heads and length must be >= 1"));
    }
    if preset.heads() != heads {
        return Err(Error::config(format!(
            "preset '{}' describes {} heads, {heads} requested",
            preset.name(),
            preset.heads()
        )));
    }
    let requested = heads as u128 * len as u128 * len as u128;
    if requested > cap {
        return Err(Error::ResourceCap { requested, cap });
    }
    let specs = (0..heads)
        .map(|h| make_preset(preset, h))
        .collect::<Result<Vec<_>>>()?;
    BiasPack::from_specs(
        specs,
        len,
        BiasMeta {
            preset: preset.name().to_string(),
            schedule: String::new(),
        },
    )
}

/// `exp` of every additive matrix; masked cells are exactly 0.
pub fn multiplicative_view(pack: &BiasPack) -> Vec<Array2<f64>> {
    (0..pack.heads)
        .map(|h| {
            let row: Vec<f64> = pack.distances[h].iter().map(|b| b.exp()).collect();
            Array2::from_shape_fn((pack.len, pack.len), |(i, j)| {
                if j <= i {
                    row[i - j]
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// CSV text for one head: a `# preset=…, head=…, L=…` header, then `L`
/// rows of `L` cells (row = query, column = key); masked cells are empty.
/// Values are multiplied by `scale` in the multiplicative form.
pub fn bias_csv(pack: &BiasPack, head: usize, form: BiasForm, scale: f64) -> Result<String> {
    if head >= pack.heads {
        return Err(Error::config(format!(
            "head {} out of range for {} heads",
            head + 1,
            pack.heads
        )));
    }
    let values: Vec<f64> = match form {
        BiasForm::Additive => pack.distances[head].clone(),
        BiasForm::Multiplicative => pack.distances[head].iter().map(|b| b.exp() * scale).collect(),
    };
    let cells: Vec<String> = values.iter().map(|v| fmt_sig9(*v)).collect();
    let mut out = format!(
        "# preset={}, head={}, L={}",
        pack.meta.preset,
        head + 1,
        pack.len
    );
    if form == BiasForm::Multiplicative && scale != 1.0 {
        let _ = write!(out, ", scale={}", fmt_sig9(scale));
    }
    out.push('\n');
    for i in 0..pack.len {
        for j in 0..pack.len {
            if j > 0 {
                out.push(',');
            }
            if j <= i {
                out.push_str(&cells[i - j]);
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn dump_csv(pack: &BiasPack, head: usize, form: BiasForm, path: &Path) -> Result<()> {
    let text = bias_csv(pack, head, form, 1.0)?;
    write_atomic(path, text.as_bytes())
}

/// Parsed bias CSV: header line and cells (`None` for empty cells).
#[derive(Debug, Clone, PartialEq)]
pub struct CsvGrid {
    pub header: String,
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn parse_csv(text: &str, path: &Path) -> Result<CsvGrid> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|h| h.starts_with('#'))
        .ok_or_else(|| bad("missing '#' header".into()))?
        .to_string();
    let cells = lines
        .enumerate()
        .map(|(row, line)| {
            line.split(',')
                .map(|cell| {
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .map(Some)
                            .map_err(|_| bad(format!("row {row}: bad number '{cell}'")))
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CsvGrid { header, cells })
}

pub fn read_csv(path: &Path) -> Result<CsvGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

/// Binary cache: `MEPB`, version `u16`, `H` and `L` as `u32`, then `H × L`
/// little-endian `f64` distance values.
pub fn encode_cache(pack: &BiasPack) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + pack.heads * pack.len * 8);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(pack.heads as u32).to_le_bytes());
    out.extend_from_slice(&(pack.len as u32).to_le_bytes());
    for row in &pack.distances {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cache(bytes: &[u8], path: &Path) -> Result<BiasPack> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 14 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("missing MEPB magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let heads = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[14..];
    if body.len() != heads * len * 8 {
        return Err(bad("payload length does not match header"));
    }
    let distances = body
        .chunks_exact(len * 8)
        .map(|row| {
            row.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    BiasPack::from_distances(
        distances,
        BiasMeta {
            preset: "cache".into(),
            schedule: String::new(),
        },
    )
}

pub fn write_cache(pack: &BiasPack, path: &Path) -> Result<()> {
    write_atomic(path, &encode_cache(pack))
}

pub fn read_cache(path: &Path) -> Result<BiasPack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::PRESET_NAMES;
    use crate::slopes::{slopes_for_heads, SlopeSchedule};

    fn preset(name: &str, heads: usize) -> FusionPreset {
        let slopes = slopes_for_heads(&SlopeSchedule::Geometric { heads }).unwrap();
        FusionPreset::from_name(name, &slopes).unwrap()
    }

    #[test]
    fn anchor_cells() {
        let alibi = build_bias(&preset("alibi", 8), 8, 512).unwrap();
        let b = alibi.entry(5, 511, 0).unwrap();
        assert!((b + 7.984375).abs() < 1e-12);
        let mep = build_bias(&preset("mep-free", 8), 8, 512).unwrap();
        assert!((mep.entry(5, 511, 0).unwrap().exp() - 0.0062).abs() < 5e-4);
        let gauss = multiplicative_view(&build_bias(&preset("gaussian", 8), 8, 512).unwrap());
        assert_eq!(gauss[5][[511, 0]], 0.0);
        let mult = multiplicative_view(&alibi);
        assert!((mult[0][[2, 0]] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn diagonal_is_zero_and_masked_cells_absent() {
        for name in PRESET_NAMES {
            let pack = build_bias(&preset(name, 4), 4, 16).unwrap();
            for h in 0..4 {
                for i in 0..16 {
                    assert_eq!(pack.entry(h, i, i), Some(0.0), "{name}");
                    if i + 1 < 16 {
                        assert_eq!(pack.entry(h, i, i + 1), None);
                    }
                }
            }
            for m in multiplicative_view(&pack) {
                for i in 0..16 {
                    assert_eq!(m[[i, i]], 1.0);
                }
            }
        }
    }

    #[test]
    fn resource_cap_and_head_mismatch() {
        let p = preset("alibi", 8);
        assert!(matches!(
            build_bias_capped(&p, 8, 100, 8 * 99 * 99),
            Err(Error::ResourceCap { .. })
        ));
        assert!(build_bias(&p, 4, 10).is_err());
        assert!(build_bias(&p, 8, 0).is_err());
    }

    #[test]
    fn csv_two_by_two() {
        let pack = build_bias(&preset("alibi", 8), 8, 2).unwrap();
        let text = bias_csv(&pack, 0, BiasForm::Additive, 1.0).unwrap();
        assert_eq!(text, "# preset=alibi, head=1, L=2\n0,\n-0.5,0\n");
        let grid = parse_csv(&text, Path::new("mem")).unwrap();
        assert_eq!(grid.cells[0][1], None);
        assert_eq!(grid.cells[1][0], Some(-0.5));
        assert!(bias_csv(&pack, 8, BiasForm::Additive, 1.0).is_err());
    }

    #[test]
    fn single_cell() {
        let pack = build_bias(&preset("mep-free", 8), 8, 1).unwrap();
        let add = bias_csv(&pack, 3, BiasForm::Additive, 1.0).unwrap();
        let mult = bias_csv(&pack, 3, BiasForm::Multiplicative, 1.0).unwrap();
        assert!(add.ends_with("\n0\n"));
        assert!(mult.ends_with("\n1\n"));
    }

    #[test]
    fn cache_rejects_garbage() {
        let p = Path::new("x");
        assert!(decode_cache(b"NOPE0000000000", p).is_err());
        let pack = build_bias(&preset("alibi", 2), 2, 3).unwrap();
        let mut bytes = encode_cache(&pack);
        bytes.pop();
        assert!(decode_cache(&bytes, p).is_err());
    }
}
