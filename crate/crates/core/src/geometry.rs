//! Scan-direction schedule: per-module transpose / flip-both transforms and
//! the raster flattening that turns feature maps into scan sequences.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Identity,
    /// Per-channel spatial transpose, `[C, H, W] -> [C, W, H]`.
    Transpose,
    /// Mirror along both spatial axes (a 180° rotation).
    FlipBoth,
}

/// Which transforms the schedule is allowed to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    /// Transpose on even modules, flip-both on odd ones.
    #[default]
    Evs,
    /// Always scan in plain raster order.
    OneDirection,
    /// Flip on odd modules only (no transposes).
    FlipOnly,
    /// Transpose on even modules only (no flips).
    TransposeOnly,
}

impl ScanMode {
    pub const ALL: [ScanMode; 4] =
        [ScanMode::Evs, ScanMode::OneDirection, ScanMode::FlipOnly, ScanMode::TransposeOnly];

    /// Command-line / config spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            ScanMode::Evs => "evs",
            ScanMode::OneDirection => "one",
            ScanMode::FlipOnly => "no-transpose",
            ScanMode::TransposeOnly => "no-flip",
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScanMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scan mode `{s}` (evs, one, no-flip, no-transpose)")))
    }
}

/// Global 0-based position of an EVSS module in forward execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ScheduleIndex(pub usize);

impl ScheduleIndex {
    pub fn kind(self, mode: ScanMode) -> TransformKind {
        let even = self.0.is_multiple_of(2);
        match mode {
            ScanMode::Evs if even => TransformKind::Transpose,
            ScanMode::Evs => TransformKind::FlipBoth,
            ScanMode::OneDirection => TransformKind::Identity,
            ScanMode::FlipOnly if !even => TransformKind::FlipBoth,
            ScanMode::TransposeOnly if even => TransformKind::Transpose,
            ScanMode::FlipOnly | ScanMode::TransposeOnly => TransformKind::Identity,
        }
    }
}

/// Applies one transform. Every kind is an involution, so this is also its
/// own inverse.
pub fn apply_kind(x: &Tensor, kind: TransformKind) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let src = x.data();
    Ok(match kind {
        TransformKind::Identity => x.clone(),
        TransformKind::FlipBoth => {
            let mut out = src.to_vec();
            for plane in out.chunks_mut(h * w) {
                plane.reverse();
            }
            Tensor::from_parts(vec![c, h, w], out)
        }
        TransformKind::Transpose => {
            let mut out = vec![0.0; src.len()];
            for ch in 0..c {
                let base = ch * h * w;
                for r in 0..h {
                    for col in 0..w {
                        out[base + col * h + r] = src[base + r * w + col];
                    }
                }
            }
            Tensor::from_parts(vec![c, w, h], out)
        }
    })
}

pub fn transform(x: &Tensor, i: ScheduleIndex, mode: ScanMode) -> Result<Tensor> {
    apply_kind(x, i.kind(mode))
}

pub fn inverse_transform(x: &Tensor, i: ScheduleIndex, mode: ScanMode) -> Result<Tensor> {
    apply_kind(x, i.kind(mode))
}

/// Records a transform; its gradient is the inverse transform of the output
/// gradient.
pub fn transform_var(tape: &mut Tape, x: Var, kind: TransformKind) -> Result<Var> {
    if kind == TransformKind::Identity {
        return Ok(x);
    }
    let y = apply_kind(tape.value(x), kind)?;
    Ok(tape.record(y, &[x], Box::new(move |g, _| Ok(vec![apply_kind(g, kind)?]))))
}

/// `[C, H, W] -> [H*W, C]` in row-major raster order.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    Ok(Tensor::from_parts(vec![h * w, c], transpose2(x.data(), c, h * w)))
}

/// Inverse of [`flatten`].
pub fn unflatten(s: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (l, c) = s.dims2()?;
    if l != h * w {
        return Err(dim_err(format!(
            "cannot unflatten a sequence of length {l} into {h}x{w}"
        )));
    }
    Ok(Tensor::from_parts(vec![c, h, w], transpose2(s.data(), l, c)))
}

fn transpose2(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn flatten_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let y = flatten(tape.value(x))?;
    let [_, h, w] = tape.shape(x)[..] else { unreachable!("checked by flatten") };
    Ok(tape.record(y, &[x], Box::new(move |g, _| Ok(vec![unflatten(g, h, w)?]))))
}

pub fn unflatten_var(tape: &mut Tape, s: Var, h: usize, w: usize) -> Result<Var> {
    let y = unflatten(tape.value(s), h, w)?;
    Ok(tape.record(y, &[s], Box::new(|g, _| Ok(vec![flatten(g)?]))))
}
