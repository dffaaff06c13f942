//! Analytic parameter and multiply-add counts.
//!
//! Multiply-adds cover dense and depth-wise convolutions, projections,
//! resampling and the scan recurrence; normalization and activations are not
//! counted. The frequency stage (FFTs and per-bin scaling) grows as
//! `H W log(H W)` rather than linearly, so it is reported separately.

use super::NetworkConfig;
use crate::edffn::{fft_cost, spectrum_extents, Placement};
use crate::evs::PARAM_CONV_WIDTH;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    /// Every learnable tensor except the resolution-specific screening weights.
    pub total: usize,
    /// Screening weights for the requested resolution.
    pub w_quant: usize,
    pub breakdown: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    /// Multiply-adds of every stage that is linear in the pixel count.
    pub spatial: u64,
    /// FFTs and spectral scaling.
    pub frequency: u64,
    pub breakdown: Vec<(String, u64)>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.spatial + self.frequency
    }
}

fn linear(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

/// Parameters of one EVS block (without its pre-norm).
pub fn evs_block_params(c: usize, expansion: usize, n: usize) -> usize {
    let ci = expansion * c;
    linear(c, 2 * ci)
        + 9 * ci
        + linear(ci, ci + 2 * n)
        + PARAM_CONV_WIDTH * (ci + 2 * n)
        + ci // delta bias
        + ci * n // a_log
        + ci // d
        + 2 * ci // norm
        + linear(ci, c)
}

/// Parameters of one feedforward block, excluding the screening weights.
pub fn ffn_params(c: usize, ratio: usize) -> usize {
    let hidden = ratio * c;
    linear(c, hidden) + 9 * hidden + linear(hidden / 2, c)
}

pub fn count_params(config: &NetworkConfig, h: usize, w: usize) -> ParamReport {
    let mut breakdown = Vec::new();
    let c0 = config.base_channels;
    breakdown.push(("shallow conv3x3".to_string(), 9 * 3 * c0 + c0));
    let mut w_quant = 0;
    for l in 0..config.levels {
        let c = config.channels(l);
        let modules = 2 * config.modules_per_level[l];
        breakdown.push((format!("level{l} norms"), modules * 4 * c));
        breakdown.push((
            format!("level{l} evs blocks"),
            modules * evs_block_params(c, config.evs_expansion, config.ssm_state_dim),
        ));
        breakdown.push((format!("level{l} ffn blocks"), modules * ffn_params(c, config.ffn_ratio)));
        if l + 1 < config.levels {
            breakdown.push((format!("down{l} 1x1"), linear(c, 2 * c)));
            breakdown.push((format!("up{l} 1x1"), linear(2 * c, c)));
        }
        let (hf, wh) = spectrum_extents(h >> l, w >> l);
        w_quant += modules * c * hf * wh;
    }
    breakdown.push(("tail conv3x3".to_string(), 9 * c0 * 3 + 3));
    ParamReport { total: breakdown.iter().map(|(_, n)| n).sum(), w_quant, breakdown }
}

/// FLOPs of one EVSS module with `c` channels on an `h x w` map, split into
/// spatial and frequency-domain work.
pub fn module_flops(config: &NetworkConfig, c: usize, h: usize, w: usize) -> ModuleFlops {
    let (c, px) = (c as u64, (h * w) as u64);
    let ci = config.evs_expansion as u64 * c;
    let n = config.ssm_state_dim as u64;
    let hidden = config.ffn_ratio as u64 * c;
    let (hf, wh) = spectrum_extents(h, w);
    ModuleFlops {
        projections: px * (c * 2 * ci + ci * (ci + 2 * n) + ci * c),
        convs: px * (9 * ci + PARAM_CONV_WIDTH as u64 * (ci + 2 * n)),
        // Per state element: input term, decay-and-add, readout; plus the skip.
        scan: px * ci * (3 * n + 1),
        ffn: px * (c * hidden + 9 * hidden + hidden / 2 * c),
        fft: fft_cost(c as usize, h, w, Placement::Tail, config.ffn_ratio),
        spectral_scale: 2 * c * (hf * wh) as u64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleFlops {
    pub projections: u64,
    pub convs: u64,
    pub scan: u64,
    pub ffn: u64,
    pub fft: u64,
    pub spectral_scale: u64,
}

impl ModuleFlops {
    pub fn spatial(&self) -> u64 {
        self.projections + self.convs + self.scan + self.ffn
    }

    pub fn frequency(&self) -> u64 {
        self.fft + self.spectral_scale
    }
}

pub fn count_flops(config: &NetworkConfig, h: usize, w: usize) -> FlopReport {
    let mut spatial = Vec::<(String, u64)>::new();
    let mut freq = Vec::<(String, u64)>::new();
    let hw = (h * w) as u64;
    let c0 = config.base_channels as u64;
    spatial.push(("shallow conv3x3".into(), 9 * 3 * c0 * hw));
    for l in 0..config.levels {
        let c = config.channels(l) as u64;
        let (lh, lw) = (h >> l, w >> l);
        let px = (lh * lw) as u64;
        let modules = 2 * config.modules_per_level[l] as u64;
        let m = module_flops(config, c as usize, lh, lw);
        spatial.push((format!("level{l} evs projections"), modules * m.projections));
        spatial.push((format!("level{l} evs convs"), modules * m.convs));
        spatial.push((format!("level{l} scan"), modules * m.scan));
        spatial.push((format!("level{l} ffn"), modules * m.ffn));
        freq.push((format!("level{l} fft"), modules * m.fft));
        freq.push((format!("level{l} spectral scale"), modules * m.spectral_scale));
        if l + 1 < config.levels {
            let half = px / 4;
            spatial.push((format!("down{l}"), half * (4 * c + c * 2 * c)));
            spatial.push((format!("up{l}"), px * (4 * 2 * c + 2 * c * c)));
        }
    }
    spatial.push(("tail conv3x3".into(), 9 * c0 * 3 * hw));
    let total_spatial = spatial.iter().map(|(_, v)| v).sum();
    let total_freq = freq.iter().map(|(_, v)| v).sum();
    spatial.extend(freq);
    FlopReport { spatial: total_spatial, frequency: total_freq, breakdown: spatial }
}
