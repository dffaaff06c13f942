//! The multi-level encoder-decoder restoration network and its loss.
//!
//! ```text
//! F_s = conv3x3(I_blur)
//! encoder level l: modules, then (except the deepest) resize x0.5 + 1x1 conv (C -> 2C)
//! decoder level l: (except the deepest) resize x2 + 1x1 conv (2C -> C) + skip, then modules
//! R = conv3x3(F_dec),  I_deblur = I_blur + R
//! ```
//!
//! Modules are numbered in forward execution order across the whole network;
//! that number selects each module's scan transform.

mod checkpoint;
mod complexity;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use complexity::{count_flops, count_params, module_flops, FlopReport, ModuleFlops, ParamReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{format_float, format_list, parse_list, parse_value};
use crate::error::{dim_err, Error, Result};
use crate::evs::{evss_module_forward, EvssModuleParams, ModuleDims};
use crate::geometry::{ScanMode, ScheduleIndex};
use crate::layers::{join, Conv2d, Linear, Parameters};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub levels: usize,
    /// Modules per level, shallowest first; the decoder uses the same counts.
    pub modules_per_level: Vec<usize>,
    pub ssm_state_dim: usize,
    pub evs_expansion: usize,
    pub ffn_ratio: usize,
    pub scan_mode: ScanMode,
    pub loss_lambda: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 48,
            levels: 3,
            modules_per_level: vec![6, 6, 12],
            ssm_state_dim: 16,
            evs_expansion: 2,
            ffn_ratio: 3,
            scan_mode: ScanMode::Evs,
            loss_lambda: 0.1,
        }
    }
}

impl NetworkConfig {
    /// Small configuration for CPU-scale experiments and tests.
    pub fn reduced() -> Self {
        Self { base_channels: 8, modules_per_level: vec![1, 1, 2], ssm_state_dim: 4, ..Self::default() }
    }

    pub const KEYS: [&'static str; 8] = [
        "base_channels",
        "levels",
        "modules_per_level",
        "ssm_state_dim",
        "evs_expansion",
        "ffn_ratio",
        "scan_mode",
        "loss_lambda",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.modules_per_level.len() != self.levels {
            return bad(format!(
                "modules_per_level lists {} levels but levels = {}",
                self.modules_per_level.len(),
                self.levels
            ));
        }
        if self.modules_per_level.contains(&0) {
            return bad("every level needs at least one module".into());
        }
        if self.base_channels == 0 || self.ssm_state_dim == 0 || self.evs_expansion == 0 || self.ffn_ratio == 0 {
            return bad("channel, state, expansion and ratio sizes must be positive".into());
        }
        if !(self.base_channels * self.ffn_ratio).is_multiple_of(2) {
            return bad(format!(
                "ffn_ratio {} times base_channels {} must be even",
                self.ffn_ratio, self.base_channels
            ));
        }
        if !(self.loss_lambda >= 0.0) {
            return bad(format!("loss_lambda {} must be non-negative", self.loss_lambda));
        }
        Ok(())
    }

    /// Sets one key; returns `false` when the key is not a network key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "levels" => self.levels = parse_value(key, value)?,
            "modules_per_level" => self.modules_per_level = parse_list(key, value)?,
            "ssm_state_dim" => self.ssm_state_dim = parse_value(key, value)?,
            "evs_expansion" => self.evs_expansion = parse_value(key, value)?,
            "ffn_ratio" => self.ffn_ratio = parse_value(key, value)?,
            "scan_mode" => self.scan_mode = value.parse()?,
            "loss_lambda" => self.loss_lambda = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key=value` lines in [`Self::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.base_channels.to_string(),
            self.levels.to_string(),
            format_list(&self.modules_per_level),
            self.ssm_state_dim.to_string(),
            self.evs_expansion.to_string(),
            self.ffn_ratio.to_string(),
            self.scan_mode.to_string(),
            format_float(self.loss_lambda),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// Channel width of level `l` (0 = shallowest).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn total_modules(&self) -> usize {
        2 * self.modules_per_level.iter().sum::<usize>()
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(dim_err(format!(
                "input {h}x{w} is not divisible by {m}; pad the image to a multiple of {m}"
            )));
        }
        Ok(())
    }

    pub fn module_dims(&self, level: usize, h: usize, w: usize) -> ModuleDims {
        ModuleDims {
            channels: self.channels(level),
            expansion: self.evs_expansion,
            state_dim: self.ssm_state_dim,
            ffn_ratio: self.ffn_ratio,
            height: h >> level,
            width: w >> level,
        }
    }
}

/// All weights of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub shallow: Conv2d,
    /// `encoder[l]` holds the modules of level `l`.
    pub encoder: Vec<Vec<EvssModuleParams>>,
    /// `down[l]` maps level `l` to `l + 1`.
    pub down: Vec<Linear>,
    /// `decoder[l]` holds the modules of level `l`.
    pub decoder: Vec<Vec<EvssModuleParams>>,
    /// `up[l]` maps level `l + 1` to `l`.
    pub up: Vec<Linear>,
    pub tail: Conv2d,
}

impl NetParams {
    /// Random initialization; screening weights are sized for `h x w` inputs.
    pub fn init(config: &NetworkConfig, h: usize, w: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        config.check_extents(h, w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let shallow = Conv2d::init(3, c, 3, &mut rng);
        let stack = |level: usize, rng: &mut ChaCha8Rng| -> Result<Vec<EvssModuleParams>> {
            (0..config.modules_per_level[level])
                .map(|_| EvssModuleParams::init(config.module_dims(level, h, w), rng))
                .collect()
        };
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..config.levels {
            encoder.push(stack(l, &mut rng)?);
            if l + 1 < config.levels {
                down.push(Linear::init(config.channels(l), config.channels(l + 1), &mut rng));
            }
        }
        let mut decoder = vec![Vec::new(); config.levels];
        let mut up = vec![None; config.levels - 1];
        for l in (0..config.levels).rev() {
            if l + 1 < config.levels {
                up[l] = Some(Linear::init(config.channels(l + 1), config.channels(l), &mut rng));
            }
            decoder[l] = stack(l, &mut rng)?;
        }
        let tail = Conv2d::init(c, 3, 3, &mut rng);
        Ok(Self { shallow, encoder, down, decoder, up: up.into_iter().flatten().collect(), tail })
    }

    /// Zeroes the final projection of every EVS and feedforward block and the
    /// output convolution, which turns the network into the identity.
    pub fn zero_output_projections(&mut self) {
        for m in self.encoder.iter_mut().chain(self.decoder.iter_mut()).flatten() {
            let evs = &mut m.evs.out_proj;
            *evs = Linear::zeroed(evs.weight.shape()[0], evs.weight.shape()[1]);
            let ffn = &mut m.ffn.project;
            *ffn = Linear::zeroed(ffn.weight.shape()[0], ffn.weight.shape()[1]);
        }
        self.tail.weight = Tensor::zeros(self.tail.weight.shape().to_vec());
        self.tail.bias = Tensor::zeros(self.tail.bias.shape().to_vec());
    }
}

impl Parameters for NetParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.shallow.visit(&join(prefix, "shallow"), f);
        for (l, stack) in self.encoder.iter().enumerate() {
            for (k, m) in stack.iter().enumerate() {
                m.visit(&join(prefix, &format!("enc{l}.m{k}")), f);
            }
        }
        for (l, d) in self.down.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{l}")), f);
        }
        for (l, stack) in self.decoder.iter().enumerate() {
            for (k, m) in stack.iter().enumerate() {
                m.visit(&join(prefix, &format!("dec{l}.m{k}")), f);
            }
        }
        for (l, u) in self.up.iter().enumerate() {
            u.visit(&join(prefix, &format!("up{l}")), f);
        }
        self.tail.visit(&join(prefix, "tail"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.shallow.visit_mut(&join(prefix, "shallow"), f);
        for (l, stack) in self.encoder.iter_mut().enumerate() {
            for (k, m) in stack.iter_mut().enumerate() {
                m.visit_mut(&join(prefix, &format!("enc{l}.m{k}")), f);
            }
        }
        for (l, d) in self.down.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{l}")), f);
        }
        for (l, stack) in self.decoder.iter_mut().enumerate() {
            for (k, m) in stack.iter_mut().enumerate() {
                m.visit_mut(&join(prefix, &format!("dec{l}.m{k}")), f);
            }
        }
        for (l, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up{l}")), f);
        }
        self.tail.visit_mut(&join(prefix, "tail"), f);
    }
}

/// Runs one module. Without gradients the module's intermediates live on a
/// scratch tape that is dropped afterwards, bounding inference memory.
fn run_module(
    tape: &mut Tape,
    p: &EvssModuleParams,
    prefix: &str,
    x: Var,
    i: ScheduleIndex,
    mode: ScanMode,
) -> Result<Var> {
    if tape.grad_enabled() {
        return evss_module_forward(tape, p, prefix, x, i, mode);
    }
    let mut scratch = Tape::no_grad();
    let xs = scratch.input(tape.value(x).clone());
    let y = evss_module_forward(&mut scratch, p, prefix, xs, i, mode)?;
    Ok(tape.input(scratch.value(y).clone()))
}

/// Feature map shapes observed during a forward pass, for inspection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelShapes {
    pub encoder: Vec<Vec<usize>>,
    pub decoder: Vec<Vec<usize>>,
}

/// `(I_deblur, R)` for `blur: [3, H, W]`.
pub fn forward(tape: &mut Tape, config: &NetworkConfig, p: &NetParams, blur: Var) -> Result<(Var, Var)> {
    forward_traced(tape, config, p, blur).map(|(out, res, _)| (out, res))
}

pub fn forward_traced(
    tape: &mut Tape,
    config: &NetworkConfig,
    p: &NetParams,
    blur: Var,
) -> Result<(Var, Var, LevelShapes)> {
    let (c, h, w) = tape.value(blur).dims3()?;
    if c != 3 {
        return Err(dim_err(format!("expected a 3-channel image, got shape {:?}", tape.shape(blur))));
    }
    config.check_extents(h, w)?;
    let mode = config.scan_mode;
    let mut shapes = LevelShapes::default();
    let mut index = 0;
    let mut next = || {
        index += 1;
        ScheduleIndex(index - 1)
    };

    let mut x = p.shallow.forward(tape, "shallow", blur)?;
    let mut skips = Vec::new();
    for (l, stack) in p.encoder.iter().enumerate() {
        for (k, m) in stack.iter().enumerate() {
            x = run_module(tape, m, &format!("enc{l}.m{k}"), x, next(), mode)?;
        }
        shapes.encoder.push(tape.shape(x).to_vec());
        if let Some(down) = p.down.get(l) {
            skips.push(x);
            let r = tape.bilinear_resize(x, 0.5)?;
            x = down.forward_chw(tape, &format!("down{l}"), r)?;
        }
    }
    shapes.decoder.resize(p.decoder.len(), Vec::new());
    for l in (0..p.decoder.len()).rev() {
        if let Some(up) = p.up.get(l) {
            let r = tape.bilinear_resize(x, 2.0)?;
            let u = up.forward_chw(tape, &format!("up{l}"), r)?;
            x = tape.add(u, skips[l])?;
        }
        for (k, m) in p.decoder[l].iter().enumerate() {
            x = run_module(tape, m, &format!("dec{l}.m{k}"), x, next(), mode)?;
        }
        shapes.decoder[l] = tape.shape(x).to_vec();
    }
    let residual = p.tail.forward(tape, "tail", x)?;
    let out = tape.add(blur, residual)?;
    Ok((out, residual, shapes))
}

/// Inference without gradient bookkeeping.
pub fn deblur(config: &NetworkConfig, p: &NetParams, blur: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let b = tape.input(blur.clone());
    let (out, _) = forward(&mut tape, config, p, b)?;
    Ok(tape.value(out).clone())
}

/// `mean|d - g| + lambda * mean|rfft2(d) - rfft2(g)|`, the spectral term
/// averaging real and imaginary parts as separate entries.
pub fn loss(tape: &mut Tape, deblurred: Var, target: Var, lambda: f64) -> Result<Var> {
    let diff = tape.sub(deblurred, target)?;
    let a = tape.abs(diff);
    let spatial = tape.mean(a);
    if lambda == 0.0 {
        return Ok(spatial);
    }
    let spec = tape.rfft2(diff)?;
    let s = tape.abs(spec);
    let spectral = tape.mean(s);
    let spectral = tape.scale(spectral, lambda);
    tape.add(spatial, spectral)
}

/// Forward pass plus loss for one training pair.
pub fn pair_loss(
    tape: &mut Tape,
    config: &NetworkConfig,
    p: &NetParams,
    blur: &Tensor,
    sharp: &Tensor,
) -> Result<Var> {
    let b = tape.input(blur.clone());
    let g = tape.input(sharp.clone());
    let (out, _) = forward(tape, config, p, b)?;
    loss(tape, out, g, config.loss_lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([3, h, w], |_| rng.random::<f64>())
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = NetworkConfig::reduced();
        cfg.scan_mode = ScanMode::FlipOnly;
        cfg.loss_lambda = 0.25;
        let mut back = NetworkConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(&k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("iterations", "3").unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = NetworkConfig { modules_per_level: vec![1, 1], ..NetworkConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = NetworkConfig { base_channels: 3, ..NetworkConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(NetworkConfig::default().check_extents(64, 62).is_err());
    }

    #[test]
    fn module_count_and_schedule_length() {
        assert_eq!(NetworkConfig::default().total_modules(), 48);
        assert_eq!(NetworkConfig::reduced().total_modules(), 8);
    }

    #[test]
    fn shapes_for_square_and_wide_inputs() {
        let cfg = NetworkConfig { modules_per_level: vec![1, 1, 1], ..NetworkConfig::reduced() };
        for (h, w) in [(16, 16), (16, 24)] {
            let p = NetParams::init(&cfg, h, w, 0).unwrap();
            let mut tape = Tape::no_grad();
            let b = tape.input(image(h, w, 1));
            let (out, res, shapes) = forward_traced(&mut tape, &cfg, &p, b).unwrap();
            assert_eq!(tape.shape(out), &[3, h, w]);
            assert_eq!(tape.shape(res), &[3, h, w]);
            for l in 0..3 {
                let want = vec![8 << l, h >> l, w >> l];
                assert_eq!(shapes.encoder[l], want);
                assert_eq!(shapes.decoder[l], want);
            }
        }
    }

    #[test]
    fn zero_projections_give_identity() {
        let cfg = NetworkConfig::reduced();
        let mut p = NetParams::init(&cfg, 8, 8, 3).unwrap();
        p.zero_output_projections();
        let x = image(8, 8, 4);
        assert!(deblur(&cfg, &p, &x).unwrap().bit_eq(&x));
    }

    #[test]
    fn indivisible_input_asks_for_padding() {
        let cfg = NetworkConfig::reduced();
        let p = NetParams::init(&cfg, 8, 8, 3).unwrap();
        let err = deblur(&cfg, &p, &image(6, 8, 0)).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn loss_closed_forms() {
        let a = image(4, 4, 5);
        let eval = |x: &Tensor, y: &Tensor, lambda: f64| {
            let mut tape = Tape::no_grad();
            let (xv, yv) = (tape.input(x.clone()), tape.input(y.clone()));
            let l = loss(&mut tape, xv, yv, lambda).unwrap();
            tape.value(l).item()
        };
        assert_eq!(eval(&a, &a, 0.1), 0.0);
        let shifted = a.map(|v| v + 0.5);
        assert!((eval(&shifted, &a, 0.0) - 0.5).abs() < 1e-15);
    }
}
