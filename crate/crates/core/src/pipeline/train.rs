//! Training loop, validation, ablation runs and padded inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{psnr, ssim, SSIM_WINDOW};
use super::optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};
use super::synth::{reflect, synth_pair, BlurFamily, BlurSpec};
use crate::config::{format_float, format_list, parse_key_values, parse_list, parse_value};
use crate::error::{Error, Result};
use crate::geometry::ScanMode;
use crate::net::{deblur, forward, loss, Checkpoint, NetParams, NetworkConfig};
use crate::tensor::{Gradients, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    /// Record loss and PSNR every this many iterations (and at the end).
    pub log_every: usize,
    pub blur: BlurFamily,
    /// Size of the fixed validation set.
    pub val_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            patch_size: 32,
            lr_start: 1e-3,
            lr_end: 1e-7,
            seed: 0,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            log_every: 50,
            blur: BlurFamily::Gaussian,
            val_pairs: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return bad("patch_size must be a positive multiple of 4");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return bad("learning rates need lr_start >= lr_end > 0");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "iterations" => self.iterations = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "lr_start" => self.lr_start = parse_value(key, value)?,
            "lr_end" => self.lr_end = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "betas" => match parse_list::<f64>(key, value)?[..] {
                [b1, b2] => self.betas = (b1, b2),
                _ => return Err(Error::Config(format!("`betas` needs two values, got `{value}`"))),
            },
            "log_every" => self.log_every = parse_value(key, value)?,
            "blur" => self.blur = value.parse()?,
            "val_pairs" => self.val_pairs = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("lr_start", format_float(self.lr_start)),
            ("lr_end", format_float(self.lr_end)),
            ("seed", self.seed.to_string()),
            ("weight_decay", format_float(self.weight_decay)),
            ("betas", format_list(&[format_float(self.betas.0), format_float(self.betas.1)])),
            ("log_every", self.log_every.to_string()),
            ("blur", self.blur.as_str().to_string()),
            ("val_pairs", self.val_pairs.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.betas.0, beta2: self.betas.1, weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// Network and training settings read from one configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses `key=value` text on top of the defaults; unknown keys fail.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_key_values(text)? {
            if !cfg.net.set(&k, &v)? && !cfg.train.set(&k, &v)? {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.net.check_extents(self.train.patch_size, self.train.patch_size)
    }

    pub fn to_text(&self) -> String {
        self.net
            .to_pairs()
            .into_iter()
            .chain(self.train.to_pairs())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Independent seed for `(stream, a, b)` derived from a base seed.
pub fn derive_seed(base: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut x = base;
    for v in [stream, a, b] {
        // splitmix64 finalizer over the running state.
        x = x.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;

/// One random training or validation pair.
pub fn random_pair(family: BlurFamily, size: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = BlurSpec::random(family, &mut rng);
    synth_pair(&spec, size, rng.random())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// 0-based index of the completed step.
    pub iteration: usize,
    pub lr: f64,
    /// Batch-mean loss before the update.
    pub loss: f64,
    /// Batch-mean PSNR of the clamped outputs before the update.
    pub psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValReport {
    pub psnr_model: f64,
    pub psnr_blur: f64,
    /// Absent when patches are smaller than the SSIM window.
    pub ssim_model: Option<f64>,
    pub ssim_blur: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Loss of every iteration.
    pub losses: Vec<f64>,
    /// Entries every `log_every` iterations and at the last one.
    pub records: Vec<StepStats>,
    pub validation: Option<ValReport>,
}

pub struct Trainer {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub params: NetParams,
    pub state: AdamState,
    pub iteration: usize,
    val_set: Vec<(Tensor, Tensor)>,
}

impl Trainer {
    pub fn new(net: &NetworkConfig, train: &TrainConfig) -> Result<Self> {
        let run = RunConfig { net: net.clone(), train: train.clone() };
        run.validate()?;
        let p = train.patch_size;
        let params = NetParams::init(net, p, p, derive_seed(train.seed, INIT_STREAM, 0, 0))?;
        let val_set = (0..train.val_pairs)
            .map(|k| random_pair(train.blur, p, derive_seed(train.seed, VAL_STREAM, k as u64, 0)))
            .collect::<Result<_>>()?;
        Ok(Self { net: net.clone(), train: train.clone(), params, state: AdamState::default(), iteration: 0, val_set })
    }

    pub fn batch(&self, iteration: usize) -> Result<Vec<(Tensor, Tensor)>> {
        (0..self.train.batch_size)
            .map(|b| {
                let seed = derive_seed(self.train.seed, TRAIN_STREAM, iteration as u64, b as u64);
                random_pair(self.train.blur, self.train.patch_size, seed)
            })
            .collect()
    }

    /// Batch-mean loss, output PSNR and gradients at the current parameters.
    pub fn loss_and_grads(&self, batch: &[(Tensor, Tensor)]) -> Result<(f64, f64, Gradients)> {
        let per_item: Vec<Result<(f64, f64, Gradients)>> = batch
            .par_iter()
            .map(|(blur, sharp)| {
                let mut tape = Tape::new();
                let b = tape.input(blur.clone());
                let s = tape.input(sharp.clone());
                let (out, _) = forward(&mut tape, &self.net, &self.params, b)?;
                let l = loss(&mut tape, out, s, self.net.loss_lambda)?;
                let quality = psnr(&tape.value(out).map(|v| v.clamp(0.0, 1.0)), sharp)?;
                Ok((tape.value(l).item(), quality, tape.backward(l)?))
            })
            .collect();
        let n = batch.len() as f64;
        let (mut loss_sum, mut psnr_sum) = (0.0, 0.0);
        let mut total: Option<Gradients> = None;
        for item in per_item {
            let (l, q, g) = item?;
            loss_sum += l;
            psnr_sum += q;
            match &mut total {
                None => total = Some(g),
                Some(acc) => acc.accumulate(&g)?,
            }
        }
        let mut grads = total.unwrap_or_default();
        grads.scale(1.0 / n);
        Ok((loss_sum / n, psnr_sum / n, grads))
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.iteration, self.train.iterations, self.train.lr_start, self.train.lr_end)
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let lr = self.current_lr();
        self.step_with_lr(lr)
    }

    pub fn step_with_lr(&mut self, lr: f64) -> Result<StepStats> {
        let batch = self.batch(self.iteration)?;
        let (loss, quality, grads) = self.loss_and_grads(&batch)?;
        let finite = grads.iter().all(|(_, g)| g.all_finite());
        if !loss.is_finite() || !finite {
            let max_grad = grads.iter().flat_map(|(_, g)| g.data().iter()).fold(0.0f64, |m, v| {
                if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY }
            });
            return Err(Error::NonFinite { iteration: self.iteration, lr, max_grad });
        }
        adamw_step(&mut self.params, &grads, &mut self.state, lr, &self.train.adamw())?;
        let stats = StepStats { iteration: self.iteration, lr, loss, psnr: quality };
        self.iteration += 1;
        Ok(stats)
    }

    /// Mean PSNR/SSIM over the fixed validation set.
    pub fn validate(&self) -> Result<ValReport> {
        let with_ssim = self.train.patch_size >= SSIM_WINDOW;
        let scores: Vec<Result<[f64; 4]>> = self
            .val_set
            .par_iter()
            .map(|(blur, sharp)| {
                let out = deblur(&self.net, &self.params, blur)?.map(|v| v.clamp(0.0, 1.0));
                let (s_out, s_blur) =
                    if with_ssim { (ssim(&out, sharp)?, ssim(blur, sharp)?) } else { (f64::NAN, f64::NAN) };
                Ok([psnr(&out, sharp)?, psnr(blur, sharp)?, s_out, s_blur])
            })
            .collect();
        let mut sum = [0.0; 4];
        for s in scores {
            for (acc, v) in sum.iter_mut().zip(s?) {
                *acc += v;
            }
        }
        let n = self.val_set.len().max(1) as f64;
        let ssim_mean = |v: f64| with_ssim.then_some(v / n);
        Ok(ValReport {
            psnr_model: sum[0] / n,
            psnr_blur: sum[1] / n,
            ssim_model: ssim_mean(sum[2]),
            ssim_blur: ssim_mean(sum[3]),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let p = self.train.patch_size;
        let mut ck = Checkpoint::new(&self.net, p, p, &self.params);
        ck.iteration = self.iteration as u64;
        ck.seed = self.train.seed;
        ck.optimizer = self.state.to_store();
        ck
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Runs the full schedule, calling `on_log` for every logged step.
pub fn train(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&StepStats),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(net, cfg)?;
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let stats = trainer.step()?;
        log.losses.push(stats.loss);
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            on_log(&stats);
            log.records.push(stats);
        }
    }
    if cfg.val_pairs > 0 {
        log.validation = Some(trainer.validate()?);
    }
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), log })
}

/// Trains once per scan mode with otherwise identical settings.
pub fn ablate(net: &NetworkConfig, cfg: &TrainConfig) -> Result<Vec<(ScanMode, TrainOutcome)>> {
    ScanMode::ALL
        .into_iter()
        .map(|mode| {
            let net = NetworkConfig { scan_mode: mode, ..net.clone() };
            train(&net, cfg, |_| {}).map(|o| (mode, o))
        })
        .collect()
}

/// Pads `img` by mirroring to a multiple of `multiple` on the bottom/right.
pub fn reflect_pad(img: &Tensor, multiple: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    Ok(Tensor::from_fn([c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), i / pw % ph, i % pw);
        img.data()[ch * h * w + reflect(y as isize, h) * w + reflect(x as isize, w)]
    }))
}

/// Top-left `h x w` crop.
pub fn crop(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, ih, iw) = img.dims3()?;
    if h > ih || w > iw {
        return Err(crate::error::dim_err(format!("cannot crop {ih}x{iw} to {h}x{w}")));
    }
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), i / w % h, i % w);
        img.data()[ch * ih * iw + y * iw + x]
    }))
}

/// Deblurs an image of any size by mirror padding to the required multiple
/// and cropping the result back.
pub fn deblur_image(ck: &Checkpoint, img: &Tensor) -> Result<Tensor> {
    let params = ck.net_params()?;
    let (_, h, w) = img.dims3()?;
    let padded = reflect_pad(img, ck.config.size_multiple())?;
    crop(&deblur(&ck.config, &params, &padded)?, h, w)
}
