use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use evssm::bench::{run_bench, BenchOp, CSV_HEADER};
use evssm::edffn::{fft_cost, Placement};
use evssm::geometry::ScanMode;
use evssm::gradsuite::{self, Group};
use evssm::net::{count_flops, count_params, Checkpoint, NetworkConfig};
use evssm::pipeline::{ablate, deblur_image, train, RunConfig, StepStats};
use evssm::Tensor;
use image::{ImageBuffer, Rgb, RgbImage};

#[derive(Parser)]
#[command(name = "evssm", version, about = "Train and run the EVSSM deblurring network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic blur and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of the configuration file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scan mode (evs, one, no-flip, no-transpose).
        #[arg(long)]
        scan_mode: Option<ScanMode>,
    },
    /// Deblur an 8-bit PNG with a trained checkpoint.
    Deblur {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One of tensor, sscan, evs, edffn, net; all when omitted.
        #[arg(long)]
        module: Option<Group>,
    },
    /// Time a kernel at several sizes (CSV on stdout).
    Bench {
        #[arg(long)]
        op: BenchOp,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    /// Train once per scan mode and print the loss/PSNR curves as CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the analytic parameter and FLOP tables of a configuration.
    Flops {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Network settings to use instead of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out, seed, scan_mode } => {
            let mut run = load_config(&config)?;
            if let Some(seed) = seed {
                run.train.seed = seed;
            }
            if let Some(mode) = scan_mode {
                run.net.scan_mode = mode;
            }
            cmd_train(&run, &out)
        }
        Command::Deblur { ckpt, input, out } => cmd_deblur(&ckpt, &input, &out),
        Command::Gradcheck { module } => cmd_gradcheck(module),
        Command::Bench { op, sizes } => {
            println!("{CSV_HEADER}");
            for size in sizes {
                println!("{}", run_bench(op, size)?.csv());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { config } => cmd_ablate(&load_config(&config)?),
        Command::Flops { height, width, config } => {
            let net = match config {
                Some(path) => load_config(&path)?.net,
                None => NetworkConfig::default(),
            };
            cmd_flops(&net, height, width)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading configuration {}", path.display()))
}

fn print_step(s: &StepStats) {
    println!("{},{:.3e},{:.6},{:.3}", s.iteration, s.lr, s.loss, s.psnr);
}

fn cmd_train(run: &RunConfig, out: &Path) -> Result<ExitCode> {
    println!("iteration,lr,loss,psnr");
    let outcome = train(&run.net, &run.train, print_step)?;
    outcome.checkpoint.save(out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(v) = outcome.log.validation {
        eprintln!("validation: PSNR {:.2} dB (blurred {:.2} dB)", v.psnr_model, v.psnr_blur);
        if let (Some(m), Some(b)) = (v.ssim_model, v.ssim_blur) {
            eprintln!("validation: SSIM {m:.4} (blurred {b:.4})");
        }
    }
    eprintln!("checkpoint written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, y, x) = (i / (h * w), i / w % h, i % w);
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

fn write_png(t: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        bail!("expected a 3-channel image, got {c} channels");
    }
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (t.at(&[ch, y as usize, x as usize]).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn cmd_deblur(ckpt: &Path, input: &Path, out: &Path) -> Result<ExitCode> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let restored = deblur_image(&ck, &read_png(input)?)?;
    write_png(&restored, out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(module: Option<Group>) -> Result<ExitCode> {
    let groups = module.map_or(Group::ALL.to_vec(), |g| vec![g]);
    let mut failures = 0;
    println!("{:<7} {:<26} {:>11} {:>9}  result", "module", "case", "rel error", "bound");
    for g in groups {
        for case in gradsuite::run(g)? {
            let ok = case.passed();
            failures += usize::from(!ok);
            println!(
                "{:<7} {:<26} {:>11.3e} {:>9.0e}  {}",
                case.group.as_str(),
                case.name,
                case.report.max_rel_error,
                case.tolerance,
                if ok { "pass" } else { "FAIL" }
            );
        }
    }
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_ablate(run: &RunConfig) -> Result<ExitCode> {
    println!("mode,iteration,lr,loss,psnr");
    for (mode, outcome) in ablate(&run.net, &run.train)? {
        for s in &outcome.log.records {
            println!("{mode},{},{:.3e},{:.6},{:.3}", s.iteration, s.lr, s.loss, s.psnr);
        }
        if let Some(v) = outcome.log.validation {
            eprintln!("{mode}: validation PSNR {:.2} dB (blurred {:.2} dB)", v.psnr_model, v.psnr_blur);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_flops(net: &NetworkConfig, h: usize, w: usize) -> Result<ExitCode> {
    net.validate()?;
    net.check_extents(h, w)?;
    let params = count_params(net, h, w);
    println!("parameters");
    for (name, n) in &params.breakdown {
        println!("  {name:<28} {n:>12}");
    }
    println!("  {:<28} {:>12}", "total", params.total);
    println!("  {:<28} {:>12}", "screening weights (extra)", params.w_quant);

    let flops = count_flops(net, h, w);
    println!("flops at {h}x{w}");
    for (name, n) in &flops.breakdown {
        println!("  {name:<28} {n:>14}");
    }
    println!("  {:<28} {:>14}", "spatial total", flops.spatial);
    println!("  {:<28} {:>14}", "frequency total", flops.frequency);

    // FFT work of every feedforward block if screening sat on the expanded
    // features instead of the projected output.
    let (mut mid, mut tail) = (0u64, 0u64);
    for l in 0..net.levels {
        let modules = 2 * net.modules_per_level[l] as u64;
        let (c, lh, lw) = (net.channels(l), h >> l, w >> l);
        mid += modules * fft_cost(c, lh, lw, Placement::Mid, net.ffn_ratio);
        tail += modules * fft_cost(c, lh, lw, Placement::Tail, net.ffn_ratio);
    }
    println!("fft placement");
    println!("  {:<28} {:>14}", "mid (expanded features)", mid);
    println!("  {:<28} {:>14}", "tail (block output)", tail);
    println!("  {:<28} {:>14.3}", "mid / tail", mid as f64 / tail as f64);
    Ok(ExitCode::SUCCESS)
}
