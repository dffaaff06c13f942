//! Wall-clock timing of the main kernels next to their analytic FLOP counts.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edffn::{fft_cost, Placement};
use crate::error::{Error, Result};
use crate::evs::{evss_module_forward, EvssModuleParams};
use crate::geometry::{ScanMode, ScheduleIndex};
use crate::net::{module_flops, NetworkConfig};
use crate::sscan::{selective_scan_chunked, ScanInputs, SsmParams};
use crate::tensor::{irfft2, rfft2, Tape, Tensor};

/// Channels of the scan and FFT benchmarks.
pub const BENCH_CHANNELS: usize = 16;
/// State size of the scan benchmark.
pub const BENCH_STATE_DIM: usize = 16;
/// Chunk length of the scan benchmark.
pub const BENCH_CHUNK: usize = 64;
const REPEATS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchOp {
    /// Chunked selective scan over a sequence of `size` steps.
    Scan,
    /// Forward and inverse real 2D FFT of a `size x size` map.
    Fft,
    /// One EVSS module of the default network on a `size x size` map.
    Block,
}

impl BenchOp {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchOp::Scan => "scan",
            BenchOp::Fft => "fft",
            BenchOp::Block => "block",
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [BenchOp::Scan, BenchOp::Fft, BenchOp::Block]
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown benchmark `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub op: BenchOp,
    pub size: usize,
    pub flops: u64,
    /// Fastest of a few repetitions.
    pub wall_ns: u128,
}

pub const CSV_HEADER: &str = "op,size,flops,wall_ns";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.op, self.size, self.flops, self.wall_ns)
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn fastest(mut f: impl FnMut() -> Result<()>) -> Result<u128> {
    let mut best = u128::MAX;
    for _ in 0..REPEATS {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_nanos());
    }
    Ok(best)
}

pub fn run_bench(op: BenchOp, size: usize) -> Result<BenchRow> {
    if size == 0 {
        return Err(Error::Config("benchmark size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
    let (flops, wall_ns) = match op {
        BenchOp::Scan => {
            let (ci, n) = (BENCH_CHANNELS, BENCH_STATE_DIM);
            let params = SsmParams::init(ci, n);
            let inputs = ScanInputs {
                x: random(&[size, ci], -1.0, 1.0, &mut rng),
                delta: random(&[size, ci], 1e-3, 1e-1, &mut rng),
                b: random(&[size, n], -1.0, 1.0, &mut rng),
                c: random(&[size, n], -1.0, 1.0, &mut rng),
            };
            let flops = (size * ci * (3 * n + 1)) as u64;
            (flops, fastest(|| selective_scan_chunked(&params, &inputs, BENCH_CHUNK).map(drop))?)
        }
        BenchOp::Fft => {
            let x = random(&[BENCH_CHANNELS, size, size], -1.0, 1.0, &mut rng);
            let flops = fft_cost(BENCH_CHANNELS, size, size, Placement::Tail, 1);
            (flops, fastest(|| irfft2(&rfft2(&x)?, size, size).map(drop))?)
        }
        BenchOp::Block => {
            let config = NetworkConfig::default();
            let dims = config.module_dims(0, size, size);
            let p = EvssModuleParams::init(dims, &mut rng)?;
            let x = random(&[dims.channels, size, size], -1.0, 1.0, &mut rng);
            let m = module_flops(&config, dims.channels, size, size);
            let wall = fastest(|| {
                let mut tape = Tape::no_grad();
                let xv = tape.input(x.clone());
                evss_module_forward(&mut tape, &p, "", xv, ScheduleIndex(0), ScanMode::Evs).map(drop)
            })?;
            (m.spatial() + m.frequency(), wall)
        }
    };
    Ok(BenchRow { op, size, flops, wall_ns })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_for_every_op() {
        for op in [BenchOp::Scan, BenchOp::Fft, BenchOp::Block] {
            let row = run_bench(op, 8).unwrap();
            assert!(row.flops > 0 && row.wall_ns > 0);
            assert_eq!(row.csv().split(',').count(), CSV_HEADER.split(',').count());
            assert_eq!(op.as_str().parse::<BenchOp>().unwrap(), op);
        }
        assert!(run_bench(BenchOp::Fft, 0).is_err());
        assert!("conv".parse::<BenchOp>().is_err());
    }

    #[test]
    fn scan_flops_grow_linearly() {
        let a = run_bench(BenchOp::Scan, 32).unwrap().flops;
        let b = run_bench(BenchOp::Scan, 64).unwrap().flops;
        assert_eq!(b, 2 * a);
    }
}
