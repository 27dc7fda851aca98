use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::quant::{Axis, QScheme, QTensor};
use crate::tensor::{matmul_f64, MatF, MatI8};

use super::{gemm_channel_folded, gemm_channel_naive, OpCount};

/// One timed kernel at one shape. `variant` is a GEMM variant name or
/// `"f64_reference"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: String,
    pub i: usize,
    pub n: usize,
    pub j: usize,
    pub scale_mults: u64,
    pub int_mults: u64,
    pub wall_ns_median: u64,
}

fn random_codes(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> MatI8 {
    let data = (0..rows * cols).map(|_| rng.gen_range(-127..=127)).collect();
    MatI8::new(rows, cols, data).expect("shape matches")
}

fn median_ns(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    Ok(times[times.len() / 2].max(1))
}

/// Times the naive per-channel kernel, the folded kernel and an f64 GEMM of
/// the same shape on random 8-bit codes. Timings are informational.
pub fn bench_shapes(shapes: &[(usize, usize, usize)], repeats: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = QScheme::symmetric(8, Axis::PerChannel)?;
    let mut out = Vec::new();
    for &(i, n, j) in shapes {
        let sx: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sw: Vec<f64> = (0..j).map(|_| rng.gen_range(0.01..1.0)).collect();
        let xq = QTensor::from_parts(random_codes(i, n, &mut rng), act, sx.clone(), vec![0; n])?;
        let wq = QTensor::from_parts(random_codes(n, j, &mut rng), act, sw, vec![0; j])?;

        let mut naive = OpCount::default();
        let naive_ns = median_ns(repeats, || {
            naive = gemm_channel_naive(&xq, &wq, &sx)?.1;
            Ok(())
        })?;
        let mut folded = OpCount::default();
        let folded_ns = median_ns(repeats, || {
            folded = gemm_channel_folded(&xq, &wq)?.1;
            Ok(())
        })?;
        let xf = MatF::from_fn(i, n, |r, c| f64::from(xq.ints().get(r, c)));
        let wf = MatF::from_fn(n, j, |r, c| f64::from(wq.ints().get(r, c)));
        let f64_ns = median_ns(repeats, || matmul_f64(&xf, &wf).map(|_| ()))?;

        for (name, count, ns) in [
            ("channel_channel_naive", naive, naive_ns),
            ("channel_channel_folded", folded, folded_ns),
        ] {
            out.push(BenchRecord {
                variant: name.into(),
                i,
                n,
                j,
                scale_mults: count.scale_mults,
                int_mults: count.int_mults,
                wall_ns_median: ns,
            });
        }
        out.push(BenchRecord {
            variant: "f64_reference".into(),
            i,
            n,
            j,
            scale_mults: 0,
            int_mults: 0,
            wall_ns_median: f64_ns,
        });
    }
    Ok(out)
}
