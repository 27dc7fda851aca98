//! The four integer GEMM layouts on the same operands: output error against
//! the f64 product and the arithmetic each one performs.

use foldquant::harness::{gen_activations, OutlierSpec};
use foldquant::qgemm::{gemm, GemmVariant};
use foldquant::quant::{quantize, QScheme};
use foldquant::tensor::{matmul_f64, rel_frobenius_error, MatF};
use foldquant::transform::fold_weights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> foldquant::Result<()> {
    let (i, n, j) = (32, 64, 48);
    let x = gen_activations(&OutlierSpec::dominant(n, 1), i)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // weights as out × in
    let w = MatF::from_fn(j, n, |_, _| rng.gen_range(-0.2..0.2));
    let reference = matmul_f64(&x, &w.transpose())?;

    for v in GemmVariant::ALL {
        let (xa, wa) = v.axes();
        let xq = quantize(&x, &QScheme::symmetric(8, xa)?, None)?;
        let w_used = match v {
            GemmVariant::ChannelChannelFolded => fold_weights(&w, xq.scales())?,
            _ => w.clone(),
        };
        let wq = quantize(&w_used.transpose(), &QScheme::symmetric(8, wa)?, None)?;
        let (y, ops) = gemm(v, &xq, &wq, None)?;
        println!(
            "{:<24} rel_err {:.3e}  int_mults {:>7}  scale_mults {:>7}",
            v.name(),
            rel_frobenius_error(&y, &reference)?,
            ops.int_mults,
            ops.scale_mults
        );
    }
    println!("naive - folded scale mults should be i*j*n = {}", i * j * n);
    Ok(())
}
