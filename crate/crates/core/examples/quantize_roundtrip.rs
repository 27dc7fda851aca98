//! Quantize one outlier-heavy activation matrix under every scheme and
//! print the round-trip error.

use foldquant::harness::{gen_activations, OutlierSpec};
use foldquant::quant::{quant_error, Axis, QScheme, Symmetry};

fn main() -> foldquant::Result<()> {
    let x = gen_activations(&OutlierSpec::dominant(64, 0), 512)?;
    println!("{:<24} {:>12} {:>10}", "scheme", "mse", "sqnr_db");
    for bits in QScheme::SUPPORTED_BITS {
        for symmetry in [Symmetry::Symmetric, Symmetry::Asymmetric] {
            for axis in [Axis::PerTensor, Axis::PerToken, Axis::PerChannel] {
                let scheme = QScheme::new(bits, symmetry, axis)?;
                let e = quant_error(&x, &scheme)?;
                println!("{:<24} {:>12.4e} {:>10.2}", scheme.to_string(), e.mse, e.sqnr_db);
            }
        }
    }
    Ok(())
}
