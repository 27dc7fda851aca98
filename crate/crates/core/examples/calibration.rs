//! Streaming calibration: stats from separate batches merge to the same
//! ranges as one pass, and token-wise clipping trims rare spikes.

use foldquant::harness::{gen_activations, OutlierSpec};
use foldquant::quant::CalibStats;

fn main() -> foldquant::Result<()> {
    let x = gen_activations(&OutlierSpec::dominant(16, 3), 600)?;
    let whole = CalibStats::new(16, 1.0)?.observed(&x)?;
    let parts: Vec<CalibStats> = (0..3)
        .map(|p| CalibStats::new(16, 1.0)?.observed(&x.slice_rows(p * 200, (p + 1) * 200)))
        .collect::<foldquant::Result<_>>()?;
    let merged = parts[2].merge(&parts[0])?.merge(&parts[1])?;
    println!("merged == single pass: {}", merged == whole);

    let mut spiky = x.clone();
    spiky.set(42, 0, 500.0);
    let plain = CalibStats::new(16, 1.0)?.observed(&spiky)?;
    let clipped = CalibStats::new(16, CalibStats::TOKEN_CLIP_RATIO)?.observed(&spiky)?;
    println!(
        "channel 0 max: plain {:.2}, clipped {:.2}",
        plain.max()[0],
        clipped.max()[0]
    );
    Ok(())
}
