//! Calibrate a random outlier block, rewrite it with folded per-channel
//! activations and compare bypassed and quantized outputs with the original.

use foldquant::harness::{evaluate, gen_inputs, random_block, OutlierSpec};
use foldquant::quant::{Axis, QScheme};
use foldquant::transform::{calibrate, transform_block, BlockConfig, EvalMode};

fn main() -> foldquant::Result<()> {
    let cfg = BlockConfig::default();
    let model = random_block(&cfg, Some(&OutlierSpec::dominant(cfg.hidden, 0)), 0)?;
    let (s1, s2) = calibrate(&model, &[gen_inputs(cfg.hidden, 512, 10)?], 1.0)?;
    let block = transform_block(
        &model,
        &s1,
        &s2,
        &QScheme::symmetric(8, Axis::PerChannel)?,
        &QScheme::symmetric(8, Axis::PerChannel)?,
    )?;
    println!("ln1 shift on channel 5: {:.3}", block.sym_z1()[5]);

    let x = gen_inputs(cfg.hidden, 256, 11)?;
    let bypass = evaluate(&model, &block, &x, EvalMode::Bypass)?;
    let quant = evaluate(&model, &block, &x, EvalMode::Quantized)?;
    println!(
        "bypass    rel_frobenius {:.3e}",
        bypass.rel_frobenius.unwrap_or_default()
    );
    println!("quantized sqnr {:.2} dB", quant.output_sqnr_db.unwrap_or_default());
    for l in &quant.layers {
        println!(
            "  {:<4} act sqnr {:>6.2} dB  scale_mults {}",
            l.layer, l.act_error.sqnr_db, l.ops.scale_mults
        );
    }
    Ok(())
}
