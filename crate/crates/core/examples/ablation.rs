//! Symmetrization on and off at Int8 and Int6 over a few seeds.

use foldquant::harness::{run_ablation, ExperimentConfig};

fn main() -> foldquant::Result<()> {
    println!("{:>4} {:>12} {:>12}", "seed", "int8 off/on", "int6 off/on");
    for seed in 0..5 {
        let r = run_ablation(&ExperimentConfig::ablation_default(seed))?;
        let ratio = |bits: u8| {
            let label = |tag: &str| format!("channel_channel_folded/int{bits}-sym-channel/sym-{tag}");
            r.mse_ratio(&label("off"), &label("on")).unwrap_or(f64::NAN)
        };
        println!("{seed:>4} {:>12.2} {:>12.2}", ratio(8), ratio(6));
    }
    Ok(())
}
