//! All four layouts at Int8 on the default outlier block. Pass a seed as the
//! first argument; `--json` prints the full report.

use foldquant::harness::{run_scheme_comparison, ExperimentConfig};

fn main() -> foldquant::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.iter().find_map(|a| a.parse().ok()).unwrap_or(0);
    let report = run_scheme_comparison(&ExperimentConfig::outlier_default(seed))?;
    if args.iter().any(|a| a == "--json") {
        println!("{}", report.to_json()?);
        return Ok(());
    }
    for e in &report.entries {
        println!(
            "{:<40} sqnr {:>6.2} dB  mse {:.4e}",
            e.label,
            e.output_sqnr_db.unwrap_or_default(),
            e.output_mse.unwrap_or_default()
        );
    }
    Ok(())
}
