//! Save an FP block and its quantized rewrite, load both back and check they
//! are unchanged.

use foldquant::checkpoint::{Checkpointed, Precision};
use foldquant::harness::{gen_inputs, random_block, OutlierSpec};
use foldquant::report::sha256_hex;
use foldquant::transform::{calibrate, quantize_block, BlockConfig, QuantRecipe};

fn main() -> foldquant::Result<()> {
    let dir = std::env::temp_dir().join("foldquant-example");
    std::fs::create_dir_all(&dir)?;
    let cfg = BlockConfig::default();
    let model = random_block(&cfg, Some(&OutlierSpec::dominant(cfg.hidden, 4)), 4)?;
    let (s1, s2) = calibrate(&model, &[gen_inputs(cfg.hidden, 256, 5)?], 1.0)?;
    let block = quantize_block(&model, Some(&s1), Some(&s2), &QuantRecipe::folded(8)?)?;

    let (mp, tp) = (dir.join("block.bin"), dir.join("folded.bin"));
    model.to_checkpoint(Precision::F64)?.save(&mp)?;
    block.to_checkpoint(Precision::F64)?.save(&tp)?;
    for p in [&mp, &tp] {
        let bytes = std::fs::read(p)?;
        println!("{}: {} bytes, sha256 {}", p.display(), bytes.len(), sha256_hex(&bytes));
    }
    match (Checkpointed::load(&mp)?, Checkpointed::load(&tp)?) {
        (Checkpointed::Block(m), Checkpointed::Transformed(t)) => {
            println!("block identical: {}", m == model);
            println!("transformed identical: {}", t == block);
        }
        _ => println!("unexpected checkpoint kinds"),
    }
    Ok(())
}
