//! Re-centering a shifted outlier channel and moving activation scales into
//! the weights, step by step on a three-channel layer.

use foldquant::quant::{scales_for_ranges, Axis, CalibStats, QScheme};
use foldquant::tensor::{matmul_nt, MatF};
use foldquant::transform::{
    compute_symmetrization, fold_weights, symmetrize_layer, symmetrized_stats, LinearLayer, QuantMode,
};

fn main() -> foldquant::Result<()> {
    // channel 2 lives in [-93, -60]
    let x = MatF::from_rows(&[vec![-3.0, 5.0, -60.0], vec![9.0, -5.0, -75.0], vec![1.0, 0.5, -93.0]])?;
    let stats = CalibStats::new(3, 1.0)?.observed(&x)?;
    let z = compute_symmetrization(&stats)?;
    let sym = symmetrized_stats(&stats, &z)?;
    println!("z        = {z:?}");
    println!("range    = {:?} .. {:?}", sym.min(), sym.max());

    let scheme = QScheme::symmetric(8, Axis::PerChannel)?;
    let (raw_scales, _) = scales_for_ranges(stats.min(), stats.max(), &scheme)?;
    let (scales, _) = scales_for_ranges(sym.min(), sym.max(), &scheme)?;
    println!(
        "scale without / with re-centering: {:.4} / {:.4}",
        raw_scales[2], scales[2]
    );

    let layer = LinearLayer::new(
        MatF::from_rows(&[vec![0.5, -1.0, 0.02], vec![0.1, 0.3, -0.01]])?,
        vec![0.0, 1.0],
        QuantMode::FoldedPerChannel,
    )?;
    let (shifted, delta) = symmetrize_layer(&layer, &z)?;
    let x_hat = x.add_row_vector(&delta)?;
    println!("bias {:?} -> {:?}", layer.bias, shifted.bias);

    let folded = fold_weights(&shifted.weight, &scales)?;
    let x_codes_f = MatF::from_fn(3, 3, |r, c| x_hat.get(r, c) / scales[c]);
    let y = matmul_nt(&x_codes_f, &folded)?.add_row_vector(&shifted.bias)?;
    println!("original  {:?}", layer.forward(&x)?.data());
    println!("rewritten {:?}", y.data());
    Ok(())
}
