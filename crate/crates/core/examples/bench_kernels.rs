//! Median timings of the naive and folded per-channel kernels. Timings are
//! machine dependent; the scale-multiply counts are not.

use foldquant::qgemm::bench_shapes;

fn main() -> foldquant::Result<()> {
    let shapes = [(16, 64, 64), (32, 256, 256), (64, 512, 256)];
    println!(
        "{:<24} {:>14} {:>12} {:>12}",
        "variant", "shape", "scale_mults", "median_ns"
    );
    for r in bench_shapes(&shapes, 15, 0)? {
        println!(
            "{:<24} {:>14} {:>12} {:>12}",
            r.variant,
            format!("{}x{}x{}", r.i, r.n, r.j),
            r.scale_mults,
            r.wall_ns_median
        );
    }
    Ok(())
}
