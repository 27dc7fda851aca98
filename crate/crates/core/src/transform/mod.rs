//! Rewrites a [`BlockModel`] so per-channel activation quantization runs on
//! plain integer GEMMs.
//!
//! Two output-preserving edits are applied to every LayerNorm-fed linear
//! layer:
//!
//! * **Symmetrization.** Each LayerNorm output channel is re-centered by
//!   `z_k = (max_k + min_k) / 2` through the LayerNorm bias. The layer
//!   absorbs the shift: `(X̂ + z)Wᵀ + b = X̂Wᵀ + (zWᵀ + b)`. When the residual
//!   branch is taken from the LayerNorm output, `out`/`fc2` add `z` back
//!   through their biases.
//! * **Scale folding.** With static per-channel activation scales `s`, the
//!   inner-dimension scale of `Σ_k s_k X̃_ik W̃_kj` moves into the weights,
//!   `W_s = W ⊙ s`, which are quantized offline per output channel. The GEMM
//!   then only needs one scale per output column.

mod block;
mod quantized;

pub use block::{BlockConfig, BlockModel, BlockTrace, LayerNorm, LinearLayer, QuantMode, ResidualSource};
pub use quantized::{
    quantize_weight, EvalMode, FoldedLinear, InputProjection, LayerReport, NaiveLinear, QuantLinear, QuantRecipe,
    TransformedBlock,
};

use crate::error::{contract_err, dim_err, domain_err, Result};
use crate::qgemm::GemmVariant;
use crate::quant::{scales_for_ranges, Axis, CalibStats, QScheme};
use crate::tensor::{matmul_nt, MatF};

/// Per-channel midpoint of the calibrated range.
pub fn compute_symmetrization(stats: &CalibStats) -> Result<Vec<f64>> {
    if stats.is_empty() {
        return Err(domain_err("symmetrization needs populated stats"));
    }
    Ok(stats
        .min()
        .iter()
        .zip(stats.max())
        .map(|(lo, hi)| (hi + lo) / 2.0)
        .collect())
}

/// Ranges after shifting by `z`, widened to the symmetric interval
/// `[-h_k, h_k]` with `h_k = max(|max_k - z_k|, |min_k - z_k|)`.
pub fn symmetrized_stats(stats: &CalibStats, z: &[f64]) -> Result<CalibStats> {
    let shifted = stats.shifted(z)?;
    let half: Vec<f64> = shifted
        .min()
        .iter()
        .zip(shifted.max())
        .map(|(lo, hi)| lo.abs().max(hi.abs()))
        .collect();
    CalibStats::from_ranges(
        half.iter().map(|h| -h).collect(),
        half,
        stats.count(),
        stats.clip_ratio(),
    )
}

/// `W_s[r][k] = W[r][k] · s[k]` for an `out × in` weight.
pub fn fold_weights(w: &MatF, sx: &[f64]) -> Result<MatF> {
    if w.cols() != sx.len() {
        return Err(dim_err(format!(
            "{} activation scales for a weight with {} inputs",
            sx.len(),
            w.cols()
        )));
    }
    if let Some(s) = sx.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(domain_err(format!("activation scale {s} is not positive")));
    }
    Ok(MatF::from_fn(w.rows(), w.cols(), |r, k| w.get(r, k) * sx[k]))
}

/// Absorbs an input shift into the bias: returns the layer with
/// `b' = z·Wᵀ + b` and the delta `-z` for the producing LayerNorm's bias.
pub fn symmetrize_layer(layer: &LinearLayer, z: &[f64]) -> Result<(LinearLayer, Vec<f64>)> {
    if z.len() != layer.in_dim() {
        return Err(dim_err(format!(
            "shift of length {} for a layer with {} inputs",
            z.len(),
            layer.in_dim()
        )));
    }
    let zw = matmul_nt(&MatF::from_raw(1, z.len(), z.to_vec()), &layer.weight)?;
    let bias = zw.row(0).iter().zip(&layer.bias).map(|(a, b)| a + b).collect();
    let updated = LinearLayer::new(layer.weight.clone(), bias, layer.mode)?;
    Ok((updated, z.iter().map(|v| -v).collect()))
}

/// Adds `z` to the output bias so a residual stream that was shifted by `-z`
/// comes back unchanged after the branch is added.
pub fn correct_residual(layer: &LinearLayer, z: &[f64]) -> Result<LinearLayer> {
    if z.len() != layer.out_dim() {
        return Err(dim_err(format!(
            "shift of length {} for a layer with {} outputs",
            z.len(),
            layer.out_dim()
        )));
    }
    let bias = layer.bias.iter().zip(z).map(|(b, v)| b + v).collect();
    LinearLayer::new(layer.weight.clone(), bias, layer.mode)
}

fn shift_ln(ln: &LayerNorm, delta: &[f64]) -> LayerNorm {
    LayerNorm {
        gamma: ln.gamma.clone(),
        beta: ln.beta.iter().zip(delta).map(|(b, d)| b + d).collect(),
        eps: ln.eps,
    }
}

fn require_stats<'a>(stats: Option<&'a CalibStats>, n: usize, which: &str) -> Result<&'a CalibStats> {
    let stats = stats.ok_or_else(|| domain_err(format!("{which}: per-channel variants need calibration stats")))?;
    if stats.is_empty() {
        return Err(domain_err(format!("{which}: calibration stats are unpopulated")));
    }
    if stats.channels() != n {
        return Err(dim_err(format!(
            "{which}: stats track {} channels, model has {n}",
            stats.channels()
        )));
    }
    Ok(stats)
}

/// Rewrites one LayerNorm → linear pair. Returns the shifted LayerNorm, the
/// quantized projection and the shift `z` (zeros when not symmetrized).
fn rewrite_input(
    ln: &LayerNorm,
    layer: &LinearLayer,
    stats: Option<&CalibStats>,
    recipe: &QuantRecipe,
    which: &str,
) -> Result<(LayerNorm, InputProjection, Vec<f64>)> {
    let n = layer.in_dim();
    match recipe.variant {
        GemmVariant::TensorTensor | GemmVariant::TokenChannel => Ok((
            ln.clone(),
            InputProjection::Dynamic(QuantLinear::new(
                layer,
                recipe.variant,
                &recipe.weight,
                recipe.act_bits,
            )?),
            vec![0.0; n],
        )),
        GemmVariant::ChannelChannelNaive | GemmVariant::ChannelChannelFolded => {
            let stats = require_stats(stats, n, which)?;
            let z = if recipe.symmetrize {
                compute_symmetrization(stats)?
            } else {
                vec![0.0; n]
            };
            let (layer_sym, delta) = symmetrize_layer(layer, &z)?;
            let ln_sym = shift_ln(ln, &delta);
            let act = QScheme::symmetric(recipe.act_bits, Axis::PerChannel)?;
            let sym = symmetrized_stats(stats, &z)?;
            let (sx, _) = scales_for_ranges(sym.min(), sym.max(), &act)?;
            let proj = if recipe.variant == GemmVariant::ChannelChannelFolded {
                let weight_folded = fold_weights(&layer.weight, &sx)?;
                let folded = FoldedLinear {
                    wsq: quantize_weight(&weight_folded, &recipe.weight)?,
                    weight_folded,
                    bias: layer_sym.bias,
                    sx,
                    sym_z: z.clone(),
                    act,
                };
                folded.verify_bias(&layer.bias, 1e-12)?;
                InputProjection::Folded(folded)
            } else {
                InputProjection::Naive(NaiveLinear {
                    wq: quantize_weight(&layer.weight, &recipe.weight)?,
                    weight: layer.weight.clone(),
                    bias: layer_sym.bias,
                    sx,
                    sym_z: z.clone(),
                    act,
                })
            };
            Ok((ln_sym, proj, z))
        }
    }
}

/// Builds a quantized block under any recipe. The per-channel variants need
/// stats gathered on the raw LayerNorm outputs of the original block.
pub fn quantize_block(
    model: &BlockModel,
    stats_ln1: Option<&CalibStats>,
    stats_ln2: Option<&CalibStats>,
    recipe: &QuantRecipe,
) -> Result<TransformedBlock> {
    if recipe.weight.axis() != Axis::PerChannel {
        return Err(contract_err(format!(
            "weight scheme must be per-channel, got {}",
            recipe.weight
        )));
    }
    QScheme::symmetric(recipe.act_bits, Axis::PerChannel)?;
    let (ln1, qkv, z1) = rewrite_input(&model.ln1, &model.qkv, stats_ln1, recipe, "ln1")?;
    let (ln2, fc1, z2) = rewrite_input(&model.ln2, &model.fc1, stats_ln2, recipe, "ln2")?;
    let (out, fc2) = match model.config.residual {
        ResidualSource::PreNorm => (model.out.clone(), model.fc2.clone()),
        ResidualSource::NormOutput => (correct_residual(&model.out, &z1)?, correct_residual(&model.fc2, &z2)?),
    };
    let tc = GemmVariant::TokenChannel;
    Ok(TransformedBlock {
        config: model.config,
        recipe: *recipe,
        ln1,
        qkv,
        out: QuantLinear::new(&out, tc, &recipe.weight, recipe.act_bits)?,
        ln2,
        fc1,
        fc2: QuantLinear::new(&fc2, tc, &recipe.weight, recipe.act_bits)?,
    })
}

/// Symmetrize, fold and quantize: static per-channel symmetric activations
/// after each LayerNorm, per-channel weights (symmetric or asymmetric).
pub fn transform_block(
    model: &BlockModel,
    stats_ln1: &CalibStats,
    stats_ln2: &CalibStats,
    wscheme: &QScheme,
    ascheme: &QScheme,
) -> Result<TransformedBlock> {
    if ascheme.axis() != Axis::PerChannel || !ascheme.is_symmetric() {
        return Err(contract_err(format!(
            "LayerNorm outputs are quantized per-channel symmetric, got {ascheme}"
        )));
    }
    let recipe = QuantRecipe {
        variant: GemmVariant::ChannelChannelFolded,
        weight: *wscheme,
        act_bits: ascheme.bits(),
        symmetrize: true,
        attn_quant: false,
    };
    quantize_block(model, Some(stats_ln1), Some(stats_ln2), &recipe)
}

/// Calibration stats for both LayerNorm outputs of `model` over `batches`.
pub fn calibrate(model: &BlockModel, batches: &[MatF], clip_ratio: f64) -> Result<(CalibStats, CalibStats)> {
    let n = model.config.hidden;
    let mut s1 = CalibStats::new(n, clip_ratio)?;
    let mut s2 = CalibStats::new(n, clip_ratio)?;
    for b in batches {
        let t = model.trace(b)?;
        s1.observe(&t.ln1_out)?;
        s2.observe(&t.ln2_out)?;
    }
    Ok((s1, s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{random_block, OutlierSpec};
    use crate::tensor::rel_frobenius_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(min: Vec<f64>, max: Vec<f64>) -> CalibStats {
        CalibStats::from_ranges(min, max, 1, 1.0).unwrap()
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> MatF {
        MatF::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn symmetrization_examples() {
        let s = stats(vec![-3.0, -5.0, -93.0], vec![9.0, 5.0, -60.0]);
        let z = compute_symmetrization(&s).unwrap();
        assert_eq!(z, vec![3.0, 0.0, -76.5]);
        let sym = symmetrized_stats(&s, &z).unwrap();
        assert_eq!(sym.min(), &[-6.0, -5.0, -16.5]);
        assert_eq!(sym.max(), &[6.0, 5.0, 16.5]);
        assert_eq!(compute_symmetrization(&sym).unwrap(), vec![0.0; 3]);
        assert!(compute_symmetrization(&CalibStats::new(3, 1.0).unwrap()).is_err());
    }

    #[test]
    fn fold_examples() {
        let w = MatF::from_rows(&[vec![2.0, 4.0], vec![6.0, 8.0]]).unwrap();
        assert_eq!(fold_weights(&w, &[1.0, 1.0]).unwrap(), w);
        let f = fold_weights(&w, &[0.5, 0.25]).unwrap();
        assert_eq!(f.data(), &[1.0, 1.0, 3.0, 2.0]);
        assert!(matches!(fold_weights(&w, &[0.5, 0.0]), Err(crate::Error::Domain(_))));
        assert!(fold_weights(&w, &[0.5]).is_err());
    }

    #[test]
    fn fold_identity_on_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_mat(10, 6, &mut rng);
        let w = random_mat(4, 6, &mut rng);
        let sx: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..3.0)).collect();
        let ws = fold_weights(&w, &sx).unwrap();
        let xs = MatF::from_fn(10, 6, |r, c| x.get(r, c) / sx[c]);
        let lhs = matmul_nt(&xs, &ws).unwrap();
        let rhs = matmul_nt(&x, &w).unwrap();
        assert!(rel_frobenius_error(&lhs, &rhs).unwrap() < 1e-12);
    }

    #[test]
    fn symmetrize_layer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = LinearLayer::new(
            random_mat(3, 4, &mut rng),
            vec![0.5, -1.0, 2.0],
            QuantMode::FoldedPerChannel,
        )
        .unwrap();
        let (same, delta) = symmetrize_layer(&layer, &[0.0; 4]).unwrap();
        assert_eq!(same, layer);
        assert_eq!(delta, vec![-0.0; 4]);

        let eye = LinearLayer::new(MatF::identity(3), vec![0.0; 3], QuantMode::FoldedPerChannel).unwrap();
        let (shifted, _) = symmetrize_layer(&eye, &[1.5, -2.0, 7.0]).unwrap();
        assert_eq!(shifted.bias, vec![1.5, -2.0, 7.0]);

        assert!(symmetrize_layer(&layer, &[0.0; 3]).is_err());
    }

    #[test]
    fn symmetrize_layer_identity_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = LinearLayer::new(
            random_mat(5, 8, &mut rng),
            (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            QuantMode::FoldedPerChannel,
        )
        .unwrap();
        let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let (sym, _) = symmetrize_layer(&layer, &z).unwrap();
        for _ in 0..100 {
            let xh = random_mat(1, 8, &mut rng);
            let lhs = layer.forward(&xh.add_row_vector(&z).unwrap()).unwrap();
            let rhs = sym.forward(&xh).unwrap();
            let scale = lhs.max_abs().max(1.0);
            assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * scale * 100.0);
        }
    }

    #[test]
    fn correct_residual_examples() {
        let layer = LinearLayer::new(MatF::zeros(3, 2), vec![0.0; 3], QuantMode::TokenChannel).unwrap();
        assert_eq!(correct_residual(&layer, &[0.0; 3]).unwrap(), layer);
        let v = [1.0, -2.0, 0.5];
        let c = correct_residual(&layer, &v).unwrap();
        let y = c.forward(&MatF::from_rows(&[vec![3.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(y.row(0), &v);
        assert!(correct_residual(&layer, &[0.0; 2]).is_err());
    }

    fn identityish_block() -> BlockModel {
        let n = 4;
        let cfg = BlockConfig {
            hidden: n,
            heads: 2,
            ffn: 4,
            seq_len: 4,
            eps: 1e-5,
            residual: ResidualSource::PreNorm,
        };
        let lin = |o: usize, i: usize, mode| {
            let w = MatF::from_fn(o, i, |r, c| if r % i == c { 1.0 } else { 0.0 });
            LinearLayer::new(w, vec![0.0; o], mode).unwrap()
        };
        BlockModel::new(
            cfg,
            LayerNorm::identity(n, 1e-5),
            lin(3 * n, n, QuantMode::FoldedPerChannel),
            lin(n, n, QuantMode::TokenChannel),
            LayerNorm::identity(n, 1e-5),
            lin(4, n, QuantMode::FoldedPerChannel),
            lin(n, 4, QuantMode::TokenChannel),
        )
        .unwrap()
    }

    #[test]
    fn identityish_block_with_symmetric_calibration() {
        let model = identityish_block();
        let s = stats(vec![-2.0; 4], vec![2.0; 4]);
        let w = QScheme::symmetric(8, Axis::PerChannel).unwrap();
        let t = transform_block(&model, &s, &s, &w, &w).unwrap();
        assert_eq!(t.sym_z1(), vec![0.0; 4]);
        let InputProjection::Folded(f) = &t.fc1 else {
            panic!("expected folded fc1")
        };
        assert_eq!(f.sx, vec![2.0 / 127.0; 4]);
        let expect = MatF::from_fn(4, 4, |r, c| if r == c { 2.0 / 127.0 } else { 0.0 });
        assert_eq!(f.weight_folded, expect);

        let x = MatF::from_fn(6, 4, |r, c| ((r * 3 + c) % 5) as f64 - 2.0);
        assert_eq!(t.forward(&x, EvalMode::Bypass).unwrap(), model.forward(&x).unwrap());
    }

    #[test]
    fn bypass_preserves_outputs_for_both_residual_sources() {
        for residual in [ResidualSource::PreNorm, ResidualSource::NormOutput] {
            let cfg = BlockConfig {
                residual,
                ..BlockConfig::default()
            };
            let spec = OutlierSpec::dominant(cfg.hidden, 77);
            let model = random_block(&cfg, Some(&spec), 77).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let calib = random_mat(64, cfg.hidden, &mut rng);
            let (s1, s2) = calibrate(&model, &[calib], 1.0).unwrap();
            let w = QScheme::asymmetric(8, Axis::PerChannel).unwrap();
            let a = QScheme::symmetric(8, Axis::PerChannel).unwrap();
            let t = transform_block(&model, &s1, &s2, &w, &a).unwrap();
            assert!(t.sym_z1().iter().any(|z| z.abs() > 10.0));
            let x = random_mat(50, cfg.hidden, &mut rng);
            let y = model.forward(&x).unwrap();
            let yt = t.forward(&x, EvalMode::Bypass).unwrap();
            let err = rel_frobenius_error(&yt, &y).unwrap();
            assert!(err < 1e-9, "{residual:?}: {err}");
        }
    }

    #[test]
    fn residual_correction_is_required_for_norm_output_blocks() {
        let cfg = BlockConfig {
            residual: ResidualSource::NormOutput,
            ..BlockConfig::default()
        };
        let spec = OutlierSpec::dominant(cfg.hidden, 5);
        let model = random_block(&cfg, Some(&spec), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s1, s2) = calibrate(&model, &[random_mat(64, cfg.hidden, &mut rng)], 1.0).unwrap();
        let recipe = QuantRecipe::folded(8).unwrap();
        let mut t = quantize_block(&model, Some(&s1), Some(&s2), &recipe).unwrap();
        // undo the out-bias correction
        let z1 = t.sym_z1();
        for (b, z) in t.out.bias.iter_mut().zip(&z1) {
            *b -= z;
        }
        let x = random_mat(20, cfg.hidden, &mut rng);
        let err = rel_frobenius_error(&t.forward(&x, EvalMode::Bypass).unwrap(), &model.forward(&x).unwrap()).unwrap();
        assert!(err > 1e-3);
    }

    #[test]
    fn static_scales_cover_calibration_data() {
        let cfg = BlockConfig::default();
        let spec = OutlierSpec::dominant(cfg.hidden, 13);
        let model = random_block(&cfg, Some(&spec), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let calib = random_mat(128, cfg.hidden, &mut rng);
        let (s1, s2) = calibrate(&model, std::slice::from_ref(&calib), 1.0).unwrap();
        let t = quantize_block(&model, Some(&s1), Some(&s2), &QuantRecipe::folded(6).unwrap()).unwrap();
        let sx = t.qkv.activation_scales().unwrap();
        let z = t.sym_z1();
        let raw = model.trace(&calib).unwrap().ln1_out;
        for r in 0..raw.rows() {
            for k in 0..cfg.hidden {
                let v = raw.get(r, k) - z[k];
                assert!(v.abs() <= sx[k] * 31.0 * (1.0 + 1e-12), "row {r} ch {k}");
            }
        }
    }

    #[test]
    fn recipe_contract_errors() {
        let model = identityish_block();
        let s = stats(vec![-1.0; 4], vec![1.0; 4]);
        let w_tensor = QScheme::symmetric(8, Axis::PerTensor).unwrap();
        let a = QScheme::symmetric(8, Axis::PerChannel).unwrap();
        assert!(matches!(
            transform_block(&model, &s, &s, &w_tensor, &a),
            Err(crate::Error::Contract(_))
        ));
        let a_tok = QScheme::symmetric(8, Axis::PerToken).unwrap();
        assert!(matches!(
            transform_block(&model, &s, &s, &a, &a_tok),
            Err(crate::Error::Contract(_))
        ));
        let empty = CalibStats::new(4, 1.0).unwrap();
        assert!(matches!(
            transform_block(&model, &empty, &s, &a, &a),
            Err(crate::Error::Domain(_))
        ));
        let wrong = stats(vec![-1.0; 3], vec![1.0; 3]);
        assert!(matches!(
            transform_block(&model, &wrong, &s, &a, &a),
            Err(crate::Error::Dimension(_))
        ));
        let tok = QuantRecipe::folded(8).unwrap().with_variant(GemmVariant::TokenChannel);
        assert!(quantize_block(&model, None, None, &tok).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn case() -> impl Strategy<Value = (MatF, MatF, Vec<f64>)> {
            (1usize..6, 1usize..10, 1usize..6).prop_flat_map(|(i, n, j)| {
                (
                    prop::collection::vec(-10f64..10.0, i * n),
                    prop::collection::vec(-1f64..1.0, j * n),
                    prop::collection::vec(1e-3f64..1e3, n),
                )
                    .prop_map(move |(x, w, s)| (MatF::new(i, n, x).unwrap(), MatF::new(j, n, w).unwrap(), s))
            })
        }

        proptest! {
            #[test]
            fn folding_preserves_the_product((x, w, s) in case()) {
                let xs = MatF::from_fn(x.rows(), x.cols(), |r, k| x.get(r, k) / s[k]);
                let lhs = matmul_nt(&xs, &fold_weights(&w, &s).unwrap()).unwrap();
                let rhs = matmul_nt(&x, &w).unwrap();
                prop_assert!(rel_frobenius_error(&lhs, &rhs).unwrap() < 1e-12);
            }

            #[test]
            fn shifted_input_absorbed_by_bias((x, w, s) in case()) {
                // reuse s as a shift of mixed sign
                let z: Vec<f64> = s.iter().enumerate().map(|(k, v)| if k % 2 == 0 { *v } else { -v }).collect();
                let layer = LinearLayer::new(w.clone(), vec![0.25; w.rows()], QuantMode::FoldedPerChannel).unwrap();
                let (shifted, delta) = symmetrize_layer(&layer, &z).unwrap();
                let x_hat = x.add_row_vector(&delta).unwrap();
                let lhs = shifted.forward(&x_hat).unwrap();
                let rhs = layer.forward(&x).unwrap();
                prop_assert!(rel_frobenius_error(&lhs, &rhs).unwrap() < 1e-12);
            }
        }
    }
}
