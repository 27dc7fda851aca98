//! Synthetic outlier data, seeded experiments and their reports.

mod data;

pub use data::{gen_activations, gen_inputs, random_block, OutlierSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, domain_err, Result};
use crate::qgemm::{gemm_channel_folded, gemm_channel_naive, GemmVariant, OpCount};
use crate::quant::{quant_error, sqnr_db, Axis, CalibStats, QScheme, QTensor, QuantError};
use crate::report::{Entry, Metadata, Report};
use crate::tensor::{rel_frobenius_error, MatF, MatI8};
use crate::transform::{calibrate, quantize_block, BlockConfig, BlockModel, EvalMode, QuantRecipe, TransformedBlock};

pub const DEFAULT_CALIB_ROWS: usize = 512;
pub const DEFAULT_EVAL_ROWS: usize = 2048;

/// A LayerNorm-fed projection layout paired with its weight scheme. The
/// weight bit width is also the activation bit width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeEntry {
    pub variant: GemmVariant,
    pub weight: QScheme,
}

impl SchemeEntry {
    pub fn new(variant: GemmVariant, bits: u8) -> Result<Self> {
        Ok(Self {
            variant,
            weight: QScheme::symmetric(bits, Axis::PerChannel)?,
        })
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.variant.name(), self.weight)
    }

    fn recipe(&self, symmetrize: bool) -> QuantRecipe {
        QuantRecipe {
            variant: self.variant,
            weight: self.weight,
            act_bits: self.weight.bits(),
            symmetrize,
            attn_quant: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub block: BlockConfig,
    /// Channel structure injected through the LayerNorm affine parameters.
    pub outliers: Option<OutlierSpec>,
    pub schemes: Vec<SchemeEntry>,
    pub calib_rows: usize,
    pub eval_rows: usize,
    pub symmetrize: bool,
    pub clip_ratio: f64,
    /// Model weights use `seed`; calibration inputs use `seed` and evaluation
    /// inputs `seed + 1` on a separate generator.
    pub seed: u64,
}

impl ExperimentConfig {
    /// Default block with one outlier channel per LayerNorm, all four
    /// variants at Int8.
    pub fn outlier_default(seed: u64) -> Self {
        let block = BlockConfig::default();
        Self {
            outliers: Some(OutlierSpec::dominant(block.hidden, seed)),
            schemes: GemmVariant::ALL
                .iter()
                .map(|v| SchemeEntry::new(*v, 8).expect("8 bits supported"))
                .collect(),
            block,
            calib_rows: DEFAULT_CALIB_ROWS,
            eval_rows: DEFAULT_EVAL_ROWS,
            symmetrize: true,
            clip_ratio: CalibStats::DEFAULT_CLIP_RATIO,
            seed,
        }
    }

    /// Folded per-channel at Int8 and Int6 on [`OutlierSpec::shifted`]
    /// channels, for toggling symmetrization.
    pub fn ablation_default(seed: u64) -> Self {
        let block = BlockConfig::default();
        Self {
            outliers: Some(OutlierSpec::shifted(block.hidden, seed)),
            schemes: vec![
                SchemeEntry::new(GemmVariant::ChannelChannelFolded, 8).expect("8 bits supported"),
                SchemeEntry::new(GemmVariant::ChannelChannelFolded, 6).expect("6 bits supported"),
            ],
            ..Self::outlier_default(seed)
        }
    }

    pub fn without_outliers(self) -> Self {
        Self { outliers: None, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.schemes.is_empty() {
            return Err(domain_err("experiment needs at least one scheme"));
        }
        if self.calib_rows == 0 || self.eval_rows == 0 {
            return Err(domain_err("calibration and evaluation sets must be non-empty"));
        }
        if let Some(spec) = &self.outliers {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Output error of a quantized block against its FP reference.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMetrics {
    pub mse: f64,
    pub sqnr_db: f64,
    pub max_rel_err: f64,
    pub rel_frobenius: f64,
}

impl OutputMetrics {
    pub fn between(reference: &MatF, approx: &MatF) -> Result<Self> {
        let e = QuantError::between(reference, approx)?;
        let peak = reference.max_abs();
        Ok(Self {
            mse: e.mse,
            sqnr_db: e.sqnr_db,
            max_rel_err: if peak > 0.0 {
                e.max_abs_err / peak
            } else if e.max_abs_err == 0.0 {
                0.0
            } else {
                f64::INFINITY
            },
            rel_frobenius: rel_frobenius_error(approx, reference)?,
        })
    }

    fn fill(&self, entry: &mut Entry) {
        entry.output_mse = Some(self.mse);
        entry.output_sqnr_db = Some(self.sqnr_db);
        entry.max_rel_err = Some(self.max_rel_err);
        entry.rel_frobenius = Some(self.rel_frobenius);
    }
}

/// Runs `block` on `x` and compares with `reference`. Quantized runs attach
/// per-layer activation errors and op counts.
pub fn evaluate(reference: &BlockModel, block: &TransformedBlock, x: &MatF, mode: EvalMode) -> Result<Entry> {
    let y_ref = reference.forward(x)?;
    let mut entry = Entry {
        label: block.recipe.variant.name().to_string(),
        variant: Some(block.recipe.variant.name().to_string()),
        scheme: Some(block.recipe.weight.to_string()),
        symmetrize: Some(block.recipe.symmetrize),
        ..Entry::default()
    };
    let y = match mode {
        EvalMode::Bypass => block.forward(x, EvalMode::Bypass)?,
        EvalMode::Quantized => {
            let (y, layers) = block.forward_detailed(x)?;
            entry.ops = Some(layers.iter().fold(OpCount::default(), |acc, l| acc + l.ops));
            entry.layers = layers;
            y
        }
    };
    OutputMetrics::between(&y_ref, &y)?.fill(&mut entry);
    Ok(entry)
}

struct Prepared {
    model: BlockModel,
    stats: (CalibStats, CalibStats),
    eval: MatF,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let n = cfg.block.hidden;
    let model = random_block(&cfg.block, cfg.outliers.as_ref(), cfg.seed)?;
    let calib = gen_inputs(n, cfg.calib_rows, data_seed(cfg.seed))?;
    let eval = gen_inputs(n, cfg.eval_rows, data_seed(cfg.seed.wrapping_add(1)))?;
    let stats = calibrate(&model, &[calib], cfg.clip_ratio)?;
    Ok(Prepared { model, stats, eval })
}

/// Input streams are keyed away from the weight stream of the same seed.
fn data_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_da7a_0000_0000
}

fn run_recipe(p: &Prepared, recipe: &QuantRecipe, label: String) -> Result<Entry> {
    let block = quantize_block(&p.model, Some(&p.stats.0), Some(&p.stats.1), recipe)?;
    let mut e = evaluate(&p.model, &block, &p.eval, EvalMode::Quantized)?;
    e.label = label;
    Ok(e)
}

/// Calibrates once, quantizes the block under every scheme and evaluates
/// each on held-out inputs.
pub fn run_scheme_comparison(cfg: &ExperimentConfig) -> Result<Report> {
    let p = prepare(cfg)?;
    let mut report = Report::new("scheme_comparison", Metadata::for_config(cfg, cfg.seed)?);
    for s in &cfg.schemes {
        report
            .entries
            .push(run_recipe(&p, &s.recipe(cfg.symmetrize), s.label())?);
    }
    Ok(report)
}

/// Every scheme with symmetrization on and off, labelled
/// `"<scheme>/sym-on"` and `"<scheme>/sym-off"`.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Report> {
    let p = prepare(cfg)?;
    let mut report = Report::new("ablation", Metadata::for_config(cfg, cfg.seed)?);
    for s in &cfg.schemes {
        for (sym, tag) in [(true, "sym-on"), (false, "sym-off")] {
            report
                .entries
                .push(run_recipe(&p, &s.recipe(sym), format!("{}/{tag}", s.label()))?);
        }
    }
    Ok(report)
}

fn random_codes(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<MatI8> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-127..=127)).collect();
    MatI8::new(rows, cols, data)
}

/// Runs the naive and folded per-channel kernels on random codes at each
/// shape and checks that folding saves exactly `i·j·n` scale multiplies.
pub fn run_opcount_check(shapes: &[(usize, usize, usize)], seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::new("opcount", Metadata::for_config(&(shapes, seed), seed)?);
    let scheme = QScheme::symmetric(8, Axis::PerChannel)?;
    for &(i, n, j) in shapes {
        let sx: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sw: Vec<f64> = (0..j).map(|_| rng.gen_range(0.01..1.0)).collect();
        let xq = QTensor::from_parts(random_codes(i, n, &mut rng)?, scheme, sx.clone(), vec![0; n])?;
        let wq = QTensor::from_parts(random_codes(n, j, &mut rng)?, scheme, sw, vec![0; j])?;
        let (_, naive) = gemm_channel_naive(&xq, &wq, &sx)?;
        let (_, folded) = gemm_channel_folded(&xq, &wq)?;
        let saving = naive.scale_mults - folded.scale_mults;
        if saving != (i * j * n) as u64 {
            return Err(contract_err(format!(
                "shape ({i}, {n}, {j}): folding saved {saving} scale multiplies, expected {}",
                i * j * n
            )));
        }
        for (v, ops) in [
            (GemmVariant::ChannelChannelNaive, naive),
            (GemmVariant::ChannelChannelFolded, folded),
        ] {
            report.entries.push(Entry {
                label: format!("{}/{i}x{n}x{j}", v.name()),
                variant: Some(v.name().to_string()),
                shape: Some([i, n, j]),
                ops: Some(ops),
                ..Entry::default()
            });
        }
    }
    Ok(report)
}

/// Activation-only quantization error of `x` at each granularity, all
/// symmetric dynamic: `[per-tensor, per-token, per-channel]`.
pub fn granularity_errors(x: &MatF, bits: u8) -> Result<[QuantError; 3]> {
    let e = |axis| quant_error(x, &QScheme::symmetric(bits, axis)?);
    Ok([e(Axis::PerTensor)?, e(Axis::PerToken)?, e(Axis::PerChannel)?])
}

/// SQNR of a measured MSE against the mean square of `reference`.
pub fn sqnr_of(reference: &MatF, mse: f64) -> f64 {
    let n = reference.data().len().max(1) as f64;
    sqnr_db(reference.data().iter().map(|v| v * v).sum::<f64>() / n, mse)
}
