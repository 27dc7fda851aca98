//! The `foldquant` command line: generate, calibrate, transform, evaluate and
//! benchmark from the shell.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O or malformed input, 3 contract
//! violation (mismatched shapes, unsupported scheme, bad value).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpointed, Precision};
use crate::error::{Error, Result};
use crate::harness::{evaluate, gen_inputs, random_block, OutlierSpec, OutputMetrics};
use crate::qgemm::bench_shapes;
use crate::qgemm::{GemmVariant, OpCount};
use crate::quant::{Axis, CalibStats, QScheme, Symmetry};
use crate::report::{sha256_hex, Entry, Metadata, Report};
use crate::transform::{calibrate, quantize_block, BlockConfig, EvalMode, QuantRecipe, ResidualSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "foldquant",
    version,
    about = "Per-channel activation quantization for a toy transformer block"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random FP block checkpoint.
    GenModel(GenModelArgs),
    /// Record LayerNorm output ranges over generated inputs.
    Calibrate(CalibrateArgs),
    /// Quantize a block using calibration stats.
    Transform(TransformArgs),
    /// Compare blocks against an FP reference on generated inputs.
    Eval(EvalArgs),
    /// Time the per-channel kernels.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum OutlierPreset {
    None,
    Dominant,
    Shifted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ResidualArg {
    PreNorm,
    NormOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Tensor,
    Token,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    TensorTensor,
    TokenChannel,
    Naive,
    Folded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub ffn: usize,
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    #[arg(long, value_enum, default_value = "dominant")]
    pub outliers: OutlierPreset,
    #[arg(long, value_enum, default_value = "pre-norm")]
    pub residual: ResidualArg,
    /// Store weights as f32.
    #[arg(long)]
    pub f32: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub rows: usize,
    /// Token-wise clipping quantile; 1.0 is plain min-max.
    #[arg(long, default_value_t = 1.0)]
    pub clip_ratio: f64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Bit width of weights and activations.
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    /// Symmetric weights (default).
    #[arg(long, conflicts_with = "asymmetric")]
    pub symmetric: bool,
    /// Asymmetric weights with zero points.
    #[arg(long)]
    pub asymmetric: bool,
    /// Weight quantization axis.
    #[arg(long, value_enum, default_value = "channel")]
    pub axis: AxisArg,
    /// Layout of the LayerNorm-fed projections.
    #[arg(long, value_enum, default_value = "folded")]
    pub variant: VariantArg,
    /// Skip re-centering LayerNorm output channels.
    #[arg(long)]
    pub no_sym: bool,
    /// Fake-quantize the attention operands.
    #[arg(long)]
    pub attn_quant: bool,
    #[arg(long)]
    pub f32: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// FP reference block.
    #[arg(long)]
    pub model: PathBuf,
    /// Blocks to compare, transformed or FP. Repeatable.
    #[arg(long = "transformed", required = true)]
    pub transformed: Vec<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 2048)]
    pub rows: usize,
    /// Run transformed blocks with rounding bypassed.
    #[arg(long)]
    pub no_quant: bool,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated `IxNxJ` shapes.
    #[arg(long, value_delimiter = ',', default_value = "32x256x256")]
    pub shapes: Vec<String>,
    #[arg(long, default_value_t = 30)]
    pub repeats: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

/// Calibration output: stats for both LayerNorm outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub ln1: CalibStats,
    pub ln2: CalibStats,
}

/// Summary printed after writing a file.
#[derive(Debug, Serialize)]
struct Written<'a> {
    path: &'a Path,
    bytes: usize,
    sha256: String,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Json(_) => EXIT_IO,
        Error::Dimension(_) | Error::Domain(_) | Error::Contract(_) | Error::Overflow(_) => EXIT_CONTRACT,
    }
}

fn write_file(path: &Path, bytes: &[u8], stdout: &mut dyn Write) -> Result<()> {
    fs::write(path, bytes)?;
    let w = Written {
        path,
        bytes: bytes.len(),
        sha256: sha256_hex(bytes),
    };
    writeln!(stdout, "{}", serde_json::to_string_pretty(&w)?)?;
    Ok(())
}

fn emit(report: &Report, format: Format, stdout: &mut dyn Write) -> Result<()> {
    match format {
        Format::Json => writeln!(stdout, "{}", report.to_json()?)?,
        Format::Csv => write!(stdout, "{}", report.to_csv()?)?,
    }
    Ok(())
}

fn load_block(path: &Path) -> Result<crate::transform::BlockModel> {
    match Checkpointed::load(path)? {
        Checkpointed::Block(b) => Ok(b),
        Checkpointed::Transformed(_) => Err(Error::Format(format!(
            "{} holds a transformed block, expected an FP block",
            path.display()
        ))),
    }
}

pub fn cmd_gen_model(a: &GenModelArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = BlockConfig {
        hidden: a.hidden,
        heads: a.heads,
        ffn: a.ffn,
        seq_len: a.seq_len,
        residual: match a.residual {
            ResidualArg::PreNorm => ResidualSource::PreNorm,
            ResidualArg::NormOutput => ResidualSource::NormOutput,
        },
        ..BlockConfig::default()
    };
    let spec = match a.outliers {
        OutlierPreset::None => None,
        OutlierPreset::Dominant => Some(OutlierSpec::dominant(a.hidden, a.seed)),
        OutlierPreset::Shifted => Some(OutlierSpec::shifted(a.hidden, a.seed)),
    };
    let model = random_block(&cfg, spec.as_ref(), a.seed)?;
    let precision = if a.f32 { Precision::F32 } else { Precision::F64 };
    write_file(&a.out, &model.to_checkpoint(precision)?.to_bytes(), stdout)
}

pub fn cmd_calibrate(a: &CalibrateArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = load_block(&a.model)?;
    let x = gen_inputs(model.config.hidden, a.rows, a.seed)?;
    let (ln1, ln2) = calibrate(&model, &[x], a.clip_ratio)?;
    let json = serde_json::to_string_pretty(&StatsFile { ln1, ln2 })?;
    write_file(&a.out, json.as_bytes(), stdout)
}

impl TransformArgs {
    pub fn recipe(&self) -> Result<QuantRecipe> {
        let symmetry = if self.asymmetric {
            Symmetry::Asymmetric
        } else {
            Symmetry::Symmetric
        };
        let axis = match self.axis {
            AxisArg::Tensor => Axis::PerTensor,
            AxisArg::Token => Axis::PerToken,
            AxisArg::Channel => Axis::PerChannel,
        };
        let variant = match self.variant {
            VariantArg::TensorTensor => GemmVariant::TensorTensor,
            VariantArg::TokenChannel => GemmVariant::TokenChannel,
            VariantArg::Naive => GemmVariant::ChannelChannelNaive,
            VariantArg::Folded => GemmVariant::ChannelChannelFolded,
        };
        Ok(QuantRecipe {
            variant,
            weight: QScheme::new(self.bits, symmetry, axis)?,
            act_bits: self.bits,
            symmetrize: !self.no_sym,
            attn_quant: self.attn_quant,
        })
    }
}

pub fn cmd_transform(a: &TransformArgs, stdout: &mut dyn Write) -> Result<()> {
    let recipe = a.recipe()?;
    let model = load_block(&a.model)?;
    let stats: StatsFile = serde_json::from_slice(&fs::read(&a.stats)?)?;
    let block = quantize_block(&model, Some(&stats.ln1), Some(&stats.ln2), &recipe)?;
    let precision = if a.f32 { Precision::F32 } else { Precision::F64 };
    write_file(&a.out, &block.to_checkpoint(precision)?.to_bytes(), stdout)
}

#[derive(Serialize)]
struct EvalIdentity<'a> {
    command: &'a str,
    seed: u64,
    rows: usize,
    no_quant: bool,
    inputs: Vec<String>,
}

pub fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let reference = load_block(&a.model)?;
    let mut inputs = vec![sha256_hex(&fs::read(&a.model)?)];
    for p in &a.transformed {
        inputs.push(sha256_hex(&fs::read(p)?));
    }
    let identity = EvalIdentity {
        command: "eval",
        seed: a.seed,
        rows: a.rows,
        no_quant: a.no_quant,
        inputs,
    };
    let mut report = Report::new("eval", Metadata::for_config(&identity, a.seed)?);
    let x = gen_inputs(reference.config.hidden, a.rows, a.seed)?;
    let mode = if a.no_quant {
        EvalMode::Bypass
    } else {
        EvalMode::Quantized
    };
    for path in &a.transformed {
        let label = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        let mut entry = match Checkpointed::load(path)? {
            Checkpointed::Transformed(t) => {
                if t.config != reference.config {
                    return Err(Error::Dimension(format!("{label} has a different block shape")));
                }
                evaluate(&reference, &t, &x, mode)?
            }
            Checkpointed::Block(b) => {
                let mut e = Entry {
                    variant: Some("fp".into()),
                    ..Entry::default()
                };
                let y = b.forward(&x)?;
                let metrics = OutputMetrics::between(&reference.forward(&x)?, &y)?;
                e.output_mse = Some(metrics.mse);
                e.output_sqnr_db = Some(metrics.sqnr_db);
                e.max_rel_err = Some(metrics.max_rel_err);
                e.rel_frobenius = Some(metrics.rel_frobenius);
                e
            }
        };
        entry.label = label;
        report.entries.push(entry);
    }
    emit(&report, a.format, stdout)
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    let dims: Vec<usize> = parts.iter().filter_map(|p| p.parse().ok()).filter(|d| *d > 0).collect();
    match dims[..] {
        [i, n, j] if parts.len() == 3 => Ok((i, n, j)),
        _ => Err(Error::Domain(format!("shape {s:?} is not IxNxJ with positive dims"))),
    }
}

pub fn cmd_bench(a: &BenchArgs, stdout: &mut dyn Write) -> Result<()> {
    let shapes = a.shapes.iter().map(|s| parse_shape(s)).collect::<Result<Vec<_>>>()?;
    let records = bench_shapes(&shapes, a.repeats, a.seed)?;
    let mut report = Report::new("bench", Metadata::for_config(&(&a.shapes, a.repeats, a.seed), a.seed)?);
    for r in records {
        report.entries.push(Entry {
            label: format!("{}/{}x{}x{}", r.variant, r.i, r.n, r.j),
            variant: Some(r.variant),
            shape: Some([r.i, r.n, r.j]),
            ops: Some(OpCount {
                int_mults: r.int_mults,
                int_adds: r.int_mults,
                scale_mults: r.scale_mults,
                zp_mults: 0,
            }),
            wall_ns: Some(r.wall_ns_median),
            ..Entry::default()
        });
    }
    emit(&report, a.format, stdout)
}

pub fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenModel(a) => cmd_gen_model(a, stdout),
        Command::Calibrate(a) => cmd_calibrate(a, stdout),
        Command::Transform(a) => cmd_transform(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Bench(a) => cmd_bench(a, stdout),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("8x16x4").unwrap(), (8, 16, 4));
        for bad in ["8x16", "8x0x4", "axbxc", "1x2x3x4"] {
            assert!(parse_shape(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            ["foldquant", "transform", "--symmetric", "--asymmetric"],
            &mut out,
            &mut err,
        );
        assert_eq!(code, EXIT_USAGE);
        assert_eq!(run(["foldquant", "nope"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["foldquant", "--help"], &mut out, &mut err), EXIT_OK);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_IO);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_IO);
        assert_eq!(exit_code(&Error::Contract("x".into())), EXIT_CONTRACT);
        assert_eq!(exit_code(&Error::Dimension("x".into())), EXIT_CONTRACT);
    }
}
