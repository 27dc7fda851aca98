use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::qgemm::{
    gemm_channel_folded, gemm_channel_naive, gemm_tensor_tensor, gemm_token_channel, GemmVariant, OpCount,
};
use crate::quant::{dequantize, quantize, quantize_with_params, Axis, QScheme, QTensor, QuantError};
use crate::tensor::{matmul_nt, MatF};

use super::block::{attention, relu, residual_add, BlockConfig, LayerNorm, LinearLayer};

/// Whether a rewritten block runs its integer kernels or the same algebra in
/// f64 with rounding bypassed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Bypass,
    Quantized,
}

/// Activation error and kernel arithmetic of one projection during a
/// quantized forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub act_error: QuantError,
    pub ops: OpCount,
}

/// Quantizes an `out × in` weight as an `in × out` tensor so that
/// per-channel scales are per output column.
pub fn quantize_weight(w: &MatF, scheme: &QScheme) -> Result<QTensor> {
    quantize(&w.transpose(), scheme, None)
}

fn act_scheme(bits: u8, axis: Axis) -> Result<QScheme> {
    QScheme::symmetric(bits, axis)
}

fn record(sink: &mut Option<&mut Vec<LayerReport>>, name: &str, x: &MatF, xq: &QTensor, ops: OpCount) -> Result<()> {
    if let Some(sink) = sink.as_mut() {
        sink.push(LayerReport {
            layer: name.to_string(),
            act_error: QuantError::between(x, &dequantize(xq))?,
            ops,
        });
    }
    Ok(())
}

/// Linear layer with dynamically quantized activations: per-token
/// (`TokenChannel`) or per-tensor (`TensorTensor`).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLinear {
    pub variant: GemmVariant,
    pub weight: MatF,
    pub bias: Vec<f64>,
    pub wq: QTensor,
    pub act: QScheme,
}

impl QuantLinear {
    pub fn new(layer: &LinearLayer, variant: GemmVariant, wscheme: &QScheme, act_bits: u8) -> Result<Self> {
        let (act_axis, w_axis) = match variant {
            GemmVariant::TokenChannel | GemmVariant::TensorTensor => variant.axes(),
            _ => return Err(contract_err("QuantLinear takes dynamic-activation variants only")),
        };
        if variant == GemmVariant::TensorTensor && !wscheme.is_symmetric() {
            return Err(contract_err("tensor_tensor needs symmetric weights"));
        }
        Ok(Self {
            variant,
            weight: layer.weight.clone(),
            bias: layer.bias.clone(),
            wq: quantize_weight(&layer.weight, &wscheme.with_axis(w_axis))?,
            act: act_scheme(act_bits, act_axis)?,
        })
    }

    fn forward(&self, name: &str, x: &MatF, mode: EvalMode, sink: &mut Option<&mut Vec<LayerReport>>) -> Result<MatF> {
        match mode {
            EvalMode::Bypass => matmul_nt(x, &self.weight)?.add_row_vector(&self.bias),
            EvalMode::Quantized => {
                let xq = quantize(x, &self.act, None)?;
                let (y, ops) = match self.variant {
                    GemmVariant::TensorTensor => gemm_tensor_tensor(&xq, &self.wq)?,
                    _ => gemm_token_channel(&xq, &self.wq)?,
                };
                record(sink, name, x, &xq, ops)?;
                y.add_row_vector(&self.bias)
            }
        }
    }
}

/// Per-channel static activations with the activation scale applied inside
/// the reduction. Weights are quantized from the unfolded `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveLinear {
    pub weight: MatF,
    /// `z·Wᵀ + b`.
    pub bias: Vec<f64>,
    pub wq: QTensor,
    pub sx: Vec<f64>,
    pub sym_z: Vec<f64>,
    pub act: QScheme,
}

/// Per-channel static activations whose scales live in the weights:
/// `W_s = W ⊙ s^X`, quantized per output channel after folding.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedLinear {
    /// `W_s`, `out × in`.
    pub weight_folded: MatF,
    /// `z·Wᵀ + b`, kept in f64.
    pub bias: Vec<f64>,
    /// `W_sᵀ` quantized per output column.
    pub wsq: QTensor,
    pub sx: Vec<f64>,
    pub sym_z: Vec<f64>,
    pub act: QScheme,
}

impl FoldedLinear {
    /// Checks the stored pieces against each other: `sx`/`sym_z` lengths match
    /// the folded input dim, and `bias == z·Wᵀ + b_orig` where `W` is
    /// recovered by unfolding.
    pub fn verify_bias(&self, original_bias: &[f64], tol: f64) -> Result<()> {
        let n = self.weight_folded.cols();
        if self.sx.len() != n || self.sym_z.len() != n || self.wsq.rows() != n {
            return Err(contract_err("folded layer parameter lengths disagree"));
        }
        for (r, (&b, &b0)) in self.bias.iter().zip(original_bias).enumerate() {
            let mut expect = b0;
            for k in 0..n {
                expect += self.sym_z[k] * (self.weight_folded.get(r, k) / self.sx[k]);
            }
            if (expect - b).abs() > tol * (1.0 + expect.abs()) {
                return Err(contract_err(format!(
                    "absorbed bias {b} differs from recomputation {expect} at output {r}"
                )));
            }
        }
        Ok(())
    }
}

fn static_quantize(x: &MatF, act: &QScheme, sx: &[f64]) -> Result<QTensor> {
    quantize_with_params(x, act, sx, &vec![0; sx.len()])
}

/// A LayerNorm-fed projection in one of the four quantization layouts.
#[derive(Clone, Debug, PartialEq)]
pub enum InputProjection {
    Dynamic(QuantLinear),
    Naive(NaiveLinear),
    Folded(FoldedLinear),
}

impl InputProjection {
    pub fn variant(&self) -> GemmVariant {
        match self {
            InputProjection::Dynamic(q) => q.variant,
            InputProjection::Naive(_) => GemmVariant::ChannelChannelNaive,
            InputProjection::Folded(_) => GemmVariant::ChannelChannelFolded,
        }
    }

    /// Symmetrization shift absorbed by this layer; zeros when none.
    pub fn sym_z(&self) -> Option<&[f64]> {
        match self {
            InputProjection::Dynamic(_) => None,
            InputProjection::Naive(l) => Some(&l.sym_z),
            InputProjection::Folded(l) => Some(&l.sym_z),
        }
    }

    pub fn activation_scales(&self) -> Option<&[f64]> {
        match self {
            InputProjection::Dynamic(_) => None,
            InputProjection::Naive(l) => Some(&l.sx),
            InputProjection::Folded(l) => Some(&l.sx),
        }
    }

    fn forward(&self, name: &str, x: &MatF, mode: EvalMode, sink: &mut Option<&mut Vec<LayerReport>>) -> Result<MatF> {
        match (self, mode) {
            (InputProjection::Dynamic(q), _) => q.forward(name, x, mode, sink),
            (InputProjection::Naive(l), EvalMode::Bypass) => matmul_nt(x, &l.weight)?.add_row_vector(&l.bias),
            (InputProjection::Naive(l), EvalMode::Quantized) => {
                let xq = static_quantize(x, &l.act, &l.sx)?;
                let (y, ops) = gemm_channel_naive(&xq, &l.wq, &l.sx)?;
                record(sink, name, x, &xq, ops)?;
                y.add_row_vector(&l.bias)
            }
            (InputProjection::Folded(l), EvalMode::Bypass) => {
                let scaled = MatF::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) / l.sx[c]);
                matmul_nt(&scaled, &l.weight_folded)?.add_row_vector(&l.bias)
            }
            (InputProjection::Folded(l), EvalMode::Quantized) => {
                let xq = static_quantize(x, &l.act, &l.sx)?;
                let (y, ops) = gemm_channel_folded(&xq, &l.wsq)?;
                record(sink, name, x, &xq, ops)?;
                y.add_row_vector(&l.bias)
            }
        }
    }
}

/// Quantization choices for rewriting a block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRecipe {
    /// Layout for the LayerNorm-fed projections (qkv, fc1). `out` and `fc2`
    /// always use token-channel.
    pub variant: GemmVariant,
    /// Per-channel weight scheme; its axis is overridden to per-tensor for
    /// the tensor-tensor variant.
    pub weight: QScheme,
    pub act_bits: u8,
    /// Re-center LayerNorm output channels before computing static scales.
    /// Only meaningful for the per-channel variants.
    pub symmetrize: bool,
    /// Fake-quantize the attention matmul operands.
    #[serde(default)]
    pub attn_quant: bool,
}

impl QuantRecipe {
    /// Per-channel folded activations with symmetrization, symmetric weights.
    pub fn folded(bits: u8) -> Result<Self> {
        Ok(Self {
            variant: GemmVariant::ChannelChannelFolded,
            weight: QScheme::symmetric(bits, Axis::PerChannel)?,
            act_bits: bits,
            symmetrize: true,
            attn_quant: false,
        })
    }

    pub fn with_variant(self, variant: GemmVariant) -> Self {
        Self { variant, ..self }
    }

    pub fn with_symmetrize(self, symmetrize: bool) -> Self {
        Self { symmetrize, ..self }
    }

    pub fn with_weight(self, weight: QScheme) -> Self {
        Self { weight, ..self }
    }
}

/// A block whose linear layers run on integer kernels.
///
/// `ln1`/`ln2` carry biases shifted by `-z`; the LayerNorm-fed projections
/// absorb `z` into their biases, and with [`super::ResidualSource::NormOutput`]
/// `out`/`fc2` add `z` back to the residual stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedBlock {
    pub config: BlockConfig,
    pub recipe: QuantRecipe,
    pub ln1: LayerNorm,
    pub qkv: InputProjection,
    pub out: QuantLinear,
    pub ln2: LayerNorm,
    pub fc1: InputProjection,
    pub fc2: QuantLinear,
}

impl TransformedBlock {
    pub fn forward(&self, x: &MatF, mode: EvalMode) -> Result<MatF> {
        self.run(x, mode, None)
    }

    /// Quantized forward pass with per-layer activation errors and op counts.
    pub fn forward_detailed(&self, x: &MatF) -> Result<(MatF, Vec<LayerReport>)> {
        let mut layers = Vec::with_capacity(4);
        let y = self.run(x, EvalMode::Quantized, Some(&mut layers))?;
        Ok((y, layers))
    }

    fn run(&self, x: &MatF, mode: EvalMode, sink: Option<&mut Vec<LayerReport>>) -> Result<MatF> {
        let mut sink = sink;
        let cfg = &self.config;
        let attn_bits = (self.recipe.attn_quant && mode == EvalMode::Quantized).then_some(self.recipe.act_bits);
        let h1 = self.ln1.forward(x)?;
        let qkv = self.qkv.forward("qkv", &h1, mode, &mut sink)?;
        let attn = attention(&qkv, cfg, attn_bits)?;
        let o = self.out.forward("out", &attn, mode, &mut sink)?;
        let x1 = residual_add(cfg.residual, x, &h1, &o)?;
        let h2 = self.ln2.forward(&x1)?;
        let hidden = self.fc1.forward("fc1", &h2, mode, &mut sink)?.map(relu);
        let f = self.fc2.forward("fc2", &hidden, mode, &mut sink)?;
        residual_add(cfg.residual, &x1, &h2, &f)
    }

    pub fn sym_z1(&self) -> Vec<f64> {
        self.qkv
            .sym_z()
            .map_or_else(|| vec![0.0; self.config.hidden], <[f64]>::to_vec)
    }

    pub fn sym_z2(&self) -> Vec<f64> {
        self.fc1
            .sym_z()
            .map_or_else(|| vec![0.0; self.config.hidden], <[f64]>::to_vec)
    }
}
