//! A pre-LayerNorm transformer block in f64: the reference that every
//! quantized rewrite is measured against.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, domain_err, Result};
use crate::quant::{fake_quantize, Axis, QScheme};
use crate::tensor::{matmul_nt, MatF};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(dim_err("LayerNorm gain and bias lengths differ"));
        }
        if !(eps > 0.0) {
            return Err(domain_err("LayerNorm epsilon must be positive"));
        }
        Ok(Self { gamma, beta, eps })
    }

    pub fn identity(n: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &MatF) -> Result<MatF> {
        let n = self.dim();
        if x.cols() != n {
            return Err(dim_err(format!("LayerNorm over {n} features, input has {}", x.cols())));
        }
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[k] + self.beta[k];
            }
        }
        Ok(out)
    }
}

/// How a linear layer's input is quantized once the block is rewritten.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Fed by a LayerNorm: static per-channel activations, scales folded into
    /// the weight columns.
    FoldedPerChannel,
    /// Dynamic per-token activations with per-output-channel weights.
    TokenChannel,
}

/// `y = x · Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: MatF,
    pub bias: Vec<f64>,
    pub mode: QuantMode,
}

impl LinearLayer {
    pub fn new(weight: MatF, bias: Vec<f64>, mode: QuantMode) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(dim_err(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias, mode })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &MatF) -> Result<MatF> {
        matmul_nt(x, &self.weight)?.add_row_vector(&self.bias)
    }
}

/// Where the residual branch is taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    /// `y = x + f(LN(x))`: the residual skips the LayerNorm.
    #[default]
    PreNorm,
    /// `y = LN(x) + f(LN(x))`: the residual is the LayerNorm output, so a
    /// LayerNorm bias shift must be compensated in the branch output bias.
    NormOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Attention is causal within consecutive groups of this many rows.
    pub seq_len: usize,
    pub eps: f64,
    #[serde(default)]
    pub residual: ResidualSource,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            ffn: 256,
            seq_len: 32,
            eps: 1e-5,
            residual: ResidualSource::PreNorm,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.seq_len == 0 {
            return Err(domain_err("block dimensions must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(dim_err(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(domain_err("epsilon must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// LN → qkv → attention → out → residual → LN → fc1 → ReLU → fc2 → residual.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockModel {
    pub config: BlockConfig,
    pub ln1: LayerNorm,
    pub qkv: LinearLayer,
    pub out: LinearLayer,
    pub ln2: LayerNorm,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub ln1_out: MatF,
    pub attn_out: MatF,
    pub ln2_out: MatF,
    pub ffn_hidden: MatF,
    pub output: MatF,
}

impl BlockModel {
    pub fn new(
        config: BlockConfig,
        ln1: LayerNorm,
        qkv: LinearLayer,
        out: LinearLayer,
        ln2: LayerNorm,
        fc1: LinearLayer,
        fc2: LinearLayer,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.hidden;
        let f = config.ffn;
        let ins = [
            ("ln1", ln1.dim(), n),
            ("ln2", ln2.dim(), n),
            ("qkv", qkv.in_dim(), n),
            ("out", out.in_dim(), n),
            ("fc1", fc1.in_dim(), n),
            ("fc2", fc2.in_dim(), f),
        ];
        for (name, got, want) in ins {
            if got != want {
                return Err(dim_err(format!("{name} input dim {got}, expected {want}")));
            }
        }
        let outs = [
            ("qkv", qkv.out_dim(), 3 * n),
            ("out", out.out_dim(), n),
            ("fc1", fc1.out_dim(), f),
            ("fc2", fc2.out_dim(), n),
        ];
        for (name, got, want) in outs {
            if got != want {
                return Err(dim_err(format!("{name} output dim {got}, expected {want}")));
            }
        }
        Ok(Self {
            config,
            ln1,
            qkv,
            out,
            ln2,
            fc1,
            fc2,
        })
    }

    pub fn forward(&self, x: &MatF) -> Result<MatF> {
        Ok(self.trace(x)?.output)
    }

    pub fn trace(&self, x: &MatF) -> Result<BlockTrace> {
        let cfg = &self.config;
        let h1 = self.ln1.forward(x)?;
        let qkv = self.qkv.forward(&h1)?;
        let attn = attention(&qkv, cfg, None)?;
        let o = self.out.forward(&attn)?;
        let x1 = residual_add(cfg.residual, x, &h1, &o)?;
        let h2 = self.ln2.forward(&x1)?;
        let hidden = self.fc1.forward(&h2)?.map(relu);
        let f = self.fc2.forward(&hidden)?;
        let output = residual_add(cfg.residual, &x1, &h2, &f)?;
        Ok(BlockTrace {
            ln1_out: h1,
            attn_out: attn,
            ln2_out: h2,
            ffn_hidden: hidden,
            output,
        })
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub(crate) fn residual_add(source: ResidualSource, stream: &MatF, normed: &MatF, branch: &MatF) -> Result<MatF> {
    match source {
        ResidualSource::PreNorm => stream.add(branch),
        ResidualSource::NormOutput => normed.add(branch),
    }
}

/// Multi-head causal self-attention over `[q | k | v]` columns. With
/// `quant = Some(bits)` the four attention operands are fake-quantized in the
/// token-channel layout: `Q`, `K` and the probabilities per row, `V` per
/// column.
pub(crate) fn attention(qkv: &MatF, cfg: &BlockConfig, quant: Option<u8>) -> Result<MatF> {
    let n = cfg.hidden;
    if qkv.cols() != 3 * n {
        return Err(dim_err("attention input must have 3·hidden columns"));
    }
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let token = quant.map(|b| QScheme::symmetric(b, Axis::PerToken)).transpose()?;
    let channel = quant.map(|b| QScheme::symmetric(b, Axis::PerChannel)).transpose()?;
    let fq = |m: MatF, s: &Option<QScheme>| -> Result<MatF> {
        match s {
            Some(s) => fake_quantize(&m, s, None),
            None => Ok(m),
        }
    };

    let mut out = MatF::zeros(qkv.rows(), n);
    let mut start = 0;
    while start < qkv.rows() {
        let end = (start + cfg.seq_len).min(qkv.rows());
        let seq = qkv.slice_rows(start, end);
        for h in 0..cfg.heads {
            let q = fq(seq.slice_cols(h * d, (h + 1) * d), &token)?;
            let k = fq(seq.slice_cols(n + h * d, n + (h + 1) * d), &token)?;
            let v = fq(seq.slice_cols(2 * n + h * d, 2 * n + (h + 1) * d), &channel)?;
            let mut probs = matmul_nt(&q, &k)?;
            for t in 0..probs.rows() {
                let row = probs.row_mut(t);
                let mut m = f64::NEG_INFINITY;
                for (u, p) in row.iter_mut().enumerate() {
                    if u > t {
                        *p = f64::NEG_INFINITY;
                    } else {
                        *p *= scale;
                        m = m.max(*p);
                    }
                }
                let mut sum = 0.0;
                for p in row.iter_mut() {
                    *p = (*p - m).exp();
                    sum += *p;
                }
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
            let probs = fq(probs, &token)?;
            let ctx = matmul_nt(&probs, &v.transpose())?;
            for t in 0..ctx.rows() {
                out.row_mut(start + t)[h * d..(h + 1) * d].copy_from_slice(ctx.row(t));
            }
        }
        start = end;
    }
    Ok(out)
}
