//! Quantized matrix multiplication `Y = X · W` with `X ∈ R^{i×n}` and
//! `W ∈ R^{n×j}`, in the four scale layouts that matter for activation
//! quantization:
//!
//! | variant | activation scale | weight scale | where scales are applied |
//! |---|---|---|---|
//! | [`gemm_tensor_tensor`] | one per tensor | one per tensor | once per output element |
//! | [`gemm_token_channel`] | one per row (token) | one per output column | once per output element |
//! | [`gemm_channel_naive`] | one per inner channel | one per output column | inside the reduction |
//! | [`gemm_channel_folded`] | folded into the weights | one per output column | once per output element |
//!
//! Integer accumulation is 32-bit. Before a kernel runs, the worst-case sum is
//! bounded from the actual codes; if it could leave `i32` the call fails with
//! [`Error::Overflow`] instead of wrapping.
//!
//! Activations must be symmetric. Weights may be asymmetric for every variant
//! except [`gemm_tensor_tensor`]; the zero-point term `z_j · Σ_k X_ik` is then applied
//! from per-row code sums and counted in [`OpCount::zp_mults`].

mod bench;

pub use bench::{bench_shapes, BenchRecord};

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::quant::{Axis, QTensor};
use crate::tensor::MatF;

/// Largest supported inner dimension: `65536 · 127 · 255 < 2^31`.
pub const MAX_INNER_DIM: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GemmVariant {
    /// Per-tensor activations and weights.
    TensorTensor,
    /// Per-token activations, per-output-channel weights.
    TokenChannel,
    /// Per-channel activations with the activation scale applied inside the
    /// reduction.
    ChannelChannelNaive,
    /// Per-channel activations whose scales were folded into the weights.
    ChannelChannelFolded,
}

impl GemmVariant {
    pub const ALL: [GemmVariant; 4] = [
        GemmVariant::TensorTensor,
        GemmVariant::TokenChannel,
        GemmVariant::ChannelChannelNaive,
        GemmVariant::ChannelChannelFolded,
    ];

    /// Required `(activation, weight)` quantization axes.
    pub fn axes(self) -> (Axis, Axis) {
        match self {
            GemmVariant::TensorTensor => (Axis::PerTensor, Axis::PerTensor),
            GemmVariant::TokenChannel => (Axis::PerToken, Axis::PerChannel),
            GemmVariant::ChannelChannelNaive | GemmVariant::ChannelChannelFolded => {
                (Axis::PerChannel, Axis::PerChannel)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GemmVariant::TensorTensor => "tensor_tensor",
            GemmVariant::TokenChannel => "token_channel",
            GemmVariant::ChannelChannelNaive => "channel_channel_naive",
            GemmVariant::ChannelChannelFolded => "channel_channel_folded",
        }
    }
}

impl std::str::FromStr for GemmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GemmVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| contract_err(format!("unknown GEMM variant {s:?}")))
    }
}

/// Arithmetic performed by one kernel call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub int_mults: u64,
    pub int_adds: u64,
    /// Floating-point multiplies by a scale, inside or after accumulation.
    pub scale_mults: u64,
    /// Integer multiplies for the weight zero-point correction.
    pub zp_mults: u64,
}

impl std::ops::Add for OpCount {
    type Output = OpCount;

    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            int_mults: self.int_mults + o.int_mults,
            int_adds: self.int_adds + o.int_adds,
            scale_mults: self.scale_mults + o.scale_mults,
            zp_mults: self.zp_mults + o.zp_mults,
        }
    }
}

struct Dims {
    i: usize,
    n: usize,
    j: usize,
}

fn check_operands(xq: &QTensor, wq: &QTensor, variant: GemmVariant) -> Result<Dims> {
    let (x_axis, w_axis) = variant.axes();
    if xq.scheme().axis() != x_axis || wq.scheme().axis() != w_axis {
        return Err(contract_err(format!(
            "{} needs {:?} activations and {:?} weights, got {:?} and {:?}",
            variant.name(),
            x_axis,
            w_axis,
            xq.scheme().axis(),
            wq.scheme().axis()
        )));
    }
    if !xq.scheme().is_symmetric() {
        return Err(contract_err("activations must be symmetrically quantized"));
    }
    if variant == GemmVariant::TensorTensor && !wq.scheme().is_symmetric() {
        return Err(contract_err("tensor_tensor needs symmetric weights"));
    }
    let (i, n) = xq.shape();
    let (wn, j) = wq.shape();
    if n != wn {
        return Err(dim_err(format!("inner dims {n} and {wn} differ")));
    }
    if n > MAX_INNER_DIM {
        return Err(Error::Overflow(format!("inner dim {n} exceeds {MAX_INNER_DIM}")));
    }
    check_accumulator_bound(xq, wq, n)?;
    Ok(Dims { i, n, j })
}

fn check_accumulator_bound(xq: &QTensor, wq: &QTensor, n: usize) -> Result<()> {
    let xmax = xq.ints().data().iter().map(|v| i64::from(*v).abs()).max().unwrap_or(0);
    let wmax = wq.ints().data().iter().map(|v| i64::from(*v).abs()).max().unwrap_or(0);
    let zmax = wq
        .stored_zero_points()
        .iter()
        .map(|z| i64::from(*z).abs())
        .max()
        .unwrap_or(0);
    let n = n as i64;
    let worst = (n * xmax * wmax).max(n * xmax * zmax).max(n * xmax * (wmax + zmax));
    if worst > i64::from(i32::MAX) {
        return Err(Error::Overflow(format!("worst-case accumulator {worst} exceeds i32")));
    }
    Ok(())
}

/// Integer accumulators `Σ_k X_ik (W_kj - z_j)` in row-major `i × j` order.
fn accumulate(xq: &QTensor, wq: &QTensor, d: &Dims, count: &mut OpCount) -> Vec<i32> {
    let wz = wq.stored_zero_points();
    let has_zp = wz.iter().any(|&z| z != 0);
    let x = xq.ints().data();
    let w = wq.ints().data();
    let mut out = vec![0i32; d.i * d.j];
    for r in 0..d.i {
        let acc = &mut out[r * d.j..(r + 1) * d.j];
        let xrow = &x[r * d.n..(r + 1) * d.n];
        for (k, &xv) in xrow.iter().enumerate() {
            let xv = i32::from(xv);
            let wrow = &w[k * d.j..(k + 1) * d.j];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * i32::from(wv);
            }
        }
        if has_zp {
            let row_sum: i32 = xrow.iter().map(|&v| i32::from(v)).sum();
            for (c, a) in acc.iter_mut().enumerate() {
                *a -= wz[c % wz.len()] * row_sum;
            }
        }
    }
    let (i, n, j) = (d.i as u64, d.n as u64, d.j as u64);
    count.int_mults += i * n * j;
    count.int_adds += i * n * j;
    if has_zp {
        count.int_adds += i * n + i * j;
        count.zp_mults += i * j;
    }
    out
}

/// `Y_ij = s^X s^W Σ_k X_ik W_kj` with per-tensor scales on both sides.
pub fn gemm_tensor_tensor(xq: &QTensor, wq: &QTensor) -> Result<(MatF, OpCount)> {
    let d = check_operands(xq, wq, GemmVariant::TensorTensor)?;
    let mut count = OpCount::default();
    let acc = accumulate(xq, wq, &d, &mut count);
    let scale = xq.scales()[0] * wq.scales()[0];
    let y = acc.iter().map(|&a| scale * f64::from(a)).collect();
    count.scale_mults += (d.i * d.j) as u64;
    Ok((MatF::from_raw(d.i, d.j, y), count))
}

/// `Y_ij = s^X_i s^W_j Σ_k X_ik W_kj`: per-token activations, per-column
/// weights. Two scale multiplies per output element.
pub fn gemm_token_channel(xq: &QTensor, wq: &QTensor) -> Result<(MatF, OpCount)> {
    let d = check_operands(xq, wq, GemmVariant::TokenChannel)?;
    let mut count = OpCount::default();
    let acc = accumulate(xq, wq, &d, &mut count);
    let (sx, sw) = (xq.scales(), wq.scales());
    let mut y = Vec::with_capacity(d.i * d.j);
    for r in 0..d.i {
        for c in 0..d.j {
            y.push((sx[r] * sw[c]) * f64::from(acc[r * d.j + c]));
        }
    }
    count.scale_mults += 2 * (d.i * d.j) as u64;
    Ok((MatF::from_raw(d.i, d.j, y), count))
}

/// `Y_ij = s^W_j Σ_k s^X_k X_ik W_kj`. The activation scale depends on the
/// reduction index, so it is applied to every product and the sum is carried
/// in `f64`: `i·j·n + i·j` scale multiplies.
pub fn gemm_channel_naive(xq: &QTensor, wq: &QTensor, sx: &[f64]) -> Result<(MatF, OpCount)> {
    let d = check_operands(xq, wq, GemmVariant::ChannelChannelNaive)?;
    if sx.len() != d.n {
        return Err(dim_err(format!("{} activation scales for inner dim {}", sx.len(), d.n)));
    }
    let wz = wq.stored_zero_points();
    let has_zp = wz.iter().any(|&z| z != 0);
    let x = xq.ints().data();
    let w = wq.ints().data();
    let sw = wq.scales();
    let mut y = vec![0.0; d.i * d.j];
    let mut acc = vec![0.0f64; d.j];
    for r in 0..d.i {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for k in 0..d.n {
            let xv = i32::from(x[r * d.n + k]);
            let s = sx[k];
            let wrow = &w[k * d.j..(k + 1) * d.j];
            for (c, (a, &wv)) in acc.iter_mut().zip(wrow).enumerate() {
                *a += s * f64::from(xv * (i32::from(wv) - wz[c]));
            }
        }
        for c in 0..d.j {
            y[r * d.j + c] = sw[c] * acc[c];
        }
    }
    let (i, n, j) = (d.i as u64, d.n as u64, d.j as u64);
    let count = OpCount {
        int_mults: i * n * j,
        int_adds: i * n * j + if has_zp { i * n * j } else { 0 },
        scale_mults: i * j * n + i * j,
        zp_mults: 0,
    };
    Ok((MatF::from_raw(d.i, d.j, y), count))
}

/// `Y_ij = s^{W_s}_j Σ_k X_ik (W_s)_kj` where `W_s` already carries the
/// activation scales. The reduction is pure integer; `i·j` scale multiplies.
/// The activation tensor's own scales are not read.
pub fn gemm_channel_folded(xq: &QTensor, wsq: &QTensor) -> Result<(MatF, OpCount)> {
    let d = check_operands(xq, wsq, GemmVariant::ChannelChannelFolded)?;
    let mut count = OpCount::default();
    let acc = accumulate(xq, wsq, &d, &mut count);
    let sw = wsq.scales();
    let mut y = Vec::with_capacity(d.i * d.j);
    for r in 0..d.i {
        for c in 0..d.j {
            y.push(sw[c] * f64::from(acc[r * d.j + c]));
        }
    }
    count.scale_mults += (d.i * d.j) as u64;
    Ok((MatF::from_raw(d.i, d.j, y), count))
}

/// Dispatches on `variant`. `sx` is only read by the naive per-channel kernel;
/// when absent it defaults to the activation tensor's scales.
pub fn gemm(variant: GemmVariant, xq: &QTensor, wq: &QTensor, sx: Option<&[f64]>) -> Result<(MatF, OpCount)> {
    match variant {
        GemmVariant::TensorTensor => gemm_tensor_tensor(xq, wq),
        GemmVariant::TokenChannel => gemm_token_channel(xq, wq),
        GemmVariant::ChannelChannelNaive => gemm_channel_naive(xq, wq, sx.unwrap_or_else(|| xq.scales())),
        GemmVariant::ChannelChannelFolded => gemm_channel_folded(xq, wq),
    }
}

/// Closed-form scale multiplies for a variant at shape `(i, n, j)`.
pub fn expected_scale_mults(variant: GemmVariant, i: u64, n: u64, j: u64) -> u64 {
    match variant {
        GemmVariant::TensorTensor | GemmVariant::ChannelChannelFolded => i * j,
        GemmVariant::TokenChannel => 2 * i * j,
        GemmVariant::ChannelChannelNaive => i * j * n + i * j,
    }
}
