//! `FQCK1` binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FQCK1"  u32 count
//! count × { u16 name_len, name (UTF-8), u8 dtype, u32 rows, u32 cols, payload }
//! ```
//!
//! `dtype` is 0 for f64, 1 for f32 and 2 for i8; the payload is row-major.
//! Quantized tensors are stored as their i8 codes (logical code minus the
//! scheme's storage offset) with sibling `<name>.scale` and `<name>.zp`
//! tensors (f64, logical zero points) and `<name>.scheme` holding
//! `[bits, symmetric, axis]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::qgemm::GemmVariant;
use crate::quant::{Axis, QScheme, QTensor, Symmetry};
use crate::tensor::{MatF, MatI8};
use crate::transform::{
    BlockConfig, BlockModel, FoldedLinear, InputProjection, LayerNorm, LinearLayer, NaiveLinear, QuantLinear,
    QuantMode, QuantRecipe, ResidualSource, TransformedBlock,
};

pub const MAGIC: &[u8; 5] = b"FQCK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    I8 = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F64(_) => DType::F64,
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: TensorData,
}

/// Storage precision for real-valued model tensors. Scales and zero points
/// are always f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    /// Lossy: values are rounded to the nearest f32 on save.
    F32,
}

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<Tensor>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err("truncated checkpoint"),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn push(&mut self, t: Tensor) -> Result<()> {
        if t.data.len() != t.rows * t.cols {
            return Err(format_err(format!(
                "tensor {} payload does not match {}x{}",
                t.name, t.rows, t.cols
            )));
        }
        if t.name.len() > usize::from(u16::MAX) {
            return Err(format_err("tensor name longer than 65535 bytes"));
        }
        if u32::try_from(t.rows).is_err() || u32::try_from(t.cols).is_err() {
            return Err(format_err(format!("tensor {} too large", t.name)));
        }
        if self.get(&t.name).is_some() {
            return Err(format_err(format!("duplicate tensor {}", t.name)));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| format_err(format!("missing tensor {name}")))
    }

    pub fn push_mat(&mut self, name: &str, m: &MatF, precision: Precision) -> Result<()> {
        let data = match precision {
            Precision::F64 => TensorData::F64(m.data().to_vec()),
            Precision::F32 => TensorData::F32(m.data().iter().map(|v| *v as f32).collect()),
        };
        self.push(Tensor {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            data,
        })
    }

    pub fn push_vec(&mut self, name: &str, v: &[f64], precision: Precision) -> Result<()> {
        self.push_mat(name, &MatF::from_raw(1, v.len(), v.to_vec()), precision)
    }

    /// A real tensor, widening f32 storage.
    pub fn mat(&self, name: &str) -> Result<MatF> {
        let t = self.require(name)?;
        let data = match &t.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|x| f64::from(*x)).collect(),
            TensorData::I8(_) => return Err(format_err(format!("{name} holds integers"))),
        };
        MatF::new(t.rows, t.cols, data).map_err(|e| format_err(format!("{name}: {e}")))
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>> {
        let m = self.mat(name)?;
        if m.rows() != 1 {
            return Err(format_err(format!("{name} is not a row vector")));
        }
        Ok(m.into_data())
    }

    pub fn push_qtensor(&mut self, name: &str, q: &QTensor) -> Result<()> {
        self.push(Tensor {
            name: name.to_string(),
            rows: q.rows(),
            cols: q.cols(),
            data: TensorData::I8(q.ints().data().to_vec()),
        })?;
        self.push_vec(&format!("{name}.scale"), q.scales(), Precision::F64)?;
        let zp: Vec<f64> = q.zero_points().iter().map(|z| f64::from(*z)).collect();
        self.push_vec(&format!("{name}.zp"), &zp, Precision::F64)?;
        self.push_vec(&format!("{name}.scheme"), &scheme_code(q.scheme()), Precision::F64)
    }

    pub fn qtensor(&self, name: &str) -> Result<QTensor> {
        let t = self.require(name)?;
        let TensorData::I8(codes) = &t.data else {
            return Err(format_err(format!("{name} is not an i8 tensor")));
        };
        let ints = MatI8::new(t.rows, t.cols, codes.clone())?;
        let scheme = scheme_from_code(&self.vec(&format!("{name}.scheme"))?)?;
        let scales = self.vec(&format!("{name}.scale"))?;
        let zps = self
            .vec(&format!("{name}.zp"))?
            .into_iter()
            .map(|z| exact_int(z, "zero point"))
            .collect::<Result<Vec<i32>>>()?;
        QTensor::from_parts(ints, scheme, scales, zps).map_err(|e| format_err(format!("{name}: {e}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u16).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.data.dtype() as u8])?;
            w.write_all(&(t.rows as u32).to_le_bytes())?;
            w.write_all(&(t.cols as u32).to_le_bytes())?;
            match &t.data {
                TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::I8(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<5>(r)? != MAGIC {
            return Err(format_err("not an FQCK1 checkpoint"));
        }
        let count = u32::from_le_bytes(read_exact(r)?);
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = usize::from(u16::from_le_bytes(read_exact(r)?));
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|_| format_err("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not UTF-8"))?;
            let [dtype] = read_exact::<1>(r)?;
            let rows = u32::from_le_bytes(read_exact(r)?) as usize;
            let cols = u32::from_le_bytes(read_exact(r)?) as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| format_err(format!("{name}: shape overflows")))?;
            let width = match dtype {
                0 => 8,
                1 => 4,
                2 => 1,
                d => return Err(format_err(format!("{name}: unknown dtype {d}"))),
            };
            let mut raw = Vec::new();
            let want = n
                .checked_mul(width)
                .ok_or_else(|| format_err(format!("{name}: shape overflows")))?;
            r.take(want as u64).read_to_end(&mut raw)?;
            if raw.len() != want {
                return Err(format_err(format!("{name}: truncated payload")));
            }
            let data = match dtype {
                0 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => TensorData::I8(raw.iter().map(|b| *b as i8).collect()),
            };
            ck.push(Tensor { name, rows, cols, data })?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(format_err("trailing bytes after the last tensor"));
        }
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn exact_int(v: f64, what: &str) -> Result<i32> {
    if v.fract() != 0.0 || v.abs() > f64::from(i32::MAX) {
        return Err(format_err(format!("{what} {v} is not an integer")));
    }
    Ok(v as i32)
}

fn axis_code(a: Axis) -> f64 {
    match a {
        Axis::PerTensor => 0.0,
        Axis::PerToken => 1.0,
        Axis::PerChannel => 2.0,
    }
}

fn axis_from_code(v: f64) -> Result<Axis> {
    match exact_int(v, "axis")? {
        0 => Ok(Axis::PerTensor),
        1 => Ok(Axis::PerToken),
        2 => Ok(Axis::PerChannel),
        a => Err(format_err(format!("unknown axis code {a}"))),
    }
}

fn scheme_code(s: &QScheme) -> Vec<f64> {
    vec![
        f64::from(s.bits()),
        if s.is_symmetric() { 1.0 } else { 0.0 },
        axis_code(s.axis()),
    ]
}

fn scheme_from_code(v: &[f64]) -> Result<QScheme> {
    let [bits, sym, axis] = v else {
        return Err(format_err("scheme tensor must hold [bits, symmetric, axis]"));
    };
    let bits = u8::try_from(exact_int(*bits, "bit width")?).map_err(|_| format_err("bit width out of range"))?;
    let symmetry = match exact_int(*sym, "symmetry flag")? {
        1 => Symmetry::Symmetric,
        0 => Symmetry::Asymmetric,
        s => return Err(format_err(format!("unknown symmetry flag {s}"))),
    };
    QScheme::new(bits, symmetry, axis_from_code(*axis)?).map_err(|e| format_err(e.to_string()))
}

const KIND_BLOCK: f64 = 0.0;
const KIND_TRANSFORMED: f64 = 1.0;

fn config_code(kind: f64, c: &BlockConfig) -> Vec<f64> {
    let residual = match c.residual {
        ResidualSource::PreNorm => 0.0,
        ResidualSource::NormOutput => 1.0,
    };
    vec![
        kind,
        c.hidden as f64,
        c.heads as f64,
        c.ffn as f64,
        c.seq_len as f64,
        c.eps,
        residual,
    ]
}

fn usize_of(v: f64, what: &str) -> Result<usize> {
    usize::try_from(exact_int(v, what)?).map_err(|_| format_err(format!("negative {what}")))
}

fn config_from_code(v: &[f64]) -> Result<(f64, BlockConfig)> {
    if v.len() < 7 {
        return Err(format_err("meta tensor too short"));
    }
    let residual = match exact_int(v[6], "residual source")? {
        0 => ResidualSource::PreNorm,
        1 => ResidualSource::NormOutput,
        r => return Err(format_err(format!("unknown residual source {r}"))),
    };
    let cfg = BlockConfig {
        hidden: usize_of(v[1], "hidden size")?,
        heads: usize_of(v[2], "head count")?,
        ffn: usize_of(v[3], "ffn size")?,
        seq_len: usize_of(v[4], "sequence length")?,
        eps: v[5],
        residual,
    };
    cfg.validate().map_err(|e| format_err(e.to_string()))?;
    Ok((v[0], cfg))
}

fn push_ln(ck: &mut Checkpoint, name: &str, ln: &LayerNorm, p: Precision) -> Result<()> {
    ck.push_vec(&format!("{name}.gamma"), &ln.gamma, p)?;
    ck.push_vec(&format!("{name}.beta"), &ln.beta, p)
}

fn load_ln(ck: &Checkpoint, name: &str, eps: f64) -> Result<LayerNorm> {
    LayerNorm::new(ck.vec(&format!("{name}.gamma"))?, ck.vec(&format!("{name}.beta"))?, eps)
        .map_err(|e| format_err(format!("{name}: {e}")))
}

fn push_linear(ck: &mut Checkpoint, name: &str, l: &LinearLayer, p: Precision) -> Result<()> {
    ck.push_mat(&format!("{name}.weight"), &l.weight, p)?;
    ck.push_vec(&format!("{name}.bias"), &l.bias, p)
}

fn load_linear(ck: &Checkpoint, name: &str, mode: QuantMode) -> Result<LinearLayer> {
    LinearLayer::new(
        ck.mat(&format!("{name}.weight"))?,
        ck.vec(&format!("{name}.bias"))?,
        mode,
    )
    .map_err(|e| format_err(format!("{name}: {e}")))
}

impl BlockModel {
    pub fn to_checkpoint(&self, precision: Precision) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_vec("meta", &config_code(KIND_BLOCK, &self.config), Precision::F64)?;
        push_ln(&mut ck, "ln1", &self.ln1, precision)?;
        push_linear(&mut ck, "qkv", &self.qkv, precision)?;
        push_linear(&mut ck, "out", &self.out, precision)?;
        push_ln(&mut ck, "ln2", &self.ln2, precision)?;
        push_linear(&mut ck, "fc1", &self.fc1, precision)?;
        push_linear(&mut ck, "fc2", &self.fc2, precision)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (kind, cfg) = config_from_code(&ck.vec("meta")?)?;
        if kind != KIND_BLOCK {
            return Err(format_err("checkpoint does not hold an FP block"));
        }
        BlockModel::new(
            cfg,
            load_ln(ck, "ln1", cfg.eps)?,
            load_linear(ck, "qkv", QuantMode::FoldedPerChannel)?,
            load_linear(ck, "out", QuantMode::TokenChannel)?,
            load_ln(ck, "ln2", cfg.eps)?,
            load_linear(ck, "fc1", QuantMode::FoldedPerChannel)?,
            load_linear(ck, "fc2", QuantMode::TokenChannel)?,
        )
        .map_err(|e| format_err(e.to_string()))
    }
}

fn variant_code(v: GemmVariant) -> f64 {
    GemmVariant::ALL.iter().position(|x| *x == v).expect("listed") as f64
}

fn push_quant_linear(ck: &mut Checkpoint, name: &str, q: &QuantLinear, p: Precision) -> Result<()> {
    ck.push_mat(&format!("{name}.weight"), &q.weight, p)?;
    ck.push_vec(&format!("{name}.bias"), &q.bias, p)?;
    ck.push_qtensor(&format!("{name}.wq"), &q.wq)
}

fn load_quant_linear(ck: &Checkpoint, name: &str, variant: GemmVariant, act_bits: u8) -> Result<QuantLinear> {
    let (act_axis, _) = variant.axes();
    Ok(QuantLinear {
        variant,
        weight: ck.mat(&format!("{name}.weight"))?,
        bias: ck.vec(&format!("{name}.bias"))?,
        wq: ck.qtensor(&format!("{name}.wq"))?,
        act: QScheme::symmetric(act_bits, act_axis)?,
    })
}

fn push_projection(ck: &mut Checkpoint, name: &str, proj: &InputProjection, p: Precision) -> Result<()> {
    match proj {
        InputProjection::Dynamic(q) => push_quant_linear(ck, name, q, p),
        InputProjection::Naive(l) => {
            ck.push_mat(&format!("{name}.weight"), &l.weight, p)?;
            ck.push_vec(&format!("{name}.bias"), &l.bias, p)?;
            ck.push_qtensor(&format!("{name}.wq"), &l.wq)?;
            ck.push_vec(&format!("{name}.act.scale"), &l.sx, Precision::F64)?;
            ck.push_vec(&format!("{name}.sym_z"), &l.sym_z, Precision::F64)
        }
        InputProjection::Folded(l) => {
            ck.push_mat(&format!("{name}.weight_folded"), &l.weight_folded, p)?;
            ck.push_vec(&format!("{name}.bias"), &l.bias, p)?;
            ck.push_qtensor(&format!("{name}.wq"), &l.wsq)?;
            ck.push_vec(&format!("{name}.act.scale"), &l.sx, Precision::F64)?;
            ck.push_vec(&format!("{name}.sym_z"), &l.sym_z, Precision::F64)
        }
    }
}

fn load_projection(ck: &Checkpoint, name: &str, recipe: &QuantRecipe) -> Result<InputProjection> {
    let act = QScheme::symmetric(recipe.act_bits, Axis::PerChannel)?;
    let proj = match recipe.variant {
        GemmVariant::TensorTensor | GemmVariant::TokenChannel => {
            InputProjection::Dynamic(load_quant_linear(ck, name, recipe.variant, recipe.act_bits)?)
        }
        GemmVariant::ChannelChannelNaive => InputProjection::Naive(NaiveLinear {
            weight: ck.mat(&format!("{name}.weight"))?,
            bias: ck.vec(&format!("{name}.bias"))?,
            wq: ck.qtensor(&format!("{name}.wq"))?,
            sx: ck.vec(&format!("{name}.act.scale"))?,
            sym_z: ck.vec(&format!("{name}.sym_z"))?,
            act,
        }),
        GemmVariant::ChannelChannelFolded => InputProjection::Folded(FoldedLinear {
            weight_folded: ck.mat(&format!("{name}.weight_folded"))?,
            bias: ck.vec(&format!("{name}.bias"))?,
            wsq: ck.qtensor(&format!("{name}.wq"))?,
            sx: ck.vec(&format!("{name}.act.scale"))?,
            sym_z: ck.vec(&format!("{name}.sym_z"))?,
            act,
        }),
    };
    Ok(proj)
}

impl TransformedBlock {
    pub fn to_checkpoint(&self, precision: Precision) -> Result<Checkpoint> {
        let r = &self.recipe;
        let mut meta = config_code(KIND_TRANSFORMED, &self.config);
        meta.extend([
            variant_code(r.variant),
            f64::from(r.act_bits),
            f64::from(u8::from(r.symmetrize)),
            f64::from(u8::from(r.attn_quant)),
        ]);
        meta.extend(scheme_code(&r.weight));
        let mut ck = Checkpoint::new();
        ck.push_vec("meta", &meta, Precision::F64)?;
        push_ln(&mut ck, "ln1", &self.ln1, precision)?;
        push_projection(&mut ck, "qkv", &self.qkv, precision)?;
        push_quant_linear(&mut ck, "out", &self.out, precision)?;
        push_ln(&mut ck, "ln2", &self.ln2, precision)?;
        push_projection(&mut ck, "fc1", &self.fc1, precision)?;
        push_quant_linear(&mut ck, "fc2", &self.fc2, precision)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.vec("meta")?;
        let (kind, config) = config_from_code(&meta)?;
        if kind != KIND_TRANSFORMED || meta.len() != 14 {
            return Err(format_err("checkpoint does not hold a transformed block"));
        }
        let variant = *GemmVariant::ALL
            .get(usize_of(meta[7], "variant")?)
            .ok_or_else(|| format_err("unknown variant code"))?;
        let flag = |v: f64, what: &str| match exact_int(v, what)? {
            0 => Ok(false),
            1 => Ok(true),
            f => Err(format_err(format!("{what} flag {f}"))),
        };
        let recipe = QuantRecipe {
            variant,
            act_bits: u8::try_from(usize_of(meta[8], "activation bits")?).map_err(|_| format_err("activation bits"))?,
            symmetrize: flag(meta[9], "symmetrize")?,
            attn_quant: flag(meta[10], "attention quantization")?,
            weight: scheme_from_code(&meta[11..14])?,
        };
        let tc = GemmVariant::TokenChannel;
        let block = TransformedBlock {
            config,
            recipe,
            ln1: load_ln(ck, "ln1", config.eps)?,
            qkv: load_projection(ck, "qkv", &recipe)?,
            out: load_quant_linear(ck, "out", tc, recipe.act_bits)?,
            ln2: load_ln(ck, "ln2", config.eps)?,
            fc1: load_projection(ck, "fc1", &recipe)?,
            fc2: load_quant_linear(ck, "fc2", tc, recipe.act_bits)?,
        };
        block.check_shapes()?;
        Ok(block)
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.config.hidden;
        let f = self.config.ffn;
        let dims = |p: &InputProjection| match p {
            InputProjection::Dynamic(q) => (q.weight.cols(), q.weight.rows(), None),
            InputProjection::Naive(l) => (l.weight.cols(), l.weight.rows(), Some((l.sx.len(), l.sym_z.len()))),
            InputProjection::Folded(l) => (
                l.weight_folded.cols(),
                l.weight_folded.rows(),
                Some((l.sx.len(), l.sym_z.len())),
            ),
        };
        for (name, p, out) in [("qkv", &self.qkv, 3 * n), ("fc1", &self.fc1, f)] {
            let (i, o, extra) = dims(p);
            if i != n || o != out || extra.is_some_and(|(a, b)| a != n || b != n) {
                return Err(format_err(format!("{name} tensors have inconsistent shapes")));
            }
        }
        for (name, q, i, o) in [("out", &self.out, n, n), ("fc2", &self.fc2, f, n)] {
            if q.weight.shape() != (o, i) || q.wq.shape() != (i, o) || q.bias.len() != o {
                return Err(format_err(format!("{name} tensors have inconsistent shapes")));
            }
        }
        if self.ln1.dim() != n || self.ln2.dim() != n {
            return Err(format_err("LayerNorm width differs from hidden size"));
        }
        Ok(())
    }
}

/// Loads either kind of block from disk.
pub enum Checkpointed {
    Block(BlockModel),
    Transformed(TransformedBlock),
}

impl Checkpointed {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let meta = ck.vec("meta")?;
        match meta.first() {
            Some(k) if *k == KIND_BLOCK => Ok(Checkpointed::Block(BlockModel::from_checkpoint(&ck)?)),
            Some(k) if *k == KIND_TRANSFORMED => Ok(Checkpointed::Transformed(TransformedBlock::from_checkpoint(&ck)?)),
            _ => Err(format_err("unknown checkpoint kind")),
        }
    }
}
