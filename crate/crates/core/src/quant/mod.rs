//! Uniform affine quantization at tensor, token (row) and channel (column)
//! granularity, plus the calibration observers that feed static scales.
//!
//! Codes follow `q = clip(round(x / s) + z, qmin, qmax)` and
//! `x̄ = (q - z) · s`, where `round` is round-half-away-from-zero.

mod calib;

pub use calib::{token_clip_threshold, CalibStats};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, domain_err, Error, Result};
use crate::tensor::{col_minmax, MatF, MatI8};

/// Lower bound on the asymmetric range width, keeps `s > 0` for constant data.
pub const MIN_RANGE_WIDTH: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

/// Which elements share a scale. For a matrix `X ∈ R^{i×n}` a per-token scale
/// is a row scale and a per-channel scale a column scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    PerTensor,
    PerToken,
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawScheme")]
pub struct QScheme {
    bits: u8,
    symmetry: Symmetry,
    axis: Axis,
}

#[derive(Deserialize)]
struct RawScheme {
    bits: u8,
    symmetry: Symmetry,
    axis: Axis,
}

impl TryFrom<RawScheme> for QScheme {
    type Error = Error;

    fn try_from(raw: RawScheme) -> Result<Self> {
        QScheme::new(raw.bits, raw.symmetry, raw.axis)
    }
}

impl QScheme {
    pub const SUPPORTED_BITS: [u8; 3] = [4, 6, 8];

    pub fn new(bits: u8, symmetry: Symmetry, axis: Axis) -> Result<Self> {
        if !Self::SUPPORTED_BITS.contains(&bits) {
            return Err(domain_err(format!("unsupported bit width {bits}")));
        }
        Ok(Self { bits, symmetry, axis })
    }

    pub fn symmetric(bits: u8, axis: Axis) -> Result<Self> {
        Self::new(bits, Symmetry::Symmetric, axis)
    }

    pub fn asymmetric(bits: u8, axis: Axis) -> Result<Self> {
        Self::new(bits, Symmetry::Asymmetric, axis)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetry == Symmetry::Symmetric
    }

    pub fn with_axis(self, axis: Axis) -> Self {
        Self { axis, ..self }
    }

    pub fn with_bits(self, bits: u8) -> Result<Self> {
        Self::new(bits, self.symmetry, self.axis)
    }

    /// Smallest legal code: `-(2^{b-1}-1)` symmetric, `0` asymmetric.
    pub fn qmin(&self) -> i32 {
        match self.symmetry {
            Symmetry::Symmetric => -self.sym_max(),
            Symmetry::Asymmetric => 0,
        }
    }

    pub fn qmax(&self) -> i32 {
        match self.symmetry {
            Symmetry::Symmetric => self.sym_max(),
            Symmetry::Asymmetric => (1 << self.bits) - 1,
        }
    }

    fn sym_max(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Offset subtracted from a code before it is stored in an `i8`, so the
    /// asymmetric range `[0, 2^b-1]` fits a signed container.
    pub fn storage_offset(&self) -> i32 {
        match self.symmetry {
            Symmetry::Symmetric => 0,
            Symmetry::Asymmetric => 1 << (self.bits - 1),
        }
    }
}

impl fmt::Display for QScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sym = match self.symmetry {
            Symmetry::Symmetric => "sym",
            Symmetry::Asymmetric => "asym",
        };
        let axis = match self.axis {
            Axis::PerTensor => "tensor",
            Axis::PerToken => "token",
            Axis::PerChannel => "channel",
        };
        write!(f, "int{}-{sym}-{axis}", self.bits)
    }
}

/// Scale and zero point for the range `[min, max]`.
///
/// Symmetric: `s = max(|min|, |max|) / (2^{b-1}-1)`, `z = 0`.
/// Asymmetric: the range is widened to contain zero, then
/// `s = (max - min) / (2^b - 1)` and `z = clip(round(-min / s), 0, 2^b-1)`.
/// An all-zero range yields `s = 1, z = 0`.
pub fn compute_scale(min: f64, max: f64, scheme: &QScheme) -> Result<(f64, i32)> {
    if min.is_nan() || max.is_nan() {
        return Err(domain_err("NaN range bound"));
    }
    if max < min {
        return Err(domain_err(format!("max {max} < min {min}")));
    }
    match scheme.symmetry {
        Symmetry::Symmetric => {
            let m = min.abs().max(max.abs());
            if m == 0.0 {
                return Ok((1.0, 0));
            }
            Ok((m / f64::from(scheme.qmax()), 0))
        }
        Symmetry::Asymmetric => {
            let lo = min.min(0.0);
            let hi = max.max(0.0);
            if lo == 0.0 && hi == 0.0 {
                return Ok((1.0, 0));
            }
            let s = (hi - lo).max(MIN_RANGE_WIDTH) / f64::from(scheme.qmax());
            let z = round_half_away(-lo / s).clamp(0.0, f64::from(scheme.qmax())) as i32;
            Ok((s, z))
        }
    }
}

#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Integer codes plus the parameters needed to map them back to reals.
///
/// Codes live in an `i8` container shifted by [`QScheme::storage_offset`];
/// [`QTensor::code`] returns the logical code.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    ints: MatI8,
    scheme: QScheme,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
}

impl QTensor {
    /// Assembles a tensor from stored (offset) codes, validating every
    /// invariant.
    pub fn from_parts(ints: MatI8, scheme: QScheme, scales: Vec<f64>, zero_points: Vec<i32>) -> Result<Self> {
        let expected = param_len(scheme.axis, ints.rows(), ints.cols());
        if scales.len() != expected || zero_points.len() != expected {
            return Err(dim_err(format!(
                "{} scales / {} zero points for {:?} over {:?}",
                scales.len(),
                zero_points.len(),
                scheme.axis,
                ints.shape()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(domain_err(format!("scale {s} is not positive")));
        }
        if zero_points.iter().any(|&z| z < scheme.qmin() || z > scheme.qmax()) {
            return Err(domain_err("zero point outside the code range"));
        }
        if scheme.is_symmetric() && zero_points.iter().any(|&z| z != 0) {
            return Err(contract_err("symmetric scheme with nonzero zero point"));
        }
        let off = scheme.storage_offset();
        if ints
            .data()
            .iter()
            .any(|&q| i32::from(q) + off < scheme.qmin() || i32::from(q) + off > scheme.qmax())
        {
            return Err(domain_err(format!("code outside the {scheme} clip range")));
        }
        Ok(Self {
            ints,
            scheme,
            scales,
            zero_points,
        })
    }

    pub fn scheme(&self) -> &QScheme {
        &self.scheme
    }

    pub fn rows(&self) -> usize {
        self.ints.rows()
    }

    pub fn cols(&self) -> usize {
        self.ints.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.ints.shape()
    }

    /// Stored codes (logical code minus the storage offset).
    pub fn ints(&self) -> &MatI8 {
        &self.ints
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    /// Zero point in the stored-code domain.
    pub fn stored_zero_points(&self) -> Vec<i32> {
        let off = self.scheme.storage_offset();
        self.zero_points.iter().map(|z| z - off).collect()
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> i32 {
        i32::from(self.ints.get(r, c)) + self.scheme.storage_offset()
    }

    #[inline]
    pub fn param_index(&self, r: usize, c: usize) -> usize {
        match self.scheme.axis {
            Axis::PerTensor => 0,
            Axis::PerToken => r,
            Axis::PerChannel => c,
        }
    }

    /// Largest `|code - zero_point|` over the tensor.
    pub fn max_abs_centered(&self) -> i32 {
        let mut m = 0;
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                let z = self.zero_points[self.param_index(r, c)];
                m = m.max((self.code(r, c) - z).abs());
            }
        }
        m
    }
}

fn param_len(axis: Axis, rows: usize, cols: usize) -> usize {
    match axis {
        Axis::PerTensor => 1,
        Axis::PerToken => rows,
        Axis::PerChannel => cols,
    }
}

/// Quantizes with explicit parameters; out-of-range values saturate.
pub fn quantize_with_params(x: &MatF, scheme: &QScheme, scales: &[f64], zero_points: &[i32]) -> Result<QTensor> {
    let expected = param_len(scheme.axis, x.rows(), x.cols());
    if scales.len() != expected || zero_points.len() != expected {
        return Err(dim_err(format!(
            "expected {expected} quantization parameters for {:?}, got {}",
            scheme.axis,
            scales.len()
        )));
    }
    let (qmin, qmax) = (f64::from(scheme.qmin()), f64::from(scheme.qmax()));
    let off = scheme.storage_offset();
    let mut data = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            if v.is_nan() {
                return Err(domain_err("NaN input to quantize"));
            }
            let p = match scheme.axis {
                Axis::PerTensor => 0,
                Axis::PerToken => r,
                Axis::PerChannel => c,
            };
            let q = (round_half_away(v / scales[p]) + f64::from(zero_points[p])).clamp(qmin, qmax);
            data.push((q as i32 - off) as i8);
        }
    }
    QTensor::from_parts(
        MatI8::new(x.rows(), x.cols(), data)?,
        *scheme,
        scales.to_vec(),
        zero_points.to_vec(),
    )
}

/// Per-axis `(min, max)` ranges: dynamic from `x`, or static from `stats`.
pub fn axis_ranges(x: &MatF, axis: Axis, stats: Option<&CalibStats>) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(stats) = stats {
        if stats.is_empty() {
            return Err(domain_err("static quantization with unpopulated stats"));
        }
        if stats.channels() != x.cols() {
            return Err(dim_err(format!(
                "stats track {} channels, input has {}",
                stats.channels(),
                x.cols()
            )));
        }
        return match axis {
            Axis::PerChannel => Ok((stats.min().to_vec(), stats.max().to_vec())),
            Axis::PerTensor => Ok((
                vec![stats.min().iter().copied().fold(f64::INFINITY, f64::min)],
                vec![stats.max().iter().copied().fold(f64::NEG_INFINITY, f64::max)],
            )),
            Axis::PerToken => Err(contract_err(
                "per-token scales depend on the live tensor and cannot be static",
            )),
        };
    }
    if x.rows() == 0 || x.cols() == 0 {
        return Err(domain_err("cannot derive scales from an empty matrix"));
    }
    match axis {
        Axis::PerChannel => col_minmax(x),
        Axis::PerToken => Ok((0..x.rows())
            .map(|r| {
                let row = x.row(r);
                (
                    row.iter().copied().fold(f64::INFINITY, f64::min),
                    row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            })
            .unzip()),
        Axis::PerTensor => {
            let (mins, maxs) = col_minmax(x)?;
            Ok((
                vec![mins.into_iter().fold(f64::INFINITY, f64::min)],
                vec![maxs.into_iter().fold(f64::NEG_INFINITY, f64::max)],
            ))
        }
    }
}

/// Scales and zero points for a set of ranges.
pub fn scales_for_ranges(mins: &[f64], maxs: &[f64], scheme: &QScheme) -> Result<(Vec<f64>, Vec<i32>)> {
    mins.iter()
        .zip(maxs)
        .map(|(&lo, &hi)| compute_scale(lo, hi, scheme))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

/// Quantizes `x`. Without `stats` the ranges come from `x` itself (dynamic);
/// with `stats` they come from calibration (static, per-channel or
/// per-tensor only).
pub fn quantize(x: &MatF, scheme: &QScheme, stats: Option<&CalibStats>) -> Result<QTensor> {
    let (mins, maxs) = axis_ranges(x, scheme.axis, stats)?;
    let (scales, zps) = scales_for_ranges(&mins, &maxs, scheme)?;
    quantize_with_params(x, scheme, &scales, &zps)
}

pub fn dequantize(q: &QTensor) -> MatF {
    MatF::from_fn(q.rows(), q.cols(), |r, c| {
        let p = q.param_index(r, c);
        f64::from(q.code(r, c) - q.zero_points[p]) * q.scales[p]
    })
}

/// Quantize-then-dequantize.
pub fn fake_quantize(x: &MatF, scheme: &QScheme, stats: Option<&CalibStats>) -> Result<MatF> {
    quantize(x, scheme, stats).map(|q| dequantize(&q))
}

/// Reconstruction error of a quantization round trip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantError {
    pub mse: f64,
    /// `+inf` when the reconstruction is exact (including all-zero input).
    #[serde(with = "crate::report::inf_float")]
    pub sqnr_db: f64,
    pub max_abs_err: f64,
}

impl QuantError {
    /// Compares a reconstruction against its reference.
    pub fn between(reference: &MatF, approx: &MatF) -> Result<Self> {
        if reference.shape() != approx.shape() {
            return Err(dim_err("error metrics on differently shaped matrices"));
        }
        let n = reference.data().len();
        if n == 0 {
            return Err(domain_err("error metrics on an empty matrix"));
        }
        let mut sq_err = 0.0;
        let mut sq_sig = 0.0;
        let mut max_abs_err: f64 = 0.0;
        for (&x, &y) in reference.data().iter().zip(approx.data()) {
            let e = x - y;
            sq_err += e * e;
            sq_sig += x * x;
            max_abs_err = max_abs_err.max(e.abs());
        }
        let mse = sq_err / n as f64;
        let signal = sq_sig / n as f64;
        Ok(Self {
            mse,
            sqnr_db: sqnr_db(signal, mse),
            max_abs_err,
        })
    }
}

pub fn sqnr_db(signal_power: f64, noise_power: f64) -> f64 {
    if noise_power == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal_power / noise_power).log10()
    }
}

/// Dynamic round-trip error of `x` under `scheme`.
pub fn quant_error(x: &MatF, scheme: &QScheme) -> Result<QuantError> {
    let xr = fake_quantize(x, scheme, None)?;
    QuantError::between(x, &xr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sym8(axis: Axis) -> QScheme {
        QScheme::symmetric(8, axis).unwrap()
    }

    #[test]
    fn clip_ranges() {
        let s = QScheme::symmetric(6, Axis::PerTensor).unwrap();
        assert_eq!((s.qmin(), s.qmax()), (-31, 31));
        let a = QScheme::asymmetric(8, Axis::PerTensor).unwrap();
        assert_eq!((a.qmin(), a.qmax()), (0, 255));
        assert_eq!(a.storage_offset(), 128);
        let a4 = QScheme::asymmetric(4, Axis::PerTensor).unwrap();
        assert_eq!((a4.qmin(), a4.qmax(), a4.storage_offset()), (0, 15, 8));
        assert!(QScheme::symmetric(7, Axis::PerTensor).is_err());
    }

    #[test]
    fn scheme_json_is_validated() {
        let s: QScheme = serde_json::from_str(r#"{"bits":6,"symmetry":"symmetric","axis":"per_channel"}"#).unwrap();
        assert_eq!(s, QScheme::symmetric(6, Axis::PerChannel).unwrap());
        assert!(serde_json::from_str::<QScheme>(r#"{"bits":5,"symmetry":"symmetric","axis":"per_channel"}"#).is_err());
    }

    #[test]
    fn compute_scale_examples() {
        assert_eq!(
            compute_scale(-1.0, 1.0, &sym8(Axis::PerTensor)).unwrap(),
            (1.0 / 127.0, 0)
        );
        let asym = QScheme::asymmetric(8, Axis::PerTensor).unwrap();
        assert_eq!(compute_scale(0.0, 255.0, &asym).unwrap(), (1.0, 0));
        let (s, z) = compute_scale(-3.0, 9.0, &asym).unwrap();
        assert_eq!(s, 12.0 / 255.0);
        assert_eq!(z, 64);
    }

    #[test]
    fn asymmetric_grid_round_trip_within_half_step() {
        let asym = QScheme::asymmetric(8, Axis::PerTensor).unwrap();
        let (s, z) = compute_scale(-3.0, 9.0, &asym).unwrap();
        let grid: Vec<f64> = (0..10_000).map(|i| -3.0 + 12.0 * i as f64 / 9_999.0).collect();
        let x = MatF::new(1, grid.len(), grid).unwrap();
        let q = quantize_with_params(&x, &asym, &[s], &[z]).unwrap();
        let xr = dequantize(&q);
        // z = 64 puts the top code at 191s ~ 8.988, within s/2 of 9.
        for (a, b) in x.data().iter().zip(xr.data()) {
            assert!((a - b).abs() <= s / 2.0, "{a} -> {b}");
        }
    }

    #[test]
    fn compute_scale_errors_and_degenerate() {
        let s = sym8(Axis::PerTensor);
        assert!(matches!(compute_scale(1.0, -1.0, &s), Err(Error::Domain(_))));
        assert_eq!(compute_scale(0.0, 0.0, &s).unwrap(), (1.0, 0));
        let asym = QScheme::asymmetric(8, Axis::PerTensor).unwrap();
        assert_eq!(compute_scale(0.0, 0.0, &asym).unwrap(), (1.0, 0));
        // constant nonzero channel
        let (sc, _) = compute_scale(2.54, 2.54, &s).unwrap();
        assert_eq!(sc, 2.54 / 127.0);
        let (sa, za) = compute_scale(-0.5, -0.5, &asym).unwrap();
        assert!(sa > 0.0);
        assert_eq!(za, 255);
    }

    #[test]
    fn quantize_small_tensor() {
        let x = MatF::from_rows(&[vec![-1.0, 0.0, 1.0]]).unwrap();
        let q = quantize(&x, &sym8(Axis::PerTensor), None).unwrap();
        assert_eq!(q.ints().data(), &[-127, 0, 127]);
        assert_eq!(q.scales(), &[1.0 / 127.0]);
    }

    #[test]
    fn outlier_channel_scale_is_isolated() {
        let x = MatF::from_rows(&[vec![0.5, -60.0, 1.2], vec![-0.3, -75.0, 0.7], vec![0.1, -93.0, -2.0]]).unwrap();
        let q = quantize(&x, &sym8(Axis::PerChannel), None).unwrap();
        assert_eq!(q.scales()[1], 93.0 / 127.0);
        assert!((q.scales()[1] - 0.732).abs() < 1e-3);
        assert_eq!(q.scales()[0], 0.5 / 127.0);
        assert_eq!(q.scales()[2], 2.0 / 127.0);
    }

    #[test]
    fn random_round_trip_bounded_by_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = MatF::from_fn(32, 16, |_, _| rng.gen_range(-5.0..5.0));
        for axis in [Axis::PerTensor, Axis::PerToken, Axis::PerChannel] {
            for bits in [4, 6, 8] {
                for sym in [Symmetry::Symmetric, Symmetry::Asymmetric] {
                    let scheme = QScheme::new(bits, sym, axis).unwrap();
                    let q = quantize(&x, &scheme, None).unwrap();
                    let xr = dequantize(&q);
                    for r in 0..32 {
                        for c in 0..16 {
                            let s = q.scales()[q.param_index(r, c)];
                            assert!((x.get(r, c) - xr.get(r, c)).abs() <= s / 2.0 * (1.0 + 1e-12));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dequantize_zero_and_grid_points() {
        let scheme = sym8(Axis::PerToken);
        let q = QTensor::from_parts(
            MatI8::new(2, 2, vec![0; 4]).unwrap(),
            scheme,
            vec![0.5, 2.0],
            vec![0, 0],
        )
        .unwrap();
        assert_eq!(dequantize(&q), MatF::zeros(2, 2));

        let s = 0.25;
        let x = MatF::from_fn(3, 5, |r, c| (r as f64 * 5.0 + c as f64 - 7.0) * s);
        let q = quantize_with_params(&x, &sym8(Axis::PerTensor), &[s], &[0]).unwrap();
        assert_eq!(dequantize(&q), x);
    }

    #[test]
    fn static_per_token_is_rejected() {
        let x = MatF::zeros(2, 2);
        let mut st = CalibStats::new(2, 1.0).unwrap();
        st.observe(&MatF::identity(2)).unwrap();
        assert!(matches!(
            quantize(&x, &sym8(Axis::PerToken), Some(&st)),
            Err(Error::Contract(_))
        ));
        let empty = CalibStats::new(2, 1.0).unwrap();
        assert!(quantize(&x, &sym8(Axis::PerChannel), Some(&empty)).is_err());
    }

    #[test]
    fn static_scales_saturate_out_of_range() {
        let mut st = CalibStats::new(1, 1.0).unwrap();
        st.observe(&MatF::from_rows(&[vec![-1.0], vec![1.0]]).unwrap()).unwrap();
        let x = MatF::from_rows(&[vec![5.0], vec![-5.0]]).unwrap();
        let q = quantize(&x, &sym8(Axis::PerChannel), Some(&st)).unwrap();
        assert_eq!(q.ints().data(), &[127, -127]);
    }

    #[test]
    fn from_parts_rejects_violations() {
        let ints = MatI8::new(1, 2, vec![0, 1]).unwrap();
        let s = sym8(Axis::PerTensor);
        assert!(QTensor::from_parts(ints.clone(), s, vec![0.0], vec![0]).is_err());
        assert!(QTensor::from_parts(ints.clone(), s, vec![1.0], vec![3]).is_err());
        assert!(QTensor::from_parts(ints.clone(), s, vec![1.0, 1.0], vec![0, 0]).is_err());
        let bad = MatI8::new(1, 1, vec![-128]).unwrap();
        assert!(QTensor::from_parts(bad, s, vec![1.0], vec![0]).is_err());
        let s6 = QScheme::symmetric(6, Axis::PerTensor).unwrap();
        let bad6 = MatI8::new(1, 1, vec![40]).unwrap();
        assert!(QTensor::from_parts(bad6, s6, vec![1.0], vec![0]).is_err());
    }

    #[test]
    fn quant_error_metrics() {
        // max |x| = 127 steps of 0.5, so the dynamic scale is exactly 0.5
        let s = 0.5;
        let x = MatF::from_fn(4, 4, |r, c| {
            if r == 0 && c == 0 {
                127.0 * s
            } else {
                (r as f64 - c as f64) * s
            }
        });
        let e = quant_error(&x, &sym8(Axis::PerTensor)).unwrap();
        assert_eq!(e.mse, 0.0);
        assert!(e.sqnr_db.is_infinite());

        let zero = quant_error(&MatF::zeros(3, 3), &sym8(Axis::PerTensor)).unwrap();
        assert_eq!(zero.mse, 0.0);
        assert_eq!(zero.sqnr_db, f64::INFINITY);
    }

    #[test]
    fn quant_error_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = MatF::from_fn(40, 12, |_, _| rng.gen_range(-4.0..4.0));
        let scheme = QScheme::symmetric(6, Axis::PerToken).unwrap();
        let got = quant_error(&x, &scheme).unwrap();

        // Two-pass oracle: materialize errors, then reduce.
        let q = quantize(&x, &scheme, None).unwrap();
        let xr = dequantize(&q);
        let errs: Vec<f64> = x.data().iter().zip(xr.data()).map(|(a, b)| a - b).collect();
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
        let power = x.data().iter().map(|v| v * v).sum::<f64>() / errs.len() as f64;
        assert!((got.mse - mse).abs() <= 1e-15 * mse);
        assert!((got.sqnr_db - 10.0 * (power / mse).log10()).abs() < 1e-12);
        let maxe = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        assert_eq!(got.max_abs_err, maxe);
    }

    #[test]
    fn per_channel_beats_per_token_on_outlier_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = MatF::from_fn(64, 32, |_, c| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if c == 7 {
                v * 40.0 - 70.0
            } else {
                v
            }
        });
        let ch = quant_error(&x, &sym8(Axis::PerChannel)).unwrap();
        let tok = quant_error(&x, &sym8(Axis::PerToken)).unwrap();
        assert!(ch.mse < tok.mse, "{} vs {}", ch.mse, tok.mse);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scheme() -> impl Strategy<Value = QScheme> {
            (
                prop::sample::select(QScheme::SUPPORTED_BITS.to_vec()),
                prop::bool::ANY,
                prop::sample::select(vec![Axis::PerTensor, Axis::PerToken, Axis::PerChannel]),
            )
                .prop_map(|(bits, sym, axis)| {
                    let symmetry = if sym { Symmetry::Symmetric } else { Symmetry::Asymmetric };
                    QScheme::new(bits, symmetry, axis).unwrap()
                })
        }

        fn matrix() -> impl Strategy<Value = MatF> {
            (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
                prop::collection::vec(-1e3f64..1e3, r * c).prop_map(move |d| MatF::new(r, c, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn round_trip_within_half_step(x in matrix(), s in scheme()) {
                let q = quantize(&x, &s, None).unwrap();
                let y = dequantize(&q);
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        let step = q.scales()[q.param_index(r, c)];
                        prop_assert!((x.get(r, c) - y.get(r, c)).abs() <= step / 2.0 * (1.0 + 1e-9));
                    }
                }
            }

            #[test]
            fn symmetric_codes_flip_with_sign(x in matrix(), bits in prop::sample::select(vec![4u8, 6, 8])) {
                let s = QScheme::symmetric(bits, Axis::PerChannel).unwrap();
                let q = quantize(&x, &s, None).unwrap();
                let neg = quantize(&x.map(|v| -v), &s, None).unwrap();
                prop_assert_eq!(q.scales(), neg.scales());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        prop_assert_eq!(q.code(r, c), -neg.code(r, c));
                    }
                }
            }

            #[test]
            fn codes_stay_in_range(x in matrix(), s in scheme()) {
                let q = quantize(&x, &s, None).unwrap();
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        prop_assert!((s.qmin()..=s.qmax()).contains(&q.code(r, c)));
                    }
                }
            }
        }
    }
}
