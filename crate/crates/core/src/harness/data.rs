use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, domain_err, Result};
use crate::tensor::MatF;
use crate::transform::{BlockConfig, BlockModel, LayerNorm, LinearLayer, QuantMode};

/// Column structure of synthetic activations: a few fixed channels carry
/// large, shifted values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub n_channels: usize,
    pub outlier_indices: Vec<usize>,
    /// Ratio of outlier to normal standard deviation.
    pub outlier_scale: f64,
    /// Mean of each outlier channel, aligned with `outlier_indices`.
    pub outlier_shift: Vec<f64>,
    pub base_std: f64,
    pub seed: u64,
}

impl OutlierSpec {
    /// Channel 5 (or the last channel, for narrow layers) centered on -75
    /// with 80x the spread of the normal channels.
    pub fn dominant(n_channels: usize, seed: u64) -> Self {
        Self {
            n_channels,
            outlier_indices: vec![5.min(n_channels.saturating_sub(1))],
            outlier_scale: 80.0,
            outlier_shift: vec![-75.0],
            base_std: 0.2,
            seed,
        }
    }

    /// Channel 5 (or the last) with mean -75 and 8x spread over unit-variance
    /// normal channels: an outlier whose range sits far from zero.
    pub fn shifted(n_channels: usize, seed: u64) -> Self {
        Self {
            outlier_scale: 8.0,
            base_std: 1.0,
            ..Self::dominant(n_channels, seed)
        }
    }

    /// No outliers: every channel `N(0, 1)`.
    pub fn plain(n_channels: usize, seed: u64) -> Self {
        Self {
            n_channels,
            outlier_indices: Vec::new(),
            outlier_scale: 1.0,
            outlier_shift: Vec::new(),
            base_std: 1.0,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(domain_err("outlier spec needs at least one channel"));
        }
        if self.outlier_indices.len() != self.outlier_shift.len() {
            return Err(dim_err("one shift per outlier channel"));
        }
        let mut seen = vec![false; self.n_channels];
        for &i in &self.outlier_indices {
            if i >= self.n_channels {
                return Err(domain_err(format!(
                    "outlier index {i} out of {} channels",
                    self.n_channels
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(domain_err(format!("outlier index {i} listed twice")));
            }
        }
        if !(self.outlier_scale >= 1.0 && self.outlier_scale.is_finite()) {
            return Err(domain_err("outlier_scale must be a finite multiplier >= 1"));
        }
        if !(self.base_std > 0.0 && self.base_std.is_finite()) {
            return Err(domain_err("base_std must be positive"));
        }
        if self.outlier_shift.iter().any(|s| !s.is_finite()) {
            return Err(domain_err("outlier shifts must be finite"));
        }
        Ok(())
    }

    /// `(mean, std)` of every channel.
    pub fn channel_moments(&self) -> Vec<(f64, f64)> {
        let mut m = vec![(0.0, self.base_std); self.n_channels];
        for (&i, &shift) in self.outlier_indices.iter().zip(&self.outlier_shift) {
            m[i] = (shift, self.base_std * self.outlier_scale);
        }
        m
    }
}

/// `rows × n_channels` activations: normal channels `N(0, base_std²)`,
/// outlier channels `N(shift, (base_std · outlier_scale)²)`.
pub fn gen_activations(spec: &OutlierSpec, rows: usize) -> Result<MatF> {
    spec.validate()?;
    if rows == 0 {
        return Err(domain_err("cannot generate zero rows"));
    }
    let moments = spec.channel_moments();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(MatF::from_fn(rows, spec.n_channels, |_, c| {
        let z: f64 = rng.sample(StandardNormal);
        moments[c].0 + moments[c].1 * z
    }))
}

/// Standard-normal block inputs on a stream separate from model weights.
pub fn gen_inputs(n: usize, rows: usize, seed: u64) -> Result<MatF> {
    gen_activations(&OutlierSpec::plain(n, seed), rows)
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> MatF {
    let d = Normal::new(0.0, std).expect("positive std");
    MatF::from_fn(rows, cols, |_, _| d.sample(rng))
}

fn linear(out: usize, inp: usize, mode: QuantMode, rng: &mut ChaCha8Rng) -> Result<LinearLayer> {
    let w = gaussian(out, inp, (2.0 / inp as f64).sqrt(), rng);
    let b = gaussian(1, out, 0.1, rng).into_data();
    LinearLayer::new(w, b, mode)
}

fn layer_norm(cfg: &BlockConfig, outliers: Option<&OutlierSpec>, rng: &mut ChaCha8Rng) -> Result<LayerNorm> {
    let n = cfg.hidden;
    match outliers {
        Some(spec) => {
            spec.validate()?;
            if spec.n_channels != n {
                return Err(dim_err(format!(
                    "outlier spec over {} channels for hidden size {n}",
                    spec.n_channels
                )));
            }
            let (beta, gamma) = spec.channel_moments().into_iter().unzip();
            LayerNorm::new(gamma, beta, cfg.eps)
        }
        None => {
            let gamma = (0..n)
                .map(|_| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let beta = (0..n).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
            LayerNorm::new(gamma, beta, cfg.eps)
        }
    }
}

/// A random block with `N(0, 2/fan_in)` weights and `N(0, 0.01)` biases.
///
/// With an outlier spec the LayerNorm affine parameters reproduce its
/// channel moments: a row-normalized input leaves the LayerNorm with
/// channel `k` distributed roughly as `N(mean_k, std_k²)`.
pub fn random_block(cfg: &BlockConfig, outliers: Option<&OutlierSpec>, seed: u64) -> Result<BlockModel> {
    cfg.validate()?;
    let (n, f) = (cfg.hidden, cfg.ffn);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln1 = layer_norm(cfg, outliers, &mut rng)?;
    let qkv = linear(3 * n, n, QuantMode::FoldedPerChannel, &mut rng)?;
    let out = linear(n, n, QuantMode::TokenChannel, &mut rng)?;
    let ln2 = layer_norm(cfg, outliers, &mut rng)?;
    let fc1 = linear(f, n, QuantMode::FoldedPerChannel, &mut rng)?;
    let fc2 = linear(n, f, QuantMode::TokenChannel, &mut rng)?;
    BlockModel::new(*cfg, ln1, qkv, out, ln2, fc1, fc2)
}
