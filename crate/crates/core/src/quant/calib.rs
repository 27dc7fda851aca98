use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, domain_err, Error, Result};
use crate::tensor::MatF;

/// Running per-channel min/max over calibration batches.
///
/// Statistics from independent streams combine with [`CalibStats::merge`];
/// elementwise min/max makes the result independent of observation order.
/// With `clip_ratio < 1` each row is clamped to its `clip_ratio` quantile of
/// absolute values before it is folded in (token-wise clipping).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StatsDoc", into = "StatsDoc")]
pub struct CalibStats {
    min: Vec<f64>,
    max: Vec<f64>,
    count: u64,
    clip_ratio: f64,
}

/// JSON layout: `{channels, min[], max[], count, clip_ratio}`. Unpopulated
/// stats (`count == 0`) write zeros for `min`/`max`.
#[derive(Serialize, Deserialize)]
struct StatsDoc {
    channels: usize,
    min: Vec<f64>,
    max: Vec<f64>,
    count: u64,
    clip_ratio: f64,
}

impl From<CalibStats> for StatsDoc {
    fn from(s: CalibStats) -> Self {
        let channels = s.channels();
        let (min, max) = if s.count == 0 {
            (vec![0.0; channels], vec![0.0; channels])
        } else {
            (s.min, s.max)
        };
        Self {
            channels,
            min,
            max,
            count: s.count,
            clip_ratio: s.clip_ratio,
        }
    }
}

impl TryFrom<StatsDoc> for CalibStats {
    type Error = Error;

    fn try_from(d: StatsDoc) -> Result<Self> {
        if d.min.len() != d.channels || d.max.len() != d.channels {
            return Err(Error::Format(format!(
                "stats declare {} channels but carry {}/{} bounds",
                d.channels,
                d.min.len(),
                d.max.len()
            )));
        }
        let mut s = CalibStats::new(d.channels, d.clip_ratio)?;
        if d.count > 0 {
            if d.min.iter().zip(&d.max).any(|(lo, hi)| !(lo <= hi)) {
                return Err(Error::Format("stats with min > max".into()));
            }
            s.min = d.min;
            s.max = d.max;
            s.count = d.count;
        }
        Ok(s)
    }
}

impl CalibStats {
    pub const DEFAULT_CLIP_RATIO: f64 = 1.0;
    /// Quantile used when token-wise clipping is switched on.
    pub const TOKEN_CLIP_RATIO: f64 = 0.999;

    pub fn new(channels: usize, clip_ratio: f64) -> Result<Self> {
        if !(clip_ratio > 0.0 && clip_ratio <= 1.0) {
            return Err(domain_err(format!("clip_ratio {clip_ratio} not in (0, 1]")));
        }
        Ok(Self {
            min: vec![f64::INFINITY; channels],
            max: vec![f64::NEG_INFINITY; channels],
            count: 0,
            clip_ratio,
        })
    }

    /// Stats describing exactly the given ranges, as if one row at each bound
    /// had been observed.
    pub fn from_ranges(min: Vec<f64>, max: Vec<f64>, count: u64, clip_ratio: f64) -> Result<Self> {
        StatsDoc {
            channels: min.len(),
            min,
            max,
            count,
            clip_ratio,
        }
        .try_into()
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    /// Number of rows observed.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn clip_ratio(&self) -> f64 {
        self.clip_ratio
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn observe(&mut self, batch: &MatF) -> Result<()> {
        if batch.cols() != self.channels() {
            return Err(dim_err(format!(
                "batch has {} channels, stats track {}",
                batch.cols(),
                self.channels()
            )));
        }
        let mut scratch = Vec::with_capacity(batch.cols());
        for r in 0..batch.rows() {
            let row = batch.row(r);
            let t = if self.clip_ratio < 1.0 {
                token_clip_threshold(row, self.clip_ratio, &mut scratch)
            } else {
                f64::INFINITY
            };
            for (c, &v) in row.iter().enumerate() {
                let v = v.clamp(-t, t);
                if v < self.min[c] {
                    self.min[c] = v;
                }
                if v > self.max[c] {
                    self.max[c] = v;
                }
            }
        }
        self.count += batch.rows() as u64;
        Ok(())
    }

    pub fn observed(mut self, batch: &MatF) -> Result<Self> {
        self.observe(batch)?;
        Ok(self)
    }

    pub fn merge(&self, other: &CalibStats) -> Result<CalibStats> {
        if self.channels() != other.channels() {
            return Err(dim_err(format!(
                "merging stats over {} and {} channels",
                self.channels(),
                other.channels()
            )));
        }
        if self.clip_ratio != other.clip_ratio {
            return Err(contract_err("merging stats with different clip ratios"));
        }
        Ok(CalibStats {
            min: self.min.iter().zip(&other.min).map(|(a, b)| a.min(*b)).collect(),
            max: self.max.iter().zip(&other.max).map(|(a, b)| a.max(*b)).collect(),
            count: self.count + other.count,
            clip_ratio: self.clip_ratio,
        })
    }

    /// Ranges after subtracting `shift[c]` from channel `c`.
    pub fn shifted(&self, shift: &[f64]) -> Result<CalibStats> {
        if shift.len() != self.channels() {
            return Err(dim_err("shift length differs from channel count"));
        }
        if self.is_empty() {
            return Err(domain_err("shifting unpopulated stats"));
        }
        Ok(CalibStats {
            min: self.min.iter().zip(shift).map(|(m, z)| m - z).collect(),
            max: self.max.iter().zip(shift).map(|(m, z)| m - z).collect(),
            count: self.count,
            clip_ratio: self.clip_ratio,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// The `ratio` quantile of `|row|`, taken as the order statistic at index
/// `floor(ratio · (len - 1))` of the ascending absolute values.
pub fn token_clip_threshold(row: &[f64], ratio: f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(row.iter().map(|v| v.abs()));
    if scratch.is_empty() {
        return f64::INFINITY;
    }
    let idx = ((ratio * (scratch.len() - 1) as f64).floor() as usize).min(scratch.len() - 1);
    let (_, t, _) = scratch.select_nth_unstable_by(idx, f64::total_cmp);
    *t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f64>]) -> MatF {
        MatF::from_rows(rows).unwrap()
    }

    #[test]
    fn observe_small_batch() {
        let mut s = CalibStats::new(2, 1.0).unwrap();
        s.observe(&m(&[vec![1.0, -3.0], vec![9.0, 0.0]])).unwrap();
        assert_eq!(s.min(), &[1.0, -3.0]);
        assert_eq!(s.max(), &[9.0, 0.0]);
        assert_eq!(s.count(), 2);
    }

    #[test]
    fn observe_is_order_independent() {
        let a = m(&[vec![1.0, -3.0], vec![2.0, 4.0]]);
        let b = m(&[vec![-7.0, 0.5]]);
        let ab = CalibStats::new(2, 1.0)
            .unwrap()
            .observed(&a)
            .unwrap()
            .observed(&b)
            .unwrap();
        let ba = CalibStats::new(2, 1.0)
            .unwrap()
            .observed(&b)
            .unwrap()
            .observed(&a)
            .unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let mut s = CalibStats::new(3, 1.0).unwrap();
        assert!(matches!(s.observe(&MatF::zeros(1, 2)), Err(Error::Dimension(_))));
        let t = CalibStats::new(2, 1.0).unwrap();
        assert!(s.merge(&t).is_err());
        assert!(CalibStats::new(2, 0.0).is_err());
        assert!(CalibStats::new(2, 1.5).is_err());
    }

    #[test]
    fn token_clipping_suppresses_a_spike() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut row: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        row[37] = 1000.0;
        let mut s = CalibStats::new(200, 0.99).unwrap();
        s.observe(&MatF::new(1, 200, row.clone()).unwrap()).unwrap();

        // sort-based quantile oracle
        let mut abs: Vec<f64> = row.iter().map(|v| v.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let t = abs[(0.99 * 199.0f64).floor() as usize];
        assert!(t < 1.0);
        assert_eq!(s.max()[37], t);
        let top = s.max().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(top < 1.0, "spike survived: {top}");
    }

    #[test]
    fn json_round_trip() {
        let mut s = CalibStats::new(3, 0.999).unwrap();
        s.observe(&m(&[vec![1.0, -2.0, 0.25], vec![-1.5, 3.0, 0.0]])).unwrap();
        let json = s.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["channels"], 3);
        assert_eq!(v["count"], 2);
        assert_eq!(CalibStats::from_json(&json).unwrap(), s);

        let empty = CalibStats::new(2, 1.0).unwrap();
        assert_eq!(CalibStats::from_json(&empty.to_json().unwrap()).unwrap(), empty);
        assert!(
            CalibStats::from_json(r#"{"channels":2,"min":[0.0],"max":[1.0,1.0],"count":1,"clip_ratio":1.0}"#).is_err()
        );
    }

    #[test]
    fn shifted_ranges() {
        let s = CalibStats::from_ranges(vec![-3.0, -93.0], vec![9.0, -60.0], 4, 1.0).unwrap();
        let t = s.shifted(&[3.0, -76.5]).unwrap();
        assert_eq!(t.min(), &[-6.0, -16.5]);
        assert_eq!(t.max(), &[6.0, 16.5]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn batch(cols: usize) -> impl Strategy<Value = MatF> {
            (1usize..6).prop_flat_map(move |r| {
                prop::collection::vec(-50f64..50.0, r * cols).prop_map(move |d| MatF::new(r, cols, d).unwrap())
            })
        }

        fn stats(clip: f64) -> impl Strategy<Value = CalibStats> {
            batch(4).prop_map(move |b| CalibStats::new(4, clip).unwrap().observed(&b).unwrap())
        }

        proptest! {
            #[test]
            fn merge_is_commutative_and_associative(
                clip in prop::sample::select(vec![1.0, 0.9]),
                (a, b, c) in (stats(1.0), stats(1.0), stats(1.0)),
            ) {
                let with = |s: &CalibStats| CalibStats::from_ranges(s.min().to_vec(), s.max().to_vec(), s.count(), clip).unwrap();
                let (a, b, c) = (with(&a), with(&b), with(&c));
                prop_assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
                prop_assert_eq!(a.merge(&b).unwrap().merge(&c).unwrap(), a.merge(&b.merge(&c).unwrap()).unwrap());
            }

            #[test]
            fn merge_equals_observing_both(x in batch(3), y in batch(3)) {
                let one = CalibStats::new(3, 1.0).unwrap().observed(&x).unwrap().observed(&y).unwrap();
                let a = CalibStats::new(3, 1.0).unwrap().observed(&x).unwrap();
                let b = CalibStats::new(3, 1.0).unwrap().observed(&y).unwrap();
                prop_assert_eq!(a.merge(&b).unwrap(), one);
            }
        }
    }
}
