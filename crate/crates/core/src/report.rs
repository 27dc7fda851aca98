use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::qgemm::OpCount;
use crate::transform::LayerReport;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    /// SHA-256 of the canonical JSON of the experiment configuration.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Metadata {
    pub fn for_config<C: Serialize>(config: &C, seed: u64) -> Result<Self> {
        Ok(Self {
            config_hash: config_hash(config)?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}

pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One measured configuration. Fields that do not apply to an experiment are
/// left out of the JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetrize: Option<bool>,
    /// `(i, n, j)` of a GEMM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_inf_float")]
    pub output_sqnr_db: Option<f64>,
    /// `max |y - y_ref| / max |y_ref|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rel_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_frobenius: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops: Option<OpCount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ns: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub kind: String,
    pub metadata: Metadata,
    pub entries: Vec<Entry>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    variant: Option<&'a str>,
    scheme: Option<&'a str>,
    symmetrize: Option<bool>,
    i: Option<usize>,
    n: Option<usize>,
    j: Option<usize>,
    output_mse: Option<f64>,
    output_sqnr_db: Option<f64>,
    max_rel_err: Option<f64>,
    rel_frobenius: Option<f64>,
    int_mults: Option<u64>,
    scale_mults: Option<u64>,
    zp_mults: Option<u64>,
    wall_ns: Option<u64>,
}

impl Report {
    pub fn new(kind: &str, metadata: Metadata) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            kind: kind.to_string(),
            metadata,
            entries: Vec::new(),
        }
    }

    pub fn entry(&self, label: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// `output_mse` of entry `a` over that of entry `b`.
    pub fn mse_ratio(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.entry(a)?.output_mse? / self.entry(b)?.output_mse?)
    }

    /// Copy with wall-clock fields cleared.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.entries {
            e.wall_ns = None;
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(s)?;
        if r.schema != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported report schema {}", r.schema)));
        }
        Ok(r)
    }

    /// One row per entry; per-layer details are omitted. Infinite SQNR is
    /// written as `inf`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            let [i, n, j] = e.shape.map_or([None; 3], |s| s.map(Some));
            w.serialize(CsvRow {
                label: &e.label,
                variant: e.variant.as_deref(),
                scheme: e.scheme.as_deref(),
                symmetrize: e.symmetrize,
                i,
                n,
                j,
                output_mse: e.output_mse,
                output_sqnr_db: e.output_sqnr_db,
                max_rel_err: e.max_rel_err,
                rel_frobenius: e.rel_frobenius,
                int_mults: e.ops.map(|o| o.int_mults),
                scale_mults: e.ops.map(|o| o.scale_mults),
                zp_mults: e.ops.map(|o| o.zp_mults),
                wall_ns: e.wall_ns,
            })
            .map_err(|err| Error::Format(err.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|err| Error::Format(err.to_string()))?;
        String::from_utf8(bytes).map_err(|err| Error::Format(err.to_string()))
    }
}

mod opt_inf_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::inf_float")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

pub(crate) mod inf_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad float {t:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let meta = Metadata::for_config(&("cfg", 3), 3).unwrap();
        let mut r = Report::new("test", meta);
        r.entries.push(Entry {
            label: "a".into(),
            variant: Some("token_channel".into()),
            output_mse: Some(0.25),
            output_sqnr_db: Some(f64::INFINITY),
            shape: Some([1, 2, 3]),
            ops: Some(OpCount {
                int_mults: 6,
                int_adds: 6,
                scale_mults: 6,
                zp_mults: 0,
            }),
            wall_ns: Some(10),
            ..Entry::default()
        });
        r.entries.push(Entry {
            label: "b".into(),
            output_mse: Some(0.5),
            ..Entry::default()
        });
        r
    }

    #[test]
    fn json_round_trip_with_infinite_sqnr() {
        let r = sample();
        let json = r.to_json().unwrap();
        assert!(json.contains("\"inf\""));
        assert!(json.contains("\"schema\": 1"));
        assert_eq!(Report::from_json(&json).unwrap(), r);
        assert_eq!(r.mse_ratio("a", "b"), Some(0.5));
        assert!(Report::from_json(&json.replace("\"schema\": 1", "\"schema\": 2")).is_err());
    }

    #[test]
    fn csv_flattening() {
        let csv = sample().to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("label,variant,scheme"));
        assert!(lines[1].starts_with("a,token_channel,,,1,2,3,0.25,inf"));
    }

    #[test]
    fn hash_depends_on_config() {
        assert_eq!(config_hash(&[1, 2]).unwrap(), config_hash(&[1, 2]).unwrap());
        assert_ne!(config_hash(&[1, 2]).unwrap(), config_hash(&[2, 1]).unwrap());
        assert_eq!(config_hash(&0).unwrap().len(), 64);
        assert!(sample().without_timings().entries[0].wall_ns.is_none());
    }
}
