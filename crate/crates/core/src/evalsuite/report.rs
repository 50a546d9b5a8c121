use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "label,bleu2,dist1,dist2,ent4,adver";

/// Metrics for one decoded set. Missing metrics serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema: u32,
    pub bleu2: Option<f64>,
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    pub ent4: Option<f64>,
    pub adver: Option<f64>,
    pub ppl: Option<f64>,
    pub sample_count: usize,
    pub entropy_unit: String,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn new(sample_count: usize, config_fingerprint: String) -> Self {
        MetricsReport {
            schema: SCHEMA_VERSION,
            bleu2: None,
            dist1: None,
            dist2: None,
            ent4: None,
            adver: None,
            ppl: None,
            sample_count,
            entropy_unit: "nats".into(),
            config_fingerprint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: Option<f64>, name: &str| match v {
            Some(x) if !(0.0..=1.0).contains(&x) => Err(Error::Invariant(format!("{name}={x} outside [0,1]"))),
            _ => Ok(()),
        };
        unit(self.dist1, "dist1")?;
        unit(self.dist2, "dist2")?;
        unit(self.adver, "adver")?;
        unit(self.bleu2, "bleu2")?;
        if self.ent4.is_some_and(|e| e < 0.0) {
            return Err(Error::Invariant("ent4 < 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(text)?;
        if r.schema != SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported report schema {}", r.schema)));
        }
        Ok(r)
    }

    pub fn emit(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// One CSV row under [`CSV_HEADER`]; missing values are empty cells.
    pub fn csv_row(&self, label: &str) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{label},{},{},{},{},{}",
            cell(self.bleu2),
            cell(self.dist1),
            cell(self.dist2),
            cell(self.ent4),
            cell(self.adver)
        )
    }
}

/// SHA-256 of the canonical (sorted-key, compact) JSON of `config`.
pub fn config_fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&value)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_write_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricsReport::new(12, config_fingerprint(&serde_json::json!({"b": 1, "a": [0.1]})).unwrap());
        r.dist1 = Some(0.1 + 0.2);
        r.ent4 = Some(std::f64::consts::LN_2);
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        r.emit(&p1).unwrap();
        let back = MetricsReport::read(&p1).unwrap();
        assert_eq!(back, r);
        back.emit(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn missing_metric_is_null() {
        let r = MetricsReport::new(0, String::new());
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(v["bleu2"].is_null());
        assert!(r.csv_row("x").starts_with("x,,"));
        let json = r.to_json().unwrap();
        let keys: Vec<&str> = json.lines().skip(1).filter_map(|l| l.trim().split('"').nth(1)).collect();
        assert_eq!(&keys[..3], &["schema", "bleu2", "dist1"]);
    }

    #[test]
    fn fingerprint_ignores_key_order() {
        let a = config_fingerprint(&serde_json::json!({"x": 1, "y": 2})).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y": 2, "x": 1}"#).unwrap();
        assert_eq!(a, config_fingerprint(&b).unwrap());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn out_of_range_report_is_rejected() {
        let mut r = MetricsReport::new(1, String::new());
        r.dist2 = Some(1.5);
        assert!(r.validate().is_err());
    }
}
