//! Structured metric reports and their (versioned) schema validation.
//!
//! Reports never carry timestamps; two runs with identical configuration and
//! seeds serialize to identical bytes. Wall-clock data lives in the
//! experiment manifest instead.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A metric that is either a finite number or explicitly absent with a
/// reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: Option<f64>,
    pub reason: Option<String>,
}

impl MetricValue {
    pub fn ok(v: f64) -> MetricValue {
        MetricValue {
            value: Some(v),
            reason: None,
        }
    }

    pub fn missing(reason: impl Into<String>) -> MetricValue {
        MetricValue {
            value: None,
            reason: Some(reason.into()),
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        match (&self.value, &self.reason) {
            (Some(v), None) if v.is_finite() => Ok(()),
            (Some(v), None) => Err(Error::Data(format!("{name}: non-finite value {v}"))),
            (None, Some(_)) => Ok(()),
            _ => Err(Error::Data(format!(
                "{name}: exactly one of value/reason must be set"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmEntry {
    pub k: usize,
    pub heldout_nll: MetricValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonEntry {
    pub x_metric: String,
    pub y_metric: String,
    pub r: MetricValue,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: String,
    pub teacher_checksum: String,
    pub vae_checkpoint_hash: String,
    pub flow_checkpoint_hash: String,
    pub seeds: std::collections::BTreeMap<String, u64>,
}

/// Per-variant evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub variant: String,
    /// Definition caveats (top-5 recall normalization, proxy metrics).
    pub notes: Vec<String>,
    pub probe_f1: MetricValue,
    pub probe_top5_recall: MetricValue,
    pub class_accuracy: MetricValue,
    pub gini: MetricValue,
    pub gmm_heldout_nll: Vec<GmmEntry>,
    pub proxy_rfid: MetricValue,
    pub proxy_gfid: MetricValue,
    pub psnr: MetricValue,
    pub ssim: MetricValue,
    pub perceptual: MetricValue,
    pub excluded_attributes: Vec<usize>,
    pub pearson: Vec<PearsonEntry>,
    pub provenance: Provenance,
}

impl MetricReport {
    pub fn standard_notes() -> Vec<String> {
        vec![
            "top5_recall: per-image |top-5 scored attributes intersect true positives| / |true positives|, zero-positive images excluded".into(),
            "perceptual distance is a teacher-feature proxy, not LPIPS".into(),
            "FID-style scores use teacher embeddings and are proxies; not comparable to inception-based numbers".into(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported report schema {}",
                self.schema_version
            )));
        }
        self.probe_f1.validate("probe_f1")?;
        self.probe_top5_recall.validate("probe_top5_recall")?;
        self.class_accuracy.validate("class_accuracy")?;
        self.gini.validate("gini")?;
        for e in &self.gmm_heldout_nll {
            e.heldout_nll.validate(&format!("gmm k={}", e.k))?;
        }
        self.proxy_rfid.validate("proxy_rfid")?;
        self.proxy_gfid.validate("proxy_gfid")?;
        self.psnr.validate("psnr")?;
        self.ssim.validate("ssim")?;
        self.perceptual.validate("perceptual")?;
        for p in &self.pearson {
            p.r.validate(&format!("pearson {} vs {}", p.x_metric, p.y_metric))?;
        }
        Ok(())
    }
}

/// Validates raw JSON against the report schema (field presence, types,
/// finite-or-reason discipline).
pub fn validate_report_json(json: &serde_json::Value) -> Result<()> {
    let report: MetricReport = serde_json::from_value(json.clone())?;
    report.validate()
}

/// Sweep-level aggregation across variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub notes: Vec<String>,
    pub rows: Vec<MetricReport>,
    pub correlation: Vec<PearsonEntry>,
}

impl SweepReport {
    /// Builds the aggregate: correlation of probe metrics against the
    /// generation score requires at least three variants carrying both.
    pub fn from_rows(rows: Vec<MetricReport>) -> SweepReport {
        let mut correlation = Vec::new();
        for (x_name, pick) in [
            (
                "probe_top5_recall",
                Box::new(|r: &MetricReport| r.probe_top5_recall.value)
                    as Box<dyn Fn(&MetricReport) -> Option<f64>>,
            ),
            ("probe_f1", Box::new(|r: &MetricReport| r.probe_f1.value)),
        ] {
            let pairs: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| match (pick(r), r.proxy_gfid.value) {
                    (Some(x), Some(y)) => Some((x, y)),
                    _ => None,
                })
                .collect();
            let r = if pairs.len() < 3 {
                MetricValue::missing(format!(
                    "needs >= 3 variants with {x_name} and proxy_gfid, have {}",
                    pairs.len()
                ))
            } else {
                let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                match crate::metrics::pearson(&xs, &ys) {
                    Ok(v) => MetricValue::ok(v),
                    Err(e) => MetricValue::missing(e.to_string()),
                }
            };
            correlation.push(PearsonEntry {
                x_metric: x_name.into(),
                y_metric: "proxy_gfid".into(),
                r,
            });
        }
        SweepReport {
            schema_version: REPORT_SCHEMA_VERSION,
            notes: MetricReport::standard_notes(),
            rows,
            correlation,
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Evaluation report\n\n");
        for n in &self.notes {
            out.push_str(&format!("> {n}\n"));
        }
        out.push_str(
            "\n| variant | probe_f1 | top5_recall | class_acc | gini | gmm_nll | proxy_rfid | proxy_gfid | psnr | ssim |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        let fmt = |m: &MetricValue| match m.value {
            Some(v) => format!("{v:.4}"),
            None => "null".to_string(),
        };
        for r in &self.rows {
            let gmm = r
                .gmm_heldout_nll
                .iter()
                .map(|e| format!("k{}:{}", e.k, fmt(&e.heldout_nll)))
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                r.variant,
                fmt(&r.probe_f1),
                fmt(&r.probe_top5_recall),
                fmt(&r.class_accuracy),
                fmt(&r.gini),
                gmm,
                fmt(&r.proxy_rfid),
                fmt(&r.proxy_gfid),
                fmt(&r.psnr),
                fmt(&r.ssim),
            ));
        }
        out.push_str("\n## Correlation across variants\n\n");
        for c in &self.correlation {
            match &c.r.value {
                Some(v) => out.push_str(&format!(
                    "- pearson({}, {}) = {v:.4}\n",
                    c.x_metric, c.y_metric
                )),
                None => out.push_str(&format!(
                    "- pearson({}, {}) = null ({})\n",
                    c.x_metric,
                    c.y_metric,
                    c.r.reason.as_deref().unwrap_or("unknown")
                )),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            r.validate()?;
        }
        for c in &self.correlation {
            c.r.validate(&format!("{} vs {}", c.x_metric, c.y_metric))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_report(variant: &str, top5: f64, gfid: f64) -> MetricReport {
        MetricReport {
            schema_version: REPORT_SCHEMA_VERSION,
            variant: variant.into(),
            notes: MetricReport::standard_notes(),
            probe_f1: MetricValue::ok(0.5),
            probe_top5_recall: MetricValue::ok(top5),
            class_accuracy: MetricValue::ok(0.4),
            gini: MetricValue::ok(0.2),
            gmm_heldout_nll: vec![GmmEntry {
                k: 8,
                heldout_nll: MetricValue::ok(120.0),
            }],
            proxy_rfid: MetricValue::ok(1.0),
            proxy_gfid: MetricValue::ok(gfid),
            psnr: MetricValue::ok(22.0),
            ssim: MetricValue::ok(0.8),
            perceptual: MetricValue::ok(0.01),
            excluded_attributes: vec![],
            pearson: vec![],
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn report_json_roundtrips_through_validator() {
        let r = dummy_report("a", 0.6, 3.0);
        let json = serde_json::to_value(&r).unwrap();
        validate_report_json(&json).unwrap();
        let back: MetricReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn validator_rejects_nonfinite_and_reasonless_nulls() {
        let mut r = dummy_report("a", 0.6, 3.0);
        r.gini = MetricValue {
            value: Some(f64::NAN),
            reason: None,
        };
        assert!(r.validate().is_err());
        r.gini = MetricValue {
            value: None,
            reason: None,
        };
        assert!(r.validate().is_err());
        r.gini = MetricValue::missing("degenerate input");
        r.validate().unwrap();
    }

    #[test]
    fn correlation_needs_three_variants() {
        let sweep = SweepReport::from_rows(vec![
            dummy_report("a", 0.5, 4.0),
            dummy_report("b", 0.6, 3.0),
        ]);
        assert!(sweep.correlation[0].r.value.is_none());
        assert!(sweep.correlation[0].r.reason.is_some());

        let sweep3 = SweepReport::from_rows(vec![
            dummy_report("a", 0.5, 4.0),
            dummy_report("b", 0.6, 3.0),
            dummy_report("c", 0.7, 2.0),
        ]);
        let r = sweep3.correlation[0].r.value.unwrap();
        assert!(r < -0.99, "monotone opposite series should be ~ -1, got {r}");
        assert!(sweep3.to_markdown().contains("| a |"));
    }
}
