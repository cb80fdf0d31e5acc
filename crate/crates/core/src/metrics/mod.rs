//! Segmentation and classification scores and their JSON report.

pub mod cls;
pub mod seg;

pub use cls::{cls_metrics, ClsMetrics};
pub use seg::{seg_metrics, SegAccumulator, SegMetrics};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Everything an evaluation run reports; the classification block is absent
/// for segmentation-only runs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub seg: SegMetrics,
    pub cls: Option<ClsMetrics>,
}

fn num(v: f64) -> Result<String> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!("cannot report non-finite value {v}")));
    }
    Ok(format!("{v:.16e}"))
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        let s = &self.seg;
        let mut out = String::from("{\n  \"segmentation\": {\n");
        for (k, v) in [
            ("miou", s.miou),
            ("dice", s.dice),
            ("tversky", s.tversky),
            ("bf1", s.bf1),
            ("hausdorff_px", s.hausdorff_px),
            ("cle_px", s.cle_px),
        ] {
            let _ = writeln!(out, "    \"{k}\": {},", num(v)?);
        }
        let _ = write!(out, "    \"frames\": {}\n  }}", s.frames);
        if let Some(c) = &self.cls {
            out.push_str(",\n  \"classification\": {\n");
            for (k, v) in [
                ("acc", c.acc),
                ("bacc", c.bacc),
                ("macro_f1", c.macro_f1),
                ("kappa", c.kappa),
                ("gini", c.gini),
            ] {
                let _ = writeln!(out, "    \"{k}\": {},", num(v)?);
            }
            let _ = write!(out, "    \"clips\": {}\n  }}", c.clips);
        }
        out.push_str("\n}\n");
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("report is not valid JSON: {e}")))?;
        let f = |block: &serde_json::Value, k: &str| {
            block
                .get(k)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::Data(format!("report lacks numeric key {k}")))
        };
        let n = |block: &serde_json::Value, k: &str| {
            block
                .get(k)
                .and_then(serde_json::Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| Error::Data(format!("report lacks count {k}")))
        };
        let s = v
            .get("segmentation")
            .ok_or_else(|| Error::Data("report lacks a segmentation block".into()))?;
        let seg = SegMetrics {
            miou: f(s, "miou")?,
            dice: f(s, "dice")?,
            tversky: f(s, "tversky")?,
            bf1: f(s, "bf1")?,
            hausdorff_px: f(s, "hausdorff_px")?,
            cle_px: f(s, "cle_px")?,
            frames: n(s, "frames")?,
        };
        let cls = match v.get("classification") {
            None => None,
            Some(c) => Some(ClsMetrics {
                acc: f(c, "acc")?,
                bacc: f(c, "bacc")?,
                macro_f1: f(c, "macro_f1")?,
                kappa: f(c, "kappa")?,
                gini: f(c, "gini")?,
                clips: n(c, "clips")?,
            }),
        };
        Ok(Self { seg, cls })
    }
}

pub fn write_report(report: &MetricReport, path: &Path) -> Result<()> {
    let text = report.to_json()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricReport::from_json(&text)
}
