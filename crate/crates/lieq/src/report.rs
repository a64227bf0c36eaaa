//! JSON documents and CSV tables written by the command-line driver.
//!
//! JSON output is canonical: object keys sorted, floats in shortest
//! round-trip form, two-space indentation and a trailing newline, so equal
//! inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use lieq_core::allocator::{compression_ratio_for, BitPlan, Partition};
use lieq_core::{EvalReport, LayerDiagnostics, ScoreWeights, SweepResult};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::UnsupportedFormat(other.into())),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

/// A serializable document with a fixed `kind` tag and optional CSV form.
pub trait Document: Serialize + DeserializeOwned {
    const KIND: &'static str;

    fn csv(&self) -> Option<String> {
        None
    }
}

pub fn to_json<D: Document>(doc: &D) -> Result<String> {
    let mut value = serde_json::to_value(doc).map_err(|e| Error::Internal(e.to_string()))?;
    let Value::Object(map) = &mut value else {
        return Err(Error::Internal(format!("{} does not serialize to an object", D::KIND)));
    };
    map.insert("kind".into(), D::KIND.into());
    map.insert("schema_version".into(), SCHEMA_VERSION.into());
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn from_json<D: Document>(text: &str) -> Result<D> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let Value::Object(map) = &mut value else {
        return Err(Error::Schema("expected a JSON object".into()));
    };
    match map.remove("kind") {
        Some(Value::String(k)) if k == D::KIND => {}
        other => return Err(Error::Schema(format!("expected kind {:?}, found {other:?}", D::KIND))),
    }
    match map.remove("schema_version") {
        Some(v) if v == SCHEMA_VERSION => {}
        other => return Err(Error::Schema(format!("expected schema_version {SCHEMA_VERSION}, found {other:?}"))),
    }
    serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))
}

pub fn render<D: Document>(doc: &D, format: Format) -> Result<String> {
    match format {
        Format::Json => to_json(doc),
        Format::Csv => doc.csv().ok_or_else(|| Error::UnsupportedFormat(format!("csv for {}", D::KIND))),
    }
}

pub fn emit_report<D: Document>(doc: &D, path: &Path, format: Format) -> Result<()> {
    container::write_file(path, render(doc, format)?.as_bytes())
}

pub fn read_document<D: Document>(path: &Path) -> Result<D> {
    let bytes = container::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    from_json(&text)
}

impl Document for EvalReport {
    const KIND: &'static str = "eval";

    fn csv(&self) -> Option<String> {
        let mut out = String::from("ppl_fp,ppl_quant,ppl_recovery,cr,avg_bits,whole_model_avg_bits,m,b_hi,b_lo,group_size\n");
        let p = &self.plan;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            self.ppl_fp,
            self.ppl_quant,
            self.ppl_recovery,
            self.cr,
            self.avg_bits,
            self.whole_model_avg_bits,
            p.m,
            p.b_hi,
            p.b_lo,
            p.group_size
        )
        .ok()?;
        Some(out)
    }
}

impl Document for SweepResult {
    const KIND: &'static str = "sweep";

    fn csv(&self) -> Option<String> {
        let mut out = String::from("m,avg_bits,ppl_quant\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.m, p.avg_bits, p.ppl_quant).ok()?;
        }
        Some(out)
    }
}

/// Per-bucket diagnostics as written by `diagnose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub buckets: Vec<LayerDiagnostics>,
}

impl Document for DiagnosticsFile {
    const KIND: &'static str = "diagnostics";
}

impl DiagnosticsFile {
    /// Checksum of the model the diagnostics were computed on; every bucket
    /// must agree.
    pub fn model_checksum(&self) -> Result<u32> {
        let first = self.buckets.first().ok_or_else(|| Error::Schema("no buckets".into()))?;
        let sum = first.provenance.model_checksum;
        if self.buckets.iter().any(|b| b.provenance.model_checksum != sum) {
            return Err(Error::Schema("buckets disagree on the model checksum".into()));
        }
        Ok(sum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLayer {
    pub index: usize,
    pub score: f64,
    pub bits: u8,
}

/// Bit plan as written by `allocate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub model_checksum: u32,
    pub weights: ScoreWeights,
    pub m: usize,
    pub b_hi: u8,
    pub b_lo: u8,
    pub layers: Vec<PlanLayer>,
    /// Scoped compression ratio; decoder layers all have the same size.
    pub cr: f64,
    pub avg_bits: f64,
}

impl Document for PlanFile {
    const KIND: &'static str = "plan";
}

impl PlanFile {
    pub fn new(plan: &BitPlan, model_checksum: u32, weights: ScoreWeights) -> Result<Self> {
        let report = compression_ratio_for(plan, &vec![1; plan.n_layers()], 0)?;
        Ok(Self {
            model_checksum,
            weights,
            m: plan.m,
            b_hi: plan.b_hi,
            b_lo: plan.b_lo,
            layers: plan
                .bits
                .iter()
                .zip(&plan.scores)
                .enumerate()
                .map(|(index, (&bits, &score))| PlanLayer { index, score, bits })
                .collect(),
            cr: report.cr,
            avg_bits: report.avg_bits,
        })
    }

    pub fn to_plan(&self) -> Result<BitPlan> {
        let mut partition = Partition { s_hi: Vec::new(), s_lo: Vec::new() };
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.index != i {
                return Err(Error::Schema(format!("layer entry {i} has index {}", layer.index)));
            }
            match layer.bits {
                b if b == self.b_hi => partition.s_hi.push(i),
                b if b == self.b_lo => partition.s_lo.push(i),
                b => return Err(Error::Schema(format!("layer {i} has {b} bits, expected {} or {}", self.b_hi, self.b_lo))),
            }
        }
        if partition.s_hi.len() != self.m {
            return Err(Error::Schema(format!("m is {} but {} layers are high precision", self.m, partition.s_hi.len())));
        }
        let scores: Vec<f64> = self.layers.iter().map(|l| l.score).collect();
        Ok(lieq_core::allocator::assign_bits(&partition, &scores, self.b_hi, self.b_lo)?)
    }
}
