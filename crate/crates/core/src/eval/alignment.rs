//! Embedding-similarity scores of edited images against the hint and the
//! source image.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::foundry::{cosine, EmbeddingClient};
use crate::sample::read_jsonl;

/// One edited result. Exactly one of `edited` and `embedding` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub source: String,
    pub hint: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl ResultRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.method.trim().is_empty() {
            return Err("method name is empty".into());
        }
        match (&self.edited, &self.embedding) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            (Some(_), Some(_)) => Err("both edited and embedding are set".into()),
            (None, None) => Err("neither edited nor embedding is set".into()),
        }
    }
}

pub fn parse_results<R: BufRead>(r: R) -> Result<Vec<ResultRecord>, EvalError> {
    let records: Vec<ResultRecord> = read_jsonl(r).map_err(|reason| EvalError::InvalidRecord { index: 0, reason })?;
    for (index, rec) in records.iter().enumerate() {
        rec.validate().map_err(|reason| EvalError::InvalidRecord { index, reason })?;
    }
    Ok(records)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, EvalError> {
    parse_results(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodAlignment {
    pub method: String,
    /// Mean cosine of the edited result with the hint text.
    pub hint_score: Option<f64>,
    /// Mean cosine of the edited result with the source image.
    pub image_score: Option<f64>,
    pub used: usize,
    pub total: usize,
}

impl MethodAlignment {
    pub fn coverage(&self) -> f64 {
        self.used as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    /// Methods in order of first appearance.
    pub methods: Vec<MethodAlignment>,
    pub skipped: Vec<(usize, String)>,
}

fn record_cosines(rec: &ResultRecord, client: &dyn EmbeddingClient) -> Result<(f64, f64), String> {
    let edited = match (&rec.edited, &rec.embedding) {
        (_, Some(v)) => v.clone(),
        (Some(r), None) => client.embed_image(r).map_err(|e| e.to_string())?,
        (None, None) => return Err("no edited result".into()),
    };
    let hint = client.embed_text(&rec.hint).map_err(|e| e.to_string())?;
    let source = client.embed_image(&rec.source).map_err(|e| e.to_string())?;
    let (h, s) = (cosine(&edited, &hint), cosine(&edited, &source));
    if !(h.is_finite() && s.is_finite()) {
        return Err("embedding has no direction".into());
    }
    Ok((h, s))
}

/// Per-method mean similarities. Records whose embeddings cannot be obtained
/// are skipped and reported, and coverage is kept per method.
pub fn alignment_scores(records: &[ResultRecord], client: &dyn EmbeddingClient) -> Result<AlignmentReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut methods: Vec<(MethodAlignment, f64, f64)> = Vec::new();
    let mut skipped = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        rec.validate().map_err(|reason| EvalError::InvalidRecord { index: i, reason })?;
        let pos = match methods.iter().position(|(m, _, _)| m.method == rec.method) {
            Some(p) => p,
            None => {
                methods.push((
                    MethodAlignment {
                        method: rec.method.clone(),
                        hint_score: None,
                        image_score: None,
                        used: 0,
                        total: 0,
                    },
                    0.0,
                    0.0,
                ));
                methods.len() - 1
            }
        };
        let entry = &mut methods[pos];
        entry.0.total += 1;
        match record_cosines(rec, client) {
            Ok((h, s)) => {
                entry.0.used += 1;
                entry.1 += h;
                entry.2 += s;
            }
            Err(reason) => skipped.push((i, reason)),
        }
    }
    let methods = methods
        .into_iter()
        .map(|(mut m, h, s)| {
            if m.used > 0 {
                m.hint_score = Some(h / m.used as f64);
                m.image_score = Some(s / m.used as f64);
            }
            m
        })
        .collect();
    Ok(AlignmentReport { methods, skipped })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

/// Methods as columns, rows `Hint` and `Image`.
pub fn format_alignment_table(report: &AlignmentReport) -> String {
    let width = report.methods.iter().map(|m| m.method.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<6}", "");
    for m in &report.methods {
        write!(out, " | {:>width$}", m.method).unwrap();
    }
    out.push('\n');
    for (label, pick) in [
        ("Hint", (|m: &MethodAlignment| m.hint_score) as fn(&MethodAlignment) -> Option<f64>),
        ("Image", |m: &MethodAlignment| m.image_score),
    ] {
        write!(out, "{label:<6}").unwrap();
        for m in &report.methods {
            write!(out, " | {:>width$}", cell(pick(m))).unwrap();
        }
        out.push('\n');
    }
    out
}

/// `method,hint_score,image_score,used,total` with an empty cell for a
/// method that has no usable record.
pub fn alignment_csv(report: &AlignmentReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("method,hint_score,image_score,used,total\n");
    for m in &report.methods {
        writeln!(out, "{},{},{},{},{}", m.method, opt(m.hint_score), opt(m.image_score), m.used, m.total).unwrap();
    }
    out
}
