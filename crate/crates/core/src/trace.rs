//! Per-step training records and their CSV form.
//!
//! CSV layout (schema version 1), one row per record:
//!
//! ```text
//! schema_version,step,lower_loss,upper_loss,train_loss,test_loss,defect_0,...,defect_{n-1},lambdas
//! ```
//!
//! Floats use `{:.16e}` so every value parses back bit-exactly. Missing
//! lower/upper losses are empty fields. `lambdas` is empty or holds the
//! materialized singular values, adapters separated by `;` and values within
//! an adapter by spaces.

use thiserror::Error;

use crate::adapter::fmt_f64;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("record step {got} does not follow step {last}")]
    NonMonotoneStep { last: usize, got: usize },
    #[error("non-finite metric at step {0}")]
    NonFinite(usize),
    #[error("record has {got} defects, trace has {expected}")]
    DefectCount { expected: usize, got: usize },
    #[error("trace CSV parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub lower_loss: Option<f64>,
    pub upper_loss: Option<f64>,
    pub train_loss: f64,
    pub test_loss: f64,
    /// `||P^T P - I||_F + ||Q Q^T - I||_F` per adapter.
    pub defects: Vec<f64>,
    pub lambdas: Option<Vec<Vec<f64>>>,
}

impl TraceRecord {
    /// Test minus train loss.
    pub fn gap(&self) -> f64 {
        self.test_loss - self.train_loss
    }

    pub fn is_finite(&self) -> bool {
        let opt_ok = |x: Option<f64>| x.is_none_or(f64::is_finite);
        opt_ok(self.lower_loss)
            && opt_ok(self.upper_loss)
            && self.train_loss.is_finite()
            && self.test_loss.is_finite()
            && self.defects.iter().all(|d| d.is_finite())
            && self
                .lambdas
                .as_ref()
                .is_none_or(|l| l.iter().flatten().all(|x| x.is_finite()))
    }
}

/// Append-only list of records with strictly increasing step indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TraceRecord) -> Result<(), TraceError> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(TraceError::NonMonotoneStep {
                    last: last.step,
                    got: record.step,
                });
            }
            if record.defects.len() != last.defects.len() {
                return Err(TraceError::DefectCount {
                    expected: last.defects.len(),
                    got: record.defects.len(),
                });
            }
        }
        if !record.is_finite() {
            return Err(TraceError::NonFinite(record.step));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Record with the lowest test loss (earliest on ties).
    pub fn best_test(&self) -> Option<&TraceRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&TraceRecord>, r| match best {
                Some(b) if b.test_loss <= r.test_loss => Some(b),
                _ => Some(r),
            })
    }

    /// Most recent singular-value snapshot.
    pub fn last_lambdas(&self) -> Option<&Vec<Vec<f64>>> {
        self.records.iter().rev().find_map(|r| r.lambdas.as_ref())
    }

    pub fn to_csv(&self) -> String {
        let n_def = self.records.first().map_or(0, |r| r.defects.len());
        let mut out = String::from("schema_version,step,lower_loss,upper_loss,train_loss,test_loss");
        for k in 0..n_def {
            out.push_str(&format!(",defect_{k}"));
        }
        out.push_str(",lambdas\n");
        let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        for r in &self.records {
            let mut fields = vec![
                TRACE_SCHEMA_VERSION.to_string(),
                r.step.to_string(),
                opt(r.lower_loss),
                opt(r.upper_loss),
                fmt_f64(r.train_loss),
                fmt_f64(r.test_loss),
            ];
            fields.extend(r.defects.iter().map(|d| fmt_f64(*d)));
            fields.push(r.lambdas.as_ref().map_or_else(String::new, |ls| {
                ls.iter()
                    .map(|l| l.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" "))
                    .collect::<Vec<_>>()
                    .join(";")
            }));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TraceError> {
        let perr = |line: usize, message: String| TraceError::Parse { line, message };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let columns: Vec<&str> = header.split(',').collect();
        let fixed = ["schema_version", "step", "lower_loss", "upper_loss", "train_loss", "test_loss"];
        if columns.len() < fixed.len() + 1 || columns[..fixed.len()] != fixed || columns.last() != Some(&"lambdas") {
            return Err(perr(1, format!("unexpected header `{header}`")));
        }
        let n_def = columns.len() - fixed.len() - 1;
        let mut trace = RunTrace::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(perr(lineno, format!("expected {} fields, got {}", columns.len(), fields.len())));
            }
            let float = |s: &str| s.parse::<f64>().map_err(|e| perr(lineno, format!("bad float `{s}`: {e}")));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { float(s).map(Some) };
            if fields[0] != TRACE_SCHEMA_VERSION.to_string() {
                return Err(perr(lineno, format!("unsupported schema_version `{}`", fields[0])));
            }
            let step = fields[1]
                .parse::<usize>()
                .map_err(|e| perr(lineno, format!("bad step: {e}")))?;
            let defects = fields[6..6 + n_def].iter().map(|s| float(s)).collect::<Result<Vec<_>, _>>()?;
            let lam_field = fields[6 + n_def];
            let lambdas = if lam_field.is_empty() {
                None
            } else {
                Some(
                    lam_field
                        .split(';')
                        .map(|group| group.split(' ').map(float).collect::<Result<Vec<_>, _>>())
                        .collect::<Result<Vec<_>, _>>()?,
                )
            };
            trace.push(TraceRecord {
                step,
                lower_loss: opt(fields[2])?,
                upper_loss: opt(fields[3])?,
                train_loss: float(fields[4])?,
                test_loss: float(fields[5])?,
                defects,
                lambdas,
            })?;
        }
        Ok(trace)
    }
}
