//! Binned final singular values across trace files.

use crate::adapter::fmt_f64;
use crate::trace::RunTrace;

pub const BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSum {
    pub trace: String,
    pub adapter: usize,
    pub count: usize,
    pub sum: f64,
    pub min: f64,
    pub max: f64,
}

/// 20 equal-width bins over `[min, max]` of the pooled values. When every
/// value is equal all of them land in bin 0, whose edges are both that value.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramTable {
    pub min: f64,
    pub max: f64,
    pub counts: [usize; BINS],
    pub sums: Vec<AdapterSum>,
}

impl HistogramTable {
    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.max - self.min) / BINS as f64;
        if w == 0.0 {
            return (self.min, self.max);
        }
        let hi = if bin + 1 == BINS { self.max } else { self.min + w * (bin + 1) as f64 };
        (self.min + w * bin as f64, hi)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.edges(b);
            out.push_str(&format!("{b},{},{},{c}\n", fmt_f64(lo), fmt_f64(hi)));
        }
        out
    }

    pub fn sums_csv(&self) -> String {
        let mut out = String::from("trace,adapter,count,sum,min,max\n");
        for s in &self.sums {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.trace,
                s.adapter,
                s.count,
                fmt_f64(s.sum),
                fmt_f64(s.min),
                fmt_f64(s.max)
            ));
        }
        out
    }
}

/// Uses the last snapshot of every trace; errors when a trace has none.
pub fn lambda_histogram(traces: &[(String, RunTrace)]) -> Result<HistogramTable, String> {
    if traces.is_empty() {
        return Err("no trace files given".into());
    }
    let mut all = Vec::new();
    let mut sums = Vec::new();
    for (name, trace) in traces {
        let lambdas = trace
            .last_lambdas()
            .ok_or_else(|| format!("{name}: trace has no singular-value snapshots"))?;
        for (k, l) in lambdas.iter().enumerate() {
            sums.push(AdapterSum {
                trace: name.clone(),
                adapter: k,
                count: l.len(),
                sum: l.iter().sum(),
                min: l.iter().copied().fold(f64::INFINITY, f64::min),
                max: l.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
            all.extend_from_slice(l);
        }
    }
    if all.is_empty() {
        return Err("snapshots hold no values".into());
    }
    let min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = [0usize; BINS];
    let w = (max - min) / BINS as f64;
    for x in all {
        let b = if w == 0.0 { 0 } else { (((x - min) / w) as usize).min(BINS - 1) };
        counts[b] += 1;
    }
    Ok(HistogramTable { min, max, counts, sums })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceRecord;

    fn trace(lambdas: Option<Vec<Vec<f64>>>) -> RunTrace {
        let mut t = RunTrace::new();
        t.push(TraceRecord {
            step: 0,
            lower_loss: None,
            upper_loss: None,
            train_loss: 1.0,
            test_loss: 1.0,
            defects: vec![0.0],
            lambdas,
        })
        .unwrap();
        t
    }

    #[test]
    fn spike_for_constant_values() {
        let t = lambda_histogram(&[("a".into(), trace(Some(vec![vec![0.25; 4]])))]).unwrap();
        assert_eq!(t.counts[0], 4);
        assert_eq!(t.total(), 4);
        assert_eq!(t.edges(0), (0.25, 0.25));
        assert_eq!(t.sums[0].sum, 1.0);
    }

    #[test]
    fn endpoints_fall_in_first_and_last_bins() {
        let t = lambda_histogram(&[("a".into(), trace(Some(vec![vec![0.0, 0.5], vec![1.0, 0.97]])))]).unwrap();
        assert_eq!(t.counts[0], 1);
        assert_eq!(t.counts[10], 1);
        assert_eq!(t.counts[19], 2);
        assert_eq!(t.edges(19).1, 1.0);
        assert_eq!(t.sums.len(), 2);
    }

    #[test]
    fn missing_snapshots_is_an_error() {
        assert!(lambda_histogram(&[("a".into(), trace(None))]).is_err());
        assert!(lambda_histogram(&[]).is_err());
    }
}
