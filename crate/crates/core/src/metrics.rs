//! Edit-distance error rates, WER recovery rate and table-style reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

impl ErrorBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Error rate in percent; `None` when the reference is empty.
    pub fn rate(&self) -> Option<f64> {
        (self.reference_length > 0).then(|| 100.0 * self.errors() as f64 / self.reference_length as f64)
    }
}

impl std::ops::Add for ErrorBreakdown {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            reference_length: self.reference_length + o.reference_length,
        }
    }
}

impl std::iter::Sum for ErrorBreakdown {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Unit-cost Levenshtein alignment. When several alignments reach the minimum
/// cost the backtrace prefers a substitution over an insertion/deletion pair.
pub fn edit_distance_breakdown<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> ErrorBreakdown {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, c) in cost[0].iter_mut().enumerate() {
        *c = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cost[i][j] = sub.min(cost[i - 1][j] + 1).min(cost[i][j - 1] + 1);
        }
    }

    let mut out = ErrorBreakdown { reference_length: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if cost[i][j] == cost[i - 1][j - 1] + usize::from(!same) {
                if !same {
                    out.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// Corpus-level word error rate in percent.
pub fn word_error_rate<T: PartialEq>(pairs: &[(&[T], &[T])]) -> f64 {
    let total: ErrorBreakdown = pairs.iter().map(|(r, h)| edit_distance_breakdown(r, h)).sum();
    total.rate().unwrap_or(0.0)
}

/// Token error rate. The synthetic task has no sub-token level, so this is the
/// same computation as [`word_error_rate`] over token ids.
pub fn token_error_rate(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> f64 {
    let total: ErrorBreakdown = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| edit_distance_breakdown(r, h))
        .sum();
    total.rate().unwrap_or(0.0)
}

/// WER recovery rate in percent: 0 at the seed, 100 at the topline.
/// Negative when the model is worse than the seed; never clipped.
pub fn wrr(wer_model: f64, wer_seed: f64, wer_topline: f64) -> Option<f64> {
    let gap = wer_seed - wer_topline;
    (gap != 0.0).then(|| 100.0 * (wer_seed - wer_model) / gap)
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub init: String,
    pub dev_wer: Option<f64>,
    pub test_wer: Option<f64>,
    pub test_wrr: Option<f64>,
    pub dev_wer_lm: Option<f64>,
    pub test_wer_lm: Option<f64>,
    pub test_wrr_lm: Option<f64>,
}

impl ReportRow {
    pub fn new(method: impl Into<String>, init: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            init: init.into(),
            dev_wer: None,
            test_wer: None,
            test_wrr: None,
            dev_wer_lm: None,
            test_wer_lm: None,
            test_wrr_lm: None,
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "--".to_string(), |v| format!("{v:.1}"))
}

/// Fixed-width table: method, init, then dev/test WER and test WRR without
/// and with LM decoding.
pub fn render_report(title: &str, rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {title}");
    let _ = writeln!(
        s,
        "{:<16} {:<12} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
        "method", "init", "dev", "test", "wrr", "dev+lm", "test+lm", "wrr+lm"
    );
    let _ = writeln!(s, "{}", "-".repeat(16 + 1 + 12 + 3 + 3 * 9 + 2 + 3 * 9));
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:<12} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
            r.method,
            r.init,
            cell(r.dev_wer),
            cell(r.test_wer),
            cell(r.test_wrr),
            cell(r.dev_wer_lm),
            cell(r.test_wer_lm),
            cell(r.test_wrr_lm)
        );
    }
    s
}
