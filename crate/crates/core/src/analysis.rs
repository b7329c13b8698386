//! Entropy and top-p overlap diagnostics, and per-trace summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{GenerationTrace, LogProbs};
use crate::vocab::TokenId;

/// Nucleus mass used for the overlap diagnostics.
pub const DIAGNOSTIC_TOP_P: f64 = 0.9;

pub const CSV_HEADER: &str =
    "step,token,guided_logprob,H_cond,H_uncond,H_guided,ovl_cond,ovl_uncond";

const MASS_TOLERANCE: f64 = 1e-6;
// Cumulative sums are compared against p with this slack so that exact
// fractions such as 0.25 + 0.25 >= 0.5 hold after exp/ln round trips.
const CUMSUM_SLACK: f64 = 1e-12;

/// Shannon entropy in nats; `0 * ln 0` counts as 0.
pub fn entropy(dist: &LogProbs) -> Result<f64> {
    let mass: f64 = dist.as_slice().iter().map(|v| v.exp()).sum();
    if mass.is_nan() || (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::NotNormalized(mass));
    }
    let h: f64 = dist
        .as_slice()
        .iter()
        .filter(|v| v.is_finite())
        .map(|&v| -v.exp() * v)
        .sum();
    Ok(h.max(0.0))
}

/// Tokens sorted by probability (descending, ties by ascending id), cut at
/// the shortest prefix whose mass reaches `p`. Zero-probability tokens are
/// never included; `p >= 1` keeps every token with nonzero probability.
pub fn top_p_set(dist: &LogProbs, p: f64) -> Vec<TokenId> {
    let values = dist.as_slice();
    let mut order: Vec<usize> = (0..values.len())
        .filter(|&i| values[i] > f64::NEG_INFINITY)
        .collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    if p >= 1.0 {
        return order.into_iter().map(|i| i as TokenId).collect();
    }
    let mut out = Vec::new();
    let mut cumulative = 0.0;
    for i in order {
        out.push(i as TokenId);
        cumulative += values[i].exp();
        if cumulative >= p - CUMSUM_SLACK {
            break;
        }
    }
    out
}

pub fn top_p_overlap(a: &LogProbs, b: &LogProbs, p: f64) -> usize {
    let left = top_p_set(a, p);
    let mut in_right = vec![false; b.len().max(a.len())];
    for t in top_p_set(b, p) {
        in_right[t as usize] = true;
    }
    left.into_iter().filter(|&t| in_right[t as usize]).count()
}

/// One line of the trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub token: TokenId,
    pub guided_logprob: f64,
    pub h_cond: f64,
    pub h_uncond: f64,
    pub h_guided: f64,
    pub ovl_cond: f64,
    pub ovl_uncond: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntropyUnit {
    #[default]
    Nats,
    Bits,
}

impl EntropyUnit {
    fn scale(self) -> f64 {
        match self {
            EntropyUnit::Nats => 1.0,
            EntropyUnit::Bits => std::f64::consts::LN_2.recip(),
        }
    }
}

/// Means are pooled over tokens: every step of every summarized trace
/// weighs the same.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub rows: Vec<TraceRow>,
    pub steps: usize,
    pub mean_guided_logprob: f64,
    pub mean_entropy_cond: f64,
    pub mean_entropy_uncond: f64,
    pub mean_entropy_guided: f64,
    pub median_entropy_cond: f64,
    pub median_entropy_uncond: f64,
    pub median_entropy_guided: f64,
    pub mean_overlap_cond: f64,
    pub mean_overlap_uncond: f64,
    pub averaging: String,
}

pub fn trace_rows(trace: &GenerationTrace) -> Vec<TraceRow> {
    trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| TraceRow {
            step: i,
            token: s.token,
            guided_logprob: s.guided_logprob,
            h_cond: s.entropy_cond,
            h_uncond: s.entropy_uncond,
            h_guided: s.entropy_guided,
            ovl_cond: s.overlap_cond as f64,
            ovl_uncond: s.overlap_uncond as f64,
        })
        .collect()
}

/// Rows with overlaps recomputed at nucleus mass `p`. Needs a trace that
/// kept its per-step distributions.
pub fn trace_rows_at(trace: &GenerationTrace, p: f64) -> Result<Vec<TraceRow>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgs(format!("p must be in (0, 1], got {p}")));
    }
    let mut rows = trace_rows(trace);
    for (row, s) in rows.iter_mut().zip(&trace.steps) {
        let d = s.distributions.as_ref().ok_or_else(|| {
            Error::InvalidArgs(
                "trace has no stored distributions; overlaps cannot be recomputed".into(),
            )
        })?;
        row.ovl_cond = top_p_overlap(&d.guided, &d.cond, p) as f64;
        row.ovl_uncond = top_p_overlap(&d.guided, &d.uncond, p) as f64;
    }
    Ok(rows)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn summarize_rows(rows: Vec<TraceRow>) -> Result<TraceSummary> {
    if rows.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let col = |f: fn(&TraceRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    Ok(TraceSummary {
        steps: rows.len(),
        mean_guided_logprob: mean(rows.iter().map(|r| r.guided_logprob)),
        mean_entropy_cond: mean(rows.iter().map(|r| r.h_cond)),
        mean_entropy_uncond: mean(rows.iter().map(|r| r.h_uncond)),
        mean_entropy_guided: mean(rows.iter().map(|r| r.h_guided)),
        median_entropy_cond: median(col(|r| r.h_cond)),
        median_entropy_uncond: median(col(|r| r.h_uncond)),
        median_entropy_guided: median(col(|r| r.h_guided)),
        mean_overlap_cond: mean(rows.iter().map(|r| r.ovl_cond)),
        mean_overlap_uncond: mean(rows.iter().map(|r| r.ovl_uncond)),
        averaging: "per-token pooled mean".into(),
        rows,
    })
}

pub fn trace_summary(trace: &GenerationTrace) -> Result<TraceSummary> {
    summarize_rows(trace_rows(trace))
}

impl TraceSummary {
    /// Header, one row per step, then a `mean` row. Entropies are converted
    /// to `unit`.
    pub fn to_csv(&self, unit: EntropyUnit) -> String {
        let k = unit.scale();
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.token,
                r.guided_logprob,
                r.h_cond * k,
                r.h_uncond * k,
                r.h_guided * k,
                r.ovl_cond,
                r.ovl_uncond
            );
        }
        let _ = writeln!(
            out,
            "mean,,{},{},{},{},{},{}",
            self.mean_guided_logprob,
            self.mean_entropy_cond * k,
            self.mean_entropy_uncond * k,
            self.mean_entropy_guided * k,
            self.mean_overlap_cond,
            self.mean_overlap_uncond
        );
        out
    }
}

/// Reads rows back from [`TraceSummary::to_csv`] output (the `mean` row is
/// skipped). Values are taken as written, in whatever unit they were saved.
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::MalformedCsv {
                line: 1,
                reason: format!("expected header {CSV_HEADER:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with("mean,") {
            continue;
        }
        let bad = |reason: String| Error::MalformedCsv {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", fields.len())));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("field {}: {e}", j + 1)))
        };
        rows.push(TraceRow {
            step: fields[0]
                .trim()
                .parse()
                .map_err(|e| bad(format!("step: {e}")))?,
            token: fields[1]
                .trim()
                .parse()
                .map_err(|e| bad(format!("token: {e}")))?,
            guided_logprob: num(2)?,
            h_cond: num(3)?,
            h_uncond: num(4)?,
            h_guided: num(5)?,
            ovl_cond: num(6)?,
            ovl_uncond: num(7)?,
        });
    }
    Ok(rows)
}
