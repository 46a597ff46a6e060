//! Trace export and run metrics.
//!
//! `trace.csv` holds one row per tick with columns
//!
//! ```text
//! t, q0.., w, w_hat, h1_min..h5_min, h6, v_ref0.., v_star0.., deviation,
//! event, iters, tracked, visible, fallback
//! ```
//!
//! Floats are written in scientific notation with 17 significant digits, so
//! reading the file back gives the exact doubles. Families absent from a
//! tick (for instance `h6` with collision avoidance off) are written as
//! `NaN`. Metrics are computed from these rows only, which makes them
//! reproducible from the CSV alone.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::EPS_NUM;
use crate::filter::Fallback;
use crate::sim::{Trace, TraceRecord};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("row {row}, column {column}: cannot parse {value:?}")]
    Field { row: usize, column: String, value: String },
    #[error("empty trace")]
    Empty,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub q: Vec<f64>,
    pub w: f64,
    pub w_hat: f64,
    /// Family minima `h1..h6`, `NaN` when the family has no rows.
    pub h: [f64; 6],
    pub v_ref: Vec<f64>,
    pub v_star: Vec<f64>,
    pub deviation: f64,
    pub event: bool,
    pub iters: usize,
    pub tracked: usize,
    pub visible: usize,
    pub fallback: Fallback,
}

impl From<&TraceRecord> for TraceRow {
    fn from(r: &TraceRecord) -> Self {
        let mut h = [f64::NAN; 6];
        for (slot, m) in h.iter_mut().zip(r.family_min.iter()) {
            if let Some(v) = m {
                *slot = *v;
            }
        }
        Self {
            t: r.t,
            q: r.q.iter().copied().collect(),
            w: r.w,
            w_hat: r.w_hat,
            h,
            v_ref: r.v_ref.iter().copied().collect(),
            v_star: r.v_star.iter().copied().collect(),
            deviation: r.deviation,
            event: r.event,
            iters: r.iterations,
            tracked: r.tracked,
            visible: r.visible,
            fallback: r.fallback,
        }
    }
}

pub fn fallback_label(f: Fallback) -> String {
    match f {
        Fallback::None => "none".into(),
        Fallback::Scaled(k) => format!("scaled{k}"),
        Fallback::Stop => "stop".into(),
    }
}

pub fn parse_fallback(s: &str) -> Option<Fallback> {
    match s {
        "none" => Some(Fallback::None),
        "stop" => Some(Fallback::Stop),
        _ => s.strip_prefix("scaled")?.parse().ok().map(Fallback::Scaled),
    }
}

const H_COLUMNS: [&str; 6] = ["h1_min", "h2_min", "h3_min", "h4_min", "h5_min", "h6"];
const TAIL_COLUMNS: [&str; 6] = ["deviation", "event", "iters", "tracked", "visible", "fallback"];

fn header(n_q: usize, n_v: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n_q).map(|i| format!("q{i}")));
    cols.push("w".into());
    cols.push("w_hat".into());
    cols.extend(H_COLUMNS.iter().map(|s| s.to_string()));
    cols.extend((0..n_v).map(|i| format!("v_ref{i}")));
    cols.extend((0..n_v).map(|i| format!("v_star{i}")));
    cols.extend(TAIL_COLUMNS.iter().map(|s| s.to_string()));
    cols
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `rows` as CSV.
pub fn write_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<(), TraceError> {
    let first = rows.first().ok_or(TraceError::Empty)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(first.q.len(), first.v_ref.len()))?;
    for r in rows {
        let mut rec = vec![num(r.t)];
        rec.extend(r.q.iter().map(|&x| num(x)));
        rec.push(num(r.w));
        rec.push(num(r.w_hat));
        rec.extend(r.h.iter().map(|&x| num(x)));
        rec.extend(r.v_ref.iter().map(|&x| num(x)));
        rec.extend(r.v_star.iter().map(|&x| num(x)));
        rec.push(num(r.deviation));
        rec.push(u8::from(r.event).to_string());
        rec.push(r.iters.to_string());
        rec.push(r.tracked.to_string());
        rec.push(r.visible.to_string());
        rec.push(fallback_label(r.fallback));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV text of a whole trace.
pub fn trace_csv(trace: &Trace) -> Result<String, TraceError> {
    let rows: Vec<TraceRow> = trace.records.iter().map(TraceRow::from).collect();
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is ASCII"))
}

/// Reads rows written by [`write_csv`].
pub fn read_csv<R: Read>(input: R) -> Result<Vec<TraceRow>, TraceError> {
    let mut rdr = csv::Reader::from_reader(input);
    let head: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let n_q = head.iter().filter(|c| c.starts_with('q')).count();
    let n_v = head.iter().filter(|c| c.starts_with("v_ref")).count();
    if head != header(n_q, n_v) {
        return Err(TraceError::Header(head.join(",")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| -> Result<f64, TraceError> {
            rec[c].parse().map_err(|_| TraceError::Field { row: i, column: head[c].clone(), value: rec[c].to_string() })
        };
        let count = |c: usize| -> Result<usize, TraceError> {
            rec[c].parse().map_err(|_| TraceError::Field { row: i, column: head[c].clone(), value: rec[c].to_string() })
        };
        let mut c = 0;
        let mut take = |k: usize| {
            let start = c;
            c += k;
            start..c
        };
        let t = field(take(1).start)?;
        let q = take(n_q).map(field).collect::<Result<Vec<_>, _>>()?;
        let w = field(take(1).start)?;
        let w_hat = field(take(1).start)?;
        let mut h = [0.0; 6];
        for (slot, col) in h.iter_mut().zip(take(6)) {
            *slot = field(col)?;
        }
        let v_ref = take(n_v).map(field).collect::<Result<Vec<_>, _>>()?;
        let v_star = take(n_v).map(field).collect::<Result<Vec<_>, _>>()?;
        let deviation = field(take(1).start)?;
        let event = count(take(1).start)? != 0;
        let iters = count(take(1).start)?;
        let tracked = count(take(1).start)?;
        let visible = count(take(1).start)?;
        let fc = take(1).start;
        let fallback = parse_fallback(&rec[fc])
            .ok_or_else(|| TraceError::Field { row: i, column: head[fc].clone(), value: rec[fc].to_string() })?;
        rows.push(TraceRow { t, q, w, w_hat, h, v_ref, v_star, deviation, event, iters, tracked, visible, fallback });
    }
    Ok(rows)
}

/// Per-family minima over a run; `None` for families that never had rows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FamilyMinima {
    pub h1: Option<f64>,
    pub h2: Option<f64>,
    pub h3: Option<f64>,
    pub h4: Option<f64>,
    pub h5: Option<f64>,
    pub h6: Option<f64>,
}

impl FamilyMinima {
    pub fn as_array(&self) -> [Option<f64>; 6] {
        [self.h1, self.h2, self.h3, self.h4, self.h5, self.h6]
    }

    /// Smallest value over all families, `None` if every family is empty.
    pub fn overall(&self) -> Option<f64> {
        self.as_array().iter().flatten().copied().reduce(f64::min)
    }
}

/// Summary of a run, the content of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ticks: usize,
    pub duration: f64,
    pub min_w: f64,
    pub mean_w: f64,
    pub min_w_hat: f64,
    pub mean_w_hat: f64,
    pub min_visible: usize,
    pub min_tracked: usize,
    pub h_min: FamilyMinima,
    /// `Σ (v* − v_ref)ᵀ R_q (v* − v_ref) Δt` as a left Riemann sum.
    pub total_deviation: f64,
    /// Ticks with some row below `−1e−6`.
    pub breaches: usize,
    pub events: usize,
    /// Ticks whose input came from the line search or the stopping input.
    pub fallbacks: usize,
}

impl Metrics {
    pub fn from_rows(rows: &[TraceRow]) -> Result<Self, TraceError> {
        let first = rows.first().ok_or(TraceError::Empty)?;
        let n = rows.len() as f64;
        let mut mins = [None::<f64>; 6];
        for r in rows {
            for (m, &v) in mins.iter_mut().zip(r.h.iter()) {
                if !v.is_nan() {
                    *m = Some(m.map_or(v, |x| x.min(v)));
                }
            }
        }
        let total_deviation = rows.windows(2).map(|p| p[0].deviation * (p[1].t - p[0].t)).sum();
        Ok(Self {
            ticks: rows.len(),
            duration: rows[rows.len() - 1].t - first.t,
            min_w: rows.iter().map(|r| r.w).fold(f64::INFINITY, f64::min),
            mean_w: rows.iter().map(|r| r.w).sum::<f64>() / n,
            min_w_hat: rows.iter().map(|r| r.w_hat).fold(f64::INFINITY, f64::min),
            mean_w_hat: rows.iter().map(|r| r.w_hat).sum::<f64>() / n,
            min_visible: rows.iter().map(|r| r.visible).min().unwrap_or(0),
            min_tracked: rows.iter().map(|r| r.tracked).min().unwrap_or(0),
            h_min: FamilyMinima { h1: mins[0], h2: mins[1], h3: mins[2], h4: mins[3], h5: mins[4], h6: mins[5] },
            total_deviation,
            breaches: rows.iter().filter(|r| r.h.iter().any(|&v| v < -EPS_NUM)).count(),
            events: rows.iter().filter(|r| r.event).count(),
            fallbacks: rows.iter().filter(|r| r.fallback != Fallback::None).count(),
        })
    }

    pub fn from_trace(trace: &Trace) -> Result<Self, TraceError> {
        let rows: Vec<TraceRow> = trace.records.iter().map(TraceRow::from).collect();
        Self::from_rows(&rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}
