//! Annotation handling, chronological dataset splitting, buffered-overlap
//! matching of detections against annotations, and metric computation
//! (recall, precision, false-positive rate, F1), including SNR-filtered
//! variants.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::detector::DetectionEvent;
use crate::error::{Error, Result};
use crate::signal::Spectrogram;

/// An annotated call interval on a source recording's timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub source_id: String,
    pub t_start: f64,
    pub t_end: f64,
    /// Estimated SNR in dB, when available.
    pub snr: Option<f64>,
}

/// A 3-s spectrogram with its binary label and provenance.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    /// 94x129 dB spectrogram.
    pub spectrogram: Spectrogram,
    /// True for samples containing a call.
    pub label: bool,
    /// Sample timestamp on the source timeline, seconds.
    pub timestamp: f64,
    /// Nominal or estimated SNR in dB, when known.
    pub snr: Option<f64>,
    pub source_id: String,
}

/// Outcome counts of matching events against annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchCounts {
    /// Annotations covered (>= 50% of their duration) by buffered events.
    pub tp_ann: usize,
    /// Annotations not covered.
    pub missed: usize,
    /// Events whose core is covered (>= 50%) by annotations.
    pub tp_evt: usize,
    /// Events counted as false positives.
    pub fp: usize,
}

/// Detection quality metrics. Ratios are absent (`None`) when their
/// denominator is zero: no annotations means recall is undefined, no
/// events means precision is undefined, and F1 requires both.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    /// False positives per hour.
    pub fpr: f64,
    pub tp_ann: usize,
    pub tp_evt: usize,
    pub fp: usize,
    /// False negatives (written as "fn" in CSV output).
    pub missed: usize,
    pub duration_h: f64,
}

/// Result of a chronological train/test split.
#[derive(Debug, Clone)]
pub struct TimeSplit {
    /// Indices of samples strictly before the split time.
    pub train_idx: Vec<usize>,
    /// Indices of the remaining samples.
    pub test_idx: Vec<usize>,
    /// Split time: no test sample is earlier than this.
    pub t0: f64,
    /// Seconds between the latest train sample and the earliest test sample.
    pub gap: f64,
}

/// Chronological split: the smallest timestamp `t0` such that the
/// fraction of samples strictly before it is at least `ratio` separates
/// train (`t < t0`) from test. When no timestamp reaches the ratio the
/// largest timestamp is used, keeping the test set non-empty.
pub fn time_split(samples: &[LabeledSample], ratio: f64) -> Result<TimeSplit> {
    let mut times: Vec<f64> = samples.iter().map(|s| s.timestamp).collect();
    times.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    if times.len() < 2 {
        return Err(Error::DegenerateInput(
            "time split needs at least 2 distinct timestamps".into(),
        ));
    }
    let n = samples.len() as f64;
    let t0 = times
        .iter()
        .copied()
        .find(|&t| {
            let before = samples.iter().filter(|s| s.timestamp < t).count();
            before as f64 / n >= ratio
        })
        .unwrap_or(*times.last().unwrap());

    let train_idx: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].timestamp < t0)
        .collect();
    let test_idx: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].timestamp >= t0)
        .collect();
    let max_train = train_idx
        .iter()
        .map(|&i| samples[i].timestamp)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_test = test_idx
        .iter()
        .map(|&i| samples[i].timestamp)
        .fold(f64::INFINITY, f64::min);
    Ok(TimeSplit {
        train_idx,
        test_idx,
        t0,
        gap: min_test - max_train,
    })
}

/// Sorted, merged union of intervals.
fn union_intervals(mut intervals: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    intervals.retain(|(a, b)| b > a);
    intervals.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
    for (a, b) in intervals {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Length of the intersection between one interval and a sorted union.
fn intersection_len(interval: (f64, f64), union: &[(f64, f64)]) -> f64 {
    union
        .iter()
        .map(|&(a, b)| (interval.1.min(b) - interval.0.max(a)).max(0.0))
        .sum()
}

/// True iff the (buffered) event covers at least half of some
/// annotation. The 50% fraction is relative to the annotation's own
/// duration on both sides of the matching: a detector windowing 3-s
/// segments produces event cores longer than any 1-s call, so a
/// core-relative fraction could never reach 50%.
fn event_hits(event: (f64, f64), annotations: &[Annotation]) -> bool {
    annotations.iter().any(|a| {
        let inter = (event.1.min(a.t_end) - event.0.max(a.t_start)).max(0.0);
        inter >= 0.5 * (a.t_end - a.t_start)
    })
}

/// Match annotations against detection events on a shared timeline.
///
/// An annotation is detected iff its intersection with the union of
/// buffered events covers at least 50% of the annotation's duration; an
/// event is true iff its buffered interval covers at least 50% of some
/// annotation. Remaining events are false positives.
pub fn match_events(annotations: &[Annotation], events: &[DetectionEvent]) -> MatchCounts {
    let evt_union = union_intervals(events.iter().map(|e| (e.t_start, e.t_end)).collect());

    let tp_ann = annotations
        .iter()
        .filter(|a| {
            intersection_len((a.t_start, a.t_end), &evt_union) >= 0.5 * (a.t_end - a.t_start)
        })
        .count();
    let tp_evt = events
        .iter()
        .filter(|e| event_hits((e.t_start, e.t_end), annotations))
        .count();
    MatchCounts {
        tp_ann,
        missed: annotations.len() - tp_ann,
        tp_evt,
        fp: events.len() - tp_evt,
    }
}

/// Derive ratio metrics from match counts over `duration_h` hours.
pub fn compute_metrics(counts: MatchCounts, duration_h: f64) -> Result<EvalReport> {
    if duration_h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "duration must be positive, got {duration_h} h"
        )));
    }
    let recall = if counts.tp_ann + counts.missed > 0 {
        Some(counts.tp_ann as f64 / (counts.tp_ann + counts.missed) as f64)
    } else {
        None
    };
    let precision = if counts.tp_evt + counts.fp > 0 {
        Some(counts.tp_evt as f64 / (counts.tp_evt + counts.fp) as f64)
    } else {
        None
    };
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(EvalReport {
        recall,
        precision,
        f1,
        fpr: counts.fp as f64 / duration_h,
        tp_ann: counts.tp_ann,
        tp_evt: counts.tp_evt,
        fp: counts.fp,
        missed: counts.missed,
        duration_h,
    })
}

/// Metrics restricted to annotations with SNR strictly above `snr_min`.
///
/// Events that fail against the retained annotations but would match the
/// full annotation set are excluded from the counts entirely (they are
/// neither true positives nor false positives). Returns the report and
/// the retained-annotation count.
pub fn snr_filtered_metrics(
    annotations: &[Annotation],
    events: &[DetectionEvent],
    snr_min: f64,
    duration_h: f64,
) -> Result<(EvalReport, usize)> {
    if annotations.iter().any(|a| a.snr.is_none()) {
        return Err(Error::InvalidArgument(
            "SNR filtering requires an SNR value on every annotation".into(),
        ));
    }
    let retained: Vec<Annotation> = annotations
        .iter()
        .filter(|a| a.snr.unwrap() > snr_min)
        .cloned()
        .collect();

    let evt_union = union_intervals(events.iter().map(|e| (e.t_start, e.t_end)).collect());

    let tp_ann = retained
        .iter()
        .filter(|a| {
            intersection_len((a.t_start, a.t_end), &evt_union) >= 0.5 * (a.t_end - a.t_start)
        })
        .count();
    let mut tp_evt = 0;
    let mut fp = 0;
    for e in events {
        let buffered = (e.t_start, e.t_end);
        if event_hits(buffered, &retained) {
            tp_evt += 1;
        } else if event_hits(buffered, annotations) {
            // Matches only filtered-out annotations: excluded.
        } else {
            fp += 1;
        }
    }
    let counts = MatchCounts {
        tp_ann,
        missed: retained.len() - tp_ann,
        tp_evt,
        fp,
    };
    Ok((compute_metrics(counts, duration_h)?, retained.len()))
}

/// Rerun threshold -> merge -> match over a smoothed score series for
/// each threshold, producing one report per threshold.
pub fn threshold_sweep(
    annotations: &[Annotation],
    smoothed: &crate::detector::ScoreSeries,
    thresholds: &[f64],
    duration_h: f64,
) -> Result<Vec<(f64, EvalReport)>> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("empty threshold list".into()));
    }
    thresholds
        .iter()
        .map(|&t| {
            let binary = crate::detector::binarize(smoothed, t);
            let events =
                crate::detector::merge_events(&binary, smoothed, crate::detector::BUFFER_BINS);
            let counts = match_events(annotations, &events);
            Ok((t, compute_metrics(counts, duration_h)?))
        })
        .collect()
}

/// Read an annotation CSV with header `source_id,t_start,t_end[,snr]`.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let bad = |line: usize, detail: String| Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        detail,
    };

    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => return Err(bad(1, "empty file".into())),
    };
    let cols: Vec<&str> = header.trim().split(',').collect();
    let has_snr = match cols.as_slice() {
        ["source_id", "t_start", "t_end"] => false,
        ["source_id", "t_start", "t_end", "snr"] => true,
        _ => return Err(bad(1, format!("unexpected header '{header}'"))),
    };

    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        let expected = if has_snr { 4 } else { 3 };
        if fields.len() != expected {
            return Err(bad(
                lineno,
                format!("expected {expected} fields, got {}", fields.len()),
            ));
        }
        let parse = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| bad(lineno, format!("bad {name} value '{s}'")))
        };
        let t_start = parse(fields[1], "t_start")?;
        let t_end = parse(fields[2], "t_end")?;
        if t_end <= t_start {
            return Err(bad(
                lineno,
                format!("t_end {t_end} must exceed t_start {t_start}"),
            ));
        }
        let snr = if has_snr && !fields[3].is_empty() {
            Some(parse(fields[3], "snr")?)
        } else {
            None
        };
        out.push(Annotation {
            source_id: fields[0].to_string(),
            t_start,
            t_end,
            snr,
        });
    }
    Ok(out)
}

/// Write annotations as CSV; the snr column is included when any
/// annotation carries one.
pub fn write_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    let has_snr = annotations.iter().any(|a| a.snr.is_some());
    if has_snr {
        writeln!(w, "source_id,t_start,t_end,snr").map_err(io_err)?;
    } else {
        writeln!(w, "source_id,t_start,t_end").map_err(io_err)?;
    }
    for a in annotations {
        if has_snr {
            let snr = a.snr.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", a.source_id, a.t_start, a.t_end, snr).map_err(io_err)?;
        } else {
            writeln!(w, "{},{},{}", a.source_id, a.t_start, a.t_end).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Write per-threshold reports as CSV with header
/// `threshold,recall,precision,fpr,f1,tp,fp,fn`.
pub fn write_report_csv(path: impl AsRef<Path>, rows: &[(f64, EvalReport)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "threshold,recall,precision,fpr,f1,tp,fp,fn").map_err(io_err)?;
    for (t, r) in rows {
        writeln!(
            w,
            "{:.6},{},{},{:.6},{},{},{},{}",
            t,
            fmt_opt(r.recall),
            fmt_opt(r.precision),
            r.fpr,
            fmt_opt(r.f1),
            r.tp_ann,
            r.fp,
            r.missed
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Write a plot-ready two-column CSV.
pub fn write_curve_csv(
    path: impl AsRef<Path>,
    header: (&str, &str),
    points: &[(f64, f64)],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{},{}", header.0, header.1).map_err(io_err)?;
    for (x, y) in points {
        writeln!(w, "{x:.6},{y:.6}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// One-paragraph human-readable report summary.
pub fn summarize_report(report: &EvalReport) -> String {
    let pct = |v: Option<f64>| {
        v.map(|x| format!("{:.1}%", 100.0 * x))
            .unwrap_or_else(|| "n/a".into())
    };
    format!(
        "recall {} ({} of {} calls), precision {} ({} of {} events), \
         {:.2} false positives/h over {:.2} h, F1 {}",
        pct(report.recall),
        report.tp_ann,
        report.tp_ann + report.missed,
        pct(report.precision),
        report.tp_evt,
        report.tp_evt + report.fp,
        report.fpr,
        report.duration_h,
        report
            .f1
            .map(|x| format!("{x:.3}"))
            .unwrap_or_else(|| "n/a".into()),
    )
}
