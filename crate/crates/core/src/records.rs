//! Event files, logs and trace tables.
//!
//! Events are flat records with columns `x_0 .. x_{d-1}`, `prediction`,
//! `label` and an optional `index`, stored either as CSV with a header row or
//! as one JSON object per line. A log line is the event's fields followed by
//! every [`StepOutcome`] field, so a log is itself a valid event file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::monitor::{LabeledPoint, StepOutcome, StreamEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("csv") => Ok(Format::Csv),
            Some("jsonl") | Some("ndjson") | Some("json") => Ok(Format::Jsonl),
            _ => Err(Error::InvalidInput(format!(
                "{}: unknown file type (expected .csv or .jsonl)",
                path.display()
            ))),
        }
    }
}

fn data_err(line: usize, message: impl Into<String>) -> Error {
    Error::Data {
        line,
        message: message.into(),
    }
}

/// Raw fields of one record before sequencing.
#[derive(Debug, Clone, PartialEq)]
struct RawRecord {
    line: usize,
    index: Option<u64>,
    features: Vec<f64>,
    prediction: f64,
    label: f64,
}

/// Column layout resolved from a CSV header or the first JSON record.
#[derive(Debug, Clone)]
struct Layout {
    dim: usize,
}

fn feature_position(key: &str) -> Option<usize> {
    key.strip_prefix("x_").and_then(|k| k.parse().ok())
}

fn check_feature_keys(keys: &[usize], line: usize) -> Result<Layout> {
    let mut sorted = keys.to_vec();
    sorted.sort_unstable();
    if sorted.is_empty() {
        return Err(data_err(
            line,
            "no feature columns (expected x_0, x_1, ...)",
        ));
    }
    if sorted.iter().enumerate().any(|(i, k)| i != *k) {
        return Err(data_err(
            line,
            "feature columns must be x_0 .. x_{d-1} without gaps",
        ));
    }
    Ok(Layout { dim: sorted.len() })
}

fn parse_number(s: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| data_err(line, format!("{what}: cannot parse {s:?} as a number")))?;
    if !v.is_finite() {
        return Err(data_err(line, format!("{what}: value {s:?} is not finite")));
    }
    Ok(v)
}

fn read_csv(path: &Path) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| data_err(1, e.to_string()))?
        .clone();
    let mut feature_cols = Vec::new();
    let (mut pred_col, mut label_col, mut index_col) = (None, None, None);
    for (c, h) in headers.iter().enumerate() {
        match h.trim() {
            "prediction" => pred_col = Some(c),
            "label" => label_col = Some(c),
            "index" => index_col = Some(c),
            other => {
                if let Some(k) = feature_position(other) {
                    feature_cols.push((k, c));
                }
            }
        }
    }
    let keys: Vec<usize> = feature_cols.iter().map(|(k, _)| *k).collect();
    check_feature_keys(&keys, 1)?;
    feature_cols.sort_unstable();
    let pred_col = pred_col.ok_or_else(|| data_err(1, "missing prediction column"))?;
    let label_col = label_col.ok_or_else(|| data_err(1, "missing label column"))?;

    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| data_err(line, e.to_string()))?;
        let field = |c: usize| {
            record
                .get(c)
                .ok_or_else(|| data_err(line, "row has too few fields"))
        };
        let features = feature_cols
            .iter()
            .map(|(k, c)| parse_number(field(*c)?, line, &format!("x_{k}")))
            .collect::<Result<Vec<_>>>()?;
        let index = match index_col {
            Some(c) => Some(
                field(c)?
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| data_err(line, "index must be a positive integer"))?,
            ),
            None => None,
        };
        out.push(RawRecord {
            line,
            index,
            features,
            prediction: parse_number(field(pred_col)?, line, "prediction")?,
            label: parse_number(field(label_col)?, line, "label")?,
        });
    }
    Ok(out)
}

fn json_number(obj: &Map<String, Value>, key: &str, line: usize) -> Result<f64> {
    let v = obj
        .get(key)
        .ok_or_else(|| data_err(line, format!("missing field {key:?}")))?;
    let n = v
        .as_f64()
        .ok_or_else(|| data_err(line, format!("{key}: expected a number, got {v}")))?;
    if !n.is_finite() {
        return Err(data_err(line, format!("{key}: value is not finite")));
    }
    Ok(n)
}

fn parse_json_record(text: &str, line: usize) -> Result<RawRecord> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| data_err(line, format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| data_err(line, "expected a JSON object"))?;
    let keys: Vec<usize> = obj.keys().filter_map(|k| feature_position(k)).collect();
    let layout = check_feature_keys(&keys, line)?;
    let features = (0..layout.dim)
        .map(|k| json_number(obj, &format!("x_{k}"), line))
        .collect::<Result<Vec<_>>>()?;
    let index = match obj.get("index") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| data_err(line, "index must be a positive integer"))?,
        ),
    };
    Ok(RawRecord {
        line,
        index,
        features,
        prediction: json_number(obj, "prediction", line)?,
        label: json_number(obj, "label", line)?,
    })
}

fn read_jsonl(path: &Path) -> Result<Vec<RawRecord>> {
    let file =
        File::open(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let text = line.map_err(|e| data_err(i + 1, e.to_string()))?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(parse_json_record(&text, i + 1)?);
    }
    Ok(out)
}

fn read_raw(path: &Path) -> Result<Vec<RawRecord>> {
    let records = match Format::from_path(path)? {
        Format::Csv => read_csv(path)?,
        Format::Jsonl => read_jsonl(path)?,
    };
    if let Some(first) = records.first() {
        let dim = first.features.len();
        if let Some(bad) = records.iter().find(|r| r.features.len() != dim) {
            return Err(data_err(
                bad.line,
                format!("expected {dim} features, found {}", bad.features.len()),
            ));
        }
    }
    Ok(records)
}

/// Reads a stream. Records without an `index` are numbered from 1; explicit
/// indices must run 1, 2, 3, ...
pub fn read_events(path: &Path) -> Result<Vec<StreamEvent>> {
    read_raw(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let expected = i as u64 + 1;
            if let Some(idx) = r.index {
                if idx != expected {
                    return Err(data_err(
                        r.line,
                        format!("index {idx} out of sequence, expected {expected}"),
                    ));
                }
            }
            Ok(StreamEvent {
                index: expected,
                features: r.features,
                prediction: r.prediction,
                label: r.label,
            })
        })
        .collect()
}

/// Reads labelled calibration points (any `index` column is ignored).
pub fn read_labeled(path: &Path) -> Result<Vec<LabeledPoint>> {
    Ok(read_raw(path)?
        .into_iter()
        .map(|r| LabeledPoint {
            features: r.features,
            prediction: r.prediction,
            label: r.label,
        })
        .collect())
}

fn event_fields(
    index: Option<u64>,
    features: &[f64],
    prediction: f64,
    label: f64,
) -> Map<String, Value> {
    let mut m = Map::new();
    if let Some(i) = index {
        m.insert("index".into(), Value::from(i));
    }
    for (k, v) in features.iter().enumerate() {
        m.insert(format!("x_{k}"), Value::from(*v));
    }
    m.insert("prediction".into(), Value::from(prediction));
    m.insert("label".into(), Value::from(label));
    m
}

/// One log line: the event followed by all outcome fields.
pub fn log_record(event: &StreamEvent, outcome: &StepOutcome) -> Result<String> {
    let mut m = event_fields(
        Some(event.index),
        &event.features,
        event.prediction,
        event.label,
    );
    match serde_json::to_value(outcome).map_err(|e| Error::InvalidState(e.to_string()))? {
        Value::Object(o) => m.extend(o),
        _ => unreachable!("outcomes serialize as objects"),
    }
    serde_json::to_string(&Value::Object(m)).map_err(|e| Error::InvalidState(e.to_string()))
}

/// Append-only JSONL log writer.
pub struct LogWriter<W: Write> {
    out: W,
}

impl LogWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }
}

impl<W: Write> LogWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, event: &StreamEvent, outcome: &StepOutcome) -> Result<()> {
        writeln!(self.out, "{}", log_record(event, outcome)?)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Parses a log back into events and outcomes.
pub fn read_log(path: &Path) -> Result<Vec<(StreamEvent, StepOutcome)>> {
    let file =
        File::open(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| data_err(line_no, e.to_string()))?;
        if text.trim().is_empty() {
            continue;
        }
        let raw = parse_json_record(&text, line_no)?;
        let outcome: StepOutcome = serde_json::from_str(&text)
            .map_err(|e| data_err(line_no, format!("not a log record: {e}")))?;
        let event = StreamEvent {
            index: raw.index.unwrap_or(outcome.t),
            features: raw.features,
            prediction: raw.prediction,
            label: raw.label,
        };
        out.push((event, outcome));
    }
    Ok(out)
}

/// Writes labelled points or events as CSV (`index` first when present).
pub fn write_csv<'a, I>(path: &Path, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (Option<u64>, &'a [f64], f64, f64)>,
{
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header_written = false;
    for (index, features, prediction, label) in rows {
        if !header_written {
            let mut header: Vec<String> = Vec::new();
            if index.is_some() {
                header.push("index".into());
            }
            header.extend((0..features.len()).map(|k| format!("x_{k}")));
            header.extend(["prediction".to_string(), "label".to_string()]);
            writer
                .write_record(&header)
                .map_err(|e| Error::Io(e.into()))?;
            header_written = true;
        }
        let mut row: Vec<String> = Vec::new();
        if let Some(i) = index {
            row.push(i.to_string());
        }
        row.extend(features.iter().map(|v| v.to_string()));
        row.push(prediction.to_string());
        row.push(label.to_string());
        writer.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_events_csv(path: &Path, events: &[StreamEvent]) -> Result<()> {
    write_csv(
        path,
        events
            .iter()
            .map(|e| (Some(e.index), e.features.as_slice(), e.prediction, e.label)),
    )
}

pub fn write_labeled_csv(path: &Path, points: &[LabeledPoint]) -> Result<()> {
    write_csv(
        path,
        points
            .iter()
            .map(|p| (None, p.features.as_slice(), p.prediction, p.label)),
    )
}

/// Long-format trace table: one row per `(run, t, series)`.
pub fn write_traces(path: &Path, traces: &BTreeMap<u64, Vec<StepOutcome>>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "run,t,series,value")?;
    for (run, outcomes) in traces {
        for o in outcomes {
            let width = o.interval.width();
            let rows: [(&str, Option<f64>); 8] = [
                ("wealth_w", Some(o.wealth_w)),
                ("wealth_x", Some(o.wealth_x)),
                ("baseline_wealth", o.baseline_wealth),
                ("sr_statistic", Some(o.sr_statistic)),
                ("p_z", Some(o.p_z.value)),
                ("covered", Some(if o.covered { 1.0 } else { 0.0 })),
                ("width", Some(width)),
                ("test_weight", Some(o.test_weight)),
            ];
            for (name, v) in rows {
                if let Some(v) = v {
                    writeln!(w, "{run},{},{name},{v}", o.t)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
