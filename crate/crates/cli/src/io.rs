//! File formats: JSON for parameters, datasets, configs and reports; JSONL
//! for event histories; CSV with 17-significant-digit floats for tables.
//! Dimensions are one-based in every file.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pmbp::data::{CensoredSeries, Dataset, EventHistory};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads a JSON file into `T`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Writes `text` to `out`, or to stdout when `out` is `None`.
pub fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

/// Float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV text with a header row.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Parses CSV text into its header and rows.
#[cfg(test)]
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().map(|rec| Ok(rec?.iter().map(String::from).collect())).collect::<Result<_>>()?;
    Ok((header, rows))
}

#[derive(Serialize, Deserialize)]
struct EventsHeader {
    #[serde(rename = "T")]
    horizon: f64,
    d: usize,
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    dim: usize,
    t: f64,
}

/// JSONL: a `{"T", "d"}` header line, then one `{"dim", "t"}` line per event
/// in time order.
pub fn events_to_jsonl(h: &EventHistory) -> Result<String> {
    let mut out = serde_json::to_string(&EventsHeader { horizon: h.horizon, d: h.dim() })? + "\n";
    let mut all: Vec<(f64, usize)> = h.events.iter().enumerate().flat_map(|(j, ev)| ev.iter().map(move |&t| (t, j))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (t, j) in all {
        out += &serde_json::to_string(&EventRecord { dim: j + 1, t })?;
        out.push('\n');
    }
    Ok(out)
}

/// Inverse of [`events_to_jsonl`].
pub fn events_from_jsonl(text: &str) -> Result<EventHistory> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: EventsHeader = serde_json::from_str(lines.next().context("empty event file")?).context("event header")?;
    let mut events = vec![Vec::new(); header.d];
    for (k, line) in lines.enumerate() {
        let rec: EventRecord = serde_json::from_str(line).with_context(|| format!("event record {}", k + 1))?;
        if rec.dim == 0 || rec.dim > header.d {
            bail!("event record {} has dimension {} outside 1..={}", k + 1, rec.dim, header.d);
        }
        events[rec.dim - 1].push(rec.t);
    }
    Ok(EventHistory::new(header.horizon, events)?)
}

#[derive(Serialize, Deserialize)]
struct CensoredDim {
    dim: usize,
    boundaries: Vec<f64>,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct TimestampedDim {
    dim: usize,
    events: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    #[serde(rename = "T")]
    horizon: f64,
    e_dims: Vec<CensoredDim>,
    ec_dims: Vec<TimestampedDim>,
}

/// Dataset JSON with one-based dimension labels.
pub fn dataset_to_json(data: &Dataset) -> Result<String> {
    let file = DatasetFile {
        horizon: data.horizon,
        e_dims: data
            .counts
            .iter()
            .enumerate()
            .map(|(j, c)| CensoredDim { dim: j + 1, boundaries: c.boundaries.clone(), counts: c.counts.clone() })
            .collect(),
        ec_dims: (data.e..data.dim()).map(|j| TimestampedDim { dim: j + 1, events: data.events[j].clone() }).collect(),
    };
    to_json(&file)
}

/// Inverse of [`dataset_to_json`]; censored dimensions must be `1..=e`.
pub fn dataset_from_json(text: &str) -> Result<Dataset> {
    let mut file: DatasetFile = serde_json::from_str(text).context("dataset JSON")?;
    file.e_dims.sort_by_key(|x| x.dim);
    file.ec_dims.sort_by_key(|x| x.dim);
    let e = file.e_dims.len();
    let d = e + file.ec_dims.len();
    if file.e_dims.iter().enumerate().any(|(k, x)| x.dim != k + 1) || file.ec_dims.iter().enumerate().any(|(k, x)| x.dim != e + k + 1) {
        bail!("censored dimensions must be 1..=e and timestamped ones e+1..=d");
    }
    let mut events = vec![Vec::new(); d];
    for x in file.ec_dims {
        events[x.dim - 1] = x.events;
    }
    let counts = file.e_dims.into_iter().map(|x| CensoredSeries { boundaries: x.boundaries, counts: x.counts }).collect();
    let data = Dataset { horizon: file.horizon, e, counts, events };
    data.validate(d, e)?;
    Ok(data)
}

/// Reads a dataset JSON file.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_json(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

/// Reads an event JSONL file.
pub fn read_events(path: &Path) -> Result<EventHistory> {
    events_from_jsonl(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}
