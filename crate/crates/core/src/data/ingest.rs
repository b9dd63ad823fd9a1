use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};

use super::{Sample, TaskCollection};
use crate::error::{Error, Result};

/// Separator between the values of composite task keys.
pub const KEY_SEPARATOR: &str = "|";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// Header row plus comma-separated values.
    Delimited,
    JsonLines,
}

impl Format {
    /// Chooses by extension: `.jsonl`/`.json` are JSON lines, anything else delimited.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::JsonLines,
            _ => Format::Delimited,
        }
    }
}

struct Layout {
    key_idx: Vec<usize>,
    timestamp: usize,
    label: usize,
    meta: Vec<usize>,
    other: Vec<usize>,
}

fn numbered_columns(header: &[String], prefix: &str) -> Vec<usize> {
    let mut out = Vec::new();
    loop {
        let name = format!("{prefix}{}", out.len());
        match header.iter().position(|h| *h == name) {
            Some(i) => out.push(i),
            None => return out,
        }
    }
}

fn layout(header: &[String], key_columns: &[String], path: &str) -> Result<Layout> {
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    if key_columns.is_empty() {
        return Err(Error::Config("at least one task key column is required".into()));
    }
    Ok(Layout {
        key_idx: key_columns
            .iter()
            .map(|k| find(k))
            .collect::<Result<_>>()?,
        timestamp: find("timestamp")?,
        label: find("label")?,
        meta: numbered_columns(header, "mf_"),
        other: numbered_columns(header, "of_"),
    })
}

fn join_key(parts: &[String]) -> std::result::Result<String, String> {
    if let Some(p) = parts.iter().find(|p| p.contains(KEY_SEPARATOR)) {
        return Err(format!("task key value `{p}` contains `{KEY_SEPARATOR}`"));
    }
    Ok(parts.join(KEY_SEPARATOR))
}

fn parse_label(raw: &str) -> std::result::Result<u8, String> {
    match raw.trim() {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        other => Err(format!("label `{other}` is not 0 or 1")),
    }
}

fn parse_f64(raw: &str, column: &str) -> std::result::Result<f64, String> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| format!("column `{column}`: `{raw}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("column `{column}` is not finite"));
    }
    Ok(v)
}

/// Reads samples from `path` and groups them by the composite key
/// `key_columns.join("|")`.
pub fn ingest(path: &Path, format: Format, key_columns: &[String]) -> Result<TaskCollection> {
    let text = fs::read_to_string(path)?;
    ingest_str(&text, &path.display().to_string(), format, key_columns)
}

/// Like [`ingest`] over in-memory text; `origin` names the source in errors.
pub fn ingest_str(
    text: &str,
    origin: &str,
    format: Format,
    key_columns: &[String],
) -> Result<TaskCollection> {
    let (samples, meta_dim, other_dim) = match format {
        Format::Delimited => read_delimited(text, origin, key_columns)?,
        Format::JsonLines => read_jsonl(text, origin, key_columns)?,
    };
    TaskCollection::from_samples(samples, meta_dim, other_dim)
}

fn read_delimited(
    text: &str,
    origin: &str,
    key_columns: &[String],
) -> Result<(Vec<Sample>, usize, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: origin.into(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let lay = layout(&header, key_columns, origin)?;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: origin.into(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let err = |message: String| Error::Parse {
            path: origin.into(),
            line,
            message,
        };
        if record.len() != header.len() {
            return Err(err(format!(
                "expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        let parts: Vec<String> = lay.key_idx.iter().map(|&i| record[i].to_string()).collect();
        let task_key = join_key(&parts).map_err(err)?;
        let timestamp: i64 = record[lay.timestamp]
            .trim()
            .parse()
            .map_err(|_| err(format!("timestamp `{}` is not an integer", &record[lay.timestamp])))?;
        let label = parse_label(&record[lay.label]).map_err(err)?;
        let meta_features = lay
            .meta
            .iter()
            .map(|&i| parse_f64(&record[i], &header[i]))
            .collect::<std::result::Result<_, _>>()
            .map_err(err)?;
        let other_features = lay
            .other
            .iter()
            .map(|&i| parse_f64(&record[i], &header[i]))
            .collect::<std::result::Result<_, _>>()
            .map_err(err)?;
        samples.push(Sample {
            task_key,
            timestamp,
            label,
            meta_features,
            other_features,
        });
    }
    Ok((samples, lay.meta.len(), lay.other.len()))
}

fn value_as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn numbered_fields(obj: &Map<String, Value>, prefix: &str) -> usize {
    let mut n = 0;
    while obj.contains_key(&format!("{prefix}{n}")) {
        n += 1;
    }
    n
}

fn read_jsonl(
    text: &str,
    origin: &str,
    key_columns: &[String],
) -> Result<(Vec<Sample>, usize, usize)> {
    if key_columns.is_empty() {
        return Err(Error::Config("at least one task key column is required".into()));
    }
    let mut samples = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.into(),
            line,
            message,
        };
        let value: Value = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| err("expected a JSON object".into()))?;
        let parts: Vec<String> = key_columns
            .iter()
            .map(|k| {
                obj.get(k)
                    .and_then(value_as_text)
                    .ok_or_else(|| err(format!("missing key field `{k}`")))
            })
            .collect::<Result<_>>()?;
        let task_key = join_key(&parts).map_err(err)?;
        let timestamp = obj
            .get("timestamp")
            .and_then(Value::as_i64)
            .ok_or_else(|| err("missing or non-integer `timestamp`".into()))?;
        let label = obj
            .get("label")
            .and_then(value_as_text)
            .ok_or_else(|| err("missing `label`".into()))
            .and_then(|l| parse_label(&l).map_err(err))?;
        let p = numbered_fields(obj, "mf_");
        let q = numbered_fields(obj, "of_");
        match dims {
            None => dims = Some((p, q)),
            Some(d) if d != (p, q) => {
                return Err(err(format!(
                    "feature count {p}+{q} differs from earlier rows ({}+{})",
                    d.0, d.1
                )))
            }
            Some(_) => {}
        }
        let read = |prefix: &str, n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|i| {
                    let name = format!("{prefix}{i}");
                    obj.get(&name)
                        .and_then(Value::as_f64)
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(format!("field `{name}` is not a finite number")))
                })
                .collect()
        };
        samples.push(Sample {
            task_key,
            timestamp,
            label,
            meta_features: read("mf_", p)?,
            other_features: read("of_", q)?,
        });
    }
    let (p, q) = dims.unwrap_or((0, 0));
    Ok((samples, p, q))
}

fn header(meta_dim: usize, other_dim: usize) -> Vec<String> {
    let mut h = vec!["task_key".to_string(), "timestamp".into(), "label".into()];
    h.extend((0..meta_dim).map(|i| format!("mf_{i}")));
    h.extend((0..other_dim).map(|i| format!("of_{i}")));
    h
}

/// Writes a collection with a single `task_key` column, task by task in key
/// order. Floats use the shortest round-tripping representation.
pub fn export_delimited(tasks: &TaskCollection, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(header(tasks.meta_dim(), tasks.other_dim()))
        .map_err(to_io)?;
    for s in tasks.samples() {
        let mut rec = vec![
            s.task_key.clone(),
            s.timestamp.to_string(),
            s.label.to_string(),
        ];
        rec.extend(s.meta_features.iter().map(|v| v.to_string()));
        rec.extend(s.other_features.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_jsonl(tasks: &TaskCollection, mut out: impl Write) -> Result<()> {
    for s in tasks.samples() {
        let mut obj = Map::new();
        obj.insert("task_key".into(), Value::String(s.task_key.clone()));
        obj.insert("timestamp".into(), Value::from(s.timestamp));
        obj.insert("label".into(), Value::from(s.label));
        for (i, v) in s.meta_features.iter().enumerate() {
            obj.insert(format!("mf_{i}"), Value::from(*v));
        }
        for (i, v) in s.other_features.iter().enumerate() {
            obj.insert(format!("of_{i}"), Value::from(*v));
        }
        serde_json::to_writer(&mut out, &Value::Object(obj))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
