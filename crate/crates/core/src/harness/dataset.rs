//! Line-delimited JSON dataset files.
//!
//! The first line is a header object naming the format, its version and the
//! keypoint schema. Every following line is one record:
//! `{"id": .., "split": .., "pred": [[x, y, z], ..], "gt": [[..]] | null}`.
//! Numbers are written with 17 significant digits so parsing recovers the
//! exact bit pattern.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::pose::{KeypointSchema, Pose, SampleRecord, Split};

pub const DATASET_FORMAT: &str = "escape-poses";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub schema: String,
    pub joints: usize,
}

#[derive(Deserialize)]
struct RecordLine {
    id: String,
    split: String,
    pred: Vec<[f64; 3]>,
    gt: Option<Vec<[f64; 3]>>,
}

fn push_pose(out: &mut String, pose: &Pose) {
    out.push('[');
    for (i, p) in pose.joints().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{:.16e},{:.16e},{:.16e}]", p[0], p[1], p[2]);
    }
    out.push(']');
}

/// One record as a single JSON line (no trailing newline).
pub fn record_line(record: &SampleRecord) -> Result<String> {
    record.predicted.ensure_finite()?;
    let mut line = String::with_capacity(2048);
    line.push_str("{\"id\":");
    line.push_str(&serde_json::to_string(&record.id).expect("strings serialize"));
    let _ = write!(line, ",\"split\":\"{}\",\"pred\":", record.split.as_str());
    push_pose(&mut line, &record.predicted);
    line.push_str(",\"gt\":");
    match &record.ground_truth {
        Some(gt) => {
            gt.ensure_finite()?;
            push_pose(&mut line, gt);
        }
        None => line.push_str("null"),
    }
    line.push('}');
    Ok(line)
}

pub fn header_line(schema: &KeypointSchema) -> String {
    format!(
        "{{\"format\":\"{DATASET_FORMAT}\",\"version\":{DATASET_VERSION},\"schema\":{},\"joints\":{}}}",
        serde_json::to_string(&schema.name).expect("strings serialize"),
        schema.joint_count
    )
}

pub fn write_records<W: Write>(mut w: W, records: &[SampleRecord], schema: &KeypointSchema) -> Result<()> {
    writeln!(w, "{}", header_line(schema))?;
    for r in records {
        schema.check(&r.predicted)?;
        if let Some(gt) = &r.ground_truth {
            schema.check(gt)?;
        }
        writeln!(w, "{}", record_line(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, records: &[SampleRecord], schema: &KeypointSchema) -> Result<()> {
    write_records(BufWriter::new(File::create(path)?), records, schema)
}

fn to_pose(coords: Vec<[f64; 3]>, schema: &KeypointSchema) -> Result<Pose> {
    let pose = Pose::new(coords);
    schema.check(&pose)?;
    pose.ensure_finite()?;
    Ok(pose)
}

/// Parses a dataset and checks it against `schema`. `source` names the input
/// in error messages.
pub fn read_records<R: BufRead>(
    reader: R,
    schema: &KeypointSchema,
    source: &Path,
) -> Result<(DatasetHeader, Vec<SampleRecord>)> {
    let bad = |line: usize, reason: String| Error::Data {
        path: source.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = reader.lines();
    let header_text = lines.next().ok_or_else(|| bad(1, "missing header".into()))??;
    let header: DatasetHeader =
        serde_json::from_str(&header_text).map_err(|e| bad(1, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(bad(1, format!("unknown format '{}'", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(bad(1, format!("unsupported version {}", header.version)));
    }
    if header.schema != schema.name || header.joints != schema.joint_count {
        return Err(Error::Schema(format!(
            "dataset declares schema '{}' with {} joints, expected '{}' with {}",
            header.schema, header.joints, schema.name, schema.joint_count
        )));
    }

    let mut records = Vec::new();
    for (k, line) in lines.enumerate() {
        let n = k + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
        let split: Split = raw.split.parse().map_err(|e: Error| bad(n, e.to_string()))?;
        let predicted = to_pose(raw.pred, schema).map_err(|e| bad(n, e.to_string()))?;
        let ground_truth = raw
            .gt
            .map(|g| to_pose(g, schema))
            .transpose()
            .map_err(|e| bad(n, e.to_string()))?;
        records.push(SampleRecord {
            id: raw.id,
            predicted,
            ground_truth,
            split,
        });
    }
    Ok((header, records))
}

pub fn read_dataset(path: &Path, schema: &KeypointSchema) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(read_records(BufReader::new(file), schema, path)?.1)
}
