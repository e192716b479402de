//! Line-delimited JSON corpus files: one header line, then one sample per
//! line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{split, BrainSample, Corpus, CorpusSpec, Splits};
use crate::error::{Error, Result};
use crate::tensor::Array;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "modroute-corpus";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub spec_hash: String,
    pub split: String,
    pub count: usize,
    pub spec: CorpusSpec,
}

fn sample_json(s: &BrainSample) -> Value {
    let mut obj = Map::new();
    obj.insert("id".into(), json!(s.id));
    obj.insert("brain".into(), json!(s.brain));
    for (m, a) in s.aux.iter().enumerate() {
        let rows: Vec<&[f64]> = (0..a.shape()[0]).map(|r| a.row(r)).collect();
        obj.insert(format!("aux_{m}"), json!(rows));
    }
    obj.insert("targets".into(), json!(s.targets));
    obj.insert("oracle".into(), json!(s.oracle));
    obj.insert("covariate".into(), json!(s.covariate));
    Value::Object(obj)
}

pub fn write_split(path: &Path, spec: &CorpusSpec, name: &str, samples: &[BrainSample]) -> Result<()> {
    let header = CorpusHeader {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        spec_hash: spec.hash(),
        split: name.into(),
        count: samples.len(),
        spec: spec.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write_line = |v: String| -> Result<()> {
        out.write_all(v.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for s in samples {
        write_line(sample_json(s).to_string())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Splits `corpus` and writes `train.jsonl`, `val.jsonl` and `test.jsonl`
/// under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<Splits> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = split(corpus)?;
    for (name, samples) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_split(&dir.join(format!("{name}.jsonl")), &corpus.spec, name, samples)?;
    }
    Ok(splits)
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> std::result::Result<&'a Value, String> {
    obj.get(key).ok_or_else(|| format!("missing field `{key}`"))
}

fn floats(v: &Value, what: &str) -> std::result::Result<Vec<f64>, String> {
    v.as_array()
        .ok_or_else(|| format!("`{what}` is not an array"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| format!("`{what}` holds a non-number")))
        .collect()
}

fn uint(v: &Value, what: &str) -> std::result::Result<usize, String> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| format!("`{what}` is not a non-negative integer"))
}

fn parse_sample(line: &str, modalities: usize, raw_dim: usize) -> std::result::Result<BrainSample, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record is not an object")?;
    let mut aux = Vec::with_capacity(modalities);
    for m in 0..modalities {
        let key = format!("aux_{m}");
        let rows = field(obj, &key)?.as_array().ok_or(format!("`{key}` is not an array"))?;
        let mut data = Vec::with_capacity(rows.len() * raw_dim);
        for r in rows {
            let row = floats(r, &key)?;
            if row.len() != raw_dim {
                return Err(format!("`{key}` row has {} values, expected {raw_dim}", row.len()));
            }
            data.extend(row);
        }
        aux.push(Array::new(vec![rows.len(), raw_dim], data).map_err(|e| format!("`{key}`: {e}"))?);
    }
    let targets = field(obj, "targets")?
        .as_array()
        .ok_or("`targets` is not an array")?
        .iter()
        .map(|t| uint(t, "targets"))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(BrainSample {
        id: uint(field(obj, "id")?, "id")?,
        brain: floats(field(obj, "brain")?, "brain")?,
        aux,
        targets,
        oracle: uint(field(obj, "oracle")?, "oracle")?,
        covariate: field(obj, "covariate")?.as_f64().ok_or("`covariate` is not a number")?,
    })
}

/// Reads one split file, checking the header and every record.
pub fn read_split(path: &Path) -> Result<(CorpusHeader, Vec<BrainSample>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: CorpusHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(path, format!("line 1: bad header: {e}")))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!(
                "unsupported corpus format {} v{} (expected {FORMAT_NAME} v{FORMAT_VERSION})",
                header.format, header.version
            ),
        ));
    }
    if header.spec.hash() != header.spec_hash {
        return Err(Error::format(path, "spec hash does not match the embedded spec"));
    }
    let spec = &header.spec;
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = parse_sample(&line, spec.modalities, spec.raw_dim)
            .map_err(|msg| Error::format(path, format!("line {}: {msg}", i + 2)))?;
        if s.brain.len() != spec.brain_dim {
            return Err(Error::format(
                path,
                format!("line {}: brain has {} values, expected {}", i + 2, s.brain.len(), spec.brain_dim),
            ));
        }
        samples.push(s);
    }
    if samples.len() != header.count {
        return Err(Error::format(
            path,
            format!("header promises {} samples, found {}", header.count, samples.len()),
        ));
    }
    Ok((header, samples))
}
