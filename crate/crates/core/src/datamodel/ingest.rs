use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{Catalog, PoiRecord, SearchRecord};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

/// Reads `catalog.jsonl`. Blank lines are skipped; any malformed or invalid
/// line aborts with its 1-based line number.
pub fn ingest_catalog(path: &Path) -> Result<Catalog> {
    let mut pois: Vec<PoiRecord> = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (n, line) in lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PoiRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        p.validate().map_err(|e| parse_err(path, n, e.to_string()))?;
        if let Some(first) = seen.insert(p.poi_id.clone(), n) {
            return Err(parse_err(
                path,
                n,
                format!("duplicate poi_id `{}` (first seen on line {first})", p.poi_id),
            ));
        }
        pois.push(p);
    }
    Catalog::new(pois)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Counts and rejected lines from a log file.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub lines: usize,
    pub records: usize,
    pub clicked: usize,
    pub unclicked: usize,
    pub users: usize,
    pub errors: Vec<LineError>,
}

/// Reads `logs.jsonl`, collecting bad lines instead of failing.
pub fn read_logs_lenient(
    path: &Path,
    catalog: Option<&Catalog>,
) -> Result<(Vec<SearchRecord>, ValidationReport)> {
    let mut report = ValidationReport::default();
    let mut out = Vec::new();
    let mut users = std::collections::BTreeSet::new();
    for (n, line) in lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let rec = serde_json::from_str::<SearchRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()))
            .and_then(|r| match (catalog, &r.clicked_poi_id) {
                (Some(c), Some(id)) if c.get(id).is_none() => {
                    Err(format!("clicked POI `{id}` is not in the catalog"))
                }
                _ => Ok(r),
            });
        match rec {
            Ok(r) => {
                if r.clicked_poi_id.is_some() {
                    report.clicked += 1;
                } else {
                    report.unclicked += 1;
                }
                users.insert(r.user_id.clone());
                out.push(r);
            }
            Err(message) => report.errors.push(LineError { line: n, message }),
        }
    }
    report.records = out.len();
    report.users = users.len();
    Ok((out, report))
}

/// Strict variant of [`read_logs_lenient`]: the first bad line is an error.
pub fn ingest_logs(path: &Path, catalog: Option<&Catalog>) -> Result<Vec<SearchRecord>> {
    let (recs, report) = read_logs_lenient(path, catalog)?;
    match report.errors.first() {
        Some(e) => Err(parse_err(path, e.line, e.message.clone())),
        None => Ok(recs),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        for it in items {
            serde_json::to_writer(&mut w, &it)?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    write_jsonl(path, catalog.pois().iter())
}

pub fn write_logs<'a>(path: &Path, records: impl IntoIterator<Item = &'a SearchRecord>) -> Result<()> {
    write_jsonl(path, records.into_iter())
}
