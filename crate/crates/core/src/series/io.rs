//! Line-delimited JSON persistence for series sets.
//!
//! One object per point: `{"t": .., "x": [..], "mask": [0|1, ..], "obs": 0|1}`,
//! optionally with `"imputed": 1` on points filled in by the model. A
//! container file holds one `{"series_id": .., "points": [..]}` object per
//! line instead.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SeriesSet, TimedPoint};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub mask: Vec<u8>,
    pub obs: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imputed: Option<u8>,
}

impl PointRecord {
    pub fn from_point(p: &TimedPoint, imputed: bool) -> Self {
        PointRecord {
            t: p.time,
            x: p.data.clone(),
            mask: p.dim_mask.iter().map(|&m| m as u8).collect(),
            obs: p.observed as u8,
            imputed: imputed.then_some(1),
        }
    }

    pub fn to_point(&self) -> Result<TimedPoint> {
        let mask = self
            .mask
            .iter()
            .map(|&m| match m {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidPoint(format!("mask entry {other} is not 0/1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let observed = match self.obs {
            0 => false,
            1 => true,
            other => return Err(Error::InvalidPoint(format!("obs flag {other} is not 0/1"))),
        };
        TimedPoint::new(self.t, self.x.clone(), mask, observed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesRecord {
    pub series_id: String,
    pub points: Vec<PointRecord>,
}

fn records_to_set(records: &[PointRecord], path: &Path) -> Result<(SeriesSet, Vec<bool>)> {
    let dim = records
        .first()
        .map(|r| r.x.len())
        .ok_or_else(|| Error::parse(path, "series has no points"))?;
    let points = records
        .iter()
        .map(PointRecord::to_point)
        .collect::<Result<Vec<_>>>()?;
    let imputed = records.iter().map(|r| r.imputed == Some(1)).collect();
    Ok((SeriesSet::new(dim, points)?, imputed))
}

/// Reads a one-series-per-file JSONL file. Also returns the per-point
/// `imputed` flags, in file order.
pub fn read_series_jsonl(path: &Path) -> Result<(SeriesSet, Vec<bool>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PointRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    records_to_set(&records, path)
}

/// Writes points in time order. `imputed` is indexed like `set.points()`.
pub fn write_series_jsonl(path: &Path, set: &SeriesSet, imputed: Option<&[bool]>) -> Result<()> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.points()[a].time.total_cmp(&set.points()[b].time));
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in order {
        let flag = imputed.map(|f| f[i]).unwrap_or(false);
        let rec = PointRecord::from_point(&set.points()[i], flag);
        let line = serde_json::to_string(&rec).expect("point records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Vec<(String, SeriesSet)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SeriesRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        let (set, _) = records_to_set(&rec.points, path)?;
        out.push((rec.series_id, set));
    }
    Ok(out)
}

pub fn write_container(path: &Path, series: &[(String, SeriesSet)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, set) in series {
        let points = super::to_sequence(set)
            .iter()
            .map(|p| PointRecord::from_point(p, false))
            .collect();
        let rec = SeriesRecord {
            series_id: id.clone(),
            points,
        };
        let line = serde_json::to_string(&rec).expect("series records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV with columns `t, x0.., mask0.., obs`, rows in time order.
pub fn series_to_csv(set: &SeriesSet) -> String {
    let d = set.dim();
    let mut out = String::from("t");
    for k in 0..d {
        let _ = write!(out, ",x{k}");
    }
    for k in 0..d {
        let _ = write!(out, ",mask{k}");
    }
    out.push_str(",obs\n");
    for p in super::to_sequence(set) {
        let _ = write!(out, "{:?}", p.time);
        for x in &p.data {
            let _ = write!(out, ",{x:?}");
        }
        for &m in &p.dim_mask {
            let _ = write!(out, ",{}", m as u8);
        }
        let _ = writeln!(out, ",{}", p.observed as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> SeriesSet {
        let pts = vec![
            TimedPoint::observation(3.0, vec![0.1, -2.5]).unwrap(),
            TimedPoint::target(1.0, 2).unwrap(),
            TimedPoint::partial(2.0, vec![0.7, 9.0], vec![true, false]).unwrap(),
        ];
        SeriesSet::new(2, pts).unwrap()
    }

    #[test]
    fn jsonl_round_trip_with_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let set = sample_set();
        write_series_jsonl(&path, &set, Some(&[true, false, false])).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, r#"{"t":1.0,"x":[0.0,0.0],"mask":[0,0],"obs":0}"#);
        assert!(text.contains(r#""imputed":1"#));
        let (back, flags) = read_series_jsonl(&path).unwrap();
        assert_eq!(super::super::to_sequence(&back), super::super::to_sequence(&set));
        assert_eq!(flags, vec![false, false, true]);
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let series = vec![("a".to_string(), sample_set()), ("b".to_string(), sample_set())];
        write_container(&path, &series).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, "b");
        assert_eq!(
            super::super::to_sequence(&back[0].1),
            super::super::to_sequence(&series[0].1)
        );
    }

    #[test]
    fn rejects_unknown_keys_and_bad_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, r#"{"t":1.0,"x":[0.0],"mask":[1],"obs":1,"extra":3}"#).unwrap();
        assert!(read_series_jsonl(&path).is_err());
        fs::write(&path, r#"{"t":1.0,"x":[0.0],"mask":[2],"obs":1}"#).unwrap();
        assert!(read_series_jsonl(&path).is_err());
    }

    #[test]
    fn csv_columns() {
        let csv = series_to_csv(&sample_set());
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x0,x1,mask0,mask1,obs");
        assert_eq!(lines.next().unwrap(), "1.0,0.0,0.0,0,0,0");
        assert_eq!(lines.next().unwrap(), "2.0,0.7,0.0,1,0,0");
    }
}
