//! CSV time series. Columns are `t`, then optionally `z`, `z_mode`, `x1..xM`,
//! `y1..yN` or `rho1..rhoN`. An empty `y` cell marks a masked step.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rslds::model::{Dataset, EmissionFamily};
use rslds::{Error, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path.display().to_string(), io);
        }
        unreachable!("checked above");
    }
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Column blocks of a time-series table.
#[derive(Default)]
pub struct Series<'a> {
    pub z: Option<&'a [usize]>,
    pub z_mode: Option<&'a [usize]>,
    pub x: Option<&'a [DVector<f64>]>,
    /// Observations; masked steps are written as empty cells.
    pub y: Option<(&'a [DVector<f64>], Option<&'a [bool]>)>,
    pub rho: Option<&'a [DVector<f64>]>,
}

impl Series<'_> {
    fn len(&self) -> usize {
        self.z
            .map(|v| v.len())
            .or(self.z_mode.map(|v| v.len()))
            .or(self.x.map(|v| v.len()))
            .or(self.y.map(|v| v.0.len()))
            .or(self.rho.map(|v| v.len()))
            .unwrap_or(0)
    }
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

pub fn write_series(path: &Path, s: &Series) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["t".to_string()];
    if s.z.is_some() {
        header.push("z".into());
    }
    if s.z_mode.is_some() {
        header.push("z_mode".into());
    }
    if let Some(x) = s.x {
        header.extend(numbered("x", x.first().map_or(0, |v| v.len())));
    }
    if let Some((y, _)) = s.y {
        header.extend(numbered("y", y.first().map_or(0, |v| v.len())));
    }
    if let Some(r) = s.rho {
        header.extend(numbered("rho", r.first().map_or(0, |v| v.len())));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for t in 0..s.len() {
        let mut rec = vec![t.to_string()];
        if let Some(z) = s.z {
            rec.push(z[t].to_string());
        }
        if let Some(z) = s.z_mode {
            rec.push(z[t].to_string());
        }
        if let Some(x) = s.x {
            rec.extend(x[t].iter().map(|v| v.to_string()));
        }
        if let Some((y, mask)) = s.y {
            let observed = mask.is_none_or(|m| m[t]);
            rec.extend(
                y[t].iter()
                    .map(|v| if observed { v.to_string() } else { String::new() }),
            );
        }
        if let Some(r) = s.rho {
            rec.extend(r[t].iter().map(|v| v.to_string()));
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// A parsed time-series table.
pub struct Table {
    pub z: Option<Vec<usize>>,
    pub z_mode: Option<Vec<usize>>,
    pub x: Option<Vec<DVector<f64>>>,
    pub y: Option<Vec<DVector<f64>>>,
    pub observed: Vec<bool>,
    pub rho: Option<Vec<DVector<f64>>>,
}

fn block(header: &csv::StringRecord, prefix: &str) -> Vec<usize> {
    header
        .iter()
        .enumerate()
        .filter(|(_, h)| {
            h.strip_prefix(prefix)
                .is_some_and(|r| !r.is_empty() && r.chars().all(|c| c.is_ascii_digit()))
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn read_series(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (zc, zmc) = (col("z"), col("z_mode"));
    let (xc, yc, rc) = (block(&header, "x"), block(&header, "y"), block(&header, "rho"));
    let mut t = Table {
        z: zc.map(|_| Vec::new()),
        z_mode: zmc.map(|_| Vec::new()),
        x: (!xc.is_empty()).then(Vec::new),
        y: (!yc.is_empty()).then(Vec::new),
        observed: Vec::new(),
        rho: (!rc.is_empty()).then(Vec::new),
    };
    let bad = |row: usize, what: &str| Error::Data(format!("{} row {}: bad {what}", path.display(), row + 1));
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |c: usize| rec.get(c).unwrap_or("").trim().parse::<f64>();
        if let (Some(c), Some(v)) = (zc, t.z.as_mut()) {
            v.push(rec.get(c).unwrap_or("").trim().parse().map_err(|_| bad(i, "z"))?);
        }
        if let (Some(c), Some(v)) = (zmc, t.z_mode.as_mut()) {
            v.push(rec.get(c).unwrap_or("").trim().parse().map_err(|_| bad(i, "z_mode"))?);
        }
        if let Some(v) = t.x.as_mut() {
            let vals: std::result::Result<Vec<f64>, _> = xc.iter().map(|&c| num(c)).collect();
            v.push(DVector::from_vec(vals.map_err(|_| bad(i, "x"))?));
        }
        if let Some(v) = t.y.as_mut() {
            let empty = yc.iter().all(|&c| rec.get(c).unwrap_or("").trim().is_empty());
            if empty {
                v.push(DVector::zeros(yc.len()));
                t.observed.push(false);
            } else {
                let vals: std::result::Result<Vec<f64>, _> = yc.iter().map(|&c| num(c)).collect();
                v.push(DVector::from_vec(vals.map_err(|_| bad(i, "y"))?));
                t.observed.push(true);
            }
        }
        if let Some(v) = t.rho.as_mut() {
            let vals: std::result::Result<Vec<f64>, _> = rc.iter().map(|&c| num(c)).collect();
            v.push(DVector::from_vec(vals.map_err(|_| bad(i, "rho"))?));
        }
    }
    Ok(t)
}

pub fn read_dataset(path: &Path, family: EmissionFamily) -> Result<Dataset> {
    let t = read_series(path)?;
    let y =
        t.y.ok_or_else(|| Error::Data(format!("{}: no y columns", path.display())))?;
    Dataset::new(y, t.observed, family)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
