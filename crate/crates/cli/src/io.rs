//! CSV input and CSV/JSON output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use catt_core::panel::{Group, GroupLabel, LongRecord, PanelData};

use crate::config::Columns;
use crate::CliError;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io { path: path.to_path_buf(), source: e }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Csv { path: path.to_path_buf(), message: e.to_string() }
}

fn parse_group(raw: &str) -> Result<GroupLabel, String> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "never" | "inf" | "na" => Ok(GroupLabel::Never),
        s => s.parse::<i64>().map(GroupLabel::At).map_err(|_| format!("`{raw}` is not a period or a never-treated marker")),
    }
}

/// Reads long-format rows, one per unit and period.
pub fn read_long_csv(path: &Path, cols: &Columns) -> Result<Vec<LongRecord>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err(path))?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Csv { path: path.to_path_buf(), message: format!("missing column `{name}`") })
    };
    let id = find(&cols.id)?;
    let time = find(&cols.time)?;
    let y = find(&cols.y)?;
    let z = find(&cols.z)?;
    let g = cols.g.as_deref().map(find).transpose()?;
    let d = cols.d.as_deref().map(find).transpose()?;
    let x: Vec<usize> = cols.x.iter().map(|n| find(n)).collect::<Result<_, _>>()?;

    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = row + 2;
        let bad = |col: &str, msg: String| CliError::Csv { path: path.to_path_buf(), message: format!("line {line}, column `{col}`: {msg}") };
        let num = |k: usize, col: &str| -> Result<f64, CliError> {
            rec[k].parse::<f64>().map_err(|_| bad(col, format!("`{}` is not a number", &rec[k])))
        };
        out.push(LongRecord {
            id: rec[id].to_string(),
            time: rec[time].parse::<i64>().map_err(|_| bad(&cols.time, format!("`{}` is not an integer period", &rec[time])))?,
            outcome: num(y, &cols.y)?,
            treatment: d.map(|k| num(k, cols.d.as_deref().unwrap())).transpose()?,
            group: g.map(|k| parse_group(&rec[k]).map_err(|m| bad(cols.g.as_deref().unwrap(), m))).transpose()?,
            z: num(z, &cols.z)?,
            x: x.iter().zip(&cols.x).map(|(&k, n)| num(k, n)).collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

/// Creates `dir` and refuses to clobber any of `names` unless `overwrite`.
pub fn prepare_output(dir: &Path, names: &[&str], overwrite: bool) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    if !overwrite {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::WouldOverwrite(p.clone()));
        }
    }
    Ok(paths)
}

/// Writes rows with a header even when `rows` is empty.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path).map_err(io_err(path))?));
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Csv { path: path.to_path_buf(), message: e.to_string() })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Long format with columns `id,time,y,g,z` followed by the covariates;
/// `g` is 0 for never-treated units.
pub fn write_panel_csv(path: &Path, panel: &PanelData) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(io_err(path))?));
    let mut header = vec!["id".to_string(), "time".into(), "y".into(), "g".into(), "z".into()];
    header.extend(panel.x_names().iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for i in 0..panel.n_units() {
        let g = match panel.group(i) {
            Group::Never => "0".to_string(),
            Group::Period(k) => panel.period_label(k).to_string(),
        };
        for t in 1..=panel.n_periods() {
            let mut rec = vec![
                panel.unit_ids()[i].clone(),
                panel.period_label(t).to_string(),
                panel.y(i, t).to_string(),
                g.clone(),
                panel.z()[i].to_string(),
            ];
            rec.extend(panel.x_sub(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}
