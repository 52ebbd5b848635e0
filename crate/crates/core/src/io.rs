//! Dataset and result files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{MuneError, Result};
use crate::grid::GridPosterior;
use crate::model::{reorder_series, Record, StimulusResponseSeries};

pub const CSV_COLUMNS: [&str; 4] = ["stimulus_volts", "response_mN", "is_baseline", "is_supramaximal"];

fn parse_flag(text: &str) -> Option<bool> {
    match text.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

/// Reads a dataset CSV and re-orders it for assimilation.
pub fn read_series_csv(path: &Path) -> Result<StimulusResponseSeries> {
    let file = File::open(path).map_err(|e| MuneError::validation(format!("cannot open {}: {e}", path.display())))?;
    read_series(file)
}

pub fn read_series<R: std::io::Read>(reader: R) -> Result<StimulusResponseSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut columns = [0usize; 4];
    for (slot, name) in columns.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MuneError::validation(format!("missing column {name:?}")))?;
    }
    let mut raw = Vec::new();
    let mut baseline = Vec::new();
    let mut supra = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| MuneError::validation(format!("row {}: {e}", i + 2)))?;
        let field = |k: usize| row.get(columns[k]).unwrap_or("");
        let number = |k: usize| -> Result<f64> {
            field(k).parse::<f64>().map_err(|_| {
                MuneError::validation(format!("row {} column {}: {:?} is not a number", i + 2, CSV_COLUMNS[k], field(k)))
            })
        };
        let flag = |k: usize| -> Result<bool> {
            parse_flag(field(k)).ok_or_else(|| {
                MuneError::validation(format!("row {} column {}: {:?} is not a 0/1 flag", i + 2, CSV_COLUMNS[k], field(k)))
            })
        };
        raw.push(Record::new(number(0)?, number(1)?));
        baseline.push(flag(2)?);
        supra.push(flag(3)?);
    }
    reorder_series(&raw, &baseline, &supra)
}

/// Writes a series in assimilation order with its flags.
pub fn write_series_csv(path: &Path, series: &StimulusResponseSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    let tau = series.tau();
    for (i, r) in series.records().iter().enumerate() {
        w.write_record([
            r.stimulus.to_string(),
            r.response.to_string(),
            ((i + 1 < tau) as u8).to_string(),
            ((i + 1 == tau) as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes `(eta, lambda, log_value)` for every lattice vertex.
pub fn write_grid_csv(path: &Path, grid: &GridPosterior) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["eta", "lambda", "log_value"])?;
    let lat = grid.lattice();
    for (i, v) in grid.log_values().iter().enumerate() {
        let (eta, lambda) = lat.coords(i);
        w.write_record([eta.to_string(), lambda.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes rows of plain numeric columns under the given header.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_and_reorders() {
        let text = "stimulus_volts,response_mN,is_baseline,is_supramaximal\n\
                    20,31.0,0,0\n0,0.1,1,0\n40,62.0,0,1\n10,0.2,0,0\n0,-0.1,true,false\n";
        let s = read_series(text.as_bytes()).unwrap();
        assert_eq!(s.tau(), 3);
        let stimuli: Vec<f64> = s.records().iter().map(|r| r.stimulus).collect();
        assert_eq!(stimuli, vec![0.0, 0.0, 40.0, 10.0, 20.0]);
    }

    #[test]
    fn diagnostics_name_row_and_column() {
        let text = "stimulus_volts,response_mN,is_baseline,is_supramaximal\n0,0.1,1,0\n40,abc,0,1\n";
        let err = read_series(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("response_mN"), "{err}");
        let err = read_series("stimulus_volts,response_mN\n0,1\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("is_baseline"), "{err}");
        let text = "stimulus_volts,response_mN,is_baseline,is_supramaximal\n0,0.1,2,0\n";
        assert!(read_series(text.as_bytes()).unwrap_err().to_string().contains("flag"));
    }
}
