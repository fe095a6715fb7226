//! CSV and file helpers shared by the experiment drivers.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

/// Writes a header row and data rows.
pub fn write_csv<W: Write, I, R>(w: W, header: &[&str], rows: I) -> csv::Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for row in rows {
        out.write_record(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a file through a temporary sibling and a rename, so readers never
/// see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Reads the `column` of a headed CSV as floats.
pub fn read_csv_column(path: &Path, column: &str) -> Result<Vec<f64>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = rdr.headers().map_err(|e| format!("{}: {e}", path.display()))?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| format!("{}: no column named {column}", path.display()))?;
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| format!("{}: {e}", path.display()))?;
            r[idx].parse::<f64>().map_err(|e| format!("{}: bad value {:?}: {e}", path.display(), &r[idx]))
        })
        .collect()
}
