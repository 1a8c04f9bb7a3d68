//! Grid Stack Format: a JSON metadata file plus a raw payload of
//! little-endian `f32` values in `[time][lat][lon]` order. NaN marks a
//! missing cell. A `date,lat,lon,value` CSV form is accepted for small stacks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::GridStack;
use crate::error::{Error, Result};

/// Largest stack (in cells) accepted through the CSV route.
pub const CSV_MAX_CELLS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsfMetadata {
    pub dims: [usize; 3],
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    pub start_date: NaiveDate,
    pub units: String,
    pub payload: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub variable: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub level: String,
}

/// Payload file name used for a metadata path: `x.json` → `x.f32`.
pub fn payload_name(meta_path: &Path) -> String {
    let stem = meta_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "payload".into());
    format!("{stem}.f32")
}

pub(crate) fn encode_f32(values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Write `stack` as GSF: metadata at `path`, payload next to it.
pub fn save_grid_stack(stack: &GridStack, path: &Path) -> Result<()> {
    let payload = payload_name(path);
    let (t, nlat, nlon) = stack.values().dim();
    let meta = GsfMetadata {
        dims: [t, nlat, nlon],
        lats: stack.lats().to_vec(),
        lons: stack.lons().to_vec(),
        start_date: stack.start_date(),
        units: stack.units().to_string(),
        payload: payload.clone(),
        variable: stack.variable().to_string(),
        level: stack.level().to_string(),
    };
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let bytes = encode_f32(stack.values().iter().copied());
    let payload_path = dir.join(payload);
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))?;
    Ok(())
}

/// Load a stack from GSF metadata (or from CSV when the path ends in `.csv`).
pub fn load_grid_stack(path: &Path) -> Result<GridStack> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return load_grid_csv(path, "");
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: GsfMetadata =
        serde_json::from_str(&text).map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))?;
    let [t, nlat, nlon] = meta.dims;
    if meta.lats.len() != nlat || meta.lons.len() != nlon {
        return Err(Error::Dimension(format!(
            "dims say {nlat}x{nlon} but coordinates have {}x{}",
            meta.lats.len(),
            meta.lons.len()
        )));
    }
    let payload_path: PathBuf = path
        .parent()
        .map(|p| p.join(&meta.payload))
        .unwrap_or_else(|| PathBuf::from(&meta.payload));
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = t * nlat * nlon * 4;
    if bytes.len() != expected {
        return Err(Error::Dimension(format!(
            "payload has {} bytes, dims imply {expected}",
            bytes.len()
        )));
    }
    let values =
        Array3::from_shape_vec((t, nlat, nlon), decode_f32(&bytes)).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(
        GridStack::new(values, meta.lats, meta.lons, meta.start_date, meta.units)?
            .with_descriptor(meta.variable, meta.level),
    )
}

/// Write a stack as `date,lat,lon,value` rows (missing cells written as `NaN`).
pub fn save_grid_csv(stack: &GridStack, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "lat", "lon", "value"])?;
    let values = stack.values();
    for t in 0..stack.n_times() {
        let date = stack.date(t).to_string();
        for (i, lat) in stack.lats().iter().enumerate() {
            for (j, lon) in stack.lons().iter().enumerate() {
                w.write_record([
                    date.clone(),
                    lat.to_string(),
                    lon.to_string(),
                    values[[t, i, j]].to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Deserialize)]
struct CsvRow {
    date: NaiveDate,
    lat: f64,
    lon: f64,
    value: f32,
}

/// Read a `date,lat,lon,value` CSV. Absent rows become NaN; coordinates are
/// sorted ascending and the dates must form a gap-free daily axis.
pub fn load_grid_csv(path: &Path, units: &str) -> Result<GridStack> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let row: CsvRow = rec?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Metadata("csv has no rows".into()));
    }
    let key = |x: f64| x.to_bits();
    let mut lat_set: BTreeMap<u64, f64> = BTreeMap::new();
    let mut lon_set: BTreeMap<u64, f64> = BTreeMap::new();
    let mut date_set = std::collections::BTreeSet::new();
    for r in &rows {
        lat_set.insert(key(r.lat), r.lat);
        lon_set.insert(key(r.lon), r.lon);
        date_set.insert(r.date);
    }
    let mut lats: Vec<f64> = lat_set.into_values().collect();
    let mut lons: Vec<f64> = lon_set.into_values().collect();
    lats.sort_by(f64::total_cmp);
    lons.sort_by(f64::total_cmp);
    let dates: Vec<NaiveDate> = date_set.into_iter().collect();
    let start = dates[0];
    let t = (*dates.last().unwrap() - start).num_days() as usize + 1;
    if t != dates.len() {
        return Err(Error::InvalidStack("csv dates have gaps".into()));
    }
    if t * lats.len() * lons.len() > CSV_MAX_CELLS {
        return Err(Error::InvalidInput(format!(
            "csv stacks are limited to {CSV_MAX_CELLS} cells"
        )));
    }
    let mut values = Array3::from_elem((t, lats.len(), lons.len()), f32::NAN);
    for r in rows {
        let ti = (r.date - start).num_days() as usize;
        let i = lats.iter().position(|x| *x == r.lat).unwrap();
        let j = lons.iter().position(|x| *x == r.lon).unwrap();
        values[[ti, i, j]] = r.value;
    }
    GridStack::new(values, lats, lons, start, units)
}
