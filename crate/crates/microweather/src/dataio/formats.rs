//! Columnar text formats for stations, surface features and the coarse
//! grid, plus the per-pixel embedding raster used by tiled inference.
//!
//! All files are plain CSV so fixtures stay diff-able. Floats are written
//! with Rust's shortest round-trip formatting, so write -> read is exact.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    Chip, CoarseField, ResolutionTag, Series, SlotState, Station, WeatherVector,
    wind_from_speed_dir, wind_to_speed_dir, CHANNELS, CH_U, CH_V,
};

pub const STATIONS_HEADER: &str =
    "station_id,lat,lon,timestamp,temp_c,dewpoint_c,wind_speed_ms,wind_dir_deg,quality_flag";
pub const COARSE_GRID_HEADER: &str = "lat0,lon0,dlat,dlon,nlat,nlon";
pub const COARSE_ROWS_HEADER: &str = "timestamp,i_lat,i_lon,temp_c,dewpoint_c,u_ms,v_ms";
pub const CHIPS_MANIFEST_HEADER: &str = "station_id,band,path,resolution_tag";

/// Ingestion summary returned alongside the parsed stations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub n_stations: usize,
    pub n_rows: usize,
    pub n_bad_flag_rows: usize,
    pub n_missing_slots: usize,
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::SchemaError(format!("line {}: bad {} '{}'", line, what, field)))
}

/// Empty or NaN fields are missing; anything else must parse.
fn parse_optional(field: &str, what: &str, line: usize) -> Result<Option<f64>> {
    let t = field.trim();
    if t.is_empty() {
        return Ok(None);
    }
    let v = parse_f64(t, what, line)?;
    if v.is_nan() {
        return Ok(None);
    }
    Ok(Some(v))
}

/// Parse the stations file against a fixed hourly time axis. Series are
/// densified onto that axis; rows flagged `bad` contribute nothing; the
/// quality fraction counts observed variable slots (temperature, dewpoint,
/// wind pair) out of 3 per timestamp.
pub fn read_stations_csv(path: &Path, times: &[i64]) -> Result<(Vec<Station>, IngestReport)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::SchemaError("stations file is empty".into()))??;
    if header.trim() != STATIONS_HEADER {
        return Err(Error::SchemaError(format!(
            "stations header mismatch: got '{}'",
            header.trim()
        )));
    }
    if times.is_empty() {
        return Err(Error::TimeAxisError("empty time axis".into()));
    }
    let t0 = times[0];
    let t_len = times.len();

    struct Acc {
        lat: f64,
        lon: f64,
        values: Vec<[f64; CHANNELS]>,
        states: Vec<[SlotState; CHANNELS]>,
        seen: Vec<bool>,
    }
    let mut accs: BTreeMap<String, Acc> = BTreeMap::new();
    let mut report = IngestReport::default();

    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::SchemaError(format!(
                "line {}: expected 9 fields, got {}",
                lineno,
                f.len()
            )));
        }
        report.n_rows += 1;
        let id = f[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::SchemaError(format!("line {}: empty station id", lineno)));
        }
        let lat = parse_f64(f[1], "lat", lineno)?;
        let lon = parse_f64(f[2], "lon", lineno)?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::SchemaError(format!(
                "line {}: coordinates ({}, {}) out of range",
                lineno, lat, lon
            )));
        }
        let ts: i64 = f[3]
            .trim()
            .parse()
            .map_err(|_| Error::SchemaError(format!("line {}: bad timestamp '{}'", lineno, f[3])))?;
        if ts < t0 || ts >= t0 + t_len as i64 {
            return Err(Error::TimeAxisError(format!(
                "station {} has timestamp {} outside the coarse axis [{}, {}]",
                id,
                ts,
                t0,
                t0 + t_len as i64 - 1
            )));
        }
        let ti = (ts - t0) as usize;

        let acc = accs.entry(id.clone()).or_insert_with(|| Acc {
            lat,
            lon,
            values: vec![[0.0; CHANNELS]; t_len],
            states: vec![[SlotState::Missing; CHANNELS]; t_len],
            seen: vec![false; t_len],
        });
        if acc.lat != lat || acc.lon != lon {
            return Err(Error::SchemaError(format!(
                "line {}: station {} changes coordinates",
                lineno, id
            )));
        }
        if acc.seen[ti] {
            return Err(Error::SchemaError(format!(
                "line {}: duplicate row for station {} at t={}",
                lineno, id, ts
            )));
        }
        acc.seen[ti] = true;

        let flag = f[8].trim();
        match flag {
            "good" => {}
            "bad" => {
                report.n_bad_flag_rows += 1;
                continue;
            }
            other => {
                return Err(Error::SchemaError(format!(
                    "line {}: quality_flag '{}' (expected good or bad)",
                    lineno, other
                )))
            }
        }

        if let Some(t) = parse_optional(f[4], "temp_c", lineno)? {
            acc.values[ti][0] = t;
            acc.states[ti][0] = SlotState::Observed;
        }
        if let Some(d) = parse_optional(f[5], "dewpoint_c", lineno)? {
            acc.values[ti][1] = d;
            acc.states[ti][1] = SlotState::Observed;
        }
        let speed = parse_optional(f[6], "wind_speed_ms", lineno)?;
        let dir = parse_optional(f[7], "wind_dir_deg", lineno)?;
        if let (Some(s), Some(d)) = (speed, dir) {
            let (u, v) = wind_from_speed_dir(s, d)?;
            acc.values[ti][CH_U] = u;
            acc.values[ti][CH_V] = v;
            acc.states[ti][CH_U] = SlotState::Observed;
            acc.states[ti][CH_V] = SlotState::Observed;
        }
    }

    let mut stations = Vec::with_capacity(accs.len());
    for (id, acc) in accs {
        let mut observed = 0usize;
        for st in &acc.states {
            if st[0].observed() {
                observed += 1;
            }
            if st[1].observed() {
                observed += 1;
            }
            if st[CH_U].observed() {
                observed += 1;
            }
        }
        let total = 3 * t_len;
        report.n_missing_slots += total - observed;
        let series = Series { times: times.to_vec(), values: acc.values, states: acc.states };
        series.validate_time_axis()?;
        stations.push(Station {
            id,
            lat: acc.lat,
            lon: acc.lon,
            quality_fraction: observed as f64 / total as f64,
            series,
            surface: None,
        });
    }
    report.n_stations = stations.len();
    Ok((stations, report))
}

/// Write stations with one row per timestamp; missing slots become empty
/// fields. Wind is stored as speed/direction, matching ingestion.
pub fn write_stations_csv(path: &Path, stations: &[Station]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", STATIONS_HEADER)?;
    for st in stations {
        for (i, &t) in st.series.times.iter().enumerate() {
            let v = st.series.values[i];
            let s = st.series.states[i];
            let temp = if s[0].usable() { v[0].to_string() } else { String::new() };
            let dew = if s[1].usable() { v[1].to_string() } else { String::new() };
            let (speed, dir) = if s[CH_U].usable() {
                let (sp, dr) = wind_to_speed_dir(v[CH_U], v[CH_V]);
                (sp.to_string(), dr.to_string())
            } else {
                (String::new(), String::new())
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},good",
                st.id, st.lat, st.lon, t, temp, dew, speed, dir
            )?;
        }
    }
    Ok(())
}

pub fn read_coarse_csv(path: &Path) -> Result<CoarseField> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let h1 = lines
        .next()
        .ok_or_else(|| Error::SchemaError("coarse file is empty".into()))??;
    if h1.trim() != COARSE_GRID_HEADER {
        return Err(Error::SchemaError(format!("coarse grid header mismatch: '{}'", h1.trim())));
    }
    let gline = lines
        .next()
        .ok_or_else(|| Error::SchemaError("coarse file missing grid line".into()))??;
    let g: Vec<&str> = gline.split(',').collect();
    if g.len() != 6 {
        return Err(Error::SchemaError("coarse grid line needs 6 fields".into()));
    }
    let lat0 = parse_f64(g[0], "lat0", 2)?;
    let lon0 = parse_f64(g[1], "lon0", 2)?;
    let dlat = parse_f64(g[2], "dlat", 2)?;
    let dlon = parse_f64(g[3], "dlon", 2)?;
    let nlat: usize = g[4].trim().parse().map_err(|_| Error::SchemaError("bad nlat".into()))?;
    let nlon: usize = g[5].trim().parse().map_err(|_| Error::SchemaError("bad nlon".into()))?;
    let h2 = lines
        .next()
        .ok_or_else(|| Error::SchemaError("coarse file missing row header".into()))??;
    if h2.trim() != COARSE_ROWS_HEADER {
        return Err(Error::SchemaError(format!("coarse row header mismatch: '{}'", h2.trim())));
    }

    let mut rows: Vec<(i64, usize, usize, [f64; CHANNELS])> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 4;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::SchemaError(format!("line {}: expected 7 fields", lineno)));
        }
        let ts: i64 = f[0]
            .trim()
            .parse()
            .map_err(|_| Error::SchemaError(format!("line {}: bad timestamp", lineno)))?;
        let ilat: usize = f[1]
            .trim()
            .parse()
            .map_err(|_| Error::SchemaError(format!("line {}: bad i_lat", lineno)))?;
        let ilon: usize = f[2]
            .trim()
            .parse()
            .map_err(|_| Error::SchemaError(format!("line {}: bad i_lon", lineno)))?;
        if ilat >= nlat || ilon >= nlon {
            return Err(Error::SchemaError(format!("line {}: cell index out of range", lineno)));
        }
        let mut vals = [0.0; CHANNELS];
        for (ci, name) in ["temp_c", "dewpoint_c", "u_ms", "v_ms"].iter().enumerate() {
            vals[ci] = parse_f64(f[3 + ci], name, lineno)?;
            if !vals[ci].is_finite() {
                return Err(Error::SchemaError(format!(
                    "line {}: non-finite {} (coarse field must be dense and valid)",
                    lineno, name
                )));
            }
        }
        rows.push((ts, ilat, ilon, vals));
    }
    if rows.is_empty() {
        return Err(Error::SchemaError("coarse file has no data rows".into()));
    }

    let tmin = rows.iter().map(|r| r.0).min().unwrap();
    let tmax = rows.iter().map(|r| r.0).max().unwrap();
    let t_len = (tmax - tmin + 1) as usize;
    let times: Vec<i64> = (tmin..=tmax).collect();
    let mut field = CoarseField {
        lat0,
        lon0,
        dlat,
        dlon,
        nlat,
        nlon,
        times,
        values: vec![f64::NAN; t_len * nlat * nlon * CHANNELS],
    };
    let mut seen = vec![false; t_len * nlat * nlon];
    for (ts, ilat, ilon, vals) in rows {
        let ti = (ts - tmin) as usize;
        let cell = (ti * nlat + ilat) * nlon + ilon;
        if seen[cell] {
            return Err(Error::SchemaError(format!(
                "duplicate coarse cell t={} i_lat={} i_lon={}",
                ts, ilat, ilon
            )));
        }
        seen[cell] = true;
        field.set_value(ti, ilat, ilon, vals);
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::SchemaError(format!(
            "coarse grid is not dense: cell index {} absent",
            missing
        )));
    }
    field.validate()?;
    Ok(field)
}

pub fn write_coarse_csv(path: &Path, field: &CoarseField) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", COARSE_GRID_HEADER)?;
    writeln!(
        out,
        "{},{},{},{},{},{}",
        field.lat0, field.lon0, field.dlat, field.dlon, field.nlat, field.nlon
    )?;
    writeln!(out, "{}", COARSE_ROWS_HEADER)?;
    for (ti, &t) in field.times.iter().enumerate() {
        for ilat in 0..field.nlat {
            for ilon in 0..field.nlon {
                let v = field.value_at(ti, ilat, ilon);
                writeln!(out, "{},{},{},{},{},{},{}", t, ilat, ilon, v[0], v[1], v[2], v[3])?;
            }
        }
    }
    Ok(())
}

/// Read the embedding surface file. Returns the map and the declared
/// dimensionality from the header.
pub fn read_surface_csv(path: &Path) -> Result<(BTreeMap<String, Vec<f64>>, usize)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::SchemaError("surface file is empty".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.is_empty() || cols[0] != "station_id" {
        return Err(Error::SchemaError("surface header must start with station_id".into()));
    }
    let dim = cols.len() - 1;
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("e{}", i) {
            return Err(Error::SchemaError(format!(
                "surface header column {} is '{}', expected 'e{}'",
                i + 1,
                c,
                i
            )));
        }
    }
    if dim == 0 {
        return Err(Error::SchemaError("surface file declares zero dimensions".into()));
    }
    let mut out = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != dim + 1 {
            return Err(Error::DimensionMismatch { expected: dim, got: f.len() - 1 });
        }
        let id = f[0].trim().to_string();
        let mut v = Vec::with_capacity(dim);
        for (i, field) in f[1..].iter().enumerate() {
            let x = parse_f64(field, &format!("e{}", i), lineno)?;
            if !x.is_finite() {
                return Err(Error::SchemaError(format!(
                    "line {}: non-finite embedding component",
                    lineno
                )));
            }
            v.push(x);
        }
        if out.insert(id.clone(), v).is_some() {
            return Err(Error::SchemaError(format!("duplicate surface row for {}", id)));
        }
    }
    Ok((out, dim))
}

pub fn write_surface_csv(path: &Path, entries: &BTreeMap<String, Vec<f64>>, dim: usize) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("station_id");
    for i in 0..dim {
        header.push_str(&format!(",e{}", i));
    }
    writeln!(out, "{}", header)?;
    for (id, v) in entries {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
        let mut row = id.clone();
        for x in v {
            row.push(',');
            row.push_str(&x.to_string());
        }
        writeln!(out, "{}", row)?;
    }
    Ok(())
}

fn read_chip_file(path: &Path) -> Result<(usize, Vec<f64>)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let size: usize = lines
        .next()
        .ok_or_else(|| Error::ShapeError(format!("chip file {} is empty", path.display())))??
        .trim()
        .parse()
        .map_err(|_| Error::ShapeError(format!("chip file {} has a bad size line", path.display())))?;
    let mut data = Vec::with_capacity(size * size);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::ShapeError(format!("chip file {} has a bad value", path.display()))
            })?;
            data.push(v);
        }
    }
    if data.len() != size * size {
        return Err(Error::ShapeError(format!(
            "chip file {}: {} values for size {}",
            path.display(),
            data.len(),
            size
        )));
    }
    Ok((size, data))
}

fn write_chip_file(path: &Path, chip: &Chip) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", chip.size)?;
    for r in 0..chip.size {
        let row: Vec<String> =
            chip.data[r * chip.size..(r + 1) * chip.size].iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Read the chips manifest; chip paths are resolved relative to the
/// manifest's directory.
pub fn read_chips_manifest(path: &Path) -> Result<BTreeMap<String, Vec<Chip>>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::SchemaError("chips manifest is empty".into()))??;
    if header.trim() != CHIPS_MANIFEST_HEADER {
        return Err(Error::SchemaError(format!(
            "chips manifest header mismatch: '{}'",
            header.trim()
        )));
    }
    let mut out: BTreeMap<String, Vec<Chip>> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::SchemaError(format!("manifest line {}: expected 4 fields", lineno)));
        }
        let resolution = match f[3].trim() {
            "fine" => ResolutionTag::Fine,
            "coarse" => ResolutionTag::Coarse,
            other => {
                return Err(Error::SchemaError(format!(
                    "manifest line {}: resolution_tag '{}' (expected fine or coarse)",
                    lineno, other
                )))
            }
        };
        let (size, data) = read_chip_file(&base.join(f[2].trim()))?;
        out.entry(f[0].trim().to_string()).or_default().push(Chip {
            band: f[1].trim().to_string(),
            resolution,
            size,
            data,
        });
    }
    Ok(out)
}

/// Write per-station chips under `dir/chips/` and the manifest at
/// `dir/chips_manifest.csv`.
pub fn write_chips(dir: &Path, chips: &BTreeMap<String, Vec<Chip>>) -> Result<()> {
    let chip_dir = dir.join("chips");
    std::fs::create_dir_all(&chip_dir)?;
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(dir.join("chips_manifest.csv"))?);
    writeln!(out, "{}", CHIPS_MANIFEST_HEADER)?;
    for (id, stack) in chips {
        for chip in stack {
            let rel = format!("chips/{}_{}.chip", id, chip.band);
            write_chip_file(&dir.join(&rel), chip)?;
            let tag = match chip.resolution {
                ResolutionTag::Fine => "fine",
                ResolutionTag::Coarse => "coarse",
            };
            writeln!(out, "{},{},{},{}", id, chip.band, rel, tag)?;
        }
    }
    Ok(())
}

/// Dense per-pixel embedding grid for real-data tile inference.
/// Stored as `<base>.json` (dims) plus `<base>.bin` (f32, pixel-major
/// [row][col][dim]).
#[derive(Debug, Clone)]
pub struct EmbeddingRaster {
    pub dim: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRasterHeader {
    dim: usize,
    width: usize,
    height: usize,
}

impl EmbeddingRaster {
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f64> {
        let base = (row * self.width + col) * self.dim;
        self.data[base..base + self.dim].iter().map(|&v| v as f64).collect()
    }
}

pub fn read_embedding_raster(base: &Path) -> Result<EmbeddingRaster> {
    let header: EmbeddingRasterHeader =
        serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
    let bytes = std::fs::read(base.with_extension("bin"))?;
    let want = header.dim * header.width * header.height * 4;
    if bytes.len() != want {
        return Err(Error::SchemaError(format!(
            "embedding raster has {} bytes, expected {}",
            bytes.len(),
            want
        )));
    }
    let data: Vec<f32> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(EmbeddingRaster { dim: header.dim, width: header.width, height: header.height, data })
}

pub fn write_embedding_raster(base: &Path, raster: &EmbeddingRaster) -> Result<()> {
    let header = EmbeddingRasterHeader {
        dim: raster.dim,
        width: raster.width,
        height: raster.height,
    };
    std::fs::write(base.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(raster.data.len() * 4);
    for v in &raster.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(base.with_extension("bin"), bytes)?;
    Ok(())
}

/// Convenience for tests: a WeatherVector from a coarse cell array.
pub fn weather_from_channels(v: [f64; CHANNELS]) -> WeatherVector {
    WeatherVector::from_array(v)
}
