//! Point inference and tiled field generation.
//!
//! A tile is evaluated in pixel blocks that run in parallel. Each
//! prediction depends only on its own location, the backbone context and
//! the model parameters, never on which other pixels share a block, so
//! rasters are bitwise independent of block size and worker count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{forward_at, ForwardOpts, TargetPoint};
use crate::baselines::{era5_baseline, rbf_baseline_at};
use crate::dataio::checkpoint::encode_checkpoint;
use crate::dataio::{sample_coarse, Dataset};
use crate::error::{Error, Result};
use crate::geometry::EARTH_RADIUS_KM;
use crate::metrics::EvalRecord;
use crate::types::{
    Chip, ModelState, SlotState, Station, SurfaceFeature, SurfaceMode, WeatherVector, CHANNELS,
    CHANNEL_NAMES,
};

/// Meters per degree of latitude on the sphere used for distances.
pub const M_PER_DEG_LAT: f64 = EARTH_RADIUS_KM * 1000.0 * std::f64::consts::PI / 180.0;

/// Pixels per forward pass; larger requested blocks are subdivided so
/// memory stays bounded regardless of tile size.
const MAX_BLOCK_PIXELS: usize = 4096;

/// Hex SHA-256 of the serialized checkpoint; identifies the exact
/// parameters that produced an output.
pub fn checkpoint_hash(state: &ModelState) -> Result<String> {
    let bytes = encode_checkpoint(state)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Predict at arbitrary points for one timestamp. A single forward pass;
/// outputs at a backbone station location are model predictions, not the
/// station's observation (this is not an interpolator).
pub fn infer_points(
    dataset: &Dataset,
    state: &ModelState,
    t: i64,
    targets: &[TargetPoint],
) -> Result<Vec<WeatherVector>> {
    let run = forward_at(dataset, state, t, targets, &ForwardOpts::default())?;
    Ok(run.predictions)
}

fn resolve_stations<'a>(dataset: &'a Dataset, ids: &[String]) -> Result<Vec<&'a Station>> {
    let mut ids = ids.to_vec();
    ids.sort();
    ids.iter()
        .map(|id| {
            dataset
                .station(id)
                .ok_or_else(|| Error::PartitionError(format!("unknown station {id}")))
        })
        .collect()
}

fn record(st: &Station, ti: usize, t: i64, predicted: [f64; CHANNELS]) -> EvalRecord {
    let mut valid = [false; CHANNELS];
    for c in 0..CHANNELS {
        valid[c] = st.series.states[ti][c] == SlotState::Observed;
    }
    EvalRecord {
        station_id: st.id.clone(),
        lat: st.lat,
        lon: st.lon,
        t,
        observed: st.series.values[ti],
        valid,
        predicted,
    }
}

/// Model predictions at the given stations over every timestamp, scored
/// against observed slots only. Hours where too few backbone stations
/// report are skipped.
pub fn model_eval_records(
    dataset: &Dataset,
    state: &ModelState,
    ids: &[String],
) -> Result<Vec<EvalRecord>> {
    let stations = resolve_stations(dataset, ids)?;
    let targets: Vec<TargetPoint> = stations
        .iter()
        .map(|st| TargetPoint {
            lat: st.lat,
            lon: st.lon,
            surface: if state.config.surface_mode.is_none() { None } else { st.surface.clone() },
        })
        .collect();
    let per_hour: Vec<Option<Vec<EvalRecord>>> = dataset
        .coarse
        .times
        .par_iter()
        .enumerate()
        .map(|(ti, &t)| match infer_points(dataset, state, t, &targets) {
            Ok(preds) => Ok(Some(
                stations
                    .iter()
                    .zip(&preds)
                    .map(|(st, p)| record(st, ti, t, p.as_array()))
                    .collect(),
            )),
            Err(Error::InsufficientStations { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_hour.into_iter().flatten().flatten().collect())
}

/// Coarse-grid baseline records at the given stations, every timestamp.
pub fn era5_eval_records(dataset: &Dataset, ids: &[String]) -> Result<Vec<EvalRecord>> {
    let stations = resolve_stations(dataset, ids)?;
    let mut out = Vec::new();
    for (ti, &t) in dataset.coarse.times.iter().enumerate() {
        for st in &stations {
            let p = era5_baseline(dataset, st.lat, st.lon, t)?;
            out.push(record(st, ti, t, p.as_array()));
        }
    }
    Ok(out)
}

/// Station-interpolation baseline records at the given stations. Hours
/// where any channel has fewer than two valid backbone stations are
/// skipped.
pub fn rbf_eval_records(dataset: &Dataset, ids: &[String]) -> Result<Vec<EvalRecord>> {
    let stations = resolve_stations(dataset, ids)?;
    let queries: Vec<(f64, f64)> = stations.iter().map(|st| (st.lat, st.lon)).collect();
    let mut out = Vec::new();
    for (ti, &t) in dataset.coarse.times.iter().enumerate() {
        match rbf_baseline_at(dataset, t, &queries) {
            Ok(preds) => {
                for (st, p) in stations.iter().zip(&preds) {
                    out.push(record(st, ti, t, p.as_array()));
                }
            }
            Err(Error::InsufficientStations { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Requested raster: geometry, timestamp, pixel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    /// North-west corner of the tile.
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Pixel edge in meters.
    pub pixel_size_m: f64,
    /// Pixels east-west.
    pub width: usize,
    /// Pixels north-south.
    pub height: usize,
    pub t: i64,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            origin_lat: 0.0,
            origin_lon: 0.0,
            pixel_size_m: 10.0,
            width: 1024,
            height: 1024,
            t: 0,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size_m > 0.0) || !self.pixel_size_m.is_finite() {
            return Err(Error::ConfigMismatch(format!("pixel size {} m", self.pixel_size_m)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::ConfigMismatch("empty tile".into()));
        }
        if !self.origin_lat.is_finite() || !self.origin_lon.is_finite() {
            return Err(Error::ConfigMismatch("non-finite tile origin".into()));
        }
        Ok(())
    }

    /// Center of pixel (row, col) on a flat north-up approximation
    /// around the tile origin. Rows run south from the north-west
    /// corner, columns east.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let lat = self.origin_lat - (row as f64 + 0.5) * self.pixel_size_m / M_PER_DEG_LAT;
        let lon = self.origin_lon
            + (col as f64 + 0.5) * self.pixel_size_m
                / (M_PER_DEG_LAT * self.origin_lat.to_radians().cos());
        (lat, lon)
    }
}

/// Where per-pixel surface descriptors come from.
pub enum TileSurface<'a> {
    /// No surface input (surface-free models only).
    None,
    /// Embedding as a function of location (synthetic worlds).
    EmbeddingFn(&'a (dyn Fn(f64, f64) -> Vec<f64> + Sync)),
    /// Chip stack as a function of location (synthetic worlds).
    ChipFn(&'a (dyn Fn(f64, f64) -> Vec<Chip> + Sync)),
    /// Precomputed embeddings, row-major by pixel, `dim` floats each.
    EmbeddingRaster { dim: usize, values: Vec<f64> },
}

/// Origin of a raster: which parameters, when, and how stations were
/// connected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_sha256: String,
    pub timestamp: i64,
    pub connectivity: String,
}

/// Inferred field: `channels` planes of `height`×`width` f32 values,
/// row-major from the north-west pixel, channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldRaster {
    pub spec: TileSpec,
    pub channels: usize,
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RasterHeader {
    width: usize,
    height: usize,
    origin_lat: f64,
    origin_lon: f64,
    pixel_size_m: f64,
    timestamp: i64,
    channels: Vec<String>,
    layout: String,
    projection: String,
    provenance: Provenance,
}

impl FieldRaster {
    pub fn at(&self, row: usize, col: usize) -> [f32; CHANNELS] {
        let base = (row * self.spec.width + col) * self.channels;
        let mut out = [0.0f32; CHANNELS];
        out.copy_from_slice(&self.values[base..base + self.channels]);
        out
    }

    /// Writes `<stem>.f32` (little-endian floats) and `<stem>.json`
    /// (georeference and provenance).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let header = RasterHeader {
            width: self.spec.width,
            height: self.spec.height,
            origin_lat: self.spec.origin_lat,
            origin_lon: self.spec.origin_lon,
            pixel_size_m: self.spec.pixel_size_m,
            timestamp: self.spec.t,
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            layout: "row-major from north-west pixel, channel-minor, f32 little-endian".into(),
            projection: "north-up flat approximation about the tile origin".into(),
            provenance: self.provenance.clone(),
        };
        let data_path = dir.join(format!("{stem}.f32"));
        let header_path = dir.join(format!("{stem}.json"));
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&data_path, bytes)?;
        std::fs::write(&header_path, serde_json::to_string_pretty(&header)?)?;
        Ok((data_path, header_path))
    }

    pub fn read(data_path: &Path, header_path: &Path) -> Result<FieldRaster> {
        let header: RasterHeader = serde_json::from_str(&std::fs::read_to_string(header_path)?)?;
        let bytes = std::fs::read(data_path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::EncodingError("raster byte length not a multiple of 4".into()));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let channels = header.channels.len();
        if values.len() != header.width * header.height * channels {
            return Err(Error::ShapeError(format!(
                "raster holds {} floats for {}x{}x{}",
                values.len(),
                header.height,
                header.width,
                channels
            )));
        }
        Ok(FieldRaster {
            spec: TileSpec {
                origin_lat: header.origin_lat,
                origin_lon: header.origin_lon,
                pixel_size_m: header.pixel_size_m,
                width: header.width,
                height: header.height,
                t: header.timestamp,
            },
            channels,
            values,
            provenance: header.provenance,
        })
    }
}

fn surface_for_pixel(
    mode: &SurfaceMode,
    source: &TileSurface,
    lat: f64,
    lon: f64,
    pixel: usize,
) -> Result<Option<SurfaceFeature>> {
    match mode {
        SurfaceMode::None => Ok(None),
        SurfaceMode::Embedding { dim } => match source {
            TileSurface::EmbeddingFn(f) => Ok(Some(SurfaceFeature::Embedding(f(lat, lon)))),
            TileSurface::EmbeddingRaster { dim: rdim, values } => {
                if rdim != dim {
                    return Err(Error::DimensionMismatch { expected: *dim, got: *rdim });
                }
                let base = pixel * rdim;
                Ok(Some(SurfaceFeature::Embedding(values[base..base + rdim].to_vec())))
            }
            TileSurface::ChipFn(_) => {
                Err(Error::SurfaceModeMismatch("model wants embeddings, source yields chips".into()))
            }
            TileSurface::None => {
                Err(Error::SurfaceModeMismatch("model wants embeddings, no surface source".into()))
            }
        },
        SurfaceMode::Chips { .. } => match source {
            TileSurface::ChipFn(f) => Ok(Some(SurfaceFeature::ChipStack(f(lat, lon)))),
            _ => Err(Error::SurfaceModeMismatch("model wants chips, source yields none".into())),
        },
    }
}

/// Infer a full tile. `block` is the requested pixels-per-block edge;
/// blocks are capped at an internal budget and evaluated in parallel.
pub fn infer_tile(
    dataset: &Dataset,
    state: &ModelState,
    tile: &TileSpec,
    surface: &TileSurface,
    block: usize,
) -> Result<FieldRaster> {
    tile.validate()?;
    if block == 0 {
        return Err(Error::ConfigMismatch("block size 0".into()));
    }
    // Fail fast when the tile leaves the coarse grid: check the corner
    // pixel centers before spending time on blocks.
    for (r, c) in [(0, 0), (0, tile.width - 1), (tile.height - 1, 0), (tile.height - 1, tile.width - 1)] {
        let (la, lo) = tile.pixel_center(r, c);
        sample_coarse(&dataset.coarse, la, lo, tile.t)?;
    }
    if let TileSurface::EmbeddingRaster { dim, values } = surface {
        if values.len() != tile.width * tile.height * dim {
            return Err(Error::ShapeError(format!(
                "surface raster holds {} floats for {} pixels of dim {}",
                values.len(),
                tile.width * tile.height,
                dim
            )));
        }
    }

    let n_pixels = tile.width * tile.height;
    let chunk = (block * block).min(MAX_BLOCK_PIXELS).max(1);
    let starts: Vec<usize> = (0..n_pixels).step_by(chunk).collect();
    let parts: Vec<Vec<f32>> = starts
        .par_iter()
        .map(|&start| -> Result<Vec<f32>> {
            let end = (start + chunk).min(n_pixels);
            let mut targets = Vec::with_capacity(end - start);
            for p in start..end {
                let (row, col) = (p / tile.width, p % tile.width);
                let (la, lo) = tile.pixel_center(row, col);
                targets.push(TargetPoint {
                    lat: la,
                    lon: lo,
                    surface: surface_for_pixel(&state.config.surface_mode, surface, la, lo, p)?,
                });
            }
            let preds = infer_points(dataset, state, tile.t, &targets)?;
            let mut out = Vec::with_capacity((end - start) * CHANNELS);
            for v in preds {
                for x in v.as_array() {
                    out.push(x as f32);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::with_capacity(n_pixels * CHANNELS);
    for part in parts {
        values.extend_from_slice(&part);
    }
    for v in &values {
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite raster value".into()));
        }
    }
    Ok(FieldRaster {
        spec: tile.clone(),
        channels: CHANNELS,
        values,
        provenance: Provenance {
            checkpoint_sha256: checkpoint_hash(state)?,
            timestamp: tile.t,
            connectivity: state.config.connectivity.label(),
        },
    })
}
