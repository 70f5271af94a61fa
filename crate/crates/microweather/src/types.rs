//! Shared domain model: weather vectors, stations, grids, partitions and
//! model configuration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Channel order used everywhere: temperature, dewpoint, wind u, wind v.
pub const CHANNELS: usize = 4;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["temp", "dewpoint", "u", "v"];

pub const CH_TEMP: usize = 0;
pub const CH_DEWPOINT: usize = 1;
pub const CH_U: usize = 2;
pub const CH_V: usize = 3;

/// One multivariate reading in physical units. u is west-to-east, v is
/// south-to-north. Validity is tracked separately (see [`SlotState`]);
/// dewpoint above temperature is deliberately allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherVector {
    pub temp_c: f64,
    pub dewpoint_c: f64,
    pub u_ms: f64,
    pub v_ms: f64,
}

impl WeatherVector {
    pub fn zeros() -> Self {
        WeatherVector { temp_c: 0.0, dewpoint_c: 0.0, u_ms: 0.0, v_ms: 0.0 }
    }

    pub fn from_array(a: [f64; CHANNELS]) -> Self {
        WeatherVector { temp_c: a[0], dewpoint_c: a[1], u_ms: a[2], v_ms: a[3] }
    }

    pub fn as_array(&self) -> [f64; CHANNELS] {
        [self.temp_c, self.dewpoint_c, self.u_ms, self.v_ms]
    }
}

/// Validity of one channel at one timestamp. `Filled` values were
/// reconstructed by interpolation: usable as model input, never scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Observed,
    Filled,
    Missing,
}

impl SlotState {
    /// Usable as a network input.
    pub fn usable(self) -> bool {
        !matches!(self, SlotState::Missing)
    }

    /// Scorable by metrics (true observations only).
    pub fn observed(self) -> bool {
        matches!(self, SlotState::Observed)
    }
}

/// Hourly multivariate time series with per-channel validity.
/// Missing slots hold 0.0 in `values`; consumers must check `states`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Series {
    pub times: Vec<i64>,
    pub values: Vec<[f64; CHANNELS]>,
    pub states: Vec<[SlotState; CHANNELS]>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Timestamps strictly increasing with one-hour spacing.
    pub fn validate_time_axis(&self) -> Result<()> {
        if self.values.len() != self.times.len() || self.states.len() != self.times.len() {
            return Err(Error::TimeAxisError("series arrays have mismatched lengths".into()));
        }
        for w in self.times.windows(2) {
            if w[1] - w[0] != 1 {
                return Err(Error::TimeAxisError(format!(
                    "non-hourly step between t={} and t={}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, t: i64) -> Option<usize> {
        if self.times.is_empty() {
            return None;
        }
        let first = self.times[0];
        if t < first {
            return None;
        }
        let idx = (t - first) as usize;
        if idx < self.times.len() {
            Some(idx)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionTag {
    Fine,
    Coarse,
}

/// One square image band attached to a station or target location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chip {
    pub band: String,
    pub resolution: ResolutionTag,
    pub size: usize,
    pub data: Vec<f64>,
}

/// Expected chip layout for a dataset. Fine size must be an integer
/// multiple of the coarse size so coarse bands can be resampled onto the
/// fine grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipSchema {
    pub fine_bands: Vec<String>,
    pub coarse_bands: Vec<String>,
    pub fine_size: usize,
    pub coarse_size: usize,
}

impl ChipSchema {
    pub fn validate(&self) -> Result<()> {
        if self.fine_size == 0 || self.coarse_size == 0 {
            return Err(Error::ShapeError("chip sizes must be positive".into()));
        }
        if self.fine_size % self.coarse_size != 0 {
            return Err(Error::ShapeError(format!(
                "fine size {} is not a multiple of coarse size {}",
                self.fine_size, self.coarse_size
            )));
        }
        if self.fine_bands.is_empty() && self.coarse_bands.is_empty() {
            return Err(Error::ShapeError("chip schema declares no bands".into()));
        }
        Ok(())
    }

    pub fn upsample_factor(&self) -> usize {
        self.fine_size / self.coarse_size
    }

    pub fn n_bands(&self) -> usize {
        self.fine_bands.len() + self.coarse_bands.len()
    }
}

/// Static per-location descriptor: either a feature vector or a stack of
/// image chips.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SurfaceFeature {
    Embedding(Vec<f64>),
    ChipStack(Vec<Chip>),
}

impl SurfaceFeature {
    pub fn check_against_schema(&self, schema: &ChipSchema) -> Result<()> {
        let chips = match self {
            SurfaceFeature::ChipStack(c) => c,
            SurfaceFeature::Embedding(_) => {
                return Err(Error::SurfaceModeMismatch("expected chips, got embedding".into()))
            }
        };
        let mut seen = std::collections::BTreeSet::new();
        for chip in chips {
            if !seen.insert(chip.band.clone()) {
                return Err(Error::ShapeError(format!("duplicate band {}", chip.band)));
            }
            let want = match chip.resolution {
                ResolutionTag::Fine => schema.fine_size,
                ResolutionTag::Coarse => schema.coarse_size,
            };
            if chip.size != want {
                return Err(Error::ShapeError(format!(
                    "band {} is {}x{}, schema wants {}x{}",
                    chip.band, chip.size, chip.size, want, want
                )));
            }
            if chip.data.len() != chip.size * chip.size {
                return Err(Error::ShapeError(format!("band {} has wrong pixel count", chip.band)));
            }
        }
        for band in schema.fine_bands.iter().chain(&schema.coarse_bands) {
            if !seen.contains(band) {
                return Err(Error::ShapeError(format!("band {} missing", band)));
            }
        }
        Ok(())
    }
}

/// A point observer with its series and optional surface descriptor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// Fraction of variable slots (temperature, dewpoint, wind pair) that
    /// carry a true observation, recomputed at ingestion.
    pub quality_fraction: f64,
    pub series: Series,
    pub surface: Option<SurfaceFeature>,
}

/// Disjoint station roles. Backbone stations are model inputs; the rest
/// are prediction targets for training, selection and testing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub backbone: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Partition {
    pub fn validate_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self.backbone.iter().chain(&self.train).chain(&self.val).chain(&self.test) {
            if !seen.insert(id.clone()) {
                return Err(Error::PartitionError(format!("station {} in two roles", id)));
            }
        }
        Ok(())
    }
}

/// Quality-fraction cutoffs for role assignment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PartitionThresholds {
    pub backbone_min: f64,
    pub train_min: f64,
    pub keep_min: f64,
}

impl Default for PartitionThresholds {
    fn default() -> Self {
        PartitionThresholds { backbone_min: 0.80, train_min: 0.70, keep_min: 0.60 }
    }
}

/// Assign roles by quality fraction: backbone at or above `backbone_min`,
/// train in [train_min, backbone_min), the [keep_min, train_min) band split
/// evenly into val/test by a seeded shuffle, everything below dropped.
/// Deterministic given the seed; changing the seed only moves val/test
/// membership.
pub fn partition_stations(
    stations: &[(String, f64)],
    thresholds: PartitionThresholds,
    seed: u64,
) -> Result<Partition> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut p = Partition::default();
    let mut band = Vec::new();
    for (id, q) in stations {
        if *q >= thresholds.backbone_min {
            p.backbone.push(id.clone());
        } else if *q >= thresholds.train_min {
            p.train.push(id.clone());
        } else if *q >= thresholds.keep_min {
            band.push(id.clone());
        }
    }
    if p.backbone.is_empty() {
        return Err(Error::PartitionError("no station qualifies for the backbone".into()));
    }
    band.sort();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    band.shuffle(&mut rng);
    let n_val = band.len().div_ceil(2);
    p.val = band[..n_val].to_vec();
    p.test = band[n_val..].to_vec();
    p.backbone.sort();
    p.train.sort();
    p.val.sort();
    p.test.sort();
    Ok(p)
}

/// Dense regular lat/lon grid of hourly states. `values` is flat
/// [time][ilat][ilon][channel]; every cell is valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoarseField {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub nlat: usize,
    pub nlon: usize,
    pub times: Vec<i64>,
    pub values: Vec<f64>,
}

impl CoarseField {
    pub fn value_at(&self, ti: usize, ilat: usize, ilon: usize) -> [f64; CHANNELS] {
        let base = ((ti * self.nlat + ilat) * self.nlon + ilon) * CHANNELS;
        [self.values[base], self.values[base + 1], self.values[base + 2], self.values[base + 3]]
    }

    pub fn set_value(&mut self, ti: usize, ilat: usize, ilon: usize, v: [f64; CHANNELS]) {
        let base = ((ti * self.nlat + ilat) * self.nlon + ilon) * CHANNELS;
        self.values[base..base + CHANNELS].copy_from_slice(&v);
    }

    pub fn lat_max(&self) -> f64 {
        self.lat0 + self.dlat * (self.nlat as f64 - 1.0)
    }

    pub fn lon_max(&self) -> f64 {
        self.lon0 + self.dlon * (self.nlon as f64 - 1.0)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat0 && lat <= self.lat_max() && lon >= self.lon0 && lon <= self.lon_max()
    }

    pub fn time_index(&self, t: i64) -> Option<usize> {
        if self.times.is_empty() {
            return None;
        }
        let first = self.times[0];
        if t < first {
            return None;
        }
        let idx = (t - first) as usize;
        (idx < self.times.len()).then_some(idx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dlat <= 0.0 || self.dlon <= 0.0 {
            return Err(Error::SchemaError("grid spacing must be positive".into()));
        }
        if self.nlat < 2 || self.nlon < 2 {
            return Err(Error::SchemaError("grid needs at least 2x2 nodes".into()));
        }
        let want = self.times.len() * self.nlat * self.nlon * CHANNELS;
        if self.values.len() != want {
            return Err(Error::SchemaError(format!(
                "coarse grid holds {} values, expected {}",
                self.values.len(),
                want
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::SchemaError("coarse grid contains non-finite values".into()));
        }
        for w in self.times.windows(2) {
            if w[1] - w[0] != 1 {
                return Err(Error::TimeAxisError("coarse time axis is not hourly".into()));
            }
        }
        Ok(())
    }
}

/// Which station pairs may attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Full,
    Delaunay,
    KNearest(usize),
}

impl Connectivity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Connectivity::Full),
            "delaunay" => Ok(Connectivity::Delaunay),
            _ => {
                if let Some(k) = s.strip_prefix("knn:") {
                    let k: usize = k
                        .parse()
                        .map_err(|_| Error::Usage(format!("bad knn count in '{}'", s)))?;
                    if k == 0 {
                        return Err(Error::Usage("knn count must be positive".into()));
                    }
                    Ok(Connectivity::KNearest(k))
                } else {
                    Err(Error::Usage(format!(
                        "unknown connectivity '{}' (expected full, delaunay or knn:K)",
                        s
                    )))
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Connectivity::Full => "full".into(),
            Connectivity::Delaunay => "delaunay".into(),
            Connectivity::KNearest(k) => format!("knn:{}", k),
        }
    }
}

/// How surface descriptors enter the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SurfaceMode {
    None,
    Embedding { dim: usize },
    /// `spatial_context: false` keeps only the center-pixel branch of the
    /// chip encoder (ablation hook).
    Chips { schema: ChipSchema, spatial_context: bool },
}

impl SurfaceMode {
    pub fn is_none(&self) -> bool {
        matches!(self, SurfaceMode::None)
    }
}

/// Architecture hyperparameters. Defaults follow the reference setup:
/// 3 heads, 5 self and 5 cross layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_latent: usize,
    pub n_heads: usize,
    pub n_layers_self: usize,
    pub n_layers_cross: usize,
    pub location_encoding_degree: usize,
    pub mlp_hidden: usize,
    pub connectivity: Connectivity,
    pub surface_mode: SurfaceMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_latent: 96,
            n_heads: 3,
            n_layers_self: 5,
            n_layers_cross: 5,
            location_encoding_degree: 10,
            mlp_hidden: 64,
            connectivity: Connectivity::Full,
            surface_mode: SurfaceMode::None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_latent == 0 || self.n_heads == 0 || self.n_layers_self == 0 || self.n_layers_cross == 0 {
            return Err(Error::ConfigMismatch("architecture sizes must be positive".into()));
        }
        if self.d_latent % self.n_heads != 0 {
            return Err(Error::ConfigMismatch(format!(
                "d_latent {} not divisible by n_heads {}",
                self.d_latent, self.n_heads
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::ConfigMismatch("mlp_hidden must be positive".into()));
        }
        if let SurfaceMode::Chips { schema, .. } = &self.surface_mode {
            schema.validate()?;
        }
        Ok(())
    }

    /// Spherical-harmonic basis length for the configured degree.
    pub fn location_code_len(&self) -> usize {
        (self.location_encoding_degree + 1) * (self.location_encoding_degree + 1)
    }
}

/// Per-channel standardization statistics for station observations and
/// coarse-state samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub station_mean: [f64; CHANNELS],
    pub station_std: [f64; CHANNELS],
    pub coarse_mean: [f64; CHANNELS],
    pub coarse_std: [f64; CHANNELS],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            station_mean: [0.0; CHANNELS],
            station_std: [1.0; CHANNELS],
            coarse_mean: [0.0; CHANNELS],
            coarse_std: [1.0; CHANNELS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for std in self.station_std.iter().chain(&self.coarse_std) {
            if !(*std > 0.0) {
                return Err(Error::ConfigMismatch("normalization std must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn normalize_station(&self, ch: usize, v: f64) -> f64 {
        (v - self.station_mean[ch]) / self.station_std[ch]
    }

    pub fn denormalize_station(&self, ch: usize, v: f64) -> f64 {
        v * self.station_std[ch] + self.station_mean[ch]
    }

    pub fn normalize_coarse(&self, ch: usize, v: f64) -> f64 {
        (v - self.coarse_mean[ch]) / self.coarse_std[ch]
    }

    /// Stats measured over observed station slots / coarse node values.
    pub fn fit(station_samples: &[Vec<f64>; CHANNELS], coarse_samples: &[Vec<f64>; CHANNELS]) -> Result<Self> {
        let stat = |vals: &Vec<f64>| -> Result<(f64, f64)> {
            if vals.is_empty() {
                return Err(Error::EmptySample);
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Ok((mean, var.sqrt().max(1e-6)))
        };
        let mut out = Normalization::identity();
        for c in 0..CHANNELS {
            let (m, s) = stat(&station_samples[c])?;
            out.station_mean[c] = m;
            out.station_std[c] = s;
            let (m, s) = stat(&coarse_samples[c])?;
            out.coarse_mean[c] = m;
            out.coarse_std[c] = s;
        }
        Ok(out)
    }
}

pub const CHECKPOINT_VERSION: &str = "mwx-1";

/// Everything needed to run the model: configuration, named parameter
/// tensors and normalization statistics.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Mat>,
    pub normalization: Normalization,
    pub version: String,
}

impl ModelState {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.normalization.validate()?;
        for (name, m) in &self.params {
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::ConfigMismatch(format!("parameter {} is non-finite", name)));
            }
        }
        Ok(())
    }
}

/// Meteorological from-direction to velocity components:
/// u = -speed * sin(dir), v = -speed * cos(dir).
pub fn wind_from_speed_dir(speed_ms: f64, dir_deg: f64) -> Result<(f64, f64)> {
    if !speed_ms.is_finite() || !dir_deg.is_finite() {
        return Err(Error::InvalidObservation("non-finite wind reading".into()));
    }
    if speed_ms < 0.0 {
        return Err(Error::InvalidObservation(format!("negative wind speed {}", speed_ms)));
    }
    let rad = dir_deg.to_radians();
    Ok((-speed_ms * rad.sin(), -speed_ms * rad.cos()))
}

/// Inverse of [`wind_from_speed_dir`]. Calm wind reports direction 0.
pub fn wind_to_speed_dir(u_ms: f64, v_ms: f64) -> (f64, f64) {
    let speed = u_ms.hypot(v_ms);
    if speed == 0.0 {
        return (0.0, 0.0);
    }
    let dir = (-u_ms).atan2(-v_ms).to_degrees().rem_euclid(360.0);
    (speed, dir)
}
