//! Dataset assembly, coarse-field sampling, gap filling, file formats,
//! checkpoints and the synthetic world generator.

pub mod checkpoint;
pub mod fill;
pub mod formats;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{
    ChipSchema, CoarseField, Partition, Station, SurfaceFeature, WeatherVector, CHANNELS,
};

pub use fill::fill_missing;
pub use formats::IngestReport;

/// Assembled view of everything one run needs: stations (sorted by id),
/// the coarse field, a partition and the surface-feature declaration.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stations: Vec<Station>,
    pub coarse: CoarseField,
    pub partition: Partition,
    pub surface_dim: Option<usize>,
    pub chip_schema: Option<ChipSchema>,
    index: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(
        stations: Vec<Station>,
        coarse: CoarseField,
        partition: Partition,
        surface_dim: Option<usize>,
        chip_schema: Option<ChipSchema>,
    ) -> Result<Self> {
        let mut stations = stations;
        stations.sort_by(|a, b| a.id.cmp(&b.id));
        let index: BTreeMap<String, usize> =
            stations.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        if index.len() != stations.len() {
            return Err(Error::SchemaError("duplicate station ids".into()));
        }
        let ds = Dataset { stations, coarse, partition, surface_dim, chip_schema, index };
        ds.validate()?;
        Ok(ds)
    }

    pub fn station(&self, id: &str) -> Option<&Station> {
        self.index.get(id).map(|&i| &self.stations[i])
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        for st in &self.stations {
            if !self.coarse.contains(st.lat, st.lon) {
                return Err(Error::CoverageError {
                    station: st.id.clone(),
                    detail: format!(
                        "({}, {}) vs grid [{}..{}] x [{}..{}]",
                        st.lat,
                        st.lon,
                        self.coarse.lat0,
                        self.coarse.lat_max(),
                        self.coarse.lon0,
                        self.coarse.lon_max()
                    ),
                });
            }
            st.series.validate_time_axis()?;
            if st.series.times != self.coarse.times {
                return Err(Error::TimeAxisError(format!(
                    "station {} series does not share the coarse time axis",
                    st.id
                )));
            }
        }
        self.partition.validate_disjoint()?;
        for id in self
            .partition
            .backbone
            .iter()
            .chain(&self.partition.train)
            .chain(&self.partition.val)
            .chain(&self.partition.test)
        {
            if !self.index.contains_key(id) {
                return Err(Error::PartitionError(format!(
                    "partition references unknown station {}",
                    id
                )));
            }
        }
        Ok(())
    }
}

/// File locations for [`load_dataset`].
#[derive(Debug, Clone, Default)]
pub struct DatasetPaths {
    pub stations: PathBuf,
    pub coarse: PathBuf,
    pub surface: Option<PathBuf>,
    pub chips_manifest: Option<PathBuf>,
    pub partition: Option<PathBuf>,
}

impl DatasetPaths {
    /// Conventional layout inside a data directory; optional pieces are
    /// included when present on disk.
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |p: PathBuf| if p.exists() { Some(p) } else { None };
        DatasetPaths {
            stations: dir.join("stations.csv"),
            coarse: dir.join("coarse.csv"),
            surface: opt(dir.join("surface.csv")),
            chips_manifest: opt(dir.join("chips_manifest.csv")),
            partition: opt(dir.join("partition.json")),
        }
    }
}

/// Write a dataset as the conventional directory layout read by
/// [`DatasetPaths::in_dir`]. Returns every file written.
pub fn write_dataset_dir(dir: &Path, ds: &Dataset) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let stations_path = dir.join("stations.csv");
    formats::write_stations_csv(&stations_path, &ds.stations)?;
    written.push(stations_path);

    let coarse_path = dir.join("coarse.csv");
    formats::write_coarse_csv(&coarse_path, &ds.coarse)?;
    written.push(coarse_path);

    if ds.surface_dim.is_some() {
        let mut embeddings = BTreeMap::new();
        for st in &ds.stations {
            if let Some(SurfaceFeature::Embedding(e)) = &st.surface {
                embeddings.insert(st.id.clone(), e.clone());
            }
        }
        let dim = ds.surface_dim.unwrap();
        let surface_path = dir.join("surface.csv");
        formats::write_surface_csv(&surface_path, &embeddings, dim)?;
        written.push(surface_path);
    }

    if ds.chip_schema.is_some() {
        let mut chips = BTreeMap::new();
        for st in &ds.stations {
            if let Some(SurfaceFeature::ChipStack(stack)) = &st.surface {
                chips.insert(st.id.clone(), stack.clone());
            }
        }
        formats::write_chips(dir, &chips)?;
        written.push(dir.join("chips_manifest.csv"));
        for (id, stack) in &chips {
            for chip in stack {
                written.push(dir.join(format!("chips/{}_{}.chip", id, chip.band)));
            }
        }
    }

    let partition_path = dir.join("partition.json");
    std::fs::write(&partition_path, serde_json::to_string_pretty(&ds.partition)?)?;
    written.push(partition_path);

    Ok(written)
}

/// Load and cross-validate a dataset. Chip schema, when chips are present,
/// is inferred from the first station's stack and enforced on the rest.
pub fn load_dataset(paths: &DatasetPaths) -> Result<(Dataset, IngestReport)> {
    let coarse = formats::read_coarse_csv(&paths.coarse)?;
    let (mut stations, report) = formats::read_stations_csv(&paths.stations, &coarse.times)?;

    let mut surface_dim = None;
    if let Some(surface_path) = &paths.surface {
        let (embeddings, dim) = formats::read_surface_csv(surface_path)?;
        for st in &mut stations {
            match embeddings.get(&st.id) {
                Some(e) => st.surface = Some(SurfaceFeature::Embedding(e.clone())),
                None => {
                    return Err(Error::SchemaError(format!(
                        "station {} has no surface row",
                        st.id
                    )))
                }
            }
        }
        surface_dim = Some(dim);
    }

    let mut chip_schema = None;
    if let Some(manifest) = &paths.chips_manifest {
        let mut chips = formats::read_chips_manifest(manifest)?;
        let schema = infer_chip_schema(&chips)?;
        for st in &mut stations {
            match chips.remove(&st.id) {
                Some(stack) => {
                    let feature = SurfaceFeature::ChipStack(stack);
                    feature.check_against_schema(&schema)?;
                    st.surface = Some(feature);
                }
                None => {
                    return Err(Error::SchemaError(format!("station {} has no chips", st.id)))
                }
            }
        }
        chip_schema = Some(schema);
    }

    let partition = match &paths.partition {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => Partition::default(),
    };

    let ds = Dataset::new(stations, coarse, partition, surface_dim, chip_schema)?;
    Ok((ds, report))
}

fn infer_chip_schema(chips: &BTreeMap<String, Vec<crate::types::Chip>>) -> Result<ChipSchema> {
    let first = chips
        .values()
        .next()
        .ok_or_else(|| Error::SchemaError("chips manifest lists no stations".into()))?;
    let mut fine_bands = Vec::new();
    let mut coarse_bands = Vec::new();
    let mut fine_size = 0;
    let mut coarse_size = 0;
    for chip in first {
        match chip.resolution {
            crate::types::ResolutionTag::Fine => {
                fine_bands.push(chip.band.clone());
                fine_size = chip.size;
            }
            crate::types::ResolutionTag::Coarse => {
                coarse_bands.push(chip.band.clone());
                coarse_size = chip.size;
            }
        }
    }
    fine_bands.sort();
    coarse_bands.sort();
    if coarse_bands.is_empty() {
        coarse_size = fine_size.max(1);
        if fine_size == 0 {
            return Err(Error::ShapeError("chip stack has no bands".into()));
        }
    }
    if fine_bands.is_empty() {
        // Coarse-only stacks: treat the coarse grid itself as the target
        // resolution.
        fine_size = coarse_size;
    }
    let schema = ChipSchema { fine_bands, coarse_bands, fine_size, coarse_size };
    schema.validate()?;
    Ok(schema)
}

/// Bilinear sample of the coarse field, per channel. Exact at grid nodes
/// and linear along grid lines.
pub fn sample_coarse(field: &CoarseField, lat: f64, lon: f64, t: i64) -> Result<WeatherVector> {
    let ti = field
        .time_index(t)
        .ok_or(Error::UnknownTimestamp(t))?;
    Ok(sample_coarse_at_index(field, lat, lon, ti)?)
}

/// Same as [`sample_coarse`] with a pre-resolved time index.
pub fn sample_coarse_at_index(
    field: &CoarseField,
    lat: f64,
    lon: f64,
    ti: usize,
) -> Result<WeatherVector> {
    if !field.contains(lat, lon) {
        return Err(Error::OutOfHull { lat, lon });
    }
    let fy = (lat - field.lat0) / field.dlat;
    let fx = (lon - field.lon0) / field.dlon;
    let i0 = (fy.floor() as usize).min(field.nlat - 2);
    let j0 = (fx.floor() as usize).min(field.nlon - 2);
    let wy = fy - i0 as f64;
    let wx = fx - j0 as f64;

    let v00 = field.value_at(ti, i0, j0);
    let v01 = field.value_at(ti, i0, j0 + 1);
    let v10 = field.value_at(ti, i0 + 1, j0);
    let v11 = field.value_at(ti, i0 + 1, j0 + 1);
    let mut out = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        out[c] = v00[c] * (1.0 - wy) * (1.0 - wx)
            + v01[c] * (1.0 - wy) * wx
            + v10[c] * wy * (1.0 - wx)
            + v11[c] * wy * wx;
    }
    Ok(WeatherVector::from_array(out))
}
