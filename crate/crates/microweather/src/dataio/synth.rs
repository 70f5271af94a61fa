//! Synthetic micro-weather world for desk-scale verification.
//!
//! Ground truth decomposes as
//!   y(loc, t) = bilinear(coarse, loc, t) + anomaly(loc, t) + resp(loc) + noise
//! where `resp` is a fixed saturating nonlinearity of the location's
//! surface vector and `anomaly` is an optional fast-evolving mesoscale
//! field (zero scale by default). Every component is calibrated against
//! the realized sample so declared scales are met tightly, and everything
//! is a closed-form function of (lat, lon, t), so the noiseless truth can
//! be evaluated anywhere.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{sample_coarse, Dataset};
use crate::error::{Error, Result};
use crate::types::{
    Chip, ChipSchema, CoarseField, Partition, ResolutionTag, Series, SlotState, Station,
    SurfaceFeature, CHANNELS,
};

/// Everything needed to regenerate a world deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub n_backbone: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub nlat: usize,
    pub nlon: usize,
    pub t_steps: usize,
    pub surface_dim: usize,
    pub noise_std: [f64; CHANNELS],
    pub coarse_std: [f64; CHANNELS],
    /// Mesoscale anomaly unresolved by the coarse grid; zero disables it.
    pub anomaly_std: [f64; CHANNELS],
    /// Standard deviation of the surface response across stations.
    pub surface_scale: [f64; CHANNELS],
    /// Mean offset of the surface response (systematic micro-climate bias).
    pub surface_bias: [f64; CHANNELS],
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            n_backbone: 40,
            n_train: 64,
            n_val: 16,
            n_test: 24,
            nlat: 8,
            nlon: 8,
            t_steps: 360,
            surface_dim: 8,
            noise_std: [0.25, 0.25, 0.3, 0.3],
            coarse_std: [3.0, 3.0, 2.5, 2.5],
            anomaly_std: [1.2, 1.2, 1.0, 1.0],
            surface_scale: [0.9, 0.9, 0.8, 0.8],
            surface_bias: [0.8, 0.8, 0.7, 0.7],
            seed: 2026,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_backbone == 0 || self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::SchemaError("all station counts must be at least 1".into()));
        }
        if self.nlat < 2 || self.nlon < 2 || self.t_steps < 2 || self.surface_dim == 0 {
            return Err(Error::SchemaError("grid, time and surface dims must be positive".into()));
        }
        for v in self
            .noise_std
            .iter()
            .chain(&self.coarse_std)
            .chain(&self.anomaly_std)
            .chain(&self.surface_scale)
        {
            if *v < 0.0 {
                return Err(Error::SchemaError("scales must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_backbone + self.n_train + self.n_val + self.n_test
    }
}

const GRID_LAT0: f64 = 40.0;
const GRID_LON0: f64 = -105.0;
const GRID_STEP: f64 = 0.25;
const CHANNEL_BASE: [f64; CHANNELS] = [12.0, 4.0, 0.0, 0.0];

/// Default chip schema for synthetic chip stacks.
pub fn synth_chip_schema() -> ChipSchema {
    ChipSchema {
        fine_bands: vec!["high".into()],
        coarse_bands: vec!["low".into()],
        fine_size: 48,
        coarse_size: 16,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpaceTimeMode {
    kx: f64,
    ky: f64,
    om: f64,
    ph: f64,
    amp: f64,
}

impl SpaceTimeMode {
    fn eval(&self, lat: f64, lon: f64, t: f64) -> f64 {
        self.amp * (TAU * (self.kx * lon + self.ky * lat + self.om * t) + self.ph).cos()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpaceMode {
    kx: f64,
    ky: f64,
    ph: f64,
    amp: f64,
}

impl SpaceMode {
    fn eval(&self, lat: f64, lon: f64) -> f64 {
        self.amp * (TAU * (self.kx * lon + self.ky * lat) + self.ph).cos()
    }
}

fn draw_space_time_modes(
    rng: &mut ChaCha8Rng,
    n: usize,
    wavelen: (f64, f64),
    period: (f64, f64),
) -> Vec<SpaceTimeMode> {
    (0..n)
        .map(|_| {
            let lambda = rng.gen_range(wavelen.0..wavelen.1);
            let theta = rng.gen_range(0.0..TAU);
            let per = rng.gen_range(period.0..period.1);
            SpaceTimeMode {
                kx: theta.cos() / lambda,
                ky: theta.sin() / lambda,
                om: 1.0 / per,
                ph: rng.gen_range(0.0..TAU),
                amp: rng.gen_range(0.5..1.0),
            }
        })
        .collect()
}

fn draw_space_modes(rng: &mut ChaCha8Rng, n: usize, wavelen: (f64, f64)) -> Vec<SpaceMode> {
    (0..n)
        .map(|_| {
            let lambda = rng.gen_range(wavelen.0..wavelen.1);
            let theta = rng.gen_range(0.0..TAU);
            SpaceMode {
                kx: theta.cos() / lambda,
                ky: theta.sin() / lambda,
                ph: rng.gen_range(0.0..TAU),
                amp: rng.gen_range(0.5..1.0),
            }
        })
        .collect()
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Closed-form world: evaluates the noiseless ground truth, surface
/// embeddings and chip renderings anywhere inside the grid.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub coarse: CoarseField,
    anomaly_modes: Vec<Vec<SpaceTimeMode>>,
    anomaly_mean: [f64; CHANNELS],
    anomaly_cal: [f64; CHANNELS],
    z_modes: [Vec<SpaceMode>; 3],
    z_mean: [f64; 3],
    z_cal: [f64; 3],
    mix: Vec<[f64; 3]>,
    s_mean: Vec<f64>,
    s_std: Vec<f64>,
    resp_w: Vec<Vec<f64>>,
    resp_b: [f64; CHANNELS],
    resp_mu: [f64; CHANNELS],
    resp_sigma: [f64; CHANNELS],
}

impl SyntheticWorld {
    /// Regenerate the world from its spec (generation is deterministic).
    pub fn from_spec(spec: &SyntheticWorldSpec) -> Result<SyntheticWorld> {
        Ok(generate_synthetic_world(spec)?.1)
    }

    fn z_raw(&self, which: usize, lat: f64, lon: f64) -> f64 {
        self.z_modes[which].iter().map(|m| m.eval(lat, lon)).sum()
    }

    fn z(&self, which: usize, lat: f64, lon: f64) -> f64 {
        (self.z_raw(which, lat, lon) - self.z_mean[which]) * self.z_cal[which]
    }

    /// Static surface descriptor at an arbitrary location.
    pub fn surface_embedding(&self, lat: f64, lon: f64) -> Vec<f64> {
        let z = [self.z(0, lat, lon), self.z(1, lat, lon), self.z(2, lat, lon)];
        self.mix
            .iter()
            .enumerate()
            .map(|(d, m)| {
                let raw = m[0] * z[0] + m[1] * z[1] + m[2] * z[2];
                (raw - self.s_mean[d]) / self.s_std[d]
            })
            .collect()
    }

    fn response_from_embedding(&self, s: &[f64]) -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            let pre: f64 =
                self.resp_w[c].iter().zip(s).map(|(w, x)| w * x).sum::<f64>() + self.resp_b[c];
            let g = pre.tanh();
            out[c] = self.spec.surface_bias[c]
                + self.spec.surface_scale[c] * (g - self.resp_mu[c]) / self.resp_sigma[c];
        }
        out
    }

    /// Time-constant surface response at a location.
    pub fn surface_response(&self, lat: f64, lon: f64) -> [f64; CHANNELS] {
        let s = self.surface_embedding(lat, lon);
        self.response_from_embedding(&s)
    }

    fn anomaly(&self, lat: f64, lon: f64, t: i64) -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            if self.spec.anomaly_std[c] == 0.0 {
                continue;
            }
            let raw: f64 =
                self.anomaly_modes[c].iter().map(|m| m.eval(lat, lon, t as f64)).sum();
            out[c] = (raw - self.anomaly_mean[c]) * self.anomaly_cal[c];
        }
        out
    }

    /// Noiseless truth parts (coarse, anomaly, surface) at a point.
    pub fn truth_parts(
        &self,
        lat: f64,
        lon: f64,
        t: i64,
    ) -> Result<([f64; CHANNELS], [f64; CHANNELS], [f64; CHANNELS])> {
        let coarse = sample_coarse(&self.coarse, lat, lon, t)?.as_array();
        Ok((coarse, self.anomaly(lat, lon, t), self.surface_response(lat, lon)))
    }

    /// Noiseless ground truth at a point.
    pub fn truth(&self, lat: f64, lon: f64, t: i64) -> Result<[f64; CHANNELS]> {
        let (c, a, s) = self.truth_parts(lat, lon, t)?;
        let mut out = [0.0; CHANNELS];
        for ch in 0..CHANNELS {
            out[ch] = c[ch] + a[ch] + s[ch];
        }
        Ok(out)
    }

    /// Render the chip stack for a location: fine band is the rough surface
    /// field at 10 m pixels, coarse band the smooth field at matching
    /// extent. Pixel (0,0) is the northwest corner.
    pub fn chips_at(&self, lat: f64, lon: f64, schema: &ChipSchema) -> Vec<Chip> {
        let m_per_deg_lat = crate::geometry::METERS_PER_DEG_LAT;
        let m_per_deg_lon = m_per_deg_lat * lat.to_radians().cos();
        let extent_m = schema.fine_size as f64 * 10.0;
        let mut chips = Vec::new();
        let mut render = |band: &str, size: usize, tag: ResolutionTag| {
            let px = extent_m / size as f64;
            let which = match band {
                "low" => 0,
                "high" => 1,
                _ => 2,
            };
            let mut data = Vec::with_capacity(size * size);
            for r in 0..size {
                for c in 0..size {
                    let dy_m = (r as f64 + 0.5 - size as f64 / 2.0) * px;
                    let dx_m = (c as f64 + 0.5 - size as f64 / 2.0) * px;
                    let plat = lat - dy_m / m_per_deg_lat;
                    let plon = lon + dx_m / m_per_deg_lon;
                    data.push(self.z(which, plat, plon));
                }
            }
            chips.push(Chip { band: band.to_string(), resolution: tag, size, data });
        };
        for band in &schema.fine_bands {
            render(band, schema.fine_size, ResolutionTag::Fine);
        }
        for band in &schema.coarse_bands {
            render(band, schema.coarse_size, ResolutionTag::Coarse);
        }
        chips
    }
}

/// Generate the dataset plus the closed-form truth evaluator.
pub fn generate_synthetic_world(
    spec: &SyntheticWorldSpec,
) -> Result<(Dataset, SyntheticWorld)> {
    spec.validate()?;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k);
        rng
    };

    // Grid geometry.
    let lat_max = GRID_LAT0 + GRID_STEP * (spec.nlat - 1) as f64;
    let lon_max = GRID_LON0 + GRID_STEP * (spec.nlon - 1) as f64;
    let times: Vec<i64> = (0..spec.t_steps as i64).collect();

    // Station placement: uniform inside a margin, minimum separation so the
    // triangulation stays in general position.
    let n_total = spec.n_total();
    let mut rng = stream(1);
    let margin_lat = 0.06 * (lat_max - GRID_LAT0);
    let margin_lon = 0.06 * (lon_max - GRID_LON0);
    let min_sep = 0.004;
    let mut locs: Vec<(f64, f64)> = Vec::with_capacity(n_total);
    while locs.len() < n_total {
        let lat = rng.gen_range(GRID_LAT0 + margin_lat..lat_max - margin_lat);
        let lon = rng.gen_range(GRID_LON0 + margin_lon..lon_max - margin_lon);
        if locs
            .iter()
            .all(|&(a, o)| (a - lat).abs().max((o - lon).abs()) > min_sep)
        {
            locs.push((lat, lon));
        }
    }

    // Coarse field: smooth space-time modes calibrated at the grid nodes.
    let mut rng = stream(2);
    let mut coarse = CoarseField {
        lat0: GRID_LAT0,
        lon0: GRID_LON0,
        dlat: GRID_STEP,
        dlon: GRID_STEP,
        nlat: spec.nlat,
        nlon: spec.nlon,
        times: times.clone(),
        values: vec![0.0; spec.t_steps * spec.nlat * spec.nlon * CHANNELS],
    };
    for c in 0..CHANNELS {
        let modes = draw_space_time_modes(&mut rng, 12, (1.2, 3.0), (24.0, 168.0));
        for (ti, &t) in times.iter().enumerate() {
            for i in 0..spec.nlat {
                for j in 0..spec.nlon {
                    let lat = GRID_LAT0 + i as f64 * GRID_STEP;
                    let lon = GRID_LON0 + j as f64 * GRID_STEP;
                    let idx = ((ti * spec.nlat + i) * spec.nlon + j) * CHANNELS + c;
                    coarse.values[idx] =
                        modes.iter().map(|m| m.eval(lat, lon, t as f64)).sum::<f64>();
                }
            }
        }
    }
    // Calibrate against the realized station-time sample: interpolation
    // smooths between nodes, so node statistics would overstate what
    // stations actually see. Bilinear sampling is affine in the grid
    // values, so rescaling the grid rescales station samples identically.
    {
        let mut samples: Vec<Vec<f64>> =
            vec![Vec::with_capacity(n_total * spec.t_steps); CHANNELS];
        for &(lat, lon) in &locs {
            for &t in &times {
                let v = sample_coarse(&coarse, lat, lon, t)?.as_array();
                for c in 0..CHANNELS {
                    samples[c].push(v[c]);
                }
            }
        }
        for c in 0..CHANNELS {
            let (mean, std) = mean_std(&samples[c]);
            let cal = if std > 1e-12 { spec.coarse_std[c] / std } else { 0.0 };
            for v in coarse.values[c..].iter_mut().step_by(CHANNELS) {
                *v = CHANNEL_BASE[c] + (*v - mean) * cal;
            }
        }
    }

    // Mesoscale anomaly, calibrated on the realized station-time sample.
    let mut rng = stream(3);
    let mut anomaly_modes = Vec::with_capacity(CHANNELS);
    let mut anomaly_mean = [0.0; CHANNELS];
    let mut anomaly_cal = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        let modes = draw_space_time_modes(&mut rng, 16, (0.5, 0.9), (6.0, 36.0));
        if spec.anomaly_std[c] > 0.0 {
            let mut raw = Vec::with_capacity(n_total * spec.t_steps);
            for &(lat, lon) in &locs {
                for &t in &times {
                    raw.push(modes.iter().map(|m| m.eval(lat, lon, t as f64)).sum::<f64>());
                }
            }
            let (mean, std) = mean_std(&raw);
            anomaly_mean[c] = mean;
            anomaly_cal[c] = if std > 1e-12 { spec.anomaly_std[c] / std } else { 0.0 };
        }
        anomaly_modes.push(modes);
    }

    // Latent surface fields: one smooth (recoverable from the station
    // network), one rough (only visible to the surface descriptor), one
    // fine jitter.
    let mut rng = stream(4);
    let z_modes = [
        draw_space_modes(&mut rng, 10, (0.7, 1.5)),
        draw_space_modes(&mut rng, 14, (0.035, 0.09)),
        draw_space_modes(&mut rng, 8, (0.015, 0.04)),
    ];
    let mut z_mean = [0.0; 3];
    let mut z_cal = [1.0; 3];
    for which in 0..3 {
        let raw: Vec<f64> = locs
            .iter()
            .map(|&(lat, lon)| z_modes[which].iter().map(|m| m.eval(lat, lon)).sum())
            .collect();
        let (mean, std) = mean_std(&raw);
        z_mean[which] = mean;
        z_cal[which] = if std > 1e-12 { 1.0 / std } else { 1.0 };
    }

    // Mixing into the surface_dim-dimensional embedding, then per-dimension
    // standardization over stations.
    let mut rng = stream(5);
    let mix: Vec<[f64; 3]> = (0..spec.surface_dim)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                0.25 * rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();

    let mut half_world = SyntheticWorld {
        spec: spec.clone(),
        coarse: coarse.clone(),
        anomaly_modes,
        anomaly_mean,
        anomaly_cal,
        z_modes,
        z_mean,
        z_cal,
        mix,
        s_mean: vec![0.0; spec.surface_dim],
        s_std: vec![1.0; spec.surface_dim],
        resp_w: vec![vec![0.0; spec.surface_dim]; CHANNELS],
        resp_b: [0.0; CHANNELS],
        resp_mu: [0.0; CHANNELS],
        resp_sigma: [1.0; CHANNELS],
    };
    let raw_embeddings: Vec<Vec<f64>> =
        locs.iter().map(|&(lat, lon)| half_world.surface_embedding(lat, lon)).collect();
    for d in 0..spec.surface_dim {
        let col: Vec<f64> = raw_embeddings.iter().map(|e| e[d]).collect();
        let (mean, std) = mean_std(&col);
        half_world.s_mean[d] = mean;
        half_world.s_std[d] = if std > 1e-12 { std } else { 1.0 };
    }

    // Surface response: per-channel saturating transform, standardized over
    // the realized stations so declared bias/scale hold exactly.
    let mut rng = stream(6);
    let scale = 1.5 / (spec.surface_dim as f64).sqrt();
    for c in 0..CHANNELS {
        for d in 0..spec.surface_dim {
            half_world.resp_w[c][d] = randn(&mut rng) * scale;
        }
        half_world.resp_b[c] = rng.gen_range(-0.5..0.5);
    }
    let embeddings: Vec<Vec<f64>> =
        locs.iter().map(|&(lat, lon)| half_world.surface_embedding(lat, lon)).collect();
    for c in 0..CHANNELS {
        let raw: Vec<f64> = embeddings
            .iter()
            .map(|s| {
                (half_world.resp_w[c].iter().zip(s).map(|(w, x)| w * x).sum::<f64>()
                    + half_world.resp_b[c])
                    .tanh()
            })
            .collect();
        let (mu, sigma) = mean_std(&raw);
        half_world.resp_mu[c] = mu;
        half_world.resp_sigma[c] = if sigma > 1e-9 { sigma } else { 1.0 };
    }
    let world = half_world;

    // Station roles, ids, quality targets.
    let mut rng = stream(8);
    let mut roles: Vec<(&str, f64)> = Vec::with_capacity(n_total);
    for _ in 0..spec.n_backbone {
        roles.push(("bb", rng.gen_range(0.86..0.96)));
    }
    for _ in 0..spec.n_train {
        roles.push(("tr", rng.gen_range(0.72..0.78)));
    }
    for _ in 0..spec.n_val + spec.n_test {
        roles.push(("vt", rng.gen_range(0.62..0.68)));
    }

    // Series: truth plus noise, then exact-count slot masking.
    let mut noise_rng = stream(7);
    let mut mask_rng = stream(9);
    let mut stations = Vec::with_capacity(n_total);
    let mut partition = Partition::default();
    let slots = 3 * spec.t_steps;
    let mut vt_ids = Vec::new();
    for (i, &(lat, lon)) in locs.iter().enumerate() {
        let (prefix, q) = roles[i];
        let id = format!("{}{:04}", prefix, i);
        let mut values = Vec::with_capacity(spec.t_steps);
        let mut states = Vec::with_capacity(spec.t_steps);
        for &t in &times {
            let truth = world.truth(lat, lon, t)?;
            let mut v = [0.0; CHANNELS];
            for c in 0..CHANNELS {
                v[c] = truth[c] + spec.noise_std[c] * randn(&mut noise_rng);
            }
            values.push(v);
            states.push([SlotState::Observed; CHANNELS]);
        }
        let n_miss = ((1.0 - q) * slots as f64).round() as usize;
        let missing = rand::seq::index::sample(&mut mask_rng, slots, n_miss);
        for slot in missing.iter() {
            let (var, ti) = (slot / spec.t_steps, slot % spec.t_steps);
            match var {
                0 => {
                    states[ti][0] = SlotState::Missing;
                    values[ti][0] = 0.0;
                }
                1 => {
                    states[ti][1] = SlotState::Missing;
                    values[ti][1] = 0.0;
                }
                _ => {
                    states[ti][2] = SlotState::Missing;
                    states[ti][3] = SlotState::Missing;
                    values[ti][2] = 0.0;
                    values[ti][3] = 0.0;
                }
            }
        }
        let quality_fraction = (slots - n_miss) as f64 / slots as f64;
        match prefix {
            "bb" => partition.backbone.push(id.clone()),
            "tr" => partition.train.push(id.clone()),
            _ => vt_ids.push(id.clone()),
        }
        stations.push(Station {
            id,
            lat,
            lon,
            quality_fraction,
            series: Series { times: times.clone(), values, states },
            surface: Some(SurfaceFeature::Embedding(
                world.surface_embedding(lat, lon),
            )),
        });
    }
    // Seeded val/test split over the middle-quality band.
    {
        use rand::seq::SliceRandom;
        let mut rng = stream(10);
        vt_ids.shuffle(&mut rng);
        partition.val = vt_ids[..spec.n_val].to_vec();
        partition.test = vt_ids[spec.n_val..].to_vec();
        partition.backbone.sort();
        partition.train.sort();
        partition.val.sort();
        partition.test.sort();
    }

    let dataset = Dataset::new(stations, coarse, partition, Some(spec.surface_dim), None)?;
    Ok((dataset, world))
}

/// Swap every station's surface descriptor for rendered chips.
pub fn attach_chips(dataset: &mut Dataset, world: &SyntheticWorld, schema: &ChipSchema) -> Result<()> {
    schema.validate()?;
    for st in &mut dataset.stations {
        st.surface = Some(SurfaceFeature::ChipStack(world.chips_at(st.lat, st.lon, schema)));
    }
    dataset.surface_dim = None;
    dataset.chip_schema = Some(schema.clone());
    Ok(())
}
