//! Evaluation suite: scalar errors, wind-specific errors, spatially
//! demeaned R², stratified and distance-binned breakdowns, and the
//! consolidated comparison table.
//!
//! Every metric scores a slot only when the record marks the observation
//! valid; filled or missing slots never contribute.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::haversine_km;
use crate::types::{wind_to_speed_dir, CHANNELS, CH_DEWPOINT, CH_TEMP, CH_U, CH_V};

/// One scored sample: a prediction from a single model against the
/// observation at a station and timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub t: i64,
    pub observed: [f64; CHANNELS],
    /// Per-channel observation validity; only true slots are scored.
    pub valid: [bool; CHANNELS],
    pub predicted: [f64; CHANNELS],
}

/// Observed wind slower than this is treated as calm and excluded from
/// direction metrics (direction is meaningless at near-zero speed).
pub const CALM_SPEED_MS: f64 = 0.5;

/// Default neighbor counts for the distance-sensitivity curves.
pub const DEFAULT_K_LIST: [usize; 4] = [1, 5, 10, 20];

/// Default number of equal-count distance bins.
pub const DEFAULT_DISTANCE_BINS: usize = 10;

fn channel_pairs(records: &[EvalRecord], channel: usize) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.valid[channel])
        .map(|r| (r.predicted[channel], r.observed[channel]))
        .collect()
}

fn pair_mae(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(pairs.iter().map(|(p, o)| (p - o).abs()).sum::<f64>() / pairs.len() as f64)
}

fn pair_rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    let ms = pairs.iter().map(|(p, o)| (p - o) * (p - o)).sum::<f64>() / pairs.len() as f64;
    Ok(ms.sqrt())
}

/// Mean absolute error over valid records of one channel.
pub fn mae(records: &[EvalRecord], channel: usize) -> Result<f64> {
    pair_mae(&channel_pairs(records, channel))
}

/// Root-mean-square error over valid records of one channel.
pub fn rmse(records: &[EvalRecord], channel: usize) -> Result<f64> {
    pair_rmse(&channel_pairs(records, channel))
}

fn wind_records(records: &[EvalRecord]) -> impl Iterator<Item = &EvalRecord> {
    records.iter().filter(|r| r.valid[CH_U] && r.valid[CH_V])
}

/// Mean Euclidean distance between predicted and observed wind vectors.
pub fn vector_error(records: &[EvalRecord]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in wind_records(records) {
        let du = r.predicted[CH_U] - r.observed[CH_U];
        let dv = r.predicted[CH_V] - r.observed[CH_V];
        sum += du.hypot(dv);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySample);
    }
    Ok(sum / n as f64)
}

/// (predicted speed, observed speed) for every record with valid wind.
pub fn wind_speed_pairs(records: &[EvalRecord]) -> Vec<(f64, f64)> {
    wind_records(records)
        .map(|r| {
            (
                r.predicted[CH_U].hypot(r.predicted[CH_V]),
                r.observed[CH_U].hypot(r.observed[CH_V]),
            )
        })
        .collect()
}

/// Absolute circular direction difference in degrees, in [0, 180].
pub fn circular_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

/// Per-record circular direction errors in degrees. Records whose
/// observed speed is below [`CALM_SPEED_MS`] are excluded.
pub fn wind_direction_errors(records: &[EvalRecord]) -> Vec<f64> {
    wind_records(records)
        .filter(|r| r.observed[CH_U].hypot(r.observed[CH_V]) >= CALM_SPEED_MS)
        .map(|r| {
            let (_, pd) = wind_to_speed_dir(r.predicted[CH_U], r.predicted[CH_V]);
            let (_, od) = wind_to_speed_dir(r.observed[CH_U], r.observed[CH_V]);
            circular_diff_deg(pd, od)
        })
        .collect()
}

fn error_mae(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

fn error_rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Spatially demeaned R² aggregated over timesteps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialR2 {
    pub value: f64,
    /// Timesteps that contributed to the mean.
    pub used_timesteps: usize,
    /// Timesteps skipped for degenerate spatial variance or fewer than
    /// two valid stations.
    pub degenerate_timesteps: usize,
}

fn group_by_time(records: &[EvalRecord]) -> BTreeMap<i64, Vec<&EvalRecord>> {
    let mut groups: BTreeMap<i64, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.t).or_default().push(r);
    }
    groups
}

fn demeaned_r2(pairs: &[(f64, f64)]) -> Option<f64> {
    // One spatial sample per station; the across-station mean is removed
    // from predictions and observations alike.
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let pm = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let om = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, o) in pairs {
        let pt = p - pm;
        let ot = o - om;
        num += (pt - ot) * (pt - ot);
        den += ot * ot;
    }
    if den <= 0.0 {
        return None;
    }
    Some(1.0 - num / den)
}

/// Across-station R² of one channel, demeaned per timestep, averaged
/// over timesteps. Degenerate timesteps are skipped and counted.
pub fn spatial_r2(records: &[EvalRecord], channel: usize) -> Result<SpatialR2> {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut degenerate = 0usize;
    for group in group_by_time(records).values() {
        let pairs: Vec<(f64, f64)> = group
            .iter()
            .filter(|r| r.valid[channel])
            .map(|r| (r.predicted[channel], r.observed[channel]))
            .collect();
        match demeaned_r2(&pairs) {
            Some(r2) => {
                sum += r2;
                used += 1;
            }
            None => degenerate += 1,
        }
    }
    if used == 0 {
        return Err(Error::EmptySample);
    }
    Ok(SpatialR2 { value: sum / used as f64, used_timesteps: used, degenerate_timesteps: degenerate })
}

/// Wind-vector variant of [`spatial_r2`]: u and v are demeaned
/// separately and their squared residuals pooled per timestep.
pub fn spatial_r2_wind(records: &[EvalRecord]) -> Result<SpatialR2> {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut degenerate = 0usize;
    for group in group_by_time(records).values() {
        let recs: Vec<&&EvalRecord> =
            group.iter().filter(|r| r.valid[CH_U] && r.valid[CH_V]).collect();
        if recs.len() < 2 {
            degenerate += 1;
            continue;
        }
        let n = recs.len() as f64;
        let mut means = [0.0f64; 4];
        for r in &recs {
            means[0] += r.predicted[CH_U];
            means[1] += r.predicted[CH_V];
            means[2] += r.observed[CH_U];
            means[3] += r.observed[CH_V];
        }
        for m in &mut means {
            *m /= n;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for r in &recs {
            let pu = r.predicted[CH_U] - means[0];
            let pv = r.predicted[CH_V] - means[1];
            let ou = r.observed[CH_U] - means[2];
            let ov = r.observed[CH_V] - means[3];
            num += (pu - ou) * (pu - ou) + (pv - ov) * (pv - ov);
            den += ou * ou + ov * ov;
        }
        if den <= 0.0 {
            degenerate += 1;
            continue;
        }
        sum += 1.0 - num / den;
        used += 1;
    }
    if used == 0 {
        return Err(Error::EmptySample);
    }
    Ok(SpatialR2 { value: sum / used as f64, used_timesteps: used, degenerate_timesteps: degenerate })
}

/// Error summary for one category of a stratified breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub category: String,
    pub n: usize,
    /// None when the category received no valid records (flagged empty).
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
}

/// Per-category errors of one channel. `categories` maps every station
/// id to its category; the output covers every category in the map,
/// including those with no scored records.
pub fn stratify_errors(
    records: &[EvalRecord],
    channel: usize,
    categories: &BTreeMap<String, String>,
) -> Result<Vec<Stratum>> {
    let mut grouped: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for cat in categories.values() {
        grouped.entry(cat).or_default();
    }
    for r in records {
        let cat = categories
            .get(&r.station_id)
            .ok_or_else(|| Error::ConfigMismatch(format!("station {} has no category", r.station_id)))?;
        if r.valid[channel] {
            grouped.entry(cat).or_default().push((r.predicted[channel], r.observed[channel]));
        }
    }
    Ok(grouped
        .into_iter()
        .map(|(cat, pairs)| Stratum {
            category: cat.to_string(),
            n: pairs.len(),
            mae: pair_mae(&pairs).ok(),
            rmse: pair_rmse(&pairs).ok(),
        })
        .collect())
}

/// One equal-count distance bin of the sensitivity curve.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceBin {
    pub k: usize,
    pub lo_km: f64,
    pub hi_km: f64,
    /// Stations in the bin.
    pub n: usize,
    /// Mean over stations of the station-level mean absolute error.
    pub mae: f64,
}

/// Mean distance from (lat, lon) to its k nearest entries of `coords`.
pub fn mean_knn_distance(lat: f64, lon: f64, coords: &[(f64, f64)], k: usize) -> f64 {
    let mut d: Vec<f64> = coords.iter().map(|&(la, lo)| haversine_km(lat, lon, la, lo)).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[..k].iter().sum::<f64>() / k as f64
}

/// Station-level errors of one channel binned by mean distance to the k
/// nearest backbone stations, for each k in `k_list`. Bins hold equal
/// station counts (within one); `bins` is clamped to the station count.
pub fn distance_sensitivity(
    records: &[EvalRecord],
    channel: usize,
    backbone: &[(f64, f64)],
    k_list: &[usize],
    bins: usize,
) -> Result<Vec<DistanceBin>> {
    if backbone.is_empty() {
        return Err(Error::InsufficientStations { needed: 1, got: 0 });
    }
    for &k in k_list {
        if k == 0 || k > backbone.len() {
            return Err(Error::KTooLarge { k, n: backbone.len() });
        }
    }
    // Station-level MAE and location, keyed by id for determinism.
    let mut per_station: BTreeMap<&str, (f64, f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        if r.valid[channel] {
            per_station
                .entry(&r.station_id)
                .or_insert((r.lat, r.lon, Vec::new()))
                .2
                .push((r.predicted[channel] - r.observed[channel]).abs());
        }
    }
    if per_station.is_empty() {
        return Err(Error::EmptySample);
    }
    let stations: Vec<(&str, f64, f64, f64)> = per_station
        .iter()
        .map(|(id, (la, lo, errs))| (*id, *la, *lo, errs.iter().sum::<f64>() / errs.len() as f64))
        .collect();

    let mut out = Vec::new();
    for &k in k_list {
        let mut rows: Vec<(f64, &str, f64)> = stations
            .iter()
            .map(|&(id, la, lo, e)| (mean_knn_distance(la, lo, backbone, k), id, e))
            .collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let nb = bins.max(1).min(rows.len());
        let base = rows.len() / nb;
        let extra = rows.len() % nb;
        let mut start = 0usize;
        for b in 0..nb {
            let len = base + usize::from(b < extra);
            let slice = &rows[start..start + len];
            start += len;
            out.push(DistanceBin {
                k,
                lo_km: slice.first().unwrap().0,
                hi_km: slice.last().unwrap().0,
                n: slice.len(),
                mae: slice.iter().map(|r| r.2).sum::<f64>() / slice.len() as f64,
            });
        }
    }
    Ok(out)
}

fn push_row(lines: &mut Vec<String>, model: &str, variable: &str, metric: &str, value: Result<f64>, n: usize) {
    match value {
        Ok(v) => lines.push(format!("{model},{variable},{metric},{v:.9},{n}")),
        Err(_) => lines.push(format!("{model},{variable},{metric},,0")),
    }
}

/// Consolidated comparison table over named record sets, one row per
/// (model, variable, metric). Metrics with no valid samples emit an
/// empty value and n=0 instead of failing the whole table.
pub fn ablation_report(models: &BTreeMap<String, Vec<EvalRecord>>) -> Vec<String> {
    let mut lines = vec!["model,variable,metric,value,n".to_string()];
    for (model, records) in models {
        for (ch, var) in [(CH_TEMP, "temperature"), (CH_DEWPOINT, "dewpoint")] {
            let n = channel_pairs(records, ch).len();
            push_row(&mut lines, model, var, "mae", mae(records, ch), n);
            push_row(&mut lines, model, var, "rmse", rmse(records, ch), n);
            match spatial_r2(records, ch) {
                Ok(r2) => push_row(&mut lines, model, var, "spatial_r2", Ok(r2.value), r2.used_timesteps),
                Err(e) => push_row(&mut lines, model, var, "spatial_r2", Err(e), 0),
            }
        }
        let nw = wind_records(records).count();
        push_row(&mut lines, model, "wind", "vector_error", vector_error(records), nw);
        match spatial_r2_wind(records) {
            Ok(r2) => push_row(&mut lines, model, "wind", "spatial_r2", Ok(r2.value), r2.used_timesteps),
            Err(e) => push_row(&mut lines, model, "wind", "spatial_r2", Err(e), 0),
        }
        let speed = wind_speed_pairs(records);
        push_row(&mut lines, model, "wind_speed", "mae", pair_mae(&speed), speed.len());
        push_row(&mut lines, model, "wind_speed", "rmse", pair_rmse(&speed), speed.len());
        let dir = wind_direction_errors(records);
        push_row(&mut lines, model, "wind_direction", "mae", error_mae(&dir), dir.len());
        push_row(&mut lines, model, "wind_direction", "rmse", error_rmse(&dir), dir.len());
    }
    lines
}
