//! Reference predictors: linear-kernel RBF interpolation of station
//! observations and bilinear sampling of the coarse grid.

use nalgebra::DMatrix;

use crate::dataio::{sample_coarse, Dataset};
use crate::error::{Error, Result};
use crate::geometry::LocalPlane;
use crate::types::{WeatherVector, CHANNELS};

/// Scattered interpolation with kernel phi(r) = r plus an affine tail.
/// Station coordinates are projected to a local plane; the combined
/// system (kernel weights with affine side conditions) is solved by
/// minimum-norm SVD, which keeps degenerate layouts (collinear points,
/// two stations) well defined. Exact at the data sites and reproduces
/// affine fields.
pub fn rbf_interpolate(
    stations: &[(f64, f64)],
    values: &[f64],
    queries: &[(f64, f64)],
) -> Result<Vec<f64>> {
    let n = stations.len();
    if n != values.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} stations with {} values",
            n,
            values.len()
        )));
    }
    if n < 2 {
        return Err(Error::InsufficientStations { needed: 2, got: n });
    }
    let plane = LocalPlane::fit(stations);
    let mut pts: Vec<(f64, f64)> = stations.iter().map(|&(la, lo)| plane.project(la, lo)).collect();
    // Center the plane coordinates so the affine columns have the same
    // scale as the kernel entries; absolute km coordinates would make
    // the system needlessly ill conditioned.
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    for p in &mut pts {
        p.0 -= cx;
        p.1 -= cy;
    }

    // [K P; P^T 0] [w; c] = [y; 0], K_ij = |x_i - x_j|, P rows (1, x, y).
    let dim = n + 3;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            let dx = pts[i].0 - pts[j].0;
            let dy = pts[i].1 - pts[j].1;
            a[(i, j)] = dx.hypot(dy);
        }
        a[(i, n)] = 1.0;
        a[(i, n + 1)] = pts[i].0;
        a[(i, n + 2)] = pts[i].1;
        a[(n, i)] = 1.0;
        a[(n + 1, i)] = pts[i].0;
        a[(n + 2, i)] = pts[i].1;
    }
    let mut b = DMatrix::<f64>::zeros(dim, 1);
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidObservation(format!("non-finite value at station {i}")));
        }
        b[(i, 0)] = *v;
    }

    let svd = a.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    let sol = svd
        .solve(&b, eps)
        .map_err(|e| Error::SingularSystem(format!("rbf solve failed: {e}")))?;

    let mut out = Vec::with_capacity(queries.len());
    for &(qla, qlo) in queries {
        let raw = plane.project(qla, qlo);
        let q = (raw.0 - cx, raw.1 - cy);
        let mut y = sol[(n, 0)] + sol[(n + 1, 0)] * q.0 + sol[(n + 2, 0)] * q.1;
        for (i, p) in pts.iter().enumerate() {
            let dx = q.0 - p.0;
            let dy = q.1 - p.1;
            y += sol[(i, 0)] * dx.hypot(dy);
        }
        out.push(y);
    }
    Ok(out)
}

/// Station-interpolation baseline at one timestamp: per channel, every
/// backbone station with a usable slot contributes, and queries are
/// interpolated with [`rbf_interpolate`].
pub fn rbf_baseline_at(
    dataset: &Dataset,
    t: i64,
    queries: &[(f64, f64)],
) -> Result<Vec<WeatherVector>> {
    let ti = dataset.coarse.time_index(t).ok_or(Error::UnknownTimestamp(t))?;
    let mut per_channel: Vec<Vec<f64>> = Vec::with_capacity(CHANNELS);
    for c in 0..CHANNELS {
        let mut coords = Vec::new();
        let mut vals = Vec::new();
        for id in &dataset.partition.backbone {
            let st = dataset
                .station(id)
                .ok_or_else(|| Error::PartitionError(format!("unknown station {id}")))?;
            if st.series.states[ti][c].usable() {
                coords.push((st.lat, st.lon));
                vals.push(st.series.values[ti][c]);
            }
        }
        per_channel.push(rbf_interpolate(&coords, &vals, queries)?);
    }
    Ok((0..queries.len())
        .map(|q| {
            WeatherVector::from_array([
                per_channel[0][q],
                per_channel[1][q],
                per_channel[2][q],
                per_channel[3][q],
            ])
        })
        .collect())
}

/// Coarse-state baseline: bilinear sample of the gridded field.
pub fn era5_baseline(dataset: &Dataset, lat: f64, lon: f64, t: i64) -> Result<WeatherVector> {
    sample_coarse(&dataset.coarse, lat, lon, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| (rng.gen_range(39.5..41.5), rng.gen_range(-105.5..-103.5)))
            .collect()
    }

    #[test]
    fn exact_at_data_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = rng.gen_range(3..12);
            let pts = random_points(&mut rng, n);
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let got = rbf_interpolate(&pts, &vals, &pts).unwrap();
            for (g, v) in got.iter().zip(&vals) {
                assert!((g - v).abs() <= 1e-6, "site value {v} reproduced as {g}");
            }
        }
    }

    #[test]
    fn two_stations_midpoint_is_the_mean() {
        let pts = [(40.0, -105.0), (40.4, -104.2)];
        let vals = [3.0, 9.0];
        let mid = [(
            (pts[0].0 + pts[1].0) / 2.0,
            (pts[0].1 + pts[1].1) / 2.0,
        )];
        let got = rbf_interpolate(&pts, &vals, &mid).unwrap();
        // The midpoint on a local plane differs from the lat/lon midpoint
        // by the cos-latitude factor applied to both stations equally, so
        // the affine fit still averages the endpoints.
        assert!((got[0] - 6.0).abs() <= 1e-6, "midpoint {} vs mean 6", got[0]);
    }

    #[test]
    fn affine_fields_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.gen_range(3..10);
            let pts = random_points(&mut rng, n);
            let plane = LocalPlane::fit(&pts);
            let (a, bx, by) =
                (rng.gen_range(-5.0..5.0), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let field = |la: f64, lo: f64| {
                let (x, y) = plane.project(la, lo);
                a + bx * x + by * y
            };
            let vals: Vec<f64> = pts.iter().map(|&(la, lo)| field(la, lo)).collect();
            let queries = random_points(&mut rng, 6);
            let got = rbf_interpolate(&pts, &vals, &queries).unwrap();
            for (g, &(la, lo)) in got.iter().zip(&queries) {
                let want = field(la, lo);
                assert!(
                    (g - want).abs() <= 1e-8 * want.abs().max(1.0),
                    "affine field: {g} vs {want}"
                );
            }
        }
    }

    #[test]
    fn one_station_is_not_enough() {
        let err = rbf_interpolate(&[(40.0, -105.0)], &[1.0], &[(40.1, -105.0)]).unwrap_err();
        assert!(matches!(err, Error::InsufficientStations { needed: 2, got: 1 }));
    }

    #[test]
    fn per_channel_validity_drops_missing_slots() {
        use crate::dataio::synth::{generate_synthetic_world, SyntheticWorldSpec};
        use crate::types::SlotState;
        let spec = SyntheticWorldSpec {
            n_backbone: 8,
            n_train: 3,
            n_val: 2,
            n_test: 2,
            nlat: 5,
            nlon: 5,
            t_steps: 12,
            seed: 3,
            ..SyntheticWorldSpec::default()
        };
        let (mut ds, _) = generate_synthetic_world(&spec).unwrap();
        let queries = [(40.4, -104.6), (40.9, -104.2)];
        let id = ds.partition.backbone[0].clone();
        let si = ds.station_index(&id).unwrap();
        ds.stations[si].series.states[5][0] = SlotState::Missing;
        let base = rbf_baseline_at(&ds, ds.coarse.times[5], &queries).unwrap();
        // Poison the excluded slot; the interpolation must not move.
        ds.stations[si].series.values[5][0] = 1e9;
        let poisoned = rbf_baseline_at(&ds, ds.coarse.times[5], &queries).unwrap();
        for (a, b) in base.iter().zip(&poisoned) {
            assert_eq!(a.as_array(), b.as_array());
        }
    }

    #[test]
    fn coarse_baseline_is_exact_at_nodes_and_linear_between() {
        use crate::types::{CoarseField, Partition, Series, SlotState, Station};
        let times: Vec<i64> = vec![0, 1];
        let mut values = Vec::new();
        for ti in 0..2 {
            for ilat in 0..2 {
                for ilon in 0..2 {
                    for c in 0..CHANNELS {
                        values.push(
                            (1 + c) as f64 * (ti as f64 + 2.0 * ilat as f64 + 3.0 * ilon as f64),
                        );
                    }
                }
            }
        }
        let coarse = CoarseField {
            lat0: 40.0,
            lon0: -105.0,
            dlat: 1.0,
            dlon: 1.0,
            nlat: 2,
            nlon: 2,
            times: times.clone(),
            values,
        };
        let st = Station {
            id: "b000".into(),
            lat: 40.5,
            lon: -104.5,
            quality_fraction: 1.0,
            series: Series {
                times,
                values: vec![[0.0; CHANNELS]; 2],
                states: vec![[SlotState::Observed; CHANNELS]; 2],
            },
            surface: None,
        };
        let partition = Partition {
            backbone: vec!["b000".into()],
            train: vec![],
            val: vec![],
            test: vec![],
        };
        let ds = Dataset::new(vec![st], coarse, partition, None, None).unwrap();

        let node = era5_baseline(&ds, 41.0, -104.0, 1).unwrap().as_array();
        for c in 0..CHANNELS {
            assert!((node[c] - (1 + c) as f64 * 6.0).abs() <= 1e-12);
        }
        // Midpoint of the southern edge averages the two southern nodes.
        let edge = era5_baseline(&ds, 40.0, -104.5, 0).unwrap().as_array();
        for c in 0..CHANNELS {
            let want = (1 + c) as f64 * 1.5;
            assert!((edge[c] - want).abs() <= 1e-12);
        }
        // Random interior point against explicit bilinear weights.
        let (lat, lon) = (40.3, -104.8);
        let got = era5_baseline(&ds, lat, lon, 1).unwrap().as_array();
        let (wy, wx) = (lat - 40.0, lon + 105.0);
        for c in 0..CHANNELS {
            let f = |ilat: usize, ilon: usize| ds.coarse.value_at(1, ilat, ilon)[c];
            let want = f(0, 0) * (1.0 - wy) * (1.0 - wx)
                + f(0, 1) * (1.0 - wy) * wx
                + f(1, 0) * wy * (1.0 - wx)
                + f(1, 1) * wy * wx;
            assert!((got[c] - want).abs() <= 1e-12);
        }
    }
}
