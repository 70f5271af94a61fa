//! Published continental-scale benchmark figures, kept for context when
//! reading reports from this engine.
//!
//! These numbers come from a CONUS-scale run over the full station and
//! reanalysis corpus, which is far beyond what the bundled synthetic
//! worlds exercise. They are documentation only: nothing in this crate
//! asserts against them, and desk-scale runs should not be expected to
//! land anywhere near them.

/// One row of the benchmark comparison: errors at held-out stations.
/// Temperatures in °C, wind in m/s, direction in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkRow {
    pub model: &'static str,
    pub temp_rmse: f64,
    pub temp_mae: f64,
    pub dewpoint_rmse: f64,
    pub dewpoint_mae: f64,
    pub wind_vector_error: f64,
    pub wind_speed_rmse: f64,
    pub wind_speed_mae: f64,
    pub wind_dir_rmse: f64,
    pub wind_dir_mae: f64,
}

/// Headline relative improvements of the full model over interpolated
/// coarse reanalysis: wind vector error and temperature/dewpoint MAE.
pub const WIND_VECTOR_ERROR_REDUCTION: f64 = 0.29;
pub const TEMP_DEWPOINT_MAE_REDUCTION: f64 = 0.06;

/// Input-ablation benchmark: baselines, the station+reanalysis model,
/// and variants with progressively richer surface inputs.
pub const CONUS_ABLATION: [BenchmarkRow; 7] = [
    BenchmarkRow {
        model: "station_interpolation",
        temp_rmse: 4.10,
        temp_mae: 2.13,
        dewpoint_rmse: 3.97,
        dewpoint_mae: 2.18,
        wind_vector_error: 2.26,
        wind_speed_rmse: 2.53,
        wind_speed_mae: 1.44,
        wind_dir_rmse: 80.46,
        wind_dir_mae: 61.95,
    },
    BenchmarkRow {
        model: "coarse_reanalysis",
        temp_rmse: 2.67,
        temp_mae: 1.96,
        dewpoint_rmse: 2.83,
        dewpoint_mae: 2.00,
        wind_vector_error: 2.35,
        wind_speed_rmse: 2.15,
        wind_speed_mae: 1.66,
        wind_dir_rmse: 64.85,
        wind_dir_mae: 46.71,
    },
    BenchmarkRow {
        model: "stations_and_coarse",
        temp_rmse: 2.60,
        temp_mae: 1.91,
        dewpoint_rmse: 2.77,
        dewpoint_mae: 1.98,
        wind_vector_error: 1.80,
        wind_speed_rmse: 2.15,
        wind_speed_mae: 1.50,
        wind_dir_rmse: 66.65,
        wind_dir_mae: 48.68,
    },
    BenchmarkRow {
        model: "plus_terrain",
        temp_rmse: 2.51,
        temp_mae: 1.86,
        dewpoint_rmse: 2.65,
        dewpoint_mae: 1.91,
        wind_vector_error: 1.71,
        wind_speed_rmse: 1.94,
        wind_speed_mae: 1.36,
        wind_dir_rmse: 67.77,
        wind_dir_mae: 49.58,
    },
    BenchmarkRow {
        model: "plus_center_pixel_imagery",
        temp_rmse: 2.51,
        temp_mae: 1.86,
        dewpoint_rmse: 2.63,
        dewpoint_mae: 1.90,
        wind_vector_error: 1.73,
        wind_speed_rmse: 2.02,
        wind_speed_mae: 1.40,
        wind_dir_rmse: 68.38,
        wind_dir_mae: 50.23,
    },
    BenchmarkRow {
        model: "plus_spatial_context_imagery",
        temp_rmse: 2.50,
        temp_mae: 1.85,
        dewpoint_rmse: 2.63,
        dewpoint_mae: 1.90,
        wind_vector_error: 1.69,
        wind_speed_rmse: 1.92,
        wind_speed_mae: 1.35,
        wind_dir_rmse: 68.17,
        wind_dir_mae: 49.84,
    },
    BenchmarkRow {
        model: "precomputed_surface_embeddings",
        temp_rmse: 2.49,
        temp_mae: 1.84,
        dewpoint_rmse: 2.64,
        dewpoint_mae: 1.89,
        wind_vector_error: 1.67,
        wind_speed_rmse: 1.86,
        wind_speed_mae: 1.29,
        wind_dir_rmse: 67.62,
        wind_dir_mae: 49.45,
    },
];

/// Connectivity-sensitivity benchmark: the same model trained with full,
/// triangulated, and 20-nearest-station backbone attention. Wind vector
/// errors sit within a couple percent of each other, which is the basis
/// for the connectivity sanity band in the acceptance suite.
pub const CONUS_CONNECTIVITY: [BenchmarkRow; 3] = [
    BenchmarkRow {
        model: "full",
        temp_rmse: 2.50,
        temp_mae: 1.85,
        dewpoint_rmse: 2.63,
        dewpoint_mae: 1.90,
        wind_vector_error: 1.69,
        wind_speed_rmse: 1.92,
        wind_speed_mae: 1.35,
        wind_dir_rmse: 68.17,
        wind_dir_mae: 49.84,
    },
    BenchmarkRow {
        model: "delaunay",
        temp_rmse: 2.54,
        temp_mae: 1.88,
        dewpoint_rmse: 2.65,
        dewpoint_mae: 1.90,
        wind_vector_error: 1.70,
        wind_speed_rmse: 1.92,
        wind_speed_mae: 1.34,
        wind_dir_rmse: 68.30,
        wind_dir_mae: 49.98,
    },
    BenchmarkRow {
        model: "knn:20",
        temp_rmse: 2.51,
        temp_mae: 1.86,
        dewpoint_rmse: 2.65,
        dewpoint_mae: 1.91,
        wind_vector_error: 1.69,
        wind_speed_rmse: 1.91,
        wind_speed_mae: 1.34,
        wind_dir_rmse: 68.16,
        wind_dir_mae: 49.83,
    },
];
