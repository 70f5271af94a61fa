//! Command-line surface. Every subcommand reads an optional flat
//! key=value config file, applies flag overrides, and writes its outputs
//! into a run directory together with `manifest.json` listing each file
//! with its SHA-256. Manifests carry no timestamps, so identical inputs
//! reproduce identical run directories byte for byte.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numerical.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::attention::TargetPoint;
use crate::dataio::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataio::synth::{
    attach_chips, generate_synthetic_world, synth_chip_schema, SyntheticWorld, SyntheticWorldSpec,
};
use crate::dataio::{
    fill_missing, load_dataset, write_dataset_dir, Dataset, DatasetPaths,
};
use crate::error::{Error, Result};
use crate::inference::{
    checkpoint_hash, era5_eval_records, infer_points, infer_tile, model_eval_records,
    rbf_eval_records, TileSpec, TileSurface,
};
use crate::metrics::{ablation_report, EvalRecord};
use crate::training::{train, TrainConfig};
use crate::types::{
    Connectivity, ModelConfig, ModelState, Partition, SurfaceFeature, SurfaceMode, CHANNELS,
    CHANNEL_NAMES,
};

#[derive(Parser)]
#[command(
    name = "mwx",
    about = "Near-surface weather inference from coarse grids, stations and surface features",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for whatever the subcommand randomizes.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for outputs and the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Station surface features: none, embedding or chips.
        #[arg(long, default_value = "embedding")]
        surface: String,
    },
    /// Validate and gap-fill a raw dataset directory.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Assign a seeded shuffle-split partition and rewrite the dataset.
    Partition {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Backbone connectivity: full, delaunay or knn:K.
        #[arg(long)]
        connectivity: Option<String>,
        /// Surface mode: none, embedding, chips or chips_center.
        #[arg(long)]
        surface: Option<String>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model label in the metrics table.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Score the coarse-grid and station-interpolation baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Consolidated table: baselines plus named checkpoints.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Repeatable NAME=CHECKPOINT entries.
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Predict at a single point.
    InferPoint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        lat: f64,
        #[arg(long, allow_negative_numbers = true)]
        lon: f64,
        /// Timestamp; defaults to the first on the coarse axis.
        #[arg(long)]
        t: Option<i64>,
    },
    /// Render a raster tile.
    InferTile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pixels per block edge.
        #[arg(long, default_value_t = 256)]
        block: usize,
        /// Worker threads; 0 uses the default pool.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Print the manifest and metrics of a run directory.
    Report {
        /// Run directory to summarize.
        #[arg(long)]
        run: PathBuf,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// Config files: one `key=value` per line, `#` comments. Keys outside
// this list are usage errors so typos fail loudly.
const KNOWN_KEYS: &[&str] = &[
    // model
    "d_latent",
    "n_heads",
    "n_layers_self",
    "n_layers_cross",
    "location_encoding_degree",
    "mlp_hidden",
    "connectivity",
    "surface",
    "model_seed",
    // training
    "lr0",
    "weight_decay",
    "steps",
    "timestamps_per_step",
    "stations_per_timestamp",
    "eval_every",
    "train_seed",
    // synthetic world
    "n_backbone",
    "n_train",
    "n_val",
    "n_test",
    "nlat",
    "nlon",
    "t_steps",
    "surface_dim",
    "noise_std",
    "coarse_std",
    "anomaly_std",
    "surface_scale",
    "surface_bias",
    "world_seed",
    // partition
    "backbone_frac",
    "train_frac",
    "val_frac",
    "test_frac",
    "partition_seed",
    // tile
    "origin_lat",
    "origin_lon",
    "pixel_size_m",
    "tile_width",
    "tile_height",
    "t",
    "surface_raster",
];

struct Cfg {
    values: BTreeMap<String, String>,
    /// SHA-256 of the raw file, recorded in manifests.
    hash: Option<String>,
}

impl Cfg {
    fn load(path: Option<&Path>) -> Result<Cfg> {
        let mut values = BTreeMap::new();
        let mut hash = None;
        if let Some(path) = path {
            let raw = std::fs::read_to_string(path)?;
            hash = Some(sha256_hex(raw.as_bytes()));
            for (lineno, line) in raw.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Usage(format!("config line {}: expected key=value", lineno + 1))
                })?;
                let k = k.trim();
                if !KNOWN_KEYS.contains(&k) {
                    return Err(Error::Usage(format!("config line {}: unknown key '{k}'", lineno + 1)));
                }
                values.insert(k.to_string(), v.trim().to_string());
            }
        }
        Ok(Cfg { values, hash })
    }

    fn get<V: std::str::FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Usage(format!("config key {key}: bad value '{raw}'"))),
        }
    }

    fn get_f64x4(&self, key: &str, default: [f64; CHANNELS]) -> Result<[f64; CHANNELS]> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => {
                let parts: Vec<&str> = raw.split(',').collect();
                if parts.len() != CHANNELS {
                    return Err(Error::Usage(format!(
                        "config key {key}: expected {CHANNELS} comma-separated values"
                    )));
                }
                let mut out = [0.0; CHANNELS];
                for (i, p) in parts.iter().enumerate() {
                    out[i] = p.trim().parse().map_err(|_| {
                        Error::Usage(format!("config key {key}: bad value '{p}'"))
                    })?;
                }
                Ok(out)
            }
        }
    }

    fn require_f64(&self, key: &str) -> Result<f64> {
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Usage(format!("config key {key}: bad value '{raw}'"))),
            None => Err(Error::Usage(format!("config must set {key}"))),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn write_manifest(
    out: &Path,
    command: &str,
    inputs: BTreeMap<String, String>,
    files: &[PathBuf],
) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Manifest {
        command: String,
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, String>,
    }
    let mut outputs = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(out).unwrap_or(f).to_string_lossy().into_owned();
        outputs.insert(rel, sha256_hex(&std::fs::read(f)?));
    }
    let manifest = Manifest { command: command.to_string(), inputs, outputs };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let (ds, _) = load_dataset(&DatasetPaths::in_dir(dir))?;
    Ok(ds)
}

fn require_checkpoint(path: &Path) -> Result<ModelState> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    load_checkpoint(path)
}

/// Reload the generator behind a synthetic dataset, if `world.json` is
/// present; gives per-pixel surface features for tiles and points.
fn load_world(data: &Path) -> Result<Option<SyntheticWorld>> {
    let path = data.join("world.json");
    if !path.exists() {
        return Ok(None);
    }
    let spec: SyntheticWorldSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(Some(SyntheticWorld::from_spec(&spec)?))
}

fn model_config(cfg: &Cfg, ds: &Dataset, connectivity: Option<&str>, surface: Option<&str>, seed: Option<u64>) -> Result<ModelConfig> {
    let defaults = ModelConfig::default();
    let conn = match connectivity {
        Some(s) => Connectivity::parse(s)?,
        None => Connectivity::parse(&cfg.get("connectivity", "full".to_string())?)?,
    };
    let surface = match surface {
        Some(s) => s.to_string(),
        None => cfg.get("surface", "none".to_string())?,
    };
    let surface_mode = match surface.as_str() {
        "none" => SurfaceMode::None,
        "embedding" => {
            let dim = ds.surface_dim.ok_or_else(|| {
                Error::SurfaceModeMismatch("dataset carries no surface embeddings".into())
            })?;
            SurfaceMode::Embedding { dim }
        }
        "chips" | "chips_center" => {
            let schema = ds.chip_schema.clone().ok_or_else(|| {
                Error::SurfaceModeMismatch("dataset carries no chips".into())
            })?;
            SurfaceMode::Chips { schema, spatial_context: surface == "chips" }
        }
        other => return Err(Error::Usage(format!("unknown surface mode '{other}'"))),
    };
    Ok(ModelConfig {
        d_latent: cfg.get("d_latent", defaults.d_latent)?,
        n_heads: cfg.get("n_heads", defaults.n_heads)?,
        n_layers_self: cfg.get("n_layers_self", defaults.n_layers_self)?,
        n_layers_cross: cfg.get("n_layers_cross", defaults.n_layers_cross)?,
        location_encoding_degree: cfg.get("location_encoding_degree", defaults.location_encoding_degree)?,
        mlp_hidden: cfg.get("mlp_hidden", defaults.mlp_hidden)?,
        connectivity: conn,
        surface_mode,
        seed: match seed {
            Some(s) => s,
            None => cfg.get("model_seed", defaults.seed)?,
        },
    })
}

fn train_config(cfg: &Cfg, seed: Option<u64>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        lr0: cfg.get("lr0", d.lr0)?,
        weight_decay: cfg.get("weight_decay", d.weight_decay)?,
        steps: cfg.get("steps", d.steps)?,
        timestamps_per_step: cfg.get("timestamps_per_step", d.timestamps_per_step)?,
        stations_per_timestamp: cfg.get("stations_per_timestamp", d.stations_per_timestamp)?,
        eval_every: cfg.get("eval_every", d.eval_every)?,
        seed: match seed {
            Some(s) => s,
            None => cfg.get("train_seed", d.seed)?,
        },
    })
}

fn world_spec(cfg: &Cfg, seed: Option<u64>) -> Result<SyntheticWorldSpec> {
    let d = SyntheticWorldSpec::default();
    Ok(SyntheticWorldSpec {
        n_backbone: cfg.get("n_backbone", d.n_backbone)?,
        n_train: cfg.get("n_train", d.n_train)?,
        n_val: cfg.get("n_val", d.n_val)?,
        n_test: cfg.get("n_test", d.n_test)?,
        nlat: cfg.get("nlat", d.nlat)?,
        nlon: cfg.get("nlon", d.nlon)?,
        t_steps: cfg.get("t_steps", d.t_steps)?,
        surface_dim: cfg.get("surface_dim", d.surface_dim)?,
        noise_std: cfg.get_f64x4("noise_std", d.noise_std)?,
        coarse_std: cfg.get_f64x4("coarse_std", d.coarse_std)?,
        anomaly_std: cfg.get_f64x4("anomaly_std", d.anomaly_std)?,
        surface_scale: cfg.get_f64x4("surface_scale", d.surface_scale)?,
        surface_bias: cfg.get_f64x4("surface_bias", d.surface_bias)?,
        seed: match seed {
            Some(s) => s,
            None => cfg.get("world_seed", d.seed)?,
        },
    })
}

fn base_inputs(cfg: &Cfg, common: &Common) -> BTreeMap<String, String> {
    let mut inputs = BTreeMap::new();
    if let Some(h) = &cfg.hash {
        inputs.insert("config_sha256".into(), h.clone());
    }
    if let Some(s) = common.seed {
        inputs.insert("seed".into(), s.to_string());
    }
    for (k, v) in &cfg.values {
        inputs.insert(format!("cfg.{k}"), v.clone());
    }
    inputs
}

fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut lines = Vec::with_capacity(records.len() + 1);
    let mut header = String::from("station_id,t,lat,lon");
    for pre in ["obs", "valid", "pred"] {
        for name in CHANNEL_NAMES {
            header.push_str(&format!(",{pre}_{name}"));
        }
    }
    lines.push(header);
    for r in records {
        let mut line = format!("{},{},{:.9},{:.9}", r.station_id, r.t, r.lat, r.lon);
        for c in 0..CHANNELS {
            line.push_str(&format!(",{:.9}", r.observed[c]));
        }
        for c in 0..CHANNELS {
            line.push_str(&format!(",{}", u8::from(r.valid[c])));
        }
        for c in 0..CHANNELS {
            line.push_str(&format!(",{:.9}", r.predicted[c]));
        }
        lines.push(line);
    }
    std::fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

fn write_metrics_csv(path: &Path, models: &BTreeMap<String, Vec<EvalRecord>>) -> Result<()> {
    std::fs::write(path, ablation_report(models).join("\n") + "\n")?;
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { common, surface } => cmd_synth(common, &surface),
        Cmd::Ingest { common, data } => cmd_ingest(common, &data),
        Cmd::Partition { common, data } => cmd_partition(common, &data),
        Cmd::Train { common, data, connectivity, surface } => {
            cmd_train(common, &data, connectivity.as_deref(), surface.as_deref())
        }
        Cmd::Evaluate { common, data, checkpoint, name } => {
            cmd_evaluate(common, &data, &checkpoint, &name)
        }
        Cmd::Baseline { common, data } => cmd_baseline(common, &data),
        Cmd::Ablate { common, data, models } => cmd_ablate(common, &data, &models),
        Cmd::InferPoint { common, data, checkpoint, lat, lon, t } => {
            cmd_infer_point(common, &data, &checkpoint, lat, lon, t)
        }
        Cmd::InferTile { common, data, checkpoint, block, workers } => {
            cmd_infer_tile(common, &data, &checkpoint, block, workers)
        }
        Cmd::Report { run } => cmd_report(&run),
    }
}

fn cmd_synth(common: Common, surface: &str) -> Result<()> {
    let cfg = Cfg::load(common.config.as_deref())?;
    let spec = world_spec(&cfg, common.seed)?;
    let (mut ds, world) = generate_synthetic_world(&spec)?;
    match surface {
        "embedding" => {}
        "none" => {
            for st in &mut ds.stations {
                st.surface = None;
            }
            ds.surface_dim = None;
        }
        "chips" => {
            let schema = synth_chip_schema();
            attach_chips(&mut ds, &world, &schema)?;
        }
        other => return Err(Error::Usage(format!("unknown surface mode '{other}'"))),
    }
    std::fs::create_dir_all(&common.out)?;
    let mut files = write_dataset_dir(&common.out, &ds)?;
    let world_path = common.out.join("world.json");
    std::fs::write(&world_path, serde_json::to_string_pretty(&spec)?)?;
    files.push(world_path);
    let mut inputs = base_inputs(&cfg, &common);
    inputs.insert("surface".into(), surface.to_string());
    write_manifest(&common.out, "synth", inputs, &files)
}

fn cmd_ingest(common: Common, data: &Path) -> Result<()> {
    let cfg = Cfg::load(common.config.as_deref())?;
    let (mut ds, report) = load_dataset(&DatasetPaths::in_dir(data))?;
    let mut filled_slots = 0usize;
    for st in &mut ds.stations {
        let filled = fill_missing(&st.series)?;
        for (a, b) in st.series.states.iter().zip(&filled.states) {
            for c in 0..CHANNELS {
                filled_slots += usize::from(a[c] != b[c]);
            }
        }
        st.series = filled;
    }
    std::fs::create_dir_all(&common.out)?;
    let mut files = write_dataset_dir(&common.out, &ds)?;
    #[derive(serde::Serialize)]
    struct FullReport {
        n_stations: usize,
        n_rows: usize,
        n_bad_flag_rows: usize,
        n_missing_slots: usize,
        n_filled_slots: usize,
    }
    let report_path = common.out.join("ingest_report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&FullReport {
            n_stations: report.n_stations,
            n_rows: report.n_rows,
            n_bad_flag_rows: report.n_bad_flag_rows,
            n_missing_slots: report.n_missing_slots,
            n_filled_slots: filled_slots,
        })?,
    )?;
    files.push(report_path);
    write_manifest(&common.out, "ingest", base_inputs(&cfg, &common), &files)
}

fn cmd_partition(common: Common, data: &Path) -> Result<()> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let cfg = Cfg::load(common.config.as_deref())?;
    let mut ds = load_data(data)?;
    let fracs = [
        cfg.get("backbone_frac", 0.6f64)?,
        cfg.get("train_frac", 0.2f64)?,
        cfg.get("val_frac", 0.1f64)?,
        cfg.get("test_frac", 0.1f64)?,
    ];
    let total: f64 = fracs.iter().sum();
    if fracs.iter().any(|f| *f <= 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Usage("partition fractions must be positive and sum to 1".into()));
    }
    let seed = match common.seed {
        Some(s) => s,
        None => cfg.get("partition_seed", 2026u64)?,
    };
    let mut ids: Vec<String> = ds.stations.iter().map(|s| s.id.clone()).collect();
    let n = ids.len();
    let mut counts = [0usize; 4];
    for i in 1..4 {
        counts[i] = ((fracs[i] * n as f64).round() as usize).max(1);
    }
    let tail: usize = counts[1..].iter().sum();
    if tail + 1 > n {
        return Err(Error::PartitionError(format!("{n} stations cannot cover all four roles")));
    }
    counts[0] = n - tail;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut split = ids;
    let test = split.split_off(split.len() - counts[3]);
    let val = split.split_off(split.len() - counts[2]);
    let train_ids = split.split_off(split.len() - counts[1]);
    let mut partition = Partition { backbone: split, train: train_ids, val, test };
    partition.backbone.sort();
    partition.train.sort();
    partition.val.sort();
    partition.test.sort();
    ds.partition = partition;
    ds.validate()?;
    std::fs::create_dir_all(&common.out)?;
    let mut files = write_dataset_dir(&common.out, &ds)?;
    let world_src = data.join("world.json");
    if world_src.exists() && common.out != data {
        let world_dst = common.out.join("world.json");
        std::fs::copy(&world_src, &world_dst)?;
        files.push(world_dst);
    } else if world_src.exists() {
        files.push(world_src);
    }
    write_manifest(&common.out, "partition", base_inputs(&cfg, &common), &files)
}

fn cmd_train(
    common: Common,
    data: &Path,
    connectivity: Option<&str>,
    surface: Option<&str>,
) -> Result<()> {
    let cfg = Cfg::load(common.config.as_deref())?;
    let ds = load_data(data)?;
    let mcfg = model_config(&cfg, &ds, connectivity, surface, common.seed)?;
    let tcfg = train_config(&cfg, common.seed)?;
    let (state, report) = train(&ds, &mcfg, &tcfg)?;
    std::fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join("checkpoint.mwx");
    save_checkpoint(&state, &ckpt_path)?;
    let report_path = common.out.join("train_report.csv");
    std::fs::write(&report_path, report.lines().join("\n") + "\n")?;
    #[derive(serde::Serialize)]
    struct Summary {
        selected_step: usize,
        best_val_loss: f64,
        diverged_at: Option<usize>,
        checkpoint_sha256: String,
    }
    let summary_path = common.out.join("train_summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&Summary {
            selected_step: report.selected_step,
            best_val_loss: report.best_val_loss,
            diverged_at: report.diverged_at,
            checkpoint_sha256: checkpoint_hash(&state)?,
        })?,
    )?;
    write_manifest(
        &common.out,
        "train",
        base_inputs(&cfg, &common),
        &[ckpt_path, report_path, summary_path],
    )
}

fn cmd_evaluate(common: Common, data: &Path, checkpoint: &Path, name: &str) -> Result<()> {
    let cfg = Cfg::load(common.config.as_deref())?;
    let ds = load_data(data)?;
    let state = require_checkpoint(checkpoint)?;
    let records = model_eval_records(&ds, &state, &ds.partition.test)?;
    std::fs::create_dir_all(&common.out)?;
    let records_path = common.out.join("eval_records.csv");
    write_records_csv(&records_path, &records)?;
    let mut models = BTreeMap::new();
    models.insert(name.to_string(), records);
    let metrics_path = common.out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &models)?;
    let mut inputs = base_inputs(&cfg, &common);
    inputs.insert("checkpoint_sha256".into(), checkpoint_hash(&state)?);
    write_manifest(&common.out, "evaluate", inputs, &[records_path, metrics_path])
}

fn cmd_baseline(common: Common, data: &Path) -> Result<()> {
    let cfg = Cfg::load(common.config.as_deref())?;
    let ds = load_data(data)?;
    std::fs::create_dir_all(&common.out)?;
    let mut models = BTreeMap::new();
    let mut files = Vec::new();
    for (name, records) in [
        ("era5", era5_eval_records(&ds, &ds.partition.test)?),
        ("station_rbf", rbf_eval_records(&ds, &ds.partition.test)?),
    ] {
        let path = common.out.join(format!("eval_records_{name}.csv"));
        write_records_csv(&path, &records)?;
        files.push(path);
        models.insert(name.to_string(), records);
    }
    let metrics_path = common.out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &models)?;
    files.push(metrics_path);
    write_manifest(&common.out, "baseline", base_inputs(&cfg, &common), &files)
}

fn cmd_ablate(common: Common, data: &Path, model_args: &[String]) -> Result<()> {
    let cfg = Cfg::load(common.config.as_deref())?;
    let ds = load_data(data)?;
    std::fs::create_dir_all(&common.out)?;
    let mut models = BTreeMap::new();
    let mut files = Vec::new();
    let mut inputs = base_inputs(&cfg, &common);
    models.insert("era5".to_string(), era5_eval_records(&ds, &ds.partition.test)?);
    models.insert("station_rbf".to_string(), rbf_eval_records(&ds, &ds.partition.test)?);
    for arg in model_args {
        let (name, path) = arg
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--model '{arg}': expected NAME=CHECKPOINT")))?;
        let state = require_checkpoint(Path::new(path))?;
        inputs.insert(format!("model.{name}"), checkpoint_hash(&state)?);
        models.insert(name.to_string(), model_eval_records(&ds, &state, &ds.partition.test)?);
    }
    for (name, records) in &models {
        let path = common.out.join(format!("eval_records_{name}.csv"));
        write_records_csv(&path, records)?;
        files.push(path);
    }
    let metrics_path = common.out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &models)?;
    files.push(metrics_path);
    write_manifest(&common.out, "ablate", inputs, &files)
}

fn point_surface(
    state: &ModelState,
    world: Option<&SyntheticWorld>,
    ds: &Dataset,
    lat: f64,
    lon: f64,
) -> Result<Option<SurfaceFeature>> {
    match &state.config.surface_mode {
        SurfaceMode::None => Ok(None),
        SurfaceMode::Embedding { .. } => match world {
            Some(w) => Ok(Some(SurfaceFeature::Embedding(w.surface_embedding(lat, lon)))),
            None => Err(Error::SurfaceModeMismatch(
                "no per-point surface source; model needs embeddings".into(),
            )),
        },
        SurfaceMode::Chips { schema, .. } => match world {
            Some(w) => {
                let schema = ds.chip_schema.as_ref().unwrap_or(schema);
                Ok(Some(SurfaceFeature::ChipStack(w.chips_at(lat, lon, schema))))
            }
            None => Err(Error::SurfaceModeMismatch(
                "no per-point surface source; model needs chips".into(),
            )),
        },
    }
}

fn cmd_infer_point(
    common: Common,
    data: &Path,
    checkpoint: &Path,
    lat: f64,
    lon: f64,
    t: Option<i64>,
) -> Result<()> {
    let cfg = Cfg::load(common.config.as_deref())?;
    let ds = load_data(data)?;
    let state = require_checkpoint(checkpoint)?;
    let world = load_world(data)?;
    let t = match t {
        Some(t) => t,
        None => cfg.get("t", ds.coarse.times[0])?,
    };
    let surface = point_surface(&state, world.as_ref(), &ds, lat, lon)?;
    let preds = infer_points(&ds, &state, t, &[TargetPoint { lat, lon, surface }])?;
    let v = preds[0].as_array();
    let mut line = format!("lat,lon,t{}\n", CHANNEL_NAMES.map(|n| format!(",{n}")).join(""));
    line.push_str(&format!("{lat:.9},{lon:.9},{t}"));
    for c in 0..CHANNELS {
        line.push_str(&format!(",{:.9}", v[c]));
    }
    line.push('\n');
    emit(&line);
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join("point.csv");
    std::fs::write(&path, line)?;
    let mut inputs = base_inputs(&cfg, &common);
    inputs.insert("checkpoint_sha256".into(), checkpoint_hash(&state)?);
    write_manifest(&common.out, "infer-point", inputs, &[path])
}

fn cmd_infer_tile(
    common: Common,
    data: &Path,
    checkpoint: &Path,
    block: usize,
    workers: usize,
) -> Result<()> {
    let cfg = Cfg::load(common.config.as_deref())?;
    let ds = load_data(data)?;
    let state = require_checkpoint(checkpoint)?;
    let world = load_world(data)?;
    let tile = TileSpec {
        origin_lat: cfg.require_f64("origin_lat")?,
        origin_lon: cfg.require_f64("origin_lon")?,
        pixel_size_m: cfg.get("pixel_size_m", 10.0f64)?,
        width: cfg.get("tile_width", 1024usize)?,
        height: cfg.get("tile_height", 1024usize)?,
        t: cfg.get("t", ds.coarse.times[0])?,
    };

    let embedding_fn;
    let chip_fn;
    let raster_source;
    let surface = match (&state.config.surface_mode, &world) {
        (SurfaceMode::None, _) => TileSurface::None,
        (SurfaceMode::Embedding { .. }, Some(w)) => {
            embedding_fn = move |la: f64, lo: f64| w.surface_embedding(la, lo);
            TileSurface::EmbeddingFn(&embedding_fn)
        }
        (SurfaceMode::Embedding { dim }, None) => {
            let base: String = cfg.get("surface_raster", String::new())?;
            if base.is_empty() {
                return Err(Error::SurfaceModeMismatch(
                    "model needs embeddings; set surface_raster or use a synthetic world".into(),
                ));
            }
            let raster = crate::dataio::formats::read_embedding_raster(Path::new(&base))?;
            if raster.width != tile.width || raster.height != tile.height || raster.dim != *dim {
                return Err(Error::ShapeError(format!(
                    "surface raster {}x{}x{} does not match tile {}x{}x{}",
                    raster.height, raster.width, raster.dim, tile.height, tile.width, dim
                )));
            }
            raster_source = TileSurface::EmbeddingRaster {
                dim: raster.dim,
                values: raster.data.iter().map(|&v| v as f64).collect(),
            };
            raster_source
        }
        (SurfaceMode::Chips { schema, .. }, Some(w)) => {
            let schema = schema.clone();
            chip_fn = move |la: f64, lo: f64| w.chips_at(la, lo, &schema);
            TileSurface::ChipFn(&chip_fn)
        }
        (SurfaceMode::Chips { .. }, None) => {
            return Err(Error::SurfaceModeMismatch(
                "model needs chips; tile chips require a synthetic world".into(),
            ))
        }
    };

    let render = || infer_tile(&ds, &state, &tile, &surface, block);
    let raster = if workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Usage(format!("worker pool: {e}")))?;
        pool.install(render)?
    } else {
        render()?
    };
    std::fs::create_dir_all(&common.out)?;
    let (data_path, header_path) = raster.write(&common.out, "field")?;
    let mut inputs = base_inputs(&cfg, &common);
    inputs.insert("checkpoint_sha256".into(), checkpoint_hash(&state)?);
    inputs.insert("block".into(), block.to_string());
    inputs.insert("workers".into(), workers.to_string());
    write_manifest(&common.out, "infer-tile", inputs, &[data_path, header_path])
}

// Swallows broken pipes so `mwx report | head` exits quietly instead of
// panicking when the reader closes stdout early.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn cmd_report(run: &Path) -> Result<()> {
    let manifest_path = run.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Usage(format!("{} has no manifest.json", run.display())));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    emit(&format!("command: {}\n", manifest["command"].as_str().unwrap_or("?")));
    if let Some(inputs) = manifest["inputs"].as_object() {
        for (k, v) in inputs {
            emit(&format!("input {k} = {}\n", v.as_str().unwrap_or("?")));
        }
    }
    if let Some(outputs) = manifest["outputs"].as_object() {
        for (k, v) in outputs {
            emit(&format!("output {k} sha256={}\n", v.as_str().unwrap_or("?")));
        }
    }
    let metrics = run.join("metrics.csv");
    if metrics.exists() {
        emit(&std::fs::read_to_string(metrics)?);
    }
    Ok(())
}
