//! Forward model: connectivity mask construction, masked multi-head
//! residual self-attention over backbone tokens, cross-attention from
//! target queries, and the prediction head.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dataio::{sample_coarse_at_index, Dataset};
use crate::encoders::{
    assemble_backbone_tokens, assemble_target_tokens, bind, chip_tokens, init_encoder_params,
    linear, location_basis, location_codes, normalize_coarse_rows, normalize_station_rows,
    surface_embedding_tokens, weather_tokens, xavier,
};
use crate::error::{Error, Result};
use crate::geometry::{haversine_km, triangulate, LocalPlane};
use crate::tensor::Mat;
use crate::types::{
    Chip, Connectivity, ModelConfig, ModelState, Normalization, Station, SurfaceFeature,
    SurfaceMode, WeatherVector, CHANNELS, CHECKPOINT_VERSION,
};

/// Row-major boolean matrix; true marks an allowed attention pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BoolMat {
    pub fn filled(rows: usize, cols: usize, v: bool) -> Self {
        BoolMat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn at(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    fn row_any(&self, r: usize) -> bool {
        self.data[r * self.cols..(r + 1) * self.cols].iter().any(|&b| b)
    }
}

/// Which attention pairs each station/target may use. `fallback_full`
/// records that a degenerate geometry forced full connectivity.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub self_mask: BoolMat,
    pub cross_mask: BoolMat,
    pub fallback_full: bool,
}

impl AttentionMask {
    pub fn full(n_backbone: usize, n_targets: usize) -> Self {
        AttentionMask {
            self_mask: BoolMat::filled(n_backbone, n_backbone, true),
            cross_mask: BoolMat::filled(n_targets, n_backbone, true),
            fallback_full: false,
        }
    }

    /// Diagonal self-entries present, every row keeps at least one pair.
    pub fn validate(&self) -> Result<()> {
        if self.self_mask.rows != self.self_mask.cols
            || self.cross_mask.cols != self.self_mask.cols
        {
            return Err(Error::ConfigMismatch("attention mask shapes disagree".into()));
        }
        for i in 0..self.self_mask.rows {
            if !self.self_mask.at(i, i) {
                return Err(Error::ConfigMismatch(format!(
                    "self mask diagonal entry {} is off",
                    i
                )));
            }
        }
        for r in 0..self.cross_mask.rows {
            if !self.cross_mask.row_any(r) {
                return Err(Error::MaskRowEmpty(r));
            }
        }
        Ok(())
    }
}

fn nearest_station(stations: &[(f64, f64)], q: (f64, f64)) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, &(lat, lon)) in stations.iter().enumerate() {
        let d = haversine_km(lat, lon, q.0, q.1);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Connectivity mask over backbone stations and target points.
///
/// Full allows everything. Delaunay triangulates the stations on a local
/// plane: station pairs may attend when adjacent (plus the diagonal), and
/// each target sees the vertices of its enclosing triangle plus their
/// one-ring (outside the hull: the nearest station plus its one-ring).
/// KNearest keeps the k nearest stations per target by great-circle
/// distance, ties broken by station order; station-station attention
/// stays full. Degenerate geometry falls back to Full with a flag.
///
/// Station order is the caller's; ties and indices refer to it. Datasets
/// keep stations sorted by id, so index order is id order.
pub fn build_connectivity(
    stations: &[(f64, f64)],
    targets: &[(f64, f64)],
    mode: Connectivity,
) -> Result<AttentionMask> {
    let n = stations.len();
    if n == 0 {
        return Err(Error::InsufficientStations { needed: 1, got: 0 });
    }
    let m = targets.len();
    match mode {
        Connectivity::Full => Ok(AttentionMask::full(n, m)),
        Connectivity::KNearest(k) => {
            if k == 0 || k > n {
                return Err(Error::KTooLarge { k, n });
            }
            let mut mask = AttentionMask::full(n, m);
            mask.cross_mask = BoolMat::filled(m, n, false);
            for (t, &(tlat, tlon)) in targets.iter().enumerate() {
                let mut order: Vec<(f64, usize)> = stations
                    .iter()
                    .enumerate()
                    .map(|(i, &(lat, lon))| (haversine_km(lat, lon, tlat, tlon), i))
                    .collect();
                order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                for &(_, i) in order.iter().take(k) {
                    mask.cross_mask.set(t, i, true);
                }
            }
            Ok(mask)
        }
        Connectivity::Delaunay => {
            let plane = LocalPlane::fit(stations);
            let pts: Vec<(f64, f64)> =
                stations.iter().map(|&(lat, lon)| plane.project(lat, lon)).collect();
            let tri = match triangulate(&pts) {
                Some(t) => t,
                None => {
                    let mut mask = AttentionMask::full(n, m);
                    mask.fallback_full = true;
                    return Ok(mask);
                }
            };
            let mut mask = AttentionMask {
                self_mask: BoolMat::filled(n, n, false),
                cross_mask: BoolMat::filled(m, n, false),
                fallback_full: false,
            };
            for i in 0..n {
                mask.self_mask.set(i, i, true);
                for &j in &tri.edges[i] {
                    mask.self_mask.set(i, j, true);
                }
            }
            for (t, &(tlat, tlon)) in targets.iter().enumerate() {
                let q = plane.project(tlat, tlon);
                let seeds: Vec<usize> = match tri.locate(&pts, q) {
                    Some(tr) => tr.to_vec(),
                    None => vec![nearest_station(stations, (tlat, tlon))],
                };
                let mut allowed = BTreeSet::new();
                for &s in &seeds {
                    allowed.insert(s);
                    allowed.extend(tri.edges[s].iter().copied());
                }
                for i in allowed {
                    mask.cross_mask.set(t, i, true);
                }
            }
            mask.validate()?;
            Ok(mask)
        }
    }
}

/// Attention probabilities recorded during a forward pass; entry
/// `layer * n_heads + head`. Self matrices are n_backbone square, cross
/// matrices are n_targets x n_backbone.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub self_attn: Vec<Mat>,
    pub cross_attn: Vec<Mat>,
}

/// One residual attention block: multi-head masked scaled dot-product
/// over (queries from `stream`, keys/values from `context`), output
/// projection, residual add, then a 2-layer ReLU feed-forward with its
/// own residual.
fn attention_block(
    tape: &mut Tape,
    params: &BTreeMap<String, Mat>,
    cfg: &ModelConfig,
    prefix: &str,
    stream: Var,
    context: Var,
    mask: &BoolMat,
    probs_out: &mut Vec<Mat>,
) -> Var {
    let dh = cfg.d_latent / cfg.n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let wq = bind(tape, params, &format!("{prefix}_h{h}_wq"));
        let wk = bind(tape, params, &format!("{prefix}_h{h}_wk"));
        let wv = bind(tape, params, &format!("{prefix}_h{h}_wv"));
        let q = tape.matmul(stream, wq);
        let k = tape.matmul(context, wk);
        let v = tape.matmul(context, wv);
        let scores = tape.matmul_bt(q, k);
        let scaled = tape.scale(scores, inv_sqrt);
        let probs = tape.softmax_rows_masked(scaled, mask.data.clone());
        probs_out.push(tape.value(probs).clone());
        heads.push(tape.matmul(probs, v));
    }
    let cat = tape.concat_cols(&heads);
    let wo = bind(tape, params, &format!("{prefix}_wo"));
    let bo = bind(tape, params, &format!("{prefix}_bo"));
    let proj = linear(tape, cat, wo, bo);
    let x = tape.add(stream, proj);

    let w1 = bind(tape, params, &format!("{prefix}_ff_w1"));
    let b1 = bind(tape, params, &format!("{prefix}_ff_b1"));
    let w2 = bind(tape, params, &format!("{prefix}_ff_w2"));
    let b2 = bind(tape, params, &format!("{prefix}_ff_b2"));
    let hid = linear(tape, x, w1, b1);
    let hid = tape.relu(hid);
    let ff = linear(tape, hid, w2, b2);
    tape.add(x, ff)
}

fn check_mask_rows(mask: &BoolMat, rows: usize, cols: usize) -> Result<()> {
    if mask.rows != rows || mask.cols != cols {
        return Err(Error::ConfigMismatch(format!(
            "mask is {}x{}, tokens want {}x{}",
            mask.rows, mask.cols, rows, cols
        )));
    }
    for r in 0..mask.rows {
        if !mask.row_any(r) {
            return Err(Error::MaskRowEmpty(r));
        }
    }
    Ok(())
}

/// Residual self-attention stack over backbone tokens.
pub fn self_attention_stack(
    tape: &mut Tape,
    params: &BTreeMap<String, Mat>,
    cfg: &ModelConfig,
    tokens: Var,
    mask: &BoolMat,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let n = tape.value(tokens).rows;
    check_mask_rows(mask, n, n)?;
    let mut x = tokens;
    for l in 0..cfg.n_layers_self {
        x = attention_block(
            tape,
            params,
            cfg,
            &format!("att_self{l}"),
            x,
            x,
            mask,
            &mut trace.self_attn,
        );
    }
    Ok(x)
}

/// Residual cross-attention stack: the target stream queries the fixed
/// backbone context at every layer; targets never attend to each other.
pub fn cross_attention_stack(
    tape: &mut Tape,
    params: &BTreeMap<String, Mat>,
    cfg: &ModelConfig,
    target_tokens: Var,
    context: Var,
    mask: &BoolMat,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let m = tape.value(target_tokens).rows;
    let n = tape.value(context).rows;
    check_mask_rows(mask, m, n)?;
    let mut x = target_tokens;
    for l in 0..cfg.n_layers_cross {
        x = attention_block(
            tape,
            params,
            cfg,
            &format!("att_cross{l}"),
            x,
            context,
            mask,
            &mut trace.cross_attn,
        );
    }
    Ok(x)
}

/// Linear map from target latents to the four channels, in normalized
/// station units.
pub fn prediction_head(tape: &mut Tape, params: &BTreeMap<String, Mat>, latents: Var) -> Var {
    let w = bind(tape, params, "head_w");
    let b = bind(tape, params, "head_b");
    linear(tape, latents, w, b)
}

/// Normalized head output rows back to physical units.
pub fn denormalize_predictions(m: &Mat, norm: &Normalization) -> Vec<WeatherVector> {
    (0..m.rows)
        .map(|r| {
            let mut a = [0.0; CHANNELS];
            for (c, v) in a.iter_mut().enumerate() {
                *v = norm.denormalize_station(c, m.at(r, c));
            }
            WeatherVector::from_array(a)
        })
        .collect()
}

/// Attention-stack and head parameters. Weights are Xavier-uniform, all
/// biases zero, every value exactly representable in f32.
pub fn init_attention_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> BTreeMap<String, Mat> {
    let d = cfg.d_latent;
    let dh = d / cfg.n_heads;
    let f = 2 * d;
    let mut p = BTreeMap::new();
    for (prefix, layers) in [("att_self", cfg.n_layers_self), ("att_cross", cfg.n_layers_cross)] {
        for l in 0..layers {
            for h in 0..cfg.n_heads {
                p.insert(format!("{prefix}{l}_h{h}_wq"), xavier(rng, d, dh));
                p.insert(format!("{prefix}{l}_h{h}_wk"), xavier(rng, d, dh));
                p.insert(format!("{prefix}{l}_h{h}_wv"), xavier(rng, d, dh));
            }
            p.insert(format!("{prefix}{l}_wo"), xavier(rng, d, d));
            p.insert(format!("{prefix}{l}_bo"), Mat::zeros(1, d));
            p.insert(format!("{prefix}{l}_ff_w1"), xavier(rng, d, f));
            p.insert(format!("{prefix}{l}_ff_b1"), Mat::zeros(1, f));
            p.insert(format!("{prefix}{l}_ff_w2"), xavier(rng, f, d));
            p.insert(format!("{prefix}{l}_ff_b2"), Mat::zeros(1, d));
        }
    }
    p.insert("head_w".into(), xavier(rng, d, CHANNELS));
    p.insert("head_b".into(), Mat::zeros(1, CHANNELS));
    p
}

/// Every model parameter (encoders, attention stacks, head) from one
/// seed. Encoder and attention draws use separate RNG streams so adding
/// a parameter to one group never shifts the other.
pub fn init_model_params(cfg: &ModelConfig, seed: u64) -> Result<BTreeMap<String, Mat>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(21);
    let mut p = init_encoder_params(cfg, &mut rng)?;
    rng.set_stream(22);
    p.extend(init_attention_params(cfg, &mut rng));
    Ok(p)
}

/// Fresh model state with the given normalization statistics.
pub fn init_model_state(cfg: &ModelConfig, norm: &Normalization) -> Result<ModelState> {
    norm.validate()?;
    Ok(ModelState {
        config: cfg.clone(),
        params: init_model_params(cfg, cfg.seed)?,
        normalization: norm.clone(),
        version: CHECKPOINT_VERSION.into(),
    })
}

/// A location to predict, with its surface descriptor when the model
/// expects one.
#[derive(Debug, Clone)]
pub struct TargetPoint {
    pub lat: f64,
    pub lon: f64,
    pub surface: Option<SurfaceFeature>,
}

/// Treat a station as a prediction target; its observations stay out of
/// the input side.
pub fn station_target(st: &Station) -> TargetPoint {
    TargetPoint { lat: st.lat, lon: st.lon, surface: st.surface.clone() }
}

/// Forward-pass switches used by tests and diagnostics.
#[derive(Debug, Clone, Default)]
pub struct ForwardOpts {
    /// Feed backbone tokens straight to cross-attention, skipping the
    /// self stack (mask-effect test hook).
    pub skip_self_stack: bool,
    /// Replace the connectivity-derived mask. Shapes must match the live
    /// backbone subset and target count.
    pub mask_override: Option<AttentionMask>,
}

/// One forward evaluation with its tape kept alive for backprop.
pub struct ForwardRun {
    pub tape: Tape,
    /// n_targets x 4, normalized station units; differentiable.
    pub predictions_norm: Var,
    pub predictions: Vec<WeatherVector>,
    /// Dataset station indices that fed the backbone at this timestep.
    pub backbone: Vec<usize>,
    pub mask: AttentionMask,
    pub trace: ForwardTrace,
}

impl std::fmt::Debug for ForwardRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardRun")
            .field("predictions", &self.predictions)
            .field("backbone", &self.backbone)
            .finish_non_exhaustive()
    }
}

pub(crate) struct ForwardParts {
    pub predictions_norm: Var,
    pub backbone: Vec<usize>,
    pub mask: AttentionMask,
    pub trace: ForwardTrace,
}

fn surface_rows_embedding(
    who: &str,
    feats: &[Option<&SurfaceFeature>],
    dim: usize,
) -> Result<Mat> {
    let mut m = Mat::zeros(feats.len(), dim);
    for (r, f) in feats.iter().enumerate() {
        match f {
            Some(SurfaceFeature::Embedding(e)) if e.len() == dim => {
                m.data[r * dim..(r + 1) * dim].copy_from_slice(e);
            }
            Some(SurfaceFeature::Embedding(e)) => {
                return Err(Error::DimensionMismatch { expected: dim, got: e.len() })
            }
            _ => {
                return Err(Error::SurfaceModeMismatch(format!(
                    "{who} {r} has no surface embedding"
                )))
            }
        }
    }
    Ok(m)
}

fn surface_stacks<'a>(
    who: &str,
    feats: &[Option<&'a SurfaceFeature>],
) -> Result<Vec<&'a [Chip]>> {
    feats
        .iter()
        .enumerate()
        .map(|(r, f)| match f {
            Some(SurfaceFeature::ChipStack(c)) => Ok(c.as_slice()),
            _ => Err(Error::SurfaceModeMismatch(format!("{who} {r} has no chip stack"))),
        })
        .collect()
}

/// Forward pass on a caller-owned tape; see [`forward_at`].
pub(crate) fn forward_parts(
    tape: &mut Tape,
    dataset: &Dataset,
    cfg: &ModelConfig,
    params: &BTreeMap<String, Mat>,
    norm: &Normalization,
    ti: usize,
    targets: &[TargetPoint],
    opts: &ForwardOpts,
) -> Result<ForwardParts> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }

    // Live backbone subset: stations with at least one usable channel now.
    let mut live: Vec<usize> = Vec::new();
    for id in &dataset.partition.backbone {
        let si = dataset
            .station_index(id)
            .ok_or_else(|| Error::PartitionError(format!("unknown backbone station {id}")))?;
        let st = &dataset.stations[si];
        if st.series.states[ti].iter().any(|s| s.usable()) {
            live.push(si);
        }
    }
    if live.is_empty() {
        return Err(Error::InsufficientStations { needed: 1, got: 0 });
    }

    let bpoints: Vec<(f64, f64)> =
        live.iter().map(|&si| (dataset.stations[si].lat, dataset.stations[si].lon)).collect();
    let tpoints: Vec<(f64, f64)> = targets.iter().map(|t| (t.lat, t.lon)).collect();

    // Dropout can shrink the live subset below a configured k; clamping
    // keeps sparse hours usable instead of failing the whole pass.
    let mode = match cfg.connectivity {
        Connectivity::KNearest(k) => Connectivity::KNearest(k.min(live.len())),
        other => other,
    };
    let mask = match &opts.mask_override {
        Some(m) => {
            let m = m.clone();
            if m.self_mask.rows != live.len() || m.cross_mask.rows != targets.len() {
                return Err(Error::ConfigMismatch(format!(
                    "mask override is {}x{} / {}x{}, live subset wants {n}x{n} / {m_}x{n}",
                    m.self_mask.rows,
                    m.self_mask.cols,
                    m.cross_mask.rows,
                    m.cross_mask.cols,
                    n = live.len(),
                    m_ = targets.len()
                )));
            }
            m.validate()?;
            m
        }
        None => build_connectivity(&bpoints, &tpoints, mode)?,
    };

    // Observation and coarse-sample leaves.
    let obs_rows: Vec<([f64; CHANNELS], [crate::types::SlotState; CHANNELS])> = live
        .iter()
        .map(|&si| {
            let st = &dataset.stations[si];
            (st.series.values[ti], st.series.states[ti])
        })
        .collect();
    let station_mat = normalize_station_rows(&obs_rows, norm)?;

    let mut era5_b_rows = Vec::with_capacity(live.len());
    for &(lat, lon) in &bpoints {
        era5_b_rows.push(sample_coarse_at_index(&dataset.coarse, lat, lon, ti)?.as_array());
    }
    let mut era5_t_rows = Vec::with_capacity(targets.len());
    for &(lat, lon) in &tpoints {
        era5_t_rows.push(sample_coarse_at_index(&dataset.coarse, lat, lon, ti)?.as_array());
    }
    let era5_b_mat = normalize_coarse_rows(&era5_b_rows, norm)?;
    let era5_t_mat = normalize_coarse_rows(&era5_t_rows, norm)?;

    let station_obs = tape.leaf(station_mat);
    let era5_b = tape.leaf(era5_b_mat);
    let era5_t = tape.leaf(era5_t_mat);

    let station_tok = weather_tokens(tape, params, "station", station_obs);
    let era5_b_tok = weather_tokens(tape, params, "era5", era5_b);
    let era5_t_tok = weather_tokens(tape, params, "era5", era5_t);

    let (surf_b, surf_t) = match &cfg.surface_mode {
        SurfaceMode::None => (None, None),
        SurfaceMode::Embedding { dim } => {
            let bfeats: Vec<Option<&SurfaceFeature>> =
                live.iter().map(|&si| dataset.stations[si].surface.as_ref()).collect();
            let tfeats: Vec<Option<&SurfaceFeature>> =
                targets.iter().map(|t| t.surface.as_ref()).collect();
            let mb = surface_rows_embedding("backbone station", &bfeats, *dim)?;
            let mt = surface_rows_embedding("target", &tfeats, *dim)?;
            let vb = tape.leaf(mb);
            let vt = tape.leaf(mt);
            (
                Some(surface_embedding_tokens(tape, params, vb)?),
                Some(surface_embedding_tokens(tape, params, vt)?),
            )
        }
        SurfaceMode::Chips { schema, spatial_context } => {
            let bfeats: Vec<Option<&SurfaceFeature>> =
                live.iter().map(|&si| dataset.stations[si].surface.as_ref()).collect();
            let tfeats: Vec<Option<&SurfaceFeature>> =
                targets.iter().map(|t| t.surface.as_ref()).collect();
            let sb = surface_stacks("backbone station", &bfeats)?;
            let st = surface_stacks("target", &tfeats)?;
            (
                Some(chip_tokens(tape, params, &sb, schema, *spatial_context)?),
                Some(chip_tokens(tape, params, &st, schema, *spatial_context)?),
            )
        }
    };

    let basis_b = tape.leaf(location_basis(&bpoints, cfg.location_encoding_degree));
    let basis_t = tape.leaf(location_basis(&tpoints, cfg.location_encoding_degree));
    let loc_b = location_codes(tape, params, basis_b);
    let loc_t = location_codes(tape, params, basis_t);

    let backbone_tok =
        assemble_backbone_tokens(tape, params, era5_b_tok, station_tok, surf_b, loc_b);
    let target_tok = assemble_target_tokens(tape, params, era5_t_tok, surf_t, loc_t);

    let mut trace = ForwardTrace::default();
    let context = if opts.skip_self_stack {
        backbone_tok
    } else {
        self_attention_stack(tape, params, cfg, backbone_tok, &mask.self_mask, &mut trace)?
    };
    let latents =
        cross_attention_stack(tape, params, cfg, target_tok, context, &mask.cross_mask, &mut trace)?;
    let predictions_norm = prediction_head(tape, params, latents);

    Ok(ForwardParts { predictions_norm, backbone: live, mask, trace })
}

/// Full forward pass at timestamp `t`: encoders, self stack, cross
/// stack, head, denormalization. Backbone stations with no usable
/// channel at `t` are dropped from the token set for that hour.
pub fn forward_at(
    dataset: &Dataset,
    state: &ModelState,
    t: i64,
    targets: &[TargetPoint],
    opts: &ForwardOpts,
) -> Result<ForwardRun> {
    let ti = dataset.coarse.time_index(t).ok_or(Error::UnknownTimestamp(t))?;
    let mut tape = Tape::new();
    let parts = forward_parts(
        &mut tape,
        dataset,
        &state.config,
        &state.params,
        &state.normalization,
        ti,
        targets,
        opts,
    )?;
    let predictions =
        denormalize_predictions(tape.value(parts.predictions_norm), &state.normalization);
    Ok(ForwardRun {
        tape,
        predictions_norm: parts.predictions_norm,
        predictions,
        backbone: parts.backbone,
        mask: parts.mask,
        trace: parts.trace,
    })
}
