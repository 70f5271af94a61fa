//! Input encoders: weather tokenization, geographic location codes, and
//! surface-feature encoders (embedding projection or chip trunk), plus the
//! assembly projections that fuse the pieces into backbone/target tokens.
//!
//! Every encoder is a pure function of (inputs, parameters) built on the
//! tape, so gradients flow to both. Observation batches enter as a single
//! n x 8 leaf: four normalized channel values (invalid slots zeroed)
//! followed by four 0/1 validity indicators.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::harmonics::{basis_len, sh_basis};
use crate::tensor::Mat;
use crate::types::{
    Chip, ChipSchema, ModelConfig, Normalization, ResolutionTag, SlotState, SurfaceMode, CHANNELS,
};

/// Columns of an observation batch row.
pub const OBS_WIDTH: usize = 2 * CHANNELS;

/// Weather-variable groups: temperature and dewpoint are scalar streams,
/// wind is a joint (u, v) stream. Values first, indicators second.
const GROUPS: [(&str, &[usize]); 3] = [("temp", &[0]), ("dew", &[1]), ("wind", &[2, 3])];

pub(crate) fn bind(tape: &mut Tape, params: &BTreeMap<String, Mat>, name: &str) -> Var {
    let m = params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    tape.param(name, m)
}

pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Normalized observation rows for station data: invalid channels are
/// zeroed and flagged through the indicator half.
pub fn normalize_station_rows(
    rows: &[([f64; CHANNELS], [SlotState; CHANNELS])],
    norm: &Normalization,
) -> Result<Mat> {
    let mut m = Mat::zeros(rows.len(), OBS_WIDTH);
    for (r, (values, states)) in rows.iter().enumerate() {
        for c in 0..CHANNELS {
            if states[c].usable() {
                if !values[c].is_finite() {
                    return Err(Error::EncodingError(format!(
                        "non-finite observation in channel {c}"
                    )));
                }
                m.data[r * OBS_WIDTH + c] = norm.normalize_station(c, values[c]);
                m.data[r * OBS_WIDTH + CHANNELS + c] = 1.0;
            }
        }
    }
    Ok(m)
}

/// Normalized rows for coarse-grid samples; always fully valid.
pub fn normalize_coarse_rows(rows: &[[f64; CHANNELS]], norm: &Normalization) -> Result<Mat> {
    let mut m = Mat::zeros(rows.len(), OBS_WIDTH);
    for (r, values) in rows.iter().enumerate() {
        for c in 0..CHANNELS {
            if !values[c].is_finite() {
                return Err(Error::EncodingError(format!("non-finite coarse sample, channel {c}")));
            }
            m.data[r * OBS_WIDTH + c] = norm.normalize_coarse(c, values[c]);
            m.data[r * OBS_WIDTH + CHANNELS + c] = 1.0;
        }
    }
    Ok(m)
}

/// Per-variable MLPs over an observation leaf, concatenated and projected
/// to d_latent. `modality` selects the parameter set ("station" | "era5").
pub fn weather_tokens(
    tape: &mut Tape,
    params: &BTreeMap<String, Mat>,
    modality: &str,
    obs: Var,
) -> Var {
    let mut embeds = Vec::with_capacity(GROUPS.len());
    for (gname, channels) in GROUPS {
        let mut cols = Vec::with_capacity(2 * channels.len());
        for &c in channels {
            cols.push(tape.slice_cols(obs, c, c + 1));
        }
        for &c in channels {
            cols.push(tape.slice_cols(obs, CHANNELS + c, CHANNELS + c + 1));
        }
        let x = tape.concat_cols(&cols);
        let prefix = format!("enc_tok_{modality}_{gname}");
        let w1 = bind(tape, params, &format!("{prefix}_w1"));
        let b1 = bind(tape, params, &format!("{prefix}_b1"));
        let w2 = bind(tape, params, &format!("{prefix}_w2"));
        let b2 = bind(tape, params, &format!("{prefix}_b2"));
        let h = linear(tape, x, w1, b1);
        let h = tape.relu(h);
        embeds.push(linear(tape, h, w2, b2));
    }
    let cat = tape.concat_cols(&embeds);
    let w = bind(tape, params, &format!("enc_tok_{modality}_proj_w"));
    let b = bind(tape, params, &format!("enc_tok_{modality}_proj_b"));
    linear(tape, cat, w, b)
}

/// Spherical-harmonic basis rows for a set of locations (plain data, not
/// tape-dependent).
pub fn location_basis(points: &[(f64, f64)], degree: usize) -> Mat {
    let len = basis_len(degree);
    let mut m = Mat::zeros(points.len(), len);
    for (r, &(lat, lon)) in points.iter().enumerate() {
        let b = sh_basis(lat, lon, degree);
        m.data[r * len..(r + 1) * len].copy_from_slice(&b);
    }
    m
}

/// Two sinusoidal layers over the harmonic basis.
pub fn location_codes(tape: &mut Tape, params: &BTreeMap<String, Mat>, basis: Var) -> Var {
    let w1 = bind(tape, params, "enc_loc_w1");
    let b1 = bind(tape, params, "enc_loc_b1");
    let w2 = bind(tape, params, "enc_loc_w2");
    let b2 = bind(tape, params, "enc_loc_b2");
    let h = linear(tape, basis, w1, b1);
    let h = tape.sin(h);
    let h = linear(tape, h, w2, b2);
    tape.sin(h)
}

/// Linear projection + ReLU MLP over precomputed surface embeddings.
pub fn surface_embedding_tokens(
    tape: &mut Tape,
    params: &BTreeMap<String, Mat>,
    emb: Var,
) -> Result<Var> {
    let w1 = bind(tape, params, "enc_surf_w1");
    let b1 = bind(tape, params, "enc_surf_b1");
    if tape.value(emb).cols != tape.value(w1).rows {
        return Err(Error::DimensionMismatch {
            expected: tape.value(w1).rows,
            got: tape.value(emb).cols,
        });
    }
    let w2 = bind(tape, params, "enc_surf_w2");
    let b2 = bind(tape, params, "enc_surf_b2");
    let h = linear(tape, emb, w1, b1);
    let h = tape.relu(h);
    Ok(linear(tape, h, w2, b2))
}

/// Chip stacks as tape leaves: fine bands row-stacked over upsample-ready
/// coarse bands, in schema order.
pub struct ChipLeaves {
    pub fine: Var,
    pub coarse: Var,
}

pub fn chip_leaves(tape: &mut Tape, chips: &[Chip], schema: &ChipSchema) -> Result<ChipLeaves> {
    let find = |band: &str, tag: ResolutionTag, size: usize| -> Result<&Chip> {
        chips
            .iter()
            .find(|c| c.band == band && c.resolution == tag && c.size == size)
            .ok_or_else(|| Error::ShapeError(format!("chip stack missing band {band}")))
    };
    let mut fine = Mat::zeros(schema.fine_bands.len(), schema.fine_size * schema.fine_size);
    for (r, band) in schema.fine_bands.iter().enumerate() {
        let chip = find(band, ResolutionTag::Fine, schema.fine_size)?;
        fine.data[r * fine.cols..(r + 1) * fine.cols].copy_from_slice(&chip.data);
    }
    let mut coarse = Mat::zeros(schema.coarse_bands.len(), schema.coarse_size * schema.coarse_size);
    for (r, band) in schema.coarse_bands.iter().enumerate() {
        let chip = find(band, ResolutionTag::Coarse, schema.coarse_size)?;
        coarse.data[r * coarse.cols..(r + 1) * coarse.cols].copy_from_slice(&chip.data);
    }
    Ok(ChipLeaves { fine: tape.leaf(fine), coarse: tape.leaf(coarse) })
}

/// Chip trunk for one station: learned upsampling of coarse bands to the
/// fine grid, depthwise then pointwise convolution, mean pooling and an
/// MLP, plus a center-pixel skip read from the harmonized stack. With
/// `spatial_context` off only the skip branch feeds the token.
pub fn chip_token(
    tape: &mut Tape,
    params: &BTreeMap<String, Mat>,
    leaves: &ChipLeaves,
    schema: &ChipSchema,
    spatial_context: bool,
) -> Result<Var> {
    schema.validate()?;
    let fs = schema.fine_size;
    let cs = schema.coarse_size;
    let factor = schema.upsample_factor();
    let up_k = bind(tape, params, "enc_chip_up_k");
    let up = tape.upsample(leaves.coarse, up_k, cs, cs, factor);
    let stack = tape.concat_rows(&[leaves.fine, up]);

    let center_idx = (fs / 2) * fs + fs / 2;
    let center_col = tape.slice_cols(stack, center_idx, center_idx + 1);
    let center = tape.transpose(center_col);
    let skip_w = bind(tape, params, "enc_chip_skip_w");
    let skip_b = bind(tape, params, "enc_chip_skip_b");
    let skip = linear(tape, center, skip_w, skip_b);
    if !spatial_context {
        return Ok(skip);
    }

    let dw_k = bind(tape, params, "enc_chip_dw_k");
    let dw = tape.depthwise_conv3x3(stack, dw_k, fs, fs);
    // Pointwise convolution across bands; bias omitted, the trunk MLP bias
    // covers it after pooling.
    let pw_w = bind(tape, params, "enc_chip_pw_w");
    let pw = tape.matmul(pw_w, dw);
    let pw = tape.relu(pw);
    let pooled = tape.row_mean(pw);
    let pooled = tape.transpose(pooled);
    let w1 = bind(tape, params, "enc_chip_mlp_w1");
    let b1 = bind(tape, params, "enc_chip_mlp_b1");
    let w2 = bind(tape, params, "enc_chip_mlp_w2");
    let b2 = bind(tape, params, "enc_chip_mlp_b2");
    let h = linear(tape, pooled, w1, b1);
    let h = tape.relu(h);
    let trunk = linear(tape, h, w2, b2);
    Ok(tape.add(trunk, skip))
}

/// Chip tokens for a batch of stations, row per station.
pub fn chip_tokens(
    tape: &mut Tape,
    params: &BTreeMap<String, Mat>,
    stacks: &[&[Chip]],
    schema: &ChipSchema,
    spatial_context: bool,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(stacks.len());
    for chips in stacks {
        let leaves = chip_leaves(tape, chips, schema)?;
        rows.push(chip_token(tape, params, &leaves, schema, spatial_context)?);
    }
    Ok(tape.concat_rows(&rows))
}

/// Backbone assembly: [coarse-sample token | station token | surface token
/// (when present) | location code] through the backbone projection.
pub fn assemble_backbone_tokens(
    tape: &mut Tape,
    params: &BTreeMap<String, Mat>,
    era5: Var,
    station: Var,
    surface: Option<Var>,
    loc: Var,
) -> Var {
    let mut parts = vec![era5, station];
    parts.extend(surface);
    parts.push(loc);
    let cat = tape.concat_cols(&parts);
    let w = bind(tape, params, "enc_asm_backbone_w");
    let b = bind(tape, params, "enc_asm_backbone_b");
    linear(tape, cat, w, b)
}

/// Target assembly: the coarse sample is the only weather information.
pub fn assemble_target_tokens(
    tape: &mut Tape,
    params: &BTreeMap<String, Mat>,
    era5: Var,
    surface: Option<Var>,
    loc: Var,
) -> Var {
    let mut parts = vec![era5];
    parts.extend(surface);
    parts.push(loc);
    let cat = tape.concat_cols(&parts);
    let w = bind(tape, params, "enc_asm_target_w");
    let b = bind(tape, params, "enc_asm_target_b");
    linear(tape, cat, w, b)
}

pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = round_f32(rng.gen_range(-a..a));
    }
    m
}

/// Initialize every encoder parameter for the given configuration.
/// Values are exactly representable in f32 so checkpoints round-trip.
pub fn init_encoder_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<BTreeMap<String, Mat>> {
    cfg.validate()?;
    let d = cfg.d_latent;
    let h = cfg.mlp_hidden;
    let l = cfg.location_code_len();
    let mut p = BTreeMap::new();
    for m in ["era5", "station"] {
        for (g, channels) in GROUPS {
            let input = 2 * channels.len();
            p.insert(format!("enc_tok_{m}_{g}_w1"), xavier(rng, input, h));
            p.insert(format!("enc_tok_{m}_{g}_b1"), Mat::zeros(1, h));
            p.insert(format!("enc_tok_{m}_{g}_w2"), xavier(rng, h, h));
            p.insert(format!("enc_tok_{m}_{g}_b2"), Mat::zeros(1, h));
        }
        p.insert(format!("enc_tok_{m}_proj_w"), xavier(rng, 3 * h, d));
        p.insert(format!("enc_tok_{m}_proj_b"), Mat::zeros(1, d));
    }

    p.insert("enc_loc_w1".into(), xavier(rng, l, l));
    p.insert("enc_loc_b1".into(), Mat::zeros(1, l));
    p.insert("enc_loc_w2".into(), xavier(rng, l, l));
    p.insert("enc_loc_b2".into(), Mat::zeros(1, l));

    let mut surf_width = 0;
    match &cfg.surface_mode {
        SurfaceMode::None => {}
        SurfaceMode::Embedding { dim } => {
            surf_width = d;
            p.insert("enc_surf_w1".into(), xavier(rng, *dim, h));
            p.insert("enc_surf_b1".into(), Mat::zeros(1, h));
            p.insert("enc_surf_w2".into(), xavier(rng, h, d));
            p.insert("enc_surf_b2".into(), Mat::zeros(1, d));
        }
        SurfaceMode::Chips { schema, .. } => {
            schema.validate()?;
            surf_width = d;
            let f2 = schema.upsample_factor() * schema.upsample_factor();
            let nb = schema.n_bands();
            let nc = schema.coarse_bands.len();
            // Upsampling starts as replication, depthwise as identity, both
            // perturbed so gradients break symmetry.
            let mut up = Mat::zeros(nc, f2);
            for v in up.data.iter_mut() {
                *v = round_f32(1.0 + rng.gen_range(-0.05..0.05));
            }
            p.insert("enc_chip_up_k".into(), up);
            let mut dwk = Mat::zeros(nb, 9);
            for r in 0..nb {
                for c in 0..9 {
                    let base = if c == 4 { 1.0 } else { 0.0 };
                    dwk.data[r * 9 + c] = round_f32(base + rng.gen_range(-0.05..0.05));
                }
            }
            p.insert("enc_chip_dw_k".into(), dwk);
            p.insert("enc_chip_pw_w".into(), xavier(rng, h, nb));
            p.insert("enc_chip_mlp_w1".into(), xavier(rng, h, h));
            p.insert("enc_chip_mlp_b1".into(), Mat::zeros(1, h));
            p.insert("enc_chip_mlp_w2".into(), xavier(rng, h, d));
            p.insert("enc_chip_mlp_b2".into(), Mat::zeros(1, d));
            p.insert("enc_chip_skip_w".into(), xavier(rng, nb, d));
            p.insert("enc_chip_skip_b".into(), Mat::zeros(1, d));
        }
    }

    let backbone_in = 2 * d + surf_width + l;
    let target_in = d + surf_width + l;
    p.insert("enc_asm_backbone_w".into(), xavier(rng, backbone_in, d));
    p.insert("enc_asm_backbone_b".into(), Mat::zeros(1, d));
    p.insert("enc_asm_target_w".into(), xavier(rng, target_in, d));
    p.insert("enc_asm_target_b".into(), Mat::zeros(1, d));
    Ok(p)
}
