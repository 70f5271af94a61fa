//! Loss, optimizer with cosine schedule, and the training loop with
//! validation-based checkpoint selection.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{forward_parts, init_model_state, station_target, ForwardOpts, TargetPoint};
use crate::autodiff::Tape;
use crate::dataio::Dataset;
use crate::encoders::round_f32;
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::types::{ModelConfig, ModelState, Normalization, CHANNELS};

/// Optimizer and batching settings. `steps` is the total optimizer step
/// count the cosine schedule anneals over.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub timestamps_per_step: usize,
    pub stations_per_timestamp: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            weight_decay: 1e-4,
            steps: 300,
            timestamps_per_step: 32,
            stations_per_timestamp: 64,
            eval_every: 25,
            seed: 2026,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(Error::ConfigMismatch("learning rate must be finite and >= 0".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::ConfigMismatch("weight decay must be finite and >= 0".into()));
        }
        if self.timestamps_per_step == 0 || self.stations_per_timestamp == 0 {
            return Err(Error::ConfigMismatch("batch sizes must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::ConfigMismatch("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step as reported: `val_loss` only on evaluation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Training trajectory plus checkpoint selection. Validation losses are
/// normalized-space MSE; `val_history` carries the matching MAE.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// (step, val_mse, val_mae), one row per evaluation.
    pub val_history: Vec<(usize, f64, f64)>,
    pub selected_step: usize,
    pub best_val_loss: f64,
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    /// Line-delimited records, a header then `step,loss,val_loss,lr`.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec!["step,loss,val_loss,lr".to_string()];
        for r in &self.records {
            let val = r.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
            out.push(format!("{},{:.9},{},{:.9}", r.step, r.loss, val, r.lr));
        }
        out
    }
}

/// Mean squared error over valid slots only, channels weighted equally.
/// `validity` holds 1.0 for scorable entries and 0.0 elsewhere.
pub fn loss(predictions: &Mat, observations: &Mat, validity: &Mat) -> Result<f64> {
    if predictions.rows != observations.rows
        || predictions.cols != observations.cols
        || validity.rows != predictions.rows
        || validity.cols != predictions.cols
    {
        return Err(Error::ConfigMismatch("loss inputs have mismatched shapes".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..predictions.data.len() {
        if validity.data[i] != 0.0 {
            let d = predictions.data[i] - observations.data[i];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(sum / n as f64)
}

/// Cosine-annealed learning rate: lr0 at step 0, lr0/2 at the midpoint,
/// approaching 0 at `total_steps`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam first/second moment state, one slot per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
    steps_taken: usize,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update with decoupled weight decay. Updated
/// parameters are rounded through f32 so checkpoints stay lossless.
pub fn adam_step(
    params: &mut BTreeMap<String, Mat>,
    grads: &BTreeMap<String, Mat>,
    opt: &mut Adam,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: opt.steps_taken,
                detail: format!("non-finite gradient in {name}"),
            });
        }
    }
    opt.steps_taken += 1;
    let t = opt.steps_taken as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    for (name, p) in params.iter_mut() {
        let zero = Mat::zeros(p.rows, p.cols);
        let g = grads.get(name).unwrap_or(&zero);
        let m = opt.m.entry(name.clone()).or_insert_with(|| Mat::zeros(p.rows, p.cols));
        let v = opt.v.entry(name.clone()).or_insert_with(|| Mat::zeros(p.rows, p.cols));
        for i in 0..p.data.len() {
            m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * g.data[i];
            v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * g.data[i] * g.data[i];
            let mh = m.data[i] / bc1;
            let vh = v.data[i] / bc2;
            let upd = lr * (mh / (vh.sqrt() + ADAM_EPS) + weight_decay * p.data[i]);
            p.data[i] = round_f32(p.data[i] - upd);
        }
    }
    Ok(())
}

/// Per-channel standardization fit on the dataset: station statistics
/// over observed slots of backbone and train stations, coarse statistics
/// over every grid value.
pub fn fit_normalization(dataset: &Dataset) -> Result<Normalization> {
    let mut station_samples: [Vec<f64>; CHANNELS] = Default::default();
    for id in dataset.partition.backbone.iter().chain(&dataset.partition.train) {
        let st = dataset
            .station(id)
            .ok_or_else(|| Error::PartitionError(format!("unknown station {id}")))?;
        for (values, states) in st.series.values.iter().zip(&st.series.states) {
            for c in 0..CHANNELS {
                if states[c].observed() {
                    station_samples[c].push(values[c]);
                }
            }
        }
    }
    let mut coarse_samples: [Vec<f64>; CHANNELS] = Default::default();
    for (i, v) in dataset.coarse.values.iter().enumerate() {
        coarse_samples[i % CHANNELS].push(*v);
    }
    Normalization::fit(&station_samples, &coarse_samples)
}

/// Normalized labels for the given stations at one timestep: values and
/// a 0/1 validity matrix over observed slots only.
fn target_labels(
    dataset: &Dataset,
    norm: &Normalization,
    idxs: &[usize],
    ti: usize,
) -> (Mat, Mat, usize) {
    let mut obs = Mat::zeros(idxs.len(), CHANNELS);
    let mut valid = Mat::zeros(idxs.len(), CHANNELS);
    let mut n = 0usize;
    for (r, &si) in idxs.iter().enumerate() {
        let st = &dataset.stations[si];
        for c in 0..CHANNELS {
            if st.series.states[ti][c].observed() {
                obs.data[r * CHANNELS + c] = norm.normalize_station(c, st.series.values[ti][c]);
                valid.data[r * CHANNELS + c] = 1.0;
                n += 1;
            }
        }
    }
    (obs, valid, n)
}

fn targets_for(dataset: &Dataset, idxs: &[usize]) -> Vec<TargetPoint> {
    idxs.iter().map(|&si| station_target(&dataset.stations[si])).collect()
}

/// Squared-error sum and gradient contribution of one batched timestep.
/// The backward seed carries 1/n_total so per-tape gradients accumulate
/// into the gradient of the pooled mean.
fn timestep_grads(
    dataset: &Dataset,
    cfg: &ModelConfig,
    params: &BTreeMap<String, Mat>,
    norm: &Normalization,
    ti: usize,
    station_idxs: &[usize],
    inv_total: f64,
) -> Result<(f64, Vec<(String, Mat)>)> {
    let targets = targets_for(dataset, station_idxs);
    let (obs, valid, _) = target_labels(dataset, norm, station_idxs, ti);
    let mut tape = Tape::new();
    let parts =
        forward_parts(&mut tape, dataset, cfg, params, norm, ti, &targets, &ForwardOpts::default())?;
    let obs_leaf = tape.leaf(obs);
    let valid_leaf = tape.leaf(valid);
    let diff = tape.sub(parts.predictions_norm, obs_leaf);
    let masked = tape.mul(diff, valid_leaf);
    let sq = tape.mul(masked, masked);
    let total = tape.sum_all(sq);
    let sum_sq = tape.value(total).data[0];
    tape.backward_with_seed(total, Mat::from_vec(1, 1, vec![inv_total]));
    Ok((sum_sq, tape.param_grads()))
}

/// Pooled normalized MSE and MAE of the model on the given stations over
/// every timestamp with at least one observed slot.
pub fn validation_scores(
    dataset: &Dataset,
    cfg: &ModelConfig,
    params: &BTreeMap<String, Mat>,
    norm: &Normalization,
    ids: &[String],
) -> Result<(f64, f64)> {
    let idxs: Vec<usize> = ids
        .iter()
        .map(|id| {
            dataset
                .station_index(id)
                .ok_or_else(|| Error::PartitionError(format!("unknown station {id}")))
        })
        .collect::<Result<_>>()?;
    if idxs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let targets = targets_for(dataset, &idxs);
    let per_t: Vec<(f64, f64, usize)> = (0..dataset.coarse.times.len())
        .into_par_iter()
        .map(|ti| -> Result<(f64, f64, usize)> {
            let (obs, valid, n) = target_labels(dataset, norm, &idxs, ti);
            if n == 0 {
                return Ok((0.0, 0.0, 0));
            }
            let mut tape = Tape::new();
            let parts = match forward_parts(
                &mut tape,
                dataset,
                cfg,
                params,
                norm,
                ti,
                &targets,
                &ForwardOpts::default(),
            ) {
                Ok(p) => p,
                // An hour with no live backbone cannot be scored.
                Err(Error::InsufficientStations { .. }) => return Ok((0.0, 0.0, 0)),
                Err(e) => return Err(e),
            };
            let pred = tape.value(parts.predictions_norm);
            let mut sum_sq = 0.0;
            let mut sum_abs = 0.0;
            for i in 0..pred.data.len() {
                if valid.data[i] != 0.0 {
                    let d = pred.data[i] - obs.data[i];
                    sum_sq += d * d;
                    sum_abs += d.abs();
                }
            }
            Ok((sum_sq, sum_abs, n))
        })
        .collect::<Result<_>>()?;
    let mut sum_sq = 0.0;
    let mut sum_abs = 0.0;
    let mut n = 0usize;
    for (s, a, k) in per_t {
        sum_sq += s;
        sum_abs += a;
        n += k;
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((sum_sq / n as f64, sum_abs / n as f64))
}

/// Cheap wiring check before the first optimizer step: a few analytic
/// gradient coordinates against central differences on one timestep.
fn preflight_gradient_check(
    dataset: &Dataset,
    cfg: &ModelConfig,
    params: &BTreeMap<String, Mat>,
    norm: &Normalization,
    train_idxs: &[usize],
) -> Result<()> {
    let mut picked = None;
    for ti in 0..dataset.coarse.times.len() {
        let sub: Vec<usize> = train_idxs.iter().copied().take(2).collect();
        let (_, _, n) = target_labels(dataset, norm, &sub, ti);
        if n > 0 {
            picked = Some((ti, sub));
            break;
        }
    }
    let (ti, sub) = picked.ok_or(Error::EmptyBatch)?;
    let eval = |p: &BTreeMap<String, Mat>| -> Result<f64> {
        let targets = targets_for(dataset, &sub);
        let (obs, valid, n) = target_labels(dataset, norm, &sub, ti);
        let mut tape = Tape::new();
        let parts =
            forward_parts(&mut tape, dataset, cfg, p, norm, ti, &targets, &ForwardOpts::default())?;
        let obs_leaf = tape.leaf(obs);
        let valid_leaf = tape.leaf(valid);
        let diff = tape.sub(parts.predictions_norm, obs_leaf);
        let masked = tape.mul(diff, valid_leaf);
        let sq = tape.mul(masked, masked);
        let total = tape.sum_all(sq);
        Ok(tape.value(total).data[0] / n as f64)
    };
    let (_, grads) = timestep_grads(
        dataset,
        cfg,
        params,
        norm,
        ti,
        &sub,
        1.0 / target_labels(dataset, norm, &sub, ti).2 as f64,
    )?;
    let grads: BTreeMap<String, Mat> = grads.into_iter().collect();

    let probes = ["head_w", "att_cross0_h0_wv", "enc_tok_station_temp_w1"];
    let eps = 1e-4;
    for name in probes {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Numerical(format!("preflight: no gradient for {name}")))?;
        let (i, gi) = g
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, v)| (i, *v))
            .unwrap();
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().data[i] += eps;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().data[i] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let denom = gi.abs().max(fd.abs()).max(1e-8);
        if (gi - fd).abs() / denom > 5e-2 {
            return Err(Error::Numerical(format!(
                "preflight gradient check failed for {name}[{i}]: analytic {gi} vs fd {fd}"
            )));
        }
    }
    Ok(())
}

/// Train a fresh model on the dataset's train stations, selecting the
/// parameters with minimum validation loss. Deterministic given the
/// seeds; gradient reduction order is fixed regardless of thread count.
/// On divergence the report marks the step and the last good parameters
/// are returned.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    model_cfg.validate()?;
    tcfg.validate()?;
    if dataset.partition.backbone.is_empty()
        || dataset.partition.train.is_empty()
        || dataset.partition.val.is_empty()
    {
        return Err(Error::PartitionError(
            "training needs nonempty backbone, train and val roles".into(),
        ));
    }
    let norm = fit_normalization(dataset)?;
    let mut state = init_model_state(model_cfg, &norm)?;
    let train_idxs: Vec<usize> = dataset
        .partition
        .train
        .iter()
        .map(|id| dataset.station_index(id).unwrap())
        .collect();

    let mut report = TrainReport::default();
    if tcfg.steps == 0 {
        return Ok((state, report));
    }
    preflight_gradient_check(dataset, model_cfg, &state.params, &norm, &train_idxs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(31);
    let n_times = dataset.coarse.times.len();
    let mut opt = Adam::new();
    let mut best_params = state.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0usize;
    let mut have_val = false;

    for step in 0..tcfg.steps {
        // Sample the batch on one thread so the rng stream is stable.
        let k_t = tcfg.timestamps_per_step.min(n_times);
        let mut times: Vec<usize> = rand::seq::index::sample(&mut rng, n_times, k_t).into_vec();
        times.sort_unstable();
        let mut batch: Vec<(usize, Vec<usize>)> = Vec::with_capacity(times.len());
        for ti in times {
            let k_s = tcfg.stations_per_timestamp.min(train_idxs.len());
            let mut pick: Vec<usize> =
                rand::seq::index::sample(&mut rng, train_idxs.len(), k_s)
                    .into_vec()
                    .into_iter()
                    .map(|i| train_idxs[i])
                    .collect();
            pick.sort_unstable();
            let (_, _, n) = target_labels(dataset, &norm, &pick, ti);
            if n > 0 {
                batch.push((ti, pick));
            }
        }
        let n_total: usize = batch
            .iter()
            .map(|(ti, pick)| target_labels(dataset, &norm, pick, *ti).2)
            .sum();
        if n_total == 0 {
            return Err(Error::EmptyBatch);
        }
        let inv_total = 1.0 / n_total as f64;

        let shards: Vec<(f64, Vec<(String, Mat)>)> = batch
            .par_iter()
            .map(|(ti, pick)| {
                timestep_grads(dataset, model_cfg, &state.params, &norm, *ti, pick, inv_total)
            })
            .collect::<Result<_>>()?;

        let mut step_loss = 0.0;
        let mut grads: BTreeMap<String, Mat> = BTreeMap::new();
        for (sum_sq, shard) in shards {
            step_loss += sum_sq;
            for (name, g) in shard {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        step_loss *= inv_total;

        let lr = cosine_lr(tcfg.lr0, step, tcfg.steps);
        let diverged = !step_loss.is_finite()
            || adam_step(&mut state.params, &grads, &mut opt, lr, tcfg.weight_decay).is_err();
        if diverged {
            report.diverged_at = Some(step);
            report.records.push(StepRecord { step, loss: step_loss, val_loss: None, lr });
            break;
        }

        let mut val_loss = None;
        if (step + 1) % tcfg.eval_every == 0 || step + 1 == tcfg.steps {
            let (mse, mae) = validation_scores(
                dataset,
                model_cfg,
                &state.params,
                &norm,
                &dataset.partition.val,
            )?;
            report.val_history.push((step, mse, mae));
            val_loss = Some(mse);
            have_val = true;
            if mse < best_val {
                best_val = mse;
                best_step = step;
                best_params = state.params.clone();
            }
        }
        report.records.push(StepRecord { step, loss: step_loss, val_loss, lr });
    }

    if have_val {
        state.params = best_params;
        report.selected_step = best_step;
        report.best_val_loss = best_val;
    } else {
        // Divergence before the first evaluation: fall back to the last
        // finite parameters, which adam_step never overwrote.
        report.selected_step = 0;
        report.best_val_loss = f64::NAN;
    }
    Ok((state, report))
}
