//! Gap filling for station series.

use crate::error::{Error, Result};
use crate::types::{Series, SlotState, CHANNELS, CHANNEL_NAMES};

/// Fill missing slots per channel by linear interpolation in time between
/// observed neighbors; leading/trailing gaps copy the nearest observed
/// value. Filled slots are flagged `Filled` so they can feed the model but
/// are never scored. Only truly observed values anchor the interpolation.
pub fn fill_missing(series: &Series) -> Result<Series> {
    let n = series.len();
    let mut out = series.clone();
    for c in 0..CHANNELS {
        let mut prev_obs: Vec<Option<usize>> = vec![None; n];
        let mut next_obs: Vec<Option<usize>> = vec![None; n];
        let mut last = None;
        for i in 0..n {
            if series.states[i][c].observed() {
                last = Some(i);
            }
            prev_obs[i] = last;
        }
        let mut next = None;
        for i in (0..n).rev() {
            if series.states[i][c].observed() {
                next = Some(i);
            }
            next_obs[i] = next;
        }
        if last.is_none() {
            return Err(Error::FillError(format!("channel {}", CHANNEL_NAMES[c])));
        }
        for i in 0..n {
            if series.states[i][c] != SlotState::Missing {
                continue;
            }
            let v = match (prev_obs[i], next_obs[i]) {
                (Some(a), Some(b)) => {
                    let (va, vb) = (series.values[a][c], series.values[b][c]);
                    let w = (i - a) as f64 / (b - a) as f64;
                    va + (vb - va) * w
                }
                (None, Some(b)) => series.values[b][c],
                (Some(a), None) => series.values[a][c],
                (None, None) => unreachable!("channel has at least one observation"),
            };
            out.values[i][c] = v;
            out.states[i][c] = SlotState::Filled;
        }
    }
    Ok(out)
}
