//! Central finite-difference oracle for hand-derived gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::Params;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const MIN_COORDS_PER_GROUP: usize = 50;

#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Worst coordinate: (index, analytic, numeric).
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn worst_group(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// Each trainable group is probed on a seeded random subset of at least
/// [`MIN_COORDS_PER_GROUP`] coordinates (all of them when the group is
/// smaller). The loss must be deterministic; two evaluations at `params` that
/// disagree make the oracle invalid.
pub fn grad_check<P, F>(loss: F, params: &P, analytic: &P, step: f64, seed: u64) -> Result<GradCheckReport>
where
    P: Params + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let base = loss(params)?;
    let again = loss(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "loss is not deterministic: {base} vs {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grad_slots = analytic.slots();
    let param_slots = params.slots();
    if grad_slots.len() != param_slots.len() {
        return Err(Error::dim("analytic gradient groups", param_slots.len(), grad_slots.len()));
    }

    let mut work = params.clone();
    let mut groups = Vec::new();
    for (slot_idx, (p, g)) in param_slots.iter().zip(&grad_slots).enumerate() {
        if !p.trainable || p.data.is_empty() {
            continue;
        }
        let n = p.data.len();
        let coords: Vec<usize> = if n <= MIN_COORDS_PER_GROUP {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, MIN_COORDS_PER_GROUP).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = (0, 0.0, 0.0);
        let mut max_err = 0.0f64;
        for &i in &coords {
            let original = p.data[i];
            set_coord(&mut work, slot_idx, i, original + step);
            let plus = loss(&work)?;
            set_coord(&mut work, slot_idx, i, original - step);
            let minus = loss(&work)?;
            set_coord(&mut work, slot_idx, i, original);
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(g.data[i], numeric);
            if err >= max_err {
                max_err = err;
                worst = (i, g.data[i], numeric);
            }
        }
        groups.push(GroupError {
            name: p.name.clone(),
            checked: coords.len(),
            max_rel_error: max_err,
            worst,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_error,
        step,
    })
}

fn set_coord<P: Params>(params: &mut P, slot: usize, index: usize, value: f64) {
    params.slots_mut()[slot].data[index] = value;
}
