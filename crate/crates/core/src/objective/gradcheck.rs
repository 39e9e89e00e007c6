//! Central finite-difference check of the composite-loss gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::TrainError;
use crate::model::{Group, ModelBundle};
use crate::objective::batch::{evaluate_batch, PreparedExample};
use crate::rng::rng_for;
use crate::sample::LossWeights;

/// Denominator floor of the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub n_coords: usize,
    /// Frozen coordinates sampled to confirm their analytic gradient is zero.
    pub n_frozen_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            n_coords: 240,
            n_frozen_coords: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordCheck {
    pub param: String,
    pub group: Group,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStat {
    pub group: Group,
    pub n_coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_group: Vec<GroupStat>,
    pub worst: Option<CoordCheck>,
    pub checks: Vec<CoordCheck>,
    pub frozen_checked: usize,
    /// Frozen coordinates whose analytic gradient was not exactly zero.
    pub frozen_nonzero: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Picks `n` coordinates from `params` (indices into the bundle), weighting
/// each parameter by its size.
fn sample_coords<R: Rng>(bundle: &ModelBundle, params: &[usize], n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if params.is_empty() {
        return Vec::new();
    }
    let sizes: Vec<usize> = params.iter().map(|&i| bundle.params()[i].value.data().len()).collect();
    let total: usize = sizes.iter().sum();
    (0..n)
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            for (&p, &s) in params.iter().zip(&sizes) {
                if k < s {
                    return (p, k);
                }
                k -= s;
            }
            unreachable!("offset within total size")
        })
        .collect()
}

fn loss_at(bundle: &ModelBundle, batch: &[&PreparedExample], weights: &LossWeights) -> Result<f64, TrainError> {
    let l = evaluate_batch(bundle, batch, weights, false)?.breakdown.l_total;
    if !l.is_finite() {
        return Err(TrainError::Diverged {
            step: 0,
            l_txt: f64::NAN,
            l_loc: f64::NAN,
            checkpoint: None,
        });
    }
    Ok(l)
}

/// Compares the analytic gradient of `l_total` on `batch` with central
/// differences on coordinates spread evenly over every trainable group.
pub fn grad_check(
    bundle: &ModelBundle,
    batch: &[&PreparedExample],
    weights: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    if opts.eps <= 0.0 || opts.n_coords == 0 {
        return Err(TrainError::Config("gradient check needs eps > 0 and at least one coordinate".into()));
    }
    let eval = evaluate_batch(bundle, batch, weights, true)?;
    if !eval.breakdown.is_finite() {
        return Err(TrainError::Diverged {
            step: 0,
            l_txt: eval.breakdown.l_txt,
            l_loc: eval.breakdown.l_loc,
            checkpoint: None,
        });
    }
    let grads = eval.grads.expect("requested gradients");

    let mut rng = rng_for(opts.seed, "gradcheck");
    let trainable_groups: Vec<Group> = Group::ALL
        .into_iter()
        .filter(|&g| !bundle.freeze.is_frozen(g) && bundle.n_parameters(Some(g)) > 0)
        .collect();
    if trainable_groups.is_empty() {
        return Err(TrainError::Config("no trainable parameters".into()));
    }
    let per_group = opts.n_coords.div_ceil(trainable_groups.len());
    let in_group = |g: Group| -> Vec<usize> {
        (0..bundle.params().len()).filter(|&i| bundle.params()[i].group == g).collect()
    };
    let mut coords = Vec::new();
    for &g in &trainable_groups {
        coords.extend(sample_coords(bundle, &in_group(g), per_group, &mut rng));
    }
    coords.shuffle(&mut rng);

    let frozen: Vec<usize> = (0..bundle.params().len()).filter(|&i| !bundle.is_trainable(i)).collect();
    let frozen_coords = sample_coords(bundle, &frozen, opts.n_frozen_coords, &mut rng);
    let frozen_nonzero = frozen_coords
        .iter()
        .filter(|&&(p, k)| grads[p].data()[k] != 0.0)
        .count();

    let checks: Vec<CoordCheck> = coords
        .par_iter()
        .map(|&(p, k)| {
            let mut probe = bundle.clone();
            let orig = probe.params()[p].value.data()[k];
            probe.params_mut()[p].value.data_mut()[k] = orig + opts.eps;
            let plus = loss_at(&probe, batch, weights)?;
            probe.params_mut()[p].value.data_mut()[k] = orig - opts.eps;
            let minus = loss_at(&probe, batch, weights)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = grads[p].data()[k];
            let param = &bundle.params()[p];
            Ok(CoordCheck {
                param: param.name.clone(),
                group: param.group,
                index: k,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            })
        })
        .collect::<Result<_, TrainError>>()?;

    let per_group = trainable_groups
        .iter()
        .map(|&g| {
            let errs: Vec<f64> = checks.iter().filter(|c| c.group == g).map(|c| c.rel_error).collect();
            GroupStat {
                group: g,
                n_coords: errs.len(),
                max_rel_error: errs.iter().cloned().fold(0.0, f64::max),
            }
        })
        .collect();
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    Ok(GradCheckReport {
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        per_group,
        worst,
        checks,
        frozen_checked: frozen_coords.len(),
        frozen_nonzero,
    })
}
