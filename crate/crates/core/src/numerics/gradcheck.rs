use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Upper bound on probed coordinates per parameter; `None` probes all.
    pub max_coords_per_param: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest |analytic| among the probed coordinates.
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares `analytic` gradients (one tensor per parameter, in store order)
/// with central finite differences of `loss`.
pub fn grad_check<F>(
    store: &ParamStore,
    analytic: &[Tensor],
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync + Send,
{
    if analytic.len() != store.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            store.len()
        )));
    }
    let base = loss(store)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss(format!("loss at probe point is {base}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes = Vec::new();
    for (pi, p) in store.params().iter().enumerate() {
        let n = p.value.len();
        let mut coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        coords.sort_unstable();
        probes.extend(coords.into_iter().map(|c| (pi, c)));
    }

    let numeric: Vec<Result<f64>> = par::map_slice(&probes, |&(pi, c)| {
        let eval = |delta: f64| -> Result<f64> {
            let mut s = store.clone();
            s.params_mut()[pi].value.data_mut()[c] += delta;
            let l = loss(&s)?;
            if l.is_finite() {
                Ok(l)
            } else {
                Err(Error::NonFiniteLoss(format!(
                    "loss is {l} after perturbing {}[{c}]",
                    store.names()[pi]
                )))
            }
        };
        Ok((eval(opts.h)? - eval(-opts.h)?) / (2.0 * opts.h))
    });

    let mut params: Vec<ParamCheck> = store
        .names()
        .iter()
        .map(|name| ParamCheck {
            name: name.clone(),
            coords_checked: 0,
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_abs_analytic: 0.0,
        })
        .collect();
    for (&(pi, c), num) in probes.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[pi].data()[c];
        let err = relative_error(ana, num);
        let entry = &mut params[pi];
        entry.coords_checked += 1;
        entry.max_abs_analytic = entry.max_abs_analytic.max(ana.abs());
        if err > entry.max_rel_error || entry.coords_checked == 1 {
            entry.max_rel_error = err;
            entry.worst_coord = c;
            entry.analytic = ana;
            entry.numeric = num;
        }
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        max_rel_error,
    })
}
