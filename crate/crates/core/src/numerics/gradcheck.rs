//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter group (all of them if the group is smaller).
    pub coords_per_group: usize,
    /// Denominator floor of the relative error, so gradients that are zero up
    /// to rounding are compared absolutely instead of blowing up.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            coords_per_group: 32,
            denom_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.tol)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err > self.tol)
            .map(|g| g.name.as_str())
            .collect()
    }
}

/// Fills the store's gradients by one backward pass, then compares them against
/// finite differences with [`check_gradients`].
pub fn grad_check<L>(
    mut loss_fn: L,
    params: &mut ParameterStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParameterStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    params.zero_grads();
    let (tape, loss) = loss_fn(params)?;
    tape.backward_into(loss, params)?;
    check_gradients(loss_fn, params, cfg)
}

/// Compares the gradients already stored in `params` with central differences
/// `(f(x + eps) - f(x - eps)) / 2 eps` on sampled coordinates of every trainable group.
pub fn check_gradients<L>(
    mut loss_fn: L,
    params: &mut ParameterStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParameterStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    let mut rng = rng_from_seed(cfg.seed);
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let mut eval = |store: &ParameterStore<f64>| -> Result<f64> {
        let (tape, loss) = loss_fn(store)?;
        let v = tape.scalar(loss)?;
        if !v.is_finite() {
            return Err(Error::Numeric("loss is not finite during gradient check".into()));
        }
        Ok(v)
    };

    let mut groups = Vec::with_capacity(names.len());
    for name in names {
        let len = params.get(&name)?.value.len();
        let coords: Vec<usize> = if len <= cfg.coords_per_group {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, cfg.coords_per_group).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = GroupCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let original = params.get(&name)?.value.data()[i];
            params.get_mut(&name)?.value.data_mut()[i] = original + cfg.eps;
            let plus = eval(params)?;
            params.get_mut(&name)?.value.data_mut()[i] = original - cfg.eps;
            let minus = eval(params)?;
            params.get_mut(&name)?.value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let analytic = params.get(&name)?.grad.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(cfg.denom_floor);
            let rel = (analytic - numeric).abs() / denom;
            if rel > check.max_rel_err || !rel.is_finite() {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        groups.push(check);
    }
    Ok(GradCheckReport {
        groups,
        tol: cfg.tol,
    })
}
