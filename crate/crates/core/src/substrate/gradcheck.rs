use super::param::{ParamId, ParamStore};
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn probed_params(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.probes.iter().map(|p| p.param.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare reverse-mode gradients against central differences.
///
/// Probes `probes_per_param` random coordinates of every parameter (all of
/// them when the parameter is smaller). `loss` must be a pure function of
/// the store.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    loss: F,
    probes_per_param: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(&mut t, s)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite("loss under gradient check".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    if !tape.scalar(l).is_finite() {
        return Err(Error::NonFinite("loss under gradient check".into()));
    }
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.backward_into(l, &mut analytic)?;

    let mut probes = Vec::new();
    let mut perturbed = store.clone();
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let n = store.get(id).value.as_slice().len();
        let coords: Vec<usize> = if n <= probes_per_param {
            (0..n).collect()
        } else {
            rng.sample_distinct(n, probes_per_param)
        };
        for k in coords {
            let orig = store.get(id).value.as_slice()[k];
            perturbed.get_mut(id).value.as_mut_slice()[k] = orig + FD_STEP;
            let up = eval(&perturbed)?;
            perturbed.get_mut(id).value.as_mut_slice()[k] = orig - FD_STEP;
            let down = eval(&perturbed)?;
            perturbed.get_mut(id).value.as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(id).grad.as_slice()[k];
            probes.push(Probe {
                param: store.get(id).name.clone(),
                index: k,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric),
            });
        }
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= tol,
        max_rel_error,
        tol,
        probes,
    })
}
