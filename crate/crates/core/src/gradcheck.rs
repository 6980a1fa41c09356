//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::params::{rng_for, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Number of coordinates that must be compared (excluded ones do not count).
    pub samples: usize,
    pub seed: u64,
    /// Upper bound on coordinates drawn, compared or excluded.
    pub max_draws: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            samples: 100,
            seed: 0,
            max_draws: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Relative error net of central-difference rounding noise.
    pub rel_error: f64,
    /// Relative error without the noise allowance.
    pub raw_rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: Vec<Coordinate>,
    /// Coordinates whose `±ε` perturbation crosses a relu / max / min kink.
    pub excluded: Vec<Coordinate>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checked.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn max_raw_rel_error(&self) -> f64 {
        self.checked.iter().map(|c| c.raw_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Coordinate> {
        self.checked
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn failures(&self, threshold: f64) -> Vec<&Coordinate> {
        self.checked.iter().filter(|c| c.rel_error >= threshold).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Rounding resolution of a central difference of losses near `loss` at step `eps`.
pub fn difference_noise(loss: f64, eps: f64) -> f64 {
    8.0 * f64::EPSILON * loss.abs().max(1.0) / eps
}

/// Relative error after discounting the part of the discrepancy that lies
/// within the central difference's rounding resolution.
pub fn resolved_error(analytic: f64, numeric: f64, noise: f64) -> f64 {
    let excess = ((analytic - numeric).abs() - noise).max(0.0);
    excess / analytic.abs().max(numeric.abs()).max(1e-8)
}

struct Eval {
    loss: f64,
    signature: u64,
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<Eval>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::with_branch_tracking();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape()));
    }
    Ok(Eval {
        loss: v.data()[0],
        signature: tape.branch_signature(),
    })
}

/// Compares the tape gradient of the scalar program `f` against central
/// differences `(f(θ+εe) − f(θ−εe)) / 2ε` on randomly drawn coordinates of the
/// trainable entries in `params`.
///
/// `f` must bind the parameters it uses through [`ParamStore::bind`] so the tape
/// knows their names. Parameters are visited round-robin, one coordinate each
/// drawn without replacement, until `cfg.samples` coordinates have been
/// compared or every coordinate has been visited.
pub fn check_gradients<F>(f: F, params: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(invalid("check_gradients", format!("eps {} outside [1e-7, 1e-3]", cfg.eps)));
    }
    let first = evaluate(&f, params)?;
    let again = evaluate(&f, params)?;
    if first.loss.to_bits() != again.loss.to_bits() || first.signature != again.signature {
        return Err(Error::NonDeterministic);
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<(String, crate::tensor::Tensor)> = grads
        .params(&tape)
        .map(|(n, g)| (n.to_string(), g))
        .filter(|(n, _)| params.kind(n) == Some(crate::params::ParamKind::Trainable))
        .collect();
    if analytic.is_empty() {
        return Err(invalid("check_gradients", "program binds no trainable parameters"));
    }

    let mut rng = rng_for(cfg.seed, "gradcheck");
    let mut orders: Vec<Vec<usize>> = analytic
        .iter()
        .map(|(_, g)| {
            let mut o: Vec<usize> = (0..g.len()).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    let mut draws = 0;
    let mut which = 0;
    while report.checked.len() < cfg.samples && draws < cfg.max_draws {
        if orders.iter().all(Vec::is_empty) {
            break;
        }
        let k = which % analytic.len();
        which += 1;
        let Some(index) = orders[k].pop() else { continue };
        let (name, g) = &analytic[k];
        draws += 1;
        let orig = work.get(name)?.data()[index];
        work.get_mut(name)?.data_mut()[index] = orig + cfg.eps;
        let plus = evaluate(&f, &work)?;
        work.get_mut(name)?.data_mut()[index] = orig - cfg.eps;
        let minus = evaluate(&f, &work)?;
        work.get_mut(name)?.data_mut()[index] = orig;

        let numeric = (plus.loss - minus.loss) / (2.0 * cfg.eps);
        let a = g.data()[index];
        let coord = Coordinate {
            param: name.clone(),
            index,
            analytic: a,
            numeric,
            rel_error: resolved_error(a, numeric, difference_noise(plus.loss.abs().max(minus.loss.abs()), cfg.eps)),
            raw_rel_error: relative_error(a, numeric),
        };
        if plus.signature != first.signature || minus.signature != first.signature {
            report.excluded.push(coord);
        } else {
            report.checked.push(coord);
        }
    }
    Ok(report)
}
