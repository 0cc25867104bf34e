//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ModelParams};
use super::tape::{Tape, Var};
use crate::seed::rng_for;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Smaller steps tried on an entry that fails at `FD_STEP`. A ReLU input
/// closer to zero than the step makes the central difference straddle the
/// kink; a wrong gradient fails at every step.
pub const REFINED_STEPS: [f64; 2] = [1e-6, 1e-7];

/// Relative error is `|a − n| / max(|a|, |n|, REL_FLOOR)`; the floor keeps
/// round-off on vanishing gradients from counting as a mismatch.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entries that only passed at one of the `REFINED_STEPS`.
    pub refined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` gradients against central differences of `loss`.
pub fn check_gradients(
    params: &ModelParams,
    analytic: &Gradients,
    loss: impl Fn(&ModelParams) -> f64,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let mut work = params.clone();
    let mut reports = Vec::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.value(&name).map_or(0, |t| t.len());
        let indices: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < len => {
                let mut rng = rng_for(opts.seed, &name);
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        let mut refined = 0;
        for &i in &indices {
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let mut central = |h: f64| {
                let orig = work.value(&name).expect("present").data()[i];
                work.value_mut(&name).expect("present").data_mut()[i] = orig + h;
                let plus = loss(&work);
                work.value_mut(&name).expect("present").data_mut()[i] = orig - h;
                let minus = loss(&work);
                work.value_mut(&name).expect("present").data_mut()[i] = orig;
                relative_error(a, (plus - minus) / (2.0 * h))
            };
            let mut err = central(FD_STEP);
            if err >= opts.tolerance {
                let best = REFINED_STEPS.iter().map(|&h| central(h)).fold(err, f64::min);
                if best < opts.tolerance {
                    refined += 1;
                }
                err = best;
            }
            worst = worst.max(err);
        }
        reports.push(ParamCheck {
            name,
            checked: indices.len(),
            max_rel_error: worst,
            refined,
        });
    }
    let max_rel_error = reports.iter().fold(0.0_f64, |m, p| m.max(p.max_rel_error));
    GradCheckReport {
        params: reports,
        max_rel_error,
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
    }
}

/// Runs `build` once on a tape for the analytic gradients, then checks them.
///
/// `build` must be deterministic in the parameters (fixed dropout masks, no
/// fresh randomness per call).
pub fn gradient_check(
    params: &ModelParams,
    build: impl Fn(&mut Tape, &ModelParams) -> Var,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let analytic = tape.backward(loss);
    check_gradients(
        params,
        &analytic,
        |p| {
            let mut t = Tape::new();
            let l = build(&mut t, p);
            t.value(l).get(0, 0)
        },
        opts,
    )
}
