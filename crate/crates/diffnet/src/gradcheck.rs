//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Bound, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Denominator floor of the relative error, so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates (seeded subsample); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skip a coordinate when its one-sided slopes differ by more than this
    /// fraction of their magnitude, which happens when the ±ε probe crosses
    /// a ReLU or clamp kink. `None` checks every coordinate.
    pub kink_tol: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            max_coords: Some(400),
            seed: 0,
            kink_tol: Some(1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the probe straddled a kink.
    pub kinks: usize,
    /// Tensor name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
}

/// Compare tape gradients against central differences.
///
/// `loss` records a scalar loss of the bound parameters on a fresh tape.
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradcheck<F>(store: &ParamStore, opts: GradcheckOptions, loss: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.bind(s);
        let l = loss(&mut tape, &p)?;
        Ok(tape.scalar(l))
    };

    let mut tape = Tape::new();
    let p = tape.bind(store);
    let l = loss(&mut tape, &p)?;
    let analytic = tape.backward(l)?.for_params(&p, store);

    let coords: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .flat_map(|(i, (_, t))| (0..t.len()).map(move |c| (i, c)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(k) if k < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, coords.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let center = eval(store)?;
    let mut work = store.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: chosen.len(),
        kinks: 0,
        worst: None,
    };
    for (t, c) in chosen {
        let id = ParamId(t);
        let orig = work.scalar(id, c);
        work.set_scalar(id, c, orig + opts.eps);
        let up = eval(&work)?;
        work.set_scalar(id, c, orig - opts.eps);
        let down = eval(&work)?;
        work.set_scalar(id, c, orig);
        let numeric = (up - down) / (2.0 * opts.eps);
        if let Some(tol) = opts.kink_tol {
            let right = (up - center) / opts.eps;
            let left = (center - down) / opts.eps;
            if (right - left).abs() > tol * right.abs().max(left.abs()).max(opts.floor) {
                report.kinks += 1;
                report.checked -= 1;
                continue;
            }
        }
        let a = {
            let g = &analytic[t];
            g[[c / g.ncols(), c % g.ncols()]]
        };
        let denom = a.abs().max(numeric.abs()).max(opts.floor);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.name(id).to_string(), c));
        }
    }
    Ok(report)
}
