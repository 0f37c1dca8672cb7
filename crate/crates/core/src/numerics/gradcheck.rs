//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, in `[1e-6, 1e-4]`.
    pub step: f64,
    /// Coordinates sampled per input tensor; smaller tensors are checked in full.
    pub coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_input: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).sum();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    Ok(value)
}

/// Compares reverse-mode gradients of `Σ f(inputs)` with central
/// differences on a seeded sample of input coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.step
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).sum();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.len() <= opts.coords_per_input {
            coords.extend((0..t.len()).map(|j| (i, j)));
        } else {
            coords.extend(
                sample(&mut rng, t.len(), opts.coords_per_input)
                    .into_iter()
                    .map(|j| (i, j)),
            );
        }
    }

    let h = opts.step;
    let errors = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut shifted = inputs.to_vec();
            let x = shifted[i].data()[j];
            shifted[i].data_mut()[j] = x + h;
            let plus = evaluate(&f, &shifted)?;
            shifted[i].data_mut()[j] = x - h;
            let minus = evaluate(&f, &shifted)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            Ok(((a - numeric).abs() / numeric.abs().max(1.0), (i, j)))
        })
        .collect::<Result<Vec<_>>>()?;

    let worst = errors
        .iter()
        .copied()
        .fold(None::<(f64, (usize, usize))>, |best, e| match best {
            Some(b) if b.0 >= e.0 => Some(b),
            _ => Some(e),
        });
    Ok(GradCheckReport {
        max_relative_error: worst.map_or(0.0, |w| w.0),
        coordinates: errors.len(),
        worst: worst.map(|w| w.1),
    })
}
