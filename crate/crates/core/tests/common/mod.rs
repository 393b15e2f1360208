#![allow(dead_code)]

use nightrain::rng::NoiseRng;
use nightrain::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL: f64 = 1e-3;
pub const FD_ABS: f64 = 1e-5;

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= (FD_REL * analytic.abs().max(numeric.abs())).max(FD_ABS)
}

pub fn randn(shape: &[usize], rng: &mut NoiseRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gaussian())
}

/// Central-difference gradient check of `f` with respect to every element of
/// every input. `f` must build a scalar from the leaves it is handed.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Result<(), String>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t, true)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).map_err(|e| e.to_string())?;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            if !close(analytic[i], numeric) {
                return Err(format!(
                    "input {k} element {i}: analytic {} vs numeric {numeric}",
                    analytic[i]
                ));
            }
        }
    }
    Ok(())
}

/// Contracts an arbitrary output with fixed random weights so every output
/// element contributes to the checked scalar.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let mut rng = NoiseRng::new(seed);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(&randn(&shape, &mut rng));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}
