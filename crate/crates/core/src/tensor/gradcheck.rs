//! Finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Central-difference step. At `f64` this keeps truncation and roundoff
/// error both far below the acceptance tolerance.
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Gradients below `FLOOR_PER_UNIT * max(1, |f|)` are treated as matching
/// zeros. Central differences carry roundoff noise of about
/// `eps * |f| / h ~ 2e-10 * |f|`, so components this small cannot be
/// resolved to the 1e-4 relative tolerance in the first place.
const FLOOR_PER_UNIT: f64 = 1e-5;

/// Compares tape gradients of a deterministic scalar function against
/// central finite differences, perturbing every element of every input.
/// Returns the worst relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "grad_check",
                msg: "function under test must return a scalar".to_string(),
            });
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|&v| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
            })
            .collect::<Vec<_>>()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let baseline = eval(&work)?;
    let floor = FLOOR_PER_UNIT * baseline.abs().max(1.0);

    let mut worst = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + GRAD_CHECK_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - GRAD_CHECK_STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let exact = analytic[ti].data()[ei];
            let scale = exact.abs().max(numeric.abs());
            if scale > floor {
                worst = worst.max((exact - numeric).abs() / scale);
            }
        }
    }
    Ok(worst)
}
