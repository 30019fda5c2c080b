//! Central-finite-difference verification of analytic gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Compare the tape's analytic gradients of a scalar-valued function
/// against central differences (f(p+h) - f(p-h)) / 2h, entry by entry,
/// in double precision. Returns the maximum relative error with
/// denominator max(|analytic|, |numeric|, 1e-8).
///
/// `build` must deterministically construct the scalar from the given
/// parameter leaves on the supplied tape.
pub fn grad_check<F>(build: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "grad_check step must be positive");

    let eval = |param_values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = param_values
            .iter()
            .map(|t| tape.input_tensor(t.clone()))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: super::shape_str(v.shape()),
            });
        }
        let x = v.values()[0];
        if !x.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(x)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| tape.input_tensor(t.clone()))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().to_vec())
        .collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let orig = p.values()[ei];
            let mut vals = p.values().to_vec();
            vals[ei] = orig + h;
            work[pi] = Tensor::new(p.shape().to_vec(), vals.clone())?;
            let f_plus = eval(&work)?;
            vals[ei] = orig - h;
            work[pi] = Tensor::new(p.shape().to_vec(), vals)?;
            let f_minus = eval(&work)?;
            work[pi] = p.clone();

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
