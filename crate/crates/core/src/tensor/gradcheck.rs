use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so gradients that are zero up
/// to round-off are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input index, element index) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` builds its computation from the leaves it is handed. A non-scalar
/// output is reduced to `Σ out ⊙ r` with fixed weights `r`, which probes
/// every output element. The error per element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), want_grad)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = if tape.value(out).numel() == 1 {
            out
        } else {
            let n = tape.value(out).numel();
            let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i as f64) * 0.618_034).fract()).collect();
            let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), w)?);
            let prod = tape.mul(out, w)?;
            tape.sum(prod)
        };
        let value = tape.scalar_value(loss);
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let x0 = input.data()[e];
            probe[ii].data_mut()[e] = x0 + eps;
            let (plus, _) = eval(&probe, false)?;
            probe[ii].data_mut()[e] = x0 - eps;
            let (minus, _) = eval(&probe, false)?;
            probe[ii].data_mut()[e] = x0;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ii][e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_relative_error || report.checked == 1 {
                report.max_relative_error = err;
                report.worst = (ii, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
