//! Central finite-difference checks of tape gradients.

use super::{Result, Tape, Tensor};
use crate::tensor::NodeId;

/// Worst mismatch between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps exactly-zero
/// gradients from turning rounding noise into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Compares `backward` against central differences with step `h` for every
/// element of every input. `build` records a scalar loss from the input
/// nodes; it is re-run for each perturbation.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = values
            .iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss)[0])
    };
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let ids = leaves
        .iter()
        .map(|t| tape.leaf(t))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, &id) in ids.iter().enumerate() {
        let analytic = grads
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            out.max_abs_err = out.max_abs_err.max((analytic[j] - numeric).abs());
            out.max_rel_err =
                out.max_rel_err
                    .max(relative_error(analytic[j], numeric, REL_ERR_FLOOR));
            out.checked += 1;
        }
    }
    Ok(out)
}
