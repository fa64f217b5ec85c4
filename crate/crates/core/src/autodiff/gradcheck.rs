use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare autodiff gradients of a scalar function against central finite
/// differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a scalar node. The result is the largest
/// `|autodiff − fd| / max(|autodiff|, |fd|, floor)` over every parameter
/// coordinate, where `floor` is `1e-3` times the largest `|fd|` (at least
/// `1e-8`). Coordinates whose true gradient is near zero are thereby judged
/// against the gradient's overall scale rather than against roundoff.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut work = params.to_vec();
    let mut pairs = Vec::new();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            pairs.push((grad.data()[j], (up - down) / (2.0 * step)));
        }
    }
    let floor = (1e-3 * pairs.iter().map(|(_, fd)| fd.abs()).fold(0.0, f64::max)).max(1e-8);
    Ok(pairs
        .iter()
        .map(|&(ad, fd)| (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor))
        .fold(0.0, f64::max))
}
