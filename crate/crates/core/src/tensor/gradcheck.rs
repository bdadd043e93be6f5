use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Central-finite-difference check of reverse-mode gradients.
///
/// Returns the max over coordinates of
/// `|analytic − central difference| / max(1, |analytic|)`.
/// `f` must be deterministic; everything runs in double precision.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = gradcheck_many(|tape, vars| f(tape, vars[0]), &[x.clone()], h)?;
    Ok(errs[0])
}

/// Multi-input variant; returns one max relative error per input.
pub fn gradcheck_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic gradients in one backward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<_>>()?;
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("gradcheck closure must produce a scalar".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            tape.grad(v)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("input {i} received no gradient")))
        })
        .collect::<Result<_>>()?;

    let eval = |xs_mod: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs_mod.iter().map(|x| t.constant(x.clone())).collect::<Result<_>>()?;
        let out = f(&mut t, &vs)?;
        t.value(out).item()
    };

    let mut errs = Vec::with_capacity(xs.len());
    for (pi, x) in xs.iter().enumerate() {
        let mut max_err = 0.0f64;
        for j in 0..x.numel() {
            let mut plus = xs.to_vec();
            plus[pi].data_mut()[j] += h;
            let fp = eval(&plus)?;
            let mut minus = xs.to_vec();
            minus[pi].data_mut()[j] -= h;
            let fm = eval(&minus)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
        errs.push(max_err);
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.4]).unwrap();
        let err = gradcheck(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let r = gradcheck(|t, v| Ok(t.scale(v, 2.0)), &x, 1e-5);
        assert!(r.is_err());
    }
}
