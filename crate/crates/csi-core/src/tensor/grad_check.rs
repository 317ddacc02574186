use super::{Tape, Tensor, TensorError, Var};

/// Compare analytic gradients against central finite differences.
///
/// `f` must build a scalar output on the supplied tape from the supplied
/// input var. Returns the max over checked coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `coords`: specific flat coordinates to check, or `None` for all of them.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, coords: Option<&[usize]>) -> Result<f64, TensorError>
where
    F: Fn(&Tape, Var) -> Var,
{
    assert!((1e-6..=1e-4).contains(&eps), "eps must lie in [1e-6, 1e-4]");
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&tape, xv);
    if !tape.val(out).all_finite() {
        return Err(TensorError::NonFinite("grad_check forward value"));
    }
    tape.backward(out);
    let analytic = tape.grad(xv).expect("input participates in output");

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };

    let eval = |pt: &Tensor| -> Result<f64, TensorError> {
        let t = Tape::new();
        let v = t.leaf(pt.clone());
        let o = f(&t, v);
        let val = t.val(o).item();
        if !val.is_finite() {
            return Err(TensorError::NonFinite("grad_check perturbed value"));
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let fp = eval(&xp)?;
        xp.data_mut()[i] -= 2.0 * eps;
        let fm = eval(&xp)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
