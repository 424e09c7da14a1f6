//! Central-difference validation of tape gradients.

use super::{Tape, Tensor, Var};

/// Max over coordinates of |analytic - central difference| /
/// (|analytic| + |central| + 1e-12) for a scalar-valued function of `x`.
///
/// `f` must build the same graph for every call; it is invoked once with a
/// differentiable leaf for the analytic pass and twice per coordinate for
/// the numeric pass.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "grad_check: eps {eps} outside [1e-7, 1e-3]"
    );
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf);
    assert!(
        tape.value(out).is_scalar(),
        "grad_check: f must return a scalar, got shape {:?}",
        tape.shape(out)
    );
    tape.backward(out);
    let analytic = tape.grad(leaf);

    let eval = |data: &[f64]| -> f64 {
        let mut t = Tape::unchecked();
        let leaf = t.constant(Tensor::new(x.shape().to_vec(), data.to_vec()));
        let out = f(&mut t, leaf);
        t.item(out)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = eval(&probe);
        probe[i] = orig - eps;
        let lo = eval(&probe);
        probe[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Like [`grad_check`], but over the coordinates where a central difference
/// is informative: those whose analytic gradient clears the f64 resolution
/// floor ulp(|f|)/(2 eps) by `margin`. Coordinates below the floor change f
/// by less than one representable step, so the difference quotient measures
/// quantization there, not the derivative. Returns (max relative error over
/// checked coordinates, number checked).
pub fn grad_check_informative<F>(f: F, x: &Tensor, eps: f64, margin: f64) -> (f64, usize)
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "grad_check: eps {eps} outside [1e-7, 1e-3]"
    );
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf);
    assert!(
        tape.value(out).is_scalar(),
        "grad_check: f must return a scalar, got shape {:?}",
        tape.shape(out)
    );
    let f0 = tape.item(out);
    tape.backward(out);
    let analytic = tape.grad(leaf);
    let floor = ulp(f0.abs().max(1.0)) / (2.0 * eps) * margin;

    let eval = |data: &[f64]| -> f64 {
        let mut t = Tape::unchecked();
        let leaf = t.constant(Tensor::new(x.shape().to_vec(), data.to_vec()));
        let out = f(&mut t, leaf);
        t.item(out)
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        if analytic[i].abs() < floor {
            continue;
        }
        checked += 1;
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = eval(&probe);
        probe[i] = orig - eps;
        let lo = eval(&probe);
        probe[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        if err > worst {
            worst = err;
        }
    }
    (worst, checked)
}

fn ulp(x: f64) -> f64 {
    let next = f64::from_bits(x.to_bits() + 1);
    next - x
}
