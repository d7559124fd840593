//! Central finite-difference checking against [`Graph::backward`].

use crate::graph::{Graph, Tensor, Var};

/// Relative error used throughout the checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic and central-difference gradients of `f` at `x` for the
/// listed flat indices. Returns the worst relative error.
pub fn check_input_gradient<F>(x: &Tensor, indices: &[usize], h: f64, floor: f64, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    let g = Graph::new();
    let xv = g.leaf(std::rc::Rc::new(x.clone()));
    let loss = f(&g, xv);
    let grads = g.backward(loss);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.raw_dim()));

    let eval = |t: &Tensor| {
        let g = Graph::new();
        let v = g.constant(t.clone());
        f(&g, v).item()
    };
    let flat_a = analytic.as_standard_layout().into_owned();
    let flat_a = flat_a.as_slice().unwrap();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let mut plus = x.as_standard_layout().into_owned();
        let mut minus = plus.clone();
        plus.as_slice_mut().unwrap()[i] += h;
        minus.as_slice_mut().unwrap()[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        worst = worst.max(relative_error(flat_a[i], numeric, floor));
    }
    worst
}
