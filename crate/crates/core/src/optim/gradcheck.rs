use nalgebra::DVector;

/// Central-difference gradient with step `1e-5·max(1, |x_j|)`.
pub fn central_difference_gradient<F>(f: F, x: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut probe = x.clone();
    DVector::from_fn(x.len(), |j, _| {
        let h = 1e-5 * x[j].abs().max(1.0);
        probe[j] = x[j] + h;
        let up = f(&probe);
        probe[j] = x[j] - h;
        let down = f(&probe);
        probe[j] = x[j];
        (up - down) / (2.0 * h)
    })
}

/// Largest per-coordinate relative error `|g − ĝ| / (1 + |g|)` between an
/// analytic gradient `g` and its central-difference estimate `ĝ`. Non-finite
/// values yield `+∞`.
pub fn check_gradient<F, G>(f: F, grad: G, x: &DVector<f64>) -> f64
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let analytic = grad(x);
    let numeric = central_difference_gradient(f, x);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&g, &h)| {
            let e = (g - h).abs() / (1.0 + g.abs());
            if e.is_finite() {
                e
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}
