//! Central finite-difference gradient checks (64-bit only).

use super::{Graph, Tensor, TensorError, Var};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is essentially zero are judged on absolute error instead.
///
/// A central difference with step `1e-5` on a loss of magnitude `|L|` carries
/// round-off noise of roughly `10 · ε · |L| / h ≈ 1e-10` for `|L| ≈ 4`
/// (observed: up to `1e-10` on the model losses). Resolving a relative error
/// of `1e-4` therefore needs `|g| ≳ 1e-6`; below the floor an entry is judged
/// on absolute error `< tol · 1e-5`.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let rel_err: Vec<f64> = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .collect();
        let max_rel_err = rel_err.iter().copied().fold(0.0, f64::max);
        Self {
            analytic: analytic.to_vec(),
            numeric: numeric.to_vec(),
            passed: max_rel_err < tol && rel_err.iter().all(|e| e.is_finite()),
            rel_err,
            max_rel_err,
            tol,
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Central differences of a scalar function at every element of `x`.
pub fn numeric_gradient(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Checks the graph gradient of `f` at `x` against central differences.
///
/// `f` records a scalar-valued computation of its input on the given graph.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), false);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    eval(x)?;

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = numeric_gradient(|t| eval(t).expect("evaluated once already"), x, h);
    Ok(GradReport::compare(&analytic, &numeric, tol))
}
