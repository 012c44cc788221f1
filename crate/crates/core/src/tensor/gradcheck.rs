use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, over every coordinate of every input.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], h: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); t.len()])
        })
        .collect();

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar_value(loss).to_f64_lossy())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.data()[j];
            let hi = x + T::from_f64_lossy(h);
            let lo = x - T::from_f64_lossy(h);
            work[i].data_mut()[j] = hi;
            let f_hi = eval(&work)?;
            work[i].data_mut()[j] = lo;
            let f_lo = eval(&work)?;
            work[i].data_mut()[j] = x;
            let step = hi.to_f64_lossy() - lo.to_f64_lossy();
            let numeric = (f_hi - f_lo) / step;
            let a = analytic[i][j].to_f64_lossy();
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = (i, j);
                }
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_error)
}
