use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// Per-coordinate comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates that were compared (others were excluded by the caller).
    pub checked: usize,
    /// `max |a - n| / max(1, |a|, |n|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(Error::shape("grad_check", "function must be scalar-valued"));
    }
    Ok(g.value(y).item())
}

/// Checks `f` at `x` over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_where(f, x, eps, tol, |_| true)
}

/// Checks `f` at `x` over the coordinates for which `include` holds, e.g. to
/// skip coordinates sitting within `eps` of a kink.
pub fn grad_check_where<F, P>(f: F, x: &Tensor<f64>, eps: f64, tol: f64, include: P) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    P: Fn(usize) -> bool,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(xv).into_data();

    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    let mut max_rel_error: f64 = 0.0;
    let mut worst_index = None;
    let mut checked = 0;
    for i in 0..x.numel() {
        if !include(i) {
            continue;
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric[i] = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric[i]).abs() / 1f64.max(a.abs()).max(numeric[i].abs());
        checked += 1;
        if worst_index.is_none() || err > max_rel_error {
            max_rel_error = err;
            worst_index = Some(i);
        }
    }
    Ok(GradCheckReport { analytic, numeric, checked, max_rel_error, worst_index, tol })
}
