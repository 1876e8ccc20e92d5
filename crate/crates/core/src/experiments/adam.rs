use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Number of steps over which the relative objective change is measured.
pub const STOP_WINDOW: usize = 50;

/// Adam moments for gradient ascent on a matrix variable.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Matrix,
    v: Matrix,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols) }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// One ascent step `x += lr · m̂ / (√v̂ + ε)`.
    pub fn ascend(&mut self, x: &mut Matrix, grad: &Matrix) -> Result<()> {
        if grad.shape() != self.m.shape() || x.shape() != self.m.shape() {
            return Err(Error::Shape(format!(
                "Adam state is {:?} but got variable {:?} and gradient {:?}",
                self.m.shape(),
                x.shape(),
                grad.shape()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((xv, g), m), v) in x
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(self.m.as_mut_slice())
            .zip(self.v.as_mut_slice())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *xv += self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamOptions {
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once `|f_k − f_{k−50}| ≤ rel_tol · |f_{k−50}|`. Zero disables.
    pub rel_tol: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self { lr: 0.1, max_steps: 5000, rel_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamOutcome {
    /// Point with the best objective seen.
    pub x: Matrix,
    pub value: f64,
    pub steps: usize,
    /// Objective before each step.
    pub trace: Vec<f64>,
}

/// Gradient ascent with a combined value-and-gradient oracle.
///
/// The oracle may be stateful; it is evaluated once per step at the current
/// iterate. Returns the best iterate seen.
pub fn adam_ascend<F>(mut value_and_grad: F, x0: Matrix, opts: AdamOptions) -> Result<AdamOutcome>
where
    F: FnMut(&Matrix) -> Result<(f64, Matrix)>,
{
    let mut state = AdamState::new(x0.rows(), x0.cols(), opts.lr);
    let mut x = x0;
    let mut best = (f64::NEG_INFINITY, x.clone());
    let mut trace = Vec::new();
    for step in 0..=opts.max_steps {
        let (value, grad) = value_and_grad(&x)?;
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite { step, value });
        }
        if value > best.0 {
            best = (value, x.clone());
        }
        trace.push(value);
        if step == opts.max_steps {
            break;
        }
        if opts.rel_tol > 0.0 && step >= STOP_WINDOW {
            let past = trace[step - STOP_WINDOW];
            if (value - past).abs() <= opts.rel_tol * past.abs() {
                break;
            }
        }
        state.ascend(&mut x, &grad)?;
    }
    Ok(AdamOutcome { x: best.1, value: best.0, steps: state.step(), trace })
}

/// [`adam_ascend`] with separate objective and gradient.
pub fn adam_maximize<F, G>(objective: F, grad: G, x0: Matrix, opts: AdamOptions) -> Result<(Matrix, f64)>
where
    F: Fn(&Matrix) -> Result<f64>,
    G: Fn(&Matrix) -> Result<Matrix>,
{
    let out = adam_ascend(|x| Ok((objective(x)?, grad(x)?)), x0, opts)?;
    Ok((out.x, out.value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(target: &Matrix) -> (impl Fn(&Matrix) -> Result<f64> + '_, impl Fn(&Matrix) -> Result<Matrix> + '_) {
        (
            move |x: &Matrix| Ok(-x.sub(target).frobenius().powi(2)),
            move |x: &Matrix| Ok(target.sub(x).scale(2.0)),
        )
    }

    #[test]
    fn concave_quadratic_reaches_its_maximum() {
        let target = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let (f, g) = quadratic(&target);
        let opts = AdamOptions { lr: 0.1, max_steps: 5000, rel_tol: 0.0 };
        let (x, value) = adam_maximize(&f, &g, Matrix::zeros(2, 2), opts).unwrap();
        assert!(value > -1e-12);
        assert!(g(&x).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut st = AdamState::new(1, 2, 0.1);
        let mut x = Matrix::zeros(1, 2);
        st.ascend(&mut x, &Matrix::from_rows(&[[3.0, -0.5]])).unwrap();
        assert!((x[(0, 0)] - 0.1).abs() < 1e-8 && (x[(0, 1)] + 0.1).abs() < 1e-8);
        assert!(st.ascend(&mut x, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn non_finite_objective_aborts() {
        let r = adam_ascend(|x: &Matrix| Ok((f64::NAN, x.clone())), Matrix::zeros(1, 1), AdamOptions::default());
        assert!(matches!(r, Err(Error::NonFinite { step: 0, .. })));
    }

    #[test]
    fn stops_on_plateau() {
        let out = adam_ascend(|x: &Matrix| Ok((1.0, Matrix::zeros(x.rows(), x.cols()))), Matrix::zeros(1, 1), AdamOptions::default())
            .unwrap();
        assert_eq!(out.steps, STOP_WINDOW);
    }
}
