//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The oracle only evaluates forward values, so it stays independent of the
//! adjoint code it checks.

use crate::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Perturbation half-width.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    /// Compares tape gradients of the scalar `f(inputs)` against central
    /// differences for every element of every input.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> GradReport
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).expect("scalar output");
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).expect("leaf requires grad").into_data())
            .collect();

        let eval = |probe: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        };

        let mut numeric = Vec::with_capacity(inputs.len());
        let mut probe = inputs.to_vec();
        for i in 0..inputs.len() {
            let mut col = Vec::with_capacity(inputs[i].len());
            for j in 0..inputs[i].len() {
                let orig = inputs[i].data()[j];
                probe[i].data_mut()[j] = orig + self.step;
                let plus = eval(&probe);
                probe[i].data_mut()[j] = orig - self.step;
                let minus = eval(&probe);
                probe[i].data_mut()[j] = orig;
                col.push((plus - minus) / (2.0 * self.step));
            }
            numeric.push(col);
        }

        let mut max_rel_error = 0.0;
        let mut worst = (0, 0);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            for (j, (&x, &y)) in a.iter().zip(n).enumerate() {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(self.floor);
                if rel > max_rel_error {
                    max_rel_error = rel;
                    worst = (i, j);
                }
            }
        }
        GradReport {
            max_rel_error,
            worst,
            analytic,
            numeric,
        }
    }
}
