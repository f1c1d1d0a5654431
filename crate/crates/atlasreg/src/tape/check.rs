//! Central finite-difference gradient checking against the tape's analytic
//! gradients. Used heavily by the test suites; exposed so integration tests
//! can drive it too.

use super::{Graph, Var};
use crate::nd::NdArray;

/// Worst relative disagreement found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, finite difference) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Builds the scalar loss with `build`, computes analytic gradients of every
/// input, and compares them entry by entry against central differences.
///
/// Relative error uses a unit floor so near-zero gradient pairs compare
/// absolutely: |a - fd| / max(1, |a|, |fd|).
pub fn grad_check<F>(build: F, inputs: &[NdArray<f64>], step: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[NdArray<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let loss = build(&mut g, &vars);
        g.scalar_value(loss)
    };

    // Analytic pass.
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };

    let mut work: Vec<NdArray<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads[vars[ii].0]
            .clone()
            .unwrap_or_else(|| NdArray::zeros(&input.shape));
        for e in 0..input.len() {
            let orig = work[ii].data[e];
            work[ii].data[e] = orig + step;
            let fp = eval(&work);
            work[ii].data[e] = orig - step;
            let fm = eval(&work);
            work[ii].data[e] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let a = analytic.data[e];
            let rel = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ii, e, a, fd));
            }
        }
    }
    report
}
