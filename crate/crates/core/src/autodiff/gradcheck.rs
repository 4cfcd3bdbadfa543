//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per leaf.
    pub max_elems_per_leaf: Option<usize>,
    /// Seed for element sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-6,
            floor: 1e-2,
            max_elems_per_leaf: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(leaf, element)` of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements whose one-sided differences disagree, i.e. the step crosses a
    /// kink (ReLU at 0, max-pool tie); excluded from `max_rel_err`.
    pub skipped_kinks: usize,
    pub passed: bool,
}

impl Default for GradCheckReport {
    fn default() -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
            skipped_kinks: 0,
            passed: true,
        }
    }
}

impl GradCheckReport {
    /// Folds another run into this one (max error, summed counts).
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.passed &= other.passed;
    }
}

/// Compares tape gradients against `(f(x+eps) - f(x-eps)) / (2 eps)`.
///
/// `f` rebuilds the computation from the leaf values and returns the graph,
/// the scalar root and the [`Var`] of every leaf in `leaves` order.
pub fn grad_check<F>(leaves: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<(Graph, Var, Vec<Var>)>,
{
    let (graph, root, vars) = f(leaves)?;
    if vars.len() != leaves.len() {
        return Err(Error::Config("grad_check: leaf count mismatch".into()));
    }
    let f0 = root_value(&graph, root)?;
    let grads = graph.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let elems: Vec<usize> = match opts.max_elems_per_leaf {
            Some(k) if k < leaf.len() => {
                let mut v = sample(&mut rng, leaf.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..leaf.len()).collect(),
        };
        for e in elems {
            let orig = leaf.data()[e];
            work[li].data_mut()[e] = orig + opts.eps;
            let fp = eval(&f, &work)?;
            work[li].data_mut()[e] = orig - opts.eps;
            let fm = eval(&f, &work)?;
            work[li].data_mut()[e] = orig;

            let fwd = (fp - f0) / opts.eps;
            let bwd = (f0 - fm) / opts.eps;
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1.0) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[li].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((li, e));
            }
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}

fn eval<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(Graph, Var, Vec<Var>)>,
{
    let (g, root, _) = f(leaves)?;
    root_value(&g, root)
}

fn root_value(g: &Graph, root: Var) -> Result<f64> {
    let v = g.value(root).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}
