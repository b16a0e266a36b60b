//! Central finite-difference checks of the backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Fault, Graph, NodeId};
use super::params::ParamSet;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries larger than this get a random sample of this many indices.
    pub max_entries_per_param: usize,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: usize::MAX,
            floor: 1e-6,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Entries whose central difference changed with the step size, i.e. the
    /// perturbation crossed a ReLU or max-pool switch. These are re-measured
    /// at a smaller step.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error >= self.tolerance)
    }
}

const KINK_RETRIES: usize = 2;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences of the scalar built by
/// `model`. The closure must be deterministic.
pub fn finite_diff_check<F>(
    model: F,
    params: &ParamSet,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    let mut graph = match opts.fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    let loss = model(&mut graph, params)?;
    let analytic = graph.backward(loss, params)?;

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = model(&mut g, ps)?;
        Ok(g.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        tolerance,
        params: Vec::with_capacity(params.len()),
    };
    for (id, p) in params.iter() {
        let n = p.value.len();
        let indices: Vec<usize> = if n <= opts.max_entries_per_param {
            (0..n).collect()
        } else {
            let mut s =
                rand::seq::index::sample(&mut rng, n, opts.max_entries_per_param).into_vec();
            s.sort_unstable();
            s
        };
        let grad = analytic.get(id).expect("backward fills every parameter");
        let mut check = ParamCheck {
            name: p.name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            kinks: 0,
        };
        for i in indices {
            let mut central = |step: f64| -> Result<f64> {
                let orig = p.value.data()[i];
                work.value_mut(id).data_mut()[i] = orig + step;
                let up = eval(&work)?;
                work.value_mut(id).data_mut()[i] = orig - step;
                let down = eval(&work)?;
                work.value_mut(id).data_mut()[i] = orig;
                Ok((up - down) / (2.0 * step))
            };
            let a = grad.data()[i];
            let mut step = opts.step;
            let mut numeric = central(step)?;
            let mut err = relative_error(a, numeric, opts.floor);
            // A wrong analytic gradient cannot make two numeric estimates
            // disagree, so only a non-smooth point triggers the smaller step.
            for _ in 0..KINK_RETRIES {
                if err < tolerance {
                    break;
                }
                step /= 10.0;
                let finer = central(step)?;
                if relative_error(numeric, finer, opts.floor) < tolerance {
                    break;
                }
                check.kinks += 1;
                numeric = finer;
                err = relative_error(a, numeric, opts.floor);
            }
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Partition;
    use crate::autodiff::TensorValue;

    #[test]
    fn linear_model_is_exact() {
        let mut ps = ParamSet::new();
        let w = ps
            .insert(
                "w",
                Partition::Shared,
                TensorValue::from_rows(&[&[0.3], &[-1.2]]),
            )
            .unwrap();
        let x = TensorValue::from_rows(&[&[1.0, 2.0], &[-0.5, 0.25], &[3.0, 1.0]]);
        let report = finite_diff_check(
            |g, ps| {
                let xi = g.input(x.clone());
                let wi = g.param(ps, w);
                let y = g.matmul(xi, wi)?;
                g.sum(y)
            },
            &ps,
            1e-10,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
