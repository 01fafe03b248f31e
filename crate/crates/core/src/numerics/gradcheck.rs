use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParameterSet, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    /// Lower bound on the relative-error denominator, in units of
    /// `max(1, |loss|)`. Rounding noise in the differences grows with the loss
    /// value, so gradients below this bound are compared against it instead.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_param: None,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub coordinates_checked: usize,
    pub max_relative_error: f64,
    /// Parameter name, flat index, analytic and numeric values of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares [`Graph::backward`] against central differences of `loss_fn`.
///
/// `loss_fn` receives a fresh graph with every parameter already registered as
/// a trainable leaf and returns the scalar loss node.
pub fn finite_difference_check<F>(
    loss_fn: F,
    params: &ParameterSet,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &std::collections::BTreeMap<String, Var>) -> Result<Var>,
{
    let eval = |p: &ParameterSet| -> Result<(Graph, Var)> {
        let mut graph = Graph::new();
        let vars = p.register(&mut graph);
        let loss = loss_fn(&mut graph, &vars)?;
        Ok((graph, loss))
    };

    let (graph, loss) = eval(params)?;
    let analytic = graph.backward(loss)?;
    let floor = options.denominator_floor * graph.value(loss).item()?.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();

    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let coords: Vec<usize> = match options.max_coords_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let grad = analytic
            .get(name)
            .expect("every registered parameter has a gradient");
        for i in coords {
            let original = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + options.step;
            let (g_plus, l_plus) = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - options.step;
            let (g_minus, l_minus) = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (g_plus.value(l_plus).item()? - g_minus.value(l_minus).item()?)
                / (2.0 * options.step);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
