use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, TensorError, Var};

/// Entries checked per parameter when it is larger than this.
pub const DEFAULT_MAX_ENTRIES: usize = 64;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub global_max_rel_error: f64,
    pub epsilon: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.global_max_rel_error < tolerance
    }

    /// Parameter with the largest relative error.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Difference stencil used by the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, second order.
    #[default]
    Central3,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, fourth order.
    Central5,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub max_entries: usize,
    pub seed: u64,
    pub stencil: Stencil,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            max_entries: DEFAULT_MAX_ENTRIES,
            seed: 0x5eed,
            stencil: Stencil::Central3,
        }
    }
}

/// Checks every parameter leaf of `graph` against central differences of
/// `root`. Parameters with more than 64 elements are checked on a seeded
/// random subsample of 64 entries. Constants are never reported.
pub fn finite_difference_check(
    graph: &mut Graph<f64>,
    root: Var,
    epsilon: f64,
) -> Result<GradCheckReport, TensorError> {
    finite_difference_check_with(graph, root, epsilon, FdOptions::default())
}

pub fn finite_difference_check_with(
    graph: &mut Graph<f64>,
    root: Var,
    epsilon: f64,
    options: FdOptions,
) -> Result<GradCheckReport, TensorError> {
    if !(epsilon > 0.0) {
        return Err(TensorError::InvalidEpsilon(epsilon));
    }
    graph.eval_forward(root)?;
    let analytic = graph.backward(root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let names: Vec<String> = graph.param_names().map(str::to_string).collect();
    let mut per_param = BTreeMap::new();
    let mut entries_checked = 0;
    let mut global: f64 = 0.0;
    for name in names {
        let var = graph.param_var(&name).expect("listed parameter");
        let len = graph.value(var).len();
        let indices: Vec<usize> = if len <= options.max_entries {
            (0..len).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, len, options.max_entries).into_vec();
            idx.sort_unstable();
            idx
        };
        let grad = &analytic[&name];
        let mut worst: f64 = 0.0;
        for i in indices {
            let original = graph.value(var).data()[i];
            let mut at = |offset: f64| -> Result<f64, TensorError> {
                graph.leaf_data_mut(var)[i] = original + offset;
                Ok(graph.eval_forward(root)?.data()[0])
            };
            let numeric = match options.stencil {
                Stencil::Central3 => (at(epsilon)? - at(-epsilon)?) / (2.0 * epsilon),
                Stencil::Central5 => {
                    let (p1, m1) = (at(epsilon)?, at(-epsilon)?);
                    let (p2, m2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon)
                }
            };
            graph.leaf_data_mut(var)[i] = original;
            worst = worst.max(relative_error(grad.data()[i], numeric));
            entries_checked += 1;
        }
        global = global.max(worst);
        per_param.insert(name, worst);
    }
    graph.eval_forward(root)?;
    Ok(GradCheckReport {
        per_param,
        global_max_rel_error: global,
        epsilon,
        entries_checked,
    })
}
