//! Central finite-difference verification of analytic gradients.
//!
//! Used by the unit tests, the acceptance suite and the `gradcheck` CLI
//! command. The checker owns the perturbation loop; callers supply a closure
//! that rebuilds the computation from leaf tensors and returns a scalar loss.

use super::{backward, Tensor};
use crate::error::Result;
use crate::rng::Rng;

/// Shape plus initial data for one differentiable input of a checked op.
#[derive(Debug, Clone)]
pub struct InputSpec {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl InputSpec {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        InputSpec { shape: shape.to_vec(), data }
    }

    /// Uniform random values in [-1, 1].
    pub fn random(shape: &[usize], rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(-1.0, 1.0)).collect();
        InputSpec { shape: shape.to_vec(), data }
    }
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst relative error across every checked element.
    pub max_rel_err: f64,
    /// Number of gradient elements compared.
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps near-zero gradients from
/// amplifying finite-difference noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Check analytic gradients of `f` against central finite differences with
/// step `h` for every element of every input.
///
/// `f` must be a pure function of the given leaves: it is re-invoked for each
/// perturbed evaluation.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[InputSpec],
    f: F,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    // Analytic pass.
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|s| Tensor::param(&s.shape, s.data.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // Finite differences, one element at a time.
    let eval = |specs: &[InputSpec]| -> Result<f64> {
        let leaves: Vec<Tensor> = specs
            .iter()
            .map(|s| Tensor::from_vec(&s.shape, s.data.clone()))
            .collect::<Result<_>>()?;
        Ok(f(&leaves)?.item())
    };

    let mut work: Vec<InputSpec> = inputs.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (ti, spec) in inputs.iter().enumerate() {
        for ei in 0..spec.data.len() {
            let orig = work[ti].data[ei];
            work[ti].data[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data[ei] = orig;
            let fd = (plus - minus) / (2.0 * h);
            max_rel_err = max_rel_err.max(relative_error(analytic[ti][ei], fd));
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        checked,
        tolerance,
    })
}
