//! Central finite-difference validation of reverse-mode gradients.

use super::error::{Result, TensorError};
use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::Real;

/// Finite-difference step used throughout the self-tests.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude floor of the relative-error denominator. Gradients smaller than
/// this are compared on an absolute scale of the same size.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(leaf, element)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    pub passed: bool,
    pub checked: usize,
}

/// Relative error with the magnitude floor [`REL_ERROR_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares autodiff gradients of a scalar-valued builder against central
/// differences over every element of every leaf.
///
/// The builder receives one gradient-tracking variable per entry of `leaves`
/// and must be deterministic: any sampling inside it has to replay recorded
/// noise. Determinism is verified by evaluating it twice at the unperturbed
/// point; a mismatch is a contract error.
pub fn gradient_check<T, F>(
    leaves: &[Tensor<T>],
    build: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let eval = |inputs: &[Tensor<T>]| -> Result<T> {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&g, &vars)?;
        scalar_of(&out)
    };

    let g = Graph::new();
    let vars: Vec<_> = leaves.iter().map(|t| g.variable(t.clone())).collect();
    let root = build(&g, &vars)?;
    let base = scalar_of(&root)?;
    let again = eval(leaves)?;
    if base.as_f64().to_bits() != again.as_f64().to_bits() {
        return Err(TensorError::Contract(
            "gradient_check: builder is not deterministic (unfrozen sampling?)".into(),
        ));
    }
    g.backward(root)?;

    let h = T::lit(step);
    let mut probe: Vec<Tensor<T>> = leaves.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        tolerance,
        passed: true,
        checked: 0,
    };
    for (li, var) in vars.iter().enumerate() {
        let analytic = var
            .grad()
            .unwrap_or_else(|| Tensor::zeros(leaves[li].shape()));
        for ei in 0..leaves[li].len() {
            let x0 = leaves[li].data()[ei];
            probe[li].data_mut()[ei] = x0 + h;
            let fp = eval(&probe)?;
            probe[li].data_mut()[ei] = x0 - h;
            let fm = eval(&probe)?;
            probe[li].data_mut()[ei] = x0;
            let numeric = ((fp - fm) / (h + h)).as_f64();
            let err = relative_error(analytic.data()[ei].as_f64(), numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((li, ei));
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

fn scalar_of<T: Real>(v: &Var<'_, T>) -> Result<T> {
    let t = v.value();
    if t.len() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: t.shape().to_vec(),
        });
    }
    Ok(t.data()[0])
}
