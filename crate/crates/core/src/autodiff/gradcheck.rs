use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

/// Compares analytic gradients with central differences, coordinate by
/// coordinate.
///
/// `f` returns the scalar value and the analytic gradient of every parameter.
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(params: &[Tensor], epsilon: f64, mut f: F) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + epsilon;
            let (plus, _) = f(&work);
            work[pi].data_mut()[j] = orig - epsilon;
            let (minus, _) = f(&work);
            work[pi].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, j));
            }
            report.coordinates_checked += 1;
        }
    }
    report
}
