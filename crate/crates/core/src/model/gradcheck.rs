use super::network::{Model, Sample};

const SCALE_FLOOR: f64 = 1e-6;

/// Agreement between analytic and finite-difference gradients for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    /// Largest absolute analytic gradient among checked entries.
    pub analytic_max: f64,
    pub max_abs_diff: f64,
    /// `max|a − n| / max(max|a|, max|n|, 1e-6)` over the checked entries.
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Compares analytic gradients to central differences `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `max_per_group` limits how many entries of each tensor are probed (evenly strided);
/// `None` probes every scalar. The error is measured against the group's largest gradient,
/// floored at `1e-6` so groups whose true gradient is zero (key biases under softmax) are
/// judged by absolute finite-difference noise.
pub fn gradient_check(
    model: &Model,
    batch: &[Sample],
    begin: u32,
    eps: f64,
    max_per_group: Option<usize>,
) -> crate::Result<GradCheckReport> {
    let (_, grads) = model.batch_loss_and_grads(batch, begin)?;
    let mut probe = model.clone();
    let mut groups = Vec::new();
    for id in model.params().ids() {
        let len = model.params().get(id).len();
        let stride = max_per_group.map_or(1, |m| len.div_ceil(m.max(1)).max(1));
        let mut max_diff: f64 = 0.0;
        let mut max_a: f64 = 0.0;
        let mut max_n: f64 = 0.0;
        let mut checked = 0;
        for j in (0..len).step_by(stride) {
            let orig = model.params().get(id).data[j];
            probe.params_mut().get_mut(id).data[j] = orig + eps;
            let plus = probe.batch_loss(batch, begin)?;
            probe.params_mut().get_mut(id).data[j] = orig - eps;
            let minus = probe.batch_loss(batch, begin)?;
            probe.params_mut().get_mut(id).data[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).data[j];
            max_diff = max_diff.max((analytic - numeric).abs());
            max_a = max_a.max(analytic.abs());
            max_n = max_n.max(numeric.abs());
            checked += 1;
        }
        let scale = max_a.max(max_n).max(SCALE_FLOOR);
        groups.push(GroupCheck {
            name: model.params().name(id).to_string(),
            checked,
            analytic_max: max_a,
            max_abs_diff: max_diff,
            relative_error: max_diff / scale,
        });
    }
    Ok(GradCheckReport { groups })
}
