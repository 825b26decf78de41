//! Gradient contract, Adam optimizer and finite-difference verification.
//!
//! Every trainable quantity lives in a [`ParamVector`]. Losses implement
//! [`Objective`], which pairs a plain evaluation with an analytic
//! value-and-gradient pass. The analytic pass is written by hand for each
//! stage of the link; [`finite_difference_check`] is the independent route
//! that verifies it.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// A named, contiguous block inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered trainable parameters, grouped in named blocks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    blocks: Vec<ParamBlock>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block. Names must be unique and values finite.
    pub fn push_block(&mut self, name: impl Into<String>, values: &[f64]) -> Result<()> {
        let name = name.into();
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter block `{name}`"
            )));
        }
        ensure_finite(values, "ParamVector::push_block")?;
        self.blocks.push(ParamBlock {
            name,
            offset: self.values.len(),
            len: values.len(),
        });
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.offset..b.offset + b.len])
    }

    /// Name of the block holding scalar `index`, with the offset inside it.
    pub fn locate(&self, index: usize) -> Option<(&str, usize)> {
        self.blocks
            .iter()
            .find(|b| index >= b.offset && index < b.offset + b.len)
            .map(|b| (b.name.as_str(), index - b.offset))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A differentiable scalar loss over a flat parameter slice.
///
/// Implementations capture whatever randomness they need (seeds, channel
/// realizations) so that repeated evaluations at the same point agree
/// bitwise.
pub trait Objective {
    fn value(&self, params: &[f64]) -> Result<f64>;

    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// `value(a) - value(b)`. Implementations may difference per-term
    /// contributions before summing, which keeps finite differences above
    /// the rounding floor of the total.
    fn value_difference(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(self.value(a)? - self.value(b)?)
    }
}

/// Objective assembled from two closures. Mostly useful for tests.
pub struct FnObjective<F, G> {
    value: F,
    gradient: G,
}

impl<F, G> FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    pub fn new(value: F, gradient: G) -> Self {
        Self { value, gradient }
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok((self.value)(params))
    }

    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(((self.value)(params), (self.gradient)(params)))
    }
}

/// Gradient of `loss` at `params`.
pub fn gradient(loss: &dyn Objective, params: &ParamVector) -> Result<Vec<f64>> {
    ensure_finite(params.values(), "gradient: parameters")?;
    let (value, grad) = loss.value_and_gradient(params.values())?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    if grad.len() != params.len() {
        return Err(Error::LengthMismatch {
            op: "gradient",
            left: grad.len(),
            right: params.len(),
        });
    }
    ensure_finite(&grad, "gradient")?;
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The loss could not be evaluated at a perturbed point.
    Unverifiable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: Option<f64>,
    pub rel_error: Option<f64>,
    pub status: CheckStatus,
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn flagged(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries
            .iter()
            .filter(|e| e.status == CheckStatus::Fail)
    }

    pub fn unverifiable(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries
            .iter()
            .filter(|e| e.status == CheckStatus::Unverifiable)
    }

    pub fn num_flagged(&self) -> usize {
        self.flagged().count()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    /// True when no parameter is flagged or unverifiable.
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.status == CheckStatus::Pass)
    }
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference verification of every parameter.
pub fn finite_difference_check(
    loss: &dyn Objective,
    params: &ParamVector,
    rel_step: f64,
    tol: f64,
) -> Result<GradReport> {
    let all: Vec<usize> = (0..params.len()).collect();
    finite_difference_check_indices(loss, params, rel_step, tol, &all)
}

/// Central-difference verification restricted to `indices`.
///
/// The step for parameter `p` is `rel_step * max(|p|, 1)`.
pub fn finite_difference_check_indices(
    loss: &dyn Objective,
    params: &ParamVector,
    rel_step: f64,
    tol: f64,
    indices: &[usize],
) -> Result<GradReport> {
    if !(rel_step > 0.0 && rel_step <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "rel_step must lie in (0, 1e-2], got {rel_step}"
        )));
    }
    let analytic = gradient(loss, params)?;
    let mut point = params.values().to_vec();
    let mut plus = point.clone();
    let mut entries = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= point.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter index {i} out of range"
            )));
        }
        let name = params
            .locate(i)
            .map(|(block, j)| format!("{block}[{j}]"))
            .unwrap_or_else(|| format!("#{i}"));
        let original = point[i];
        let h = rel_step * original.abs().max(1.0);
        plus[i] = original + h;
        point[i] = original - h;
        let diff = loss.value_difference(&plus, &point);
        plus[i] = original;
        point[i] = original;
        let numeric = match diff {
            Ok(d) if d.is_finite() => Some(d / (2.0 * h)),
            _ => None,
        };
        let entry = match numeric {
            Some(f) => {
                let err = relative_error(analytic[i], f);
                GradEntry {
                    index: i,
                    name,
                    analytic: analytic[i],
                    numeric: Some(f),
                    rel_error: Some(err),
                    status: if err <= tol {
                        CheckStatus::Pass
                    } else {
                        CheckStatus::Fail
                    },
                }
            }
            None => GradEntry {
                index: i,
                name,
                analytic: analytic[i],
                numeric: None,
                rel_error: None,
                status: CheckStatus::Unverifiable,
            },
        };
        entries.push(entry);
    }
    Ok(GradReport {
        entries,
        tolerance: tol,
    })
}

/// Adam hyperparameters. Only the learning rate is tuned in practice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// A non-finite gradient rejects the step and leaves both `params` and
/// `state` untouched.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            op: "adam_step",
            left: grads.len(),
            right: params.len(),
        });
    }
    if state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(Error::LengthMismatch {
            op: "adam_step: state",
            left: state.first_moment.len(),
            right: params.len(),
        });
    }
    ensure_finite(grads, "adam_step: gradient")?;

    state.step_count += 1;
    let t = state.step_count as i32;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = *config;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> impl Objective {
        FnObjective::new(|p: &[f64]| p[0] * p[0], |p: &[f64]| vec![2.0 * p[0]])
    }

    fn single(name: &str, values: &[f64]) -> ParamVector {
        let mut pv = ParamVector::new();
        pv.push_block(name, values).unwrap();
        pv
    }

    #[test]
    fn gradient_of_square() {
        let g = gradient(&square(), &single("p", &[3.0])).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let obj = FnObjective::new(|_: &[f64]| 4.2, |p: &[f64]| vec![0.0; p.len()]);
        let g = gradient(&obj, &single("p", &[1.0, -2.0, 3.5])).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn gradient_rejects_non_finite() {
        let obj = FnObjective::new(|_: &[f64]| 0.0, |_: &[f64]| vec![f64::NAN]);
        let err = gradient(&obj, &single("p", &[1.0])).unwrap_err();
        assert_eq!(err, Error::NonFinite { op: "gradient" });
    }

    #[test]
    fn param_vector_rejects_duplicates_and_nan() {
        let mut pv = single("a", &[1.0]);
        assert!(pv.push_block("a", &[2.0]).is_err());
        assert!(pv.push_block("b", &[f64::INFINITY]).is_err());
        pv.push_block("b", &[2.0, 3.0]).unwrap();
        assert_eq!(pv.block("b"), Some(&[2.0, 3.0][..]));
        assert_eq!(pv.locate(2), Some(("b", 1)));
    }

    #[test]
    fn fd_check_quadratic_passes() {
        let obj = FnObjective::new(
            |p: &[f64]| p.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum(),
            |p: &[f64]| {
                p.iter()
                    .enumerate()
                    .map(|(i, x)| 2.0 * (i as f64 + 1.0) * x)
                    .collect()
            },
        );
        let report =
            finite_difference_check(&obj, &single("p", &[0.3, -1.2, 5.0]), 1e-6, 1e-6).unwrap();
        assert_eq!(report.num_flagged(), 0);
        assert!(report.passed());
    }

    #[test]
    fn fd_check_flags_wrong_gradient() {
        let obj = FnObjective::new(
            |p: &[f64]| p[0] * p[0] + p[1] * p[1],
            |p: &[f64]| vec![2.0 * p[0], 3.0 * p[1]],
        );
        let report =
            finite_difference_check(&obj, &single("p", &[1.0, 1.0]), 1e-6, 1e-6).unwrap();
        let flagged: Vec<usize> = report.flagged().map(|e| e.index).collect();
        assert_eq!(flagged, vec![1]);
    }

    #[test]
    fn fd_check_marks_unverifiable() {
        struct Partial;
        impl Objective for Partial {
            fn value(&self, p: &[f64]) -> Result<f64> {
                if p[0] > 1.0 {
                    Err(Error::NonFinite { op: "test" })
                } else {
                    Ok(p[0])
                }
            }
            fn value_and_gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
                Ok((p[0], vec![1.0]))
            }
        }
        let report = finite_difference_check(&Partial, &single("p", &[1.0]), 1e-6, 1e-6).unwrap();
        assert_eq!(report.unverifiable().count(), 1);
        assert!(!report.passed());
    }

    #[test]
    fn fd_check_rejects_bad_step() {
        assert!(finite_difference_check(&square(), &single("p", &[1.0]), 0.1, 1e-6).is_err());
        assert!(finite_difference_check(&square(), &single("p", &[1.0]), 0.0, 1e-6).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![0.5, -1.0];
        let mut state = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![0.0];
        let mut state = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut state, &AdamConfig::default()).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        assert!((p[0] + 0.001).abs() < 1e-10, "{}", p[0]);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let f = |x: f64| (x - 2.0) * (x - 2.0);
        let mut p = vec![0.0];
        let mut state = AdamState::new(1);
        let cfg = AdamConfig::with_learning_rate(0.1);
        let mut last = f(p[0]);
        for _ in 0..2 {
            let g = 2.0 * (p[0] - 2.0);
            adam_step(&mut p, &[g], &mut state, &cfg).unwrap();
            assert!(f(p[0]) < last);
            last = f(p[0]);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![1.0];
        let mut state = AdamState::new(1);
        let err = adam_step(&mut p, &[f64::NAN], &mut state, &AdamConfig::default());
        assert!(err.is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(state.step_count, 0);
    }
}
