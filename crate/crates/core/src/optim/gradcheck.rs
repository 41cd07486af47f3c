use std::collections::BTreeMap;

use super::store::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many evenly spaced entries per group.
    pub max_per_group: Option<usize>,
    /// Restrict to these groups; all groups when `None`.
    pub groups: Option<Vec<String>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_per_group: None,
            groups: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    /// Largest relative error per group.
    pub per_group: BTreeMap<String, f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        for (k, v) in other.per_group {
            let e = self.per_group.entry(k).or_insert(0.0);
            *e = e.max(v);
        }
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn sample_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compare the gradients stored in `store` against central differences of
/// `loss` evaluated on perturbed copies of `store`.
pub fn finite_diff_check(
    store: &ParameterStore,
    mut loss: impl FnMut(&ParameterStore) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let h = opts.step;
    for group in store.groups() {
        if let Some(only) = &opts.groups {
            if !only.iter().any(|n| n == &group.name) {
                continue;
            }
        }
        let mut group_max: f64 = 0.0;
        for i in sample_indices(group.values.len(), opts.max_per_group) {
            let v = group.values[i];
            work.group_mut(&group.name)?.values[i] = v + h;
            let plus = loss(&work)?;
            work.group_mut(&group.name)?.values[i] = v - h;
            let minus = loss(&work)?;
            work.group_mut(&group.name)?.values[i] = v;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteLoss(if plus.is_finite() {
                    minus
                } else {
                    plus
                }));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = group.grads[i];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            group_max = group_max.max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(GradCheckEntry {
                    group: group.name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_error: err,
                });
            }
        }
        report.per_group.insert(group.name.clone(), group_max);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store(values: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.set("p", 1, values.clone()).unwrap();
        s.accumulate("p", &values).unwrap();
        s
    }

    fn half_square(s: &ParameterStore) -> Result<f64> {
        Ok(0.5 * s.values("p")?.iter().map(|v| v * v).sum::<f64>())
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let s = quadratic_store(vec![0.3, -1.2, 0.8, 2.0]);
        let r = finite_diff_check(&s, half_square, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut s = ParameterStore::new();
        s.set("p", 1, vec![1.0, 2.0]).unwrap();
        let r = finite_diff_check(&s, |_| Ok(3.0), &GradCheckOptions::default()).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut s = quadratic_store(vec![1.0, 2.0]);
        s.grads_mut("p").unwrap()[1] = 3.0;
        let r = finite_diff_check(&s, half_square, &GradCheckOptions::default()).unwrap();
        let worst = r.worst.unwrap();
        assert_eq!((worst.group.as_str(), worst.index), ("p", 1));
        assert!((worst.rel_error - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let s = quadratic_store(vec![1.0]);
        assert!(finite_diff_check(&s, |_| Ok(f64::NAN), &GradCheckOptions::default()).is_err());
    }

    #[test]
    fn subsampling_is_even() {
        assert_eq!(sample_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(sample_indices(3, Some(5)), vec![0, 1, 2]);
    }
}
