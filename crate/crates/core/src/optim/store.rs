use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named flat array of trainable scalars laid out in rows of `width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub width: usize,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamGroup {
    pub fn rows(&self) -> usize {
        self.values.len().checked_div(self.width).unwrap_or(0)
    }
}

/// Registry of every trainable parameter, grouped by name such as
/// `bg-gaussians/position` or `hexplane`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    groups: Vec<ParamGroup>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a group. Gradients are reset to zero.
    pub fn set(&mut self, name: &str, width: usize, values: Vec<f64>) -> Result<()> {
        if width == 0 || !values.len().is_multiple_of(width) {
            return Err(Error::Shape(format!(
                "group {name}: {} values do not form rows of {width}",
                values.len()
            )));
        }
        let group = ParamGroup {
            name: name.to_string(),
            width,
            grads: vec![0.0; values.len()],
            values,
        };
        match self.groups.iter_mut().find(|g| g.name == name) {
            Some(g) => *g = group,
            None => self.groups.push(group),
        }
        Ok(())
    }

    /// Overwrite the values of an existing group of the same length, keeping
    /// gradients.
    pub fn update_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let g = self.group_mut(name)?;
        if g.values.len() != values.len() {
            return Err(Error::Shape(format!(
                "group {name}: expected {} values, got {}",
                g.values.len(),
                values.len()
            )));
        }
        g.values.copy_from_slice(values);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamGroup> {
        let i = self.groups.iter().position(|g| g.name == name)?;
        Some(self.groups.remove(i))
    }

    pub fn get(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup> {
        self.get(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter group {name}")))
    }

    pub fn group_mut(&mut self, name: &str) -> Result<&mut ParamGroup> {
        self.groups
            .iter_mut()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter group {name}")))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.group(name)?.values)
    }

    pub fn grads_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        Ok(&mut self.group_mut(name)?.grads)
    }

    /// Add `grad` into a group's gradient array.
    pub fn accumulate(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let g = self.group_mut(name)?;
        if g.grads.len() != grad.len() {
            return Err(Error::Shape(format!(
                "group {name}: gradient of length {} for {} values",
                grad.len(),
                g.grads.len()
            )));
        }
        for (a, b) in g.grads.iter_mut().zip(grad) {
            *a += b;
        }
        Ok(())
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.groups {
            g.grads.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First non-finite gradient as `(group, index)`.
    pub fn find_non_finite_grad(&self) -> Option<(String, usize)> {
        self.groups.iter().find_map(|g| {
            g.grads
                .iter()
                .position(|v| !v.is_finite())
                .map(|i| (g.name.clone(), i))
        })
    }
}

/// Adam moments per group with one shared step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    /// Group name to `(first moment, second moment)`.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rearrange a group's moments after its rows were added, removed or
    /// reordered. `source[i]` is the old row that new row `i` came from;
    /// `None` rows start with zero moments.
    pub fn remap_rows(&mut self, name: &str, width: usize, source: &[Option<usize>]) {
        let Some((m, v)) = self.moments.get(name) else {
            return;
        };
        let remap = |old: &Vec<f64>| {
            let mut out = vec![0.0; source.len() * width];
            for (i, s) in source.iter().enumerate() {
                if let Some(j) = s {
                    out[i * width..(i + 1) * width]
                        .copy_from_slice(&old[j * width..(j + 1) * width]);
                }
            }
            out
        };
        let entry = (remap(m), remap(v));
        self.moments.insert(name.to_string(), entry);
    }

    /// Drop moments whose group no longer exists or changed length.
    pub fn retain_matching(&mut self, store: &ParameterStore) {
        self.moments
            .retain(|name, (m, _)| store.get(name).is_some_and(|g| g.values.len() == m.len()));
    }
}

/// Bias-corrected Adam update on every group that has a learning rate;
/// groups for which `rate` returns `None` stay frozen. Gradients of all groups
/// are zeroed afterwards. A non-finite gradient anywhere rejects the whole
/// step before any value changes.
pub fn adam_step(
    store: &mut ParameterStore,
    state: &mut AdamState,
    rate: impl Fn(&str) -> Option<f64>,
) -> Result<()> {
    if let Some((group, index)) = store.find_non_finite_grad() {
        store.zero_grads();
        return Err(Error::NonFiniteGradient { group, index });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for g in store.groups_mut() {
        let Some(lr) = rate(&g.name) else {
            continue;
        };
        let (m, v) = state
            .moments
            .entry(g.name.clone())
            .or_insert_with(|| (vec![0.0; g.values.len()], vec![0.0; g.values.len()]));
        if m.len() != g.values.len() {
            *m = vec![0.0; g.values.len()];
            *v = vec![0.0; g.values.len()];
        }
        for i in 0..g.values.len() {
            let grad = g.grads[i];
            m[i] = b1 * m[i] + (1.0 - b1) * grad;
            v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            g.values[i] -= lr * mh / (vh.sqrt() + state.epsilon);
        }
    }
    store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(values: Vec<f64>, grads: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.set("p", 1, values).unwrap();
        s.accumulate("p", &grads).unwrap();
        s
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut s = store(vec![1.0, -2.0, 3.0], vec![0.0; 3]);
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, |_| Some(0.1)).unwrap();
        assert_eq!(s.values("p").unwrap(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_rate_against_gradient_sign() {
        let mut s = store(vec![0.0, 0.0], vec![3.5, -0.01]);
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, |_| Some(0.01)).unwrap();
        let v = s.values("p").unwrap();
        assert!((v[0] + 0.01).abs() < 1e-12);
        assert!((v[1] - 0.01).abs() < 1e-12);
        assert!(s.group("p").unwrap().grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_location() {
        let mut s = store(vec![0.0, 0.0], vec![1.0, f64::NAN]);
        let mut st = AdamState::new();
        match adam_step(&mut s, &mut st, |_| Some(0.1)) {
            Err(Error::NonFiniteGradient { group, index }) => {
                assert_eq!(group, "p");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.values("p").unwrap(), &[0.0, 0.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let mut s = store(vec![1.0], vec![1.0]);
        s.set("q", 1, vec![2.0]).unwrap();
        s.accumulate("q", &[1.0]).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, |n| (n == "p").then_some(0.5)).unwrap();
        assert_eq!(s.values("q").unwrap(), &[2.0]);
        assert!((s.values("p").unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_give_identical_results() {
        let run = || {
            let mut s = store(vec![0.3, -0.2], vec![0.0, 0.0]);
            let mut st = AdamState::new();
            for k in 0..10 {
                s.accumulate("p", &[k as f64 * 0.1 - 0.3, 0.7]).unwrap();
                adam_step(&mut s, &mut st, |_| Some(0.01)).unwrap();
            }
            (s, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn remap_rows_moves_moments() {
        let mut st = AdamState::new();
        st.moments.insert(
            "g".into(),
            (vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]),
        );
        st.remap_rows("g", 2, &[Some(1), None, Some(0)]);
        let (m, v) = &st.moments["g"];
        assert_eq!(m, &vec![3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(v, &vec![7.0, 8.0, 0.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn shape_errors() {
        let mut s = ParameterStore::new();
        assert!(s.set("a", 3, vec![0.0; 4]).is_err());
        s.set("a", 2, vec![0.0; 4]).unwrap();
        assert!(s.accumulate("a", &[1.0]).is_err());
        assert!(s.group("missing").is_err());
    }

    proptest! {
        #[test]
        fn first_step_is_linear_in_rate(g in -10.0f64..10.0, r in 1e-4f64..1.0) {
            prop_assume!(g.abs() > 1e-6);
            let step = |lr: f64| {
                let mut s = store(vec![0.0], vec![g]);
                let mut st = AdamState::new();
                adam_step(&mut s, &mut st, |_| Some(lr)).unwrap();
                s.values("p").unwrap()[0]
            };
            prop_assert_eq!(step(2.0 * r), 2.0 * step(r));
        }
    }
}
