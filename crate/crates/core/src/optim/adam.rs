//! Adam with per-group step sizes and projection of constrained parameters.

use crate::config::FitConfig;
use crate::error::{Error, Result};
use crate::optim::params::{ParamGroup, ParamKey, ParamLayout, ParamStore};

/// Radii are kept at least this large after every step.
pub const MIN_RADIUS: f64 = 1e-6;

/// First and second moments per parameter. Each parameter counts its own
/// updates so parameters added mid-run start with fresh bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<u64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Carries moments over to a new layout by parameter key; new keys
    /// start from zero.
    pub fn remap(&self, old: &ParamLayout, new: &ParamLayout) -> AdamState {
        let map = old.index_map();
        let mut out = AdamState::new(new.len());
        out.step = self.step;
        for (i, k) in new.keys().iter().enumerate() {
            if let Some(&j) = map.get(k) {
                out.m[i] = self.m[j];
                out.v[i] = self.v[j];
                out.t[i] = self.t[j];
            }
        }
        out
    }
}

pub fn learning_rate(key: &ParamKey, config: &FitConfig) -> f64 {
    let lr = &config.learning_rates;
    match key.group() {
        ParamGroup::Basis => lr.basis,
        ParamGroup::Position => lr.position,
        ParamGroup::Radius => lr.radius,
        ParamGroup::Coefficient => lr.coefficients,
    }
}

/// One Adam update of the parameters flagged in `trainable` (all when
/// `None`), followed by quaternion renormalization and the radius floor on
/// touched entries.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[f64],
    state: &mut AdamState,
    config: &FitConfig,
    trainable: Option<&[bool]>,
) -> Result<()> {
    let n = params.values.len();
    if grads.len() != n || state.len() != n || trainable.is_some_and(|t| t.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            n,
            grads.len(),
            state.len()
        )));
    }
    let a = &config.adam;
    state.step += 1;
    let mut touched = vec![false; n];
    for i in 0..n {
        if trainable.is_some_and(|t| !t[i]) {
            continue;
        }
        let g = grads[i];
        state.t[i] += 1;
        state.m[i] = a.beta1 * state.m[i] + (1.0 - a.beta1) * g;
        state.v[i] = a.beta2 * state.v[i] + (1.0 - a.beta2) * g * g;
        let t = state.t[i] as i32;
        let m_hat = state.m[i] / (1.0 - a.beta1.powi(t));
        let v_hat = state.v[i] / (1.0 - a.beta2.powi(t));
        let update = learning_rate(&params.layout.keys()[i], config) * m_hat / (v_hat.sqrt() + a.eps);
        if update != 0.0 {
            params.values[i] -= update;
            touched[i] = true;
        }
    }
    let quats: Vec<usize> = params.layout.quaternion_offsets().collect();
    for o in quats {
        if touched[o..o + 4].iter().any(|&b| b) {
            let q = &mut params.values[o..o + 4];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                q.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    for (i, key) in params.layout.keys().iter().enumerate() {
        if touched[i] && matches!(key, ParamKey::Radius { .. }) {
            params.values[i] = params.values[i].max(MIN_RADIUS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::tests::one_level;
    use crate::motion::MotionBasis;
    use crate::se3::{Vec3, SE3};

    fn store() -> ParamStore {
        let b = MotionBasis {
            transforms: vec![SE3::identity(), SE3::rot_z(0.3)],
        };
        let tree = one_level(2, vec![b], &[(Vec3::new(0.1, 0.2, 0.3), 0.5, vec![1.0])]);
        ParamStore::from_tree(&tree)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store();
        let before = p.values.clone();
        let mut s = AdamState::new(p.values.len());
        adam_step(&mut p, &vec![0.0; before.len()], &mut s, &FitConfig::default(), None).unwrap();
        assert_eq!(p.values, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = store();
        let before = p.values.clone();
        let cfg = FitConfig::default();
        let g: Vec<f64> = (0..before.len()).map(|i| 0.3 + i as f64).collect();
        let mut s = AdamState::new(before.len());
        adam_step(&mut p, &g, &mut s, &cfg, None).unwrap();
        // Outside quaternion blocks every entry moves by lr * g / (|g| + eps).
        for (i, key) in p.layout.keys().iter().enumerate() {
            if matches!(key, ParamKey::Basis { component: 0..=3, .. }) {
                continue;
            }
            let lr = learning_rate(key, &cfg);
            let want = before[i] - lr * g[i] / (g[i].abs() + cfg.adam.eps);
            assert!((p.values[i] - want).abs() < 1e-15, "{key:?}");
            assert!(((before[i] - p.values[i]).abs() - lr).abs() < 1e-9 * lr.max(1.0));
        }
        for o in p.layout.quaternion_offsets() {
            let n: f64 = p.values[o..o + 4].iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = store();
        let before = p.values.clone();
        let mask: Vec<bool> = (0..before.len()).map(|i| i % 2 == 0).collect();
        let mut s = AdamState::new(before.len());
        adam_step(&mut p, &vec![1.0; before.len()], &mut s, &FitConfig::default(), Some(&mask)).unwrap();
        for i in (1..before.len()).step_by(2) {
            let in_quat = p.layout.quaternion_offsets().any(|o| (o..o + 4).contains(&i));
            if !in_quat {
                assert_eq!(p.values[i], before[i]);
            }
        }
    }

    #[test]
    fn remap_keeps_moments_by_key() {
        let p = store();
        let mut s = AdamState::new(p.values.len());
        adam_step(&mut p.clone(), &vec![1.0; p.values.len()], &mut s, &FitConfig::default(), None).unwrap();
        let same = s.remap(&p.layout, &p.layout);
        assert_eq!(same, s);
    }
}
