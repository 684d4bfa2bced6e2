//! Every tunable of a fit, serialized as one document.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// 3D track fitting term.
    pub track: f64,
    /// Kept for configs written against image-space supervision; unused with
    /// native 3D tracks.
    pub track_depth: f64,
    /// Rigidity weight per level, starting at level 1. Deeper levels reuse
    /// the last entry.
    pub rigid_per_level: Vec<f64>,
    /// Level-1 rigidity weight once a second level exists.
    pub rigid_level1_activated: f64,
    pub accel_bases: f64,
    pub accel_tracks: f64,
    pub radius_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            track: 2.0,
            track_depth: 0.1,
            rigid_per_level: vec![0.5, 0.5],
            rigid_level1_activated: 2.5,
            accel_bases: 0.1,
            accel_tracks: 2.0,
            radius_reg: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            track: 0.0,
            track_depth: 0.0,
            rigid_per_level: vec![0.0],
            rigid_level1_activated: 0.0,
            accel_bases: 0.0,
            accel_tracks: 0.0,
            radius_reg: 0.0,
        }
    }

    /// Rigidity weight applied to nodes at `level` (>= 1).
    pub fn rigid_weight(&self, level: u32) -> f64 {
        let i = (level.max(1) - 1) as usize;
        self.rigid_per_level
            .get(i)
            .or(self.rigid_per_level.last())
            .copied()
            .unwrap_or(0.0)
    }

    /// Weights in force once a second level has been spawned.
    pub fn activated(&self) -> Self {
        let mut w = self.clone();
        if w.rigid_per_level.is_empty() {
            w.rigid_per_level.push(self.rigid_level1_activated);
        } else {
            w.rigid_per_level[0] = self.rigid_level1_activated;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.track,
            self.track_depth,
            self.rigid_level1_activated,
            self.accel_bases,
            self.accel_tracks,
            self.radius_reg,
        ];
        if all
            .iter()
            .chain(&self.rigid_per_level)
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-group Adam step sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Basis rotations and translations.
    pub basis: f64,
    pub position: f64,
    pub radius: f64,
    pub coefficients: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            basis: 1.6e-4,
            position: 1.6e-5,
            radius: 5e-4,
            coefficients: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub adam: AdamConfig,
    pub learning_rates: LearningRates,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Structural updates (densify in stage 1, refine in stage 2) run every
    /// this many steps; 0 disables them.
    pub densify_every: usize,
    pub batch_frames: usize,
    pub rigidity_knn: usize,
    /// Largest frame gap paired by the rigidity term.
    pub rigidity_max_delta: usize,
    /// Leaves per point in skinning.
    pub knn: usize,
    /// First-level node count.
    pub nodes: usize,
    /// First-level basis count.
    pub bases: usize,
    pub children_per_node: usize,
    pub child_bases: usize,
    pub spawn_radius_mult: f64,
    /// 1 keeps a single level; 2 spawns children before stage 2.
    pub max_levels: u32,
    /// Densification threshold as a fraction of the canonical bounding-box
    /// diagonal.
    pub densify_threshold_ratio: f64,
    pub points_per_node: usize,
    pub refine_add_threshold: f64,
    pub refine_prune_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            adam: AdamConfig::default(),
            learning_rates: LearningRates::default(),
            stage1_steps: 2000,
            stage2_steps: 2000,
            densify_every: 500,
            batch_frames: 8,
            rigidity_knn: 5,
            rigidity_max_delta: 4,
            knn: 4,
            nodes: 50,
            bases: 10,
            children_per_node: 10,
            child_bases: 5,
            spawn_radius_mult: 3.0,
            max_levels: 2,
            densify_threshold_ratio: 0.05,
            points_per_node: 20,
            refine_add_threshold: 0.05,
            refine_prune_threshold: 1e-7,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.learning_rates;
        let rates = [lr.basis, lr.position, lr.radius, lr.coefficients];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::InvalidArgument("invalid Adam hyperparameters".into()));
        }
        if self.batch_frames == 0 || self.knn == 0 || self.nodes == 0 || self.bases == 0 {
            return Err(Error::InvalidArgument(
                "batch_frames, knn, nodes and bases must be positive".into(),
            ));
        }
        if self.max_levels == 0 || self.max_levels > 2 {
            return Err(Error::InvalidArgument("max_levels must be 1 or 2".into()));
        }
        if !(self.densify_threshold_ratio > 0.0) || self.points_per_node == 0 {
            return Err(Error::InvalidArgument("invalid densification settings".into()));
        }
        Ok(())
    }
}

pub const FORMAT_VERSION: u32 = 1;

/// The on-disk configuration document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub weights: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            seed: 0,
            fit: FitConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rigid_weights_follow_activation() {
        let w = LossWeights::default();
        assert_eq!(w.rigid_weight(1), 0.5);
        assert_eq!(w.rigid_weight(2), 0.5);
        assert_eq!(w.rigid_weight(3), 0.5);
        let a = w.activated();
        assert_eq!(a.rigid_weight(1), 2.5);
        assert_eq!(a.rigid_weight(2), 0.5);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"format_version":1,"fit":{"stage1_steps":5}}"#).unwrap();
        assert_eq!(c.fit.stage1_steps, 5);
        assert_eq!(c.fit.stage2_steps, 2000);
        assert_eq!(c.weights, LossWeights::default());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut w = LossWeights::default();
        w.accel_bases = -1.0;
        assert!(w.validate().is_err());
        let mut f = FitConfig::default();
        f.learning_rates.radius = 0.0;
        assert!(f.validate().is_err());
        assert!(FitConfig::default().validate().is_ok());
    }
}
