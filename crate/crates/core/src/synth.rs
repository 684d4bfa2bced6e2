//! Synthetic articulated scenes: kinematic trees of rigid box-shaped links
//! whose surface points give exact trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::se3::{Quat, Vec3, SE3};
use crate::tracks::TrackSet;

/// A keyframed value; frames between keys follow a cubic Hermite spline
/// with finite-difference tangents, frames outside hold the end values.
pub type Keys<V> = Vec<(usize, V)>;

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    /// Index of an earlier link, or none for a root link.
    #[serde(default)]
    pub parent: Option<usize>,
    /// Joint origin in the parent's frame (world frame for roots).
    #[serde(default)]
    pub joint: [f64; 3],
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
    /// Joint angle in radians.
    #[serde(default)]
    pub angles: Keys<f64>,
    /// Joint translation added to `joint`, in the parent's frame.
    #[serde(default)]
    pub offsets: Keys<[f64; 3]>,
    /// Box center and edge lengths in the link frame.
    pub box_center: [f64; 3],
    pub box_size: [f64; 3],
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub format_version: u32,
    pub frames: usize,
    pub links: Vec<LinkSpec>,
    /// Probability that a (track, frame) entry is hidden. One random frame
    /// per track always stays visible.
    #[serde(default)]
    pub occlusion: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub tracks: TrackSet,
    /// Link index of every track.
    pub labels: Vec<usize>,
    /// Trajectories with every non-root joint angle held at zero.
    pub coarse: Vec<Vec<Vec3>>,
}

fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}

fn check_keys<V>(keys: &Keys<V>, frames: usize, what: &str, link: usize) -> Result<()> {
    for (k, (f, _)) in keys.iter().enumerate() {
        if *f >= frames {
            return Err(spec_err(format!("link {link}: {what} key at frame {f} of {frames}")));
        }
        if k > 0 && keys[k - 1].0 >= *f {
            return Err(spec_err(format!("link {link}: {what} keys not strictly increasing")));
        }
    }
    Ok(())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.frames == 0 {
            return Err(spec_err("scene has no frames"));
        }
        if self.links.is_empty() {
            return Err(spec_err("scene has no links"));
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return Err(spec_err("occlusion must lie in [0, 1)"));
        }
        if self.links.iter().all(|l| l.points == 0) {
            return Err(spec_err("scene has no points"));
        }
        for (i, l) in self.links.iter().enumerate() {
            if l.parent.is_some_and(|p| p >= i) {
                return Err(spec_err(format!("link {i}: parent must be an earlier link")));
            }
            let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
            if !finite(&l.joint) || !finite(&l.axis) || !finite(&l.box_center) || !finite(&l.box_size) {
                return Err(spec_err(format!("link {i}: non-finite geometry")));
            }
            if Vec3::from(l.axis).norm() < 1e-12 {
                return Err(spec_err(format!("link {i}: zero joint axis")));
            }
            if l.box_size.iter().any(|s| *s < 0.0) {
                return Err(spec_err(format!("link {i}: negative box size")));
            }
            let [a, b, c] = l.box_size;
            if l.points > 0 && a * b + b * c + a * c <= 0.0 {
                return Err(spec_err(format!("link {i}: box has no surface to sample")));
            }
            if l.angles.iter().any(|(_, v)| !v.is_finite()) || l.offsets.iter().any(|(_, v)| !finite(v)) {
                return Err(spec_err(format!("link {i}: non-finite keyframe")));
            }
            check_keys(&l.angles, self.frames, "angle", i)?;
            check_keys(&l.offsets, self.frames, "offset", i)?;
        }
        Ok(())
    }

    /// One box, 200 points, 30 frames: a 90 degree turn about a tilted axis
    /// combined with a translation, both at constant rate.
    pub fn rigid_body() -> SceneSpec {
        SceneSpec {
            format_version: FORMAT_VERSION,
            frames: 30,
            links: vec![LinkSpec {
                parent: None,
                joint: [0.0; 3],
                axis: [0.2, 0.3, 1.0],
                angles: vec![(0, 0.0), (29, std::f64::consts::FRAC_PI_2)],
                offsets: vec![(0, [0.0; 3]), (29, [0.6, 0.3, 0.1])],
                box_center: [0.0; 3],
                box_size: [1.0, 0.6, 0.4],
                points: 200,
            }],
            occlusion: 0.0,
        }
    }

    /// A translating cart with a unit-length pendulum hinged below it. The
    /// pendulum hangs at rest in frame 0.
    pub fn pendulum_on_cart() -> SceneSpec {
        SceneSpec {
            format_version: FORMAT_VERSION,
            frames: 30,
            links: vec![
                LinkSpec {
                    parent: None,
                    joint: [0.0; 3],
                    axis: default_axis(),
                    angles: vec![],
                    offsets: vec![(0, [0.0; 3]), (29, [1.5, 0.0, 0.0])],
                    box_center: [0.0; 3],
                    box_size: [1.0, 0.5, 0.5],
                    points: 200,
                },
                LinkSpec {
                    parent: Some(0),
                    joint: [0.0, 0.0, -0.25],
                    axis: [0.0, 1.0, 0.0],
                    angles: vec![(0, 0.0), (10, 0.5), (20, -0.5), (29, 0.0)],
                    offsets: vec![],
                    box_center: [0.0, 0.0, -0.5],
                    box_size: [0.1, 0.1, 1.0],
                    points: 100,
                },
            ],
            occlusion: 0.0,
        }
    }

    /// Two hinged arms: a base that turns and drifts, and a forearm that
    /// bends about the elbow and back.
    pub fn two_link() -> SceneSpec {
        SceneSpec {
            format_version: FORMAT_VERSION,
            frames: 30,
            links: vec![
                LinkSpec {
                    parent: None,
                    joint: [0.0; 3],
                    axis: default_axis(),
                    angles: vec![(0, 0.0), (29, 0.6)],
                    offsets: vec![(0, [0.0; 3]), (29, [0.3, 0.2, 0.0])],
                    box_center: [0.5, 0.0, 0.0],
                    box_size: [1.0, 0.3, 0.3],
                    points: 150,
                },
                LinkSpec {
                    parent: Some(0),
                    joint: [1.0, 0.0, 0.0],
                    axis: [0.0, 0.0, 1.0],
                    angles: vec![(0, 0.0), (15, 1.2), (29, 0.2)],
                    offsets: vec![],
                    box_center: [0.5, 0.0, 0.0],
                    box_size: [1.0, 0.3, 0.3],
                    points: 150,
                },
            ],
            occlusion: 0.0,
        }
    }
}

/// Cubic Hermite interpolation of scalar channels.
fn hermite<const D: usize>(keys: &[(usize, [f64; D])], t: usize) -> [f64; D] {
    let n = keys.len();
    match n {
        0 => return [0.0; D],
        1 => return keys[0].1,
        _ => {}
    }
    if t <= keys[0].0 {
        return keys[0].1;
    }
    if t >= keys[n - 1].0 {
        return keys[n - 1].1;
    }
    let tangent = |k: usize| {
        let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
        let dt = (keys[b].0 - keys[a].0) as f64;
        std::array::from_fn::<f64, D, _>(|c| (keys[b].1[c] - keys[a].1[c]) / dt)
    };
    let k = keys.partition_point(|(f, _)| *f <= t) - 1;
    let (f0, v0) = keys[k];
    let (f1, v1) = keys[k + 1];
    let h = (f1 - f0) as f64;
    let s = (t - f0) as f64 / h;
    let (m0, m1) = (tangent(k), tangent(k + 1));
    let (s2, s3) = (s * s, s * s * s);
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    std::array::from_fn(|c| h00 * v0[c] + h10 * h * m0[c] + h01 * v1[c] + h11 * h * m1[c])
}

fn angle_at(keys: &Keys<f64>, t: usize) -> f64 {
    let k: Vec<(usize, [f64; 1])> = keys.iter().map(|&(f, v)| (f, [v])).collect();
    hermite(&k, t)[0]
}

/// World pose of every link at frame `t`. With `coarse`, joints of non-root
/// links stay at angle zero.
pub fn link_poses(spec: &SceneSpec, t: usize, coarse: bool) -> Vec<SE3> {
    let mut poses: Vec<SE3> = Vec::with_capacity(spec.links.len());
    for l in &spec.links {
        let angle = if coarse && l.parent.is_some() {
            0.0
        } else {
            angle_at(&l.angles, t)
        };
        let offset = Vec3::from(l.joint) + Vec3::from(hermite(&l.offsets, t));
        let local = SE3::from_unit(Quat::from_axis_angle(Vec3::from(l.axis), angle), offset);
        poses.push(match l.parent {
            Some(p) => poses[p].compose(&local),
            None => local,
        });
    }
    poses
}

fn sample_box_surface<R: Rng + ?Sized>(rng: &mut R, center: [f64; 3], size: [f64; 3]) -> Vec3 {
    let [a, b, c] = size;
    let areas = [b * c, a * c, a * b];
    let total: f64 = areas.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut axis = 2;
    for (i, area) in areas.iter().enumerate() {
        if u < *area {
            axis = i;
            break;
        }
        u -= area;
    }
    let mut p: [f64; 3] = std::array::from_fn(|i| (rng.random::<f64>() - 0.5) * size[i]);
    p[axis] = if rng.random_bool(0.5) { 0.5 } else { -0.5 } * size[axis];
    Vec3::new(center[0] + p[0], center[1] + p[1], center[2] + p[2])
}

/// Samples the scene's points and produces their exact trajectories, link
/// labels and coarse component.
pub fn gen_synthetic(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut local = Vec::new();
    let mut labels = Vec::new();
    for (i, l) in spec.links.iter().enumerate() {
        for _ in 0..l.points {
            local.push(sample_box_surface(&mut rng, l.box_center, l.box_size));
            labels.push(i);
        }
    }
    let frames = spec.frames;
    let poses: Vec<Vec<SE3>> = (0..frames).map(|t| link_poses(spec, t, false)).collect();
    let coarse_poses: Vec<Vec<SE3>> = (0..frames).map(|t| link_poses(spec, t, true)).collect();
    let trace = |poses: &[Vec<SE3>]| -> Vec<Vec<Vec3>> {
        local
            .par_iter()
            .zip(&labels)
            .map(|(p, &l)| poses.iter().map(|frame| frame[l].apply(p)).collect())
            .collect()
    };
    let positions = trace(&poses);
    let coarse = trace(&coarse_poses);
    let visibility = (0..local.len())
        .map(|_| {
            if spec.occlusion == 0.0 {
                return vec![true; frames];
            }
            let mut v: Vec<bool> = (0..frames).map(|_| !rng.random_bool(spec.occlusion)).collect();
            v[rng.random_range(0..frames)] = true;
            v
        })
        .collect();
    Ok(SyntheticScene {
        tracks: TrackSet::new(positions, visibility)?,
        labels,
        coarse,
    })
}

pub fn spec_from_json(text: &str) -> Result<SceneSpec> {
    let spec: SceneSpec = serde_json::from_str(text)?;
    spec.validate()?;
    Ok(spec)
}
