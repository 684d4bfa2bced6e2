//! Observed 3D trajectories and their construction from 2D tracks + depth.

use crate::error::{Error, Result};
use crate::se3::{Vec3, SE3};

/// `N` trajectories over `T` frames with per-frame visibility.
///
/// Invisible entries still hold a position (by convention the nearest
/// visible one) so every track is a dense `T`-sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    frame_count: usize,
    positions: Vec<Vec<Vec3>>,
    visibility: Vec<Vec<bool>>,
}

impl TrackSet {
    pub fn new(positions: Vec<Vec<Vec3>>, visibility: Vec<Vec<bool>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::ShapeMismatch("track set has no tracks".into()));
        }
        let frame_count = positions[0].len();
        if frame_count == 0 {
            return Err(Error::ShapeMismatch("tracks have no frames".into()));
        }
        if visibility.len() != positions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} position tracks but {} visibility tracks",
                positions.len(),
                visibility.len()
            )));
        }
        for (i, (p, v)) in positions.iter().zip(&visibility).enumerate() {
            if p.len() != frame_count || v.len() != frame_count {
                return Err(Error::ShapeMismatch(format!(
                    "track {i} does not span {frame_count} frames"
                )));
            }
            if !v.iter().any(|&b| b) {
                return Err(Error::ShapeMismatch(format!("track {i} is never visible")));
            }
        }
        Ok(TrackSet {
            frame_count,
            positions,
            visibility,
        })
    }

    /// Every entry visible.
    pub fn fully_visible(positions: Vec<Vec<Vec3>>) -> Result<Self> {
        let visibility = positions.iter().map(|p| vec![true; p.len()]).collect();
        TrackSet::new(positions, visibility)
    }

    pub fn num_tracks(&self) -> usize {
        self.positions.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn positions(&self) -> &[Vec<Vec3>] {
        &self.positions
    }

    pub fn visibility(&self) -> &[Vec<bool>] {
        &self.visibility
    }

    pub fn track(&self, i: usize) -> &[Vec3] {
        &self.positions[i]
    }

    pub fn position(&self, i: usize, t: usize) -> Vec3 {
        self.positions[i][t]
    }

    pub fn visible(&self, i: usize, t: usize) -> bool {
        self.visibility[i][t]
    }

    pub fn visible_count(&self, t: usize) -> usize {
        self.visibility.iter().filter(|v| v[t]).count()
    }

    /// Every track's position at frame `t`, visible or not.
    pub fn frame_positions(&self, t: usize) -> Vec<Vec3> {
        self.positions.iter().map(|p| p[t]).collect()
    }

    /// Subset of tracks by index.
    pub fn select(&self, indices: &[usize]) -> Result<TrackSet> {
        TrackSet::new(
            indices.iter().map(|&i| self.positions[i].clone()).collect(),
            indices.iter().map(|&i| self.visibility[i].clone()).collect(),
        )
    }

    /// Diagonal of the axis-aligned box around the tracks visible at `t`
    /// (all tracks when none are visible).
    pub fn bbox_diagonal(&self, t: usize) -> f64 {
        let vis: Vec<Vec3> = (0..self.num_tracks())
            .filter(|&i| self.visible(i, t))
            .map(|i| self.position(i, t))
            .collect();
        if vis.is_empty() {
            bbox_diagonal(&self.frame_positions(t))
        } else {
            bbox_diagonal(&vis)
        }
    }
}

pub fn bbox_diagonal(points: &[Vec3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    hi.distance(&lo)
}

/// Frame with the most visible tracks; ties go to the earliest frame.
pub fn select_canonical_frame(tracks: &TrackSet) -> usize {
    let mut best = 0;
    let mut best_count = tracks.visible_count(0);
    for t in 1..tracks.frame_count() {
        let c = tracks.visible_count(t);
        if c > best_count {
            best = t;
            best_count = c;
        }
    }
    best
}

/// Pinhole intrinsics plus one camera-to-world pose per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_from_camera: Vec<SE3>,
}

impl PinholeCamera {
    pub fn unproject(&self, t: usize, pixel: [f64; 2], depth: f64) -> Vec3 {
        let cam = Vec3::new(
            (pixel[0] - self.cx) / self.fx * depth,
            (pixel[1] - self.cy) / self.fy * depth,
            depth,
        );
        self.world_from_camera[t].apply(&cam)
    }

    /// Pixel coordinates and depth of a world point.
    pub fn project(&self, t: usize, p: &Vec3) -> ([f64; 2], f64) {
        let c = self.world_from_camera[t].inverse().apply(p);
        (
            [self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy],
            c.z,
        )
    }
}

/// Back-projects 2D tracks with per-entry depth into world-space tracks.
///
/// Invisible entries take the position of the nearest visible frame (the
/// earlier one on ties) and stay invisible.
pub fn unproject_tracks(
    pixels: &[Vec<[f64; 2]>],
    depth: &[Vec<f64>],
    visibility: &[Vec<bool>],
    camera: &PinholeCamera,
) -> Result<TrackSet> {
    if !(camera.fx > 0.0 && camera.fy > 0.0) {
        return Err(Error::InvalidArgument("focal lengths must be positive".into()));
    }
    if pixels.len() != depth.len() || pixels.len() != visibility.len() {
        return Err(Error::ShapeMismatch("pixel, depth and visibility track counts differ".into()));
    }
    let frames = pixels.first().map_or(0, Vec::len);
    if camera.world_from_camera.len() != frames {
        return Err(Error::ShapeMismatch(format!(
            "{} camera poses for {frames} frames",
            camera.world_from_camera.len()
        )));
    }
    let mut positions = Vec::with_capacity(pixels.len());
    for (i, ((px, d), vis)) in pixels.iter().zip(depth).zip(visibility).enumerate() {
        if px.len() != frames || d.len() != frames || vis.len() != frames {
            return Err(Error::ShapeMismatch(format!("track {i} has inconsistent length")));
        }
        let mut track = vec![None; frames];
        for t in 0..frames {
            if vis[t] {
                if !(d[t] > 0.0) {
                    return Err(Error::InvalidDepth {
                        track: i,
                        frame: t,
                        depth: d[t],
                    });
                }
                track[t] = Some(camera.unproject(t, px[t], d[t]));
            }
        }
        let filled = fill_nearest(&track)
            .ok_or_else(|| Error::ShapeMismatch(format!("track {i} is never visible")))?;
        positions.push(filled);
    }
    TrackSet::new(positions, visibility.to_vec())
}

fn fill_nearest(track: &[Option<Vec3>]) -> Option<Vec<Vec3>> {
    let known: Vec<usize> = (0..track.len()).filter(|&t| track[t].is_some()).collect();
    if known.is_empty() {
        return None;
    }
    Some(
        (0..track.len())
            .map(|t| {
                let src = *known
                    .iter()
                    .min_by_key(|&&k| (k.abs_diff(t), k))
                    .expect("nonempty");
                track[src].expect("known frame")
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(frames: usize) -> PinholeCamera {
        PinholeCamera {
            fx: 500.0,
            fy: 450.0,
            cx: 320.0,
            cy: 240.0,
            world_from_camera: vec![SE3::identity(); frames],
        }
    }

    #[test]
    fn unproject_examples() {
        let cam = camera(1);
        let ts = unproject_tracks(
            &[vec![[320.0, 240.0]], vec![[820.0, 240.0]]],
            &[vec![2.5], vec![1.0]],
            &[vec![true], vec![true]],
            &cam,
        )
        .unwrap();
        assert_eq!(ts.position(0, 0), Vec3::new(0.0, 0.0, 2.5));
        assert_eq!(ts.position(1, 0), Vec3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cam = camera(3);
        cam.world_from_camera = (0..3).map(|_| SE3::random(&mut rng, 1.0)).collect();
        for _ in 0..200 {
            let t = rng.random_range(0..3);
            let local = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..5.0),
            );
            let world = cam.world_from_camera[t].apply(&local);
            let (px, d) = cam.project(t, &world);
            assert!(cam.unproject(t, px, d).distance(&world) < 1e-9);
        }
    }

    #[test]
    fn invisible_entries_copy_nearest_visible_frame() {
        let cam = camera(4);
        let ts = unproject_tracks(
            &[vec![[320.0, 240.0]; 4]],
            &[vec![-1.0, 2.0, 0.0, 3.0]],
            &[vec![false, true, false, true]],
            &cam,
        )
        .unwrap();
        let z: Vec<f64> = ts.track(0).iter().map(|p| p.z).collect();
        assert_eq!(z, vec![2.0, 2.0, 2.0, 3.0]);
        assert!(!ts.visible(0, 0) && !ts.visible(0, 2));
    }

    #[test]
    fn nonpositive_visible_depth_is_rejected() {
        let err = unproject_tracks(
            &[vec![[0.0, 0.0]; 2]],
            &[vec![1.0, 0.0]],
            &[vec![true, true]],
            &camera(2),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidDepth { track: 0, frame: 1, .. }));
    }

    fn with_counts(counts: &[usize]) -> TrackSet {
        let n = *counts.iter().max().unwrap();
        let vis: Vec<Vec<bool>> = (0..n)
            .map(|i| counts.iter().map(|&c| i < c).collect())
            .collect();
        let pos = vec![vec![Vec3::ZERO; counts.len()]; n];
        TrackSet::new(pos, vis).unwrap()
    }

    #[test]
    fn canonical_frame_examples() {
        assert_eq!(select_canonical_frame(&with_counts(&[4, 4, 4])), 0);
        assert_eq!(select_canonical_frame(&with_counts(&[3, 5, 4])), 1);
        assert_eq!(select_canonical_frame(&with_counts(&[5, 5, 2])), 0);
    }

    #[test]
    fn track_set_rejects_bad_shapes() {
        assert!(TrackSet::new(vec![], vec![]).is_err());
        assert!(TrackSet::new(vec![vec![Vec3::ZERO]], vec![vec![false]]).is_err());
        assert!(TrackSet::new(vec![vec![Vec3::ZERO; 2]], vec![vec![true]]).is_err());
    }
}
