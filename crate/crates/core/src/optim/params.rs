//! Flat parameter vectors and the tree view built from them.

use std::collections::BTreeMap;

use crate::ad::Real;
use crate::motion::{MotionSource, MotionTree, NodeId};
use crate::se3::{Quat, Vec3, SE3};

/// Scalars per basis frame: quaternion `w, x, y, z` then translation.
pub const BASIS_STRIDE: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Position { node: NodeId, axis: u8 },
    Radius { node: NodeId },
    Coefficient { node: NodeId, index: u32 },
    /// `component` 0..4 is the quaternion, 4..7 the translation.
    Basis {
        owner: NodeId,
        basis: u32,
        frame: u32,
        component: u8,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Basis,
    Position,
    Radius,
    Coefficient,
}

impl ParamKey {
    pub fn group(&self) -> ParamGroup {
        match self {
            ParamKey::Position { .. } => ParamGroup::Position,
            ParamKey::Radius { .. } => ParamGroup::Radius,
            ParamKey::Coefficient { .. } => ParamGroup::Coefficient,
            ParamKey::Basis { .. } => ParamGroup::Basis,
        }
    }

    /// Node whose level decides whether this parameter is trained: the
    /// node itself, or for basis entries the owner's children.
    pub fn node(&self) -> NodeId {
        match *self {
            ParamKey::Position { node, .. }
            | ParamKey::Radius { node }
            | ParamKey::Coefficient { node, .. } => node,
            ParamKey::Basis { owner, .. } => owner,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slots {
    /// Position (3) then radius; absent for the root.
    geometry: Option<usize>,
    coefficients: usize,
    coefficient_count: usize,
    basis: Option<usize>,
}

/// Where every optimizable scalar of a tree lives in the flat vector.
///
/// Nodes appear in ascending id order. Each contributes its position and
/// radius (not the root), its coefficients, then the basis set it owns,
/// ordered by basis index and frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    keys: Vec<ParamKey>,
    slots: Vec<Slots>,
    frames: usize,
}

impl ParamLayout {
    pub fn new(tree: &MotionTree) -> Self {
        let frames = tree.frame_count();
        let mut keys = Vec::new();
        let mut slots = Vec::with_capacity(tree.len());
        for n in tree.nodes() {
            let geometry = n.parent.map(|_| {
                let at = keys.len();
                for axis in 0..3 {
                    keys.push(ParamKey::Position { node: n.id, axis });
                }
                keys.push(ParamKey::Radius { node: n.id });
                at
            });
            let coefficients = keys.len();
            for index in 0..n.coefficients.len() as u32 {
                keys.push(ParamKey::Coefficient { node: n.id, index });
            }
            let basis = tree.basis_set(n.id).map(|set| {
                let at = keys.len();
                for basis in 0..set.bases.len() as u32 {
                    for frame in 0..frames as u32 {
                        for component in 0..BASIS_STRIDE as u8 {
                            keys.push(ParamKey::Basis {
                                owner: n.id,
                                basis,
                                frame,
                                component,
                            });
                        }
                    }
                }
                at
            });
            slots.push(Slots {
                geometry,
                coefficients,
                coefficient_count: n.coefficients.len(),
                basis,
            });
        }
        ParamLayout {
            keys,
            slots,
            frames,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[ParamKey] {
        &self.keys
    }

    pub fn index_map(&self) -> BTreeMap<ParamKey, usize> {
        self.keys.iter().enumerate().map(|(i, k)| (*k, i)).collect()
    }

    /// Start of the position triple of dense node `i` (radius follows).
    pub fn geometry_offset(&self, i: usize) -> Option<usize> {
        self.slots[i].geometry
    }

    pub fn coefficient_range(&self, i: usize) -> std::ops::Range<usize> {
        let s = &self.slots[i];
        s.coefficients..s.coefficients + s.coefficient_count
    }

    pub fn basis_offset(&self, owner: usize, m: usize, t: usize) -> Option<usize> {
        self.slots[owner]
            .basis
            .map(|b| b + (m * self.frames + t) * BASIS_STRIDE)
    }

    /// Offsets of every quaternion block.
    pub fn quaternion_offsets(&self) -> impl Iterator<Item = usize> + '_ {
        self.keys.iter().enumerate().filter_map(|(i, k)| {
            matches!(k, ParamKey::Basis { component: 0, .. }).then_some(i)
        })
    }
}

/// Parameter values of a tree in [`ParamLayout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn from_tree(tree: &MotionTree) -> Self {
        let layout = ParamLayout::new(tree);
        let mut values = Vec::with_capacity(layout.len());
        for n in tree.nodes() {
            if n.parent.is_some() {
                values.extend(n.position.to_array());
                values.push(n.radius);
            }
            values.extend(&n.coefficients);
            if let Some(set) = tree.basis_set(n.id) {
                for b in &set.bases {
                    for t in &b.transforms {
                        values.extend(t.rotation.to_array());
                        values.extend(t.translation.to_array());
                    }
                }
            }
        }
        debug_assert_eq!(values.len(), layout.len());
        ParamStore { layout, values }
    }

    /// Rescales every quaternion block to unit norm.
    pub fn normalize_quaternions(&mut self) {
        let offsets: Vec<usize> = self.layout.quaternion_offsets().collect();
        for o in offsets {
            let q = &mut self.values[o..o + 4];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    /// Copies the values into a tree with the same structure.
    pub fn write_to(&self, tree: &mut MotionTree) {
        let ids: Vec<NodeId> = tree.nodes().iter().map(|n| n.id).collect();
        let v = &self.values;
        for (i, id) in ids.iter().enumerate() {
            let node = tree.node_mut(*id).expect("same structure");
            if let Some(g) = self.layout.geometry_offset(i) {
                node.position = Vec3::new(v[g], v[g + 1], v[g + 2]);
                node.radius = v[g + 3];
            }
            node.coefficients
                .copy_from_slice(&v[self.layout.coefficient_range(i)]);
            if let Some(set) = tree.basis_set_mut(*id) {
                for (m, b) in set.bases.iter_mut().enumerate() {
                    for (t, tr) in b.transforms.iter_mut().enumerate() {
                        let o = self.layout.basis_offset(i, m, t).expect("owner");
                        *tr = SE3::new(
                            Quat::new(v[o], v[o + 1], v[o + 2], v[o + 3]),
                            Vec3::new(v[o + 4], v[o + 5], v[o + 6]),
                        );
                    }
                }
            }
        }
    }
}

/// A tree whose parameters come from a flat vector of scalars.
///
/// Basis rotations are normalized from the raw quaternion components, so
/// derivatives are taken with respect to the unprojected values.
pub struct TreeState<'a, S> {
    tree: &'a MotionTree,
    positions: Vec<Vec3<S>>,
    radii: Vec<S>,
    coefficients: Vec<Vec<S>>,
    /// Per owner, `m * frames + t`.
    bases: Vec<Vec<SE3<S>>>,
}

impl<'a, S: Real> TreeState<'a, S> {
    pub fn new(tree: &'a MotionTree, layout: &ParamLayout, values: &[S]) -> Self {
        assert_eq!(values.len(), layout.len(), "parameter vector does not match layout");
        let frames = tree.frame_count();
        let mut positions = Vec::with_capacity(tree.len());
        let mut radii = Vec::with_capacity(tree.len());
        let mut coefficients = Vec::with_capacity(tree.len());
        let mut bases = Vec::with_capacity(tree.len());
        for (i, n) in tree.nodes().iter().enumerate() {
            match layout.geometry_offset(i) {
                Some(g) => {
                    positions.push(Vec3::new(values[g], values[g + 1], values[g + 2]));
                    radii.push(values[g + 3]);
                }
                None => {
                    positions.push(Vec3::from_f64(n.position));
                    radii.push(S::cst(n.radius));
                }
            }
            coefficients.push(values[layout.coefficient_range(i)].to_vec());
            let m = tree.basis_count(n.id);
            let mut own = Vec::with_capacity(m * frames);
            for b in 0..m {
                for t in 0..frames {
                    let o = layout.basis_offset(i, b, t).expect("owner has a basis slot");
                    let v = &values[o..o + BASIS_STRIDE];
                    own.push(SE3::new(
                        Quat::new(v[0], v[1], v[2], v[3]),
                        Vec3::new(v[4], v[5], v[6]),
                    ));
                }
            }
            bases.push(own);
        }
        TreeState {
            tree,
            positions,
            radii,
            coefficients,
            bases,
        }
    }
}

impl<S: Real> MotionSource<S> for TreeState<'_, S> {
    fn tree(&self) -> &MotionTree {
        self.tree
    }
    fn position(&self, i: usize) -> Vec3<S> {
        self.positions[i]
    }
    fn radius(&self, i: usize) -> S {
        self.radii[i]
    }
    fn coefficients(&self, i: usize) -> &[S] {
        &self.coefficients[i]
    }
    fn basis(&self, owner: usize, m: usize, t: usize) -> SE3<S> {
        self.bases[owner][m * self.tree.frame_count() + t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{frame_globals, MotionBasis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_tree() -> MotionTree {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tree = MotionTree::new(3, 0).unwrap();
        let rb = |rng: &mut ChaCha8Rng| MotionBasis {
            transforms: (0..3).map(|_| SE3::random(rng, 1.0)).collect(),
        };
        tree.set_basis_set(NodeId::ROOT, vec![rb(&mut rng), rb(&mut rng)]).unwrap();
        let a = tree.add_node(NodeId::ROOT, Vec3::new(0.1, 0.2, 0.3), 0.5, vec![0.4, 0.6]).unwrap();
        tree.add_node(NodeId::ROOT, Vec3::new(1.0, 0.0, 0.0), 0.7, vec![1.0, 0.0]).unwrap();
        tree.set_basis_set(a, vec![rb(&mut rng)]).unwrap();
        tree.add_node(a, Vec3::new(0.0, rng.random(), 0.0), 0.2, vec![1.0]).unwrap();
        tree
    }

    #[test]
    fn layout_order_and_size() {
        let tree = sample_tree();
        let layout = ParamLayout::new(&tree);
        // root: 2 bases * 3 frames * 7; nodes: 4 + coefficients; node 1 owns 1 basis.
        assert_eq!(layout.len(), 42 + (4 + 2) + 21 + (4 + 2) + (4 + 1));
        assert_eq!(
            layout.keys()[0],
            ParamKey::Basis { owner: NodeId::ROOT, basis: 0, frame: 0, component: 0 }
        );
        assert_eq!(layout.keys()[42], ParamKey::Position { node: NodeId(1), axis: 0 });
        let mut sorted = layout.keys().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), layout.len());
    }

    #[test]
    fn store_round_trips_through_the_tree() {
        let tree = sample_tree();
        let store = ParamStore::from_tree(&tree);
        let mut copy = tree.clone();
        store.write_to(&mut copy);
        for (a, b) in tree.nodes().iter().zip(copy.nodes()) {
            assert_eq!(a, b);
        }
        let state = TreeState::new(&tree, &store.layout, &store.values);
        for t in 0..3 {
            let x = frame_globals(&state, t).unwrap();
            let y = frame_globals(&tree, t).unwrap();
            for (p, q) in x.iter().zip(&y) {
                assert!(p.approx_eq(q, 1e-12));
            }
        }
    }

    #[test]
    fn normalization_projects_quaternions() {
        let tree = sample_tree();
        let mut store = ParamStore::from_tree(&tree);
        let offs: Vec<usize> = store.layout.quaternion_offsets().collect();
        for &o in &offs {
            store.values[o] *= 3.0;
        }
        store.normalize_quaternions();
        for &o in &offs {
            let n: f64 = store.values[o..o + 4].iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
