use std::fmt;

use ndarray::{Array, ArrayView, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{FrinetError, Result};

/// A counter-clockwise rotation by a multiple of 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn from_degrees(angle: i64) -> Result<Self> {
        if angle % 90 != 0 {
            return Err(FrinetError::InvalidAngle(angle));
        }
        Ok(Self::from_quarter_turns(angle / 90))
    }

    pub fn from_quarter_turns(turns: i64) -> Self {
        Self::ALL[turns.rem_euclid(4) as usize]
    }

    pub fn quarter_turns(self) -> usize {
        self as usize
    }

    pub fn degrees(self) -> i64 {
        90 * self as i64
    }

    pub fn inverse(self) -> Self {
        Self::from_quarter_turns(-(self as i64))
    }

    /// Rotation equivalent to applying `self` and then `then`.
    pub fn then(self, then: Rotation) -> Self {
        Self::from_quarter_turns(self as i64 + then as i64)
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self, Rotation::R90 | Rotation::R270)
    }
}

impl TryFrom<i64> for Rotation {
    type Error = FrinetError;

    fn try_from(value: i64) -> Result<Self> {
        Rotation::from_degrees(value)
    }
}

impl From<Rotation> for i64 {
    fn from(r: Rotation) -> i64 {
        r.degrees()
    }
}

impl fmt::Display for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.degrees())
    }
}

/// Rotates the last two (spatial) axes counter-clockwise by `rotation`.
///
/// Pure index permutation: `R90` maps `out[.., i, j] = in[.., j, W-1-i]`.
pub fn rotate<A: Clone, D: Dimension>(grid: ArrayView<'_, A, D>, rotation: Rotation) -> Array<A, D> {
    let n = grid.ndim();
    assert!(n >= 2, "rotation needs two spatial axes");
    let (row, col) = (Axis(n - 2), Axis(n - 1));
    let mut v = grid;
    match rotation {
        Rotation::R0 => {}
        Rotation::R90 => {
            v.invert_axis(col);
            v.swap_axes(n - 2, n - 1);
        }
        Rotation::R180 => {
            v.invert_axis(row);
            v.invert_axis(col);
        }
        Rotation::R270 => {
            v.swap_axes(n - 2, n - 1);
            v.invert_axis(col);
        }
    }
    v.as_standard_layout().into_owned()
}

/// Rotation by an angle in degrees; rejects angles that are not multiples of 90.
pub fn rotate_exact<A: Clone, D: Dimension>(grid: ArrayView<'_, A, D>, angle: i64) -> Result<Array<A, D>> {
    Ok(rotate(grid, Rotation::from_degrees(angle)?))
}

/// Mirror about the vertical axis (reverses the last axis).
pub fn flip_horizontal<A: Clone, D: Dimension>(grid: ArrayView<'_, A, D>) -> Array<A, D> {
    let n = grid.ndim();
    let mut v = grid;
    v.invert_axis(Axis(n - 1));
    v.as_standard_layout().into_owned()
}

/// Values indexed by orientation, kept in ascending angle order.
///
/// The full set holds all four rotations; ablations use subsets that always
/// include the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationSet<V> {
    entries: Vec<(Rotation, V)>,
}

impl<V> OrientationSet<V> {
    pub fn full(f: impl FnMut(Rotation) -> V) -> Self {
        Self::from_rotations(&Rotation::ALL, f)
    }

    pub fn from_rotations(rotations: &[Rotation], mut f: impl FnMut(Rotation) -> V) -> Self {
        let mut rs = rotations.to_vec();
        rs.sort();
        rs.dedup();
        OrientationSet {
            entries: rs.into_iter().map(|r| (r, f(r))).collect(),
        }
    }

    pub fn try_from_rotations<E>(
        rotations: &[Rotation],
        mut f: impl FnMut(Rotation) -> std::result::Result<V, E>,
    ) -> std::result::Result<Self, E> {
        let mut rs = rotations.to_vec();
        rs.sort();
        rs.dedup();
        let entries = rs
            .into_iter()
            .map(|r| f(r).map(|v| (r, v)))
            .collect::<std::result::Result<_, E>>()?;
        Ok(OrientationSet { entries })
    }

    pub fn from_entries(mut entries: Vec<(Rotation, V)>) -> Self {
        entries.sort_by_key(|(r, _)| *r);
        OrientationSet { entries }
    }

    pub fn get(&self, rotation: Rotation) -> Option<&V> {
        self.entries.iter().find(|(r, _)| *r == rotation).map(|(_, v)| v)
    }

    pub fn at_0(&self) -> Option<&V> {
        self.get(Rotation::R0)
    }

    pub fn at_90(&self) -> Option<&V> {
        self.get(Rotation::R90)
    }

    pub fn at_180(&self) -> Option<&V> {
        self.get(Rotation::R180)
    }

    pub fn at_270(&self) -> Option<&V> {
        self.get(Rotation::R270)
    }

    pub fn rotations(&self) -> Vec<Rotation> {
        self.entries.iter().map(|(r, _)| *r).collect()
    }

    pub fn values(&self) -> impl Iterator<Item = &V> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Rotation, &V)> {
        self.entries.iter().map(|(r, v)| (*r, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn map<U>(&self, mut f: impl FnMut(Rotation, &V) -> U) -> OrientationSet<U> {
        OrientationSet {
            entries: self.entries.iter().map(|(r, v)| (*r, f(*r, v))).collect(),
        }
    }

    pub fn into_values(self) -> Vec<V> {
        self.entries.into_iter().map(|(_, v)| v).collect()
    }
}

/// The four exact rotations of `grid`; the 0° entry is the input itself.
pub fn make_orientation_set<A: Clone, D: Dimension>(grid: ArrayView<'_, A, D>) -> OrientationSet<Array<A, D>> {
    OrientationSet::full(|r| rotate(grid.clone(), r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    #[test]
    fn identity_and_inverse_pair() {
        let g = array![[1, 2], [3, 4]];
        assert_eq!(rotate_exact(g.view(), 0).unwrap(), g);
        let r = rotate_exact(g.view(), 90).unwrap();
        assert_eq!(r, array![[2, 4], [1, 3]]);
        assert_eq!(rotate_exact(r.view(), 270).unwrap(), g);
    }

    #[test]
    fn rejects_non_quarter_turns() {
        let g = array![[1.0f32]];
        assert!(matches!(rotate_exact(g.view(), 45), Err(FrinetError::InvalidAngle(45))));
        assert!(rotate_exact(g.view(), -90).is_ok());
    }

    #[test]
    fn swaps_spatial_axes_of_3d_tensor() {
        let t = Array3::from_shape_fn((3, 17, 23), |(c, y, x)| (c * 1000 + y * 23 + x) as f32);
        let r = rotate(t.view(), Rotation::R90);
        assert_eq!(r.dim(), (3, 23, 17));
        let mut back = t.clone();
        for _ in 0..4 {
            back = rotate(back.view(), Rotation::R90);
        }
        assert_eq!(back, t);
    }

    #[test]
    fn one_hot_visits_every_corner() {
        let g = array![[1u8, 0], [0, 0]];
        let set = make_orientation_set(g.view());
        let corners: Vec<(usize, usize)> = set
            .values()
            .map(|m| {
                let idx = m.indexed_iter().find(|(_, &v)| v == 1).unwrap().0;
                idx
            })
            .collect();
        let mut sorted = corners.clone();
        sorted.sort();
        assert_eq!(sorted, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(set.at_0().unwrap(), &g);
    }

    #[test]
    fn constant_grid_is_invariant() {
        let g = ndarray::Array2::from_elem((3, 5), 7);
        let set = make_orientation_set(g.view());
        for (r, v) in set.iter() {
            assert_eq!(v.dim(), if r.swaps_axes() { (5, 3) } else { (3, 5) });
            assert!(v.iter().all(|&x| x == 7));
        }
    }

    #[test]
    fn rotation_algebra() {
        for a in Rotation::ALL {
            assert_eq!(a.then(a.inverse()), Rotation::R0);
            for b in Rotation::ALL {
                assert_eq!(a.then(b).degrees(), (a.degrees() + b.degrees()) % 360);
            }
        }
    }

    proptest! {
        #[test]
        fn inverse_rotation_round_trips(h in 1usize..9, w in 1usize..9, turns in 0i64..4, seed in any::<u64>()) {
            let g = ndarray::Array2::from_shape_fn((h, w), |(y, x)| seed.wrapping_mul(31).wrapping_add((y * w + x) as u64));
            let a = turns * 90;
            let back = rotate_exact(rotate_exact(g.view(), a).unwrap().view(), (360 - a) % 360).unwrap();
            prop_assert_eq!(back, g.clone());
            let at180 = rotate(rotate(g.view(), Rotation::R90).view(), Rotation::R90);
            let set = make_orientation_set(g.view());
            prop_assert_eq!(set.at_180().unwrap(), &at180);
        }
    }
}
