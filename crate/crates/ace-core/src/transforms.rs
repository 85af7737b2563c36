//! Geometric transformations and the fixed bank used for the auxiliary
//! transformation-classification task.
//!
//! A [`GeoTransform`] composes an optional horizontal flip, a counterclockwise
//! rotation by quarter turns, and a circular (wrap-around) translation, always
//! applied in that order. A [`TransformBank`] is the ordered product of factor
//! sets of those three primitives, with the identity transform at index 0.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::image::Image;
use crate::{Error, Result};

/// Flip, then rotate, then circularly shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeoTransform {
    quarter_turns: u8,
    flip: bool,
    shift_rows: i32,
    shift_cols: i32,
}

impl GeoTransform {
    pub fn new(quarter_turns: u8, flip: bool, shift_rows: i32, shift_cols: i32) -> Result<Self> {
        if quarter_turns > 3 {
            return Err(Error::InvalidArgument(format!(
                "quarter_turns must be in 0..=3, got {quarter_turns}"
            )));
        }
        Ok(GeoTransform {
            quarter_turns,
            flip,
            shift_rows,
            shift_cols,
        })
    }

    pub fn identity() -> Self {
        GeoTransform {
            quarter_turns: 0,
            flip: false,
            shift_rows: 0,
            shift_cols: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.quarter_turns == 0 && !self.flip && self.shift_rows == 0 && self.shift_cols == 0
    }

    pub fn quarter_turns(&self) -> u8 {
        self.quarter_turns
    }

    pub fn flip(&self) -> bool {
        self.flip
    }

    pub fn shift(&self) -> (i32, i32) {
        (self.shift_rows, self.shift_cols)
    }

    /// Applies the transform. Any rotation requires a square image.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        let mut out = if self.flip { flip_horizontal(image) } else { image.clone() };
        for _ in 0..self.quarter_turns {
            out = rotate_quarter_ccw(&out)?;
        }
        if self.shift_rows != 0 || self.shift_cols != 0 {
            out = shift_circular(&out, self.shift_rows, self.shift_cols);
        }
        Ok(out)
    }

    /// Exactly undoes [`GeoTransform::apply`]: un-shift, un-rotate, un-flip.
    pub fn apply_inverse(&self, image: &Image) -> Result<Image> {
        let mut out = if self.shift_rows != 0 || self.shift_cols != 0 {
            shift_circular(image, -self.shift_rows, -self.shift_cols)
        } else {
            image.clone()
        };
        for _ in 0..(4 - self.quarter_turns) % 4 {
            out = rotate_quarter_ccw(&out)?;
        }
        if self.flip {
            out = flip_horizontal(&out);
        }
        Ok(out)
    }
}

/// Mirrors columns: `out[r][c] = in[r][W-1-c]`.
pub fn flip_horizontal(image: &Image) -> Image {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    Image::from_fn(h, w, ch, |r, c, k| image.get(r, w - 1 - c, k))
        .expect("dimensions unchanged")
}

/// Rotates 90 degrees counterclockwise: `out[i][j] = in[j][N-1-i]`.
/// Only defined for square images.
pub fn rotate_quarter_ccw(image: &Image) -> Result<Image> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    if h != w {
        return Err(Error::InvalidArgument(format!(
            "rotation requires a square image, got {h}x{w}"
        )));
    }
    Image::from_fn(h, w, ch, |i, j, k| image.get(j, w - 1 - i, k))
}

/// Moves content down by `rows` and right by `cols`, wrapping around edges.
pub fn shift_circular(image: &Image, rows: i32, cols: i32) -> Image {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let dr = (rows.rem_euclid(h as i32)) as usize;
    let dc = (cols.rem_euclid(w as i32)) as usize;
    Image::from_fn(h, w, ch, |r, c, k| {
        image.get((r + h - dr) % h, (c + w - dc) % w, k)
    })
    .expect("dimensions unchanged")
}

/// Ordered, duplicate-free set of transforms; index 0 is always the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformBank {
    transforms: Vec<GeoTransform>,
}

impl TransformBank {
    /// Builds the product of the three factor sets, enumerated flip-major,
    /// then by rotation, then by shift.
    ///
    /// Each factor set must contain its identity element (no flip, 0 turns,
    /// zero shift) so that the composite identity lands at index 0, and the
    /// resulting bank must hold at least two transforms.
    pub fn build(rotations: &[u8], flips: &[bool], shifts: &[(i32, i32)]) -> Result<Self> {
        if rotations.is_empty() || flips.is_empty() || shifts.is_empty() {
            return Err(Error::InvalidArgument(
                "transform bank factor sets must be non-empty".to_string(),
            ));
        }
        let mut rots = rotations.to_vec();
        rots.sort_unstable();
        for pair in rots.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::InvalidArgument(format!(
                    "duplicate rotation {} in transform bank",
                    pair[0]
                )));
            }
        }
        if rots[0] != 0 {
            return Err(Error::InvalidArgument(
                "rotation factor set must contain 0".to_string(),
            ));
        }
        if *rots.last().unwrap() > 3 {
            return Err(Error::InvalidArgument(format!(
                "rotation {} out of range 0..=3",
                rots.last().unwrap()
            )));
        }

        let mut flip_set = flips.to_vec();
        flip_set.sort_unstable();
        flip_set.dedup();
        if flip_set.len() != flips.len() {
            return Err(Error::InvalidArgument(
                "duplicate flip entry in transform bank".to_string(),
            ));
        }
        if flip_set[0] {
            return Err(Error::InvalidArgument(
                "flip factor set must contain false".to_string(),
            ));
        }

        let mut shift_set: Vec<(i32, i32)> = Vec::with_capacity(shifts.len());
        let mut saw_zero = false;
        for &s in shifts {
            if shift_set.contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate shift {s:?} in transform bank"
                )));
            }
            if s == (0, 0) {
                if saw_zero {
                    return Err(Error::InvalidArgument(
                        "duplicate shift (0, 0) in transform bank".to_string(),
                    ));
                }
                saw_zero = true;
            } else {
                shift_set.push(s);
            }
        }
        if !saw_zero {
            return Err(Error::InvalidArgument(
                "shift factor set must contain (0, 0)".to_string(),
            ));
        }
        shift_set.insert(0, (0, 0));

        let mut transforms = Vec::with_capacity(flip_set.len() * rots.len() * shift_set.len());
        for &flip in &flip_set {
            for &rot in &rots {
                for &(sr, sc) in &shift_set {
                    transforms.push(GeoTransform::new(rot, flip, sr, sc)?);
                }
            }
        }
        if transforms.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "transform bank needs at least 2 transforms, got {}",
                transforms.len()
            )));
        }
        debug_assert!(transforms[0].is_identity());
        Ok(TransformBank { transforms })
    }

    /// The 3x3 grid of circular shifts `{-s, 0, s} x {-s, 0, s}` (just the
    /// zero shift when `s == 0`), with the zero shift first.
    pub fn shift_grid(magnitude: u32) -> Vec<(i32, i32)> {
        if magnitude == 0 {
            return vec![(0, 0)];
        }
        let s = magnitude as i32;
        let mut shifts = vec![(0, 0)];
        for &dr in &[-s, 0, s] {
            for &dc in &[-s, 0, s] {
                if (dr, dc) != (0, 0) {
                    shifts.push((dr, dc));
                }
            }
        }
        shifts
    }

    /// The full bank of 4 rotations x 2 flips x 3x3 shifts (72 transforms for
    /// `magnitude > 0`, 8 otherwise).
    pub fn full(shift_magnitude: u32) -> Self {
        TransformBank::build(
            &[0, 1, 2, 3],
            &[false, true],
            &TransformBank::shift_grid(shift_magnitude),
        )
        .expect("factor sets are statically valid")
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn get(&self, index: usize) -> &GeoTransform {
        &self.transforms[index]
    }

    pub fn iter(&self) -> core::slice::Iter<'_, GeoTransform> {
        self.transforms.iter()
    }

    /// Applies every transform in order; element 0 equals the input image.
    pub fn apply_all(&self, image: &Image) -> Result<Vec<Image>> {
        self.transforms.iter().map(|t| t.apply(image)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img2x2() -> Image {
        Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn quarter_turn_ccw_matches_hand_example() {
        // [[1,2],[3,4]] rotated 90 degrees CCW -> [[2,4],[1,3]].
        let t = GeoTransform::new(1, false, 0, 0).unwrap();
        let out = t.apply(&img2x2()).unwrap();
        assert_eq!(out.pixels(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn flip_mirrors_columns() {
        let t = GeoTransform::new(0, true, 0, 0).unwrap();
        let out = t.apply(&img2x2()).unwrap();
        assert_eq!(out.pixels(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn shift_wraps_circularly() {
        let t = GeoTransform::new(0, false, 1, 0).unwrap();
        let out = t.apply(&img2x2()).unwrap();
        assert_eq!(out.pixels(), &[3.0, 4.0, 1.0, 2.0]);

        let t = GeoTransform::new(0, false, 0, -1).unwrap();
        let out = t.apply(&img2x2()).unwrap();
        assert_eq!(out.pixels(), &[2.0, 1.0, 4.0, 3.0]);

        // Shifting by the full dimension is the identity.
        let t = GeoTransform::new(0, false, 2, -2).unwrap();
        assert_eq!(t.apply(&img2x2()).unwrap(), img2x2());
    }

    #[test]
    fn rotation_of_non_square_image_is_rejected() {
        let img = Image::new(2, 3, 1, vec![0.0; 6]).unwrap();
        let t = GeoTransform::new(1, false, 0, 0).unwrap();
        assert!(matches!(t.apply(&img), Err(Error::InvalidArgument(_))));
        // No rotation: non-square is fine.
        let t0 = GeoTransform::new(0, true, 1, 1).unwrap();
        assert!(t0.apply(&img).is_ok());
    }

    #[test]
    fn four_quarter_turns_and_double_flip_are_identity() {
        let img = img2x2();
        let mut out = img.clone();
        for _ in 0..4 {
            out = rotate_quarter_ccw(&out).unwrap();
        }
        assert_eq!(out, img);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn apply_then_inverse_is_identity() {
        let img = Image::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64).unwrap();
        for q in 0..4u8 {
            for &flip in &[false, true] {
                for &(sr, sc) in &[(0, 0), (1, -2), (3, 3)] {
                    let t = GeoTransform::new(q, flip, sr, sc).unwrap();
                    let round = t.apply_inverse(&t.apply(&img).unwrap()).unwrap();
                    assert_eq!(round, img, "transform {t:?}");
                }
            }
        }
    }

    #[test]
    fn bank_identity_first_and_m_counts() {
        let bank = TransformBank::full(2);
        assert_eq!(bank.len(), 72);
        assert!(bank.get(0).is_identity());
        let small = TransformBank::full(0);
        assert_eq!(small.len(), 8);
        assert!(small.get(0).is_identity());

        // rotations {0, 180}, no flip, no shift -> M = 2, entry 1 is the 180.
        let pair = TransformBank::build(&[0, 2], &[false], &[(0, 0)]).unwrap();
        assert_eq!(pair.len(), 2);
        assert_eq!(pair.get(1).quarter_turns(), 2);
    }

    #[test]
    fn bank_rejects_degenerate_factor_sets() {
        // Identity-only bank (M = 1).
        let err = TransformBank::build(&[0], &[false], &[(0, 0)]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        // Missing identity elements.
        assert!(TransformBank::build(&[1, 2], &[false], &[(0, 0)]).is_err());
        assert!(TransformBank::build(&[0, 1], &[true], &[(0, 0)]).is_err());
        assert!(TransformBank::build(&[0, 1], &[false], &[(1, 1)]).is_err());
        // Duplicates.
        assert!(TransformBank::build(&[0, 1, 1], &[false], &[(0, 0)]).is_err());
        assert!(TransformBank::build(&[0, 1], &[false], &[(0, 0), (0, 0)]).is_err());
        // Out-of-range rotation.
        assert!(TransformBank::build(&[0, 4], &[false], &[(0, 0)]).is_err());
    }

    #[test]
    fn apply_all_keeps_input_at_index_zero() {
        let img = Image::from_fn(4, 4, 1, |r, c, _| ((r * 31 + c * 7) % 11) as f64).unwrap();
        let bank = TransformBank::full(1);
        let all = bank.apply_all(&img).unwrap();
        assert_eq!(all.len(), 72);
        assert_eq!(all[0], img);
    }

    #[test]
    fn transforms_preserve_pixel_multiset() {
        let img = Image::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64).unwrap();
        let mut original: Vec<f64> = img.pixels().to_vec();
        original.sort_by(f64::total_cmp);
        for t in TransformBank::full(1).iter() {
            let mut moved: Vec<f64> = t.apply(&img).unwrap().pixels().to_vec();
            moved.sort_by(f64::total_cmp);
            assert_eq!(moved, original);
        }
    }
}
