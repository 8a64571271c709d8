//! Rotary positional encodings: 1D for audio tokens, factorized 3D `(t, h, w)`
//! for video tokens, and the signed audio position layout that places
//! reference tokens strictly before the target on the time axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_ROPE_BASE: f64 = 10000.0;

/// How reference audio tokens are placed relative to the target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    /// Reference at `[−ref_len − gap, −gap)`, target at `[0, target_len)`.
    #[default]
    Negative,
    /// Reference and target both start at 0 and overlap.
    Standard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionGrid {
    /// Reference positions followed by target positions.
    pub audio_positions: Vec<i64>,
    pub video_positions: Vec<(usize, usize, usize)>,
    pub rope_base: f64,
}

impl PositionGrid {
    pub fn reference_positions(&self, ref_len: usize) -> &[i64] {
        &self.audio_positions[..ref_len]
    }

    pub fn target_positions(&self, ref_len: usize) -> &[i64] {
        &self.audio_positions[ref_len..]
    }
}

/// Audio positions for `ref_len` reference tokens followed by `target_len`
/// target tokens: `[−ref_len, …, −1, 0, …, target_len − 1]`.
pub fn build_positions(ref_len: usize, target_len: usize) -> Result<PositionGrid> {
    Ok(PositionGrid {
        audio_positions: audio_positions(ref_len, target_len, PositionScheme::Negative, 0)?,
        video_positions: Vec::new(),
        rope_base: DEFAULT_ROPE_BASE,
    })
}

pub fn audio_positions(ref_len: usize, target_len: usize, scheme: PositionScheme, gap: usize) -> Result<Vec<i64>> {
    if target_len == 0 {
        return Err(Error::InvalidArgument("target_len must be at least 1".into()));
    }
    let reference = match scheme {
        PositionScheme::Negative => {
            let start = -((ref_len + gap) as i64);
            (0..ref_len as i64).map(|i| start + i).collect::<Vec<_>>()
        }
        PositionScheme::Standard => (0..ref_len as i64).collect(),
    };
    Ok(reference.into_iter().chain(0..target_len as i64).collect())
}

/// Full `t × h × w` grid in row-major `(t, h, w)` order.
pub fn video_grid(t: usize, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(t * h * w);
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                out.push((ti, hi, wi));
            }
        }
    }
    out
}

/// Precomputed rotations: for every row, a set of channel pairs and the
/// cosine/sine of the angle each pair is rotated by.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable<F: Scalar> {
    rows: usize,
    cols: usize,
    pairs: Vec<(usize, usize)>,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Scalar> RopeTable<F> {
    /// One position per row. Within each of `heads` slices of `head_dim`
    /// channels, the first `rotary_dim` channels are rotated in consecutive
    /// pairs with frequencies `base^(−2i/rotary_dim)`.
    pub fn rotary_1d(positions: &[f64], head_dim: usize, rotary_dim: usize, heads: usize, base: f64) -> Self {
        debug_assert!(rotary_dim <= head_dim && rotary_dim.is_multiple_of(2));
        let half = rotary_dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|i| base.powf(-2.0 * i as f64 / rotary_dim as f64))
            .collect();
        let mut pairs = Vec::with_capacity(heads * half);
        for h in 0..heads {
            for i in 0..half {
                pairs.push((h * head_dim + 2 * i, h * head_dim + 2 * i + 1));
            }
        }
        let mut cos = Vec::with_capacity(positions.len() * pairs.len());
        let mut sin = Vec::with_capacity(positions.len() * pairs.len());
        for &p in positions {
            for _ in 0..heads {
                for &f in &freqs {
                    let a = p * f;
                    cos.push(F::of(a.cos()));
                    sin.push(F::of(a.sin()));
                }
            }
        }
        Self {
            rows: positions.len(),
            cols: heads * head_dim,
            pairs,
            cos,
            sin,
        }
    }

    /// Factorized 3D rotation: the first `rotary_dim` channels of each head
    /// split into three equal contiguous groups driven by `t`, `h` and `w`.
    pub fn rotary_axial(coords: &[[f64; 3]], head_dim: usize, rotary_dim: usize, heads: usize, base: f64) -> Self {
        debug_assert!(rotary_dim <= head_dim && rotary_dim.is_multiple_of(6));
        let group = rotary_dim / 3;
        let half = group / 2;
        let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / group as f64)).collect();
        let mut pairs = Vec::with_capacity(heads * 3 * half);
        for h in 0..heads {
            for axis in 0..3 {
                for i in 0..half {
                    let c = h * head_dim + axis * group + 2 * i;
                    pairs.push((c, c + 1));
                }
            }
        }
        let mut cos = Vec::with_capacity(coords.len() * pairs.len());
        let mut sin = Vec::with_capacity(coords.len() * pairs.len());
        for c in coords {
            for _ in 0..heads {
                for &coord in c {
                    for &f in &freqs {
                        let a = coord * f;
                        cos.push(F::of(a.cos()));
                        sin.push(F::of(a.sin()));
                    }
                }
            }
        }
        Self {
            rows: coords.len(),
            cols: heads * head_dim,
            pairs,
            cos,
            sin,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    fn rotate(&self, x: &Tensor<F>, sign: F) -> Result<Tensor<F>> {
        if x.rows() != self.rows || x.cols() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "rope",
                left: x.shape().to_vec(),
                right: vec![self.rows, self.cols],
            });
        }
        let mut out = x.data().to_vec();
        let np = self.pairs.len();
        for (r, row) in out.chunks_mut(self.cols).enumerate() {
            let cs = &self.cos[r * np..(r + 1) * np];
            let sn = &self.sin[r * np..(r + 1) * np];
            for ((&(a, b), &c), &s) in self.pairs.iter().zip(cs).zip(sn) {
                let s = s * sign;
                let (xa, xb) = (row[a], row[b]);
                row[a] = xa * c - xb * s;
                row[b] = xa * s + xb * c;
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.rotate(x, F::one())
    }

    /// Rotation by the negated angles; also the transpose used for gradients.
    pub fn apply_inverse(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.rotate(x, -F::one())
    }
}

/// Rotates consecutive feature pairs `(x₂ᵢ, x₂ᵢ₊₁)` of each token by `p·θᵢ`,
/// `θᵢ = base^(−2i/d)`.
pub fn apply_rope_1d(tokens: &Tensor, positions: &[i64], base: f64) -> Result<Tensor> {
    let d = tokens.cols();
    if d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "rope needs an even feature dimension, got {d}"
        )));
    }
    if positions.len() != tokens.rows() {
        return Err(Error::ShapeMismatch {
            op: "apply_rope_1d",
            left: tokens.shape().to_vec(),
            right: vec![positions.len()],
        });
    }
    let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    RopeTable::rotary_1d(&pos, d, d, 1, base).apply(tokens)
}

/// Splits the features into three contiguous groups rotated by `t`, `h`, `w`.
pub fn apply_rope_3d(tokens: &Tensor, grid: &[(usize, usize, usize)], base: f64) -> Result<Tensor> {
    let d = tokens.cols();
    if d % 6 != 0 {
        return Err(Error::InvalidArgument(format!(
            "3D rope needs a feature dimension divisible by 6, got {d}"
        )));
    }
    if grid.len() != tokens.rows() {
        return Err(Error::ShapeMismatch {
            op: "apply_rope_3d",
            left: tokens.shape().to_vec(),
            right: vec![grid.len()],
        });
    }
    let coords: Vec<[f64; 3]> = grid.iter().map(|&(t, h, w)| [t as f64, h as f64, w as f64]).collect();
    RopeTable::rotary_axial(&coords, d, d, 1, base).apply(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn position_examples() {
        assert_eq!(
            build_positions(3, 4).unwrap().audio_positions,
            vec![-3, -2, -1, 0, 1, 2, 3]
        );
        assert_eq!(build_positions(0, 2).unwrap().audio_positions, vec![0, 1]);
        assert_eq!(build_positions(1, 1).unwrap().audio_positions, vec![-1, 0]);
        assert!(build_positions(2, 0).is_err());
    }

    #[test]
    fn gap_and_standard_schemes() {
        assert_eq!(
            audio_positions(2, 2, PositionScheme::Negative, 3).unwrap(),
            vec![-5, -4, 0, 1]
        );
        assert_eq!(
            audio_positions(3, 2, PositionScheme::Standard, 0).unwrap(),
            vec![0, 1, 2, 0, 1]
        );
    }

    #[test]
    fn zero_position_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        assert_eq!(apply_rope_1d(&x, &[0], DEFAULT_ROPE_BASE).unwrap(), x);
    }

    #[test]
    fn unit_position_angles() {
        let x = Tensor::new(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = apply_rope_1d(&x, &[1], DEFAULT_ROPE_BASE).unwrap();
        let d = y.data();
        assert!((d[0] - 1.0f32.cos()).abs() < 1e-6 && (d[1] - 1.0f32.sin()).abs() < 1e-6);
        assert!((d[0] - 0.5403).abs() < 1e-4 && (d[1] - 0.8415).abs() < 1e-4);
        assert!((d[2] - 0.01f32.cos()).abs() < 1e-6 && (d[3] - 0.01f32.sin()).abs() < 1e-6);
    }

    #[test]
    fn negative_position_inverts_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let y = apply_rope_1d(&x, &[7], DEFAULT_ROPE_BASE).unwrap();
        let back = apply_rope_1d(&y, &[-7], DEFAULT_ROPE_BASE).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn odd_dimension_rejected() {
        let x = Tensor::zeros(&[1, 5]);
        assert!(apply_rope_1d(&x, &[0], DEFAULT_ROPE_BASE).is_err());
        let x = Tensor::zeros(&[1, 8]);
        assert!(apply_rope_3d(&x, &[(0, 0, 0)], DEFAULT_ROPE_BASE).is_err());
        let x = Tensor::zeros(&[2, 12]);
        assert!(apply_rope_3d(&x, &[(0, 0, 0)], DEFAULT_ROPE_BASE).is_err());
    }

    #[test]
    fn rope_3d_origin_is_identity_and_axes_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 12], 1.0, &mut rng);
        assert_eq!(apply_rope_3d(&x, &[(0, 0, 0)], DEFAULT_ROPE_BASE).unwrap(), x);
        let y = apply_rope_3d(&x, &[(1, 0, 0)], DEFAULT_ROPE_BASE).unwrap();
        assert_ne!(&y.data()[..4], &x.data()[..4]);
        assert_eq!(&y.data()[4..], &x.data()[4..]);
    }

    #[test]
    fn rope_3d_relative_time_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = DEFAULT_ROPE_BASE;
        for _ in 0..50 {
            let q = Tensor::randn(&[1, 12], 1.0, &mut rng);
            let k = Tensor::randn(&[1, 12], 1.0, &mut rng);
            let (t, t2, h, w, delta) = (1usize, 3usize, 2usize, 1usize, 4usize);
            let a = dot(
                apply_rope_3d(&q, &[(t, h, w)], base).unwrap().data(),
                apply_rope_3d(&k, &[(t2, h, w)], base).unwrap().data(),
            );
            let b = dot(
                apply_rope_3d(&q, &[(t + delta, h, w)], base).unwrap().data(),
                apply_rope_3d(&k, &[(t2 + delta, h, w)], base).unwrap().data(),
            );
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn video_grid_has_no_duplicates() {
        let g = video_grid(2, 4, 4);
        assert_eq!(g.len(), 32);
        let set: std::collections::HashSet<_> = g.iter().collect();
        assert_eq!(set.len(), 32);
    }

    proptest! {
        #[test]
        fn relative_position_invariance(
            seed in any::<u64>(),
            p in -40i64..40,
            p2 in -40i64..40,
            delta in -40i64..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::randn(&[1, 16], 1.0, &mut rng);
            let k = Tensor::randn(&[1, 16], 1.0, &mut rng);
            let r = |x: &Tensor, pos: i64| apply_rope_1d(x, &[pos], DEFAULT_ROPE_BASE).unwrap();
            let a = dot(r(&q, p).data(), r(&k, p2).data());
            let b = dot(r(&q, p + delta).data(), r(&k, p2 + delta).data());
            prop_assert!((a - b).abs() < 1e-5);
        }

        #[test]
        fn norm_preserved(seed in any::<u64>(), p in -64i64..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[1, 16], 1.0, &mut rng);
            let y = apply_rope_1d(&x, &[p], DEFAULT_ROPE_BASE).unwrap();
            let n = |t: &Tensor| dot(t.data(), t.data()).sqrt();
            prop_assert!((n(&x) - n(&y)).abs() < 1e-6);
        }

        #[test]
        fn reference_and_target_disjoint(ref_len in 1usize..=32, target_len in 1usize..=32) {
            let pos = build_positions(ref_len, target_len).unwrap().audio_positions;
            let (r, t) = pos.split_at(ref_len);
            prop_assert_eq!(t.iter().min().unwrap() - r.iter().max().unwrap(), 1);
            prop_assert!(r.iter().all(|x| !t.contains(x)));
        }
    }
}
