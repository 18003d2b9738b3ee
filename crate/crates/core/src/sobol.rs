//! Sobol low-discrepancy sequence with Joe–Kuo direction numbers
//! (new-joe-kuo-6.21201), generated in Gray-code order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BITS: usize = 32;

/// `(s, a, m_1..m_s)` for dimensions 2 and up.
const DIRECTIONS: &[(u32, u32, &[u32])] = &[
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
];

pub const MAX_DIM: usize = DIRECTIONS.len() + 1;

fn direction_vectors(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (31 - k);
        }
        return v;
    }
    let (s, a, m) = DIRECTIONS[dim - 1];
    let s = s as usize;
    for k in 0..s {
        v[k] = m[k] << (31 - k);
    }
    for k in s..BITS {
        v[k] = v[k - s] ^ (v[k - s] >> s);
        for j in 1..s {
            if (a >> (s - 1 - j)) & 1 == 1 {
                v[k] ^= v[k - j];
            }
        }
    }
    v
}

#[derive(Debug, Clone)]
pub struct Sobol {
    v: Vec<[u32; BITS]>,
    x: Vec<u32>,
    shift: Vec<u32>,
    /// Index of the next point.
    index: u64,
}

impl Sobol {
    /// Unscrambled sequence starting at index 1, whose first point is the
    /// cube midpoint.
    pub fn new(dim: usize) -> Self {
        let mut s = Self::at_origin(dim, vec![0; dim]);
        s.next_point();
        s
    }

    /// Sequence starting at index 0 with a random digital shift (XOR of
    /// every coordinate with a seeded 32-bit word).
    pub fn scrambled(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = (0..dim).map(|_| rng.random::<u32>()).collect();
        Self::at_origin(dim, shift)
    }

    fn at_origin(dim: usize, shift: Vec<u32>) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "Sobol dimension must be in 1..={MAX_DIM}");
        Self { v: (0..dim).map(direction_vectors).collect(), x: vec![0; dim], shift, index: 0 }
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// Next point in `[0, 1)^d`.
    pub fn next_point(&mut self) -> Vec<f64> {
        assert!(self.index < 1 << BITS, "Sobol sequence exhausted");
        let out = self.x.iter().zip(&self.shift).map(|(x, s)| (x ^ s) as f64 / 4_294_967_296.0).collect();
        let c = self.index.trailing_ones() as usize;
        if c < BITS {
            for (x, v) in self.x.iter_mut().zip(&self.v) {
                *x ^= v[c];
            }
        }
        self.index += 1;
        out
    }

    pub fn take_points(&mut self, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.next_point()).collect()
    }
}

/// Maps a point of the unit cube into the box `[lo, hi]`.
pub fn scale_to_box(u: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    u.iter().zip(lo.iter().zip(hi)).map(|(u, (l, h))| l + u * (h - l)).collect()
}

/// One-dimensional star discrepancy of points in `[0, 1)`.
pub fn star_discrepancy_1d(points: &[f64]) -> f64 {
    let mut x = points.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, v)| ((i + 1) as f64 / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_point_is_the_midpoint() {
        for d in 1..=MAX_DIM {
            assert!(Sobol::new(d).next_point().iter().all(|v| *v == 0.5));
        }
    }

    #[test]
    fn one_dimensional_prefix() {
        let pts: Vec<f64> = Sobol::new(1).take_points(7).into_iter().map(|p| p[0]).collect();
        assert_eq!(pts, vec![0.5, 0.75, 0.25, 0.375, 0.875, 0.625, 0.125]);
    }

    /// Rows of scipy.stats.qmc.Sobol(d=16, scramble=False), which uses the
    /// same direction numbers and counts the origin as index 0.
    #[test]
    fn matches_reference_points() {
        let pts = Sobol::new(16).take_points(4095);
        let expect: [(usize, [f64; 16]); 5] = [
            (2, [0.75, 0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75, 0.75, 0.75, 0.75, 0.75, 0.25, 0.25, 0.75, 0.25]),
            (3, [0.25, 0.75, 0.75, 0.75, 0.25, 0.25, 0.75, 0.25, 0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75]),
            (5, [0.875, 0.875, 0.125, 0.375, 0.875, 0.625, 0.875, 0.375, 0.375, 0.125, 0.375, 0.875, 0.875, 0.125, 0.875, 0.375]),
            (99, [0.2890625, 0.8828125, 0.6484375, 0.6015625, 0.7578125, 0.8671875, 0.6484375, 0.8515625, 0.0078125, 0.3203125, 0.8359375, 0.5546875, 0.8515625, 0.7265625, 0.4453125, 0.3671875]),
            (4095, [0.000244140625, 0.941162109375, 0.334228515625, 0.901611328125, 0.940185546875, 0.078857421875, 0.949462890625, 0.390869140625, 0.191650390625, 0.246337890625, 0.569580078125, 0.321533203125, 0.368896484375, 0.519775390625, 0.551025390625, 0.416748046875]),
        ];
        for (i, row) in expect {
            assert_eq!(pts[i - 1][..], row[..], "index {i}");
        }
    }

    #[test]
    fn unit_cube_stratification() {
        // Points 0..2^k of the sequence fill every dyadic interval of
        // length 2^-k once per coordinate.
        let mut s = Sobol::scrambled(5, 0);
        let pts = s.take_points(64);
        for d in 0..5 {
            let mut counts = [0; 64];
            for p in &pts {
                counts[(p[d] * 64.0) as usize] += 1;
            }
            assert!(counts.iter().all(|c| *c == 1), "dimension {d}");
        }
    }

    #[test]
    fn scrambling_is_seeded() {
        let a = Sobol::scrambled(3, 7).take_points(10);
        assert_eq!(a, Sobol::scrambled(3, 7).take_points(10));
        assert_ne!(a, Sobol::scrambled(3, 8).take_points(10));
    }

    #[test]
    fn scaling_into_a_box() {
        assert_eq!(scale_to_box(&[0.5, 0.25], &[-1.0, 2.0], &[1.0, 6.0]), vec![0.0, 3.0]);
    }

    #[test]
    fn discrepancy_of_a_regular_grid() {
        assert!((star_discrepancy_1d(&[0.125, 0.375, 0.625, 0.875]) - 0.125).abs() < 1e-15);
        assert_eq!(star_discrepancy_1d(&[0.5, 0.75, 0.25, 0.375]), 0.25);
    }
}
