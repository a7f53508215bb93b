//! Uniform spatial hash over 3-D points.

use std::collections::HashMap;

pub type Vec3 = [f32; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm(a: Vec3) -> f32 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn dist(a: Vec3, b: Vec3) -> f32 {
    norm(sub(a, b))
}

#[inline]
pub fn dist_xy(a: Vec3, b: [f32; 2]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Buckets points into cubic cells of side `cell`. Points inside each bucket
/// keep index order, so queries are deterministic.
pub struct SpatialHash {
    cell: f32,
    buckets: HashMap<(i32, i32, i32), Vec<usize>>,
}

impl SpatialHash {
    pub fn new(points: &[Vec3], cell: f32) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut buckets: HashMap<(i32, i32, i32), Vec<usize>> = HashMap::new();
        for (i, &p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: Vec3, cell: f32) -> (i32, i32, i32) {
        (
            (p[0] / cell).floor() as i32,
            (p[1] / cell).floor() as i32,
            (p[2] / cell).floor() as i32,
        )
    }

    /// All pairs `(i, j)`, `i < j`, with `‖p_i − p_j‖ < radius`, sorted
    /// lexicographically. `radius` must not exceed the cell size.
    pub fn pairs_within(&self, points: &[Vec3], radius: f32) -> Vec<(usize, usize)> {
        assert!(radius <= self.cell, "query radius exceeds cell size");
        let mut out = Vec::new();
        for (i, &p) in points.iter().enumerate() {
            let (kx, ky, kz) = Self::key(p, self.cell);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(b) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                            for &j in b {
                                if j > i && dist(p, points[j]) < radius {
                                    out.push((i, j));
                                }
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_match_brute_force_on_a_grid() {
        let pts: Vec<Vec3> = (0..50)
            .map(|i| [(i % 7) as f32 * 0.013, (i / 7) as f32 * 0.017, (i % 3) as f32 * 0.011])
            .collect();
        let h = SpatialHash::new(&pts, 0.03);
        let fast = h.pairs_within(&pts, 0.03);
        let mut slow = Vec::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                if dist(pts[i], pts[j]) < 0.03 {
                    slow.push((i, j));
                }
            }
        }
        assert_eq!(fast, slow);
    }

    #[test]
    fn negative_coordinates_hash_consistently() {
        let pts = vec![[-0.001, -0.001, 0.0], [0.001, 0.001, 0.0]];
        let h = SpatialHash::new(&pts, 0.01);
        assert_eq!(h.pairs_within(&pts, 0.01), vec![(0, 1)]);
    }
}
