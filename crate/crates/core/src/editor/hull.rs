//! Incremental 3D convex hull with point-containment queries.

use nalgebra::Vector3;

#[derive(Debug, Clone)]
struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
}

/// Outward-oriented triangle faces of a convex hull.
#[derive(Debug, Clone)]
pub struct ConvexHull {
    points: Vec<Vector3<f64>>,
    faces: Vec<Face>,
    eps: f64,
}

fn face(points: &[Vector3<f64>], v: [usize; 3]) -> Face {
    let [a, b, c] = v.map(|i| points[i]);
    let n = (b - a).cross(&(c - a));
    let normal = n / n.norm();
    Face { v, normal, offset: normal.dot(&a) }
}

impl ConvexHull {
    /// Hull of `points`, or `None` when they span less than three dimensions.
    pub fn build(input: &[[f64; 3]]) -> Option<ConvexHull> {
        let points: Vec<Vector3<f64>> = input.iter().map(|p| Vector3::from(*p)).collect();
        if points.len() < 4 {
            return None;
        }
        let scale = points.iter().map(|p| p.amax()).fold(0.0, f64::max).max(1e-300);
        let eps = 1e-10 * scale;

        let i0 = (0..points.len()).min_by(|&a, &b| points[a].x.total_cmp(&points[b].x))?;
        let i1 = (0..points.len()).max_by(|&a, &b| {
            (points[a] - points[i0]).norm_squared().total_cmp(&(points[b] - points[i0]).norm_squared())
        })?;
        let axis = points[i1] - points[i0];
        if axis.norm() <= eps {
            return None;
        }
        let line_dist = |p: &Vector3<f64>| (p - points[i0]).cross(&axis).norm() / axis.norm();
        let i2 = (0..points.len()).max_by(|&a, &b| line_dist(&points[a]).total_cmp(&line_dist(&points[b])))?;
        if line_dist(&points[i2]) <= eps {
            return None;
        }
        let n = axis.cross(&(points[i2] - points[i0])).normalize();
        let plane_dist = |p: &Vector3<f64>| n.dot(&(p - points[i0]));
        let i3 = (0..points.len()).max_by(|&a, &b| plane_dist(&points[a]).abs().total_cmp(&plane_dist(&points[b]).abs()))?;
        if plane_dist(&points[i3]).abs() <= eps {
            return None;
        }

        let (a, b, c, d) = if plane_dist(&points[i3]) > 0.0 { (i0, i2, i1, i3) } else { (i0, i1, i2, i3) };
        // With d below the (a, b, c) plane, (a, b, c) faces away from d.
        let mut faces = vec![
            face(&points, [a, b, c]),
            face(&points, [a, d, b]),
            face(&points, [b, d, c]),
            face(&points, [c, d, a]),
        ];
        debug_assert!(faces.iter().all(|f| {
            let centroid = (points[a] + points[b] + points[c] + points[d]) / 4.0;
            f.normal.dot(&centroid) - f.offset < 0.0
        }));

        for (i, p) in points.iter().enumerate() {
            if [a, b, c, d].contains(&i) {
                continue;
            }
            let visible: Vec<bool> = faces.iter().map(|f| f.normal.dot(p) - f.offset > eps).collect();
            if !visible.iter().any(|&v| v) {
                continue;
            }
            let mut edges = std::collections::HashSet::new();
            for (f, _) in faces.iter().zip(&visible).filter(|(_, &v)| v) {
                for k in 0..3 {
                    edges.insert((f.v[k], f.v[(k + 1) % 3]));
                }
            }
            let mut horizon: Vec<(usize, usize)> =
                edges.iter().copied().filter(|&(u, v)| !edges.contains(&(v, u))).collect();
            horizon.sort_unstable();
            let mut kept: Vec<Face> =
                faces.into_iter().zip(&visible).filter(|(_, &v)| !v).map(|(f, _)| f).collect();
            for (u, v) in horizon {
                kept.push(face(&points, [u, v, i]));
            }
            faces = kept;
        }
        Some(ConvexHull { points, faces, eps })
    }

    /// Whether `p` lies inside or on the hull.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let p = Vector3::from(p);
        self.faces.iter().all(|f| f.normal.dot(&p) - f.offset <= self.eps)
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Indices of the input points that are hull vertices.
    pub fn vertices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.faces.iter().flat_map(|f| f.v).collect();
        v.sort_unstable();
        v.dedup();
        debug_assert!(v.iter().all(|&i| i < self.points.len()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Containment by brute force: `q` is inside iff it lies on the inner side of
    /// every supporting plane through three input points.
    fn brute_contains(pts: &[[f64; 3]], q: [f64; 3]) -> bool {
        let v: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::from(*p)).collect();
        let q = Vector3::from(q);
        let tol = 1e-9;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                for k in j + 1..v.len() {
                    let n = (v[j] - v[i]).cross(&(v[k] - v[i]));
                    if n.norm() < 1e-12 {
                        continue;
                    }
                    let n = n.normalize();
                    let side: Vec<f64> = v.iter().map(|p| n.dot(&(p - v[i]))).collect();
                    let (lo, hi) = side.iter().fold((0.0f64, 0.0f64), |(l, h), &s| (l.min(s), h.max(s)));
                    let qs = n.dot(&(q - v[i]));
                    if hi <= tol && qs > tol {
                        return false;
                    }
                    if lo >= -tol && qs < -tol {
                        return false;
                    }
                }
            }
        }
        true
    }

    #[test]
    fn tetrahedron_contains_centroid() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let h = ConvexHull::build(&pts).unwrap();
        assert_eq!(h.face_count(), 4);
        assert!(h.contains([0.25, 0.25, 0.25]));
        assert!(!h.contains([0.5, 0.5, 0.5]));
        assert!(h.contains([1.0, 0.0, 0.0]));
    }

    #[test]
    fn cube_has_twelve_faces() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        pts.push([0.5, 0.5, 0.5]);
        let h = ConvexHull::build(&pts).unwrap();
        assert_eq!(h.vertices(), (0..8).collect::<Vec<_>>());
        assert!(h.contains([0.99, 0.01, 0.5]));
        assert!(!h.contains([1.01, 0.5, 0.5]));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(ConvexHull::build(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).is_none());
        let flat: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, (i * i) as f64, 0.0]).collect();
        assert!(ConvexHull::build(&flat).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn membership_matches_half_space_oracle(seed in 0u64..100_000, n in 4usize..14) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
            let hull = ConvexHull::build(&pts).unwrap();
            for _ in 0..40 {
                let q = [0; 3].map(|_| rng.random_range(-1.2..1.2));
                prop_assert_eq!(hull.contains(q), brute_contains(&pts, q), "query {:?}", q);
            }
            for p in &pts {
                prop_assert!(hull.contains(*p));
            }
        }
    }
}
