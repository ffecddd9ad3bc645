use nalgebra::Vector3;
use rayon::prelude::*;

use super::CageError;

/// Scalar samples on a regular grid with uniform spacing. Node (i, j, k) sits
/// at `origin + spacing * (i, j, k)`; storage is x-fastest.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub origin: Vector3<f64>,
    pub spacing: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl ScalarGrid {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn cell_diag(&self) -> f64 {
        self.spacing * 3f64.sqrt()
    }

    /// Trilinear interpolation, clamped to the grid.
    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        let q = (p - self.origin) / self.spacing;
        let mut base = [0usize; 3];
        let mut t = [0f64; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            let x = q[a].clamp(0.0, hi);
            let b = (x.floor() as usize).min(self.dims[a].saturating_sub(2));
            base[a] = b;
            t[a] = x - b as f64;
        }
        let mut acc = 0.0;
        for c in 0..8 {
            let (di, dj, dk) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let w = (if di == 1 { t[0] } else { 1.0 - t[0] })
                * (if dj == 1 { t[1] } else { 1.0 - t[1] })
                * (if dk == 1 { t[2] } else { 1.0 - t[2] });
            if w != 0.0 {
                acc += w * self.get(base[0] + di, base[1] + dj, base[2] + dk);
            }
        }
        acc
    }
}

/// Static 3-d tree for exact nearest-neighbour distance queries.
pub struct PointTree {
    points: Vec<Vector3<f64>>,
    // implicit balanced tree over `points` reordered in place; split axis per node
    axes: Vec<u8>,
}

impl PointTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut pts = points.to_vec();
        let mut axes = vec![0u8; pts.len()];
        Self::build(&mut pts, &mut axes);
        Self { points: pts, axes }
    }

    fn build(pts: &mut [Vector3<f64>], axes: &mut [u8]) {
        if pts.len() <= 1 {
            return;
        }
        let (lo, hi) = crate::splat::bounds_of(pts.iter()).unwrap();
        let axis = (hi - lo).imax();
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        axes[mid] = axis as u8;
        let (l, r) = pts.split_at_mut(mid);
        let (al, ar) = axes.split_at_mut(mid);
        Self::build(l, al);
        Self::build(&mut r[1..], &mut ar[1..]);
    }

    pub fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), q, &mut best);
        best.sqrt()
    }

    fn search(&self, lo: usize, hi: usize, q: &Vector3<f64>, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let d2 = (p - q).norm_squared();
        if d2 < *best {
            *best = d2;
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if diff * diff < *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

/// Unsigned distance to `points` sampled on a grid covering `[lo, hi]` with
/// `resolution` nodes along the longest axis.
pub fn distance_grid_in_box(
    points: &[Vector3<f64>],
    resolution: usize,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
) -> ScalarGrid {
    let extent = hi - lo;
    let spacing = extent.max() / (resolution - 1) as f64;
    let dims = [0, 1, 2].map(|a| ((extent[a] / spacing - 1e-9).ceil() as usize + 1).max(2));
    let tree = PointTree::new(points);
    let mut grid = ScalarGrid {
        origin: lo,
        spacing,
        dims,
        values: vec![0.0; dims[0] * dims[1] * dims[2]],
    };
    let (nx, ny) = (dims[0], dims[1]);
    let origin = grid.origin;
    grid.values
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = origin + Vector3::new(i as f64, j as f64, k as f64) * spacing;
                    slab[i + nx * j] = tree.nearest_distance(&p);
                }
            }
        });
    grid
}

/// Unsigned distance grid over the bounding box of `points` grown by
/// `padding` (a fraction of the largest extent) on every side.
pub fn sdf_grid(points: &[Vector3<f64>], resolution: usize, padding: f64) -> Result<ScalarGrid, CageError> {
    if !(16..=512).contains(&resolution) {
        return Err(CageError::ResolutionOutOfRange(resolution));
    }
    check_non_degenerate(points)?;
    let (lo, hi) = crate::splat::bounds_of(points).unwrap();
    let pad = (hi - lo).max() * padding.max(0.0);
    Ok(distance_grid_in_box(points, resolution, lo.add_scalar(-pad), hi.add_scalar(pad)))
}

/// Padding fraction that leaves `margin_cells` grid cells between the point
/// bounds and the grid boundary.
pub fn padding_for_margin(resolution: usize, margin_cells: f64) -> f64 {
    let usable = (resolution - 1) as f64 - 2.0 * margin_cells;
    assert!(usable > 0.0, "margin of {margin_cells} cells does not fit a {resolution} grid");
    margin_cells / usable
}

fn check_non_degenerate(points: &[Vector3<f64>]) -> Result<(), CageError> {
    if points.len() < 4 {
        return Err(CageError::DegenerateInput(format!("{} points, need at least 4", points.len())));
    }
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<nalgebra::Matrix3<f64>>();
    let ev = cov.symmetric_eigenvalues();
    if !(ev.min() > 1e-12 * ev.max().max(f64::MIN_POSITIVE)) {
        return Err(CageError::DegenerateInput("points are coplanar or collinear".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_box() {
        let g = distance_grid_in_box(&[Vector3::zeros()], 3, Vector3::repeat(-1.0), Vector3::repeat(1.0));
        assert_eq!(g.dims, [3, 3, 3]);
        assert!((g.get(0, 0, 0) - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(g.get(1, 1, 1), 0.0);
    }

    #[test]
    fn tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vector3<f64>> =
            (0..500).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let tree = PointTree::new(&pts);
        for _ in 0..200 {
            let q = Vector3::new(rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0), rng.random());
            let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest_distance(&q), brute);
        }
    }

    #[test]
    fn sphere_samples_approximate_analytic_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vector3<f64>> = (0..10_000)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                Vector3::new(r * t.cos(), r * t.sin(), z)
            })
            .collect();
        let g = sdf_grid(&pts, 32, 0.25).unwrap();
        let tol = 2.0 * g.cell_diag();
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let p = g.node(i, j, k);
                    assert!((g.get(i, j, k) - (p.norm() - 1.0).abs()).abs() <= tol);
                }
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<_> = (0..3).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(sdf_grid(&line, 32, 0.1), Err(CageError::DegenerateInput(_))));
        let plane: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, (i * i) as f64, 0.0)).collect();
        assert!(matches!(sdf_grid(&plane, 32, 0.1), Err(CageError::DegenerateInput(_))));
        let ok: Vec<_> = vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
        assert!(matches!(sdf_grid(&ok, 8, 0.1), Err(CageError::ResolutionOutOfRange(8))));
    }

    #[test]
    fn trilinear_sample_reproduces_nodes() {
        let pts = vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
        let g = sdf_grid(&pts, 16, 0.2).unwrap();
        assert_eq!(g.sample(&g.node(3, 4, 5)), g.get(3, 4, 5));
    }
}
