//! Cage meshes and their automatic construction from splat centroids.

mod contour;
mod decimate;
mod mesh;
mod sdf;

pub use contour::contour;
pub use decimate::{Clearance, Decimator};
pub use mesh::{parse_obj, CageMesh, DeformedCage};
pub(crate) use mesh::{point_triangle_distance, solid_angle};
pub use sdf::{distance_grid_in_box, padding_for_margin, sdf_grid, PointTree, ScalarGrid};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CageError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("grid resolution {0} outside [16, 512]")]
    ResolutionOutOfRange(usize),
    #[error("iso-level {offset} must exceed two grid cells ({min})")]
    OffsetTooSmall { offset: f64, min: f64 },
    #[error("level set is empty")]
    EmptyLevelSet,
    #[error("non-manifold cage: {0}")]
    NonManifoldOutput(String),
    #[error("decimation stopped at {reached} vertices, target {target}")]
    DecimationStalled { reached: usize, target: usize },
    #[error("point {0} is not enclosed by the cage")]
    PointOutsideCage(usize),
    #[error("OBJ parse error: {0}")]
    Obj(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Smallest vertex budget the decimator is asked for.
pub const MIN_CAGE_VERTICES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CageParams {
    /// Grid nodes along the longest axis.
    pub resolution: usize,
    /// Iso-level offset in grid cells.
    pub offset_cells: f64,
    pub target_vertices: usize,
}

impl Default for CageParams {
    fn default() -> Self {
        Self {
            resolution: 96,
            offset_cells: 4.0,
            target_vertices: 500,
        }
    }
}

impl CageParams {
    /// Padding fraction leaving room for the offset surface plus a few cells.
    pub fn padding(&self) -> f64 {
        padding_for_margin(self.resolution, self.offset_cells + 3.0)
    }
}

/// Marching-tetrahedra surface at `offset`, largest component kept, decimated
/// to `target_vertices` (floored at [`MIN_CAGE_VERTICES`]) with ±10% slack.
pub fn extract_cage(grid: &ScalarGrid, offset: f64, target_vertices: usize) -> Result<CageMesh, CageError> {
    let min = 2.0 * grid.spacing;
    if !(offset > min) {
        return Err(CageError::OffsetTooSmall { offset, min });
    }
    let (verts, faces) = contour(grid, offset);
    if faces.is_empty() {
        return Err(CageError::EmptyLevelSet);
    }
    let (verts, faces) = largest_component(verts, faces);
    let target = target_vertices.max(MIN_CAGE_VERTICES);
    let clearance = Clearance {
        grid,
        min_distance: 0.5 * offset,
    };
    let mut dec = Decimator::new(verts, faces, Some(clearance));
    let reached = dec.run(target);
    if reached as f64 > 1.1 * target as f64 {
        return Err(CageError::DecimationStalled { reached, target });
    }
    let (verts, faces) = dec.finish();
    CageMesh::new(verts, faces)
}

fn largest_component(verts: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let (n, comp) = mesh::face_components(verts.len(), &faces);
    if n <= 1 {
        return (verts, faces);
    }
    let mut counts = vec![0usize; n];
    for &c in &comp {
        counts[c] += 1;
    }
    // first maximum wins, which is deterministic given the contour order
    let keep = (0..n).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
    let mut remap = vec![usize::MAX; verts.len()];
    let mut out_v = Vec::new();
    let mut out_f = Vec::with_capacity(counts[keep]);
    for (f, &c) in faces.iter().zip(&comp) {
        if c != keep {
            continue;
        }
        out_f.push(f.map(|x| {
            if remap[x] == usize::MAX {
                remap[x] = out_v.len();
                out_v.push(verts[x]);
            }
            remap[x]
        }));
    }
    (out_v, out_f)
}

/// Indices of points whose winding number with respect to `cage` is at most 0.5.
pub fn points_outside(cage: &CageMesh, points: &[Vector3<f64>]) -> Vec<usize> {
    points
        .par_iter()
        .enumerate()
        .filter(|(_, p)| cage.winding_number(p) <= 0.5)
        .map(|(i, _)| i)
        .collect()
}

/// Distance grid → offset surface → decimated cage, checked to enclose every
/// input point.
pub fn build_cage(points: &[Vector3<f64>], params: &CageParams) -> Result<CageMesh, CageError> {
    let grid = sdf_grid(points, params.resolution, params.padding())?;
    let cage = extract_cage(&grid, params.offset_cells * grid.spacing, params.target_vertices)?;
    if let Some(&i) = points_outside(&cage, points).first() {
        return Err(CageError::PointOutsideCage(i));
    }
    Ok(cage)
}

/// One cage per vertex budget, sharing a single distance grid.
pub fn cage_resolution_sweep(
    points: &[Vector3<f64>],
    budgets: &[usize],
    params: &CageParams,
) -> Result<Vec<CageMesh>, CageError> {
    if budgets.is_empty() {
        return Ok(Vec::new());
    }
    let grid = sdf_grid(points, params.resolution, params.padding())?;
    budgets
        .iter()
        .map(|&b| {
            let cage = extract_cage(&grid, params.offset_cells * grid.spacing, b)?;
            if let Some(&i) = points_outside(&cage, points).first() {
                return Err(CageError::PointOutsideCage(i));
            }
            Ok(cage)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sphere_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                Vector3::new(r * t.cos(), r * t.sin(), z)
            })
            .collect()
    }

    #[test]
    fn sphere_offset_cage() {
        let pts = sphere_points(10_000, 5);
        let res = 48;
        let grid = sdf_grid(&pts, res, padding_for_margin(res, 10.0)).unwrap();
        let cage = extract_cage(&grid, 0.2, 200).unwrap();
        let n = cage.num_vertices();
        assert!((180..=220).contains(&n), "{n} vertices");
        assert_eq!(cage.euler_characteristic(), 2);
        let mean_r = cage.vertices.iter().map(|v| v.norm()).sum::<f64>() / n as f64;
        assert!((mean_r - 1.2).abs() <= grid.spacing, "mean radius {mean_r}");
        assert!(points_outside(&cage, &pts).is_empty());
    }

    #[test]
    fn tiny_budget_hits_floor() {
        let pts = sphere_points(2000, 6);
        let grid = sdf_grid(&pts, 24, padding_for_margin(24, 6.0)).unwrap();
        let cage = extract_cage(&grid, 0.4, 4).unwrap();
        assert!(cage.num_vertices() >= MIN_CAGE_VERTICES);
        assert!(cage.num_vertices() as f64 <= 1.1 * MIN_CAGE_VERTICES as f64);
    }

    #[test]
    fn offset_must_exceed_two_cells() {
        let pts = sphere_points(500, 7);
        let grid = sdf_grid(&pts, 24, 0.3).unwrap();
        assert!(matches!(
            extract_cage(&grid, grid.spacing, 100),
            Err(CageError::OffsetTooSmall { .. })
        ));
    }

    #[test]
    fn larger_offset_never_shrinks_volume() {
        let pts = sphere_points(4000, 8);
        let res = 40;
        let grid = sdf_grid(&pts, res, padding_for_margin(res, 12.0)).unwrap();
        let mut last = 0.0;
        for cells in [3.0, 4.0, 6.0, 8.0] {
            let cage = extract_cage(&grid, cells * grid.spacing, 150).unwrap();
            let vol = cage.signed_volume();
            assert!(vol >= last, "volume {vol} < {last} at {cells} cells");
            last = vol;
        }
    }

    #[test]
    fn sweep_budgets() {
        let pts = sphere_points(6000, 9);
        let params = CageParams {
            resolution: 64,
            offset_cells: 4.0,
            target_vertices: 0,
        };
        assert!(cage_resolution_sweep(&pts, &[], &params).unwrap().is_empty());
        let cages = cage_resolution_sweep(&pts, &[100, 400, 1600], &params).unwrap();
        for (cage, b) in cages.iter().zip([100usize, 400, 1600]) {
            let n = cage.num_vertices() as f64;
            assert!((n - b as f64).abs() <= 0.1 * b as f64, "{n} vs {b}");
        }
    }
}
