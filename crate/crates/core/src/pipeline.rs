//! Glue shared by the command-line tool and the HTTP service.

use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cage::CageMesh;
use crate::deform::{export_deformed, DeformedSplats};
use crate::green::{compute_tables, load_tables, save_tables, tables_key, CoordinateTables};
use crate::jacobian::save_params;
use crate::optim::{history_csv, DeformResult, DeformSetup, OptimError};
use crate::raster::{rgb_to_sh, render_color, render_silhouette, Appearance, CameraView, RgbImage, SilhouetteMask, SplatsRef};
use crate::splat::{save_ply, Splat, SplatCloud, SplatError};

/// Fraction of the image height covered by the scene's bounding sphere.
pub const DEFAULT_FILL: f64 = 0.7;

/// Bounding-sphere centre and radius of a cloud.
pub fn scene_sphere(cloud: &SplatCloud) -> Result<(Vector3<f64>, f64), SplatError> {
    let (lo, hi) = cloud.bounds().ok_or(SplatError::EmptyCloud)?;
    let c = (lo + hi) * 0.5;
    Ok((c, ((hi - lo) * 0.5).norm().max(1e-6)))
}

/// View aimed at the scene centre; the distance frames the whole scene
/// unless `radius` is given.
pub fn scene_view(
    cloud: &SplatCloud,
    elevation: f64,
    azimuth: f64,
    width: usize,
    height: usize,
    radius: Option<f64>,
) -> Result<CameraView, SplatError> {
    let (c, r) = scene_sphere(cloud)?;
    let mut v = CameraView::framing(c, r, DEFAULT_FILL, width, height).with_angles(elevation, azimuth);
    if let Some(r) = radius {
        v.radius = r;
    }
    Ok(v)
}

pub fn render_cloud_color(cloud: &SplatCloud, view: &CameraView, bg: Vector3<f64>) -> Result<RgbImage, OptimError> {
    let d = DeformedSplats::from_cloud(cloud);
    let look = Appearance::of(cloud);
    Ok(render_color(SplatsRef::new(&d, &look), view, bg)?)
}

pub fn render_cloud_silhouette(cloud: &SplatCloud, view: &CameraView) -> Result<SilhouetteMask, OptimError> {
    let d = DeformedSplats::from_cloud(cloud);
    let look = Appearance::of(cloud);
    Ok(render_silhouette(SplatsRef::new(&d, &look), view)?)
}

/// Coordinate tables, read from `cache` when its key matches and written
/// there otherwise.
pub fn cached_tables(cloud: &SplatCloud, cage: &CageMesh, cache: Option<&Path>) -> Result<CoordinateTables, OptimError> {
    let points = cloud.centroids();
    if let Some(path) = cache {
        if path.exists() {
            match load_tables(path, cage, &points) {
                Ok(Some(t)) => return Ok(t),
                Ok(None) => log::info!("coordinate cache {} is stale, recomputing", path.display()),
                Err(e) => log::warn!("ignoring unreadable coordinate cache {}: {e}", path.display()),
            }
        }
    }
    let tables = compute_tables(cage, &points)?;
    if let Some(path) = cache {
        let tmp = path.with_extension("tmp");
        save_tables(&tables, &tables_key(cage, &points), &tmp)?;
        std::fs::rename(&tmp, path)?;
    }
    Ok(tables)
}

pub fn prepare(cloud: &SplatCloud, cage: CageMesh, cache: Option<&Path>) -> Result<DeformSetup, OptimError> {
    let tables = cached_tables(cloud, &cage, cache)?;
    DeformSetup::with_tables(cloud, cage, tables)
}

/// Files written for a finished deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub params: PathBuf,
    pub loss_csv: PathBuf,
    pub result_ply: PathBuf,
    pub cage_obj: PathBuf,
    pub final_color: PathBuf,
    pub final_silhouette: PathBuf,
    /// Splats whose covariance needed an eigenvalue floor on export.
    pub clamped_splats: usize,
}

pub fn write_artifacts(
    dir: &Path,
    source: &SplatCloud,
    setup: &DeformSetup,
    result: &DeformResult,
    view: &CameraView,
    background: Vector3<f64>,
) -> Result<Artifacts, OptimError> {
    std::fs::create_dir_all(dir)?;
    let a = Artifacts {
        params: dir.join("params.bin"),
        loss_csv: dir.join("loss.csv"),
        result_ply: dir.join("result.ply"),
        cage_obj: dir.join("deformed_cage.obj"),
        final_color: dir.join("final_color.png"),
        final_silhouette: dir.join("final_silhouette.png"),
        clamped_splats: 0,
    };
    save_params(&result.params, &a.params)?;
    std::fs::write(&a.loss_csv, history_csv(&result.history))?;
    let exported = export_deformed(source, &result.splats);
    save_ply(&exported.cloud, &a.result_ply)?;
    let deformed = CageMesh::from_parts(result.cage.vertices.clone(), setup.cage.faces.clone())?;
    std::fs::write(&a.cage_obj, deformed.to_obj())?;
    let sref = SplatsRef::new(&result.splats, &setup.appearance);
    render_color(sref, view, background)?.save_png(&a.final_color)?;
    result.final_mask.save_png(&a.final_silhouette)?;
    Ok(Artifacts {
        clamped_splats: exported.clamped.len(),
        ..a
    })
}

/// Flat splats fitted to area-uniform samples of a triangle mesh; each is
/// thin along the face normal and coloured by it.
pub fn sample_mesh_surface(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    samples: usize,
    sigma: Option<f64>,
    seed: u64,
) -> Result<SplatCloud, SplatError> {
    let areas: Vec<f64> = faces
        .iter()
        .map(|f| 0.5 * (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]])).norm())
        .collect();
    let total: f64 = areas.iter().sum();
    if samples == 0 || !(total > 0.0) {
        return Err(SplatError::EmptyCloud);
    }
    let cdf: Vec<f64> = areas
        .iter()
        .scan(0.0, |acc, a| {
            *acc += a;
            Some(*acc / total)
        })
        .collect();
    let sigma = sigma.unwrap_or_else(|| 0.5 * (total / samples as f64).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splats = (0..samples)
        .map(|_| {
            let u: f64 = rng.random();
            let k = cdf.partition_point(|c| *c < u).min(faces.len() - 1);
            let f = faces[k];
            let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
            if a + b > 1.0 {
                (a, b) = (1.0 - a, 1.0 - b);
            }
            let (p0, p1, p2) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
            let mu = p0 + (p1 - p0) * a + (p2 - p0) * b;
            let n = (p1 - p0).cross(&(p2 - p0)).try_normalize(1e-300).unwrap_or(Vector3::z());
            let rot = UnitQuaternion::rotation_between(&Vector3::z(), &n)
                .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
            Splat {
                mu,
                scale: Vector3::new(sigma, sigma, 0.1 * sigma),
                rot,
                opacity: 0.9,
                color: rgb_to_sh(&(n * 0.4 + Vector3::repeat(0.5))),
            }
        })
        .collect();
    Ok(SplatCloud::new(splats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_and_cache() {
        let cloud = SplatCloud::new(
            (0..20)
                .map(|i| {
                    let t = i as f64 * 0.3;
                    Splat::isotropic(Vector3::new(t.cos(), t.sin(), 0.1 * t) * 0.5, 0.05, 0.9, Vector3::zeros())
                })
                .collect(),
        );
        let v = scene_view(&cloud, 10.0, 20.0, 32, 32, None).unwrap();
        assert_eq!((v.elevation, v.azimuth), (10.0, 20.0));
        assert!(scene_view(&SplatCloud::new(vec![]), 0.0, 0.0, 32, 32, None).is_err());
        let cage = CageMesh::icosphere(Vector3::new(0.0, 0.0, 0.9), 2.0, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tables.bin");
        let a = cached_tables(&cloud, &cage, Some(&path)).unwrap();
        assert!(path.exists());
        let b = cached_tables(&cloud, &cage, Some(&path)).unwrap();
        assert_eq!(a.phi, b.phi);
    }

    #[test]
    fn samples_lie_on_the_mesh() {
        let cube = CageMesh::cuboid(Vector3::repeat(-1.0), Vector3::repeat(1.0));
        let cloud = sample_mesh_surface(&cube.vertices, &cube.faces, 500, None, 3).unwrap();
        assert_eq!(cloud.len(), 500);
        for s in &cloud.splats {
            assert!((s.mu.abs().max() - 1.0).abs() < 1e-12);
            let n = s.rot * Vector3::z();
            assert!((n.abs().max() - 1.0).abs() < 1e-9);
        }
        assert!(sample_mesh_surface(&cube.vertices, &cube.faces, 0, None, 3).is_err());
    }
}
