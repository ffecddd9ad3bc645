//! Synthetic deformation-recovery fixtures and the parameterization ablation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cage::{build_cage, CageParams};
use crate::guidance::{GuidanceProvider, MockGuidance};
use crate::jacobian::Parameterization;
use crate::optim::{run, DeformJob, DeformResult, DeformSetup, OptimConfig, OptimError, RunControl};
use crate::deform::DeformedSplats;
use crate::raster::{render_silhouette, Appearance, CameraView, SilhouetteMask, SplatsRef};
use crate::splat::{Splat, SplatCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    /// Sphere shifted sideways by a tenth of the image width.
    Translation,
    /// Capsule whose upper half is bent by 30 degrees.
    Bending,
}

impl FromStr for Benchmark {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "translation" => Ok(Self::Translation),
            "bending" => Ok(Self::Bending),
            _ => Err(format!("unknown benchmark '{s}' (expected translation|bending)")),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Translation => "translation",
            Self::Bending => "bending",
        })
    }
}

/// Problem size of a benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchScale {
    pub splats: usize,
    pub image: usize,
    pub cage_resolution: usize,
    pub cage_vertices: usize,
    pub iterations: usize,
}

impl BenchScale {
    /// Sizes named by the benchmark definitions.
    pub fn full(b: Benchmark) -> Self {
        Self {
            splats: match b {
                Benchmark::Translation => 500,
                Benchmark::Bending => 5000,
            },
            image: 256,
            cage_resolution: 48,
            cage_vertices: 200,
            iterations: 2000,
        }
    }

    /// Smaller images and clouds with the full iteration budget.
    pub fn reduced(b: Benchmark) -> Self {
        Self {
            splats: match b {
                Benchmark::Translation => 500,
                Benchmark::Bending => 1500,
            },
            image: 96,
            cage_resolution: 40,
            cage_vertices: 120,
            iterations: 2000,
        }
    }
}

pub const BEND_DEGREES: f64 = 30.0;
const CAPSULE_RADIUS: f64 = 0.3;
const CAPSULE_HALF: f64 = 0.7;

fn sphere_cloud(n: usize, rng: &mut ChaCha8Rng) -> SplatCloud {
    let sigma = 0.6 * (4.0 * std::f64::consts::PI / n as f64).sqrt();
    let splats = (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(-1.0..1.0);
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - z * z).sqrt();
            let p = Vector3::new(s * t.cos(), s * t.sin(), z);
            Splat::isotropic(p, sigma, 0.8, p * 0.8)
        })
        .collect();
    SplatCloud::new(splats)
}

fn capsule_cloud(n: usize, rng: &mut ChaCha8Rng) -> SplatCloud {
    let (r, h) = (CAPSULE_RADIUS, CAPSULE_HALF);
    let tube = std::f64::consts::TAU * r * 2.0 * h;
    let caps = 4.0 * std::f64::consts::PI * r * r;
    let sigma = 0.6 * ((tube + caps) / n as f64).sqrt();
    let splats = (0..n)
        .map(|_| {
            let p = if rng.random_range(0.0..tube + caps) < tube {
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Vector3::new(r * t.cos(), rng.random_range(-h..h), r * t.sin())
            } else {
                let z: f64 = rng.random_range(-1.0..1.0);
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let s = (1.0 - z * z).sqrt();
                let d = Vector3::new(s * t.cos(), z, s * t.sin()) * r;
                d + Vector3::new(0.0, h.copysign(z), 0.0)
            };
            let c = Vector3::new(0.6, p.y, -0.4);
            Splat::isotropic(p, sigma, 0.8, c)
        })
        .collect();
    SplatCloud::new(splats)
}

/// Rotation angle about z applied at height `y`; zero below the bend
/// region, the full bend above it.
pub fn bend_angle(y: f64) -> f64 {
    let t = ((y + 0.25) / 0.5).clamp(0.0, 1.0);
    BEND_DEGREES.to_radians() * t * t * (3.0 - 2.0 * t)
}

/// The capsule bent by rotating each splat about the z axis.
pub fn bend_cloud(cloud: &SplatCloud) -> SplatCloud {
    let mut out = cloud.clone();
    for s in &mut out.splats {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), bend_angle(s.mu.y));
        s.mu = rot * s.mu;
        s.rot = nalgebra::UnitQuaternion::from_rotation_matrix(&rot) * s.rot;
    }
    out
}

/// A scene, its cage and the silhouette to recover.
pub struct Fixture {
    pub benchmark: Benchmark,
    pub cloud: SplatCloud,
    pub target_cloud: SplatCloud,
    pub setup: DeformSetup,
    pub view: CameraView,
    pub target: SilhouetteMask,
}

pub fn fixture(b: Benchmark, scale: &BenchScale, seed: u64) -> Result<Fixture, OptimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F1C5);
    let (cloud, view) = match b {
        Benchmark::Translation => (
            sphere_cloud(scale.splats, &mut rng),
            CameraView::framing(Vector3::zeros(), 1.0, 0.55, scale.image, scale.image),
        ),
        Benchmark::Bending => (
            capsule_cloud(scale.splats, &mut rng),
            CameraView::framing(Vector3::zeros(), 1.0, 0.8, scale.image, scale.image),
        ),
    };
    let target_cloud = match b {
        Benchmark::Translation => {
            let right = view.rotation().row(0).transpose();
            let shift = right * (0.1 * scale.image as f64 * view.radius / view.focal());
            let mut c = cloud.clone();
            for s in &mut c.splats {
                s.mu += shift;
            }
            c
        }
        Benchmark::Bending => bend_cloud(&cloud),
    };
    let cage = build_cage(
        &cloud.centroids(),
        &CageParams {
            resolution: scale.cage_resolution,
            offset_cells: 3.0,
            target_vertices: scale.cage_vertices,
        },
    )?;
    let target = {
        let splats = DeformedSplats::from_cloud(&target_cloud);
        let look = Appearance::of(&target_cloud);
        render_silhouette(SplatsRef::new(&splats, &look), &view)?
    };
    Ok(Fixture {
        benchmark: b,
        setup: DeformSetup::new(&cloud, cage)?,
        cloud,
        target_cloud,
        view,
        target,
    })
}

/// One row of the ablation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub benchmark: Benchmark,
    pub param: Parameterization,
    pub seed: u64,
    pub cage_vertices: usize,
    pub iterations: usize,
    pub initial_l_sil: f64,
    pub final_l_sil: f64,
    pub iou: f64,
    /// Most cage faces with a reversed normal at any iteration.
    pub max_flipped_faces: usize,
    pub final_flipped_faces: usize,
}

pub fn run_fixture(
    fx: &Fixture,
    mode: Parameterization,
    seed: u64,
    iterations: usize,
    provider: Option<&dyn GuidanceProvider>,
) -> Result<(AblationRow, DeformResult), OptimError> {
    let job = DeformJob {
        sketch_view: fx.view,
        target_mask: fx.target.clone(),
        config: OptimConfig {
            iterations,
            seed,
            parameterization: mode,
            ..OptimConfig::default()
        },
    };
    let res = run(&fx.setup, &job, provider, RunControl::default())?;
    let final_flipped = res.cage.flipped_faces(&fx.setup.cage).len();
    let row = AblationRow {
        benchmark: fx.benchmark,
        param: mode,
        seed,
        cage_vertices: fx.setup.cage.num_vertices(),
        iterations,
        initial_l_sil: res.initial_l_sil,
        final_l_sil: res.final_l_sil,
        iou: res.final_mask.iou(&fx.target),
        max_flipped_faces: res.history.iter().map(|r| r.flipped_faces).max().unwrap_or(0).max(final_flipped),
        final_flipped_faces: final_flipped,
    };
    Ok((row, res))
}

/// Every mode on every seed with the mock guidance service.
pub fn ablation(
    b: Benchmark,
    modes: &[Parameterization],
    seeds: &[u64],
    scale: &BenchScale,
) -> Result<Vec<AblationRow>, OptimError> {
    let mock = MockGuidance::default();
    let mut rows = Vec::new();
    for &seed in seeds {
        let fx = fixture(b, scale, seed)?;
        for &mode in modes {
            rows.push(run_fixture(&fx, mode, seed, scale.iterations, Some(&mock))?.0);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "benchmark,param,seed,cage_vertices,iterations,initial_l_sil,final_l_sil,iou,max_flipped_faces,final_flipped_faces\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:e},{:e},{:.6},{},{}\n",
            r.benchmark,
            r.param,
            r.seed,
            r.cage_vertices,
            r.iterations,
            r.initial_l_sil,
            r.final_l_sil,
            r.iou,
            r.max_flipped_faces,
            r.final_flipped_faces
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bend_profile() {
        assert_eq!(bend_angle(-1.0), 0.0);
        assert!((bend_angle(1.0) - 30f64.to_radians()).abs() < 1e-15);
        let c = capsule_cloud(200, &mut ChaCha8Rng::seed_from_u64(1));
        let b = bend_cloud(&c);
        for (p, q) in c.splats.iter().zip(&b.splats) {
            assert!((p.mu.norm() - q.mu.norm()).abs() < 1e-12);
            assert!((p.mu.z - q.mu.z).abs() < 1e-12);
        }
    }

    #[test]
    fn fixtures_are_sane() {
        let scale = BenchScale {
            splats: 300,
            image: 48,
            cage_resolution: 28,
            cage_vertices: 80,
            iterations: 1,
        };
        for b in [Benchmark::Translation, Benchmark::Bending] {
            let fx = fixture(b, &scale, 0).unwrap();
            let rest = fx
                .setup
                .render_silhouette(&DeformedSplats::from_cloud(&fx.cloud), &fx.view)
                .unwrap();
            let iou = rest.iou(&fx.target);
            assert!(iou > 0.3 && iou < 0.95, "{b}: {iou}");
            assert!(fx.setup.cage.num_vertices() <= 80);
        }
    }
}
