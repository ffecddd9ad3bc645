//! Pushes splats through the cage map: μ′ = f(μ), Σ′ = J_f Σ J_fᵀ.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::cage::DeformedCage;
use crate::green::{self, CoordinateTables, GreenError};
use crate::splat::{decompose_covariance, Splat, SplatCloud};

/// Smallest eigenvalue kept when re-decomposing a collapsed covariance.
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct DeformedSplats {
    pub mu_prime: Vec<Vector3<f64>>,
    pub sigma_prime: Vec<Matrix3<f64>>,
    /// Cage-map Jacobian at each splat, kept for the adjoint.
    pub jacobians: Vec<Matrix3<f64>>,
}

impl DeformedSplats {
    /// Splats left as they are (used for rendering undeformed clouds).
    pub fn from_cloud(cloud: &SplatCloud) -> Self {
        Self {
            mu_prime: cloud.centroids(),
            sigma_prime: cloud.covariances(),
            jacobians: vec![Matrix3::identity(); cloud.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.mu_prime.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_prime.is_empty()
    }

    /// Indices where the local map is orientation-reversing or singular.
    pub fn inverted(&self) -> Vec<usize> {
        self.jacobians
            .iter()
            .enumerate()
            .filter(|(_, j)| !(j.determinant() > 0.0))
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn transport(
    rest_covariances: &[Matrix3<f64>],
    tables: &CoordinateTables,
    cage_def: &DeformedCage,
) -> Result<DeformedSplats, GreenError> {
    green::check_connectivity(tables, cage_def)?;
    let normals = green::scaled_normals(tables, cage_def);
    Ok(transport_with_normals(rest_covariances, tables, &cage_def.vertices, &normals))
}

/// Transport with the face vectors `b_t` given explicitly rather than
/// derived from the deformed faces.
pub fn transport_with_normals(
    rest_covariances: &[Matrix3<f64>],
    tables: &CoordinateTables,
    verts: &[Vector3<f64>],
    normals: &[Vector3<f64>],
) -> DeformedSplats {
    let mu_prime = green::map_points(tables, verts, normals);
    let jacobians = green::map_jacobians(tables, verts, normals);
    let sigma_prime = jacobians
        .par_iter()
        .zip(rest_covariances.par_iter())
        .map(|(j, s)| {
            let m = j * s * j.transpose();
            (m + m.transpose()) * 0.5
        })
        .collect();
    DeformedSplats {
        mu_prime,
        sigma_prime,
        jacobians,
    }
}

/// Points per block in the reductions below. The block partition and the
/// order in which block sums are combined are fixed, so results do not depend
/// on the number of worker threads.
const BLOCK: usize = 64;

/// Gradient on the deformed cage vertices from gradients on μ′ and Σ′.
pub fn transport_adjoint(
    rest_covariances: &[Matrix3<f64>],
    tables: &CoordinateTables,
    cage_def: &DeformedCage,
    forward: &DeformedSplats,
    grad_mu: &[Vector3<f64>],
    grad_sigma: &[Matrix3<f64>],
) -> Vec<Vector3<f64>> {
    let (nv, nf) = (tables.num_vertices, tables.num_faces);
    let n = tables.num_points();
    let blocks: Vec<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut ga = vec![Vector3::zeros(); nv];
            let mut gb = vec![Vector3::zeros(); nf];
            for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                let gs = grad_sigma[i];
                let gj = (gs + gs.transpose()) * forward.jacobians[i] * rest_covariances[i];
                let gm = grad_mu[i];
                if gm == Vector3::zeros() && gj == Matrix3::zeros() {
                    continue;
                }
                for ((acc, phi), dphi) in ga.iter_mut().zip(tables.phi_row(i)).zip(tables.grad_phi_row(i)) {
                    *acc += gm * *phi + gj * dphi;
                }
                for ((acc, psi), dpsi) in gb.iter_mut().zip(tables.psi_row(i)).zip(tables.grad_psi_row(i)) {
                    *acc += gm * *psi + gj * dpsi;
                }
            }
            (ga, gb)
        })
        .collect();
    let mut ga = vec![Vector3::zeros(); nv];
    let mut gb = vec![Vector3::zeros(); nf];
    for (a, b) in blocks {
        for (x, y) in ga.iter_mut().zip(a) {
            *x += y;
        }
        for (x, y) in gb.iter_mut().zip(b) {
            *x += y;
        }
    }
    let from_normals = green::scaled_normals_adjoint(tables, cage_def, &gb);
    ga.iter().zip(from_normals).map(|(a, b)| a + b).collect()
}

/// Result of [`export_deformed`]: the cloud and the splats whose covariance
/// had to be clamped.
#[derive(Debug, Clone)]
pub struct Exported {
    pub cloud: SplatCloud,
    pub clamped: Vec<usize>,
}

/// Re-expresses deformed covariances as (scale, rotation) so the result can
/// be saved as an ordinary splat file. Opacity, color and any pass-through
/// attributes of `source` are kept.
pub fn export_deformed(source: &SplatCloud, d: &DeformedSplats) -> Exported {
    let results: Vec<(Splat, bool)> = source
        .splats
        .par_iter()
        .zip(d.mu_prime.par_iter().zip(d.sigma_prime.par_iter()))
        .map(|(s, (mu, sigma))| {
            let (scale, rot, clamped) = match decompose_covariance(sigma) {
                Ok((scale, rot)) if scale.iter().all(|x| x * x >= EIGEN_FLOOR) => (scale, rot, false),
                _ => {
                    let sym = (sigma + sigma.transpose()) * 0.5;
                    let floored = floor_eigenvalues(&sym);
                    let (scale, rot) = decompose_covariance(&floored).unwrap_or_else(|_| {
                        (Vector3::repeat(EIGEN_FLOOR.sqrt()), nalgebra::UnitQuaternion::identity())
                    });
                    (scale, rot, true)
                }
            };
            (
                Splat {
                    mu: *mu,
                    scale,
                    rot,
                    opacity: s.opacity,
                    color: s.color,
                },
                clamped,
            )
        })
        .collect();
    let mut clamped = Vec::new();
    let mut splats = Vec::with_capacity(results.len());
    for (i, (s, c)) in results.into_iter().enumerate() {
        if c {
            clamped.push(i);
        }
        splats.push(s);
    }
    if !clamped.is_empty() {
        log::warn!(
            "{} splat covariance(s) were not positive definite and were clamped to eigenvalue {EIGEN_FLOOR:e} (first: {})",
            clamped.len(),
            clamped[0]
        );
    }
    Exported {
        cloud: SplatCloud {
            splats,
            layout: source.layout.clone(),
        },
        clamped,
    }
}

fn floor_eigenvalues(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = m.symmetric_eigen();
    let vals = eig.eigenvalues.map(|x| if x.is_finite() { x.max(EIGEN_FLOOR) } else { EIGEN_FLOOR });
    let q = eig.eigenvectors;
    let out = q * Matrix3::from_diagonal(&vals) * q.transpose();
    (out + out.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cage::CageMesh;
    use crate::green::compute_tables;
    use nalgebra::{Rotation3, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(n: usize, seed: u64) -> (CageMesh, SplatCloud) {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let splats = (0..n)
            .map(|_| Splat {
                mu: Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)),
                scale: Vector3::new(rng.random_range(0.02..0.1), rng.random_range(0.02..0.1), rng.random_range(0.02..0.1)),
                rot: UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random()),
                opacity: 0.8,
                color: Vector3::new(0.1, 0.2, 0.3),
            })
            .collect();
        (cage, SplatCloud::new(splats))
    }

    #[test]
    fn identity_and_rotation() {
        let (cage, cloud) = fixture(20, 1);
        let covs = cloud.covariances();
        let tables = compute_tables(&cage, &cloud.centroids()).unwrap();
        let d = transport(&covs, &tables, &DeformedCage::rest(&cage)).unwrap();
        for (i, s) in cloud.splats.iter().enumerate() {
            assert!((d.mu_prime[i] - s.mu).norm() < 1e-9);
            assert!((d.sigma_prime[i] - covs[i]).norm() <= 1e-8 * covs[i].norm());
        }
        let r = Rotation3::from_euler_angles(0.3, 1.0, -0.4).into_inner();
        let def = DeformedCage {
            vertices: cage.vertices.iter().map(|v| r * v).collect(),
        };
        let d = transport(&covs, &tables, &def).unwrap();
        for (i, s) in cloud.splats.iter().enumerate() {
            assert!((d.mu_prime[i] - r * s.mu).norm() < 1e-9);
            let expect = r * covs[i] * r.transpose();
            assert!((d.sigma_prime[i] - expect).norm() <= 1e-8 * expect.norm());
        }
        let exported = export_deformed(&cloud, &d);
        assert!(exported.clamped.is_empty());
        for (e, s) in exported.cloud.splats.iter().zip(&cloud.splats) {
            assert!((e.covariance() - r * s.covariance() * r.transpose()).norm() < 1e-9);
        }
    }

    #[test]
    fn adjoint_matches_fd() {
        let (cage, cloud) = fixture(5, 2);
        assert_eq!(cage.num_vertices(), 12);
        let covs = cloud.covariances();
        let tables = compute_tables(&cage, &cloud.centroids()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let def = DeformedCage {
            vertices: cage
                .vertices
                .iter()
                .map(|v| v * 1.1 + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.05))
                .collect(),
        };
        let gm: Vec<Vector3<f64>> = (0..5).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let gs: Vec<Matrix3<f64>> = (0..5).map(|_| Matrix3::from_fn(|_, _| rng.random_range(-10.0..10.0))).collect();
        let loss = |c: &DeformedCage| -> f64 {
            let d = transport(&covs, &tables, c).unwrap();
            d.mu_prime.iter().zip(&gm).map(|(a, b)| a.dot(b)).sum::<f64>()
                + d.sigma_prime.iter().zip(&gs).map(|(a, b)| a.component_mul(b).sum()).sum::<f64>()
        };
        let fwd = transport(&covs, &tables, &def).unwrap();
        let grad = transport_adjoint(&covs, &tables, &def, &fwd, &gm, &gs);
        for _ in 0..10 {
            let dir: Vec<Vector3<f64>> = (0..12).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
            let h = 1e-6;
            let shift = |s: f64| DeformedCage {
                vertices: def.vertices.iter().zip(&dir).map(|(v, d)| v + d * s).collect(),
            };
            let fd = (loss(&shift(h)) - loss(&shift(-h))) / (2.0 * h);
            let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-6), "{fd} vs {an}");
        }
        let zero = transport_adjoint(&covs, &tables, &def, &fwd, &[Vector3::zeros(); 5], &[Matrix3::zeros(); 5]);
        assert!(zero.iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn translation_gradient_sums_through_partition_of_unity() {
        let (cage, cloud) = fixture(5, 4);
        let covs = cloud.covariances();
        let tables = compute_tables(&cage, &cloud.centroids()).unwrap();
        let def = DeformedCage::rest(&cage);
        let fwd = transport(&covs, &tables, &def).unwrap();
        let g = Vector3::new(0.3, -1.0, 2.0);
        let grad = transport_adjoint(&covs, &tables, &def, &fwd, &[g; 5], &[Matrix3::zeros(); 5]);
        let total: Vector3<f64> = grad.iter().sum();
        assert!((total - g * 5.0).norm() < 1e-9);
    }

    #[test]
    fn crushed_covariance_is_clamped() {
        let (_, cloud) = fixture(2, 5);
        let mut d = DeformedSplats::from_cloud(&cloud);
        d.sigma_prime[1] = Matrix3::from_diagonal(&Vector3::new(1e-4, 0.0, -1e-3));
        let e = export_deformed(&cloud, &d);
        assert_eq!(e.clamped, vec![1]);
        assert!(e.cloud.splats[1].scale.iter().all(|s| *s > 0.0));
    }
}
