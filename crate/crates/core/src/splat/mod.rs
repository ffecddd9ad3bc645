//! Gaussian splat data model and covariance algebra.

mod ply;

pub use ply::{load_ply, read_ply, save_ply, write_ply, PlyLayout};

use nalgebra::{Matrix3, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("missing PLY property `{0}`")]
    MissingField(String),
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("PLY contains no vertices")]
    EmptyCloud,
    #[error("quaternion of splat {0} has zero norm")]
    NormalizationFailure(usize),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One anisotropic 3D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub mu: Vector3<f64>,
    /// Per-axis standard deviations (linear, not log).
    pub scale: Vector3<f64>,
    pub rot: UnitQuaternion<f64>,
    /// Opacity after the sigmoid, in [0, 1].
    pub opacity: f64,
    /// Degree-0 spherical-harmonic coefficients.
    pub color: Vector3<f64>,
}

impl Splat {
    pub fn isotropic(mu: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mu,
            scale: Vector3::repeat(sigma),
            rot: UnitQuaternion::identity(),
            opacity,
            color,
        }
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance(self)
    }
}

/// Ordered collection of splats plus whatever extra per-vertex data the
/// source file carried.
#[derive(Debug, Clone, Default)]
pub struct SplatCloud {
    pub splats: Vec<Splat>,
    /// Present when the cloud came from a PLY file; used to write the
    /// original property layout back out untouched.
    pub layout: Option<PlyLayout>,
}

impl SplatCloud {
    pub fn new(splats: Vec<Splat>) -> Self {
        Self {
            splats,
            layout: None,
        }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn centroids(&self) -> Vec<Vector3<f64>> {
        self.splats.iter().map(|s| s.mu).collect()
    }

    pub fn covariances(&self) -> Vec<Matrix3<f64>> {
        self.splats.iter().map(covariance).collect()
    }

    /// Axis-aligned bounds of the centroids, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        bounds_of(self.splats.iter().map(|s| &s.mu))
    }
}

pub(crate) fn bounds_of<'a>(
    pts: impl IntoIterator<Item = &'a Vector3<f64>>,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let mut it = pts.into_iter();
    let first = *it.next()?;
    Some(it.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

/// Σ = R·S·Sᵀ·Rᵀ.
pub fn covariance(s: &Splat) -> Matrix3<f64> {
    let r = s.rot.to_rotation_matrix().into_inner();
    let d = Matrix3::from_diagonal(&s.scale.component_mul(&s.scale));
    let m = r * d * r.transpose();
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue accepted as positive, relative to the largest one.
const SPD_REL_FLOOR: f64 = 1e-12;

/// Inverse of [`covariance`]: recovers per-axis scale and a proper rotation.
pub fn decompose_covariance(m: &Matrix3<f64>) -> Result<(Vector3<f64>, UnitQuaternion<f64>), SplatError> {
    let asym = (m - m.transpose()).abs().max();
    let mag = m.abs().max();
    if !mag.is_finite() || asym > 1e-8 * mag.max(1.0) {
        return Err(SplatError::NotSpd("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let max_ev = eig.eigenvalues.max();
    let min_ev = eig.eigenvalues.min();
    if max_ev <= 0.0 || min_ev <= SPD_REL_FLOOR * max_ev {
        return Err(SplatError::NotSpd(format!(
            "eigenvalues {:?}",
            eig.eigenvalues.as_slice()
        )));
    }
    let mut axes = eig.eigenvectors;
    let scale = eig.eigenvalues.map(f64::sqrt);
    if axes.determinant() < 0.0 {
        // flip the least visible axis
        let k = scale.imin();
        let col = -axes.column(k);
        axes.set_column(k, &col);
    }
    let rot = UnitQuaternion::from_matrix(&axes);
    Ok((scale, rot))
}

/// Rotation quaternion from raw (w, x, y, z) components.
pub fn normalize_quat(w: f64, x: f64, y: f64, z: f64) -> Option<UnitQuaternion<f64>> {
    let q = Quaternion::new(w, x, y, z);
    let n = q.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return None;
    }
    Some(UnitQuaternion::new_unchecked(q / n))
}
