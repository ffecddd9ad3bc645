//! Per-face Jacobian fields on the cage and their integration back into
//! vertex positions through a Poisson solve.
//!
//! Each face i carries a target T_i = R(rot6_i) · S(stretch6_i). The deformed
//! vertices minimize Σ_i A_i ‖V′∇_iᵀ − T_i J⁰_i‖²_F, where ∇_i holds the
//! gradients of the three hat functions of face i. The normal equations are
//! the cotangent Laplacian L = Σ_i A_i ∇_iᵀ∇_i, factored once per cage.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, Dyn, Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cage::{CageMesh, DeformedCage};

#[derive(Debug, Error)]
pub enum JacobianError {
    #[error("rotation of face {0} is degenerate")]
    DegenerateRotation(usize),
    #[error("singular Poisson system: {0}")]
    SingularSystem(String),
    #[error("solve failed: {0}")]
    SolveFailure(String),
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const IDENTITY_ROT6: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
pub const IDENTITY_STRETCH6: [f64; 6] = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];

/// Gram-Schmidt of the two stacked 3-vectors into the columns of a rotation.
pub fn rot6_to_matrix(r: &[f64; 6]) -> Option<Matrix3<f64>> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if !(n1 > 1e-8) {
        return None;
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > 1e-8 * a2.norm().max(1e-300)) || !(n2 > 0.0) {
        return None;
    }
    let b2 = u2 / n2;
    Some(Matrix3::from_columns(&[b1, b2, b1.cross(&b2)]))
}

/// Pulls dL/dR back to dL/d(rot6).
pub fn rot6_backward(r: &[f64; 6], g: &Matrix3<f64>) -> [f64; 6] {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    let b2 = u2 / n2;
    let (g1, g2, g3) = (g.column(0).into_owned(), g.column(1).into_owned(), g.column(2).into_owned());
    let mut g_b1 = g1 + b2.cross(&g3);
    let g_b2 = g2 + g3.cross(&b1);
    let g_u2 = (g_b2 - b2 * b2.dot(&g_b2)) / n2;
    let g_a2 = g_u2 - b1 * b1.dot(&g_u2);
    g_b1 -= g_u2 * b1.dot(&a2) + a2 * b1.dot(&g_u2);
    let g_a1 = (g_b1 - b1 * b1.dot(&g_b1)) / n1;
    [g_a1.x, g_a1.y, g_a1.z, g_a2.x, g_a2.y, g_a2.z]
}

/// Rotation → rot6 (first two columns).
pub fn matrix_to_rot6(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Symmetric matrix from (xx, yy, zz, xy, xz, yz).
pub fn stretch6_to_matrix(s: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(s[0], s[3], s[4], s[3], s[1], s[5], s[4], s[5], s[2])
}

pub fn stretch6_backward(g: &Matrix3<f64>) -> [f64; 6] {
    [
        g[(0, 0)],
        g[(1, 1)],
        g[(2, 2)],
        g[(0, 1)] + g[(1, 0)],
        g[(0, 2)] + g[(2, 0)],
        g[(1, 2)] + g[(2, 1)],
    ]
}

/// Decomposed per-face parameters plus a global translation of the solved
/// cage (the Poisson solve alone fixes the mean vertex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianParams {
    pub rot6: Vec<[f64; 6]>,
    pub stretch6: Vec<[f64; 6]>,
    pub translation: [f64; 3],
}

impl JacobianParams {
    pub fn identity(num_faces: usize) -> Self {
        Self {
            rot6: vec![IDENTITY_ROT6; num_faces],
            stretch6: vec![IDENTITY_STRETCH6; num_faces],
            translation: [0.0; 3],
        }
    }

    pub fn num_faces(&self) -> usize {
        self.rot6.len()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }
}

pub fn params_to_transforms(params: &JacobianParams) -> Result<Vec<Matrix3<f64>>, JacobianError> {
    if params.stretch6.len() != params.rot6.len() {
        return Err(JacobianError::LengthMismatch {
            expected: params.rot6.len(),
            got: params.stretch6.len(),
        });
    }
    params
        .rot6
        .iter()
        .zip(&params.stretch6)
        .enumerate()
        .map(|(i, (r, s))| {
            let rot = rot6_to_matrix(r).ok_or(JacobianError::DegenerateRotation(i))?;
            Ok(rot * stretch6_to_matrix(s))
        })
        .collect()
}

/// Gradient on (rot6, stretch6) from gradients on T_i.
pub fn params_to_transforms_backward(
    params: &JacobianParams,
    grad_t: &[Matrix3<f64>],
) -> (Vec<[f64; 6]>, Vec<[f64; 6]>) {
    params
        .rot6
        .iter()
        .zip(&params.stretch6)
        .zip(grad_t)
        .map(|((r, s), g)| {
            let rot = rot6_to_matrix(r).unwrap_or_else(Matrix3::identity);
            let sm = stretch6_to_matrix(s);
            (rot6_backward(r, &(g * sm.transpose())), stretch6_backward(&(rot.transpose() * g)))
        })
        .unzip()
}

/// Factored Poisson system of a rest cage.
#[derive(Clone)]
pub struct PoissonSystem {
    pub faces: Vec<[usize; 3]>,
    pub face_area_weights: Vec<f64>,
    /// Hat-function gradients of the three corners, per face (the columns of ∇_iᵀ).
    pub grad_op: Vec<[Vector3<f64>; 3]>,
    pub rest_normals: Vec<Vector3<f64>>,
    pub rest_vertices: Vec<Vector3<f64>>,
    rest_mean: Vector3<f64>,
    /// Cholesky factor of L with vertex 0 eliminated.
    factor: Cholesky<f64, Dyn>,
}

impl std::fmt::Debug for PoissonSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoissonSystem")
            .field("vertices", &self.rest_vertices.len())
            .field("faces", &self.faces.len())
            .finish()
    }
}

pub fn build_poisson(cage: &CageMesh) -> Result<PoissonSystem, JacobianError> {
    let nv = cage.num_vertices();
    let (ncomp, _) = cage.face_components();
    if ncomp != 1 {
        return Err(JacobianError::SingularSystem(format!("cage has {ncomp} components")));
    }
    let mut used = vec![false; nv];
    for f in &cage.faces {
        for &v in f {
            used[v] = true;
        }
    }
    if let Some(v) = used.iter().position(|u| !u) {
        return Err(JacobianError::SingularSystem(format!("vertex {v} is not referenced")));
    }
    if nv < 2 {
        return Err(JacobianError::SingularSystem("fewer than two vertices".into()));
    }
    let grad_op: Vec<[Vector3<f64>; 3]> = cage
        .faces
        .iter()
        .zip(&cage.face_normals)
        .zip(&cage.face_areas)
        .map(|((f, n), &area)| {
            let p = f.map(|i| cage.vertices[i]);
            [0, 1, 2].map(|k| n.cross(&(p[(k + 2) % 3] - p[(k + 1) % 3])) / (2.0 * area))
        })
        .collect();
    let mut lap = DMatrix::<f64>::zeros(nv - 1, nv - 1);
    for ((f, g), &area) in cage.faces.iter().zip(&grad_op).zip(&cage.face_areas) {
        for a in 0..3 {
            for b in 0..3 {
                if f[a] == 0 || f[b] == 0 {
                    continue;
                }
                lap[(f[a] - 1, f[b] - 1)] += area * g[a].dot(&g[b]);
            }
        }
    }
    let factor = Cholesky::new(lap).ok_or_else(|| JacobianError::SingularSystem("factorization failed".into()))?;
    Ok(PoissonSystem {
        faces: cage.faces.clone(),
        face_area_weights: cage.face_areas.clone(),
        grad_op,
        rest_normals: cage.face_normals.clone(),
        rest_vertices: cage.vertices.clone(),
        rest_mean: cage.vertices.iter().sum::<Vector3<f64>>() / nv as f64,
        factor,
    })
}

impl PoissonSystem {
    pub fn num_vertices(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn rest_mean(&self) -> Vector3<f64> {
        self.rest_mean
    }

    /// Tangential Jacobians V∇_iᵀ of the given vertex positions.
    pub fn face_jacobians(&self, verts: &[Vector3<f64>]) -> Vec<Matrix3<f64>> {
        self.faces
            .iter()
            .zip(&self.grad_op)
            .map(|(f, g)| (0..3).map(|k| verts[f[k]] * g[k].transpose()).sum())
            .collect()
    }

    /// Rest Jacobians: the tangential part V∇_iᵀ completed by n nᵀ, which is
    /// the identity for every face.
    pub fn rest_jacobians(&self) -> Vec<Matrix3<f64>> {
        self.face_jacobians(&self.rest_vertices)
            .into_iter()
            .zip(&self.rest_normals)
            .map(|(j, n)| j + n * n.transpose())
            .collect()
    }

    /// Right-hand side Σ_i A_i T_i ∇_i of the normal equations.
    fn rhs(&self, targets: &[Matrix3<f64>]) -> Vec<Vector3<f64>> {
        let mut b = vec![Vector3::zeros(); self.num_vertices()];
        for ((f, g), (t, &a)) in self.faces.iter().zip(&self.grad_op).zip(targets.iter().zip(&self.face_area_weights)) {
            for k in 0..3 {
                b[f[k]] += t * g[k] * a;
            }
        }
        b
    }

    /// L x = b with x_0 = 0 (b must sum to zero over vertices).
    fn pinned_solve(&self, b: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>, JacobianError> {
        let n = self.num_vertices();
        let mut rhs = DMatrix::<f64>::zeros(n - 1, 3);
        for v in 1..n {
            for c in 0..3 {
                rhs[(v - 1, c)] = b[v][c];
            }
        }
        let x = self.factor.solve(&rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(JacobianError::SolveFailure("non-finite solution".into()));
        }
        let mut out = vec![Vector3::zeros(); n];
        for v in 1..n {
            out[v] = Vector3::new(x[(v - 1, 0)], x[(v - 1, 1)], x[(v - 1, 2)]);
        }
        Ok(out)
    }

    fn remove_mean(v: &mut [Vector3<f64>]) {
        let mean = v.iter().sum::<Vector3<f64>>() / v.len() as f64;
        for x in v.iter_mut() {
            *x -= mean;
        }
    }
}

/// Least-squares vertices whose face Jacobians best match `transforms`
/// (times the identity rest Jacobians); mean vertex pinned to the rest mean.
pub fn solve_cage(system: &PoissonSystem, transforms: &[Matrix3<f64>]) -> Result<DeformedCage, JacobianError> {
    if transforms.len() != system.num_faces() {
        return Err(JacobianError::LengthMismatch {
            expected: system.num_faces(),
            got: transforms.len(),
        });
    }
    let mut x = system.pinned_solve(&system.rhs(transforms))?;
    PoissonSystem::remove_mean(&mut x);
    for v in &mut x {
        *v += system.rest_mean;
    }
    Ok(DeformedCage { vertices: x })
}

/// dLoss/dT_i given dLoss/dV′ of [`solve_cage`].
pub fn solve_cage_adjoint(
    system: &PoissonSystem,
    upstream: &[Vector3<f64>],
) -> Result<Vec<Matrix3<f64>>, JacobianError> {
    if upstream.len() != system.num_vertices() {
        return Err(JacobianError::LengthMismatch {
            expected: system.num_vertices(),
            got: upstream.len(),
        });
    }
    let mut g = upstream.to_vec();
    PoissonSystem::remove_mean(&mut g);
    // the pinned system is symmetric, so the adjoint reuses the same factor
    let w = system.pinned_solve(&g)?;
    Ok(system
        .faces
        .iter()
        .zip(&system.grad_op)
        .zip(&system.face_area_weights)
        .map(|((f, gr), &a)| (0..3).map(|k| w[f[k]] * gr[k].transpose() * a).sum())
        .collect())
}

/// How the cage deformation is parameterized during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// rot6 ⊕ stretch6 per face, then Poisson.
    #[default]
    Decomposed,
    /// Raw 3×3 matrix per face, then Poisson.
    Jacobian,
    /// Cage vertex offsets directly.
    Vertices,
}

impl std::str::FromStr for Parameterization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "decomposed" => Ok(Self::Decomposed),
            "jacobian" => Ok(Self::Jacobian),
            "vertices" => Ok(Self::Vertices),
            other => Err(format!("unknown parameterization `{other}`")),
        }
    }
}

impl std::fmt::Display for Parameterization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Decomposed => "decomposed",
            Self::Jacobian => "jacobian",
            Self::Vertices => "vertices",
        })
    }
}

/// Optimization variables for any [`Parameterization`], stored flat.
///
/// Layout: decomposed = 12 per face (rot6, stretch6) + 3 translation;
/// jacobian = 9 per face (row-major) + 3 translation; vertices = 3 per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformParams {
    pub mode: Parameterization,
    pub values: Vec<f64>,
}

impl DeformParams {
    pub fn identity(mode: Parameterization, system: &PoissonSystem) -> Self {
        let values = match mode {
            Parameterization::Decomposed => JacobianParams::identity(system.num_faces()).into(),
            Parameterization::Jacobian => {
                let mut v = Vec::with_capacity(9 * system.num_faces() + 3);
                for _ in 0..system.num_faces() {
                    v.extend_from_slice(Matrix3::<f64>::identity().transpose().as_slice());
                }
                v.extend_from_slice(&[0.0; 3]);
                v
            }
            Parameterization::Vertices => vec![0.0; 3 * system.num_vertices()],
        };
        Self { mode, values }
    }

    pub fn from_jacobian_params(p: &JacobianParams) -> Self {
        Self {
            mode: Parameterization::Decomposed,
            values: p.clone().into(),
        }
    }

    /// Decomposed view; `None` for the other parameterizations.
    pub fn jacobian_params(&self) -> Option<JacobianParams> {
        if self.mode != Parameterization::Decomposed {
            return None;
        }
        let nf = (self.values.len() - 3) / 12;
        let mut p = JacobianParams::identity(nf);
        for i in 0..nf {
            p.rot6[i].copy_from_slice(&self.values[12 * i..12 * i + 6]);
            p.stretch6[i].copy_from_slice(&self.values[12 * i + 6..12 * i + 12]);
        }
        p.translation.copy_from_slice(&self.values[12 * nf..]);
        Some(p)
    }

    fn translation(&self) -> Vector3<f64> {
        let n = self.values.len();
        Vector3::new(self.values[n - 3], self.values[n - 2], self.values[n - 1])
    }

    fn raw_transforms(&self, nf: usize) -> Vec<Matrix3<f64>> {
        (0..nf)
            .map(|i| Matrix3::from_row_slice(&self.values[9 * i..9 * i + 9]))
            .collect()
    }

    /// Per-face target transforms (identity for the vertex parameterization).
    pub fn transforms(&self, system: &PoissonSystem) -> Result<Vec<Matrix3<f64>>, JacobianError> {
        match self.mode {
            Parameterization::Decomposed => params_to_transforms(&self.jacobian_params().unwrap()),
            Parameterization::Jacobian => Ok(self.raw_transforms(system.num_faces())),
            Parameterization::Vertices => Ok(vec![Matrix3::identity(); system.num_faces()]),
        }
    }

    /// Deformed cage realized by these parameters.
    pub fn realize(&self, system: &PoissonSystem) -> Result<DeformedCage, JacobianError> {
        self.check_len(system)?;
        match self.mode {
            Parameterization::Vertices => Ok(DeformedCage {
                vertices: system
                    .rest_vertices
                    .iter()
                    .enumerate()
                    .map(|(v, p)| p + Vector3::new(self.values[3 * v], self.values[3 * v + 1], self.values[3 * v + 2]))
                    .collect(),
            }),
            _ => {
                let mut cage = solve_cage(system, &self.transforms(system)?)?;
                let t = self.translation();
                for v in &mut cage.vertices {
                    *v += t;
                }
                Ok(cage)
            }
        }
    }

    /// Gradient on the flat parameter vector from a gradient on the realized
    /// cage vertices.
    pub fn realize_adjoint(&self, system: &PoissonSystem, grad_verts: &[Vector3<f64>]) -> Result<Vec<f64>, JacobianError> {
        self.check_len(system)?;
        let mut out = vec![0.0; self.values.len()];
        if self.mode == Parameterization::Vertices {
            for (v, g) in grad_verts.iter().enumerate() {
                out[3 * v..3 * v + 3].copy_from_slice(g.as_slice());
            }
            return Ok(out);
        }
        let grad_t = solve_cage_adjoint(system, grad_verts)?;
        let gt: Vector3<f64> = grad_verts.iter().sum();
        let n = out.len();
        out[n - 3..].copy_from_slice(gt.as_slice());
        match self.mode {
            Parameterization::Decomposed => {
                let (gr, gs) = params_to_transforms_backward(&self.jacobian_params().unwrap(), &grad_t);
                for i in 0..gr.len() {
                    out[12 * i..12 * i + 6].copy_from_slice(&gr[i]);
                    out[12 * i + 6..12 * i + 12].copy_from_slice(&gs[i]);
                }
            }
            Parameterization::Jacobian => {
                for (i, g) in grad_t.iter().enumerate() {
                    out[9 * i..9 * i + 9].copy_from_slice(g.transpose().as_slice());
                }
            }
            Parameterization::Vertices => unreachable!(),
        }
        Ok(out)
    }

    fn expected_len(mode: Parameterization, system: &PoissonSystem) -> usize {
        match mode {
            Parameterization::Decomposed => 12 * system.num_faces() + 3,
            Parameterization::Jacobian => 9 * system.num_faces() + 3,
            Parameterization::Vertices => 3 * system.num_vertices(),
        }
    }

    fn check_len(&self, system: &PoissonSystem) -> Result<(), JacobianError> {
        let expected = Self::expected_len(self.mode, system);
        if self.values.len() != expected {
            return Err(JacobianError::LengthMismatch {
                expected,
                got: self.values.len(),
            });
        }
        Ok(())
    }

    /// Largest absolute deviation from the identity parameters.
    pub fn distance_from_identity(&self, system: &PoissonSystem) -> f64 {
        let id = Self::identity(self.mode, system);
        self.values
            .iter()
            .zip(&id.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<JacobianParams> for Vec<f64> {
    fn from(p: JacobianParams) -> Self {
        let mut v = Vec::with_capacity(12 * p.rot6.len() + 3);
        for (r, s) in p.rot6.iter().zip(&p.stretch6) {
            v.extend_from_slice(r);
            v.extend_from_slice(s);
        }
        v.extend_from_slice(&p.translation);
        v
    }
}

/// Rotation of a rot6 vector as a unit quaternion.
pub fn rot6_quaternion(r: &[f64; 6]) -> Option<UnitQuaternion<f64>> {
    rot6_to_matrix(r).map(|m| UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SCPARAM1";

/// Binary checkpoint: magic, mode byte, u64 count, little-endian f64 values.
pub fn save_params(params: &DeformParams, path: impl AsRef<Path>) -> Result<(), JacobianError> {
    let mut out = Vec::with_capacity(17 + 8 * params.values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(match params.mode {
        Parameterization::Decomposed => 0,
        Parameterization::Jacobian => 1,
        Parameterization::Vertices => 2,
    });
    out.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&out)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<DeformParams, JacobianError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 17 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(JacobianError::Checkpoint("bad header".into()));
    }
    let mode = match bytes[8] {
        0 => Parameterization::Decomposed,
        1 => Parameterization::Jacobian,
        2 => Parameterization::Vertices,
        m => return Err(JacobianError::Checkpoint(format!("unknown mode {m}"))),
    };
    let n = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    if bytes.len() != 17 + 8 * n {
        return Err(JacobianError::Checkpoint("truncated".into()));
    }
    let values = bytes[17..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DeformParams { mode, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    #[test]
    fn gram_schmidt_examples() {
        let id = params_to_transforms(&JacobianParams::identity(1)).unwrap();
        assert_eq!(id[0], Matrix3::identity());
        let r = rot6_to_matrix(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2).into_inner();
        assert!((r - rz).norm() < 1e-15);
        let mut p = JacobianParams::identity(1);
        p.stretch6[0] = [2.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(params_to_transforms(&p).unwrap()[0], Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0)));
        p.rot6[0] = [1.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        assert!(matches!(params_to_transforms(&p), Err(JacobianError::DegenerateRotation(0))));
    }

    #[test]
    fn transform_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = JacobianParams::identity(3);
        for i in 0..3 {
            for k in 0..6 {
                p.rot6[i][k] += rng.random_range(-0.5..0.5);
                p.stretch6[i][k] += rng.random_range(-0.3..0.3);
            }
        }
        let w: Vec<Matrix3<f64>> = (0..3).map(|_| Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let loss = |p: &JacobianParams| -> f64 {
            params_to_transforms(p).unwrap().iter().zip(&w).map(|(t, w)| t.component_mul(w).sum()).sum()
        };
        let (gr, gs) = params_to_transforms_backward(&p, &w);
        let h = 1e-6;
        for i in 0..3 {
            for k in 0..6 {
                let mut a = p.clone();
                a.rot6[i][k] += h;
                let mut b = p.clone();
                b.rot6[i][k] -= h;
                assert!(((loss(&a) - loss(&b)) / (2.0 * h) - gr[i][k]).abs() < 1e-7);
                let mut a = p.clone();
                a.stretch6[i][k] += h;
                let mut b = p.clone();
                b.stretch6[i][k] -= h;
                assert!(((loss(&a) - loss(&b)) / (2.0 * h) - gs[i][k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rest_consistency() {
        let cage = CageMesh::icosphere(Vector3::new(0.2, 0.1, -0.3), 1.3, 1);
        let sys = build_poisson(&cage).unwrap();
        for j in sys.rest_jacobians() {
            assert!((j - Matrix3::identity()).norm() < 1e-10);
        }
        let def = solve_cage(&sys, &vec![Matrix3::identity(); sys.num_faces()]).unwrap();
        assert!(def.max_abs_diff(&DeformedCage::rest(&cage)) < 1e-8);
    }

    #[test]
    fn round_trip_recovers_vertices() {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 1);
        let sys = build_poisson(&cage).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let verts: Vec<Vector3<f64>> = cage.vertices.iter().map(|v| v * 1.3 + rand_vec(&mut rng, 0.2)).collect();
        let js = sys.face_jacobians(&verts);
        let out = solve_cage(&sys, &js).unwrap();
        let shift = verts.iter().sum::<Vector3<f64>>() / verts.len() as f64 - sys.rest_mean();
        for (a, b) in out.vertices.iter().zip(&verts) {
            assert!((a + shift - b).norm() < 1e-8);
        }
    }

    #[test]
    fn integrable_fields() {
        let cage = CageMesh::cuboid(Vector3::new(-1.0, -0.5, 0.0), Vector3::new(1.0, 0.5, 2.0));
        let sys = build_poisson(&cage).unwrap();
        let mean = sys.rest_mean();
        let r = Rotation3::from_euler_angles(0.4, 0.2, -0.9).into_inner();
        for a in [r, Matrix3::identity() * 2.0] {
            let out = solve_cage(&sys, &vec![a; sys.num_faces()]).unwrap();
            for (p, q) in out.vertices.iter().zip(&cage.vertices) {
                assert!((p - (a * (q - mean) + mean)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn disconnected_cage_is_singular() {
        let a = CageMesh::cuboid(Vector3::zeros(), Vector3::repeat(1.0));
        let b = CageMesh::cuboid(Vector3::repeat(3.0), Vector3::repeat(4.0));
        let n = a.vertices.len();
        let mut verts = a.vertices.clone();
        verts.extend(&b.vertices);
        let mut faces = a.faces.clone();
        faces.extend(b.faces.iter().map(|f| f.map(|i| i + n)));
        let cage = CageMesh::new(verts, faces).unwrap();
        assert!(matches!(build_poisson(&cage), Err(JacobianError::SingularSystem(_))));
    }

    #[test]
    fn adjoint_matches_fd_and_is_linear() {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 0);
        assert_eq!(cage.num_faces(), 20);
        let sys = build_poisson(&cage).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts: Vec<Matrix3<f64>> =
            (0..20).map(|_| Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3))).collect();
        let up: Vec<Vector3<f64>> = (0..sys.num_vertices()).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let loss = |ts: &[Matrix3<f64>]| -> f64 {
            solve_cage(&sys, ts).unwrap().vertices.iter().zip(&up).map(|(v, g)| v.dot(g)).sum()
        };
        let grad = solve_cage_adjoint(&sys, &up).unwrap();
        for _ in 0..10 {
            let dir: Vec<Matrix3<f64>> = (0..20).map(|_| Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
            let h = 1e-5;
            let plus: Vec<_> = ts.iter().zip(&dir).map(|(t, d)| t + d * h).collect();
            let minus: Vec<_> = ts.iter().zip(&dir).map(|(t, d)| t - d * h).collect();
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g.component_mul(d).sum()).sum();
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {an}");
        }
        let zero = solve_cage_adjoint(&sys, &vec![Vector3::zeros(); sys.num_vertices()]).unwrap();
        assert!(zero.iter().all(|m| m.norm() == 0.0));
        let up2: Vec<Vector3<f64>> = (0..sys.num_vertices()).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let sum: Vec<_> = up.iter().zip(&up2).map(|(a, b)| a + b).collect();
        let g2 = solve_cage_adjoint(&sys, &up2).unwrap();
        let gs = solve_cage_adjoint(&sys, &sum).unwrap();
        for ((a, b), c) in grad.iter().zip(&g2).zip(&gs) {
            assert!((a + b - c).norm() < 1e-10);
        }
    }

    #[test]
    fn realize_adjoint_all_modes() {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 0);
        let sys = build_poisson(&cage).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let up: Vec<Vector3<f64>> = (0..sys.num_vertices()).map(|_| rand_vec(&mut rng, 1.0)).collect();
        for mode in [Parameterization::Decomposed, Parameterization::Jacobian, Parameterization::Vertices] {
            let mut p = DeformParams::identity(mode, &sys);
            for v in &mut p.values {
                *v += rng.random_range(-0.1..0.1);
            }
            let loss = |p: &DeformParams| -> f64 {
                p.realize(&sys).unwrap().vertices.iter().zip(&up).map(|(v, g)| v.dot(g)).sum()
            };
            let g = p.realize_adjoint(&sys, &up).unwrap();
            let h = 1e-6;
            for k in (0..p.values.len()).step_by(7).chain([p.values.len() - 1]) {
                let mut a = p.clone();
                a.values[k] += h;
                let mut b = p.clone();
                b.values[k] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{mode} {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 0);
        let sys = build_poisson(&cage).unwrap();
        let mut p = DeformParams::identity(Parameterization::Decomposed, &sys);
        p.values[5] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_params(&p, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
        let jp = p.jacobian_params().unwrap();
        assert_eq!(DeformParams::from_jacobian_params(&jp), p);
    }
}
