//! Green coordinates of a closed triangle cage.
//!
//! For an interior point η the cage map is
//!
//! ```text
//! f(η) = Σ_v φ_v(η) a_v + Σ_t ψ_t(η) b_t
//! ```
//!
//! with φ the double-layer potential of the piecewise-linear hat functions and
//! ψ the single-layer potential of each face, both with the kernel
//! 1/(4π‖q − η‖). Per face everything reduces to the signed solid angle Ω of
//! the face and the edge integrals L_e = ∫_e ds/‖q − η‖:
//!
//! ```text
//! 4π ψ_t    = Σ_e t_e L_e − h Ω
//! 4π φ_{t,v} = λ_v(η) Ω − h g_v · Σ_e m_e L_e
//! ```
//!
//! where h is the distance from η to the face plane along the outward normal,
//! m_e the outward in-plane edge normals, t_e = m_e·(q_e − η), and λ_v / g_v
//! the hat function of vertex v and its gradient. The gradients in η follow
//! in closed form from ∇Ω (a Biot–Savart edge sum) and ∇L_e.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cage::{point_triangle_distance, solid_angle, CageMesh, DeformedCage};

#[derive(Debug, Error)]
pub enum GreenError {
    #[error("point {0} lies outside the cage")]
    PointOutsideCage(usize),
    #[error("point {0} is too close to the cage surface")]
    NearBoundary(usize),
    #[error("deformed cage has {got} vertices, tables expect {expected}")]
    ConnectivityMismatch { expected: usize, got: usize },
    #[error("coordinate cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Static per-face data of the rest cage.
#[derive(Debug, Clone)]
struct FaceFrame {
    v: [usize; 3],
    n: Vector3<f64>,
    /// outward in-plane normal of edge k (from corner k to k+1)
    m: [Vector3<f64>; 3],
    /// hat-function gradients of the three corners
    g: [Vector3<f64>; 3],
}

impl FaceFrame {
    fn new(cage: &CageMesh, t: usize) -> Self {
        let v = cage.faces[t];
        let p = v.map(|i| cage.vertices[i]);
        let n = cage.face_normals[t];
        let two_a = 2.0 * cage.face_areas[t];
        let m = [0, 1, 2].map(|k| (p[(k + 1) % 3] - p[k]).normalize().cross(&n));
        let g = [0, 1, 2].map(|k| n.cross(&(p[(k + 2) % 3] - p[(k + 1) % 3])) / two_a);
        Self { v, n, m, g }
    }
}

/// Gradient of the signed solid angle of the oriented edge loop, seen from
/// the origin, with respect to the viewpoint.
#[inline]
fn edge_solid_angle_grad(a: &Vector3<f64>, b: &Vector3<f64>, ra: f64, rb: f64) -> Vector3<f64> {
    let denom = ra * rb * (ra * rb + a.dot(b));
    a.cross(b) * ((ra + rb) / denom)
}

struct FaceEval {
    psi: f64,
    phi: [f64; 3],
    grad_psi: Vector3<f64>,
    grad_phi: [Vector3<f64>; 3],
}

fn eval_face(frame: &FaceFrame, verts: &[Vector3<f64>], eta: &Vector3<f64>, with_grad: bool) -> FaceEval {
    let a = frame.v.map(|i| verts[i] - eta);
    let r = a.map(|x| x.norm());
    let omega = solid_angle(&a[0], &a[1], &a[2]);
    let h = frame.n.dot(&a[0]);
    let mut big_l = [0.0; 3];
    let mut m_l = Vector3::zeros();
    let mut tl = 0.0;
    for k in 0..3 {
        let k1 = (k + 1) % 3;
        let len = (a[k1] - a[k]).norm();
        let s = r[k] + r[k1];
        big_l[k] = ((s + len) / (s - len)).ln();
        m_l += frame.m[k] * big_l[k];
        tl += frame.m[k].dot(&a[k]) * big_l[k];
    }
    // λ_v(η): hat function of corner v extended constantly along the normal
    let lam = [0, 1, 2].map(|v| 1.0 - frame.g[v].dot(&a[v]));
    let inv = 1.0 / (4.0 * PI);
    let psi = (tl - h * omega) * inv;
    let phi = [0, 1, 2].map(|v| (lam[v] * omega - h * frame.g[v].dot(&m_l)) * inv);
    if !with_grad {
        return FaceEval {
            psi,
            phi,
            grad_psi: Vector3::zeros(),
            grad_phi: [Vector3::zeros(); 3],
        };
    }
    // ∇Ω is the Biot–Savart sum over the oriented edges
    let mut grad_omega = Vector3::zeros();
    let mut grad_l = [Vector3::zeros(); 3];
    for k in 0..3 {
        let k1 = (k + 1) % 3;
        grad_omega += edge_solid_angle_grad(&a[k], &a[k1], r[k], r[k1]);
        let len = (a[k1] - a[k]).norm();
        let s = r[k] + r[k1];
        let coef = 2.0 * len / ((s - len) * (s + len));
        grad_l[k] = (a[k] / r[k] + a[k1] / r[k1]) * coef;
    }
    let grad_psi = (frame.n * omega - m_l) * inv;
    let grad_phi = [0, 1, 2].map(|v| {
        let gm: Vector3<f64> = (0..3).map(|k| grad_l[k] * frame.g[v].dot(&frame.m[k])).sum();
        (frame.g[v] * omega + grad_omega * lam[v] + frame.n * frame.g[v].dot(&m_l) - gm * h) * inv
    });
    FaceEval {
        psi,
        phi,
        grad_psi,
        grad_phi,
    }
}

/// Coordinates (and optionally their gradients) of one point.
pub fn point_coordinates(
    cage: &CageMesh,
    eta: &Vector3<f64>,
) -> (Vec<f64>, Vec<f64>, Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let frames: Vec<FaceFrame> = (0..cage.num_faces()).map(|t| FaceFrame::new(cage, t)).collect();
    let mut phi = vec![0.0; cage.num_vertices()];
    let mut psi = vec![0.0; cage.num_faces()];
    let mut gphi = vec![Vector3::zeros(); cage.num_vertices()];
    let mut gpsi = vec![Vector3::zeros(); cage.num_faces()];
    accumulate_row(&frames, &cage.vertices, eta, &mut phi, &mut psi, Some((&mut gphi, &mut gpsi)));
    (phi, psi, gphi, gpsi)
}

fn accumulate_row(
    frames: &[FaceFrame],
    verts: &[Vector3<f64>],
    eta: &Vector3<f64>,
    phi: &mut [f64],
    psi: &mut [f64],
    mut grads: Option<(&mut [Vector3<f64>], &mut [Vector3<f64>])>,
) {
    for (t, frame) in frames.iter().enumerate() {
        let e = eval_face(frame, verts, eta, grads.is_some());
        psi[t] = e.psi;
        for k in 0..3 {
            phi[frame.v[k]] += e.phi[k];
        }
        if let Some((gphi, gpsi)) = grads.as_mut() {
            gpsi[t] = e.grad_psi;
            for k in 0..3 {
                gphi[frame.v[k]] += e.grad_phi[k];
            }
        }
    }
}

/// Green coordinates and their spatial gradients at a fixed set of points.
#[derive(Debug, Clone)]
pub struct CoordinateTables {
    pub num_vertices: usize,
    pub num_faces: usize,
    /// rows = points, cols = cage vertices
    pub phi: Vec<f64>,
    /// rows = points, cols = cage faces
    pub psi: Vec<f64>,
    pub grad_phi: Vec<Vector3<f64>>,
    pub grad_psi: Vec<Vector3<f64>>,
    pub rest_points: Vec<Vector3<f64>>,
    rest: RestFaces,
}

/// Rest geometry needed for the deformed-normal stretch factors.
#[derive(Debug, Clone)]
struct RestFaces {
    faces: Vec<[usize; 3]>,
    /// (|u|², |w|², u·w, area) with u = v1 − v0, w = v2 − v0
    metric: Vec<[f64; 4]>,
}

impl RestFaces {
    fn new(cage: &CageMesh) -> Self {
        let metric = cage
            .faces
            .iter()
            .zip(&cage.face_areas)
            .map(|(f, &area)| {
                let u = cage.vertices[f[1]] - cage.vertices[f[0]];
                let w = cage.vertices[f[2]] - cage.vertices[f[0]];
                [u.norm_squared(), w.norm_squared(), u.dot(&w), area]
            })
            .collect();
        Self {
            faces: cage.faces.clone(),
            metric,
        }
    }
}

impl CoordinateTables {
    pub fn num_points(&self) -> usize {
        self.rest_points.len()
    }

    pub fn phi_row(&self, i: usize) -> &[f64] {
        &self.phi[i * self.num_vertices..(i + 1) * self.num_vertices]
    }

    pub fn psi_row(&self, i: usize) -> &[f64] {
        &self.psi[i * self.num_faces..(i + 1) * self.num_faces]
    }

    pub fn grad_phi_row(&self, i: usize) -> &[Vector3<f64>] {
        &self.grad_phi[i * self.num_vertices..(i + 1) * self.num_vertices]
    }

    pub fn grad_psi_row(&self, i: usize) -> &[Vector3<f64>] {
        &self.grad_psi[i * self.num_faces..(i + 1) * self.num_faces]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.rest.faces
    }
}

pub fn compute_tables(cage: &CageMesh, points: &[Vector3<f64>]) -> Result<CoordinateTables, GreenError> {
    let diag = cage.bbox_diag();
    let near = 1e-6 * diag;
    let frames: Vec<FaceFrame> = (0..cage.num_faces()).map(|t| FaceFrame::new(cage, t)).collect();
    let (nv, nf) = (cage.num_vertices(), cage.num_faces());

    // containment is checked before the (much more expensive) table fill
    points.par_iter().enumerate().try_for_each(|(i, p)| {
        let d = cage
            .faces
            .iter()
            .map(|f| point_triangle_distance(p, &cage.vertices[f[0]], &cage.vertices[f[1]], &cage.vertices[f[2]]))
            .fold(f64::INFINITY, f64::min);
        if d < near {
            return Err(GreenError::NearBoundary(i));
        }
        if cage.winding_number(p) <= 0.5 {
            return Err(GreenError::PointOutsideCage(i));
        }
        Ok(())
    })?;

    let n = points.len();
    let mut phi = vec![0.0; n * nv];
    let mut psi = vec![0.0; n * nf];
    let mut grad_phi = vec![Vector3::zeros(); n * nv];
    let mut grad_psi = vec![Vector3::zeros(); n * nf];
    phi.par_chunks_mut(nv.max(1))
        .zip(psi.par_chunks_mut(nf.max(1)))
        .zip(grad_phi.par_chunks_mut(nv.max(1)))
        .zip(grad_psi.par_chunks_mut(nf.max(1)))
        .zip(points.par_iter())
        .for_each(|((((ph, ps), gph), gps), p)| {
            accumulate_row(&frames, &cage.vertices, p, ph, ps, Some((gph, gps)));
        });
    Ok(CoordinateTables {
        num_vertices: nv,
        num_faces: nf,
        phi,
        psi,
        grad_phi,
        grad_psi,
        rest_points: points.to_vec(),
        rest: RestFaces::new(cage),
    })
}

/// Deformed face normals scaled by the per-face stretch factor
/// σ_t = sqrt(|u′|²|w|² − 2(u′·w′)(u·w) + |w′|²|u|²) / (√8 · area).
pub fn scaled_normals(tables: &CoordinateTables, cage_def: &DeformedCage) -> Vec<Vector3<f64>> {
    tables
        .rest
        .faces
        .iter()
        .zip(&tables.rest.metric)
        .map(|(f, m)| {
            let (u, w) = deformed_edges(cage_def, f);
            let n = u.cross(&w);
            stretch(m, &u, &w) * n / n.norm()
        })
        .collect()
}

fn deformed_edges(cage_def: &DeformedCage, f: &[usize; 3]) -> (Vector3<f64>, Vector3<f64>) {
    let p0 = cage_def.vertices[f[0]];
    (cage_def.vertices[f[1]] - p0, cage_def.vertices[f[2]] - p0)
}

fn stretch(m: &[f64; 4], u: &Vector3<f64>, w: &Vector3<f64>) -> f64 {
    let q = u.norm_squared() * m[1] - 2.0 * u.dot(w) * m[2] + w.norm_squared() * m[0];
    q.max(0.0).sqrt() / (8f64.sqrt() * m[3])
}

/// Pulls a gradient on the scaled normals back onto the deformed vertices.
pub fn scaled_normals_adjoint(
    tables: &CoordinateTables,
    cage_def: &DeformedCage,
    grad_b: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    let mut out = vec![Vector3::zeros(); cage_def.vertices.len()];
    for ((f, m), gb) in tables.rest.faces.iter().zip(&tables.rest.metric).zip(grad_b) {
        let (u, w) = deformed_edges(cage_def, f);
        let n = u.cross(&w);
        let len = n.norm();
        let nhat = n / len;
        let sigma = stretch(m, &u, &w);
        // b = σ n̂
        let g_sigma = gb.dot(&nhat);
        let g_nhat = gb * sigma;
        let g_n = (g_nhat - nhat * nhat.dot(&g_nhat)) / len;
        let mut g_u = w.cross(&g_n);
        let mut g_w = g_n.cross(&u);
        let q = u.norm_squared() * m[1] - 2.0 * u.dot(&w) * m[2] + w.norm_squared() * m[0];
        if q > 0.0 {
            let c = g_sigma / (2.0 * q.sqrt() * 8f64.sqrt() * m[3]);
            g_u += (u * (2.0 * m[1]) - w * (2.0 * m[2])) * c;
            g_w += (w * (2.0 * m[0]) - u * (2.0 * m[2])) * c;
        }
        out[f[1]] += g_u;
        out[f[2]] += g_w;
        out[f[0]] -= g_u + g_w;
    }
    out
}

pub(crate) fn check_connectivity(tables: &CoordinateTables, cage_def: &DeformedCage) -> Result<(), GreenError> {
    if cage_def.vertices.len() != tables.num_vertices {
        return Err(GreenError::ConnectivityMismatch {
            expected: tables.num_vertices,
            got: cage_def.vertices.len(),
        });
    }
    Ok(())
}

/// Cage map at every table point for the given vertices and face vectors.
pub fn map_points(tables: &CoordinateTables, verts: &[Vector3<f64>], normals: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    (0..tables.num_points())
        .into_par_iter()
        .map(|i| {
            let mut acc = Vector3::zeros();
            for (phi, a) in tables.phi_row(i).iter().zip(verts) {
                acc += a * *phi;
            }
            for (psi, b) in tables.psi_row(i).iter().zip(normals) {
                acc += b * *psi;
            }
            acc
        })
        .collect()
}

/// Jacobian of the cage map at every table point.
pub fn map_jacobians(tables: &CoordinateTables, verts: &[Vector3<f64>], normals: &[Vector3<f64>]) -> Vec<Matrix3<f64>> {
    (0..tables.num_points())
        .into_par_iter()
        .map(|i| {
            let mut acc = Matrix3::zeros();
            for (g, a) in tables.grad_phi_row(i).iter().zip(verts) {
                acc += a * g.transpose();
            }
            for (g, b) in tables.grad_psi_row(i).iter().zip(normals) {
                acc += b * g.transpose();
            }
            acc
        })
        .collect()
}

pub fn evaluate_map(tables: &CoordinateTables, cage_def: &DeformedCage) -> Result<Vec<Vector3<f64>>, GreenError> {
    check_connectivity(tables, cage_def)?;
    Ok(map_points(tables, &cage_def.vertices, &scaled_normals(tables, cage_def)))
}

pub fn evaluate_jacobian(tables: &CoordinateTables, cage_def: &DeformedCage) -> Result<Vec<Matrix3<f64>>, GreenError> {
    check_connectivity(tables, cage_def)?;
    Ok(map_jacobians(tables, &cage_def.vertices, &scaled_normals(tables, cage_def)))
}

/// Cage map at an arbitrary interior point, evaluated directly from the
/// closed-form kernels (no tables).
pub fn map_point(cage: &CageMesh, cage_def: &DeformedCage, p: &Vector3<f64>) -> Vector3<f64> {
    let frames: Vec<FaceFrame> = (0..cage.num_faces()).map(|t| FaceFrame::new(cage, t)).collect();
    let mut phi = vec![0.0; cage.num_vertices()];
    let mut psi = vec![0.0; cage.num_faces()];
    accumulate_row(&frames, &cage.vertices, p, &mut phi, &mut psi, None);
    let rest = RestFaces::new(cage);
    let mut acc = Vector3::zeros();
    for (ph, a) in phi.iter().zip(&cage_def.vertices) {
        acc += a * *ph;
    }
    for ((ps, f), m) in psi.iter().zip(&rest.faces).zip(&rest.metric) {
        let (u, w) = deformed_edges(cage_def, f);
        let n = u.cross(&w);
        acc += stretch(m, &u, &w) * n / n.norm() * *ps;
    }
    acc
}

const CACHE_MAGIC: &[u8; 8] = b"GCTABLE1";

/// Content hash of the inputs a table depends on.
pub fn tables_key(cage: &CageMesh, points: &[Vector3<f64>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((cage.vertices.len() as u64).to_le_bytes());
    for v in &cage.vertices {
        for c in v.iter() {
            h.update(c.to_le_bytes());
        }
    }
    h.update((cage.faces.len() as u64).to_le_bytes());
    for f in &cage.faces {
        for &i in f {
            h.update((i as u64).to_le_bytes());
        }
    }
    h.update((points.len() as u64).to_le_bytes());
    for p in points {
        for c in p.iter() {
            h.update(c.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Writes `key` + dimensions followed by row-major f64 blocks
/// (φ, ψ, ∇φ, ∇ψ).
pub fn save_tables(tables: &CoordinateTables, key: &[u8; 32], path: impl AsRef<Path>) -> Result<(), GreenError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CACHE_MAGIC)?;
    out.write_all(key)?;
    for n in [tables.num_points(), tables.num_vertices, tables.num_faces] {
        out.write_all(&(n as u64).to_le_bytes())?;
    }
    let mut put = |xs: &mut dyn Iterator<Item = f64>| -> std::io::Result<()> {
        for x in xs {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    };
    put(&mut tables.phi.iter().copied())?;
    put(&mut tables.psi.iter().copied())?;
    put(&mut tables.grad_phi.iter().flat_map(|g| [g.x, g.y, g.z]))?;
    put(&mut tables.grad_psi.iter().flat_map(|g| [g.x, g.y, g.z]))?;
    out.flush()?;
    Ok(())
}

/// Loads a cached table if its key matches `cage` and `points`.
pub fn load_tables(
    path: impl AsRef<Path>,
    cage: &CageMesh,
    points: &[Vector3<f64>],
) -> Result<Option<CoordinateTables>, GreenError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 64 || &bytes[..8] != CACHE_MAGIC {
        return Err(GreenError::Cache("bad header".into()));
    }
    if bytes[8..40] != tables_key(cage, points) {
        return Ok(None);
    }
    let dims: Vec<usize> = (0..3)
        .map(|k| u64::from_le_bytes(bytes[40 + 8 * k..48 + 8 * k].try_into().unwrap()) as usize)
        .collect();
    let (n, nv, nf) = (dims[0], dims[1], dims[2]);
    let total = n * (nv + nf) * 4;
    let body = &bytes[64..];
    if body.len() != total * 8 {
        return Err(GreenError::Cache("truncated body".into()));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (phi, rest) = vals.split_at(n * nv);
    let (psi, rest) = rest.split_at(n * nf);
    let (gphi, gpsi) = rest.split_at(3 * n * nv);
    let vecs = |s: &[f64]| s.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
    Ok(Some(CoordinateTables {
        num_vertices: nv,
        num_faces: nf,
        phi: phi.to_vec(),
        psi: psi.to_vec(),
        grad_phi: vecs(gphi),
        grad_psi: vecs(gpsi),
        rest_points: points.to_vec(),
        rest: RestFaces::new(cage),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube() -> CageMesh {
        CageMesh::cuboid(Vector3::repeat(-1.0), Vector3::repeat(1.0))
    }

    #[test]
    fn cube_center_reproduction() {
        let cage = cube();
        let (phi, psi, _, _) = point_coordinates(&cage, &Vector3::zeros());
        let sum: f64 = phi.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let rec: Vector3<f64> = phi.iter().zip(&cage.vertices).map(|(w, v)| v * *w).sum::<Vector3<f64>>()
            + psi.iter().zip(&cage.face_normals).map(|(w, n)| n * *w).sum::<Vector3<f64>>();
        assert!(rec.norm() < 1e-12);
    }

    #[test]
    fn reproduction_at_random_points() {
        let cage = CageMesh::icosphere(Vector3::new(0.3, -0.2, 0.1), 1.5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = cage.vertices[0] * 0.0
                + Vector3::new(0.3, -0.2, 0.1)
                + Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
            let (phi, psi, _, _) = point_coordinates(&cage, &p);
            assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let rec: Vector3<f64> = phi.iter().zip(&cage.vertices).map(|(w, v)| v * *w).sum::<Vector3<f64>>()
                + psi.iter().zip(&cage.face_normals).map(|(w, n)| n * *w).sum::<Vector3<f64>>();
            assert!((rec - p).norm() < 1e-10, "{}", (rec - p).norm());
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..10 {
            let p = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let (_, _, gphi, gpsi) = point_coordinates(&cage, &p);
            for axis in 0..3 {
                let mut e = Vector3::zeros();
                e[axis] = h;
                let (phi_p, psi_p, _, _) = point_coordinates(&cage, &(p + e));
                let (phi_m, psi_m, _, _) = point_coordinates(&cage, &(p - e));
                for v in 0..cage.num_vertices() {
                    let fd = (phi_p[v] - phi_m[v]) / (2.0 * h);
                    assert!((fd - gphi[v][axis]).abs() < 1e-7, "phi {v} axis {axis}: {fd} vs {}", gphi[v][axis]);
                }
                for t in 0..cage.num_faces() {
                    let fd = (psi_p[t] - psi_m[t]) / (2.0 * h);
                    assert!((fd - gpsi[t][axis]).abs() < 1e-7, "psi {t} axis {axis}: {fd} vs {}", gpsi[t][axis]);
                }
            }
        }
    }

    #[test]
    fn rejects_outside_and_near_boundary() {
        let cage = cube();
        assert!(matches!(
            compute_tables(&cage, &[Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)]),
            Err(GreenError::PointOutsideCage(1))
        ));
        assert!(matches!(
            compute_tables(&cage, &[Vector3::new(1.0 - 1e-8, 0.1, 0.2)]),
            Err(GreenError::NearBoundary(0))
        ));
    }

    #[test]
    fn scaled_normals_adjoint_matches_fd() {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 1);
        let tables = compute_tables(&cage, &[Vector3::zeros()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut def = DeformedCage::rest(&cage);
        for v in &mut def.vertices {
            *v += Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        }
        let gb: Vec<Vector3<f64>> = (0..cage.num_faces())
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let loss = |d: &DeformedCage| -> f64 { scaled_normals(&tables, d).iter().zip(&gb).map(|(b, g)| b.dot(g)).sum() };
        let grad = scaled_normals_adjoint(&tables, &def, &gb);
        let h = 1e-6;
        for v in [0, 5, 17, 41] {
            for axis in 0..3 {
                let mut p = def.clone();
                p.vertices[v][axis] += h;
                let mut m = def.clone();
                m.vertices[v][axis] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - grad[v][axis]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn cache_round_trip() {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 1);
        let pts = vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(-0.2, 0.0, 0.1)];
        let tables = compute_tables(&cage, &pts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        save_tables(&tables, &tables_key(&cage, &pts), &path).unwrap();
        let back = load_tables(&path, &cage, &pts).unwrap().unwrap();
        assert_eq!(back.phi, tables.phi);
        assert_eq!(back.grad_psi, tables.grad_psi);
        assert!(load_tables(&path, &cage, &pts[..1]).unwrap().is_none());
    }

    /// Centroid-rule quadrature of the two layer potentials on a subdivided
    /// face, written independently of the closed forms.
    pub(crate) fn quadrature(cage: &CageMesh, eta: &Vector3<f64>, levels: u32) -> (Vec<f64>, Vec<f64>) {
        let mut phi = vec![0.0; cage.num_vertices()];
        let mut psi = vec![0.0; cage.num_faces()];
        let k = 1usize << levels;
        for (t, f) in cage.faces.iter().enumerate() {
            let [a, b, c] = f.map(|i| cage.vertices[i]);
            let n = cage.face_normals[t];
            let sub_area = cage.face_areas[t] / (k * k) as f64;
            // barycentric lattice: up- and down-pointing sub-triangles
            for i in 0..k {
                for j in 0..k - i {
                    let mut cents = vec![((i as f64 + 1.0 / 3.0), (j as f64 + 1.0 / 3.0))];
                    if i + j + 1 < k {
                        cents.push((i as f64 + 2.0 / 3.0, j as f64 + 2.0 / 3.0));
                    }
                    for (s, r) in cents {
                        let (l1, l2) = (s / k as f64, r / k as f64);
                        let l0 = 1.0 - l1 - l2;
                        let q = a * l0 + b * l1 + c * l2;
                        let d = q - eta;
                        let dist = d.norm();
                        psi[t] += sub_area / (4.0 * PI * dist);
                        let dl = sub_area * n.dot(&d) / (4.0 * PI * dist.powi(3));
                        phi[f[0]] += l0 * dl;
                        phi[f[1]] += l1 * dl;
                        phi[f[2]] += l2 * dl;
                    }
                }
            }
        }
        (phi, psi)
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let p = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
            let (phi, psi, _, _) = point_coordinates(&cage, &p);
            let (qphi, qpsi) = quadrature(&cage, &p, 6);
            for (a, b) in phi.iter().zip(&qphi).chain(psi.iter().zip(&qpsi)) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn similarity_maps_are_reproduced() {
        let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 2);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1).into_inner();
        let a = rot * 1.7;
        let t = Vector3::new(0.5, -2.0, 3.0);
        let pts = vec![Vector3::new(0.1, 0.2, -0.3), Vector3::new(-0.5, 0.1, 0.2), Vector3::zeros()];
        let tables = compute_tables(&cage, &pts).unwrap();
        let def = DeformedCage {
            vertices: cage.vertices.iter().map(|v| a * v + t).collect(),
        };
        let mapped = evaluate_map(&tables, &def).unwrap();
        let jac = evaluate_jacobian(&tables, &def).unwrap();
        for ((m, p), j) in mapped.iter().zip(&pts).zip(&jac) {
            assert!((m - (a * p + t)).norm() < 1e-9);
            assert!((j - a).norm() < 1e-8);
        }
        assert!(matches!(
            evaluate_map(&tables, &DeformedCage { vertices: vec![Vector3::zeros(); 3] }),
            Err(GreenError::ConnectivityMismatch { .. })
        ));
    }
}
