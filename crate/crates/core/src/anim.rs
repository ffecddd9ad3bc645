//! Keyframe animation by interpolating deformed cages.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cage::DeformedCage;
use crate::deform::{export_deformed, transport};
use crate::jacobian::{
    matrix_to_rot6, rot6_quaternion, rot6_to_matrix, stretch6_to_matrix, DeformParams, JacobianError, JacobianParams,
    PoissonSystem,
};
use crate::optim::DeformSetup;
use crate::raster::{render_color, CameraView, RasterError, SplatsRef};
use crate::splat::{save_ply, SplatCloud, SplatError};

#[derive(Debug, Error)]
pub enum AnimError {
    #[error("keyframes use different cages ({0} vs {1} faces)")]
    MismatchedCages(usize, usize),
    #[error("need at least two keyframes, got {0}")]
    InsufficientKeyframes(usize),
    #[error("keyframe times must be strictly increasing and lie in [0, 1]")]
    BadTimes,
    #[error("invalid sequence timing: fps {fps}, duration {duration}")]
    BadTiming { fps: f64, duration: f64 },
    #[error(transparent)]
    Jacobian(#[from] JacobianError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Green(#[from] crate::green::GreenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub time: f64,
    pub params: JacobianParams,
    pub cage_def: DeformedCage,
    /// Identifier of the job that produced the keyframe.
    pub label: String,
}

impl Keyframe {
    /// Keyframe from any parameterization; non-decomposed parameters are
    /// converted through the polar decomposition of the realized cage.
    pub fn new(time: f64, params: &DeformParams, system: &PoissonSystem, label: impl Into<String>) -> Result<Self, AnimError> {
        let cage_def = params.realize(system)?;
        let jp = match params.jacobian_params() {
            Some(p) => p,
            None => decompose_cage(system, &cage_def),
        };
        Ok(Self {
            time,
            params: jp,
            cage_def,
            label: label.into(),
        })
    }
}

/// Symmetric polar factor of `m`: m = R S with R a rotation.
fn polar(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let s = r.transpose() * m;
    (r, 0.5 * (s + s.transpose()))
}

/// Decomposed parameters whose solve reproduces `cage_def`.
pub fn decompose_cage(system: &PoissonSystem, cage_def: &DeformedCage) -> JacobianParams {
    let verts = &cage_def.vertices;
    let tangential = system.face_jacobians(verts);
    let mut p = JacobianParams::identity(system.num_faces());
    for (i, (j, f)) in tangential.iter().zip(&system.faces).enumerate() {
        // complete with the deformed normal, scaled to keep the area ratio
        let e = (verts[f[1]] - verts[f[0]]).cross(&(verts[f[2]] - verts[f[0]]));
        let ratio = (0.5 * e.norm() / system.face_area_weights[i]).sqrt();
        let n_def = e.try_normalize(1e-300).unwrap_or(system.rest_normals[i]) * ratio;
        let full = j + n_def * system.rest_normals[i].transpose();
        let (r, s) = polar(&full);
        p.rot6[i] = matrix_to_rot6(&r);
        p.stretch6[i] = [s[(0, 0)], s[(1, 1)], s[(2, 2)], s[(0, 1)], s[(0, 2)], s[(1, 2)]];
    }
    let n = verts.len() as f64;
    let mean: Vector3<f64> = verts.iter().sum::<Vector3<f64>>() / n;
    p.translation = (mean - system.rest_mean()).into();
    p
}

/// Interpolation of the cage between two keyframes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterpMethod {
    /// Slerp of per-face rotations, lerp of stretch, then a Poisson solve.
    #[default]
    Jacobian,
    /// Linear blend of cage vertices.
    Linear,
}

fn face_quat(r: &[f64; 6]) -> UnitQuaternion<f64> {
    rot6_quaternion(r).unwrap_or_else(UnitQuaternion::identity)
}

/// Decomposed parameters between `k0` (s = 0) and `k1` (s = 1).
pub fn interpolate_params(k0: &Keyframe, k1: &Keyframe, s: f64) -> Result<JacobianParams, AnimError> {
    let (a, b) = (&k0.params, &k1.params);
    if a.num_faces() != b.num_faces() || k0.cage_def.vertices.len() != k1.cage_def.vertices.len() {
        return Err(AnimError::MismatchedCages(a.num_faces(), b.num_faces()));
    }
    let mut out = JacobianParams::identity(a.num_faces());
    for i in 0..a.num_faces() {
        let q0 = face_quat(&a.rot6[i]);
        let mut q1 = face_quat(&b.rot6[i]);
        if q0.coords.dot(&q1.coords) < 0.0 {
            q1 = UnitQuaternion::new_unchecked(-q1.into_inner());
        }
        let q = q0.try_slerp(&q1, s, 1e-12).unwrap_or(q0);
        let r = if s == 0.0 {
            rot6_to_matrix(&a.rot6[i]).unwrap_or_else(Matrix3::identity)
        } else if s == 1.0 {
            rot6_to_matrix(&b.rot6[i]).unwrap_or_else(Matrix3::identity)
        } else {
            *q.to_rotation_matrix().matrix()
        };
        out.rot6[i] = matrix_to_rot6(&r);
        for k in 0..6 {
            out.stretch6[i][k] = (1.0 - s) * a.stretch6[i][k] + s * b.stretch6[i][k];
        }
    }
    for k in 0..3 {
        out.translation[k] = (1.0 - s) * a.translation[k] + s * b.translation[k];
    }
    Ok(out)
}

/// Cage at parameter `s` between two keyframes.
pub fn interpolate(
    k0: &Keyframe,
    k1: &Keyframe,
    s: f64,
    system: &PoissonSystem,
    method: InterpMethod,
) -> Result<DeformedCage, AnimError> {
    if k0.params.num_faces() != system.num_faces() {
        return Err(AnimError::MismatchedCages(k0.params.num_faces(), system.num_faces()));
    }
    match method {
        InterpMethod::Jacobian => {
            let p = interpolate_params(k0, k1, s)?;
            Ok(DeformParams::from_jacobian_params(&p).realize(system)?)
        }
        InterpMethod::Linear => {
            if k0.cage_def.vertices.len() != k1.cage_def.vertices.len() {
                return Err(AnimError::MismatchedCages(k0.params.num_faces(), k1.params.num_faces()));
            }
            Ok(DeformedCage {
                vertices: k0
                    .cage_def
                    .vertices
                    .iter()
                    .zip(&k1.cage_def.vertices)
                    .map(|(a, b)| a * (1.0 - s) + b * s)
                    .collect(),
            })
        }
    }
}

/// Angle of the rotation taking face `i` of `a` to face `i` of `b`.
pub fn face_rotation_angle(a: &JacobianParams, b: &JacobianParams, i: usize) -> f64 {
    face_quat(&a.rot6[i]).angle_to(&face_quat(&b.rot6[i]))
}

/// Number of frames for a sequence; the first and last frames sit on the
/// first and last keyframes.
pub fn frame_count(fps: f64, duration: f64) -> Result<usize, AnimError> {
    let n = (fps * duration).round();
    if !(fps > 0.0 && duration > 0.0 && n >= 2.0 && n.is_finite()) {
        return Err(AnimError::BadTiming { fps, duration });
    }
    Ok(n as usize)
}

fn check_keyframes(keys: &[Keyframe]) -> Result<(), AnimError> {
    if keys.len() < 2 {
        return Err(AnimError::InsufficientKeyframes(keys.len()));
    }
    let nf = keys[0].params.num_faces();
    if let Some(k) = keys.iter().find(|k| k.params.num_faces() != nf) {
        return Err(AnimError::MismatchedCages(nf, k.params.num_faces()));
    }
    let ok = keys.windows(2).all(|w| w[0].time < w[1].time) && keys.iter().all(|k| (0.0..=1.0).contains(&k.time));
    if !ok {
        return Err(AnimError::BadTimes);
    }
    Ok(())
}

/// Keyframe pair and local parameter for normalized time `t` in [0, 1].
fn locate(keys: &[Keyframe], t: f64) -> (usize, f64) {
    let t0 = keys[0].time;
    let t1 = keys[keys.len() - 1].time;
    let t = t0 + t * (t1 - t0);
    let seg = keys.windows(2).position(|w| t <= w[1].time).unwrap_or(keys.len() - 2);
    let (a, b) = (keys[seg].time, keys[seg + 1].time);
    (seg, ((t - a) / (b - a)).clamp(0.0, 1.0))
}

/// Cages for every frame of a sequence.
pub fn sequence_cages(
    keys: &[Keyframe],
    frames: usize,
    system: &PoissonSystem,
    method: InterpMethod,
) -> Result<Vec<DeformedCage>, AnimError> {
    check_keyframes(keys)?;
    (0..frames)
        .into_par_iter()
        .map(|f| {
            let t = if frames > 1 { f as f64 / (frames - 1) as f64 } else { 0.0 };
            let (seg, s) = locate(keys, t);
            interpolate(&keys[seg], &keys[seg + 1], s, system, method)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SequenceOptions {
    pub fps: f64,
    pub duration: f64,
    pub view: CameraView,
    pub background: Vector3<f64>,
    pub method: InterpMethod,
    pub write_ply: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestKey {
    pub id: String,
    pub time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub fps: f64,
    pub duration: f64,
    pub method: InterpMethod,
    pub keyframes: Vec<ManifestKey>,
    pub frames: Vec<String>,
    pub ply: Vec<String>,
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

/// Interpolates, transports and renders every frame into `out_dir`.
pub fn render_sequence(
    setup: &DeformSetup,
    source: &SplatCloud,
    keys: &[Keyframe],
    opts: &SequenceOptions,
    out_dir: &Path,
) -> Result<Manifest, AnimError> {
    check_keyframes(keys)?;
    let n = frame_count(opts.fps, opts.duration)?;
    opts.view.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let cages = sequence_cages(keys, n, &setup.system, opts.method)?;
    let written: Vec<Result<(String, Option<String>), AnimError>> = cages
        .par_iter()
        .enumerate()
        .map(|(i, cage)| {
            let splats = transport(&setup.rest_covariances, &setup.tables, cage)?;
            let img = render_color(SplatsRef::new(&splats, &setup.appearance), &opts.view, opts.background)?;
            let name = frame_name(i);
            img.save_png(out_dir.join(&name))?;
            let ply = if opts.write_ply {
                let name = format!("frame_{i:05}.ply");
                save_ply(&export_deformed(source, &splats).cloud, out_dir.join(&name))?;
                Some(name)
            } else {
                None
            };
            Ok((name, ply))
        })
        .collect();
    let mut manifest = Manifest {
        fps: opts.fps,
        duration: opts.duration,
        method: opts.method,
        keyframes: keys
            .iter()
            .map(|k| ManifestKey {
                id: k.label.clone(),
                time: k.time,
            })
            .collect(),
        frames: Vec::with_capacity(n),
        ply: Vec::new(),
    };
    for w in written {
        let (png, ply) = w?;
        manifest.frames.push(png);
        manifest.ply.extend(ply);
    }
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Rotation about `axis` through the rest mean, as decomposed parameters.
pub fn global_rotation(system: &PoissonSystem, axis: &Vector3<f64>, angle: f64) -> JacobianParams {
    let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
    let mut p = JacobianParams::identity(system.num_faces());
    for r6 in &mut p.rot6 {
        *r6 = matrix_to_rot6(r.matrix());
    }
    p
}

/// Uniform scale about the rest mean, as decomposed parameters.
pub fn global_scale(system: &PoissonSystem, factor: f64) -> JacobianParams {
    let mut p = JacobianParams::identity(system.num_faces());
    for s in &mut p.stretch6 {
        let m = stretch6_to_matrix(s) * factor;
        *s = [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(0, 2)], m[(1, 2)]];
    }
    p
}
