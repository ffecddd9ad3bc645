//! Tile-based splat rasterizer with reverse-mode gradients.
//!
//! Splats are projected with the first-order (affine) approximation of the
//! perspective map at their centre, sorted front to back once per frame, and
//! composited per pixel:
//!
//! ```text
//! a_k = opacity_k · exp(−½ Δᵀ Σ₂⁻¹ Δ)     (zero when Δᵀ Σ₂⁻¹ Δ > 9)
//! A   = 1 − Π_k (1 − a_k)
//! C   = Σ_k c_k a_k Π_{j<k} (1 − a_j) + bg · Π_k (1 − a_k)
//! ```
//!
//! The backward pass walks each pixel's list back to front carrying the
//! colour still to come, so it never divides by a transmittance.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage as Rgb8};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deform::DeformedSplats;
use crate::splat::SplatCloud;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid view: {0}")]
    ViewInvalid(String),
    #[error("image size mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const TILE: usize = 16;
/// Squared Mahalanobis radius of the footprint (3σ).
pub const CUTOFF_SQ: f64 = 9.0;
const NEAR: f64 = 1e-2;
/// Zeroth-order spherical-harmonic constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub fn sh_to_rgb(dc: &Vector3<f64>) -> Vector3<f64> {
    (dc * SH_C0).add_scalar(0.5).map(|x| x.clamp(0.0, 1.0))
}

pub fn rgb_to_sh(rgb: &Vector3<f64>) -> Vector3<f64> {
    rgb.add_scalar(-0.5) / SH_C0
}

/// Orbit camera around `look_at`. Elevation 0 / azimuth 0 puts the camera on
/// +z looking toward −z, with +y up; azimuth turns about +y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub elevation: f64,
    pub azimuth: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub look_at: [f64; 3],
}

impl Default for CameraView {
    fn default() -> Self {
        Self {
            elevation: 0.0,
            azimuth: 0.0,
            radius: 4.0,
            fov_y: 40.0,
            width: 256,
            height: 256,
            look_at: [0.0; 3],
        }
    }
}

impl CameraView {
    pub fn validate(&self) -> Result<(), RasterError> {
        let bad = |m: String| Err(RasterError::ViewInvalid(m));
        if !(16..=2048).contains(&self.width) || !(16..=2048).contains(&self.height) {
            return bad(format!("size {}x{} outside [16, 2048]", self.width, self.height));
        }
        if !(self.fov_y > 10.0 && self.fov_y < 120.0) {
            return bad(format!("fov_y {} outside (10, 120)", self.fov_y));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return bad(format!("radius {} must be positive", self.radius));
        }
        if !(self.elevation.is_finite() && self.azimuth.is_finite() && self.look_at.iter().all(|x| x.is_finite())) {
            return bad("non-finite angle or target".into());
        }
        if (self.elevation.abs() - 90.0).abs() < 1e-6 || self.elevation.abs() > 90.0 {
            return bad(format!("elevation {} must lie strictly inside (-90, 90)", self.elevation));
        }
        Ok(())
    }

    pub fn with_angles(&self, elevation: f64, azimuth: f64) -> Self {
        Self {
            elevation,
            azimuth,
            ..*self
        }
    }

    pub fn look_at(&self) -> Vector3<f64> {
        Vector3::from(self.look_at)
    }

    pub fn position(&self) -> Vector3<f64> {
        let (el, az) = (self.elevation.to_radians(), self.azimuth.to_radians());
        self.look_at() + Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * self.radius
    }

    /// Rows are the camera right, up and forward axes in world coordinates.
    pub fn rotation(&self) -> Matrix3<f64> {
        let f = (self.look_at() - self.position()).normalize();
        let r = f.cross(&Vector3::y()).normalize();
        let u = r.cross(&f);
        Matrix3::from_rows(&[r.transpose(), u.transpose(), f.transpose()])
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y.to_radians()).tan()
    }

    /// Camera placed so a sphere of `radius` around `center` fills about
    /// `fill` of the vertical field of view.
    pub fn framing(center: Vector3<f64>, radius: f64, fill: f64, width: usize, height: usize) -> Self {
        let fov_y: f64 = 40.0;
        let dist = radius / (fill * (0.5 * fov_y.to_radians()).tan());
        Self {
            elevation: 0.0,
            azimuth: 0.0,
            radius: dist,
            fov_y,
            width,
            height,
            look_at: center.into(),
        }
    }

    /// Pixel coordinates of a world point (pixel centres at +0.5).
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let t = self.rotation() * (p - self.position());
        if t.z <= NEAR {
            return None;
        }
        let f = self.focal();
        Some(Vector2::new(0.5 * self.width as f64 + f * t.x / t.z, 0.5 * self.height as f64 - f * t.y / t.z))
    }
}

/// Single-channel image in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteMask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl SilhouetteMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Intersection over union after thresholding both masks at 0.5.
    pub fn iou(&self, other: &SilhouetteMask) -> f64 {
        let (mut inter, mut uni) = (0usize, 0usize);
        for (a, b) in self.pixels.iter().zip(&other.pixels) {
            let (a, b) = (*a >= 0.5, *b >= 0.5);
            inter += (a && b) as usize;
            uni += (a || b) as usize;
        }
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }

    pub fn to_png(&self) -> Vec<u8> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([(self.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
        out.into_inner()
    }

    /// Decodes any PNG; colour images are reduced to luma.
    pub fn from_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| RasterError::Image(e.to_string()))?
            .into_luma8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        Ok(std::fs::write(path, self.to_png())?)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        Self::from_png(&std::fs::read(path)?)
    }

    /// u32 width, u32 height, then little-endian f32 pixels.
    pub fn to_f32_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.pixels.len());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_raw(bytes: &[u8]) -> Result<Self, RasterError> {
        if bytes.len() < 8 {
            return Err(RasterError::Image("raw mask too short".into()));
        }
        let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * w * h {
            return Err(RasterError::Image("raw mask size mismatch".into()));
        }
        Ok(Self {
            width: w,
            height: h,
            pixels: bytes[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        })
    }
}

/// Linear RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vector3<f64>>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, c: Vector3<f64>) -> Self {
        Self {
            width,
            height,
            pixels: vec![c; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        self.pixels[y * self.width + x]
    }

    pub fn to_png(&self) -> Vec<u8> {
        let img = Rgb8::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = self.get(x as usize, y as usize);
            Rgb([0, 1, 2].map(|k| (c[k].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
        out.into_inner()
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| RasterError::Image(e.to_string()))?
            .into_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img
                .pixels()
                .map(|p| Vector3::new(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 255.0)
                .collect(),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        Ok(std::fs::write(path, self.to_png())?)
    }
}

/// Per-splat appearance that the renderer needs besides geometry.
#[derive(Debug, Clone)]
pub struct Appearance {
    pub opacity: Vec<f64>,
    pub rgb: Vec<Vector3<f64>>,
}

impl Appearance {
    pub fn of(cloud: &SplatCloud) -> Self {
        Self {
            opacity: cloud.splats.iter().map(|s| s.opacity).collect(),
            rgb: cloud.splats.iter().map(|s| sh_to_rgb(&s.color)).collect(),
        }
    }
}

/// Geometry plus appearance, borrowed for one render.
#[derive(Clone, Copy)]
pub struct SplatsRef<'a> {
    pub mu: &'a [Vector3<f64>],
    pub sigma: &'a [Matrix3<f64>],
    pub opacity: &'a [f64],
    pub rgb: &'a [Vector3<f64>],
}

impl<'a> SplatsRef<'a> {
    pub fn new(d: &'a DeformedSplats, a: &'a Appearance) -> Self {
        Self {
            mu: &d.mu_prime,
            sigma: &d.sigma_prime,
            opacity: &a.opacity,
            rgb: &a.rgb,
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Projected {
    idx: usize,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    cam: Vector3<f64>,
    /// d(screen)/d(world) at the centre.
    m: Matrix2x3<f64>,
    lo: [usize; 2],
    hi: [usize; 2],
}

/// Projection, sort and tile binning for one view; reused by the adjoint.
pub struct Frame {
    view: CameraView,
    rot: Matrix3<f64>,
    focal: f64,
    proj: Vec<Projected>,
    tiles_x: usize,
    /// Front-to-back indices into `proj` per tile.
    tiles: Vec<Vec<u32>>,
}

impl Frame {
    pub fn new(splats: SplatsRef<'_>, view: &CameraView) -> Result<Self, RasterError> {
        view.validate()?;
        let rot = view.rotation();
        let pos = view.position();
        let focal = view.focal();
        let (w, h) = (view.width, view.height);
        let mut proj: Vec<(f64, Projected)> = (0..splats.len())
            .into_par_iter()
            .filter_map(|i| {
                let t = rot * (splats.mu[i] - pos);
                if !(t.z > NEAR) {
                    return None;
                }
                let jc = Matrix2x3::new(focal / t.z, 0.0, -focal * t.x / (t.z * t.z), 0.0, -focal / t.z, focal * t.y / (t.z * t.z));
                let m = jc * rot;
                let cov2 = m * splats.sigma[i] * m.transpose();
                let cov2 = (cov2 + cov2.transpose()) * 0.5;
                let det = cov2.determinant();
                if !(det > 0.0) || !(cov2[(0, 0)] > 0.0) {
                    return None;
                }
                let conic = cov2.try_inverse()?;
                let mean = Vector2::new(0.5 * w as f64 + focal * t.x / t.z, 0.5 * h as f64 - focal * t.y / t.z);
                let rx = 3.0 * cov2[(0, 0)].sqrt();
                let ry = 3.0 * cov2[(1, 1)].sqrt();
                // pixels whose centre (p + 0.5) lies within the 3σ box
                let x0 = (mean.x - rx - 0.5).ceil().max(0.0);
                let x1 = (mean.x + rx - 0.5).floor().min(w as f64 - 1.0);
                let y0 = (mean.y - ry - 0.5).ceil().max(0.0);
                let y1 = (mean.y + ry - 0.5).floor().min(h as f64 - 1.0);
                if !(x0 <= x1 && y0 <= y1) {
                    return None;
                }
                Some((
                    t.z,
                    Projected {
                        idx: i,
                        mean,
                        conic,
                        cam: t,
                        m,
                        lo: [x0 as usize, y0 as usize],
                        hi: [x1 as usize, y1 as usize],
                    },
                ))
            })
            .collect();
        proj.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.idx.cmp(&b.1.idx)));
        let proj: Vec<Projected> = proj.into_iter().map(|(_, p)| p).collect();
        let tiles_x = w.div_ceil(TILE);
        let tiles_y = h.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (k, p) in proj.iter().enumerate() {
            for ty in p.lo[1] / TILE..=p.hi[1] / TILE {
                for tx in p.lo[0] / TILE..=p.hi[0] / TILE {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Ok(Self {
            view: *view,
            rot,
            focal,
            proj,
            tiles_x,
            tiles,
        })
    }

    pub fn view(&self) -> &CameraView {
        &self.view
    }

    /// Number of splats that reach at least one pixel.
    pub fn num_visible(&self) -> usize {
        self.proj.len()
    }

    fn tile_pixels(&self, t: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let (w, h) = (self.view.width, self.view.height);
        (ty * TILE..((ty + 1) * TILE).min(h)).flat_map(move |y| (tx * TILE..((tx + 1) * TILE).min(w)).map(move |x| (x, y)))
    }

    #[inline]
    fn footprint(p: &Projected, x: usize, y: usize) -> Option<(f64, Vector2<f64>)> {
        if x < p.lo[0] || x > p.hi[0] || y < p.lo[1] || y > p.hi[1] {
            return None;
        }
        let d = Vector2::new(x as f64 + 0.5, y as f64 + 0.5) - p.mean;
        let q = d.dot(&(p.conic * d));
        if q > CUTOFF_SQ {
            return None;
        }
        Some(((-0.5 * q).exp(), d))
    }

    /// Alpha and colour over `background`.
    pub fn render(&self, splats: SplatsRef<'_>, background: Vector3<f64>) -> (SilhouetteMask, RgbImage) {
        let (w, h) = (self.view.width, self.view.height);
        let per_tile: Vec<Vec<(usize, f64, Vector3<f64>)>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                self.tile_pixels(t)
                    .map(|(x, y)| {
                        let mut trans = 1.0;
                        let mut c = Vector3::zeros();
                        for &k in &self.tiles[t] {
                            let p = &self.proj[k as usize];
                            if let Some((g, _)) = Self::footprint(p, x, y) {
                                let a = splats.opacity[p.idx] * g;
                                c += splats.rgb[p.idx] * (a * trans);
                                trans *= 1.0 - a;
                            }
                        }
                        (y * w + x, 1.0 - trans, c + background * trans)
                    })
                    .collect()
            })
            .collect();
        let mut mask = SilhouetteMask::zeros(w, h);
        let mut img = RgbImage::filled(w, h, background);
        for tile in per_tile {
            for (i, a, c) in tile {
                mask.pixels[i] = a;
                img.pixels[i] = c;
            }
        }
        (mask, img)
    }

    /// Gradients on μ and Σ (world space) from per-pixel gradients on the
    /// alpha and/or colour outputs of [`Frame::render`].
    pub fn adjoint(
        &self,
        splats: SplatsRef<'_>,
        background: Vector3<f64>,
        grad_alpha: Option<&[f64]>,
        grad_rgb: Option<&[Vector3<f64>]>,
    ) -> (Vec<Vector3<f64>>, Vec<Matrix3<f64>>) {
        let w = self.view.width;
        // per tile, per listed splat: d/d(mean) and d/d(conic entries a, b, c)
        let per_tile: Vec<Vec<(Vector2<f64>, [f64; 3])>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                let list = &self.tiles[t];
                let mut acc = vec![(Vector2::zeros(), [0.0; 3]); list.len()];
                let mut hits: Vec<(usize, f64, f64, f64, Vector2<f64>)> = Vec::new();
                for (x, y) in self.tile_pixels(t) {
                    let i = y * w + x;
                    let ga = grad_alpha.map_or(0.0, |g| g[i]);
                    let gc = grad_rgb.map_or(Vector3::zeros(), |g| g[i]);
                    if ga == 0.0 && gc == Vector3::zeros() {
                        continue;
                    }
                    hits.clear();
                    let mut trans = 1.0;
                    for (slot, &k) in list.iter().enumerate() {
                        let p = &self.proj[k as usize];
                        if let Some((g, d)) = Self::footprint(p, x, y) {
                            let a = splats.opacity[p.idx] * g;
                            hits.push((slot, a, g, trans, d));
                            trans *= 1.0 - a;
                        }
                    }
                    // colour and alpha still to come behind the current splat
                    let mut rest_c = background;
                    let mut rest_a = 0.0;
                    for &(slot, a, g, t_before, d) in hits.iter().rev() {
                        let p = &self.proj[list[slot] as usize];
                        let c = splats.rgb[p.idx];
                        let dl_da = t_before * ((c - rest_c).dot(&gc) + (1.0 - rest_a) * ga);
                        rest_c = c * a + rest_c * (1.0 - a);
                        rest_a = a + rest_a * (1.0 - a);
                        let dl_dg = dl_da * splats.opacity[p.idx];
                        let e = &mut acc[slot];
                        e.0 += p.conic * d * (dl_dg * g);
                        let s = -0.5 * dl_dg * g;
                        e.1[0] += s * d.x * d.x;
                        e.1[1] += s * 2.0 * d.x * d.y;
                        e.1[2] += s * d.y * d.y;
                    }
                }
                acc
            })
            .collect();
        let mut g_mean = vec![Vector2::zeros(); self.proj.len()];
        let mut g_conic = vec![[0.0; 3]; self.proj.len()];
        for (t, acc) in per_tile.into_iter().enumerate() {
            for (slot, (gm, gq)) in acc.into_iter().enumerate() {
                let k = self.tiles[t][slot] as usize;
                g_mean[k] += gm;
                for j in 0..3 {
                    g_conic[k][j] += gq[j];
                }
            }
        }
        let mut g_mu = vec![Vector3::zeros(); splats.len()];
        let mut g_sigma = vec![Matrix3::zeros(); splats.len()];
        let per_splat: Vec<(usize, Vector3<f64>, Matrix3<f64>)> = self
            .proj
            .par_iter()
            .enumerate()
            .map(|(k, p)| {
                let (gm, gq) = (g_mean[k], g_conic[k]);
                let g_q = Matrix2::new(gq[0], 0.5 * gq[1], 0.5 * gq[1], gq[2]);
                let g_cov2 = -(p.conic * g_q * p.conic);
                let sigma = &splats.sigma[p.idx];
                let g_sigma = p.m.transpose() * g_cov2 * p.m;
                let g_m = (g_cov2 + g_cov2.transpose()) * p.m * sigma;
                let g_jc = g_m * self.rot.transpose();
                let f = self.focal;
                let (x, y, z) = (p.cam.x, p.cam.y, p.cam.z);
                let (z2, z3) = (z * z, z * z * z);
                let mut g_t = Vector3::new(gm.x * f / z, -gm.y * f / z, -gm.x * f * x / z2 + gm.y * f * y / z2);
                g_t.x += g_jc[(0, 2)] * (-f / z2);
                g_t.y += g_jc[(1, 2)] * (f / z2);
                g_t.z += g_jc[(0, 0)] * (-f / z2)
                    + g_jc[(0, 2)] * (2.0 * f * x / z3)
                    + g_jc[(1, 1)] * (f / z2)
                    + g_jc[(1, 2)] * (-2.0 * f * y / z3);
                (p.idx, self.rot.transpose() * g_t, g_sigma)
            })
            .collect();
        for (i, gm, gs) in per_splat {
            g_mu[i] = gm;
            g_sigma[i] = gs;
        }
        (g_mu, g_sigma)
    }
}

pub fn render_silhouette(splats: SplatsRef<'_>, view: &CameraView) -> Result<SilhouetteMask, RasterError> {
    Ok(Frame::new(splats, view)?.render(splats, Vector3::zeros()).0)
}

pub fn render_color(splats: SplatsRef<'_>, view: &CameraView, background: Vector3<f64>) -> Result<RgbImage, RasterError> {
    Ok(Frame::new(splats, view)?.render(splats, background).1)
}

/// Convenience: gradients on μ′ and Σ′ from a per-pixel alpha gradient.
pub fn silhouette_adjoint(
    splats: SplatsRef<'_>,
    view: &CameraView,
    upstream: &[f64],
) -> Result<(Vec<Vector3<f64>>, Vec<Matrix3<f64>>), RasterError> {
    let frame = Frame::new(splats, view)?;
    if upstream.len() != view.width * view.height {
        return Err(RasterError::DimensionMismatch {
            expected: (view.width, view.height),
            got: (upstream.len(), 1),
        });
    }
    Ok(frame.adjoint(splats, Vector3::zeros(), Some(upstream), None))
}
