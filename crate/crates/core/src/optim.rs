//! Silhouette loss, guidance views and the Adam loop over cage parameters.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cage::{CageMesh, DeformedCage};
use crate::deform::{transport, transport_adjoint, DeformedSplats};
use crate::green::{compute_tables, CoordinateTables, GreenError};
use crate::guidance::{quantize, GuidanceError, GuidanceProvider, GuidanceRequest};
use crate::jacobian::{build_poisson, save_params, DeformParams, JacobianError, Parameterization, PoissonSystem};
use crate::raster::{Appearance, CameraView, Frame, RasterError, RgbImage, SilhouetteMask, SplatsRef};
use crate::splat::SplatCloud;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("mask sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("NaN detected at iteration {iteration} in {stage}")]
    NaNDetected { iteration: usize, stage: String },
    #[error("job cancelled after {0} iterations")]
    Cancelled(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Green(#[from] GreenError),
    #[error(transparent)]
    Jacobian(#[from] JacobianError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Splat(#[from] crate::splat::SplatError),
    #[error(transparent)]
    Cage(#[from] crate::cage::CageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Weight of the silhouette loss.
    pub alpha: f64,
    pub num_random_views: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    /// Multiplier on guidance gradients; 0 skips guidance entirely.
    pub guidance_weight: f64,
    pub parameterization: Parameterization,
    /// Elevation range of the random guidance views, degrees.
    pub elevation_range: (f64, f64),
    pub checkpoint_every: usize,
    pub prompt: String,
    /// Background of the colour renders sent for guidance.
    pub background: [f64; 3],
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 0.002,
            alpha: 10000.0,
            num_random_views: 4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            guidance_weight: 1.0,
            parameterization: Parameterization::Decomposed,
            elevation_range: (-10.0, 45.0),
            checkpoint_every: 100,
            prompt: String::new(),
            background: [1.0; 3],
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.guidance_weight >= 0.0) {
            return bad("guidance_weight must be non-negative");
        }
        let (lo, hi) = self.elevation_range;
        if !(lo <= hi && lo > -90.0 && hi < 90.0) {
            return bad("elevation_range must be ordered and inside (-90, 90)");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, OptimError> {
        let c: Self = toml::from_str(text).map_err(|e| OptimError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// One-line summary of the optimizer hyperparameters.
    pub fn echo(&self) -> String {
        format!(
            "iterations={} lr={} alpha={} views={} betas=({}, {}) eps={:e} seed={} guidance_weight={} param={}",
            self.iterations,
            self.learning_rate,
            self.alpha,
            self.num_random_views,
            self.adam_betas.0,
            self.adam_betas.1,
            self.adam_eps,
            self.seed,
            self.guidance_weight,
            self.parameterization
        )
    }
}

/// Σ (rendered − target)².
pub fn silhouette_loss(rendered: &SilhouetteMask, target: &SilhouetteMask) -> Result<f64, OptimError> {
    if rendered.dims() != target.dims() {
        return Err(OptimError::DimensionMismatch(rendered.dims(), target.dims()));
    }
    Ok(rendered.pixels.iter().zip(&target.pixels).map(|(r, t)| (r - t) * (r - t)).sum())
}

/// 2 (rendered − target) per pixel.
pub fn silhouette_loss_grad(rendered: &SilhouetteMask, target: &SilhouetteMask) -> Vec<f64> {
    rendered.pixels.iter().zip(&target.pixels).map(|(r, t)| 2.0 * (r - t)).collect()
}

/// Random views around the sketch view's target; only the angles change.
pub fn sample_views(sketch_view: &CameraView, n: usize, seed: u64, elevation_range: (f64, f64)) -> Vec<CameraView> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let azim = rng.random_range(0.0..360.0);
            let (lo, hi) = elevation_range;
            let elev = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            sketch_view.with_angles(elev, azim)
        })
        .collect()
}

/// Even-odd fill of a closed polygon given in pixel coordinates.
pub fn fill_polygon(points: &[[f64; 2]], width: usize, height: usize) -> SilhouetteMask {
    let mut m = SilhouetteMask::zeros(width, height);
    if points.len() < 3 {
        return m;
    }
    for y in 0..height {
        let py = y as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..points.len() {
            let [x0, y0] = points[i];
            let [x1, y1] = points[(i + 1) % points.len()];
            if (y0 <= py) != (y1 <= py) {
                xs.push(x0 + (py - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            for x in 0..width {
                let px = x as f64 + 0.5;
                if px >= pair[0] && px < pair[1] {
                    m.pixels[y * width + x] = 1.0;
                }
            }
        }
    }
    m
}

/// Binarizes a sketch mask at 0.5 and softens it with a 1-pixel Gaussian.
pub fn target_from_sketch(mask: &SilhouetteMask) -> SilhouetteMask {
    let bin: Vec<Vector3<f64>> = mask
        .pixels
        .iter()
        .map(|p| Vector3::repeat(if *p >= 0.5 { 1.0 } else { 0.0 }))
        .collect();
    let blurred = crate::guidance::gaussian_blur(&bin, mask.width, mask.height, 1.0);
    SilhouetteMask {
        width: mask.width,
        height: mask.height,
        pixels: blurred.iter().map(|v| v.x.clamp(0.0, 1.0)).collect(),
    }
}

/// Everything that depends only on the rest scene and cage.
pub struct DeformSetup {
    pub cage: CageMesh,
    pub system: PoissonSystem,
    pub tables: CoordinateTables,
    pub rest_covariances: Vec<Matrix3<f64>>,
    pub appearance: Appearance,
}

impl DeformSetup {
    pub fn new(cloud: &SplatCloud, cage: CageMesh) -> Result<Self, OptimError> {
        let tables = compute_tables(&cage, &cloud.centroids())?;
        Self::with_tables(cloud, cage, tables)
    }

    pub fn with_tables(cloud: &SplatCloud, cage: CageMesh, tables: CoordinateTables) -> Result<Self, OptimError> {
        Ok(Self {
            system: build_poisson(&cage)?,
            cage,
            tables,
            rest_covariances: cloud.covariances(),
            appearance: Appearance::of(cloud),
        })
    }

    pub fn deform(&self, params: &DeformParams) -> Result<(DeformedCage, DeformedSplats), OptimError> {
        let cage = params.realize(&self.system)?;
        let splats = transport(&self.rest_covariances, &self.tables, &cage)?;
        Ok((cage, splats))
    }

    pub fn render_silhouette(&self, splats: &DeformedSplats, view: &CameraView) -> Result<SilhouetteMask, OptimError> {
        let s = SplatsRef::new(splats, &self.appearance);
        Ok(Frame::new(s, view)?.render(s, Vector3::zeros()).0)
    }

    pub fn render_color(&self, splats: &DeformedSplats, view: &CameraView, bg: Vector3<f64>) -> Result<RgbImage, OptimError> {
        let s = SplatsRef::new(splats, &self.appearance);
        Ok(Frame::new(s, view)?.render(s, bg).1)
    }
}

/// The sketch-view objective of one optimization job.
#[derive(Debug, Clone)]
pub struct DeformJob {
    pub sketch_view: CameraView,
    pub target_mask: SilhouetteMask,
    pub config: OptimConfig,
}

/// Losses and gradient at one parameter vector.
#[derive(Debug, Clone)]
pub struct GradientEval {
    pub grad: Vec<f64>,
    pub l_sil: f64,
    pub l_guidance: f64,
    pub l_total: f64,
    pub mask: SilhouetteMask,
    pub inverted_splats: usize,
    pub flipped_faces: usize,
}

fn check_finite<'a>(it: impl IntoIterator<Item = &'a f64>, iteration: usize, stage: &str) -> Result<(), OptimError> {
    if it.into_iter().any(|x| !x.is_finite()) {
        return Err(OptimError::NaNDetected {
            iteration,
            stage: stage.into(),
        });
    }
    Ok(())
}

/// Guidance state fixed for a job: provider and reference image.
pub struct GuidanceContext<'a> {
    pub provider: &'a dyn GuidanceProvider,
    pub reference: RgbImage,
}

/// α ∇L_sil at the sketch view plus the guidance gradients of
/// `num_random_views` random views, chained down to the parameters.
pub fn total_gradient(
    setup: &DeformSetup,
    job: &DeformJob,
    params: &DeformParams,
    iteration: usize,
    guidance: Option<&GuidanceContext<'_>>,
) -> Result<GradientEval, OptimError> {
    let cfg = &job.config;
    let (cage_def, splats) = setup.deform(params)?;
    check_finite(cage_def.vertices.iter().flat_map(|v| v.iter()), iteration, "cage solve")?;
    check_finite(splats.mu_prime.iter().flat_map(|v| v.iter()), iteration, "transport")?;
    let sref = SplatsRef::new(&splats, &setup.appearance);

    let use_guidance = guidance.is_some() && cfg.guidance_weight > 0.0 && cfg.num_random_views > 0;
    let views = if use_guidance {
        sample_views(&job.sketch_view, cfg.num_random_views, view_seed(cfg.seed, iteration), cfg.elevation_range)
    } else {
        Vec::new()
    };

    // view 0 is the sketch view; the rest are guidance views
    type ViewOut = (f64, f64, Option<SilhouetteMask>, Vec<Vector3<f64>>, Vec<Matrix3<f64>>);
    let outputs: Vec<Result<ViewOut, OptimError>> = (0..=views.len())
        .into_par_iter()
        .map(|k| -> Result<ViewOut, OptimError> {
            if k == 0 {
                let frame = Frame::new(sref, &job.sketch_view)?;
                let (mask, _) = frame.render(sref, Vector3::zeros());
                let l_sil = silhouette_loss(&mask, &job.target_mask)?;
                if cfg.alpha == 0.0 {
                    let n = splats.len();
                    return Ok((l_sil, 0.0, Some(mask), vec![Vector3::zeros(); n], vec![Matrix3::zeros(); n]));
                }
                let g: Vec<f64> = silhouette_loss_grad(&mask, &job.target_mask).iter().map(|x| x * cfg.alpha).collect();
                let (gm, gs) = frame.adjoint(sref, Vector3::zeros(), Some(&g), None);
                return Ok((l_sil, 0.0, Some(mask), gm, gs));
            }
            let ctx = guidance.expect("guidance views imply a provider");
            let view = &views[k - 1];
            let bg = Vector3::from(cfg.background);
            let frame = Frame::new(sref, view)?;
            let (_, img) = frame.render(sref, bg);
            let req = GuidanceRequest {
                rendered_image: quantize(&img),
                reference_image: quantize(&ctx.reference),
                delta_elev: view.elevation - job.sketch_view.elevation,
                delta_azim: view.azimuth - job.sketch_view.azimuth,
                prompt: cfg.prompt.clone(),
                timestep_seed: view_seed(cfg.seed, iteration) ^ (k as u64),
            };
            let resp = ctx.provider.sds_gradient(&req)?;
            let w = cfg.guidance_weight * resp.scale;
            let g: Vec<Vector3<f64>> = resp
                .grad_image
                .iter()
                .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) * w)
                .collect();
            let (gm, gs) = frame.adjoint(sref, bg, None, Some(&g));
            Ok((0.0, resp.loss.unwrap_or(0.0) * cfg.guidance_weight, None, gm, gs))
        })
        .collect();

    let n = splats.len();
    let mut g_mu = vec![Vector3::zeros(); n];
    let mut g_sigma = vec![Matrix3::zeros(); n];
    let mut l_sil = 0.0;
    let mut l_guid = 0.0;
    let mut mask = None;
    for out in outputs {
        let (ls, lg, m, gm, gs) = out?;
        l_sil += ls;
        l_guid += lg;
        if m.is_some() {
            mask = m;
        }
        for i in 0..n {
            g_mu[i] += gm[i];
            g_sigma[i] += gs[i];
        }
    }
    check_finite(g_mu.iter().flat_map(|v| v.iter()), iteration, "rasterizer adjoint")?;
    let g_cage = transport_adjoint(&setup.rest_covariances, &setup.tables, &cage_def, &splats, &g_mu, &g_sigma);
    check_finite(g_cage.iter().flat_map(|v| v.iter()), iteration, "transport adjoint")?;
    let grad = params.realize_adjoint(&setup.system, &g_cage)?;
    check_finite(&grad, iteration, "cage solve adjoint")?;
    let l_total = cfg.alpha * l_sil + l_guid;
    check_finite([&l_sil, &l_guid], iteration, "loss")?;
    Ok(GradientEval {
        grad,
        l_sil,
        l_guidance: l_guid,
        l_total,
        mask: mask.expect("sketch view always rendered"),
        inverted_splats: splats.inverted().len(),
        flipped_faces: cage_def.flipped_faces(&setup.cage).len(),
    })
}

fn view_seed(seed: u64, iteration: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iteration as u64).wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Adam state for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64, (b1, b2): (f64, f64), eps: f64) {
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub l_sil: f64,
    pub l_guidance: f64,
    pub l_total: f64,
    pub inverted_splats: usize,
    pub flipped_faces: usize,
}

pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from("iteration,l_sil,l_guidance,l_total\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.iteration, r.l_sil, r.l_guidance, r.l_total));
    }
    s
}

/// Hooks into a running optimization.
#[derive(Default)]
pub struct RunControl<'a> {
    pub cancel: Option<&'a AtomicBool>,
    pub progress: Option<&'a (dyn Fn(&IterationRecord, &DeformParams) + Sync)>,
    pub checkpoint_dir: Option<PathBuf>,
    pub initial: Option<DeformParams>,
}

pub struct DeformResult {
    pub params: DeformParams,
    pub cage: DeformedCage,
    pub splats: DeformedSplats,
    pub history: Vec<IterationRecord>,
    pub initial_l_sil: f64,
    pub final_l_sil: f64,
    pub final_mask: SilhouetteMask,
}

fn write_checkpoint(dir: &Path, params: &DeformParams, history: &[IterationRecord]) -> Result<(), OptimError> {
    std::fs::create_dir_all(dir)?;
    save_params(params, dir.join("params.bin"))?;
    let mut f = std::fs::File::create(dir.join("loss.csv"))?;
    f.write_all(history_csv(history).as_bytes())?;
    Ok(())
}

/// Adam on the job's parameterization for `config.iterations` steps.
pub fn run(
    setup: &DeformSetup,
    job: &DeformJob,
    provider: Option<&dyn GuidanceProvider>,
    control: RunControl<'_>,
) -> Result<DeformResult, OptimError> {
    let cfg = &job.config;
    cfg.validate()?;
    if job.target_mask.dims() != (job.sketch_view.width, job.sketch_view.height) {
        return Err(OptimError::DimensionMismatch(
            job.target_mask.dims(),
            (job.sketch_view.width, job.sketch_view.height),
        ));
    }
    let mut params = control
        .initial
        .clone()
        .unwrap_or_else(|| DeformParams::identity(cfg.parameterization, &setup.system));
    let use_guidance = cfg.guidance_weight > 0.0 && cfg.num_random_views > 0;
    let ctx = match (provider, use_guidance) {
        (Some(p), true) => {
            let (_, splats) = setup.deform(&params)?;
            let bg = Vector3::from(cfg.background);
            let render = setup.render_color(&splats, &job.sketch_view, bg)?;
            let mask = setup.render_silhouette(&splats, &job.sketch_view)?;
            let reference = p.sketch_to_reference(&render, &mask, &job.target_mask, &cfg.prompt)?;
            Some(GuidanceContext { provider: p, reference })
        }
        _ => None,
    };
    let mut adam = Adam::new(params.values.len());
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut initial_l_sil = None;
    for it in 0..cfg.iterations {
        if control.cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            if let Some(dir) = &control.checkpoint_dir {
                write_checkpoint(dir, &params, &history)?;
            }
            return Err(OptimError::Cancelled(it));
        }
        let eval = total_gradient(setup, job, &params, it, ctx.as_ref())?;
        initial_l_sil.get_or_insert(eval.l_sil);
        let rec = IterationRecord {
            iteration: it,
            l_sil: eval.l_sil,
            l_guidance: eval.l_guidance,
            l_total: eval.l_total,
            inverted_splats: eval.inverted_splats,
            flipped_faces: eval.flipped_faces,
        };
        adam.step(&mut params.values, &eval.grad, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps);
        check_finite(&params.values, it, "adam step")?;
        history.push(rec);
        if let Some(cb) = control.progress {
            cb(&rec, &params);
        }
        if let Some(dir) = &control.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                write_checkpoint(dir, &params, &history)?;
            }
        }
    }
    let (cage, splats) = setup.deform(&params)?;
    let final_mask = setup.render_silhouette(&splats, &job.sketch_view)?;
    let final_l_sil = silhouette_loss(&final_mask, &job.target_mask)?;
    if let Some(dir) = &control.checkpoint_dir {
        write_checkpoint(dir, &params, &history)?;
    }
    Ok(DeformResult {
        params,
        cage,
        splats,
        history,
        initial_l_sil: initial_l_sil.unwrap_or(final_l_sil),
        final_l_sil,
        final_mask,
    })
}

/// Exponential moving average with smoothing 2 / (window + 1).
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    let a = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(prev) => a * v + (1.0 - a) * prev,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}
