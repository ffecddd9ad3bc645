//! External image-space guidance: score-distillation gradients and
//! sketch-conditioned reference images, behind a trait with an HTTP client
//! and a deterministic local mock.

use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::RgbImage as Rgb8;
use nalgebra::{DMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{RgbImage, SilhouetteMask};

/// Largest accepted image side, in pixels.
pub const MAX_IMAGE_SIDE: usize = 2048;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("guidance service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("bad guidance response: {0}")]
    BadResponse(String),
}

/// One score-distillation query. Images are 8-bit, exactly as sent on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceRequest {
    pub rendered_image: Rgb8,
    pub reference_image: Rgb8,
    pub delta_elev: f64,
    pub delta_azim: f64,
    pub prompt: String,
    pub timestep_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceResponse {
    pub width: usize,
    pub height: usize,
    /// ∂L/∂x per pixel and channel, for x in [0, 1].
    pub grad_image: Vec<[f32; 3]>,
    pub scale: f64,
    /// Optional scalar the service may report for logging.
    pub loss: Option<f64>,
}

pub fn quantize(img: &RgbImage) -> Rgb8 {
    Rgb8::from_fn(img.width as u32, img.height as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|k| (c[k].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn dequantize(img: &Rgb8) -> RgbImage {
    RgbImage {
        width: img.width() as usize,
        height: img.height() as usize,
        pixels: img
            .pixels()
            .map(|p| Vector3::new(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 255.0)
            .collect(),
    }
}

fn check_dims(w: usize, h: usize) -> Result<(), GuidanceError> {
    if w == 0 || h == 0 || w > MAX_IMAGE_SIDE || h > MAX_IMAGE_SIDE {
        return Err(GuidanceError::BadResponse(format!("image size {w}x{h} outside 1..={MAX_IMAGE_SIDE}")));
    }
    Ok(())
}

impl GuidanceRequest {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let (w, h) = self.rendered_image.dimensions();
        check_dims(w as usize, h as usize)?;
        if self.reference_image.dimensions() != (w, h) {
            return Err(GuidanceError::BadResponse("rendered and reference images differ in size".into()));
        }
        if !(self.delta_elev.is_finite() && self.delta_azim.is_finite()) {
            return Err(GuidanceError::BadResponse("non-finite viewpoint delta".into()));
        }
        Ok(())
    }
}

pub trait GuidanceProvider: Send + Sync {
    fn sds_gradient(&self, req: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError>;

    /// Reference image at the sketch view. `render_mask` is the silhouette of
    /// `render`; remote services may ignore it.
    fn sketch_to_reference(
        &self,
        render: &RgbImage,
        render_mask: &SilhouetteMask,
        sketch: &SilhouetteMask,
        prompt: &str,
    ) -> Result<RgbImage, GuidanceError>;
}

// ---------------------------------------------------------------------------
// wire format

fn png_b64(img: &Rgb8) -> String {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    B64.encode(out.into_inner())
}

fn png_from_b64(s: &str) -> Result<Rgb8, GuidanceError> {
    let bytes = B64.decode(s).map_err(|e| GuidanceError::BadResponse(format!("base64: {e}")))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map(|i| i.into_rgb8())
        .map_err(|e| GuidanceError::BadResponse(format!("png: {e}")))
}

fn gray_png_b64(m: &SilhouetteMask) -> String {
    B64.encode(m.to_png())
}

#[derive(Serialize, Deserialize)]
struct SdsRequestWire {
    width: usize,
    height: usize,
    delta_elev: f64,
    delta_azim: f64,
    prompt: String,
    timestep_seed: u64,
    rendered_image: String,
    reference_image: String,
}

#[derive(Serialize, Deserialize)]
struct SdsResponseWire {
    width: usize,
    height: usize,
    scale: f64,
    /// base64 of little-endian f32, row-major, 3 channels interleaved
    grad_image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct SketchRequestWire {
    width: usize,
    height: usize,
    prompt: String,
    render: String,
    sketch: String,
}

#[derive(Serialize, Deserialize)]
struct SketchResponseWire {
    width: usize,
    height: usize,
    image: String,
}

pub fn encode_request(req: &GuidanceRequest) -> String {
    serde_json::to_string(&SdsRequestWire {
        width: req.rendered_image.width() as usize,
        height: req.rendered_image.height() as usize,
        delta_elev: req.delta_elev,
        delta_azim: req.delta_azim,
        prompt: req.prompt.clone(),
        timestep_seed: req.timestep_seed,
        rendered_image: png_b64(&req.rendered_image),
        reference_image: png_b64(&req.reference_image),
    })
    .expect("request serializes")
}

pub fn decode_request(s: &str) -> Result<GuidanceRequest, GuidanceError> {
    let w: SdsRequestWire = serde_json::from_str(s).map_err(|e| GuidanceError::BadResponse(e.to_string()))?;
    let req = GuidanceRequest {
        rendered_image: png_from_b64(&w.rendered_image)?,
        reference_image: png_from_b64(&w.reference_image)?,
        delta_elev: w.delta_elev,
        delta_azim: w.delta_azim,
        prompt: w.prompt,
        timestep_seed: w.timestep_seed,
    };
    if req.rendered_image.dimensions() != (w.width as u32, w.height as u32) {
        return Err(GuidanceError::BadResponse("declared size does not match image".into()));
    }
    req.validate()?;
    Ok(req)
}

pub fn encode_response(resp: &GuidanceResponse) -> String {
    let mut raw = Vec::with_capacity(12 * resp.grad_image.len());
    for px in &resp.grad_image {
        for c in px {
            raw.extend_from_slice(&c.to_le_bytes());
        }
    }
    serde_json::to_string(&SdsResponseWire {
        width: resp.width,
        height: resp.height,
        scale: resp.scale,
        grad_image: B64.encode(raw),
        loss: resp.loss,
    })
    .expect("response serializes")
}

pub fn decode_response(s: &str) -> Result<GuidanceResponse, GuidanceError> {
    let w: SdsResponseWire = serde_json::from_str(s).map_err(|e| GuidanceError::BadResponse(e.to_string()))?;
    check_dims(w.width, w.height)?;
    let raw = B64.decode(&w.grad_image).map_err(|e| GuidanceError::BadResponse(format!("base64: {e}")))?;
    if raw.len() != 12 * w.width * w.height {
        return Err(GuidanceError::BadResponse(format!(
            "gradient has {} bytes, expected {}",
            raw.len(),
            12 * w.width * w.height
        )));
    }
    let grad_image: Vec<[f32; 3]> = raw
        .chunks_exact(12)
        .map(|c| [0, 1, 2].map(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())))
        .collect();
    if !w.scale.is_finite() || grad_image.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GuidanceError::BadResponse("non-finite gradient".into()));
    }
    Ok(GuidanceResponse {
        width: w.width,
        height: w.height,
        grad_image,
        scale: w.scale,
        loss: w.loss,
    })
}

// ---------------------------------------------------------------------------
// mock

/// Deterministic stand-in for a diffusion service. Its gradient
/// λ·(x − blur(x)) pulls renders toward their own low-pass version, a mild
/// smoothness prior and nothing more.
#[derive(Debug, Clone)]
pub struct MockGuidance {
    pub lambda: f64,
    pub sigma: f64,
}

impl Default for MockGuidance {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            sigma: 2.0,
        }
    }
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &[Vector3<f64>], w: usize, h: usize, sigma: f64) -> Vec<Vector3<f64>> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[Vector3<f64>], horizontal: bool| -> Vec<Vector3<f64>> {
        let mut out = vec![Vector3::zeros(); w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = Vector3::zeros();
                for (ki, k) in kernel.iter().enumerate() {
                    let o = ki as isize - r;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                    };
                    acc += src[sy * w + sx] * *k;
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

impl GuidanceProvider for MockGuidance {
    fn sds_gradient(&self, req: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        req.validate()?;
        let x = dequantize(&req.rendered_image);
        let blurred = gaussian_blur(&x.pixels, x.width, x.height, self.sigma);
        let grad_image = x
            .pixels
            .iter()
            .zip(&blurred)
            .map(|(a, b)| {
                let g = (a - b) * self.lambda;
                [g.x as f32, g.y as f32, g.z as f32]
            })
            .collect();
        // nominal high-frequency energy, reported for logging only
        let loss = 0.5 * self.lambda * x.pixels.iter().zip(&blurred).map(|(a, b)| (a - b).norm_squared()).sum::<f64>();
        Ok(GuidanceResponse {
            width: x.width,
            height: x.height,
            grad_image,
            scale: 1.0,
            loss: Some(loss),
        })
    }

    fn sketch_to_reference(
        &self,
        render: &RgbImage,
        render_mask: &SilhouetteMask,
        sketch: &SilhouetteMask,
        _prompt: &str,
    ) -> Result<RgbImage, GuidanceError> {
        check_dims(render.width, render.height)?;
        if sketch.dims() != (render.width, render.height) || render_mask.dims() != sketch.dims() {
            return Err(GuidanceError::BadResponse("render and sketch sizes differ".into()));
        }
        let Some(tps) = ThinPlateSpline::between_masks(sketch, render_mask, 64) else {
            return Ok(render.clone());
        };
        Ok(tps.warp_rgb(render))
    }
}

/// 2-D thin-plate spline f(p) = a + A p + Σ w_i U(‖p − s_i‖), U(r) = r² ln r.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    centers: Vec<Vector2<f64>>,
    weights: Vec<Vector2<f64>>,
    affine: [Vector2<f64>; 3],
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Centroid of the pixels at or above 0.5 plus, for `k` equally spaced
/// directions, the farthest point along the ray still inside the mask.
pub fn boundary_samples(mask: &SilhouetteMask, k: usize) -> Option<(Vector2<f64>, Vec<Vector2<f64>>)> {
    let mut c = Vector2::zeros();
    let mut n = 0usize;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) >= 0.5 {
                c += Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                n += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    c /= n as f64;
    let reach = (mask.width + mask.height) as f64;
    let pts = (0..k)
        .map(|j| {
            let t = std::f64::consts::TAU * j as f64 / k as f64;
            let d = Vector2::new(t.cos(), t.sin());
            let mut last = 0.0;
            let mut s = 0.0;
            while s < reach {
                let p = c + d * s;
                if p.x < 0.0 || p.y < 0.0 || p.x >= mask.width as f64 || p.y >= mask.height as f64 {
                    break;
                }
                if mask.get(p.x as usize, p.y as usize) >= 0.5 {
                    last = s;
                }
                s += 0.25;
            }
            c + d * last
        })
        .collect();
    Some((c, pts))
}

impl ThinPlateSpline {
    pub fn fit(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<Self> {
        let n = src.len();
        let mut a = DMatrix::<f64>::zeros(n + 3, n + 3);
        let mut b = DMatrix::<f64>::zeros(n + 3, 2);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = tps_kernel((src[i] - src[j]).norm_squared());
            }
            a[(i, i)] += 1e-9;
            a[(i, n)] = 1.0;
            a[(i, n + 1)] = src[i].x;
            a[(i, n + 2)] = src[i].y;
            a[(n, i)] = 1.0;
            a[(n + 1, i)] = src[i].x;
            a[(n + 2, i)] = src[i].y;
            b[(i, 0)] = dst[i].x;
            b[(i, 1)] = dst[i].y;
        }
        let sol = a.lu().solve(&b)?;
        let row = |i: usize| Vector2::new(sol[(i, 0)], sol[(i, 1)]);
        Some(Self {
            centers: src.to_vec(),
            weights: (0..n).map(row).collect(),
            affine: [row(n), row(n + 1), row(n + 2)],
        })
    }

    /// Maps points on the boundary of `from` onto the boundary of `to`.
    pub fn between_masks(from: &SilhouetteMask, to: &SilhouetteMask, k: usize) -> Option<Self> {
        let (cf, mut pf) = boundary_samples(from, k)?;
        let (ct, mut pt) = boundary_samples(to, k)?;
        pf.push(cf);
        pt.push(ct);
        Self::fit(&pf, &pt)
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let mut out = self.affine[0] + self.affine[1] * p.x + self.affine[2] * p.y;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            out += w * tps_kernel((p - c).norm_squared());
        }
        out
    }

    /// Backward warp: output pixel p samples `src` at f(p).
    fn warp_with<T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>>(
        &self,
        w: usize,
        h: usize,
        src: &[T],
    ) -> Vec<T> {
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let q = self.apply(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5)) - Vector2::new(0.5, 0.5);
                let fx = q.x.clamp(0.0, (w - 1) as f64);
                let fy = q.y.clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
        out
    }

    pub fn warp_rgb(&self, img: &RgbImage) -> RgbImage {
        RgbImage {
            width: img.width,
            height: img.height,
            pixels: self.warp_with(img.width, img.height, &img.pixels),
        }
    }

    pub fn warp_mask(&self, m: &SilhouetteMask) -> SilhouetteMask {
        SilhouetteMask {
            width: m.width,
            height: m.height,
            pixels: self.warp_with(m.width, m.height, &m.pixels),
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP client

/// Blocking HTTP client for `POST /v1/sds` and `POST /v1/sketch2ref`.
#[derive(Debug, Clone)]
pub struct HttpGuidance {
    pub base_url: String,
    pub timeout: Duration,
    /// Delays before each retry; one attempt plus one retry per entry.
    pub backoff: Vec<Duration>,
    agent: ureq::Agent,
}

impl HttpGuidance {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout,
            backoff: [500, 1000, 2000].map(Duration::from_millis).to_vec(),
            agent: config.into(),
        }
    }

    fn post(&self, path: &str, body: &str) -> Result<String, GuidanceError> {
        let url = format!("{}{}", self.base_url, path);
        let mut last = String::new();
        for attempt in 0..=self.backoff.len() {
            if attempt > 0 {
                std::thread::sleep(self.backoff[attempt - 1]);
            }
            match self
                .agent
                .post(&url)
                .header("Content-Type", "application/json")
                .send(body)
            {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .with_config()
                        .limit(256 << 20)
                        .read_to_string()
                        .map_err(|e| GuidanceError::BadResponse(e.to_string()));
                    match status {
                        200..=299 => return text,
                        500..=599 => last = format!("{url}: HTTP {status}"),
                        _ => return Err(GuidanceError::BadResponse(format!("{url}: HTTP {status}"))),
                    }
                }
                Err(e) => last = format!("{url}: {e}"),
            }
            log::debug!("guidance attempt {} failed: {last}", attempt + 1);
        }
        Err(GuidanceError::ServiceUnavailable(last))
    }
}

impl GuidanceProvider for HttpGuidance {
    fn sds_gradient(&self, req: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        req.validate()?;
        let resp = decode_response(&self.post("/v1/sds", &encode_request(req))?)?;
        if (resp.width, resp.height) != (req.rendered_image.width() as usize, req.rendered_image.height() as usize) {
            return Err(GuidanceError::BadResponse("gradient size does not match request".into()));
        }
        Ok(resp)
    }

    fn sketch_to_reference(
        &self,
        render: &RgbImage,
        _render_mask: &SilhouetteMask,
        sketch: &SilhouetteMask,
        prompt: &str,
    ) -> Result<RgbImage, GuidanceError> {
        check_dims(render.width, render.height)?;
        if sketch.dims() != (render.width, render.height) {
            return Err(GuidanceError::BadResponse("render and sketch sizes differ".into()));
        }
        let body = serde_json::to_string(&SketchRequestWire {
            width: render.width,
            height: render.height,
            prompt: prompt.to_string(),
            render: png_b64(&quantize(render)),
            sketch: gray_png_b64(sketch),
        })
        .expect("request serializes");
        let text = self.post("/v1/sketch2ref", &body)?;
        let w: SketchResponseWire = serde_json::from_str(&text).map_err(|e| GuidanceError::BadResponse(e.to_string()))?;
        let img = png_from_b64(&w.image)?;
        if img.dimensions() != (render.width as u32, render.height as u32) {
            return Err(GuidanceError::BadResponse("reference size does not match request".into()));
        }
        Ok(dequantize(&img))
    }
}

/// Where guidance comes from; `"mock"` or an `http(s)://` base URL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub endpoint: String,
    pub timeout_secs: f64,
    pub prompt: String,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            endpoint: "mock".into(),
            timeout_secs: 60.0,
            prompt: String::new(),
        }
    }
}

impl GuidanceConfig {
    /// Applies `SKETCHCAGE_GUIDANCE_URL` and `SKETCHCAGE_GUIDANCE_TIMEOUT`.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var("SKETCHCAGE_GUIDANCE_URL") {
            self.endpoint = url;
        }
        if let Some(t) = std::env::var("SKETCHCAGE_GUIDANCE_TIMEOUT").ok().and_then(|s| s.parse().ok()) {
            self.timeout_secs = t;
        }
        self
    }

    pub fn provider(&self) -> Result<Box<dyn GuidanceProvider>, GuidanceError> {
        if self.endpoint == "mock" {
            return Ok(Box::new(MockGuidance::default()));
        }
        if self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://") {
            return Ok(Box::new(HttpGuidance::new(&self.endpoint, Duration::from_secs_f64(self.timeout_secs))));
        }
        Err(GuidanceError::ServiceUnavailable(format!("unsupported endpoint `{}`", self.endpoint)))
    }
}

/// Time spent by [`HttpGuidance`] before giving up, for diagnostics.
pub fn time_to_failure(client: &HttpGuidance, req: &GuidanceRequest) -> (Duration, Result<GuidanceResponse, GuidanceError>) {
    let t = Instant::now();
    let r = client.sds_gradient(req);
    (t.elapsed(), r)
}
