mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sketchcage_core::anim::{render_sequence, InterpMethod, Keyframe, SequenceOptions};
use sketchcage_core::bench::{ablation, ablation_csv, BenchScale, Benchmark};
use sketchcage_core::cage::{build_cage, parse_obj, CageMesh, CageParams};
use sketchcage_core::guidance::GuidanceConfig;
use sketchcage_core::jacobian::{build_poisson, load_params, DeformParams, Parameterization};
use sketchcage_core::optim::{run, target_from_sketch, DeformJob, IterationRecord, OptimConfig, RunControl};
use sketchcage_core::pipeline::{
    prepare, render_cloud_color, render_cloud_silhouette, sample_mesh_surface, scene_view, write_artifacts,
};
use sketchcage_core::raster::{CameraView, SilhouetteMask};
use sketchcage_core::splat::{load_ply, save_ply, SplatCloud};

use error::CliError;

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "sketchcage", version, about = "Sketch-driven cage deformation of Gaussian splat scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a triangle mesh into a splat scene.
    Convert(ConvertArgs),
    /// Build an enclosing cage for a scene.
    Cage(CageArgs),
    /// Fit the cage deformation to a sketched silhouette.
    Deform(DeformArgs),
    /// Interpolate finished deformations into a frame sequence.
    Animate(AnimateArgs),
    /// Render a scene from an orbit view.
    Render(RenderArgs),
    /// Compare parameterizations on a synthetic benchmark.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Splat radius in scene units; derived from the surface area if omitted.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CageArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 96)]
    res: usize,
    #[arg(long, default_value_t = 4.0)]
    offset_cells: f64,
    #[arg(long, default_value_t = 500)]
    verts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    elev: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    azim: f64,
    /// Camera distance; framed to the scene if omitted.
    #[arg(long)]
    radius: Option<f64>,
    /// Vertical field of view in degrees.
    #[arg(long)]
    fov: Option<f64>,
}

impl ViewArgs {
    fn view(&self, cloud: &SplatCloud, w: usize, h: usize) -> CliResult<CameraView> {
        let mut v = scene_view(cloud, self.elev, self.azim, w, h, self.radius)?;
        if let Some(f) = self.fov {
            v.fov_y = f;
        }
        v.validate()?;
        Ok(v)
    }
}

#[derive(Args)]
struct DeformArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cage: PathBuf,
    /// Silhouette drawn in the sketch view; white is inside.
    #[arg(long)]
    sketch: PathBuf,
    #[command(flatten)]
    view: ViewArgs,
    /// TOML file with optimizer settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    param: Option<Parameterization>,
    #[arg(long)]
    guidance_weight: Option<f64>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// `mock` or the base URL of a guidance service.
    #[arg(long)]
    guidance: Option<String>,
    /// Print the merged configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long)]
    out: PathBuf,
}

impl DeformArgs {
    fn config(&self) -> CliResult<OptimConfig> {
        let mut c = match &self.config {
            Some(p) => OptimConfig::from_toml(&std::fs::read_to_string(p)?)?,
            None => OptimConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag.clone() {
                    c.$field = v;
                }
            };
        }
        set!(iters => iterations);
        set!(lr => learning_rate);
        set!(alpha => alpha);
        set!(views => num_random_views);
        set!(seed => seed);
        set!(param => parameterization);
        set!(guidance_weight => guidance_weight);
        set!(prompt => prompt);
        set!(checkpoint_every => checkpoint_every);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Jacobian,
    Linear,
}

impl From<Method> for InterpMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Jacobian => InterpMethod::Jacobian,
            Method::Linear => InterpMethod::Linear,
        }
    }
}

#[derive(Args)]
struct AnimateArgs {
    /// Comma-separated output directories of `deform` runs.
    #[arg(long, value_delimiter = ',', required = true)]
    jobs: Vec<PathBuf>,
    /// Keyframe times in [0, 1]; evenly spaced if omitted.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, value_enum, default_value_t = Method::Jacobian)]
    method: Method,
    /// Also write the deformed scene of every frame.
    #[arg(long)]
    ply: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RenderMode {
    Color,
    Silhouette,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    view: ViewArgs,
    #[arg(long, default_value_t = 512)]
    w: usize,
    #[arg(long, default_value_t = 512)]
    h: usize,
    #[arg(long, value_enum, default_value_t = RenderMode::Color)]
    mode: RenderMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleName {
    Reduced,
    Full,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    benchmark: Benchmark,
    /// Comma-separated parameterizations; all three if omitted.
    #[arg(long, value_delimiter = ',')]
    param: Option<Vec<Parameterization>>,
    /// Number of seeds, starting at 0.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, value_enum, default_value_t = ScaleName::Reduced)]
    scale: ScaleName,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    image: Option<usize>,
    #[arg(long)]
    splats: Option<usize>,
    #[arg(long)]
    cage_res: Option<usize>,
    /// Comma-separated cage vertex budgets, one sweep entry each.
    #[arg(long, value_delimiter = ',')]
    cage_verts: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

/// What `deform` leaves behind for `animate`.
#[derive(Debug, Serialize, Deserialize)]
struct JobFile {
    scene: PathBuf,
    cage: PathBuf,
    view: CameraView,
    config: OptimConfig,
}

const JOB_FILE: &str = "job.toml";
const TABLES_FILE: &str = "tables.bin";

fn load_scene(path: &Path) -> CliResult<SplatCloud> {
    let cloud = load_ply(path)?;
    if cloud.is_empty() {
        return Err(sketchcage_core::splat::SplatError::EmptyCloud.into());
    }
    Ok(cloud)
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    Ok(std::path::absolute(p)?)
}

fn convert(a: ConvertArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.mesh)?;
    let (verts, faces) = parse_obj(&text)?;
    let cloud = sample_mesh_surface(&verts, &faces, a.samples, a.sigma, a.seed)?;
    save_ply(&cloud, &a.out)?;
    println!("wrote {} splats to {}", cloud.len(), a.out.display());
    Ok(())
}

fn cage(a: CageArgs) -> CliResult<()> {
    let cloud = load_scene(&a.input)?;
    let params = CageParams {
        resolution: a.res,
        offset_cells: a.offset_cells,
        target_vertices: a.verts,
    };
    let cage = build_cage(&cloud.centroids(), &params)?;
    cage.save_obj(&a.out)?;
    println!(
        "cage vertices={} faces={} out={}",
        cage.num_vertices(),
        cage.num_faces(),
        a.out.display()
    );
    Ok(())
}

fn deform(a: DeformArgs) -> CliResult<()> {
    let config = a.config()?;
    println!("config {}", config.echo());
    if a.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let cloud = load_scene(&a.scene)?;
    let cage = CageMesh::load_obj(&a.cage)?;
    let sketch = SilhouetteMask::load_png(&a.sketch)?;
    let view = a.view.view(&cloud, sketch.width, sketch.height)?;
    let guidance = match &a.guidance {
        Some(e) => GuidanceConfig {
            endpoint: e.clone(),
            ..GuidanceConfig::default().with_env()
        },
        None => GuidanceConfig::default().with_env(),
    };
    let provider = guidance.provider()?;

    std::fs::create_dir_all(&a.out)?;
    let job_file = JobFile {
        scene: absolute(&a.scene)?,
        cage: absolute(&a.cage)?,
        view,
        config: config.clone(),
    };
    let text = toml::to_string(&job_file).map_err(|e| CliError::runtime("Serialize", e.to_string()))?;
    std::fs::write(a.out.join(JOB_FILE), text)?;

    let setup = prepare(&cloud, cage, Some(&a.out.join(TABLES_FILE)))?;
    let job = DeformJob {
        sketch_view: view,
        target_mask: target_from_sketch(&sketch),
        config: config.clone(),
    };
    let every = config.checkpoint_every.max(1);
    let total = config.iterations;
    let progress = |r: &IterationRecord, _: &DeformParams| {
        if (r.iteration + 1) % every == 0 || r.iteration == 0 {
            log::info!(
                "iteration {}/{} l_sil={:.4e} l_guidance={:.4e} flipped={}",
                r.iteration + 1,
                total,
                r.l_sil,
                r.l_guidance,
                r.flipped_faces
            );
        }
    };
    let result = run(
        &setup,
        &job,
        Some(provider.as_ref()),
        RunControl {
            progress: Some(&progress),
            checkpoint_dir: Some(a.out.join("checkpoint")),
            ..RunControl::default()
        },
    )?;
    let art = write_artifacts(&a.out, &cloud, &setup, &result, &view, Vector3::from(config.background))?;
    if art.clamped_splats > 0 {
        log::warn!("{} splats had degenerate covariances and were clamped", art.clamped_splats);
    }
    println!(
        "done initial_l_sil={:.6e} final_l_sil={:.6e} iou={:.4} out={}",
        result.initial_l_sil,
        result.final_l_sil,
        result.final_mask.iou(&job.target_mask),
        a.out.display()
    );
    Ok(())
}

fn animate(a: AnimateArgs) -> CliResult<()> {
    let n = a.jobs.len();
    if n < 2 {
        return Err(sketchcage_core::anim::AnimError::InsufficientKeyframes(n).into());
    }
    let times = match a.times {
        Some(t) if t.len() != n => {
            return Err(CliError::input("BadTimes", format!("{} times for {n} jobs", t.len())));
        }
        Some(t) => t,
        None => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    };
    let files: Vec<JobFile> = a
        .jobs
        .iter()
        .map(|d| {
            let text = std::fs::read_to_string(d.join(JOB_FILE))?;
            toml::from_str(&text).map_err(|e| CliError::input("BadJob", format!("{}: {e}", d.display())))
        })
        .collect::<CliResult<_>>()?;
    let first = &files[0];
    let cage = CageMesh::load_obj(&first.cage)?;
    for f in &files[1..] {
        let other = CageMesh::load_obj(&f.cage)?;
        if other.vertices != cage.vertices || other.faces != cage.faces {
            return Err(
                sketchcage_core::anim::AnimError::MismatchedCages(cage.num_vertices(), other.num_vertices()).into(),
            );
        }
        if f.scene != first.scene {
            return Err(CliError::input("MismatchedScenes", "keyframe jobs deform different scenes"));
        }
    }
    let cloud = load_scene(&first.scene)?;
    let system = build_poisson(&cage)?;
    let keys = a
        .jobs
        .iter()
        .zip(&times)
        .map(|(d, &t)| {
            let params = load_params(d.join("params.bin"))?;
            Ok(Keyframe::new(t, &params, &system, d.display().to_string())?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let setup = prepare(&cloud, cage, Some(&a.jobs[0].join(TABLES_FILE)))?;
    let opts = SequenceOptions {
        fps: a.fps,
        duration: a.duration,
        view: first.view,
        background: Vector3::from(first.config.background),
        method: a.method.into(),
        write_ply: a.ply,
    };
    let manifest = render_sequence(&setup, &cloud, &keys, &opts, &a.out)?;
    println!("frames={} out={}", manifest.frames.len(), a.out.display());
    Ok(())
}

fn render(a: RenderArgs) -> CliResult<()> {
    let cloud = load_scene(&a.scene)?;
    let view = a.view.view(&cloud, a.w, a.h)?;
    match a.mode {
        RenderMode::Color => render_cloud_color(&cloud, &view, Vector3::repeat(1.0))?.save_png(&a.out)?,
        RenderMode::Silhouette => render_cloud_silhouette(&cloud, &view)?.save_png(&a.out)?,
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let mut scale = match a.scale {
        ScaleName::Reduced => BenchScale::reduced(a.benchmark),
        ScaleName::Full => BenchScale::full(a.benchmark),
    };
    if let Some(v) = a.iters {
        scale.iterations = v;
    }
    if let Some(v) = a.image {
        scale.image = v;
    }
    if let Some(v) = a.splats {
        scale.splats = v;
    }
    if let Some(v) = a.cage_res {
        scale.cage_resolution = v;
    }
    let modes = a
        .param
        .unwrap_or_else(|| vec![Parameterization::Decomposed, Parameterization::Jacobian, Parameterization::Vertices]);
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let budgets = a.cage_verts.unwrap_or_else(|| vec![scale.cage_vertices]);
    let mut rows = Vec::new();
    for budget in budgets {
        let s = BenchScale {
            cage_vertices: budget,
            ..scale
        };
        log::info!("{} benchmark, cage budget {budget}, {} iterations", a.benchmark, s.iterations);
        for r in ablation(a.benchmark, &modes, &seeds, &s)? {
            println!(
                "{} param={} seed={} cage_vertices={} final_l_sil={:.4e} iou={:.4} flipped={}",
                r.benchmark, r.param, r.seed, r.cage_vertices, r.final_l_sil, r.iou, r.max_flipped_faces
            );
            rows.push(r);
        }
    }
    std::fs::write(&a.out, ablation_csv(&rows))?;
    println!("rows={} out={}", rows.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Convert(a) => convert(a),
        Command::Cage(a) => cage(a),
        Command::Deform(a) => deform(a),
        Command::Animate(a) => animate(a),
        Command::Render(a) => render(a),
        Command::Ablate(a) => ablate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code as u8)
        }
    }
}
