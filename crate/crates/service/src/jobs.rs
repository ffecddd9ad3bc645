//! Job records, their on-disk store and the blocking executor.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sketchcage_core::cage::CageMesh;
use sketchcage_core::guidance::GuidanceProvider;
use sketchcage_core::jacobian::DeformParams;
use sketchcage_core::optim::{run, DeformJob, IterationRecord, OptimConfig, OptimError, RunControl};
use sketchcage_core::pipeline::{prepare, write_artifacts};
use sketchcage_core::raster::{CameraView, SilhouetteMask};
use sketchcage_core::splat::SplatCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Cancelled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub l_sil: f64,
    pub l_guidance: f64,
    pub l_total: f64,
}

/// Artifact file names, relative to the job directory.
pub const ARTIFACT_FILES: [&str; 6] = [
    "result.ply",
    "final_color.png",
    "final_silhouette.png",
    "loss.csv",
    "params.bin",
    "deformed_cage.obj",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub scene: String,
    pub cage: String,
    pub status: JobStatus,
    pub iteration: usize,
    pub total: usize,
    pub history: Vec<LossPoint>,
    pub view: CameraView,
    pub config: OptimConfig,
    pub initial_l_sil: Option<f64>,
    pub final_l_sil: Option<f64>,
    /// Artifact name to URL, filled in when the job is done.
    pub artifacts: Vec<(String, String)>,
    pub error: Option<String>,
}

impl JobRecord {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("job.json")
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join("job.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?)?;
        std::fs::rename(tmp, Self::path(dir))
    }

    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(Self::path(dir))?;
        serde_json::from_slice(&bytes).map_err(std::io::Error::other)
    }
}

/// Shared state of one job; readers clone the record under a short lock.
pub struct JobHandle {
    pub dir: PathBuf,
    pub record: Mutex<JobRecord>,
    pub cancel: AtomicBool,
}

impl JobHandle {
    pub fn new(dir: PathBuf, record: JobRecord) -> Self {
        Self {
            dir,
            record: Mutex::new(record),
            cancel: AtomicBool::new(false),
        }
    }

    pub fn snapshot(&self) -> JobRecord {
        self.record.lock().unwrap().clone()
    }

    fn update(&self, f: impl FnOnce(&mut JobRecord), persist: bool) {
        let rec = {
            let mut r = self.record.lock().unwrap();
            f(&mut r);
            persist.then(|| r.clone())
        };
        if let Some(rec) = rec {
            if let Err(e) = rec.save(&self.dir) {
                log::error!("persisting job {}: {e}", rec.id);
            }
        }
    }
}

/// Loads every job record under `jobs_dir`; jobs that were in flight when
/// the previous process stopped are marked failed.
pub fn recover(jobs_dir: &Path) -> Vec<Arc<JobHandle>> {
    let Ok(entries) = std::fs::read_dir(jobs_dir) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for e in entries.flatten() {
        let dir = e.path();
        let Ok(mut rec) = JobRecord::load(&dir) else {
            continue;
        };
        if !rec.status.is_finished() {
            rec.status = JobStatus::Failed;
            rec.error = Some("restart".into());
            if let Err(e) = rec.save(&dir) {
                log::error!("persisting recovered job {}: {e}", rec.id);
            }
        }
        out.push(Arc::new(JobHandle::new(dir, rec)));
    }
    out
}

pub struct JobInputs {
    pub cloud: Arc<SplatCloud>,
    pub cage: CageMesh,
    pub tables_cache: PathBuf,
    pub target: SilhouetteMask,
    pub provider: Arc<dyn GuidanceProvider>,
}

/// Runs the optimization to completion, updating the handle as it goes.
pub fn execute(handle: &JobHandle, inputs: JobInputs) {
    let rec = handle.snapshot();
    handle.update(|r| r.status = JobStatus::Running, true);
    let outcome = (|| -> Result<(f64, f64), OptimError> {
        let setup = prepare(&inputs.cloud, inputs.cage, Some(&inputs.tables_cache))?;
        let job = DeformJob {
            sketch_view: rec.view,
            target_mask: inputs.target,
            config: rec.config.clone(),
        };
        let every = rec.config.checkpoint_every.max(1);
        let progress = |it: &IterationRecord, _: &DeformParams| {
            let persist = (it.iteration + 1) % every == 0;
            handle.update(
                |r| {
                    r.iteration = it.iteration + 1;
                    r.initial_l_sil.get_or_insert(it.l_sil);
                    r.history.push(LossPoint {
                        iteration: it.iteration,
                        l_sil: it.l_sil,
                        l_guidance: it.l_guidance,
                        l_total: it.l_total,
                    });
                },
                persist,
            );
        };
        let result = run(
            &setup,
            &job,
            Some(inputs.provider.as_ref()),
            RunControl {
                cancel: Some(&handle.cancel),
                progress: Some(&progress),
                checkpoint_dir: Some(handle.dir.join("checkpoint")),
                initial: None,
            },
        )?;
        let bg = Vector3::from(rec.config.background);
        write_artifacts(&handle.dir, &inputs.cloud, &setup, &result, &rec.view, bg)?;
        Ok((result.initial_l_sil, result.final_l_sil))
    })();
    let id = rec.id.clone();
    handle.update(
        |r| match outcome {
            Ok((initial, fin)) => {
                r.status = JobStatus::Done;
                r.initial_l_sil = Some(initial);
                r.final_l_sil = Some(fin);
                r.artifacts = ARTIFACT_FILES
                    .iter()
                    .map(|f| (f.to_string(), format!("/jobs/{id}/files/{f}")))
                    .collect();
            }
            Err(OptimError::Cancelled(_)) => r.status = JobStatus::Cancelled,
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                r.status = JobStatus::Failed;
                r.error = Some(e.to_string());
            }
        },
        true,
    );
}
