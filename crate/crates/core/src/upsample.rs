//! High-resolution export: a client for a remote style-guided upsampling
//! service, and a local bicubic fallback.
//!
//! Remote wire contract (all JSON bodies are `{"id", "state", "error"?}`):
//!
//! * `POST {endpoint}/jobs`, multipart fields `stylized` (PNG), `style`
//!   (PNG) and `scale` (decimal text);
//! * `GET {endpoint}/jobs/{id}` for the current state;
//! * `GET {endpoint}/jobs/{id}/result` for the PNG once `state` is `done`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::plane::ImagePlane;

/// Largest accepted output side, in pixels.
pub const MAX_SIDE: usize = 8192;
pub const ENDPOINT_ENV: &str = "UPSAMPLE_ENDPOINT";

/// Strength of the luminance detail added back after the bicubic step.
const SHARPEN_AMOUNT: f32 = 0.6;

#[derive(Debug, Clone)]
pub struct UpsampleRequest {
    pub stylized: ImagePlane,
    pub style: ImagePlane,
    pub target_scale: f64,
}

/// `round(scale · extent)` per side.
pub fn output_extent((h, w): (usize, usize), scale: f64) -> (usize, usize) {
    ((h as f64 * scale).round() as usize, (w as f64 * scale).round() as usize)
}

impl UpsampleRequest {
    pub fn validate(&self) -> Result<()> {
        let s = self.target_scale;
        if !(s.is_finite() && s >= 1.0) {
            return Err(Error::Parameter(vec![Violation::new("scale", format!("{s} must be a finite number >= 1"))]));
        }
        let (h, w) = output_extent(self.stylized.extent(), s);
        if h.max(w) > MAX_SIDE {
            return Err(Error::Parameter(vec![Violation::new(
                "scale",
                format!("output would be {h}x{w}; each side is limited to {MAX_SIDE}"),
            )]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }

    /// Whether moving from `self` to `next` goes forward (or stays put).
    pub fn can_become(self, next: JobState) -> bool {
        match self {
            Self::Queued => true,
            Self::Running => next != Self::Queued,
            Self::Done | Self::Failed => next == self,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsampleJob {
    pub job_id: String,
    pub state: JobState,
    pub result_path: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Local,
    Remote,
}

/// Bicubic upscale followed by unsharp masking of the upscaled luminance.
/// Scale 1 returns the input unchanged.
pub fn upsample_local(image: &ImagePlane, scale: f64) -> Result<ImagePlane> {
    let req_check = UpsampleRequest {
        stylized: ImagePlane::new(image.height(), image.width()),
        style: ImagePlane::new(1, 1),
        target_scale: scale,
    };
    req_check.validate()?;
    let (h, w) = image.extent();
    let (oh, ow) = output_extent((h, w), scale);
    if (oh, ow) == (h, w) {
        return Ok(image.clone());
    }
    // Clamped before sharpening; the sharpened result is clamped again.
    let mut out = image.resize(oh, ow, FilterType::CatmullRom);

    let luma: Vec<f32> = out
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let y = ImageBuffer::<Luma<f32>, Vec<f32>>::from_raw(ow as u32, oh as u32, luma).expect("buffer matches extent");
    let sigma = (0.5 * scale as f32).max(0.8);
    let blurred = imageops::blur(&y, sigma);
    for ((px, l), b) in out.data_mut().chunks_exact_mut(3).zip(y.as_raw()).zip(blurred.as_raw()) {
        let detail = SHARPEN_AMOUNT * (l - b);
        px.iter_mut().for_each(|v| *v += detail);
    }
    out.clamp_unit();
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct RemoteJob {
    id: String,
    state: JobState,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Debug)]
struct Entry {
    job: UpsampleJob,
    remote_id: Option<String>,
    image: Option<ImagePlane>,
}

/// Submits upsampling jobs and tracks their state.
#[derive(Debug)]
pub struct UpsampleGateway {
    result_dir: PathBuf,
    endpoint: Option<String>,
    /// Built on first remote use: the blocking client owns a runtime that
    /// must not be created or dropped on an async executor thread.
    client: OnceLock<reqwest::blocking::Client>,
    jobs: Mutex<HashMap<String, Entry>>,
}

fn transport(endpoint: &str, e: impl std::fmt::Display) -> Error {
    Error::Transport {
        message: format!("{endpoint}: {e}"),
    }
}

impl UpsampleGateway {
    /// A gateway writing results to `result_dir`, with the remote endpoint
    /// taken from `UPSAMPLE_ENDPOINT` when set.
    pub fn new(result_dir: impl Into<PathBuf>) -> Self {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty());
        Self::with_endpoint(result_dir, endpoint)
    }

    pub fn with_endpoint(result_dir: impl Into<PathBuf>, endpoint: Option<String>) -> Self {
        Self {
            result_dir: result_dir.into(),
            endpoint: endpoint.map(|e| e.trim_end_matches('/').to_string()),
            client: OnceLock::new(),
            jobs: Mutex::new(HashMap::new()),
        }
    }

    pub fn endpoint(&self) -> Option<&str> {
        self.endpoint.as_deref()
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(300))
                .build()
                .expect("TLS-free client builds")
        })
    }

    fn remote(&self) -> Result<&str> {
        self.endpoint
            .as_deref()
            .ok_or_else(|| Error::Config(format!("remote upsampling needs {ENDPOINT_ENV} to be set")))
    }

    fn result_path(&self, job_id: &str) -> PathBuf {
        self.result_dir.join(format!("{job_id}.png"))
    }

    fn write_result(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::create_dir_all(&self.result_dir).map_err(|e| Error::io(&self.result_dir, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn submit(&self, req: &UpsampleRequest, backend: Backend) -> Result<UpsampleJob> {
        req.validate()?;
        let job_id = uuid::Uuid::new_v4().to_string();
        let entry = match backend {
            Backend::Local => {
                let image = upsample_local(&req.stylized, req.target_scale)?;
                let path = self.result_path(&job_id);
                self.write_result(&path, &image.encode_png()?)?;
                Entry {
                    job: UpsampleJob {
                        job_id: job_id.clone(),
                        state: JobState::Done,
                        result_path: Some(path),
                        error: None,
                    },
                    remote_id: None,
                    image: Some(image),
                }
            }
            Backend::Remote => {
                let endpoint = self.remote()?;
                let png = |img: &ImagePlane, name: &str| -> Result<reqwest::blocking::multipart::Part> {
                    reqwest::blocking::multipart::Part::bytes(img.encode_png()?)
                        .file_name(format!("{name}.png"))
                        .mime_str("image/png")
                        .map_err(|e| transport(endpoint, e))
                };
                let form = reqwest::blocking::multipart::Form::new()
                    .part("stylized", png(&req.stylized, "stylized")?)
                    .part("style", png(&req.style, "style")?)
                    .text("scale", req.target_scale.to_string());
                let remote: RemoteJob = self
                    .client()
                    .post(format!("{endpoint}/jobs"))
                    .multipart(form)
                    .send()
                    .and_then(|r| r.error_for_status())
                    .and_then(|r| r.json())
                    .map_err(|e| transport(endpoint, e))?;
                Entry {
                    job: UpsampleJob {
                        job_id: job_id.clone(),
                        state: remote.state,
                        result_path: None,
                        error: remote.error,
                    },
                    remote_id: Some(remote.id),
                    image: None,
                }
            }
        };
        let job = entry.job.clone();
        self.jobs.lock().expect("job registry poisoned").insert(job_id, entry);
        Ok(job)
    }

    /// Current state of a job. A remote job that reached `done` has its
    /// result downloaded once and cached under the result directory.
    pub fn poll(&self, job_id: &str) -> Result<UpsampleJob> {
        let (remote_id, current) = {
            let jobs = self.jobs.lock().expect("job registry poisoned");
            let e = jobs.get(job_id).ok_or_else(|| Error::JobNotFound(job_id.to_string()))?;
            if e.job.state.is_terminal() {
                return Ok(e.job.clone());
            }
            (e.remote_id.clone(), e.job.state)
        };
        let Some(remote_id) = remote_id else {
            return self.snapshot(job_id);
        };
        let endpoint = self.remote()?;
        let remote: RemoteJob = self
            .client()
            .get(format!("{endpoint}/jobs/{remote_id}"))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| transport(endpoint, e))?;
        let mut next = if current.can_become(remote.state) { remote.state } else { current };
        let mut result_path = None;
        if next == JobState::Done {
            let bytes = self
                .client()
                .get(format!("{endpoint}/jobs/{remote_id}/result"))
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.bytes())
                .map_err(|e| transport(endpoint, e))?;
            match ImagePlane::decode(&bytes) {
                Ok(_) => {
                    let path = self.result_path(job_id);
                    self.write_result(&path, &bytes)?;
                    result_path = Some(path);
                }
                Err(e) => {
                    next = JobState::Failed;
                    let mut jobs = self.jobs.lock().expect("job registry poisoned");
                    if let Some(entry) = jobs.get_mut(job_id) {
                        entry.job.error = Some(format!("result is not a valid image: {e}"));
                    }
                }
            }
        }
        let mut jobs = self.jobs.lock().expect("job registry poisoned");
        let entry = jobs.get_mut(job_id).ok_or_else(|| Error::JobNotFound(job_id.to_string()))?;
        // Another poll may have advanced the job meanwhile; never move back.
        if entry.job.state.can_become(next) {
            entry.job.state = next;
            if result_path.is_some() {
                entry.job.result_path = result_path;
            }
            if remote.error.is_some() {
                entry.job.error = remote.error;
            }
        }
        Ok(entry.job.clone())
    }

    fn snapshot(&self, job_id: &str) -> Result<UpsampleJob> {
        let jobs = self.jobs.lock().expect("job registry poisoned");
        jobs.get(job_id)
            .map(|e| e.job.clone())
            .ok_or_else(|| Error::JobNotFound(job_id.to_string()))
    }

    /// The finished image of a `done` job.
    pub fn result(&self, job_id: &str) -> Result<ImagePlane> {
        let job = {
            let jobs = self.jobs.lock().expect("job registry poisoned");
            let e = jobs.get(job_id).ok_or_else(|| Error::JobNotFound(job_id.to_string()))?;
            if let Some(img) = &e.image {
                return Ok(img.clone());
            }
            e.job.clone()
        };
        match (job.state, job.result_path) {
            (JobState::Done, Some(path)) => ImagePlane::load(path),
            (state, _) => Err(Error::Input(format!("job {job_id} is {state:?}, not done"))),
        }
    }

    /// Submits and, for remote jobs, polls until a terminal state.
    pub fn run(&self, req: &UpsampleRequest, backend: Backend, poll_every: Duration) -> Result<(UpsampleJob, ImagePlane)> {
        let mut job = self.submit(req, backend)?;
        while !job.state.is_terminal() {
            std::thread::sleep(poll_every);
            job = self.poll(&job.job_id)?;
        }
        match job.state {
            JobState::Done => {
                let img = self.result(&job.job_id)?;
                Ok((job, img))
            }
            _ => Err(Error::Transport {
                message: format!(
                    "upsampling job {} failed: {}",
                    job.job_id,
                    job.error.as_deref().unwrap_or("no reason given")
                ),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn scale_one_is_identity() {
        let img = synth::scene(33, 47, 1);
        assert_eq!(upsample_local(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn extent_rounds_per_side() {
        let img = synth::scene(40, 30, 2);
        let out = upsample_local(&img, 2.5).unwrap();
        assert_eq!(out.extent(), (100, 75));
        assert_eq!(output_extent((1024, 1024), 3.125), (3200, 3200));
        assert_eq!(output_extent((33, 47), 1.5), (50, 71));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn oversize_and_bad_scale_rejected() {
        let img = ImagePlane::new(2000, 100);
        for s in [5.0, 0.5, f64::NAN] {
            let req = UpsampleRequest {
                stylized: img.clone(),
                style: img.clone(),
                target_scale: s,
            };
            assert!(matches!(req.validate(), Err(Error::Parameter(_))), "{s}");
        }
    }

    #[test]
    fn state_machine_only_moves_forward() {
        use JobState::*;
        assert!(Queued.can_become(Running));
        assert!(Running.can_become(Done));
        assert!(!Running.can_become(Queued));
        assert!(!Done.can_become(Running));
        assert!(!Failed.can_become(Done));
        assert!(Done.can_become(Done));
    }

    #[test]
    fn local_jobs_finish_immediately() {
        let dir = tempfile::tempdir().unwrap();
        let gw = UpsampleGateway::with_endpoint(dir.path(), None);
        let req = UpsampleRequest {
            stylized: synth::scene(20, 20, 3),
            style: synth::brush_strokes(20, 20, 3),
            target_scale: 2.0,
        };
        let job = gw.submit(&req, Backend::Local).unwrap();
        assert_eq!(job.state, JobState::Done);
        assert_eq!(gw.poll(&job.job_id).unwrap(), job);
        assert_eq!(gw.poll(&job.job_id).unwrap(), job);
        assert!(job.result_path.as_ref().unwrap().exists());
        assert_eq!(gw.result(&job.job_id).unwrap().extent(), (40, 40));
        assert!(matches!(gw.poll("nope"), Err(Error::JobNotFound(_))));
        assert!(matches!(gw.submit(&req, Backend::Remote), Err(Error::Config(_))));
    }
}
