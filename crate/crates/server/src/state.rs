use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use brushwork::checkpoint::load_checkpoint;
use brushwork::pipeline::{FeatureKey, LevelMask, PreviewSet, StrokeFeatureSet, DEFAULT_MEMORY_BUDGET};
use brushwork::upsample::UpsampleGateway;
use brushwork::{Error, ImagePlane, ModelMeta, StrokeParams, StyleModel};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    /// Directory of `*.safetensors` style checkpoints.
    pub models_dir: PathBuf,
    pub host: String,
    pub port: u16,
    /// Largest accepted upload, in pixels.
    pub max_pixels: usize,
    /// Long-side cap for session images; full resolution is reached only by export.
    pub preview_cap: usize,
    pub max_upload_bytes: usize,
    /// Peak memory allowed for one level precomputation.
    pub memory_budget: usize,
    /// Remote upsampling service; falls back to `UPSAMPLE_ENDPOINT`.
    pub upsample_endpoint: Option<String>,
    /// Where export results are written.
    pub result_dir: PathBuf,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            models_dir: PathBuf::from("models"),
            host: "127.0.0.1".into(),
            port: 8080,
            max_pixels: 25_000_000,
            preview_cap: 1024,
            max_upload_bytes: 256 << 20,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            upsample_endpoint: None,
            result_dir: std::env::temp_dir().join("brushwork-exports"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StyleInfo {
    pub id: String,
    pub has_style_image: bool,
    #[serde(flatten)]
    pub meta: ModelMeta,
}

pub struct Style {
    pub info: StyleInfo,
    pub model: Arc<StyleModel>,
}

/// Loads every `*.safetensors` file under `dir`; the file stem is the style id.
/// Unreadable checkpoints are skipped with a warning.
pub fn load_styles(dir: &Path) -> brushwork::Result<BTreeMap<String, Style>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Config(format!("models directory {}: {e}", dir.display())))?;
    let mut styles = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("safetensors") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        match load_checkpoint(&path) {
            Ok(model) => {
                let info = StyleInfo {
                    id: id.clone(),
                    has_style_image: model.style_image().is_some(),
                    meta: model.meta().clone(),
                };
                styles.insert(
                    id,
                    Style {
                        info,
                        model: Arc::new(model),
                    },
                );
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(styles)
}

pub(crate) fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub(crate) struct LevelCache {
    pub style_id: String,
    pub features: StrokeFeatureSet,
    pub previews: PreviewSet,
}

pub(crate) struct Session {
    pub id: String,
    /// Content at preview resolution.
    pub content: ImagePlane,
    pub content_hash: String,
    pub original_extent: (usize, usize),
    pub style_id: Option<String>,
    pub params: StrokeParams,
    pub mask: Option<LevelMask>,
    pub levels: Option<LevelCache>,
    pub final_render: Option<ImagePlane>,
    pub created: u64,
    pub updated: u64,
}

impl Session {
    /// The cached feature set, provided it still matches the session's
    /// current style, content, intensity and rotation.
    pub fn fresh_levels(&self) -> ApiResult<&LevelCache> {
        let cache = self
            .levels
            .as_ref()
            .ok_or_else(|| ApiError::sequencing("no stroke levels have been computed for this session"))?;
        let expected = FeatureKey::new(
            self.content_hash.clone(),
            self.params.lambda_i,
            self.params.tau,
            cache.features.level_values(),
        );
        if cache.features.key() != &expected || self.style_id.as_deref() != Some(cache.style_id.as_str()) {
            return Err(ApiError::sequencing(
                "stroke levels are stale (style, intensity or rotation changed); recompute them first",
            ));
        }
        Ok(cache)
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.id.clone(),
            height: self.content.height(),
            width: self.content.width(),
            original_height: self.original_extent.0,
            original_width: self.original_extent.1,
            style_id: self.style_id.clone(),
            params: self.params,
            level_values: self.levels.as_ref().map(|c| c.features.level_values().to_vec()),
            has_final_render: self.final_render.is_some(),
            created: self.created,
            updated: self.updated,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub original_height: usize,
    pub original_width: usize,
    pub style_id: Option<String>,
    pub params: StrokeParams,
    pub level_values: Option<Vec<f32>>,
    pub has_final_render: bool,
    pub created: u64,
    pub updated: u64,
}

pub struct AppState {
    pub config: ServerConfig,
    styles: BTreeMap<String, Style>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    pub gateway: Arc<UpsampleGateway>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> brushwork::Result<Self> {
        let styles = load_styles(&config.models_dir)?;
        let endpoint = config
            .upsample_endpoint
            .clone()
            .or_else(|| std::env::var(brushwork::upsample::ENDPOINT_ENV).ok())
            .filter(|s| !s.is_empty());
        let gateway = Arc::new(UpsampleGateway::with_endpoint(&config.result_dir, endpoint));
        Ok(Self {
            config,
            styles,
            sessions: Mutex::new(HashMap::new()),
            gateway,
        })
    }

    pub fn styles(&self) -> impl Iterator<Item = &StyleInfo> {
        self.styles.values().map(|s| &s.info)
    }

    /// A loaded model by id.
    pub fn model(&self, id: &str) -> ApiResult<Arc<StyleModel>> {
        self.styles
            .get(id)
            .map(|s| s.model.clone())
            .ok_or_else(|| ApiError::not_found(format!("style {id}")))
    }

    pub(crate) fn insert_session(&self, session: Session) {
        let id = session.id.clone();
        self.sessions
            .lock()
            .expect("session map poisoned")
            .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    }

    pub(crate) fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }
}
