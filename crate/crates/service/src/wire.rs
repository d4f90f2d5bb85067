//! JSON bodies of the REST API. Every response object carries
//! `schema_version`.

use serde::{Deserialize, Serialize};
use xil_core::experiment::ExperimentManifest;
use xil_core::explain::{ComponentScheme, ExplanationKind, Rect, SchemeKind};
use xil_core::session::{MetricsPoint, QueryArtifact};
use xil_core::spray::ClusterReport;

pub const SCHEMA_VERSION: u32 = 1;

fn version() -> u32 {
    SCHEMA_VERSION
}

/// `POST /sessions`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    /// Client-chosen id (letters, digits, `-`, `_`). A fresh one is
    /// generated when absent. An id whose directory already exists is
    /// resumed from its feedback log.
    #[serde(default)]
    pub id: Option<String>,
    pub manifest: ExperimentManifest,
    /// Defaults to the manifest's first seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WireState {
    Idle,
    AwaitingFeedback,
    Training,
    Done,
    /// A background refit failed; see `error` in the handle.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    #[serde(default = "version")]
    pub schema_version: u32,
    pub id: String,
    pub state: WireState,
    pub step: usize,
    pub budget: usize,
    #[serde(default)]
    pub query: Option<WireQuery>,
    #[serde(default)]
    pub resumed: bool,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireExplanation {
    pub kind: ExplanationKind,
    pub class: usize,
    /// One weight per component.
    pub weights: Vec<f64>,
    pub top_k: Vec<usize>,
    /// Per-pixel relevance (row-major, instance shape), pixel explainers only.
    #[serde(default)]
    pub heatmap: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireComponents {
    pub scheme: SchemeKind,
    pub count: usize,
    /// Pixel rectangles for image grids; empty for tabular features.
    pub rects: Vec<Rect>,
}

impl WireComponents {
    pub fn of(scheme: &ComponentScheme) -> Self {
        Self {
            scheme: scheme.kind,
            count: scheme.len(),
            rects: scheme.rects().to_vec(),
        }
    }
}

/// `GET /sessions/{id}/query`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireQuery {
    #[serde(default = "version")]
    pub schema_version: u32,
    pub instance_id: u64,
    pub step: usize,
    pub budget: usize,
    pub shape: Vec<usize>,
    /// Instance values, row-major.
    pub x: Vec<f64>,
    pub prediction: usize,
    pub confidence: f64,
    pub probabilities: Vec<f64>,
    pub explanation: WireExplanation,
    pub components: WireComponents,
}

impl WireQuery {
    pub fn new(q: &QueryArtifact, scheme: &ComponentScheme) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            instance_id: q.instance_id,
            step: q.step,
            budget: q.budget,
            shape: q.x.shape().to_vec(),
            x: q.x.data().to_vec(),
            prediction: q.prediction,
            confidence: q.confidence,
            probabilities: q.probabilities.clone(),
            explanation: WireExplanation {
                kind: q.explanation.kind,
                class: q.explanation.class,
                weights: q.explanation.weights.clone(),
                top_k: q.explanation.top_k.clone(),
                heatmap: q.explanation.heatmap.as_ref().map(|h| h.data().to_vec()),
            },
            components: WireComponents::of(scheme),
        }
    }
}

/// `POST /sessions/{id}/feedback`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBody {
    pub label: usize,
    /// Components the user marks as irrelevant; empty means "right reasons".
    #[serde(default)]
    pub marked_components: Vec<usize>,
    /// Optional guard: must equal the outstanding query's id.
    #[serde(default)]
    pub instance_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    #[serde(default = "version")]
    pub schema_version: u32,
    pub state: WireState,
    pub step: usize,
    pub budget: usize,
    /// Newest metrics point: the one produced by this refit when the call
    /// waited for it, otherwise the latest known.
    pub metrics: Option<MetricsPoint>,
}

/// `GET /sessions/{id}/report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(default = "version")]
    pub schema_version: u32,
    pub id: String,
    pub state: WireState,
    pub step: usize,
    pub budget: usize,
    pub metrics: Vec<MetricsPoint>,
    #[serde(default)]
    pub clusters: Option<ClusterReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}
