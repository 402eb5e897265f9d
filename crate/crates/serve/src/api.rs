//! Request and response bodies. Field-level documentation lives in
//! `docs/api.md`.

use serde::{Deserialize, Serialize};

use scbm::intervention::PolicyKind;
use scbm::model::Variant;

/// Body of `POST /sessions`: exactly one of `test_index` or `covariates`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<f64>>,
    /// Ground-truth concepts for raw covariates, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionRequest {
    pub concept: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub test_index: Option<usize>,
    /// Dataset row of a test-split instance.
    pub row: Option<usize>,
    pub covariates: Vec<f64>,
    pub concepts: Option<Vec<f64>>,
    /// Stream key the session's draws are derived from.
    pub key: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub concept: usize,
    pub value: f64,
    /// RFC 3339, UTC.
    pub at: String,
}

/// Everything that is a function of (checkpoint, intervened set, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub intervened: Vec<usize>,
    pub values: Vec<f64>,
    pub concept_probs: Vec<f64>,
    pub target_probs: Vec<f64>,
    /// Conditional logit means; intervened entries hold the chosen logit.
    pub mu: Vec<f64>,
    /// Conditional logit variances; zero for intervened concepts.
    pub sigma_diag: Vec<f64>,
    /// `concept_probs` minus those of the state before the last action.
    pub delta: Vec<f64>,
    pub suggestion: Option<usize>,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPayload {
    pub session: u64,
    pub checkpoint_hash: String,
    pub variant: Variant,
    pub instance: InstanceInfo,
    pub history: Vec<HistoryEntry>,
    pub state: StateView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestionPayload {
    pub session: u64,
    pub checkpoint_hash: String,
    pub policy: PolicyKind,
    /// `null` once every concept is intervened.
    pub concept: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPayload {
    pub checkpoint_hash: String,
    pub variant: Variant,
    pub session: Option<u64>,
    /// Row-major `C × C`.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_hash: String,
    pub variant: Variant,
    pub features: usize,
    pub concepts: usize,
    pub test_instances: usize,
    pub sessions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

/// Sessions written on shutdown and replayed on startup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema: String,
    pub checkpoint_hash: String,
    pub next_id: u64,
    pub sessions: Vec<SnapshotSession>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSession {
    pub id: u64,
    pub request: CreateSession,
    pub history: Vec<HistoryEntry>,
}
