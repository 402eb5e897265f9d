use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::http::StatusCode;
use nalgebra::DMatrix;
use tokio::sync::Mutex;

use scbm::experiment::correlation;
use scbm::format::sha256_hex;
use scbm::gauss::ConceptDistribution;
use scbm::intervention::{apply_intervention, policy_next, PolicyKind, StrategyConfig};
use scbm::model::{Checkpoint, PredictConfig};
use scbm::rng::RandomStream;
use scbm::synth::{Batch, Dataset, Split};
use scbm::tensor::Tensor;
use scbm::Error;

use crate::api::{
    CorrelationPayload, CreateSession, Health, HistoryEntry, InstanceInfo, SessionPayload,
    Snapshot, SnapshotSession, StateView, SuggestionPayload,
};

pub const SNAPSHOT_SCHEMA: &str = "scbm-sessions v1";

/// Policy suggestions for step `k` draw from `derive(seed, [key, SUGGESTION_STREAM, k])`.
pub const SUGGESTION_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub seed: u64,
    pub predict: PredictConfig,
    pub strategy: StrategyConfig,
    pub policy: PolicyKind,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            predict: PredictConfig::default(),
            strategy: StrategyConfig::default(),
            policy: PolicyKind::Uncertainty,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid", message)
    }

    pub fn busy(id: u64) -> Self {
        Self::new(
            StatusCode::TOO_MANY_REQUESTS,
            "busy",
            format!("session {id} is handling another request; retry"),
        )
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Usage(_) | Error::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

/// A resolved instance: covariates, its logit distribution and stream key.
#[derive(Clone, Debug)]
pub struct Instance {
    pub info: InstanceInfo,
    pub dist: ConceptDistribution,
}

#[derive(Debug)]
pub struct Session {
    pub id: u64,
    pub request: CreateSession,
    pub instance: Instance,
    pub history: Vec<HistoryEntry>,
    pub state: StateView,
}

pub type SessionHandle = Arc<Mutex<Session>>;

/// Shared server state. The checkpoint and test split are immutable.
pub struct AppState {
    ckpt: Checkpoint,
    ckpt_hash: String,
    test: Option<Batch>,
    cfg: ServeConfig,
    sessions: RwLock<BTreeMap<u64, SessionHandle>>,
    next_id: AtomicU64,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Stream key for raw covariates: the top bit is set so keys never collide
/// with dataset row indices.
pub fn covariate_key(x: &[f64]) -> u64 {
    let bytes: Vec<u8> = x.iter().flat_map(|v| v.to_le_bytes()).collect();
    let hex = sha256_hex(&bytes);
    u64::from_str_radix(&hex[..16], 16).expect("sha256 hex digest") | 1 << 63
}

impl AppState {
    /// `dataset`, when given, must carry a split; its test part backs
    /// `test_index` sessions.
    pub fn new(ckpt: Checkpoint, dataset: Option<&Dataset>, cfg: ServeConfig) -> scbm::Result<Self> {
        cfg.strategy.validate()?;
        let test = match dataset {
            Some(ds) => {
                if ds.num_features() != ckpt.model.features() || ds.num_concepts() != ckpt.model.concepts {
                    return Err(Error::Config(format!(
                        "dataset has {} features and {} concepts, checkpoint expects {} and {}",
                        ds.num_features(),
                        ds.num_concepts(),
                        ckpt.model.features(),
                        ckpt.model.concepts
                    )));
                }
                Some(ds.part(Split::Test)?)
            }
            None => None,
        };
        Ok(Self {
            ckpt_hash: ckpt.hash(),
            ckpt,
            test,
            cfg,
            sessions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.ckpt_hash
    }

    pub fn config(&self) -> &ServeConfig {
        &self.cfg
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            checkpoint_hash: self.ckpt_hash.clone(),
            variant: self.ckpt.variant(),
            features: self.ckpt.model.features(),
            concepts: self.ckpt.model.concepts,
            test_instances: self.test.as_ref().map_or(0, Batch::len),
            sessions: self.sessions.read().unwrap().len(),
        }
    }

    pub fn session(&self, id: u64) -> ApiResult<SessionHandle> {
        self.sessions
            .read()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    /// Locks a session without waiting; a held lock means another request
    /// on the same session is in flight.
    pub fn try_lock(&self, id: u64) -> ApiResult<tokio::sync::OwnedMutexGuard<Session>> {
        self.session(id)?.try_lock_owned().map_err(|_| ApiError::busy(id))
    }

    pub fn resolve(&self, req: &CreateSession) -> ApiResult<Instance> {
        let features = self.ckpt.model.features();
        let c = self.ckpt.model.concepts;
        let info = match (req.test_index, &req.covariates) {
            (Some(i), None) => {
                if req.concepts.is_some() {
                    return Err(ApiError::invalid("concepts come from the dataset for test_index sessions"));
                }
                let test = self
                    .test
                    .as_ref()
                    .ok_or_else(|| ApiError::not_found("no dataset loaded; send covariates instead"))?;
                if i >= test.len() {
                    return Err(ApiError::not_found(format!(
                        "test_index {i} out of range 0..{}",
                        test.len()
                    )));
                }
                let row = test.rows[i];
                InstanceInfo {
                    test_index: Some(i),
                    row: Some(row),
                    covariates: test.x.row(i).to_vec(),
                    concepts: Some(test.concepts.row(i).to_vec()),
                    key: row as u64,
                }
            }
            (None, Some(x)) => {
                if x.len() != features {
                    return Err(ApiError::invalid(format!(
                        "{} covariates, model expects {features}",
                        x.len()
                    )));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(ApiError::invalid("covariates must be finite"));
                }
                if let Some(cs) = &req.concepts {
                    if cs.len() != c || cs.iter().any(|&v| v != 0.0 && v != 1.0) {
                        return Err(ApiError::invalid(format!("concepts must be {c} values in {{0, 1}}")));
                    }
                }
                InstanceInfo {
                    test_index: None,
                    row: None,
                    covariates: x.clone(),
                    concepts: req.concepts.clone(),
                    key: covariate_key(x),
                }
            }
            _ => return Err(ApiError::invalid("send exactly one of test_index or covariates")),
        };
        let dist = self
            .ckpt
            .model
            .distributions(&Tensor::row_vector(info.covariates.clone()))?
            .remove(0);
        Ok(Instance { info, dist })
    }

    /// State after intervening on `actions` in order.
    ///
    /// Step `k = |actions|` draws from `derive(seed, [key, k])`, the same
    /// stream the intervention curves use, so the empty state equals the
    /// batch prediction for the instance.
    pub fn compute(&self, inst: &Instance, actions: &[HistoryEntry]) -> ApiResult<StateView> {
        let c = self.ckpt.model.concepts;
        let set: Vec<usize> = actions.iter().map(|a| a.concept).collect();
        let values: Vec<f64> = actions.iter().map(|a| a.value).collect();
        let k = set.len() as u64;
        let key = inst.info.key;
        let mut rng = RandomStream::derive(self.cfg.seed, &[key, k]);
        let st = apply_intervention(
            &self.ckpt.model,
            &inst.dist,
            &self.ckpt.percentiles,
            &set,
            &values,
            &self.cfg.strategy,
            &self.cfg.predict,
            &mut rng,
        )?;
        let (mu, sigma_diag) = match &st.conditional {
            _ if set.is_empty() => (inst.dist.mean().as_slice().to_vec(), inst.dist.variances()),
            Some(cond) => {
                let mut mu = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (j, &i) in cond.remaining.iter().enumerate() {
                    mu[i] = cond.mean[j];
                    var[i] = cond.cov[(j, j)];
                }
                for (&i, &e) in set.iter().zip(&st.eta) {
                    mu[i] = e;
                }
                (mu, var)
            }
            None => {
                let mut mu = vec![0.0; c];
                for (&i, &e) in set.iter().zip(&st.eta) {
                    mu[i] = e;
                }
                (mu, vec![0.0; c])
            }
        };
        let suggestion = if set.len() < c {
            let mut prng = RandomStream::derive(self.cfg.seed, &[key, SUGGESTION_STREAM, k]);
            Some(policy_next(self.cfg.policy, &st.concept_probs, &set, &mut prng)?)
        } else {
            None
        };
        Ok(StateView {
            intervened: set,
            values,
            concept_probs: st.concept_probs,
            target_probs: st.target_probs,
            mu,
            sigma_diag,
            delta: vec![0.0; c],
            suggestion,
            converged: st.converged,
        })
    }

    /// Replays `history` and fills `delta` against the state one action earlier.
    pub fn replay(&self, inst: &Instance, history: &[HistoryEntry]) -> ApiResult<StateView> {
        let mut state = self.compute(inst, history)?;
        if let Some((_, earlier)) = history.split_last() {
            let prev = self.compute(inst, earlier)?;
            state.delta = state
                .concept_probs
                .iter()
                .zip(&prev.concept_probs)
                .map(|(a, b)| a - b)
                .collect();
        }
        Ok(state)
    }

    pub fn payload(&self, s: &Session) -> SessionPayload {
        SessionPayload {
            session: s.id,
            checkpoint_hash: self.ckpt_hash.clone(),
            variant: self.ckpt.variant(),
            instance: s.instance.info.clone(),
            history: s.history.clone(),
            state: s.state.clone(),
        }
    }

    fn insert(&self, id: u64, request: CreateSession, history: Vec<HistoryEntry>) -> ApiResult<SessionPayload> {
        let instance = self.resolve(&request)?;
        let state = self.replay(&instance, &history)?;
        let session = Session {
            id,
            request,
            instance,
            history,
            state,
        };
        let payload = self.payload(&session);
        self.sessions
            .write()
            .unwrap()
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(payload)
    }

    pub fn create(&self, request: CreateSession) -> ApiResult<SessionPayload> {
        // Validate before spending an id.
        self.resolve(&request)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.insert(id, request, Vec::new())
    }

    pub fn apply(&self, s: &mut Session, concept: usize, value: f64) -> ApiResult<SessionPayload> {
        let c = self.ckpt.model.concepts;
        if concept >= c {
            return Err(ApiError::invalid(format!("concept {concept} out of range 0..{c}")));
        }
        if value != 0.0 && value != 1.0 {
            return Err(ApiError::invalid("value must be 0 or 1"));
        }
        if s.history.iter().any(|a| a.concept == concept) {
            return Err(ApiError::conflict(format!("concept {concept} is already intervened")));
        }
        let mut history = s.history.clone();
        history.push(HistoryEntry {
            concept,
            value,
            at: now(),
        });
        s.state = self.replay(&s.instance, &history)?;
        s.history = history;
        Ok(self.payload(s))
    }

    pub fn undo(&self, s: &mut Session) -> ApiResult<SessionPayload> {
        if s.history.is_empty() {
            return Err(ApiError::conflict("nothing to undo"));
        }
        let history = &s.history[..s.history.len() - 1];
        s.state = self.replay(&s.instance, history)?;
        s.history.pop();
        Ok(self.payload(s))
    }

    pub fn suggestion(&self, s: &Session) -> SuggestionPayload {
        SuggestionPayload {
            session: s.id,
            checkpoint_hash: self.ckpt_hash.clone(),
            policy: self.cfg.policy,
            concept: s.state.suggestion,
        }
    }

    /// Amortized checkpoints are evaluated at the session's instance; the
    /// other variants ignore it.
    pub fn correlation(&self, session: Option<(u64, &[f64])>) -> ApiResult<CorrelationPayload> {
        let m: DMatrix<f64> = correlation(&self.ckpt, session.map(|(_, x)| x))?;
        Ok(CorrelationPayload {
            checkpoint_hash: self.ckpt_hash.clone(),
            variant: self.ckpt.variant(),
            session: session.map(|(id, _)| id),
            matrix: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        })
    }

    /// Sessions whose lock is held are waited for.
    pub async fn snapshot(&self) -> Snapshot {
        let handles: Vec<SessionHandle> = self.sessions.read().unwrap().values().cloned().collect();
        let mut sessions = Vec::with_capacity(handles.len());
        for h in handles {
            let s = h.lock().await;
            sessions.push(SnapshotSession {
                id: s.id,
                request: s.request.clone(),
                history: s.history.clone(),
            });
        }
        Snapshot {
            schema: SNAPSHOT_SCHEMA.into(),
            checkpoint_hash: self.ckpt_hash.clone(),
            next_id: self.next_id.load(Ordering::Relaxed),
            sessions,
        }
    }

    /// Rebuilds sessions from a snapshot by replaying their histories.
    pub fn restore(&self, snap: &Snapshot) -> scbm::Result<()> {
        if snap.schema != SNAPSHOT_SCHEMA {
            return Err(Error::Config(format!("unknown snapshot schema {:?}", snap.schema)));
        }
        if snap.checkpoint_hash != self.ckpt_hash {
            return Err(Error::Config(
                "snapshot was taken against a different checkpoint".into(),
            ));
        }
        for s in &snap.sessions {
            self.insert(s.id, s.request.clone(), s.history.clone())
                .map_err(|e| Error::Config(format!("cannot restore session {}: {}", s.id, e.message)))?;
        }
        let next = snap
            .sessions
            .iter()
            .map(|s| s.id + 1)
            .max()
            .unwrap_or(1)
            .max(snap.next_id);
        self.next_id.store(next, Ordering::Relaxed);
        Ok(())
    }
}
