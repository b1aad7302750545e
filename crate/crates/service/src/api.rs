//! `/v1` HTTP API.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, MutexGuard};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use refineir::{
    cluster_subgroups, group_by_category, page, scatter_data, search, snap_crop, CavRegistry,
    Corpus, ImageRecord, ImageSize, NegativeMode, QueryState, RankedResult, Rect, ScatterPoint,
    SnappedCrop, Tier, TrainerConfig,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::session::{Session, SessionHandle, SessionStore, SessionView};

/// Seed for result subgroup clustering, fixed so responses replay exactly.
const SUBGROUP_SEED: u64 = 0;

/// Shared, read-only service data plus the session table.
#[derive(Debug)]
pub struct AppState {
    corpus: Corpus,
    registry: CavRegistry,
    config: Config,
    alpha: f64,
    media_root: Option<PathBuf>,
    sessions: SessionStore,
}

impl AppState {
    /// Applies the configured metric and checks the registry against the corpus.
    pub fn new(corpus: Corpus, registry: CavRegistry, config: Config) -> refineir::Result<Self> {
        config.validate()?;
        let corpus = corpus.with_metric(config.metric);
        registry.check_dimension(corpus.dimension())?;
        let alpha = config.alpha.resolve(&corpus)?;
        Ok(Self {
            corpus,
            registry,
            config,
            alpha,
            media_root: None,
            sessions: SessionStore::default(),
        })
    }

    /// Directory that relative `source_uri` paths are resolved against.
    pub fn with_media_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.media_root = Some(root.into());
        self
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn registry(&self) -> &CavRegistry {
        &self.registry
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    /// All `k` ranked results for a state under the configured limits.
    pub fn ranked(
        &self,
        state: &QueryState,
    ) -> refineir::Result<(Tier, Vec<f64>, Vec<RankedResult>)> {
        let query = state.compose(&self.corpus, &self.registry)?;
        let filter = state.search_filter(&self.corpus)?;
        let results = search(&self.corpus, &query, &filter, self.config.k)?;
        Ok((filter.tier, query, results))
    }

    fn resolve_media(&self, uri: &str) -> Option<PathBuf> {
        if uri.is_empty() {
            return None;
        }
        let path = match uri.strip_prefix("file://") {
            Some(p) => PathBuf::from(p),
            None if uri.contains("://") => return None,
            None => PathBuf::from(uri),
        };
        if path.is_absolute() {
            return Some(path);
        }
        Some(
            self.media_root
                .as_deref()
                .unwrap_or(Path::new("."))
                .join(path),
        )
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/healthz", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{sid}", get(get_session).delete(delete_session))
        .route("/sessions/{sid}/crop", post(set_crop).delete(clear_crop))
        .route("/sessions/{sid}/pins", put(set_pins))
        .route("/sessions/{sid}/sliders", axum::routing::patch(set_slider))
        .route("/sessions/{sid}/filter", put(set_filter))
        .route("/sessions/{sid}/results", get(results))
        .route("/sessions/{sid}/scatter", get(scatter))
        .route("/concepts", get(concepts))
        .route("/images/{id}", get(image))
        .route("/images/{id}/raw", get(image_raw));
    Router::new()
        .route("/healthz", get(health))
        .nest("/v1", v1)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no_route", "no such endpoint") })
        .with_state(state)
}

/// JSON error body `{"error": {"code", "message"}}`.
#[derive(Debug, Clone)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    message: &'a str,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn no_session(sid: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "session_not_found",
            format!("unknown session {sid:?}"),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code,
                message: &self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<refineir::Error> for ApiError {
    fn from(e: refineir::Error) -> Self {
        use refineir::Error as E;
        let (status, code) = match &e {
            E::NotFound(_) => (StatusCode::NOT_FOUND, "image_not_found"),
            E::UnknownConcept(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_concept"),
            E::UnknownCategory(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_category"),
            E::NotFullTier(_) => (StatusCode::UNPROCESSABLE_ENTITY, "not_full_tier"),
            E::NoCropChildren(_) => (StatusCode::UNPROCESSABLE_ENTITY, "no_crop_children"),
            E::ForeignCrop { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "foreign_crop"),
            E::MixedTiers(..) => (StatusCode::UNPROCESSABLE_ENTITY, "mixed_tiers"),
            E::EmptyCandidates { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "empty_candidates"),
            E::DimensionMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch"),
            E::InvalidArgument(_) | E::Malformed { .. } => {
                (StatusCode::BAD_REQUEST, "invalid_argument")
            }
            E::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "io_error"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "unprocessable"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), "malformed_request", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_request", r.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn body<T: DeserializeOwned>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    Ok(payload?.0)
}

fn session(app: &AppState, sid: &str) -> ApiResult<SessionHandle> {
    app.sessions()
        .get(sid)
        .ok_or_else(|| ApiError::no_session(sid))
}

fn lock(handle: &SessionHandle) -> MutexGuard<'_, Session> {
    handle.lock().unwrap_or_else(|e| e.into_inner())
}

fn view(app: &AppState, s: &Session) -> ApiResult<SessionView> {
    Ok(s.view(s.state().search_tier(app.corpus())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub records: usize,
    pub dimension: usize,
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        records: app.corpus().len(),
        dimension: app.corpus().dimension(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub base_image_id: String,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let req = body(payload)?;
    let state = QueryState::with_scale(app.corpus(), &req.base_image_id, app.alpha())?;
    let handle = app.sessions().create(state);
    let s = lock(&handle);
    Ok((StatusCode::CREATED, Json(view(&app, &s)?)))
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
) -> ApiResult<Json<SessionView>> {
    let handle = session(&app, &sid)?;
    let s = lock(&handle);
    Ok(Json(view(&app, &s)?))
}

async fn delete_session(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
) -> ApiResult<StatusCode> {
    if app.sessions().remove(&sid) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::no_session(&sid))
    }
}

async fn set_crop(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    payload: Result<Json<Rect>, JsonRejection>,
) -> ApiResult<Json<SnappedCrop>> {
    let handle = session(&app, &sid)?;
    let requested = body(payload)?;
    let mut s = lock(&handle);
    let corpus = app.corpus();
    let snapped = s.update(|state, crop| -> ApiResult<SnappedCrop> {
        let snapped = snap_crop(corpus, state.base_image_id(), requested)?;
        state.refine_by_region(corpus, &snapped)?;
        *crop = Some(snapped.clone());
        Ok(snapped)
    })?;
    Ok(Json(snapped))
}

async fn clear_crop(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
) -> ApiResult<Json<SessionView>> {
    let handle = session(&app, &sid)?;
    let mut s = lock(&handle);
    s.update(|state, crop| -> ApiResult<()> {
        state.clear_crop();
        *crop = None;
        Ok(())
    })?;
    Ok(Json(view(&app, &s)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinsRequest {
    pub ids: Vec<String>,
}

async fn set_pins(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    payload: Result<Json<PinsRequest>, JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let handle = session(&app, &sid)?;
    let req = body(payload)?;
    let mut s = lock(&handle);
    s.update(|state, _| state.refine_by_example(app.corpus(), &req.ids))?;
    Ok(Json(view(&app, &s)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliderRequest {
    pub concept: String,
    pub value: f64,
}

async fn set_slider(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    payload: Result<Json<SliderRequest>, JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let handle = session(&app, &sid)?;
    let req = body(payload)?;
    let mut s = lock(&handle);
    s.update(|state, _| state.set_slider(app.registry(), &req.concept, req.value))?;
    Ok(Json(view(&app, &s)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRequest {
    pub categories: Option<Vec<String>>,
}

async fn set_filter(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    payload: Result<Json<FilterRequest>, JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let handle = session(&app, &sid)?;
    let req = body(payload)?;
    let mut s = lock(&handle);
    s.update(|state, _| state.set_category_filter(app.corpus(), req.categories))?;
    Ok(Json(view(&app, &s)?))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsQuery {
    #[serde(default)]
    pub page: usize,
    #[serde(default)]
    pub group_by_category: bool,
    pub subgroups_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultCard {
    pub rank: usize,
    pub image_id: String,
    pub distance: f64,
    pub diagnosis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupView {
    pub cluster: usize,
    pub member_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultGroup {
    pub category: String,
    pub results: Vec<ResultCard>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroups: Option<Vec<SubgroupView>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsPage {
    pub session_id: String,
    pub tier: Tier,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub results: Vec<ResultCard>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<ResultGroup>>,
}

async fn results(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    params: Result<Query<ResultsQuery>, QueryRejection>,
) -> ApiResult<Json<ResultsPage>> {
    let handle = session(&app, &sid)?;
    let params = params?.0;
    let s = lock(&handle);
    let (tier, _, ranked) = app.ranked(s.state())?;
    let page_size = app.config().page_size;
    let offset = params.page.saturating_mul(page_size);
    let shown = page(&ranked, params.page, page_size);
    let cards: Vec<ResultCard> = shown
        .iter()
        .enumerate()
        .map(|(i, r)| ResultCard {
            rank: offset + i + 1,
            image_id: r.image_id.clone(),
            distance: r.distance,
            diagnosis: r.diagnosis.clone(),
        })
        .collect();

    let groups = if params.group_by_category || params.subgroups_k.is_some() {
        let by_id: BTreeMap<&str, &ResultCard> =
            cards.iter().map(|c| (c.image_id.as_str(), c)).collect();
        let mut out = Vec::new();
        for g in group_by_category(shown, s.state().category_filter()) {
            let ids: Vec<&str> = g.results.iter().map(|r| r.image_id.as_str()).collect();
            let subgroups = match params.subgroups_k {
                None => None,
                Some(0) => {
                    return Err(ApiError::new(
                        StatusCode::BAD_REQUEST,
                        "invalid_argument",
                        "subgroups_k must be positive",
                    ))
                }
                Some(k) => Some(
                    cluster_subgroups(app.corpus(), &ids, k.min(ids.len()), SUBGROUP_SEED)?
                        .into_iter()
                        .map(|sg| SubgroupView {
                            cluster: sg.cluster,
                            member_ids: sg.member_ids,
                        })
                        .collect(),
                ),
            };
            out.push(ResultGroup {
                category: g.category,
                results: ids.iter().map(|id| by_id[id].clone()).collect(),
                subgroups,
            });
        }
        Some(out)
    } else {
        None
    };

    Ok(Json(ResultsPage {
        session_id: sid,
        tier,
        page: params.page,
        page_size,
        total: ranked.len(),
        results: cards,
        groups,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterResponse {
    pub session_id: String,
    pub tier: Tier,
    pub points: Vec<ScatterPoint>,
}

async fn scatter(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
) -> ApiResult<Json<ScatterResponse>> {
    let handle = session(&app, &sid)?;
    let s = lock(&handle);
    let (tier, query, ranked) = app.ranked(s.state())?;
    let points = scatter_data(app.corpus(), &query, &ranked)?;
    Ok(Json(ScatterResponse {
        session_id: sid,
        tier,
        points,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptInfo {
    pub name: String,
    pub n_positive: usize,
    pub n_negative: usize,
    pub negative_mode: NegativeMode,
    pub seed: u64,
    pub hyperparameters: TrainerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptsResponse {
    /// Concepts with a trained CAV; only these accept slider values.
    pub concepts: Vec<ConceptInfo>,
    /// Concepts named in the corpus header.
    pub corpus_concepts: Vec<String>,
    pub categories: Vec<String>,
    pub slider_scale: f64,
}

async fn concepts(State(app): State<Arc<AppState>>) -> Json<ConceptsResponse> {
    Json(ConceptsResponse {
        concepts: app
            .registry()
            .iter()
            .map(|c| ConceptInfo {
                name: c.name.clone(),
                n_positive: c.n_positive,
                n_negative: c.n_negative,
                negative_mode: c.negative_mode.clone(),
                seed: c.seed,
                hyperparameters: c.hyperparameters,
            })
            .collect(),
        corpus_concepts: app.corpus().concepts().to_vec(),
        categories: app.corpus().categories().to_vec(),
        slider_scale: app.alpha(),
    })
}

/// Record metadata without the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: String,
    pub source_uri: String,
    pub tier: Tier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<ImageSize>,
    pub diagnosis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_labels: Option<BTreeMap<String, bool>>,
    pub crop_ids: Vec<String>,
}

impl ImageMeta {
    fn new(corpus: &Corpus, rec: &ImageRecord) -> Self {
        Self {
            id: rec.id.clone(),
            source_uri: rec.source_uri.clone(),
            tier: rec.tier,
            parent_id: rec.parent_id.clone(),
            region: rec.region,
            size: rec.size,
            diagnosis: rec.diagnosis.clone(),
            concept_labels: rec.concept_labels.clone(),
            crop_ids: corpus
                .crop_children(&rec.id)
                .map(|c| c.id.clone())
                .collect(),
        }
    }
}

async fn image(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<ImageMeta>> {
    let rec = app.corpus().get_record(&id)?;
    Ok(Json(ImageMeta::new(app.corpus(), rec)))
}

fn content_type(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "tif" | "tiff" => "image/tiff",
        "bmp" => "image/bmp",
        "svg" => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn image_raw(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let rec = app.corpus().get_record(&id)?;
    let unavailable = || {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "image_unavailable",
            format!("source of {id:?} does not resolve to a readable file"),
        )
    };
    let path = app.resolve_media(&rec.source_uri).ok_or_else(unavailable)?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| unavailable())?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}
