use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use dialport_core::strategy::AgentError;
use serde::{Deserialize, Serialize};
use serde_json::json;
use uuid::Uuid;

use crate::config::{Role, TokenEntry};
use crate::protocol::protocol_document;
use crate::reports::{agreement_report, utterance_stats, CRITERIA, OVERALL};
use crate::store::{
    Conversation, EndReason, Event, RatingRecord, Scores, SessionStatus, TurnRecord,
};
use crate::AppState;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/messages", post(post_message))
        .route("/sessions/:id/end", post(end_session))
        .route("/conversations", get(list_conversations))
        .route("/conversations/:id", get(get_conversation))
        .route("/conversations/:id/ratings", post(submit_rating))
        .route("/reports/agreement", get(agreement))
        .route("/reports/utterance-stats", get(stats))
        .route("/protocol", get(protocol))
        .with_state(state)
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    retryable: bool,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            retryable: false,
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("{what} not found"),
        )
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }

    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body =
            json!({"error": self.code, "message": self.message, "retryable": self.retryable});
        (self.status, Json(body)).into_response()
    }
}

impl From<crate::ServiceError> for ApiError {
    fn from(e: crate::ServiceError) -> Self {
        Self::internal(e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Resolves the bearer token; admins pass every role check.
fn authorize<'a>(
    state: &'a AppState,
    headers: &HeaderMap,
    allowed: &[Role],
) -> ApiResult<&'a TokenEntry> {
    let token = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing bearer token",
            )
        })?;
    let who = state
        .principal(token.trim())
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "unknown token"))?;
    if who.role == Role::Admin || allowed.contains(&who.role) {
        Ok(who)
    } else {
        Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            format!("this endpoint is not available to the {:?} role", who.role),
        ))
    }
}

/// What a tester sees of a session: never the model behind it.
#[derive(Debug, Serialize)]
struct SessionView {
    session_id: String,
    status: SessionStatus,
    persona: Vec<String>,
    turns: Vec<TurnRecord>,
    back_and_forths: usize,
    started_at: DateTime<Utc>,
    ended_at: Option<DateTime<Utc>>,
    end_reason: Option<EndReason>,
    early_stop: bool,
}

impl SessionView {
    fn of(c: &Conversation) -> Self {
        Self {
            session_id: c.id.clone(),
            status: c.status,
            persona: c.persona.clone(),
            turns: c.turns.clone(),
            back_and_forths: c.back_and_forths(),
            started_at: c.started_at,
            ended_at: c.ended_at,
            end_reason: c.end_reason,
            early_stop: c.end_reason == Some(EndReason::HallucinationEarlyStop),
        }
    }
}

#[derive(Debug, Serialize)]
struct ConversationSummary {
    conversation_id: String,
    status: SessionStatus,
    turn_count: usize,
    back_and_forths: usize,
    end_reason: Option<EndReason>,
    early_stop: bool,
    started_at: DateTime<Utc>,
    ended_at: Option<DateTime<Utc>>,
    annotations: usize,
    fully_annotated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tester: Option<String>,
}

impl ConversationSummary {
    fn of(c: &Conversation, quota: usize, admin: bool) -> Self {
        Self {
            conversation_id: c.id.clone(),
            status: c.status,
            turn_count: c.turns.len(),
            back_and_forths: c.back_and_forths(),
            end_reason: c.end_reason,
            early_stop: c.end_reason == Some(EndReason::HallucinationEarlyStop),
            started_at: c.started_at,
            ended_at: c.ended_at,
            annotations: c.ratings.len(),
            fully_annotated: c.ratings.len() >= quota,
            model_id: admin.then(|| c.model_id.clone()),
            tester: admin.then(|| c.tester.clone()),
        }
    }
}

#[derive(Debug, Serialize)]
struct ConversationDetail {
    #[serde(flatten)]
    summary: ConversationSummary,
    persona: Vec<String>,
    turns: Vec<TurnRecord>,
    ratings: Vec<RatingRecord>,
}

#[derive(Debug, Default, Deserialize)]
struct CreateSession {
    #[serde(default)]
    persona: Option<Vec<String>>,
    #[serde(default)]
    assign_persona: bool,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Option<Json<CreateSession>>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let who = authorize(&state, &headers, &[Role::Tester])?;
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let persona = match body.persona {
        Some(p) => p,
        None if body.assign_persona => state.random_persona().unwrap_or_default(),
        None => Vec::new(),
    };
    let _guard = state.gate.read().await;
    let model_id = state.pick_model();
    let created = Event::Created {
        id: Uuid::new_v4().to_string(),
        model_id: model_id.clone(),
        tester: who.user.clone(),
        persona,
        at: Utc::now(),
    };
    let conv = match state.store.create(&created) {
        Ok(c) => c,
        Err(e) => {
            state.unpick_model(&model_id);
            return Err(e.into());
        }
    };
    let view = SessionView::of(&conv);
    state.insert(conv);
    Ok((StatusCode::CREATED, Json(view)))
}

fn check_owner(who: &TokenEntry, c: &Conversation) -> ApiResult<()> {
    if who.role == Role::Tester && c.tester != who.user {
        return Err(ApiError::not_found("session"));
    }
    Ok(())
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionView>> {
    let who = authorize(&state, &headers, &[Role::Tester])?;
    let handle = state
        .conversation(&id)
        .ok_or_else(|| ApiError::not_found("session"))?;
    let c = handle.lock().await;
    check_owner(who, &c)?;
    Ok(Json(SessionView::of(&c)))
}

#[derive(Debug, Deserialize)]
struct PostMessage {
    text: String,
    /// Client-chosen id; resending the id of the last exchange replays it.
    #[serde(default)]
    message_id: Option<String>,
}

#[derive(Debug, Serialize)]
struct MessageResponse {
    session_id: String,
    user: TurnRecord,
    bot: TurnRecord,
    turn_count: usize,
    back_and_forths: usize,
    replayed: bool,
}

fn last_exchange(c: &Conversation, replayed: bool) -> MessageResponse {
    let n = c.turns.len();
    MessageResponse {
        session_id: c.id.clone(),
        user: c.turns[n - 2].clone(),
        bot: c.turns[n - 1].clone(),
        turn_count: n,
        back_and_forths: c.back_and_forths(),
        replayed,
    }
}

fn agent_error(e: AgentError) -> ApiError {
    match e {
        AgentError::Input(m) => ApiError::invalid(m),
        e if e.is_retryable() => ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "generation_failed",
            message: e.to_string(),
            retryable: true,
        },
        e => ApiError::internal(format!("generation failed: {e}")),
    }
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(body): Json<PostMessage>,
) -> ApiResult<Json<MessageResponse>> {
    let who = authorize(&state, &headers, &[Role::Tester])?;
    let _guard = state.gate.read().await;
    let handle = state
        .conversation(&id)
        .ok_or_else(|| ApiError::not_found("session"))?;
    let mut c = handle.lock().await;
    check_owner(who, &c)?;
    if body.message_id.is_some() && body.message_id == c.last_message_id && !c.turns.is_empty() {
        return Ok(Json(last_exchange(&c, true)));
    }
    if c.status == SessionStatus::Ended {
        return Err(ApiError::conflict("session_ended", "the session has ended"));
    }
    let text = body.text.trim().to_owned();
    if text.is_empty() {
        return Err(ApiError::invalid("message text is empty"));
    }
    let model = state
        .pool
        .get(&c.model_id)
        .cloned()
        .ok_or_else(|| ApiError::internal("the model behind this session is not deployed"))?;
    let mut scratch = c.state.clone();
    let before = scratch.history.len();
    let user_text = text.clone();
    let (reply, scratch) = tokio::task::spawn_blocking(move || {
        let r = model.agent.respond(&mut scratch, &user_text);
        (r, scratch)
    })
    .await
    .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))?;
    let reply = reply.map_err(agent_error)?;
    let ev = Event::Exchange {
        user: text,
        bot: reply,
        internal: scratch.history[before..].to_vec(),
        message_id: body.message_id,
        at: Utc::now(),
    };
    state.store.append(&c.id, &ev)?;
    c.apply(&ev).map_err(ApiError::internal)?;
    Ok(Json(last_exchange(&c, false)))
}

#[derive(Debug, Default, Deserialize)]
struct EndSession {
    #[serde(default)]
    reason: EndReason,
}

async fn end_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Option<Json<EndSession>>,
) -> ApiResult<Json<SessionView>> {
    let who = authorize(&state, &headers, &[Role::Tester])?;
    let reason = body.map(|Json(b)| b.reason).unwrap_or_default();
    let _guard = state.gate.read().await;
    let handle = state
        .conversation(&id)
        .ok_or_else(|| ApiError::not_found("session"))?;
    let mut c = handle.lock().await;
    check_owner(who, &c)?;
    if c.status == SessionStatus::Ended {
        return Ok(Json(SessionView::of(&c)));
    }
    if c.turns.is_empty() {
        return Err(ApiError::conflict(
            "empty_conversation",
            "a conversation needs at least one exchange before it can end",
        ));
    }
    let ev = Event::Ended {
        reason,
        at: Utc::now(),
    };
    state.store.append(&c.id, &ev)?;
    c.apply(&ev).map_err(ApiError::internal)?;
    Ok(Json(SessionView::of(&c)))
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
}

async fn list_conversations(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<ListQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let who = authorize(&state, &headers, &[Role::Annotator])?;
    let quota = state.config.annotator_quota;
    let filter = q.status.as_deref().unwrap_or("all");
    if ![
        "all",
        "active",
        "ended",
        "needs_annotation",
        "fully_annotated",
    ]
    .contains(&filter)
    {
        return Err(ApiError::invalid(format!(
            "unknown status {filter:?}; use active, ended, needs_annotation, fully_annotated or all"
        )));
    }
    let keep = |c: &Conversation| match filter {
        "active" => c.status == SessionStatus::Active,
        "ended" => c.status == SessionStatus::Ended,
        "needs_annotation" => c.status == SessionStatus::Ended && c.ratings.len() < quota,
        "fully_annotated" => c.ratings.len() >= quota,
        _ => true,
    };
    let mut convs: Vec<Conversation> = state
        .snapshot()
        .await
        .into_iter()
        .filter(|c| keep(c))
        .collect();
    // Least-annotated first so the quota fills evenly.
    convs.sort_by(|a, b| {
        a.ratings
            .len()
            .cmp(&b.ratings.len())
            .then(a.started_at.cmp(&b.started_at))
    });
    let admin = who.role == Role::Admin;
    let items: Vec<ConversationSummary> = convs
        .iter()
        .map(|c| ConversationSummary::of(c, quota, admin))
        .collect();
    Ok(Json(json!({ "conversations": items })))
}

async fn get_conversation(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<ConversationDetail>> {
    let who = authorize(&state, &headers, &[Role::Annotator])?;
    let handle = state
        .conversation(&id)
        .ok_or_else(|| ApiError::not_found("conversation"))?;
    let c = handle.lock().await;
    let admin = who.role == Role::Admin;
    let ratings = c
        .ratings
        .values()
        .filter(|r| admin || r.annotator == who.user)
        .cloned()
        .collect();
    Ok(Json(ConversationDetail {
        summary: ConversationSummary::of(&c, state.config.annotator_quota, admin),
        persona: c.persona.clone(),
        turns: c.turns.clone(),
        ratings,
    }))
}

#[derive(Debug, Deserialize)]
struct RatingBody {
    coherence: i64,
    engagingness: i64,
    humanness: i64,
    #[serde(default)]
    overwrite: bool,
}

#[derive(Debug, Serialize)]
struct RatingResponse {
    conversation_id: String,
    annotator: String,
    scores: Scores,
    annotations: usize,
    fully_annotated: bool,
    overwritten: bool,
}

fn score(name: &str, v: i64) -> ApiResult<u8> {
    match u8::try_from(v) {
        Ok(s) if (1..=5).contains(&s) => Ok(s),
        _ => Err(ApiError::invalid(format!(
            "{name} must be an integer in 1..=5, got {v}"
        ))),
    }
}

async fn submit_rating(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(body): Json<RatingBody>,
) -> ApiResult<(StatusCode, Json<RatingResponse>)> {
    let who = authorize(&state, &headers, &[Role::Annotator])?;
    let scores = Scores {
        coherence: score("coherence", body.coherence)?,
        engagingness: score("engagingness", body.engagingness)?,
        humanness: score("humanness", body.humanness)?,
    };
    let _guard = state.gate.read().await;
    let handle = state
        .conversation(&id)
        .ok_or_else(|| ApiError::not_found("conversation"))?;
    let mut c = handle.lock().await;
    if c.status != SessionStatus::Ended {
        return Err(ApiError::conflict(
            "not_ended",
            "only ended conversations can be rated",
        ));
    }
    let quota = state.config.annotator_quota;
    let previous = c.ratings.get(&who.user).map(|r| r.scores);
    match previous {
        Some(_) if !body.overwrite => {
            return Err(ApiError::conflict(
                "duplicate_rating",
                "you already rated this conversation; resend with overwrite=true to replace it",
            ))
        }
        None if c.ratings.len() >= quota => {
            return Err(ApiError::conflict(
                "quota_full",
                format!("this conversation already has {quota} annotators"),
            ))
        }
        _ => {}
    }
    let ev = Event::Rated {
        rating: RatingRecord {
            annotator: who.user.clone(),
            scores,
            at: Utc::now(),
        },
        replaced: previous,
    };
    state.store.append(&c.id, &ev)?;
    c.apply(&ev).map_err(ApiError::internal)?;
    if let Some(old) = previous {
        log::info!(
            "annotator {} replaced rating {:?} with {:?} on conversation {}",
            who.user,
            old,
            scores,
            c.id
        );
    }
    let status = if previous.is_some() {
        StatusCode::OK
    } else {
        StatusCode::CREATED
    };
    Ok((
        status,
        Json(RatingResponse {
            conversation_id: c.id.clone(),
            annotator: who.user.clone(),
            scores,
            annotations: c.ratings.len(),
            fully_annotated: c.ratings.len() >= quota,
            overwritten: previous.is_some(),
        }),
    ))
}

#[derive(Debug, Deserialize)]
struct AgreementQuery {
    model: Option<String>,
    criterion: Option<String>,
}

async fn agreement(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<AgreementQuery>,
) -> ApiResult<Json<crate::reports::AgreementReport>> {
    authorize(&state, &headers, &[])?;
    if let Some(c) = &q.criterion {
        if !CRITERIA.contains(&c.as_str()) {
            return Err(ApiError::invalid(format!("unknown criterion {c:?}")));
        }
    }
    let models = state.model_ids();
    if let Some(m) = &q.model {
        if m != OVERALL && !models.contains(m) {
            return Err(ApiError::invalid(format!("unknown model {m:?}")));
        }
    }
    let snapshot = state.snapshot().await;
    Ok(Json(agreement_report(
        &snapshot,
        &models,
        state.config.annotator_quota,
        q.model.as_deref(),
        q.criterion.as_deref(),
    )))
}

async fn stats(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
) -> ApiResult<Json<crate::reports::UtteranceStats>> {
    authorize(&state, &headers, &[])?;
    let snapshot = state.snapshot().await;
    Ok(Json(utterance_stats(&snapshot, &state.model_ids())))
}

async fn protocol(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(protocol_document(state.config.annotator_quota))
}
