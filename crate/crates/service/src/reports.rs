use std::collections::BTreeMap;

use dialport_core::eval::{fleiss_kappa, EvalError, RatingsMatrix};
use serde::{Deserialize, Serialize};

use crate::store::{Conversation, EndReason, SessionStatus};

pub const CRITERIA: [&str; 3] = ["coherence", "engagingness", "humanness"];
pub const OVERALL: &str = "overall";
const CATEGORIES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaCell {
    pub kappa: Option<f64>,
    pub items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub model: String,
    pub conversations: usize,
    pub cells: BTreeMap<String, KappaCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub conversation_id: String,
    pub annotations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// `ok`, or `empty` when no conversation is fully annotated.
    pub status: String,
    pub raters_per_conversation: usize,
    pub criteria: Vec<String>,
    /// One row per model, then the overall row.
    pub rows: Vec<AgreementRow>,
    pub excluded: Vec<Excluded>,
}

/// Per-conversation category counts (score 1 maps to category 0).
pub fn ratings_matrix(
    conversations: &[&Conversation],
    criterion: &str,
) -> Result<RatingsMatrix, EvalError> {
    let counts = conversations
        .iter()
        .map(|c| {
            let mut row = vec![0u32; CATEGORIES];
            for r in c.ratings.values() {
                let score = r
                    .scores
                    .named()
                    .iter()
                    .find(|(n, _)| *n == criterion)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| EvalError::Input(format!("unknown criterion {criterion:?}")))?;
                row[usize::from(score) - 1] += 1;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    RatingsMatrix::new(counts)
}

fn cell(conversations: &[&Conversation], criterion: &str) -> KappaCell {
    let items = conversations.len();
    if items == 0 {
        return KappaCell {
            kappa: None,
            items,
            note: Some("no fully annotated conversations".into()),
        };
    }
    match ratings_matrix(conversations, criterion).and_then(|m| fleiss_kappa(&m)) {
        Ok(k) => KappaCell {
            kappa: Some(k),
            items,
            note: None,
        },
        Err(e) => KappaCell {
            kappa: None,
            items,
            note: Some(e.to_string()),
        },
    }
}

/// Fleiss' kappa per model and criterion over the conversations rated by
/// exactly `quota` annotators. `models` fixes the row order; `model` and
/// `criterion` narrow the table.
pub fn agreement_report(
    conversations: &[Conversation],
    models: &[String],
    quota: usize,
    model: Option<&str>,
    criterion: Option<&str>,
) -> AgreementReport {
    let criteria: Vec<String> = CRITERIA
        .iter()
        .filter(|c| criterion.map_or(true, |f| f == **c))
        .map(|c| c.to_string())
        .collect();
    let ended: Vec<&Conversation> = conversations
        .iter()
        .filter(|c| c.status == SessionStatus::Ended)
        .collect();
    let (included, excluded): (Vec<&Conversation>, Vec<&Conversation>) =
        ended.into_iter().partition(|c| c.ratings.len() == quota);
    let row = |name: &str, convs: Vec<&Conversation>| AgreementRow {
        model: name.to_owned(),
        conversations: convs.len(),
        cells: criteria
            .iter()
            .map(|k| (k.clone(), cell(&convs, k)))
            .collect(),
    };
    let mut rows = Vec::new();
    for m in models
        .iter()
        .filter(|m| model.map_or(true, |f| f == m.as_str()))
    {
        rows.push(row(
            m,
            included
                .iter()
                .copied()
                .filter(|c| &c.model_id == m)
                .collect(),
        ));
    }
    if model.map_or(true, |f| f == OVERALL) {
        rows.push(row(OVERALL, included.clone()));
    }
    AgreementReport {
        status: if included.is_empty() { "empty" } else { "ok" }.into(),
        raters_per_conversation: quota,
        criteria,
        rows,
        excluded: excluded
            .iter()
            .map(|c| Excluded {
                conversation_id: c.id.clone(),
                annotations: c.ratings.len(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub model: String,
    pub conversations: usize,
    pub average_utterances: Option<f64>,
    pub early_stops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceStats {
    pub rows: Vec<UtteranceRow>,
}

/// Average number of utterances (user and bot turns) per ended conversation.
pub fn utterance_stats(conversations: &[Conversation], models: &[String]) -> UtteranceStats {
    let row = |name: &str, convs: Vec<&Conversation>| {
        let total: usize = convs.iter().map(|c| c.turns.len()).sum();
        UtteranceRow {
            model: name.to_owned(),
            conversations: convs.len(),
            average_utterances: (!convs.is_empty()).then(|| total as f64 / convs.len() as f64),
            early_stops: convs
                .iter()
                .filter(|c| c.end_reason == Some(EndReason::HallucinationEarlyStop))
                .count(),
        }
    };
    let ended: Vec<&Conversation> = conversations
        .iter()
        .filter(|c| c.status == SessionStatus::Ended)
        .collect();
    let mut rows: Vec<UtteranceRow> = models
        .iter()
        .map(|m| {
            row(
                m,
                ended.iter().copied().filter(|c| &c.model_id == m).collect(),
            )
        })
        .collect();
    rows.push(row(OVERALL, ended));
    UtteranceStats { rows }
}
