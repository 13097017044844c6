//! Append-only persistence: one JSON-lines event file per conversation plus
//! an index of conversation ids.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use dialport_core::data::{Speaker, Turn};
use dialport_core::strategy::ChatState;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Ended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    #[default]
    Normal,
    HallucinationEarlyStop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scores {
    pub coherence: u8,
    pub engagingness: u8,
    pub humanness: u8,
}

impl Scores {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in self.named() {
            if !(1..=5).contains(&v) {
                return Err(format!("{name} must be an integer in 1..=5, got {v}"));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, u8); 3] {
        [
            ("coherence", self.coherence),
            ("engagingness", self.engagingness),
            ("humanness", self.humanness),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub annotator: String,
    pub scores: Scores,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub speaker: Speaker,
    pub text: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: String,
        model_id: String,
        tester: String,
        persona: Vec<String>,
        at: DateTime<Utc>,
    },
    /// A user turn and its reply, written as one line so a crash can never
    /// leave half an exchange behind. `internal` holds the turns as the
    /// model saw them.
    Exchange {
        user: String,
        bot: String,
        internal: Vec<Turn>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message_id: Option<String>,
        at: DateTime<Utc>,
    },
    Ended {
        reason: EndReason,
        at: DateTime<Utc>,
    },
    Rated {
        rating: RatingRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        replaced: Option<Scores>,
    },
}

/// In-memory state of one conversation, rebuilt by replaying its events.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub model_id: String,
    pub tester: String,
    pub persona: Vec<String>,
    pub turns: Vec<TurnRecord>,
    pub state: ChatState,
    pub status: SessionStatus,
    pub started_at: DateTime<Utc>,
    pub ended_at: Option<DateTime<Utc>>,
    pub end_reason: Option<EndReason>,
    pub last_message_id: Option<String>,
    pub ratings: BTreeMap<String, RatingRecord>,
    /// Every replaced rating, oldest first.
    pub rating_audit: Vec<(RatingRecord, Scores)>,
}

impl Conversation {
    fn from_created(ev: &Event) -> Option<Self> {
        match ev {
            Event::Created {
                id,
                model_id,
                tester,
                persona,
                at,
            } => Some(Self {
                id: id.clone(),
                model_id: model_id.clone(),
                tester: tester.clone(),
                persona: persona.clone(),
                turns: Vec::new(),
                state: ChatState::new(persona.clone()),
                status: SessionStatus::Active,
                started_at: *at,
                ended_at: None,
                end_reason: None,
                last_message_id: None,
                ratings: BTreeMap::new(),
                rating_audit: Vec::new(),
            }),
            _ => None,
        }
    }

    pub fn apply(&mut self, ev: &Event) -> Result<(), String> {
        match ev {
            Event::Created { .. } => return Err("duplicate creation event".into()),
            Event::Exchange {
                user,
                bot,
                internal,
                message_id,
                at,
            } => {
                if self.status == SessionStatus::Ended {
                    return Err("exchange after end".into());
                }
                self.turns.push(TurnRecord {
                    speaker: Speaker::User,
                    text: user.clone(),
                    at: *at,
                });
                self.turns.push(TurnRecord {
                    speaker: Speaker::Bot,
                    text: bot.clone(),
                    at: *at,
                });
                self.state.history.extend(internal.iter().cloned());
                self.last_message_id = message_id.clone();
            }
            Event::Ended { reason, at } => {
                if self.status == SessionStatus::Ended {
                    return Err("ended twice".into());
                }
                self.status = SessionStatus::Ended;
                self.ended_at = Some(*at);
                self.end_reason = Some(*reason);
            }
            Event::Rated { rating, replaced } => {
                if self.status != SessionStatus::Ended {
                    return Err("rating of an active session".into());
                }
                if let Some(old) = replaced {
                    self.rating_audit.push((rating.clone(), *old));
                }
                self.ratings
                    .insert(rating.annotator.clone(), rating.clone());
            }
        }
        Ok(())
    }

    pub fn back_and_forths(&self) -> usize {
        self.turns.len() / 2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexLine {
    id: String,
    model_id: String,
    at: DateTime<Utc>,
}

/// What recovery found on disk.
#[derive(Debug, Default)]
pub struct Recovery {
    pub conversations: Vec<Conversation>,
    /// Files whose torn last line was cut off.
    pub repaired: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn io(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(format!("{}: {e}", path.display()))
}

impl Store {
    pub fn open(root: &Path) -> Result<Self, ServiceError> {
        let conv = root.join("conversations");
        fs::create_dir_all(&conv).map_err(|e| io(&conv, e))?;
        Ok(Self {
            root: root.to_owned(),
        })
    }

    fn conversation_path(&self, id: &str) -> PathBuf {
        self.root.join("conversations").join(format!("{id}.jsonl"))
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.jsonl")
    }

    fn append_line(path: &Path, value: &impl Serialize) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(value).map_err(|e| io(path, e))?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io(path, e))?;
        f.write_all(&line).map_err(|e| io(path, e))?;
        f.sync_data().map_err(|e| io(path, e))
    }

    /// Writes the creation event, then indexes the conversation.
    pub fn create(&self, created: &Event) -> Result<Conversation, ServiceError> {
        let conv = Conversation::from_created(created)
            .ok_or_else(|| ServiceError::Storage("expected a creation event".into()))?;
        Self::append_line(&self.conversation_path(&conv.id), created)?;
        Self::append_line(
            &self.index_path(),
            &IndexLine {
                id: conv.id.clone(),
                model_id: conv.model_id.clone(),
                at: conv.started_at,
            },
        )?;
        Ok(conv)
    }

    pub fn append(&self, id: &str, ev: &Event) -> Result<(), ServiceError> {
        Self::append_line(&self.conversation_path(id), ev)
    }

    /// Replays every conversation file. A last line without its newline or
    /// that fails to parse is the remnant of an interrupted write and is cut
    /// off; damage anywhere else is an error.
    pub fn recover(&self) -> Result<Recovery, ServiceError> {
        let dir = self.root.join("conversations");
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut out = Recovery::default();
        for path in paths {
            let (events, good_len, torn) = read_events(&path)?;
            if torn {
                log::warn!(
                    "{}: discarding an incomplete trailing record",
                    path.display()
                );
                let f = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(|e| io(&path, e))?;
                f.set_len(good_len).map_err(|e| io(&path, e))?;
                f.sync_all().map_err(|e| io(&path, e))?;
                out.repaired.push(path.clone());
            }
            let Some(first) = events.first() else {
                log::warn!("{}: no complete records, ignoring", path.display());
                continue;
            };
            let mut conv = Conversation::from_created(first)
                .ok_or_else(|| io(&path, "first record is not a creation event"))?;
            for ev in &events[1..] {
                conv.apply(ev).map_err(|e| io(&path, e))?;
            }
            out.conversations.push(conv);
        }
        self.reconcile_index(&out.conversations)?;
        out.conversations
            .sort_by(|a, b| a.started_at.cmp(&b.started_at).then(a.id.cmp(&b.id)));
        Ok(out)
    }

    /// Re-adds index entries lost between the two writes of `create`.
    fn reconcile_index(&self, conversations: &[Conversation]) -> Result<(), ServiceError> {
        let path = self.index_path();
        let mut known = std::collections::HashSet::new();
        if path.exists() {
            let (lines, good_len, torn) = read_lines::<IndexLine>(&path)?;
            if torn {
                let f = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(|e| io(&path, e))?;
                f.set_len(good_len).map_err(|e| io(&path, e))?;
            }
            known.extend(lines.into_iter().map(|l| l.id));
        }
        for c in conversations {
            if !known.contains(&c.id) {
                log::warn!("index lacks conversation {}, re-adding", c.id);
                Self::append_line(
                    &path,
                    &IndexLine {
                        id: c.id.clone(),
                        model_id: c.model_id.clone(),
                        at: c.started_at,
                    },
                )?;
            }
        }
        Ok(())
    }
}

fn read_events(path: &Path) -> Result<(Vec<Event>, u64, bool), ServiceError> {
    read_lines(path)
}

fn read_lines<T: for<'de> Deserialize<'de>>(
    path: &Path,
) -> Result<(Vec<T>, u64, bool), ServiceError> {
    let f = File::open(path).map_err(|e| io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut out = Vec::new();
    let mut good = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| io(path, e))?;
        if n == 0 {
            return Ok((out, good, false));
        }
        let complete = buf.last() == Some(&b'\n');
        match serde_json::from_slice::<T>(&buf) {
            Ok(v) if complete => {
                out.push(v);
                good += n as u64;
            }
            result => {
                // Only the final line may be damaged.
                let rest = reader.fill_buf().map_err(|e| io(path, e))?.is_empty();
                if rest {
                    return Ok((out, good, true));
                }
                let reason = result
                    .err()
                    .map_or("missing newline".to_owned(), |e| e.to_string());
                return Err(io(
                    path,
                    format!("corrupt record after byte {good}: {reason}"),
                ));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn created(id: &str) -> Event {
        Event::Created {
            id: id.into(),
            model_id: "m".into(),
            tester: "t".into(),
            persona: vec!["i like tea .".into()],
            at: Utc::now(),
        }
    }

    fn exchange(u: &str) -> Event {
        Event::Exchange {
            user: u.into(),
            bot: format!("re {u}"),
            internal: vec![Turn::user(u), Turn::bot(format!("re {u}"))],
            message_id: None,
            at: Utc::now(),
        }
    }

    #[test]
    fn replay_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let mut conv = store.create(&created("a")).unwrap();
        for ev in [exchange("hi"), exchange("how are you")] {
            store.append("a", &ev).unwrap();
            conv.apply(&ev).unwrap();
        }
        let rec = store.recover().unwrap();
        assert_eq!(rec.conversations, vec![conv]);
        assert!(rec.repaired.is_empty());
    }

    #[test]
    fn torn_tail_is_cut_and_alternation_survives() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.create(&created("a")).unwrap();
        store.append("a", &exchange("hi")).unwrap();
        let path = store.conversation_path("a");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"event":"exchange","user":"second","bo"#)
            .unwrap();
        drop(f);
        let rec = store.recover().unwrap();
        assert_eq!(rec.repaired, vec![path.clone()]);
        let c = &rec.conversations[0];
        assert_eq!(c.turns.len(), 2);
        assert!(c.turns.windows(2).all(|w| w[0].speaker != w[1].speaker));
        // The repaired file accepts further appends.
        store.append("a", &exchange("again")).unwrap();
        assert_eq!(store.recover().unwrap().conversations[0].turns.len(), 4);
    }

    #[test]
    fn damage_before_the_tail_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.create(&created("a")).unwrap();
        let path = store.conversation_path("a");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"garbage\n").unwrap();
        drop(f);
        store.append("a", &exchange("hi")).unwrap();
        assert!(store.recover().is_err());
    }

    #[test]
    fn lost_index_entry_is_restored() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.create(&created("a")).unwrap();
        fs::remove_file(store.index_path()).unwrap();
        store.recover().unwrap();
        let text = fs::read_to_string(store.index_path()).unwrap();
        assert!(text.contains("\"a\""));
    }

    #[test]
    fn score_range() {
        let ok = Scores {
            coherence: 5,
            engagingness: 4,
            humanness: 3,
        };
        ok.validate().unwrap();
        assert!(Scores { humanness: 6, ..ok }.validate().is_err());
        assert!(Scores { coherence: 0, ..ok }.validate().is_err());
    }
}
