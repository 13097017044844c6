//! The three portability strategies: dialogue agents for inference and the
//! training pipelines that produce their checkpoints.

mod pipelines;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pipelines::{
    run_cross_lingual, run_train_on_target, CrossLingualInputs, CrossLingualOutcome,
    TrainOnTargetOutcome,
};

use crate::checkpoint::{load_model, CheckpointError};
use crate::data::{
    build_prompt, client_from_spec, DataError, ExampleConfig, Tokenizer, TranslationClient,
    TranslationError, Turn,
};
use crate::model::{greedy_decode, sample_decode, ModelError, SamplingConfig, TransformerModel};

#[derive(Debug, Error)]
pub enum AgentError {
    /// Machine translation failed; the turn may be retried.
    #[error(transparent)]
    Translation(#[from] TranslationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid input: {0}")]
    Input(String),
}

impl AgentError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, AgentError::Translation(_))
    }
}

/// Per-conversation state: the persona and the turns so far, both in the
/// language the underlying model works in.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChatState {
    pub persona: Vec<String>,
    pub history: Vec<Turn>,
}

impl ChatState {
    pub fn new(persona: Vec<String>) -> Self {
        Self {
            persona,
            history: Vec::new(),
        }
    }
}

/// Something that can hold a conversation. `respond` either appends both the
/// user turn and the reply to `state` or leaves it untouched.
pub trait DialogueAgent: Send + Sync {
    fn respond(&self, state: &mut ChatState, user_text: &str) -> Result<String, AgentError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub max_new_tokens: usize,
    /// Greedy decoding when absent.
    pub sampling: Option<SamplingConfig>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            sampling: None,
        }
    }
}

/// A transformer plus tokenizer answering in its own language.
pub struct ModelAgent {
    model: TransformerModel,
    tokenizer: Tokenizer,
    examples: ExampleConfig,
    decoding: DecodingConfig,
}

impl ModelAgent {
    pub fn new(
        model: TransformerModel,
        tokenizer: Tokenizer,
        decoding: DecodingConfig,
    ) -> Result<Self, AgentError> {
        if tokenizer.vocab_size() > model.config().vocab_size {
            return Err(AgentError::Input(format!(
                "tokenizer has {} tokens but the model only {}",
                tokenizer.vocab_size(),
                model.config().vocab_size
            )));
        }
        if let Some(s) = &decoding.sampling {
            s.validate(model.config().vocab_size)?;
        }
        let examples = ExampleConfig::new(model.config().max_seq_len);
        Ok(Self {
            model,
            tokenizer,
            examples,
            decoding,
        })
    }

    pub fn model(&self) -> &TransformerModel {
        &self.model
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// The reply to `history` (which should end with the user turn).
    pub fn reply(&self, persona: &[String], history: &[Turn]) -> Result<String, AgentError> {
        let max_new = self.decoding.max_new_tokens;
        let prompt = build_prompt(persona, history, &self.tokenizer, &self.examples, max_new)?;
        let eos = self.tokenizer.special().eos;
        let ids = match &self.decoding.sampling {
            None => greedy_decode(&self.model, &prompt, max_new, eos)?,
            Some(s) => {
                let cfg = SamplingConfig {
                    seed: s.seed.wrapping_add(history.len() as u64),
                    ..*s
                };
                sample_decode(&self.model, &prompt, max_new, eos, &cfg)?
            }
        };
        Ok(self.tokenizer.decode(&ids).trim().to_owned())
    }
}

impl DialogueAgent for ModelAgent {
    fn respond(&self, state: &mut ChatState, user_text: &str) -> Result<String, AgentError> {
        let text = user_text.trim();
        if text.is_empty() {
            return Err(AgentError::Input("empty message".into()));
        }
        let mut history = state.history.clone();
        history.push(Turn::user(text));
        let reply = self.reply(&state.persona, &history)?;
        history.push(Turn::bot(reply.clone()));
        state.history = history;
        Ok(reply)
    }
}

/// Deterministic stand-in model for service tests: replies with the
/// message reversed word by word.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoAgent;

impl EchoAgent {
    pub fn transform(text: &str) -> String {
        let words: Vec<&str> = text.split_whitespace().rev().collect();
        format!("echo: {}", words.join(" "))
    }
}

impl DialogueAgent for EchoAgent {
    fn respond(&self, state: &mut ChatState, user_text: &str) -> Result<String, AgentError> {
        let text = user_text.trim();
        if text.is_empty() {
            return Err(AgentError::Input("empty message".into()));
        }
        let reply = Self::transform(text);
        state.history.push(Turn::user(text));
        state.history.push(Turn::bot(reply.clone()));
        Ok(reply)
    }
}

/// A source-language agent wrapped with inbound (target to source) and
/// outbound (source to target) translation. History and persona stay in the
/// source language; each user turn is translated once.
pub struct TestOnSource<A> {
    inner: A,
    inbound: Box<dyn TranslationClient>,
    outbound: Box<dyn TranslationClient>,
}

impl<A: DialogueAgent> TestOnSource<A> {
    pub fn new(
        inner: A,
        inbound: Box<dyn TranslationClient>,
        outbound: Box<dyn TranslationClient>,
    ) -> Result<Self, AgentError> {
        if inbound.source() != outbound.target() || inbound.target() != outbound.source() {
            return Err(AgentError::Input(format!(
                "clients do not form a round trip: {}->{} and {}->{}",
                inbound.source(),
                inbound.target(),
                outbound.source(),
                outbound.target()
            )));
        }
        Ok(Self {
            inner,
            inbound,
            outbound,
        })
    }

    pub fn inner(&self) -> &A {
        &self.inner
    }
}

impl<A: DialogueAgent> DialogueAgent for TestOnSource<A> {
    fn respond(&self, state: &mut ChatState, user_text: &str) -> Result<String, AgentError> {
        let source_text = self.inbound.translate(user_text)?;
        let mut scratch = state.clone();
        let reply = self.inner.respond(&mut scratch, &source_text)?;
        let out = self.outbound.translate(&reply)?;
        *state = scratch;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    TestOnSource,
    TrainOnTarget,
    CrossLingualAdapters,
}

/// Everything needed to stand up one strategy for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub source_lang: String,
    pub target_lang: String,
    pub checkpoint: PathBuf,
    pub tokenizer: PathBuf,
    /// Language-adapter archives by language (cross-lingual only).
    #[serde(default)]
    pub lang_adapters: BTreeMap<String, PathBuf>,
    /// Client spec for target-to-source translation (test-on-source only).
    #[serde(default)]
    pub inbound: Option<String>,
    /// Client spec for source-to-target translation (test-on-source only).
    #[serde(default)]
    pub outbound: Option<String>,
    #[serde(default)]
    pub decoding: DecodingConfig,
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("invalid strategy config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Adapter(#[from] crate::adapters::AdapterError),
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        match self.kind {
            StrategyKind::TestOnSource => {
                if self.inbound.is_none() || self.outbound.is_none() {
                    return Err(StrategyError::Config(
                        "test_on_source needs both inbound and outbound translation clients".into(),
                    ));
                }
            }
            StrategyKind::CrossLingualAdapters => {
                for lang in [&self.source_lang, &self.target_lang] {
                    if !self.lang_adapters.contains_key(lang) {
                        return Err(StrategyError::Config(format!(
                            "cross_lingual_adapters needs a language-adapter checkpoint for {lang:?}"
                        )));
                    }
                }
            }
            StrategyKind::TrainOnTarget => {}
        }
        Ok(())
    }

    /// Loads checkpoints and clients and returns a ready agent that talks
    /// in the target language.
    pub fn build(&self) -> Result<Box<dyn DialogueAgent>, StrategyError> {
        self.validate()?;
        let tokenizer = Tokenizer::load(&self.tokenizer)?;
        let mut model = load_model(&self.checkpoint)?;
        match self.kind {
            StrategyKind::TestOnSource => {
                let inbound = client_from_spec(self.inbound.as_deref().unwrap_or_default())?;
                let outbound = client_from_spec(self.outbound.as_deref().unwrap_or_default())?;
                if inbound.source() != self.target_lang || outbound.target() != self.target_lang {
                    return Err(StrategyError::Config(format!(
                        "clients must translate {0}->{1} and {1}->{0}",
                        self.target_lang, self.source_lang
                    )));
                }
                let agent = ModelAgent::new(model, tokenizer, self.decoding)?;
                Ok(Box::new(TestOnSource::new(agent, inbound, outbound)?))
            }
            StrategyKind::TrainOnTarget => {
                Ok(Box::new(ModelAgent::new(model, tokenizer, self.decoding)?))
            }
            StrategyKind::CrossLingualAdapters => {
                for path in self.lang_adapters.values() {
                    model.load_adapters(path)?;
                }
                model.set_active_language(&self.target_lang)?;
                Ok(Box::new(ModelAgent::new(model, tokenizer, self.decoding)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CipherClient, IdentityClient};

    struct Failing;

    impl TranslationClient for Failing {
        fn source(&self) -> &str {
            "en"
        }
        fn target(&self) -> &str {
            "xx"
        }
        fn translate(&self, _: &str) -> Result<String, TranslationError> {
            Err(TranslationError {
                source_lang: "en".into(),
                target_lang: "xx".into(),
                reason: "service unavailable".into(),
            })
        }
    }

    #[test]
    fn echo_appends_both_turns() {
        let mut s = ChatState::new(vec!["i like tea .".into()]);
        assert_eq!(
            EchoAgent.respond(&mut s, " how are you ").unwrap(),
            "echo: you are how"
        );
        assert_eq!(
            s.history,
            vec![Turn::user("how are you"), Turn::bot("echo: you are how")]
        );
        assert!(matches!(
            EchoAgent.respond(&mut s, "  "),
            Err(AgentError::Input(_))
        ));
        assert_eq!(s.history.len(), 2);
    }

    #[test]
    fn test_on_source_keeps_source_history() {
        let agent = TestOnSource::new(
            EchoAgent,
            Box::new(CipherClient::decipher("xx", "en", 7)),
            Box::new(CipherClient::encipher("en", "xx", 7)),
        )
        .unwrap();
        let cipher = CipherClient::encipher("en", "xx", 7);
        let mut s = ChatState::default();
        let msg = cipher.translate("hello there").unwrap();
        let out = agent.respond(&mut s, &msg).unwrap();
        assert_eq!(out, cipher.translate("echo: there hello").unwrap());
        assert_eq!(s.history[0].text, "hello there");
    }

    #[test]
    fn failed_outbound_translation_leaves_state_untouched() {
        let agent = TestOnSource::new(
            EchoAgent,
            Box::new(IdentityClient::new("xx", "en")),
            Box::new(Failing),
        )
        .unwrap();
        let mut s = ChatState::default();
        let err = agent.respond(&mut s, "hi").unwrap_err();
        assert!(err.is_retryable());
        assert!(s.history.is_empty());
    }

    #[test]
    fn mismatched_clients_are_rejected() {
        let r = TestOnSource::new(
            EchoAgent,
            Box::new(IdentityClient::new("de", "en")),
            Box::new(IdentityClient::new("en", "fr")),
        );
        assert!(matches!(r, Err(AgentError::Input(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = StrategyConfig {
            kind: StrategyKind::TestOnSource,
            source_lang: "en".into(),
            target_lang: "xx".into(),
            checkpoint: "m.safetensors".into(),
            tokenizer: "t.json".into(),
            lang_adapters: BTreeMap::new(),
            inbound: Some("identity:xx:en".into()),
            outbound: None,
            decoding: DecodingConfig::default(),
        };
        assert!(c.validate().is_err());
        c.outbound = Some("identity:en:xx".into());
        c.validate().unwrap();
        c.kind = StrategyKind::CrossLingualAdapters;
        assert!(c.validate().is_err());
        c.lang_adapters.insert("en".into(), "en.safetensors".into());
        c.lang_adapters.insert("xx".into(), "xx.safetensors".into());
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<StrategyConfig>(&json).unwrap(), c);
    }
}
