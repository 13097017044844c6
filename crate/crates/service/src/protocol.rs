use serde_json::{json, Value};

pub const MIN_BACK_AND_FORTHS: usize = 20;
pub const EXTRA_INPUTS_AFTER_HALLUCINATION: usize = 2;

/// The tester and annotator guide served at `/protocol`.
pub fn protocol_document(quota: usize) -> Value {
    json!({
        "testers": {
            "blind": "You are not told which model you are talking to.",
            "opening": "Start each conversation with a different sentence.",
            "persona": "You may ask for a persona to inspire the conversation; it is optional.",
            "length": format!("Keep each conversation going for at least {MIN_BACK_AND_FORTHS} back-and-forths."),
            "early_stop": format!(
                "If the bot starts to hallucinate, send {EXTRA_INPUTS_AFTER_HALLUCINATION} more messages. \
                 If it does not recover, end the conversation with reason hallucination_early_stop."
            ),
            "hallucination": "The bot states things that are unsupported, contradictory or unrelated to the \
                 conversation, or loses track of who it is.",
        },
        "annotators": {
            "scale": "Rate each criterion from 1 (worst) to 5 (best).",
            "criteria": {
                "coherence": "Are there hallucinations? How well does the bot express itself? Are answers \
                     coherent even when not factual? Does the personality stay the same from start to end? \
                     Does it change the subject too often?",
                "engagingness": "Is the bot engaged in the conversation? Are its answers constructive rather \
                     than vague (\"okay\", \"yes\", \"maybe\", \"?\")? Does it restart the conversation when it stalls?",
                "humanness": "How much does it feel like a conversation between two people? Is the bot repetitive?",
            },
            "raters_per_conversation": quota,
            "separation": "Annotators rate conversations collected by other people.",
        },
    })
}
