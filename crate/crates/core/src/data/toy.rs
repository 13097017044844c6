//! Synthetic persona dialogues and monolingual text for desk-scale runs.
//!
//! Every persona fixes one value per attribute; the user asks about
//! attributes and the bot answers from its persona, so replies are fully
//! determined by persona plus question and a small model can learn them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Dialogue, Split, Turn};

struct Attribute {
    values: &'static [&'static str],
    fact: &'static str,
    questions: &'static [&'static str],
    answer: &'static str,
}

const ATTRIBUTES: &[Attribute] = &[
    Attribute {
        values: &[
            "music", "chess", "hiking", "cooking", "painting", "swimming", "reading", "dancing",
        ],
        fact: "i like {} .",
        questions: &["what do you like to do ?", "what is your hobby ?"],
        answer: "i really like {} .",
    },
    Attribute {
        values: &[
            "red", "blue", "green", "yellow", "purple", "orange", "black", "white",
        ],
        fact: "my favorite color is {} .",
        questions: &["what is your favorite color ?", "which color do you like ?"],
        answer: "my favorite color is {} .",
    },
    Attribute {
        values: &["dog", "cat", "parrot", "rabbit", "turtle", "hamster"],
        fact: "i have a {} .",
        questions: &["do you have a pet ?", "what pet do you have ?"],
        answer: "yes , i have a {} .",
    },
    Attribute {
        values: &["paris", "london", "berlin", "madrid", "rome", "tokyo"],
        fact: "i live in {} .",
        questions: &["where do you live ?", "which city are you from ?"],
        answer: "i live in {} .",
    },
    Attribute {
        values: &[
            "teacher", "doctor", "farmer", "pilot", "baker", "nurse", "singer",
        ],
        fact: "i work as a {} .",
        questions: &["what do you do for a living ?", "what is your job ?"],
        answer: "i am a {} .",
    },
    Attribute {
        values: &["pizza", "pasta", "sushi", "salad", "soup", "cake"],
        fact: "i love eating {} .",
        questions: &["what do you like to eat ?", "what is your favorite food ?"],
        answer: "i love {} .",
    },
];

const GREETINGS: &[&str] = &["hi !", "hello !", "hey there !"];
const GREETING_REPLY: &str = "hello , how are you ?";
const SMALL_TALK: &[&str] = &["i am fine , thanks .", "i am good , and you ?"];
const SMALL_TALK_REPLY: &str = "i am great , thank you .";
const FAREWELL: &str = "bye !";
const FAREWELL_REPLY: &str = "goodbye , nice talking to you .";

fn fill(template: &str, value: &str) -> String {
    template.replace("{}", value)
}

fn dialogue(rng: &mut ChaCha8Rng) -> Dialogue {
    let values: Vec<&str> = ATTRIBUTES
        .iter()
        .map(|a| *a.values.choose(rng).expect("values"))
        .collect();
    let mut order: Vec<usize> = (0..ATTRIBUTES.len()).collect();
    order.shuffle(rng);
    let persona = order[..4]
        .iter()
        .map(|&i| fill(ATTRIBUTES[i].fact, values[i]))
        .collect();

    let mut asked = order[..4].to_vec();
    asked.shuffle(rng);
    let n_questions = rng.gen_range(2..=4);
    let mut turns = vec![
        Turn::user(*GREETINGS.choose(rng).expect("greetings")),
        Turn::bot(GREETING_REPLY),
        Turn::user(*SMALL_TALK.choose(rng).expect("small talk")),
        Turn::bot(SMALL_TALK_REPLY),
    ];
    for &i in &asked[..n_questions] {
        let a = &ATTRIBUTES[i];
        turns.push(Turn::user(*a.questions.choose(rng).expect("questions")));
        turns.push(Turn::bot(fill(a.answer, values[i])));
    }
    turns.push(Turn::user(FAREWELL));
    turns.push(Turn::bot(FAREWELL_REPLY));
    Dialogue { persona, turns }
}

/// `n` synthetic dialogues; the same seed always yields the same corpus.
pub fn persona_corpus(language: &str, split: Split, n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogues = (0..n).map(|_| dialogue(&mut rng)).collect();
    Corpus::new(language, split, dialogues)
}

/// Monolingual sentences over the same vocabulary as [`persona_corpus`].
pub fn text_lines(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a = ATTRIBUTES.choose(&mut rng).expect("attributes");
            let v = *a.values.choose(&mut rng).expect("values");
            match rng.gen_range(0..5) {
                0 => fill(a.fact, v),
                1 => fill(a.answer, v),
                2 => a.questions.choose(&mut rng).expect("questions").to_string(),
                3 => {
                    let b = ATTRIBUTES.choose(&mut rng).expect("attributes");
                    let w = *b.values.choose(&mut rng).expect("values");
                    format!(
                        "{} and {}",
                        fill(a.fact, v).trim_end_matches(" ."),
                        fill(b.fact, w)
                    )
                }
                _ => format!("{} {}", GREETING_REPLY, SMALL_TALK_REPLY),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_valid_and_reproducible() {
        let a = persona_corpus("en", Split::Train, 20, 5);
        assert_eq!(a, persona_corpus("en", Split::Train, 20, 5));
        assert_ne!(a, persona_corpus("en", Split::Train, 20, 6));
        for d in &a.dialogues {
            d.validate().unwrap();
            assert_eq!(d.persona.len(), 4);
        }
        assert_eq!(text_lines(10, 1), text_lines(10, 1));
    }

    #[test]
    fn answers_come_from_the_persona() {
        let c = persona_corpus("en", Split::Train, 30, 9);
        for d in &c.dialogues {
            for i in d.bot_turns().skip(2) {
                let reply = &d.turns[i].text;
                if reply == FAREWELL_REPLY {
                    continue;
                }
                let value = reply.trim_end_matches(" .").rsplit(' ').next().unwrap();
                assert!(
                    d.persona.iter().any(|p| p.contains(value)),
                    "{reply} not in {:?}",
                    d.persona
                );
            }
        }
    }
}
