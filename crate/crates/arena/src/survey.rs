use serde::{Deserialize, Serialize};

use crate::error::ArenaError;

pub const QUESTIONS: [&str; 10] = [
    "Was Alice an effective negotiator?",
    "How fair was Alice to you?",
    "Was Alice a pushover?",
    "How would you rate the difficulty of the negotiation?",
    "How fair was Alice to BOTH players?",
    "Did Alice's negotiation strategy seem novel?",
    "If you could have Alice represent you in a negotiation similar to the one you just completed, how likely would you be let it represent you?",
    "How much of an expert negotiator would you consider Alice to be?",
    "How would you describe Alice's negotiation strategy?",
    "Any comments?",
];

pub const LIKERT_ITEMS: usize = 8;
pub const LIKERT_MIN: u8 = 1;
pub const LIKERT_MAX: u8 = 5;

/// Eight five-point ratings followed by two free-text answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyAnswers {
    pub likert: Vec<u8>,
    #[serde(default)]
    pub strategy: String,
    #[serde(default)]
    pub comments: String,
}

impl SurveyAnswers {
    pub fn validate(&self) -> Result<(), ArenaError> {
        if self.likert.len() != LIKERT_ITEMS {
            return Err(ArenaError::Invalid(format!(
                "expected {LIKERT_ITEMS} ratings, got {}",
                self.likert.len()
            )));
        }
        if let Some((i, v)) = self.likert.iter().enumerate().find(|(_, v)| !(LIKERT_MIN..=LIKERT_MAX).contains(*v)) {
            return Err(ArenaError::Invalid(format!(
                "rating {} for question {} is outside {LIKERT_MIN}..={LIKERT_MAX}",
                v,
                i + 1
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_questions_two_free_text() {
        assert_eq!(QUESTIONS.len(), 10);
        assert_eq!(QUESTIONS.len() - LIKERT_ITEMS, 2);
        assert_eq!(QUESTIONS[0], "Was Alice an effective negotiator?");
        assert_eq!(QUESTIONS[9], "Any comments?");
    }

    #[test]
    fn likert_bounds() {
        let ok = SurveyAnswers { likert: vec![1, 2, 3, 4, 5, 5, 4, 3], strategy: "tough".into(), comments: String::new() };
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.likert[3] = 6;
        assert!(bad.validate().is_err());
        bad.likert[3] = 0;
        assert!(bad.validate().is_err());
        let short = SurveyAnswers { likert: vec![3; 7], ..ok };
        assert!(short.validate().is_err());
    }
}
