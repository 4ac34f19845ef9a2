use serde::{Deserialize, Serialize};

use super::DataError;

/// Ordered set of lowercase negation tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegationLexicon {
    words: Vec<String>,
}

impl Default for NegationLexicon {
    fn default() -> Self {
        Self {
            words: ["not", "no", "without", "never", "n't"].map(String::from).to_vec(),
        }
    }
}

impl NegationLexicon {
    pub fn new<I, S>(words: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<String> = Vec::new();
        for w in words {
            let w = w.into();
            if w.is_empty() || w != w.to_lowercase() || w.chars().any(char::is_whitespace) {
                return Err(DataError::Lexicon(format!("invalid token {w:?}")));
            }
            if out.contains(&w) {
                return Err(DataError::Lexicon(format!("duplicate token {w:?}")));
            }
            out.push(w);
        }
        if out.is_empty() {
            return Err(DataError::Lexicon("lexicon is empty".into()));
        }
        Ok(Self { words: out })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whether one already-normalized word token is a negation.
    pub fn is_negation(&self, token: &str) -> bool {
        self.words.iter().any(|w| w == token)
    }

    /// Number of negation tokens in `text`.
    pub fn count(&self, text: &str) -> usize {
        tokenize(text).iter().filter(|t| self.is_negation(t)).count()
    }

    pub fn contains_negation(&self, text: &str) -> bool {
        self.count(text) > 0
    }
}

/// Lowercased word tokens. Punctuation separates words (apostrophes excepted)
/// and an `n't` contraction is split off as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
    let mut out = Vec::new();
    for raw in lowered.split(|c: char| !(c.is_alphanumeric() || c == '\'')) {
        let word = raw.trim_matches('\'');
        if word.is_empty() {
            continue;
        }
        match word.strip_suffix("n't") {
            Some(stem) if !stem.is_empty() => {
                out.push(stem.to_string());
                out.push("n't".to_string());
            }
            _ => out.push(word.to_string()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_word_matching() {
        let lex = NegationLexicon::default();
        assert!(lex.contains_negation("the cat not in black"));
        assert!(!lex.contains_negation("a knot of rope"));
        assert!(!lex.contains_negation("Nothing here, notably"));
        assert!(lex.contains_negation("The man, NOT sitting."));
        assert!(lex.contains_negation("the dog that isn't brown"));
        assert!(lex.contains_negation("a cup without a handle"));
    }

    #[test]
    fn tokenizer_splits_contractions() {
        assert_eq!(tokenize("Doesn't  move!"), vec!["does", "n't", "move"]);
        assert_eq!(tokenize("“The man”"), vec!["the", "man"]);
    }

    #[test]
    fn rejects_bad_lexicons() {
        assert!(NegationLexicon::new(Vec::<String>::new()).is_err());
        assert!(NegationLexicon::new(["not", "not"]).is_err());
        assert!(NegationLexicon::new(["Not"]).is_err());
        assert!(NegationLexicon::new(["no"]).is_ok());
    }
}
