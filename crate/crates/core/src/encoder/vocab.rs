use std::collections::HashMap;
use std::path::Path;

use super::EncoderError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token table with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Vocabulary {
    /// Builds a vocabulary from `tokens` in first-seen order; duplicates and
    /// reserved tokens are skipped.
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocabulary {
            tokens: vec![PAD_TOKEN.into(), UNK_TOKEN.into()],
            index: HashMap::from([(PAD_TOKEN.into(), PAD), (UNK_TOKEN.into(), UNK)]),
        };
        for t in tokens {
            let t = t.as_ref();
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    /// Parses the id-ordered token list; reserved entries must come first.
    pub fn from_list(tokens: Vec<String>) -> Result<Self, EncoderError> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(EncoderError::Vocabulary(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(EncoderError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of `text`; out-of-vocabulary words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, EncoderError> {
        let ids: Vec<usize> = split_words(text).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            return Err(EncoderError::EmptyUtterance);
        }
        Ok(ids)
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>, EncoderError> {
        if words.is_empty() {
            return Err(EncoderError::EmptyUtterance);
        }
        Ok(words.iter().map(|w| self.id(w.as_ref())).collect())
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.tokens).expect("strings serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EncoderError> {
        let tokens: Vec<String> =
            serde_json::from_str(text).map_err(|e| EncoderError::Vocabulary(e.to_string()))?;
        Self::from_list(tokens)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EncoderError::Vocabulary(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json())
            .map_err(|e| EncoderError::Vocabulary(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::from_tokens(["credit", "limit"]);
        assert_eq!(v.tokenize("Credit Limit").unwrap(), [v.id("credit"), v.id("limit")]);
        assert_eq!(v.tokenize("zzzunknownzzz").unwrap(), [UNK]);
        assert_eq!(v.tokenize("credit-limit?!").unwrap(), [2, 3]);
        assert!(matches!(v.tokenize("  ?! "), Err(EncoderError::EmptyUtterance)));
        assert_ne!(UNK, PAD);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let v = Vocabulary::from_tokens(["a", "b", "a"]);
        assert_eq!(v.len(), 4);
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
        assert!(Vocabulary::from_json(r#"["a", "<unk>"]"#).is_err());
        assert!(Vocabulary::from_json(r#"["<pad>", "<unk>", "x", "x"]"#).is_err());
    }

    proptest! {
        #[test]
        fn detokenize_round_trip(words in proptest::collection::vec("[a-z0-9]{1,6}", 1..12)) {
            let v = Vocabulary::from_tokens(&words);
            let ids = v.encode_words(&words).unwrap();
            prop_assert_eq!(v.tokenize(&v.detokenize(&ids)).unwrap(), ids);
        }
    }
}
