use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Placeholder that replaces anonymized tokens.
pub const ANON: usize = 2;
pub const CLS: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
pub const NUM_RESERVED: usize = 6;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<anon>", "<cls>", "<s>", "</s>"];

/// Closed token inventory. Ids `0..NUM_RESERVED` are the reserved symbols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved symbols.
    pub fn new() -> Self {
        Vocab::from(RESERVED.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    /// Reserved symbols followed by `n` tokens named `{prefix}{i}`.
    pub fn synthetic(prefix: &str, n: usize) -> Self {
        let mut v = Vocab::new();
        for i in 0..n {
            v.intern(&format!("{prefix}{i}"));
        }
        v
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Maps unknown tokens to [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Index {
            op: "vocab",
            index: id,
            size: self.tokens.len(),
        })
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
