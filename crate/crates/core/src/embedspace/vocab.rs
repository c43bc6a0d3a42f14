//! Fixed caption vocabulary: palette color names, shape and size words,
//! and the edit verbs. Serialized as a plain JSON token list.

use anyhow::{ensure, Context, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            ensure!(index.insert(t.clone(), i).is_none(), "duplicate vocabulary token {:?}", t);
        }
        Ok(Vocab { tokens, index })
    }

    /// The built-in caption vocabulary. Token ids are frozen by this order.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> =
            crate::scenes::NAMED_COLORS.iter().map(|(n, _)| n.to_string()).collect();
        for w in ["sphere", "box", "small", "large", "empty", "recolor", "remove", "enlarge"] {
            tokens.push(w.to_string());
        }
        Vocab::new(tokens).unwrap()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| self.id(w).with_context(|| format!("word {:?} not in vocabulary", w)))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&i| {
                self.tokens
                    .get(i)
                    .map(|s| s.as_str())
                    .with_context(|| format!("token id {} outside vocabulary of {}", i, self.len()))
            })
            .collect()
    }

    /// Bag-of-tokens count matrix [B, V] for a batch of token sequences.
    pub fn multi_hot(&self, seqs: &[Vec<usize>]) -> Result<crate::numerics::NdArray> {
        let v = self.len();
        let mut out = crate::numerics::NdArray::zeros(&[seqs.len(), v]);
        for (b, seq) in seqs.iter().enumerate() {
            for &id in seq {
                ensure!(id < v, "token id {} outside vocabulary of {}", id, v);
                out.data[b * v + id] += 1.0;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.tokens)?)
            .with_context(|| format!("writing vocabulary {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading vocabulary {}", path.display()))?;
        let tokens: Vec<String> = serde_json::from_str(&text)
            .with_context(|| format!("parsing vocabulary {}", path.display()))?;
        Vocab::new(tokens)
    }
}
