use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::model::{EOS, NUM_SPECIALS, UNK};
use crate::{Error, Result};

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective token/id map. Ids 0..4 are the specials; regular tokens follow
/// in descending frequency, ties in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
    min_count: u64,
}

impl Vocab {
    pub fn build<'a, I, S>(sequences: I, min_count: u64) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for seq in sequences {
            for t in seq {
                *freq.entry(t.as_ref()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; NUM_SPECIALS];
        for (t, c) in kept {
            tokens.push(t.to_string());
            counts.push(c);
        }
        Self::from_parts(tokens, counts, min_count)
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, min_count: u64) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab {
            tokens,
            counts,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Tokens for `ids`, stopping at the first EOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK as usize]).to_string())
            .collect()
    }

    /// `token<TAB>id<TAB>count` per line, in id order.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            s.push_str(&format!("{t}\t{i}\t{c}\n"));
        }
        s
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f[0].is_empty() {
                return Err(parse_err(n + 1, "expected token<TAB>id<TAB>count".into()));
            }
            let id: usize = f[1].parse().map_err(|_| parse_err(n + 1, format!("bad id {:?}", f[1])))?;
            if id != n {
                return Err(parse_err(n + 1, format!("id {id} out of order")));
            }
            if n < NUM_SPECIALS && f[0] != SPECIAL_TOKENS[n] {
                return Err(parse_err(n + 1, format!("expected special token {}", SPECIAL_TOKENS[n])));
            }
            let c: u64 = f[2].parse().map_err(|_| parse_err(n + 1, format!("bad count {:?}", f[2])))?;
            tokens.push(f[0].to_string());
            counts.push(c);
        }
        if tokens.len() < NUM_SPECIALS {
            return Err(parse_err(tokens.len() + 1, "missing special tokens".into()));
        }
        let min_count = counts[NUM_SPECIALS..].iter().copied().min().unwrap_or(1);
        let v = Self::from_parts(tokens, counts, min_count);
        if v.index.len() != v.tokens.len() {
            return Err(parse_err(0, "duplicate token".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }

    /// SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect()
    }

    #[test]
    fn threshold_and_order() {
        let c = corpus(&["a a a a b b b b b", "c c c c c d", "e e e e"]);
        let v = Vocab::build(c.iter().map(|s| &s[..]), 5);
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(4), Some("b"));
        assert_eq!(v.token(5), Some("c"));
        assert_eq!(v.id("a"), UNK);
        assert_eq!(v.id("d"), UNK);
        let all = Vocab::build(c.iter().map(|s| &s[..]), 1);
        assert_eq!(all.len(), 5 + NUM_SPECIALS);
        // Equal counts break ties lexicographically.
        assert_eq!(all.token(4), Some("b"));
        assert_eq!(all.token(5), Some("c"));
        assert_eq!(all.token(6), Some("a"));
        assert_eq!(all.token(7), Some("e"));
    }

    #[test]
    fn rebuild_is_identical_and_round_trips() {
        let c = corpus(&["x y z x y", "z z q", "y x q q"]);
        let a = Vocab::build(c.iter().map(|s| &s[..]), 1);
        let b = Vocab::build(c.iter().rev().map(|s| &s[..]), 1);
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert_eq!(a.hash(), b.hash());
        let back = Vocab::from_tsv(&a.to_tsv(), Path::new("v.tsv")).unwrap();
        assert_eq!(back.to_tsv(), a.to_tsv());
        let ids = a.encode(&c[0]);
        assert_eq!(a.decode(&ids), c[0]);
    }

    #[test]
    fn malformed_vocab_reports_line() {
        let err = Vocab::from_tsv("<pad>\t0\t0\n<bos>\t1\n", Path::new("v.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
