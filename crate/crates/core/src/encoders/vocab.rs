use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
/// End of a dialogue turn inside a context sequence.
pub const EOT: u32 = 4;

const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOT]"];

/// Token to id map with the reserved ids above at fixed positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

/// Splits on whitespace; pieces containing non-ASCII characters fall back to
/// one token per character.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        if piece.is_ascii() {
            out.push(piece.to_string());
        } else {
            out.extend(piece.chars().map(String::from));
        }
    }
    out
}

impl Default for Vocabulary {
    fn default() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }
}

impl Vocabulary {
    /// Collects every token of `texts`; non-reserved ids follow lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(pretokenize(t));
        }
        let mut v = Self::default();
        for tok in set {
            v.insert(tok);
        }
        v
    }

    fn insert(&mut self, tok: String) {
        if !self.ids.contains_key(&tok) {
            self.ids.insert(tok.clone(), self.tokens.len() as u32);
            self.tokens.push(tok);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, tok: &str) -> u32 {
        self.ids.get(tok).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Encodes dialogue turns as `[CLS] t1 [EOT] t2 ... [SEP]`, keeping the
    /// most recent `max_len - 2` content tokens.
    pub fn encode_turns<S: AsRef<str>>(&self, turns: &[S], max_len: usize) -> Vec<u32> {
        let mut content = Vec::new();
        for (i, turn) in turns.iter().enumerate() {
            if i > 0 {
                content.push(EOT);
            }
            content.extend(pretokenize(turn.as_ref()).iter().map(|t| self.id(t)));
        }
        let keep = max_len.saturating_sub(2);
        let start = content.len().saturating_sub(keep);
        let mut out = Vec::with_capacity(content.len() - start + 2);
        out.push(CLS);
        out.extend_from_slice(&content[start..]);
        out.push(SEP);
        out
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        self.encode_turns(&[text], max_len)
    }

    /// One `token<TAB>id` line per entry, in id order.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(t);
            s.push('\t');
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Data(format!("vocabulary line {} has no id", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Data(format!("vocabulary line {} has a bad id", n + 1)))?;
            if id != n {
                return Err(Error::Data(format!(
                    "vocabulary ids must be dense and sorted; line {} has id {id}",
                    n + 1
                )));
            }
            ids.insert(tok.to_string(), id as u32);
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary is missing reserved tokens".into()));
        }
        Ok(Self { tokens, ids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_cls_sep() {
        let v = Vocabulary::build(["a b c"]);
        assert_eq!(v.encode("", 256), vec![CLS, SEP]);
    }

    #[test]
    fn turns_are_joined_with_eot() {
        let v = Vocabulary::build(["a b", "c"]);
        let ids = v.encode_turns(&["a b", "c"], 256);
        assert_eq!(ids, vec![CLS, v.id("a"), v.id("b"), EOT, v.id("c"), SEP]);
    }

    #[test]
    fn long_context_keeps_the_most_recent_tokens() {
        let words: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let v = Vocabulary::build([text.as_str()]);
        let ids = v.encode(&text, 256);
        assert_eq!(ids.len(), 256);
        assert_eq!(ids[1], v.id("w146"));
        assert_eq!(ids[254], v.id("w399"));
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocabulary::build(["x"]);
        assert_eq!(v.encode("x y", 16), vec![CLS, v.id("x"), UNK, SEP]);
    }

    #[test]
    fn non_ascii_falls_back_to_characters() {
        assert_eq!(pretokenize("你好 ok"), vec!["你", "好", "ok"]);
    }

    #[test]
    fn lines_round_trip() {
        let v = Vocabulary::build(["b a c", "你"]);
        let back = Vocabulary::from_lines(&v.to_lines()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.token(PAD), Some("[PAD]"));
        assert_eq!(back.token(EOT), Some("[EOT]"));
    }
}
