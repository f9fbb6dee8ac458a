//! Caption tokenization, fixed-length encoding and masked-language masking.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

/// Default caption length, including `[CLS]` and padding.
pub const TEXT_LEN: usize = 128;

/// Lowercases and splits on whitespace; every punctuation character is a
/// token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `max_size - 4` most frequent tokens of `corpus`, ties
    /// broken lexicographically, after the four reserved tokens.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        if max_size < RESERVED.len() + 1 {
            return Err(Error::invalid(format!(
                "vocabulary size {max_size} cannot hold the reserved tokens plus content"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for caption in corpus {
            for tok in tokenize(caption.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS]` followed by the caption's tokens, padded with `[PAD]` to
    /// `len`. Captions longer than `len - 1` tokens keep their first
    /// `len - 1` tokens.
    pub fn encode(&self, caption: &str, len: usize) -> TokenSequence {
        assert!(len >= 1, "sequence length must leave room for [CLS]");
        let words = tokenize(caption);
        let keep = words.len().min(len - 1);
        let mut ids = Vec::with_capacity(len);
        ids.push(CLS);
        ids.extend(words[..keep].iter().map(|w| self.id(w)));
        let content = ids.len();
        ids.resize(len, PAD);
        let mut valid = vec![false; len];
        valid[..content].iter_mut().for_each(|v| *v = true);
        TokenSequence {
            ids,
            valid,
            mlm_labels: vec![None; len],
            masked_positions: Vec::new(),
            truncated: words.len() - keep,
        }
    }

    /// Content tokens of a sequence, skipping `[CLS]` and `[PAD]`.
    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids
            .iter()
            .zip(&seq.valid)
            .skip(1)
            .filter(|(_, &v)| v)
            .map(|(&id, _)| self.token(id).unwrap_or("[UNK]").to_string())
            .collect()
    }

    /// One `token<TAB>id` line per entry, in id order.
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err(n + 1, "expected token<TAB>id".into()))?;
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(n + 1, format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(parse_err(n + 1, format!("ids must be dense, expected {}", tokens.len())));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(parse_err(1, "reserved tokens must occupy ids 0-3".into()));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// Fixed-length token ids with padding flags and masked-language labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// False at `[PAD]` positions.
    pub valid: Vec<bool>,
    /// Original id at every selected position, `None` elsewhere.
    pub mlm_labels: Vec<Option<usize>>,
    pub masked_positions: Vec<usize>,
    /// Tokens dropped by truncation.
    pub truncated: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-`[CLS]`, non-`[PAD]` positions.
    pub fn content_len(&self) -> usize {
        self.valid.iter().skip(1).filter(|&&v| v).count()
    }

    /// Original ids at the masked positions, in position order.
    pub fn mlm_targets(&self) -> Vec<usize> {
        self.masked_positions
            .iter()
            .map(|&p| self.mlm_labels[p].expect("label recorded at every masked position"))
            .collect()
    }
}

/// Selects each content position independently with probability `ratio`;
/// selected tokens become `[MASK]` 80% of the time, a random content token
/// 10% and stay unchanged 10%. `[CLS]` and `[PAD]` are never selected.
pub fn apply_mlm_mask(
    seq: &TokenSequence,
    ratio: f64,
    vocab_len: usize,
    rng: &mut Rng,
) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("text mask ratio {ratio} outside [0, 1]")));
    }
    let mut out = seq.clone();
    out.mlm_labels = vec![None; seq.len()];
    out.masked_positions.clear();
    for pos in 1..seq.len() {
        if !seq.valid[pos] || !rng.gen_bool(ratio) {
            continue;
        }
        out.mlm_labels[pos] = Some(seq.ids[pos]);
        out.masked_positions.push(pos);
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            out.ids[pos] = MASK;
        } else if roll < 0.9 && vocab_len > RESERVED.len() {
            out.ids[pos] = rng.gen_range(RESERVED.len()..vocab_len);
        }
    }
    Ok(out)
}
