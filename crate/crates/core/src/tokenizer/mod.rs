//! Byte-level BPE compatible with the published GPT-2 vocabulary.
//!
//! Text is split with the GPT-2 pre-tokenizer, each piece is mapped byte by
//! byte onto printable code points, and adjacent symbols are merged
//! greedily by merge rank until no ranked pair remains.

mod pretokenize;

use std::collections::HashMap;
use std::fmt;
use std::io::Read;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

pub use pretokenize::pretokenize;

pub type TokenId = u32;

/// The only special token GPT-2 defines.
pub const END_OF_TEXT: TokenId = 50256;
const END_OF_TEXT_NAME: &str = "<|endoftext|>";

/// Marker shown in place of a token's leading space.
pub const SPACE_MARKER: char = '·';

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab: malformed JSON: {0}")]
    MalformedVocab(String),
    #[error("vocab: duplicate key {key:?}")]
    DuplicateKey { key: String },
    #[error("vocab: duplicate id {id} for keys {first:?} and {second:?}")]
    DuplicateId {
        id: u64,
        first: String,
        second: String,
    },
    #[error("vocab: non-dense id space: id {missing} is missing (max id {max})")]
    NonDense { missing: u64, max: u64 },
    #[error("vocab: no symbol for byte 0x{byte:02x} ({symbol:?})")]
    MissingByte { byte: u8, symbol: char },
    #[error("merges: i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("merges line {line}: expected \"left right\", got {text:?}")]
    MalformedMerge { line: usize, text: String },
    #[error("merges line {line}: pair ({left:?}, {right:?}) references unknown symbol {symbol:?}")]
    UnknownSymbol {
        line: usize,
        left: String,
        right: String,
        symbol: String,
    },
    #[error("merges line {line}: duplicate pair ({left:?}, {right:?})")]
    DuplicateMerge {
        line: usize,
        left: String,
        right: String,
    },
    #[error("token id {id} out of range (vocabulary size {size})")]
    IdOutOfRange { id: TokenId, size: usize },
}

/// GPT-2's reversible byte → printable-code-point table.
///
/// Printable Latin-1 bytes map to themselves; the remaining 68 bytes are
/// shifted, in order, to U+0100 and up.
pub fn byte_to_unicode_table() -> [char; 256] {
    let printable = |b: u32| {
        (u32::from(b'!')..=u32::from(b'~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut table = ['\0'; 256];
    let mut shifted = 0u32;
    for b in 0..256u32 {
        let cp = if printable(b) {
            b
        } else {
            shifted += 1;
            255 + shifted
        };
        table[b as usize] = char::from_u32(cp).expect("below the surrogate range");
    }
    table
}

/// One token of an encoded sequence, ready for display.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenSpan {
    pub display: String,
    pub id: TokenId,
    /// The text this token contributes. Characters whose bytes straddle
    /// several tokens are attributed to the token holding their last byte,
    /// so the texts of a sequence concatenate to the decoded string.
    pub text: String,
}

pub const GPT2_VOCAB: &[u8] = include_bytes!("../../../../assets/gpt2/vocab.json");
pub const GPT2_MERGES: &[u8] = include_bytes!("../../../../assets/gpt2/merges.txt");

/// Immutable byte-level BPE vocabulary.
#[derive(Clone)]
pub struct BpeVocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    /// Raw bytes of every token.
    id_bytes: Vec<Vec<u8>>,
    /// (left id, right id) → (rank, merged id).
    merges: HashMap<(TokenId, TokenId), (u32, TokenId)>,
    byte_to_unicode: [char; 256],
    unicode_to_byte: HashMap<char, u8>,
    /// Token id of each single byte's symbol.
    byte_ids: [TokenId; 256],
}

impl fmt::Debug for BpeVocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BpeVocab")
            .field("tokens", &self.id_to_token.len())
            .field("merges", &self.merges.len())
            .finish()
    }
}

/// Vocabulary entries in file order, keeping duplicates visible.
struct VocabEntries(Vec<(String, u64)>);

impl<'de> Deserialize<'de> for VocabEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = VocabEntries;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object mapping token strings to non-negative integer ids")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<VocabEntries, A::Error> {
                let mut out = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((k, v)) = map.next_entry::<String, u64>()? {
                    out.push((k, v));
                }
                Ok(VocabEntries(out))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

impl BpeVocab {
    /// The published GPT-2 vocabulary, bundled with the crate.
    pub fn gpt2() -> Self {
        Self::load(GPT2_VOCAB, GPT2_MERGES).expect("bundled vocabulary is valid")
    }

    /// Load `vocab.json` and `merges.txt`.
    pub fn load(vocab_source: impl Read, merges_source: impl Read) -> Result<Self, TokenizerError> {
        let entries: VocabEntries = serde_json::from_reader(vocab_source)
            .map_err(|e| TokenizerError::MalformedVocab(e.to_string()))?;
        let mut merges_text = String::new();
        { merges_source }.read_to_string(&mut merges_text)?;
        Self::from_parts(entries.0, &merges_text)
    }

    fn from_parts(entries: Vec<(String, u64)>, merges_text: &str) -> Result<Self, TokenizerError> {
        let n = entries.len();
        let mut token_to_id = HashMap::with_capacity(n);
        let mut by_id: HashMap<u64, String> = HashMap::with_capacity(n);
        let mut max_id = 0u64;
        for (key, id) in entries {
            max_id = max_id.max(id);
            if token_to_id.contains_key(&key) {
                return Err(TokenizerError::DuplicateKey { key });
            }
            if let Some(first) = by_id.get(&id) {
                return Err(TokenizerError::DuplicateId {
                    id,
                    first: first.clone(),
                    second: key,
                });
            }
            by_id.insert(id, key.clone());
            token_to_id.insert(key, id as TokenId);
        }
        let id_to_token: Vec<String> = (0..n as u64)
            .map(|i| {
                by_id.remove(&i).ok_or(TokenizerError::NonDense {
                    missing: i,
                    max: max_id,
                })
            })
            .collect::<Result<_, _>>()?;

        let byte_to_unicode = byte_to_unicode_table();
        let unicode_to_byte: HashMap<char, u8> = byte_to_unicode
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        let mut byte_ids = [0; 256];
        for (b, &c) in byte_to_unicode.iter().enumerate() {
            byte_ids[b] = *token_to_id
                .get(c.to_string().as_str())
                .ok_or(TokenizerError::MissingByte {
                    byte: b as u8,
                    symbol: c,
                })?;
        }
        let id_bytes = id_to_token
            .iter()
            .map(|t| {
                t.chars()
                    .map(|c| unicode_to_byte.get(&c).copied())
                    .collect::<Option<Vec<u8>>>()
                    // Tokens outside the byte alphabet decode as their UTF-8.
                    .unwrap_or_else(|| t.as_bytes().to_vec())
            })
            .collect();

        let mut merges = HashMap::new();
        let mut rank = 0u32;
        for (idx, line) in merges_text.lines().enumerate() {
            let line_no = idx + 1;
            if (idx == 0 && line.starts_with('#')) || line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(left), Some(right), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(TokenizerError::MalformedMerge {
                    line: line_no,
                    text: line.to_string(),
                });
            };
            if left.is_empty() || right.is_empty() {
                return Err(TokenizerError::MalformedMerge {
                    line: line_no,
                    text: line.to_string(),
                });
            }
            let lookup = |s: &str| {
                token_to_id
                    .get(s)
                    .copied()
                    .ok_or_else(|| TokenizerError::UnknownSymbol {
                        line: line_no,
                        left: left.to_string(),
                        right: right.to_string(),
                        symbol: s.to_string(),
                    })
            };
            let l = lookup(left)?;
            let r = lookup(right)?;
            let merged = lookup(&format!("{left}{right}"))?;
            if merges.insert((l, r), (rank, merged)).is_some() {
                return Err(TokenizerError::DuplicateMerge {
                    line: line_no,
                    left: left.to_string(),
                    right: right.to_string(),
                });
            }
            rank += 1;
        }

        Ok(Self {
            token_to_id,
            id_to_token,
            id_bytes,
            merges,
            byte_to_unicode,
            unicode_to_byte,
            byte_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// The vocabulary string (byte-to-unicode form) of `id`.
    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn token_bytes(&self, id: TokenId) -> Result<&[u8], TokenizerError> {
        self.id_bytes
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            })
    }

    /// Merge priority of a symbol pair; lower merges first.
    pub fn merge_rank(&self, left: &str, right: &str) -> Option<u32> {
        let l = self.token_id(left)?;
        let r = self.token_id(right)?;
        self.merges.get(&(l, r)).map(|&(rank, _)| rank)
    }

    pub fn byte_to_unicode(&self, byte: u8) -> char {
        self.byte_to_unicode[byte as usize]
    }

    pub fn unicode_to_byte(&self, c: char) -> Option<u8> {
        self.unicode_to_byte.get(&c).copied()
    }

    /// Encode text to token ids. Never fails and never emits special tokens.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for piece in pretokenize(text) {
            self.encode_piece(piece, &mut ids);
        }
        ids
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<TokenId>) {
        let mut word: Vec<TokenId> = piece.bytes().map(|b| self.byte_ids[b as usize]).collect();
        while word.len() > 1 {
            // Lowest rank wins; ties go to the leftmost pair.
            let best = word
                .windows(2)
                .filter_map(|w| self.merges.get(&(w[0], w[1])).copied())
                .min_by_key(|&(rank, _)| rank);
            let Some((best_rank, merged)) = best else {
                break;
            };
            let mut next = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len()
                    && self.merges.get(&(word[i], word[i + 1])).map(|m| m.0) == Some(best_rank)
                {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(word[i]);
                    i += 1;
                }
            }
            word = next;
        }
        out.extend(word);
    }

    fn collect_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(bytes)
    }

    /// Decode ids to text. Invalid UTF-8 becomes U+FFFD only in the final
    /// conversion, so multi-token characters survive.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let bytes = self.collect_bytes(ids)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Human-readable label for a single token: leading space shown as
    /// [`SPACE_MARKER`], control characters escaped.
    pub fn token_display(&self, id: TokenId) -> Result<String, TokenizerError> {
        if id == END_OF_TEXT && self.len() > END_OF_TEXT as usize {
            return Ok(END_OF_TEXT_NAME.to_string());
        }
        let text = String::from_utf8_lossy(self.token_bytes(id)?).into_owned();
        Ok(display_text(&text))
    }

    /// Encode and attach text and display labels to every token.
    pub fn spans(&self, ids: &[TokenId]) -> Result<Vec<TokenSpan>, TokenizerError> {
        let mut spans = Vec::with_capacity(ids.len());
        let mut pending: Vec<u8> = Vec::new();
        for &id in ids {
            pending.extend_from_slice(self.token_bytes(id)?);
            let text = take_complete_utf8(&mut pending);
            spans.push(TokenSpan {
                id,
                text,
                display: self.token_display(id)?,
            });
        }
        if !pending.is_empty() {
            if let Some(last) = spans.last_mut() {
                last.text.push_str(&String::from_utf8_lossy(&pending));
            }
        }
        Ok(spans)
    }
}

/// Remove and return the longest prefix of `pending` that is complete UTF-8.
/// Bytes that can never become valid are flushed as U+FFFD.
fn take_complete_utf8(pending: &mut Vec<u8>) -> String {
    match std::str::from_utf8(pending) {
        Ok(s) => {
            let s = s.to_string();
            pending.clear();
            s
        }
        Err(e) if e.error_len().is_none() => {
            // Trailing incomplete sequence: keep it for the next token.
            let valid = e.valid_up_to();
            let s = String::from_utf8_lossy(&pending[..valid]).into_owned();
            pending.drain(..valid);
            s
        }
        Err(_) => {
            // An invalid sequence in the middle; split off any incomplete tail.
            let keep = incomplete_tail_len(pending);
            let cut = pending.len() - keep;
            let s = String::from_utf8_lossy(&pending[..cut]).into_owned();
            pending.drain(..cut);
            s
        }
    }
}

fn incomplete_tail_len(bytes: &[u8]) -> usize {
    for back in 1..=3.min(bytes.len()) {
        let b = bytes[bytes.len() - back];
        let need = match b {
            0xC0..=0xDF => 2,
            0xE0..=0xEF => 3,
            0xF0..=0xF7 => 4,
            0x80..=0xBF => continue,
            _ => return 0,
        };
        return if need > back { back } else { 0 };
    }
    0
}

fn display_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    for (i, c) in text.chars().enumerate() {
        match c {
            ' ' if i == 0 => out.push(SPACE_MARKER),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_control() => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A toy vocabulary: 256 byte symbols (ids 0..=255), then merges.
    fn toy_vocab(extra: &[&str], merges: &str) -> Result<BpeVocab, TokenizerError> {
        let table = byte_to_unicode_table();
        let mut entries: Vec<(String, u64)> = table
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as u64))
            .collect();
        for (i, t) in extra.iter().enumerate() {
            entries.push((t.to_string(), 256 + i as u64));
        }
        BpeVocab::from_parts(entries, merges)
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let table = byte_to_unicode_table();
        let mut seen: Vec<char> = table.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(table[b'A' as usize], 'A');
        assert_eq!(table[b' ' as usize], 'Ġ');
        assert_eq!(table[b'\n' as usize], 'Ċ');
        assert_eq!(table[0], 'Ā');
    }

    #[test]
    fn merge_loop_prefers_lowest_rank_then_leftmost() {
        let v = toy_vocab(&["ab", "bc", "abc"], "#version: 0.2\nb c\na b\nab c\n").unwrap();
        // "bc" outranks "ab": a + bc, and "a bc" is not a merge.
        assert_eq!(v.encode("abc"), vec![97, 257]);
        let v = toy_vocab(&["ab", "abab"], "#version\na b\nab ab\n").unwrap();
        assert_eq!(v.encode("ababab"), vec![257, 256]);
        let v = toy_vocab(&["aa"], "#h\na a\n").unwrap();
        assert_eq!(v.encode("aaa"), vec![256, 97]);
    }

    #[test]
    fn load_rejects_gap_in_ids() {
        let err = BpeVocab::load(r#"{"a": 0, "b": 2}"#.as_bytes(), "#v\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("non-dense id space"), "{err}");
    }

    #[test]
    fn load_rejects_duplicate_ids_and_keys() {
        let err = BpeVocab::load(r#"{"a": 0, "b": 0}"#.as_bytes(), "".as_bytes()).unwrap_err();
        assert!(matches!(err, TokenizerError::DuplicateId { id: 0, .. }), "{err}");
        let err = BpeVocab::load(r#"{"a": 0, "a": 1}"#.as_bytes(), "".as_bytes()).unwrap_err();
        assert!(matches!(err, TokenizerError::DuplicateKey { .. }), "{err}");
        let err = BpeVocab::load(r#"{"a": 0,"#.as_bytes(), "".as_bytes()).unwrap_err();
        assert!(matches!(err, TokenizerError::MalformedVocab(_)), "{err}");
    }

    #[test]
    fn load_rejects_unknown_merge_result() {
        let err = toy_vocab(&[], "#version: 0.2\nab cd\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("\"ab\"") && msg.contains("\"cd\""), "{msg}");
        let err = toy_vocab(&["ab"], "#v\na b\nab c\n").unwrap_err();
        assert!(err.to_string().contains("\"abc\""), "{err}");
        let err = toy_vocab(&[], "#v\nabc\n").unwrap_err();
        assert!(matches!(err, TokenizerError::MalformedMerge { line: 2, .. }));
    }

    #[test]
    fn missing_byte_symbols_are_rejected() {
        let err = BpeVocab::load(r#"{"a": 0}"#.as_bytes(), "".as_bytes()).unwrap_err();
        assert!(matches!(err, TokenizerError::MissingByte { .. }), "{err}");
    }

    #[test]
    fn decode_and_spans() {
        let v = toy_vocab(&["Ġw"], "#v\nĠ w\n").unwrap();
        let ids = v.encode("a w\n");
        assert_eq!(ids, vec![97, 256, 10]);
        assert_eq!(v.decode(&ids).unwrap(), "a w\n");
        let spans = v.spans(&ids).unwrap();
        let displays: Vec<_> = spans.iter().map(|s| s.display.as_str()).collect();
        assert_eq!(displays, ["a", "·w", "\\n"]);
        assert!(v.decode(&[9999]).is_err());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn spans_attribute_split_characters_to_their_last_byte() {
        let v = toy_vocab(&[], "#v\n").unwrap();
        let ids = v.encode("é!"); // 0xC3 0xA9 '!' as three byte tokens
        assert_eq!(ids.len(), 3);
        let spans = v.spans(&ids).unwrap();
        assert_eq!(spans[0].text, "");
        assert_eq!(spans[1].text, "é");
        assert_eq!(spans[2].text, "!");
        assert_eq!(spans[0].display, "\u{fffd}");
        // A lone lead byte decodes with a replacement character.
        assert_eq!(v.decode(&[ids[0]]).unwrap(), "\u{fffd}");
    }

    #[test]
    fn display_escapes_controls() {
        assert_eq!(display_text(" world"), "·world");
        assert_eq!(display_text("\u{1b}[0m"), "\\u{1b}[0m");
        assert_eq!(display_text("a b"), "a b");
    }
}
