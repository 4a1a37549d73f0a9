//! Lower-cased byte-level BPE in the CLIP format.
//!
//! Text is cleaned (whitespace collapsed, lower-cased), split with the CLIP
//! pre-tokenization pattern, mapped byte-wise onto printable unicode
//! symbols, and merged by rank. The vocabulary layout follows the reference
//! implementation: 256 byte symbols, the same 256 with an end-of-word
//! marker, one entry per merge, then the start/end-of-text markers. A merges
//! file in the reference format (`#version` header followed by one
//! space-separated pair per line) loads unchanged.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use regex::Regex;

use crate::error::{DuetError, Result};

pub const START_OF_TEXT: &str = "<|startoftext|>";
pub const END_OF_TEXT: &str = "<|endoftext|>";
const END_OF_WORD: &str = "</w>";
const PATTERN: &str =
    r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+";

/// Printable stand-in for every byte value, as used by byte-level BPE,
/// listed in reference vocabulary order.
fn byte_symbol_order() -> Vec<(u8, char)> {
    let mut printable: Vec<u32> = (u32::from(b'!')..=u32::from(b'~'))
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut mapped = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            mapped.push(256 + extra);
            extra += 1;
        }
    }
    printable
        .into_iter()
        .zip(mapped)
        .map(|(b, c)| (b as u8, char::from_u32(c).expect("valid scalar")))
        .collect()
}

fn bytes_to_unicode() -> Vec<char> {
    let mut table = vec![' '; 256];
    for (b, c) in byte_symbol_order() {
        table[b as usize] = c;
    }
    table
}

/// Collapses whitespace runs and lower-cases.
pub fn clean_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    byte_symbols: Vec<char>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    encoder: HashMap<String, u32>,
    pattern: Regex,
}

impl BpeTokenizer {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let order = byte_symbol_order();
        let mut vocab: Vec<String> = order.iter().map(|(_, c)| c.to_string()).collect();
        vocab.extend(order.iter().map(|(_, c)| format!("{c}{END_OF_WORD}")));
        let byte_symbols = bytes_to_unicode();
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push(START_OF_TEXT.to_string());
        vocab.push(END_OF_TEXT.to_string());
        let encoder = vocab
            .into_iter()
            .enumerate()
            .map(|(i, tok)| (tok, i as u32))
            .collect();
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, pair)| (pair, i))
            .collect();
        Self {
            byte_symbols,
            merges,
            ranks,
            encoder,
            pattern: Regex::new(PATTERN).expect("static pattern"),
        }
    }

    /// Parses a merges file. `limit` caps the number of merges read, which is
    /// how the reference tokenizer truncates its published file.
    pub fn from_merges_str(text: &str, limit: Option<usize>) -> Result<Self> {
        let mut merges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => merges.push((a.to_string(), b.to_string())),
                _ => {
                    return Err(DuetError::Config(format!(
                        "malformed merge on line {}: {line:?}",
                        lineno + 1
                    )))
                }
            }
            if limit.is_some_and(|l| merges.len() >= l) {
                break;
            }
        }
        Ok(Self::from_merges(merges))
    }

    pub fn load(path: &Path, limit: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DuetError::load(path, e))?;
        Self::from_merges_str(&text, limit)
    }

    pub fn merges_to_string(&self) -> String {
        let mut out = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        out
    }

    /// Learns `max_merges` merges from a corpus by repeatedly fusing the most
    /// frequent adjacent symbol pair. Ties break on the lexicographically
    /// smallest pair so the result is reproducible.
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, max_merges: usize) -> Self {
        let base = Self::from_merges(Vec::new());
        let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for text in corpus {
            for piece in base.pieces(&clean_text(text)) {
                *words.entry(base.initial_symbols(&piece)).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
        let mut merges = Vec::new();
        while merges.len() < max_merges {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (symbols, freq) in &words {
                for w in symbols.windows(2) {
                    *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += freq;
                }
            }
            let Some(best) = counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((a, b), _)| (a.to_string(), b.to_string()))
            else {
                break;
            };
            for (symbols, _) in words.iter_mut() {
                *symbols = merge_pair(symbols, &best);
            }
            merges.push(best);
        }
        Self::from_merges(merges)
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    pub fn start_id(&self) -> u32 {
        self.encoder[START_OF_TEXT]
    }

    pub fn end_id(&self) -> u32 {
        self.encoder[END_OF_TEXT]
    }

    fn pieces(&self, cleaned: &str) -> Vec<String> {
        self.pattern
            .find_iter(cleaned)
            .map(|m| m.as_str().to_string())
            .collect()
    }

    fn initial_symbols(&self, piece: &str) -> Vec<String> {
        let chars: Vec<char> = piece
            .bytes()
            .map(|b| self.byte_symbols[b as usize])
            .collect();
        let last = chars.len() - 1;
        chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == last {
                    format!("{c}{END_OF_WORD}")
                } else {
                    c.to_string()
                }
            })
            .collect()
    }

    fn bpe(&self, piece: &str) -> Vec<String> {
        let mut symbols = self.initial_symbols(piece);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|r| (*r, (w[0].clone(), w[1].clone())))
                })
                .min_by_key(|(r, _)| *r);
            match best {
                Some((_, pair)) => symbols = merge_pair(&symbols, &pair),
                None => return symbols,
            }
        }
    }

    /// Token ids for `text` without start/end markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = clean_text(text);
        let mut ids = Vec::new();
        for piece in self.pieces(&cleaned) {
            if piece == START_OF_TEXT || piece == END_OF_TEXT {
                ids.push(self.encoder[piece.as_str()]);
                continue;
            }
            for sym in self.bpe(&piece) {
                ids.push(self.encoder[sym.as_str()]);
            }
        }
        ids
    }

    /// Same as [`encode`](Self::encode) but framed with start and end markers.
    pub fn encode_framed(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![self.start_id()];
        ids.extend(self.encode(text));
        ids.push(self.end_id());
        ids
    }
}

fn merge_pair(symbols: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_a_bijection() {
        let table = bytes_to_unicode();
        let mut sorted = table.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 256);
        assert_eq!(table[b'a' as usize], 'a');
        assert_eq!(table[b' ' as usize], 'Ġ');
    }

    #[test]
    fn untrained_tokenizer_falls_back_to_bytes() {
        let tok = BpeTokenizer::from_merges(Vec::new());
        assert_eq!(tok.vocab_size(), 514);
        // "ab" -> 'a', 'b</w>'
        assert_eq!(
            tok.encode("ab"),
            vec![b'a' as u32 - 33, 256 + b'b' as u32 - 33]
        );
    }

    #[test]
    fn training_makes_corpus_words_single_tokens() {
        let tok = BpeTokenizer::train(["a photo of a shoe", "a photo of the shoe"], 200);
        assert_eq!(tok.encode("A  photo OF"), tok.encode("a photo of"));
        assert_eq!(tok.encode("a photo of").len(), 3);
        assert_eq!(tok.encode("shoe").len(), 1);
        // unseen words still encode via byte symbols
        assert!(tok.encode("zebra").len() > 1);
    }

    #[test]
    fn merges_round_trip_through_text() {
        let tok = BpeTokenizer::train(["with red laces", "in origami"], 50);
        let text = tok.merges_to_string();
        let back = BpeTokenizer::from_merges_str(&text, None).unwrap();
        assert_eq!(
            back.encode("with red laces in origami"),
            tok.encode("with red laces in origami")
        );
        assert_eq!(back.vocab_size(), tok.vocab_size());
    }

    #[test]
    fn merge_limit_truncates() {
        let tok = BpeTokenizer::train(["with red laces"], 50);
        let limited = BpeTokenizer::from_merges_str(&tok.merges_to_string(), Some(2)).unwrap();
        assert_eq!(limited.vocab_size(), 514 + 2);
    }

    #[test]
    fn framing_uses_special_ids() {
        let tok = BpeTokenizer::train(["hello"], 10);
        let ids = tok.encode_framed("hello");
        assert_eq!(ids.first(), Some(&tok.start_id()));
        assert_eq!(ids.last(), Some(&tok.end_id()));
        assert_eq!(tok.end_id() as usize, tok.vocab_size() - 1);
        assert_eq!(tok.encode("<|endoftext|>"), vec![tok.end_id()]);
    }

    #[test]
    fn malformed_merge_file_is_rejected() {
        assert!(BpeTokenizer::from_merges_str("#version: 0.2\na b c\n", None).is_err());
    }
}
