//! Byte-pair-merge subword tokenizer trained from a corpus.
//!
//! The base alphabet is the full byte range, so encoding is total: bytes
//! never observed during training map to the unk id rather than failing.
//! A contiguous block of sentinel ids is reserved at the top of the id
//! range for span corruption; merges can never produce special or
//! sentinel ids. Text is normalized (NFC, whitespace collapsed to single
//! spaces, trimmed) before tokenization, and `decode . encode` is exact
//! on normalized text whose bytes were all seen in training.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
/// First byte token; byte b has id `BYTE_BASE + b`.
const BYTE_BASE: u32 = 3;
/// Specials + 256 byte symbols.
const FIRST_MERGE_ID: u32 = BYTE_BASE + 256;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocab size {requested} below minimum {minimum} (specials + bytes + sentinels)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("token id {id} out of range for vocab size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("bad vocabulary header: {0}")]
    BadHeader(String),
    #[error("bad merge rule on line {line}: {reason}")]
    BadRule { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// NFC normalization plus whitespace collapsing: interior runs become a
/// single space and outer whitespace is trimmed.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for word in nfc.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Trained subword vocabulary with reserved specials and sentinels.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    vocab_size: usize,
    num_sentinels: usize,
    /// Byte string for every base/merge token id (specials and sentinels
    /// hold empty entries; they are rendered symbolically).
    token_bytes: Vec<Vec<u8>>,
    /// Merge rules in learned priority order, as (left id, right id).
    merges: Vec<(u32, u32)>,
    /// (left, right) -> (priority rank, merged id).
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
    /// Bytes observed in the training corpus; others encode to unk.
    alphabet: [bool; 256],
}

impl Vocabulary {
    /// Learns merges from the corpus. `vocab_size` is an upper bound: merge
    /// learning stops early once no symbol pair occurs at least twice, in
    /// which case the final vocabulary is smaller than requested. Merge
    /// ties break toward the lexicographically smaller (left, right) byte
    /// pair so retraining is reproducible.
    pub fn train(
        corpus: &[String],
        vocab_size: usize,
        num_sentinels: usize,
    ) -> Result<Self, TokenizerError> {
        let minimum = FIRST_MERGE_ID as usize + num_sentinels;
        if vocab_size < minimum {
            return Err(TokenizerError::VocabTooSmall {
                requested: vocab_size,
                minimum,
            });
        }
        let mut chunk_freq: HashMap<Vec<u32>, u64> = HashMap::new();
        let mut alphabet = [false; 256];
        let mut saw_text = false;
        for doc in corpus {
            let norm = normalize(doc);
            if !norm.is_empty() {
                saw_text = true;
            }
            for chunk in chunks_of(&norm) {
                for b in chunk.bytes() {
                    alphabet[b as usize] = true;
                }
                let symbols: Vec<u32> = chunk.bytes().map(|b| BYTE_BASE + b as u32).collect();
                *chunk_freq.entry(symbols).or_insert(0) += 1;
            }
        }
        if corpus.is_empty() || !saw_text {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut token_bytes: Vec<Vec<u8>> = vec![Vec::new(); FIRST_MERGE_ID as usize];
        for b in 0..256usize {
            token_bytes[BYTE_BASE as usize + b] = vec![b as u8];
        }

        let budget = vocab_size - minimum;
        let mut merges: Vec<(u32, u32)> = Vec::new();
        let mut merge_rank: HashMap<(u32, u32), (usize, u32)> = HashMap::new();
        let mut chunks: Vec<(Vec<u32>, u64)> = chunk_freq.into_iter().collect();
        // Fixed processing order: counting is commutative, but stable order
        // keeps debugging output reproducible.
        chunks.sort();

        while merges.len() < budget {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (symbols, freq) in &chunks {
                for win in symbols.windows(2) {
                    *pair_counts.entry((win[0], win[1])).or_insert(0) += freq;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| {
                    a.1.cmp(&b.1).then_with(|| {
                        let ka = (&token_bytes[a.0 .0 as usize], &token_bytes[a.0 .1 as usize]);
                        let kb = (&token_bytes[b.0 .0 as usize], &token_bytes[b.0 .1 as usize]);
                        // Reversed: the lexicographically smaller pair wins ties.
                        kb.cmp(&ka)
                    })
                });
            let (pair, _count) = match best {
                Some(b) => b,
                None => break,
            };
            let new_id = FIRST_MERGE_ID + merges.len() as u32;
            let mut bytes = token_bytes[pair.0 as usize].clone();
            bytes.extend_from_slice(&token_bytes[pair.1 as usize]);
            token_bytes.push(bytes);
            merge_rank.insert(pair, (merges.len(), new_id));
            merges.push(pair);
            for (symbols, _) in chunks.iter_mut() {
                merge_in_place(symbols, pair, new_id);
            }
        }

        let final_size = FIRST_MERGE_ID as usize + merges.len() + num_sentinels;
        Ok(Vocabulary {
            vocab_size: final_size,
            num_sentinels,
            token_bytes,
            merges,
            merge_rank,
            alphabet,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_sentinels(&self) -> usize {
        self.num_sentinels
    }

    pub fn pad(&self) -> u32 {
        PAD_ID
    }

    pub fn eos(&self) -> u32 {
        EOS_ID
    }

    pub fn unk(&self) -> u32 {
        UNK_ID
    }

    /// Sentinel ids grow downward from the top of the id range:
    /// sentinel(0) = vocab_size - 1.
    pub fn sentinel(&self, i: usize) -> u32 {
        assert!(i < self.num_sentinels, "sentinel index {i} out of range");
        (self.vocab_size - 1 - i) as u32
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        let first = self.vocab_size - self.num_sentinels;
        (id as usize) >= first && (id as usize) < self.vocab_size
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == PAD_ID || id == EOS_ID || id == UNK_ID
    }

    /// Encodes normalized text. Never emits pad, eos, or sentinel ids;
    /// bytes outside the training alphabet become unk.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let norm = normalize(text);
        let mut out = Vec::with_capacity(norm.len());
        for chunk in chunks_of(&norm) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = chunk
            .bytes()
            .map(|b| {
                if self.alphabet[b as usize] {
                    BYTE_BASE + b as u32
                } else {
                    UNK_ID
                }
            })
            .collect();
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for (i, win) in symbols.windows(2).enumerate() {
                if let Some(&(rank, _)) = self.merge_rank.get(&(win[0], win[1])) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let (rank, _) = match best {
                Some(b) => b,
                None => break,
            };
            let pair = self.merges[rank];
            let new_id = self.merge_rank[&pair].1;
            merge_in_place(&mut symbols, pair, new_id);
        }
        out.extend_from_slice(&symbols);
    }

    /// Inverse of encode for in-range ids. Sentinels render as literal
    /// `<extra_id_i>` markers, unk as U+FFFD; pad and eos render empty.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes: Vec<u8> = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab_size {
                return Err(TokenizerError::IdOutOfRange {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
            if id == PAD_ID || id == EOS_ID {
                continue;
            }
            if id == UNK_ID {
                bytes.extend_from_slice("\u{FFFD}".as_bytes());
                continue;
            }
            if self.is_sentinel(id) {
                let i = self.vocab_size - 1 - id as usize;
                bytes.extend_from_slice(format!("<extra_id_{i}>").as_bytes());
                continue;
            }
            bytes.extend_from_slice(&self.token_bytes[id as usize]);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Plain-text vocabulary file: a one-line header, the trained byte
    /// alphabet, then merge rules one per line in priority order.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        writeln!(
            out,
            "MTVOCAB 1 {} {}",
            self.vocab_size, self.num_sentinels
        )
        .expect("string write");
        let mut hex = String::new();
        for b in 0..256usize {
            if self.alphabet[b] {
                write!(hex, "{b:02x}").expect("string write");
            }
        }
        writeln!(out, "alphabet {hex}").expect("string write");
        for &(l, r) in &self.merges {
            writeln!(
                out,
                "{} {}",
                escape_token(&self.token_bytes[l as usize]),
                escape_token(&self.token_bytes[r as usize])
            )
            .expect("string write");
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| TokenizerError::BadHeader("empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "MTVOCAB" || fields[1] != "1" {
            return Err(TokenizerError::BadHeader(header.to_string()));
        }
        let vocab_size: usize = fields[2]
            .parse()
            .map_err(|_| TokenizerError::BadHeader(header.to_string()))?;
        let num_sentinels: usize = fields[3]
            .parse()
            .map_err(|_| TokenizerError::BadHeader(header.to_string()))?;

        let (_, alpha_line) = lines
            .next()
            .ok_or_else(|| TokenizerError::BadHeader("missing alphabet line".into()))?;
        let alpha_hex = alpha_line.strip_prefix("alphabet ").ok_or_else(|| {
            TokenizerError::BadHeader(format!("expected alphabet line, got {alpha_line}"))
        })?;
        let mut alphabet = [false; 256];
        let hex_bytes = alpha_hex.as_bytes();
        if hex_bytes.len() % 2 != 0 {
            return Err(TokenizerError::BadHeader("odd alphabet hex length".into()));
        }
        for pair in hex_bytes.chunks(2) {
            let s = std::str::from_utf8(pair).expect("hex is ascii");
            let b = u8::from_str_radix(s, 16)
                .map_err(|_| TokenizerError::BadHeader(format!("bad alphabet hex {s}")))?;
            alphabet[b as usize] = true;
        }

        let mut token_bytes: Vec<Vec<u8>> = vec![Vec::new(); FIRST_MERGE_ID as usize];
        for b in 0..256usize {
            token_bytes[BYTE_BASE as usize + b] = vec![b as u8];
        }
        let mut bytes_to_id: HashMap<Vec<u8>, u32> = (0..256usize)
            .map(|b| (vec![b as u8], BYTE_BASE + b as u32))
            .collect();
        let mut merges = Vec::new();
        let mut merge_rank = HashMap::new();
        for (lineno, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (l_esc, r_esc) = line.split_once(' ').ok_or_else(|| TokenizerError::BadRule {
                line: lineno + 1,
                reason: "expected two fields".into(),
            })?;
            let l_bytes = unescape_token(l_esc).ok_or_else(|| TokenizerError::BadRule {
                line: lineno + 1,
                reason: format!("bad escape in {l_esc}"),
            })?;
            let r_bytes = unescape_token(r_esc).ok_or_else(|| TokenizerError::BadRule {
                line: lineno + 1,
                reason: format!("bad escape in {r_esc}"),
            })?;
            let l_id = *bytes_to_id
                .get(&l_bytes)
                .ok_or_else(|| TokenizerError::BadRule {
                    line: lineno + 1,
                    reason: "left token not yet defined".into(),
                })?;
            let r_id = *bytes_to_id
                .get(&r_bytes)
                .ok_or_else(|| TokenizerError::BadRule {
                    line: lineno + 1,
                    reason: "right token not yet defined".into(),
                })?;
            let new_id = FIRST_MERGE_ID + merges.len() as u32;
            let mut merged = l_bytes.clone();
            merged.extend_from_slice(&r_bytes);
            bytes_to_id.insert(merged.clone(), new_id);
            token_bytes.push(merged);
            merge_rank.insert((l_id, r_id), (merges.len(), new_id));
            merges.push((l_id, r_id));
        }
        let expected = FIRST_MERGE_ID as usize + merges.len() + num_sentinels;
        if expected != vocab_size {
            return Err(TokenizerError::BadHeader(format!(
                "header vocab size {vocab_size} disagrees with contents ({expected})"
            )));
        }
        Ok(Vocabulary {
            vocab_size,
            num_sentinels,
            token_bytes,
            merges,
            merge_rank,
            alphabet,
        })
    }
}

/// Splits normalized text into merge chunks: the first word bare, every
/// following word carrying its single leading space. Merges never cross
/// chunk boundaries.
fn chunks_of(norm: &str) -> impl Iterator<Item = &str> {
    let mut rest = norm;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let search_from = if rest.starts_with(' ') { 1 } else { 0 };
        match rest[search_from..].find(' ') {
            Some(pos) => {
                let (chunk, tail) = rest.split_at(search_from + pos);
                rest = tail;
                Some(chunk)
            }
            None => {
                let chunk = rest;
                rest = "";
                Some(chunk)
            }
        }
    })
}

fn merge_in_place(symbols: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut i = 0;
    let mut w = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            symbols[w] = new_id;
            i += 2;
        } else {
            symbols[w] = symbols[i];
            i += 1;
        }
        w += 1;
    }
    symbols.truncate(w);
}

fn escape_token(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            b' ' => out.push_str("\\s"),
            b'\n' => out.push_str("\\n"),
            b'\r' => out.push_str("\\r"),
            b'\t' => out.push_str("\\t"),
            0x21..=0x7e => out.push(b as char),
            _ => write!(out, "\\x{b:02x}").expect("string write"),
        }
    }
    out
}

fn unescape_token(s: &str) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(s.len());
    let mut it = s.bytes();
    while let Some(b) = it.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        match it.next()? {
            b'\\' => out.push(b'\\'),
            b's' => out.push(b' '),
            b'n' => out.push(b'\n'),
            b'r' => out.push(b'\r'),
            b't' => out.push(b'\t'),
            b'x' => {
                let hi = it.next()?;
                let lo = it.next()?;
                let s = [hi, lo];
                let s = std::str::from_utf8(&s).ok()?;
                out.push(u8::from_str_radix(s, 16).ok()?);
            }
            _ => return None,
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(texts: &[&str]) -> Vec<String> {
        texts.iter().map(|s| s.to_string()).collect()
    }

    /// Deterministic filler corpus with enough repeated pairs to exhaust
    /// any reasonable merge budget. Words are hash-scrambled so merges do
    /// not collapse onto a few shared substrings.
    fn rich_corpus() -> Vec<String> {
        let mut words = Vec::new();
        for i in 0..800u64 {
            let mut h = i.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(17) | 1;
            let mut w = String::new();
            for _ in 0..8 {
                w.push((b'a' + (h % 26) as u8) as char);
                h /= 26;
            }
            words.push(w);
        }
        let text = words.join(" ");
        vec![text.clone(), text]
    }

    #[test]
    fn first_merge_on_repeated_byte() {
        // Hand-run BPE on "aaaa": (a,a) occurs 3 times and merges first.
        let v = Vocabulary::train(&corpus(&["aaaa"]), 260, 0).unwrap();
        let a_id = BYTE_BASE + b'a' as u32;
        assert_eq!(v.merges[0], (a_id, a_id));
    }

    #[test]
    fn sentinels_sit_at_top_of_id_range() {
        let v = Vocabulary::train(&rich_corpus(), 1000, 100).unwrap();
        assert_eq!(v.vocab_size(), 1000);
        assert_eq!(v.sentinel(0), 999);
        assert_eq!(v.sentinel(99), 900);
        assert!(v.is_sentinel(999) && v.is_sentinel(900) && !v.is_sentinel(899));
    }

    #[test]
    fn training_is_deterministic() {
        let c = rich_corpus();
        let a = Vocabulary::train(&c, 800, 10).unwrap();
        let b = Vocabulary::train(&c, 800, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_empty_is_empty() {
        let v = Vocabulary::train(&corpus(&["hello world"]), 300, 4).unwrap();
        assert!(v.encode("").is_empty());
        assert!(v.encode("   \n  ").is_empty());
    }

    #[test]
    fn round_trip_after_normalization() {
        let v = Vocabulary::train(
            &corpus(&["no acute findings", "the findings are acute", "no no no"]),
            400,
            8,
        )
        .unwrap();
        let text = "no acute findings";
        assert_eq!(v.decode(&v.encode(text)).unwrap(), text);
        // Whitespace collapses before encoding.
        assert_eq!(v.decode(&v.encode("no   acute\nfindings")).unwrap(), text);
    }

    #[test]
    fn unknown_byte_becomes_unk_and_replacement_marker() {
        // Corpus deliberately lacks the byte 'z'.
        let v = Vocabulary::train(&corpus(&["plain text only"]), 300, 2).unwrap();
        let ids = v.encode("z");
        assert_eq!(ids, vec![UNK_ID]);
        assert_eq!(v.decode(&ids).unwrap(), "\u{FFFD}");
    }

    #[test]
    fn encode_never_emits_reserved_ids() {
        let c = rich_corpus();
        let v = Vocabulary::train(&c, 700, 20).unwrap();
        for doc in &c {
            for id in v.encode(doc) {
                assert_ne!(id, PAD_ID);
                assert_ne!(id, EOS_ID);
                assert!(!v.is_sentinel(id));
            }
        }
    }

    #[test]
    fn token_count_bounded_by_byte_count() {
        let c = rich_corpus();
        let v = Vocabulary::train(&c, 700, 20).unwrap();
        for doc in &c {
            let norm = normalize(doc);
            assert!(v.encode(doc).len() <= norm.len());
        }
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(matches!(
            Vocabulary::train(&[], 400, 4),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            Vocabulary::train(&corpus(&["", "  "]), 400, 4),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let v = Vocabulary::train(&corpus(&["abc abc"]), 300, 2).unwrap();
        let bad = v.vocab_size() as u32;
        assert!(matches!(
            v.decode(&[bad]),
            Err(TokenizerError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn sentinel_ids_decode_to_markers() {
        let v = Vocabulary::train(&corpus(&["abc abc"]), 300, 3).unwrap();
        let s1 = v.sentinel(1);
        assert_eq!(v.decode(&[s1]).unwrap(), "<extra_id_1>");
    }

    #[test]
    fn save_load_round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::train(&rich_corpus(), 600, 16).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        let resaved = dir.path().join("vocab2.txt");
        loaded.save(&resaved).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&resaved).unwrap());
    }

    #[test]
    fn vocab_size_is_an_upper_bound_when_pairs_run_out() {
        let v = Vocabulary::train(&corpus(&["aaaa"]), 4096, 8).unwrap();
        assert!(v.vocab_size() < 4096);
        assert_eq!(v.sentinel(0) as usize, v.vocab_size() - 1);
    }
}
