//! Byte-level byte-pair-encoding tokenizer for prompt text.
//!
//! Ids 0..4 are the specials PAD, BOS, EOS and UNK, ids 4..260 are raw bytes
//! and every id from 260 upward is a learned merge, in training order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;
pub const BASE_VOCAB: usize = 256 + NUM_SPECIALS as usize;

const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const FILE_MAGIC: &str = "pixseq-bpe 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordVocab {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    merge_rank: HashMap<(u32, u32), u32>,
}

fn base_tokens() -> Vec<Vec<u8>> {
    let mut tokens = vec![Vec::new(); NUM_SPECIALS as usize];
    tokens.extend((0..=255u8).map(|b| vec![b]));
    tokens
}

impl SubwordVocab {
    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut tokens = base_tokens();
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for &(l, r) in &merges {
            let n = tokens.len() as u32;
            if l >= n || r >= n || l < NUM_SPECIALS || r < NUM_SPECIALS {
                return Err(Error::data(format!("merge ({l}, {r}) references an unknown token")));
            }
            let mut bytes = tokens[l as usize].clone();
            bytes.extend_from_slice(&tokens[r as usize]);
            merge_rank.insert((l, r), n);
            tokens.push(bytes);
        }
        Ok(Self { merges, tokens, merge_rank })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Id of the token whose bytes are exactly `bytes`.
    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.tokens
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS as usize)
            .find(|(_, t)| t.as_slice() == bytes)
            .map(|(i, _)| i as u32)
    }

    /// Subword ids of `text` without specials.
    pub fn encode_raw(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(|b| b as u32 + NUM_SPECIALS).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&id| (id, (w[0], w[1]))))
                .min_by_key(|(id, _)| *id);
            let Some((new_id, pair)) = best else { break };
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Text serialisation: header, one `left right` merge per line, then one
    /// `id hex-bytes` line per token (specials use their `<name>`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{FILE_MAGIC}").unwrap();
        writeln!(s, "vocab_size {}", self.vocab_size()).unwrap();
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for (l, r) in &self.merges {
            writeln!(s, "{l} {r}").unwrap();
        }
        for (id, bytes) in self.tokens.iter().enumerate() {
            if id < NUM_SPECIALS as usize {
                writeln!(s, "{id} {}", SPECIAL_NAMES[id]).unwrap();
            } else {
                let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
                writeln!(s, "{id} {hex}").unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::data(format!("vocab file ends before {what}")))
        };
        let (_, magic) = next("header")?;
        if magic != FILE_MAGIC {
            return Err(Error::data(format!("bad vocab header `{magic}`")));
        }
        let header_num = |line: (usize, &str), key: &str| -> Result<usize> {
            line.1
                .strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::data(format!("line {}: expected `{key} <n>`", line.0 + 1)))
        };
        let size = header_num(next("vocab_size")?, "vocab_size")?;
        let n_merges = header_num(next("merges")?, "merges")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (no, line) = next("merge list")?;
            let mut parts = line.split_whitespace().map(str::parse::<u32>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(l)), Some(Ok(r)), None) => merges.push((l, r)),
                _ => return Err(Error::data(format!("line {}: bad merge `{line}`", no + 1))),
            }
        }
        let vocab = Self::from_merges(merges)?;
        if vocab.vocab_size() != size {
            return Err(Error::data(format!("vocab_size {size} but merges give {}", vocab.vocab_size())));
        }
        #[allow(clippy::needless_range_loop)]
        for id in 0..size {
            let (no, line) = next("token table")?;
            let expect = if id < NUM_SPECIALS as usize {
                format!("{id} {}", SPECIAL_NAMES[id])
            } else {
                let hex: String = vocab.tokens[id].iter().map(|b| format!("{b:02x}")).collect();
                format!("{id} {hex}")
            };
            if line != expect {
                return Err(Error::data(format!("line {}: token table disagrees with merges", no + 1)));
            }
        }
        Ok(vocab)
    }
}

/// Greedy byte-pair training: merge the most frequent adjacent pair until the
/// vocabulary holds `vocab_size` tokens or no pair occurs twice. Ties go to
/// the lexicographically smallest `(left bytes, right bytes)`.
pub fn train_subword<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<SubwordVocab> {
    if vocab_size < BASE_VOCAB {
        return Err(Error::contract(format!("vocab_size must be >= {BASE_VOCAB}, got {vocab_size}")));
    }
    if corpus.is_empty() {
        return Err(Error::contract("empty corpus"));
    }
    // deduplicate while keeping first-seen order
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut seqs: Vec<(Vec<u32>, usize)> = Vec::new();
    for s in corpus {
        let s = s.as_ref();
        match index.get(s) {
            Some(&i) => seqs[i].1 += 1,
            None => {
                index.insert(s, seqs.len());
                seqs.push((s.bytes().map(|b| b as u32 + NUM_SPECIALS).collect(), 1));
            }
        }
    }
    let mut tokens = base_tokens();
    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (seq, c) in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += c;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                kb.cmp(&ka).then_with(|| pb.cmp(pa))
            })
        });
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let new_id = tokens.len() as u32;
        let mut bytes = tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&tokens[pair.1 as usize]);
        tokens.push(bytes);
        merges.push(pair);
        for (seq, _) in seqs.iter_mut() {
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }
    SubwordVocab::from_merges(merges)
}

/// `BOS + subwords + EOS`, truncated to `max_len` with EOS kept last.
pub fn encode_text(vocab: &SubwordVocab, text: &str, max_len: usize) -> Result<Vec<u32>> {
    if max_len < 2 {
        return Err(Error::contract(format!("max_len must be >= 2, got {max_len}")));
    }
    let body = vocab.encode_raw(text);
    let keep = body.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS);
    ids.extend_from_slice(&body[..keep]);
    ids.push(EOS);
    Ok(ids)
}

/// Inverse of [`encode_text`]; PAD, BOS and EOS are dropped, UNK becomes
/// U+FFFD.
pub fn decode_text(vocab: &SubwordVocab, ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in ids {
        match id {
            PAD | BOS | EOS => {}
            UNK => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
            _ => bytes.extend_from_slice(
                vocab
                    .token_bytes(id)
                    .ok_or_else(|| Error::data(format!("token id {id} >= vocab size {}", vocab.vocab_size())))?,
            ),
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference pair counter used to pick the first merge by brute force.
    fn first_merge_oracle(corpus: &[&str]) -> (Vec<u8>, Vec<u8>) {
        let mut best: Option<((u8, u8), usize)> = None;
        let mut counts: std::collections::BTreeMap<(u8, u8), usize> = Default::default();
        for s in corpus {
            for w in s.as_bytes().windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        for (pair, c) in counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let ((a, b), _) = best.unwrap();
        (vec![a], vec![b])
    }

    #[test]
    fn first_merge_of_repeated_char() {
        let v = train_subword(&["aaaa"], 261).unwrap();
        assert_eq!(v.merges().len(), 1);
        let (l, r) = v.merges()[0];
        let oracle = first_merge_oracle(&["aaaa"]);
        assert_eq!((v.token_bytes(l).unwrap().to_vec(), v.token_bytes(r).unwrap().to_vec()), oracle);
        assert_eq!(oracle, (b"a".to_vec(), b"a".to_vec()));
    }

    #[test]
    fn most_frequent_pair_first() {
        let corpus = ["ab", "ab", "ab"];
        let v = train_subword(&corpus, 300).unwrap();
        let (l, r) = v.merges()[0];
        assert_eq!(v.token_bytes(l).unwrap(), b"a");
        assert_eq!(v.token_bytes(r).unwrap(), b"b");
        assert_eq!(first_merge_oracle(&corpus), (b"a".to_vec(), b"b".to_vec()));
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // "xy" and "ab" both occur twice
        let v = train_subword(&["xy", "ab", "xy", "ab"], 261).unwrap();
        let (l, r) = v.merges()[0];
        assert_eq!(v.token_bytes(l).unwrap(), b"a");
        assert_eq!(v.token_bytes(r).unwrap(), b"b");
    }

    #[test]
    fn base_vocab_means_raw_bytes() {
        let v = train_subword(&["hello hello"], 260).unwrap();
        assert!(v.merges().is_empty());
        let ids = encode_text(&v, "hi", 16).unwrap();
        assert_eq!(ids, vec![BOS, b'h' as u32 + 4, b'i' as u32 + 4, EOS]);
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let v = train_subword(&["abc"], 400).unwrap();
        assert_eq!(v.vocab_size(), BASE_VOCAB);
    }

    #[test]
    fn too_small_vocab_rejected() {
        assert!(matches!(train_subword(&["a"], 259), Err(Error::Contract(_))));
    }

    #[test]
    fn encode_applies_merges() {
        let v = train_subword(&["ab", "ab", "ab"], 261).unwrap();
        let ab = v.token_id(b"ab").unwrap();
        assert_eq!(encode_text(&v, "ab", 8).unwrap(), vec![BOS, ab, EOS]);
        assert_eq!(encode_text(&v, "", 8).unwrap(), vec![BOS, EOS]);
        assert_eq!(decode_text(&v, &[BOS, EOS]).unwrap(), "");
    }

    #[test]
    fn truncation_keeps_eos_last() {
        let v = train_subword(&["abc"], 260).unwrap();
        let ids = encode_text(&v, "abcdef", 4).unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
    }

    #[test]
    fn invalid_id_rejected() {
        let v = train_subword(&["abc"], 260).unwrap();
        assert!(decode_text(&v, &[BOS, 9999]).is_err());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let v = train_subword(&["a red circle", "a blue square", "a red square"], 300).unwrap();
        let text = v.to_text();
        assert_eq!(SubwordVocab::from_text(&text).unwrap(), v);
        let broken = text.replacen("vocab_size", "vocab_sise", 1);
        assert!(SubwordVocab::from_text(&broken).is_err());
    }
}
