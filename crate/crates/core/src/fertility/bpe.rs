//! Byte-level byte-pair encoding.
//!
//! Input is split into runs of whitespace and runs of non-whitespace bytes
//! before merging, so no merge ever spans a word boundary. Pair frequency ties
//! go to the lexicographically smallest `(left id, right id)`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FertilityPoint;
use crate::error::{Error, Result};

pub const BASE_ALPHABET: usize = 256;

/// Ordered merge rules. Rule `i` merges `merges[i]` into token id `256 + i`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MergeTable {
    merges: Vec<(u32, u32)>,
}

impl MergeTable {
    pub fn new(merges: Vec<(u32, u32)>) -> Result<Self> {
        for (i, &(l, r)) in merges.iter().enumerate() {
            let next = (BASE_ALPHABET + i) as u32;
            if l >= next || r >= next {
                return Err(Error::invalid(format!(
                    "merge {i} references token {} not yet defined",
                    l.max(r)
                )));
            }
        }
        Ok(Self { merges })
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        BASE_ALPHABET + self.merges.len()
    }

    /// The first `vocab_size - 256` rules, which is exactly what training to
    /// that smaller size would have produced.
    pub fn truncated(&self, vocab_size: usize) -> Self {
        let keep = vocab_size.saturating_sub(BASE_ALPHABET).min(self.merges.len());
        Self {
            merges: self.merges[..keep].to_vec(),
        }
    }

    /// Byte expansion of every token id.
    pub fn token_bytes(&self) -> Vec<Vec<u8>> {
        let mut out: Vec<Vec<u8>> = (0..BASE_ALPHABET).map(|b| vec![b as u8]).collect();
        for &(l, r) in &self.merges {
            let mut bytes = out[l as usize].clone();
            bytes.extend_from_slice(&out[r as usize]);
            out.push(bytes);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTokenizer {
    pub table: MergeTable,
    /// True when training stopped because no pair occurred at least twice.
    pub saturated: bool,
}

/// Splits text into maximal runs of ASCII whitespace and non-whitespace.
pub fn pretokenize(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= text.len() {
            return None;
        }
        let ws = text[start].is_ascii_whitespace();
        let len = text[start..]
            .iter()
            .position(|b| b.is_ascii_whitespace() != ws)
            .unwrap_or(text.len() - start);
        let word = &text[start..start + len];
        start += len;
        Some(word)
    })
}

struct Word {
    symbols: Vec<u32>,
    count: i64,
}

impl Word {
    /// Merges every non-overlapping occurrence of `pair`, left to right, and
    /// reports pair-count deltas weighted by this word's count.
    fn merge(&mut self, pair: (u32, u32), new_id: u32, delta: &mut HashMap<(u32, u32), i64>) -> bool {
        let mut changed = false;
        let mut i = 0;
        while i + 1 < self.symbols.len() {
            if (self.symbols[i], self.symbols[i + 1]) != pair {
                i += 1;
                continue;
            }
            changed = true;
            if i > 0 {
                *delta.entry((self.symbols[i - 1], pair.0)).or_default() -= self.count;
                *delta.entry((self.symbols[i - 1], new_id)).or_default() += self.count;
            }
            if i + 2 < self.symbols.len() {
                *delta.entry((pair.1, self.symbols[i + 2])).or_default() -= self.count;
                *delta.entry((new_id, self.symbols[i + 2])).or_default() += self.count;
            }
            *delta.entry(pair).or_default() -= self.count;
            self.symbols[i] = new_id;
            self.symbols.remove(i + 1);
            i += 1;
        }
        changed
    }
}

/// Greedy BPE training to `vocab_size` tokens (base bytes included).
pub fn train_bpe(corpus: &[u8], vocab_size: usize) -> Result<TrainedTokenizer> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train a tokenizer on an empty corpus"));
    }
    if vocab_size < BASE_ALPHABET {
        return Err(Error::invalid(format!(
            "vocabulary size {vocab_size} is smaller than the {BASE_ALPHABET}-byte base alphabet"
        )));
    }

    let mut counts: HashMap<&[u8], i64> = HashMap::new();
    for w in pretokenize(corpus) {
        *counts.entry(w).or_default() += 1;
    }
    let mut unique: Vec<(&[u8], i64)> = counts.into_iter().collect();
    unique.sort_unstable();
    let mut words: Vec<Word> = unique
        .into_iter()
        .map(|(w, count)| Word {
            symbols: w.iter().map(|&b| b as u32).collect(),
            count,
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (idx, w) in words.iter().enumerate() {
        for p in w.symbols.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += w.count;
            where_.entry(pair).or_default().insert(idx);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<(u32, u32)>)> =
        pair_counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

    let target = vocab_size - BASE_ALPHABET;
    let mut merges = Vec::with_capacity(target);
    let mut saturated = false;

    while merges.len() < target {
        let Some((count, Reverse(pair))) = heap.pop() else {
            saturated = true;
            break;
        };
        if pair_counts.get(&pair).copied().unwrap_or(0) != count {
            continue;
        }
        if count < 2 {
            saturated = true;
            break;
        }
        let new_id = (BASE_ALPHABET + merges.len()) as u32;
        merges.push(pair);

        let mut delta: HashMap<(u32, u32), i64> = HashMap::new();
        let mut touched: Vec<usize> = where_.remove(&pair).map(|s| s.into_iter().collect()).unwrap_or_default();
        touched.sort_unstable();
        for idx in touched {
            if words[idx].merge(pair, new_id, &mut delta) {
                let w = &words[idx];
                for p in w.symbols.windows(2) {
                    if p[0] == new_id || p[1] == new_id {
                        where_.entry((p[0], p[1])).or_default().insert(idx);
                    }
                }
            }
        }
        let mut changed: Vec<((u32, u32), i64)> = delta.into_iter().filter(|&(_, d)| d != 0).collect();
        changed.sort_unstable();
        for (p, d) in changed {
            let c = pair_counts.entry(p).or_default();
            *c += d;
            let now = *c;
            if now <= 0 {
                pair_counts.remove(&p);
            } else {
                heap.push((now, Reverse(p)));
            }
        }
        pair_counts.remove(&pair);
    }

    Ok(TrainedTokenizer {
        table: MergeTable { merges },
        saturated,
    })
}

/// Applies a merge table; reusable across many calls.
#[derive(Debug, Clone)]
pub struct Encoder {
    ranks: HashMap<(u32, u32), u32>,
}

impl Encoder {
    pub fn new(table: &MergeTable) -> Self {
        let ranks = table
            .merges()
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i as u32))
            .collect();
        Self { ranks }
    }

    /// Encodes one pre-tokenized word by repeatedly applying the
    /// lowest-ranked applicable rule.
    pub fn encode_word(&self, word: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = word.iter().map(|&b| b as u32).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let new_id = BASE_ALPHABET as u32 + rank;
            let mut i = 0;
            while i + 1 < symbols.len() {
                if (symbols[i], symbols[i + 1]) == pair {
                    symbols[i] = new_id;
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        out.extend_from_slice(&symbols);
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for w in pretokenize(text) {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Number of tokens `text` encodes to, memoizing per distinct word.
    pub fn count_tokens(&self, text: &[u8]) -> usize {
        let mut cache: HashMap<&[u8], usize> = HashMap::new();
        let mut scratch = Vec::new();
        let mut total = 0;
        for w in pretokenize(text) {
            total += *cache.entry(w).or_insert_with(|| {
                scratch.clear();
                self.encode_word(w, &mut scratch);
                scratch.len()
            });
        }
        total
    }
}

pub fn encode(text: &[u8], table: &MergeTable) -> Vec<u32> {
    Encoder::new(table).encode(text)
}

pub fn decode(tokens: &[u32], table: &MergeTable) -> Result<Vec<u8>> {
    let bytes = table.token_bytes();
    let mut out = Vec::new();
    for &t in tokens {
        let piece = bytes.get(t as usize).ok_or(Error::TokenIndex {
            id: t,
            vocab_size: bytes.len(),
        })?;
        out.extend_from_slice(piece);
    }
    Ok(out)
}

/// Unicode scalar values in `text` (bytes that do not continue a UTF-8 sequence).
pub fn count_chars(text: &[u8]) -> usize {
    text.iter().filter(|&&b| (b & 0xC0) != 0x80).count()
}

/// Tokens per character of `corpus` under `table`.
pub fn measure_ratio(corpus: &[u8], table: &MergeTable) -> Result<FertilityPoint> {
    let chars = count_chars(corpus);
    if chars == 0 {
        return Err(Error::invalid("cannot measure fertility on an empty corpus"));
    }
    let tokens = Encoder::new(table).count_tokens(corpus);
    Ok(FertilityPoint {
        vocab_size: table.vocab_size() as f64,
        ratio: tokens as f64 / chars as f64,
    })
}

/// Trains once to the largest requested size and measures every size on
/// `eval_corpus` in parallel. Sizes past saturation collapse onto the
/// saturated table and are reported once, at the table's actual size.
pub fn sweep_ratios(
    train_corpus: &[u8],
    eval_corpus: &[u8],
    vocab_sizes: &[usize],
) -> Result<(Vec<FertilityPoint>, bool)> {
    let max = vocab_sizes.iter().copied().max().ok_or_else(|| Error::invalid("empty vocabulary sweep"))?;
    let trained = train_bpe(train_corpus, max)?;
    let mut sizes: Vec<usize> = vocab_sizes
        .iter()
        .map(|&v| v.min(trained.table.vocab_size()))
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    let points = sizes
        .par_iter()
        .map(|&v| measure_ratio(eval_corpus, &trained.table.truncated(v)))
        .collect::<Result<Vec<_>>>()?;
    Ok((points, trained.saturated))
}

/// Reads a corpus from a file, or from every `.txt` file in a directory
/// (sorted by name, joined with newlines).
pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::invalid(format!("no .txt files in {}", path.display())));
        }
        let mut out = Vec::new();
        for f in files {
            if !out.is_empty() {
                out.push(b'\n');
            }
            out.extend(std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
        }
        Ok(out)
    } else {
        std::fs::read(path).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let corpus = b"aaab".repeat(1000);
        let t = train_bpe(&corpus, BASE_ALPHABET + 1).unwrap();
        assert_eq!(t.table.merges(), &[(b'a' as u32, b'a' as u32)]);
        assert!(!t.saturated);
    }

    #[test]
    fn base_size_gives_identity() {
        let t = train_bpe(b"hello world", BASE_ALPHABET).unwrap();
        assert!(t.table.merges().is_empty());
        assert_eq!(encode(b"hello", &t.table), b"hello".iter().map(|&b| b as u32).collect::<Vec<_>>());
        assert!(train_bpe(b"x", 10).is_err());
        assert!(train_bpe(b"", 300).is_err());
    }

    #[test]
    fn ties_break_toward_smallest_pair() {
        // "ab" and "cd" each appear twice; (a,b) < (c,d).
        let t = train_bpe(b"ab cd ab cd", BASE_ALPHABET + 1).unwrap();
        assert_eq!(t.table.merges(), &[(b'a' as u32, b'b' as u32)]);
        let t = train_bpe(b"cd ab cd ab", BASE_ALPHABET + 2).unwrap();
        assert_eq!(
            t.table.merges(),
            &[(b'a' as u32, b'b' as u32), (b'c' as u32, b'd' as u32)]
        );
    }

    #[test]
    fn saturation_is_flagged() {
        let t = train_bpe(b"abc abc", 10_000).unwrap();
        assert!(t.saturated);
        // ab, abc merged; nothing else repeats.
        assert_eq!(t.table.vocab_size(), BASE_ALPHABET + 2);
    }

    #[test]
    fn merges_never_cross_whitespace() {
        let t = train_bpe(b"a a a a a a", 400).unwrap();
        let bytes = t.table.token_bytes();
        for tok in &bytes[BASE_ALPHABET..] {
            let ws = tok[0].is_ascii_whitespace();
            assert!(tok.iter().all(|b| b.is_ascii_whitespace() == ws), "{tok:?}");
        }
    }

    #[test]
    fn encode_edge_cases() {
        let t = train_bpe(b"ab ab ab", 257).unwrap();
        assert!(encode(b"", &t.table).is_empty());
        assert_eq!(encode(b"xyz", &t.table).len(), 3);
        assert_eq!(encode(b"ab", &t.table), vec![256]);
    }

    #[test]
    fn encoding_reproduces_training_segmentation() {
        let corpus = b"the cat sat on the mat with the hat and the bat";
        let t = train_bpe(corpus, 300).unwrap();
        let tokens = encode(corpus, &t.table);
        // Training leaves each word as its final merged symbols; re-encoding
        // must produce the same count.
        let enc = Encoder::new(&t.table);
        assert_eq!(tokens.len(), enc.count_tokens(corpus));
        assert_eq!(decode(&tokens, &t.table).unwrap(), corpus);
    }

    #[test]
    fn deterministic_training() {
        let corpus = b"lorem ipsum dolor sit amet consectetur adipiscing elit sed do eiusmod tempor".repeat(20);
        let a = train_bpe(&corpus, 400).unwrap();
        let b = train_bpe(&corpus, 400).unwrap();
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn ratio_edge_cases() {
        let identity = MergeTable::default();
        assert_eq!(measure_ratio(b"hello world", &identity).unwrap().ratio, 1.0);
        let one = MergeTable::new(vec![(b'a' as u32, b'b' as u32)]).unwrap();
        assert_eq!(measure_ratio(b"ab", &one).unwrap().ratio, 0.5);
        assert!(measure_ratio(b"", &one).is_err());
        // Characters are scalar values, not bytes.
        assert_eq!(count_chars("héllo".as_bytes()), 5);
    }

    #[test]
    fn merge_table_rejects_forward_references() {
        assert!(MergeTable::new(vec![(256, 1)]).is_err());
        assert!(MergeTable::new(vec![(1, 2), (256, 3)]).is_ok());
    }

    #[test]
    fn truncation_matches_smaller_training() {
        let corpus = b"the quick brown fox jumps over the lazy dog and the quick cat".repeat(30);
        let big = train_bpe(&corpus, 320).unwrap();
        let small = train_bpe(&corpus, 290).unwrap();
        assert_eq!(big.table.truncated(290), small.table);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip_random_bytes(data in proptest::collection::vec(any::<u8>(), 0..256)) {
            let table = merge_table_fixture();
            let tokens = encode(&data, table);
            prop_assert_eq!(decode(&tokens, table).unwrap(), data);
        }
    }

    fn merge_table_fixture() -> &'static MergeTable {
        use std::sync::OnceLock;
        static TABLE: OnceLock<MergeTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            let corpus = b"byte pair encoding merges frequent pairs \x00\x01\xff\xfe of bytes into tokens; \
                           frequent frequent pairs pairs bytes bytes \xff\xfe\xff\xfe"
                .repeat(8);
            train_bpe(&corpus, 400).unwrap().table
        })
    }
}
