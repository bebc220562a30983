//! Batches, deterministic splits, and the character-level text corpus.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Default size of the tiny validation set that decides line-search stopping.
pub const DEFAULT_VAL_COUNT: usize = 32;

/// A set of examples. The leading dimension of `inputs`, `targets` and the
/// optional per-position loss `mask` is the example count.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub mask: Option<Tensor>,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Tensor, mask: Option<Tensor>) -> Result<Self> {
        let n = inputs.shape()[0];
        if targets.shape()[0] != n {
            return Err(Error::Dimension {
                op: "batch",
                left: inputs.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        if let Some(m) = &mask {
            if m.shape() != targets.shape() {
                return Err(Error::Dimension {
                    op: "batch mask",
                    left: targets.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        Ok(Batch { inputs, targets, mask })
    }

    pub fn example_count(&self) -> usize {
        self.inputs.shape()[0]
    }

    /// Sub-batch made of the given example rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: select_rows(&self.inputs, rows),
            targets: select_rows(&self.targets, rows),
            mask: self.mask.as_ref().map(|m| select_rows(m, rows)),
        }
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let stride: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::from_parts(shape, data)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

/// Shuffles example indices with the split stream of `seed`, then takes
/// `test_count` test examples, `val_count` validation examples, and leaves
/// the rest for training.
pub fn split(all: &Batch, test_count: usize, val_count: usize, seed: u64) -> Result<Splits> {
    let n = all.example_count();
    if val_count == 0 || test_count == 0 || test_count + val_count >= n {
        return Err(Error::contract(format!(
            "cannot split {n} examples into test={test_count}, val={val_count} and a non-empty train set"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::Split));
    let (test, rest) = idx.split_at(test_count);
    let (val, train) = rest.split_at(val_count);
    Ok(Splits {
        train: all.select(train),
        val: all.select(val),
        test: all.select(test),
    })
}

/// Deterministic mini-batch order: each epoch is an independent shuffle
/// drawn from the data-order stream, and the trailing partial batch is
/// dropped so all batches share a shape.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    examples: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(examples: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > examples {
            return Err(Error::contract(format!(
                "batch size {batch_size} incompatible with {examples} training examples"
            )));
        }
        let mut s = EpochSampler {
            examples,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.examples).collect();
        self.order
            .shuffle(&mut rng::substream(self.seed, Stream::DataOrder, self.epoch as u64));
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.examples / self.batch_size
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.examples {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        out
    }

    /// True when the next call to `next_indices` starts a new epoch.
    pub fn at_epoch_boundary(&self) -> bool {
        self.cursor + self.batch_size > self.examples
    }
}

/// Character vocabulary: the sorted set of distinct characters in a text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        CharVocab {
            chars: set.into_iter().collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .binary_search(&c)
                    .map_err(|_| Error::contract(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.chars[i]).collect()
    }
}

/// Cuts a token stream into windows of `context_length + 1` tokens with
/// stride `context_length`; inputs are the first `context_length` tokens of
/// each window and targets the last `context_length`.
pub fn token_windows(tokens: &[usize], context_length: usize) -> Result<Batch> {
    if context_length < 2 {
        return Err(Error::contract("context length must be at least 2"));
    }
    let count = tokens.len().saturating_sub(1) / context_length;
    if count == 0 {
        return Err(Error::contract(format!(
            "{} tokens do not fill a single window of {context_length}",
            tokens.len()
        )));
    }
    let mut inputs = Vec::with_capacity(count * context_length);
    let mut targets = Vec::with_capacity(count * context_length);
    for w in 0..count {
        let start = w * context_length;
        inputs.extend(tokens[start..start + context_length].iter().map(|&t| t as f64));
        targets.extend(tokens[start + 1..start + context_length + 1].iter().map(|&t| t as f64));
    }
    Batch::new(
        Tensor::matrix(count, context_length, inputs)?,
        Tensor::matrix(count, context_length, targets)?,
        None,
    )
}

#[derive(Debug, Clone)]
pub struct TextCorpus {
    pub vocab: CharVocab,
    pub splits: Splits,
}

/// Loads a UTF-8 text file, tokenizes it per character, windows it, and
/// splits the windows deterministically.
pub fn load_text_corpus(
    path: impl AsRef<Path>,
    context_length: usize,
    test_count: usize,
    val_count: usize,
    seed: u64,
) -> Result<TextCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "corpus is empty"),
        ));
    }
    corpus_from_text(&text, context_length, test_count, val_count, seed)
}

pub fn corpus_from_text(
    text: &str,
    context_length: usize,
    test_count: usize,
    val_count: usize,
    seed: u64,
) -> Result<TextCorpus> {
    let vocab = CharVocab::from_text(text);
    let tokens = vocab.encode(text)?;
    let windows = token_windows(&tokens, context_length)?;
    let splits = split(&windows, test_count, val_count, seed)?;
    Ok(TextCorpus { vocab, splits })
}

/// Deterministic English-like filler text for demos and tests.
pub fn synthetic_text(seed: u64, min_chars: usize) -> String {
    const SUBJECTS: &[&str] = &[
        "the cat", "a small dog", "the old man", "my sister", "the river", "a quiet bird",
        "the teacher", "our neighbor", "the red fox", "a tired child",
    ];
    const VERBS: &[&str] = &[
        "sees", "likes", "follows", "finds", "watches", "carries", "remembers", "calls",
    ];
    const OBJECTS: &[&str] = &[
        "the moon", "a green apple", "the long road", "her friend", "the open door",
        "a bright lamp", "the cold water", "his old book", "the morning bell",
    ];
    const TAILS: &[&str] = &["", " today", " again", " at night", " in the garden", " by the sea"];
    let mut rng = rng::stream(seed, Stream::Data);
    let mut out = String::with_capacity(min_chars + 64);
    while out.len() < min_chars {
        let s = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
        let v = VERBS[rng.random_range(0..VERBS.len())];
        let o = OBJECTS[rng.random_range(0..OBJECTS.len())];
        let t = TAILS[rng.random_range(0..TAILS.len())];
        out.push_str(s);
        out.push(' ');
        out.push_str(v);
        out.push(' ');
        out.push_str(o);
        out.push_str(t);
        out.push_str(". ");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(n: usize) -> Batch {
        Batch::new(
            Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(),
            Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = split(&numbered(100), 10, 32, 5).unwrap();
        assert_eq!(s.test.example_count(), 10);
        assert_eq!(s.val.example_count(), 32);
        assert_eq!(s.train.example_count(), 58);
        let mut all: Vec<f64> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|b| b.inputs.data().to_vec())
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..100).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic() {
        let a = split(&numbered(100), 10, 32, 5).unwrap();
        let b = split(&numbered(100), 10, 32, 5).unwrap();
        let c = split(&numbered(100), 10, 32, 6).unwrap();
        assert_eq!(a.val, b.val);
        assert_ne!(a.val, c.val);
    }

    #[test]
    fn split_rejects_insufficient_data() {
        assert!(split(&numbered(40), 10, 32, 0).is_err());
    }

    #[test]
    fn tokenize_roundtrip() {
        let s = "Hello, world! 123 ~";
        let v = CharVocab::from_text(s);
        assert_eq!(v.decode(&v.encode(s).unwrap()), s);
        assert!(v.encode("Z").is_err());
    }

    #[test]
    fn windows_shift_by_one() {
        let toks: Vec<usize> = (0..10).collect();
        let w = token_windows(&toks, 3).unwrap();
        assert_eq!(w.example_count(), 3);
        assert_eq!(w.inputs.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(w.targets.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(10, 3, 1).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_indices()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(s.at_epoch_boundary());
        s.next_indices();
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn missing_corpus_is_io_error() {
        let err = load_text_corpus("/nonexistent/corpus.txt", 8, 1, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
