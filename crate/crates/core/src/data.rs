//! Dataset ingestion, whitespace tokenization, k-shot sampling, and a
//! deterministic synthetic classification task.
//!
//! Everything seeded, nothing global: two runs with the same seed produce
//! identical datasets, vocabularies, splits and batches.

use crate::error::{Error, Result};
use crate::train::TokenizedSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    #[default]
    Train,
    Validation,
    Test,
}

/// Labeled text examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<(String, usize)>,
    pub n_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;

/// Token to id map with reserved pad/unk/cls entries. Construction sorts the
/// corpus tokens, so the same corpus always yields the same ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    map: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub fn build(dataset: &Dataset) -> Vocabulary {
        let mut tokens: Vec<String> = dataset
            .examples
            .iter()
            .flat_map(|(text, _)| text.split_whitespace().map(|t| t.to_lowercase()))
            .collect();
        tokens.sort();
        tokens.dedup();
        let map = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i as u32 + 3))
            .collect();
        Vocabulary { map }
    }

    pub fn id(&self, token: &str) -> u32 {
        self.map.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Reserved ids plus corpus tokens.
    pub fn len(&self) -> usize {
        self.map.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (token, id) in &self.map {
            writeln!(f, "{token}\t{id}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let f = std::fs::File::open(path)?;
        let mut map = BTreeMap::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (token, id) = line.split_once('\t').ok_or(Error::Parse {
                line: lineno + 1,
                reason: "expected `token<TAB>id`".into(),
            })?;
            let id: u32 = id.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                reason: format!("bad id `{id}`"),
            })?;
            map.insert(token.to_string(), id);
        }
        Ok(Vocabulary { map })
    }
}

/// Parse `label<TAB>text` lines.
pub fn load_tsv(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let mut examples = Vec::new();
    let mut max_label = 0usize;
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (label, text) = line.split_once('\t').ok_or(Error::Parse {
            line: lineno + 1,
            reason: "expected `label<TAB>text`".into(),
        })?;
        let label: usize = label.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            reason: format!("label `{label}` is not a nonnegative integer"),
        })?;
        max_label = max_label.max(label);
        examples.push((text.to_string(), label));
    }
    if examples.is_empty() {
        return Err(Error::Data(format!("no examples in {}", path.display())));
    }
    Ok(Dataset { examples, n_classes: max_label + 1, split: SplitTag::Train })
}

pub fn save_tsv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (text, label) in &dataset.examples {
        writeln!(f, "{label}\t{text}")?;
    }
    Ok(())
}

/// Lowercased whitespace tokenization with a leading `[cls]` id, truncated
/// to `max_len` ids.
pub fn tokenize(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<Vec<u32>> {
    if max_len < 2 {
        return Err(Error::Range(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut ids = vec![CLS_ID];
    for tok in text.split_whitespace() {
        if ids.len() == max_len {
            break;
        }
        ids.push(vocab.id(&tok.to_lowercase()));
    }
    Ok(ids)
}

/// Tokenize a whole dataset, padding every row to exactly `pad_to` ids so
/// batches of any composition see identical padding.
pub fn tokenize_dataset(vocab: &Vocabulary, data: &Dataset, pad_to: usize) -> Result<TokenizedSet> {
    let mut inputs = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for (text, label) in &data.examples {
        let mut ids = tokenize(vocab, text, pad_to)?;
        ids.resize(pad_to, PAD_ID);
        inputs.push(ids);
        labels.push(*label);
    }
    Ok(TokenizedSet { inputs, labels, n_classes: data.n_classes })
}

/// Draw exactly `k` examples per class (seeded, without replacement); the
/// remainder keeps everything else. Both halves preserve original order.
pub fn kshot_sample(data: &Dataset, k: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, label)) in data.examples.iter().enumerate() {
        by_class.entry(*label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for class in 0..data.n_classes {
        let members = by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} examples, fewer than k = {k}",
                members.len()
            )));
        }
        let mut pool = members.to_vec();
        pool.shuffle(&mut rng);
        chosen.extend(pool.into_iter().take(k));
    }
    chosen.sort_unstable();
    let mut train = Vec::with_capacity(chosen.len());
    let mut rest = Vec::with_capacity(data.len() - chosen.len());
    let mut cursor = chosen.iter().peekable();
    for (i, ex) in data.examples.iter().enumerate() {
        if cursor.peek() == Some(&&i) {
            train.push(ex.clone());
            cursor.next();
        } else {
            rest.push(ex.clone());
        }
    }
    Ok((
        Dataset { examples: train, n_classes: data.n_classes, split: SplitTag::Train },
        Dataset { examples: rest, n_classes: data.n_classes, split: data.split },
    ))
}

/// Number of distinct signal tokens per class in the synthetic task.
const SYNTH_SIGNALS_PER_CLASS: usize = 4;
/// Probability that a signal slot draws from the wrong class's set.
const SYNTH_CROSSTALK: f64 = 0.05;

/// Generate a learnable two-class task: each class owns a small set of
/// signal tokens planted among shared noise tokens. Signal slots draw from
/// the wrong class with small probability, so a majority-vote on signal
/// tokens (the closed-form reference classifier) is right at least 95% of
/// the time by construction.
pub fn synth_task(seed: u64, n: usize, vocab_size: usize, seq_len: usize) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 examples, got {n}")));
    }
    if vocab_size < 2 * SYNTH_SIGNALS_PER_CLASS + 4 {
        return Err(Error::Data(format!(
            "vocab_size {vocab_size} too small for signal plus noise tokens"
        )));
    }
    if seq_len < 2 {
        return Err(Error::Data(format!("seq_len must be at least 2, got {seq_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sig = (seq_len / 4).max(2).min(seq_len);
    let noise_lo = 2 * SYNTH_SIGNALS_PER_CLASS;
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut positions: Vec<usize> = (0..seq_len).collect();
        positions.shuffle(&mut rng);
        let signal_positions: Vec<usize> = positions.into_iter().take(n_sig).collect();
        let mut tokens = Vec::with_capacity(seq_len);
        for pos in 0..seq_len {
            let tok = if signal_positions.contains(&pos) {
                let class = if rng.gen::<f64>() < SYNTH_CROSSTALK { 1 - label } else { label };
                let s = rng.gen_range(0..SYNTH_SIGNALS_PER_CLASS);
                class * SYNTH_SIGNALS_PER_CLASS + s
            } else {
                rng.gen_range(noise_lo..vocab_size)
            };
            tokens.push(format!("w{tok}"));
        }
        examples.push((tokens.join(" "), label));
    }
    examples.shuffle(&mut rng);
    Ok(Dataset { examples, n_classes: 2, split: SplitTag::Train })
}

/// The closed-form reference classifier for [`synth_task`]: majority vote
/// over class signal tokens, ties to class 0.
pub fn synth_oracle_label(text: &str) -> usize {
    let mut counts = [0usize; 2];
    for tok in text.split_whitespace() {
        if let Some(idx) = tok.strip_prefix('w').and_then(|s| s.parse::<usize>().ok()) {
            if idx < SYNTH_SIGNALS_PER_CLASS {
                counts[0] += 1;
            } else if idx < 2 * SYNTH_SIGNALS_PER_CLASS {
                counts[1] += 1;
            }
        }
    }
    usize::from(counts[1] > counts[0])
}
