//! Classification tasks: five synthetic single-sequence tasks, the reduced
//! `small` training variant, and TSV ingestion.
//!
//! Each synthetic task targets one axis of the head space: `keyword` and
//! `majority` reward the right pooling, `trigram` rewards local
//! convolution, `order` rewards attention, `parity` rewards depth.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Tokenizer, CLS, FIRST_TOKEN, PAD};
use crate::error::{Error, Result};

/// Content vocabulary size of the synthetic tasks.
pub const CONTENT_TOKENS: u32 = 64;
/// Content tokens per synthetic sequence (CLS is prepended).
pub const CONTENT_LEN: usize = 30;
/// Padded sequence length.
pub const SEQ_LEN: usize = 32;
/// Training examples kept by [`make_small`] by default.
pub const SMALL_TRAIN: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Keyword,
    Majority,
    Order,
    Trigram,
    Parity,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Keyword,
        TaskKind::Majority,
        TaskKind::Order,
        TaskKind::Trigram,
        TaskKind::Parity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Keyword => "keyword",
            TaskKind::Majority => "majority",
            TaskKind::Order => "order",
            TaskKind::Trigram => "trigram",
            TaskKind::Parity => "parity",
        }
    }

    fn marker_count(self) -> usize {
        match self {
            TaskKind::Keyword | TaskKind::Parity => 1,
            TaskKind::Majority | TaskKind::Order => 2,
            TaskKind::Trigram => 3,
        }
    }

    /// Label of a content sequence (CLS and PAD stripped) given the
    /// task's marker tokens.
    pub fn label(self, content: &[u32], markers: &[u32]) -> usize {
        let count = |m: u32| content.iter().filter(|&&t| t == m).count();
        match self {
            TaskKind::Keyword => (count(markers[0]) > 0) as usize,
            TaskKind::Majority => (count(markers[0]) > count(markers[1])) as usize,
            TaskKind::Order => {
                let pos = |m: u32| content.iter().position(|&t| t == m);
                match (pos(markers[0]), pos(markers[1])) {
                    (Some(a), Some(b)) => (a < b) as usize,
                    _ => 0,
                }
            }
            TaskKind::Trigram => content
                .windows(3)
                .any(|w| w == &markers[..3])
                .into(),
            TaskKind::Parity => count(markers[0]) % 2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Data(format!(
                    "unknown task kind '{s}' (expected one of keyword, majority, order, trigram, parity)"
                ))
            })
    }
}

/// Padded id sequences with their labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub ids: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn push(&mut self, ids: Vec<u32>, label: usize) {
        self.ids.push(ids);
        self.labels.push(label);
    }

    fn select(&self, idx: &[usize]) -> Split {
        Split {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub kind: Option<TaskKind>,
    /// Marker tokens the synthetic labeler looks for; empty for TSV data.
    pub markers: Vec<u32>,
    pub num_classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 500,
            test: 500,
        }
    }
}

pub fn generate(kind: TaskKind, seed: u64) -> TaskDataset {
    generate_with(kind, seed, SplitSizes::default())
}

/// Builds a task with exactly alternating labels in every split. Content
/// sequences are unique across all splits.
pub fn generate_with(kind: TaskKind, seed: u64, sizes: SplitSizes) -> TaskDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<u32> = (FIRST_TOKEN..FIRST_TOKEN + CONTENT_TOKENS).collect();
    let markers: Vec<u32> = pool
        .choose_multiple(&mut rng, kind.marker_count())
        .copied()
        .collect();
    let fillers: Vec<u32> = pool
        .iter()
        .copied()
        .filter(|t| !markers.contains(t))
        .collect();
    let mut seen = HashSet::new();
    let mut make_split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut split = Split::default();
        for i in 0..n {
            let label = i % 2;
            let content = loop {
                let c = sample_content(kind, label, &markers, &fillers, rng);
                debug_assert_eq!(kind.label(&c, &markers), label);
                if seen.insert(c.clone()) {
                    break c;
                }
            };
            split.push(pad_sequence(&content), label);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        split.select(&order)
    };
    let train = make_split(sizes.train, &mut rng);
    let val = make_split(sizes.val, &mut rng);
    let test = make_split(sizes.test, &mut rng);
    TaskDataset {
        name: kind.name().to_string(),
        kind: Some(kind),
        markers,
        num_classes: 2,
        train,
        val,
        test,
    }
}

fn pad_sequence(content: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(SEQ_LEN);
    ids.push(CLS);
    ids.extend_from_slice(content);
    ids.resize(SEQ_LEN, PAD);
    ids
}

/// Fills distinct random positions of `seq` with `token`.
fn plant(seq: &mut [u32], token: u32, count: usize, taken: &mut Vec<usize>, rng: &mut impl Rng) {
    let mut placed = 0;
    while placed < count {
        let p = rng.random_range(0..seq.len());
        if !taken.contains(&p) {
            seq[p] = token;
            taken.push(p);
            placed += 1;
        }
    }
}

fn sample_content(kind: TaskKind, label: usize, markers: &[u32], fillers: &[u32], rng: &mut impl Rng) -> Vec<u32> {
    let mut seq: Vec<u32> = (0..CONTENT_LEN)
        .map(|_| fillers[rng.random_range(0..fillers.len())])
        .collect();
    let mut taken = Vec::new();
    match kind {
        TaskKind::Keyword => {
            if label == 1 {
                let n = rng.random_range(1..=3);
                plant(&mut seq, markers[0], n, &mut taken, rng);
            }
        }
        TaskKind::Majority => {
            let small = rng.random_range(1..=4);
            let big = small + rng.random_range(1..=2);
            let (ca, cb) = if label == 1 { (big, small) } else { (small, big) };
            plant(&mut seq, markers[0], ca, &mut taken, rng);
            plant(&mut seq, markers[1], cb, &mut taken, rng);
        }
        TaskKind::Order => {
            plant(&mut seq, markers[0], 1, &mut taken, rng);
            plant(&mut seq, markers[1], 1, &mut taken, rng);
            let (pa, pb) = (taken[0], taken[1]);
            if (pa < pb) != (label == 1) {
                seq.swap(pa, pb);
            }
        }
        TaskKind::Trigram => loop {
            // Every sequence holds each marker exactly once, so the label
            // depends only on their arrangement.
            let mut s = seq.clone();
            if label == 1 {
                let start = rng.random_range(0..CONTENT_LEN - 2);
                s[start..start + 3].copy_from_slice(&markers[..3]);
            } else if rng.random_bool(0.5) {
                let start = rng.random_range(0..CONTENT_LEN - 2);
                let mut m = markers[..3].to_vec();
                while m == markers[..3] {
                    m.shuffle(rng);
                }
                s[start..start + 3].copy_from_slice(&m);
            } else {
                let mut t = Vec::new();
                for &m in &markers[..3] {
                    plant(&mut s, m, 1, &mut t, rng);
                }
            }
            if kind.label(&s, markers) == label {
                seq = s;
                break;
            }
        },
        TaskKind::Parity => {
            let options: [usize; 3] = if label == 1 { [1, 3, 5] } else { [2, 4, 6] };
            let n = options[rng.random_range(0..3)];
            plant(&mut seq, markers[0], n, &mut taken, rng);
        }
    }
    seq
}

/// Replaces the training split with `n` examples drawn without
/// replacement; evaluation splits are untouched.
pub fn make_small(task: &TaskDataset, n: usize, rng: &mut impl Rng) -> Result<TaskDataset> {
    if n > task.train.len() {
        return Err(Error::Data(format!(
            "cannot draw {n} samples from a training split of {}",
            task.train.len()
        )));
    }
    let idx = index::sample(rng, task.train.len(), n).into_vec();
    Ok(TaskDataset {
        name: format!("{}-small", task.name),
        train: task.train.select(&idx),
        ..task.clone()
    })
}

/// Reads a tab-separated file with a header row. Labels map to contiguous
/// integers by first appearance; rows are split 70/15/15 after a seeded
/// shuffle.
pub fn load_tsv(
    path: &Path,
    text_column: &str,
    label_column: &str,
    tokenizer: &Tokenizer,
    seed: u64,
) -> Result<TaskDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(file);
    let where_ = path.display();
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{where_}: unreadable header: {e}")))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Data(format!("{where_}: empty file")));
    }
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Data(format!("{where_}: column '{name}' not found in header"))
        })
    };
    let text_idx = column(text_column)?;
    let label_idx = column(label_column)?;

    let mut label_names: Vec<String> = Vec::new();
    let mut rows = Split::default();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Data(format!("{where_}: line {line}: unreadable row: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |idx: usize, what: &str| match record.get(idx) {
            Some(v) if !v.trim().is_empty() => Ok(v.trim().to_string()),
            _ => Err(Error::Data(format!("{where_}: line {line}: missing {what} cell"))),
        };
        let text = cell(text_idx, "text")?;
        let label = cell(label_idx, "label")?;
        let y = match label_names.iter().position(|l| *l == label) {
            Some(y) => y,
            None => {
                label_names.push(label);
                label_names.len() - 1
            }
        };
        rows.push(tokenizer.encode(&text), y);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{where_}: no data rows")));
    }
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tsv".into());
    Ok(TaskDataset {
        name,
        kind: None,
        markers: Vec::new(),
        num_classes: label_names.len().max(2),
        train: rows.select(&order[..n_train]),
        val: rows.select(&order[n_train..n_train + n_val]),
        test: rows.select(&order[n_train + n_val..]),
    })
}
