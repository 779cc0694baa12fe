//! Tokenization, TSV ingestion, padded batches and the synthetic overlap task.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{with_path, Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Token-to-id map with the four reserved ids fixed at 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from content tokens; reserved tokens come first.
    /// Duplicates and reserved names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()) {
            vocab.push(t);
        }
        for t in tokens {
            let t = t.as_ref().to_lowercase();
            if !vocab.ids.contains_key(&t) {
                vocab.push(t);
            }
        }
        vocab
    }

    fn push(&mut self, t: String) {
        self.ids.insert(t.clone(), self.tokens.len());
        self.tokens.push(t);
    }

    /// Reads a vocabulary file: one token per line, line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(with_path(path))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(format!(
                "{}: vocabulary must start with {RESERVED:?}",
                path.display()
            )));
        }
        let mut vocab = Self::from_tokens(std::iter::empty::<&str>());
        for (i, line) in lines.iter().enumerate().skip(RESERVED.len()) {
            if vocab.ids.contains_key(*line) {
                return Err(Error::Data(format!(
                    "{}:{}: duplicate token {line:?}",
                    path.display(),
                    i + 1
                )));
            }
            vocab.push(line.to_string());
        }
        Ok(vocab)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
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

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: Option<usize>,
}

/// One packed sequence: `[CLS] a [SEP] (b [SEP])?` padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub segments: Vec<usize>,
    pub label: Option<usize>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions.
    pub fn n_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Packs an example BERT-style. Truncation drops tokens from the end of the
/// longer span until the sequence fits; ties drop from the second span.
pub fn tokenize(example: &Example, vocab: &Vocab, max_len: usize) -> Result<Encoded> {
    if max_len < 4 {
        return Err(Error::Contract(format!("max_len must be at least 4, got {max_len}")));
    }
    let mut a: Vec<usize> = words(&example.text_a).iter().map(|w| vocab.id(w)).collect();
    let mut b: Option<Vec<usize>> = example
        .text_b
        .as_ref()
        .map(|t| words(t).iter().map(|w| vocab.id(w)).collect());
    let special = if b.is_some() { 3 } else { 2 };
    let budget = max_len - special;
    loop {
        let total = a.len() + b.as_ref().map_or(0, Vec::len);
        if total <= budget {
            break;
        }
        match &mut b {
            Some(bs) if bs.len() >= a.len() => {
                bs.pop();
            }
            _ => {
                a.pop();
            }
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(&a);
    ids.push(SEP);
    segments.resize(ids.len(), 0);
    if let Some(bs) = b {
        ids.extend(&bs);
        ids.push(SEP);
        segments.resize(ids.len(), 1);
    }
    let n_real = ids.len();
    ids.resize(max_len, PAD);
    segments.resize(max_len, 0);
    let mask = (0..max_len).map(|i| i < n_real).collect();
    Ok(Encoded {
        ids,
        mask,
        segments,
        label: example.label,
    })
}

pub fn tokenize_all(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<Vec<Encoded>> {
    examples.iter().map(|e| tokenize(e, vocab, max_len)).collect()
}

/// Column layout of a TSV corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsvSchema {
    pub text_a: usize,
    pub text_b: Option<usize>,
    pub label: Option<usize>,
    pub skip_header: bool,
    pub n_classes: usize,
}

impl Default for TsvSchema {
    fn default() -> Self {
        Self {
            text_a: 0,
            text_b: Some(1),
            label: Some(2),
            skip_header: false,
            n_classes: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsvCorpus {
    pub examples: Vec<Example>,
    /// 1-based line numbers of lines that were skipped as malformed.
    pub malformed: Vec<usize>,
}

pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<TsvCorpus> {
    let text = fs::read_to_string(path).map_err(with_path(path))?;
    let mut examples = Vec::new();
    let mut malformed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if (i == 0 && schema.skip_header) || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let Some(a) = cols.get(schema.text_a) else {
            malformed.push(line_no);
            continue;
        };
        let b = match schema.text_b {
            Some(c) => match cols.get(c) {
                Some(b) => Some(b.to_string()),
                None => {
                    malformed.push(line_no);
                    continue;
                }
            },
            None => None,
        };
        let label = match schema.label {
            Some(c) => {
                let Some(raw) = cols.get(c) else {
                    malformed.push(line_no);
                    continue;
                };
                let Ok(y) = raw.trim().parse::<i64>() else {
                    malformed.push(line_no);
                    continue;
                };
                if y < 0 || y as usize >= schema.n_classes {
                    return Err(Error::Data(format!(
                        "{}:{line_no}: label {y} outside 0..{}",
                        path.display(),
                        schema.n_classes
                    )));
                }
                Some(y as usize)
            }
            None => None,
        };
        examples.push(Example {
            text_a: a.to_string(),
            text_b: b,
            label,
        });
    }
    Ok(TsvCorpus {
        examples,
        malformed,
    })
}

pub fn write_tsv(path: &Path, examples: &[Example]) -> Result<()> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&e.text_a);
        out.push('\t');
        out.push_str(e.text_b.as_deref().unwrap_or(""));
        out.push('\t');
        if let Some(y) = e.label {
            out.push_str(&y.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parameters of the synthetic sentence-pair overlap task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    pub n_symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Label is 1 iff the Jaccard overlap of the two token sets reaches this.
    pub threshold: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            n_symbols: 24,
            min_len: 3,
            max_len: 5,
            threshold: 0.5,
        }
    }
}

impl SyntheticTask {
    pub fn symbols(&self) -> Vec<String> {
        (0..self.n_symbols).map(|i| format!("s{i}")).collect()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens(self.symbols())
    }

    pub fn label(&self, a: &str, b: &str) -> usize {
        usize::from(jaccard(a, b) >= self.threshold)
    }
}

/// Jaccard overlap of the whitespace token sets of two texts.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<String> = words(a).into_iter().collect();
    let sb: BTreeSet<String> = words(b).into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Deterministic synthetic overlap corpus with exactly balanced labels
/// (an odd `n` leaves one extra negative).
pub fn gen_synthetic(task: &SyntheticTask, n: usize, seed: u64) -> Result<(Vec<Example>, Vocab)> {
    if n == 0 {
        return Err(Error::Contract("synthetic corpus size must be at least 1".into()));
    }
    if task.min_len == 0 || task.min_len > task.max_len || task.max_len > task.n_symbols {
        return Err(Error::Config(format!("invalid synthetic task {task:?}")));
    }
    if !(0.0..=1.0).contains(&task.threshold) || task.threshold == 0.0 {
        return Err(Error::Config("synthetic threshold must lie in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols = task.symbols();
    let mut targets: Vec<usize> = (0..n).map(|i| i % 2).collect();
    targets.shuffle(&mut rng);
    let mut examples = Vec::with_capacity(n);
    for target in targets {
        let len_a = rng.gen_range(task.min_len..=task.max_len);
        let a: Vec<&String> = symbols.choose_multiple(&mut rng, len_a).collect();
        let text_a = join(&a);
        let text_b = loop {
            let len_b = rng.gen_range(task.min_len..=task.max_len);
            let keep = rng.gen_range(0..=len_b.min(len_a));
            let mut b: Vec<&String> = a.choose_multiple(&mut rng, keep).copied().collect();
            let fresh: Vec<&String> = symbols.iter().filter(|s| !b.contains(s)).collect();
            b.extend(fresh.choose_multiple(&mut rng, len_b - keep).copied());
            b.shuffle(&mut rng);
            let text_b = join(&b);
            if task.label(&text_a, &text_b) == target {
                break text_b;
            }
        };
        examples.push(Example {
            text_a,
            text_b: Some(text_b),
            label: Some(target),
        });
    }
    Ok((examples, task.vocab()))
}

fn join(tokens: &[&String]) -> String {
    tokens.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ")
}

/// A padded batch in row-major `[N × L]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub segments: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    pub n: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_encoded(items: &[&Encoded]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::Contract("empty batch".into()));
        };
        let seq_len = first.len();
        if items.iter().any(|e| e.len() != seq_len) {
            return Err(Error::Contract("batch rows differ in length".into()));
        }
        if items.iter().any(|e| e.ids.first() != Some(&CLS)) {
            return Err(Error::Contract("every batch row must start with [CLS]".into()));
        }
        let labels = items.iter().map(|e| e.label).collect::<Option<Vec<_>>>();
        Ok(Self {
            ids: items.iter().flat_map(|e| e.ids.iter().copied()).collect(),
            mask: items.iter().flat_map(|e| e.mask.iter().copied()).collect(),
            segments: items.iter().flat_map(|e| e.segments.iter().copied()).collect(),
            labels,
            n: items.len(),
            seq_len,
        })
    }

    pub fn sample_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

/// Example order for one epoch: a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Splits `data` into batches, shuffled when `shuffle` is `Some((seed, epoch))`.
pub fn make_batches(
    data: &[Encoded],
    batch_size: usize,
    shuffle: Option<(u64, usize)>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let order = match shuffle {
        Some((seed, epoch)) => epoch_order(data.len(), seed, epoch),
        None => (0..data.len()).collect(),
    };
    order
        .chunks(batch_size)
        .map(|idx| Batch::from_encoded(&idx.iter().map(|&i| &data[i]).collect::<Vec<_>>()))
        .collect()
}
