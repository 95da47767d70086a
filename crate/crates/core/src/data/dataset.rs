use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Encoded, EncodedBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
    Unlabeled,
}

/// Generator-side difficulty tag; only synthetic examples carry one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub classes: usize,
    pub label_names: Vec<String>,
}

impl TaskMeta {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            label_names: (0..classes).map(|i| i.to_string()).collect(),
        }
    }

    pub fn binary() -> Self {
        Self::new(2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: Option<usize>,
    pub difficulty: Option<Difficulty>,
}

impl Example {
    pub fn labeled(text: impl Into<String>, label: usize) -> Self {
        Self {
            text: text.into(),
            label: Some(label),
            difficulty: None,
        }
    }

    pub fn unlabeled(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: None,
            difficulty: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    examples: Vec<Example>,
    pub split: Split,
    pub task: TaskMeta,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, split: Split, task: TaskMeta) -> Result<Self> {
        if let Some(ex) = examples.iter().find(|e| e.label.is_some_and(|l| l >= task.classes)) {
            return Err(Error::Contract(format!(
                "label {} outside [0, {})",
                ex.label.unwrap(),
                task.classes
            )));
        }
        Ok(Self { examples, split, task })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Keeps the examples for which `pred` holds.
    pub fn filter(&self, pred: impl Fn(&Example) -> bool) -> Self {
        Self {
            examples: self.examples.iter().filter(|e| pred(e)).cloned().collect(),
            split: self.split,
            task: self.task.clone(),
        }
    }

    /// Reads `label<TAB>text` lines. Blank lines are skipped; an empty label
    /// field marks an unlabeled example.
    pub fn load_tsv(path: impl AsRef<Path>, split: Split, task: TaskMeta) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut examples = Vec::new();
        for (i, line) in content.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (label, text) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(line_no, "missing tab between label and text".into()))?;
            let label = if label.is_empty() {
                None
            } else {
                let l: usize = label
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("label {label:?} is not a non-negative integer")))?;
                if l >= task.classes {
                    return Err(parse_err(line_no, format!("label {l} outside [0, {})", task.classes)));
                }
                Some(l)
            };
            examples.push(Example {
                text: text.to_string(),
                label,
                difficulty: None,
            });
        }
        Self::new(examples, split, task)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            match ex.label {
                Some(l) => writeln!(out, "{l}\t{}", ex.text),
                None => writeln!(out, "\t{}", ex.text),
            }
            .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> EncodedSet {
        EncodedSet {
            rows: self.examples.iter().map(|e| vocab.encode(&e.text, max_len)).collect(),
            labels: self.examples.iter().map(|e| e.label).collect(),
            difficulty: self.examples.iter().map(|e| e.difficulty).collect(),
        }
    }
}

/// A dataset after tokenization, ready to be cut into batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSet {
    pub rows: Vec<Encoded>,
    pub labels: Vec<Option<usize>>,
    pub difficulty: Vec<Option<Difficulty>>,
}

impl EncodedSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Labels of every example; an error if any is missing.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Contract(format!("example {i} has no label"))))
            .collect()
    }

    /// Batch of the examples at `indices`; labels are attached when every
    /// selected example has one.
    pub fn batch(&self, indices: &[usize]) -> Result<EncodedBatch> {
        let rows: Vec<&Encoded> = indices.iter().map(|&i| &self.rows[i]).collect();
        let labels: Option<Vec<usize>> = indices.iter().map(|&i| self.labels[i]).collect();
        EncodedBatch::from_encoded(&rows, labels)
    }

    /// Consecutive batches of at most `size` examples, in order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |s| (s..(s + size).min(self.len())).collect())
    }
}
