//! Deterministic binary sentiment-like task with two kinds of samples.
//!
//! Easy samples carry keywords of both classes scattered among filler words;
//! the label is the class whose keywords are in the majority, so token counts
//! decide it. Hard samples carry one contiguous run of keywords plus one
//! `not`. When `not` sits directly before the run the label is
//! flipped; otherwise `not` trails the run and the label stands. The run
//! mixes the two classes exactly as easy samples do, and both layouts have the
//! same token counts, so only word order separates them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Difficulty, Example, Split, TaskMeta};
use crate::error::{Error, Result};

pub const NEGATION: &str = "not";
pub const KEYWORDS_PER_CLASS: usize = 8;
pub const FILLERS: usize = 23;
pub const MIN_LEN: usize = 8;
pub const MAX_LEN: usize = 24;

/// `neg{i}` for class 0, `pos{i}` for class 1.
pub fn keyword(class: usize, i: usize) -> String {
    format!("{}{i}", ["neg", "pos"][class])
}

pub fn filler(i: usize) -> String {
    format!("w{i}")
}

/// All 40 words the generator can emit.
pub fn lexicon() -> Vec<String> {
    (0..2)
        .flat_map(|c| (0..KEYWORDS_PER_CLASS).map(move |i| keyword(c, i)))
        .chain(std::iter::once(NEGATION.to_string()))
        .chain((0..FILLERS).map(filler))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub size: usize,
    /// Fraction of easy samples; the rest are hard.
    pub easy_frac: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 4000,
            easy_frac: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Split of sample `index`: a splitmix64 hash modulo 10 sends 8 buckets to
/// train, one to dev and one to test.
pub fn split_of(index: usize) -> Split {
    let mut z = (index as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    match z % 10 {
        8 => Split::Dev,
        9 => Split::Test,
        _ => Split::Train,
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.easy_frac) {
            return Err(Error::Config(format!("easy_frac {} outside [0, 1]", self.easy_frac)));
        }
        if self.size == 0 {
            return Err(Error::Config("synthetic size must be positive".into()));
        }
        Ok(())
    }

    /// Every sample in generation order, each tagged with its difficulty.
    pub fn generate(&self) -> Result<Vec<Example>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.size)
            .map(|_| {
                if rng.random::<f64>() < self.easy_frac {
                    easy(&mut rng)
                } else {
                    hard(&mut rng)
                }
            })
            .collect())
    }

    pub fn splits(&self) -> Result<SyntheticSplits> {
        let mut parts = [Vec::new(), Vec::new(), Vec::new()];
        for (i, ex) in self.generate()?.into_iter().enumerate() {
            let slot = match split_of(i) {
                Split::Train => 0,
                Split::Dev => 1,
                _ => 2,
            };
            parts[slot].push(ex);
        }
        let [train, dev, test] = parts;
        Ok(SyntheticSplits {
            train: Dataset::new(train, Split::Train, TaskMeta::binary())?,
            dev: Dataset::new(dev, Split::Dev, TaskMeta::binary())?,
            test: Dataset::new(test, Split::Test, TaskMeta::binary())?,
        })
    }
}

fn random_keyword(rng: &mut ChaCha8Rng, class: usize) -> String {
    keyword(class, rng.random_range(0..KEYWORDS_PER_CLASS))
}

fn random_filler(rng: &mut ChaCha8Rng) -> String {
    filler(rng.random_range(0..FILLERS))
}

/// Keywords of a sample whose majority class is `class`: 3–5 of it and at
/// least two fewer of the other class, in random order.
fn keyword_mix(rng: &mut ChaCha8Rng, class: usize) -> Vec<String> {
    let major = rng.random_range(3..=5);
    let minor = rng.random_range(0..=major - 2);
    let mut words: Vec<String> = (0..major).map(|_| random_keyword(rng, class)).collect();
    words.extend((0..minor).map(|_| random_keyword(rng, 1 - class)));
    words.shuffle(rng);
    words
}

fn easy(rng: &mut ChaCha8Rng) -> Example {
    let len = rng.random_range(MIN_LEN..=MAX_LEN);
    let label = rng.random_range(0..2);
    let mut words = keyword_mix(rng, label);
    while words.len() < len {
        words.push(random_filler(rng));
    }
    words.shuffle(rng);
    Example {
        text: words.join(" "),
        label: Some(label),
        difficulty: Some(Difficulty::Easy),
    }
}

fn hard(rng: &mut ChaCha8Rng) -> Example {
    let base = rng.random_range(0..2);
    let flip = rng.random_bool(0.5);
    let keywords = keyword_mix(rng, base);
    let prefix = rng.random_range(0..=2);
    let gap = if flip { 0 } else { rng.random_range(0..=2) };
    let needed = prefix + keywords.len() + gap + 1;
    let len = rng.random_range(MIN_LEN.max(needed)..=MAX_LEN);

    let mut words: Vec<String> = (0..prefix).map(|_| random_filler(rng)).collect();
    if flip {
        words.push(NEGATION.to_string());
        words.extend(keywords);
    } else {
        words.extend(keywords);
        words.extend((0..gap).map(|_| random_filler(rng)));
        words.push(NEGATION.to_string());
    }
    while words.len() < len {
        words.push(random_filler(rng));
    }
    Example {
        text: words.join(" "),
        label: Some(base ^ usize::from(flip)),
        difficulty: Some(Difficulty::Hard),
    }
}
