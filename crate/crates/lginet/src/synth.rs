//! Seeded synthetic corpus generator.
//!
//! Each sample is a random dependency tree with a planted polarity word
//! whose hop distance to the (merged) aspect node is controlled. The label
//! is decided solely by that word, so a model must carry the signal across
//! the requested graph distance; an optional conflicting distractor word is
//! planted strictly farther away to punish bag-of-words shortcuts.

use crate::error::{Error, Result};
use crate::graphs::{aspect_distances, syntax_graph, ParseSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NEGATIVE: [&str; 3] = ["terrible", "awful", "bland"];
const NEUTRAL: [&str; 3] = ["okay", "average", "ordinary"];
const POSITIVE: [&str; 3] = ["great", "delicious", "amazing"];
const FILLER: [&str; 12] = [
    "the", "a", "food", "place", "service", "staff", "was", "with", "and", "very", "really",
    "quite",
];
const ASPECT_WORDS: [&str; 5] = ["pizza", "sushi", "coffee", "burger", "salad"];
const DEPRELS: [&str; 9] = [
    "nsubj", "amod", "obj", "det", "advmod", "prep", "pobj", "conj", "cc",
];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Target hop distance from the polarity word to the merged aspect node.
    pub distance: u32,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Plant a conflicting polarity word strictly farther than `distance`.
    pub distractor: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 32,
            seed: 0,
            distance: 2,
            min_tokens: 8,
            max_tokens: 12,
            distractor: false,
        }
    }
}

fn lexicon(class: u8) -> &'static [&'static str; 3] {
    match class {
        0 => &NEGATIVE,
        1 => &NEUTRAL,
        _ => &POSITIVE,
    }
}

/// Random recursive tree with relabeled positions so the root lands
/// anywhere.
pub fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<usize>> {
    let mut heads: Vec<Option<usize>> = vec![None];
    for i in 1..n {
        heads.push(Some(rng.gen_range(0..i)));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let mut out = vec![None; n];
    for i in 0..n {
        out[perm[i]] = heads[i].map(|h| perm[h]);
    }
    out
}

fn sample_once(rng: &mut ChaCha8Rng, cfg: &SynthConfig, class: u8) -> Result<Option<ParseSample>> {
    let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
    let heads = random_tree(rng, n);
    // Aspect: one or (25% of the time) two adjacent tokens.
    let two_word = n > 4 && rng.gen_bool(0.25);
    let a_len = if two_word { 2 } else { 1 };
    let a_start = rng.gen_range(0..=n - a_len);

    let mut sample = ParseSample {
        tokens: vec![String::new(); n],
        heads,
        deprels: (0..n)
            .map(|_| DEPRELS[rng.gen_range(0..DEPRELS.len())].to_string())
            .collect(),
        aspect: (a_start, a_start + a_len),
        label: class,
    };
    if sample.aspect_len() == sample.n_tokens() {
        return Ok(None);
    }
    let sg = syntax_graph(&sample)?;
    let dist = aspect_distances(&sg);

    // Merged index -> original token index for context nodes.
    let unmap = |mi: usize| if mi < a_start { mi } else { mi + (a_len - 1) };
    let at_distance: Vec<usize> = (0..sg.n)
        .filter(|&mi| mi != sg.tau && dist[mi] == Some(cfg.distance))
        .map(unmap)
        .collect();
    if at_distance.is_empty() {
        return Ok(None);
    }
    let polarity_pos = at_distance[rng.gen_range(0..at_distance.len())];

    let distractor_pos = if cfg.distractor {
        let farther: Vec<usize> = (0..sg.n)
            .filter(|&mi| mi != sg.tau && dist[mi].map(|d| d > cfg.distance).unwrap_or(false))
            .map(unmap)
            .filter(|&p| p != polarity_pos)
            .collect();
        if farther.is_empty() {
            return Ok(None);
        }
        Some(farther[rng.gen_range(0..farther.len())])
    } else {
        None
    };

    for i in 0..n {
        sample.tokens[i] = FILLER[rng.gen_range(0..FILLER.len())].to_string();
    }
    let aspect_word = ASPECT_WORDS[rng.gen_range(0..ASPECT_WORDS.len())];
    for i in a_start..a_start + a_len {
        sample.tokens[i] = aspect_word.to_string();
    }
    let lex = lexicon(class);
    sample.tokens[polarity_pos] = lex[rng.gen_range(0..lex.len())].to_string();
    if let Some(pos) = distractor_pos {
        let other_class = (class + 1 + rng.gen_range(0..2)) % 3;
        let lex = lexicon(other_class);
        sample.tokens[pos] = lex[rng.gen_range(0..lex.len())].to_string();
    }
    sample.validate()?;
    Ok(Some(sample))
}

/// Deterministic corpus: cycles through the three classes; trees without a
/// node at the requested distance are resampled.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<ParseSample>> {
    if cfg.n_samples == 0 {
        return Err(Error::config("synthetic corpus size must be at least 1"));
    }
    if cfg.min_tokens < 3 || cfg.min_tokens > cfg.max_tokens {
        return Err(Error::config(format!(
            "bad token range {}..={}",
            cfg.min_tokens, cfg.max_tokens
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_samples);
    let mut class = 0u8;
    let mut attempts = 0usize;
    let budget = cfg.n_samples * 1000;
    while out.len() < cfg.n_samples {
        attempts += 1;
        if attempts > budget {
            return Err(Error::config(format!(
                "could not place a polarity word at distance {} within {} attempts; \
                 try a smaller distance or longer sentences",
                cfg.distance, budget
            )));
        }
        if let Some(sample) = sample_once(&mut rng, cfg, class)? {
            out.push(sample);
            class = (class + 1) % 3;
        }
    }
    Ok(out)
}
