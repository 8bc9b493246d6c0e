//! Seeded synthetic corpora and held-out suffix examples.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Neutral sentences used as filler, both in documents and NIAH haystacks.
pub const FILLER_SENTENCES: &[&str] = &[
    "The grass is green and the sky is blue.",
    "A quiet wind moved across the open field.",
    "Rivers carry water slowly toward the sea.",
    "The old clock in the hall kept steady time.",
    "Bread was baking in the warm kitchen.",
    "Clouds gathered over the hills before noon.",
    "The library stayed open late on Thursdays.",
    "A small boat drifted near the wooden pier.",
    "Children walked home along the narrow road.",
    "The garden needed water after the dry week.",
    "Birds rested on the wire above the street.",
    "The market sold apples, onions and fresh herbs.",
    "Snow covered the roofs of the village.",
    "A lamp burned in the window of the cottage.",
    "The train arrived a few minutes early.",
    "Leaves turned yellow at the end of summer.",
];

const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ren", "tas", "vo", "dre", "ul", "bek", "sa", "nor", "fen", "ti", "gal", "mor", "esh"];
const ITEMS: &[&str] = &["lanterns", "maps", "coins", "seeds", "letters", "boats", "keys", "books"];
const COLORS: &[&str] = &["red", "green", "silver", "amber", "grey", "violet"];
const WORDS: &[&str] = &[
    "the", "a", "river", "stone", "light", "house", "walks", "sees", "under", "over", "green", "small", "old", "road", "tree", "wind",
    "carries", "holds", "near", "far", "bright", "cold", "morning", "evening", "bird", "field", "gate", "and", "with", "quietly", "again",
    "north", "south", "wall", "lamp", "keeps", "finds", "bridge", "hill", "water",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Markov,
    Template,
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov" => Ok(CorpusKind::Markov),
            "template" => Ok(CorpusKind::Template),
            _ => Err(Error::Config(format!("unknown corpus kind `{s}` (expected markov or template)"))),
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Markov => "markov",
            CorpusKind::Template => "template",
        })
    }
}

/// `size` bytes of seeded ASCII text.
pub fn gen_corpus(kind: CorpusKind, size: usize, seed: u64) -> Result<Vec<u8>> {
    if size == 0 {
        return Err(Error::Precondition("corpus size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(size + 1024);
    match kind {
        CorpusKind::Markov => markov(&mut rng, size, &mut out),
        CorpusKind::Template => {
            while out.len() < size {
                template_document(&mut rng, &mut out);
            }
        }
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(size);
    Ok(bytes)
}

fn markov(rng: &mut ChaCha8Rng, size: usize, out: &mut String) {
    let w = WORDS.len();
    // Each word pair has three weighted successors.
    let table: Vec<[(usize, f64); 3]> =
        (0..w * w).map(|_| std::array::from_fn(|_| (rng.random_range(0..w), rng.random::<f64>() + 0.1))).collect();
    let (mut a, mut b) = (0, 1);
    let mut in_sentence = 0;
    while out.len() < size {
        let succ = &table[a * w + b];
        let total: f64 = succ.iter().map(|s| s.1).sum();
        let mut x = rng.random::<f64>() * total;
        let mut next = succ[2].0;
        for &(c, wt) in succ {
            if x < wt {
                next = c;
                break;
            }
            x -= wt;
        }
        let word = WORDS[next];
        if in_sentence == 0 {
            let mut cs = word.chars();
            let first = cs.next().expect("non-empty word").to_ascii_uppercase();
            out.push(first);
            out.push_str(cs.as_str());
        } else {
            out.push(' ');
            out.push_str(word);
        }
        in_sentence += 1;
        if in_sentence >= 6 && rng.random_bool(0.2) {
            out.push_str(".\n");
            in_sentence = 0;
        }
        (a, b) = (b, next);
    }
}

fn invented_name(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    let mut s: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
    s[..1].make_ascii_uppercase();
    s
}

pub(crate) fn digits(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
}

struct Entity {
    name: String,
    place: String,
    count: String,
    item: &'static str,
    color: &'static str,
}

/// One paragraph introducing a few invented entities and then referring
/// back to their attributes, so later text is predictable from earlier text.
fn template_document(rng: &mut ChaCha8Rng, out: &mut String) {
    let n_entities = rng.random_range(2..=4);
    let entities: Vec<Entity> = (0..n_entities)
        .map(|_| Entity {
            name: invented_name(rng),
            place: invented_name(rng),
            count: {
                let len = rng.random_range(2..=4);
                digits(rng, len)
            },
            item: ITEMS.choose(rng).expect("non-empty"),
            color: COLORS.choose(rng).expect("non-empty"),
        })
        .collect();
    for e in &entities {
        out.push_str(&format!("{} lives in {} and has {} {} {}. ", e.name, e.place, e.count, e.color, e.item));
    }
    let passkey = rng.random_bool(0.3).then(|| digits(rng, 4));
    if let Some(code) = &passkey {
        out.push_str(&format!("Memory record: special_passkey={code}. "));
    }
    let n_sentences = rng.random_range(6..=12);
    for _ in 0..n_sentences {
        let e = &entities[rng.random_range(0..entities.len())];
        let s = match rng.random_range(0..6) {
            0 => format!("{} still lives in {}.", e.name, e.place),
            1 => format!("The {} of {} number {}.", e.item, e.name, e.count),
            2 => format!("Ask {} about the {} {}.", e.name, e.color, e.item),
            3 => format!("In {}, {} counts {} {} again.", e.place, e.name, e.count, e.item),
            4 => {
                if passkey.is_some() && rng.random_bool(0.3) {
                    format!("Ignore the misleading special passkey candidate {}.", digits(rng, 4))
                } else {
                    FILLER_SENTENCES.choose(rng).expect("non-empty").to_string()
                }
            }
            _ => FILLER_SENTENCES.choose(rng).expect("non-empty").to_string(),
        };
        out.push_str(&s);
        out.push(' ');
    }
    if let Some(code) = &passkey {
        out.push_str(&format!("Memory record: special_passkey={code}. "));
    }
    out.push_str("\n\n");
}

/// Splits off the last `val_fraction` of the stream as a validation slice.
pub fn split_train_val(tokens: &[usize], val_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let cut = tokens.len() - (tokens.len() as f64 * val_fraction) as usize;
    Ok((tokens[..cut].to_vec(), tokens[cut..].to_vec()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuffixExample {
    pub prefix: Vec<usize>,
    pub suffix: Vec<usize>,
}

impl SuffixExample {
    pub fn full(&self) -> Vec<usize> {
        let mut v = self.prefix.clone();
        v.extend_from_slice(&self.suffix);
        v
    }
}

/// `count` disjoint windows of length `n + k`, chosen by a seeded shuffle.
pub fn make_suffix_examples(tokens: &[usize], n: usize, k: usize, count: usize, seed: u64) -> Result<Vec<SuffixExample>> {
    if n == 0 || k == 0 {
        return Err(Error::Precondition("prefix and suffix lengths must be positive".into()));
    }
    let windows = tokens.len() / (n + k);
    if windows < count {
        return Err(Error::Precondition(format!(
            "corpus of {} tokens holds {windows} windows of {}; {count} requested",
            tokens.len(),
            n + k
        )));
    }
    let mut idx: Vec<usize> = (0..windows).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx[..count]
        .iter()
        .map(|&w| {
            let s = w * (n + k);
            SuffixExample { prefix: tokens[s..s + n].to_vec(), suffix: tokens[s + n..s + n + k].to_vec() }
        })
        .collect())
}
