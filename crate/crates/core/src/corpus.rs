//! Character corpora for the micro language model.
//!
//! The built-in corpus is generated from a small phrase grammar over a fixed
//! English lexicon, so it is reproducible from a seed and needs no files.
//! Any UTF-8 or ASCII text file can be used instead.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rounding::{Address, RoundRng};

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that", "no", "one"];
const ADJECTIVES: &[&str] = &[
    "old", "young", "quiet", "bright", "dark", "small", "great", "little", "cold", "warm", "green", "grey",
    "silent", "gentle", "proud", "wild", "strange", "simple", "tired", "happy", "patient", "distant", "narrow",
    "heavy", "empty", "golden",
];
const NOUNS: &[&str] = &[
    "king", "queen", "river", "house", "garden", "window", "horse", "letter", "soldier", "village", "mountain",
    "friend", "stranger", "child", "mother", "father", "captain", "ship", "road", "forest", "door", "lamp",
    "table", "bird", "winter", "morning", "evening", "city", "bridge", "stone", "field", "book", "servant",
    "doctor", "sister", "brother", "voice", "fire", "storm", "harbour",
];
const VERBS: &[(&str, &str)] = &[
    ("sees", "saw"),
    ("finds", "found"),
    ("keeps", "kept"),
    ("follows", "followed"),
    ("watches", "watched"),
    ("remembers", "remembered"),
    ("leaves", "left"),
    ("carries", "carried"),
    ("loves", "loved"),
    ("fears", "feared"),
    ("answers", "answered"),
    ("reaches", "reached"),
    ("opens", "opened"),
    ("passes", "passed"),
    ("holds", "held"),
    ("calls", "called"),
];
const INTRANSITIVE: &[(&str, &str)] = &[
    ("sleeps", "slept"),
    ("waits", "waited"),
    ("laughs", "laughed"),
    ("listens", "listened"),
    ("returns", "returned"),
    ("falls", "fell"),
    ("rests", "rested"),
    ("wanders", "wandered"),
];
const PREPOSITIONS: &[&str] = &["near", "beyond", "under", "across", "behind", "beside", "toward", "along"];
const ADVERBS: &[&str] = &["slowly", "again", "at last", "quietly", "once more", "before dawn", "all day"];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "until"];
const NAMES: &[&str] = &["Anna", "Thomas", "Mary", "John", "Elena", "Robert", "Clara", "Henry"];

/// Tokenized corpus with a byte-level vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    vocab: Vec<u8>,
    train: Vec<u8>,
    val: Vec<u8>,
}

struct Gen<'a> {
    rng: &'a RoundRng,
    n: u64,
}

impl Gen<'_> {
    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        self.n += 1;
        xs[self.rng.below(Address::new(0, 0, self.n), xs.len() as u64) as usize]
    }

    fn chance(&mut self, p: f64) -> bool {
        self.n += 1;
        self.rng.uniform(Address::new(0, 1, self.n)) < p
    }

    fn noun_phrase(&mut self, out: &mut String) {
        if self.chance(0.15) {
            out.push_str(self.pick(NAMES));
            return;
        }
        out.push_str(self.pick(DETERMINERS));
        out.push(' ');
        if self.chance(0.5) {
            out.push_str(self.pick(ADJECTIVES));
            out.push(' ');
        }
        out.push_str(self.pick(NOUNS));
        if self.chance(0.2) {
            out.push(' ');
            out.push_str(self.pick(PREPOSITIONS));
            out.push_str(" the ");
            out.push_str(self.pick(NOUNS));
        }
    }

    fn clause(&mut self, out: &mut String, past: bool) {
        self.noun_phrase(out);
        out.push(' ');
        if self.chance(0.3) {
            let (p, q) = self.pick(INTRANSITIVE);
            out.push_str(if past { q } else { p });
        } else {
            let (p, q) = self.pick(VERBS);
            out.push_str(if past { q } else { p });
            out.push(' ');
            self.noun_phrase(out);
        }
        if self.chance(0.25) {
            out.push(' ');
            out.push_str(self.pick(ADVERBS));
        }
    }

    fn sentence(&mut self, out: &mut String) {
        let start = out.len();
        let past = self.chance(0.6);
        self.clause(out, past);
        if self.chance(0.35) {
            out.push_str(", ");
            out.push_str(self.pick(CONJUNCTIONS));
            out.push(' ');
            self.clause(out, past);
        }
        out.push(if self.chance(0.1) { '?' } else { '.' });
        out[start..start + 1].make_ascii_uppercase();
    }
}

impl Corpus {
    /// About `bytes` characters of grammar-generated text.
    pub fn synthetic(seed: u64, bytes: usize) -> Self {
        let rng = RoundRng::new(seed);
        let mut g = Gen { rng: &rng, n: 0 };
        let mut text = String::with_capacity(bytes + 256);
        while text.len() < bytes {
            let sentences = 2 + g.pick(&[0usize, 1, 2, 3, 4]);
            for k in 0..sentences {
                if k > 0 {
                    text.push(' ');
                }
                g.sentence(&mut text);
            }
            text.push('\n');
        }
        text.truncate(bytes);
        Self::from_bytes(text.as_bytes(), 0.1)
    }

    pub fn from_file(path: &Path, val_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 64 {
            return Err(Error::config("corpus", "file too small"));
        }
        Ok(Self::from_bytes(&bytes, val_fraction))
    }

    /// Vocabulary is the sorted set of distinct bytes; the last
    /// `val_fraction` of the text is held out.
    pub fn from_bytes(bytes: &[u8], val_fraction: f64) -> Self {
        let mut seen = [false; 256];
        for &b in bytes {
            seen[b as usize] = true;
        }
        let vocab: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut id = [0u8; 256];
        for (i, &b) in vocab.iter().enumerate() {
            id[b as usize] = i as u8;
        }
        let ids: Vec<u8> = bytes.iter().map(|&b| id[b as usize]).collect();
        let cut = ((1.0 - val_fraction.clamp(0.0, 0.5)) * ids.len() as f64) as usize;
        Self {
            vocab,
            train: ids[..cut].to_vec(),
            val: ids[cut..].to_vec(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn train(&self) -> &[u8] {
        &self.train
    }

    pub fn val(&self) -> &[u8] {
        &self.val
    }

    pub fn decode(&self, ids: &[u8]) -> String {
        ids.iter().map(|&i| self.vocab[i as usize] as char).collect()
    }
}
