use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;

/// A named collection of documents with a deterministic three-way split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<String>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

/// Document indices of each split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, documents: Vec<String>) -> Self {
        Self {
            name: name.into(),
            documents,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Shuffles indices with `seed`; val and test take the floor of their share, train the rest.
    pub fn split(&self, seed: u64) -> Splits {
        let n = self.documents.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (n as f64 * self.val_fraction).floor() as usize;
        let n_test = (n as f64 * self.test_fraction).floor() as usize;
        let test = idx.split_off(n - n_test);
        let val = idx.split_off(n - n_test - n_val);
        Splits { train: idx, val, test }
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&str> {
        indices.iter().map(|&i| self.documents[i].as_str()).collect()
    }

    /// One document per UTF-8 `.txt` file, in filename order.
    pub fn from_dir(dir: &Path) -> Result<Self, TrainError> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        let documents = paths
            .iter()
            .map(|p| fs::read_to_string(p).map_err(|e| TrainError::Io(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        let name = dir.file_name().map_or("corpus".into(), |n| n.to_string_lossy().into_owned());
        Ok(Self::new(name, documents))
    }

    /// Writes `NNNNN.txt` files so `from_dir` reads them back in order.
    pub fn write_dir(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
        for (i, doc) in self.documents.iter().enumerate() {
            let p = dir.join(format!("{i:05}.txt"));
            fs::write(&p, doc).map_err(|e| TrainError::Io(format!("{}: {e}", p.display())))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeTier {
    Small,
    Medium,
    Full,
}

impl SizeTier {
    pub const ALL: [SizeTier; 3] = [SizeTier::Small, SizeTier::Medium, SizeTier::Full];

    pub fn multiplier(self) -> usize {
        match self {
            SizeTier::Small => 1,
            SizeTier::Medium => 4,
            SizeTier::Full => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeTier::Small => "small",
            SizeTier::Medium => "medium",
            SizeTier::Full => "full",
        }
    }
}

impl std::str::FromStr for SizeTier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(SizeTier::Small),
            "medium" => Ok(SizeTier::Medium),
            "full" => Ok(SizeTier::Full),
            other => Err(format!("unknown size tier '{other}'")),
        }
    }
}

/// Document counts for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub base_documents: usize,
    /// Personalized documents at the small tier; larger tiers multiply this.
    pub personal_documents: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            base_documents: 1200,
            personal_documents: 200,
        }
    }
}

const DETERMINERS: &[&str] = &["the", "a", "my", "one"];
const ADJECTIVES: &[&str] = &["small", "red", "old", "quiet", "happy", "bright", "cold", "green"];
const NOUNS: &[&str] = &["cat", "dog", "bird", "tree", "house", "river", "car", "book", "fish", "hill"];
const VERBS: &[&str] = &["sees", "likes", "finds", "takes", "holds", "wants", "keeps", "makes"];
const ADVERBS: &[&str] = &["today", "again", "slowly", "often", "now"];

/// Word swaps a persona may prefer; one entry per source word.
const PREFERENCES: &[(&str, &str)] = &[
    ("cat", "kitty"),
    ("dog", "pup"),
    ("likes", "loves"),
    ("small", "tiny"),
    ("house", "home"),
    ("sees", "spots"),
    ("river", "creek"),
    ("red", "ruby"),
    ("book", "novel"),
    ("happy", "glad"),
];
const SIGNATURES: &[&str] = &[" ~ ana", " ~ bo", " -- kim", " ~ lu", " // max"];

/// The user-specific overlay applied to generic sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Persona {
    pub substitutions: Vec<(&'static str, &'static str)>,
    pub signature: &'static str,
}

impl Persona {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let mut substitutions: Vec<_> = PREFERENCES.choose_multiple(&mut rng, 4).copied().collect();
        substitutions.sort();
        let signature = SIGNATURES.choose(&mut rng).copied().expect("nonempty");
        Self {
            substitutions,
            signature,
        }
    }

    pub fn apply(&self, sentence: &str) -> String {
        let body = sentence.strip_suffix('.').unwrap_or(sentence);
        let words: Vec<&str> = body
            .split(' ')
            .map(|w| {
                self.substitutions
                    .iter()
                    .find(|(from, _)| *from == w)
                    .map_or(w, |(_, to)| *to)
            })
            .collect();
        format!("{}.{}", words.join(" "), self.signature)
    }
}

fn sentence<R: Rng>(rng: &mut R) -> String {
    let pick = |rng: &mut R, words: &[&'static str]| *words.choose(rng).expect("nonempty");
    let mut s = format!(
        "{} {} {} {} {} {}",
        pick(rng, DETERMINERS),
        pick(rng, ADJECTIVES),
        pick(rng, NOUNS),
        pick(rng, VERBS),
        pick(rng, DETERMINERS),
        pick(rng, NOUNS),
    );
    if rng.random_bool(0.4) {
        s.push(' ');
        s.push_str(pick(rng, ADVERBS));
    }
    s.push('.');
    s
}

/// Generic sentences paired with the same sentences after the persona overlay.
pub fn paired_documents(seed: u64, n: usize) -> (Vec<String>, Vec<String>) {
    let persona = Persona::from_seed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let generic: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
    let personal = generic.iter().map(|s| persona.apply(s)).collect();
    (generic, personal)
}

pub fn make_synthetic_personalized_corpus(seed: u64, tier: SizeTier) -> (Corpus, Corpus) {
    make_synthetic_corpus_with(SyntheticSpec::default(), seed, tier)
}

pub fn make_synthetic_corpus_with(spec: SyntheticSpec, seed: u64, tier: SizeTier) -> (Corpus, Corpus) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = (0..spec.base_documents).map(|_| sentence(&mut rng)).collect();
    let (_, personal) = paired_documents(seed, spec.personal_documents * tier.multiplier());
    (
        Corpus::new("synthetic-base", base),
        Corpus::new(format!("synthetic-personal-{}", tier.name()), personal),
    )
}

/// Fraction of byte positions that differ between two texts, padding the shorter one.
pub fn position_difference(a: &str, b: &str) -> (usize, usize) {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    let n = a.len().max(b.len());
    let diff = (0..n).filter(|&i| a.get(i) != b.get(i)).count();
    (diff, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let a = make_synthetic_personalized_corpus(3, SizeTier::Small);
        let b = make_synthetic_personalized_corpus(3, SizeTier::Small);
        assert_eq!(a, b);
        assert_ne!(a.1, make_synthetic_personalized_corpus(4, SizeTier::Small).1);
    }

    #[test]
    fn tiers_grow() {
        let sizes: Vec<usize> = SizeTier::ALL
            .iter()
            .map(|&t| make_synthetic_personalized_corpus(1, t).1.len())
            .collect();
        assert!(sizes[0] < sizes[1] && sizes[1] < sizes[2]);
    }

    #[test]
    fn personalization_changes_many_positions() {
        let (generic, personal) = paired_documents(11, 300);
        let (mut diff, mut total) = (0, 0);
        for (g, p) in generic.iter().zip(&personal) {
            let (d, n) = position_difference(g, p);
            diff += d;
            total += n;
        }
        assert!(diff as f64 > 0.1 * total as f64, "{diff}/{total}");
    }

    #[test]
    fn documents_fit_the_toy_context() {
        let (base, personal) = make_synthetic_personalized_corpus(0, SizeTier::Full);
        let longest = base.documents.iter().chain(&personal.documents).map(String::len).max().unwrap();
        assert!(longest + 2 <= 64, "{longest}");
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let c = Corpus::new("t", (0..37).map(|i| i.to_string()).collect());
        let s = c.split(5);
        assert_eq!(s, c.split(5));
        assert_eq!((s.val.len(), s.test.len()), (3, 3));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn dir_round_trip_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::new("x", vec!["b doc".into(), "a doc".into(), "third".into()]);
        c.write_dir(dir.path()).unwrap();
        fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        let back = Corpus::from_dir(dir.path()).unwrap();
        assert_eq!(back.documents, c.documents);
    }
}
