//! Class vocabularies and their embeddings.
//!
//! Class names are embedded by a fixed token-hash embedder: every
//! whitespace-separated token maps to a pseudo-random unit vector seeded by
//! a hash of the token, and a class embedding is the normalized sum of its
//! token vectors. Names sharing tokens therefore share directions, which is
//! what lets unseen color/shape combinations be scored at inference time.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

const TOKEN_SEED: u64 = 0x6f76_645f_7465_7874;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassRole {
    Base,
    Novel,
}

/// Ordered, normalized class names with base/novel roles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    roles: Vec<ClassRole>,
}

/// Lowercases, trims and collapses inner whitespace.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl ClassVocabulary {
    pub fn new<S: AsRef<str>>(entries: &[(S, ClassRole)]) -> Result<Self> {
        let mut names: Vec<String> = Vec::with_capacity(entries.len());
        let mut roles = Vec::with_capacity(entries.len());
        for (name, role) in entries {
            let norm = normalize_name(name.as_ref());
            if norm.is_empty() {
                return Err(Error::Contract("class names must be non-empty".into()));
            }
            if names.contains(&norm) {
                return Err(Error::Contract(format!("duplicate class name `{norm}`")));
            }
            names.push(norm);
            roles.push(*role);
        }
        if !roles.contains(&ClassRole::Base) {
            return Err(Error::Contract("vocabulary needs at least one base class".into()));
        }
        Ok(Self { names, roles })
    }

    /// A vocabulary whose classes are all treated as base classes, for
    /// free-form inference lists.
    pub fn open<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let entries: Vec<(&str, ClassRole)> =
            names.iter().map(|n| (n.as_ref(), ClassRole::Base)).collect();
        Self::new(&entries)
    }

    /// Parses the one-name-per-line format; a trailing `\tnovel` marks a
    /// novel class. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (name, role) = match line.split_once('\t') {
                Some((name, tag)) if tag.trim() == "novel" => (name, ClassRole::Novel),
                Some((_, tag)) if tag.trim() == "base" || tag.trim().is_empty() => {
                    (line.split('\t').next().unwrap_or(""), ClassRole::Base)
                }
                Some((_, tag)) => {
                    return Err(Error::Contract(format!(
                        "line {}: unknown class tag `{}`",
                        lineno + 1,
                        tag.trim()
                    )))
                }
                None => (line, ClassRole::Base),
            };
            entries.push((name.to_string(), role));
        }
        if entries.is_empty() {
            return Err(Error::Contract("vocabulary is empty".into()));
        }
        Self::new(&entries)
    }

    /// Inverse of [`ClassVocabulary::parse`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, role) in self.names.iter().zip(&self.roles) {
            out.push_str(name);
            if *role == ClassRole::Novel {
                out.push_str("\tnovel");
            }
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn role(&self, index: usize) -> ClassRole {
        self.roles[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let norm = normalize_name(name);
        self.names.iter().position(|n| *n == norm)
    }

    pub fn indices_with_role(&self, role: ClassRole) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }
}

/// Class embeddings laid out in slots, some of which may be padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingBank {
    embeddings: Tensor,
    valid: Vec<bool>,
    slot_to_class: Vec<Option<usize>>,
}

impl ClassEmbeddingBank {
    pub fn new(embeddings: Tensor, slot_to_class: Vec<Option<usize>>) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        if slot_to_class.len() != n {
            return Err(Error::Shape {
                op: "embedding bank",
                detail: format!("{} slot labels for {n} rows", slot_to_class.len()),
            });
        }
        let valid = slot_to_class.iter().map(Option::is_some).collect();
        Ok(Self {
            embeddings,
            valid,
            slot_to_class,
        })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn slot_to_class(&self) -> &[Option<usize>] {
        &self.slot_to_class
    }

    pub fn n_slots(&self) -> usize {
        self.valid.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Slot holding vocabulary class `class`, if any.
    pub fn slot_of(&self, class: usize) -> Option<usize> {
        self.slot_to_class.iter().position(|&c| c == Some(class))
    }

    /// Sub-bank holding the given vocabulary classes, in that order.
    pub fn select(&self, classes: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(classes.len());
        for &c in classes {
            let slot = self
                .slot_of(c)
                .ok_or_else(|| Error::Contract(format!("class {c} is not in the bank")))?;
            rows.push(slot);
        }
        self.take_slots(&rows)
    }

    /// Reorders slots: slot `i` of the result is slot `order[i]` of `self`.
    pub fn take_slots(&self, order: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(order.len() * d);
        let mut map = Vec::with_capacity(order.len());
        for &s in order {
            if s >= self.n_slots() {
                return Err(Error::Contract(format!("slot {s} out of {}", self.n_slots())));
            }
            data.extend_from_slice(self.embeddings.row(s));
            map.push(self.slot_to_class[s]);
        }
        Self::new(Tensor::new(&[order.len(), d], data)?, map)
    }

    /// Appends `extra` empty-token padding slots.
    pub fn with_padding(&self, extra: usize) -> Self {
        let d = self.dim();
        let mut data = self.embeddings.data().to_vec();
        data.resize(data.len() + extra * d, 0.0);
        let mut map = self.slot_to_class.clone();
        map.resize(map.len() + extra, None);
        Self::new(Tensor::new(&[map.len(), d], data).expect("padded shape"), map)
            .expect("padded bank")
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The fixed unit vector of a single token.
pub fn token_vector(token: &str, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ TOKEN_SEED);
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = math::sqrt(v.iter().map(|x| x * x).sum());
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Normalized sum of the token vectors of `name`.
pub fn embed_name(name: &str, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for token in normalize_name(name).split(' ') {
        for (a, t) in acc.iter_mut().zip(token_vector(token, d)) {
            *a += t;
        }
    }
    let norm = math::sqrt(acc.iter().map(|x| x * x).sum());
    if norm > 0.0 {
        for x in &mut acc {
            *x /= norm;
        }
    }
    acc
}

/// Embeds every vocabulary class, one valid slot per class in vocabulary order.
pub fn embed_class_names(vocab: &ClassVocabulary, d: usize) -> Result<ClassEmbeddingBank> {
    if vocab.is_empty() {
        return Err(Error::Contract("cannot embed an empty vocabulary".into()));
    }
    if d < 8 {
        return Err(Error::Contract(format!("embedding dimension must be at least 8, got {d}")));
    }
    let mut data = Vec::with_capacity(vocab.len() * d);
    for name in vocab.names() {
        data.extend(embed_name(name, d));
    }
    ClassEmbeddingBank::new(
        Tensor::new(&[vocab.len(), d], data)?,
        (0..vocab.len()).map(Some).collect(),
    )
}

/// Training-time class slot count and sampling seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingPolicy {
    pub n_slots: usize,
    pub seed: u64,
}

/// Builds the per-image class bank used in training.
///
/// Every positive class gets a slot; the remaining slots are filled with
/// negatives drawn without replacement, then with padding once negatives
/// run out. The final slot order is shuffled.
pub fn sample_training_classes(
    full: &ClassEmbeddingBank,
    vocab_len: usize,
    positives: &[usize],
    policy: SamplingPolicy,
) -> Result<ClassEmbeddingBank> {
    if policy.n_slots == 0 {
        return Err(Error::Contract("sampling needs at least one slot".into()));
    }
    let mut pos: Vec<usize> = positives.to_vec();
    pos.sort_unstable();
    pos.dedup();
    if let Some(&bad) = pos.iter().find(|&&c| c >= vocab_len) {
        return Err(Error::Contract(format!("positive class {bad} outside vocabulary of {vocab_len}")));
    }
    if pos.len() > policy.n_slots {
        return Err(Error::Capacity {
            what: "class slots",
            requested: pos.len(),
            available: policy.n_slots,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut negatives: Vec<usize> = (0..vocab_len).filter(|c| pos.binary_search(c).is_err()).collect();
    negatives.shuffle(&mut rng);
    let take = (policy.n_slots - pos.len()).min(negatives.len());
    let mut classes: Vec<Option<usize>> = pos.iter().copied().map(Some).collect();
    classes.extend(negatives[..take].iter().copied().map(Some));
    classes.resize(policy.n_slots, None);
    classes.shuffle(&mut rng);

    let d = full.dim();
    let mut data = Vec::with_capacity(policy.n_slots * d);
    for c in &classes {
        match c {
            Some(c) => {
                let slot = full
                    .slot_of(*c)
                    .ok_or_else(|| Error::Contract(format!("class {c} missing from the full bank")))?;
                data.extend_from_slice(full.embeddings().row(slot));
            }
            None => data.resize(data.len() + d, 0.0),
        }
    }
    ClassEmbeddingBank::new(Tensor::new(&[policy.n_slots, d], data)?, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(names: &[&str]) -> ClassVocabulary {
        ClassVocabulary::open(names).unwrap()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn same_name_gives_same_row() {
        let v = ClassVocabulary::open(&["red circle", "blue square"]).unwrap();
        let a = embed_class_names(&v, 32).unwrap();
        let b = embed_class_names(&v, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(embed_name("Red  Circle", 32), embed_name("red circle", 32));
        let e = embed_name("red circle", 32);
        assert!((cos(&e, &e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_tokens_raise_cosine() {
        let d = 64;
        let rc = embed_name("red circle", d);
        let rs = embed_name("red square", d);
        let bs = embed_name("blue square", d);
        assert!(cos(&rc, &rs) > cos(&rc, &bs));
    }

    #[test]
    fn composition_is_normalized_token_sum() {
        let d = 16;
        let r = token_vector("red", d);
        let c = token_vector("circle", d);
        let sum: Vec<f64> = r.iter().zip(&c).map(|(a, b)| a + b).collect();
        let n = math::sqrt(sum.iter().map(|x| x * x).sum());
        let e = embed_name("red circle", d);
        for (x, s) in e.iter().zip(&sum) {
            assert!((x - s / n).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_unit_norm() {
        let v = vocab(&["red circle", "green triangle", "blue cross", "ring"]);
        let bank = embed_class_names(&v, 24).unwrap();
        for i in 0..bank.n_slots() {
            let n = math::sqrt(bank.embeddings().row(i).iter().map(|x| x * x).sum());
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn vocabulary_contracts() {
        assert!(ClassVocabulary::open::<&str>(&[]).is_err());
        assert!(ClassVocabulary::open(&["a", "A"]).is_err());
        assert!(ClassVocabulary::open(&["  "]).is_err());
        assert!(ClassVocabulary::new(&[("x", ClassRole::Novel)]).is_err());
        let v = vocab(&["a"]);
        assert!(embed_class_names(&v, 4).is_err());
    }

    #[test]
    fn parse_and_render_vocab_file() {
        let text = "Red Circle\nblue square\tnovel\n\ngreen cross\n";
        let v = ClassVocabulary::parse(text).unwrap();
        assert_eq!(v.names(), &["red circle", "blue square", "green cross"]);
        assert_eq!(v.role(1), ClassRole::Novel);
        assert_eq!(ClassVocabulary::parse(&v.render()).unwrap(), v);
        assert!(ClassVocabulary::parse("a\tweird\n").is_err());
    }

    #[test]
    fn sampling_saturates_with_all_positives() {
        let v = vocab(&["a", "b", "c", "d"]);
        let full = embed_class_names(&v, 8).unwrap();
        let bank = sample_training_classes(&full, 4, &[0, 1, 2, 3], SamplingPolicy { n_slots: 4, seed: 3 })
            .unwrap();
        let mut seen: Vec<usize> = bank.slot_to_class().iter().map(|c| c.unwrap()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sampling_pads_when_negatives_run_out() {
        let v = vocab(&["a", "b", "c"]);
        let full = embed_class_names(&v, 8).unwrap();
        let bank =
            sample_training_classes(&full, 3, &[0], SamplingPolicy { n_slots: 5, seed: 1 }).unwrap();
        assert_eq!(bank.valid_count(), 3);
        assert_eq!(bank.n_slots(), 5);
        assert!(bank.slot_of(0).is_some());
        for (s, valid) in bank.valid_mask().iter().enumerate() {
            if !valid {
                assert!(bank.embeddings().row(s).iter().all(|&x| x == 0.0));
                assert_eq!(bank.slot_to_class()[s], None);
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_checks_capacity() {
        let v = vocab(&["a", "b", "c", "d", "e", "f"]);
        let full = embed_class_names(&v, 8).unwrap();
        let p = SamplingPolicy { n_slots: 4, seed: 42 };
        let a = sample_training_classes(&full, 6, &[1, 4], p).unwrap();
        let b = sample_training_classes(&full, 6, &[1, 4], p).unwrap();
        assert_eq!(a, b);
        assert!(a.slot_of(1).is_some() && a.slot_of(4).is_some());
        let err = sample_training_classes(&full, 6, &[0, 1, 2], SamplingPolicy { n_slots: 2, seed: 0 });
        assert!(matches!(err, Err(Error::Capacity { .. })));
    }

    #[test]
    fn slot_zero_is_uniform_over_classes() {
        let v = vocab(&["a", "b", "c", "d", "e"]);
        let full = embed_class_names(&v, 8).unwrap();
        let mut counts = [0usize; 5];
        let trials = 10_000;
        for seed in 0..trials {
            let bank =
                sample_training_classes(&full, 5, &[], SamplingPolicy { n_slots: 5, seed }).unwrap();
            counts[bank.slot_to_class()[0].unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.2).abs() < 0.02, "frequency {f}");
        }
    }
}
