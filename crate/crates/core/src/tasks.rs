//! Procedural trait datasets, the pretraining corpus and the questionnaire.
//!
//! A statement is a short token sequence:
//!
//! ```text
//! BOS  <12 body slots: one topic, one featA, one featB, fillers>  PAD...
//! ```
//!
//! The topic token (six per dichotomy) says which axis the statement probes.
//! Two feature tokens carry integers `a, b ∈ [-2, 2]` and the statement's
//! polarity is `p = clamp(a + b, -3, 3)`: positive leans toward the first
//! trait of the dichotomy (E, S, T, J), negative toward the second.
//!
//! Labels are Likert classes `0..=6` (strongly disagree .. strongly agree).
//! Answering as a first-pole trait gives `3 + p`, as the opposite pole
//! `3 - p`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mbti::{Dichotomy, Trait};
use crate::model::PAD;

pub const SEQ_LEN: usize = 16;
/// Content tokens sit in positions `1..=BODY_SLOTS`.
pub const BODY_SLOTS: usize = 12;
pub const TOPICS_PER_DICHOTOMY: usize = 6;
pub const N_FILLERS: usize = 16;
pub const FEATURE_RANGE: i32 = 2;
pub const MAX_POLARITY: i32 = 3;
pub const NEUTRAL: usize = 3;
pub const N_CLASSES: usize = 7;

pub const BOS: usize = 1;
const TOPIC_BASE: usize = 2;
const FEAT_A_BASE: usize = TOPIC_BASE + 4 * TOPICS_PER_DICHOTOMY;
const FEAT_B_BASE: usize = FEAT_A_BASE + 5;
const FILLER_BASE: usize = FEAT_B_BASE + 5;
pub const VOCAB_SIZE: usize = FILLER_BASE + N_FILLERS;

pub const TRAIT_DATASET_SIZE: usize = 154;
pub const MIN_PER_CLASS: usize = 5;
pub const QUESTIONS_PER_DICHOTOMY: usize = 15;

/// Likert classes in index order.
pub const LIKERT: [&str; N_CLASSES] = [
    "strongly_disagree",
    "disagree",
    "slightly_disagree",
    "neutral",
    "slightly_agree",
    "agree",
    "strongly_agree",
];

// Seed-stream namespaces keep datasets generated from one seed independent.
const STREAM_TRAIT: u64 = 0x100;
const STREAM_STABILIZER: u64 = 0x200;
const STREAM_PRETRAIN: u64 = 0x300;
const STREAM_QUESTIONNAIRE: u64 = 0x400;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn topic_token(d: Dichotomy, topic: usize) -> usize {
    TOPIC_BASE + d.index() * TOPICS_PER_DICHOTOMY + topic
}

pub fn feat_a_token(a: i32) -> usize {
    FEAT_A_BASE + (a + FEATURE_RANGE) as usize
}

pub fn feat_b_token(b: i32) -> usize {
    FEAT_B_BASE + (b + FEATURE_RANGE) as usize
}

pub fn filler_token(i: usize) -> usize {
    FILLER_BASE + i
}

fn signed_name(v: i32) -> String {
    match v.signum() {
        1 => format!("p{v}"),
        -1 => format!("m{}", -v),
        _ => "0".to_owned(),
    }
}

/// Symbolic name of every token id, indexed by id.
pub fn vocab() -> Vec<String> {
    let mut names = vec!["PAD".to_owned(), "BOS".to_owned()];
    for d in Dichotomy::ALL {
        for j in 0..TOPICS_PER_DICHOTOMY {
            names.push(format!("topic_{d}_{j}"));
        }
    }
    for prefix in ["featA", "featB"] {
        for v in -FEATURE_RANGE..=FEATURE_RANGE {
            names.push(format!("{prefix}_{}", signed_name(v)));
        }
    }
    for i in 0..N_FILLERS {
        names.push(format!("filler_{i:02}"));
    }
    debug_assert_eq!(names.len(), VOCAB_SIZE);
    names
}

pub fn vocab_map() -> BTreeMap<String, usize> {
    vocab().into_iter().enumerate().map(|(i, n)| (n, i)).collect()
}

pub fn polarity(a: i32, b: i32) -> i32 {
    (a + b).clamp(-MAX_POLARITY, MAX_POLARITY)
}

/// Likert class for a statement of polarity `p` answered as `t`.
pub fn label_for(t: Trait, p: i32) -> usize {
    (NEUTRAL as i32 + t.sign() * p) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub tokens: Vec<usize>,
    pub dichotomy: Dichotomy,
    pub topic: usize,
    pub feat_a: i32,
    pub feat_b: i32,
}

impl Statement {
    pub fn polarity(&self) -> i32 {
        polarity(self.feat_a, self.feat_b)
    }

    /// Builds a statement with content tokens shuffled into a random-length
    /// body of at least three slots.
    pub fn generate(d: Dichotomy, a: i32, b: i32, rng: &mut impl Rng) -> Self {
        let topic = rng.gen_range(0..TOPICS_PER_DICHOTOMY);
        let body = rng.gen_range(3..=BODY_SLOTS);
        let mut tokens = vec![PAD; SEQ_LEN];
        tokens[0] = BOS;
        for slot in tokens.iter_mut().skip(1).take(body) {
            *slot = filler_token(rng.gen_range(0..N_FILLERS));
        }
        let slots = sample(rng, body, 3);
        let content = [topic_token(d, topic), feat_a_token(a), feat_b_token(b)];
        for (slot, tok) in slots.iter().zip(content) {
            tokens[1 + slot] = tok;
        }
        Statement {
            tokens,
            dichotomy: d,
            topic,
            feat_a: a,
            feat_b: b,
        }
    }

    /// Recovers a statement from its token ids, checking the content rules.
    pub fn from_tokens(tokens: &[usize]) -> Result<Self> {
        if tokens.len() > SEQ_LEN {
            return Err(Error::Invalid(format!("{} tokens exceeds {SEQ_LEN}", tokens.len())));
        }
        let mut padded = tokens.to_vec();
        padded.resize(SEQ_LEN, PAD);
        let (mut topic, mut fa, mut fb) = (None, None, None);
        for &t in &padded {
            match t {
                t if (TOPIC_BASE..FEAT_A_BASE).contains(&t) => {
                    let off = t - TOPIC_BASE;
                    set_once(&mut topic, (Dichotomy::ALL[off / TOPICS_PER_DICHOTOMY], off % TOPICS_PER_DICHOTOMY), "topic")?
                }
                t if (FEAT_A_BASE..FEAT_B_BASE).contains(&t) => {
                    set_once(&mut fa, (t - FEAT_A_BASE) as i32 - FEATURE_RANGE, "featA")?
                }
                t if (FEAT_B_BASE..FILLER_BASE).contains(&t) => {
                    set_once(&mut fb, (t - FEAT_B_BASE) as i32 - FEATURE_RANGE, "featB")?
                }
                t if t >= VOCAB_SIZE => return Err(Error::Invalid(format!("token id {t} out of range"))),
                _ => {}
            }
        }
        let missing = |what: &str| Error::Invalid(format!("statement has no {what} token"));
        let (dichotomy, topic) = topic.ok_or_else(|| missing("topic"))?;
        Ok(Statement {
            tokens: padded,
            dichotomy,
            topic,
            feat_a: fa.ok_or_else(|| missing("featA"))?,
            feat_b: fb.ok_or_else(|| missing("featB"))?,
        })
    }

    /// Space-joined symbolic tokens, PAD omitted.
    pub fn text(&self) -> String {
        let names = vocab();
        self.tokens
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| names[t].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = vocab_map();
        let ids = text
            .split_whitespace()
            .map(|w| map.get(w).copied().ok_or_else(|| Error::Invalid(format!("unknown token {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Statement::from_tokens(&ids)
    }
}

fn set_once<T>(slot: &mut Option<T>, value: T, what: &str) -> Result<()> {
    if slot.is_some() {
        return Err(Error::Invalid(format!("statement has more than one {what} token")));
    }
    *slot = Some(value);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub statement: Statement,
    pub label: usize,
}

/// Samples all labelled for one trait.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraitDataset {
    pub trait_id: Trait,
    pub samples: Vec<LabeledSample>,
}

/// Options for trait dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct TaskOptions {
    /// Extra statements from the other three dichotomies, labelled with the
    /// first-pole convention `3 + p`. Zero keeps datasets own-dichotomy only.
    pub stabilizers: usize,
}


/// A uniformly chosen `(a, b)` pair whose clamped sum is `p`.
fn features_for(p: i32, rng: &mut impl Rng) -> (i32, i32) {
    let pairs: Vec<(i32, i32)> = (-FEATURE_RANGE..=FEATURE_RANGE)
        .flat_map(|a| (-FEATURE_RANGE..=FEATURE_RANGE).map(move |b| (a, b)))
        .filter(|&(a, b)| polarity(a, b) == p)
        .collect();
    *pairs.choose(rng).expect("every polarity in [-3, 3] is reachable")
}

/// 154 statements from the trait's own dichotomy, stratified 22 per class.
pub fn gen_trait_dataset(t: Trait, seed: u64) -> TraitDataset {
    gen_trait_dataset_with(t, seed, &TaskOptions::default())
}

pub fn gen_trait_dataset_with(t: Trait, seed: u64, options: &TaskOptions) -> TraitDataset {
    let mut rng = rng_for(seed, STREAM_TRAIT + t as u64);
    let d = t.dichotomy();
    let per_class = TRAIT_DATASET_SIZE / N_CLASSES;
    let mut samples = Vec::with_capacity(TRAIT_DATASET_SIZE + options.stabilizers);
    for label in 0..N_CLASSES {
        let p = t.sign() * (label as i32 - NEUTRAL as i32);
        for _ in 0..per_class {
            let (a, b) = features_for(p, &mut rng);
            let statement = Statement::generate(d, a, b, &mut rng);
            debug_assert_eq!(label_for(t, statement.polarity()), label);
            samples.push(LabeledSample { statement, label });
        }
    }
    samples.shuffle(&mut rng);

    if options.stabilizers > 0 {
        let mut rng = rng_for(seed, STREAM_STABILIZER + t as u64);
        let others: Vec<Dichotomy> = Dichotomy::ALL.into_iter().filter(|&o| o != d).collect();
        for _ in 0..options.stabilizers {
            let other = *others.choose(&mut rng).unwrap();
            let a = rng.gen_range(-FEATURE_RANGE..=FEATURE_RANGE);
            let b = rng.gen_range(-FEATURE_RANGE..=FEATURE_RANGE);
            let statement = Statement::generate(other, a, b, &mut rng);
            let label = label_for(other.first(), statement.polarity());
            samples.push(LabeledSample { statement, label });
        }
        samples.shuffle(&mut rng);
    }
    TraitDataset { trait_id: t, samples }
}

/// Generic pretraining corpus: uniform dichotomies and features, labelled
/// `3 + p` throughout.
pub fn gen_pretrain_dataset(seed: u64, n: usize) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Err(Error::Config("pretraining corpus needs at least one sample".into()));
    }
    let mut rng = rng_for(seed, STREAM_PRETRAIN);
    Ok((0..n)
        .map(|_| {
            let d = Dichotomy::ALL[rng.gen_range(0..4)];
            let a = rng.gen_range(-FEATURE_RANGE..=FEATURE_RANGE);
            let b = rng.gen_range(-FEATURE_RANGE..=FEATURE_RANGE);
            let statement = Statement::generate(d, a, b, &mut rng);
            let label = label_for(d.first(), statement.polarity());
            LabeledSample { statement, label }
        })
        .collect())
}

/// The held-out questionnaire: 15 statements per dichotomy, none neutral.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Questionnaire {
    pub statements: Vec<Statement>,
}

impl Questionnaire {
    pub fn for_dichotomy(&self, d: Dichotomy) -> Vec<&Statement> {
        self.statements.iter().filter(|s| s.dichotomy == d).collect()
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }
}

/// Per dichotomy: polarities `+1 +2 +3 +1 +2 +3 +1 +2` and
/// `-1 -2 -3 -1 -2 -3 -1`, in shuffled order.
pub fn gen_questionnaire(seed: u64) -> Questionnaire {
    let mut rng = rng_for(seed, STREAM_QUESTIONNAIRE);
    let mut statements = Vec::with_capacity(4 * QUESTIONS_PER_DICHOTOMY);
    for d in Dichotomy::ALL {
        let positives = (0..8).map(|i| i % 3 + 1);
        let negatives = (0..7).map(|i| -(i % 3 + 1));
        for p in positives.chain(negatives) {
            let (a, b) = features_for(p, &mut rng);
            statements.push(Statement::generate(d, a, b, &mut rng));
        }
    }
    statements.shuffle(&mut rng);
    Questionnaire { statements }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    question: String,
    answer: String,
    dichotomy: Dichotomy,
    polarity: i32,
}

/// Writes `{question, answer, dichotomy, polarity}` JSON lines.
pub fn write_jsonl(samples: &[LabeledSample], mut out: impl Write) -> std::io::Result<()> {
    for s in samples {
        let record = Record {
            question: s.statement.text(),
            answer: LIKERT[s.label].to_owned(),
            dichotomy: s.statement.dichotomy,
            polarity: s.statement.polarity(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Invalid(format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("line {}: {e}", lineno + 1)))?;
        let statement = Statement::from_text(&record.question)?;
        let label = LIKERT
            .iter()
            .position(|&c| c == record.answer)
            .ok_or_else(|| Error::Invalid(format!("line {}: unknown answer {:?}", lineno + 1, record.answer)))?;
        if statement.dichotomy != record.dichotomy || statement.polarity() != record.polarity {
            return Err(Error::Invalid(format!(
                "line {}: dichotomy/polarity fields disagree with the question tokens",
                lineno + 1
            )));
        }
        out.push(LabeledSample { statement, label });
    }
    Ok(out)
}

/// Questionnaire items as JSON lines; the answer field is the first-pole
/// keyed class `3 + p`.
pub fn questionnaire_samples(q: &Questionnaire) -> Vec<LabeledSample> {
    q.statements
        .iter()
        .map(|s| LabeledSample {
            statement: s.clone(),
            label: label_for(s.dichotomy.first(), s.polarity()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_counts(samples: &[LabeledSample]) -> [usize; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for s in samples {
            c[s.label] += 1;
        }
        c
    }

    #[test]
    fn vocabulary_accounting() {
        // PAD + reserved + 24 topics + 10 features + 16 fillers
        assert_eq!(VOCAB_SIZE, 1 + 1 + 24 + 10 + 16);
        assert_eq!(VOCAB_SIZE, 52);
        let v = vocab();
        assert_eq!(v[0], "PAD");
        assert_eq!(v[topic_token(Dichotomy::EI, 3)], "topic_EI_3");
        assert_eq!(v[feat_a_token(2)], "featA_p2");
        assert_eq!(v[feat_b_token(-1)], "featB_m1");
        assert_eq!(v[filler_token(7)], "filler_07");
        assert_eq!(vocab_map().len(), VOCAB_SIZE);
    }

    #[test]
    fn statement_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let d = Dichotomy::ALL[rng.gen_range(0..4)];
            let s = Statement::generate(d, rng.gen_range(-2..=2), rng.gen_range(-2..=2), &mut rng);
            assert_eq!(s.tokens.len(), SEQ_LEN);
            assert_eq!(s.tokens[0], BOS);
            assert!(s.tokens[BODY_SLOTS + 1..].iter().all(|&t| t == PAD));
            let body: Vec<usize> = s.tokens[1..].iter().copied().take_while(|&t| t != PAD).collect();
            let fillers = body.iter().filter(|&&t| t >= FILLER_BASE).count();
            assert_eq!(body.len(), fillers + 3);
            assert_eq!(Statement::from_tokens(&s.tokens).unwrap(), s);
            assert_eq!(Statement::from_text(&s.text()).unwrap(), s);
        }
    }

    #[test]
    fn trait_dataset_shape() {
        for t in Trait::ALL {
            let ds = gen_trait_dataset(t, 11);
            assert_eq!(ds.samples.len(), TRAIT_DATASET_SIZE);
            assert!(class_counts(&ds.samples).iter().all(|&c| c >= MIN_PER_CLASS));
            for s in &ds.samples {
                assert_eq!(s.statement.dichotomy, t.dichotomy());
                assert_eq!(s.label, label_for(t, s.statement.polarity()));
            }
        }
        assert_eq!(gen_trait_dataset(Trait::J, 5), gen_trait_dataset(Trait::J, 5));
        assert_ne!(gen_trait_dataset(Trait::J, 5), gen_trait_dataset(Trait::J, 6));
    }

    #[test]
    fn mirror_labels_sum_to_six() {
        for p in -3..=3 {
            for d in Dichotomy::ALL {
                assert_eq!(label_for(d.first(), p) + label_for(d.second(), p), 6);
            }
        }
    }

    #[test]
    fn strongest_positive_statement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Statement::generate(Dichotomy::EI, 2, 2, &mut rng);
        assert_eq!(s.polarity(), 3);
        assert_eq!(label_for(Trait::E, s.polarity()), 6);
        assert_eq!(label_for(Trait::I, s.polarity()), 0);
    }

    #[test]
    fn lookup_table_oracle_is_perfect() {
        // Any trait dataset is a deterministic function of (topic, featA, featB).
        for t in Trait::ALL {
            let ds = gen_trait_dataset(t, 99);
            let mut table = BTreeMap::new();
            for s in &ds.samples {
                let key = (s.statement.topic, s.statement.feat_a, s.statement.feat_b);
                let prev = table.insert(key, s.label);
                assert!(prev.is_none() || prev == Some(s.label));
            }
        }
    }

    #[test]
    fn stabilizers_use_other_dichotomies() {
        let ds = gen_trait_dataset_with(Trait::I, 1, &TaskOptions { stabilizers: 60 });
        assert_eq!(ds.samples.len(), TRAIT_DATASET_SIZE + 60);
        let foreign: Vec<_> = ds.samples.iter().filter(|s| s.statement.dichotomy != Dichotomy::EI).collect();
        assert_eq!(foreign.len(), 60);
        for s in foreign {
            assert_eq!(s.label as i32, 3 + s.statement.polarity());
        }
    }

    #[test]
    fn pretrain_corpus_balance() {
        let data = gen_pretrain_dataset(5, 2048).unwrap();
        let mut per_dichotomy = [0usize; 4];
        for s in &data {
            per_dichotomy[s.statement.dichotomy.index()] += 1;
            assert_eq!(s.label as i32, 3 + s.statement.polarity());
        }
        for c in per_dichotomy {
            assert!((c as f64 - 512.0).abs() <= 51.2, "{per_dichotomy:?}");
        }
        assert!(class_counts(&data).iter().all(|&c| c > 0));
        assert_eq!(data, gen_pretrain_dataset(5, 2048).unwrap());
        assert!(gen_pretrain_dataset(5, 0).is_err());
    }

    #[test]
    fn questionnaire_layout() {
        let q = gen_questionnaire(2024);
        assert_eq!(q.len(), 60);
        for d in Dichotomy::ALL {
            let items = q.for_dichotomy(d);
            assert_eq!(items.len(), QUESTIONS_PER_DICHOTOMY);
            assert_eq!(items.iter().filter(|s| s.polarity() > 0).count(), 8);
            assert_eq!(items.iter().filter(|s| s.polarity() < 0).count(), 7);
            let mut mags: Vec<i32> = items.iter().map(|s| s.polarity().abs()).collect();
            mags.sort();
            assert_eq!(mags, vec![1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3]);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = gen_trait_dataset(Trait::F, 8);
        let mut buf = Vec::new();
        write_jsonl(&ds.samples, &mut buf).unwrap();
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap().to_owned();
        assert!(first.starts_with(r#"{"question":"BOS "#), "{first}");
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, ds.samples);
        assert!(read_jsonl(&b"{\"question\":\"BOS\",\"answer\":\"neutral\",\"dichotomy\":\"EI\",\"polarity\":0}\n"[..]).is_err());
    }
}
