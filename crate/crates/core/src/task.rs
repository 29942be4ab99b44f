//! The symbolic fact/implication task.
//!
//! Subjects split into `n` partitions of `m` subjects each. Every subject in
//! partition `i` maps under relation `r1` to the fact token `b_i` and under
//! `r2` to the implication token `c_i`. Facts of all subjects plus
//! implications of the first `m_train` subjects per partition are the train
//! split; implications of the remaining subjects are held out.
//!
//! Token numbering (one-hot, vocab = embedding dimension):
//! subjects in cycling order `s_{1,1}, s_{2,1}, ..., s_{n,1}, s_{1,2}, ...`,
//! then `r1`, `r2`, then `b_1..b_n`, `c_1..c_n`, then `EOS`.

use crate::error::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::ops::Range;

/// Sizes and token layout of one task instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    n: usize,
    m: usize,
    m_train: usize,
}

/// Which of the four knowledge blocks a triple belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    TrainFact,
    TrainImplication,
    TestFact,
    TestImplication,
}

impl Block {
    pub fn label(self) -> &'static str {
        match self {
            Block::TrainFact => "train_fact",
            Block::TrainImplication => "train_implication",
            Block::TestFact => "test_fact",
            Block::TestImplication => "test_implication",
        }
    }
}

/// One (subject, relation, answer) record; `answer` is always the
/// ground-truth completion for (subject, relation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub subject: usize,
    pub relation: usize,
    pub answer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record {
    pub block: Block,
    pub triple: Triple,
}

/// The task's triples: `train` holds all facts plus train-subject
/// implications, `test` holds the held-out test-subject implications.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<Record>,
    train: Vec<Triple>,
    test: Vec<Triple>,
}

impl TaskSpec {
    pub fn new(n: usize, m: usize, m_train: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig(format!("n = {n} but need n >= 2")));
        }
        if m_train == 0 || m_train >= m {
            return Err(Error::InvalidConfig(format!(
                "m_train = {m_train} but need 1 <= m_train < m = {m}"
            )));
        }
        Ok(Self { n, m, m_train })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn m_train(&self) -> usize {
        self.m_train
    }

    pub fn m_test(&self) -> usize {
        self.m - self.m_train
    }

    /// `n*m` subjects + 2 relations + `2n` answers + EOS.
    pub fn vocab_size(&self) -> usize {
        self.n * self.m + 2 + 2 * self.n + 1
    }

    /// Subject in partition `i` (0-based), copy `j` (0-based).
    /// Cycling order: copy-major, so all first copies come before all second.
    pub fn subject_id(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.m);
        j * self.n + i
    }

    /// Inverse of [`subject_id`](Self::subject_id): (partition, copy).
    pub fn subject_index(&self, subject: usize) -> (usize, usize) {
        debug_assert!(subject < self.n * self.m);
        (subject % self.n, subject / self.n)
    }

    /// A subject is a test subject when its copy index is >= m_train.
    pub fn is_test_subject(&self, subject: usize) -> bool {
        self.subject_index(subject).1 >= self.m_train
    }

    pub fn r1(&self) -> usize {
        self.n * self.m
    }

    pub fn r2(&self) -> usize {
        self.n * self.m + 1
    }

    pub fn fact_id(&self, i: usize) -> usize {
        debug_assert!(i < self.n);
        self.n * self.m + 2 + i
    }

    pub fn implication_id(&self, i: usize) -> usize {
        debug_assert!(i < self.n);
        self.n * self.m + 2 + self.n + i
    }

    pub fn eos(&self) -> usize {
        self.n * self.m + 2 + 2 * self.n
    }

    pub fn subject_range(&self) -> Range<usize> {
        0..self.n * self.m
    }

    pub fn relation_range(&self) -> Range<usize> {
        self.r1()..self.r2() + 1
    }

    pub fn fact_range(&self) -> Range<usize> {
        self.fact_id(0)..self.fact_id(0) + self.n
    }

    pub fn implication_range(&self) -> Range<usize> {
        self.implication_id(0)..self.implication_id(0) + self.n
    }

    /// All answer tokens, facts then implications; contiguous by layout.
    pub fn answer_range(&self) -> Range<usize> {
        self.fact_id(0)..self.eos()
    }

    /// Ground-truth completion a*(subject, relation).
    pub fn answer(&self, subject: usize, relation: usize) -> Result<usize> {
        if subject >= self.n * self.m {
            return Err(Error::InvalidConfig(format!(
                "subject token {subject} out of range"
            )));
        }
        let (i, _) = self.subject_index(subject);
        if relation == self.r1() {
            Ok(self.fact_id(i))
        } else if relation == self.r2() {
            Ok(self.implication_id(i))
        } else {
            Err(Error::InvalidConfig(format!(
                "relation token {relation} out of range"
            )))
        }
    }

    /// Structured-text dump of the sizes and the five token-id ranges.
    pub fn to_text(&self) -> String {
        #[derive(Serialize)]
        struct Ranges {
            subjects: [usize; 2],
            relations: [usize; 2],
            facts: [usize; 2],
            implications: [usize; 2],
            eos: [usize; 2],
        }
        #[derive(Serialize)]
        struct Doc {
            n: usize,
            m: usize,
            m_train: usize,
            m_test: usize,
            vocab_size: usize,
            ranges: Ranges,
        }
        let doc = Doc {
            n: self.n,
            m: self.m,
            m_train: self.m_train,
            m_test: self.m_test(),
            vocab_size: self.vocab_size(),
            ranges: Ranges {
                subjects: [self.subject_range().start, self.subject_range().end],
                relations: [self.relation_range().start, self.relation_range().end],
                facts: [self.fact_range().start, self.fact_range().end],
                implications: [self.implication_range().start, self.implication_range().end],
                eos: [self.eos(), self.eos() + 1],
            },
        };
        toml::to_string(&doc).expect("plain struct serializes")
    }
}

/// Validated constructor; same contract as [`TaskSpec::new`].
pub fn build_task(n: usize, m: usize, m_train: usize) -> Result<TaskSpec> {
    TaskSpec::new(n, m, m_train)
}

/// Enumerates the four blocks deterministically, block by block, each block
/// in subject-token order.
pub fn build_dataset(spec: &TaskSpec) -> Dataset {
    let mut records = Vec::with_capacity(2 * spec.n() * spec.m());
    let push_block = |records: &mut Vec<Record>, block: Block, relation: usize, copies: Range<usize>| {
        for j in copies {
            for i in 0..spec.n() {
                let subject = spec.subject_id(i, j);
                let answer = spec.answer(subject, relation).expect("in range");
                records.push(Record {
                    block,
                    triple: Triple {
                        subject,
                        relation,
                        answer,
                    },
                });
            }
        }
    };
    push_block(&mut records, Block::TrainFact, spec.r1(), 0..spec.m_train());
    push_block(&mut records, Block::TrainImplication, spec.r2(), 0..spec.m_train());
    push_block(&mut records, Block::TestFact, spec.r1(), spec.m_train()..spec.m());
    push_block(&mut records, Block::TestImplication, spec.r2(), spec.m_train()..spec.m());

    let train = records
        .iter()
        .filter(|r| r.block != Block::TestImplication)
        .map(|r| r.triple)
        .collect();
    let test = records
        .iter()
        .filter(|r| r.block == Block::TestImplication)
        .map(|r| r.triple)
        .collect();
    Dataset {
        records,
        train,
        test,
    }
}

impl Dataset {
    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    pub fn test(&self) -> &[Triple] {
        &self.test
    }

    /// Newline-delimited `block,subject,relation,answer` records in
    /// enumeration order; byte-identical across runs for a fixed spec.
    pub fn to_text(&self) -> String {
        let mut s = String::from("block,subject_id,relation_id,answer_id\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.block.label(),
                r.triple.subject,
                r.triple.relation,
                r.triple.answer
            ));
        }
        s
    }

    /// SHA-256 of the serialized form, for run manifests.
    pub fn sha256_hex(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `[subject, relation, EOS, answer]`; the model consumes the first three
/// tokens and is scored on the fourth.
pub fn encode_sequence(spec: &TaskSpec, triple: &Triple) -> [usize; 4] {
    [triple.subject, triple.relation, spec.eos(), triple.answer]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_sizes_match_hand_counts() {
        assert_eq!(build_task(2, 2, 1).unwrap().vocab_size(), 11);
        assert_eq!(build_task(20, 4, 1).unwrap().vocab_size(), 123);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(build_task(1, 2, 1).is_err());
        assert!(build_task(2, 2, 2).is_err());
        assert!(build_task(2, 2, 0).is_err());
        assert!(build_task(2, 1, 1).is_err());
    }

    #[test]
    fn cycling_order_numbering() {
        let spec = build_task(3, 2, 1).unwrap();
        // s_{1,1}=0, s_{2,1}=1, s_{3,1}=2, s_{1,2}=3, ...
        assert_eq!(spec.subject_id(0, 0), 0);
        assert_eq!(spec.subject_id(2, 0), 2);
        assert_eq!(spec.subject_id(0, 1), 3);
        assert_eq!(spec.subject_index(5), (2, 1));
        assert_eq!(spec.r1(), 6);
        assert_eq!(spec.r2(), 7);
        assert_eq!(spec.fact_id(0), 8);
        assert_eq!(spec.implication_id(0), 11);
        assert_eq!(spec.eos(), 14);
    }

    #[test]
    fn ranges_cover_vocab_disjointly() {
        let spec = build_task(4, 3, 2).unwrap();
        let mut seen = vec![0usize; spec.vocab_size()];
        for t in spec.subject_range() {
            seen[t] += 1;
        }
        for t in spec.relation_range() {
            seen[t] += 1;
        }
        for t in spec.fact_range() {
            seen[t] += 1;
        }
        for t in spec.implication_range() {
            seen[t] += 1;
        }
        seen[spec.eos()] += 1;
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn answer_map_follows_rule() {
        let spec = build_task(5, 4, 2).unwrap();
        for i in 0..spec.n() {
            for j in 0..spec.m() {
                let s = spec.subject_id(i, j);
                assert_eq!(spec.answer(s, spec.r1()).unwrap(), spec.fact_id(i));
                assert_eq!(spec.answer(s, spec.r2()).unwrap(), spec.implication_id(i));
            }
        }
        assert!(spec.answer(0, spec.eos()).is_err());
        assert!(spec.answer(spec.r1(), spec.r1()).is_err());
    }

    #[test]
    fn dataset_counts() {
        let spec = build_task(2, 2, 1).unwrap();
        let ds = build_dataset(&spec);
        assert_eq!(ds.train().len(), 6);
        assert_eq!(ds.test().len(), 2);

        let spec = build_task(20, 4, 1).unwrap();
        let ds = build_dataset(&spec);
        assert_eq!(ds.train().len(), 100);
        assert_eq!(ds.test().len(), 60);
    }

    #[test]
    fn no_test_implications_leak_into_train() {
        let spec = build_task(6, 5, 2).unwrap();
        let ds = build_dataset(&spec);
        for t in ds.train() {
            assert!(!(t.relation == spec.r2() && spec.is_test_subject(t.subject)));
        }
        for t in ds.test() {
            assert_eq!(t.relation, spec.r2());
            assert!(spec.is_test_subject(t.subject));
        }
    }

    #[test]
    fn serialization_is_stable() {
        let spec = build_task(2, 2, 1).unwrap();
        let a = build_dataset(&spec).to_text();
        let b = build_dataset(&spec).to_text();
        assert_eq!(a, b);
        assert!(a.starts_with("block,subject_id,relation_id,answer_id\ntrain_fact,0,4,6\n"));
        assert_eq!(build_dataset(&spec).sha256_hex().len(), 64);
    }

    #[test]
    fn encode_sequence_layout() {
        let spec = build_task(2, 2, 1).unwrap();
        let t = Triple {
            subject: 1,
            relation: spec.r2(),
            answer: spec.implication_id(1),
        };
        assert_eq!(encode_sequence(&spec, &t), [1, 5, 10, 9]);
    }

    #[test]
    fn spec_text_dump_has_all_fields() {
        let text = build_task(2, 2, 1).unwrap().to_text();
        for needle in [
            "n = 2",
            "m = 2",
            "m_train = 1",
            "m_test = 1",
            "vocab_size = 11",
            "subjects = [0, 4]",
            "relations = [4, 6]",
            "facts = [6, 8]",
            "implications = [8, 10]",
            "eos = [10, 11]",
        ] {
            assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
        }
    }
}
