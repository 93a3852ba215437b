//! Learner response logs: CSV parsing, dataset filters, truncation, learner-level
//! k-fold splits and padded batches.
//!
//! Index 0 is reserved for padding everywhere; real question and concept ids
//! are re-indexed densely from 1 in order of first appearance.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AktError, Result};

/// Sequence length cap applied before training.
pub const DEFAULT_MAX_LEN: usize = 200;
pub const DEFAULT_BATCH_SIZE: usize = 24;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    /// Dense question index in `1..=Q`, or `None` when the corpus has no question ids.
    pub question: Option<u32>,
    /// Dense concept indices in `1..=C`; more than one only for multi-concept questions.
    pub concepts: Vec<u32>,
    pub response: u8,
}

impl Interaction {
    pub fn single(question: Option<u32>, concept: u32, response: u8) -> Self {
        Interaction { question, concepts: vec![concept], response }
    }

    /// Question index used for lookups; falls back to the first concept.
    pub fn question_or_concept(&self) -> u32 {
        self.question.unwrap_or(self.concepts[0])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub learner_id: String,
    pub interactions: Vec<Interaction>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub concepts: usize,
    /// 0 when the corpus carries no question ids.
    pub questions: usize,
    pub learners: usize,
    pub responses: usize,
}

impl DatasetMeta {
    pub fn has_questions(&self) -> bool {
        self.questions > 0
    }

    pub fn from_sequences(sequences: &[InteractionSequence], concepts: usize, questions: usize) -> Self {
        let mut learners: Vec<&str> = sequences.iter().map(|s| s.learner_id.as_str()).collect();
        learners.sort_unstable();
        learners.dedup();
        DatasetMeta {
            concepts,
            questions,
            learners: learners.len(),
            responses: sequences.iter().map(InteractionSequence::len).sum(),
        }
    }
}

/// Original identifiers for dense indices: entry `i` names index `i + 1`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMaps {
    pub questions: Vec<String>,
    pub concepts: Vec<String>,
}

impl IdMaps {
    pub fn question_name(&self, index: u32) -> Option<&str> {
        self.questions.get(index as usize - 1).map(String::as_str)
    }

    pub fn concept_name(&self, index: u32) -> Option<&str> {
        self.concepts.get(index as usize - 1).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub meta: DatasetMeta,
    pub maps: IdMaps,
}

/// Row-level filters applied before indexing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterRule {
    /// Drop interactions with no concept tag.
    DropUnnamedConcept,
    /// Drop interactions whose correctness value is not exactly 0 or 1.
    DropNonBinaryResponse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetProfile {
    Generic,
    Assist2009,
    Assist2015,
    Assist2017,
    Statics2011,
}

impl DatasetProfile {
    pub fn rules(self) -> &'static [FilterRule] {
        match self {
            DatasetProfile::Assist2009 => &[FilterRule::DropUnnamedConcept],
            DatasetProfile::Assist2015 => &[FilterRule::DropNonBinaryResponse],
            DatasetProfile::Generic | DatasetProfile::Assist2017 | DatasetProfile::Statics2011 => &[],
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "generic" | "none" => DatasetProfile::Generic,
            "assist2009" | "assistments2009" => DatasetProfile::Assist2009,
            "assist2015" | "assistments2015" => DatasetProfile::Assist2015,
            "assist2017" | "assistments2017" => DatasetProfile::Assist2017,
            "statics2011" => DatasetProfile::Statics2011,
            other => return Err(AktError::config(format!("unknown dataset profile {other:?}"))),
        })
    }
}

/// One CSV row before filtering and indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub line: u64,
    pub order: i64,
    pub question: Option<i64>,
    pub concepts: Vec<i64>,
    pub correct: String,
}

impl RawRecord {
    fn binary_response(&self) -> Option<u8> {
        match self.correct.trim().parse::<f64>() {
            Ok(0.0) => Some(0),
            Ok(1.0) => Some(1),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawSequence {
    pub learner_id: String,
    pub records: Vec<RawRecord>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    learner_id: String,
    order_id: String,
    question_id: String,
    concept_ids: String,
    correct: String,
}

fn parse_int(field: &str, what: &str, line: u64) -> Result<i64> {
    field.trim().parse::<i64>().map_err(|_| AktError::DataLine {
        line,
        detail: format!("{what} {field:?} is not an integer"),
    })
}

/// Read the CSV into per-learner raw sequences. Learners appear in order of
/// first occurrence; rows within a learner are stably sorted by `order_id`.
pub fn read_raw<R: Read>(reader: R) -> Result<Vec<RawSequence>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawRecord>> = HashMap::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let line = i as u64 + 2;
        let row = row.map_err(|e| AktError::DataLine { line, detail: e.to_string() })?;
        if row.learner_id.is_empty() {
            return Err(AktError::DataLine { line, detail: "empty learner_id".into() });
        }
        let question = match row.question_id.trim() {
            "" => None,
            q => Some(parse_int(q, "question_id", line)?),
        };
        let concepts = row
            .concept_ids
            .split(';')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(|c| parse_int(c, "concept id", line))
            .collect::<Result<Vec<_>>>()?;
        let record = RawRecord {
            line,
            order: parse_int(&row.order_id, "order_id", line)?,
            question,
            concepts,
            correct: row.correct,
        };
        groups
            .entry(row.learner_id.clone())
            .or_insert_with(|| {
                order.push(row.learner_id.clone());
                Vec::new()
            })
            .push(record);
    }
    Ok(order
        .into_iter()
        .map(|learner_id| {
            let mut records = groups.remove(&learner_id).unwrap_or_default();
            records.sort_by_key(|r| r.order);
            RawSequence { learner_id, records }
        })
        .collect())
}

/// Remove offending interactions, then drop sequences left empty.
pub fn apply_filters(sequences: Vec<RawSequence>, rules: &[FilterRule]) -> Vec<RawSequence> {
    sequences
        .into_iter()
        .map(|mut s| {
            s.records.retain(|r| {
                rules.iter().all(|rule| match rule {
                    FilterRule::DropUnnamedConcept => !r.concepts.is_empty(),
                    FilterRule::DropNonBinaryResponse => r.binary_response().is_some(),
                })
            });
            s
        })
        .filter(|s| !s.records.is_empty())
        .collect()
}

#[derive(Default)]
struct Indexer {
    index: HashMap<i64, u32>,
    names: Vec<String>,
}

impl Indexer {
    fn get(&mut self, raw: i64) -> u32 {
        let names = &mut self.names;
        *self.index.entry(raw).or_insert_with(|| {
            names.push(raw.to_string());
            names.len() as u32
        })
    }
}

/// Validate filtered records and assign dense indices.
pub fn index_sequences(raw: Vec<RawSequence>) -> Result<Dataset> {
    let with_q = raw.iter().flat_map(|s| &s.records).filter(|r| r.question.is_some()).count();
    let total = raw.iter().map(|s| s.records.len()).sum::<usize>();
    if with_q != 0 && with_q != total {
        let line = raw.iter().flat_map(|s| &s.records).find(|r| r.question.is_none()).map_or(0, |r| r.line);
        return Err(AktError::DataLine {
            line,
            detail: "question_id missing while other rows carry one".into(),
        });
    }
    let mut questions = Indexer::default();
    let mut concepts = Indexer::default();
    let mut sequences = Vec::with_capacity(raw.len());
    for s in raw {
        let mut interactions = Vec::with_capacity(s.records.len());
        for r in &s.records {
            let response = r.binary_response().ok_or_else(|| AktError::DataLine {
                line: r.line,
                detail: format!("response {:?} is not 0 or 1", r.correct),
            })?;
            if r.concepts.is_empty() {
                return Err(AktError::DataLine { line: r.line, detail: "no concept id".into() });
            }
            interactions.push(Interaction {
                question: r.question.map(|q| questions.get(q)),
                concepts: r.concepts.iter().map(|&c| concepts.get(c)).collect(),
                response,
            });
        }
        sequences.push(InteractionSequence { learner_id: s.learner_id, interactions });
    }
    let meta = DatasetMeta::from_sequences(&sequences, concepts.names.len(), questions.names.len());
    Ok(Dataset { sequences, meta, maps: IdMaps { questions: questions.names, concepts: concepts.names } })
}

/// Index raw sequences through existing maps (e.g. those stored with a
/// checkpoint). Unknown ids are data errors.
pub fn index_with_maps(raw: Vec<RawSequence>, maps: &IdMaps) -> Result<Vec<InteractionSequence>> {
    let lookup = |names: &[String]| -> HashMap<String, u32> {
        names.iter().enumerate().map(|(i, n)| (n.clone(), i as u32 + 1)).collect()
    };
    let (questions, concepts) = (lookup(&maps.questions), lookup(&maps.concepts));
    let find = |table: &HashMap<String, u32>, raw: i64, what: &str, line: u64| {
        table.get(&raw.to_string()).copied().ok_or_else(|| AktError::DataLine { line, detail: format!("unknown {what} {raw}") })
    };
    raw.into_iter()
        .map(|s| {
            let interactions = s
                .records
                .iter()
                .map(|r| {
                    let response = r.binary_response().ok_or_else(|| AktError::DataLine {
                        line: r.line,
                        detail: format!("response {:?} is not 0 or 1", r.correct),
                    })?;
                    let question = match (r.question, maps.questions.is_empty()) {
                        (Some(q), false) => Some(find(&questions, q, "question id", r.line)?),
                        _ => None,
                    };
                    let concepts = r.concepts.iter().map(|&c| find(&concepts, c, "concept id", r.line)).collect::<Result<Vec<_>>>()?;
                    if concepts.is_empty() {
                        return Err(AktError::DataLine { line: r.line, detail: "no concept id".into() });
                    }
                    Ok(Interaction { question, concepts, response })
                })
                .collect::<Result<_>>()?;
            Ok(InteractionSequence { learner_id: s.learner_id, interactions })
        })
        .collect()
}

/// Concept list of each question (entry `q − 1`), from its first occurrence.
pub fn question_concepts(sequences: &[InteractionSequence], questions: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); questions];
    for it in sequences.iter().flat_map(|s| &s.interactions) {
        if let Some(q) = it.question {
            let slot = &mut out[q as usize - 1];
            if slot.is_empty() {
                slot.clone_from(&it.concepts);
            }
        }
    }
    out
}

pub fn parse_reader<R: Read>(reader: R, profile: DatasetProfile) -> Result<Dataset> {
    let raw = read_raw(reader)?;
    let dataset = index_sequences(apply_filters(raw, profile.rules()))?;
    if dataset.sequences.is_empty() {
        return Err(AktError::Data("no interactions left after parsing and filtering".into()));
    }
    Ok(dataset)
}

pub fn parse_csv(path: impl AsRef<Path>, profile: DatasetProfile) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_reader(std::io::BufReader::new(file), profile)
}

/// Write a dataset back out in the input CSV schema, using original ids.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["learner_id", "order_id", "question_id", "concept_ids", "correct"])?;
    for s in &dataset.sequences {
        for (pos, it) in s.interactions.iter().enumerate() {
            let question = match it.question {
                Some(q) => dataset.maps.question_name(q).unwrap_or_default().to_string(),
                None => String::new(),
            };
            let concepts = it
                .concepts
                .iter()
                .map(|&c| dataset.maps.concept_name(c).unwrap_or_default())
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                s.learner_id.as_str(),
                &pos.to_string(),
                &question,
                &concepts,
                &it.response.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Split sequences longer than `max_len` into contiguous, non-overlapping chunks.
pub fn truncate(sequences: Vec<InteractionSequence>, max_len: usize) -> Vec<InteractionSequence> {
    assert!(max_len >= 1, "max_len must be positive");
    let mut out = Vec::with_capacity(sequences.len());
    for s in sequences {
        if s.len() <= max_len {
            out.push(s);
            continue;
        }
        for chunk in s.interactions.chunks(max_len) {
            out.push(InteractionSequence { learner_id: s.learner_id.clone(), interactions: chunk.to_vec() });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MultiConceptMode {
    /// One interaction per concept tag, in tag order.
    #[default]
    Repeat,
    /// One interaction carrying the whole tag list; embeddings are averaged.
    Average,
}

impl MultiConceptMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "repeat" => Ok(MultiConceptMode::Repeat),
            "average" => Ok(MultiConceptMode::Average),
            other => Err(AktError::config(format!("unknown multi-concept mode {other:?}"))),
        }
    }
}

pub fn expand_multi_concept(sequences: Vec<InteractionSequence>, mode: MultiConceptMode) -> Vec<InteractionSequence> {
    match mode {
        MultiConceptMode::Average => sequences,
        MultiConceptMode::Repeat => sequences
            .into_iter()
            .map(|s| InteractionSequence {
                learner_id: s.learner_id,
                interactions: s
                    .interactions
                    .into_iter()
                    .flat_map(|it| {
                        let Interaction { question, concepts, response } = it;
                        concepts.into_iter().map(move |c| Interaction::single(question, c, response))
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Learner ids assigned to each role in one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct FoldData {
    pub train: Vec<InteractionSequence>,
    pub val: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
}

impl Fold {
    /// Route every sequence (or chunk) to the role of its learner.
    pub fn select(&self, sequences: &[InteractionSequence]) -> FoldData {
        let mut role: HashMap<&str, u8> = HashMap::new();
        for (ids, r) in [(&self.train, 0u8), (&self.val, 1), (&self.test, 2)] {
            for id in ids {
                role.insert(id.as_str(), r);
            }
        }
        let mut out = FoldData::default();
        for s in sequences {
            match role.get(s.learner_id.as_str()) {
                Some(0) => out.train.push(s.clone()),
                Some(1) => out.val.push(s.clone()),
                Some(2) => out.test.push(s.clone()),
                _ => {}
            }
        }
        out
    }

    pub fn is_partition_of(&self, learners: &[String]) -> bool {
        let mut all: Vec<&String> = self.train.iter().chain(&self.val).chain(&self.test).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        let mut expected: Vec<&String> = learners.iter().collect();
        expected.sort();
        expected.dedup();
        all.len() == n && all == expected
    }
}

/// Distinct learner ids in order of first appearance.
pub fn learner_ids(sequences: &[InteractionSequence]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    sequences
        .iter()
        .filter(|s| seen.insert(s.learner_id.as_str()))
        .map(|s| s.learner_id.clone())
        .collect()
}

/// Learner-level k-fold split: fold `i` tests on part `i`, validates on part
/// `i + 1 (mod k)` and trains on the remaining `k − 2` parts.
pub fn kfold_split(sequences: &[InteractionSequence], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut learners = learner_ids(sequences);
    if k < 3 {
        return Err(AktError::config(format!("k-fold split needs k >= 3, got {k}")));
    }
    if learners.len() < k {
        return Err(AktError::Data(format!("{} learners cannot fill {k} folds", learners.len())));
    }
    learners.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = learners.len();
    let mut parts: Vec<Vec<String>> = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = n / k + usize::from(i < n % k);
        parts.push(learners[start..start + size].to_vec());
        start += size;
    }
    Ok((0..k)
        .map(|i| {
            let val_part = (i + 1) % k;
            let train = (0..k)
                .filter(|&j| j != i && j != val_part)
                .flat_map(|j| parts[j].iter().cloned())
                .collect();
            Fold { index: i, train, val: parts[val_part].clone(), test: parts[i].clone() }
        })
        .collect())
}

/// Padded batch. Arrays are row-major `(batch, width)`; padding positions hold
/// index 0 and `mask == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub width: usize,
    pub learners: Vec<String>,
    pub lengths: Vec<usize>,
    pub questions: Vec<u32>,
    pub concepts: Vec<u32>,
    pub responses: Vec<u8>,
    pub mask: Vec<bool>,
    /// Full concept list per position (empty for padding).
    pub concept_lists: Vec<Vec<u32>>,
    /// Whether question ids were present (otherwise `questions` repeats the concept).
    pub has_questions: bool,
}

impl Batch {
    pub fn from_sequences(sequences: &[&InteractionSequence]) -> Self {
        let width = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let b = sequences.len();
        let mut batch = Batch {
            width,
            learners: sequences.iter().map(|s| s.learner_id.clone()).collect(),
            lengths: sequences.iter().map(|s| s.len()).collect(),
            questions: vec![0; b * width],
            concepts: vec![0; b * width],
            responses: vec![0; b * width],
            mask: vec![false; b * width],
            concept_lists: vec![Vec::new(); b * width],
            has_questions: sequences.iter().flat_map(|s| &s.interactions).all(|it| it.question.is_some()),
        };
        for (i, s) in sequences.iter().enumerate() {
            for (t, it) in s.interactions.iter().enumerate() {
                let k = i * width + t;
                batch.questions[k] = it.question_or_concept();
                batch.concepts[k] = it.concepts[0];
                batch.responses[k] = it.response;
                batch.mask[k] = true;
                batch.concept_lists[k] = it.concepts.clone();
            }
        }
        batch
    }

    pub fn size(&self) -> usize {
        self.learners.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Rebuild the `i`-th (unpadded) sequence.
    pub fn sequence(&self, i: usize) -> InteractionSequence {
        let base = i * self.width;
        let interactions = (0..self.lengths[i])
            .map(|t| Interaction {
                question: self.has_questions.then_some(self.questions[base + t]),
                concepts: self.concept_lists[base + t].clone(),
                response: self.responses[base + t],
            })
            .collect();
        InteractionSequence { learner_id: self.learners[i].clone(), interactions }
    }
}

/// Group sequences into batches of at most `batch_size`. With an rng the order
/// is shuffled first (training epochs); without one the input order is kept.
pub fn make_batches<R: Rng + ?Sized>(
    sequences: &[InteractionSequence],
    batch_size: usize,
    rng: Option<&mut R>,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .map(|idx| Batch::from_sequences(&idx.iter().map(|&i| &sequences[i]).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(learner: &str, n: usize) -> InteractionSequence {
        InteractionSequence {
            learner_id: learner.into(),
            interactions: (0..n).map(|i| Interaction::single(None, (i % 3) as u32 + 1, (i % 2) as u8)).collect(),
        }
    }

    fn parse(text: &str, profile: DatasetProfile) -> Result<Dataset> {
        parse_reader(text.as_bytes(), profile)
    }

    const HEADER: &str = "learner_id,order_id,question_id,concept_ids,correct\n";

    #[test]
    fn one_learner_three_rows() {
        let csv = format!("{HEADER}a,1,10,5,1\na,2,11,5,0\na,3,10,6,1\n");
        let ds = parse(&csv, DatasetProfile::Generic).unwrap();
        assert_eq!(ds.sequences.len(), 1);
        let s = &ds.sequences[0];
        assert_eq!(s.interactions.iter().map(|i| i.response).collect::<Vec<_>>(), vec![1, 0, 1]);
        assert_eq!(s.interactions[0].question, Some(1));
        assert_eq!(s.interactions[2].concepts, vec![2]);
        assert_eq!(ds.meta, DatasetMeta { concepts: 2, questions: 2, learners: 1, responses: 3 });
        assert_eq!(ds.maps.question_name(2), Some("11"));
    }

    #[test]
    fn interleaved_learners_keep_row_order() {
        let csv = format!("{HEADER}a,1,,1,1\nb,1,,2,0\na,2,,3,0\nb,2,,1,1\na,3,,2,1\n");
        let ds = parse(&csv, DatasetProfile::Generic).unwrap();
        assert_eq!(ds.sequences[0].learner_id, "a");
        let a: Vec<&str> = ds.sequences[0]
            .interactions
            .iter()
            .map(|i| ds.maps.concept_name(i.concepts[0]).unwrap())
            .collect();
        assert_eq!(a, vec!["1", "3", "2"]);
        let b: Vec<u8> = ds.sequences[1].interactions.iter().map(|i| i.response).collect();
        assert_eq!(b, vec![0, 1]);
        assert_eq!(ds.meta.questions, 0);
    }

    #[test]
    fn rows_sorted_by_order_id() {
        let csv = format!("{HEADER}a,3,,1,1\na,1,,2,0\na,2,,3,0\n");
        let ds = parse(&csv, DatasetProfile::Generic).unwrap();
        let c: Vec<u32> = ds.sequences[0].interactions.iter().map(|i| i.concepts[0]).collect();
        // concept "2" was first seen on line 3 but sorts first
        assert_eq!(ds.maps.concept_name(c[0]), Some("2"));
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = format!("{HEADER}a,1,,1,1\na,x,,1,1\n");
        match parse(&csv, DatasetProfile::Generic) {
            Err(AktError::DataLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn filters() {
        let csv = format!("{HEADER}a,1,,,1\na,2,,,0\nb,1,,4,0.5\nb,2,,4,1\n");
        let raw = read_raw(csv.as_bytes()).unwrap();
        assert_eq!(apply_filters(raw.clone(), &[]), raw);
        let f09 = apply_filters(raw.clone(), &[FilterRule::DropUnnamedConcept]);
        assert_eq!(f09.len(), 1);
        assert_eq!(f09[0].learner_id, "b");
        let f15 = apply_filters(raw, &[FilterRule::DropNonBinaryResponse]);
        assert_eq!(f15[1].records.len(), 1);
        assert_eq!(f15[1].records[0].correct, "1");
    }

    #[test]
    fn unfiltered_bad_response_is_a_data_error() {
        let csv = format!("{HEADER}a,1,,4,0.5\n");
        assert!(matches!(parse(&csv, DatasetProfile::Generic), Err(AktError::DataLine { line: 2, .. })));
        let csv = format!("{HEADER}a,1,,4,0.5\na,2,,4,1\n");
        assert_eq!(parse(&csv, DatasetProfile::Assist2015).unwrap().meta.responses, 1);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(parse(HEADER, DatasetProfile::Generic).is_err());
        assert!(parse("", DatasetProfile::Generic).is_err());
    }

    #[test]
    fn truncation_chunks() {
        let out = truncate(vec![seq("a", 450), seq("b", 200), seq("c", 1)], 200);
        let lens: Vec<usize> = out.iter().map(InteractionSequence::len).collect();
        assert_eq!(lens, vec![200, 200, 50, 200, 1]);
        let original = seq("a", 450);
        let rejoined: Vec<Interaction> = out[..3].iter().flat_map(|s| s.interactions.clone()).collect();
        assert_eq!(rejoined, original.interactions);
    }

    #[test]
    fn kfold_ten_learners() {
        let seqs: Vec<_> = (0..10).map(|i| seq(&format!("l{i}"), 3)).collect();
        let folds = kfold_split(&seqs, 5, 11).unwrap();
        let learners = learner_ids(&seqs);
        let mut tests: Vec<String> = Vec::new();
        for f in &folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (6, 2, 2));
            assert!(f.is_partition_of(&learners));
            tests.extend(f.test.iter().cloned());
        }
        tests.sort();
        let mut all = learners.clone();
        all.sort();
        assert_eq!(tests, all);
        assert_eq!(folds, kfold_split(&seqs, 5, 11).unwrap());
        assert!(kfold_split(&seqs[..4], 5, 0).is_err());
    }

    #[test]
    fn batches_pad_and_mask() {
        let seqs = vec![seq("a", 3), seq("b", 5)];
        let batches = make_batches::<ChaCha8Rng>(&seqs, 2, None);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].width, 5);
        assert_eq!(batches[0].interaction_count(), 8);
        assert_eq!(batches[0].concepts[3], 0);
        assert_eq!(batches[0].sequence(0), seqs[0]);

        let singles = make_batches::<ChaCha8Rng>(&seqs, 1, None);
        assert_eq!(singles.len(), 2);

        let many: Vec<_> = (0..30).map(|i| seq(&format!("l{i}"), 1 + i % 4)).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let b1 = make_batches(&many, 4, Some(&mut r1));
        let b2 = make_batches(&many, 4, Some(&mut r2));
        assert_eq!(b1, b2);
        let total: usize = b1.iter().map(Batch::interaction_count).sum();
        assert_eq!(total, many.iter().map(InteractionSequence::len).sum::<usize>());
    }

    #[test]
    fn multi_concept_modes() {
        let s = InteractionSequence {
            learner_id: "a".into(),
            interactions: vec![
                Interaction { question: Some(1), concepts: vec![3, 7], response: 1 },
                Interaction::single(Some(2), 4, 0),
            ],
        };
        let rep = expand_multi_concept(vec![s.clone()], MultiConceptMode::Repeat);
        assert_eq!(
            rep[0].interactions,
            vec![
                Interaction::single(Some(1), 3, 1),
                Interaction::single(Some(1), 7, 1),
                Interaction::single(Some(2), 4, 0)
            ]
        );
        let avg = expand_multi_concept(vec![s.clone()], MultiConceptMode::Average);
        assert_eq!(avg[0], s);
        assert!(MultiConceptMode::parse("median").is_err());
    }

    #[test]
    fn multi_concept_csv_field() {
        let csv = format!("{HEADER}a,1,9,3;7,1\n");
        let ds = parse(&csv, DatasetProfile::Generic).unwrap();
        assert_eq!(ds.sequences[0].interactions[0].concepts, vec![1, 2]);
    }
}
