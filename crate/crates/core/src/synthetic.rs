//! Latent-ability learner simulator with known generating probabilities.
//!
//! Each learner has a baseline ability `b ~ N(ability_mean, ability_std)` and a
//! per-concept ability starting at `b`. At every step a concept and one of its
//! questions are drawn uniformly and
//!
//! ```text
//! p = sigmoid(a_c − δ_q − β_c),    r ~ Bernoulli(p)
//! ```
//!
//! Afterwards the practiced concept gains `learning_rate` and every other
//! concept relaxes toward the baseline by a factor `exp(−forgetting_rate)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, IdMaps, Interaction, InteractionSequence};
use crate::error::{AktError, Result};
use crate::evaluation::auc;
use crate::numerics::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub learners: usize,
    pub concepts: usize,
    pub questions_per_concept: usize,
    /// Standard deviation of question difficulty δ_q around its concept.
    pub difficulty_spread: f64,
    /// Standard deviation of the per-concept offset β_c.
    pub concept_difficulty_spread: f64,
    pub ability_mean: f64,
    pub ability_std: f64,
    pub learning_rate: f64,
    pub forgetting_rate: f64,
    pub length: usize,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            learners: 500,
            concepts: 20,
            questions_per_concept: 10,
            difficulty_spread: 1.0,
            concept_difficulty_spread: 0.5,
            ability_mean: 0.0,
            ability_std: 1.0,
            learning_rate: 0.2,
            forgetting_rate: 0.05,
            length: 50,
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.learners == 0 || self.concepts == 0 || self.questions_per_concept == 0 || self.length == 0 {
            return Err(AktError::config("learners, concepts, questions_per_concept and length must be positive"));
        }
        for (name, v) in [
            ("difficulty_spread", self.difficulty_spread),
            ("concept_difficulty_spread", self.concept_difficulty_spread),
            ("ability_std", self.ability_std),
            ("forgetting_rate", self.forgetting_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AktError::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !self.ability_mean.is_finite() || !self.learning_rate.is_finite() {
            return Err(AktError::config("ability_mean and learning_rate must be finite"));
        }
        Ok(())
    }

    pub fn question_count(&self) -> usize {
        self.concepts * self.questions_per_concept
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionTruth {
    pub name: String,
    pub concept: String,
    /// Total difficulty δ_q + β_c.
    pub difficulty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerTruth {
    pub learner_id: String,
    pub baseline: f64,
    /// Generating probability of every response, in sequence order.
    pub probabilities: Vec<f64>,
}

/// Sidecar describing how a corpus was generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SimSpec,
    pub questions: Vec<QuestionTruth>,
    pub concept_offsets: Vec<f64>,
    pub learners: Vec<LearnerTruth>,
}

impl GroundTruth {
    pub fn learner(&self, id: &str) -> Option<&LearnerTruth> {
        self.learners.iter().find(|l| l.learner_id == id)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn learner_name(index: usize) -> String {
    format!("s{index:05}")
}

/// Generate a corpus. Dense indices follow the simulator's own numbering:
/// question `q` (1-based) belongs to concept `(q − 1) / questions_per_concept + 1`,
/// and the original ids written to CSV are those same integers.
pub fn generate(spec: &SimSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |std: f64| Normal::new(0.0, std).map_err(|e| AktError::config(e.to_string()));
    let concept_dist = normal(spec.concept_difficulty_spread)?;
    let question_dist = normal(spec.difficulty_spread)?;
    let concept_offsets: Vec<f64> = (0..spec.concepts).map(|_| concept_dist.sample(&mut rng)).collect();
    let difficulty: Vec<f64> = (0..spec.question_count())
        .map(|q| question_dist.sample(&mut rng) + concept_offsets[q / spec.questions_per_concept])
        .collect();
    let ability_dist = Normal::new(spec.ability_mean, spec.ability_std).map_err(|e| AktError::config(e.to_string()))?;
    let decay = (-spec.forgetting_rate).exp();

    let simulated: Vec<(InteractionSequence, LearnerTruth)> = (0..spec.learners)
        .into_par_iter()
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(l as u64 + 1);
            let baseline = ability_dist.sample(&mut rng);
            let mut ability = vec![baseline; spec.concepts];
            let mut interactions = Vec::with_capacity(spec.length);
            let mut probabilities = Vec::with_capacity(spec.length);
            for _ in 0..spec.length {
                let c = rng.random_range(0..spec.concepts);
                let q = c * spec.questions_per_concept + rng.random_range(0..spec.questions_per_concept);
                let p = sigmoid(ability[c] - difficulty[q]);
                let r = u8::from(rng.random::<f64>() < p);
                interactions.push(Interaction::single(Some(q as u32 + 1), c as u32 + 1, r));
                probabilities.push(p);
                for (k, a) in ability.iter_mut().enumerate() {
                    if k == c {
                        *a += spec.learning_rate;
                    } else {
                        *a = baseline + (*a - baseline) * decay;
                    }
                }
            }
            let id = learner_name(l);
            (
                InteractionSequence { learner_id: id.clone(), interactions },
                LearnerTruth { learner_id: id, baseline, probabilities },
            )
        })
        .collect();
    let (sequences, learners): (Vec<_>, Vec<_>) = simulated.into_iter().unzip();

    let concept_names: Vec<String> = (1..=spec.concepts).map(|c| c.to_string()).collect();
    let questions: Vec<QuestionTruth> = difficulty
        .iter()
        .enumerate()
        .map(|(q, &d)| QuestionTruth {
            name: (q + 1).to_string(),
            concept: concept_names[q / spec.questions_per_concept].clone(),
            difficulty: d,
        })
        .collect();
    let maps = IdMaps { questions: questions.iter().map(|q| q.name.clone()).collect(), concepts: concept_names };
    let meta = DatasetMeta::from_sequences(&sequences, spec.concepts, spec.question_count());
    let truth = GroundTruth { spec: spec.clone(), questions, concept_offsets, learners };
    Ok((Dataset { sequences, meta, maps }, truth))
}

/// AUC of the generating probabilities against the realized responses of the
/// given sequences (or chunks of them, matched by learner and order).
pub fn bayes_optimal_auc(truth: &GroundTruth, sequences: &[InteractionSequence]) -> Result<f64> {
    let mut offsets = std::collections::HashMap::new();
    let (mut probs, mut labels) = (Vec::new(), Vec::new());
    for s in sequences {
        let learner = truth
            .learner(&s.learner_id)
            .ok_or_else(|| AktError::Data(format!("learner {} not in ground truth", s.learner_id)))?;
        let start: &mut usize = offsets.entry(s.learner_id.as_str()).or_default();
        let slice = learner.probabilities.get(*start..*start + s.len()).ok_or_else(|| {
            AktError::Data(format!("sequence for {} is longer than its ground truth", s.learner_id))
        })?;
        probs.extend_from_slice(slice);
        labels.extend(s.interactions.iter().map(|it| it.response));
        *start += s.len();
    }
    auc(&probs, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat() -> SimSpec {
        SimSpec {
            learners: 200,
            length: 50,
            difficulty_spread: 0.0,
            concept_difficulty_spread: 0.0,
            ability_std: 0.0,
            learning_rate: 0.0,
            forgetting_rate: 0.0,
            ..SimSpec::default()
        }
    }

    #[test]
    fn symmetric_corpus_is_half_correct() {
        let (data, _) = generate(&flat()).unwrap();
        let all: Vec<u8> = data.sequences.iter().flat_map(|s| s.interactions.iter().map(|i| i.response)).collect();
        assert_eq!(all.len(), 10_000);
        let rate = all.iter().map(|&r| r as f64).sum::<f64>() / all.len() as f64;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn easy_questions_are_mostly_correct() {
        let spec = SimSpec { ability_mean: 3.0, ..flat() };
        let (data, _) = generate(&spec).unwrap();
        let n = data.meta.responses as f64;
        let rate = data.sequences.iter().flat_map(|s| &s.interactions).map(|i| i.response as f64).sum::<f64>() / n;
        assert!(rate > 0.94, "{rate}");
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SimSpec { learners: 20, ..SimSpec::default() };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SimSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn question_concept_layout() {
        let spec = SimSpec { learners: 5, concepts: 3, questions_per_concept: 4, ..SimSpec::default() };
        let (data, truth) = generate(&spec).unwrap();
        assert_eq!(data.meta.questions, 12);
        for it in data.sequences.iter().flat_map(|s| &s.interactions) {
            assert_eq!((it.question.unwrap() - 1) / 4 + 1, it.concepts[0]);
        }
        assert_eq!(truth.questions[5].concept, "2");
    }

    #[test]
    fn near_deterministic_generator_is_near_perfect() {
        let spec = SimSpec { ability_std: 0.0, difficulty_spread: 0.0, concept_difficulty_spread: 6.0, learning_rate: 0.0, ..SimSpec::default() };
        let (data, truth) = generate(&spec).unwrap();
        assert!(bayes_optimal_auc(&truth, &data.sequences).unwrap() > 0.95);
    }

    #[test]
    fn flat_generator_gives_half() {
        let (data, truth) = generate(&flat()).unwrap();
        assert_eq!(bayes_optimal_auc(&truth, &data.sequences).unwrap(), 0.5);
    }

    #[test]
    fn chunks_line_up_with_truth() {
        let spec = SimSpec { learners: 30, ..SimSpec::default() };
        let (data, truth) = generate(&spec).unwrap();
        let whole = bayes_optimal_auc(&truth, &data.sequences).unwrap();
        let chunks = crate::data::truncate(data.sequences.clone(), 7);
        assert_eq!(bayes_optimal_auc(&truth, &chunks).unwrap(), whole);
    }
}
