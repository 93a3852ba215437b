//! The assembled network: question encoder, knowledge encoder, knowledge
//! retriever and prediction head.
//!
//! Per position `t` (0-based below):
//!
//! * `x̂ = enc_q(x)` with inclusive causal attention over questions,
//! * `ŷ = enc_k(y)` with inclusive causal attention over responses,
//! * `h = retriever(query = key = x̂, value = ŷ)` with strict causal attention,
//!   so `h_t` sees `ŷ` only up to `t − 1`; `h_0` is defined as zero,
//! * `r̂_t = sigmoid(head([h_t, x_t]))`.
//!
//! The response at `t` only enters through `y_t`, which the retriever never
//! reads at row `t`; hence `r̂_t` cannot depend on `r_t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    causal_mask, encoder_block, Activation, AttentionConfig, AttentionTrace, BlockParams, DistanceTape, ForwardCtx,
    Linear, MaskKind, ScoreMode,
};
use crate::data::{Batch, DatasetMeta, IdMaps, Interaction, InteractionSequence, MultiConceptMode, DEFAULT_MAX_LEN};
use crate::embeddings::{allocated_parameters, EmbeddingKind, EmbeddingTables, ItemRef, PositionalEncoding, PositionalMode};
use crate::error::{AktError, Result};
use crate::numerics::{dropout, Graph, NamedTensorRecord, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Rasch embeddings, context-aware encoders, monotonic attention.
    #[serde(rename = "akt-r")]
    AktR,
    /// Plain embeddings, context-aware encoders, monotonic attention.
    #[serde(rename = "akt-nr")]
    AktNr,
    /// Rasch embeddings fed straight to the retriever.
    #[serde(rename = "akt-raw-r")]
    AktRawR,
    /// Plain embeddings fed straight to the retriever.
    #[serde(rename = "akt-raw-nr")]
    AktRawNr,
    /// AKT-NR with standard attention and learnable positional encodings.
    #[serde(rename = "akt-nr-pos")]
    AktNrPos,
    /// AKT-NR with standard attention and sinusoidal positional encodings.
    #[serde(rename = "akt-nr-fixed")]
    AktNrFixed,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::AktR, Variant::AktNr, Variant::AktRawR, Variant::AktRawNr, Variant::AktNrPos, Variant::AktNrFixed];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AktR => "akt-r",
            Variant::AktNr => "akt-nr",
            Variant::AktRawR => "akt-raw-r",
            Variant::AktRawNr => "akt-raw-nr",
            Variant::AktNrPos => "akt-nr-pos",
            Variant::AktNrFixed => "akt-nr-fixed",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name.to_ascii_lowercase())
            .ok_or_else(|| AktError::config(format!("unknown variant {name:?}")))
    }

    pub fn uses_rasch(self) -> bool {
        matches!(self, Variant::AktR | Variant::AktRawR)
    }

    pub fn uses_encoders(self) -> bool {
        !matches!(self, Variant::AktRawR | Variant::AktRawNr)
    }

    pub fn positional_mode(self) -> PositionalMode {
        match self {
            Variant::AktNrPos => PositionalMode::Learnable,
            Variant::AktNrFixed => PositionalMode::Fixed,
            _ => PositionalMode::None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AktConfig {
    pub variant: Variant,
    pub dim: usize,
    pub heads: usize,
    /// Feed-forward width inside each attention block; `None` means `dim`.
    pub ffn_dim: Option<usize>,
    pub dropout: f64,
    pub encoder_depth: usize,
    pub retriever_depth: usize,
    pub head_widths: Vec<usize>,
    pub max_len: usize,
    pub multi_concept: MultiConceptMode,
    pub share_query_key: bool,
    /// Response variation vectors per (concept, response) pair instead of per concept.
    pub pair_variation: bool,
    pub attention_dropout: bool,
    /// Subtract `θ·d` from the score instead of multiplying by `exp(−θ·d)`.
    pub additive_decay: bool,
    pub activation: Activation,
    pub initial_theta: f64,
}

impl Default for AktConfig {
    fn default() -> Self {
        AktConfig {
            variant: Variant::AktR,
            dim: 256,
            heads: 8,
            ffn_dim: None,
            dropout: 0.05,
            encoder_depth: 1,
            retriever_depth: 1,
            head_widths: vec![512, 256],
            max_len: DEFAULT_MAX_LEN,
            multi_concept: MultiConceptMode::Repeat,
            share_query_key: true,
            pair_variation: false,
            attention_dropout: true,
            additive_decay: false,
            activation: Activation::Softplus,
            initial_theta: 1.0,
        }
    }
}

impl AktConfig {
    pub fn embedding_kind(&self) -> EmbeddingKind {
        if self.variant.uses_rasch() {
            EmbeddingKind::Rasch { pair_variation: self.pair_variation }
        } else {
            EmbeddingKind::Plain
        }
    }

    pub fn score_mode(&self) -> ScoreMode {
        if self.variant.positional_mode() != PositionalMode::None {
            ScoreMode::Standard
        } else if self.additive_decay {
            ScoreMode::AdditiveDecay
        } else {
            ScoreMode::MultiplicativeDecay
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim.unwrap_or(self.dim),
            share_query_key: self.share_query_key,
            score_mode: self.score_mode(),
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            activation: self.activation,
            initial_theta: self.initial_theta,
        }
    }

    pub fn validate(&self, meta: &DatasetMeta) -> Result<()> {
        self.attention().validate()?;
        if self.encoder_depth == 0 || self.retriever_depth == 0 {
            return Err(AktError::config("encoder and retriever depth must be at least 1"));
        }
        if self.head_widths.contains(&0) {
            return Err(AktError::config("prediction head widths must be positive"));
        }
        if self.max_len == 0 {
            return Err(AktError::config("max_len must be positive"));
        }
        if self.variant.uses_rasch() && !meta.has_questions() {
            return Err(AktError::config(format!(
                "variant {} needs question ids, but the dataset has none",
                self.variant
            )));
        }
        Ok(())
    }

    /// Closed-form count of every trainable scalar the model allocates.
    pub fn parameter_count(&self, meta: &DatasetMeta) -> usize {
        let att = self.attention();
        let block = BlockParams::parameter_count(&att);
        let encoders = if self.variant.uses_encoders() { 2 * self.encoder_depth } else { 0 };
        let positional = if self.variant.positional_mode() == PositionalMode::Learnable { self.max_len * self.dim } else { 0 };
        let mut head = 0;
        let mut width = 2 * self.dim;
        for &w in self.head_widths.iter().chain(std::iter::once(&1)) {
            head += Linear::parameter_count(width, w);
            width = w;
        }
        allocated_parameters(meta, self.dim, self.embedding_kind())
            + positional
            + (encoders + self.retriever_depth) * block
            + head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AktModel<S> {
    pub config: AktConfig,
    pub meta: DatasetMeta,
    pub params: ParamStore<S>,
    pub embeddings: EmbeddingTables,
    pub positional: PositionalEncoding,
    pub question_encoder: Vec<BlockParams>,
    pub knowledge_encoder: Vec<BlockParams>,
    pub retriever: Vec<BlockParams>,
    pub head: Vec<Linear>,
}

/// Per-row predictions of a padded batch; padding entries are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPredictions<S> {
    pub width: usize,
    pub probs: Vec<S>,
}

/// Loss and gradients for one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients<S> {
    /// Summed binary cross-entropy over real positions.
    pub loss_sum: S,
    pub count: usize,
    pub grads: Vec<Option<Tensor<S>>>,
}

fn items_of(seq: &InteractionSequence) -> Vec<ItemRef<'_>> {
    seq.interactions
        .iter()
        .map(|it| ItemRef { question: it.question_or_concept(), concepts: &it.concepts })
        .collect()
}

impl<S: Scalar> AktModel<S> {
    pub fn build(config: AktConfig, meta: DatasetMeta, seed: u64) -> Result<Self> {
        config.validate(&meta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embeddings = EmbeddingTables::build(config.embedding_kind(), &meta, config.dim, &mut params, &mut rng)?;
        let positional =
            PositionalEncoding::build(config.variant.positional_mode(), config.max_len, config.dim, &mut params, &mut rng);
        let att = config.attention();
        let stack = |name: &str, depth: usize, params: &mut ParamStore<S>, rng: &mut ChaCha8Rng| {
            (0..depth).map(|i| BlockParams::build(&format!("{name}.{i}"), &att, params, rng)).collect::<Vec<_>>()
        };
        let enc_depth = if config.variant.uses_encoders() { config.encoder_depth } else { 0 };
        let question_encoder = stack("question_encoder", enc_depth, &mut params, &mut rng);
        let knowledge_encoder = stack("knowledge_encoder", enc_depth, &mut params, &mut rng);
        let retriever = stack("retriever", config.retriever_depth, &mut params, &mut rng);
        let mut head = Vec::new();
        let mut width = 2 * config.dim;
        for (i, &w) in config.head_widths.iter().chain(std::iter::once(&1)).enumerate() {
            head.push(Linear::build(&format!("head.{i}"), width, w, &mut params, &mut rng));
            width = w;
        }
        Ok(AktModel { config, meta, params, embeddings, positional, question_encoder, knowledge_encoder, retriever, head })
    }

    /// Record one sequence's predicted probabilities `(T, 1)` on `g`.
    pub fn sequence_graph(&self, g: &mut Graph<S>, seq: &InteractionSequence, ctx: &mut ForwardCtx<S>) -> Result<Var> {
        let n = seq.len();
        if n == 0 {
            return Err(AktError::Data(format!("empty sequence for learner {}", seq.learner_id)));
        }
        if n > self.config.max_len {
            return Err(AktError::Data(format!(
                "sequence of length {n} exceeds max_len {}; truncate first",
                self.config.max_len
            )));
        }
        let store = &self.params;
        let att = self.config.attention();
        let items = items_of(seq);
        let responses: Vec<u8> = seq.interactions.iter().map(|it| it.response).collect();
        let mut x = self.embeddings.embed_questions(g, store, &items)?;
        let mut y = self.embeddings.embed_responses(g, store, &items, &responses)?;
        if let Some(pe) = self.positional.encode(g, store, n)? {
            x = g.add(x, pe)?;
            y = g.add(y, pe)?;
        }

        let inclusive = causal_mask(n, MaskKind::Inclusive);
        let strict = causal_mask(n, MaskKind::Strict);
        let mut xh = x;
        for (i, block) in self.question_encoder.iter().enumerate() {
            xh = encoder_block(g, store, block, &att, xh, xh, xh, &inclusive, ctx, &format!("question_encoder.{i}"))?;
        }
        let mut yh = y;
        for (i, block) in self.knowledge_encoder.iter().enumerate() {
            yh = encoder_block(g, store, block, &att, yh, yh, yh, &inclusive, ctx, &format!("knowledge_encoder.{i}"))?;
        }
        let mut h = xh;
        for (i, block) in self.retriever.iter().enumerate() {
            h = encoder_block(g, store, block, &att, h, h, yh, &strict, ctx, &format!("retriever.{i}"))?;
        }
        // h_0 := 0, the first step has no history to retrieve from
        let mut first_row = vec![S::one(); n * self.config.dim];
        first_row[..self.config.dim].iter_mut().for_each(|v| *v = S::zero());
        let h = g.mul_const(h, first_row)?;

        let mut z = g.concat_cols(&[h, x])?;
        z = dropout(g, z, self.config.dropout, ctx.training, &mut ctx.rng)?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            z = layer.apply(g, store, z)?;
            if i < last {
                z = self.config.activation.apply(g, z);
                z = dropout(g, z, self.config.dropout, ctx.training, &mut ctx.rng)?;
            }
        }
        Ok(g.sigmoid(z))
    }

    /// Summed BCE for a set of sequences, recorded on one graph.
    pub fn loss_graph(&self, g: &mut Graph<S>, sequences: &[InteractionSequence], ctx: &mut ForwardCtx<S>) -> Result<Var> {
        let mut total: Option<Var> = None;
        for seq in sequences {
            let probs = self.sequence_graph(g, seq, ctx)?;
            let labels = seq.interactions.iter().map(|it| S::from_f64_lossy(it.response as f64)).collect();
            let loss = g.bce(probs, labels, vec![true; seq.len()])?;
            total = Some(match total {
                Some(t) => g.add(t, loss)?,
                None => loss,
            });
        }
        total.ok_or_else(|| AktError::Numerical("loss over zero sequences".into()))
    }

    /// Predicted probabilities for one sequence (evaluation mode).
    pub fn predict_sequence(&self, seq: &InteractionSequence) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let p = self.sequence_graph(&mut g, seq, &mut ctx)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Evaluation-mode forward pass over a padded batch.
    pub fn forward(&self, batch: &Batch) -> Result<BatchPredictions<S>> {
        let rows: Vec<Vec<S>> = (0..batch.size())
            .into_par_iter()
            .map(|i| self.predict_sequence(&batch.sequence(i)))
            .collect::<Result<_>>()?;
        let mut probs = vec![S::zero(); batch.size() * batch.width];
        for (i, row) in rows.into_iter().enumerate() {
            probs[i * batch.width..i * batch.width + row.len()].copy_from_slice(&row);
        }
        Ok(BatchPredictions { width: batch.width, probs })
    }

    /// Probability that the learner answers `current` correctly after `history`.
    pub fn predict_step(&self, learner_id: &str, history: &[Interaction], current: &Interaction) -> Result<S> {
        if history.len() >= self.config.max_len {
            return Err(AktError::Data(format!("history of {} already fills max_len", history.len())));
        }
        let mut interactions = history.to_vec();
        interactions.push(current.clone());
        let probs = self.predict_sequence(&InteractionSequence { learner_id: learner_id.into(), interactions })?;
        Ok(probs[probs.len() - 1])
    }

    /// Loss and parameter gradients for a batch. Rows run in parallel; each
    /// row's dropout stream is derived from `(seed, row)` and gradients are
    /// summed in row order, so the result does not depend on thread count.
    pub fn batch_gradients(&self, batch: &Batch, training: bool, seed: u64) -> Result<BatchGradients<S>> {
        let n_params = self.params.len();
        let per_row: Vec<(S, Vec<Option<Tensor<S>>>)> = (0..batch.size())
            .into_par_iter()
            .map(|i| {
                let seq = batch.sequence(i);
                let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
                let mut ctx = ForwardCtx::new(training, rng);
                let mut g = Graph::new();
                let loss = self.loss_graph(&mut g, std::slice::from_ref(&seq), &mut ctx)?;
                let value = g.value(loss).data()[0];
                g.backward(loss)?;
                Ok((value, g.param_grads(n_params)))
            })
            .collect::<Result<_>>()?;
        let mut loss_sum = S::zero();
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n_params];
        for (loss, row) in per_row {
            loss_sum += loss;
            for (acc, g) in grads.iter_mut().zip(row) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        Ok(BatchGradients { loss_sum, count: batch.interaction_count(), grads })
    }

    /// Per-head attention weights of every layer for one sequence.
    pub fn attention_traces(&self, seq: &InteractionSequence) -> Result<Vec<(String, Vec<AttentionTrace>)>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        ctx.record_traces = true;
        self.sequence_graph(&mut g, seq, &mut ctx)?;
        Ok(ctx.traces)
    }

    /// Learned difficulties μ_q, when the model has them.
    pub fn difficulties(&self) -> Option<Vec<S>> {
        self.embeddings.difficulty_table().map(|id| self.params.get(id).data().to_vec())
    }

    /// Capture the distance matrices of an evaluation pass so later passes can
    /// replay them (the frozen-distance semantics used for gradient checks).
    pub fn record_distances(&self, sequences: &[InteractionSequence]) -> Result<DistanceTape<S>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        ctx.distances = DistanceTape::Record(Vec::new());
        self.loss_graph(&mut g, sequences, &mut ctx)?;
        Ok(ctx.distances.into_replay())
    }
}

impl<S: Scalar> AktModel<S> {
    /// Largest relative error between the tape gradient of the summed loss on
    /// `sequences` and central differences, with distances frozen at their
    /// unperturbed values. Runs in evaluation mode (no dropout).
    pub fn check_gradients(&self, sequences: &[InteractionSequence], epsilon: S) -> Result<S> {
        let tape = self.record_distances(sequences)?;
        let mut params = self.params.clone();
        let mut scratch = self.clone();
        crate::numerics::grad_check(&mut params, epsilon, |p: &ParamStore<S>, g: &mut Graph<S>| {
            scratch.params.clone_from(p);
            let mut ctx = ForwardCtx::eval();
            ctx.distances = tape.clone();
            scratch.loss_graph(g, sequences, &mut ctx)
        })
    }
}

/// Serialized model: configuration, dataset description and every tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub config: AktConfig,
    pub meta: DatasetMeta,
    pub maps: IdMaps,
    /// Concept list per dense question index, when known.
    #[serde(default)]
    pub question_concepts: Vec<Vec<u32>>,
    pub params: Vec<NamedTensorRecord>,
}

pub const CHECKPOINT_FORMAT: &str = "akt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &AktModel<S>, maps: &IdMaps) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: std::any::type_name::<S>().into(),
            config: model.config.clone(),
            meta: model.meta,
            maps: maps.clone(),
            question_concepts: Vec::new(),
            params: model.params.to_records(),
        }
    }

    pub fn with_question_concepts(mut self, question_concepts: Vec<Vec<u32>>) -> Self {
        self.question_concepts = question_concepts;
        self
    }

    pub fn to_model<S: Scalar>(&self) -> Result<AktModel<S>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(AktError::Data(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let mut model = AktModel::build(self.config.clone(), self.meta, 0)?;
        model.params.load_records(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}
