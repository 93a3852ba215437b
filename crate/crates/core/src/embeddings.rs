//! Raw question embeddings `x_t` and question-response embeddings `y_t`.
//!
//! Two constructions are supported:
//!
//! * **plain**: a concept table (C rows) for questions and a concept-response
//!   table (2C rows) for responses;
//! * **Rasch**: each question is its concept prototype shifted along a
//!   per-concept variation direction by a scalar difficulty,
//!   `x = c_c + μ_q · d_c`, and responses use `y = (c_c + g_r) + μ_q · f`.
//!
//! When a position carries several concepts, the per-concept constructions
//! are averaged. Since `μ_q` is shared by the concepts of one question this is
//! the same as averaging the gathered rows first, which is what the graph does.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetMeta;
use crate::error::{AktError, Result};
use crate::numerics::{xavier_init, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EmbeddingKind {
    Plain,
    /// `pair_variation` selects a response variation vector per (concept,
    /// response) pair instead of one per concept.
    Rasch { pair_variation: bool },
}

impl EmbeddingKind {
    pub fn is_rasch(self) -> bool {
        matches!(self, EmbeddingKind::Rasch { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Question,
    Response,
}

/// Closed-form count of the embedding parameters on one side.
///
/// The difficulty table is shared between the two sides, so the sides'
/// counts each include `Q` while the allocation holds it once.
pub fn count_parameters(meta: &DatasetMeta, dim: usize, side: Side, kind: EmbeddingKind) -> usize {
    let (c, q, d) = (meta.concepts, meta.questions, dim);
    match (kind, side) {
        (EmbeddingKind::Plain, Side::Question) => c * d,
        (EmbeddingKind::Plain, Side::Response) => 2 * c * d,
        (EmbeddingKind::Rasch { .. }, Side::Question) => 2 * c * d + q,
        (EmbeddingKind::Rasch { pair_variation: false }, Side::Response) => (c + 2) * d + q,
        (EmbeddingKind::Rasch { pair_variation: true }, Side::Response) => (2 * c + 2) * d + q,
    }
}

/// Total allocated embedding scalars for a kind.
pub fn allocated_parameters(meta: &DatasetMeta, dim: usize, kind: EmbeddingKind) -> usize {
    let both = count_parameters(meta, dim, Side::Question, kind) + count_parameters(meta, dim, Side::Response, kind);
    if kind.is_rasch() {
        both - meta.questions
    } else {
        both
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainEmbeddingTable {
    /// C × D
    pub concept: ParamId,
    /// 2C × D; rows `0..C` are incorrect responses, `C..2C` correct ones.
    pub concept_response: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaschEmbeddingTable {
    /// C × D concept prototypes, shared by both sides.
    pub concept: ParamId,
    /// C × D question variation directions.
    pub variation: ParamId,
    /// 2 × D response offsets, row 0 incorrect and row 1 correct.
    pub response_offset: ParamId,
    /// C × D (shared across responses) or 2C × D (per pair).
    pub response_variation: ParamId,
    /// Q × 1 scalar difficulties, initialized to zero.
    pub difficulty: ParamId,
    pub pair_variation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EmbeddingTables {
    Plain(PlainEmbeddingTable),
    Rasch(RaschEmbeddingTable),
}

/// One position's lookup keys. `concepts` are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemRef<'a> {
    pub question: u32,
    pub concepts: &'a [u32],
}

impl EmbeddingTables {
    pub fn build<S: Scalar, R: Rng + ?Sized>(
        kind: EmbeddingKind,
        meta: &DatasetMeta,
        dim: usize,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        let c = meta.concepts;
        if c == 0 {
            return Err(AktError::config("dataset has no concepts"));
        }
        Ok(match kind {
            EmbeddingKind::Plain => EmbeddingTables::Plain(PlainEmbeddingTable {
                concept: store.add("emb.concept", xavier_init(&[c, dim], rng)),
                concept_response: store.add("emb.concept_response", xavier_init(&[2 * c, dim], rng)),
            }),
            EmbeddingKind::Rasch { pair_variation } => {
                if !meta.has_questions() {
                    return Err(AktError::config(
                        "Rasch embeddings need question ids, but the dataset has none",
                    ));
                }
                let f_rows = if pair_variation { 2 * c } else { c };
                EmbeddingTables::Rasch(RaschEmbeddingTable {
                    concept: store.add("emb.concept", xavier_init(&[c, dim], rng)),
                    variation: store.add("emb.variation", xavier_init(&[c, dim], rng)),
                    response_offset: store.add("emb.response_offset", xavier_init(&[2, dim], rng)),
                    response_variation: store.add("emb.response_variation", xavier_init(&[f_rows, dim], rng)),
                    difficulty: store.add("emb.difficulty", Tensor::zeros(&[meta.questions, 1])),
                    pair_variation,
                })
            }
        })
    }

    pub fn kind(&self) -> EmbeddingKind {
        match self {
            EmbeddingTables::Plain(_) => EmbeddingKind::Plain,
            EmbeddingTables::Rasch(t) => EmbeddingKind::Rasch { pair_variation: t.pair_variation },
        }
    }

    /// Live tally of the scalars behind one side.
    pub fn side_count<S: Scalar>(&self, store: &ParamStore<S>, side: Side) -> usize {
        let n = |id: ParamId| store.get(id).len();
        match (self, side) {
            (EmbeddingTables::Plain(t), Side::Question) => n(t.concept),
            (EmbeddingTables::Plain(t), Side::Response) => n(t.concept_response),
            (EmbeddingTables::Rasch(t), Side::Question) => n(t.concept) + n(t.variation) + n(t.difficulty),
            (EmbeddingTables::Rasch(t), Side::Response) => {
                n(t.response_offset) + n(t.response_variation) + n(t.difficulty)
            }
        }
    }

    pub fn difficulty_table(&self) -> Option<ParamId> {
        match self {
            EmbeddingTables::Rasch(t) => Some(t.difficulty),
            EmbeddingTables::Plain(_) => None,
        }
    }

    /// Concept prototype table (`c_c`), present in both constructions.
    pub fn concept_table(&self) -> ParamId {
        match self {
            EmbeddingTables::Plain(t) => t.concept,
            EmbeddingTables::Rasch(t) => t.concept,
        }
    }

    fn concept_rows<S: Scalar>(items: &[ItemRef<'_>], store: &ParamStore<S>, table: ParamId) -> Result<Vec<Vec<usize>>> {
        let size = store.get(table).rows();
        items
            .iter()
            .map(|it| {
                if it.concepts.is_empty() {
                    return Err(AktError::Data("position without a concept".into()));
                }
                it.concepts
                    .iter()
                    .map(|&c| {
                        if c == 0 || c as usize > size {
                            Err(AktError::Index { what: "concept", index: c as usize, size })
                        } else {
                            Ok(c as usize - 1)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn difficulty_col<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, t: &RaschEmbeddingTable, items: &[ItemRef<'_>]) -> Result<Var> {
        let q_count = store.get(t.difficulty).rows();
        let rows = items
            .iter()
            .map(|it| {
                if it.question == 0 || it.question as usize > q_count {
                    Err(AktError::Index { what: "question", index: it.question as usize, size: q_count })
                } else {
                    Ok(vec![it.question as usize - 1])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mu = g.param(store, t.difficulty);
        g.gather_mean(mu, rows)
    }

    /// Question embeddings for a sequence of positions, `(T, D)`.
    pub fn embed_questions<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, items: &[ItemRef<'_>]) -> Result<Var> {
        let rows = Self::concept_rows(items, store, self.concept_table())?;
        match self {
            EmbeddingTables::Plain(t) => {
                let c = g.param(store, t.concept);
                g.gather_mean(c, rows)
            }
            EmbeddingTables::Rasch(t) => {
                let c = g.param(store, t.concept);
                let d = g.param(store, t.variation);
                let base = g.gather_mean(c, rows.clone())?;
                let dir = g.gather_mean(d, rows)?;
                let mu = self.difficulty_col(g, store, t, items)?;
                let shift = g.mul_col(dir, mu)?;
                g.add(base, shift)
            }
        }
    }

    /// Question-response embeddings, `(T, D)`. `responses` must be 0 or 1.
    pub fn embed_responses<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        items: &[ItemRef<'_>],
        responses: &[u8],
    ) -> Result<Var> {
        if responses.len() != items.len() {
            return Err(AktError::shape("embed_responses", "one response per position"));
        }
        if let Some(&r) = responses.iter().find(|&&r| r > 1) {
            return Err(AktError::Index { what: "response", index: r as usize, size: 2 });
        }
        let rows = Self::concept_rows(items, store, self.concept_table())?;
        let c_count = store.get(self.concept_table()).rows();
        let paired = |rows: &[Vec<usize>]| -> Vec<Vec<usize>> {
            rows.iter()
                .zip(responses)
                .map(|(list, &r)| list.iter().map(|&c| r as usize * c_count + c).collect())
                .collect()
        };
        match self {
            EmbeddingTables::Plain(t) => {
                let table = g.param(store, t.concept_response);
                g.gather_mean(table, paired(&rows))
            }
            EmbeddingTables::Rasch(t) => {
                let c = g.param(store, t.concept);
                let base = g.gather_mean(c, rows.clone())?;
                let offsets = g.param(store, t.response_offset);
                let off = g.gather_mean(offsets, responses.iter().map(|&r| vec![r as usize]).collect())?;
                let e = g.add(base, off)?;
                let f = g.param(store, t.response_variation);
                let f_rows = if t.pair_variation { paired(&rows) } else { rows };
                let dir = g.gather_mean(f, f_rows)?;
                let mu = self.difficulty_col(g, store, t, items)?;
                let shift = g.mul_col(dir, mu)?;
                g.add(e, shift)
            }
        }
    }

    /// Single-position question embedding as plain values.
    pub fn embed_question<S: Scalar>(&self, store: &ParamStore<S>, question: u32, concepts: &[u32]) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let v = self.embed_questions(&mut g, store, &[ItemRef { question, concepts }])?;
        Ok(g.value(v).data().to_vec())
    }

    /// Single-position response embedding as plain values.
    pub fn embed_response<S: Scalar>(&self, store: &ParamStore<S>, question: u32, concepts: &[u32], response: u8) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let v = self.embed_responses(&mut g, store, &[ItemRef { question, concepts }], &[response])?;
        Ok(g.value(v).data().to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalMode {
    #[default]
    None,
    Learnable,
    Fixed,
}

/// Additive position vectors for the ablations that replace the decay term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub mode: PositionalMode,
    pub max_len: usize,
    pub dim: usize,
    pub table: Option<ParamId>,
}

/// `[sin(p·ω_0), cos(p·ω_0), sin(p·ω_1), cos(p·ω_1), …]` with `ω_i = 10000^(−2i/D)`.
pub fn sinusoid(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let pair = (j / 2) as f64;
            let angle = position as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl PositionalEncoding {
    pub fn build<S: Scalar, R: Rng + ?Sized>(
        mode: PositionalMode,
        max_len: usize,
        dim: usize,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Self {
        let table = (mode == PositionalMode::Learnable).then(|| store.add("emb.position", xavier_init(&[max_len, dim], rng)));
        PositionalEncoding { mode, max_len, dim, table }
    }

    pub fn vector<S: Scalar>(&self, position: usize, store: &ParamStore<S>) -> Result<Vec<S>> {
        if position >= self.max_len {
            return Err(AktError::Index { what: "position", index: position, size: self.max_len });
        }
        Ok(match (self.mode, self.table) {
            (PositionalMode::None, _) => vec![S::zero(); self.dim],
            (PositionalMode::Fixed, _) => sinusoid(position, self.dim).into_iter().map(S::from_f64_lossy).collect(),
            (PositionalMode::Learnable, Some(t)) => store.get(t).row(position).to_vec(),
            (PositionalMode::Learnable, None) => unreachable!("learnable encoding always owns a table"),
        })
    }

    /// `(len, D)` encodings for positions `0..len`, or `None` in `None` mode.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, len: usize) -> Result<Option<Var>> {
        if len > self.max_len {
            return Err(AktError::Index { what: "position", index: len - 1, size: self.max_len });
        }
        match (self.mode, self.table) {
            (PositionalMode::None, _) => Ok(None),
            (PositionalMode::Fixed, _) => {
                let data = (0..len).flat_map(|p| sinusoid(p, self.dim)).map(S::from_f64_lossy).collect();
                Ok(Some(g.constant(Tensor::new(vec![len, self.dim], data)?)))
            }
            (PositionalMode::Learnable, Some(t)) => {
                let table = g.param(store, t);
                Ok(Some(g.gather_mean(table, (0..len).map(|p| vec![p]).collect())?))
            }
            (PositionalMode::Learnable, None) => unreachable!("learnable encoding always owns a table"),
        }
    }

    pub fn parameter_count(&self) -> usize {
        if self.mode == PositionalMode::Learnable {
            self.max_len * self.dim
        } else {
            0
        }
    }
}
