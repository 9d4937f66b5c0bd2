//! Scoring heads that turn contextual hidden states into sparse weights.
//!
//! * document words: `w_i = max_j ln(1 + relu(e_i · h_j))` over the full word vocabulary
//! * query words: `w_i = Σ_{j : t_j = i} ln(1 + relu(W · h_j + b))`, input tokens only
//! * entities: `w_c = λ · max_j ln(1 + relu(P(e_c) · h_j))`, scored for candidates only
//!
//! The heads compute in `f64` and return [`TermWeights`]; conversion to the
//! `f32` [`SparseVector`] happens once in the encoders.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio::{self, Cursor};
use crate::error::{Error, Result};
use crate::kb::{EmbeddingTable, EntityId, EntityVocabulary, Projection};
use crate::sparse::{merge_dot, SparseVector, TermId, VocabularyLayout};

const HIDDEN_MAGIC: &[u8; 8] = b"DYVOHID1";
const PARAMS_MAGIC: &[u8; 8] = b"DYVOENC1";

/// The saturation `ln(1 + relu(x))`.
#[inline]
pub fn saturate(x: f64) -> f64 {
    x.max(0.0).ln_1p()
}

/// Derivative of [`saturate`]; the subgradient at the kink is 0.
#[inline]
pub fn saturate_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0 / (1.0 + x)
    } else {
        0.0
    }
}

/// Sequential `f64` dot product.
#[inline]
pub fn dense_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Max of `row · v` over the rows of `m`, with the lowest maximizing row index.
pub fn max_dot(m: &Matrix, v: &[f64]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for j in 0..m.rows() {
        let s = dense_dot(m.row(j), v);
        if s > best.0 {
            best = (s, j);
        }
    }
    best
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    context: "matrix row",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Last-layer states of one input sequence: row `j` is the state of token `token_ids[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub id: String,
    states: Matrix,
    token_ids: Vec<u32>,
}

impl HiddenStates {
    pub fn new(id: impl Into<String>, states: Matrix, token_ids: Vec<u32>) -> Result<Self> {
        if states.rows() == 0 {
            return Err(Error::InvalidArgument(
                "hidden states need at least one position".into(),
            ));
        }
        if states.rows() != token_ids.len() {
            return Err(Error::Dimension {
                context: "hidden states token ids",
                expected: states.rows(),
                actual: token_ids.len(),
            });
        }
        if let Some(bad) = states.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                value: *bad,
                context: "hidden states".into(),
            });
        }
        Ok(Self {
            id: id.into(),
            states,
            token_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    pub fn states(&self) -> &Matrix {
        &self.states
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    /// Reorders positions; `order[k]` is the old position placed at `k`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = order.iter().map(|&j| self.states.row(j).to_vec()).collect();
        let tokens = order.iter().map(|&j| self.token_ids[j]).collect();
        Self::new(self.id.clone(), Matrix::from_rows(&rows)?, tokens)
    }
}

pub fn read_hidden_states(path: impl AsRef<Path>) -> Result<Vec<HiddenStates>> {
    hidden_states_from_bytes(&binio::read_file(path.as_ref())?)
}

pub fn hidden_states_from_bytes(buf: &[u8]) -> Result<Vec<HiddenStates>> {
    let mut cur = Cursor::new(buf);
    cur.magic(HIDDEN_MAGIC)?;
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = cur.string()?;
        let len = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(cur.u32()?);
        }
        let data = cur.f32s(len * dim, &format!("hidden states of {id:?}"))?;
        let states = Matrix::from_vec(len, dim, data.into_iter().map(f64::from).collect())?;
        out.push(HiddenStates::new(id, states, tokens)?);
    }
    cur.finish()?;
    Ok(out)
}

pub fn hidden_states_to_bytes(seqs: &[HiddenStates]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HIDDEN_MAGIC);
    out.write_u32::<LittleEndian>(seqs.len() as u32).unwrap();
    for s in seqs {
        binio::write_string(&mut out, &s.id).unwrap();
        out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
        out.write_u32::<LittleEndian>(s.dim() as u32).unwrap();
        for &t in &s.token_ids {
            out.write_u32::<LittleEndian>(t).unwrap();
        }
        binio::write_f32s(&mut out, s.states.data().iter().map(|&x| x as f32)).unwrap();
    }
    out
}

pub fn write_hidden_states(path: impl AsRef<Path>, seqs: &[HiddenStates]) -> Result<()> {
    let path = path.as_ref();
    let mut w = binio::create(path)?;
    w.write_all(&hidden_states_to_bytes(seqs))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parameters of one encoder (query or document side).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `|V| × d` output embeddings of the word vocabulary.
    pub word_embeddings: Matrix,
    pub mlp_weight: Vec<f64>,
    pub mlp_bias: f64,
    pub lambda_ent: f64,
    /// Maps entity embeddings into the `d`-dimensional hidden space.
    pub projection: Projection,
}

impl EncoderParams {
    pub fn new(
        word_embeddings: Matrix,
        mlp_weight: Vec<f64>,
        mlp_bias: f64,
        lambda_ent: f64,
        projection: Projection,
    ) -> Result<Self> {
        let p = Self {
            word_embeddings,
            mlp_weight,
            mlp_bias,
            lambda_ent,
            projection,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ent.is_finite() && self.lambda_ent > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda_ent must be finite and positive, got {}",
                self.lambda_ent
            )));
        }
        if self.word_embeddings.rows() == 0 {
            return Err(Error::InvalidArgument(
                "word vocabulary must be non-empty".into(),
            ));
        }
        let d = self.dim();
        if self.mlp_weight.len() != d {
            return Err(Error::Dimension {
                context: "mlp weight",
                expected: d,
                actual: self.mlp_weight.len(),
            });
        }
        if self.projection.d_out() != d {
            return Err(Error::Dimension {
                context: "projection output",
                expected: d,
                actual: self.projection.d_out(),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.word_embeddings.cols()
    }

    pub fn word_vocab_size(&self) -> u32 {
        self.word_embeddings.rows() as u32
    }

    /// Writes everything but the projection, which has its own file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.write_u32::<LittleEndian>(self.word_embeddings.rows() as u32)
            .unwrap();
        out.write_u32::<LittleEndian>(self.dim() as u32).unwrap();
        binio::write_f32s(
            &mut out,
            self.word_embeddings.data().iter().map(|&x| x as f32),
        )
        .unwrap();
        binio::write_f32s(&mut out, self.mlp_weight.iter().map(|&x| x as f32)).unwrap();
        binio::write_f32s(&mut out, [self.mlp_bias as f32, self.lambda_ent as f32]).unwrap();
        out
    }

    /// Hidden width recorded in a serialized header, without decoding the body.
    pub fn peek_dim(buf: &[u8]) -> Result<usize> {
        let mut cur = Cursor::new(buf);
        cur.magic(PARAMS_MAGIC)?;
        cur.u32()?;
        Ok(cur.u32()? as usize)
    }

    pub fn from_bytes(buf: &[u8], projection: Projection) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        cur.magic(PARAMS_MAGIC)?;
        let vocab = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let expected = cur.position() as u64 + 4 * (vocab * dim + dim + 2) as u64;
        if expected != buf.len() as u64 {
            return Err(Error::PayloadLength {
                expected,
                actual: buf.len() as u64,
            });
        }
        let emb = cur.f32s(vocab * dim, "word embeddings")?;
        let w = cur.f32s(dim, "mlp weight")?;
        let bias = cur.f32()? as f64;
        let lambda = cur.f32()? as f64;
        cur.finish()?;
        Self::new(
            Matrix::from_vec(vocab, dim, emb.into_iter().map(f64::from).collect())?,
            w.into_iter().map(f64::from).collect(),
            bias,
            lambda,
            projection,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = binio::create(path)?;
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

pub fn load_params(path: impl AsRef<Path>, projection: Projection) -> Result<EncoderParams> {
    EncoderParams::from_bytes(&binio::read_file(path.as_ref())?, projection)
}

/// Ordered, duplicate-free entity candidates for one query or document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateSet {
    entity_ids: Vec<EntityId>,
}

impl CandidateSet {
    pub fn new(entity_ids: Vec<EntityId>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(entity_ids.len());
        if let Some(&dup) = entity_ids.iter().find(|&&id| !seen.insert(id)) {
            return Err(Error::DuplicateCandidate(dup));
        }
        Ok(Self { entity_ids })
    }

    /// Keeps the first occurrence of every id.
    pub fn dedup_from(ids: impl IntoIterator<Item = EntityId>) -> Self {
        let mut seen = std::collections::HashSet::new();
        Self {
            entity_ids: ids.into_iter().filter(|id| seen.insert(*id)).collect(),
        }
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.entity_ids
    }

    pub fn len(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_ids.is_empty()
    }
}

/// The entity side of the vocabulary: frozen embeddings plus slot numbering.
#[derive(Debug, Clone, Copy)]
pub struct EntitySpace<'a> {
    pub embeddings: &'a EmbeddingTable,
    pub vocab: &'a EntityVocabulary,
}

/// Sparse weights in `f64`, sorted by term id, all strictly positive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermWeights(pub Vec<(TermId, f64)>);

impl TermWeights {
    pub fn get(&self, term: TermId) -> Option<f64> {
        self.0
            .binary_search_by_key(&term, |&(t, _)| t)
            .ok()
            .map(|i| self.0[i].1)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn to_sparse(&self, layout: VocabularyLayout) -> Result<SparseVector> {
        SparseVector::from_entries(layout, self.0.iter().map(|&(t, w)| (t, w as f32)))
    }
}

fn check_dim(h: &HiddenStates, p: &EncoderParams) -> Result<()> {
    if h.dim() != p.dim() {
        return Err(Error::Dimension {
            context: "hidden state width",
            expected: p.dim(),
            actual: h.dim(),
        });
    }
    Ok(())
}

pub fn layout_for(p: &EncoderParams, space: Option<EntitySpace<'_>>) -> Result<VocabularyLayout> {
    VocabularyLayout::new(
        p.word_vocab_size(),
        space.map_or(0, |s| s.vocab.len() as u32),
    )
}

/// Expansion head over the whole word vocabulary.
pub fn mlm_word_weights(h: &HiddenStates, p: &EncoderParams) -> Result<TermWeights> {
    check_dim(h, p)?;
    let mut out = Vec::new();
    for i in 0..p.word_embeddings.rows() {
        let (best, _) = max_dot(h.states(), p.word_embeddings.row(i));
        let w = saturate(best);
        if w > 0.0 {
            out.push((i as TermId, w));
        }
    }
    Ok(TermWeights(out))
}

/// Per-position affine score of the input tokens; repeated tokens add up.
pub fn mlp_query_weights(h: &HiddenStates, p: &EncoderParams) -> Result<TermWeights> {
    check_dim(h, p)?;
    let vocab = p.word_vocab_size();
    let mut acc: HashMap<TermId, f64> = HashMap::new();
    for (j, &tok) in h.token_ids().iter().enumerate() {
        if tok >= vocab {
            return Err(Error::TermOutOfRange {
                term: tok,
                word_vocab_size: vocab,
                entity_count: 0,
            });
        }
        let w = saturate(dense_dot(&p.mlp_weight, h.states().row(j)) + p.mlp_bias);
        *acc.entry(tok).or_insert(0.0) += w;
    }
    let mut out: Vec<_> = acc.into_iter().filter(|&(_, w)| w > 0.0).collect();
    out.sort_unstable_by_key(|&(t, _)| t);
    Ok(TermWeights(out))
}

/// Candidate-restricted entity head. Only ids in `cands` are ever scored.
pub fn entity_weights(
    h: &HiddenStates,
    cands: &CandidateSet,
    space: EntitySpace<'_>,
    p: &EncoderParams,
) -> Result<TermWeights> {
    check_dim(h, p)?;
    let offset = p.word_vocab_size();
    let mut out = Vec::with_capacity(cands.len());
    for &id in cands.ids() {
        let row = space
            .embeddings
            .row(id)
            .ok_or(Error::MissingEmbedding(id))?;
        let slot = space.vocab.slot(id).ok_or(Error::UnknownEntity(id))?;
        let projected = p.projection.apply_f32(row)?;
        if projected.len() != h.dim() {
            return Err(Error::Dimension {
                context: "projected entity embedding",
                expected: h.dim(),
                actual: projected.len(),
            });
        }
        let (best, _) = max_dot(h.states(), &projected);
        let w = p.lambda_ent * saturate(best);
        if w > 0.0 {
            out.push((offset + slot, w));
        }
    }
    out.sort_unstable_by_key(|&(t, _)| t);
    Ok(TermWeights(out))
}

fn join(
    words: TermWeights,
    entities: TermWeights,
    layout: VocabularyLayout,
) -> Result<SparseVector> {
    let mut all = words.0;
    all.extend(entities.0);
    TermWeights(all).to_sparse(layout)
}

/// Query side: input-token word weights plus candidate entities.
/// With `space == None` the output is word-only.
pub fn encode_query(
    h: &HiddenStates,
    cands: &CandidateSet,
    space: Option<EntitySpace<'_>>,
    p: &EncoderParams,
) -> Result<SparseVector> {
    let layout = layout_for(p, space)?;
    let words = mlp_query_weights(h, p)?;
    let entities = match space {
        Some(s) => entity_weights(h, cands, s, p)?,
        None => TermWeights::default(),
    };
    join(words, entities, layout)
}

/// Document side: expanded word weights plus candidate entities.
pub fn encode_document(
    h: &HiddenStates,
    cands: &CandidateSet,
    space: Option<EntitySpace<'_>>,
    p: &EncoderParams,
) -> Result<SparseVector> {
    let layout = layout_for(p, space)?;
    let words = mlm_word_weights(h, p)?;
    let entities = match space {
        Some(s) => entity_weights(h, cands, s, p)?,
        None => TermWeights::default(),
    };
    join(words, entities, layout)
}

/// Scores a query/document pair using compact per-batch entity slots instead
/// of the full `|V| + |E|` space. Returns exactly `sparse::dot(q, d)`.
pub fn score_pair_subset(
    q: &SparseVector,
    d: &SparseVector,
    vocab: &EntityVocabulary,
    batch_candidates: &[EntityId],
) -> Result<f64> {
    if q.layout() != d.layout() {
        return Err(Error::LayoutMismatch(format!(
            "{:?} vs {:?}",
            q.layout(),
            d.layout()
        )));
    }
    let offset = q.layout().entity_offset();
    let position: HashMap<TermId, usize> = batch_candidates
        .iter()
        .enumerate()
        .filter_map(|(i, &id)| vocab.slot(id).map(|s| (offset + s, i)))
        .collect();

    let mut doc_slots = vec![0f32; batch_candidates.len()];
    for &(t, w) in d.entity_entries() {
        let i = *position.get(&t).ok_or(Error::NotInBatch(t))?;
        doc_slots[i] = w;
    }
    let words = merge_dot(q.word_entries(), d.word_entries());
    // q's entity entries are in ascending term order, matching sparse::dot
    let mut entities = 0.0f64;
    for &(t, w) in q.entity_entries() {
        let i = *position.get(&t).ok_or(Error::NotInBatch(t))?;
        let dw = doc_slots[i];
        if dw > 0.0 {
            entities += w as f64 * dw as f64;
        }
    }
    Ok(words + entities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::dot;
    use proptest::prelude::*;
    use std::f64::consts::E;

    const LN3: f64 = 1.098_612_288_668_109_8;

    fn hs(rows: &[Vec<f64>], tokens: &[u32]) -> HiddenStates {
        HiddenStates::new("x", Matrix::from_rows(rows).unwrap(), tokens.to_vec()).unwrap()
    }

    /// One-dimensional params: word i has embedding `word_emb[i]`.
    fn params_1d(word_emb: &[f64], w: f64, b: f64, lambda: f64) -> EncoderParams {
        let rows: Vec<_> = word_emb.iter().map(|&x| vec![x]).collect();
        EncoderParams::new(
            Matrix::from_rows(&rows).unwrap(),
            vec![w],
            b,
            lambda,
            Projection::identity(1),
        )
        .unwrap()
    }

    fn space_1d(rows: &[(u64, f32)]) -> (EmbeddingTable, EntityVocabulary) {
        let mut t = EmbeddingTable::new(1).unwrap();
        for &(id, x) in rows {
            t.insert(id, &[x]).unwrap();
        }
        let v = EntityVocabulary::new(t.ids().iter().copied());
        (t, v)
    }

    #[test]
    fn saturate_reference_values() {
        assert!((saturate(E - 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(saturate(-3.0), 0.0);
        assert_eq!(saturate(0.0), 0.0);
        assert!((saturate(2.0) - LN3).abs() < 1e-15);
    }

    #[test]
    fn mlm_gate_closed_drops_word() {
        // word 0 dots to -1 and 0 at the two positions; word 1 fires
        let p = params_1d(&[1.0, -1.0], 0.0, 0.0, 1.0);
        let h = hs(&[vec![-1.0], vec![0.0]], &[0, 0]);
        let w = mlm_word_weights(&h, &p).unwrap();
        assert_eq!(w.get(0), None);
        assert!((w.get(1).unwrap() - 1.0f64.ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn mlm_max_at_e_minus_one() {
        let p = params_1d(&[1.0], 0.0, 0.0, 1.0);
        let h = hs(&[vec![0.3], vec![E - 1.0], vec![1.0]], &[0, 0, 0]);
        let w = mlm_word_weights(&h, &p).unwrap();
        assert!((w.get(0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mlm_three_positions_gives_ln3() {
        let p = params_1d(&[1.0], 0.0, 0.0, 1.0);
        let h = hs(&[vec![-1.0], vec![0.5], vec![2.0]], &[0, 0, 0]);
        let w = mlm_word_weights(&h, &p).unwrap();
        assert!((w.get(0).unwrap() - LN3).abs() < 1e-9);
    }

    #[test]
    fn mlp_gate_boundary_omits_term() {
        let p = params_1d(&[1.0, 1.0], 1.0, 0.0, 1.0);
        let h = hs(&[vec![0.0]], &[1]);
        assert!(mlp_query_weights(&h, &p).unwrap().is_empty());
    }

    #[test]
    fn mlp_repeated_token_adds() {
        let p = params_1d(&[1.0; 4], 1.0, 0.0, 1.0);
        let h = hs(&[vec![E - 1.0], vec![E - 1.0]], &[3, 3]);
        let w = mlp_query_weights(&h, &p).unwrap();
        assert!((w.get(3).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn mlp_sums_ln_e_and_ln_e_squared() {
        let p = params_1d(&[1.0; 8], 1.0, 0.0, 1.0);
        let h = hs(&[vec![E - 1.0], vec![-2.0], vec![E * E - 1.0]], &[5, 7, 5]);
        let w = mlp_query_weights(&h, &p).unwrap();
        assert_eq!(w.len(), 1);
        assert!((w.get(5).unwrap() - 3.0).abs() < 1e-9);
        assert_eq!(w.get(7), None);
    }

    #[test]
    fn mlp_rejects_out_of_vocab_token() {
        let p = params_1d(&[1.0; 2], 1.0, 0.0, 1.0);
        let h = hs(&[vec![1.0]], &[2]);
        assert!(matches!(
            mlp_query_weights(&h, &p),
            Err(Error::TermOutOfRange { .. })
        ));
    }

    #[test]
    fn entity_examples() {
        let (emb, vocab) = space_1d(&[(40, 1.0), (41, 1.0)]);
        let space = EntitySpace {
            embeddings: &emb,
            vocab: &vocab,
        };
        let p = params_1d(&[1.0; 3], 0.0, 0.0, 0.05);

        let h = hs(&[vec![1.0]], &[0]);
        assert!(entity_weights(&h, &CandidateSet::default(), space, &p)
            .unwrap()
            .is_empty());

        let h = hs(&[vec![0.2], vec![E - 1.0]], &[0, 1]);
        let w = entity_weights(&h, &CandidateSet::new(vec![41]).unwrap(), space, &p).unwrap();
        assert_eq!(w.0.len(), 1);
        assert_eq!(w.0[0].0, 3 + 1);
        assert!((w.0[0].1 - 0.05).abs() < 1e-9);

        let h = hs(&[vec![-1.0], vec![0.5], vec![2.0]], &[0, 1, 2]);
        let w = entity_weights(&h, &CandidateSet::new(vec![40]).unwrap(), space, &p).unwrap();
        assert_eq!(w.0[0].0, 3);
        assert!((w.0[0].1 - 0.05 * LN3).abs() < 1e-9);
        assert!((w.0[0].1 - 0.054931).abs() < 1e-6);
    }

    #[test]
    fn entity_missing_row_is_error() {
        let (emb, vocab) = space_1d(&[(1, 1.0)]);
        let space = EntitySpace {
            embeddings: &emb,
            vocab: &vocab,
        };
        let p = params_1d(&[1.0], 0.0, 0.0, 1.0);
        let h = hs(&[vec![1.0]], &[0]);
        let err = entity_weights(&h, &CandidateSet::new(vec![9]).unwrap(), space, &p).unwrap_err();
        assert!(matches!(err, Error::MissingEmbedding(9)));
    }

    #[test]
    fn projection_width_must_match_hidden_width() {
        let err = EncoderParams::new(
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            vec![0.0, 0.0],
            0.0,
            1.0,
            Projection::identity(3),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn candidate_set_rejects_duplicates() {
        assert!(matches!(
            CandidateSet::new(vec![1, 2, 1]),
            Err(Error::DuplicateCandidate(1))
        ));
        assert_eq!(CandidateSet::dedup_from([3, 1, 3, 2, 1]).ids(), &[3, 1, 2]);
    }

    #[test]
    fn query_without_candidates_is_word_only() {
        let (emb, vocab) = space_1d(&[(1, 1.0)]);
        let space = EntitySpace {
            embeddings: &emb,
            vocab: &vocab,
        };
        let p = params_1d(&[1.0; 4], 1.0, 0.5, 1.0);
        let h = hs(&[vec![1.0], vec![2.0]], &[0, 3]);
        let q = encode_query(&h, &CandidateSet::default(), Some(space), &p).unwrap();
        let words = mlp_query_weights(&h, &p)
            .unwrap()
            .to_sparse(q.layout())
            .unwrap();
        assert_eq!(q, words);
    }

    #[test]
    fn document_with_only_an_entity() {
        let (emb, vocab) = space_1d(&[(1, 1.0), (2, -1.0)]);
        let space = EntitySpace {
            embeddings: &emb,
            vocab: &vocab,
        };
        let p = params_1d(&[-1.0, -2.0], 0.0, 0.0, 0.05);
        let h = hs(&[vec![1.0]], &[0]);
        let d =
            encode_document(&h, &CandidateSet::new(vec![1, 2]).unwrap(), Some(space), &p).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.entries()[0].0, 2);
    }

    #[test]
    fn score_pair_subset_examples() {
        let vocab = EntityVocabulary::new([10, 20, 30]);
        let layout = VocabularyLayout::new(5, 3).unwrap();
        let q = SparseVector::from_entries(layout, [(1, 2.0), (5 + 1, 0.05)]).unwrap();
        let d = SparseVector::from_entries(layout, [(1, 2.0), (5 + 1, 2.0), (5 + 2, 1.0)]).unwrap();
        let s = score_pair_subset(&q, &d, &vocab, &[30, 20]).unwrap();
        assert!((s - 4.1).abs() < 1e-6);
        assert_eq!(s, dot(&q, &d).unwrap());

        let qw = SparseVector::from_entries(layout, [(1, 2.0)]).unwrap();
        let dw = SparseVector::from_entries(layout, [(1, 0.5), (3, 1.0)]).unwrap();
        assert_eq!(
            score_pair_subset(&qw, &dw, &vocab, &[]).unwrap(),
            dot(&qw, &dw).unwrap()
        );

        let q2 = SparseVector::from_entries(layout, [(5, 1.0)]).unwrap();
        let d2 = SparseVector::from_entries(layout, [(7, 1.0)]).unwrap();
        assert_eq!(score_pair_subset(&q2, &d2, &vocab, &[10, 30]).unwrap(), 0.0);

        assert!(matches!(
            score_pair_subset(&q2, &d2, &vocab, &[10]),
            Err(Error::NotInBatch(7))
        ));
    }

    #[test]
    fn hidden_states_round_trip() {
        let a = HiddenStates::new(
            "q1",
            Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap(),
            vec![3, 9],
        )
        .unwrap();
        let b = HiddenStates::new(
            "döc",
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vec![0],
        )
        .unwrap();
        let bytes = hidden_states_to_bytes(&[a.clone(), b.clone()]);
        assert_eq!(hidden_states_from_bytes(&bytes).unwrap(), vec![a, b]);
        assert!(hidden_states_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let p = EncoderParams::new(
            Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap(),
            vec![1.0, -0.5],
            0.25,
            0.05f32 as f64,
            Projection::identity(2),
        )
        .unwrap();
        assert_eq!(
            EncoderParams::from_bytes(&p.to_bytes(), Projection::identity(2)).unwrap(),
            p
        );
    }

    /// Random instance: vocab 12, 6 entities, dim 3.
    fn random_instance(
        seed: u64,
    ) -> (
        EncoderParams,
        EmbeddingTable,
        EntityVocabulary,
        HiddenStates,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let words: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let proj = Projection::affine(
            2,
            d,
            (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let p = EncoderParams::new(
            Matrix::from_rows(&words).unwrap(),
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            rng.gen_range(-0.2..0.5),
            rng.gen_range(0.01..2.0),
            proj,
        )
        .unwrap();
        let mut emb = EmbeddingTable::new(2).unwrap();
        for id in 0..6u64 {
            emb.insert(
                id * 10,
                &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            )
            .unwrap();
        }
        let vocab = EntityVocabulary::new(emb.ids().iter().copied());
        let len = rng.gen_range(1..7);
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let toks = (0..len).map(|_| rng.gen_range(0..12)).collect();
        (
            p,
            emb,
            vocab,
            HiddenStates::new("r", Matrix::from_rows(&rows).unwrap(), toks).unwrap(),
        )
    }

    #[test]
    fn encoders_are_union_of_components() {
        for seed in 0..20 {
            let (p, emb, vocab, h) = random_instance(seed);
            let space = EntitySpace {
                embeddings: &emb,
                vocab: &vocab,
            };
            let cands = CandidateSet::new(vec![50, 0, 30]).unwrap();
            let layout = layout_for(&p, Some(space)).unwrap();
            let doc = encode_document(&h, &cands, Some(space), &p).unwrap();
            let q = encode_query(&h, &cands, Some(space), &p).unwrap();
            let ents = entity_weights(&h, &cands, space, &p)
                .unwrap()
                .to_sparse(layout)
                .unwrap();
            let mlm = mlm_word_weights(&h, &p).unwrap().to_sparse(layout).unwrap();
            let mlp = mlp_query_weights(&h, &p)
                .unwrap()
                .to_sparse(layout)
                .unwrap();
            for (t, w) in doc.entries() {
                let expected = if layout.is_entity(*t) {
                    ents.get(*t)
                } else {
                    mlm.get(*t)
                };
                assert_eq!(Some(*w), expected);
            }
            assert_eq!(doc.len(), mlm.len() + ents.len());
            for (t, w) in q.entries() {
                let expected = if layout.is_entity(*t) {
                    ents.get(*t)
                } else {
                    mlp.get(*t)
                };
                assert_eq!(Some(*w), expected);
            }
            assert_eq!(q.len(), mlp.len() + ents.len());
        }
    }

    proptest! {
        #[test]
        fn lambda_scales_entity_weights(seed in 0u64..500, c in 0.1f64..10.0) {
            let (p, emb, vocab, h) = random_instance(seed);
            let space = EntitySpace { embeddings: &emb, vocab: &vocab };
            let cands = CandidateSet::new(vec![0, 10, 20, 30, 40, 50]).unwrap();
            let base = entity_weights(&h, &cands, space, &p).unwrap();
            let mut scaled_p = p.clone();
            scaled_p.lambda_ent *= c;
            let scaled = entity_weights(&h, &cands, space, &scaled_p).unwrap();
            prop_assert_eq!(base.len(), scaled.len());
            for ((t0, w0), (t1, w1)) in base.0.iter().zip(&scaled.0) {
                prop_assert_eq!(t0, t1);
                let want = w0 * c;
                prop_assert!((w1 - want).abs() <= 1e-12 * want.abs().max(1e-300));
            }
        }

        #[test]
        fn candidate_locality(seed in 0u64..500) {
            let (p, emb, vocab, h) = random_instance(seed);
            let space = EntitySpace { embeddings: &emb, vocab: &vocab };
            let small = entity_weights(&h, &CandidateSet::new(vec![10, 40]).unwrap(), space, &p).unwrap();
            let big = entity_weights(&h, &CandidateSet::new(vec![10, 40, 0, 20]).unwrap(), space, &p).unwrap();
            let allowed: Vec<u32> = [10u64, 40].iter().map(|&id| 12 + vocab.slot(id).unwrap()).collect();
            for (t, w) in &small.0 {
                prop_assert!(allowed.contains(t));
                prop_assert_eq!(big.get(*t), Some(*w));
            }
        }

        #[test]
        fn permutation_invariance(seed in 0u64..500, shuffle_seed in any::<u64>()) {
            use rand::SeedableRng;
            let (p, emb, vocab, h) = random_instance(seed);
            let space = EntitySpace { embeddings: &emb, vocab: &vocab };
            let mut order: Vec<usize> = (0..h.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
            let hp = h.permuted(&order).unwrap();
            let cands = CandidateSet::new(vec![0, 10, 20, 30, 40, 50]).unwrap();
            prop_assert_eq!(mlm_word_weights(&h, &p).unwrap(), mlm_word_weights(&hp, &p).unwrap());
            prop_assert_eq!(entity_weights(&h, &cands, space, &p).unwrap(), entity_weights(&hp, &cands, space, &p).unwrap());
            let a = mlp_query_weights(&h, &p).unwrap();
            let b = mlp_query_weights(&hp, &p).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for ((ta, wa), (tb, wb)) in a.0.iter().zip(&b.0) {
                prop_assert_eq!(ta, tb);
                prop_assert!((wa - wb).abs() <= 1e-12 * wa.abs());
            }
        }

        #[test]
        fn weights_positive(seed in 0u64..500) {
            let (p, emb, vocab, h) = random_instance(seed);
            let space = EntitySpace { embeddings: &emb, vocab: &vocab };
            let cands = CandidateSet::new(vec![0, 10, 20, 30, 40, 50]).unwrap();
            for w in [mlm_word_weights(&h, &p).unwrap(), mlp_query_weights(&h, &p).unwrap(), entity_weights(&h, &cands, space, &p).unwrap()] {
                prop_assert!(w.0.iter().all(|&(_, x)| x > 0.0));
            }
        }

        #[test]
        fn subset_scoring_equals_dot(seed in 0u64..500, qseed in 500u64..1000) {
            let (p, emb, vocab, h) = random_instance(seed);
            let (_, _, _, hq) = random_instance(qseed);
            let space = EntitySpace { embeddings: &emb, vocab: &vocab };
            let qc = CandidateSet::new(vec![0, 20, 50]).unwrap();
            let dc = CandidateSet::new(vec![50, 10, 20]).unwrap();
            let q = encode_query(&hq, &qc, Some(space), &p).unwrap();
            let d = encode_document(&h, &dc, Some(space), &p).unwrap();
            let batch = [20, 50, 0, 10];
            prop_assert_eq!(score_pair_subset(&q, &d, &vocab, &batch).unwrap(), dot(&q, &d).unwrap());
        }
    }
}
