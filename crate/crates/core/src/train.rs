//! Desk-scale distillation trainer over a context-free toy encoder.
//!
//! The hidden state of token `t` is row `t` of the token table, which also
//! serves as the document-side word embedding matrix. Query words use the
//! MLP head, documents the MLM head, and both sides score their entity
//! candidates through a trainable projection of frozen entity embeddings,
//! each side with its own `λ`. The loss is the two-way softmax KL from
//! teacher to student scores plus an L1 penalty on word weights only.
//! Gradients are derived by hand; `max` routes to the lowest maximizing
//! position and the ReLU subgradient at 0 is 0.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{dense_dot, max_dot, saturate, saturate_grad, Matrix};
use crate::kb::{EmbeddingTable, EntityId, Projection};

/// Floor applied to a trainable `λ` after each update so it stays positive.
pub const LAMBDA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub l1_weight: f64,
    pub lambda_init: f64,
    pub lambda_trainable: bool,
    pub seed: u64,
    pub batch_size: usize,
    /// When false the token table (hidden states and word embeddings) is frozen.
    pub train_token_table: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-7,
            steps: 100_000,
            l1_weight: 1e-4,
            lambda_init: 0.05,
            lambda_trainable: true,
            seed: 0,
            batch_size: 16,
            train_token_table: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.l1_weight.is_finite() && self.l1_weight >= 0.0) {
            return bad("l1 weight must be finite and non-negative");
        }
        if !(self.lambda_init.is_finite() && self.lambda_init > 0.0) {
            return bad("lambda init must be finite and positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTriple {
    pub query_id: String,
    pub pos_doc_id: String,
    pub neg_doc_id: String,
    pub teacher_pos: f64,
    pub teacher_neg: f64,
}

/// Reads `query_id  pos_doc_id  neg_doc_id  teacher_pos  teacher_neg` lines.
pub fn read_triples<R: BufRead>(reader: R, source: &str) -> Result<Vec<TeacherTriple>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::malformed(source, n + 1, m);
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad("teacher score must be a finite number"))
        };
        if f[1] == f[2] {
            return Err(bad("positive and negative document must differ"));
        }
        out.push(TeacherTriple {
            query_id: f[0].into(),
            pos_doc_id: f[1].into(),
            neg_doc_id: f[2].into(),
            teacher_pos: num(f[3])?,
            teacher_neg: num(f[4])?,
        });
    }
    Ok(out)
}

pub fn load_triples(path: impl AsRef<Path>) -> Result<Vec<TeacherTriple>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_triples(BufReader::new(f), &path.display().to_string())
}

pub fn write_triples<W: Write>(mut w: W, triples: &[TeacherTriple]) -> Result<()> {
    for t in triples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            t.query_id, t.pos_doc_id, t.neg_doc_id, t.teacher_pos, t.teacher_neg
        )?;
    }
    Ok(())
}

/// A toy query or document: token ids plus linked entity candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyText {
    pub tokens: Vec<u32>,
    pub candidates: Vec<EntityId>,
}

#[derive(Debug, Clone, Default)]
pub struct ToyCorpus {
    pub queries: BTreeMap<String, ToyText>,
    pub docs: BTreeMap<String, ToyText>,
    pub triples: Vec<TeacherTriple>,
}

impl ToyCorpus {
    fn query(&self, id: &str) -> Result<&ToyText> {
        self.queries
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown query {id:?}")))
    }

    fn doc(&self, id: &str) -> Result<&ToyText> {
        self.docs
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown document {id:?}")))
    }
}

/// Trainable state of the toy encoder plus the frozen entity table.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub token_table: Matrix,
    pub mlp_weight: Vec<f64>,
    pub mlp_bias: f64,
    /// `d_entity × d`, row-major.
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub lambda_query: f64,
    pub lambda_doc: f64,
    entities: EmbeddingTable,
}

impl ToyEncoder {
    pub fn new(
        token_table: Matrix,
        mlp_weight: Vec<f64>,
        mlp_bias: f64,
        projection: &Projection,
        lambda: f64,
        entities: EmbeddingTable,
    ) -> Result<Self> {
        let d = token_table.cols();
        if mlp_weight.len() != d {
            return Err(Error::Dimension {
                context: "toy mlp weight",
                expected: d,
                actual: mlp_weight.len(),
            });
        }
        if projection.d_out() != d || projection.d_in() != entities.dim() {
            return Err(Error::Dimension {
                context: "toy projection",
                expected: entities.dim() * d,
                actual: projection.d_in() * projection.d_out(),
            });
        }
        let (proj_weight, proj_bias) = if projection.is_identity() {
            let mut w = vec![0.0; d * d];
            for i in 0..d {
                w[i * d + i] = 1.0;
            }
            (w, vec![0.0; d])
        } else {
            (projection.weight.clone(), projection.bias.clone())
        };
        Ok(Self {
            token_table,
            mlp_weight,
            mlp_bias,
            proj_weight,
            proj_bias,
            lambda_query: lambda,
            lambda_doc: lambda,
            entities,
        })
    }

    /// Random small-scale initialization, used by gradient probes.
    pub fn random(
        vocab: usize,
        dim: usize,
        entities: EmbeddingTable,
        lambda: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let de = entities.dim();
        let table: Vec<f64> = (0..vocab * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj = Projection::affine(
            de,
            dim,
            (0..de * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..dim).map(|_| rng.gen_range(-0.2..0.6)).collect(),
        )?;
        Self::new(
            Matrix::from_vec(vocab, dim, table)?,
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            rng.gen_range(0.0..0.5),
            &proj,
            lambda,
            entities,
        )
    }

    pub fn dim(&self) -> usize {
        self.token_table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.rows()
    }

    pub fn entities(&self) -> &EmbeddingTable {
        &self.entities
    }

    pub fn projection(&self) -> Projection {
        Projection::affine(
            self.entities.dim(),
            self.dim(),
            self.proj_weight.clone(),
            self.proj_bias.clone(),
        )
        .expect("toy projection keeps its shape")
    }

    fn hidden(&self, tokens: &[u32]) -> Result<Matrix> {
        let d = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.vocab_size() {
                return Err(Error::TermOutOfRange {
                    term: t,
                    word_vocab_size: self.vocab_size() as u32,
                    entity_count: 0,
                });
            }
            data.extend_from_slice(self.token_table.row(t as usize));
        }
        Matrix::from_vec(tokens.len(), d, data)
    }

    fn project(&self, id: EntityId) -> Result<(Vec<f64>, Vec<f64>)> {
        let row = self.entities.row(id).ok_or(Error::MissingEmbedding(id))?;
        let e: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        let d = self.dim();
        let mut p = self.proj_bias.clone();
        for (a, &x) in e.iter().enumerate() {
            for (b, o) in p.iter_mut().enumerate() {
                *o += x * self.proj_weight[a * d + b];
            }
        }
        Ok((e, p))
    }

    /// Max pre-activation of every candidate of `text`, before the gate.
    pub fn entity_preactivations(&self, text: &ToyText) -> Result<Vec<f64>> {
        if text.tokens.is_empty() {
            return Ok(Vec::new());
        }
        let h = self.hidden(&text.tokens)?;
        text.candidates
            .iter()
            .map(|&c| Ok(max_dot(&h, &self.project(c)?.1).0))
            .collect()
    }
}

/// `KL(softmax(teacher) ‖ softmax(student))` over a (positive, negative) pair.
pub fn kl_loss(student_pos: f64, student_neg: f64, teacher_pos: f64, teacher_neg: f64) -> f64 {
    let (lt_pos, lt_neg) = log_softmax2(teacher_pos, teacher_neg);
    let (ls_pos, ls_neg) = log_softmax2(student_pos, student_neg);
    let kl = lt_pos.exp() * (lt_pos - ls_pos) + lt_neg.exp() * (lt_neg - ls_neg);
    kl.max(0.0)
}

fn log_softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    (a - lse, b - lse)
}

struct EntityForward {
    id: EntityId,
    e: Vec<f64>,
    p: Vec<f64>,
    pre: f64,
    argmax: usize,
    weight: f64,
}

struct QueryForward {
    h: Matrix,
    tokens: Vec<u32>,
    z: Vec<f64>,
    words: HashMap<u32, f64>,
    entities: Vec<EntityForward>,
}

struct DocForward {
    h: Matrix,
    tokens: Vec<u32>,
    pre: Vec<f64>,
    argmax: Vec<usize>,
    words: Vec<f64>,
    entities: Vec<EntityForward>,
}

impl QueryForward {
    fn word_l1(&self) -> f64 {
        self.words.values().sum()
    }
}

impl DocForward {
    fn word_l1(&self) -> f64 {
        self.words.iter().sum()
    }
}

fn entity_forward(
    m: &ToyEncoder,
    h: &Matrix,
    cands: &[EntityId],
    lambda: f64,
) -> Result<Vec<EntityForward>> {
    cands
        .iter()
        .map(|&id| {
            let (e, p) = m.project(id)?;
            let (pre, argmax) = max_dot(h, &p);
            Ok(EntityForward {
                id,
                e,
                p,
                pre,
                argmax,
                weight: lambda * saturate(pre),
            })
        })
        .collect()
}

fn query_forward(m: &ToyEncoder, text: &ToyText) -> Result<QueryForward> {
    let h = m.hidden(&text.tokens)?;
    let mut z = Vec::with_capacity(text.tokens.len());
    let mut words: HashMap<u32, f64> = HashMap::new();
    for (j, &t) in text.tokens.iter().enumerate() {
        let zj = dense_dot(&m.mlp_weight, h.row(j)) + m.mlp_bias;
        z.push(zj);
        *words.entry(t).or_insert(0.0) += saturate(zj);
    }
    let entities = entity_forward(m, &h, &text.candidates, m.lambda_query)?;
    Ok(QueryForward {
        h,
        tokens: text.tokens.clone(),
        z,
        words,
        entities,
    })
}

fn doc_forward(m: &ToyEncoder, text: &ToyText) -> Result<DocForward> {
    let h = m.hidden(&text.tokens)?;
    let v = m.vocab_size();
    let mut pre = Vec::with_capacity(v);
    let mut argmax = Vec::with_capacity(v);
    let mut words = Vec::with_capacity(v);
    for i in 0..v {
        let (best, j) = max_dot(&h, m.token_table.row(i));
        pre.push(best);
        argmax.push(j);
        words.push(saturate(best));
    }
    let entities = entity_forward(m, &h, &text.candidates, m.lambda_doc)?;
    Ok(DocForward {
        h,
        tokens: text.tokens.clone(),
        pre,
        argmax,
        words,
        entities,
    })
}

fn score(q: &QueryForward, d: &DocForward) -> f64 {
    let mut s = 0.0;
    let mut terms: Vec<_> = q.words.iter().collect();
    terms.sort_unstable_by_key(|(t, _)| **t);
    for (&t, &w) in terms {
        s += w * d.words[t as usize];
    }
    for qe in &q.entities {
        if let Some(de) = d.entities.iter().find(|de| de.id == qe.id) {
            s += qe.weight * de.weight;
        }
    }
    s
}

/// Gradient buffers, one per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub token_table: Matrix,
    pub mlp_weight: Vec<f64>,
    pub mlp_bias: f64,
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub lambda_query: f64,
    pub lambda_doc: f64,
    /// Token-table gradient contributed through entity pre-activations.
    pub token_table_via_entities: Matrix,
}

impl Gradients {
    fn zeros(m: &ToyEncoder) -> Self {
        Self {
            token_table: Matrix::zeros(m.vocab_size(), m.dim()),
            mlp_weight: vec![0.0; m.dim()],
            mlp_bias: 0.0,
            proj_weight: vec![0.0; m.proj_weight.len()],
            proj_bias: vec![0.0; m.dim()],
            lambda_query: 0.0,
            lambda_doc: 0.0,
            token_table_via_entities: Matrix::zeros(m.vocab_size(), m.dim()),
        }
    }

    /// Euclidean norm of every gradient that flows through the entity path.
    pub fn entity_path_norm(&self) -> f64 {
        let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
        (sq(&self.proj_weight)
            + sq(&self.proj_bias)
            + self.lambda_query * self.lambda_query
            + self.lambda_doc * self.lambda_doc
            + sq(self.token_table_via_entities.data()))
        .sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        let groups: [(&str, &[f64]); 5] = [
            ("token_table", self.token_table.data()),
            ("mlp_weight", &self.mlp_weight),
            ("projection weight", &self.proj_weight),
            ("projection bias", &self.proj_bias),
            (
                "mlp_bias/lambda",
                &[self.mlp_bias, self.lambda_query, self.lambda_doc],
            ),
        ];
        for (name, xs) in groups {
            if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{name} (value {x})")));
            }
        }
        Ok(())
    }
}

/// Backpropagates upstream entity-weight gradients of one text; returns the
/// gradient of its `λ`.
fn backprop_entities(
    ents: &[EntityForward],
    upstream: &HashMap<EntityId, f64>,
    lambda: f64,
    h_tokens: &[u32],
    h: &Matrix,
    grads: &mut Gradients,
) -> f64 {
    let d = h.cols();
    let mut lambda_grad = 0.0;
    for ef in ents {
        let Some(&g) = upstream.get(&ef.id) else {
            continue;
        };
        if g == 0.0 {
            continue;
        }
        lambda_grad += g * saturate(ef.pre);
        let dpre = g * lambda * saturate_grad(ef.pre);
        if dpre == 0.0 {
            continue;
        }
        let hj = h.row(ef.argmax);
        let tok = h_tokens[ef.argmax] as usize;
        for (b, &hb) in hj.iter().enumerate() {
            let dp = dpre * hb;
            grads.proj_bias[b] += dp;
            for (a, &ea) in ef.e.iter().enumerate() {
                grads.proj_weight[a * d + b] += ea * dp;
            }
            let dh = dpre * ef.p[b];
            grads.token_table.row_mut(tok)[b] += dh;
            grads.token_table_via_entities.row_mut(tok)[b] += dh;
        }
    }
    lambda_grad
}

/// Loss value and analytic gradients for one batch.
pub fn loss_and_gradients(
    model: &ToyEncoder,
    corpus: &ToyCorpus,
    batch: &[TeacherTriple],
    l1_weight: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be non-empty".into()));
    }
    let mut queries: BTreeMap<&str, QueryForward> = BTreeMap::new();
    let mut docs: BTreeMap<&str, DocForward> = BTreeMap::new();
    for t in batch {
        if !queries.contains_key(t.query_id.as_str()) {
            queries.insert(
                &t.query_id,
                query_forward(model, corpus.query(&t.query_id)?)?,
            );
        }
        for id in [&t.pos_doc_id, &t.neg_doc_id] {
            if !docs.contains_key(id.as_str()) {
                docs.insert(id, doc_forward(model, corpus.doc(id)?)?);
            }
        }
    }

    let b = batch.len() as f64;
    let l1_coef = l1_weight / (3.0 * b);
    let mut kl_sum = 0.0;
    let mut l1_sum = 0.0;

    // upstream gradients on representation weights, keyed by text id
    let mut q_word: BTreeMap<&str, HashMap<u32, f64>> = BTreeMap::new();
    let mut q_ent: BTreeMap<&str, HashMap<EntityId, f64>> = BTreeMap::new();
    let mut d_word: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut d_ent: BTreeMap<&str, HashMap<EntityId, f64>> = BTreeMap::new();

    for t in batch {
        let q = &queries[t.query_id.as_str()];
        let pos = &docs[t.pos_doc_id.as_str()];
        let neg = &docs[t.neg_doc_id.as_str()];
        let (sp, sn) = (score(q, pos), score(q, neg));
        kl_sum += kl_loss(sp, sn, t.teacher_pos, t.teacher_neg);
        l1_sum += q.word_l1() + pos.word_l1() + neg.word_l1();

        let (ls_pos, ls_neg) = log_softmax2(sp, sn);
        let (lt_pos, lt_neg) = log_softmax2(t.teacher_pos, t.teacher_neg);
        let g_pos = (ls_pos.exp() - lt_pos.exp()) / b;
        let g_neg = (ls_neg.exp() - lt_neg.exp()) / b;

        let qw = q_word.entry(&t.query_id).or_default();
        for &tok in q.words.keys() {
            *qw.entry(tok).or_insert(0.0) +=
                g_pos * pos.words[tok as usize] + g_neg * neg.words[tok as usize] + l1_coef;
        }
        for (doc_id, doc, g) in [(&t.pos_doc_id, pos, g_pos), (&t.neg_doc_id, neg, g_neg)] {
            let dw = d_word
                .entry(doc_id)
                .or_insert_with(|| vec![0.0; model.vocab_size()]);
            for (i, slot) in dw.iter_mut().enumerate() {
                *slot += l1_coef;
                if let Some(&w) = q.words.get(&(i as u32)) {
                    *slot += g * w;
                }
            }
            let qe = q_ent.entry(&t.query_id).or_default();
            let de = d_ent.entry(doc_id).or_default();
            for qf in &q.entities {
                if let Some(df) = doc.entities.iter().find(|df| df.id == qf.id) {
                    *qe.entry(qf.id).or_insert(0.0) += g * df.weight;
                    *de.entry(qf.id).or_insert(0.0) += g * qf.weight;
                }
            }
        }
    }

    let d = model.dim();
    let mut grads = Gradients::zeros(model);
    for (id, up) in &q_word {
        let q = &queries[id];
        for (j, &tok) in q.tokens.iter().enumerate() {
            let g = up.get(&tok).copied().unwrap_or(0.0);
            let dz = g * saturate_grad(q.z[j]);
            if dz == 0.0 {
                continue;
            }
            let hj = q.h.row(j);
            grads.mlp_bias += dz;
            for (k, &hk) in hj.iter().enumerate() {
                grads.mlp_weight[k] += dz * hk;
                grads.token_table.row_mut(tok as usize)[k] += dz * model.mlp_weight[k];
            }
        }
    }
    for (id, up) in &q_ent {
        let q = &queries[id];
        grads.lambda_query += backprop_entities(
            &q.entities,
            up,
            model.lambda_query,
            &q.tokens,
            &q.h,
            &mut grads,
        );
    }
    for (id, up) in &d_word {
        let doc = &docs[id];
        for (i, &g) in up.iter().enumerate() {
            let dm = g * saturate_grad(doc.pre[i]);
            if dm == 0.0 {
                continue;
            }
            let j = doc.argmax[i];
            let tok = doc.tokens[j] as usize;
            for k in 0..d {
                let hj_k = doc.h.row(j)[k];
                let ei_k = model.token_table.row(i)[k];
                grads.token_table.row_mut(i)[k] += dm * hj_k;
                grads.token_table.row_mut(tok)[k] += dm * ei_k;
            }
        }
    }
    for (id, up) in &d_ent {
        let doc = &docs[id];
        grads.lambda_doc += backprop_entities(
            &doc.entities,
            up,
            model.lambda_doc,
            &doc.tokens,
            &doc.h,
            &mut grads,
        );
    }

    let loss = kl_sum / b + l1_weight * l1_sum / (3.0 * b);
    Ok((loss, grads))
}

/// Mean KL over the batch plus `l1_weight` times the mean word-range L1 of
/// the query and document representations.
pub fn total_loss(
    model: &ToyEncoder,
    corpus: &ToyCorpus,
    batch: &[TeacherTriple],
    l1_weight: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be non-empty".into()));
    }
    let mut kl = 0.0;
    let mut l1 = 0.0;
    for t in batch {
        let q = query_forward(model, corpus.query(&t.query_id)?)?;
        let pos = doc_forward(model, corpus.doc(&t.pos_doc_id)?)?;
        let neg = doc_forward(model, corpus.doc(&t.neg_doc_id)?)?;
        kl += kl_loss(
            score(&q, &pos),
            score(&q, &neg),
            t.teacher_pos,
            t.teacher_neg,
        );
        l1 += q.word_l1() + pos.word_l1() + neg.word_l1();
    }
    let b = batch.len() as f64;
    Ok(kl / b + l1_weight * l1 / (3.0 * b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub entity_grad_norm: f64,
}

/// One plain gradient-descent update. The entity embedding table is never
/// written.
pub fn step(
    model: &mut ToyEncoder,
    corpus: &ToyCorpus,
    batch: &[TeacherTriple],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let (loss, g) = loss_and_gradients(model, corpus, batch, cfg.l1_weight)?;
    g.check_finite()?;
    let lr = cfg.learning_rate;
    if cfg.train_token_table {
        for (p, d) in model
            .token_table
            .data_mut()
            .iter_mut()
            .zip(g.token_table.data())
        {
            *p -= lr * d;
        }
    }
    for (p, d) in model.mlp_weight.iter_mut().zip(&g.mlp_weight) {
        *p -= lr * d;
    }
    model.mlp_bias -= lr * g.mlp_bias;
    for (p, d) in model.proj_weight.iter_mut().zip(&g.proj_weight) {
        *p -= lr * d;
    }
    for (p, d) in model.proj_bias.iter_mut().zip(&g.proj_bias) {
        *p -= lr * d;
    }
    if cfg.lambda_trainable {
        model.lambda_query = (model.lambda_query - lr * g.lambda_query).max(LAMBDA_FLOOR);
        model.lambda_doc = (model.lambda_doc - lr * g.lambda_doc).max(LAMBDA_FLOOR);
    }
    Ok(StepReport {
        loss,
        entity_grad_norm: g.entity_path_norm(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub fraction_positive: f64,
    pub mean_entity_weight: f64,
    pub lambda: f64,
    pub lambda_query: f64,
    pub loss: f64,
    pub entity_grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollapseTrace {
    pub records: Vec<TraceRecord>,
}

impl CollapseTrace {
    /// First step at which no entity pre-activation is positive.
    pub fn collapse_step(&self) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.fraction_positive == 0.0)
            .map(|r| r.step)
    }

    /// Once the fraction of open gates hits 0 it stays 0.
    pub fn dead_path_holds(&self) -> bool {
        let mut dead = false;
        for r in &self.records {
            if dead && r.fraction_positive != 0.0 {
                return false;
            }
            dead |= r.fraction_positive == 0.0;
        }
        true
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Fraction of (text, candidate) pairs with a positive pre-activation, and
/// the mean gated entity weight, over every text in the corpus.
pub fn entity_gate_stats(model: &ToyEncoder, corpus: &ToyCorpus) -> Result<(f64, f64)> {
    let mut total = 0usize;
    let mut positive = 0usize;
    let mut weight = 0.0;
    for (texts, lambda) in [
        (&corpus.queries, model.lambda_query),
        (&corpus.docs, model.lambda_doc),
    ] {
        for text in texts.values() {
            for pre in model.entity_preactivations(text)? {
                total += 1;
                if pre > 0.0 {
                    positive += 1;
                }
                weight += lambda * saturate(pre);
            }
        }
    }
    if total == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((positive as f64 / total as f64, weight / total as f64))
}

fn sample_batch(corpus: &ToyCorpus, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<TeacherTriple> {
    let n = corpus.triples.len();
    if cfg.batch_size >= n {
        return corpus.triples.clone();
    }
    (0..cfg.batch_size)
        .map(|_| corpus.triples[rng.gen_range(0..n)].clone())
        .collect()
}

/// Trains from `init` (with both `λ` reset to `cfg.lambda_init`) and records
/// gate statistics before every step and after the last one.
pub fn train(
    init: &ToyEncoder,
    corpus: &ToyCorpus,
    cfg: &TrainConfig,
) -> Result<(ToyEncoder, CollapseTrace)> {
    cfg.validate()?;
    if corpus.triples.is_empty() {
        return Err(Error::InvalidArgument(
            "corpus has no training triples".into(),
        ));
    }
    let mut model = init.clone();
    model.lambda_query = cfg.lambda_init;
    model.lambda_doc = cfg.lambda_init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = CollapseTrace::default();
    for s in 0..=cfg.steps {
        let batch = sample_batch(corpus, cfg, &mut rng);
        let (fraction, mean_w) = entity_gate_stats(&model, corpus)?;
        let (lambda_doc, lambda_query) = (model.lambda_doc, model.lambda_query);
        let report = if s < cfg.steps {
            step(&mut model, corpus, &batch, cfg)?
        } else {
            let (loss, g) = loss_and_gradients(&model, corpus, &batch, cfg.l1_weight)?;
            StepReport {
                loss,
                entity_grad_norm: g.entity_path_norm(),
            }
        };
        trace.records.push(TraceRecord {
            step: s,
            fraction_positive: fraction,
            mean_entity_weight: mean_w,
            lambda: lambda_doc,
            lambda_query,
            loss: report.loss,
            entity_grad_norm: report.entity_grad_norm,
        });
    }
    Ok((model, trace))
}

/// Runs the same fixture under two configurations: `cfg_fixed` (λ fixed,
/// typically 1.0) and `cfg_trainable` (λ trainable from a small value).
pub fn run_collapse_experiment(
    cfg_fixed: &TrainConfig,
    cfg_trainable: &TrainConfig,
    init: &ToyEncoder,
    corpus: &ToyCorpus,
) -> Result<(CollapseTrace, CollapseTrace)> {
    let (_, a) = train(init, corpus, cfg_fixed)?;
    let (_, b) = train(init, corpus, cfg_trainable)?;
    Ok((a, b))
}

/// A small fixture whose entity path dominates the student score: query
/// words are switched off (zero MLP weight, negative bias), every positive
/// document links exactly the query's entities and negatives link none, so
/// every gated pair receives gradient. Hidden rows
/// carry a constant last coordinate, so the projection bias shifts every
/// entity pre-activation at once.
pub fn collapse_fixture(seed: u64) -> Result<(ToyEncoder, ToyCorpus)> {
    const VOCAB: usize = 10;
    const DIM: usize = 5;
    const ENT_DIM: usize = 4;
    const ENTITIES: u64 = 12;
    const QUERIES: usize = 8;
    const TEACHER_MARGIN: f64 = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut table = Vec::with_capacity(VOCAB * DIM);
    for _ in 0..VOCAB {
        for _ in 0..DIM - 1 {
            table.push(rng.gen_range(-0.5..0.5));
        }
        table.push(1.0);
    }
    let mut entities = EmbeddingTable::new(ENT_DIM)?;
    for id in 1..=ENTITIES {
        let row: Vec<f32> = (0..ENT_DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        entities.insert(id, &row)?;
    }
    let weight: Vec<f64> = (0..ENT_DIM * DIM)
        .map(|i| {
            if i % DIM == DIM - 1 {
                0.0
            } else {
                rng.gen_range(-0.1..0.1)
            }
        })
        .collect();
    let mut bias = vec![0.0; DIM];
    bias[DIM - 1] = 1.5;
    let projection = Projection::affine(ENT_DIM, DIM, weight, bias)?;
    let model = ToyEncoder::new(
        Matrix::from_vec(VOCAB, DIM, table)?,
        vec![0.0; DIM],
        -1.0,
        &projection,
        1.0,
        entities,
    )?;

    let tokens = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> {
        (0..n).map(|_| rng.gen_range(0..VOCAB as u32)).collect()
    };
    let mut corpus = ToyCorpus::default();
    for q in 0..QUERIES {
        let mut ids: Vec<EntityId> = (1..=ENTITIES).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
        let shared = &ids[..3];
        let qid = format!("q{q}");
        let (pos, neg) = (format!("d{q}p"), format!("d{q}n"));
        corpus.queries.insert(
            qid.clone(),
            ToyText {
                tokens: tokens(&mut rng, 3),
                candidates: shared.to_vec(),
            },
        );
        corpus.docs.insert(
            pos.clone(),
            ToyText {
                tokens: tokens(&mut rng, 6),
                candidates: shared.to_vec(),
            },
        );
        corpus.docs.insert(
            neg.clone(),
            ToyText {
                tokens: tokens(&mut rng, 6),
                candidates: Vec::new(),
            },
        );
        corpus.triples.push(TeacherTriple {
            query_id: qid,
            pos_doc_id: pos,
            neg_doc_id: neg,
            teacher_pos: TEACHER_MARGIN,
            teacher_neg: 0.0,
        });
    }
    Ok((model, corpus))
}

pub const COLLAPSE_STEPS: usize = 5000;
pub const COLLAPSE_LEARNING_RATE: f64 = 16.0;

/// The two configurations contrasted on [`collapse_fixture`]: `λ` fixed at
/// 1 versus `λ` trainable from 0.05, with the token table frozen.
pub fn collapse_configs(steps: usize, learning_rate: f64, seed: u64) -> (TrainConfig, TrainConfig) {
    let fixed = TrainConfig {
        learning_rate,
        steps,
        l1_weight: 0.0,
        lambda_init: 1.0,
        lambda_trainable: false,
        seed,
        batch_size: usize::MAX,
        train_token_table: false,
    };
    let trainable = TrainConfig {
        lambda_init: 0.05,
        lambda_trainable: true,
        ..fixed.clone()
    };
    (fixed, trainable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(3.0, 1.0, 3.0, 1.0), 0.0);
        assert_eq!(kl_loss(13.0, 11.0, 3.0, 1.0), 0.0);
        // teacher uniform, student certain-ish
        let ls = (2.0f64).exp() / (1.0 + (2.0f64).exp());
        let want = 0.5 * (0.5 / ls).ln() + 0.5 * (0.5 / (1.0 - ls)).ln();
        assert!((kl_loss(2.0, 0.0, 0.0, 0.0) - want).abs() < 1e-12);
        assert!(kl_loss(1e6, -1e6, -1e6, 1e6).is_finite());
    }

    #[test]
    fn triples_round_trip_and_rejects() {
        let t = vec![TeacherTriple {
            query_id: "q".into(),
            pos_doc_id: "a".into(),
            neg_doc_id: "b".into(),
            teacher_pos: 2.5,
            teacher_neg: -0.25,
        }];
        let mut buf = Vec::new();
        write_triples(&mut buf, &t).unwrap();
        assert_eq!(read_triples(&buf[..], "mem").unwrap(), t);
        for bad in [
            "q\ta\tb\t1",
            "q\ta\ta\t1\t0",
            "q\ta\tb\tx\t0",
            "q\ta\tb\tNaN\t0",
        ] {
            assert!(read_triples(bad.as_bytes(), "mem").is_err(), "{bad}");
        }
    }

    fn probe_fixture() -> (ToyEncoder, ToyCorpus) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ents = EmbeddingTable::new(3).unwrap();
        for id in 1..=6 {
            let r: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            ents.insert(id, &r).unwrap();
        }
        let model = ToyEncoder::random(9, 4, ents, 0.7, 5).unwrap();
        let mut corpus = ToyCorpus::default();
        let text = |rng: &mut ChaCha8Rng, n| ToyText {
            tokens: (0..n).map(|_| rng.gen_range(0..9u32)).collect(),
            candidates: {
                let mut c: Vec<u64> = (1..=6).collect();
                for i in (1..6).rev() {
                    c.swap(i, rng.gen_range(0..=i));
                }
                c.truncate(4);
                c
            },
        };
        for q in 0..3 {
            corpus.queries.insert(format!("q{q}"), text(&mut rng, 3));
        }
        for d in 0..5 {
            corpus.docs.insert(format!("d{d}"), text(&mut rng, 5));
        }
        for (q, p, n, tp, tn) in [
            (0, 0, 1, 2.0, -1.0),
            (1, 2, 3, 0.5, 1.5),
            (2, 4, 0, 3.0, 0.0),
            (0, 3, 4, 1.0, 0.9),
        ] {
            corpus.triples.push(TeacherTriple {
                query_id: format!("q{q}"),
                pos_doc_id: format!("d{p}"),
                neg_doc_id: format!("d{n}"),
                teacher_pos: tp,
                teacher_neg: tn,
            });
        }
        (model, corpus)
    }

    #[test]
    fn analytic_loss_matches_direct_loss() {
        let (m, c) = probe_fixture();
        let (a, _) = loss_and_gradients(&m, &c, &c.triples, 0.01).unwrap();
        let b = total_loss(&m, &c, &c.triples, 0.01).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    fn fd_check(
        select: &dyn Fn(&mut ToyEncoder) -> &mut f64,
        analytic: f64,
        m: &ToyEncoder,
        c: &ToyCorpus,
    ) {
        let h = 1e-5;
        let mut plus = m.clone();
        *select(&mut plus) += h;
        let mut minus = m.clone();
        *select(&mut minus) -= h;
        let fd = (total_loss(&plus, c, &c.triples, 0.01).unwrap()
            - total_loss(&minus, c, &c.triples, 0.01).unwrap())
            / (2.0 * h);
        let tol = 1e-4 * fd.abs().max(analytic.abs()) + 1e-7;
        assert!(
            (fd - analytic).abs() <= tol,
            "fd {fd} vs analytic {analytic}"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, c) = probe_fixture();
        let (_, g) = loss_and_gradients(&m, &c, &c.triples, 0.01).unwrap();
        let mut nonzero = 0;
        for k in 0..m.token_table.data().len() {
            fd_check(
                &|x| &mut x.token_table.data_mut()[k],
                g.token_table.data()[k],
                &m,
                &c,
            );
            nonzero += (g.token_table.data()[k] != 0.0) as usize;
        }
        for k in 0..m.proj_weight.len() {
            fd_check(&|x| &mut x.proj_weight[k], g.proj_weight[k], &m, &c);
        }
        for k in 0..m.dim() {
            fd_check(&|x| &mut x.proj_bias[k], g.proj_bias[k], &m, &c);
            fd_check(&|x| &mut x.mlp_weight[k], g.mlp_weight[k], &m, &c);
        }
        fd_check(&|x| &mut x.mlp_bias, g.mlp_bias, &m, &c);
        fd_check(&|x| &mut x.lambda_query, g.lambda_query, &m, &c);
        fd_check(&|x| &mut x.lambda_doc, g.lambda_doc, &m, &c);
        assert!(nonzero > 10);
        assert!(g.lambda_query != 0.0 && g.lambda_doc != 0.0);
    }

    #[test]
    fn step_leaves_entity_table_untouched() {
        let (mut m, c) = probe_fixture();
        let before = m.entities().to_bytes();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let first = total_loss(&m, &c, &c.triples, cfg.l1_weight).unwrap();
        for _ in 0..100 {
            let b = sample_batch(&c, &cfg, &mut rng);
            step(&mut m, &c, &b, &cfg).unwrap();
        }
        assert_eq!(m.entities().to_bytes(), before);
        assert!(total_loss(&m, &c, &c.triples, cfg.l1_weight).unwrap() < first);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let (mut m, c) = probe_fixture();
        m.mlp_bias = f64::INFINITY;
        let cfg = TrainConfig::default();
        assert!(matches!(
            step(&mut m, &c, &c.triples, &cfg),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let (m, c) = probe_fixture();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            steps: 20,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let (a, ta) = train(&m, &c, &cfg).unwrap();
        let (b, tb) = train(&m, &c, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn fixed_large_lambda_collapses_and_stays_dead() {
        let (m, c) = collapse_fixture(7).unwrap();
        let (a, b) = collapse_configs(300, COLLAPSE_LEARNING_RATE, 7);
        let (ta, tb) = run_collapse_experiment(&a, &b, &m, &c).unwrap();
        assert_eq!(ta.records[0].fraction_positive, 1.0);
        let at = ta.collapse_step().expect("fixed lambda collapses");
        assert!(ta.dead_path_holds());
        for r in &ta.records[at..] {
            assert_eq!(r.entity_grad_norm, 0.0);
            assert_eq!(r.mean_entity_weight, 0.0);
        }
        assert!(tb.records.iter().all(|r| r.fraction_positive > 0.0));
        assert_eq!(tb.records.len(), 301);
    }
}
