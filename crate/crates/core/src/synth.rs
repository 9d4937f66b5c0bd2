//! Seeded generator for an entity-rich retrieval benchmark with precomputed
//! hidden states.
//!
//! Every query is about one entity and mentions its first alias word plus a
//! topic word. Its relevant documents either repeat those words or mention
//! only the entity's second alias, so they can be reached through the
//! entity id alone. Distractor documents share the topic word but not the
//! entity. Hidden states are `h_t = [u_t, 1]` with random unit `u_t`; word
//! embeddings `[s·u_i, -β]` keep document expansions sparse.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::candidates::write_candidates;
use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::head::{write_hidden_states, CandidateSet, EncoderParams, HiddenStates, Matrix};
use crate::kb::{EmbeddingTable, Entity, EntityId, KnowledgeBase, Projection};

const FIRST_ENTITY_ID: EntityId = 1000;
const WORD_SCALE: f64 = 4.0;
const WORD_SHIFT: f64 = 2.0;
const ENTITY_SCALE: f64 = 8.0;
const ENTITY_SHIFT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub queries: usize,
    pub relevant_per_query: usize,
    /// Relevant documents per query that mention only the second alias.
    pub entity_only_per_query: usize,
    pub distractors_per_query: usize,
    pub filler_docs: usize,
    pub noise_entities: usize,
    pub general_words: usize,
    pub dim: usize,
    pub lambda_ent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            queries: 70,
            relevant_per_query: 10,
            entity_only_per_query: 3,
            distractors_per_query: 3,
            filler_docs: 90,
            noise_entities: 80,
            general_words: 230,
            dim: 32,
            lambda_ent: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn doc_count(&self) -> usize {
        self.queries * (self.relevant_per_query + self.distractors_per_query) + self.filler_docs
    }

    pub fn word_vocab_size(&self) -> usize {
        2 * (self.queries + self.noise_entities) + self.queries + self.general_words
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub kb: KnowledgeBase,
    pub embeddings: EmbeddingTable,
    pub projection: Projection,
    pub params: EncoderParams,
    pub query_states: Vec<HiddenStates>,
    pub doc_states: Vec<HiddenStates>,
    pub query_candidates: Vec<(String, CandidateSet)>,
    pub doc_candidates: Vec<(String, CandidateSet)>,
    pub query_text: Vec<(String, String)>,
    pub qrels: Qrels,
    /// `(query, doc)` pairs relevant only through the entity.
    pub entity_only: Vec<(String, String)>,
}

/// File locations written by [`SyntheticBenchmark::write`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub kb: PathBuf,
    pub embeddings: PathBuf,
    pub projection: PathBuf,
    pub params: PathBuf,
    pub query_states: PathBuf,
    pub doc_states: PathBuf,
    pub query_candidates: PathBuf,
    pub doc_candidates: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            kb: dir.join("kb.jsonl"),
            embeddings: dir.join("embeddings.bin"),
            projection: dir.join("projection.bin"),
            params: dir.join("params.bin"),
            query_states: dir.join("queries.hid"),
            doc_states: dir.join("docs.hid"),
            query_candidates: dir.join("query_candidates.jsonl"),
            doc_candidates: dir.join("doc_candidates.jsonl"),
            queries: dir.join("queries.tsv"),
            qrels: dir.join("qrels.txt"),
        }
    }
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct EntitySpec {
    id: EntityId,
    alias: [u32; 2],
}

fn word(t: u32) -> String {
    format!("w{t}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticBenchmark> {
    if cfg.dim < 2 || cfg.queries == 0 || cfg.entity_only_per_query > cfg.relevant_per_query {
        return Err(Error::InvalidArgument(
            "degenerate synthetic benchmark configuration".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let vocab = cfg.word_vocab_size();
    let n_entities = cfg.queries + cfg.noise_entities;

    // word ids: aliases first, then topic words, then general words
    let entities: Vec<EntitySpec> = (0..n_entities)
        .map(|i| EntitySpec {
            id: FIRST_ENTITY_ID + i as u64,
            alias: [2 * i as u32, 2 * i as u32 + 1],
        })
        .collect();
    let topic = |q: usize| (2 * n_entities + q) as u32;
    let general: Vec<u32> = (2 * n_entities + cfg.queries..vocab)
        .map(|t| t as u32)
        .collect();

    let u: Vec<Vec<f64>> = (0..vocab).map(|_| unit(&mut rng, d - 1)).collect();
    let state_row = |t: u32| {
        let mut r = u[t as usize].clone();
        r.push(1.0);
        r
    };
    let mut emb_rows = Vec::with_capacity(vocab);
    for ut in &u {
        let mut r: Vec<f64> = ut.iter().map(|x| WORD_SCALE * x).collect();
        r.push(-WORD_SHIFT);
        emb_rows.push(r);
    }
    let word_embeddings = Matrix::from_rows(&emb_rows)?;

    // signed permutation, so the projection is orthogonal and exactly invertible
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    let signs: Vec<f64> = (0..d)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let mut weight = vec![0.0; d * d];
    for a in 0..d {
        weight[a * d + perm[a]] = signs[a];
    }
    let projection = Projection::affine(d, d, weight, vec![0.0; d])?;

    let mut table = EmbeddingTable::new(d)?;
    let mut kb_entities = Vec::with_capacity(n_entities);
    for e in &entities {
        // target p_c in hidden space, pulled back through the projection
        let mut p: Vec<f64> = (0..d - 1)
            .map(|k| ENTITY_SCALE * (u[e.alias[0] as usize][k] + u[e.alias[1] as usize][k]) / 2.0)
            .collect();
        p.push(-ENTITY_SHIFT);
        let mut row = vec![0f32; d];
        for a in 0..d {
            row[a] = (signs[a] * p[perm[a]]) as f32;
        }
        table.insert(e.id, &row)?;
        kb_entities.push(Entity {
            entity_id: e.id,
            title: format!("Entity {}", e.id),
            description: format!("{} also known as {}", word(e.alias[0]), word(e.alias[1])),
        });
    }
    let kb = KnowledgeBase::new(kb_entities)?;
    let params = EncoderParams::new(
        word_embeddings,
        vec![0.0; d],
        std::f64::consts::E - 1.0,
        cfg.lambda_ent,
        projection.clone(),
    )?;

    let states = |id: String, tokens: Vec<u32>| -> Result<HiddenStates> {
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| state_row(t)).collect();
        HiddenStates::new(id, Matrix::from_rows(&rows)?, tokens)
    };
    // candidates are the entities whose aliases appear in the text
    let link = |tokens: &[u32]| {
        CandidateSet::dedup_from(
            tokens
                .iter()
                .filter(|&&t| (t as usize) < 2 * n_entities)
                .map(|&t| entities[t as usize / 2].id),
        )
    };
    let filler = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> {
        (0..n)
            .map(|_| general[rng.gen_range(0..general.len())])
            .collect()
    };
    let noise_alias = |rng: &mut ChaCha8Rng| -> u32 {
        let e = &entities[cfg.queries + rng.gen_range(0..cfg.noise_entities)];
        e.alias[rng.gen_range(0..2)]
    };

    let mut docs: Vec<(String, Vec<u32>)> = Vec::with_capacity(cfg.doc_count());
    let mut query_states = Vec::with_capacity(cfg.queries);
    let mut query_candidates = Vec::with_capacity(cfg.queries);
    let mut query_text = Vec::with_capacity(cfg.queries);
    let mut qrels = Qrels::default();
    let mut entity_only = Vec::new();
    let mut doc_no = 0usize;
    let mut next_doc = || {
        doc_no += 1;
        format!("D{doc_no:05}")
    };

    for (q, spec) in entities.iter().enumerate().take(cfg.queries) {
        let qid = format!("Q{q:03}");
        let alias = spec.alias;
        let qt = vec![alias[0], topic(q)];
        query_text.push((
            qid.clone(),
            qt.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" "),
        ));
        query_candidates.push((qid.clone(), link(&qt)));
        query_states.push(states(qid.clone(), qt)?);

        for r in 0..cfg.relevant_per_query {
            let did = next_doc();
            let len = rng.gen_range(5..10);
            let mut toks = filler(&mut rng, len);
            if r < cfg.entity_only_per_query {
                toks.push(alias[1]);
                entity_only.push((qid.clone(), did.clone()));
            } else {
                toks.extend([alias[0], topic(q)]);
            }
            if cfg.noise_entities > 0 && rng.gen_bool(0.3) {
                toks.push(noise_alias(&mut rng));
            }
            toks.shuffle(&mut rng);
            qrels.insert(&qid, &did, 1)?;
            docs.push((did, toks));
        }
        for _ in 0..cfg.distractors_per_query {
            let len = rng.gen_range(5..10);
            let mut toks = filler(&mut rng, len);
            toks.push(topic(q));
            if cfg.noise_entities > 0 {
                toks.push(noise_alias(&mut rng));
            }
            toks.shuffle(&mut rng);
            docs.push((next_doc(), toks));
        }
    }
    for _ in 0..cfg.filler_docs {
        let len = rng.gen_range(5..12);
        let mut toks = filler(&mut rng, len);
        if cfg.noise_entities > 0 {
            toks.push(noise_alias(&mut rng));
        }
        docs.push((next_doc(), toks));
    }
    // interleave so relevant documents are not clustered by id
    docs.shuffle(&mut rng);

    let mut doc_states = Vec::with_capacity(docs.len());
    let mut doc_candidates = Vec::with_capacity(docs.len());
    for (id, toks) in docs {
        doc_candidates.push((id.clone(), link(&toks)));
        doc_states.push(states(id, toks)?);
    }

    Ok(SyntheticBenchmark {
        kb,
        embeddings: table,
        projection,
        params,
        query_states,
        doc_states,
        query_candidates,
        doc_candidates,
        query_text,
        qrels,
        entity_only,
    })
}

impl SyntheticBenchmark {
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths::in_dir(dir);
        let open = |p: &Path| {
            fs::File::create(p)
                .map(std::io::BufWriter::new)
                .map_err(|e| Error::io(p, e))
        };

        let mut w = open(&paths.kb)?;
        self.kb.write(&mut w)?;
        w.flush()?;
        self.embeddings.save(&paths.embeddings)?;
        self.projection.save(&paths.projection)?;
        self.params.save(&paths.params)?;
        write_hidden_states(&paths.query_states, &self.query_states)?;
        write_hidden_states(&paths.doc_states, &self.doc_states)?;
        for (path, sets) in [
            (&paths.query_candidates, &self.query_candidates),
            (&paths.doc_candidates, &self.doc_candidates),
        ] {
            let mut w = open(path)?;
            write_candidates(&mut w, sets.iter().map(|(id, s)| (id.as_str(), s)))?;
            w.flush()?;
        }
        let mut w = open(&paths.queries)?;
        for (id, text) in &self.query_text {
            writeln!(w, "{id}\t{text}")?;
        }
        w.flush()?;
        let mut w = open(&paths.qrels)?;
        for q in self.qrels.queries() {
            let mut judged: Vec<_> = self.qrels.query(q).into_iter().flatten().collect();
            judged.sort();
            for (doc, grade) in judged {
                writeln!(w, "{q} 0 {doc} {grade}")?;
            }
        }
        w.flush()?;
        Ok(paths)
    }
}
