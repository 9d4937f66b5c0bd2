//! Batch command-line surface. Every command reads a [`PipelineConfig`]
//! assembled from an optional TOML file overlaid by flags, and writes its
//! outputs to files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::candidates::{
    bm25_build, bm25_retrieve, dense_retrieve, generative_retrieve, load_linked,
    read_dense_queries, write_candidates, ChatClient, GenerativeClientConfig, DEFAULT_K,
};
use crate::error::{Error, Result};
use crate::eval::{ndcg_at_k, parse_qrels, parse_run, recall_at_n, write_run, Run};
use crate::head::{
    encode_document, encode_query, load_params, read_hidden_states, CandidateSet, EncoderParams,
    EntitySpace,
};
use crate::index::{IndexStats, InvertedIndex};
use crate::kb::{
    intersect_with_embeddings, load_embeddings, load_kb, load_projection, EntityVocabulary,
};
use crate::sparse::{read_sparse_jsonl, write_sparse_jsonl, SparseVector, VocabularyLayout};
use crate::synth::{generate, SynthConfig, SynthPaths};
use crate::train::{
    collapse_configs, collapse_fixture, run_collapse_experiment, COLLAPSE_LEARNING_RATE,
    COLLAPSE_STEPS,
};

pub const DEFAULT_DEPTH: usize = 1000;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bm25,
    Dense,
    Generative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Query,
    Document,
}

/// Every setting any command reads. Unset fields fall back to the config
/// file, then to built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Knowledge base JSONL (entity_id, title, description)
    #[arg(long, global = true)]
    pub kb: Option<PathBuf>,
    /// Entity embedding table (binary)
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    /// Entity-to-hidden projection (binary); identity when omitted
    #[arg(long, global = true)]
    pub projection: Option<PathBuf>,
    /// Hidden-state file of the texts to encode
    #[arg(long, global = true)]
    pub hidden_states: Option<PathBuf>,
    /// Linked entity candidates JSONL for the texts to encode
    #[arg(long, global = true)]
    pub candidates: Option<PathBuf>,
    /// Candidate retriever used by the candidates command
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
    /// Entity candidates per query [default: 20]
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Inverted index file
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    /// TREC qrels file
    #[arg(long, global = true)]
    pub qrels: Option<PathBuf>,
    /// TREC run file
    #[arg(long, global = true)]
    pub run: Option<PathBuf>,
    /// Documents retrieved per query [default: 1000]
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    /// L1 penalty weight on word weights in the collapse experiment [default: 0]
    #[arg(long, global = true)]
    pub l1_weight: Option<f64>,
    /// Initial entity weight scale of the trainable run [default: 0.05]
    #[arg(long, global = true)]
    pub lambda_init: Option<f64>,
    /// Seed for every randomized fixture [default: 42]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Chat-completion endpoint for generative candidates
    #[arg(long, global = true)]
    pub endpoint_url: Option<String>,
    /// Model name sent to the chat-completion endpoint
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key [default: OPENAI_API_KEY]
    #[arg(long, global = true)]
    pub api_key_env: Option<String>,
    /// Encoder parameters (binary)
    #[arg(long, global = true)]
    pub params: Option<PathBuf>,
    /// Which encoder head to apply
    #[arg(long, global = true, value_enum)]
    pub side: Option<Side>,
    /// Encode words only, ignoring entity candidates
    #[arg(long, global = true)]
    pub word_only: bool,
    /// Query input: TSV (id, text) for bm25 and generative, JSONL vectors for dense
    #[arg(long, global = true)]
    pub queries: Option<PathBuf>,
    /// Encoded sparse vectors JSONL (index and search input)
    #[arg(long, global = true)]
    pub vectors: Option<PathBuf>,
    /// Output file or directory of the command
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Training steps of the collapse experiment [default: 5000]
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Learning rate of the collapse experiment [default: 16]
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// Run tag written in the last column of the run file [default: dyvo]
    #[arg(long, global = true)]
    pub tag: Option<String>,
}

impl PipelineConfig {
    /// Fills every unset field of `self` from `base`.
    pub fn overlay(mut self, base: PipelineConfig) -> Self {
        macro_rules! fill {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = base.$f; } )* };
        }
        fill!(
            kb,
            embeddings,
            projection,
            hidden_states,
            candidates,
            method,
            k,
            index,
            qrels,
            run,
            depth,
            l1_weight,
            lambda_init,
            seed,
            endpoint_url,
            model,
            api_key_env,
            params,
            side,
            queries,
            vectors,
            output,
            steps,
            learning_rate,
            tag
        );
        self.word_only |= base.word_only;
        self
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::malformed(path.display(), 0, e.to_string()))
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(DEFAULT_K)
    }

    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(DEFAULT_DEPTH)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }
}

fn need<'a, T>(v: &'a Option<T>, flag: &str, cmd: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{cmd} requires --{flag}")))
}

#[derive(Debug, Parser)]
#[command(
    name = "dyvo",
    version,
    about = "Learned sparse retrieval over a joint word and entity vocabulary"
)]
pub struct Cli {
    /// TOML file with default settings; flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: PipelineConfig,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Keep knowledge-base entities that have an embedding; writes --output
    BuildKb,
    /// Retrieve entity candidates for --queries with --method; writes --output
    Candidates,
    /// Encode --hidden-states with --candidates into sparse vectors; writes --output
    Encode,
    /// Build an inverted index from document --vectors; writes --index
    Index,
    /// Search --index with query --vectors; writes --run
    Search,
    /// Score --run against --qrels (nDCG@10, nDCG@20, R@1000)
    Eval,
    /// Run the lambda collapse contrast; writes two traces into --output
    Collapse,
    /// Generate the synthetic entity-rich benchmark into --output
    Synth,
}

impl Cli {
    /// Resolved settings: flags over the config file.
    pub fn resolved(&self) -> Result<PipelineConfig> {
        let base = match &self.config {
            Some(p) => PipelineConfig::from_toml_file(p)?,
            None => PipelineConfig::default(),
        };
        Ok(self.settings.clone().overlay(base))
    }
}

pub fn run_command(cmd: Command, cfg: &PipelineConfig) -> Result<()> {
    info!("{cmd:?} with seed {}", cfg.seed());
    match cmd {
        Command::BuildKb => cmd_build_kb(cfg).map(|_| ()),
        Command::Candidates => cmd_candidates(cfg),
        Command::Encode => cmd_encode(cfg),
        Command::Index => cmd_index(cfg).map(|_| ()),
        Command::Search => cmd_search(cfg).map(|_| ()),
        Command::Eval => {
            let report = cmd_eval(cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Collapse => cmd_collapse(cfg),
        Command::Synth => cmd_synth(cfg).map(|_| ()),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Returns the number of entities kept.
pub fn cmd_build_kb(cfg: &PipelineConfig) -> Result<usize> {
    let kb = load_kb(need(&cfg.kb, "kb", "build-kb")?)?;
    let emb = load_embeddings(need(&cfg.embeddings, "embeddings", "build-kb")?)?;
    let out = need(&cfg.output, "output", "build-kb")?;
    let kept = intersect_with_embeddings(&kb, &emb);
    info!("kept {} of {} entities", kept.len(), kb.len());
    let mut w = create(out)?;
    kept.write(&mut w)?;
    finish(w, out)?;
    Ok(kept.len())
}

fn read_query_text(path: &Path) -> Result<Vec<(String, String)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::malformed(path.display(), n + 1, "expected <id>\\t<text>"))?;
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

pub fn cmd_candidates(cfg: &PipelineConfig) -> Result<()> {
    let method = *need(&cfg.method, "method", "candidates")?;
    let queries = need(&cfg.queries, "queries", "candidates")?;
    let out = need(&cfg.output, "output", "candidates")?;
    let k = cfg.k();
    let mut sets: Vec<(String, CandidateSet)> = Vec::new();
    match method {
        Method::Bm25 => {
            let kb = load_kb(need(&cfg.kb, "kb", "candidates")?)?;
            let idx = bm25_build(&kb);
            for (id, text) in read_query_text(queries)? {
                let set = bm25_retrieve(&idx, &text, k);
                sets.push((id, set));
            }
        }
        Method::Dense => {
            let emb = load_embeddings(need(&cfg.embeddings, "embeddings", "candidates")?)?;
            for (id, v) in read_dense_queries(queries)? {
                sets.push((id, dense_retrieve(&v, &emb, k)?));
            }
        }
        Method::Generative => {
            let kb = load_kb(need(&cfg.kb, "kb", "candidates")?)?;
            let mut client_cfg = GenerativeClientConfig::new(
                need(&cfg.endpoint_url, "endpoint-url", "candidates")?.clone(),
                need(&cfg.model, "model", "candidates")?.clone(),
            );
            if let Some(var) = &cfg.api_key_env {
                client_cfg.api_key_env_var = var.clone();
            }
            let client = ChatClient::new(client_cfg)?;
            for (id, text) in read_query_text(queries)? {
                let outcome = generative_retrieve(&client, &text, &kb)?;
                if outcome.dropped > 0 {
                    warn!(
                        "{id}: dropped {} names without a knowledge-base entry",
                        outcome.dropped
                    );
                }
                let ids: Vec<_> = outcome.candidates.ids().iter().copied().take(k).collect();
                sets.push((id, CandidateSet::new(ids)?));
            }
        }
    }
    let mut w = create(out)?;
    write_candidates(&mut w, sets.iter().map(|(id, s)| (id.as_str(), s)))?;
    finish(w, out)
}

struct EntityContext {
    emb: crate::kb::EmbeddingTable,
    vocab: EntityVocabulary,
    kb: crate::kb::KnowledgeBase,
}

fn entity_context(cfg: &PipelineConfig, cmd: &str) -> Result<EntityContext> {
    let kb = load_kb(need(&cfg.kb, "kb", cmd)?)?;
    let emb = load_embeddings(need(&cfg.embeddings, "embeddings", cmd)?)?;
    let kb = intersect_with_embeddings(&kb, &emb);
    let vocab = EntityVocabulary::from_kb(&kb);
    Ok(EntityContext { emb, vocab, kb })
}

fn load_encoder(
    cfg: &PipelineConfig,
    cmd: &str,
    entity_dim: Option<usize>,
) -> Result<EncoderParams> {
    let path = need(&cfg.params, "params", cmd)?;
    let projection = match (&cfg.projection, entity_dim) {
        (Some(p), _) => load_projection(p)?,
        (None, Some(d)) => crate::kb::Projection::identity(d),
        // word-only encoding never applies the projection
        (None, None) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let d = EncoderParams::peek_dim(&bytes)?;
            crate::kb::Projection::identity(d)
        }
    };
    load_params(path, projection)
}

/// Vocabulary layout of vectors produced under `cfg`.
pub fn pipeline_layout(cfg: &PipelineConfig, cmd: &str) -> Result<VocabularyLayout> {
    let p = load_encoder(cfg, cmd, None)?;
    let entities = if cfg.word_only {
        0
    } else {
        entity_context(cfg, cmd)?.vocab.len() as u32
    };
    VocabularyLayout::new(p.word_vocab_size(), entities)
}

pub fn cmd_encode(cfg: &PipelineConfig) -> Result<()> {
    let side = *need(&cfg.side, "side", "encode")?;
    let states = read_hidden_states(need(&cfg.hidden_states, "hidden-states", "encode")?)?;
    let out = need(&cfg.output, "output", "encode")?;
    let ctx = if cfg.word_only {
        None
    } else {
        Some(entity_context(cfg, "encode")?)
    };
    let params = load_encoder(cfg, "encode", ctx.as_ref().map(|c| c.emb.dim()))?;
    let linked = match (&ctx, &cfg.candidates) {
        (Some(c), Some(p)) => Some(load_linked(p, &c.kb)?),
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "encode requires --candidates unless --word-only".into(),
            ))
        }
        _ => None,
    };
    let space = ctx.as_ref().map(|c| EntitySpace {
        embeddings: &c.emb,
        vocab: &c.vocab,
    });
    let empty = CandidateSet::default();
    let mut encoded: Vec<(String, SparseVector)> = Vec::with_capacity(states.len());
    let mut missing = 0usize;
    for h in &states {
        let cands = match &linked {
            Some(l) => l.get(&h.id).unwrap_or_else(|| {
                missing += 1;
                &empty
            }),
            None => &empty,
        };
        let v = match side {
            Side::Query => encode_query(h, cands, space, &params)?,
            Side::Document => encode_document(h, cands, space, &params)?,
        };
        encoded.push((h.id.clone(), v));
    }
    if missing > 0 {
        warn!("{missing} texts had no candidate record and were encoded without entities");
    }
    let mut w = create(out)?;
    write_sparse_jsonl(&mut w, encoded.iter().map(|(id, v)| (id.as_str(), v)))?;
    finish(w, out)
}

fn read_vectors(
    cfg: &PipelineConfig,
    cmd: &str,
) -> Result<(VocabularyLayout, Vec<(String, SparseVector)>)> {
    let layout = pipeline_layout(cfg, cmd)?;
    let path = need(&cfg.vectors, "vectors", cmd)?;
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok((
        layout,
        read_sparse_jsonl(BufReader::new(f), layout, &path.display().to_string())?,
    ))
}

pub fn cmd_index(cfg: &PipelineConfig) -> Result<IndexStats> {
    let out = need(&cfg.index, "index", "index")?;
    let (layout, docs) = read_vectors(cfg, "index")?;
    let idx = InvertedIndex::build(layout, docs)?;
    idx.save(out)?;
    let stats = idx.stats();
    info!(
        "indexed {} documents, {} postings",
        stats.doc_count, stats.postings_count
    );
    Ok(stats)
}

pub fn cmd_search(cfg: &PipelineConfig) -> Result<Run> {
    let idx = InvertedIndex::load(need(&cfg.index, "index", "search")?)?;
    let out = need(&cfg.run, "run", "search")?;
    let (layout, queries) = read_vectors(cfg, "search")?;
    if layout != idx.layout() {
        return Err(Error::LayoutMismatch(format!(
            "query vectors use {layout:?} but the index was built with {:?}",
            idx.layout()
        )));
    }
    let mut run = Run::new(cfg.tag.clone().unwrap_or_else(|| "dyvo".into()));
    for (id, q) in queries {
        let hits = idx.search(&q, cfg.depth())?;
        run.insert(id, hits)?;
    }
    write_run(&run, out)?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub ndcg_10: f64,
    pub ndcg_20: f64,
    pub recall_1000: f64,
    pub queries: usize,
}

pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalSummary> {
    let run = parse_run(need(&cfg.run, "run", "eval")?)?;
    let qrels = parse_qrels(need(&cfg.qrels, "qrels", "eval")?)?;
    let n10 = ndcg_at_k(&run, &qrels, 10)?;
    let summary = EvalSummary {
        ndcg_10: n10.mean,
        ndcg_20: ndcg_at_k(&run, &qrels, 20)?.mean,
        recall_1000: recall_at_n(&run, &qrels, 1000)?.mean,
        queries: n10.per_query.len(),
    };
    if let Some(out) = &cfg.output {
        let mut w = create(out)?;
        serde_json::to_writer_pretty(&mut w, &summary)?;
        finish(w, out)?;
    }
    Ok(summary)
}

/// Writes `fixed_lambda.jsonl` and `trainable_lambda.jsonl` into --output.
pub fn cmd_collapse(cfg: &PipelineConfig) -> Result<()> {
    let dir = need(&cfg.output, "output", "collapse")?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seed = cfg.seed();
    let (model, corpus) = collapse_fixture(seed)?;
    let (mut fixed, mut trainable) = collapse_configs(
        cfg.steps.unwrap_or(COLLAPSE_STEPS),
        cfg.learning_rate.unwrap_or(COLLAPSE_LEARNING_RATE),
        seed,
    );
    if let Some(l1) = cfg.l1_weight {
        fixed.l1_weight = l1;
        trainable.l1_weight = l1;
    }
    if let Some(l) = cfg.lambda_init {
        trainable.lambda_init = l;
    }
    let (a, b) = run_collapse_experiment(&fixed, &trainable, &model, &corpus)?;
    for (name, trace) in [("fixed_lambda.jsonl", &a), ("trainable_lambda.jsonl", &b)] {
        let path = dir.join(name);
        let mut w = create(&path)?;
        trace.write_jsonl(&mut w)?;
        finish(w, &path)?;
    }
    info!(
        "fixed lambda collapse step {:?}; trainable lambda final open fraction {:?}",
        a.collapse_step(),
        b.last().map(|r| r.fraction_positive)
    );
    Ok(())
}

pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthPaths> {
    let dir = need(&cfg.output, "output", "synth")?;
    let bench = generate(&SynthConfig {
        seed: cfg.seed(),
        ..SynthConfig::default()
    })?;
    bench.write(dir)
}
