//! TREC qrels/run handling and the nDCG@k and recall@n measures.
//!
//! Only queries that appear in the run and have at least one relevant
//! (grade > 0) judgment are evaluated; means are arithmetic over those.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::sparse::ScoredDoc;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    judgments: HashMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query: &str, doc: &str, grade: u32) -> Result<()> {
        let per_query = self.judgments.entry(query.to_string()).or_default();
        if per_query.insert(doc.to_string(), grade).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate judgment for ({query}, {doc})"
            )));
        }
        Ok(())
    }

    pub fn grade(&self, query: &str, doc: &str) -> Option<u32> {
        self.judgments.get(query)?.get(doc).copied()
    }

    pub fn query(&self, query: &str) -> Option<&HashMap<String, u32>> {
        self.judgments.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn from_reader<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut q = Qrels::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::malformed(source, n + 1, m);
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad("expected `query_id 0 doc_id grade`"));
            }
            let grade: u32 = fields[3]
                .parse()
                .map_err(|_| bad("grade must be a non-negative integer"))?;
            q.insert(fields[0], fields[2], grade)
                .map_err(|e| bad(&e.to_string()))?;
        }
        Ok(q)
    }
}

pub fn parse_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Qrels::from_reader(BufReader::new(f), &path.display().to_string())
}

/// Ranked results per query, kept sorted by score descending then doc id.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub tag: String,
    results: BTreeMap<String, Vec<ScoredDoc>>,
}

fn rank_order(a: &ScoredDoc, b: &ScoredDoc) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

impl Run {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            results: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, query: impl Into<String>, mut docs: Vec<ScoredDoc>) -> Result<()> {
        let query = query.into();
        let mut seen = HashSet::new();
        if let Some(d) = docs.iter().find(|d| !seen.insert(d.doc_id.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "document {:?} retrieved twice for query {query:?}",
                d.doc_id
            )));
        }
        docs.sort_by(rank_order);
        self.results.insert(query, docs);
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&[ScoredDoc]> {
        self.results.get(query).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&str, &[ScoredDoc])> {
        self.results.iter().map(|(q, d)| (q.as_str(), d.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    pub fn from_reader<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut grouped: BTreeMap<String, Vec<ScoredDoc>> = BTreeMap::new();
        let mut tag = None;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::malformed(source, n + 1, m);
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad("expected `query_id Q0 doc_id rank score tag`"));
            }
            f[3].parse::<u64>()
                .map_err(|_| bad("rank must be an integer"))?;
            let score: f64 = f[4].parse().map_err(|_| bad("score must be a number"))?;
            if !score.is_finite() {
                return Err(bad("score must be finite"));
            }
            tag.get_or_insert_with(|| f[5].to_string());
            grouped
                .entry(f[0].to_string())
                .or_default()
                .push(ScoredDoc {
                    doc_id: f[2].to_string(),
                    score,
                });
        }
        let mut run = Run::new(tag.unwrap_or_default());
        for (q, docs) in grouped {
            run.insert(q, docs)
                .map_err(|e| Error::malformed(source, 0, e.to_string()))?;
        }
        Ok(run)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (q, docs) in &self.results {
            for (i, d) in docs.iter().enumerate() {
                writeln!(
                    w,
                    "{} Q0 {} {} {} {}",
                    q,
                    d.doc_id,
                    i + 1,
                    d.score,
                    self.tag
                )?;
            }
        }
        Ok(())
    }
}

pub fn parse_run(path: impl AsRef<Path>) -> Result<Run> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Run::from_reader(BufReader::new(f), &path.display().to_string())
}

pub fn write_run(run: &Run, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = crate::binio::create(path)?;
    run.write(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gain {
    /// gain = grade
    #[default]
    Linear,
    /// gain = 2^grade - 1
    Exponential,
}

impl Gain {
    fn apply(self, grade: u32) -> f64 {
        match self {
            Gain::Linear => grade as f64,
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

impl MetricReport {
    fn from_values(metric: String, per_query: BTreeMap<String, f64>) -> Self {
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.values().sum::<f64>() / per_query.len() as f64
        };
        Self {
            metric,
            per_query,
            mean,
        }
    }
}

/// Judgments of run queries that have at least one relevant document.
fn evaluable<'a>(
    run: &'a Run,
    qrels: &'a Qrels,
) -> Vec<(&'a str, &'a [ScoredDoc], &'a HashMap<String, u32>)> {
    let mut out = Vec::new();
    for (q, docs) in run.queries() {
        match qrels.query(q) {
            None => warn!("query {q} has no judgments; excluded"),
            Some(j) if j.values().all(|&g| g == 0) => {}
            Some(j) => out.push((q, docs, j)),
        }
    }
    out
}

pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    ndcg_at_k_with_gain(run, qrels, k, Gain::Linear)
}

pub fn ndcg_at_k_with_gain(run: &Run, qrels: &Qrels, k: usize, gain: Gain) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut per_query = BTreeMap::new();
    for (q, docs, judged) in evaluable(run, qrels) {
        let dcg: f64 = docs
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, d)| {
                let g = judged.get(&d.doc_id).copied().unwrap_or(0);
                gain.apply(g) / ((i + 2) as f64).log2()
            })
            .sum();
        let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain.apply(g) / ((i + 2) as f64).log2())
            .sum();
        per_query.insert(q.to_string(), dcg / idcg);
    }
    let name = match gain {
        Gain::Linear => format!("nDCG@{k}"),
        Gain::Exponential => format!("nDCG@{k}[exp]"),
    };
    Ok(MetricReport::from_values(name, per_query))
}

pub fn recall_at_n(run: &Run, qrels: &Qrels, n: usize) -> Result<MetricReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut per_query = BTreeMap::new();
    for (q, docs, judged) in evaluable(run, qrels) {
        let relevant = judged.values().filter(|&&g| g > 0).count();
        let found = docs
            .iter()
            .take(n)
            .filter(|d| judged.get(&d.doc_id).is_some_and(|&g| g > 0))
            .count();
        per_query.insert(q.to_string(), found as f64 / relevant as f64);
    }
    Ok(MetricReport::from_values(format!("R@{n}"), per_query))
}
