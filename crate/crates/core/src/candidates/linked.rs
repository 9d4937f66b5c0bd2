use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::CandidateSet;
use crate::kb::{EntityId, KnowledgeBase};

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum EntityRef {
    Id(u64),
    Title(String),
}

#[derive(Debug, Deserialize, Serialize)]
struct Record {
    id: String,
    entities: Vec<EntityRef>,
}

/// Candidate sets keyed by query or document id, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkedCandidates {
    records: Vec<(String, CandidateSet)>,
    by_id: HashMap<String, usize>,
    /// References that did not resolve against the knowledge base.
    pub dropped: usize,
}

impl LinkedCandidates {
    pub fn insert(&mut self, id: String, set: CandidateSet) -> Result<()> {
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateRecord(id));
        }
        self.by_id.insert(id.clone(), self.records.len());
        self.records.push((id, set));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&CandidateSet> {
        self.by_id.get(id).map(|&i| &self.records[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CandidateSet)> {
        self.records.iter().map(|(id, s)| (id.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Resolves each reference (numeric id or title) against `kb`, drops the
/// unresolvable ones and keeps the first occurrence of duplicates.
pub fn read_linked<R: BufRead>(
    reader: R,
    kb: &KnowledgeBase,
    source: &str,
) -> Result<LinkedCandidates> {
    let mut out = LinkedCandidates::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(source, n + 1, e.to_string()))?;
        let mut ids: Vec<EntityId> = Vec::with_capacity(rec.entities.len());
        for r in &rec.entities {
            let resolved = match r {
                EntityRef::Id(id) => kb.contains(*id).then_some(*id),
                EntityRef::Title(t) => kb.resolve(t),
            };
            match resolved {
                Some(id) => ids.push(id),
                None => {
                    out.dropped += 1;
                    warn!(
                        "{source}:{}: unresolved entity reference {r:?} for {}",
                        n + 1,
                        rec.id
                    );
                }
            }
        }
        out.insert(rec.id, CandidateSet::dedup_from(ids))
            .map_err(|e| Error::malformed(source, n + 1, e.to_string()))?;
    }
    Ok(out)
}

pub fn load_linked(path: impl AsRef<Path>, kb: &KnowledgeBase) -> Result<LinkedCandidates> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_linked(BufReader::new(f), kb, &path.display().to_string())
}

/// Writes candidate sets as `{"id": ..., "entities": [<uint>, ...]}` lines.
pub fn write_candidates<'a, W: Write>(
    mut w: W,
    sets: impl IntoIterator<Item = (&'a str, &'a CandidateSet)>,
) -> Result<()> {
    for (id, set) in sets {
        let rec = Record {
            id: id.to_string(),
            entities: set.ids().iter().map(|&i| EntityRef::Id(i)).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
