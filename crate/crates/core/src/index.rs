//! Inverted index over document sparse vectors with exact top-k search.
//!
//! Search is term-at-a-time with one `f64` accumulator per document for the
//! word range and one for the entity range. Query terms are visited in
//! ascending id, so every document receives its products in the same order
//! as [`crate::sparse::dot`] and scores are bit-identical to it.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio::{self, Cursor};
use crate::error::{Error, Result};
use crate::sparse::{ScoredDoc, SparseVector, TermId, VocabularyLayout};

const INDEX_MAGIC: &[u8; 8] = b"DYVOIDX1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posting {
    pub doc_ordinal: u32,
    pub weight: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    layout: VocabularyLayout,
    doc_ids: Vec<String>,
    postings: BTreeMap<TermId, Vec<Posting>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexStats {
    pub doc_count: usize,
    pub term_count: usize,
    pub postings_count: usize,
    pub mean_doc_l0: f64,
}

impl InvertedIndex {
    pub fn build<I, S>(layout: VocabularyLayout, docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, SparseVector)>,
        S: Into<String>,
    {
        let mut idx = InvertedIndex {
            layout,
            doc_ids: Vec::new(),
            postings: BTreeMap::new(),
        };
        let mut seen = HashSet::new();
        for (id, v) in docs {
            let id = id.into();
            if v.layout() != layout {
                return Err(Error::LayoutMismatch(format!(
                    "document {id:?} has layout {:?}, index has {:?}",
                    v.layout(),
                    layout
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateDoc(id));
            }
            let ordinal = idx.doc_ids.len() as u32;
            for &(t, w) in v.entries() {
                idx.postings.entry(t).or_default().push(Posting {
                    doc_ordinal: ordinal,
                    weight: w,
                });
            }
            idx.doc_ids.push(id);
        }
        Ok(idx)
    }

    pub fn layout(&self) -> VocabularyLayout {
        self.layout
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn postings(&self, term: TermId) -> &[Posting] {
        self.postings.get(&term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = (TermId, &[Posting])> {
        self.postings.iter().map(|(&t, p)| (t, p.as_slice()))
    }

    /// Exact top-k by dot product; ties broken by ascending external doc id.
    pub fn search(&self, q: &SparseVector, k: usize) -> Result<Vec<ScoredDoc>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if q.layout() != self.layout {
            return Err(Error::LayoutMismatch(format!(
                "query layout {:?}, index layout {:?}",
                q.layout(),
                self.layout
            )));
        }
        let n = self.doc_ids.len();
        let mut word_acc = vec![0.0f64; n];
        let mut entity_acc = vec![0.0f64; n];
        let mut touched = vec![false; n];
        let mut matched = Vec::new();

        let offset = self.layout.entity_offset();
        for &(t, qw) in q.entries() {
            let acc = if t < offset {
                &mut word_acc
            } else {
                &mut entity_acc
            };
            for p in self.postings(t) {
                let o = p.doc_ordinal as usize;
                acc[o] += qw as f64 * p.weight as f64;
                if !touched[o] {
                    touched[o] = true;
                    matched.push(o);
                }
            }
        }

        let mut scored: Vec<(f64, usize)> = matched
            .into_iter()
            .map(|o| (word_acc[o] + entity_acc[o], o))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.doc_ids[a.1].cmp(&self.doc_ids[b.1]))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, o)| ScoredDoc {
                doc_id: self.doc_ids[o].clone(),
                score,
            })
            .collect())
    }

    pub fn stats(&self) -> IndexStats {
        let postings_count: usize = self.postings.values().map(Vec::len).sum();
        let doc_count = self.doc_ids.len();
        IndexStats {
            doc_count,
            term_count: self.postings.len(),
            postings_count,
            mean_doc_l0: if doc_count == 0 {
                0.0
            } else {
                postings_count as f64 / doc_count as f64
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.write_u32::<LittleEndian>(self.layout.word_vocab_size)
            .unwrap();
        out.write_u32::<LittleEndian>(self.layout.entity_count)
            .unwrap();
        out.write_u32::<LittleEndian>(self.doc_ids.len() as u32)
            .unwrap();
        for id in &self.doc_ids {
            binio::write_string(&mut out, id).unwrap();
        }
        out.write_u32::<LittleEndian>(self.postings.len() as u32)
            .unwrap();
        for (&t, list) in &self.postings {
            out.write_u32::<LittleEndian>(t).unwrap();
            out.write_u32::<LittleEndian>(list.len() as u32).unwrap();
            for p in list {
                out.write_u32::<LittleEndian>(p.doc_ordinal).unwrap();
                out.write_f32::<LittleEndian>(p.weight).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        cur.magic(INDEX_MAGIC)?;
        let layout = VocabularyLayout::new(cur.u32()?, cur.u32()?)?;
        let doc_count = cur.u32()? as usize;
        let mut doc_ids = Vec::with_capacity(doc_count.min(1 << 20));
        let mut seen = HashSet::new();
        for _ in 0..doc_count {
            let id = cur.string()?;
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateDoc(id));
            }
            doc_ids.push(id);
        }
        let term_count = cur.u32()? as usize;
        let mut postings = BTreeMap::new();
        let mut prev_term: Option<TermId> = None;
        for _ in 0..term_count {
            let term = cur.u32()?;
            layout.check(term)?;
            if prev_term.is_some_and(|p| p >= term) {
                return Err(Error::InvalidArgument(format!(
                    "term {term} out of order in index file"
                )));
            }
            prev_term = Some(term);
            let len = cur.u32()? as usize;
            let mut list = Vec::with_capacity(len.min(doc_count));
            for _ in 0..len {
                let doc_ordinal = cur.u32()?;
                let weight = cur.f32()?;
                if doc_ordinal as usize >= doc_count {
                    return Err(Error::InvalidArgument(format!(
                        "posting ordinal {doc_ordinal} exceeds document count {doc_count}"
                    )));
                }
                if !(weight.is_finite() && weight > 0.0) {
                    return Err(Error::InvalidWeight {
                        term,
                        weight: weight as f64,
                    });
                }
                if list
                    .last()
                    .is_some_and(|p: &Posting| p.doc_ordinal >= doc_ordinal)
                {
                    return Err(Error::InvalidArgument(format!(
                        "posting list of term {term} is not strictly ascending"
                    )));
                }
                list.push(Posting {
                    doc_ordinal,
                    weight,
                });
            }
            postings.insert(term, list);
        }
        cur.finish()?;
        Ok(Self {
            layout,
            doc_ids,
            postings,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = binio::create(path)?;
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }
}
