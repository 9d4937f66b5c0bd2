//! Entity knowledge base, frozen entity embeddings and the projection that
//! maps entity embeddings into the encoder's hidden space.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::binio::{self, Cursor};
use crate::error::{Error, Result};

pub type EntityId = u64;

const EMBEDDING_MAGIC: &[u8; 8] = b"DYVOEMB1";
const PROJECTION_MAGIC: &[u8; 8] = b"DYVOPRJ1";
const EMBEDDING_VERSION: u32 = 1;

/// NFC, trimmed, internal whitespace runs collapsed to one space.
/// Case is preserved: "Who" and "WHO" are different titles.
pub fn normalize_title(title: &str) -> String {
    let nfc: String = title.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: EntityId,
    pub title: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    by_id: HashMap<EntityId, usize>,
    title_index: HashMap<String, EntityId>,
}

impl KnowledgeBase {
    pub fn new(entities: impl IntoIterator<Item = Entity>) -> Result<Self> {
        let mut kb = KnowledgeBase::default();
        for entity in entities {
            kb.push(entity)?;
        }
        Ok(kb)
    }

    fn push(&mut self, entity: Entity) -> Result<()> {
        let key = normalize_title(&entity.title);
        if key.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "entity {} has an empty title",
                entity.entity_id
            )));
        }
        if self.by_id.contains_key(&entity.entity_id) {
            return Err(Error::DuplicateEntityId(entity.entity_id));
        }
        if let Some(&first) = self.title_index.get(&key) {
            return Err(Error::DuplicateTitle {
                title: key,
                first,
                second: entity.entity_id,
            });
        }
        self.by_id.insert(entity.entity_id, self.entities.len());
        self.title_index.insert(key, entity.entity_id);
        self.entities.push(entity);
        Ok(())
    }

    pub fn from_reader<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut kb = KnowledgeBase::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entity: Entity = serde_json::from_str(&line)
                .map_err(|e| Error::malformed(source, n + 1, e.to_string()))?;
            kb.push(entity).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::malformed(source, n + 1, m),
                other => other,
            })?;
        }
        Ok(kb)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entities {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn get(&self, id: EntityId) -> Option<&Entity> {
        self.by_id.get(&id).map(|&i| &self.entities[i])
    }

    pub fn contains(&self, id: EntityId) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Resolves a raw title (normalized here) to its entity id.
    pub fn resolve(&self, title: &str) -> Option<EntityId> {
        self.title_index.get(&normalize_title(title)).copied()
    }

    pub fn title_index(&self) -> &HashMap<String, EntityId> {
        &self.title_index
    }
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    KnowledgeBase::from_reader(BufReader::new(file), &path.display().to_string())
}

/// Entities of `kb` that have an embedding row, in `kb` order.
pub fn intersect_with_embeddings(kb: &KnowledgeBase, emb: &EmbeddingTable) -> KnowledgeBase {
    let kept = kb
        .entities
        .iter()
        .filter(|e| emb.contains(e.entity_id))
        .cloned();
    KnowledgeBase::new(kept).expect("subset of a valid knowledge base is valid")
}

/// Dense slot numbering of the entity vocabulary, ascending by entity id.
/// Slot `s` maps to term id `entity_offset + s` in the joint space.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityVocabulary {
    ids: Vec<EntityId>,
    slots: HashMap<EntityId, u32>,
}

impl EntityVocabulary {
    pub fn new(ids: impl IntoIterator<Item = EntityId>) -> Self {
        let mut ids: Vec<EntityId> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        let slots = ids
            .iter()
            .enumerate()
            .map(|(slot, &id)| (id, slot as u32))
            .collect();
        Self { ids, slots }
    }

    pub fn from_kb(kb: &KnowledgeBase) -> Self {
        Self::new(kb.entities.iter().map(|e| e.entity_id))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slot(&self, id: EntityId) -> Option<u32> {
        self.slots.get(&id).copied()
    }

    pub fn entity(&self, slot: u32) -> Option<EntityId> {
        self.ids.get(slot as usize).copied()
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.ids
    }
}

/// Frozen entity embeddings keyed by entity id. Record order is kept so that
/// re-serialization reproduces the input bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<EntityId>,
    data: Vec<f32>,
    index: HashMap<EntityId, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding dim must be positive".into(),
            ));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn insert(&mut self, id: EntityId, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension {
                context: "embedding row",
                expected: self.dim,
                actual: row.len(),
            });
        }
        if let Some(bad) = row.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                value: *bad as f64,
                context: format!("embedding of entity {id}"),
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateEntityId(id));
        }
        self.index.insert(id, self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.ids
    }

    pub fn contains(&self, id: EntityId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn row(&self, id: EntityId) -> Option<&[f32]> {
        self.index
            .get(&id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        cur.magic(EMBEDDING_MAGIC)?;
        let version = cur.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Version(version));
        }
        let count = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let expected = cur.position() as u64 + count as u64 * (8 + 4 * dim as u64);
        if expected != buf.len() as u64 {
            return Err(Error::PayloadLength {
                expected,
                actual: buf.len() as u64,
            });
        }
        let mut table = EmbeddingTable::new(dim)?;
        for _ in 0..count {
            let id = cur.u64()?;
            let row = cur.f32s(dim, &format!("embedding of entity {id}"))?;
            table.insert(id, &row)?;
        }
        cur.finish()?;
        Ok(table)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.ids.len() * (8 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.write_u32::<LittleEndian>(EMBEDDING_VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.ids.len() as u32)
            .unwrap();
        out.write_u32::<LittleEndian>(self.dim as u32).unwrap();
        for (i, &id) in self.ids.iter().enumerate() {
            out.write_u64::<LittleEndian>(id).unwrap();
            binio::write_f32s(
                &mut out,
                self.data[i * self.dim..(i + 1) * self.dim].iter().copied(),
            )
            .unwrap();
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = binio::create(path)?;
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::from_bytes(&binio::read_file(path.as_ref())?)
}

/// Affine map `x · weight + bias` from entity-embedding space (`d_in`) to the
/// encoder hidden space (`d_out`). `weight` is row-major `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    d_in: usize,
    d_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    identity: bool,
}

impl Projection {
    pub fn identity(dim: usize) -> Self {
        Self {
            d_in: dim,
            d_out: dim,
            weight: Vec::new(),
            bias: Vec::new(),
            identity: true,
        }
    }

    pub fn affine(d_in: usize, d_out: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != d_in * d_out {
            return Err(Error::Dimension {
                context: "projection weight",
                expected: d_in * d_out,
                actual: weight.len(),
            });
        }
        if bias.len() != d_out {
            return Err(Error::Dimension {
                context: "projection bias",
                expected: d_out,
                actual: bias.len(),
            });
        }
        if let Some(bad) = weight.iter().chain(&bias).find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                value: *bad,
                context: "projection".into(),
            });
        }
        Ok(Self {
            d_in,
            d_out,
            weight,
            bias,
            identity: false,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.d_in {
            return Err(Error::Dimension {
                context: "projection input",
                expected: self.d_in,
                actual: v.len(),
            });
        }
        if self.identity {
            return Ok(v.to_vec());
        }
        let mut out = self.bias.clone();
        for (x, row) in v.iter().zip(self.weight.chunks_exact(self.d_out)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        Ok(out)
    }

    pub fn apply_f32(&self, v: &[f32]) -> Result<Vec<f64>> {
        let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        self.apply(&wide)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PROJECTION_MAGIC);
        out.write_u32::<LittleEndian>(self.d_in as u32).unwrap();
        out.write_u32::<LittleEndian>(self.d_out as u32).unwrap();
        out.write_u8(self.identity as u8).unwrap();
        if !self.identity {
            binio::write_f32s(&mut out, self.weight.iter().map(|&x| x as f32)).unwrap();
            binio::write_f32s(&mut out, self.bias.iter().map(|&x| x as f32)).unwrap();
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        cur.magic(PROJECTION_MAGIC)?;
        let d_in = cur.u32()? as usize;
        let d_out = cur.u32()? as usize;
        let identity = match cur.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "identity flag must be 0 or 1, found {other}"
                )))
            }
        };
        if identity {
            if d_in != d_out {
                return Err(Error::Dimension {
                    context: "identity projection",
                    expected: d_in,
                    actual: d_out,
                });
            }
            cur.finish()?;
            return Ok(Self::identity(d_in));
        }
        let expected = cur.position() as u64 + 4 * (d_in * d_out + d_out) as u64;
        if expected != buf.len() as u64 {
            return Err(Error::PayloadLength {
                expected,
                actual: buf.len() as u64,
            });
        }
        let weight = cur.f32s(d_in * d_out, "projection weight")?;
        let bias = cur.f32s(d_out, "projection bias")?;
        cur.finish()?;
        Self::affine(
            d_in,
            d_out,
            weight.into_iter().map(f64::from).collect(),
            bias.into_iter().map(f64::from).collect(),
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

pub fn load_projection(path: impl AsRef<Path>) -> Result<Projection> {
    Projection::from_bytes(&binio::read_file(path.as_ref())?)
}

pub fn project(p: &Projection, v: &[f64]) -> Result<Vec<f64>> {
    p.apply(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn entity(id: u64, title: &str) -> Entity {
        Entity {
            entity_id: id,
            title: title.into(),
            description: String::new(),
        }
    }

    fn kb_from_lines(text: &str) -> Result<KnowledgeBase> {
        KnowledgeBase::from_reader(text.as_bytes(), "test")
    }

    #[test]
    fn loads_three_entities() {
        let kb = kb_from_lines(
            r#"{"entity_id": 1, "title": "Bitcoin", "description": "A cryptocurrency"}
{"entity_id": 2, "title": "Ethereum", "description": ""}
{"entity_id": 3, "title": "Blockchain", "description": "Ledger"}
"#,
        )
        .unwrap();
        assert_eq!(kb.len(), 3);
        assert_eq!(kb.title_index().len(), 3);
        assert_eq!(kb.resolve("Ethereum"), Some(2));
    }

    #[test]
    fn empty_file_is_empty_kb() {
        let kb = kb_from_lines("").unwrap();
        assert!(kb.is_empty());
    }

    #[test]
    fn duplicate_title_rejected() {
        let err = kb_from_lines(
            r#"{"entity_id": 1, "title": "Bitcoin", "description": ""}
{"entity_id": 2, "title": "Bitcoin", "description": ""}"#,
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                Error::DuplicateTitle {
                    first: 1,
                    second: 2,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn duplicate_title_after_normalization_rejected() {
        let err = KnowledgeBase::new([
            entity(1, "Treaty of  Paris"),
            entity(2, " Treaty of Paris "),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateTitle { .. }));
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = KnowledgeBase::new([entity(7, "A"), entity(7, "B")]).unwrap_err();
        assert!(matches!(err, Error::DuplicateEntityId(7)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = kb_from_lines("{\"entity_id\": 1, \"title\": \"A\"}\nnot json\n").unwrap_err();
        match err {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn normalization_is_case_sensitive_and_nfc() {
        assert_eq!(
            normalize_title("  Who \t  Framed\nRoger "),
            "Who Framed Roger"
        );
        assert_ne!(normalize_title("Who"), normalize_title("WHO"));
        // "é" as e + combining acute vs precomposed
        assert_eq!(
            normalize_title("Caf\u{65}\u{301}"),
            normalize_title("Caf\u{e9}")
        );
    }

    fn table(dim: usize, rows: &[(u64, Vec<f32>)]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(dim).unwrap();
        for (id, r) in rows {
            t.insert(*id, r).unwrap();
        }
        t
    }

    #[test]
    fn embedding_round_trip() {
        let t = table(
            4,
            &[
                (10, vec![1.0, 2.0, 3.0, 4.0]),
                (3, vec![-0.5, 0.0, 1e-30, 7.25]),
            ],
        );
        let bytes = t.to_bytes();
        let back = EmbeddingTable::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.dim(), 4);
        assert_eq!(back.row(3).unwrap(), &[-0.5, 0.0, 1e-30, 7.25]);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn embedding_dim_300_header() {
        let t = table(300, &[(1, vec![0.1; 300])]);
        let back = EmbeddingTable::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.dim(), 300);
    }

    #[test]
    fn truncated_embedding_payload_reports_sizes() {
        let t = table(4, &[(1, vec![1.0; 4]), (2, vec![2.0; 4])]);
        let mut bytes = t.to_bytes();
        let full = bytes.len() as u64;
        bytes.truncate(bytes.len() - 4);
        match EmbeddingTable::from_bytes(&bytes).unwrap_err() {
            Error::PayloadLength { expected, actual } => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 4);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = table(2, &[(1, vec![1.0, 2.0])]).to_bytes();
        bytes.push(0);
        assert!(matches!(
            EmbeddingTable::from_bytes(&bytes),
            Err(Error::PayloadLength { .. })
        ));
    }

    #[test]
    fn bad_magic_and_non_finite_rejected() {
        let mut bytes = table(2, &[(1, vec![1.0, 2.0])]).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingTable::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));

        let mut bytes = table(2, &[(1, vec![1.0, 2.0])]).to_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            EmbeddingTable::from_bytes(&bytes),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn intersect_examples() {
        let kb = KnowledgeBase::new([entity(1, "A"), entity(2, "B"), entity(3, "C")]).unwrap();
        let emb = table(1, &[(2, vec![1.0]), (3, vec![1.0]), (5, vec![1.0])]);
        let out = intersect_with_embeddings(&kb, &emb);
        let ids: Vec<_> = out.entities().iter().map(|e| e.entity_id).collect();
        assert_eq!(ids, vec![2, 3]);

        let empty = EmbeddingTable::new(1).unwrap();
        assert!(intersect_with_embeddings(&kb, &empty).is_empty());
    }

    #[test]
    fn intersect_matches_brute_force_membership() {
        let kb = KnowledgeBase::new((0..10).map(|i| entity(i * 3, &format!("E{i}")))).unwrap();
        // 7 of these ids overlap the KB, plus some that do not
        let emb_ids = [0u64, 3, 6, 9, 12, 15, 18, 1, 100, 1000];
        let emb = table(
            2,
            &emb_ids
                .iter()
                .map(|&i| (i, vec![0.0, 1.0]))
                .collect::<Vec<_>>(),
        );
        let out = intersect_with_embeddings(&kb, &emb);

        let mut expected = BTreeSet::new();
        for e in kb.entities() {
            let mut found = false;
            for &id in &emb_ids {
                if id == e.entity_id {
                    found = true;
                }
            }
            if found {
                expected.insert(e.entity_id);
            }
        }
        let got: BTreeSet<_> = out.entities().iter().map(|e| e.entity_id).collect();
        assert_eq!(got.len(), 7);
        assert_eq!(got, expected);
    }

    #[test]
    fn projection_examples() {
        let id = Projection::identity(3);
        assert_eq!(id.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);

        let zero = Projection::affine(3, 2, vec![0.0; 6], vec![0.25, -1.0]).unwrap();
        assert_eq!(zero.apply(&[9.0, -4.0, 2.0]).unwrap(), vec![0.25, -1.0]);

        let p = Projection::affine(2, 2, vec![1.0, 0.0, 1.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(p.apply(&[2.0, 3.0]).unwrap(), vec![5.0, 4.0]);

        assert!(matches!(p.apply(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn projection_file_round_trip() {
        let p = Projection::affine(
            2,
            3,
            vec![1.0, 0.5, -2.0, 0.0, 3.0, 0.25],
            vec![0.0, 1.0, -1.0],
        )
        .unwrap();
        assert_eq!(Projection::from_bytes(&p.to_bytes()).unwrap(), p);
        let id = Projection::identity(5);
        assert_eq!(Projection::from_bytes(&id.to_bytes()).unwrap(), id);
    }

    proptest! {
        #[test]
        fn title_resolution_is_total(titles in proptest::collection::btree_set("[A-Za-z][A-Za-z ()0-9]{0,12}", 1..30)) {
            let mut seen = BTreeSet::new();
            let entities: Vec<_> = titles
                .iter()
                .filter(|t| seen.insert(normalize_title(t)))
                .enumerate()
                .map(|(i, t)| entity(i as u64, t))
                .collect();
            let kb = KnowledgeBase::new(entities.clone()).unwrap();
            for e in &entities {
                prop_assert_eq!(kb.title_index().get(&normalize_title(&e.title)).copied(), Some(e.entity_id));
            }
        }

        #[test]
        fn embedding_bytes_round_trip(
            dim in 1usize..6,
            raw in proptest::collection::btree_map(any::<u64>(), proptest::collection::vec(-1e6f32..1e6, 6), 0..20),
        ) {
            let mut t = EmbeddingTable::new(dim).unwrap();
            for (id, row) in &raw {
                t.insert(*id, &row[..dim]).unwrap();
            }
            let bytes = t.to_bytes();
            prop_assert_eq!(EmbeddingTable::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }

        #[test]
        fn intersect_idempotent_and_order_free(
            kb_ids in proptest::collection::btree_set(0u64..50, 0..30),
            emb_ids in proptest::collection::btree_set(0u64..50, 0..30),
        ) {
            let kb = KnowledgeBase::new(kb_ids.iter().map(|&i| entity(i, &format!("T{i}")))).unwrap();
            let rev = KnowledgeBase::new(kb_ids.iter().rev().map(|&i| entity(i, &format!("T{i}")))).unwrap();
            let mut emb = EmbeddingTable::new(1).unwrap();
            for &i in &emb_ids {
                emb.insert(i, &[1.0]).unwrap();
            }
            let once = intersect_with_embeddings(&kb, &emb);
            let twice = intersect_with_embeddings(&once, &emb);
            prop_assert_eq!(once.entities(), twice.entities());
            let a: BTreeSet<_> = once.entities().iter().map(|e| e.entity_id).collect();
            let b: BTreeSet<_> = intersect_with_embeddings(&rev, &emb).entities().iter().map(|e| e.entity_id).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn projection_is_affine(
            w in proptest::collection::vec(-2.0f64..2.0, 12),
            bias in proptest::collection::vec(-2.0f64..2.0, 3),
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            y in proptest::collection::vec(-5.0f64..5.0, 4),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let p = Projection::affine(4, 3, w.clone(), bias.clone()).unwrap();
            let p0 = Projection::affine(4, 3, w, vec![0.0; 3]).unwrap();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let lhs = p.apply(&mix).unwrap();
            let px = p0.apply(&x).unwrap();
            let py = p0.apply(&y).unwrap();
            for k in 0..3 {
                let rhs = a * px[k] + b * py[k] + bias[k];
                let scale = lhs[k].abs().max(rhs.abs()).max(1.0);
                prop_assert!((lhs[k] - rhs).abs() <= 1e-6 * scale);
            }
        }
    }
}
