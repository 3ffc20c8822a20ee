//! Ordered key-value indices with set-oriented GET/PUT/DEL/NEXT.
//!
//! Records are ordered by lexicographic byte order of their keys. NEXT is a
//! strict successor scan: the probe key itself is never returned.
//!
//! Indices are persisted in a paged image:
//!
//! ```text
//! "SAGEIDX1" | version u32 | index id u64 | record count u64 | page*
//! page := body_len u32 | (key_len u32, key, value_len u32, value)* | fnv1a64(body) u64
//! ```

use std::collections::BTreeMap;
use std::ops::Bound;

use serde::{Deserialize, Serialize};

use crate::checksum::fnv1a64;
use crate::error::{Error, Result};
use crate::model::IndexId;

pub const INDEX_MAGIC: &[u8; 8] = b"SAGEIDX1";
pub const INDEX_VERSION: u32 = 1;
const PAGE_TARGET: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Record {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl Record {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelAck {
    Deleted,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Index {
    id: IndexId,
    records: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl Index {
    pub fn new(id: IndexId) -> Self {
        Self {
            id,
            records: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> IndexId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn check_keys<'a>(keys: impl IntoIterator<Item = &'a [u8]>) -> Result<()> {
        for k in keys {
            if k.is_empty() {
                return Err(Error::EmptyKey);
            }
        }
        Ok(())
    }

    /// Inserts or overwrites every record.
    pub fn put(&mut self, records: &[Record]) -> Result<()> {
        Self::check_keys(records.iter().map(|r| r.key.as_slice()))?;
        for r in records {
            self.records.insert(r.key.clone(), r.value.clone());
        }
        Ok(())
    }

    pub fn get<K: AsRef<[u8]>>(&self, keys: &[K]) -> Vec<Option<Vec<u8>>> {
        keys.iter()
            .map(|k| self.records.get(k.as_ref()).cloned())
            .collect()
    }

    pub fn del<K: AsRef<[u8]>>(&mut self, keys: &[K]) -> Vec<DelAck> {
        keys.iter()
            .map(|k| match self.records.remove(k.as_ref()) {
                Some(_) => DelAck::Deleted,
                None => DelAck::NotFound,
            })
            .collect()
    }

    /// Up to `count` records strictly after each probe key.
    pub fn next<K: AsRef<[u8]>>(&self, keys: &[K], count: usize) -> Vec<Vec<Record>> {
        keys.iter()
            .map(|k| {
                self.records
                    .range::<[u8], _>((Bound::Excluded(k.as_ref()), Bound::Unbounded))
                    .take(count)
                    .map(|(k, v)| Record::new(k.clone(), v.clone()))
                    .collect()
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<u8>, &Vec<u8>)> {
        self.records.iter()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.records.len() * 16);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&self.id.0.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        let mut body = Vec::new();
        let flush = |out: &mut Vec<u8>, body: &mut Vec<u8>| {
            out.extend_from_slice(&(body.len() as u32).to_le_bytes());
            out.extend_from_slice(body);
            out.extend_from_slice(&fnv1a64(body).to_le_bytes());
            body.clear();
        };
        for (k, v) in &self.records {
            body.extend_from_slice(&(k.len() as u32).to_le_bytes());
            body.extend_from_slice(k);
            body.extend_from_slice(&(v.len() as u32).to_le_bytes());
            body.extend_from_slice(v);
            if body.len() >= PAGE_TARGET {
                flush(&mut out, &mut body);
            }
        }
        if !body.is_empty() {
            flush(&mut out, &mut body);
        }
        out
    }

    /// Decodes an image produced by [`Index::encode`], returning the index
    /// and the number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize)> {
        let corrupt = |what: &str| Error::CorruptCheckpoint(format!("index image: {what}"));
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).ok_or_else(|| corrupt("truncated header"))? != INDEX_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != INDEX_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let id = IndexId(r.u64().ok_or_else(|| corrupt("truncated header"))?);
        let count = r.u64().ok_or_else(|| corrupt("truncated header"))?;
        let mut index = Index::new(id);
        while (index.records.len() as u64) < count {
            let len = r.u32().ok_or_else(|| corrupt("truncated page"))? as usize;
            let body = r.take(len).ok_or_else(|| corrupt("truncated page"))?;
            let sum = r.u64().ok_or_else(|| corrupt("truncated page"))?;
            if fnv1a64(body) != sum {
                return Err(corrupt("page checksum mismatch"));
            }
            let mut p = Reader { buf: body, pos: 0 };
            while p.pos < body.len() {
                let kl = p.u32().ok_or_else(|| corrupt("bad record"))? as usize;
                let k = p.take(kl).ok_or_else(|| corrupt("bad record"))?.to_vec();
                let vl = p.u32().ok_or_else(|| corrupt("bad record"))? as usize;
                let v = p.take(vl).ok_or_else(|| corrupt("bad record"))?.to_vec();
                index.records.insert(k, v);
            }
        }
        if index.records.len() as u64 != count {
            return Err(corrupt("record count mismatch"));
        }
        Ok((index, r.pos))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn idx() -> Index {
        Index::new(IndexId(7))
    }

    #[test]
    fn put_get_rewrite() {
        let mut i = idx();
        i.put(&[Record::new("a", "1")]).unwrap();
        assert_eq!(i.get(&["a"]), vec![Some(b"1".to_vec())]);
        i.put(&[Record::new("a", "2")]).unwrap();
        assert_eq!(i.get(&["a", "zz"]), vec![Some(b"2".to_vec()), None]);
        i.put(&[]).unwrap();
        assert_eq!(i.len(), 1);
        assert!(i.get::<&str>(&[]).is_empty());
        assert!(matches!(
            i.put(&[Record::new("", "x")]),
            Err(Error::EmptyKey)
        ));
    }

    #[test]
    fn delete_reports_missing() {
        let mut i = idx();
        i.put(&[Record::new("a", "1")]).unwrap();
        assert_eq!(i.del(&["a"]), vec![DelAck::Deleted]);
        assert_eq!(i.get(&["a"]), vec![None]);
        assert_eq!(
            i.del(&["a", "missing"]),
            vec![DelAck::NotFound, DelAck::NotFound]
        );
    }

    #[test]
    fn next_is_strict_successor() {
        let mut i = idx();
        i.put(&[
            Record::new("a", ""),
            Record::new("b", ""),
            Record::new("c", ""),
        ])
        .unwrap();
        let keys = |v: &Vec<Record>| v.iter().map(|r| r.key.clone()).collect::<Vec<_>>();
        let r = i.next(&["a", "c", "bb"], 2);
        assert_eq!(keys(&r[0]), vec![b"b".to_vec(), b"c".to_vec()]);
        assert!(r[1].is_empty());
        assert_eq!(keys(&r[2]), vec![b"c".to_vec()]);
    }

    #[test]
    fn random_gets_match_sorted_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut i = idx();
        let mut oracle = std::collections::BTreeMap::new();
        for _ in 0..2000 {
            let k = vec![rng.gen_range(1u8..40), rng.gen()];
            let v = vec![rng.gen::<u8>(); 3];
            oracle.insert(k.clone(), v.clone());
            i.put(&[Record::new(k, v)]).unwrap();
        }
        let probes: Vec<Vec<u8>> = (0..10_000)
            .map(|_| vec![rng.gen_range(1u8..40), rng.gen()])
            .collect();
        let got = i.get(&probes);
        for (p, g) in probes.iter().zip(got) {
            assert_eq!(g.as_ref(), oracle.get(p));
        }
    }

    #[test]
    fn image_round_trip_and_corruption() {
        let mut i = idx();
        for n in 0..3000u32 {
            i.put(&[Record::new(
                n.to_be_bytes().to_vec(),
                vec![n as u8; (n % 17) as usize],
            )])
            .unwrap();
        }
        let img = i.encode();
        let (back, used) = Index::decode(&img).unwrap();
        assert_eq!(back, i);
        assert_eq!(used, img.len());
        let mut bad = img.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0xff;
        assert!(Index::decode(&bad).is_err());
        assert!(Index::decode(&img[..img.len() - 3]).is_err());
        let (empty, _) = Index::decode(&idx().encode()).unwrap();
        assert!(empty.is_empty());
    }
}
