//! EMB1 embedding files and the in-memory matrices served from them.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EMB1" | u32 version = 1 | u8 space tag | u32 dim | u32 count
//! count x (u16 id length, id bytes as UTF-8)
//! count x dim f32 values, row-major, in id order
//! ```
//!
//! A JSONL variant (`{"id", "space", "vector"}` per line) is accepted for
//! debugging.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Space;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;

/// Rows whose norm deviates from 1 by more than this are rejected on load.
pub const NORM_ACCEPT_BAND: f64 = 1e-2;

/// Unit-norm dense vectors for one space, keyed by question id.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    space: Space,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

/// What a load observed before renormalizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub rows: usize,
    pub max_norm_deviation: f64,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.space == other.space && self.dim == other.dim && self.ids == other.ids && self.data == other.data
    }
}

impl EmbeddingMatrix {
    /// Builds a matrix from raw rows, enforcing the load invariants: ids
    /// unique, every row nonzero and within the accepted norm band, then
    /// renormalized to unit length.
    pub fn from_rows(space: Space, dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        Self::from_rows_with_stats(space, dim, ids, data).map(|(m, _)| m)
    }

    fn from_rows_with_stats(
        space: Space,
        dim: usize,
        ids: Vec<String>,
        mut data: Vec<f32>,
    ) -> Result<(Self, LoadStats)> {
        if dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimMismatch {
                expected: ids.len() * dim,
                found: data.len(),
                context: "value count vs count x dim".into(),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate id `{id}` in {space} matrix")));
            }
        }
        let mut stats = LoadStats {
            rows: ids.len(),
            max_norm_deviation: 0.0,
        };
        for (row, id) in data.chunks_exact_mut(dim).zip(&ids) {
            let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Norm { id: id.clone(), norm });
            }
            if norm == 0.0 {
                return Err(Error::ZeroVector { id: id.clone() });
            }
            let deviation = (norm - 1.0).abs();
            if deviation > NORM_ACCEPT_BAND {
                return Err(Error::Norm { id: id.clone(), norm });
            }
            stats.max_norm_deviation = stats.max_norm_deviation.max(deviation);
            for x in row.iter_mut() {
                *x = ((*x as f64) / norm) as f32;
            }
        }
        Ok((
            Self {
                space,
                dim,
                ids,
                data,
                index,
            },
            stats,
        ))
    }

    pub fn space(&self) -> Space {
        self.space
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn lookup(&self, id: &str) -> Result<&[f32]> {
        self.index
            .get(id)
            .map(|&i| self.row(i))
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// A new matrix restricted to `ids`, in the given order. Fails on the
    /// first id that is not present.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut out_ids = Vec::new();
        let mut data = Vec::new();
        let mut index = HashMap::new();
        for id in ids {
            if index.contains_key(id) {
                continue;
            }
            let row = self.lookup(id)?;
            index.insert(id.to_string(), out_ids.len());
            out_ids.push(id.to_string());
            data.extend_from_slice(row);
        }
        Ok(Self {
            space: self.space,
            dim: self.dim,
            ids: out_ids,
            data,
            index,
        })
    }

    pub fn to_emb1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.ids.iter().map(|s| s.len() + 2).sum::<usize>() + self.data.len() * 4);
        out.extend_from_slice(EMB1_MAGIC);
        out.extend_from_slice(&EMB1_VERSION.to_le_bytes());
        out.push(self.space.tag());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn write_emb1(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_emb1_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for (id, row) in self.rows() {
            let line = serde_json::to_string(&JsonlRow {
                id: id.to_string(),
                space: self.space,
                vector: row.to_vec(),
            })
            .expect("row serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    id: String,
    space: Space,
    vector: Vec<f32>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn parse_emb1(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    parse_emb1_with_stats(bytes).map(|(m, _)| m)
}

fn parse_emb1_with_stats(bytes: &[u8]) -> Result<(EmbeddingMatrix, LoadStats)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != EMB1_MAGIC {
        return Err(Error::Format("bad magic (expected \"EMB1\")".into()));
    }
    let version = c.u32("version")?;
    if version != EMB1_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tag = c.take(1, "space tag")?[0];
    let space = Space::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown space tag {tag}")))?;
    let dim = c.u32("dim")? as usize;
    let count = c.u32("count")? as usize;

    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = c.u16("id length")? as usize;
        let raw = c.take(len, "id")?;
        let id = std::str::from_utf8(raw).map_err(|_| Error::Format("id is not valid UTF-8".into()))?;
        ids.push(id.to_string());
    }
    let remaining = bytes.len() - c.pos;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    if remaining != expected {
        return Err(Error::DimMismatch {
            expected,
            found: remaining,
            context: format!("vector payload bytes for {count} x {dim}"),
        });
    }
    let data = bytes[c.pos..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::from_rows_with_stats(space, dim, ids, data)
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<EmbeddingMatrix> {
    parse_jsonl_with_stats(reader).map(|(m, _)| m)
}

fn parse_jsonl_with_stats(reader: impl BufRead) -> Result<(EmbeddingMatrix, LoadStats)> {
    let mut space = None;
    let mut dim = None;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        match space {
            None => space = Some(row.space),
            Some(s) if s != row.space => {
                return Err(Error::Format(format!(
                    "line {}: space {} differs from {s}",
                    lineno + 1,
                    row.space
                )))
            }
            _ => {}
        }
        match dim {
            None => dim = Some(row.vector.len()),
            Some(d) if d != row.vector.len() => {
                return Err(Error::DimMismatch {
                    expected: d,
                    found: row.vector.len(),
                    context: format!("row `{}`", row.id),
                })
            }
            _ => {}
        }
        ids.push(row.id);
        data.extend(row.vector);
    }
    let space = space.ok_or_else(|| Error::Format("empty JSONL embedding file".into()))?;
    EmbeddingMatrix::from_rows_with_stats(space, dim.unwrap_or(0), ids, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    #[default]
    Emb1,
    Jsonl,
}

pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    load_matrix_as(path, EmbeddingFormat::Emb1)
}

pub fn load_matrix_as(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingMatrix> {
    load_with_stats(path, format).map(|(m, _)| m)
}

/// Loads a file and reports what it looked like before normalization.
pub fn load_with_stats(path: &Path, format: EmbeddingFormat) -> Result<(EmbeddingMatrix, LoadStats)> {
    match format {
        EmbeddingFormat::Emb1 => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_emb1_with_stats(&bytes)
        }
        EmbeddingFormat::Jsonl => {
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            parse_jsonl_with_stats(BufReader::new(f))
        }
    }
}

/// Conventional file name for a space inside an embedding directory.
pub fn file_name(space: Space, format: EmbeddingFormat) -> String {
    match format {
        EmbeddingFormat::Emb1 => format!("{}.emb1", space.as_str()),
        EmbeddingFormat::Jsonl => format!("{}.jsonl", space.as_str()),
    }
}

/// Every loaded matrix, keyed by space.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSet {
    matrices: HashMap<Space, EmbeddingMatrix>,
}

impl EmbeddingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, matrix: EmbeddingMatrix) -> Result<()> {
        for other in self.matrices.values() {
            if other.space != matrix.space && other.space.comparable_with(matrix.space) && other.dim != matrix.dim {
                return Err(Error::DimMismatch {
                    expected: other.dim,
                    found: matrix.dim,
                    context: format!("{} vs {} share a comparison space", other.space, matrix.space),
                });
            }
        }
        self.matrices.insert(matrix.space, matrix);
        Ok(())
    }

    pub fn get(&self, space: Space) -> Option<&EmbeddingMatrix> {
        self.matrices.get(&space)
    }

    /// Loads whichever of the four conventional files exist in `dir`.
    pub fn load_dir(dir: &Path, format: EmbeddingFormat) -> Result<Self> {
        let mut set = Self::new();
        for space in Space::ALL {
            let path = dir.join(file_name(space, format));
            if path.exists() {
                let m = load_matrix_as(&path, format)?;
                if m.space != space {
                    return Err(Error::Format(format!(
                        "{} declares space {}, expected {space}",
                        path.display(),
                        m.space
                    )));
                }
                set.insert(m)?;
            }
        }
        Ok(set)
    }

    /// Writes every matrix under its conventional name.
    pub fn write_dir(&self, dir: &Path, format: EmbeddingFormat) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for space in self.spaces() {
            let m = &self.matrices[&space];
            let path = dir.join(file_name(space, format));
            match format {
                EmbeddingFormat::Emb1 => m.write_emb1(&path)?,
                EmbeddingFormat::Jsonl => m.write_jsonl(&path)?,
            }
        }
        Ok(())
    }

    pub fn spaces(&self) -> impl Iterator<Item = Space> + '_ {
        let mut s: Vec<_> = self.matrices.keys().copied().collect();
        s.sort();
        s.into_iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("q{i}")).collect()
    }

    /// Writes EMB1 bytes by hand, independent of `to_emb1_bytes`.
    fn reference_bytes(space_tag: u8, dim: u32, ids: &[&str], values: &[f32]) -> Vec<u8> {
        let mut b = b"EMB1".to_vec();
        b.extend(1u32.to_le_bytes());
        b.push(space_tag);
        b.extend(dim.to_le_bytes());
        b.extend((ids.len() as u32).to_le_bytes());
        for id in ids {
            b.extend((id.len() as u16).to_le_bytes());
            b.extend(id.as_bytes());
        }
        for v in values {
            b.extend(v.to_le_bytes());
        }
        b
    }

    #[test]
    fn well_formed_file_loads() {
        let bytes = reference_bytes(2, 4, &["a", "b"], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.6, 0.8, 0.0]);
        let m = parse_emb1(&bytes).unwrap();
        assert_eq!(m.dim(), 4);
        assert_eq!(m.len(), 2);
        assert_eq!(m.space(), Space::CrossText);
        assert_eq!(m.lookup("a").unwrap(), m.row(0));
        assert_eq!(m.to_emb1_bytes(), bytes);
    }

    #[test]
    fn slightly_off_norm_is_renormalized() {
        let bytes = reference_bytes(0, 2, &["a"], &[1.005, 0.0]);
        let m = parse_emb1(&bytes).unwrap();
        let norm = m.row(0).iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn zero_row_rejected() {
        let bytes = reference_bytes(0, 2, &["a", "dead"], &[1.0, 0.0, 0.0, 0.0]);
        match parse_emb1(&bytes).unwrap_err() {
            Error::ZeroVector { id } => assert_eq!(id, "dead"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn out_of_band_norm_rejected() {
        let bytes = reference_bytes(0, 2, &["a"], &[1.5, 0.0]);
        assert!(matches!(parse_emb1(&bytes).unwrap_err(), Error::Norm { ref id, .. } if id == "a"));
    }

    #[test]
    fn bad_header_and_payload() {
        let mut bytes = reference_bytes(0, 2, &["a"], &[1.0, 0.0]);
        assert!(matches!(parse_emb1(&bytes[..bytes.len() - 1]).unwrap_err(), Error::DimMismatch { .. }));
        bytes[0] = b'X';
        assert!(matches!(parse_emb1(&bytes).unwrap_err(), Error::Format(_)));
        let mut v2 = reference_bytes(0, 2, &["a"], &[1.0, 0.0]);
        v2[4] = 2;
        assert!(matches!(parse_emb1(&v2).unwrap_err(), Error::Format(_)));
        let bad_tag = reference_bytes(9, 2, &["a"], &[1.0, 0.0]);
        assert!(matches!(parse_emb1(&bad_tag).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn lookup_unknown_id() {
        let m = EmbeddingMatrix::from_rows(Space::IntraText, 2, ids(1), vec![0.0, 1.0]).unwrap();
        assert!(matches!(m.lookup("zzz").unwrap_err(), Error::UnknownId(ref id) if id == "zzz"));
    }

    #[test]
    fn thousand_rows_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dim = 16;
        let n = 1000;
        let mut original = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let row: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            original.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
        }
        let id_list = ids(n);
        let id_refs: Vec<&str> = id_list.iter().map(String::as_str).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb1");
        std::fs::write(&path, reference_bytes(1, dim as u32, &id_refs, &original)).unwrap();

        let m = load_matrix(&path).unwrap();
        for (i, id) in id_list.iter().enumerate() {
            let got = m.lookup(id).unwrap();
            for (a, b) in got.iter().zip(&original[i * dim..(i + 1) * dim]) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn jsonl_variant() {
        let m = EmbeddingMatrix::from_rows(Space::IntraImage, 3, ids(2), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        m.write_jsonl(&path).unwrap();
        assert_eq!(load_matrix_as(&path, EmbeddingFormat::Jsonl).unwrap(), m);

        let bad = "{\"id\":\"a\",\"space\":\"intra_text\",\"vector\":[1.0,0.0]}\n{\"id\":\"b\",\"space\":\"intra_text\",\"vector\":[1.0]}\n";
        assert!(matches!(parse_jsonl(bad.as_bytes()).unwrap_err(), Error::DimMismatch { .. }));
    }

    #[test]
    fn cross_spaces_must_share_dim() {
        let mut set = EmbeddingSet::new();
        set.insert(EmbeddingMatrix::from_rows(Space::CrossText, 2, ids(1), vec![1.0, 0.0]).unwrap())
            .unwrap();
        set.insert(EmbeddingMatrix::from_rows(Space::IntraText, 3, ids(1), vec![1.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let err = set
            .insert(EmbeddingMatrix::from_rows(Space::CrossImage, 3, ids(1), vec![1.0, 0.0, 0.0]).unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::DimMismatch { .. }));
    }

    #[test]
    fn subset_preserves_rows() {
        let m = EmbeddingMatrix::from_rows(Space::IntraText, 2, ids(3), vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let s = m.subset(["q2", "q0"]).unwrap();
        assert_eq!(s.ids(), &["q2".to_string(), "q0".to_string()]);
        assert_eq!(s.lookup("q2").unwrap(), m.lookup("q2").unwrap());
        assert!(m.subset(["nope"]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn emb1_round_trip(dim in 1usize..12, rows in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 12), 1..20)) {
                let n = rows.len();
                let mut data = Vec::new();
                for r in &rows {
                    let row = &r[..dim];
                    let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                    prop_assume!(norm > 1e-3);
                    data.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
                }
                let m = EmbeddingMatrix::from_rows(Space::CrossImage, dim, ids(n), data).unwrap();
                let back = parse_emb1(&m.to_emb1_bytes()).unwrap();
                prop_assert_eq!(back.ids(), m.ids());
                for i in 0..n {
                    for (a, b) in back.row(i).iter().zip(m.row(i)) {
                        prop_assert!((a - b).abs() <= 1e-6);
                    }
                    let norm = back.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                    prop_assert!((norm - 1.0).abs() <= 1e-4);
                }
            }
        }
    }
}
