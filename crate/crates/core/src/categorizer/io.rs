use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::ItemEmbeddingTable;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LNAREMB1";
const ENDIAN_MARK: u32 = 0x0102_0304;

/// Layout: magic, u32 endianness mark, u64 rows, u64 dim, then row-major
/// f32 values. Written little-endian; big-endian files are read as well.
pub fn write_embeddings(path: impl AsRef<Path>, table: &ItemEmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(28 + table.vectors.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ENDIAN_MARK.to_le_bytes());
    buf.extend_from_slice(&(table.num_items as u64).to_le_bytes());
    buf.extend_from_slice(&(table.dim as u64).to_le_bytes());
    for v in &table.vectors {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<ItemEmbeddingTable> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        return Err(bad("not an embedding table"));
    }
    let mark: [u8; 4] = bytes[8..12].try_into().unwrap();
    let little = if u32::from_le_bytes(mark) == ENDIAN_MARK {
        true
    } else if u32::from_be_bytes(mark) == ENDIAN_MARK {
        false
    } else {
        return Err(bad("unknown endianness mark"));
    };
    let u64_at = |at: usize| {
        let b: [u8; 8] = bytes[at..at + 8].try_into().unwrap();
        if little {
            u64::from_le_bytes(b)
        } else {
            u64::from_be_bytes(b)
        }
    };
    let (rows, dim) = (u64_at(12) as usize, u64_at(20) as usize);
    let payload = &bytes[28..];
    if payload.len() != rows * dim * 4 {
        return Err(bad("payload size does not match header"));
    }
    let vectors = payload
        .chunks_exact(4)
        .map(|c| {
            let b: [u8; 4] = c.try_into().unwrap();
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    Ok(ItemEmbeddingTable {
        num_items: rows,
        dim,
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let table = ItemEmbeddingTable {
            num_items: 3,
            dim: 2,
            vectors: vec![0.1, -2.5, f32::MIN_POSITIVE, 7.0, 1e-30, -0.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        write_embeddings(&path, &table).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.num_items, 3);
        let bits = |t: &ItemEmbeddingTable| t.vectors.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&table));
    }

    #[test]
    fn reads_big_endian() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&ENDIAN_MARK.to_be_bytes());
        buf.extend_from_slice(&1u64.to_be_bytes());
        buf.extend_from_slice(&2u64.to_be_bytes());
        buf.extend_from_slice(&1.5f32.to_be_bytes());
        buf.extend_from_slice(&(-3.0f32).to_be_bytes());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.bin");
        std::fs::write(&path, buf).unwrap();
        assert_eq!(read_embeddings(&path).unwrap().vectors, vec![1.5, -3.0]);
    }
}
