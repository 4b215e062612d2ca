//! Fragmentation of encoded messages into broker-sized chunks.
//!
//! Chunk frame: `"FGCK" | message id (16 bytes) | index u32 | total u32 | length u32 | bytes`.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use uuid::Uuid;

use super::wire::WireError;

pub const CHUNK_MAGIC: &[u8; 4] = b"FGCK";
pub const CHUNK_HEADER_LEN: usize = 4 + 16 + 12;
pub const MIN_CHUNK: usize = 1024;
pub const DEFAULT_MAX_CHUNK: usize = 128 * 1024;

type Result<T> = std::result::Result<T, WireError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub message_id: Uuid,
    pub index: u32,
    pub total: u32,
    pub bytes: Vec<u8>,
}

impl Chunk {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHUNK_HEADER_LEN + self.bytes.len());
        out.extend_from_slice(CHUNK_MAGIC);
        out.extend_from_slice(self.message_id.as_bytes());
        out.extend_from_slice(&self.index.to_le_bytes());
        out.extend_from_slice(&self.total.to_le_bytes());
        out.extend_from_slice(&(self.bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < CHUNK_HEADER_LEN {
            return Err(WireError::Truncated {
                offset: 0,
                needed: CHUNK_HEADER_LEN,
                available: buf.len(),
            });
        }
        if &buf[..4] != CHUNK_MAGIC {
            return Err(WireError::BadMagic);
        }
        let message_id = Uuid::from_bytes(buf[4..20].try_into().unwrap());
        let index = u32::from_le_bytes(buf[20..24].try_into().unwrap());
        let total = u32::from_le_bytes(buf[24..28].try_into().unwrap());
        let len = u32::from_le_bytes(buf[28..32].try_into().unwrap()) as usize;
        if buf.len() - CHUNK_HEADER_LEN != len {
            return Err(WireError::Truncated {
                offset: CHUNK_HEADER_LEN,
                needed: len,
                available: buf.len() - CHUNK_HEADER_LEN,
            });
        }
        if total == 0 || index >= total {
            return Err(WireError::InconsistentChunks(format!("chunk index {index} of {total}")));
        }
        Ok(Self {
            message_id,
            index,
            total,
            bytes: buf[CHUNK_HEADER_LEN..].to_vec(),
        })
    }
}

/// Split `bytes` into chunks of at most `max_chunk` payload bytes under a fresh message id.
pub fn chunk_split(bytes: &[u8], max_chunk: usize) -> Result<Vec<Chunk>> {
    chunk_split_with_id(bytes, max_chunk, Uuid::new_v4())
}

pub fn chunk_split_with_id(bytes: &[u8], max_chunk: usize, message_id: Uuid) -> Result<Vec<Chunk>> {
    if max_chunk < MIN_CHUNK {
        return Err(WireError::InconsistentChunks(format!("max_chunk {max_chunk} below {MIN_CHUNK}")));
    }
    let pieces: Vec<&[u8]> = if bytes.is_empty() { vec![&[][..]] } else { bytes.chunks(max_chunk).collect() };
    let total = u32::try_from(pieces.len()).map_err(|_| WireError::InconsistentChunks("too many chunks".into()))?;
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(i, p)| Chunk {
            message_id,
            index: i as u32,
            total,
            bytes: p.to_vec(),
        })
        .collect())
}

/// Reassemble one message from chunks in any order; duplicates are ignored.
pub fn chunk_join(chunks: &[Chunk]) -> Result<Vec<u8>> {
    let first = chunks
        .first()
        .ok_or_else(|| WireError::InconsistentChunks("no chunks".into()))?;
    let mut parts: BTreeMap<u32, &[u8]> = BTreeMap::new();
    for c in chunks {
        if c.message_id != first.message_id {
            return Err(WireError::InconsistentChunks("chunks from different messages".into()));
        }
        if c.total != first.total {
            return Err(WireError::InconsistentChunks(format!(
                "declared totals {} and {} disagree",
                first.total, c.total
            )));
        }
        parts.entry(c.index).or_insert(&c.bytes);
    }
    let missing: Vec<u32> = (0..first.total).filter(|i| !parts.contains_key(i)).collect();
    if !missing.is_empty() {
        return Err(WireError::MissingChunks {
            message_id: first.message_id.to_string(),
            missing,
        });
    }
    Ok(parts.into_values().flatten().copied().collect())
}

struct Pending {
    total: u32,
    parts: BTreeMap<u32, Vec<u8>>,
    first_seen: Instant,
}

/// Incremental reassembly across interleaved messages.
pub struct Reassembler {
    pending: HashMap<Uuid, Pending>,
    done: HashSet<Uuid>,
    done_order: VecDeque<Uuid>,
}

const DONE_MEMORY: usize = 4096;

impl Default for Reassembler {
    fn default() -> Self {
        Self::new()
    }
}

impl Reassembler {
    pub fn new() -> Self {
        Self {
            pending: HashMap::new(),
            done: HashSet::new(),
            done_order: VecDeque::new(),
        }
    }

    /// Feed one chunk. Returns the full message once its last missing chunk
    /// arrives; chunks of already completed messages are dropped.
    pub fn push(&mut self, chunk: Chunk, now: Instant) -> Result<Option<Vec<u8>>> {
        if self.done.contains(&chunk.message_id) {
            return Ok(None);
        }
        let entry = self.pending.entry(chunk.message_id).or_insert_with(|| Pending {
            total: chunk.total,
            parts: BTreeMap::new(),
            first_seen: now,
        });
        if entry.total != chunk.total {
            let id = chunk.message_id;
            self.pending.remove(&id);
            return Err(WireError::InconsistentChunks(format!("message {id} declared two totals")));
        }
        entry.parts.entry(chunk.index).or_insert(chunk.bytes);
        if entry.parts.len() as u32 == entry.total {
            let id = chunk.message_id;
            let p = self.pending.remove(&id).unwrap();
            self.done.insert(id);
            self.done_order.push_back(id);
            if self.done_order.len() > DONE_MEMORY {
                let old = self.done_order.pop_front().unwrap();
                self.done.remove(&old);
            }
            return Ok(Some(p.parts.into_values().flatten().collect()));
        }
        Ok(None)
    }

    /// Drop messages older than `timeout`, reporting what each was missing.
    pub fn expire(&mut self, now: Instant, timeout: Duration) -> Vec<WireError> {
        let stale: Vec<Uuid> = self
            .pending
            .iter()
            .filter(|(_, p)| now.duration_since(p.first_seen) >= timeout)
            .map(|(id, _)| *id)
            .collect();
        stale
            .into_iter()
            .map(|id| {
                let p = self.pending.remove(&id).unwrap();
                WireError::MissingChunks {
                    message_id: id.to_string(),
                    missing: (0..p.total).filter(|i| !p.parts.contains_key(i)).collect(),
                }
            })
            .collect()
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_kib_in_four_kib_chunks() {
        let data = vec![7u8; 10 * 1024];
        let c = chunk_split(&data, 4096).unwrap();
        assert_eq!(c.iter().map(|c| c.bytes.len()).collect::<Vec<_>>(), vec![4096, 4096, 2048]);
        assert!(c.iter().all(|c| c.total == 3));
    }

    #[test]
    fn out_of_order_and_duplicates() {
        let data: Vec<u8> = (0..9000u32).map(|i| (i % 251) as u8).collect();
        let c = chunk_split(&data, 4096).unwrap();
        let shuffled = vec![c[2].clone(), c[0].clone(), c[0].clone(), c[1].clone()];
        assert_eq!(chunk_join(&shuffled).unwrap(), data);
    }

    #[test]
    fn missing_chunk_named() {
        let data = vec![1u8; 9000];
        let c = chunk_split(&data, 4096).unwrap();
        let err = chunk_join(&[c[0].clone(), c[2].clone()]).unwrap_err();
        assert!(matches!(err, WireError::MissingChunks { ref missing, .. } if missing == &vec![1]));

        let mut r = Reassembler::new();
        let t0 = Instant::now();
        assert_eq!(r.push(c[0].clone(), t0).unwrap(), None);
        assert_eq!(r.push(c[2].clone(), t0).unwrap(), None);
        assert!(r.expire(t0, Duration::from_secs(5)).is_empty());
        let errs = r.expire(t0 + Duration::from_secs(5), Duration::from_secs(5));
        assert!(matches!(&errs[..], [WireError::MissingChunks { missing, .. }] if missing == &vec![1]));
    }

    #[test]
    fn frame_round_trip_and_small_chunk_rejected() {
        let c = chunk_split(b"hello", 1024).unwrap();
        assert_eq!(Chunk::decode(&c[0].encode()).unwrap(), c[0]);
        assert!(chunk_split(b"x", 512).is_err());
        let empty = chunk_split(b"", 1024).unwrap();
        assert_eq!(chunk_join(&empty).unwrap(), Vec::<u8>::new());
    }
}
