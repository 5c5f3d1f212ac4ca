use std::collections::BTreeMap;

use crate::model::{BlockKind, GroupActivation};
use crate::{Error, Result};

/// Bytes in the fixed little-endian header.
pub const HEADER_LEN: usize = 25;
pub const DEFAULT_MAX_PAYLOAD: usize = 1400;
/// `group_id` used for merged-activation broadcasts.
pub const MERGED_GROUP: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DatagramHeader {
    pub request_id: u64,
    pub token_idx: u32,
    pub layer: u16,
    pub block: u8,
    pub group_id: u16,
    pub seq: u16,
    pub frag_count: u16,
    pub origin: u16,
    pub payload_len: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datagram {
    pub header: DatagramHeader,
    pub payload: Vec<u8>,
}

impl Datagram {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&h.request_id.to_le_bytes());
        out.extend_from_slice(&h.token_idx.to_le_bytes());
        out.extend_from_slice(&h.layer.to_le_bytes());
        out.push(h.block);
        out.extend_from_slice(&h.group_id.to_le_bytes());
        out.extend_from_slice(&h.seq.to_le_bytes());
        out.extend_from_slice(&h.frag_count.to_le_bytes());
        out.extend_from_slice(&h.origin.to_le_bytes());
        out.extend_from_slice(&h.payload_len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Format(format!("datagram of {} bytes", buf.len())));
        }
        let u16_at = |i: usize| u16::from_le_bytes([buf[i], buf[i + 1]]);
        let header = DatagramHeader {
            request_id: u64::from_le_bytes(buf[0..8].try_into().unwrap()),
            token_idx: u32::from_le_bytes(buf[8..12].try_into().unwrap()),
            layer: u16_at(12),
            block: buf[14],
            group_id: u16_at(15),
            seq: u16_at(17),
            frag_count: u16_at(19),
            origin: u16_at(21),
            payload_len: u16_at(23),
        };
        let payload = &buf[HEADER_LEN..];
        if payload.len() != header.payload_len as usize {
            return Err(Error::Format(format!(
                "payload_len {} but {} bytes follow the header",
                header.payload_len,
                payload.len()
            )));
        }
        if header.frag_count == 0 || header.seq >= header.frag_count {
            return Err(Error::Format(format!(
                "fragment {} of {}",
                header.seq, header.frag_count
            )));
        }
        Ok(Self {
            header,
            payload: payload.to_vec(),
        })
    }
}

fn narrow(value: usize, what: &str) -> Result<u16> {
    u16::try_from(value).map_err(|_| Error::Format(format!("{what} {value} exceeds u16")))
}

/// Split a vector into datagrams of at most `max_payload` bytes each.
/// Payload boundaries fall on whole floats.
pub fn fragment(
    request_id: u64,
    token_idx: u32,
    layer: usize,
    block: BlockKind,
    group_id: u16,
    origin: usize,
    values: &[f32],
    max_payload: usize,
) -> Result<Vec<Datagram>> {
    let per = max_payload / 4;
    if per == 0 {
        return Err(Error::Config(format!("max payload {max_payload} below one float")));
    }
    let chunks: Vec<&[f32]> = if values.is_empty() {
        vec![&[]]
    } else {
        values.chunks(per).collect()
    };
    let frag_count = narrow(chunks.len(), "fragment count")?;
    let layer = narrow(layer, "layer")?;
    let origin = narrow(origin, "origin")?;
    chunks
        .into_iter()
        .enumerate()
        .map(|(seq, chunk)| {
            let payload: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
            Ok(Datagram {
                header: DatagramHeader {
                    request_id,
                    token_idx,
                    layer,
                    block: block.as_u8(),
                    group_id,
                    seq: seq as u16,
                    frag_count,
                    origin,
                    payload_len: narrow(payload.len(), "payload")?,
                },
                payload,
            })
        })
        .collect()
}

/// Collects fragments of one message until all have arrived.
#[derive(Debug, Default, Clone)]
pub struct Reassembler {
    frags: BTreeMap<u16, Vec<u8>>,
    frag_count: Option<u16>,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` once the message is complete. Duplicates are ignored.
    pub fn push(&mut self, d: &Datagram) -> Result<bool> {
        match self.frag_count {
            Some(n) if n != d.header.frag_count => {
                return Err(Error::Format(format!(
                    "fragment count changed from {n} to {}",
                    d.header.frag_count
                )))
            }
            _ => self.frag_count = Some(d.header.frag_count),
        }
        self.frags
            .entry(d.header.seq)
            .or_insert_with(|| d.payload.clone());
        Ok(self.is_complete())
    }

    pub fn is_complete(&self) -> bool {
        self.frag_count.is_some_and(|n| self.frags.len() == n as usize)
    }

    pub fn values(&self) -> Result<Vec<f32>> {
        if !self.is_complete() {
            return Err(Error::Format("incomplete message".into()));
        }
        let bytes: Vec<u8> = self.frags.values().flatten().copied().collect();
        if bytes.len() % 4 != 0 {
            return Err(Error::Format(format!("{} payload bytes", bytes.len())));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub fn into_group(self, header: &DatagramHeader) -> Result<GroupActivation> {
        Ok(GroupActivation {
            block: BlockKind::from_u8(header.block)
                .ok_or_else(|| Error::Format(format!("block tag {}", header.block)))?,
            layer: header.layer as usize,
            group_id: header.group_id as usize,
            partial: self.values()?,
            origin_device: header.origin as usize,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_25_bytes_little_endian() {
        let d = Datagram {
            header: DatagramHeader {
                request_id: 0x0102030405060708,
                token_idx: 0x0a0b0c0d,
                layer: 0x1112,
                block: 2,
                group_id: 0x2122,
                seq: 1,
                frag_count: 3,
                origin: 0x3132,
                payload_len: 4,
            },
            payload: vec![9, 8, 7, 6],
        };
        let bytes = d.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(
            &bytes[..HEADER_LEN],
            &[
                8, 7, 6, 5, 4, 3, 2, 1, 0x0d, 0x0c, 0x0b, 0x0a, 0x12, 0x11, 2, 0x22, 0x21, 1, 0,
                3, 0, 0x32, 0x31, 4, 0
            ]
        );
        assert_eq!(Datagram::decode(&bytes).unwrap(), d);
    }

    #[test]
    fn decode_rejects_bad_lengths() {
        assert!(Datagram::decode(&[0; 10]).is_err());
        let d = fragment(1, 0, 0, BlockKind::Mlp, 0, 0, &[1.0, 2.0], 1400).unwrap();
        let mut bytes = d[0].encode();
        bytes.pop();
        assert!(Datagram::decode(&bytes).is_err());
    }

    #[test]
    fn fragment_roundtrip_out_of_order() {
        let values: Vec<f32> = (0..1000).map(|i| i as f32 * 0.5).collect();
        let frags = fragment(7, 3, 1, BlockKind::Mha, 5, 2, &values, 1400).unwrap();
        assert_eq!(frags.len(), 3);
        assert!(frags.iter().all(|f| f.payload.len() <= 1400));
        let mut r = Reassembler::new();
        for f in frags.iter().rev() {
            r.push(f).unwrap();
        }
        r.push(&frags[0]).unwrap();
        let g = r.into_group(&frags[0].header).unwrap();
        assert_eq!(g.partial, values);
        assert_eq!((g.layer, g.group_id, g.origin_device), (1, 5, 2));
        assert_eq!(g.block, BlockKind::Mha);
    }

    #[test]
    fn empty_vector_is_one_fragment() {
        let f = fragment(0, 0, 0, BlockKind::Mlp, 0, 0, &[], 1400).unwrap();
        assert_eq!(f.len(), 1);
        let mut r = Reassembler::new();
        assert!(r.push(&f[0]).unwrap());
        assert!(r.values().unwrap().is_empty());
    }
}
