//! Sparse feature packets, their byte encoding, and communication accounting.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "UMCW"
//!      4     2  version (1)
//!      6     2  sender id
//!      8     2  receiver id
//!     10     4  timestep
//!     14     1  resolution level
//!     15     2  height
//!     17     2  width
//!     19     2  channels
//!     21     4  entry count
//!     25     .  entries: row u16, col u16, channels x f32
//! ```
//!
//! Payload values travel as `f32`; in-process math is `f64`. The quantization
//! happens exactly once, when a packet is built from a grid.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{DecodeError, Error, Result};

pub const WIRE_MAGIC: &[u8; 4] = b"UMCW";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 25;
/// Receiver id used for broadcast traffic (query matrices).
pub const BROADCAST: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct PacketEntry {
    pub row: u16,
    pub col: u16,
    pub values: Vec<f32>,
}

/// Selected cells of one feature map, addressed from one agent to another.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePacket {
    sender_id: u16,
    receiver_id: u16,
    timestep: u32,
    resolution_level: u8,
    height: u16,
    width: u16,
    channels: u16,
    entries: Vec<PacketEntry>,
}

impl SparsePacket {
    /// Validates the packet invariants: coordinates in range, strictly row-major, one vector per cell.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sender_id: u16,
        receiver_id: u16,
        timestep: u32,
        resolution_level: u8,
        height: usize,
        width: usize,
        channels: usize,
        entries: Vec<PacketEntry>,
    ) -> Result<Self> {
        let dim = |v: usize, what: &str| -> Result<u16> {
            if v == 0 || v > u16::MAX as usize {
                Err(Error::Encode(format!("{what} {v} outside 1..=65535")))
            } else {
                Ok(v as u16)
            }
        };
        let packet = SparsePacket {
            sender_id,
            receiver_id,
            timestep,
            resolution_level,
            height: dim(height, "height")?,
            width: dim(width, "width")?,
            channels: dim(channels, "channels")?,
            entries,
        };
        packet.validate()?;
        Ok(packet)
    }

    fn validate(&self) -> Result<()> {
        let mut prev: Option<(u16, u16)> = None;
        for e in &self.entries {
            if e.row >= self.height || e.col >= self.width {
                return Err(Error::Encode(format!(
                    "entry ({}, {}) outside {}x{}",
                    e.row, e.col, self.height, self.width
                )));
            }
            if e.values.len() != self.channels as usize {
                return Err(Error::Encode(format!(
                    "entry ({}, {}) has {} values, expected {}",
                    e.row,
                    e.col,
                    e.values.len(),
                    self.channels
                )));
            }
            if e.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Encode(format!("entry ({}, {}) has non-finite values", e.row, e.col)));
            }
            if let Some(p) = prev {
                if p >= (e.row, e.col) {
                    return Err(Error::Encode(format!(
                        "entries not strictly row-major at ({}, {})",
                        e.row, e.col
                    )));
                }
            }
            prev = Some((e.row, e.col));
        }
        if self.entries.len() > u32::MAX as usize {
            return Err(Error::Encode("too many entries".into()));
        }
        Ok(())
    }

    /// Sets the routing header fields.
    pub fn with_route(mut self, sender: u16, receiver: u16, timestep: u32, level: u8) -> Self {
        self.sender_id = sender;
        self.receiver_id = receiver;
        self.timestep = timestep;
        self.resolution_level = level;
        self
    }

    pub fn sender_id(&self) -> u16 {
        self.sender_id
    }

    pub fn receiver_id(&self) -> u16 {
        self.receiver_id
    }

    pub fn timestep(&self) -> u32 {
        self.timestep
    }

    pub fn resolution_level(&self) -> u8 {
        self.resolution_level
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn channels(&self) -> usize {
        self.channels as usize
    }

    pub fn entries(&self) -> &[PacketEntry] {
        &self.entries
    }

    /// Number of feature scalars carried.
    pub fn feature_scalars(&self) -> u64 {
        self.entries.len() as u64 * self.channels as u64
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.entries.len() * (4 + 4 * self.channels as usize)
    }
}

pub fn encode(p: &SparsePacket) -> Result<Vec<u8>> {
    p.validate()?;
    let mut out = Vec::with_capacity(p.encoded_len());
    out.extend_from_slice(WIRE_MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.extend_from_slice(&p.sender_id.to_le_bytes());
    out.extend_from_slice(&p.receiver_id.to_le_bytes());
    out.extend_from_slice(&p.timestep.to_le_bytes());
    out.push(p.resolution_level);
    out.extend_from_slice(&p.height.to_le_bytes());
    out.extend_from_slice(&p.width.to_le_bytes());
    out.extend_from_slice(&p.channels.to_le_bytes());
    out.extend_from_slice(&(p.entries.len() as u32).to_le_bytes());
    for e in &p.entries {
        out.extend_from_slice(&e.row.to_le_bytes());
        out.extend_from_slice(&e.col.to_le_bytes());
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), p.encoded_len());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(DecodeError::Truncated { needed: self.pos + n, available: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Inverse of [`encode`]. Every malformed input maps to a [`DecodeError`] variant.
pub fn decode(bytes: &[u8]) -> Result<SparsePacket, DecodeError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() >= 4 && &bytes[..4] != WIRE_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    if cur.take(4)? != WIRE_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = cur.u16()?;
    if version != WIRE_VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let sender_id = cur.u16()?;
    let receiver_id = cur.u16()?;
    let timestep = cur.u32()?;
    let resolution_level = cur.take(1)?[0];
    let height = cur.u16()?;
    let width = cur.u16()?;
    let channels = cur.u16()?;
    if height == 0 || width == 0 || channels == 0 {
        return Err(DecodeError::InvalidHeader("zero grid dimension"));
    }
    let count = cur.u32()? as usize;
    let entry_len = 4 + 4 * channels as usize;
    let needed = count
        .checked_mul(entry_len)
        .and_then(|n| n.checked_add(HEADER_BYTES))
        .ok_or(DecodeError::InvalidHeader("entry count overflows"))?;
    if needed > bytes.len() {
        return Err(DecodeError::Truncated { needed, available: bytes.len() });
    }
    if needed < bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - needed));
    }
    let mut entries = Vec::with_capacity(count);
    let mut prev: Option<(u16, u16)> = None;
    for _ in 0..count {
        let row = cur.u16()?;
        let col = cur.u16()?;
        if row >= height || col >= width {
            return Err(DecodeError::OutOfRange { row, col, height, width });
        }
        if let Some(p) = prev {
            if p == (row, col) {
                return Err(DecodeError::DuplicateCell { row, col });
            }
            if p > (row, col) {
                return Err(DecodeError::Unsorted { row, col });
            }
        }
        prev = Some((row, col));
        let raw = cur.take(4 * channels as usize)?;
        let values: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DecodeError::NonFinite { row, col });
        }
        entries.push(PacketEntry { row, col, values });
    }
    Ok(SparsePacket {
        sender_id,
        receiver_id,
        timestep,
        resolution_level,
        height,
        width,
        channels,
        entries,
    })
}

impl fmt::Display for SparsePacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let receiver = if self.receiver_id == BROADCAST {
            "broadcast".to_string()
        } else {
            self.receiver_id.to_string()
        };
        writeln!(f, "packet  sender={} receiver={} t={} level={}", self.sender_id, receiver, self.timestep, self.resolution_level)?;
        writeln!(
            f,
            "grid    {}x{}x{} (c x h x w)",
            self.channels, self.height, self.width
        )?;
        let cells = self.height as usize * self.width as usize;
        writeln!(
            f,
            "entries {} of {} cells ({:.2}%), {} feature scalars, {} bytes",
            self.entries.len(),
            cells,
            100.0 * self.entries.len() as f64 / cells as f64,
            self.feature_scalars(),
            self.encoded_len()
        )?;
        for e in self.entries.iter().take(8) {
            let shown: Vec<String> = e.values.iter().take(4).map(|v| format!("{v:.4}")).collect();
            let more = if e.values.len() > 4 { ", ..." } else { "" };
            writeln!(f, "  ({:>3}, {:>3}) [{}{}]", e.row, e.col, shown.join(", "), more)?;
        }
        if self.entries.len() > 8 {
            writeln!(f, "  ... {} more", self.entries.len() - 8)?;
        }
        Ok(())
    }
}

/// Per-(agent, timestep) counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub feature_scalars: u64,
    pub query_scalars: u64,
}

impl Counters {
    pub fn total(&self) -> u64 {
        self.feature_scalars + self.query_scalars
    }
}

/// One logged transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferRecord {
    pub timestep: u32,
    pub sender: u16,
    pub receiver: u16,
    pub level: u8,
    pub cells: u64,
    pub feature_scalars: u64,
    pub query_scalars: u64,
}

/// Accumulates transmitted scalars. Single writer: callers serialize mutation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommLedger {
    per_agent_step: BTreeMap<(u16, u32), Counters>,
    transfers: Vec<TransferRecord>,
    decoded_scalars: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Charges `packet`'s feature scalars and `query_scalars` to the sender at `t`.
    pub fn record_transfer(
        &mut self,
        sender: u16,
        receiver: u16,
        t: u32,
        packet: &SparsePacket,
        query_scalars: u64,
    ) {
        let f = packet.feature_scalars();
        let c = self.per_agent_step.entry((sender, t)).or_default();
        c.feature_scalars += f;
        c.query_scalars += query_scalars;
        self.transfers.push(TransferRecord {
            timestep: t,
            sender,
            receiver,
            level: packet.resolution_level(),
            cells: packet.entries().len() as u64,
            feature_scalars: f,
            query_scalars,
        });
    }

    /// Notes feature scalars materialized on the receiving side.
    pub fn record_decoded(&mut self, packet: &SparsePacket) {
        self.decoded_scalars += packet.feature_scalars();
    }

    pub fn decoded_scalars(&self) -> u64 {
        self.decoded_scalars
    }

    pub fn encoded_feature_scalars(&self) -> u64 {
        self.per_agent_step.values().map(|c| c.feature_scalars).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.per_agent_step.is_empty()
    }

    pub fn counters(&self, agent: u16, t: u32) -> Counters {
        self.per_agent_step.get(&(agent, t)).copied().unwrap_or_default()
    }

    pub fn per_agent_step(&self) -> impl Iterator<Item = ((u16, u32), Counters)> + '_ {
        self.per_agent_step.iter().map(|(&k, &v)| (k, v))
    }

    pub fn transfers(&self) -> &[TransferRecord] {
        &self.transfers
    }

    /// Episode totals per agent.
    pub fn agent_totals(&self) -> BTreeMap<u16, u64> {
        let mut totals = BTreeMap::new();
        for (&(agent, _), c) in &self.per_agent_step {
            *totals.entry(agent).or_insert(0) += c.total();
        }
        totals
    }

    /// Mean feature scalars over feature-carrying transfers (broadcasts excluded).
    pub fn mean_feature_scalars_per_transfer(&self) -> Option<f64> {
        let feature: Vec<_> = self.transfers.iter().filter(|r| r.receiver != BROADCAST).collect();
        if feature.is_empty() {
            return None;
        }
        Some(feature.iter().map(|r| r.feature_scalars as f64).sum::<f64>() / feature.len() as f64)
    }

    /// CSV with one row per transfer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("timestep,sender,receiver,level,cells,feature_scalars,query_scalars\n");
        for r in &self.transfers {
            let receiver = if r.receiver == BROADCAST { "broadcast".to_string() } else { r.receiver.to_string() };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.timestep, r.sender, receiver, r.level, r.cells, r.feature_scalars, r.query_scalars
            ));
        }
        s
    }
}

/// Mean over agents of the natural log of each agent's episode total (features + queries).
pub fn communication_volume(ledger: &CommLedger) -> Result<f64> {
    communication_volume_base(ledger, std::f64::consts::E)
}

/// [`communication_volume`] with an explicit log base.
pub fn communication_volume_base(ledger: &CommLedger, base: f64) -> Result<f64> {
    let totals = ledger.agent_totals();
    if totals.is_empty() {
        return Err(Error::EmptyLedger);
    }
    let sum: f64 = totals.values().map(|&t| (t as f64).log(base)).sum();
    Ok(sum / totals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn packet(entries: Vec<(u16, u16, Vec<f32>)>, channels: usize) -> SparsePacket {
        let entries = entries.into_iter().map(|(row, col, values)| PacketEntry { row, col, values }).collect();
        SparsePacket::new(1, 2, 7, 0, 4, 4, channels, entries).unwrap()
    }

    #[test]
    fn empty_packet_is_header_only() {
        let p = packet(vec![], 3);
        let bytes = encode(&p).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn one_entry_round_trip() {
        let p = packet(vec![(1, 2, vec![1.0, -1.0])], 2);
        let bytes = encode(&p).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES + 4 + 8);
        assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn timestep_field_isolated() {
        let a = packet(vec![(0, 0, vec![0.5])], 1);
        let b = a.clone().with_route(1, 2, 8, 0);
        let (ea, eb) = (encode(&a).unwrap(), encode(&b).unwrap());
        let diff: Vec<usize> = (0..ea.len()).filter(|&i| ea[i] != eb[i]).collect();
        assert!(!diff.is_empty());
        assert!(diff.iter().all(|i| (10..14).contains(i)));
    }

    #[test]
    fn decode_errors() {
        let p = packet(vec![(0, 1, vec![2.0]), (3, 3, vec![4.0])], 1);
        let bytes = encode(&p).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert_eq!(decode(&bad), Err(DecodeError::BadMagic));
        assert!(matches!(decode(&bytes[..bytes.len() - 2]), Err(DecodeError::Truncated { .. })));
        assert!(matches!(decode(&bytes[..10]), Err(DecodeError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(decode(&long), Err(DecodeError::TrailingBytes(1)));

        // second entry rewritten onto the first cell
        let mut dup = bytes.clone();
        let second = HEADER_BYTES + 8;
        dup[second..second + 4].copy_from_slice(&[0, 0, 1, 0]);
        assert_eq!(decode(&dup), Err(DecodeError::DuplicateCell { row: 0, col: 1 }));

        let mut oob = bytes.clone();
        oob[second] = 9;
        assert!(matches!(decode(&oob), Err(DecodeError::OutOfRange { .. })));

        let mut ver = bytes.clone();
        ver[4] = 2;
        assert_eq!(decode(&ver), Err(DecodeError::UnsupportedVersion(2)));
    }

    #[test]
    fn constructor_rejects_invariant_violations() {
        let mk = |entries: Vec<PacketEntry>| SparsePacket::new(0, 0, 0, 0, 2, 2, 1, entries);
        let e = |row, col| PacketEntry { row, col, values: vec![0.0] };
        assert!(matches!(mk(vec![e(1, 0), e(0, 0)]), Err(Error::Encode(_))));
        assert!(matches!(mk(vec![e(0, 0), e(0, 0)]), Err(Error::Encode(_))));
        assert!(matches!(mk(vec![e(2, 0)]), Err(Error::Encode(_))));
        assert!(matches!(mk(vec![PacketEntry { row: 0, col: 0, values: vec![] }]), Err(Error::Encode(_))));
    }

    #[test]
    fn ledger_accounting() {
        let mut ledger = CommLedger::new();
        let empty = SparsePacket::new(0, BROADCAST, 0, 0, 4, 4, 8, vec![]).unwrap();
        ledger.record_transfer(0, BROADCAST, 0, &empty, 16);
        assert_eq!(ledger.counters(0, 0), Counters { feature_scalars: 0, query_scalars: 16 });

        let entries: Vec<PacketEntry> = (0..32u16)
            .flat_map(|r| (0..32u16).map(move |c| PacketEntry { row: r, col: c, values: vec![0.0; 256] }))
            .collect();
        let full = SparsePacket::new(1, 0, 0, 0, 32, 32, 256, entries).unwrap();
        ledger.record_transfer(1, 0, 0, &full, 0);
        assert_eq!(ledger.counters(1, 0).feature_scalars, 262_144);
        ledger.record_transfer(1, 0, 0, &full, 0);
        assert_eq!(ledger.counters(1, 0).feature_scalars, 2 * 262_144);
    }

    #[test]
    fn volume_formula() {
        assert!(matches!(communication_volume(&CommLedger::new()), Err(Error::EmptyLedger)));

        let mut one = CommLedger::new();
        let p = SparsePacket::new(0, BROADCAST, 0, 0, 8, 16, 1, vec![]).unwrap();
        one.record_transfer(0, BROADCAST, 0, &p, 128);
        let v = communication_volume(&one).unwrap();
        assert!((v - 128f64.ln()).abs() < 1e-12);
        assert!((v - 4.852030263919617).abs() < 1e-12);

        let mut two = CommLedger::new();
        two.record_transfer(0, BROADCAST, 0, &p, 100);
        two.record_transfer(1, BROADCAST, 3, &p, 60);
        two.record_transfer(1, BROADCAST, 4, &p, 40);
        assert!((communication_volume(&two).unwrap() - 100f64.ln()).abs() < 1e-12);

        // scaling every total by e adds exactly one (checked via the base-e identity on logs)
        let v10 = communication_volume_base(&one, 10.0).unwrap();
        assert!((v10 - 128f64.log10()).abs() < 1e-12);
    }

    fn arb_packet() -> impl Strategy<Value = SparsePacket> {
        (1usize..12, 1usize..12, 1usize..5, any::<u16>(), any::<u16>(), any::<u32>(), any::<u8>())
            .prop_flat_map(|(h, w, c, s, r, t, l)| {
                let cells = prop::collection::btree_set((0..h as u16, 0..w as u16), 0..=(h * w).min(20));
                let vals = prop::collection::vec(prop::collection::vec(-1e6f32..1e6f32, c), 20);
                (Just((h, w, c, s, r, t, l)), cells, vals)
            })
            .prop_map(|((h, w, c, s, r, t, l), cells, vals)| {
                let entries = cells
                    .into_iter()
                    .zip(vals)
                    .map(|((row, col), values)| PacketEntry { row, col, values })
                    .collect();
                SparsePacket::new(s, r, t, l, h, w, c, entries).unwrap()
            })
    }

    proptest! {
        #[test]
        fn round_trip(p in arb_packet()) {
            let bytes = encode(&p).unwrap();
            prop_assert_eq!(bytes.len(), p.encoded_len());
            prop_assert_eq!(decode(&bytes).unwrap(), p);
        }

        #[test]
        fn mutated_bytes_never_panic(p in arb_packet(), idx in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<prop::sample::Index>()) {
            let mut bytes = encode(&p).unwrap();
            let i = idx.index(bytes.len());
            bytes[i] = byte;
            let _ = decode(&bytes);
            let n = cut.index(bytes.len());
            let _ = decode(&bytes[..n]);
        }
    }
}
