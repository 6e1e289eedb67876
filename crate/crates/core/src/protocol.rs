//! Device/server enrollment and key-verification protocol.
//!
//! Messages travel as length-prefixed frames: a 4-byte little-endian
//! length covering everything after itself, a 1-byte type tag, then the
//! payload. Session maps are sent in plaintext; they carry heal/mask
//! bitmaps plus check conditions and are independent of the key bits, so
//! eavesdropping on them reveals nothing about the key.
//!
//! The key proof is the raw key itself: this is a simulator, transport
//! hardening (KDFs, MACs, replay defense) is out of scope.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use crate::asch::{MapDecodeError, StabilizationMap};
use crate::keygen::{stabilize_readout, BitPlane, Key, KeygenError};
use crate::puf_cell::{CellConfig, Environment};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("chip `{0}` already enrolled with different data")]
    DuplicateChip(String),
    #[error("chip `{0}` is not enrolled")]
    UnknownChip(String),
    #[error("malformed session map: {0}")]
    MalformedMap(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("record mode does not support this operation")]
    ModeMismatch,
    #[error("unknown frame tag {0:#04x}")]
    UnknownTag(u8),
    #[error("truncated frame")]
    Truncated,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error(transparent)]
    Keygen(#[from] KeygenError),
}

impl From<MapDecodeError> for ProtocolError {
    fn from(e: MapDecodeError) -> Self {
        ProtocolError::MalformedMap(e.to_string())
    }
}

pub const TAG_ENROLL_STATIC: u8 = 0x01;
pub const TAG_ENROLL_DYNAMIC: u8 = 0x02;
pub const TAG_SESSION_MAP: u8 = 0x03;
pub const TAG_KEY_PROOF: u8 = 0x04;
pub const TAG_VERDICT: u8 = 0x05;

/// Frames larger than this are rejected outright.
pub const MAX_FRAME_LEN: usize = 1 << 26;

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    EnrollStatic { chip_id: String, key: Key, map: StabilizationMap },
    EnrollDynamic { chip_id: String, orig_plane: BitPlane, healed_plane: BitPlane },
    SessionMap { chip_id: String, map: StabilizationMap },
    KeyProof { chip_id: String, key: Key },
    Verdict { accept: bool, reason: String },
}

// --- payload primitives -------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.pos + n > self.buf.len() {
            return Err(ProtocolError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, ProtocolError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ProtocolError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| ProtocolError::Malformed("string is not utf-8".into()))
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.pos != self.buf.len() {
            return Err(ProtocolError::Malformed(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    debug_assert!(s.len() <= u16::MAX as usize);
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_key(out: &mut Vec<u8>, key: &Key) {
    out.extend_from_slice(&key.len().to_le_bytes());
    out.extend_from_slice(&key.to_bytes());
    put_string(out, key.provenance());
}

fn get_key(r: &mut Reader) -> Result<Key, ProtocolError> {
    let bit_len = r.u32()?;
    if bit_len as usize > MAX_FRAME_LEN * 8 {
        return Err(ProtocolError::Malformed(format!("absurd key length {bit_len}")));
    }
    let bytes = r.take((bit_len as usize).div_ceil(8))?;
    let provenance = r.string()?;
    Key::from_bytes(bytes, bit_len, provenance)
        .ok_or_else(|| ProtocolError::Malformed("bad key padding".into()))
}

fn put_plane(out: &mut Vec<u8>, plane: &BitPlane) {
    out.extend_from_slice(&plane.bits.rows().to_le_bytes());
    out.extend_from_slice(&plane.bits.cols().to_le_bytes());
    out.push(match plane.config {
        CellConfig::Original => 0,
        CellConfig::Healed => 1,
    });
    out.extend_from_slice(&(((plane.env.vdd * 1e6).round()) as u32).to_le_bytes());
    out.extend_from_slice(&(((plane.env.temperature * 1e3).round()) as i32).to_le_bytes());
    out.extend_from_slice(&plane.n_avg.to_le_bytes());
    out.extend_from_slice(&plane.bits.to_bytes());
}

fn get_plane(r: &mut Reader) -> Result<BitPlane, ProtocolError> {
    let rows = r.u32()?;
    let cols = r.u32()?;
    if rows == 0 || cols == 0 || rows as u64 * cols as u64 > 1 << 28 {
        return Err(ProtocolError::Malformed(format!("bad plane dimensions {rows}x{cols}")));
    }
    let config = match r.u8()? {
        0 => CellConfig::Original,
        1 => CellConfig::Healed,
        other => return Err(ProtocolError::Malformed(format!("unknown config byte {other}"))),
    };
    let vdd_uv = r.u32()?;
    let temp_mc = r.i32()?;
    let n_avg = r.u32()?;
    let nbytes = (rows as usize * cols as usize).div_ceil(8);
    let bits = crate::bits::BitGrid::from_bytes(rows, cols, r.take(nbytes)?)
        .ok_or_else(|| ProtocolError::Malformed("bad plane padding".into()))?;
    Ok(BitPlane {
        bits,
        config,
        env: Environment { vdd: vdd_uv as f64 / 1e6, temperature: temp_mc as f64 / 1e3 },
        n_avg,
    })
}

fn get_map(r: &mut Reader) -> Result<StabilizationMap, ProtocolError> {
    // maps are self-delimiting given their dims; peek the header
    let header = 8 + 4 + 4 + 4 + 1 + 4 + 4;
    if r.pos + header > r.buf.len() {
        return Err(ProtocolError::Truncated);
    }
    let rows = u32::from_le_bytes(r.buf[r.pos + 8..r.pos + 12].try_into().unwrap());
    let cols = u32::from_le_bytes(r.buf[r.pos + 12..r.pos + 16].try_into().unwrap());
    if rows == 0 || cols == 0 || rows as u64 * cols as u64 > 1 << 28 {
        return Err(ProtocolError::MalformedMap(format!("bad dimensions {rows}x{cols}")));
    }
    let total = crate::asch::encoded_map_len(rows, cols);
    let bytes = r.take(total)?;
    Ok(StabilizationMap::decode(bytes)?)
}

impl WireMessage {
    fn tag(&self) -> u8 {
        match self {
            WireMessage::EnrollStatic { .. } => TAG_ENROLL_STATIC,
            WireMessage::EnrollDynamic { .. } => TAG_ENROLL_DYNAMIC,
            WireMessage::SessionMap { .. } => TAG_SESSION_MAP,
            WireMessage::KeyProof { .. } => TAG_KEY_PROOF,
            WireMessage::Verdict { .. } => TAG_VERDICT,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            WireMessage::EnrollStatic { chip_id, key, map } => {
                put_string(&mut out, chip_id);
                put_key(&mut out, key);
                out.extend_from_slice(&map.encode());
            }
            WireMessage::EnrollDynamic { chip_id, orig_plane, healed_plane } => {
                put_string(&mut out, chip_id);
                put_plane(&mut out, orig_plane);
                put_plane(&mut out, healed_plane);
            }
            WireMessage::SessionMap { chip_id, map } => {
                put_string(&mut out, chip_id);
                out.extend_from_slice(&map.encode());
            }
            WireMessage::KeyProof { chip_id, key } => {
                put_string(&mut out, chip_id);
                put_key(&mut out, key);
            }
            WireMessage::Verdict { accept, reason } => {
                out.push(u8::from(*accept));
                put_string(&mut out, reason);
            }
        }
        out
    }

    /// Full frame: length prefix, tag, payload.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let len = 1 + payload.len();
        let mut out = Vec::with_capacity(4 + len);
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.push(self.tag());
        out.extend_from_slice(&payload);
        out
    }

    fn decode_payload(tag: u8, payload: &[u8]) -> Result<WireMessage, ProtocolError> {
        let mut r = Reader::new(payload);
        let msg = match tag {
            TAG_ENROLL_STATIC => {
                let chip_id = r.string()?;
                let key = get_key(&mut r)?;
                let map = get_map(&mut r)?;
                WireMessage::EnrollStatic { chip_id, key, map }
            }
            TAG_ENROLL_DYNAMIC => {
                let chip_id = r.string()?;
                let orig_plane = get_plane(&mut r)?;
                let healed_plane = get_plane(&mut r)?;
                if !orig_plane.bits.same_dims(&healed_plane.bits) {
                    return Err(ProtocolError::DimensionMismatch(
                        "enrollment planes disagree".into(),
                    ));
                }
                WireMessage::EnrollDynamic { chip_id, orig_plane, healed_plane }
            }
            TAG_SESSION_MAP => {
                let chip_id = r.string()?;
                let map = get_map(&mut r)?;
                WireMessage::SessionMap { chip_id, map }
            }
            TAG_KEY_PROOF => {
                let chip_id = r.string()?;
                let key = get_key(&mut r)?;
                WireMessage::KeyProof { chip_id, key }
            }
            TAG_VERDICT => {
                let accept = match r.u8()? {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(ProtocolError::Malformed(format!(
                            "bad verdict byte {other}"
                        )))
                    }
                };
                let reason = r.string()?;
                WireMessage::Verdict { accept, reason }
            }
            other => return Err(ProtocolError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(msg)
    }

    /// Parses one frame from the front of `bytes`, returning the message
    /// and the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize), ProtocolError> {
        if bytes.len() < 4 {
            return Err(ProtocolError::Truncated);
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if len == 0 {
            return Err(ProtocolError::Malformed("empty frame".into()));
        }
        if len > MAX_FRAME_LEN {
            return Err(ProtocolError::Malformed(format!("frame length {len} too large")));
        }
        if bytes.len() < 4 + len {
            return Err(ProtocolError::Truncated);
        }
        let tag = bytes[4];
        let msg = Self::decode_payload(tag, &bytes[5..4 + len])?;
        Ok((msg, 4 + len))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Reads one frame; `Ok(None)` on clean end-of-stream.
    pub fn read_from(r: &mut impl Read) -> Result<Option<WireMessage>, ProtocolError> {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        if len == 0 {
            return Err(ProtocolError::Malformed("empty frame".into()));
        }
        if len > MAX_FRAME_LEN {
            return Err(ProtocolError::Malformed(format!("frame length {len} too large")));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                ProtocolError::Truncated
            } else {
                ProtocolError::Io(e)
            }
        })?;
        Ok(Some(Self::decode_payload(body[0], &body[1..])?))
    }
}

/// Size in bytes of the session-map frame a device sends at power-up.
/// Depends only on the array dimensions and chip id, never on key bits.
pub fn session_overhead(chip_id: &str, map: &StabilizationMap) -> usize {
    WireMessage::SessionMap { chip_id: chip_id.to_string(), map: map.clone() }.encode().len()
}

// --- server state --------------------------------------------------------

/// Server-side golden data for one chip.
#[derive(Debug, Clone, PartialEq)]
pub enum EnrollmentRecord {
    /// Static mode: the stabilized golden key, with the enrollment map
    /// kept for provenance.
    Static { chip_id: String, key: Key, enrolled_map: StabilizationMap },
    /// Dynamic mode: original and healed golden planes; the expected key
    /// is reconstructed per session from the device's fresh map.
    Dynamic { chip_id: String, orig_plane: BitPlane, healed_plane: BitPlane },
}

impl EnrollmentRecord {
    pub fn chip_id(&self) -> &str {
        match self {
            EnrollmentRecord::Static { chip_id, .. } => chip_id,
            EnrollmentRecord::Dynamic { chip_id, .. } => chip_id,
        }
    }

    fn to_wire(&self) -> WireMessage {
        match self {
            EnrollmentRecord::Static { chip_id, key, enrolled_map } => WireMessage::EnrollStatic {
                chip_id: chip_id.clone(),
                key: key.clone(),
                map: enrolled_map.clone(),
            },
            EnrollmentRecord::Dynamic { chip_id, orig_plane, healed_plane } => {
                WireMessage::EnrollDynamic {
                    chip_id: chip_id.clone(),
                    orig_plane: orig_plane.clone(),
                    healed_plane: healed_plane.clone(),
                }
            }
        }
    }

    fn from_wire(msg: WireMessage) -> Option<EnrollmentRecord> {
        match msg {
            WireMessage::EnrollStatic { chip_id, key, map } => {
                Some(EnrollmentRecord::Static { chip_id, key, enrolled_map: map })
            }
            WireMessage::EnrollDynamic { chip_id, orig_plane, healed_plane } => {
                Some(EnrollmentRecord::Dynamic { chip_id, orig_plane, healed_plane })
            }
            _ => None,
        }
    }
}

pub const DB_MAGIC: &[u8; 8] = b"ASCHDB01";

/// Enrollment database: an in-memory index over an append-only record
/// file. Single-writer; readers see a consistent snapshot per lookup.
pub struct ServerDb {
    records: BTreeMap<String, EnrollmentRecord>,
    file: Option<File>,
}

impl ServerDb {
    pub fn in_memory() -> ServerDb {
        ServerDb { records: BTreeMap::new(), file: None }
    }

    /// Opens or creates a persistent database, replaying existing records.
    pub fn open(path: &Path) -> Result<ServerDb, ProtocolError> {
        let mut records = BTreeMap::new();
        let exists = path.exists();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        if exists && file.metadata()?.len() > 0 {
            let mut bytes = Vec::new();
            file.read_to_end(&mut bytes)?;
            if bytes.len() < 8 || &bytes[..8] != DB_MAGIC {
                return Err(ProtocolError::Malformed("bad database magic".into()));
            }
            let mut rest = &bytes[8..];
            while !rest.is_empty() {
                let (msg, used) = WireMessage::decode(rest)?;
                let record = EnrollmentRecord::from_wire(msg).ok_or_else(|| {
                    ProtocolError::Malformed("non-enrollment record in database".into())
                })?;
                records.insert(record.chip_id().to_string(), record);
                rest = &rest[used..];
            }
        } else {
            file.write_all(DB_MAGIC)?;
            file.flush()?;
        }
        Ok(ServerDb { records, file: Some(file) })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, chip_id: &str) -> Option<&EnrollmentRecord> {
        self.records.get(chip_id)
    }

    /// Persists a record. Re-enrolling an identical record is an
    /// accepted no-op; a conflicting record is rejected.
    pub fn enroll(&mut self, record: EnrollmentRecord) -> Result<(), ProtocolError> {
        let chip_id = record.chip_id().to_string();
        if let Some(existing) = self.records.get(&chip_id) {
            if *existing == record {
                return Ok(());
            }
            return Err(ProtocolError::DuplicateChip(chip_id));
        }
        if let Some(file) = &mut self.file {
            file.write_all(&record.to_wire().encode())?;
            file.flush()?;
        }
        self.records.insert(chip_id, record);
        Ok(())
    }
}

/// Mirrors the device-side output stabilization over the golden planes:
/// the expected key for a dynamic-mode session under `session_map`.
pub fn server_expected_key(
    record: &EnrollmentRecord,
    session_map: &StabilizationMap,
    key_len: u32,
) -> Result<Key, ProtocolError> {
    match record {
        EnrollmentRecord::Dynamic { orig_plane, healed_plane, .. } => {
            if orig_plane.bits.len() != session_map.array_size() {
                return Err(ProtocolError::DimensionMismatch(
                    "session map does not match the enrolled planes".into(),
                ));
            }
            Ok(stabilize_readout(orig_plane, healed_plane, session_map, key_len)?)
        }
        EnrollmentRecord::Static { .. } => Err(ProtocolError::ModeMismatch),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub accept: bool,
    pub reason: String,
}

/// Checks a key proof against the server's expectation.
///
/// Static-mode chips are verified against the enrolled key prefix and
/// ignore any session map. Dynamic-mode chips require the session map
/// sent at power-up.
pub fn verify(
    db: &ServerDb,
    chip_id: &str,
    session_map: Option<&StabilizationMap>,
    key_proof: &Key,
    key_len: u32,
) -> Result<Verdict, ProtocolError> {
    let record = db
        .lookup(chip_id)
        .ok_or_else(|| ProtocolError::UnknownChip(chip_id.to_string()))?;
    let expected_bits: Vec<bool> = match record {
        EnrollmentRecord::Static { key, .. } => {
            if key_len > key.len() {
                return Err(ProtocolError::Keygen(KeygenError::KeyTooLong {
                    requested: key_len,
                    available: key.len(),
                }));
            }
            key.iter().take(key_len as usize).collect()
        }
        EnrollmentRecord::Dynamic { .. } => {
            let map = session_map.ok_or_else(|| {
                ProtocolError::MalformedMap("dynamic-mode session without a map".into())
            })?;
            server_expected_key(record, map, key_len)?.iter().collect()
        }
    };
    if key_proof.len() != key_len {
        return Ok(Verdict {
            accept: false,
            reason: format!("proof length {} != requested {key_len}", key_proof.len()),
        });
    }
    let matches = expected_bits
        .iter()
        .enumerate()
        .all(|(i, &b)| key_proof.bit(i) == b);
    Ok(if matches {
        Verdict { accept: true, reason: String::new() }
    } else {
        Verdict { accept: false, reason: "key proof mismatch".into() }
    })
}

/// Serves one framed-stream connection until EOF. Session maps persist
/// for the connection and apply to later key proofs for the same chip.
pub fn handle_connection<S: Read + Write>(
    stream: &mut S,
    db: &mut ServerDb,
) -> Result<(), ProtocolError> {
    let mut pending_maps: BTreeMap<String, StabilizationMap> = BTreeMap::new();
    loop {
        let msg = match WireMessage::read_from(stream) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = WireMessage::Verdict { accept: false, reason: e.to_string() }
                    .write_to(stream);
                return Err(e);
            }
        };
        match msg {
            WireMessage::EnrollStatic { .. } | WireMessage::EnrollDynamic { .. } => {
                let record = EnrollmentRecord::from_wire(msg).expect("enrollment message");
                let verdict = match db.enroll(record) {
                    Ok(()) => Verdict { accept: true, reason: String::new() },
                    Err(e) => Verdict { accept: false, reason: e.to_string() },
                };
                WireMessage::Verdict { accept: verdict.accept, reason: verdict.reason }
                    .write_to(stream)?;
            }
            WireMessage::SessionMap { chip_id, map } => {
                pending_maps.insert(chip_id, map);
            }
            WireMessage::KeyProof { chip_id, key } => {
                let verdict =
                    match verify(db, &chip_id, pending_maps.get(&chip_id), &key, key.len()) {
                        Ok(v) => v,
                        Err(e) => Verdict { accept: false, reason: e.to_string() },
                    };
                WireMessage::Verdict { accept: verdict.accept, reason: verdict.reason }
                    .write_to(stream)?;
            }
            WireMessage::Verdict { .. } => {
                return Err(ProtocolError::Malformed("unexpected verdict from client".into()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asch::MapSource;
    use crate::bits::BitGrid;

    const NOM: Environment = Environment { vdd: 1.2, temperature: 25.0 };

    fn toy_map(n: u32, mask: &[usize], heal: &[usize]) -> StabilizationMap {
        let mut m = BitGrid::new(1, n);
        let mut h = BitGrid::new(1, n);
        for &i in mask {
            m.set(i, true);
        }
        for &i in heal {
            h.set(i, true);
        }
        StabilizationMap::new(h, m, 8.0, MapSource::Dynamic, NOM)
    }

    fn toy_plane(bits: &[bool], config: CellConfig) -> BitPlane {
        let mut grid = BitGrid::new(1, bits.len() as u32);
        for (i, b) in bits.iter().enumerate() {
            grid.set(i, *b);
        }
        BitPlane { bits: grid, config, env: NOM, n_avg: 101 }
    }

    fn dynamic_record(chip_id: &str) -> EnrollmentRecord {
        EnrollmentRecord::Dynamic {
            chip_id: chip_id.into(),
            orig_plane: toy_plane(&[true, true, false, true, false], CellConfig::Original),
            healed_plane: toy_plane(&[false, false, true, false, true], CellConfig::Healed),
        }
    }

    #[test]
    fn frame_roundtrip_all_types() {
        let map = toy_map(5, &[1], &[2]);
        let key = Key::from_bits(vec![true, false, true], "kp");
        let messages = vec![
            WireMessage::EnrollStatic { chip_id: "c1".into(), key: key.clone(), map: map.clone() },
            match dynamic_record("c2").to_wire() {
                m @ WireMessage::EnrollDynamic { .. } => m,
                _ => unreachable!(),
            },
            WireMessage::SessionMap { chip_id: "c3".into(), map: map.clone() },
            WireMessage::KeyProof { chip_id: "c4".into(), key },
            WireMessage::Verdict { accept: true, reason: String::new() },
            WireMessage::Verdict { accept: false, reason: "nope".into() },
        ];
        for msg in messages {
            let bytes = msg.encode();
            let (back, used) = WireMessage::decode(&bytes).unwrap();
            assert_eq!(used, bytes.len());
            assert_eq!(back, msg);

            // stream framing agrees with slice framing
            let mut cursor = std::io::Cursor::new(bytes.clone());
            let streamed = WireMessage::read_from(&mut cursor).unwrap().unwrap();
            assert_eq!(streamed, msg);
        }
    }

    #[test]
    fn truncated_and_garbage_frames_are_rejected() {
        let msg = WireMessage::SessionMap { chip_id: "x".into(), map: toy_map(5, &[], &[]) };
        let bytes = msg.encode();
        for cut in [0, 3, 4, 7, bytes.len() - 1] {
            assert!(
                matches!(WireMessage::decode(&bytes[..cut]), Err(ProtocolError::Truncated)),
                "cut at {cut} not detected"
            );
        }
        let mut bad_tag = bytes.clone();
        bad_tag[4] = 0x77;
        assert!(matches!(WireMessage::decode(&bad_tag), Err(ProtocolError::UnknownTag(0x77))));

        let mut huge = bytes;
        huge[..4].copy_from_slice(&(u32::MAX).to_le_bytes());
        assert!(matches!(WireMessage::decode(&huge), Err(ProtocolError::Malformed(_))));
    }

    #[test]
    fn enroll_is_idempotent_but_rejects_conflicts() {
        let mut db = ServerDb::in_memory();
        db.enroll(dynamic_record("chip")).unwrap();
        db.enroll(dynamic_record("chip")).unwrap(); // identical, fine
        assert_eq!(db.len(), 1);

        let conflicting = EnrollmentRecord::Dynamic {
            chip_id: "chip".into(),
            orig_plane: toy_plane(&[false; 5], CellConfig::Original),
            healed_plane: toy_plane(&[false; 5], CellConfig::Healed),
        };
        assert!(matches!(db.enroll(conflicting), Err(ProtocolError::DuplicateChip(_))));
        assert_eq!(db.lookup("chip"), Some(&dynamic_record("chip")));
    }

    #[test]
    fn persistence_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("aschdb-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("enroll.db");
        let _ = std::fs::remove_file(&path);

        {
            let mut db = ServerDb::open(&path).unwrap();
            db.enroll(dynamic_record("alpha")).unwrap();
            db.enroll(EnrollmentRecord::Static {
                chip_id: "beta".into(),
                key: Key::from_bits(vec![true, true, false], "golden"),
                enrolled_map: toy_map(3, &[], &[]),
            })
            .unwrap();
        }
        let db = ServerDb::open(&path).unwrap();
        assert_eq!(db.len(), 2);
        assert_eq!(db.lookup("alpha"), Some(&dynamic_record("alpha")));
        assert!(matches!(db.lookup("beta"), Some(EnrollmentRecord::Static { .. })));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn expected_key_mirrors_device_stabilization() {
        let record = dynamic_record("chip");
        // empty map: first three golden original bits
        let empty = toy_map(5, &[], &[]);
        let k = server_expected_key(&record, &empty, 3).unwrap();
        assert_eq!(k.iter().collect::<Vec<_>>(), vec![true, true, false]);

        // mask cell 2, heal cell 3 (1-based): {PUF1, PUF3 healed, PUF4}
        let map = toy_map(5, &[1], &[2]);
        let k = server_expected_key(&record, &map, 3).unwrap();
        assert_eq!(k.iter().collect::<Vec<_>>(), vec![true, true, true]);

        let long = server_expected_key(&record, &map, 5);
        assert!(matches!(long, Err(ProtocolError::Keygen(KeygenError::KeyTooLong { .. }))));

        let wrong_dims = toy_map(7, &[], &[]);
        assert!(matches!(
            server_expected_key(&record, &wrong_dims, 1),
            Err(ProtocolError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn verify_static_and_dynamic_paths() {
        let mut db = ServerDb::in_memory();
        db.enroll(dynamic_record("dyn")).unwrap();
        db.enroll(EnrollmentRecord::Static {
            chip_id: "sta".into(),
            key: Key::from_bits(vec![true, false, true, true], "golden"),
            enrolled_map: toy_map(4, &[], &[]),
        })
        .unwrap();

        // static: no session map required
        let proof = Key::from_bits(vec![true, false, true, true], "p");
        assert!(verify(&db, "sta", None, &proof, 4).unwrap().accept);
        let bad = Key::from_bits(vec![true, false, true, false], "p");
        assert!(!verify(&db, "sta", None, &bad, 4).unwrap().accept);

        // dynamic: map drives the expectation
        let map = toy_map(5, &[1], &[2]);
        let proof = Key::from_bits(vec![true, true, true], "p");
        assert!(verify(&db, "dyn", Some(&map), &proof, 3).unwrap().accept);
        let flipped = Key::from_bits(vec![true, true, false], "p");
        assert!(!verify(&db, "dyn", Some(&map), &flipped, 3).unwrap().accept);
        assert!(matches!(
            verify(&db, "dyn", None, &proof, 3),
            Err(ProtocolError::MalformedMap(_))
        ));
        assert!(matches!(
            verify(&db, "ghost", None, &proof, 3),
            Err(ProtocolError::UnknownChip(_))
        ));
    }

    #[test]
    fn session_overhead_arithmetic() {
        // empty 4096-cell map: frame + id + map header + two 512-byte bitmaps
        let map = StabilizationMap::empty(32, 128, MapSource::Dynamic, NOM);
        let frame = session_overhead("chip-1", &map);
        let id_len = 2 + "chip-1".len();
        let map_len = 8 + 4 + 4 + 4 + 1 + 4 + 4 + 2 * 512;
        assert_eq!(frame, 4 + 1 + id_len + map_len);

        // toy 5-cell map, hand-computed
        let toy = toy_map(5, &[1], &[2]);
        assert_eq!(session_overhead("c", &toy), 4 + 1 + 3 + (29 + 2));

        // independent of key values: two maps with equal shapes match
        let a = toy_map(64, &[3, 9], &[4]);
        let b = toy_map(64, &[60], &[0, 1, 2]);
        assert_eq!(session_overhead("c", &a), session_overhead("c", &b));
        // two bitmap bits per array cell
        assert_eq!(
            (2 * map.array_size()).div_ceil(8),
            2 * 512,
        );
    }

    #[test]
    fn connection_handler_full_session() {
        // duplex over in-memory buffers: client writes, server consumes
        let mut db = ServerDb::in_memory();
        let map = toy_map(5, &[1], &[2]);
        let mut request = Vec::new();
        dynamic_record("chip").to_wire().write_to(&mut request).unwrap();
        WireMessage::SessionMap { chip_id: "chip".into(), map: map.clone() }
            .write_to(&mut request)
            .unwrap();
        WireMessage::KeyProof {
            chip_id: "chip".into(),
            key: Key::from_bits(vec![true, true, true], "p"),
        }
        .write_to(&mut request)
        .unwrap();

        struct Duplex {
            input: std::io::Cursor<Vec<u8>>,
            output: Vec<u8>,
        }
        impl Read for Duplex {
            fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
                self.input.read(buf)
            }
        }
        impl Write for Duplex {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.output.write(buf)
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }

        let mut duplex = Duplex { input: std::io::Cursor::new(request), output: Vec::new() };
        handle_connection(&mut duplex, &mut db).unwrap();

        let mut replies = Vec::new();
        let mut rest = &duplex.output[..];
        while !rest.is_empty() {
            let (msg, used) = WireMessage::decode(rest).unwrap();
            replies.push(msg);
            rest = &rest[used..];
        }
        assert_eq!(replies.len(), 2); // enroll ack + proof verdict
        assert!(matches!(&replies[0], WireMessage::Verdict { accept: true, .. }));
        assert!(matches!(&replies[1], WireMessage::Verdict { accept: true, .. }));
        assert_eq!(db.len(), 1);
    }
}
