//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "SUPERAND"           8 bytes
//! version u32                 currently 1
//! count  u32                  number of sections
//! section* { tag [u8; 4], len u64, payload [u8; len], crc32(payload) u32 }
//! ```
//!
//! Sections: `CONF` config text, `CURS` round/epoch cursor, `ENCP` encoder
//! weights, `OPTM` momentum, `MEMB` memory bank, `NBHD` (only mid-round)
//! neighbors, selection and entropies, `RNGS` shuffle and augmentation
//! streams. Real values are stored as f32.

use std::collections::HashMap;
use std::path::Path;

use super::config::{emit_config, parse_config};
use crate::encoder::{EncoderParams, EncoderShape, Tensors};
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::neighborhood::NeighborhoodState;
use crate::rng::RngState;
use crate::trainer::{OptimizerState, TrainState};

pub const MAGIC: &[u8; 8] = b"SUPERAND";
pub const VERSION: u32 = 1;

const REQUIRED: [&[u8; 4]; 6] = [b"CONF", b"CURS", b"ENCP", b"OPTM", b"MEMB", b"RNGS"];

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend(v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn f32s(&mut self, values: &[f64]) {
        self.u32(values.len());
        for &v in values {
            self.0.extend((v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        Reader { buf, pos: 0, section }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("section {} ends early", self.section),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f32s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.bad("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.bad("trailing bytes"));
        }
        Ok(())
    }
    fn bad(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: format!("section {}: {msg}", self.section),
        }
    }
}

fn write_tensors(w: &mut Writer, t: &Tensors) {
    for s in t.slices() {
        w.f32s(s);
    }
}

fn read_tensors(r: &mut Reader, shape: &EncoderShape) -> Result<Tensors> {
    let mut t = Tensors::zeros(shape);
    for s in t.slices_mut() {
        let values = r.f32s()?;
        if values.len() != s.len() {
            return Err(r.bad("tensor length does not match the encoder shape"));
        }
        *s = values;
    }
    Ok(t)
}

fn write_rng(w: &mut Writer, s: &RngState) {
    w.bytes(&s.seed);
    w.u64(s.stream);
    w.u128(s.word_pos);
}

fn read_rng(r: &mut Reader) -> Result<RngState> {
    Ok(RngState {
        seed: r.take(32)?.try_into().unwrap(),
        stream: r.u64()?,
        word_pos: r.u128()?,
    })
}

/// Serializes a training state.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();

    sections.push((b"CONF", emit_config(&state.config).into_bytes()));

    let mut w = Writer::default();
    w.u32(state.round);
    w.u32(state.epoch);
    w.u8(state.neighborhood.is_some() as u8);
    sections.push((b"CURS", w.0));

    let mut w = Writer::default();
    let s = &state.params.shape;
    for v in [s.height, s.width, s.channels, s.hidden, s.embed_dim] {
        w.u32(v);
    }
    write_tensors(&mut w, &state.params.weights);
    sections.push((b"ENCP", w.0));

    let mut w = Writer::default();
    write_tensors(&mut w, &state.optimizer.momentum);
    sections.push((b"OPTM", w.0));

    let mut w = Writer::default();
    w.u32(state.bank.len());
    w.u32(state.bank.dim());
    w.f32s(state.bank.as_flat());
    sections.push((b"MEMB", w.0));

    if let Some(nb) = &state.neighborhood {
        let mut w = Writer::default();
        w.u32(nb.neighbors.len());
        w.u32(nb.k);
        w.u32(nb.round);
        for list in &nb.neighbors {
            for &j in list {
                w.u32(j);
            }
        }
        for &f in nb.selected_flags() {
            w.u8(f as u8);
        }
        w.f32s(&nb.entropies);
        sections.push((b"NBHD", w.0));
    }

    let mut w = Writer::default();
    write_rng(&mut w, &state.shuffle_rng);
    write_rng(&mut w, &state.augment_rng);
    sections.push((b"RNGS", w.0));

    let mut out = Writer::default();
    out.bytes(MAGIC);
    out.u32(VERSION as usize);
    out.u32(sections.len());
    for (tag, payload) in sections {
        out.bytes(tag);
        out.u64(payload.len() as u64);
        out.bytes(&payload);
        out.0.extend(crc32fast::hash(&payload).to_le_bytes());
    }
    out.0
}

fn tag_name(tag: &[u8]) -> String {
    String::from_utf8_lossy(tag).into_owned()
}

/// Parses checkpoint bytes, verifying every section checksum.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut header = Reader::new(&bytes[8..], "header");
    let version = header.u32()? as u32;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = header.u32()?;
    let mut pos = 16usize;
    let mut payloads: HashMap<[u8; 4], &[u8]> = HashMap::new();
    for _ in 0..count {
        if bytes.len() - pos < 12 {
            return Err(Error::Format {
                offset: pos as u64,
                message: "truncated section header".into(),
            });
        }
        let tag: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap());
        let start = pos + 12;
        let avail = (bytes.len() - start) as u64;
        if avail < 4 || len > avail - 4 {
            return Err(Error::Checksum { section: tag_name(&tag) });
        }
        let end = start + len as usize;
        let payload = &bytes[start..end];
        let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(Error::Checksum { section: tag_name(&tag) });
        }
        if payloads.insert(tag, payload).is_some() {
            return Err(Error::Format {
                offset: pos as u64,
                message: format!("duplicate section {}", tag_name(&tag)),
            });
        }
        pos = end + 4;
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos as u64,
            message: "trailing bytes after the last section".into(),
        });
    }
    for tag in REQUIRED {
        if !payloads.contains_key(tag) {
            return Err(Error::Format {
                offset: pos as u64,
                message: format!("missing section {}", tag_name(tag)),
            });
        }
    }
    if let Some(tag) = payloads
        .keys()
        .find(|t| !REQUIRED.contains(t) && *t != b"NBHD")
    {
        return Err(Error::Format {
            offset: 0,
            message: format!("unknown section {}", tag_name(tag)),
        });
    }

    let conf = std::str::from_utf8(payloads[b"CONF"]).map_err(|_| Error::Format {
        offset: 0,
        message: "config section is not UTF-8".into(),
    })?;
    let config = parse_config(conf)?;

    let mut r = Reader::new(payloads[b"CURS"], "CURS");
    let round = r.u32()?;
    let epoch = r.u32()?;
    let has_nb = r.u8()? != 0;
    r.finish()?;
    if round == 0 || round > config.rounds + 1 || epoch >= config.epochs_per_round {
        return Err(Error::State(format!("cursor round {round} epoch {epoch} is out of range")));
    }

    let mut r = Reader::new(payloads[b"ENCP"], "ENCP");
    let shape = EncoderShape {
        height: r.u32()?,
        width: r.u32()?,
        channels: r.u32()?,
        hidden: r.u32()?,
        embed_dim: r.u32()?,
    };
    shape.validate()?;
    let weights = read_tensors(&mut r, &shape)?;
    r.finish()?;
    let params = EncoderParams::from_weights(shape, weights)?;

    let mut r = Reader::new(payloads[b"OPTM"], "OPTM");
    let momentum = read_tensors(&mut r, &shape)?;
    r.finish()?;

    let mut r = Reader::new(payloads[b"MEMB"], "MEMB");
    let n = r.u32()?;
    let d = r.u32()?;
    let data = r.f32s()?;
    r.finish()?;
    let bank = MemoryBank::from_flat(n, d, data)?;
    if d != shape.embed_dim {
        return Err(Error::State("memory dimension differs from the encoder output".into()));
    }

    let neighborhood = match (has_nb, payloads.get(b"NBHD")) {
        (true, Some(p)) => {
            let mut r = Reader::new(p, "NBHD");
            let count = r.u32()?;
            let k = r.u32()?;
            let nb_round = r.u32()?;
            if count != n {
                return Err(r.bad("neighbor count differs from memory size"));
            }
            let mut neighbors = Vec::with_capacity(count);
            for _ in 0..count {
                neighbors.push((0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
            }
            let selected = (0..count).map(|_| Ok(r.u8()? != 0)).collect::<Result<Vec<_>>>()?;
            let entropies = r.f32s()?;
            r.finish()?;
            Some(NeighborhoodState::from_parts(k, nb_round, neighbors, entropies, selected)?)
        }
        (false, None) => None,
        _ => return Err(Error::State("cursor and neighborhood section disagree".into())),
    };

    let mut r = Reader::new(payloads[b"RNGS"], "RNGS");
    let shuffle_rng = read_rng(&mut r)?;
    let augment_rng = read_rng(&mut r)?;
    r.finish()?;

    Ok(TrainState {
        config,
        params,
        optimizer: OptimizerState { momentum },
        bank,
        neighborhood,
        round,
        epoch,
        shuffle_rng,
        augment_rng,
    })
}

/// Writes atomically: the file is written beside `path`, then renamed.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
