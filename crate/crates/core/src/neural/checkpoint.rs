//! Self-describing binary checkpoint container.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, a UTF-8 JSON
//! header, then each section's payload back to back in header order.
//! `f64` and `u64` payloads are little-endian; `u8` payloads are raw bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{AdamConfig, AdamState, LayerSpec, NeuralError, QNetwork};

pub const MAGIC: &[u8; 8] = b"BTCKPT\x00\x01";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint is missing section `{0}`")]
    MissingSection(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl SectionData {
    fn dtype(&self) -> &'static str {
        match self {
            SectionData::F64(_) => "f64",
            SectionData::U64(_) => "u64",
            SectionData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            SectionData::F64(v) => v.len(),
            SectionData::U64(v) => v.len(),
            SectionData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    dtype: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    endianness: String,
    layout: String,
    sections: Vec<SectionHeader>,
    meta: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkMeta {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
}

const LAYOUT: &str =
    "row-major; activations [channel][row][col]; conv weights [out][in][kh][kw]; dense weights [out][in]; per layer weights then bias";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Map<String, Value>,
    sections: Vec<(String, SectionData)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn put(&mut self, name: impl Into<String>, data: SectionData) {
        let name = name.into();
        match self.sections.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = data,
            None => self.sections.push((name, data)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&SectionData, CheckpointError> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64], CheckpointError> {
        match self.get(name)? {
            SectionData::F64(v) => Ok(v),
            other => Err(CheckpointError::Header(format!("section `{name}` is {}, expected f64", other.dtype()))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64], CheckpointError> {
        match self.get(name)? {
            SectionData::U64(v) => Ok(v),
            other => Err(CheckpointError::Header(format!("section `{name}` is {}, expected u64", other.dtype()))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        match self.get(name)? {
            SectionData::U8(v) => Ok(v),
            other => Err(CheckpointError::Header(format!("section `{name}` is {}, expected u8", other.dtype()))),
        }
    }

    /// Store a network's architecture in the header and its tensors as
    /// sections `{prefix}.t{i}`.
    pub fn put_network(&mut self, prefix: &str, net: &QNetwork) {
        let meta = NetworkMeta { input_shape: net.input_shape(), layers: net.specs().to_vec() };
        let networks = self.meta.entry("networks").or_insert_with(|| Value::Object(Map::new()));
        if let Value::Object(map) = networks {
            map.insert(prefix.to_string(), serde_json::to_value(meta).expect("network meta serializes"));
        }
        for (i, t) in net.tensors().enumerate() {
            self.put(format!("{prefix}.t{i}"), SectionData::F64(t.to_vec()));
        }
    }

    pub fn network(&self, prefix: &str) -> Result<QNetwork, CheckpointError> {
        let meta = self
            .meta
            .get("networks")
            .and_then(|n| n.get(prefix))
            .ok_or_else(|| CheckpointError::MissingSection(format!("networks.{prefix}")))?;
        let meta: NetworkMeta = serde_json::from_value(meta.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut net = QNetwork::zeros(meta.input_shape, meta.layers)?;
        let n = net.tensors().count();
        let tensors = (0..n).map(|i| self.f64s(&format!("{prefix}.t{i}")).map(<[f64]>::to_vec)).collect::<Result<Vec<_>, _>>()?;
        net.load_tensors(&tensors)?;
        Ok(net)
    }

    pub fn put_adam(&mut self, prefix: &str, adam: &AdamState) {
        let cfg = serde_json::to_value(adam.config).expect("adam config serializes");
        let entry = self.meta.entry("optimizers").or_insert_with(|| Value::Object(Map::new()));
        if let Value::Object(map) = entry {
            map.insert(prefix.to_string(), cfg);
        }
        self.put(format!("{prefix}.step"), SectionData::U64(vec![adam.step_count]));
        for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
            self.put(format!("{prefix}.m{i}"), SectionData::F64(m.clone()));
            self.put(format!("{prefix}.v{i}"), SectionData::F64(v.clone()));
        }
    }

    /// Restore optimizer state shaped for `net`.
    pub fn adam(&self, prefix: &str, net: &QNetwork) -> Result<AdamState, CheckpointError> {
        let cfg = self
            .meta
            .get("optimizers")
            .and_then(|n| n.get(prefix))
            .ok_or_else(|| CheckpointError::MissingSection(format!("optimizers.{prefix}")))?;
        let config: AdamConfig = serde_json::from_value(cfg.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut state = AdamState::new(config, net);
        state.step_count = *self
            .u64s(&format!("{prefix}.step"))?
            .first()
            .ok_or_else(|| CheckpointError::Header(format!("empty `{prefix}.step`")))?;
        for i in 0..state.m.len() {
            let m = self.f64s(&format!("{prefix}.m{i}"))?;
            let v = self.f64s(&format!("{prefix}.v{i}"))?;
            if m.len() != state.m[i].len() || v.len() != state.v[i].len() {
                return Err(NeuralError::ShapeMismatch {
                    expected: format!("{} moments", state.m[i].len()),
                    got: format!("{}/{}", m.len(), v.len()),
                }
                .into());
            }
            state.m[i].copy_from_slice(m);
            state.v[i].copy_from_slice(v);
        }
        Ok(state)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let header = Header {
            format: "beamtune-checkpoint".into(),
            version: FORMAT_VERSION,
            endianness: "little".into(),
            layout: LAYOUT.into(),
            sections: self
                .sections
                .iter()
                .map(|(n, d)| SectionHeader { name: n.clone(), dtype: d.dtype().into(), len: d.len() })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, data) in &self.sections {
            match data {
                SectionData::F64(v) => {
                    let mut buf = Vec::with_capacity(v.len() * 8);
                    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
                SectionData::U64(v) => {
                    let mut buf = Vec::with_capacity(v.len() * 8);
                    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
                SectionData::U8(v) => w.write_all(v)?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > MAX_HEADER_BYTES {
            return Err(CheckpointError::Header(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.endianness != "little" || header.version != FORMAT_VERSION {
            return Err(CheckpointError::Header(format!(
                "unsupported version {} / endianness {}",
                header.version, header.endianness
            )));
        }
        let mut sections = Vec::with_capacity(header.sections.len());
        for s in header.sections {
            let data = match s.dtype.as_str() {
                "f64" => SectionData::F64(read_words(&mut r, s.len)?.into_iter().map(f64::from_le_bytes).collect()),
                "u64" => SectionData::U64(read_words(&mut r, s.len)?.into_iter().map(u64::from_le_bytes).collect()),
                "u8" => {
                    let mut v = vec![0u8; s.len];
                    r.read_exact(&mut v)?;
                    SectionData::U8(v)
                }
                other => return Err(CheckpointError::Header(format!("unknown dtype `{other}`"))),
            };
            sections.push((s.name, data));
        }
        Ok(Self { meta: header.meta, sections })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_words<R: Read>(r: &mut R, n: usize) -> Result<Vec<[u8; 8]>, CheckpointError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| c.try_into().expect("8-byte chunk")).collect())
}
