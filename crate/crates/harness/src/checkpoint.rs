//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "TNN1"                 magic
//! u32                    format version
//! u32 + bytes            JSON descriptor (model kind, architecture, metadata)
//! u32                    tensor count
//! per tensor:
//!   u32 + bytes          UTF-8 name
//!   u32 + u32 * rank     shape
//!   f32 * numel          payload
//! u64                    FNV-1a of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tnn_core::controller::{ActionSet, ControllerPolicy};
use tnn_core::objectives::{BernoulliGatePolicy, PolicyInput};
use tnn_core::rng::seeded;
use tnn_core::tmodule::{ArchSpec, TNetwork};
use tnn_core::Tensor;

const MAGIC: &[u8; 4] = b"TNN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    NotCheckpoint,
    UnsupportedVersion(u32),
    CorruptHeader(String),
    Truncated(&'static str),
    ChecksumMismatch { stored: u64, computed: u64 },
    ModelMismatch(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint i/o: {e}"),
            CheckpointError::NotCheckpoint => write!(f, "not a checkpoint (bad magic bytes)"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v} (expected {FORMAT_VERSION})")
            }
            CheckpointError::CorruptHeader(m) => write!(f, "corrupt checkpoint header: {m}"),
            CheckpointError::Truncated(what) => write!(f, "truncated {what}"),
            CheckpointError::ChecksumMismatch { stored, computed } => {
                write!(f, "checksum mismatch: stored {stored:016x}, computed {computed:016x}")
            }
            CheckpointError::ModelMismatch(m) => {
                write!(f, "checkpoint does not fit its architecture: {m}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// What a checkpoint holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Datapath {
        arch: ArchSpec,
    },
    GatePolicy {
        arch: ArchSpec,
        input: PolicyInput,
        sizes: Vec<usize>,
    },
    Controller {
        arch: ArchSpec,
        actions: Vec<f64>,
    },
}

impl ModelDescriptor {
    pub fn arch(&self) -> &ArchSpec {
        match self {
            ModelDescriptor::Datapath { arch }
            | ModelDescriptor::GatePolicy { arch, .. }
            | ModelDescriptor::Controller { arch, .. } => arch,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelDescriptor::Datapath { .. } => "datapath",
            ModelDescriptor::GatePolicy { .. } => "gate_policy",
            ModelDescriptor::Controller { .. } => "controller",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelDescriptor,
    meta: Metadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelDescriptor,
    pub meta: Metadata,
    pub tensors: Vec<(String, Tensor)>,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn of_network(net: &TNetwork, meta: Metadata) -> Self {
        Self::with_tensors(ModelDescriptor::Datapath { arch: net.spec() }, net, meta)
    }

    pub fn of_gate_policy(p: &BernoulliGatePolicy, meta: Metadata) -> Self {
        let model = ModelDescriptor::GatePolicy {
            arch: p.net.spec(),
            input: p.input,
            sizes: p.sizes().to_vec(),
        };
        Self::with_tensors(model, &p.net, meta)
    }

    pub fn of_controller(c: &ControllerPolicy, meta: Metadata) -> Self {
        let model = ModelDescriptor::Controller {
            arch: c.net.spec(),
            actions: c.actions.values().to_vec(),
        };
        Self::with_tensors(model, &c.net, meta)
    }

    fn with_tensors(model: ModelDescriptor, net: &TNetwork, meta: Metadata) -> Self {
        let tensors = net
            .param_names()
            .into_iter()
            .zip(net.params().into_iter().cloned())
            .collect();
        Checkpoint {
            version: FORMAT_VERSION,
            model,
            meta,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        put_u32(&mut buf, header.len());
        buf.extend_from_slice(&header);
        put_u32(&mut buf, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut buf, name.len());
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut buf, d);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::NotCheckpoint);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = r.u32("header")? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        let count = r.u32("header")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32("tensor header")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor header")?)
                .map_err(|_| CheckpointError::CorruptHeader("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("tensor header")? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32("tensor header").map(|d| d as usize))
                .collect::<Result<_, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::CorruptHeader(format!("tensor `{name}` is impossibly large")))?;
            let data = r
                .take(numel, "tensor payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
            tensors.push((name, t));
        }
        let body_end = r.pos;
        let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(CheckpointError::CorruptHeader(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let computed = fnv1a(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        Ok(Checkpoint {
            version,
            model: header.model,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Builds the network named by the descriptor and fills in the stored
    /// parameters, checking names and shapes.
    pub fn network(&self) -> Result<TNetwork, CheckpointError> {
        let mut net: TNetwork = TNetwork::build(self.model.arch(), &mut seeded(0))
            .map_err(|e| CheckpointError::ModelMismatch(e.to_string()))?;
        let names = net.param_names();
        if names.len() != self.tensors.len() {
            return Err(CheckpointError::ModelMismatch(format!(
                "architecture has {} tensors, file has {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for ((want, slot), (name, t)) in names.iter().zip(net.params_mut()).zip(&self.tensors) {
            if want != name || slot.shape() != t.shape() {
                return Err(CheckpointError::ModelMismatch(format!(
                    "expected `{want}` {:?}, found `{name}` {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(net)
    }

    pub fn datapath(&self) -> Result<TNetwork, CheckpointError> {
        match &self.model {
            ModelDescriptor::Datapath { .. } => self.network(),
            other => Err(CheckpointError::ModelMismatch(format!(
                "expected a datapath, found {}",
                other.kind()
            ))),
        }
    }

    pub fn gate_policy(&self) -> Result<BernoulliGatePolicy, CheckpointError> {
        match &self.model {
            ModelDescriptor::GatePolicy { input, sizes, .. } => {
                BernoulliGatePolicy::from_parts(self.network()?, *input, sizes.clone())
                    .map_err(|e| CheckpointError::ModelMismatch(e.to_string()))
            }
            other => Err(CheckpointError::ModelMismatch(format!(
                "expected a gate policy, found {}",
                other.kind()
            ))),
        }
    }

    pub fn controller(&self) -> Result<ControllerPolicy, CheckpointError> {
        match &self.model {
            ModelDescriptor::Controller { actions, .. } => {
                let actions = ActionSet::from_values(actions.clone())
                    .map_err(|e| CheckpointError::ModelMismatch(e.to_string()))?;
                ControllerPolicy::new(self.network()?, actions)
                    .map_err(|e| CheckpointError::ModelMismatch(e.to_string()))
            }
            other => Err(CheckpointError::ModelMismatch(format!(
                "expected a controller, found {}",
                other.kind()
            ))),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tnn_core::gating::Ordering;
    use tnn_core::tmodule::vgg_w;

    fn net() -> TNetwork {
        TNetwork::build(&vgg_w(&[1, 8, 8], 8, 4, 10, Ordering::Nested), &mut seeded(3)).unwrap()
    }

    fn ckpt() -> Checkpoint {
        Checkpoint::of_network(
            &net(),
            Metadata {
                seed: 3,
                config_hash: "abc".into(),
                extra: BTreeMap::new(),
            },
        )
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let n = back.datapath().unwrap();
        assert_eq!(n, net());
    }

    #[test]
    fn truncation_reports_payload() {
        let bytes = ckpt().to_bytes();
        let cut = &bytes[..bytes.len() - 100];
        let err = Checkpoint::from_bytes(cut).unwrap_err();
        assert_eq!(err.to_string(), "truncated tensor payload");
    }

    #[test]
    fn distinct_diagnostics() {
        let bytes = ckpt().to_bytes();
        assert_eq!(
            Checkpoint::from_bytes(b"PK\x03\x04rest").unwrap_err().to_string(),
            "not a checkpoint (bad magic bytes)"
        );
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(CheckpointError::UnsupportedVersion(2))
        ));
        let mut bad_header = bytes.clone();
        bad_header[12] = b'!';
        assert!(matches!(
            Checkpoint::from_bytes(&bad_header),
            Err(CheckpointError::CorruptHeader(_))
        ));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 20;
        flipped[last] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&extra),
            Err(CheckpointError::CorruptHeader(_))
        ));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        assert!(ckpt().controller().is_err());
        assert!(ckpt().gate_policy().is_err());
    }
}
