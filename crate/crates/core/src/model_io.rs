//! Model files: a UTF-8 manifest naming every tensor and its shape, a blank
//! line, then all scalars as little-endian `f64` in manifest order.
//!
//! ```text
//! uvanet-model 1
//! kind = student
//! resolution = 64
//! block_kind = cares
//! tensors = 2
//! enc.stem.w 16 3 3 3
//! enc.stem.scale 1 16 1 1
//!
//! <binary payload>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::{NetKind, NetworkConfig, SpatiotemporalNet, StudentNet};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Shape;

const MAGIC: &str = "uvanet-model 1";

/// Either trained network, as stored on disk.
#[derive(Clone, Debug)]
pub enum Model {
    Student(StudentNet),
    Spatiotemporal(SpatiotemporalNet),
}

impl Model {
    pub fn kind(&self) -> NetKind {
        match self {
            Model::Student(_) => NetKind::Student,
            Model::Spatiotemporal(_) => NetKind::Spatiotemporal,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        match self {
            Model::Student(n) => &n.config,
            Model::Spatiotemporal(n) => &n.config,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Student(n) => &n.store,
            Model::Spatiotemporal(n) => &n.store,
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Student(n) => &mut n.store,
            Model::Spatiotemporal(n) => &mut n.store,
        }
    }

    /// Network of `kind` for `config` with placeholder weights.
    pub fn build(kind: NetKind, config: NetworkConfig) -> Result<Self> {
        let mut r = rng::seeded(0);
        Ok(match kind {
            NetKind::Student => Model::Student(StudentNet::new(config, &mut r)?),
            NetKind::Spatiotemporal => {
                Model::Spatiotemporal(SpatiotemporalNet::new(config, &mut r)?)
            }
        })
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let store = model.store();
    let mut head = format!("{MAGIC}\nkind = {}\n", model.kind());
    head.push_str(&model.config().to_text());
    head.push_str(&format!("tensors = {}\n", store.len()));
    for (_, p) in store.iter() {
        let s = p.tensor.shape();
        head.push_str(&format!(
            "{} {} {} {} {}\n",
            p.name, s.batch, s.channels, s.height, s.width
        ));
    }
    head.push('\n');
    let mut out = head.into_bytes();
    out.reserve(8 * store.scalar_count());
    for (_, p) in store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Model> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| format_err(path, bytes.len(), "manifest not terminated by a blank line"))?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|e| format_err(path, e.valid_up_to(), "manifest is not UTF-8"))?;
    let payload = &bytes[end + 2..];

    let mut offset = 0;
    let mut lines = text.split('\n').map(|l| {
        let at = offset;
        offset += l.len() + 1;
        (at, l)
    });
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| format_err(path, end, format!("missing {what}")))
    };

    let (at, magic) = next("header")?;
    if magic != MAGIC {
        return Err(format_err(path, at, format!("expected `{MAGIC}`")));
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        let (at, line) = next(key)?;
        match line.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok((at, v.trim().to_string())),
            _ => Err(format_err(path, at, format!("expected `{key} = ...`"))),
        }
    };
    let (at, kind) = field("kind")?;
    let kind: NetKind = kind
        .parse()
        .map_err(|_| format_err(path, at, format!("unknown kind `{kind}`")))?;
    let (_, res) = field("resolution")?;
    let (at, block) = field("block_kind")?;
    let config = NetworkConfig::from_text(&format!("resolution = {res}\nblock_kind = {block}\n"))
        .map_err(|e| format_err(path, at, e.to_string()))?;
    let (at, count) = field("tensors")?;
    let count: usize = count
        .parse()
        .map_err(|_| format_err(path, at, "bad tensor count"))?;

    let mut model = Model::build(kind, config)?;
    if count != model.store().len() {
        return Err(format_err(
            path,
            at,
            format!(
                "{count} tensors listed, network has {}",
                model.store().len()
            ),
        ));
    }
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let (at, line) = next("tensor entry")?;
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default();
        let dims: Vec<usize> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format_err(path, at, "bad shape"))?;
        let [b, c, h, w] = dims[..] else {
            return Err(format_err(path, at, "shape needs four dimensions"));
        };
        let shape = Shape::new(b, c, h, w);
        let id = model
            .store()
            .id(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let expected = model.store().tensor(id).shape();
        if expected != shape {
            return Err(Error::TransferShape {
                name: name.to_string(),
                source_shape: shape,
                target_shape: expected,
            });
        }
        order.push(id);
    }

    let scalars: usize = order
        .iter()
        .map(|&id| model.store().tensor(id).numel())
        .sum();
    if payload.len() != 8 * scalars {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: end + 2 + 8 * scalars,
            found: bytes.len(),
        });
    }
    let mut chunks = payload.chunks_exact(8);
    let store = model.store_mut();
    for id in order {
        for v in store.tensor_mut(id).data_mut() {
            let chunk = chunks.next().expect("payload length checked");
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}
