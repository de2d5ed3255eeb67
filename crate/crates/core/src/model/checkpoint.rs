use std::io::{Read, Write};
use std::path::Path;

use super::{AttentionMode, HeadMerge, LayerParams, ModelConfig, ModelError, ModelParams};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"DLNK";
const VERSION: u32 = 1;

/// Trained parameters plus the seed of the neighbor table they were trained
/// against. The binary layout is little-endian:
///
/// ```text
/// "DLNK" | u32 version
/// u32 heads1 | u32 heads2 | u32 in_dim | u32 hidden | u32 embed_dim
/// u32 sample_size | u8 attention (0 learned, 1 all_ones) | u64 table_seed
/// u32 tensor count, then per tensor:
///     u32 name length | name | u32 rows | u32 cols | rows*cols f64
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub table_seed: u64,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        self.params.validate()?;
        let c = &self.params.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [c.heads1, c.heads2, c.in_dim, c.hidden, c.embed_dim, c.sample_size] {
            put_u32(&mut out, v)?;
        }
        out.push(match c.attention {
            AttentionMode::Learned => 0,
            AttentionMode::AllOnes => 1,
        });
        out.extend_from_slice(&self.table_seed.to_le_bytes());
        let tensors = self.params.named_tensors();
        put_u32(&mut out, tensors.len())?;
        for (name, t) in tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows())?;
            put_u32(&mut out, t.cols())?;
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let heads1 = r.u32()?;
        let heads2 = r.u32()?;
        let in_dim = r.u32()?;
        let hidden = r.u32()?;
        let embed_dim = r.u32()?;
        let sample_size = r.u32()?;
        let attention = match r.u8()? {
            0 => AttentionMode::Learned,
            1 => AttentionMode::AllOnes,
            other => return Err(bad(format!("unknown attention mode tag {other}"))),
        };
        let table_seed = r.u64()?;
        let config = ModelConfig {
            in_dim,
            heads1,
            hidden,
            heads2,
            embed_dim,
            sample_size,
            attention,
        };
        config.validate()?;

        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_owned();
            let rows = r.u32()?;
            let cols = r.u32()?;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.buf.len()))
                .ok_or_else(|| bad(format!("tensor {name} overruns the file")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            tensors.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }

        let mut take = |name: String| -> Result<Tensor, ModelError> {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            Ok(tensors.swap_remove(pos).1)
        };
        let learned = attention == AttentionMode::Learned;
        let mut layer = |lname: &str, heads: usize, merge: HeadMerge| -> Result<LayerParams, ModelError> {
            let weights = (0..heads)
                .map(|k| take(format!("{lname}.head{k}.weight")))
                .collect::<Result<_, _>>()?;
            let attention = if learned {
                Some(
                    (0..heads)
                        .map(|k| take(format!("{lname}.head{k}.attention")))
                        .collect::<Result<_, _>>()?,
                )
            } else {
                None
            };
            Ok(LayerParams {
                weights,
                attention,
                merge,
            })
        };
        let layer1 = layer("layer1", heads1, HeadMerge::Concat)?;
        let layer2 = layer("layer2", heads2, HeadMerge::Average)?;
        let theta = take("theta".to_owned())?;
        if let Some((name, _)) = tensors.first() {
            return Err(bad(format!("unexpected tensor {name}")));
        }
        let params = ModelParams {
            config,
            layer1,
            layer2,
            theta,
        };
        params.validate()?;
        if params.named_tensors().iter().any(|(_, t)| !t.is_finite()) {
            return Err(bad("non-finite parameter values"));
        }
        Ok(Self { params, table_seed })
    }

    pub fn write(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes()?;
        let io = |source| ModelError::Io {
            path: path.to_owned(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_owned(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(io)?
            .read_to_end(&mut bytes)
            .map_err(io)?;
        Self::from_bytes(&bytes)
    }
}
