//! "LGN1" checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"LGN1"
//! u32 json_len, json_len bytes of UTF-8 JSON (model header)
//! repeated until EOF:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank x u64 extents
//!   product(extents) x f64 payload
//! ```

use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneParams, ConvLayer, ConvStack};
use crate::error::{LgError, Result};
use crate::tensor_autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"LGN1";

/// Upper bound on a single tensor's rank and element count, to fail fast on garbage.
const MAX_RANK: usize = 8;
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(header_json: String) -> Self {
        Checkpoint {
            header_json,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header_json.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(LgError::Checkpoint(format!(
                "{}: bad magic {:?}, expected \"LGN1\"",
                origin.display(),
                String::from_utf8_lossy(magic)
            )));
        }
        let json_len = r.u32()? as usize;
        let header_json = r.utf8(json_len)?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = r.utf8(name_len)?;
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(r.corrupt(format!("tensor {name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut count: u64 = 1;
            for _ in 0..rank {
                let e = r.u64()?;
                count = count.saturating_mul(e);
                shape.push(e as usize);
            }
            if count > MAX_ELEMENTS {
                return Err(r.corrupt(format!("tensor {name}: {count} elements")));
            }
            let payload = r.take(count as usize * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { header_json, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| LgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LgError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// The tensor called `name`, which must have exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| LgError::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(LgError::Checkpoint(format!(
                "tensor {name} has shape {:?}, config needs {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t.clone())
    }

    pub fn push_stack(&mut self, prefix: &str, stack: &ConvStack) {
        for (i, l) in stack.layers.iter().enumerate() {
            self.push(format!("{prefix}.conv{i}.weight"), l.kernels.clone());
            self.push(format!("{prefix}.conv{i}.bias"), l.bias.clone());
        }
    }

    pub fn read_stack(&self, prefix: &str, config: &BackboneConfig) -> Result<ConvStack> {
        let template = ConvStack::zeros(config);
        let layers = template
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(ConvLayer {
                    kernels: self.expect(&format!("{prefix}.conv{i}.weight"), l.kernels.shape())?,
                    bias: self.expect(&format!("{prefix}.conv{i}.bias"), l.bias.shape())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ConvStack { layers })
    }

    pub fn push_backbone(&mut self, prefix: &str, params: &BackboneParams) {
        self.push_stack(prefix, &params.stack);
        self.push(format!("{prefix}.fc.weight"), params.fc_w.clone());
        self.push(format!("{prefix}.fc.bias"), params.fc_b.clone());
    }

    pub fn read_backbone(&self, prefix: &str, config: &BackboneConfig) -> Result<BackboneParams> {
        let (a, k) = (config.num_attributes, config.final_channels);
        Ok(BackboneParams {
            stack: self.read_stack(prefix, config)?,
            fc_w: self.expect(&format!("{prefix}.fc.weight"), &[a, k])?,
            fc_b: self.expect(&format!("{prefix}.fc.bias"), &[a])?,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: String) -> LgError {
        LgError::corrupt(self.origin, format!("offset {}: {detail}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| self.corrupt(format!("invalid UTF-8: {e}")))
    }
}
