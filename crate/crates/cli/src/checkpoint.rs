//! Checkpoints: a text header followed by little-endian f64 tensor data.
//!
//! ```text
//! ovd-checkpoint 1
//! meta model.channels=64
//! ...
//! tensor backbone.patch8.w 192,64 0
//! ...
//! end
//! <raw data>
//! ```
//!
//! Offsets count bytes from the first byte after the `end` line.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ovd_core::Tensor;

const MAGIC: &str = "ovd-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free `key=value` metadata, in order.
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::from(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {name} {} {offset}\n", shape.join(",")));
            offset += t.len() * 8;
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .context("checkpoint header is not terminated by `end`")?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).context("checkpoint header is not UTF-8")?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        if lines.first() != Some(&MAGIC) {
            bail!("not a checkpoint (expected `{MAGIC}`)");
        }
        let data = &bytes[pos..];
        let mut meta = Vec::new();
        let mut tensors = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(1) {
            let at = || format!("checkpoint header line {}", i + 1);
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv.split_once('=').with_context(at)?;
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    bail!("{}: expected `tensor <name> <shape> <offset>`", at());
                }
                let shape: Vec<usize> = parts[1]
                    .split(',')
                    .map(|d| d.parse().with_context(at))
                    .collect::<Result<_>>()?;
                let offset: usize = parts[2].parse().with_context(at)?;
                let n: usize = shape.iter().product();
                let end = offset + n * 8;
                if end > data.len() {
                    bail!("{}: tensor `{}` runs past the end of the file", at(), parts[0]);
                }
                let values = data[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                tensors.push((parts[0].to_string(), Tensor::new(&shape, values)?));
            } else {
                bail!("{}: unrecognized line", at());
            }
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let c = Checkpoint {
            meta: vec![("seed".into(), "3".into())],
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -2.5, 1e-300, f64::MIN_POSITIVE]).unwrap()),
                ("b.c".into(), Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
        };
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncated_data_rejected() {
        let c = Checkpoint {
            meta: vec![],
            tensors: vec![("a".into(), Tensor::new(&[2], vec![1.0, 2.0]).unwrap())],
        };
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
