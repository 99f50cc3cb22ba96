//! Flat binary tensor container.
//!
//! A file is a UTF-8 header followed by raw little-endian `f32` payload:
//!
//! ```text
//! GEBDTENSOR 1
//! meta fps 30
//! tensor level0 300x16x16x8
//! sha256 <hex digest of payload>
//! end
//! <payload>
//! ```
//!
//! Tensors are stored back to back in header order. Names and metadata values
//! must not contain whitespace.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::datamodel::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &str = "GEBDTENSOR 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Invalid(format!("{kind} {s:?} must be a non-empty token")));
    }
    Ok(())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_owned(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.tensors.push((name.to_owned(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn payload(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|(_, t)| t.data.len()).sum();
        let mut out = Vec::with_capacity(total * 4);
        for (_, t) in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the payload bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.payload()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload();
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            check_token("meta value", v)?;
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join("x")));
        }
        header.push_str(&format!("sha256 {}\nend\n", hex(&Sha256::digest(&payload))));
        let mut bytes = header.into_bytes();
        bytes.extend_from_slice(&payload);
        Ok(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Container {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut next_line = || -> std::result::Result<&str, String> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or("truncated header")?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| "header is not UTF-8".to_string())
        };
        if next_line()? != MAGIC {
            return Err("bad magic line".into());
        }
        let mut out = Container::new();
        let mut shapes = Vec::new();
        let mut digest = None;
        loop {
            let line = next_line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["end"] => break,
                ["meta", k, v] => {
                    out.meta.insert((*k).to_owned(), (*v).to_owned());
                }
                ["tensor", name, dims] => {
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| format!("bad shape {dims:?}")))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    shapes.push(((*name).to_owned(), shape));
                }
                ["sha256", h] => digest = Some((*h).to_owned()),
                _ => return Err(format!("bad header line {line:?}")),
            }
        }
        let payload = &bytes[pos..];
        let expected: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if payload.len() != expected * 4 {
            return Err(format!(
                "payload has {} bytes, header declares {}",
                payload.len(),
                expected * 4
            ));
        }
        if let Some(h) = digest {
            if hex(&Sha256::digest(payload)) != h {
                return Err("content hash mismatch".into());
            }
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for (name, shape) in shapes {
            let n = shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            out.tensors.push((name, Tensor { shape, data }));
        }
        Ok(out)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
