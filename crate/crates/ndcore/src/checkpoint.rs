//! Binary container for named tensors and integer arrays.
//!
//! The file starts with a text header, one `key=value` per line, closed by a
//! line reading `end`. The payload follows: every tensor as little-endian
//! `f64`, then every integer array as little-endian `i32`, each in header
//! order. Metadata keys are written sorted so that equal bundles serialize to
//! equal bytes.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{NdError, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "ndcore-bundle=1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
    ints: Vec<(String, Vec<i32>)>,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['=', '\n', ' ']) {
        return Err(NdError::Format(format!("invalid entry name {name:?}")));
    }
    Ok(())
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| NdError::Format(format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| NdError::Format(format!("cannot parse {key}={raw}")))
    }

    /// Adds or replaces a tensor. Only the matrix view is stored.
    pub fn put_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        check_name(name)?;
        let t = t.as_matrix();
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name.to_string(), t)),
        }
        Ok(())
    }

    pub fn put_ints(&mut self, name: &str, v: &[i32]) -> Result<()> {
        check_name(name)?;
        match self.ints.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = v.to_vec(),
            None => self.ints.push((name.to_string(), v.to_vec())),
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NdError::Format(format!("missing tensor {name:?}")))
    }

    pub fn ints(&self, name: &str) -> Result<&[i32]> {
        self.ints
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| NdError::Format(format!("missing integer array {name:?}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            out.push_str(&format!("meta.{k}={}\n", v.replace('\n', " ")));
        }
        for (n, t) in &self.tensors {
            out.push_str(&format!("tensor.{n}={}x{}\n", t.rows(), t.cols()));
        }
        for (n, v) in &self.ints {
            out.push_str(&format!("ints.{n}={}\n", v.len()));
        }
        out.push_str("end\n");
        let mut bytes = out.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (_, v) in &self.ints {
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(NdError::Format(format!(
                "bad magic line {:?}",
                line.trim_end()
            )));
        }
        let mut bundle = Bundle::new();
        let mut tensor_shapes = Vec::new();
        let mut int_lens = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(NdError::Format("header is not terminated by `end`".into()));
            }
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            let (key, value) = l
                .split_once('=')
                .ok_or_else(|| NdError::Format(format!("header line without '=': {l:?}")))?;
            if let Some(k) = key.strip_prefix("meta.") {
                bundle.meta.insert(k.to_string(), value.to_string());
            } else if let Some(n) = key.strip_prefix("tensor.") {
                let (rs, cs) = value
                    .split_once('x')
                    .ok_or_else(|| NdError::Format(format!("bad shape {value:?}")))?;
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| NdError::Format(format!("bad shape {value:?}")))
                };
                tensor_shapes.push((n.to_string(), parse(rs)?, parse(cs)?));
            } else if let Some(n) = key.strip_prefix("ints.") {
                let len = value
                    .parse::<usize>()
                    .map_err(|_| NdError::Format(format!("bad length {value:?}")))?;
                int_lens.push((n.to_string(), len));
            } else {
                return Err(NdError::Format(format!("unknown header key {key:?}")));
            }
        }
        for (name, rows, cols) in tensor_shapes {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf)
                .map_err(|_| NdError::Format(format!("truncated payload for {name}")))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            bundle
                .tensors
                .push((name, Tensor::matrix(rows, cols, data)));
        }
        for (name, len) in int_lens {
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)
                .map_err(|_| NdError::Format(format!("truncated payload for {name}")))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            bundle.ints.push((name, data));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(NdError::Format("trailing bytes after payload".into()));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_in_memory() {
        let mut b = Bundle::new();
        b.set_meta("seed", 42).set_meta("kind", "rlvm");
        b.put_tensor(
            "w",
            &Tensor::matrix(2, 2, vec![1.0, -0.5, f64::MIN_POSITIVE, 3.0]),
        )
        .unwrap();
        b.put_ints("labels", &[0, 3, -1]).unwrap();
        let back = Bundle::from_reader(b.to_bytes().as_slice()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.meta_parse::<u64>("seed").unwrap(), 42);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut b = Bundle::new();
        b.put_tensor("w", &Tensor::zeros(3, 3)).unwrap();
        let bytes = b.to_bytes();
        assert!(Bundle::from_reader(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn names_with_separators_are_rejected() {
        let mut b = Bundle::new();
        assert!(b.put_tensor("a=b", &Tensor::zeros(1, 1)).is_err());
    }
}
