//! Text tensor dumps used for checkpoints and feature-bank snapshots.
//!
//! ```text
//! DNA-CKPT v1
//! meta <key> <value...>
//! tensor <name> <rows> <cols>
//! <row 0 values, space separated>
//! ...
//! end
//! ```
//!
//! Values use shortest round-trip decimal formatting, so a write/read cycle
//! is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{AdamState, Dense, ParameterSet};
use crate::error::{DnaError, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &str = "DNA-CKPT v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorDump {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

impl TensorDump {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| DnaError::Structural(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn push_params(&mut self, prefix: &str, p: &ParameterSet) {
        for (i, l) in p.layers.iter().enumerate() {
            self.push_dense(&format!("{prefix}.layer{i}"), l);
        }
        self.push_dense(&format!("{prefix}.classifier"), &p.classifier);
    }

    fn push_dense(&mut self, name: &str, l: &Dense) {
        self.push(format!("{name}.weight"), l.weight.clone());
        let bias = Matrix::from_vec(1, l.bias.len(), l.bias.clone()).expect("1 x n bias");
        self.push(format!("{name}.bias"), bias);
    }

    fn read_dense(&self, name: &str) -> Result<Dense> {
        let weight = self.require(&format!("{name}.weight"))?.clone();
        let bias = self.require(&format!("{name}.bias"))?;
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(DnaError::Structural(format!(
                "`{name}.bias` has the wrong shape"
            )));
        }
        Ok(Dense {
            weight,
            bias: bias.as_slice().to_vec(),
        })
    }

    pub fn has_params(&self, prefix: &str) -> bool {
        self.get(&format!("{prefix}.layer0.weight")).is_some()
    }

    pub fn read_params(&self, prefix: &str) -> Result<ParameterSet> {
        let mut layers = Vec::new();
        while self
            .get(&format!("{prefix}.layer{}.weight", layers.len()))
            .is_some()
        {
            layers.push(self.read_dense(&format!("{prefix}.layer{}", layers.len()))?);
        }
        if layers.is_empty() {
            return Err(DnaError::Structural(format!(
                "checkpoint has no `{prefix}` encoder"
            )));
        }
        let classifier = self.read_dense(&format!("{prefix}.classifier"))?;
        let p = ParameterSet { layers, classifier };
        p.validate()?;
        Ok(p)
    }

    pub fn push_adam(&mut self, prefix: &str, st: &AdamState) {
        self.set_meta(&format!("{prefix}.step"), st.step);
        self.push_params(&format!("{prefix}.m"), &st.m);
        self.push_params(&format!("{prefix}.v"), &st.v);
    }

    pub fn read_adam(&self, prefix: &str) -> Result<AdamState> {
        let step = self
            .meta(&format!("{prefix}.step"))
            .ok_or_else(|| DnaError::Structural(format!("checkpoint lacks `{prefix}.step`")))?
            .parse()
            .map_err(|_| DnaError::Structural(format!("`{prefix}.step` is not an integer")))?;
        Ok(AdamState {
            step,
            m: self.read_params(&format!("{prefix}.m"))?,
            v: self.read_params(&format!("{prefix}.v"))?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, m) in &self.tensors {
            writeln!(out, "tensor {name} {} {}", m.rows(), m.cols()).unwrap();
            for r in 0..m.rows() {
                let mut first = true;
                for v in m.row(r) {
                    if !first {
                        out.push(' ');
                    }
                    first = false;
                    write!(out, "{v:?}").unwrap();
                }
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == CHECKPOINT_MAGIC => {}
            _ => {
                return Err(DnaError::parse(
                    1,
                    format!("expected `{CHECKPOINT_MAGIC}` header"),
                ))
            }
        }
        let mut dump = TensorDump::new();
        let mut ended = false;
        while let Some((ln, line)) = lines.next() {
            let line = line.trim_end();
            if line == "end" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| DnaError::parse(ln, "meta line needs a key and a value"))?;
                dump.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(DnaError::parse(ln, "tensor line needs name, rows, cols"));
                }
                let rows: usize = parts[1]
                    .parse()
                    .map_err(|_| DnaError::parse(ln, "bad row count"))?;
                let cols: usize = parts[2]
                    .parse()
                    .map_err(|_| DnaError::parse(ln, "bad column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (rl, row) = lines.next().ok_or_else(|| {
                        DnaError::parse(ln, format!("tensor `{}` truncated", parts[0]))
                    })?;
                    let before = data.len();
                    for tok in row.split_whitespace() {
                        let v: f64 = tok
                            .parse()
                            .map_err(|_| DnaError::parse(rl, format!("`{tok}` is not a number")))?;
                        data.push(v);
                    }
                    if data.len() - before != cols {
                        return Err(DnaError::parse(
                            rl,
                            format!("expected {cols} values, found {}", data.len() - before),
                        ));
                    }
                }
                dump.push(parts[0], Matrix::from_vec(rows, cols, data)?);
            } else {
                return Err(DnaError::parse(ln, format!("unexpected line `{line}`")));
            }
        }
        if !ended {
            return Err(DnaError::parse(
                text.lines().count(),
                "missing `end` marker",
            ));
        }
        Ok(dump)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| DnaError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DnaError::io(path, e))?;
        Self::parse(&text)
    }

    /// First 16 hex digits of the SHA-256 of the serialized dump.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
