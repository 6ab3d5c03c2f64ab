//! Plain-text checkpoint format.
//!
//! ```text
//! VSRL-CHECKPOINT 1
//! text config 3
//! <3 lines>
//! int iteration 5
//! vec policy.mean 4417
//! <4417 lines, one float each>
//! rng train <64 hex digits> <stream> <word position>
//! end
//! ```
//!
//! Floats use the shortest representation that parses back to the same
//! bits, so save -> load -> save is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::envs::RngSnapshot;
use crate::error::{Error, Result};

pub const MAGIC: &str = "VSRL-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Text(String, String),
    Int(String, u128),
    Vec(String, Vec<f64>),
    Rng(String, RngSnapshot),
}

impl Record {
    pub fn name(&self) -> &str {
        match self {
            Record::Text(n, _) | Record::Int(n, _) | Record::Vec(n, _) | Record::Rng(n, _) => n,
        }
    }
}

/// Ordered list of named records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn missing(name: &str, kind: &str) -> Error {
    Error::Checkpoint(format!("missing {kind} record `{name}`"))
}

impl Checkpoint {
    pub fn push_text(&mut self, name: &str, text: &str) {
        self.records.push(Record::Text(name.into(), text.into()));
    }

    pub fn push_int(&mut self, name: &str, value: u128) {
        self.records.push(Record::Int(name.into(), value));
    }

    pub fn push_vec(&mut self, name: &str, values: &[f64]) {
        self.records.push(Record::Vec(name.into(), values.to_vec()));
    }

    pub fn push_rng(&mut self, name: &str, rng: RngSnapshot) {
        self.records.push(Record::Rng(name.into(), rng));
    }

    fn find(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name() == name)
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.find(name) {
            Some(Record::Text(_, t)) => Ok(t),
            _ => Err(missing(name, "text")),
        }
    }

    pub fn int(&self, name: &str) -> Result<u128> {
        match self.find(name) {
            Some(Record::Int(_, v)) => Ok(*v),
            _ => Err(missing(name, "int")),
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        usize::try_from(self.int(name)?)
            .map_err(|_| Error::Checkpoint(format!("`{name}` does not fit in usize")))
    }

    pub fn vec(&self, name: &str) -> Result<&[f64]> {
        match self.find(name) {
            Some(Record::Vec(_, v)) => Ok(v),
            _ => Err(missing(name, "vec")),
        }
    }

    pub fn rng(&self, name: &str) -> Result<&RngSnapshot> {
        match self.find(name) {
            Some(Record::Rng(_, r)) => Ok(r),
            _ => Err(missing(name, "rng")),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.find(name).is_some()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n");
        for record in &self.records {
            match record {
                Record::Text(name, text) => {
                    let lines: Vec<&str> = text.lines().collect();
                    let _ = writeln!(out, "text {name} {}", lines.len());
                    for line in lines {
                        let _ = writeln!(out, "{line}");
                    }
                }
                Record::Int(name, v) => {
                    let _ = writeln!(out, "int {name} {v}");
                }
                Record::Vec(name, values) => {
                    let _ = writeln!(out, "vec {name} {}", values.len());
                    for v in values {
                        let _ = writeln!(out, "{v:e}");
                    }
                }
                Record::Rng(name, r) => {
                    let seed: String = r.seed.iter().map(|b| format!("{b:02x}")).collect();
                    let _ = writeln!(out, "rng {name} {seed} {} {}", r.stream, r.word_pos);
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or("");
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Checkpoint(format!("not a checkpoint: bad header `{header}`")))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version `{version}` (expected {FORMAT_VERSION})"
            )));
        }

        let truncated = || Error::Checkpoint("truncated checkpoint".into());
        let bad = |lineno: usize, what: &str| {
            Error::Checkpoint(format!("line {}: malformed {what}", lineno + 1))
        };
        let mut ckpt = Checkpoint::default();
        loop {
            let (lineno, line) = lines.next().ok_or_else(truncated)?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["end"] => break,
                ["text", name, n] => {
                    let n: usize = n.parse().map_err(|_| bad(lineno, "text length"))?;
                    let mut body = Vec::with_capacity(n);
                    for _ in 0..n {
                        body.push(lines.next().ok_or_else(truncated)?.1);
                    }
                    ckpt.push_text(name, &body.join("\n"));
                }
                ["int", name, v] => {
                    ckpt.push_int(name, v.parse().map_err(|_| bad(lineno, "integer"))?);
                }
                ["vec", name, n] => {
                    let n: usize = n.parse().map_err(|_| bad(lineno, "vector length"))?;
                    let mut values = Vec::with_capacity(n);
                    for _ in 0..n {
                        let (i, l) = lines.next().ok_or_else(truncated)?;
                        values.push(l.trim().parse::<f64>().map_err(|_| bad(i, "float"))?);
                    }
                    ckpt.push_vec(name, &values);
                }
                ["rng", name, seed, stream, pos] => {
                    if seed.len() != 64 {
                        return Err(bad(lineno, "rng seed"));
                    }
                    let mut bytes = [0u8; 32];
                    for (i, b) in bytes.iter_mut().enumerate() {
                        *b = u8::from_str_radix(&seed[2 * i..2 * i + 2], 16)
                            .map_err(|_| bad(lineno, "rng seed"))?;
                    }
                    ckpt.push_rng(
                        name,
                        RngSnapshot {
                            seed: bytes,
                            stream: stream.parse().map_err(|_| bad(lineno, "rng stream"))?,
                            word_pos: pos.parse().map_err(|_| bad(lineno, "rng position"))?,
                        },
                    );
                }
                _ => return Err(bad(lineno, "record")),
            }
        }
        Ok(ckpt)
    }
}

/// Writes through a temporary file and a rename so readers never see a
/// partial checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_text()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::parse(&text)
}
