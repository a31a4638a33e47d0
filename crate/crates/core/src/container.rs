//! Single-file section container used for model bundles and feature files.
//!
//! Layout: a UTF-8 text header followed by the concatenated section
//! payloads.
//!
//! ```text
//! DIGITVEC-BUNDLE 1
//! sections <n>
//! section <name> f64 <d1>x<d2>... <bytes> <sha256>
//! section <name> text - <bytes> <sha256>
//! end
//! <payload bytes>
//! ```
//!
//! Numeric payloads are little-endian IEEE-754 `f64`; matrices are stored
//! column-major with their shape in the header.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &str = "DIGITVEC-BUNDLE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: SectionData,
}

impl Section {
    fn payload(&self) -> Vec<u8> {
        match &self.data {
            SectionData::F64 { data, .. } => data.iter().flat_map(|x| x.to_le_bytes()).collect(),
            SectionData::Text(s) => s.as_bytes().to_vec(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.data {
            SectionData::F64 { .. } => "f64",
            SectionData::Text(_) => "text",
        }
    }

    pub fn shape_string(&self) -> String {
        match &self.data {
            SectionData::F64 { shape, .. } => shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
            SectionData::Text(_) => "-".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub sections: Vec<Section>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::Config(format!("invalid section name `{name}`")));
    }
    Ok(())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, data: SectionData) -> Result<()> {
        check_name(name)?;
        if self.sections.iter().any(|s| s.name == name) {
            return Err(Error::Config(format!("duplicate section `{name}`")));
        }
        self.sections.push(Section { name: name.to_string(), data });
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("section {name}: shape {shape:?} vs {} values", data.len())));
        }
        self.push(name, SectionData::F64 { shape, data })
    }

    pub fn push_vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.push_f64(name, vec![v.len()], v.to_vec())
    }

    pub fn push_dvector(&mut self, name: &str, v: &DVector<f64>) -> Result<()> {
        self.push_vector(name, v.as_slice())
    }

    pub fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        self.push_f64(name, vec![m.nrows(), m.ncols()], m.as_slice().to_vec())
    }

    /// Rows of equal length stored as a `rows × cols` section.
    pub fn push_rows(&mut self, name: &str, rows: &[Vec<f64>]) -> Result<()> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape(format!("section {name}: ragged rows")));
        }
        self.push_f64(name, vec![rows.len(), cols], rows.concat())
    }

    pub fn push_text(&mut self, name: &str, text: impl Into<String>) -> Result<()> {
        self.push(name, SectionData::Text(text.into()))
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::CorruptBundle(format!("missing section `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match &self.get(name)?.data {
            SectionData::F64 { shape, data } => Ok((shape, data)),
            SectionData::Text(_) => Err(Error::CorruptBundle(format!("section `{name}` is not numeric"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, data) = self.f64(name)?;
        if shape.len() != 1 {
            return Err(Error::CorruptBundle(format!("section `{name}` has shape {shape:?}, expected a vector")));
        }
        Ok(data.to_vec())
    }

    pub fn dvector(&self, name: &str) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.vector(name)?))
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (shape, data) = self.f64(name)?;
        match shape {
            [r, c] => Ok(DMatrix::from_column_slice(*r, *c, data)),
            _ => Err(Error::CorruptBundle(format!("section `{name}` has shape {shape:?}, expected a matrix"))),
        }
    }

    pub fn rows(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let (shape, data) = self.f64(name)?;
        match shape {
            [_, 0] => Ok(vec![Vec::new(); shape[0]]),
            [_, c] => Ok(data.chunks(*c).map(<[f64]>::to_vec).collect()),
            _ => Err(Error::CorruptBundle(format!("section `{name}` has shape {shape:?}, expected rows"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match &self.get(name)?.data {
            SectionData::Text(s) => Ok(s),
            SectionData::F64 { .. } => Err(Error::CorruptBundle(format!("section `{name}` is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payloads: Vec<Vec<u8>> = self.sections.iter().map(Section::payload).collect();
        let mut header = format!("{MAGIC} {FORMAT_VERSION}\nsections {}\n", self.sections.len());
        for (s, p) in self.sections.iter().zip(&payloads) {
            header.push_str(&format!("section {} {} {} {} {}\n", s.name, s.kind(), s.shape_string(), p.len(), sha256_hex(p)));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for p in payloads {
            out.extend_from_slice(&p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::CorruptBundle(msg);
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not UTF-8".into()))?.to_string();
            pos += end + 1;
            Ok(line)
        };

        let first = next_line()?;
        let (magic, version) = first.split_once(' ').ok_or_else(|| corrupt("missing magic line".into()))?;
        if magic != MAGIC {
            return Err(corrupt(format!("bad magic `{magic}`")));
        }
        let version: u32 = version.parse().map_err(|_| corrupt(format!("bad version `{version}`")))?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let count_line = next_line()?;
        let count: usize = count_line
            .strip_prefix("sections ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| corrupt(format!("bad section count line `{count_line}`")))?;

        struct Entry {
            name: String,
            kind: String,
            shape: Option<Vec<usize>>,
            len: usize,
            checksum: String,
        }
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let line = next_line()?;
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 6 || f[0] != "section" {
                return Err(corrupt(format!("bad section line `{line}`")));
            }
            let shape = match f[3] {
                "-" => None,
                s => Some(
                    s.split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| corrupt(format!("bad shape `{s}`")))?,
                ),
            };
            entries.push(Entry {
                name: f[1].to_string(),
                kind: f[2].to_string(),
                shape,
                len: f[4].parse().map_err(|_| corrupt(format!("bad length `{}`", f[4])))?,
                checksum: f[5].to_string(),
            });
        }
        if next_line()? != "end" {
            return Err(corrupt("missing end of header".into()));
        }

        let mut container = Container::new();
        for e in entries {
            let payload = bytes
                .get(pos..pos.checked_add(e.len).ok_or_else(|| corrupt("length overflow".into()))?)
                .ok_or_else(|| corrupt(format!("section `{}` is truncated", e.name)))?;
            pos += e.len;
            if sha256_hex(payload) != e.checksum {
                return Err(corrupt(format!("checksum mismatch in section `{}`", e.name)));
            }
            let data = match (e.kind.as_str(), e.shape) {
                ("f64", Some(shape)) => {
                    if e.len % 8 != 0 || shape.iter().product::<usize>() != e.len / 8 {
                        return Err(corrupt(format!("section `{}` length does not match its shape", e.name)));
                    }
                    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    SectionData::F64 { shape, data }
                }
                ("text", None) => SectionData::Text(
                    String::from_utf8(payload.to_vec()).map_err(|_| corrupt(format!("section `{}` is not UTF-8", e.name)))?,
                ),
                (kind, _) => return Err(corrupt(format!("section `{}` has unknown kind `{kind}`", e.name))),
            };
            container.push(&e.name, data).map_err(|err| corrupt(err.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes after the last section", bytes.len() - pos)));
        }
        Ok(container)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// One line per section: name, kind, shape, payload checksum.
    pub fn summary(&self) -> String {
        self.sections
            .iter()
            .map(|s| format!("{}\t{}\t{}\t{}\n", s.name, s.kind(), s.shape_string(), sha256_hex(&s.payload())))
            .collect()
    }
}

/// `key=value` lines; values use Rust's shortest round-trip formatting for
/// floats, so parsing recovers them exactly.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::CorruptBundle(format!("bad key=value line `{l}`")))
        })
        .collect()
}
