//! Probability-map tensor files.
//!
//! The on-disk layout is the `.npy` version 1.0 container restricted to one
//! shape of payload: little-endian `f32`, C order, rank 3 `(H, W, C)`.
//!
//! ```text
//! \x93NUMPY 0x01 0x00 <u16 LE header_len>
//! {'descr': '<f4', 'fortran_order': False, 'shape': (H, W, C), }<spaces>\n
//! <H*W*C little-endian f32>
//! ```
//!
//! The header is space-padded so that the payload starts on a 64-byte
//! boundary. Writers emit the minimal padding; readers accept any amount of
//! space padding (numpy itself reserves extra room), but nothing else.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::probmap::{ProbMap, Shape};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_LEN: usize = 10;
const ALIGN: usize = 64;

fn header_dict(shape: Shape) -> String {
    format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        shape.height, shape.width, shape.num_classes
    )
}

fn encode_header(shape: Shape) -> Result<Vec<u8>> {
    let dict = header_dict(shape);
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + padding + 1;
    let header_len_u16 = u16::try_from(header_len)
        .map_err(|_| Error::invalid(format!("header for shape {shape} is too long")))?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len_u16.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(out.len() + padding, b' ');
    out.push(b'\n');
    Ok(out)
}

/// Serializes a raw `f32` tensor in the canonical layout.
pub fn encode_tensor(shape: Shape, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != shape.len() {
        return Err(Error::invalid(format!(
            "tensor has {} values but shape {shape} needs {}",
            data.len(),
            shape.len()
        )));
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut out = encode_header(shape)?;
    out.reserve(4 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a canonical tensor file into its shape and `f32` payload.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Shape, Vec<f32>)> {
    if let Some(offset) = MAGIC
        .iter()
        .zip(bytes)
        .position(|(expected, actual)| expected != actual)
    {
        return Err(Error::parse(offset, "bad magic string"));
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::parse(bytes.len(), "file ends inside the preamble"));
    }
    if bytes[6..8] != [1, 0] {
        return Err(Error::Format(format!(
            "tensor file version {}.{} (only 1.0 is accepted)",
            bytes[6], bytes[7]
        )));
    }
    let header_len = usize::from(u16::from_le_bytes([bytes[8], bytes[9]]));
    let data_start = PREAMBLE_LEN + header_len;
    if bytes.len() < data_start {
        return Err(Error::parse(
            8,
            format!(
                "header length {header_len} runs past end of file ({} bytes)",
                bytes.len()
            ),
        ));
    }
    if !data_start.is_multiple_of(ALIGN) {
        return Err(Error::parse(
            8,
            format!("payload offset {data_start} is not a multiple of {ALIGN}"),
        ));
    }
    let header = &bytes[PREAMBLE_LEN..data_start];
    if header.last() != Some(&b'\n') {
        return Err(Error::parse(
            data_start - 1,
            "header does not end with a newline",
        ));
    }
    let shape = HeaderParser::new(header).parse()?;

    let expected = shape.len() * 4;
    let payload = &bytes[data_start..];
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((shape, data))
}

/// Recursive-descent parser for the header's Python dict literal.
struct HeaderParser<'a> {
    text: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(text: &'a [u8]) -> Self {
        Self { text, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::parse(PREAMBLE_LEN + self.pos, message)
    }

    fn skip_spaces(&mut self) {
        while self.text.get(self.pos) == Some(&b' ') {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn expect(&mut self, byte: u8) -> Result<()> {
        self.skip_spaces();
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", byte as char)))
        }
    }

    fn string(&mut self) -> Result<&'a str> {
        self.skip_spaces();
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected a quoted string")),
        };
        let start = self.pos + 1;
        let len = self.text[start..]
            .iter()
            .position(|&b| b == quote)
            .ok_or_else(|| self.err("unterminated string"))?;
        self.pos = start + len + 1;
        std::str::from_utf8(&self.text[start..start + len])
            .map_err(|_| Error::parse(PREAMBLE_LEN + start, "string is not UTF-8"))
    }

    fn word(&mut self) -> &'a [u8] {
        self.skip_spaces();
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_alphanumeric() || b == b'_') {
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    fn boolean(&mut self) -> Result<bool> {
        match self.word() {
            b"True" => Ok(true),
            b"False" => Ok(false),
            _ => Err(self.err("expected True or False")),
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_spaces();
            if self.peek() == Some(b')') {
                self.pos += 1;
                return Ok(dims);
            }
            let digits = self.word();
            let dim = std::str::from_utf8(digits)
                .ok()
                .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| self.err("expected a non-negative integer"))?;
            dims.push(dim);
            self.skip_spaces();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b')') => {}
                _ => return Err(self.err("expected ',' or ')'")),
            }
        }
    }

    fn parse(mut self) -> Result<Shape> {
        let mut descr = None;
        let mut fortran = None;
        let mut dims = None;
        self.expect(b'{')?;
        loop {
            self.skip_spaces();
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            match key {
                "descr" => descr = Some(self.string()?.to_string()),
                "fortran_order" => fortran = Some(self.boolean()?),
                "shape" => dims = Some(self.tuple()?),
                other => return Err(Error::Format(format!("unexpected header key '{other}'"))),
            }
            self.skip_spaces();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        self.skip_spaces();
        if self.pos != self.text.len() - 1 {
            return Err(self.err("unexpected bytes after header dict"));
        }

        let descr = descr.ok_or_else(|| Error::Format("header lacks 'descr'".into()))?;
        let fortran =
            fortran.ok_or_else(|| Error::Format("header lacks 'fortran_order'".into()))?;
        let dims = dims.ok_or_else(|| Error::Format("header lacks 'shape'".into()))?;
        if descr != "<f4" {
            return Err(Error::Format(format!(
                "dtype '{descr}' (only little-endian float32 '<f4' is accepted)"
            )));
        }
        if fortran {
            return Err(Error::Format(
                "fortran_order True (only C order is accepted)".into(),
            ));
        }
        match dims[..] {
            [h, w, c] => Ok(Shape::new(h, w, c)),
            _ => Err(Error::Format(format!(
                "tensor has rank {} (expected 3: height, width, classes)",
                dims.len()
            ))),
        }
    }
}

pub fn encode_probmap(map: &ProbMap) -> Vec<u8> {
    encode_tensor(map.shape(), map.data()).expect("ProbMap is always finite and well-shaped")
}

pub fn decode_probmap(bytes: &[u8]) -> Result<ProbMap> {
    let (shape, data) = decode_tensor(bytes)?;
    ProbMap::new(shape, data)
}

pub fn read_probmap(path: impl AsRef<Path>) -> Result<ProbMap> {
    let path = path.as_ref();
    decode_probmap(&read_file(path)?).map_err(|e| with_path(e, path))
}

pub fn write_probmap(map: &ProbMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_probmap(map))
}

/// Writes an arbitrary finite tensor (e.g. fused scores) in the same layout.
pub fn write_tensor(shape: Shape, data: &[f32], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_tensor(shape, data)?;
    write_atomic(path, &bytes)
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io { .. } => err,
        other => Error::InFile {
            path: path.to_path_buf(),
            source: Box::new(other),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorClass;

    fn ninths() -> ProbMap {
        ProbMap::new(Shape::new(2, 2, 3), vec![1.0 / 3.0; 12]).unwrap()
    }

    #[test]
    fn canonical_header_layout() {
        let bytes = encode_probmap(&ninths());
        assert_eq!(bytes.len(), 128 + 48);
        assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
        assert_eq!(u16::from_le_bytes([bytes[8], bytes[9]]), 118);
        let header = std::str::from_utf8(&bytes[10..128]).unwrap();
        assert!(
            header.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2, 3), }")
        );
        assert!(header.ends_with(" \n"));
    }

    #[test]
    fn header_length_is_always_aligned() {
        for (h, w, c) in [(1, 1, 2), (224, 224, 5), (99999, 12345, 256), (7, 1000, 3)] {
            let header = encode_header(Shape::new(h, w, c)).unwrap();
            assert_eq!(header.len() % 64, 0);
            assert_eq!(header.last(), Some(&b'\n'));
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let map = ProbMap::new(Shape::new(1, 3, 2), vec![0.1, 0.9, 0.25, 0.75, 1.0, 0.0]).unwrap();
        let bytes = encode_probmap(&map);
        let back = decode_probmap(&bytes).unwrap();
        assert_eq!(back, map);
        assert_eq!(encode_probmap(&back), bytes);
    }

    #[test]
    fn accepts_numpy_growth_padding() {
        // numpy reserves spare header room after the dict; 224-wide shape.
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 1, 2), }";
        let mut header = dict.to_string();
        header.push_str(&" ".repeat(20));
        let pad = (64 - (10 + header.len() + 1) % 64) % 64;
        header.push_str(&" ".repeat(pad + 64));
        header.push('\n');
        let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        let map = decode_probmap(&bytes).unwrap();
        assert_eq!(map.data(), &[0.5, 0.5]);
    }

    fn with_header(dict: &str) -> Vec<u8> {
        let mut header = dict.to_string();
        let pad = (64 - (10 + header.len() + 1) % 64) % 64;
        header.push_str(&" ".repeat(pad));
        header.push('\n');
        let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes
    }

    #[test]
    fn rejects_fortran_order() {
        let bytes = with_header("{'descr': '<f4', 'fortran_order': True, 'shape': (1, 1, 2), }");
        let err = decode_tensor(&bytes).unwrap_err();
        assert_eq!(err.class(), ErrorClass::Format, "{err}");
    }

    #[test]
    fn rejects_other_dtypes_and_ranks() {
        for dict in [
            "{'descr': '<f8', 'fortran_order': False, 'shape': (1, 1, 2), }",
            "{'descr': '>f4', 'fortran_order': False, 'shape': (1, 1, 2), }",
            "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }",
            "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 1, 1, 2), }",
            "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 1, 2), 'extra': 1, }",
            "{'descr': '<f4', 'shape': (1, 1, 2), }",
        ] {
            let err = decode_tensor(&with_header(dict)).unwrap_err();
            assert_eq!(err.class(), ErrorClass::Format, "{dict}: {err}");
        }
    }

    #[test]
    fn rejects_bad_magic_with_offset() {
        let mut bytes = encode_probmap(&ninths());
        bytes[3] = b'X';
        match decode_tensor(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            decode_tensor(b"P5\n1 1\n255\n\0"),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(decode_tensor(b""), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_truncated_and_oversized_payload() {
        let bytes = encode_probmap(&ninths());
        match decode_tensor(&bytes[..bytes.len() - 5]) {
            Err(Error::PayloadSize { expected, actual }) => {
                assert_eq!((expected, actual), (48, 43));
            }
            other => panic!("expected payload error, got {other:?}"),
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            decode_tensor(&longer),
            Err(Error::PayloadSize { .. })
        ));
        // Truncated inside the header.
        assert!(matches!(
            decode_tensor(&bytes[..40]),
            Err(Error::Parse { offset: 8, .. })
        ));
    }

    #[test]
    fn rejects_malformed_header_syntax() {
        for dict in [
            "{'descr': '<f4' 'fortran_order': False, 'shape': (1, 1, 2), }",
            "{'descr': '<f4', 'fortran_order': Maybe, 'shape': (1, 1, 2), }",
            "{'descr': '<f4', 'fortran_order': False, 'shape': (1, x, 2), }",
            "['descr']",
        ] {
            let err = decode_tensor(&with_header(dict)).unwrap_err();
            assert_eq!(err.class(), ErrorClass::Parse, "{dict}: {err}");
        }
    }

    #[test]
    fn simplex_violations_are_rejected_on_read() {
        let bytes = encode_tensor(Shape::new(1, 1, 2), &[0.6, 0.6]).unwrap();
        assert!(matches!(decode_probmap(&bytes), Err(Error::Simplex(_))));
    }

    #[test]
    fn nan_is_refused_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.npy");
        let err = write_tensor(Shape::new(1, 1, 2), &[f32::NAN, 1.0], &path).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0 }));
        assert!(!path.exists());
        assert!(ProbMap::new(Shape::new(1, 1, 2), vec![f32::NAN, 1.0]).is_err());
    }

    #[test]
    fn file_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.npy"), dir.path().join("b.npy"));
        write_probmap(&ninths(), &a).unwrap();
        write_probmap(&ninths(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_probmap(&a).unwrap(), ninths());
        let err = read_probmap(dir.path().join("missing.npy")).unwrap_err();
        assert_eq!(err.class(), ErrorClass::Io);
    }
}
