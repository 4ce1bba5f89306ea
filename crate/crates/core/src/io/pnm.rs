//! Binary netpbm codecs: PGM (P5) class-index masks and PPM (P6) color images.
//!
//! Masks store raw class indices as bytes, not gray levels. Writers emit
//! `P5\n<width> <height>\n255\n` (or `P6`) followed by row-major samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::probmap::{ClassSet, LabelMask};

/// An 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "RGB buffer has {} bytes but {width}x{height} needs {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while !matches!(self.bytes.get(self.pos), Some(b'\n' | b'\r') | None) {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while matches!(self.bytes.get(self.pos), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(start, format!("expected {what}")))
    }
}

fn read_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    match bytes.get(..2) {
        Some(m) if m == magic => {}
        Some([b'P', d @ b'1'..=b'7']) => {
            return Err(Error::Format(format!(
                "netpbm variant P{} (expected {})",
                *d as char,
                String::from_utf8_lossy(magic)
            )))
        }
        _ => return Err(Error::parse(0, "bad netpbm magic")),
    }
    let mut reader = HeaderReader { bytes, pos: 2 };
    let width = reader.number("width")?;
    let height = reader.number("height")?;
    let maxval = reader.number("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::Format(format!(
            "maxval {maxval} (only 8-bit samples are accepted)"
        )));
    }
    match bytes.get(reader.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::parse(reader.pos, "expected whitespace after maxval")),
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: reader.pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let expected = header.width * header.height * channels;
    let data = &bytes[header.data_start..];
    if data.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            actual: data.len(),
        });
    }
    if let Some(i) = data.iter().position(|&b| usize::from(b) > header.maxval) {
        return Err(Error::parse(
            header.data_start + i,
            format!("sample {} exceeds maxval {}", data[i], header.maxval),
        ));
    }
    Ok(data)
}

pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.labels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMask> {
    let header = read_header(bytes, b"P5")?;
    let data = payload(bytes, &header, 1)?;
    LabelMask::new(header.height, header.width, data.to_vec())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let header = read_header(bytes, b"P6")?;
    let data = payload(bytes, &header, 3)?;
    RgbImage::new(header.width, header.height, data.to_vec())
}

/// Reads a class-index mask and checks every label against `num_classes`.
pub fn read_mask(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMask> {
    let path = path.as_ref();
    let tag = |source: Error| Error::InFile {
        path: path.to_path_buf(),
        source: Box::new(source),
    };
    let mask = decode_pgm(&read_file(path)?).map_err(tag)?;
    mask.check_classes(num_classes, "mask").map_err(tag)?;
    Ok(mask)
}

pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_pgm(mask))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(&read_file(path)?).map_err(|source| Error::InFile {
        path: path.to_path_buf(),
        source: Box::new(source),
    })
}

pub fn write_ppm(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_ppm(image))
}

/// Paints every class index with its palette color.
pub fn render_mask(mask: &LabelMask, classes: &ClassSet) -> Result<RgbImage> {
    let palette = classes.palette().ok_or(Error::MissingPalette)?;
    mask.check_classes(classes.num_classes(), "render")?;
    let data = mask
        .labels()
        .iter()
        .flat_map(|&l| palette[usize::from(l)])
        .collect();
    RgbImage::new(mask.width(), mask.height(), data)
}

/// Inverse of [`render_mask`]: exact palette lookup, failing on any color
/// not in the palette.
pub fn labels_from_colors(image: &RgbImage, classes: &ClassSet) -> Result<LabelMask> {
    let palette = classes.palette().ok_or(Error::MissingPalette)?;
    let labels = image
        .pixels()
        .enumerate()
        .map(|(i, rgb)| {
            palette
                .iter()
                .position(|&p| p == rgb)
                .map(|k| k as u8)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "color {rgb:?} at ({}, {}) is not in the palette",
                        i / image.width,
                        i % image.width
                    ))
                })
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMask::new(image.height, image.width, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorClass;

    #[test]
    fn decodes_literal_mask() {
        let mask = decode_pgm(b"P5\n2 2\n255\n\x00\x00\x01\x01").unwrap();
        assert_eq!((mask.height(), mask.width()), (2, 2));
        assert_eq!(mask.labels(), &[0, 0, 1, 1]);
        assert_eq!(encode_pgm(&mask), b"P5\n2 2\n255\n\x00\x00\x01\x01");
    }

    #[test]
    fn width_precedes_height() {
        let mask = LabelMask::new(1, 3, vec![2, 1, 0]).unwrap();
        let bytes = encode_pgm(&mask);
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), mask);
    }

    #[test]
    fn tolerates_comments_and_whitespace() {
        let mask = decode_pgm(b"P5 # class mask\n2\t1 \n# max\n255\n\x01\x00").unwrap();
        assert_eq!(mask.labels(), &[1, 0]);
    }

    #[test]
    fn rejects_ascii_and_malformed() {
        let err = decode_pgm(b"P2\n2 2\n255\n0 0 1 1\n").unwrap_err();
        assert_eq!(err.class(), ErrorClass::Format);
        assert!(err.to_string().contains("P2"));
        assert_eq!(
            decode_pgm(b"GIF89a").unwrap_err().class(),
            ErrorClass::Parse
        );
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\x00\x00\x01"),
            Err(Error::PayloadSize {
                expected: 4,
                actual: 3
            })
        ));
        assert!(matches!(
            decode_pgm(b"P5\n2 x\n255\n"),
            Err(Error::Parse { offset: 5, .. })
        ));
        assert_eq!(
            decode_pgm(b"P5\n1 1\n65535\n\x00\x00").unwrap_err().class(),
            ErrorClass::Format
        );
        assert!(decode_pgm(b"P5\n1 1\n1\n\x02").is_err());
    }

    #[test]
    fn read_mask_checks_class_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_mask(&LabelMask::new(1, 3, vec![0, 4, 1]).unwrap(), &path).unwrap();
        assert!(read_mask(&path, 5).is_ok());
        let err = read_mask(&path, 4).unwrap_err();
        assert!(matches!(
            err.root(),
            Error::LabelOutOfRange { label: 4, .. }
        ));
        assert_eq!(err.class(), ErrorClass::Validation);
    }

    #[test]
    fn binary_render_matches_black_white_convention() {
        let classes = ClassSet::new(
            vec!["background".into(), "informative".into()],
            Some(vec![[0, 0, 0], [255, 255, 255]]),
        )
        .unwrap();
        let mask = LabelMask::new(1, 2, vec![1, 0]).unwrap();
        let image = render_mask(&mask, &classes).unwrap();
        assert_eq!(image.data(), &[255, 255, 255, 0, 0, 0]);
        assert_eq!(labels_from_colors(&image, &classes).unwrap(), mask);
        let bytes = encode_ppm(&image);
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), image);
    }

    #[test]
    fn five_class_render_round_trip() {
        let palette = vec![
            [255, 0, 0],
            [0, 0, 139],
            [173, 216, 230],
            [0, 128, 0],
            [255, 255, 0],
        ];
        let classes = ClassSet::numbered(5)
            .unwrap()
            .with_palette(palette)
            .unwrap();
        let mask = LabelMask::new(2, 5, vec![0, 1, 2, 3, 4, 4, 3, 2, 1, 0]).unwrap();
        let image = render_mask(&mask, &classes).unwrap();
        let distinct: std::collections::HashSet<_> = image.pixels().collect();
        assert_eq!(distinct.len(), 5);
        assert_eq!(labels_from_colors(&image, &classes).unwrap(), mask);
    }

    #[test]
    fn render_requires_palette() {
        let classes = ClassSet::numbered(2).unwrap();
        let mask = LabelMask::filled(1, 1, 0);
        assert!(matches!(
            render_mask(&mask, &classes),
            Err(Error::MissingPalette)
        ));
    }

    #[test]
    fn unknown_color_is_rejected() {
        let classes = ClassSet::numbered(2)
            .unwrap()
            .with_palette(vec![[0, 0, 0], [255, 255, 255]])
            .unwrap();
        let image = RgbImage::new(1, 1, vec![128, 128, 128]).unwrap();
        assert!(labels_from_colors(&image, &classes).is_err());
    }
}
