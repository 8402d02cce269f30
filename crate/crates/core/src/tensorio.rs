//! File formats shared by every command.
//!
//! Tensors use the `CFT1` layout: the 4-byte magic `CFT1`, then `channels`,
//! `height`, `width` as little-endian `u32`, then `channels * height * width`
//! little-endian `f32` values, channel-major and row-major within a channel.
//!
//! Boxes and corner detections are JSON-lines, one record per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatLocation, Result};
use crate::geometry::{Point, RotatedRect};
use crate::targets::CornerType;

pub const TENSOR_MAGIC: &[u8; 4] = b"CFT1";
const HEADER_LEN: usize = 16;

/// A dense `channels x height x width` grid of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3D {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3D {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Config("tensor dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Config(format!(
                "tensor data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("tensor element {i} is not finite")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Serializes to the `CFT1` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        for d in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the `CFT1` byte layout. `source_name` is used in error messages.
    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let fmt_err = |off: usize, msg: String| Error::Format {
            source_name: source_name.to_string(),
            location: FormatLocation::ByteOffset(off as u64),
            message: msg,
        };
        if bytes.len() < 4 {
            return Err(fmt_err(bytes.len(), "file shorter than magic".into()));
        }
        if &bytes[..4] != TENSOR_MAGIC {
            return Err(fmt_err(0, format!("bad magic {:?}, expected \"CFT1\"", &bytes[..4])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fmt_err(bytes.len(), "truncated header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(0), dim(1), dim(2));
        let count = c
            .checked_mul(h)
            .and_then(|n| n.checked_mul(w))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= isize::MAX as usize))
            .ok_or_else(|| fmt_err(4, format!("dimensions {c}x{h}x{w} overflow")))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < count * 4 {
            return Err(fmt_err(
                bytes.len(),
                format!(
                    "truncated payload: expected {} bytes, found {}",
                    count * 4,
                    payload.len()
                ),
            ));
        }
        if payload.len() > count * 4 {
            return Err(fmt_err(
                HEADER_LEN + count * 4,
                format!("{} trailing bytes after payload", payload.len() - count * 4),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fmt_err(HEADER_LEN + 4 * i, "non-finite value".into()));
            }
            data.push(v);
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }
}

pub fn write_tensor(tensor: &Tensor3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor3D::from_bytes(&bytes, &path.display().to_string())
}

/// One line of a box file: corners in TL, TR, BR, BL order plus an optional score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub x3: f64,
    pub y3: f64,
    pub x4: f64,
    pub y4: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn new(rect: &RotatedRect, score: Option<f64>) -> Self {
        let [a, b, c, d] = rect.corners;
        Self {
            x1: a.x,
            y1: a.y,
            x2: b.x,
            y2: b.y,
            x3: c.x,
            y3: c.y,
            x4: d.x,
            y4: d.y,
            score,
        }
    }

    pub fn rect(&self) -> RotatedRect {
        RotatedRect::from_corners([
            Point::new(self.x1, self.y1),
            Point::new(self.x2, self.y2),
            Point::new(self.x3, self.y3),
            Point::new(self.x4, self.y4),
        ])
    }
}

/// One line of a corner file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CornerRecord {
    #[serde(rename = "type")]
    pub corner_type: CornerType,
    pub x: f64,
    pub y: f64,
    pub ss: f64,
    pub score: f64,
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSON-lines; blank lines are skipped, line numbers in errors are 1-based.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file), &path.display().to_string()).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead, source_name: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            source_name: source_name.to_string(),
            location: FormatLocation::Line(i + 1),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_boxes(boxes: &[BoxRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(boxes, path)
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<BoxRecord>> {
    let path = path.as_ref();
    let recs: Vec<BoxRecord> = read_jsonl(path)?;
    for (i, r) in recs.iter().enumerate() {
        if !r.rect().is_finite() || r.score.is_some_and(|s| !s.is_finite()) {
            return Err(Error::Format {
                source_name: path.display().to_string(),
                location: FormatLocation::Line(i + 1),
                message: "non-finite coordinate or score".into(),
            });
        }
    }
    Ok(recs)
}

pub fn write_corners(corners: &[CornerRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(corners, path)
}

pub fn read_corners(path: impl AsRef<Path>) -> Result<Vec<CornerRecord>> {
    read_jsonl(path)
}

/// Ground-truth boxes of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneAnnotation {
    pub image_width: u32,
    pub image_height: u32,
    pub boxes: Vec<AnnotatedBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub x3: f64,
    pub y3: f64,
    pub x4: f64,
    pub y4: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<bool>,
}

impl AnnotatedBox {
    pub fn new(rect: &RotatedRect, text: Option<bool>) -> Self {
        let b = BoxRecord::new(rect, None);
        Self {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            x3: b.x3,
            y3: b.y3,
            x4: b.x4,
            y4: b.y4,
            text,
        }
    }

    pub fn rect(&self) -> RotatedRect {
        RotatedRect::from_corners([
            Point::new(self.x1, self.y1),
            Point::new(self.x2, self.y2),
            Point::new(self.x3, self.y3),
            Point::new(self.x4, self.y4),
        ])
    }
}

impl SceneAnnotation {
    pub fn new(image_width: u32, image_height: u32, rects: &[RotatedRect]) -> Self {
        Self {
            image_width,
            image_height,
            boxes: rects.iter().map(|r| AnnotatedBox::new(r, None)).collect(),
        }
    }

    pub fn rects(&self) -> Vec<RotatedRect> {
        self.boxes.iter().map(|b| b.rect()).collect()
    }

    /// Checks that every corner lies within the frame plus a quarter-dimension slack.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        for (i, b) in self.boxes.iter().enumerate() {
            for p in b.rect().corners {
                let ok = p.is_finite() && p.x >= -0.25 * w && p.x <= 1.25 * w && p.y >= -0.25 * h && p.y <= 1.25 * h;
                if !ok {
                    return Err(Error::Config(format!(
                        "annotation box {i} corner ({}, {}) is outside the {w}x{h} frame slack",
                        p.x, p.y
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = serde_json::to_string_pretty(self).expect("annotation serializes");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ann: Self = serde_json::from_str(&s).map_err(|e| Error::Format {
            source_name: path.display().to_string(),
            location: FormatLocation::Line(e.line()),
            message: e.to_string(),
        })?;
        ann.validate()?;
        Ok(ann)
    }
}
