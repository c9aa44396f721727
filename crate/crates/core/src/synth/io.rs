//! On-disk dataset layout:
//!
//! ```text
//! <dir>/index.csv        id,subject_id,labels,boxes,part
//! <dir>/images/<id>.pgm  16-bit binary PGM
//! ```
//!
//! `labels` is a string of `0`/`1` digits, one per class. `boxes` is a
//! `;`-separated list of `class:x0:y0:x1:y1` entries (half-open, may be empty).

use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetSplit, LesionBox, Sample, PIXEL_LEVELS};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INDEX: &str = "index.csv";
const HEADER: &str = "id,subject_id,labels,boxes,part";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFiles {
    pub samples: Vec<Sample>,
    pub split: DatasetSplit,
}

fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("images").join(format!("{id:06}.pgm"))
}

pub fn save_dataset(dir: &Path, samples: &[Sample], split: &DatasetSplit) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut index = String::from(HEADER);
    index.push('\n');
    for s in samples {
        let part = split
            .part_of(s.id)
            .ok_or_else(|| Error::Dataset(format!("sample {} is not assigned to a split part", s.id)))?;
        let labels: String = s.labels.iter().map(|l| if *l == 0 { '0' } else { '1' }).collect();
        let boxes: Vec<String> =
            s.boxes.iter().map(|b| format!("{}:{}:{}:{}:{}", b.class_id, b.x0, b.y0, b.x1, b.y1)).collect();
        index.push_str(&format!("{},{},{},{},{}\n", s.id, s.subject_id, labels, boxes.join(";"), part));
        write_pgm16(&image_path(dir, s.id), &s.image)?;
    }
    let path = dir.join(INDEX);
    write_atomic(&path, index.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetFiles> {
    let path = dir.join(INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Dataset(format!("{}: missing header {HEADER:?}", path.display())));
    }
    let mut samples = Vec::new();
    let mut split = DatasetSplit::default();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |what: &str| Error::Dataset(format!("{} line {}: {what}", path.display(), n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        let [id, subject, labels, boxes, part] = fields[..] else {
            return Err(bad("expected 5 fields"));
        };
        let id: usize = id.parse().map_err(|_| bad("bad id"))?;
        let subject: usize = subject.parse().map_err(|_| bad("bad subject_id"))?;
        let labels = labels
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(bad("labels must be 0/1 digits")),
            })
            .collect::<Result<Vec<u8>>>()?;
        let boxes = boxes
            .split(';')
            .filter(|b| !b.is_empty())
            .map(|b| {
                let v = b.split(':').map(|x| x.parse::<usize>()).collect::<Result<Vec<_>, _>>();
                match v.as_deref() {
                    Ok(&[class_id, x0, y0, x1, y1]) => Ok(LesionBox { class_id, x0, y0, x1, y1 }),
                    _ => Err(bad("malformed box")),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        split.push(part.parse()?, id);
        let image = read_pgm16(&image_path(dir, id))?;
        samples.push(Sample::new(id, subject, image, labels, boxes)?);
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{}: no samples", path.display())));
    }
    let classes = samples[0].classes();
    let size = samples[0].image.shape().to_vec();
    if samples.iter().any(|s| s.classes() != classes || s.image.shape() != size.as_slice()) {
        return Err(Error::Dataset("samples disagree on class count or image size".into()));
    }
    for ids in [&mut split.train, &mut split.val, &mut split.eval] {
        ids.sort_unstable();
    }
    Ok(DatasetFiles { samples, split })
}

fn pgm_header(width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

/// Writes a single-channel `[H, W, 1]` image with values in `[0, 1]` as a
/// 16-bit PGM (big-endian samples).
pub fn write_pgm16(path: &Path, image: &Tensor) -> Result<()> {
    let [h, w, 1] = *image.shape() else {
        return Err(Error::shape("write_pgm16", format!("expected [H,W,1], got {:?}", image.shape())));
    };
    let mut bytes = pgm_header(w, h, 65535);
    for &v in image.values() {
        let q = (v.clamp(0.0, 1.0) * PIXEL_LEVELS).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_atomic(path, &bytes)
}

/// Writes an 8-bit PGM from row-major bytes.
pub fn write_pgm8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm8", format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut bytes = pgm_header(width, height, 255);
    bytes.extend_from_slice(pixels);
    write_atomic(path, &bytes)
}

/// Reads a binary PGM (8- or 16-bit) into an `[H, W, 1]` tensor scaled to `[0, 1]`.
pub fn read_pgm16(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Dataset(format!("{}: {what}", path.display()));
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("bad dimensions or maxval"));
    }
    let width = if maxval > 255 { 2 } else { 1 };
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() < w * h * width {
        return Err(bad("truncated pixel data"));
    }
    let values = data[..w * h * width]
        .chunks_exact(width)
        .map(|c| {
            let v = if width == 2 { u16::from_be_bytes([c[0], c[1]]) as f64 } else { c[0] as f64 };
            v / maxval as f64
        })
        .collect();
    Tensor::new([h, w, 1], values)
}
