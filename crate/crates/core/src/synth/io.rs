use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_split, DomainStyle, ForgeryAnnotation, ImageTextPair, ManipulationKind, Sample};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train_real: usize,
    pub train_fake: usize,
    pub test_real: usize,
    pub test_fake: usize,
}

impl DatasetCounts {
    /// Half of each split real, the rest fake.
    pub fn balanced(train: usize, test: usize) -> Self {
        DatasetCounts {
            train_real: train / 2,
            train_fake: train - train / 2,
            test_real: test / 2,
            test_fake: test - test / 2,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    image: String,
    mask: Option<String>,
    caption: Vec<usize>,
    caption_text: String,
    label: u8,
    kind: ManipulationKind,
    bbox: Option<BBox>,
    flipped_tokens: Vec<usize>,
    domain: String,
}

/// Writes `DIR/train` and `DIR/test`.
pub fn build_dataset(
    dir: impl AsRef<Path>,
    style: &DomainStyle,
    counts: DatasetCounts,
    seed: u64,
    vocab: &Vocab,
) -> Result<()> {
    let dir = dir.as_ref();
    let train = generate_split(style, "train", counts.train_real, counts.train_fake, seed, vocab)?;
    write_split(dir.join("train"), &train)?;
    let test = generate_split(style, "test", counts.test_real, counts.test_fake, seed, vocab)?;
    write_split(dir.join("test"), &test)
}

/// Writes `images/`, `masks/` and `manifest.jsonl`, records sorted by id.
pub fn write_split(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut manifest = Vec::new();
    for s in order {
        let image = format!("images/{}.ppm", s.id);
        write_file(&dir.join(&image), &encode_ppm(&s.pair.image))?;
        let mask = match &s.ann.mask {
            Some(m) => {
                let rel = format!("masks/{}.pgm", s.id);
                let size = s.pair.image.shape()[0];
                write_file(&dir.join(&rel), &encode_pgm(m, size, size))?;
                Some(rel)
            }
            None => None,
        };
        let rec = Record {
            id: s.id.clone(),
            image,
            mask,
            caption: s.pair.caption.clone(),
            caption_text: s.pair.caption_text.clone(),
            label: s.pair.label,
            kind: s.pair.kind,
            bbox: s.ann.bbox,
            flipped_tokens: s.ann.flipped_tokens.clone(),
            domain: s.pair.domain.clone(),
        };
        serde_json::to_writer(&mut manifest, &rec).expect("in-memory write");
        manifest.push(b'\n');
    }
    write_file(&dir.join("manifest.jsonl"), &manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn load_split(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: mpath.clone(),
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        let ipath = dir.join(&rec.image);
        let image = decode_ppm(&fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?)
            .map_err(|detail| Error::Parse { path: ipath.clone(), detail })?;
        let mask = match &rec.mask {
            Some(rel) => {
                let p = dir.join(rel);
                let (m, _, _) = decode_pgm(&fs::read(&p).map_err(|e| Error::io(&p, e))?)
                    .map_err(|detail| Error::Parse { path: p.clone(), detail })?;
                Some(m.into_iter().map(|v| u8::from(v > 127)).collect())
            }
            None => None,
        };
        out.push(Sample {
            id: rec.id,
            pair: ImageTextPair {
                image,
                caption: rec.caption,
                caption_text: rec.caption_text,
                label: rec.label,
                kind: rec.kind,
                domain: rec.domain,
            },
            ann: ForgeryAnnotation {
                mask,
                bbox: rec.bbox,
                flipped_tokens: rec.flipped_tokens,
            },
        });
    }
    Ok(out)
}

pub(crate) fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Grayscale map, 0/1 masks are written as 0/255.
pub fn encode_pgm(values: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let binary = values.iter().all(|&v| v <= 1);
    out.extend(values.iter().map(|&v| if binary { v * 255 } else { v }));
    out
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != magic {
        return Err(format!("expected {magic}, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    Ok((w, h, &bytes[(i + 1).min(bytes.len())..]))
}

pub(crate) fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let (w, h, body) = parse_header(bytes, "P6")?;
    if body.len() != w * h * 3 {
        return Err(format!("expected {} pixel bytes, found {}", w * h * 3, body.len()));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new([h, w, 3], data).map_err(|e| e.to_string())
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(Vec<u8>, usize, usize), String> {
    let (w, h, body) = parse_header(bytes, "P5")?;
    if body.len() != w * h {
        return Err(format!("expected {} pixel bytes, found {}", w * h, body.len()));
    }
    Ok((body.to_vec(), w, h))
}
