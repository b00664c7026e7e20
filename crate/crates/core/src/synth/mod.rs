//! Deterministic manipulated image-caption pairs in four visual/verbal styles.
//!
//! A scene holds 2-4 flat shapes on a tinted gradient background; the caption
//! names the color and shape of the salient (largest, topmost) one. Fakes are
//! produced by pasting a foreign textured patch over one shape's region
//! (`image_swap`), by swapping the caption's color word for its antonym
//! (`text_flip`), or both.

mod io;
mod perturb;

pub use io::{build_dataset, decode_pgm, encode_pgm, load_split, write_split, DatasetCounts};
pub use perturb::{perturb, PerturbConfig};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{antonym, Vocab, COLORS, SHAPES};

pub const IMAGE_SIZE: usize = 32;

/// Per-channel spread of a style's scene backgrounds around its base color.
pub const BACKGROUND_JITTER: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationKind {
    None,
    ImageSwap,
    TextFlip,
    Both,
}

impl ManipulationKind {
    pub const FAKE: [ManipulationKind; 3] = [
        ManipulationKind::ImageSwap,
        ManipulationKind::TextFlip,
        ManipulationKind::Both,
    ];

    pub fn touches_image(self) -> bool {
        matches!(self, ManipulationKind::ImageSwap | ManipulationKind::Both)
    }

    pub fn touches_text(self) -> bool {
        matches!(self, ManipulationKind::TextFlip | ManipulationKind::Both)
    }

    pub fn label(self) -> u8 {
        u8::from(self != ManipulationKind::None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Bar,
    Ring,
}

impl Shape {
    fn from_word(w: &str) -> Shape {
        match w {
            "circle" => Shape::Circle,
            "square" => Shape::Square,
            "triangle" => Shape::Triangle,
            "diamond" => Shape::Diamond,
            "bar" => Shape::Bar,
            _ => Shape::Ring,
        }
    }

    fn covers(self, dx: f32, dy: f32, r: f32) -> bool {
        let d2 = dx * dx + dy * dy;
        match self {
            Shape::Circle => d2 <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Bar => dx.abs() <= r && dy.abs() <= 0.45 * r,
            Shape::Ring => d2 <= r * r && d2 >= 0.25 * r * r,
        }
    }
}

fn base_rgb(color: &str) -> [f32; 3] {
    match color {
        "red" => [0.85, 0.15, 0.15],
        "green" => [0.15, 0.70, 0.20],
        "blue" => [0.15, 0.30, 0.85],
        "orange" => [0.95, 0.55, 0.10],
        "yellow" => [0.90, 0.85, 0.15],
        _ => [0.55, 0.20, 0.75],
    }
}

/// Visual and verbal parameters of one synthetic news source.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub name: String,
    /// `None` draws a random background per scene.
    background: Option<[f32; 3]>,
    /// Palette colors are mixed toward this tint by `tint_amount`.
    tint: [f32; 3],
    tint_amount: f32,
    shapes: Vec<&'static str>,
    templates: Vec<&'static str>,
    pub image_size: usize,
}

const ALPHA_TEMPLATES: [&str; 2] = ["report : a {c} {s} today", "city council report : {c} {s}"];
const BETA_TEMPLATES: [&str; 2] = ["local photo : a {c} {s}", "weekend market photo : {c} {s}"];
const GAMMA_TEMPLATES: [&str; 2] =
    ["morning scene : a {c} {s} near river", "club scene : {c} {s} near river"];
const DELTA_TEMPLATES: [&str; 2] = ["breaking : {c} {s} in capital", "officials : a {c} {s} in storm"];

impl DomainStyle {
    pub const BUILTIN: [&'static str; 4] = ["alpha", "beta", "gamma", "delta"];

    /// One of the four built-in styles, or `"pretrain"`: random backgrounds,
    /// every shape and every phrasing, used for encoder warm starts.
    pub fn builtin(name: &str) -> Result<Self> {
        let (background, tint, tint_amount, shapes, templates): (_, _, _, &[&str], Vec<&str>) =
            match name {
                "alpha" => (
                    Some([0.12, 0.14, 0.28]),
                    [0.0; 3],
                    0.0,
                    &["circle", "square", "triangle", "bar"],
                    ALPHA_TEMPLATES.to_vec(),
                ),
                "beta" => (
                    Some([0.88, 0.85, 0.74]),
                    [1.0; 3],
                    0.25,
                    &["circle", "diamond", "ring", "square"],
                    BETA_TEMPLATES.to_vec(),
                ),
                "gamma" => (
                    Some([0.38, 0.46, 0.38]),
                    [0.0; 3],
                    0.3,
                    &["triangle", "diamond", "bar", "ring"],
                    GAMMA_TEMPLATES.to_vec(),
                ),
                "delta" => (
                    Some([0.30, 0.10, 0.12]),
                    [0.6, 0.3, 0.1],
                    0.25,
                    &["square", "ring", "circle", "triangle"],
                    DELTA_TEMPLATES.to_vec(),
                ),
                "pretrain" => (
                    None,
                    [0.5; 3],
                    0.0,
                    SHAPES,
                    [ALPHA_TEMPLATES, BETA_TEMPLATES, GAMMA_TEMPLATES, DELTA_TEMPLATES].concat(),
                ),
                other => {
                    return Err(Error::Config(format!(
                        "unknown style {other:?}; expected one of alpha, beta, gamma, delta, pretrain"
                    )))
                }
            };
        Ok(DomainStyle {
            name: name.to_string(),
            background,
            tint,
            tint_amount,
            shapes: shapes.to_vec(),
            templates,
            image_size: IMAGE_SIZE,
        })
    }

    fn palette(&self, color: &str, rng: &mut impl Rng) -> [f32; 3] {
        let base = base_rgb(color);
        let a = if self.background.is_none() {
            rng.random_range(0.0..0.3)
        } else {
            self.tint_amount
        };
        let tint = if self.background.is_none() {
            [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]
        } else {
            self.tint
        };
        std::array::from_fn(|i| {
            (base[i] * (1.0 - a) + tint[i] * a + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0)
        })
    }
}

/// One news item: pixels, caption and label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextPair {
    /// `size × size × 3`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub caption: Vec<usize>,
    pub caption_text: String,
    pub label: u8,
    pub kind: ManipulationKind,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgeryAnnotation {
    /// Row-major binary mask at image resolution, present iff the image was edited.
    pub mask: Option<Vec<u8>>,
    pub bbox: Option<BBox>,
    pub flipped_tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub pair: ImageTextPair,
    pub ann: ForgeryAnnotation,
}

impl Sample {
    /// Mask max-pooled by `factor` to the segmentation grid (all zeros when absent).
    pub fn seg_mask(&self, factor: usize) -> Vec<f32> {
        let size = self.pair.image.shape()[0];
        match &self.ann.mask {
            Some(m) => downsample_mask(m, size, factor),
            None => vec![0.0; (size / factor) * (size / factor)],
        }
    }
}

/// Max-pools a square binary mask by `factor`.
pub fn downsample_mask(mask: &[u8], size: usize, factor: usize) -> Vec<f32> {
    let out = size / factor;
    let mut res = vec![0.0; out * out];
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] != 0 {
                res[(y / factor) * out + x / factor] = 1.0;
            }
        }
    }
    res
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-item seed derived from a dataset seed, a split salt and an index.
pub fn item_seed(seed: u64, salt: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(salt)).wrapping_add(index))
}

struct Placed {
    color: &'static str,
    pixels: Vec<usize>,
}

fn render_shape(size: usize, shape: Shape, cx: f32, cy: f32, r: f32) -> Vec<usize> {
    let mut px = Vec::new();
    for y in 0..size {
        for x in 0..size {
            if shape.covers(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r) {
                px.push(y * size + x);
            }
        }
    }
    px
}

fn place_shape(size: usize, shape: Shape, side: f32, rng: &mut impl Rng) -> Vec<usize> {
    let r = side / 2.0;
    let cx = rng.random_range(r..size as f32 - r);
    let cy = rng.random_range(r..size as f32 - r);
    render_shape(size, shape, cx, cy, r)
}

fn paint(img: &mut [f32], pixels: &[usize], rgb: [f32; 3]) {
    for &p in pixels {
        img[p * 3..p * 3 + 3].copy_from_slice(&rgb);
    }
}

fn pixel_box(pixels: &[usize], size: usize) -> (usize, usize, usize, usize) {
    let xs = pixels.iter().map(|p| p % size);
    let ys = pixels.iter().map(|p| p / size);
    (
        xs.clone().min().unwrap(),
        ys.clone().min().unwrap(),
        xs.max().unwrap(),
        ys.max().unwrap(),
    )
}

/// Renders one pair. `force_kind = None` draws the kind at random
/// (half real, fakes split evenly across the three manipulation kinds).
pub fn generate_pair(
    seed: u64,
    style: &DomainStyle,
    force_kind: Option<ManipulationKind>,
    vocab: &Vocab,
) -> Result<(ImageTextPair, ForgeryAnnotation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = style.image_size;
    let scale = size as f32 / IMAGE_SIZE as f32;
    let kind = match force_kind {
        Some(k) => k,
        None if rng.random_bool(0.5) => ManipulationKind::None,
        None => *ManipulationKind::FAKE.choose(&mut rng).unwrap(),
    };

    let bg = match style.background {
        Some(b) => b.map(|c| (c + rng.random_range(-BACKGROUND_JITTER..BACKGROUND_JITTER)).clamp(0.0, 1.0)),
        None => [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
    };
    let (gx, gy) = (rng.random_range(-0.08..0.08f32), rng.random_range(-0.08..0.08f32));
    let mut img = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let shade = gx * (x as f32 / size as f32 - 0.5) + gy * (y as f32 / size as f32 - 0.5);
            for c in 0..3 {
                img[(y * size + x) * 3 + c] = (bg[c] + shade).clamp(0.0, 1.0);
            }
        }
    }

    // Salient attribute first so that its antonym can be kept out of the scene.
    let salient_color = *COLORS.choose(&mut rng).unwrap();
    let banned = antonym(salient_color).unwrap();
    let allowed: Vec<&'static str> = COLORS.iter().copied().filter(|&c| c != banned).collect();
    let salient_shape = *style.shapes.choose(&mut rng).unwrap();

    let n_shapes = rng.random_range(2..=4usize);
    let mut placed = Vec::with_capacity(n_shapes);
    for i in 0..n_shapes {
        let last = i + 1 == n_shapes;
        let (color, shape, side) = if last {
            (salient_color, salient_shape, rng.random_range(12.0..16.0) * scale)
        } else {
            let c = *allowed.choose(&mut rng).unwrap();
            (c, *style.shapes.choose(&mut rng).unwrap(), rng.random_range(8.0..12.0) * scale)
        };
        let rgb = style.palette(color, &mut rng);
        let pixels = place_shape(size, Shape::from_word(shape), side, &mut rng);
        paint(&mut img, &pixels, rgb);
        placed.push(Placed { color, pixels });
    }

    let mut mask = None;
    if kind.touches_image() {
        let target = if rng.random_bool(0.5) {
            n_shapes - 1
        } else {
            rng.random_range(0..n_shapes - 1)
        };
        let (x0, y0, x1, y1) = pixel_box(&placed[target].pixels, size);
        let (x0, y0) = (x0.saturating_sub(1), y0.saturating_sub(1));
        let (x1, y1) = ((x1 + 1).min(size - 1), (y1 + 1).min(size - 1));
        let foreign: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let new_color = *allowed
            .iter()
            .filter(|&&c| c != placed[target].color)
            .collect::<Vec<_>>()
            .choose(&mut rng)
            .unwrap();
        let new_rgb = std::array::from_fn::<f32, 3, _>(|i| {
            (base_rgb(new_color)[i] + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)
        });
        let new_shape = Shape::from_word(SHAPES.choose(&mut rng).unwrap());
        let (w, h) = ((x1 - x0 + 1) as f32, (y1 - y0 + 1) as f32);
        let r = (w.min(h) - 2.0).max(2.0) / 2.0;
        let (cx, cy) = (x0 as f32 + w / 2.0, y0 as f32 + h / 2.0);
        let amp = 0.12;
        let mut m = vec![0u8; size * size];
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = y * size + x;
                m[p] = 1;
                let inside = new_shape.covers(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r);
                let checker = if (x + y) % 2 == 0 { amp } else { -amp };
                for c in 0..3 {
                    let v = if inside { new_rgb[c] } else { foreign[c] };
                    img[p * 3 + c] = (v + checker).clamp(0.0, 1.0);
                }
            }
        }
        mask = Some(m);
    }

    for v in &mut img {
        *v = (*v * 255.0).round() / 255.0;
    }

    let template = *style.templates.choose(&mut rng).unwrap();
    let words: Vec<&str> = template.split_whitespace().collect();
    let color_pos = words.iter().position(|&w| w == "{c}").expect("template has a color slot");
    let mut flipped_tokens = Vec::new();
    let caption_words: Vec<&str> = words
        .iter()
        .enumerate()
        .map(|(i, &w)| match w {
            "{c}" if kind.touches_text() => {
                flipped_tokens.push(i);
                banned
            }
            "{c}" => salient_color,
            "{s}" => salient_shape,
            w => w,
        })
        .collect();
    debug_assert_eq!(caption_words[color_pos] == banned, kind.touches_text());
    let caption_text = caption_words.join(" ");
    let caption = vocab.encode(&caption_text)?;

    let bbox = mask.as_deref().and_then(|m| BBox::of_mask(m, size, size));
    Ok((
        ImageTextPair {
            image: Tensor::new([size, size, 3], img)?,
            caption,
            caption_text,
            label: kind.label(),
            kind,
            domain: style.name.clone(),
        },
        ForgeryAnnotation {
            mask,
            bbox,
            flipped_tokens,
        },
    ))
}

/// Generates `n_real` pristine then `n_fake` manipulated samples (fake kinds
/// cycle image_swap, text_flip, both). Ids are `{domain}-{split}-{index:06}`.
pub fn generate_split(
    style: &DomainStyle,
    split: &str,
    n_real: usize,
    n_fake: usize,
    seed: u64,
    vocab: &Vocab,
) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    let salt = style
        .name
        .bytes()
        .chain([b'/'])
        .chain(split.bytes())
        .fold(0u64, |h, b| splitmix64(h ^ b as u64));
    (0..n_real + n_fake)
        .into_par_iter()
        .map(|i| {
            let kind = if i < n_real {
                ManipulationKind::None
            } else {
                ManipulationKind::FAKE[(i - n_real) % 3]
            };
            let (pair, ann) = generate_pair(item_seed(seed, salt, i as u64), style, Some(kind), vocab)?;
            Ok(Sample {
                id: format!("{}-{split}-{i:06}", style.name),
                pair,
                ann,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
