//! Grad-CAM heatmaps, activation grids, overlays with indicator-group
//! separators, and binary PGM/PPM export.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BoundaryLevel, IndicatorSchema};
use crate::error::{Error, Result};
use crate::nn::{Model, Scalar, Tensor};

/// Nonnegative map, max-normalised to [0, 1] (all zeros allowed).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    /// Cache index of the explained activations.
    pub source_layer: usize,
}

impl Heatmap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }
}

fn single<T: Scalar>(model: &Model<T>, image: &[T]) -> Result<Tensor<T>> {
    let (h, w) = (model.config.input_h, model.config.input_w);
    if image.len() != h * w {
        return Err(Error::Shape(format!(
            "image has {} pixels, model expects {h}x{w}",
            image.len()
        )));
    }
    Tensor::new(vec![1, h, w, 1], image.to_vec())
}

fn max_normalize(v: &mut [f64]) {
    let m = v.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        for x in v.iter_mut() {
            *x /= m;
        }
    }
}

/// Grad-CAM on the output of the last convolution block.
///
/// `alpha_k` is the spatial mean of `d logit / d A_k`, the map is
/// `ReLU(sum_k alpha_k A_k)`, then max-normalised. The logit is the
/// pre-sigmoid fraud score.
pub fn gradcam<T: Scalar>(model: &Model<T>, image: &[T]) -> Result<Heatmap> {
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("model parameters are not finite"));
    }
    let x = single(model, image)?;
    let cache = model.forward(&x, false, 0)?;
    let at = model.last_block_index();
    let (_, grad) = model.backward_from(&cache, vec![T::one()], Some(at))?;
    let grad = grad.ok_or_else(|| Error::invalid("no gradient captured"))?;
    let act = cache.input(at).ok_or_else(|| Error::invalid("no activations cached"))?;
    let &[_, c, h, w] = act.shape() else {
        return Err(Error::Shape("explained layer is not a feature map".into()));
    };
    let hw = h * w;
    let mut values = vec![0.0; hw];
    for k in 0..c {
        let g = &grad.data()[k * hw..(k + 1) * hw];
        let alpha = g.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        for (o, a) in values.iter_mut().zip(&act.data()[k * hw..(k + 1) * hw]) {
            *o += alpha * a.as_f64();
        }
    }
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    max_normalize(&mut values);
    Ok(Heatmap {
        h,
        w,
        values,
        source_layer: at,
    })
}

/// Corner-aligned bilinear resize.
pub fn bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |i: usize, d: usize, s: usize| -> (usize, usize, f64) {
        if d <= 1 || s <= 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (s - 1) as f64 / (d - 1) as f64;
        let lo = (x.floor() as usize).min(s - 1);
        let hi = (lo + 1).min(s - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for i in 0..dh {
        let (r0, r1, fy) = coord(i, dh, sh);
        for j in 0..dw {
            let (c0, c1, fx) = coord(j, dw, sw);
            let top = src[r0 * sw + c0] * (1.0 - fx) + src[r0 * sw + c1] * fx;
            let bot = src[r1 * sw + c0] * (1.0 - fx) + src[r1 * sw + c1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    #[default]
    Gray,
    /// Black, red, yellow, white.
    Hot,
}

impl Palette {
    pub fn rgb(self, l: f64) -> [u8; 3] {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self {
            Palette::Gray => [q(l); 3],
            Palette::Hot => [q(3.0 * l), q(3.0 * l - 1.0), q(3.0 * l - 2.0)],
        }
    }
}

pub const RED: [u8; 3] = [255, 0, 0];
pub const WHITE: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Separator {
    /// First output pixel column of the separator.
    pub x: usize,
    pub width: usize,
    /// "level1" (red) or "level2" (white).
    pub level: String,
    /// The separator sits immediately left of this feature column.
    pub before_feature: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSpan {
    pub level1: String,
    pub level2: String,
    pub feature_start: usize,
    pub feature_end: usize,
    /// Output pixel columns, end exclusive.
    pub x_start: usize,
    pub x_end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes.
    pub rgb: Vec<u8>,
    pub separators: Vec<Separator>,
    pub groups: Vec<GroupSpan>,
    pub scale: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlaySidecar<'a> {
    pub width: usize,
    pub height: usize,
    pub scale: usize,
    pub separators: &'a [Separator],
    pub level2_groups: &'a [GroupSpan],
}

impl OverlayImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 3 * (y * self.width + x);
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn sidecar(&self) -> OverlaySidecar<'_> {
        OverlaySidecar {
            width: self.width,
            height: self.height,
            scale: self.scale,
            separators: &self.separators,
            level2_groups: &self.groups,
        }
    }
}

/// Per-image min-max rescale to [0, 1]; constant images map to 0.
pub fn minmax(v: &[f32]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    v.iter()
        .map(|&x| if hi > lo { (x as f64 - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

/// Blends the upsampled heatmap 50/50 with the min-max-normalised input,
/// scales each cell to `scale x scale` pixels and inserts `scale`-wide
/// separator columns at schema group boundaries (red between level-1
/// groups, white between level-2 groups).
pub fn upsample_overlay(
    hm: &Heatmap,
    base: &[f32],
    t: usize,
    schema: &IndicatorSchema,
    scale: usize,
    palette: Palette,
) -> Result<OverlayImage> {
    if scale == 0 {
        return Err(Error::invalid("overlay scale must be >= 1"));
    }
    let f = schema.len();
    if t == 0 || base.len() != t * f {
        return Err(Error::Shape(format!(
            "base image has {} pixels but schema has {f} features over {t} rows",
            base.len()
        )));
    }
    let heat = bilinear(&hm.values, hm.h, hm.w, t, f);
    let input = minmax(base);
    let boundaries = schema.group_boundaries();
    // Output x of each feature column.
    let mut col_x = Vec::with_capacity(f);
    let mut separators = Vec::new();
    let mut x = 0;
    let mut bi = 0;
    for j in 0..f {
        if bi < boundaries.len() && boundaries[bi].0 == j {
            let level = match boundaries[bi].1 {
                BoundaryLevel::Level1 => "level1",
                BoundaryLevel::Level2 => "level2",
            };
            separators.push(Separator {
                x,
                width: scale,
                level: level.into(),
                before_feature: j,
            });
            x += scale;
            bi += 1;
        }
        col_x.push(x);
        x += scale;
    }
    let width = x;
    let height = t * scale;
    let mut rgb = vec![0u8; width * height * 3];
    for i in 0..t {
        for (j, &cx) in col_x.iter().enumerate() {
            let l = 0.5 * input[i * f + j] + 0.5 * heat[i * f + j];
            let px = palette.rgb(l);
            for dy in 0..scale {
                for dx in 0..scale {
                    let o = 3 * ((i * scale + dy) * width + cx + dx);
                    rgb[o..o + 3].copy_from_slice(&px);
                }
            }
        }
    }
    for s in &separators {
        let px = if s.level == "level1" { RED } else { WHITE };
        for y in 0..height {
            for dx in 0..s.width {
                let o = 3 * (y * width + s.x + dx);
                rgb[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    let groups = schema
        .level2_groups()
        .into_iter()
        .map(|(l1, l2, a, b)| GroupSpan {
            level1: l1.as_str().to_string(),
            level2: l2,
            feature_start: a,
            feature_end: b,
            x_start: col_x[a],
            x_end: col_x[b - 1] + scale,
        })
        .collect();
    Ok(OverlayImage {
        width,
        height,
        rgb,
        separators,
        groups,
        scale,
    })
}

/// Grayscale image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Post-ReLU channel maps of one convolution, each max-normalised, plus a
/// near-square tiling with 1-pixel white gutters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapGrid {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub maps: Vec<Vec<f64>>,
    pub grid: GrayImage,
}

/// `conv` is 1-based over the network's convolutions.
pub fn layer_activations<T: Scalar>(model: &Model<T>, image: &[T], conv: usize) -> Result<FeatureMapGrid> {
    let at = model.conv_activation_index(conv)?;
    let cache = model.forward(&single(model, image)?, false, 0)?;
    let act = cache.input(at).ok_or_else(|| Error::invalid("activation not cached"))?;
    let &[_, c, h, w] = act.shape() else {
        return Err(Error::Shape("activation is not a feature map".into()));
    };
    let maps: Vec<Vec<f64>> = act
        .data()
        .chunks(h * w)
        .map(|m| {
            let mut v: Vec<f64> = m.iter().map(|x| x.as_f64()).collect();
            max_normalize(&mut v);
            v
        })
        .collect();
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let gw = cols * w + cols - 1;
    let gh = rows * h + rows - 1;
    let mut data = vec![1.0; gw * gh];
    for (k, m) in maps.iter().enumerate() {
        let (r, q) = (k / cols, k % cols);
        for i in 0..h {
            let row0 = (r * (h + 1) + i) * gw + q * (w + 1);
            data[row0..row0 + w].copy_from_slice(&m[i * w..(i + 1) * w]);
        }
    }
    Ok(FeatureMapGrid {
        channels: c,
        h,
        w,
        maps,
        grid: GrayImage {
            width: gw,
            height: gh,
            data,
        },
    })
}

/// Binary PGM (P5, maxval 255). Values must lie in [0, 1].
pub fn encode_pgm(img: &GrayImage) -> Result<Vec<u8>> {
    if img.data.len() != img.width * img.height {
        return Err(Error::Shape("gray image size mismatch".into()));
    }
    if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("gray value {v} outside [0, 1]")));
    }
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend(img.data.iter().map(|v| (v * 255.0).round() as u8));
    Ok(buf)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Shape("rgb image size mismatch".into()));
    }
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(img)?)
}

pub fn write_ppm(path: &Path, img: &OverlayImage) -> Result<()> {
    write_bytes(path, &encode_ppm(img.width, img.height, &img.rgb)?)
}

/// Parses a binary P5/P6 file with maxval 255 into `(magic, width,
/// height, bytes)`.
pub fn decode_pnm(buf: &[u8]) -> Result<(String, usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("truncated PNM header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    pos += 1;
    let magic = fields[0].clone();
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::invalid(format!("unsupported PNM type {m}"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad PNM field `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::invalid("only maxval 255 is supported"));
    }
    let data = buf.get(pos..).unwrap_or(&[]);
    if data.len() != w * h * channels {
        return Err(Error::invalid("PNM pixel data has the wrong length"));
    }
    Ok((magic, w, h, data.to_vec()))
}

pub fn read_pnm(path: &Path) -> Result<(String, usize, usize, Vec<u8>)> {
    decode_pnm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Heatmap cells whose input footprint (`stride x stride` pixels) meets
/// the rectangle `rows x cols` (end exclusive) of the input image.
pub fn footprint_mask(hm: &Heatmap, stride: usize, rows: (usize, usize), cols: (usize, usize)) -> Vec<bool> {
    let mut mask = vec![false; hm.h * hm.w];
    for i in 0..hm.h {
        for j in 0..hm.w {
            let (r0, c0) = (i * stride, j * stride);
            mask[i * hm.w + j] = r0 < rows.1 && rows.0 < r0 + stride && c0 < cols.1 && cols.0 < c0 + stride;
        }
    }
    mask
}

/// Heatmap mass inside `mask`.
pub fn masked_mass(hm: &Heatmap, mask: &[bool]) -> f64 {
    hm.values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum()
}

/// `(mass inside mask, total mass)` over cells at or above the 90th
/// percentile of the map. All-zero maps contribute nothing.
pub fn top_decile_mass(hm: &Heatmap, mask: &[bool]) -> (f64, f64) {
    let mut sorted = hm.values.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let cut = sorted[((0.9 * (n - 1) as f64).ceil() as usize).min(n - 1)];
    let (mut inside, mut total) = (0.0, 0.0);
    for (v, &m) in hm.values.iter().zip(mask) {
        if *v >= cut && *v > 0.0 {
            total += v;
            if m {
                inside += v;
            }
        }
    }
    (inside, total)
}
