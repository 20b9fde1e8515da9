use serde::{Deserialize, Serialize};

use crate::bbox::{clip_to_image, scale_box, BBox};
use crate::error::{CoreError, Result};
use crate::image::{ImageBuffer, CHANNELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which pixels of an image a masking operation selects for replacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSelector {
    /// Instance pixels. Uses per-instance pixel masks in pixel-precise
    /// mode, and degrades to whole boxes otherwise.
    Foreground,
    /// Pixels inside annotation boxes that are not foreground.
    InnerBoxBackground,
    /// Everything outside the union of annotation boxes.
    OuterBoxBackground,
    /// Annulus between `lo`- and `hi`-scaled copies of every box,
    /// excluding original box interiors.
    Band { lo: f64, hi: f64 },
}

impl RegionSelector {
    pub fn validate(&self) -> Result<()> {
        if let RegionSelector::Band { lo, hi } = self {
            if !(*lo >= 1.0 && lo < hi) {
                return Err(CoreError::config(format!(
                    "band requires 1.0 <= lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// What the selected pixels are replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    Black,
    White,
    /// Per-channel mean color of the whole image, computed before any
    /// fill is applied.
    Average,
    /// Independent uniform [0, 1) samples per channel and pixel.
    RandomUniform { seed: u64 },
    Constant { rgb: [f64; 3] },
}

/// One boolean per pixel; true marks a pixel selected for replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(CoreError::invalid("mask bit count does not match dimensions"));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        assert_eq!(self.bits.len(), other.bits.len());
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    pub fn invert(&mut self) {
        for b in self.bits.iter_mut() {
            *b = !*b;
        }
    }

    /// Clears every bit that is set in `other`.
    pub fn subtract(&mut self, other: &BinaryMask) {
        assert_eq!(self.bits.len(), other.bits.len());
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !*b;
        }
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let mut out = image::GrayImage::new(self.width as u32, self.height as u32);
        for row in 0..self.height {
            for col in 0..self.width {
                let v = if self.get(row, col) { 255 } else { 0 };
                out.put_pixel(col as u32, row as u32, image::Luma([v]));
            }
        }
        out.save(path).map_err(|source| CoreError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| CoreError::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let bits = img.pixels().map(|p| p.0[0] >= 128).collect();
        BinaryMask::from_bits(h, w, bits)
    }
}

/// Rasterize a box: set every pixel whose center lies inside it.
fn paint_box(mask: &mut BinaryMask, b: &BBox) {
    let row0 = (b.y - 0.5).ceil().max(0.0) as usize;
    let col0 = (b.x - 0.5).ceil().max(0.0) as usize;
    let row1 = (b.bottom() - 0.5).ceil().min(mask.height as f64) as usize;
    let col1 = (b.right() - 0.5).ceil().min(mask.width as f64) as usize;
    for row in row0..row1 {
        for col in col0..col1 {
            debug_assert!(b.contains_pixel(row, col));
            mask.set(row, col, true);
        }
    }
}

fn union_of_boxes(height: usize, width: usize, boxes: &[BBox]) -> BinaryMask {
    let mut mask = BinaryMask::empty(height, width);
    for b in boxes {
        if let Some(c) = clip_to_image(b, width, height) {
            paint_box(&mut mask, &c);
        }
    }
    mask
}

/// Union over boxes of the annulus between the `hi`- and `lo`-scaled box,
/// minus every pixel inside any original box.
fn band_mask(height: usize, width: usize, boxes: &[BBox], lo: f64, hi: f64) -> Result<BinaryMask> {
    let mut mask = BinaryMask::empty(height, width);
    for b in boxes {
        let outer = scale_box(b, hi)?;
        let inner = scale_box(b, lo)?;
        if let Some(outer) = clip_to_image(&outer, width, height) {
            let row0 = (outer.y - 0.5).ceil().max(0.0) as usize;
            let col0 = (outer.x - 0.5).ceil().max(0.0) as usize;
            let row1 = (outer.bottom() - 0.5).ceil().min(height as f64) as usize;
            let col1 = (outer.right() - 0.5).ceil().min(width as f64) as usize;
            for row in row0..row1 {
                for col in col0..col1 {
                    if !inner.contains_pixel(row, col) {
                        mask.set(row, col, true);
                    }
                }
            }
        }
    }
    // Foreground is never masked by a band, even one from a neighbor.
    mask.subtract(&union_of_boxes(height, width, boxes));
    Ok(mask)
}

/// Build the pixel selection for a region of the image.
///
/// `pixel_masks`, when given, must hold one instance mask per annotation,
/// each matching the image dimensions. `pixel_precise` controls whether
/// foreground means instance pixels (requires masks) or whole boxes.
pub fn build_region_mask(
    height: usize,
    width: usize,
    boxes: &[BBox],
    sel: RegionSelector,
    pixel_masks: Option<&[BinaryMask]>,
    pixel_precise: bool,
) -> Result<BinaryMask> {
    sel.validate()?;
    if let Some(masks) = pixel_masks {
        if masks.len() != boxes.len() {
            return Err(CoreError::config(format!(
                "got {} pixel masks for {} annotations",
                masks.len(),
                boxes.len()
            )));
        }
        for m in masks {
            if m.height() != height || m.width() != width {
                return Err(CoreError::config("pixel mask dimensions differ from image"));
            }
        }
    }

    let foreground = || -> Result<BinaryMask> {
        if pixel_precise {
            let masks = pixel_masks.ok_or_else(|| {
                CoreError::config("pixel-precise mode requires instance pixel masks")
            })?;
            let mut fg = BinaryMask::empty(height, width);
            for m in masks {
                fg.union_with(m);
            }
            Ok(fg)
        } else {
            Ok(union_of_boxes(height, width, boxes))
        }
    };

    match sel {
        RegionSelector::Foreground => foreground(),
        RegionSelector::InnerBoxBackground => {
            let mut inner = union_of_boxes(height, width, boxes);
            inner.subtract(&foreground()?);
            Ok(inner)
        }
        RegionSelector::OuterBoxBackground => {
            let mut outer = union_of_boxes(height, width, boxes);
            outer.invert();
            Ok(outer)
        }
        RegionSelector::Band { lo, hi } => band_mask(height, width, boxes, lo, hi),
    }
}

/// Replace the selected pixels of `img` according to `policy`.
/// Unselected pixels are copied bit-identically; the input is not mutated.
pub fn apply_fill(img: &ImageBuffer, mask: &BinaryMask, policy: FillPolicy) -> Result<ImageBuffer> {
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(CoreError::invalid(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    match policy {
        FillPolicy::Black => fill_constant(&mut out, mask, [0.0; 3]),
        FillPolicy::White => fill_constant(&mut out, mask, [1.0; 3]),
        FillPolicy::Constant { rgb } => {
            if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CoreError::invalid("constant fill color outside [0, 1]"));
            }
            fill_constant(&mut out, mask, rgb)
        }
        FillPolicy::Average => {
            // Mean of the original image, before any fill.
            let means = img.channel_means();
            fill_constant(&mut out, mask, means)
        }
        FillPolicy::RandomUniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for row in 0..h {
                for col in 0..w {
                    if mask.get(row, col) {
                        for c in 0..CHANNELS {
                            out.set(c, row, col, rng.random::<f64>());
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn fill_constant(img: &mut ImageBuffer, mask: &BinaryMask, rgb: [f64; 3]) {
    for row in 0..img.height() {
        for col in 0..img.width() {
            if mask.get(row, col) {
                for c in 0..CHANNELS {
                    img.set(c, row, col, rgb[c]);
                }
            }
        }
    }
}

/// Per-pixel discriminator attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl WeightMap {
    pub fn ones(height: usize, width: usize) -> Self {
        WeightMap {
            height,
            width,
            weights: vec![1.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Reduce to a `rows x cols` grid by averaging the pixels that fall
    /// into each grid cell (area averaging over equal subdivisions).
    pub fn downsample_area(&self, rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        let mut counts = vec![0usize; rows * cols];
        for row in 0..self.height {
            let gr = row * rows / self.height;
            for col in 0..self.width {
                let gc = col * cols / self.width;
                out[gr * cols + gc] += self.get(row, col);
                counts[gr * cols + gc] += 1;
            }
        }
        for (v, n) in out.iter_mut().zip(counts) {
            if n > 0 {
                *v /= n as f64;
            }
        }
        out
    }
}

/// The default short-range emphasis bands: weight 2.0 over 1.0-1.5x the
/// box size, then 1.8, 1.6, 1.4 in half-step rings out to 3.0x, and 1.2
/// out to 5.0x. Foreground and anything past 5.0x keep weight 1.0.
pub fn default_weight_bands() -> Vec<(f64, f64, f64)> {
    vec![
        (1.0, 1.5, 2.0),
        (1.5, 2.0, 1.8),
        (2.0, 2.5, 1.6),
        (2.5, 3.0, 1.4),
        (3.0, 5.0, 1.2),
    ]
}

/// Build the per-pixel weight map for a set of boxes and weight bands.
///
/// Each pixel takes the weight of the band containing it; where the rings
/// of several boxes overlap the maximum wins. Pixels inside any original
/// box and pixels in no band get 1.0.
pub fn band_weight_map(
    height: usize,
    width: usize,
    boxes: &[BBox],
    bands: &[(f64, f64, f64)],
) -> Result<WeightMap> {
    for win in bands.windows(2) {
        let (_, hi_prev, _) = win[0];
        let (lo_next, _, _) = win[1];
        if hi_prev > lo_next {
            return Err(CoreError::config(format!(
                "weight bands overlap: ..{hi_prev} vs {lo_next}.."
            )));
        }
    }
    for &(lo, hi, weight) in bands {
        if !(lo >= 1.0 && lo < hi) || weight < 0.0 {
            return Err(CoreError::config(format!("invalid weight band ({lo}, {hi}, {weight})")));
        }
    }

    let mut map = WeightMap::ones(height, width);
    let inside_any = union_of_boxes(height, width, boxes);
    for b in boxes {
        for &(lo, hi, weight) in bands {
            let outer = scale_box(b, hi)?;
            let inner = scale_box(b, lo)?;
            let Some(clipped) = clip_to_image(&outer, width, height) else {
                continue;
            };
            let row0 = (clipped.y - 0.5).ceil().max(0.0) as usize;
            let col0 = (clipped.x - 0.5).ceil().max(0.0) as usize;
            let row1 = (clipped.bottom() - 0.5).ceil().min(height as f64) as usize;
            let col1 = (clipped.right() - 0.5).ceil().min(width as f64) as usize;
            for row in row0..row1 {
                for col in col0..col1 {
                    if !inner.contains_pixel(row, col) && !inside_any.get(row, col) {
                        let idx = row * width + col;
                        map.weights[idx] = map.weights[idx].max(weight);
                    }
                }
            }
        }
    }
    Ok(map)
}
