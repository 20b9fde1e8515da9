//! Deterministic two-domain synthetic pedestrian dataset generator.
//!
//! The domain gap lives in the background only: base color, procedural
//! noise spectrum and optional fog differ between source and target, while
//! the figure generator (shape, size and color jitter) is shared verbatim.
//! Every instance comes with a full pixel mask and an exact occlusion
//! fraction from injected background-colored occluders.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, DomainLabel};
use crate::error::{CoreError, Result};
use crate::image::{ImageBuffer, CHANNELS};
use crate::manifest::{DatasetManifest, ManifestItem};
use crate::region::BinaryMask;

/// Procedural background description for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub base_color: [f64; 3],
    /// Amplitude of the value noise added to the base color.
    pub noise_amplitude: f64,
    /// Noise cell size in pixels; smaller means finer texture.
    pub texture_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    /// Instance height range in pixels; width follows from a fixed
    /// pedestrian-like aspect ratio.
    pub instance_height: (f64, f64),
    pub source_background: BackgroundSpec,
    pub target_background: BackgroundSpec,
    /// Atmospheric fog blended into target images (0 disables).
    pub fog_density: f64,
    /// Probability that an instance receives an occluder.
    pub occlusion_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 192,
            train_per_domain: 48,
            test_per_domain: 32,
            instances_min: 1,
            instances_max: 4,
            instance_height: (22.0, 56.0),
            source_background: BackgroundSpec {
                base_color: [0.46, 0.52, 0.40],
                noise_amplitude: 0.10,
                texture_scale: 14.0,
            },
            target_background: BackgroundSpec {
                base_color: [0.58, 0.46, 0.62],
                noise_amplitude: 0.16,
                texture_scale: 5.0,
            },
            fog_density: 0.0,
            occlusion_rate: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances_min > self.instances_max {
            return Err(CoreError::config(format!(
                "instances_min {} > instances_max {}",
                self.instances_min, self.instances_max
            )));
        }
        if self.image_size < 32 {
            return Err(CoreError::config("image_size must be at least 32"));
        }
        if !(0.0..=1.0).contains(&self.fog_density) {
            return Err(CoreError::config("fog_density must lie in [0, 1]"));
        }
        if !(self.instance_height.0 > 2.0 && self.instance_height.0 <= self.instance_height.1) {
            return Err(CoreError::config("invalid instance height range"));
        }
        Ok(())
    }
}

/// One rendered figure: full-extent pixel mask, its tight bounding box and
/// the exact occluded fraction of the mask.
#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub bbox: BBox,
    pub mask: BinaryMask,
    pub occlusion: f64,
}

/// One rendered image with its instances and the per-pixel instance-id
/// map. Ids: 0 = background, k+1 = visible pixel of instance k,
/// k+1+128 = occluded pixel of instance k. Instances never overlap each
/// other, so the full mask of instance k is `{id == k+1 or id == k+129}`
/// and its occlusion fraction can be recounted from the map alone.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: ImageBuffer,
    pub instances: Vec<SynthInstance>,
    pub id_map: Vec<u8>,
}

/// Marker added to an instance id when an occluder repaints that pixel.
pub const OCCLUDED_ID_OFFSET: u8 = 128;

pub const FOG_COLOR: [f64; 3] = [0.8, 0.8, 0.8];

/// Atmospheric fog: `out = (1 - density) * img + density * fog_color`,
/// applied to background and foreground alike.
pub fn fog_transform(img: &ImageBuffer, density: f64) -> Result<ImageBuffer> {
    if !(0.0..=1.0).contains(&density) {
        return Err(CoreError::invalid(format!("fog density {density} outside [0, 1]")));
    }
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(CHANNELS * h * w);
    for c in 0..CHANNELS {
        for row in 0..h {
            for col in 0..w {
                data.push((1.0 - density) * img.get(c, row, col) + density * FOG_COLOR[c]);
            }
        }
    }
    ImageBuffer::new(h, w, data)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable per-image RNG derived from the dataset seed, split id and image
/// index, so images can be (re)generated independently and in parallel.
fn image_rng(seed: u64, split_id: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(split_id ^ splitmix64(index))))
}

/// Bilinearly interpolated value-noise field in [-1, 1].
struct ValueNoise {
    cells_w: usize,
    grid: Vec<f64>,
    cell: f64,
}

impl ValueNoise {
    fn new(h: usize, w: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let cells_h = (h as f64 / cell).ceil() as usize + 2;
        let cells_w = (w as f64 / cell).ceil() as usize + 2;
        let grid = (0..cells_h * cells_w).map(|_| rng.random_range(-1.0..1.0)).collect();
        ValueNoise { cells_w, grid, cell }
    }

    fn sample(&self, row: usize, col: usize) -> f64 {
        let y = row as f64 / self.cell;
        let x = col as f64 / self.cell;
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let g = |r: usize, c: usize| self.grid[r * self.cells_w + c];
        let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
        let bot = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn render_background(size: usize, spec: &BackgroundSpec, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let coarse = ValueNoise::new(size, size, spec.texture_scale.max(2.0), rng);
    let fine = ValueNoise::new(size, size, (spec.texture_scale / 3.0).max(1.5), rng);
    let chroma: Vec<ValueNoise> = (0..CHANNELS)
        .map(|_| ValueNoise::new(size, size, spec.texture_scale.max(2.0), rng))
        .collect();
    let mut data = vec![0.0; CHANNELS * size * size];
    for row in 0..size {
        for col in 0..size {
            let lum = 0.7 * coarse.sample(row, col) + 0.3 * fine.sample(row, col);
            for c in 0..CHANNELS {
                let v = spec.base_color[c]
                    + spec.noise_amplitude * (0.75 * lum + 0.25 * chroma[c].sample(row, col));
                data[(c * size + row) * size + col] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(size, size, data).expect("background pixels are clamped")
}

/// Figure geometry and color jitter. Shared verbatim between domains: the
/// foreground distribution carries no domain information.
struct FigureParams {
    height: f64,
    body_rgb: [f64; 3],
    head_rgb: [f64; 3],
    leg_split: f64,
}

fn sample_figure(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> FigureParams {
    let height = rng.random_range(cfg.instance_height.0..=cfg.instance_height.1);
    // wide value range on purpose: dark figures keep silhouettes
    // in-distribution for the masking experiments
    let body_rgb = [
        rng.random_range(0.03..0.95),
        rng.random_range(0.03..0.95),
        rng.random_range(0.03..0.95),
    ];
    let head_rgb = [
        rng.random_range(0.25..0.9),
        rng.random_range(0.2..0.75),
        rng.random_range(0.15..0.7),
    ];
    let leg_split = rng.random_range(0.25..0.38);
    FigureParams {
        height,
        body_rgb,
        head_rgb,
        leg_split,
    }
}

/// Rasterize an ellipse-head + rectangle-body figure with a leg gap.
/// Returns the pixel set relative to the image grid.
fn rasterize_figure(size: usize, top: f64, left: f64, p: &FigureParams) -> BinaryMask {
    let mut mask = BinaryMask::empty(size, size);
    let h = p.height;
    let w = h * 0.38;
    let head_r = h * 0.14;
    let head_cx = left + w / 2.0;
    let head_cy = top + head_r;
    let body_top = top + 2.0 * head_r;
    let body_bottom = top + h;
    let leg_top = body_bottom - h * p.leg_split;
    let body_left = left + w * 0.08;
    let body_right = left + w * 0.92;
    let gap_half = w * 0.10;

    let row0 = (top - 0.5).floor().max(0.0) as usize;
    let row1 = ((top + h + 0.5).ceil() as usize).min(size);
    let col0 = (left - 0.5).floor().max(0.0) as usize;
    let col1 = ((left + w + 0.5).ceil() as usize).min(size);
    for row in row0..row1 {
        for col in col0..col1 {
            let px = col as f64 + 0.5;
            let py = row as f64 + 0.5;
            let in_head = {
                let dx = (px - head_cx) / head_r;
                let dy = (py - head_cy) / head_r;
                dx * dx + dy * dy <= 1.0
            };
            let in_torso = py >= body_top && py < leg_top && px >= body_left && px < body_right;
            let in_legs = py >= leg_top
                && py < body_bottom
                && px >= body_left
                && px < body_right
                && (px - head_cx).abs() > gap_half;
            if in_head || in_torso || in_legs {
                mask.set(row, col, true);
            }
        }
    }
    mask
}

fn tight_bbox(mask: &BinaryMask) -> Option<BBox> {
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    let mut any = false;
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            if mask.get(row, col) {
                any = true;
                rmin = rmin.min(row);
                rmax = rmax.max(row);
                cmin = cmin.min(col);
                cmax = cmax.max(col);
            }
        }
    }
    if !any {
        return None;
    }
    BBox::new(
        cmin as f64,
        rmin as f64,
        (cmax - cmin + 1) as f64,
        (rmax - rmin + 1) as f64,
    )
    .ok()
}

struct Occluder {
    row0: usize,
    row1: usize,
    col0: usize,
    col1: usize,
    rgb: [f64; 3],
}

impl Occluder {
    fn covers(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row1 && col >= self.col0 && col < self.col1
    }
}

/// Pick occluder rows from the bottom of the instance until the covered
/// mask fraction reaches `target`, so the stored occlusion is an exact
/// pixel ratio.
fn build_occluder(
    mask: &BinaryMask,
    bbox: &BBox,
    target: f64,
    bg: &BackgroundSpec,
    rng: &mut ChaCha8Rng,
) -> Option<Occluder> {
    let total = mask.count();
    if total == 0 {
        return None;
    }
    let row_top = bbox.y as usize;
    let row_bot = (bbox.bottom() as usize).min(mask.height());
    let mut covered = 0usize;
    let mut row0 = row_bot;
    for row in (row_top..row_bot).rev() {
        let in_row = (0..mask.width()).filter(|&c| mask.get(row, c)).count();
        if covered + in_row > (0.85 * total as f64) as usize {
            break;
        }
        covered += in_row;
        row0 = row;
        if covered as f64 >= target * total as f64 {
            break;
        }
    }
    if covered == 0 {
        return None;
    }
    let rgb = [
        (bg.base_color[0] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0),
        (bg.base_color[1] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0),
        (bg.base_color[2] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0),
    ];
    Some(Occluder {
        row0,
        row1: row_bot,
        col0: (bbox.x as usize).saturating_sub(1),
        col1: ((bbox.right() as usize) + 1).min(mask.width()),
        rgb,
    })
}

/// Render one image of one domain deterministically.
pub fn render_image(cfg: &SynthConfig, domain: DomainLabel, split_id: u64, index: u64) -> Result<SynthImage> {
    cfg.validate()?;
    let size = cfg.image_size;
    let domain_tag = match domain {
        DomainLabel::Source => 0x5,
        DomainLabel::Target => 0xA,
    };
    let mut rng = image_rng(cfg.seed, split_id.wrapping_mul(4).wrapping_add(domain_tag), index);

    let bg_spec = match domain {
        DomainLabel::Source => &cfg.source_background,
        DomainLabel::Target => &cfg.target_background,
    };
    let mut image = render_background(size, bg_spec, &mut rng);

    let n_instances = rng.random_range(cfg.instances_min..=cfg.instances_max);
    let mut masks: Vec<BinaryMask> = Vec::new();
    let mut bboxes: Vec<BBox> = Vec::new();
    let mut figures: Vec<FigureParams> = Vec::new();
    for _ in 0..n_instances {
        let mut placed = false;
        for _attempt in 0..1000 {
            let p = sample_figure(cfg, &mut rng);
            let w = p.height * 0.38;
            if p.height + 2.0 >= size as f64 {
                continue;
            }
            let top = rng.random_range(1.0..(size as f64 - p.height - 1.0));
            let left = rng.random_range(1.0..(size as f64 - w - 1.0));
            let mask = rasterize_figure(size, top, left, &p);
            let Some(bbox) = tight_bbox(&mask) else { continue };
            let overlaps = bboxes.iter().any(|b| b.intersection_area(&bbox) > 0.0);
            if overlaps {
                continue;
            }
            masks.push(mask);
            bboxes.push(bbox);
            figures.push(p);
            placed = true;
            break;
        }
        if !placed {
            if masks.len() >= cfg.instances_min {
                break;
            }
            return Err(CoreError::config(
                "could not place the minimum number of instances; lower the density",
            ));
        }
    }

    // paint figures (disjoint by construction)
    let mut id_map = vec![0u8; size * size];
    for (k, (mask, p)) in masks.iter().zip(&figures).enumerate() {
        let head_bottom = bboxes[k].y + 2.0 * p.height * 0.14;
        for row in 0..size {
            for col in 0..size {
                if mask.get(row, col) {
                    id_map[row * size + col] = (k + 1) as u8;
                    let rgb = if (row as f64 + 0.5) < head_bottom {
                        p.head_rgb
                    } else {
                        p.body_rgb
                    };
                    for c in 0..CHANNELS {
                        image.set(c, row, col, rgb[c]);
                    }
                }
            }
        }
    }

    // occluders: background-colored rectangles over the lower part
    let mut occluders = Vec::new();
    for k in 0..masks.len() {
        if rng.random::<f64>() < cfg.occlusion_rate {
            let target = rng.random_range(0.08..0.70);
            if let Some(occ) = build_occluder(&masks[k], &bboxes[k], target, bg_spec, &mut rng) {
                occluders.push(occ);
            }
        }
    }
    for occ in &occluders {
        for row in occ.row0..occ.row1 {
            for col in occ.col0..occ.col1 {
                for c in 0..CHANNELS {
                    image.set(c, row, col, occ.rgb[c]);
                }
                let cur = id_map[row * size + col];
                if cur > 0 && cur < OCCLUDED_ID_OFFSET {
                    id_map[row * size + col] = cur + OCCLUDED_ID_OFFSET;
                }
            }
        }
    }

    if domain == DomainLabel::Target && cfg.fog_density > 0.0 {
        image = fog_transform(&image, cfg.fog_density)?;
    }

    // exact occlusion fractions from the occluder rectangles; the id map
    // carries the same information (id k+129 marks occluded pixels)
    let mut instances = Vec::new();
    for (k, mask) in masks.iter().enumerate() {
        let total = mask.count();
        let mut occluded = 0usize;
        for row in 0..size {
            for col in 0..size {
                if mask.get(row, col) && occluders.iter().any(|o| o.covers(row, col)) {
                    debug_assert_eq!(id_map[row * size + col], (k + 1) as u8 + OCCLUDED_ID_OFFSET);
                    occluded += 1;
                }
            }
        }
        instances.push(SynthInstance {
            bbox: bboxes[k],
            mask: mask.clone(),
            occlusion: occluded as f64 / total as f64,
        });
    }

    Ok(SynthImage {
        image,
        instances,
        id_map,
    })
}

/// Mean RGB of the visible (unoccluded, unfogged-or-not: taken from the
/// final image) pixels of each instance, and of the background.
pub struct DomainStats {
    pub background_means: Vec<[f64; 3]>,
    pub foreground_means: Vec<[f64; 3]>,
}

pub fn collect_stats(images: &[SynthImage]) -> DomainStats {
    let mut background_means = Vec::new();
    let mut foreground_means = Vec::new();
    for si in images {
        let size = si.image.height();
        let mut bg_sum = [0.0; 3];
        let mut bg_n = 0usize;
        for row in 0..size {
            for col in 0..size {
                if si.id_map[row * size + col] == 0 {
                    for c in 0..CHANNELS {
                        bg_sum[c] += si.image.get(c, row, col);
                    }
                    bg_n += 1;
                }
            }
        }
        if bg_n > 0 {
            background_means.push([
                bg_sum[0] / bg_n as f64,
                bg_sum[1] / bg_n as f64,
                bg_sum[2] / bg_n as f64,
            ]);
        }
        for (k, inst) in si.instances.iter().enumerate() {
            // visible pixels only: occluded ones are background-colored
            let visible_id = (k + 1) as u8;
            let mut sum = [0.0; 3];
            let mut n = 0usize;
            for row in 0..size {
                for col in 0..size {
                    if inst.mask.get(row, col) && si.id_map[row * size + col] == visible_id {
                        for c in 0..CHANNELS {
                            sum[c] += si.image.get(c, row, col);
                        }
                        n += 1;
                    }
                }
            }
            if n > 0 {
                foreground_means.push([sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64]);
            }
        }
    }
    DomainStats {
        background_means,
        foreground_means,
    }
}

/// Nearest-centroid accuracy for separating two sets of RGB means.
/// This is the trivial pixel-histogram classifier used for the domain-gap
/// checks.
pub fn centroid_accuracy(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let centroid = |xs: &[[f64; 3]]| {
        let mut c = [0.0; 3];
        for x in xs {
            for k in 0..3 {
                c[k] += x[k];
            }
        }
        for v in c.iter_mut() {
            *v /= xs.len() as f64;
        }
        c
    };
    let ca = centroid(a);
    let cb = centroid(b);
    let d2 = |x: &[f64; 3], c: &[f64; 3]| {
        (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2)
    };
    let mut correct = 0usize;
    for x in a {
        if d2(x, &ca) <= d2(x, &cb) {
            correct += 1;
        }
    }
    for x in b {
        if d2(x, &cb) < d2(x, &ca) {
            correct += 1;
        }
    }
    correct as f64 / (a.len() + b.len()) as f64
}

const SPLIT_IDS: [(&str, DomainLabel, u64, bool); 4] = [
    ("source_train", DomainLabel::Source, 1, true),
    ("source_test", DomainLabel::Source, 2, false),
    ("target_train", DomainLabel::Target, 3, true),
    ("target_test", DomainLabel::Target, 4, false),
];

/// Generate the four splits under `out_dir`, write images, instance-id
/// mask PNGs and manifests, and run the domain-gap assertion on the train
/// splits. Fully deterministic given `cfg.seed`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    let mut manifests = Vec::new();
    let mut train_images: Vec<(DomainLabel, SynthImage)> = Vec::new();

    for (split_name, domain, split_id, is_train) in SPLIT_IDS {
        let count = if is_train { cfg.train_per_domain } else { cfg.test_per_domain };
        let img_dir = out_dir.join("images").join(split_name);
        let mask_dir = out_dir.join("masks").join(split_name);
        for d in [&img_dir, &mask_dir] {
            std::fs::create_dir_all(d).map_err(|source| CoreError::Io {
                path: d.clone(),
                source,
            })?;
        }

        let mut items = Vec::new();
        for index in 0..count {
            let si = render_image(cfg, domain, split_id, index as u64)?;
            let img_rel = PathBuf::from(format!("images/{split_name}/img_{index:04}.png"));
            let mask_rel = PathBuf::from(format!("masks/{split_name}/img_{index:04}.png"));
            si.image.save_png(&out_dir.join(&img_rel))?;
            save_id_map(&si.id_map, cfg.image_size, &out_dir.join(&mask_rel))?;
            items.push(ManifestItem {
                image: img_rel,
                domain,
                boxes: si
                    .instances
                    .iter()
                    .map(|i| [i.bbox.x, i.bbox.y, i.bbox.w, i.bbox.h])
                    .collect(),
                occlusion: si.instances.iter().map(|i| i.occlusion).collect(),
                ignore: vec![false; si.instances.len()],
                mask: Some(mask_rel),
            });
            if is_train {
                train_images.push((domain, si));
            } else {
                drop(si);
            }
        }
        let manifest = DatasetManifest {
            split: split_name.to_string(),
            items,
        };
        manifest.save(&out_dir.join(format!("{split_name}.json")))?;
        manifests.push(manifest);
    }

    assert_domain_gap(cfg, &train_images)?;
    Ok(manifests)
}

/// The defining property of the generated data: backgrounds separate the
/// domains almost perfectly while foregrounds do not.
fn assert_domain_gap(cfg: &SynthConfig, train_images: &[(DomainLabel, SynthImage)]) -> Result<()> {
    let src: Vec<&SynthImage> = train_images
        .iter()
        .filter(|(d, _)| *d == DomainLabel::Source)
        .map(|(_, s)| s)
        .collect();
    let tgt: Vec<&SynthImage> = train_images
        .iter()
        .filter(|(d, _)| *d == DomainLabel::Target)
        .map(|(_, s)| s)
        .collect();
    let src_stats = collect_stats(&src.iter().map(|s| (*s).clone()).collect::<Vec<_>>());
    let tgt_stats = collect_stats(&tgt.iter().map(|s| (*s).clone()).collect::<Vec<_>>());

    let bg_acc = centroid_accuracy(&src_stats.background_means, &tgt_stats.background_means);
    if bg_acc <= 0.95 {
        return Err(CoreError::config(format!(
            "domain gap check failed: background classifier accuracy {bg_acc:.3} <= 0.95"
        )));
    }
    // Fog shifts foreground statistics by design (atmospheric model), so
    // the foreground indistinguishability check only applies without fog.
    // Small sets make the accuracy estimate too coarse to gate on.
    let enough = src_stats.foreground_means.len() >= 40 && tgt_stats.foreground_means.len() >= 40;
    if cfg.fog_density == 0.0 && enough {
        let fg_acc = centroid_accuracy(&src_stats.foreground_means, &tgt_stats.foreground_means);
        if fg_acc >= 0.60 {
            return Err(CoreError::config(format!(
                "domain gap check failed: foreground classifier accuracy {fg_acc:.3} >= 0.60"
            )));
        }
    }
    Ok(())
}

fn save_id_map(id_map: &[u8], size: usize, path: &Path) -> Result<()> {
    let mut out = image::GrayImage::new(size as u32, size as u32);
    for row in 0..size {
        for col in 0..size {
            out.put_pixel(col as u32, row as u32, image::Luma([id_map[row * size + col]]));
        }
    }
    out.save(path).map_err(|source| CoreError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Split an instance-id mask PNG back into one full-extent binary mask
/// per instance (visible and occluded pixels both belong to the mask).
pub fn load_instance_masks(path: &Path, n_instances: usize) -> Result<Vec<BinaryMask>> {
    let img = image::open(path)
        .map_err(|source| CoreError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut masks = vec![BinaryMask::empty(h, w); n_instances];
    for (col, row, px) in img.enumerate_pixels() {
        let mut id = px.0[0] as usize;
        if id > OCCLUDED_ID_OFFSET as usize {
            id -= OCCLUDED_ID_OFFSET as usize;
        }
        if id > 0 && id <= n_instances {
            masks[id - 1].set(row as usize, col as usize, true);
        }
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_size: 96,
            train_per_domain: 6,
            test_per_domain: 3,
            instance_height: (16.0, 40.0),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn fog_identity_and_saturation() {
        let img = ImageBuffer::filled(4, 4, [0.0; 3]).unwrap();
        assert_eq!(fog_transform(&img, 0.0).unwrap(), img);
        let full = fog_transform(&img, 1.0).unwrap();
        assert!(full.data().iter().all(|v| (*v - 0.8).abs() < 1e-12));
        let half = fog_transform(&img, 0.5).unwrap();
        assert!(half.data().iter().all(|v| (*v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = small_cfg();
        let a = render_image(&cfg, DomainLabel::Target, 3, 7).unwrap();
        let b = render_image(&cfg, DomainLabel::Target, 3, 7).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.id_map, b.id_map);
        assert_eq!(a.instances.len(), b.instances.len());
    }

    #[test]
    fn instance_counts_within_bounds() {
        let cfg = small_cfg();
        for idx in 0..20 {
            let si = render_image(&cfg, DomainLabel::Source, 1, idx).unwrap();
            assert!(si.instances.len() >= cfg.instances_min);
            assert!(si.instances.len() <= cfg.instances_max);
        }
    }

    #[test]
    fn boxes_are_tight_and_masks_inside() {
        let cfg = small_cfg();
        let si = render_image(&cfg, DomainLabel::Source, 1, 3).unwrap();
        for inst in &si.instances {
            let recomputed = tight_bbox(&inst.mask).unwrap();
            assert_eq!(recomputed, inst.bbox);
            for row in 0..cfg.image_size {
                for col in 0..cfg.image_size {
                    if inst.mask.get(row, col) {
                        assert!(inst.bbox.contains_pixel(row, col));
                    }
                }
            }
        }
    }

    #[test]
    fn occlusion_fraction_matches_id_map_recount() {
        let cfg = SynthConfig {
            occlusion_rate: 1.0,
            ..small_cfg()
        };
        let mut saw_occluded = false;
        for idx in 0..10 {
            let si = render_image(&cfg, DomainLabel::Source, 1, idx).unwrap();
            let size = cfg.image_size;
            for (k, inst) in si.instances.iter().enumerate() {
                let occluded_id = (k + 1) as u8 + OCCLUDED_ID_OFFSET;
                let mut occluded = 0usize;
                let mut total = 0usize;
                for row in 0..size {
                    for col in 0..size {
                        if inst.mask.get(row, col) {
                            total += 1;
                            if si.id_map[row * size + col] == occluded_id {
                                occluded += 1;
                            }
                        }
                    }
                }
                assert_abs_diff_eq!(
                    inst.occlusion,
                    occluded as f64 / total as f64,
                    epsilon = 0.0
                );
                if inst.occlusion > 0.0 {
                    saw_occluded = true;
                }
            }
        }
        assert!(saw_occluded, "occlusion rate 1.0 produced no occluded instance");
    }

    #[test]
    fn generated_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let manifests = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifests.len(), 4);
        assert_eq!(manifests[0].split, "source_train");
        assert_eq!(manifests[0].items.len(), cfg.train_per_domain);
        assert_eq!(manifests[1].items.len(), cfg.test_per_domain);

        // reload through the manifest machinery
        let loaded = DatasetManifest::load(&dir.path().join("target_train.json")).unwrap();
        assert_eq!(loaded, manifests[2]);
        let item = &loaded.items[0];
        let masks = load_instance_masks(
            &DatasetManifest::resolve(&dir.path().join("target_train.json"), item.mask.as_ref().unwrap()),
            item.boxes.len(),
        )
        .unwrap();
        assert_eq!(masks.len(), item.boxes.len());
        for (mask, b) in masks.iter().zip(&item.boxes) {
            assert!(mask.count() > 0);
            let bbox = BBox::new(b[0], b[1], b[2], b[3]).unwrap();
            let tight = tight_bbox(mask).unwrap();
            assert_eq!(tight, bbox);
        }
    }

    #[test]
    fn same_seed_same_files() {
        let cfg = small_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, d1.path()).unwrap();
        generate_dataset(&cfg, d2.path()).unwrap();
        let bytes1 = std::fs::read(d1.path().join("images/source_train/img_0000.png")).unwrap();
        let bytes2 = std::fs::read(d2.path().join("images/source_train/img_0000.png")).unwrap();
        assert_eq!(bytes1, bytes2);
        let m1 = std::fs::read_to_string(d1.path().join("source_train.json")).unwrap();
        let m2 = std::fs::read_to_string(d2.path().join("source_train.json")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn domain_gap_holds_on_larger_sample() {
        let cfg = SynthConfig {
            image_size: 64,
            instance_height: (14.0, 30.0),
            ..SynthConfig::default()
        };
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for idx in 0..60 {
            src.push(render_image(&cfg, DomainLabel::Source, 1, idx).unwrap());
            tgt.push(render_image(&cfg, DomainLabel::Target, 3, idx).unwrap());
        }
        let ss = collect_stats(&src);
        let ts = collect_stats(&tgt);
        let bg_acc = centroid_accuracy(&ss.background_means, &ts.background_means);
        let fg_acc = centroid_accuracy(&ss.foreground_means, &ts.foreground_means);
        assert!(bg_acc > 0.95, "background accuracy {bg_acc}");
        assert!(fg_acc < 0.60, "foreground accuracy {fg_acc}");
    }
}
