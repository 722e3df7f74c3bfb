//! Synthetic image generator: colored geometric objects at controllable
//! position and scale over textured gray backgrounds. Every image is a pure
//! function of (catalog version, dataset seed, class, item index), so a run
//! is reproducible from its configuration alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CecError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frame side length in pixels.
pub const IMAGE_SIZE: usize = 32;

/// Object diameter range as a fraction of the frame.
pub const SCALE_RANGE: (f64, f64) = (0.2, 0.8);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Ring,
    Shape::Cross,
    Shape::Diamond,
];

const COLORS: [[f64; 3]; 5] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.20],
    [0.85, 0.20, 0.80],
];

/// Where and how large the object was drawn: center pixel coordinates and
/// the diameter as a fraction of the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub center_x: f64,
    pub center_y: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementPolicy {
    /// Object centroid at the frame center.
    Centered,
    /// Center uniform over all positions keeping the object inside the
    /// frame; scale uniform over the full range.
    Uniform,
}

/// One generated frame: RGB pixels in [0, 1] (channel-major, 3 x H x W),
/// the class, the exact object mask, and the placement that produced it.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub pixels: Vec<f64>,
    pub class_id: usize,
    pub object_mask: Vec<bool>,
    pub placement: Placement,
}

impl SynthImage {
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.pixels.iter().map(|&v| S::from_f64_c(v)).collect();
        Tensor::constant(vec![3, IMAGE_SIZE, IMAGE_SIZE], data).expect("pixel buffer")
    }

    /// Interleaved 8-bit RGB rows for file export.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = IMAGE_SIZE * IMAGE_SIZE;
        let mut out = Vec::with_capacity(hw * 3);
        for p in 0..hw {
            for ch in 0..3 {
                let v = (self.pixels[ch * hw + p] * 255.0).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
        out
    }

    pub fn mask_centroid(&self) -> (f64, f64) {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut count = 0.0;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if self.object_mask[y * IMAGE_SIZE + x] {
                    sx += x as f64;
                    sy += y as f64;
                    count += 1.0;
                }
            }
        }
        (sx / count, sy / count)
    }
}

/// Class catalog: a shape-color grid split into disjoint base and novel
/// halves so that every shape and every color appears in the base split but
/// no novel combination does.
#[derive(Debug, Clone)]
pub struct Catalog {
    version: String,
    base: Vec<usize>,
    novel: Vec<usize>,
}

impl Catalog {
    pub fn v1() -> Self {
        let mut base = Vec::new();
        let mut novel = Vec::new();
        for class_id in 0..SHAPES.len() * COLORS.len() {
            let (s, c) = (class_id / COLORS.len(), class_id % COLORS.len());
            if c % 3 == s % 3 {
                novel.push(class_id);
            } else {
                base.push(class_id);
            }
        }
        Catalog { version: "v1".to_string(), base, novel }
    }

    pub fn parse(version: &str) -> Result<Self> {
        match version {
            "v1" => Ok(Self::v1()),
            other => Err(CecError::Configuration(format!(
                "unknown catalog version '{other}'"
            ))),
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn total_classes(&self) -> usize {
        SHAPES.len() * COLORS.len()
    }

    pub fn base_classes(&self) -> &[usize] {
        &self.base
    }

    pub fn novel_classes(&self) -> &[usize] {
        &self.novel
    }

    fn shape_color(&self, class_id: usize) -> Result<(Shape, [f64; 3])> {
        if class_id >= self.total_classes() {
            return Err(CecError::Data(format!(
                "class {class_id} not in catalog of {} classes",
                self.total_classes()
            )));
        }
        Ok((
            SHAPES[class_id / COLORS.len()],
            COLORS[class_id % COLORS.len()],
        ))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic stream id from several seed components.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x243f6a8885a308d3;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

fn inside_shape(shape: Shape, dx: f64, dy: f64, half: f64) -> bool {
    match shape {
        Shape::Disk => dx * dx + dy * dy <= half * half,
        Shape::Square => dx.abs() <= half * 0.88 && dy.abs() <= half * 0.88,
        Shape::Triangle => {
            // vertices (0, -half), (+-0.95 half, half/2); centroid at origin
            if dy < -half || dy > half / 2.0 {
                return false;
            }
            let t = (dy + half) / (1.5 * half);
            dx.abs() <= 0.95 * half * t
        }
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= half * half && d2 >= (0.55 * half) * (0.55 * half)
        }
        Shape::Cross => {
            (dx.abs() <= 0.33 * half && dy.abs() <= half)
                || (dy.abs() <= 0.33 * half && dx.abs() <= half)
        }
        Shape::Diamond => dx.abs() + dy.abs() <= half,
    }
}

/// Generate one image. Deterministic in all arguments.
pub fn gen_image(
    catalog: &Catalog,
    class_id: usize,
    rng_seed: u64,
    policy: PlacementPolicy,
) -> Result<SynthImage> {
    let (shape, color) = catalog.shape_color(class_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n = IMAGE_SIZE;
    let size = n as f64;

    // cluttered background: a coarse per-channel bilinear color field over a
    // mid gray, plus speckle. Background colors are random per image, so
    // pooled features pick up color noise while object colors stay the only
    // class-consistent signal.
    let base: f64 = rng.gen_range(0.42..0.54);
    const GRID: usize = 5;
    let mut field = [[[0.0f64; 3]; GRID]; GRID];
    for row in field.iter_mut() {
        for cell in row.iter_mut() {
            for v in cell.iter_mut() {
                *v = rng.gen_range(-0.30..0.30);
            }
        }
    }
    let sample_field = |x: f64, y: f64, ch: usize| -> f64 {
        let gx = x / size * (GRID - 1) as f64;
        let gy = y / size * (GRID - 1) as f64;
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let (ix1, iy1) = ((ix + 1).min(GRID - 1), (iy + 1).min(GRID - 1));
        let top = field[iy][ix][ch] * (1.0 - fx) + field[iy][ix1][ch] * fx;
        let bot = field[iy1][ix][ch] * (1.0 - fx) + field[iy1][ix1][ch] * fx;
        top * (1.0 - fy) + bot * fy
    };

    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let half = scale * size / 2.0;
    let (cx, cy) = match policy {
        PlacementPolicy::Centered => ((size - 1.0) / 2.0, (size - 1.0) / 2.0),
        PlacementPolicy::Uniform => {
            let lo = half;
            let hi = size - 1.0 - half;
            (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
        }
    };

    let mut pixels = vec![0.0; 3 * n * n];
    let mut mask = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let speckle: f64 = rng.gen_range(-0.05..0.05);
            let inside = inside_shape(shape, x as f64 - cx, y as f64 - cy, half);
            mask[p] = inside;
            let jitter: f64 = rng.gen_range(-0.04..0.04);
            for ch in 0..3 {
                let mut v = if inside {
                    color[ch] + jitter
                } else {
                    base + sample_field(x as f64, y as f64, ch) + speckle
                };
                v = v.clamp(0.0, 1.0);
                pixels[ch * n * n + p] = v;
            }
        }
    }
    debug_assert!(mask.iter().any(|&m| m), "object never left the frame empty");
    Ok(SynthImage {
        pixels,
        class_id,
        object_mask: mask,
        placement: Placement { center_x: cx, center_y: cy, scale },
    })
}

/// Exact quarter-turn rotation of pixels and mask, counterclockwise.
pub fn rotate_image(img: &SynthImage, quarter_turns: u8) -> SynthImage {
    let n = IMAGE_SIZE;
    let turns = quarter_turns % 4;
    let mut out = img.clone();
    for _ in 0..turns {
        let src = out.pixels.clone();
        let src_mask = out.object_mask.clone();
        for y in 0..n {
            for x in 0..n {
                // destination (y, x) takes source (x, n-1-y)
                let from = x * n + (n - 1 - y);
                let to = y * n + x;
                for ch in 0..3 {
                    out.pixels[ch * n * n + to] = src[ch * n * n + from];
                }
                out.object_mask[to] = src_mask[from];
            }
        }
        let Placement { center_x, center_y, .. } = out.placement;
        out.placement.center_x = center_y;
        out.placement.center_y = (n - 1) as f64 - center_x;
    }
    out
}

/// Lazy dataset: items are regenerated on demand from the seed, never
/// stored. `item(class, idx)` is deterministic and position-independent.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub seed: u64,
    pub catalog: Catalog,
    pub items_per_class: usize,
}

impl SynthDataset {
    pub fn new(seed: u64, catalog: Catalog, items_per_class: usize) -> Self {
        SynthDataset { seed, catalog, items_per_class }
    }

    pub fn item(&self, class_id: usize, index: usize) -> Result<SynthImage> {
        if index >= self.items_per_class {
            return Err(CecError::Data(format!(
                "item index {index} out of range 0..{}",
                self.items_per_class
            )));
        }
        let seed = mix_seed(&[self.seed, class_id as u64, index as u64]);
        gen_image(&self.catalog, class_id, seed, PlacementPolicy::Uniform)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_split_is_disjoint_and_covering() {
        let cat = Catalog::v1();
        assert_eq!(cat.base_classes().len(), 20);
        assert_eq!(cat.novel_classes().len(), 10);
        for c in cat.novel_classes() {
            assert!(!cat.base_classes().contains(c));
        }
        // every shape and color appears somewhere in the base split
        for s in 0..SHAPES.len() {
            assert!(cat.base_classes().iter().any(|c| c / COLORS.len() == s));
        }
        for col in 0..COLORS.len() {
            assert!(cat.base_classes().iter().any(|c| c % COLORS.len() == col));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cat = Catalog::v1();
        let a = gen_image(&cat, 3, 42, PlacementPolicy::Uniform).unwrap();
        let b = gen_image(&cat, 3, 42, PlacementPolicy::Uniform).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.object_mask, b.object_mask);
    }

    #[test]
    fn centered_policy_centroid_near_center() {
        let cat = Catalog::v1();
        for class in [0, 7, 13, 22, 29] {
            for seed in 0..8 {
                let img = gen_image(&cat, class, seed, PlacementPolicy::Centered).unwrap();
                let (cx, cy) = img.mask_centroid();
                let mid = (IMAGE_SIZE as f64 - 1.0) / 2.0;
                assert!(
                    (cx - mid).abs() <= 1.0 && (cy - mid).abs() <= 1.0,
                    "class {class} seed {seed} centroid ({cx:.2}, {cy:.2})"
                );
            }
        }
    }

    #[test]
    fn uniform_policy_spreads_centroids() {
        let cat = Catalog::v1();
        let mut min_x = f64::MAX;
        let mut max_x = f64::MIN;
        let mut min_y = f64::MAX;
        let mut max_y = f64::MIN;
        for seed in 0..1000 {
            let img = gen_image(&cat, (seed % 30) as usize, seed, PlacementPolicy::Uniform)
                .unwrap();
            let (cx, cy) = img.mask_centroid();
            min_x = min_x.min(cx);
            max_x = max_x.max(cx);
            min_y = min_y.min(cy);
            max_y = max_y.max(cy);
        }
        let span = IMAGE_SIZE as f64;
        assert!(max_x - min_x >= 0.6 * span, "x spread {:.1}", max_x - min_x);
        assert!(max_y - min_y >= 0.6 * span, "y spread {:.1}", max_y - min_y);
    }

    #[test]
    fn object_stays_inside_frame() {
        let cat = Catalog::v1();
        for seed in 0..200 {
            let img = gen_image(&cat, (seed % 30) as usize, seed, PlacementPolicy::Uniform)
                .unwrap();
            for x in 0..IMAGE_SIZE {
                assert!(!img.object_mask[x], "mask touches top edge");
                assert!(
                    !img.object_mask[(IMAGE_SIZE - 1) * IMAGE_SIZE + x],
                    "mask touches bottom edge"
                );
                assert!(!img.object_mask[x * IMAGE_SIZE], "mask touches left edge");
                assert!(
                    !img.object_mask[x * IMAGE_SIZE + IMAGE_SIZE - 1],
                    "mask touches right edge"
                );
            }
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let cat = Catalog::v1();
        let img = gen_image(&cat, 5, 7, PlacementPolicy::Uniform).unwrap();
        let back = rotate_image(&img, 4);
        assert_eq!(img.pixels, back.pixels);
        assert_eq!(img.object_mask, back.object_mask);

        let twice_twice = rotate_image(&rotate_image(&img, 2), 2);
        assert_eq!(img.pixels, twice_twice.pixels);

        let once = rotate_image(&img, 1);
        let undone = rotate_image(&once, 3);
        assert_eq!(img.pixels, undone.pixels);
    }

    #[test]
    fn unknown_class_is_a_data_error() {
        let cat = Catalog::v1();
        assert!(matches!(
            gen_image(&cat, 30, 0, PlacementPolicy::Uniform),
            Err(CecError::Data(_))
        ));
    }
}
