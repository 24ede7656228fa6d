//! Procedural texture families with injected defects, standing in for real
//! inspection imagery.
//!
//! Every texture is kept inside `[0.2, 0.85]` so that the dark (hole, crack,
//! missing corner) and bright (scratch) defect values never coincide with an
//! undamaged pixel. The ground-truth mask is computed as the set of pixels
//! whose quantised value changed.

mod manifest;
pub mod similarity;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError, Mask};
use crate::seed;

pub use manifest::{read_dataset, read_manifest, write_dataset, write_manifest, ManifestRecord};
pub use similarity::{bhattacharyya, histogram, select_reference, ssim, HIST_BINS};

pub const IMAGE_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("unknown defect type {0:?}")]
    UnknownDefect(String),
    #[error("unknown size class {0:?}")]
    UnknownSize(String),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("reference pool is empty")]
    EmptyPool,
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

macro_rules! named_enum {
    ($ty:ident, $err:ident, $( $var:ident => $name:literal ),+ $(,)?) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),+];

            pub fn name(self) -> &'static str {
                match self { $($ty::$var => $name),+ }
            }
        }

        impl FromStr for $ty {
            type Err = SynthError;

            fn from_str(s: &str) -> Result<Self, SynthError> {
                match s {
                    $($name => Ok($ty::$var),)+
                    _ => Err(SynthError::$err(s.to_owned())),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Stripes,
    Checker,
    Blobs,
    Bottle,
    Mesh,
    Speckle,
}

named_enum!(Category, UnknownCategory,
    Stripes => "stripes",
    Checker => "checker",
    Blobs => "blobs",
    Bottle => "bottle",
    Mesh => "mesh",
    Speckle => "speckle",
);

impl Category {
    /// Object noun used in instructions and annotations.
    pub fn noun(self) -> &'static str {
        match self {
            Category::Stripes => "striped fabric",
            Category::Checker => "checkered tile",
            Category::Blobs => "mottled surface",
            Category::Bottle => "bottle",
            Category::Mesh => "wire mesh",
            Category::Speckle => "speckled stone",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectType {
    Hole,
    Scratch,
    Spot,
    CrackLine,
    MissingCorner,
}

named_enum!(DefectType, UnknownDefect,
    Hole => "hole",
    Scratch => "scratch",
    Spot => "spot",
    CrackLine => "crack_line",
    MissingCorner => "missing_corner",
);

impl DefectType {
    pub fn phrase(self) -> &'static str {
        match self {
            DefectType::Hole => "hole",
            DefectType::Scratch => "scratch",
            DefectType::Spot => "spot",
            DefectType::CrackLine => "crack",
            DefectType::MissingCorner => "missing corner",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

named_enum!(SizeClass, UnknownSize,
    Small => "small",
    Medium => "medium",
    Large => "large",
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Unseen,
}

named_enum!(Split, UnknownSplit,
    Seen => "seen",
    Unseen => "unseen",
);

/// Cell of the 3×3 grid over the image, `(row, col)` with row 0 at the top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Location {
    pub row: u8,
    pub col: u8,
}

const LOCATION_PHRASES: [[&str; 3]; 3] = [
    ["upper left", "upper", "upper right"],
    ["left", "center", "right"],
    ["lower left", "lower", "lower right"],
];

impl Location {
    pub fn all() -> impl Iterator<Item = Location> {
        (0..3).flat_map(|row| (0..3).map(move |col| Location { row, col }))
    }

    pub fn from_point(y: f64, x: f64, size: usize) -> Self {
        let cell = |v: f64| ((v * 3.0 / size as f64).floor() as i64).clamp(0, 2) as u8;
        Location {
            row: cell(y),
            col: cell(x),
        }
    }

    pub fn phrase(self) -> &'static str {
        LOCATION_PHRASES[self.row as usize][self.col as usize]
    }

    pub fn from_phrase(s: &str) -> Option<Self> {
        Location::all().find(|l| l.phrase() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DefectMeta {
    pub defect: DefectType,
    pub size: SizeClass,
    pub location: Location,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub category: Category,
    pub split: Split,
    /// Seed of the defect-free render.
    pub texture_seed: u64,
    pub image: Image,
    pub mask: Mask,
    pub meta: Option<DefectMeta>,
}

impl SynthSample {
    pub fn is_anomalous(&self) -> bool {
        self.meta.is_some()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn render(f: impl Fn(f64, f64) -> f64) -> Image {
    let n = IMAGE_SIZE;
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            data.push(f(y as f64 + 0.5, x as f64 + 0.5).clamp(0.2, 0.85));
        }
    }
    Image::new(n, n, data).expect("in range").quantized()
}

fn noise_field(rng: &mut ChaCha8Rng, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..IMAGE_SIZE * IMAGE_SIZE).map(|_| dist.sample(rng)).collect()
}

/// Renders the defect-free image of `category`, deterministic in `seed`.
pub fn generate_texture_image(category: Category, seed: u64) -> Image {
    let mut rng = seed::rng(seed, &[seed::str_key(category.name())]);
    let n = IMAGE_SIZE;
    let at = |field: &[f64], y: f64, x: f64| field[y as usize * n + x as usize];
    match category {
        Category::Stripes => {
            let base = uniform(&mut rng, 0.42, 0.6);
            let amp = uniform(&mut rng, 0.1, 0.17);
            let freq = uniform(&mut rng, 3.0, 7.0);
            let theta = uniform(&mut rng, 0.0, PI);
            let phase = uniform(&mut rng, 0.0, 2.0 * PI);
            let noise = noise_field(&mut rng, 0.015);
            let (c, s) = (theta.cos(), theta.sin());
            render(|y, x| {
                let t = (x * c + y * s) / n as f64;
                base + amp * (2.0 * PI * freq * t + phase).sin() + at(&noise, y, x)
            })
        }
        Category::Checker => {
            let cell = rng.random_range(6..=12) as f64;
            let (oy, ox) = (uniform(&mut rng, 0.0, cell), uniform(&mut rng, 0.0, cell));
            let base = uniform(&mut rng, 0.42, 0.6);
            let amp = uniform(&mut rng, 0.07, 0.12);
            let noise = noise_field(&mut rng, 0.015);
            render(|y, x| {
                let parity = ((y + oy) / cell).floor() as i64 + ((x + ox) / cell).floor() as i64;
                let sign = if parity.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                base + sign * amp + at(&noise, y, x)
            })
        }
        Category::Blobs => {
            let base = uniform(&mut rng, 0.45, 0.6);
            let k = rng.random_range(6..=10);
            let bumps: Vec<(f64, f64, f64, f64)> = (0..k)
                .map(|_| {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (
                        uniform(&mut rng, 0.0, n as f64),
                        uniform(&mut rng, 0.0, n as f64),
                        sign * uniform(&mut rng, 0.06, 0.14),
                        uniform(&mut rng, 5.0, 11.0),
                    )
                })
                .collect();
            let noise = noise_field(&mut rng, 0.01);
            render(|y, x| {
                let mut v = base + at(&noise, y, x);
                for &(cy, cx, a, s) in &bumps {
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    v += a * (-d2 / (2.0 * s * s)).exp();
                }
                v
            })
        }
        Category::Bottle => {
            let bg = uniform(&mut rng, 0.25, 0.32);
            let hi = uniform(&mut rng, 0.65, 0.8);
            let cy = n as f64 / 2.0 + uniform(&mut rng, -3.0, 3.0);
            let cx = n as f64 / 2.0 + uniform(&mut rng, -3.0, 3.0);
            let radius = uniform(&mut rng, 22.0, 28.0);
            let noise = noise_field(&mut rng, 0.01);
            render(|y, x| {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / radius;
                let v = if d <= 1.0 { hi - 0.18 * d * d } else { bg };
                v + at(&noise, y, x)
            })
        }
        Category::Mesh => {
            let base = uniform(&mut rng, 0.55, 0.7);
            let pitch = rng.random_range(7..=11) as f64;
            let width = rng.random_range(1..=2) as f64;
            let depth = uniform(&mut rng, 0.15, 0.22);
            let (oy, ox) = (uniform(&mut rng, 0.0, pitch), uniform(&mut rng, 0.0, pitch));
            let noise = noise_field(&mut rng, 0.01);
            render(|y, x| {
                let on = (y + oy).rem_euclid(pitch) < width || (x + ox).rem_euclid(pitch) < width;
                base - if on { depth } else { 0.0 } + at(&noise, y, x)
            })
        }
        Category::Speckle => {
            let base = uniform(&mut rng, 0.45, 0.6);
            let raw = noise_field(&mut rng, 0.12);
            let mut smooth = vec![0.0; n * n];
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for yy in y.saturating_sub(1)..(y + 2).min(n) {
                        for xx in x.saturating_sub(1)..(x + 2).min(n) {
                            acc += raw[yy * n + xx];
                            cnt += 1.0;
                        }
                    }
                    smooth[y * n + x] = acc / cnt;
                }
            }
            render(|y, x| base + at(&smooth, y, x))
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dy).powi(2) + (p.1 - a.1 - t * dx).powi(2)).sqrt()
}

fn polyline_distance(p: (f64, f64), pts: &[(f64, f64)]) -> f64 {
    pts.windows(2)
        .map(|w| segment_distance(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Random walk of `segments` pieces of total length `length`, placed so that
/// it fits inside the image with a margin.
fn random_polyline(
    rng: &mut ChaCha8Rng,
    length: f64,
    segments: usize,
    bend: f64,
) -> Vec<(f64, f64)> {
    let n = IMAGE_SIZE as f64;
    let step = length / segments as f64;
    let mut heading = uniform(rng, 0.0, 2.0 * PI);
    let mut pts = vec![(0.0, 0.0)];
    for _ in 0..segments {
        let &(y, x) = pts.last().expect("nonempty");
        pts.push((y + step * heading.sin(), x + step * heading.cos()));
        heading += uniform(rng, -bend, bend);
    }
    let (min_y, max_y) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_x, max_x) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let margin = 4.0;
    let sy = uniform(rng, margin - min_y, (n - margin - max_y).max(margin - min_y + 1e-9));
    let sx = uniform(rng, margin - min_x, (n - margin - max_x).max(margin - min_x + 1e-9));
    pts.into_iter().map(|(y, x)| (y + sy, x + sx)).collect()
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn by_size(size: SizeClass, small: (f64, f64), medium: (f64, f64), large: (f64, f64)) -> (f64, f64) {
    match size {
        SizeClass::Small => small,
        SizeClass::Medium => medium,
        SizeClass::Large => large,
    }
}

/// Paints one defect of type `defect` onto `img`. The size class is drawn
/// from `seed`. Returns the damaged image, the changed-pixel mask and the
/// metadata, with the location taken from the mask centroid.
pub fn inject_defect(
    img: &Image,
    category: Category,
    defect: DefectType,
    seed: u64,
) -> (Image, Mask, DefectMeta) {
    let mut rng = seed::rng(seed, &[seed::str_key(defect.name())]);
    let size = pick(&mut rng, SizeClass::ALL);
    inject_defect_sized(img, category, defect, size, &mut rng)
}

pub fn inject_defect_sized(
    img: &Image,
    category: Category,
    defect: DefectType,
    size: SizeClass,
    rng: &mut ChaCha8Rng,
) -> (Image, Mask, DefectMeta) {
    let n = IMAGE_SIZE as f64;
    loop {
        let mut out = img.clone();
        // Per-pixel replacement rule: `Some(new)` inside the defect.
        let paint: Box<dyn Fn(f64, f64, f64) -> Option<f64>> = match defect {
            DefectType::Hole => {
                let (lo, hi) = by_size(size, (3.0, 4.0), (5.0, 6.5), (7.5, 9.0));
                let r = uniform(rng, lo, hi);
                let cy = uniform(rng, r + 2.0, n - r - 2.0);
                let cx = uniform(rng, r + 2.0, n - r - 2.0);
                let depth = uniform(rng, 0.03, 0.1);
                Box::new(move |y, x, _| {
                    let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    (d <= r).then(|| depth + 0.04 * d / r)
                })
            }
            DefectType::Spot => {
                let (lo, hi) = by_size(size, (3.0, 4.5), (5.5, 7.0), (8.0, 10.0));
                let a = uniform(rng, lo, hi);
                let b = a * uniform(rng, 0.6, 1.0);
                let cy = uniform(rng, a + 2.0, n - a - 2.0);
                let cx = uniform(rng, a + 2.0, n - a - 2.0);
                let theta = uniform(rng, 0.0, PI);
                let (c, s) = (theta.cos(), theta.sin());
                let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
                let shift = if mean > 0.5 { -0.32 } else { 0.32 };
                Box::new(move |y, x, old| {
                    let (dy, dx) = (y - cy, x - cx);
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    ((u / a).powi(2) + (v / b).powi(2) <= 1.0).then(|| old + shift)
                })
            }
            DefectType::Scratch | DefectType::CrackLine => {
                let (lo, hi) = by_size(size, (14.0, 20.0), (24.0, 32.0), (36.0, 46.0));
                let length = uniform(rng, lo, hi);
                let (segments, bend, value) = if defect == DefectType::Scratch {
                    (2, 0.35, uniform(rng, 0.92, 1.0))
                } else {
                    (5, 0.9, uniform(rng, 0.04, 0.12))
                };
                let half = match size {
                    SizeClass::Small => 1.5,
                    SizeClass::Medium => 1.75,
                    SizeClass::Large => 2.0,
                };
                let pts = random_polyline(rng, length, segments, bend);
                Box::new(move |y, x, _| (polyline_distance((y, x), &pts) <= half).then_some(value))
            }
            DefectType::MissingCorner => {
                let (lo, hi) = by_size(size, (10.0, 13.0), (15.0, 19.0), (21.0, 26.0));
                let leg = uniform(rng, lo, hi);
                let corner = rng.random_range(0..4u8);
                Box::new(move |y, x, _| {
                    let cy = if corner & 1 == 0 { y } else { n - y };
                    let cx = if corner & 2 == 0 { x } else { n - x };
                    (cy + cx <= leg).then_some(0.0)
                })
            }
        };
        let mut mask = Mask::empty(IMAGE_SIZE, IMAGE_SIZE);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let old = img.get(y, x);
                if let Some(v) = paint(y as f64 + 0.5, x as f64 + 0.5, old) {
                    out.set(y, x, v);
                    if out.get(y, x) != old {
                        mask.set(y, x, true);
                    }
                }
            }
        }
        if let Some((cy, cx)) = mask.centroid() {
            let meta = DefectMeta {
                defect,
                size,
                location: Location::from_point(cy + 0.5, cx + 0.5, IMAGE_SIZE),
                category,
            };
            return (out, mask, meta);
        }
    }
}

/// Sample `index` of `category`: odd indices are anomalous.
pub fn generate_sample(category: Category, split: Split, index: usize, base_seed: u64) -> SynthSample {
    let texture_seed = seed::derive(base_seed, &[seed::str_key(category.name()), index as u64]);
    let clean = generate_texture_image(category, texture_seed);
    let id = format!("{}_{:04}", category.name(), index);
    let (image, mask, meta) = if index % 2 == 1 {
        let mut rng = seed::rng(texture_seed, &[1]);
        let defect = pick(&mut rng, DefectType::ALL);
        let (img, mask, meta) = inject_defect(&clean, category, defect, rng.random());
        (img, mask, Some(meta))
    } else {
        (clean, Mask::empty(IMAGE_SIZE, IMAGE_SIZE), None)
    };
    SynthSample {
        id,
        category,
        split,
        texture_seed,
        image,
        mask,
        meta,
    }
}

/// Seen/unseen category partition and per-category counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seen: Vec<Category>,
    pub unseen: Vec<Category>,
    pub per_seen: usize,
    pub per_unseen: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seen: vec![Category::Stripes, Category::Checker, Category::Speckle],
            unseen: vec![Category::Blobs],
            per_seen: 400,
            per_unseen: 100,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn split_of(&self, c: Category) -> Option<Split> {
        if self.seen.contains(&c) {
            Some(Split::Seen)
        } else if self.unseen.contains(&c) {
            Some(Split::Unseen)
        } else {
            None
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Vec<SynthSample> {
    let seen = spec.seen.iter().map(|&c| (c, Split::Seen, spec.per_seen));
    let unseen = spec.unseen.iter().map(|&c| (c, Split::Unseen, spec.per_unseen));
    seen.chain(unseen)
        .flat_map(|(c, split, count)| (0..count).map(move |i| generate_sample(c, split, i, spec.seed)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_finite() {
        for &c in Category::ALL {
            let a = generate_texture_image(c, 11);
            assert_eq!(a, generate_texture_image(c, 11));
            assert!(a.data().iter().all(|v| v.is_finite() && (0.2..=0.85).contains(v)));
        }
        assert!("plaid".parse::<Category>().is_err());
    }

    #[test]
    fn different_seeds_differ_in_over_one_percent() {
        for &c in Category::ALL {
            for s in 0..100u64 {
                let a = generate_texture_image(c, s);
                let b = generate_texture_image(c, s + 1000);
                let diff = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
                assert!(diff * 100 > a.data().len(), "{c} seed {s}");
            }
        }
    }

    #[test]
    fn defect_mask_is_exactly_the_changed_set() {
        for &c in Category::ALL {
            for &d in DefectType::ALL {
                for s in 0..6 {
                    let clean = generate_texture_image(c, s);
                    let (img, mask, meta) = inject_defect(&clean, c, d, s * 31 + 5);
                    assert!(!mask.is_empty());
                    for y in 0..IMAGE_SIZE {
                        for x in 0..IMAGE_SIZE {
                            assert_eq!(mask.get(y, x), img.get(y, x) != clean.get(y, x));
                        }
                    }
                    let (cy, cx) = mask.centroid().unwrap();
                    assert_eq!(meta.location, Location::from_point(cy + 0.5, cx + 0.5, IMAGE_SIZE));
                }
            }
        }
    }

    #[test]
    fn centroid_cell_names() {
        assert_eq!(Location::from_point(5.0, 5.0, 64).phrase(), "upper left");
        assert_eq!(Location::from_point(32.0, 32.0, 64).phrase(), "center");
        assert_eq!(Location::from_point(60.0, 30.0, 64).phrase(), "lower");
        assert_eq!(Location::from_point(30.0, 63.9, 64).phrase(), "right");
        for l in Location::all() {
            assert_eq!(Location::from_phrase(l.phrase()), Some(l));
        }
    }

    #[test]
    fn hole_in_top_left_cell_is_upper_left() {
        let clean = generate_texture_image(Category::Bottle, 3);
        let mut found = false;
        for s in 0..200 {
            let (_, mask, meta) = inject_defect(&clean, Category::Bottle, DefectType::Hole, s);
            let (cy, cx) = mask.centroid().unwrap();
            if cy + 0.5 < 64.0 / 3.0 && cx + 0.5 < 64.0 / 3.0 {
                assert_eq!(meta.location.phrase(), "upper left");
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn dataset_partition_and_balance() {
        let spec = DatasetSpec {
            per_seen: 6,
            per_unseen: 4,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec);
        assert_eq!(ds.len(), 3 * 6 + 4);
        for s in &ds {
            assert_eq!(Some(s.split), spec.split_of(s.category));
            assert_eq!(s.is_anomalous(), !s.mask.is_empty());
            let clean = generate_texture_image(s.category, s.texture_seed);
            let changed: Vec<bool> = clean.data().iter().zip(s.image.data()).map(|(a, b)| a != b).collect();
            assert_eq!(changed, s.mask.bits());
        }
        assert_eq!(ds, generate_dataset(&spec));
    }
}
