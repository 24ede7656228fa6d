//! Frozen stand-ins for the semantic and pixel image encoders, and the
//! trainable projections into the language-model width.
//!
//! The semantic encoder summarises each 8×8 patch by its mean, spread and
//! directional gradient energy and lifts those through a fixed random
//! `tanh` layer. The pixel encoder keeps the raw 4×4 block and adds
//! contrast channels measured against the median of the surrounding 7×7
//! blocks, so a block's features depend on pixels within three blocks of it
//! and nowhere else.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::kernel::{Graph, KernelError, Tensor, Var};
use crate::nn::Linear;
use crate::params::{ParamError, ParamStore};
use crate::seed;

pub const SEMANTIC_GRID: usize = 8;
pub const SEMANTIC_DIM: usize = 48;
pub const PIXEL_GRID: usize = 16;
pub const PIXEL_DIM: usize = 32;
pub const LLM_DIM: usize = 64;
pub const DEFAULT_ENCODER_SEED: u64 = 0x5eed;

const SEMANTIC_STATS: usize = 4;
const PIXEL_INPUTS: usize = 23;
/// Half-width, in blocks, of the neighbourhood used for pixel contrast.
pub const CONTRAST_RADIUS: usize = 3;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("feature dim {found}, expected {expected}")]
    Dim { expected: usize, found: usize },
}

/// Patch features with their grid layout; row `r * cols + c` is patch
/// `(r, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub grid: (usize, usize),
    pub data: Tensor,
}

impl FeatureMap {
    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// Both frozen encoders, determined entirely by their seed.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub seed: u64,
    semantic_w: Vec<f64>,
    semantic_b: Vec<f64>,
    pixel_w: Vec<f64>,
    image_size: usize,
}

impl Encoders {
    pub fn new(seed: u64, image_size: usize) -> Self {
        let mut rng = seed::rng(seed, &[0xe2c]);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let semantic_w = draw(SEMANTIC_STATS * SEMANTIC_DIM, 1.5);
        let semantic_b = draw(SEMANTIC_DIM, 0.5);
        let pixel_w = draw(PIXEL_INPUTS * PIXEL_DIM, 1.0 / (PIXEL_INPUTS as f64).sqrt());
        Self {
            seed,
            semantic_w,
            semantic_b,
            pixel_w,
            image_size,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn encode_semantic(&self, img: &Image) -> Result<FeatureMap, EncoderError> {
        img.ensure_square(self.image_size)?;
        let p = self.image_size / SEMANTIC_GRID;
        let mut data = Vec::with_capacity(SEMANTIC_GRID * SEMANTIC_GRID * SEMANTIC_DIM);
        for gy in 0..SEMANTIC_GRID {
            for gx in 0..SEMANTIC_GRID {
                let stats = patch_stats(img, gy * p, gx * p, p);
                for j in 0..SEMANTIC_DIM {
                    let mut z = self.semantic_b[j];
                    for (i, s) in stats.iter().enumerate() {
                        z += s * self.semantic_w[i * SEMANTIC_DIM + j];
                    }
                    data.push(z.tanh());
                }
            }
        }
        Ok(FeatureMap {
            grid: (SEMANTIC_GRID, SEMANTIC_GRID),
            data: Tensor::new(&[SEMANTIC_GRID * SEMANTIC_GRID, SEMANTIC_DIM], data)
                .expect("shape"),
        })
    }

    pub fn encode_pixel(&self, img: &Image) -> Result<FeatureMap, EncoderError> {
        img.ensure_square(self.image_size)?;
        let g = PIXEL_GRID;
        let b = self.image_size / g;
        let mut means = vec![0.0; g * g];
        let mut stds = vec![0.0; g * g];
        for gy in 0..g {
            for gx in 0..g {
                let (m, s) = block_moments(img, gy * b, gx * b, b);
                means[gy * g + gx] = m;
                stds[gy * g + gx] = s;
            }
        }
        let mut data = Vec::with_capacity(g * g * PIXEL_DIM);
        let mut u = Vec::with_capacity(PIXEL_INPUTS);
        for gy in 0..g {
            for gx in 0..g {
                let (nm, mad, ns) = neighbourhood(&means, &stds, gy, gx);
                let scale = mad + 0.02;
                let m = means[gy * g + gx];
                let s = stds[gy * g + gx];
                u.clear();
                let (mut lo, mut hi) = (f64::MAX, f64::MIN);
                for y in gy * b..(gy + 1) * b {
                    for x in gx * b..(gx + 1) * b {
                        let v = img.get(y, x);
                        lo = lo.min(v);
                        hi = hi.max(v);
                        u.push(v - 0.5);
                    }
                }
                let c = (m - nm) / scale;
                u.push(m - 0.5);
                u.push(4.0 * s);
                u.push((c / 2.0).tanh());
                u.push((c.abs() / 2.0).tanh());
                u.push(((s - ns) / (ns + 0.02) / 2.0).tanh());
                u.push(((lo - nm) / scale / 2.0).tanh());
                u.push(((hi - nm) / scale / 2.0).tanh());
                debug_assert_eq!(u.len(), PIXEL_INPUTS);
                for j in 0..PIXEL_DIM {
                    let z: f64 = u
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * self.pixel_w[i * PIXEL_DIM + j])
                        .sum();
                    data.push(z);
                }
            }
        }
        Ok(FeatureMap {
            grid: (g, g),
            data: Tensor::new(&[g * g, PIXEL_DIM], data).expect("shape"),
        })
    }
}

/// `[mean − ½, 4·std, 4·√E_x, 4·√E_y]` over a `p × p` patch, where `E_x`,
/// `E_y` are mean squared forward differences inside the patch.
fn patch_stats(img: &Image, y0: usize, x0: usize, p: usize) -> [f64; SEMANTIC_STATS] {
    let (m, s) = block_moments(img, y0, x0, p);
    let (mut ex, mut ey) = (0.0, 0.0);
    for y in y0..y0 + p {
        for x in x0..x0 + p {
            if x + 1 < x0 + p {
                ex += (img.get(y, x + 1) - img.get(y, x)).powi(2);
            }
            if y + 1 < y0 + p {
                ey += (img.get(y + 1, x) - img.get(y, x)).powi(2);
            }
        }
    }
    let pairs = (p * (p - 1)) as f64;
    [m - 0.5, 4.0 * s, 4.0 * (ex / pairs).sqrt(), 4.0 * (ey / pairs).sqrt()]
}

fn block_moments(img: &Image, y0: usize, x0: usize, b: usize) -> (f64, f64) {
    let n = (b * b) as f64;
    let mut sum = 0.0;
    for y in y0..y0 + b {
        for x in x0..x0 + b {
            sum += img.get(y, x);
        }
    }
    let m = sum / n;
    let mut var = 0.0;
    for y in y0..y0 + b {
        for x in x0..x0 + b {
            var += (img.get(y, x) - m).powi(2);
        }
    }
    (m, (var / n).sqrt())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median block mean, median absolute deviation of block means and median
/// block std over the (border-clipped) neighbourhood of `(gy, gx)`.
fn neighbourhood(means: &[f64], stds: &[f64], gy: usize, gx: usize) -> (f64, f64, f64) {
    let g = PIXEL_GRID;
    let r = CONTRAST_RADIUS;
    let mut ms = Vec::with_capacity((2 * r + 1).pow(2));
    let mut ss = Vec::with_capacity(ms.capacity());
    for y in gy.saturating_sub(r)..(gy + r + 1).min(g) {
        for x in gx.saturating_sub(r)..(gx + r + 1).min(g) {
            ms.push(means[y * g + x]);
            ss.push(stds[y * g + x]);
        }
    }
    let nm = median(&mut ms);
    let mut dev: Vec<f64> = ms.iter().map(|v| (v - nm).abs()).collect();
    (nm, median(&mut dev), median(&mut ss))
}

/// Trainable affine maps from the native encoder widths to the language-model
/// width.
#[derive(Clone, Debug)]
pub struct Projections {
    pub semantic: Linear,
    pub pixel: Linear,
}

impl Projections {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, llm_dim: usize) -> Result<Self, ParamError> {
        Ok(Self {
            semantic: Linear::new(store, rng, "proj.semantic", SEMANTIC_DIM, llm_dim, true)?,
            pixel: Linear::new(store, rng, "proj.pixel", PIXEL_DIM, llm_dim, true)?,
        })
    }

    pub fn project_semantic<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        f: Var,
    ) -> Result<Var, KernelError> {
        self.semantic.forward(g, store, f)
    }

    pub fn project_pixel<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        f: Var,
    ) -> Result<Var, KernelError> {
        self.pixel.forward(g, store, f)
    }
}

/// Eager projection of a feature map, for inspection outside training.
pub fn project(store: &ParamStore, layer: &Linear, f: &FeatureMap) -> Result<FeatureMap, EncoderError> {
    if f.dim() != layer.in_dim {
        return Err(EncoderError::Dim {
            expected: layer.in_dim,
            found: f.dim(),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(f.data.clone());
    let y = layer.forward(&mut g, store, x).expect("dims checked");
    Ok(FeatureMap {
        grid: f.grid,
        data: g.value(y).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, FdConfig};
    use crate::synth::{generate_texture_image, Category};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc() -> Encoders {
        Encoders::new(DEFAULT_ENCODER_SEED, 64)
    }

    #[test]
    fn deterministic_and_shaped() {
        let img = generate_texture_image(Category::Checker, 1);
        let e = enc();
        assert_eq!(e.encode_semantic(&img).unwrap(), enc().encode_semantic(&img).unwrap());
        let p = e.encode_pixel(&img).unwrap();
        assert_eq!(p, e.encode_pixel(&img).unwrap());
        assert_eq!((p.grid, p.tokens(), p.dim()), ((16, 16), 256, 32));
        assert!(e.encode_pixel(&Image::filled(32, 32, 0.0)).is_err());
    }

    #[test]
    fn zero_image_semantic_rows_are_constant() {
        let f = enc().encode_semantic(&Image::filled(64, 64, 0.0)).unwrap();
        let row0 = f.data.row(0).to_vec();
        let expect: Vec<f64> = (0..SEMANTIC_DIM)
            .map(|j| {
                let s = [-0.5, 0.0, 0.0, 0.0];
                let e = enc();
                (e.semantic_b[j] + s[0] * e.semantic_w[j]).tanh()
            })
            .collect();
        assert_eq!(row0, expect);
        for r in 0..f.tokens() {
            assert_eq!(f.data.row(r), &row0[..]);
        }
    }

    fn changed_rows(a: &FeatureMap, b: &FeatureMap) -> Vec<usize> {
        (0..a.tokens()).filter(|&r| a.data.row(r) != b.data.row(r)).collect()
    }

    #[test]
    fn semantic_patch_locality() {
        let img = generate_texture_image(Category::Stripes, 2);
        let mut other = img.clone();
        other.set(20, 44, 1.0); // patch (2, 5)
        let e = enc();
        let rows = changed_rows(&e.encode_semantic(&img).unwrap(), &e.encode_semantic(&other).unwrap());
        assert_eq!(rows, vec![2 * 8 + 5]);
    }

    #[test]
    fn pixel_locality_follows_contrast_radius() {
        let img = generate_texture_image(Category::Speckle, 3);
        let mut other = img.clone();
        for y in 24..28 {
            for x in 8..12 {
                other.set(y, x, 0.02); // block (6, 2)
            }
        }
        let e = enc();
        let rows = changed_rows(&e.encode_pixel(&img).unwrap(), &e.encode_pixel(&other).unwrap());
        assert!(rows.contains(&(6 * 16 + 2)));
        for r in rows {
            let (gy, gx) = (r / 16, r % 16);
            assert!(gy.abs_diff(6) <= CONTRAST_RADIUS && gx.abs_diff(2) <= CONTRAST_RADIUS);
        }
    }

    #[test]
    fn projections_shape_zero_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let proj = Projections::new(&mut store, &mut rng, LLM_DIM).unwrap();
        let f = enc().encode_pixel(&generate_texture_image(Category::Mesh, 0)).unwrap();
        let out = project(&store, &proj.pixel, &f).unwrap();
        assert_eq!((out.grid, out.dim()), ((16, 16), LLM_DIM));
        let sem = enc().encode_semantic(&generate_texture_image(Category::Mesh, 0)).unwrap();
        assert_eq!(project(&store, &proj.semantic, &sem).unwrap().dim(), LLM_DIM);
        assert!(project(&store, &proj.semantic, &f).is_err());

        for id in proj.pixel.params() {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
        let zero = project(&store, &proj.pixel, &f).unwrap();
        assert!(zero.data.data().iter().all(|v| *v == 0.0));

        let mut store = ParamStore::new();
        let proj = Projections::new(&mut store, &mut rng, LLM_DIM).unwrap();
        let rows = Tensor::new(&[3, SEMANTIC_DIM], sem.data.data()[..3 * SEMANTIC_DIM].to_vec()).unwrap();
        let ids = proj.semantic.params();
        let report = check_params(&store, &ids, FdConfig::default(), |_, n| (0..n).collect(), |g, s| {
            let x = g.constant(rows.clone());
            let y = proj.project_semantic(g, s, x)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(report.checked, SEMANTIC_DIM * LLM_DIM + LLM_DIM);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
