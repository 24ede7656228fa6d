//! Structural and histogram similarity used to pick a normal reference image.

use crate::image::{Image, ImageError};

use super::SynthError;

pub const HIST_BINS: usize = 32;
const WINDOW: usize = 8;
const STRIDE: usize = 4;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const COEFF_FLOOR: f64 = 1e-12;

/// Mean local SSIM over 8×8 windows placed every 4 pixels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, ImageError> {
    if a.dims() != b.dims() {
        return Err(ImageError::SizeMismatch(a.dims(), b.dims()));
    }
    let (h, w) = a.dims();
    if h < WINDOW || w < WINDOW {
        return Err(ImageError::SizeMismatch(a.dims(), (WINDOW, WINDOW)));
    }
    let n = (WINDOW * WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in (0..=h - WINDOW).step_by(STRIDE) {
        for x0 in (0..=w - WINDOW).step_by(STRIDE) {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + WINDOW {
                for x in x0..x0 + WINDOW {
                    sa += a.get(y, x);
                    sb += b.get(y, x);
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in y0..y0 + WINDOW {
                for x in x0..x0 + WINDOW {
                    let (da, db) = (a.get(y, x) - ma, b.get(y, x) - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Normalised 32-bin intensity histogram.
pub fn histogram(img: &Image) -> Vec<f64> {
    let mut h = vec![0.0; HIST_BINS];
    for &v in img.data() {
        h[((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1.0;
    }
    let n = img.data().len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// `−ln Σ √(pᵢ qᵢ)` with the coefficient clamped below at 1e-12.
pub fn bhattacharyya_hist(p: &[f64], q: &[f64]) -> f64 {
    let bc: f64 = p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum();
    -bc.max(COEFF_FLOOR).ln()
}

pub fn bhattacharyya(a: &Image, b: &Image) -> f64 {
    bhattacharyya_hist(&histogram(a), &histogram(b))
}

/// Index of the pool image maximising `ssim − bhattacharyya`; the lowest
/// index wins ties.
pub fn select_reference(query: &Image, pool: &[Image]) -> Result<usize, SynthError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in pool.iter().enumerate() {
        let s = ssim(query, cand)? - bhattacharyya(query, cand);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(SynthError::EmptyPool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_texture_image, Category};

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let a = generate_texture_image(Category::Stripes, 4);
        let b = generate_texture_image(Category::Checker, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.5);
        assert!(ssim(&a, &Image::filled(32, 32, 0.5)).is_err());
    }

    #[test]
    fn bhattacharyya_closed_forms() {
        assert_eq!(bhattacharyya_hist(&[0.5, 0.5], &[0.5, 0.5]).abs(), 0.0);
        let expect = -(0.5f64.sqrt()).ln();
        assert!((bhattacharyya_hist(&[0.5, 0.5], &[1.0, 0.0]) - expect).abs() < 1e-15);
        let far = bhattacharyya_hist(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((far - 1e12f64.ln()).abs() < 1e-9);
        let a = generate_texture_image(Category::Blobs, 2);
        assert!(bhattacharyya(&a, &a).abs() < 1e-12);
    }

    #[test]
    fn selection_rules() {
        let pool: Vec<Image> = (0..5).map(|s| generate_texture_image(Category::Mesh, s)).collect();
        assert_eq!(select_reference(&pool[3], &pool).unwrap(), 3);
        assert_eq!(select_reference(&pool[3], &pool[..1]).unwrap(), 0);
        assert!(matches!(select_reference(&pool[0], &[]), Err(SynthError::EmptyPool)));
        let twins = vec![pool[1].clone(), pool[1].clone()];
        assert_eq!(select_reference(&pool[1], &twins).unwrap(), 0);
    }
}
