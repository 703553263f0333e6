//! Training-time augmentation: random horizontal flip (p = 0.5) and random
//! crop with 4-pixel zero padding. Deterministic given the rng state.

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CROP_PAD: usize = 4;

/// Flip one [3,H,W] image in place around the vertical axis.
pub fn flip_horizontal(img: &mut [f32], h: usize, w: usize) {
    for c in 0..3 {
        for y in 0..h {
            let row = &mut img[(c * h + y) * w..(c * h + y + 1) * w];
            row.reverse();
        }
    }
}

/// Shift one image by (dy, dx) measured from the zero-padded top-left crop
/// origin; offset (CROP_PAD, CROP_PAD) is the identity.
pub fn crop_shift(img: &[f32], h: usize, w: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * h * w];
    let (dy, dx) = (dy as isize - CROP_PAD as isize, dx as isize - CROP_PAD as isize);
    for c in 0..3 {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(c * h + y) * w + x] = img[(c * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Apply flip + crop to every image of a [B,3,H,W] batch.
pub fn augment_batch(batch: &mut Tensor<f32>, rng: &mut Rng) {
    let dims = batch.dims().to_vec();
    let (b, h, w) = (dims[0], dims[2], dims[3]);
    let per = 3 * h * w;
    for i in 0..b {
        let flip = rng.bernoulli(0.5);
        let dy = rng.below(2 * CROP_PAD + 1);
        let dx = rng.below(2 * CROP_PAD + 1);
        let img = &mut batch.data_mut()[i * per..(i + 1) * per];
        if flip {
            flip_horizontal(img, h, w);
        }
        if dy != CROP_PAD || dx != CROP_PAD {
            let shifted = crop_shift(img, h, w, dy, dx);
            img.copy_from_slice(&shifted);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_twice_is_identity() {
        let mut rng = Rng::new(1);
        let orig: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.normal() as f32).collect();
        let mut img = orig.clone();
        flip_horizontal(&mut img, 8, 8);
        assert_ne!(img, orig);
        flip_horizontal(&mut img, 8, 8);
        assert_eq!(img, orig);
    }

    #[test]
    fn center_crop_is_identity() {
        let mut rng = Rng::new(2);
        let img: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.normal() as f32).collect();
        let out = crop_shift(&img, 8, 8, CROP_PAD, CROP_PAD);
        assert_eq!(out, img);
    }

    #[test]
    fn shifted_crop_zero_pads_the_border() {
        let img = vec![1.0f32; 3 * 4 * 4];
        let out = crop_shift(&img, 4, 4, CROP_PAD + 1, CROP_PAD);
        // crop origin one row below center: the last output row reads from
        // the zero padding, the first from image row 1
        for c in 0..3 {
            for x in 0..4 {
                assert_eq!(out[(c * 4 + 3) * 4 + x], 0.0);
                assert_eq!(out[(c * 4) * 4 + x], 1.0);
            }
        }
    }

    #[test]
    fn flip_frequency_is_half() {
        let mut rng = Rng::new(3);
        let n = 10_000;
        let flips = (0..n).filter(|_| rng.bernoulli(0.5)).count();
        let rate = flips as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn augment_is_deterministic_for_equal_rng_state() {
        let mut rng = Rng::new(4);
        let mut a = Tensor::<f32>::randn(&[4, 3, 8, 8], 1.0, &mut rng);
        let mut b = a.clone();
        let mut r1 = Rng::new(99);
        let mut r2 = Rng::new(99);
        augment_batch(&mut a, &mut r1);
        augment_batch(&mut b, &mut r2);
        assert_eq!(a.data(), b.data());
    }
}
